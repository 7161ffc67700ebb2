//! Builds an attention block for a bottleneck feature map and walks through
//! its stages: axial projection, attention, broadcast back to the grid.

use gasa::gasa::{count_gasa_flops, count_gasa_params, GasaBlock, GasaConfig, GasaOptions, PeMode};
use gasa::params::ParamStore;
use gasa::{Rng, Tape, Tensor};

fn main() -> gasa::Result<()> {
    let spatial = [4, 5, 6];
    let mut rng = Rng::new(0);
    for pe_mode in [PeMode::None, PeMode::BeforeMhsa, PeMode::AfterMhsa] {
        let options = GasaOptions { pe_mode, ..GasaOptions::default() };
        let cfg = GasaConfig::new(options, 32, spatial)?;
        let mut store = ParamStore::new();
        let block = GasaBlock::new(cfg.clone(), &mut store, "gasa", &mut rng);

        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn([32, 4, 5, 6], |i| (i as f64 * 0.37).sin()));
        let tokens = block.axial_project(&tape, &bound, x)?;
        let y = block.forward(&tape, &bound, x, false, &mut rng)?;
        println!(
            "pe {:<6} tokens {:?} axis offsets {:?} -> output {:?}, {} params, {} flops",
            pe_mode.label(),
            tape.shape(tokens.tokens),
            tokens.axis_offsets,
            tape.shape(y),
            count_gasa_params(&cfg),
            count_gasa_flops(&cfg),
        );
    }
    Ok(())
}
