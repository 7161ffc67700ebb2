//! A small head / width / positional-encoding sweep on tiny phantoms.

use gasa::cli::{ablation_table, cmd_ablate, cmd_synth, RunConfig};

fn main() -> gasa::Result<()> {
    let out = std::env::temp_dir().join("gasa_ablation_example");
    let mut cfg = RunConfig::default();
    cfg.phantom.size = [16; 3];
    cfg.model.patch_size = [16; 3];
    cfg.sliding_window.patch_size = [16; 3];
    cfg.data.n_train = 4;
    cfg.data.n_test = 2;
    cfg.ablation.grid = vec![(2, 10), (5, 25)];
    cfg.ablation.epochs = 2;
    cfg.ablation.iters_per_epoch = 4;
    cfg.validate()?;
    let data = out.join("data");
    cmd_synth(&cfg, &data, &mut std::io::sink())?;
    let cells = cmd_ablate(&cfg, &data, &out, &mut std::io::stdout())?;
    println!("{}", ablation_table(&cells));
    Ok(())
}
