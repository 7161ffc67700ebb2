//! Trains the backbone with and without the attention block on phantoms and
//! compares held-out Dice and surface Dice.

use gasa::backbone::BackboneConfig;
use gasa::infer::SlidingWindowConfig;
use gasa::pipeline::{evaluate_cases, prepare_split, train_model};
use gasa::synth::{make_dataset, PhantomSpec, MANIFEST_NAME};
use gasa::train::TrainConfig;

fn main() -> gasa::Result<()> {
    let dir = std::env::temp_dir().join("gasa_phantoms");
    make_dataset(&PhantomSpec::default(), 16, 4, &dir)?;
    let split = prepare_split(&dir.join(MANIFEST_NAME), 3)?;
    for gasa_enabled in [true, false] {
        let cfg = BackboneConfig { gasa_enabled, ..Default::default() };
        let (trainer, logs) = train_model(&cfg, &TrainConfig::default(), &split.train, |l| {
            if l.epoch % 10 == 0 {
                println!("  epoch {:>3}  loss {:.4}", l.epoch, l.loss);
            }
            Ok(())
        })?;
        let secs: f64 = logs.iter().map(|l| l.seconds).sum();
        let (_, agg) = evaluate_cases(&[trainer.model().clone()], &split.test, &SlidingWindowConfig::default(), 3, None, None)?;
        println!("attention block {gasa_enabled}, trained in {secs:.0}s\n{}", agg.to_table());
    }
    Ok(())
}
