//! Dice, surface Dice and grouped evaluation of a degraded reference.

use gasa::metrics::{evaluate_case, HecSpec};
use gasa::synth::{generate_phantom, PhantomSpec};
use gasa::volume::Volume;

fn main() -> gasa::Result<()> {
    let spec = PhantomSpec::default();
    let (_, gt) = generate_phantom(&spec, 3)?;
    let [w, h, d] = gt.spatial();
    let lab = gt.label_data()?;
    // Shift the reference one voxel along the first axis.
    let shifted: Vec<u16> = (0..lab.len())
        .map(|f| if f / (h * d) == 0 { 0 } else { lab[f - h * d] })
        .collect();
    let pred = Volume::labels([w, h, d], shifted, gt.spacing)?;
    for tau in [0.0, 1.0, 2.0] {
        let r = evaluate_case(&pred, &gt, 3, Some(&HecSpec::kits()), tau, gt.spacing)?;
        println!("tau {tau}\n{}", r.to_table());
    }
    Ok(())
}
