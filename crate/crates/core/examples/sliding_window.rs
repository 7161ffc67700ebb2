//! Patch-based inference over a volume larger than the network input, with
//! and without mirror averaging.

use gasa::backbone::{build_model, BackboneConfig};
use gasa::infer::{argmax_labels, predict, tile_origins, SlidingWindowConfig};
use gasa::synth::{generate_phantom, PhantomSpec};
use gasa::Rng;

fn main() -> gasa::Result<()> {
    let spec = PhantomSpec { size: [28, 24, 20], ..PhantomSpec::default() };
    let (image, _) = generate_phantom(&spec, 0)?;
    let x = image.to_tensor()?;
    let model = build_model(&BackboneConfig::default(), &mut Rng::new(1))?;
    let mut swc = SlidingWindowConfig::default();
    println!("{} windows of {:?}", tile_origins(spec.size, swc.patch_size, swc.overlap).len(), swc.patch_size);
    for tta in [false, true] {
        swc.tta_mirror = tta;
        let probs = predict(&model, &x, &swc)?;
        let labels = argmax_labels(&probs)?;
        let mut counts = [0usize; 3];
        labels.iter().for_each(|&l| counts[l as usize] += 1);
        println!("mirror averaging {tta}: class counts {counts:?} (untrained weights)");
    }
    Ok(())
}
