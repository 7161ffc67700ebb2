//! Picks a target spacing for an anisotropic cohort and resamples one case.

use gasa::preprocess::{resample_image, resample_labels, separate_axis, target_spacing};
use gasa::synth::{generate_phantom, PhantomSpec};

fn main() -> gasa::Result<()> {
    let spacings: Vec<[f64; 3]> = (0..9).map(|i| [0.8, 0.8, 2.0 + 0.5 * i as f64]).collect();
    let target = target_spacing(&spacings)?;
    println!("target spacing {target:?}");

    let spec = PhantomSpec {
        size: [40, 40, 8],
        anisotropic_spacing: Some([0.8, 0.8, 5.0]),
        ..PhantomSpec::default()
    };
    let (img, lab) = generate_phantom(&spec, 0)?;
    println!("separate axis {:?}", separate_axis(img.spacing, img.spatial()));
    let img2 = resample_image(&img, target)?;
    let lab2 = resample_labels(&lab, target, 3)?;
    println!("{:?} at {:?} -> {:?}", img.spatial(), img.spacing, img2.spatial());
    for (name, v) in [("before", &lab), ("after", &lab2)] {
        let fg = v.label_data()?.iter().filter(|&&l| l > 0).count() as f64;
        let ml = fg * v.spacing.iter().product::<f64>() / 1000.0;
        println!("{name}: foreground volume {ml:.2} ml");
    }
    Ok(())
}
