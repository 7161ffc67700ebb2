//! Generates one synthetic organ / tumour phantom and writes it to disk.

use gasa::synth::{generate_phantom, PhantomSpec};
use gasa::volume::{read_volume, write_volume};

fn main() -> gasa::Result<()> {
    let spec = PhantomSpec { seed: 7, ..PhantomSpec::default() };
    let (image, labels) = generate_phantom(&spec, 0)?;
    let lab = labels.label_data()?;
    let img = image.to_f64();
    for c in 0..spec.num_classes as u16 {
        let vals: Vec<f64> = img.iter().zip(lab).filter(|(_, &l)| l == c).map(|(&v, _)| v).collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        println!("class {c}: {:>6} voxels, mean intensity {mean:.1}", vals.len());
    }

    let dir = std::env::temp_dir().join("gasa_phantom_example");
    let path = dir.join("case_000_image.gvol");
    write_volume(&image, &path)?;
    assert_eq!(read_volume(&path)?, image);
    println!("wrote {}", path.display());
    Ok(())
}
