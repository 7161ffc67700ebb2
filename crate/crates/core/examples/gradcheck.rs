//! Finite-difference check of a small conv / norm / attention-style graph.

use gasa::autodiff::Conv3dOpts;
use gasa::gradcheck::{check, GradCheckOpts};
use gasa::{Rng, Tensor};

fn main() -> gasa::Result<()> {
    let mut rng = Rng::new(3);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0));
    let inputs = [rand(&[2, 5, 4, 3]), rand(&[3, 2, 3, 3, 3]), rand(&[3])];
    let report = check(&inputs, GradCheckOpts::default(), |t, v| {
        let y = t.conv3d(v[0], v[1], v[2], Conv3dOpts::default())?;
        let y = t.leaky_relu(y, 0.01);
        let y = t.softmax(y, 0)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    })?;
    println!(
        "checked {} partials, max relative error {:.2e}",
        report.checked, report.max_rel_err
    );
    if let Some((input, elem, a, n)) = report.worst {
        println!("worst: input {input} element {elem}: analytic {a:.6e} numeric {n:.6e}");
    }
    Ok(())
}
