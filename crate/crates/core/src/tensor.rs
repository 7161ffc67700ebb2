use crate::error::{Error, Result};

/// Dense row-major f64 array.
///
/// `Tensor` is a plain value. Differentiable computation happens on a
/// [`Tape`](crate::autodiff::Tape), which records operations over `Var`
/// handles and owns the gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements but {} values were given",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            values: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| acc * s + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    /// Reverses the given spatial axes of a `[C, W, H, D]` tensor.
    pub fn flip_spatial(&self, flip: [bool; 3]) -> Result<Self> {
        let [c, w, h, d] = dims4(&self.shape)?;
        let mut out = vec![0.0; self.values.len()];
        for ch in 0..c {
            for i in 0..w {
                let si = if flip[0] { w - 1 - i } else { i };
                for j in 0..h {
                    let sj = if flip[1] { h - 1 - j } else { j };
                    let dst = ((ch * w + i) * h + j) * d;
                    let src = ((ch * w + si) * h + sj) * d;
                    if flip[2] {
                        for k in 0..d {
                            out[dst + k] = self.values[src + d - 1 - k];
                        }
                    } else {
                        out[dst..dst + d].copy_from_slice(&self.values[src..src + d]);
                    }
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            values: out,
        })
    }
}

/// Destructures a rank-4 `[C, W, H, D]` shape.
pub fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[c, w, h, d] => Ok([c, w, h, d]),
        _ => Err(Error::shape(format!("expected [C, W, H, D], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construct_and_mismatch() {
        let t = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert!(matches!(
            Tensor::new([3], vec![0.0, 0.0]),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(Tensor::new([1], vec![0.01]).unwrap().item(), 0.01);
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::from_fn([2, 3, 4, 5], |i| i as f64);
        for mask in 0..8 {
            let f = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            assert_eq!(t.flip_spatial(f).unwrap().flip_spatial(f).unwrap(), t);
        }
        let f = t.flip_spatial([true, false, false]).unwrap();
        assert_eq!(f.at(&[1, 0, 2, 3]), t.at(&[1, 2, 2, 3]));
    }
}
