//! Named parameter registry shared by the block, the backbone, the optimizer,
//! and checkpoints.

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        )
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps leaves created elsewhere, in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients after `backward`, zero-filled for parameters the pass never reached.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Convolution weight `[Cout, Cin, kw, kh, kd]` plus bias `[Cout]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            fan_in,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Self { weight, bias }
    }

    pub fn count(cin: usize, cout: usize, kernel: [usize; 3]) -> usize {
        cout * cin * kernel.iter().product::<usize>() + cout
    }
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> crate::Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(y, bound.var(self.bias))
    }

    pub fn count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

/// Scale and shift pair, initialised to the identity.
#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AffineParams {
    pub fn init(store: &mut ParamStore, name: &str, n: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([n])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([n])),
        }
    }
}
