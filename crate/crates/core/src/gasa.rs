//! Global axial self-attention block.
//!
//! For an input feature map `X[C, W, H, D]` the block
//!
//! 1. projects every W-slice, H-slice and D-slice to one `d_model` token with a
//!    convolution whose kernel covers the whole orthogonal plane, giving
//!    `w + h + d` tokens ordered W, H, D;
//! 2. runs multi-head self-attention over those tokens (no MLP);
//! 3. adds a learnable token-indexed positional table, before or after
//!    attention depending on [`PeMode`];
//! 4. broadcasts each axis group back over its slice plane and concatenates
//!    the three groups into `3 * d_model` channels;
//! 5. concatenates the result behind the untouched input channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dOpts, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{AffineParams, Bound, ConvParams, LinearParams, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    BeforeMhsa,
    #[default]
    AfterMhsa,
}

impl PeMode {
    pub fn label(self) -> &'static str {
        match self {
            PeMode::None => "none",
            PeMode::BeforeMhsa => "before",
            PeMode::AfterMhsa => "after",
        }
    }
}

impl std::str::FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeMode::None),
            "before" => Ok(PeMode::BeforeMhsa),
            "after" => Ok(PeMode::AfterMhsa),
            other => Err(Error::InvalidConfig(format!("unknown pe mode '{other}'"))),
        }
    }
}

/// Hyperparameters of the block that do not depend on where it is placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasaOptions {
    pub d_model: usize,
    pub heads: usize,
    pub pe_mode: PeMode,
    pub use_layer_norm: bool,
    pub dropout_p: f64,
}

impl Default for GasaOptions {
    fn default() -> Self {
        Self {
            d_model: 25,
            heads: 5,
            pe_mode: PeMode::AfterMhsa,
            use_layer_norm: false,
            dropout_p: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasaConfig {
    pub options: GasaOptions,
    pub in_channels: usize,
    pub spatial: [usize; 3],
}

impl GasaConfig {
    pub fn new(options: GasaOptions, in_channels: usize, spatial: [usize; 3]) -> Result<Self> {
        let cfg = Self {
            options,
            in_channels,
            spatial,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.options;
        if o.d_model == 0 || o.heads == 0 || o.d_model % o.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                o.d_model, o.heads
            )));
        }
        if !(0.0..1.0).contains(&o.dropout_p) {
            return Err(Error::InvalidProbability(o.dropout_p));
        }
        if self.in_channels == 0 || self.spatial.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "in_channels {} / spatial {:?} must be positive",
                self.in_channels, self.spatial
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.options.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.options.d_model / self.options.heads
    }

    pub fn token_count(&self) -> usize {
        self.spatial.iter().sum()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + 3 * self.options.d_model
    }

    /// Kernel extents of the projection for `axis`: 1 along the axis, the full
    /// extent along the other two.
    pub fn projection_kernel(&self, axis: usize) -> [usize; 3] {
        let mut k = self.spatial;
        k[axis] = 1;
        k
    }
}

/// Learnable weights of one block, as handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GasaParams {
    pub proj: [ConvParams; 3],
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    /// Layer norms after the query, key and value projections.
    pub qkv_norm: Option<[AffineParams; 3]>,
    pub pe: ParamId,
}

impl GasaParams {
    pub fn init(cfg: &GasaConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Self {
        let dm = cfg.d_model();
        let proj = [0, 1, 2].map(|axis| {
            ConvParams::init(
                store,
                &format!("{prefix}.proj_{}", ["w", "h", "d"][axis]),
                cfg.in_channels,
                dm,
                cfg.projection_kernel(axis),
                rng,
            )
        });
        let query = LinearParams::init(store, &format!("{prefix}.q"), dm, dm, rng);
        let key = LinearParams::init(store, &format!("{prefix}.k"), dm, dm, rng);
        let value = LinearParams::init(store, &format!("{prefix}.v"), dm, dm, rng);
        let output = LinearParams::init(store, &format!("{prefix}.o"), dm, dm, rng);
        let qkv_norm = cfg.options.use_layer_norm.then(|| {
            ["q", "k", "v"].map(|n| AffineParams::init(store, &format!("{prefix}.ln_{n}"), dm))
        });
        let pe = store.add(format!("{prefix}.pe"), Tensor::zeros([cfg.token_count(), dm]));
        Self {
            proj,
            query,
            key,
            value,
            output,
            qkv_norm,
            pe,
        }
    }
}

/// Exact learnable-scalar count of one block.
pub fn count_gasa_params(cfg: &GasaConfig) -> usize {
    let dm = cfg.d_model();
    let projections: usize = (0..3)
        .map(|a| ConvParams::count(cfg.in_channels, dm, cfg.projection_kernel(a)))
        .sum();
    let attention = 4 * LinearParams::count(dm, dm);
    let norms = if cfg.options.use_layer_norm { 3 * 2 * dm } else { 0 };
    projections + attention + norms + cfg.token_count() * dm
}

/// Multiply-add FLOPs (2 per MAC, plus bias adds) of projections and attention.
pub fn count_gasa_flops(cfg: &GasaConfig) -> u64 {
    let dm = cfg.d_model() as u64;
    let c = cfg.in_channels as u64;
    let [w, h, d] = cfg.spatial.map(|v| v as u64);
    let n = w + h + d;
    let projections = [(w, h * d), (h, w * d), (d, w * h)]
        .iter()
        .map(|&(len, plane)| 2 * c * plane * dm * len + dm * len)
        .sum::<u64>();
    let linears = 4 * (2 * n * dm * dm + n * dm);
    let attention = 4 * n * n * dm;
    projections + linears + attention
}

/// Axial tokens in W, H, D order.
#[derive(Clone, Copy, Debug)]
pub struct PatchSequence {
    /// `[w + h + d, d_model]`
    pub tokens: Var,
    pub axis_offsets: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct MhsaOutput {
    /// `[tokens, d_model]`
    pub out: Var,
    /// Per-head `[tokens, tokens]` attention weights.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GasaBlock {
    pub cfg: GasaConfig,
    pub params: GasaParams,
}

impl GasaBlock {
    pub fn new(cfg: GasaConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Self {
        let params = GasaParams::init(&cfg, store, prefix, rng);
        Self { cfg, params }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let [c, w, h, d] = dims4(&tape.shape(x))?;
        if c != self.cfg.in_channels || [w, h, d] != self.cfg.spatial {
            return Err(Error::shape(format!(
                "block configured for [{}, {:?}], got [{c}, {w}, {h}, {d}]",
                self.cfg.in_channels, self.cfg.spatial
            )));
        }
        Ok(())
    }

    pub fn axial_project(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<PatchSequence> {
        self.check_input(tape, x)?;
        let dm = self.cfg.d_model();
        let mut groups = Vec::with_capacity(3);
        for (axis, proj) in self.params.proj.iter().enumerate() {
            let len = self.cfg.spatial[axis];
            let y = tape.conv3d(
                x,
                bound.var(proj.weight),
                bound.var(proj.bias),
                Conv3dOpts::default(),
            )?;
            // [dm, w, 1, 1] (or the H / D analogue) -> [len, dm]
            let y = tape.reshape(y, &[dm, len])?;
            groups.push(tape.transpose(y)?);
        }
        let [w, h, _] = self.cfg.spatial;
        Ok(PatchSequence {
            tokens: tape.concat(&groups, 0)?,
            axis_offsets: [0, w, w + h],
        })
    }

    pub fn mhsa(
        &self,
        tape: &Tape,
        bound: &Bound,
        tokens: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<MhsaOutput> {
        let shape = tape.shape(tokens);
        let dm = self.cfg.d_model();
        if shape.len() != 2 || shape[1] != dm {
            return Err(Error::shape(format!(
                "mhsa expects [n, {dm}] tokens, got {shape:?}"
            )));
        }
        let p = &self.params;
        let mut q = p.query.forward(tape, bound, tokens)?;
        let mut k = p.key.forward(tape, bound, tokens)?;
        let mut v = p.value.forward(tape, bound, tokens)?;
        if let Some([lq, lk, lv]) = &p.qkv_norm {
            q = tape.layer_norm(q, bound.var(lq.gamma), bound.var(lq.beta))?;
            k = tape.layer_norm(k, bound.var(lk.gamma), bound.var(lk.beta))?;
            v = tape.layer_norm(v, bound.var(lv.gamma), bound.var(lv.beta))?;
        }
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.options.heads);
        let mut weights = Vec::with_capacity(self.cfg.options.heads);
        for h in 0..self.cfg.options.heads {
            let qh = tape.narrow(q, 1, h * dk, dk)?;
            let kh = tape.narrow(k, 1, h * dk, dk)?;
            let vh = tape.narrow(v, 1, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_lastdim(scores)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let out = p.output.forward(tape, bound, merged)?;
        let out = tape.dropout(out, self.cfg.options.dropout_p, training, rng)?;
        Ok(MhsaOutput { out, weights })
    }

    /// Broadcasts each axis group over its slice plane: `[n, dm] -> [3 dm, W, H, D]`.
    pub fn axial_expand(&self, tape: &Tape, att: Var) -> Result<Var> {
        axial_expand(tape, att, self.cfg.spatial)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let patches = self.axial_project(tape, bound, x)?;
        let pe = bound.var(self.params.pe);
        let mode = self.cfg.options.pe_mode;
        let mut tokens = patches.tokens;
        if mode == PeMode::BeforeMhsa {
            tokens = add_positional_embedding(tape, tokens, pe)?;
        }
        let mut att = self.mhsa(tape, bound, tokens, training, rng)?.out;
        if mode == PeMode::AfterMhsa {
            att = add_positional_embedding(tape, att, pe)?;
        }
        let feature = self.axial_expand(tape, att)?;
        tape.concat(&[x, feature], 0)
    }
}

/// Free-standing form of [`GasaBlock::axial_expand`].
pub fn axial_expand(tape: &Tape, att: Var, spatial: [usize; 3]) -> Result<Var> {
    let shape = tape.shape(att);
    let n: usize = spatial.iter().sum();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::shape(format!(
            "axial_expand expects [{n}, d_model], got {shape:?}"
        )));
    }
    let mut offset = 0;
    let mut groups = Vec::with_capacity(3);
    for (axis, &len) in spatial.iter().enumerate() {
        let rows = tape.narrow(att, 0, offset, len)?;
        let cols = tape.transpose(rows)?;
        groups.push(tape.expand_axis(cols, axis, spatial)?);
        offset += len;
    }
    tape.concat(&groups, 0)
}

/// Elementwise token + table addition.
pub fn add_positional_embedding(tape: &Tape, tokens: Var, pe: Var) -> Result<Var> {
    tape.add(tokens, pe)
}
