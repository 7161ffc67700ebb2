//! Compact 3D U-Net with the axial attention block at the bottleneck.
//!
//! Encoder stage `s` is two 3x3x3 conv / instance-norm / leaky-ReLU units,
//! the first strided for `s > 0`. The large variant appends residual blocks
//! after every encoder stage. Each decoder stage upsamples (nearest neighbour
//! plus a pointwise conv unit), concatenates the matching encoder skip, and
//! applies a 3x3x3 conv unit. A 1x1x1 convolution produces class logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dOpts, Tape, Var};
use crate::error::{Error, Result};
use crate::gasa::{count_gasa_flops, count_gasa_params, GasaBlock, GasaConfig, GasaOptions};
use crate::params::{AffineParams, Bound, ConvParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{dims4, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub downsample_stride: usize,
    /// Spatial extent the network (and the block) is built for.
    pub patch_size: [usize; 3],
    pub gasa_enabled: bool,
    pub gasa: GasaOptions,
    pub variant: Variant,
    /// Residual blocks per non-final / final encoder stage in the large variant.
    pub large_res_blocks: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            stage_channels: vec![8, 16, 32],
            downsample_stride: 2,
            patch_size: [16, 16, 16],
            gasa_enabled: true,
            gasa: GasaOptions::default(),
            variant: Variant::Base,
            large_res_blocks: (3, 5),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_channels.len() < 2 {
            return bad("need at least two encoder stages".into());
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.downsample_stride == 0 {
            return bad("downsample stride must be positive".into());
        }
        let total = self.total_stride();
        if self.patch_size.iter().any(|&p| p == 0 || p % total != 0) {
            return bad(format!(
                "patch {:?} not divisible by cumulative stride {total}",
                self.patch_size
            ));
        }
        if self.gasa_enabled {
            self.gasa_config()?;
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.downsample_stride.pow(self.stage_channels.len() as u32 - 1)
    }

    pub fn bottleneck_spatial(&self) -> [usize; 3] {
        self.patch_size.map(|p| p / self.total_stride())
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    pub fn gasa_config(&self) -> Result<GasaConfig> {
        GasaConfig::new(
            self.gasa.clone(),
            self.bottleneck_channels(),
            self.bottleneck_spatial(),
        )
    }

    /// Channels entering the first decoder stage.
    pub fn decoder_input_channels(&self) -> usize {
        if self.gasa_enabled {
            self.bottleneck_channels() + 3 * self.gasa.d_model
        } else {
            self.bottleneck_channels()
        }
    }

    fn res_blocks_after(&self, stage: usize) -> usize {
        match self.variant {
            Variant::Base => 0,
            Variant::Large if stage + 1 == self.stage_channels.len() => self.large_res_blocks.1,
            Variant::Large => self.large_res_blocks.0,
        }
    }
}

const K3: [usize; 3] = [3, 3, 3];

const K1: [usize; 3] = [1, 1, 1];

/// Convolution + instance norm (+ optional leaky ReLU).
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: ConvParams,
    norm: AffineParams,
    kernel: usize,
    stride: usize,
}

impl ConvUnit {
    fn init(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        Self::with_kernel(store, name, cin, cout, 3, stride, rng)
    }

    fn with_kernel(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            conv: ConvParams::init(store, &format!("{name}.conv"), cin, cout, [kernel; 3], rng),
            norm: AffineParams::init(store, &format!("{name}.norm"), cout),
            kernel,
            stride,
        }
    }

    fn count(cin: usize, cout: usize) -> usize {
        Self::count_k(cin, cout, K3)
    }

    fn count_k(cin: usize, cout: usize, kernel: [usize; 3]) -> usize {
        ConvParams::count(cin, cout, kernel) + 2 * cout
    }

    fn forward_linear(&self, tape: &Tape, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv3d(
            x,
            b.var(self.conv.weight),
            b.var(self.conv.bias),
            Conv3dOpts::same(self.kernel, self.stride),
        )?;
        tape.instance_norm(y, b.var(self.norm.gamma), b.var(self.norm.beta))
    }

    fn forward(&self, tape: &Tape, b: &Bound, x: Var) -> Result<Var> {
        let y = self.forward_linear(tape, b, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvUnit,
    b: ConvUnit,
}

impl ResBlock {
    fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = self.a.forward(tape, bound, x)?;
        let y = self.b.forward_linear(tape, bound, y)?;
        let y = tape.add(y, x)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    first: ConvUnit,
    second: ConvUnit,
    residual: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvUnit,
    fuse: ConvUnit,
}

/// Parameters plus the layer layout that indexes them.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: BackboneConfig,
    store: ParamStore,
    encoder: Vec<EncoderStage>,
    gasa: Option<GasaBlock>,
    decoder: Vec<DecoderStage>,
    head: ConvParams,
}

pub fn build_model(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let chans = &cfg.stage_channels;
    let mut encoder = Vec::with_capacity(chans.len());
    let mut cin = cfg.in_channels;
    for (s, &c) in chans.iter().enumerate() {
        let stride = if s == 0 { 1 } else { cfg.downsample_stride };
        let first = ConvUnit::init(&mut store, &format!("enc{s}.a"), cin, c, stride, rng);
        let second = ConvUnit::init(&mut store, &format!("enc{s}.b"), c, c, 1, rng);
        let residual = (0..cfg.res_blocks_after(s))
            .map(|r| ResBlock {
                a: ConvUnit::init(&mut store, &format!("enc{s}.res{r}.a"), c, c, 1, rng),
                b: ConvUnit::init(&mut store, &format!("enc{s}.res{r}.b"), c, c, 1, rng),
            })
            .collect();
        encoder.push(EncoderStage {
            first,
            second,
            residual,
        });
        cin = c;
    }
    let gasa = if cfg.gasa_enabled {
        Some(GasaBlock::new(cfg.gasa_config()?, &mut store, "gasa", rng))
    } else {
        None
    };
    let mut decoder = Vec::with_capacity(chans.len() - 1);
    let mut cin = cfg.decoder_input_channels();
    for s in (0..chans.len() - 1).rev() {
        let c = chans[s];
        decoder.push(DecoderStage {
            up: ConvUnit::with_kernel(&mut store, &format!("dec{s}.up"), cin, c, 1, 1, rng),
            fuse: ConvUnit::init(&mut store, &format!("dec{s}.fuse"), 2 * c, c, 1, rng),
        });
        cin = c;
    }
    let head = ConvParams::init(&mut store, "head", chans[0], cfg.num_classes, [1, 1, 1], rng);
    Ok(Model {
        cfg: cfg.clone(),
        store,
        encoder,
        gasa,
        decoder,
        head,
    })
}

impl Model {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gasa(&self) -> Option<&GasaBlock> {
        self.gasa.as_ref()
    }

    /// Logits `[num_classes, W, H, D]` for an input `[in_channels, W, H, D]`.
    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        let [c, w, h, d] = dims4(&tape.shape(x))?;
        if c != self.cfg.in_channels || [w, h, d] != self.cfg.patch_size {
            return Err(Error::shape(format!(
                "model expects [{}, {:?}], got [{c}, {w}, {h}, {d}]",
                self.cfg.in_channels, self.cfg.patch_size
            )));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = x;
        for stage in &self.encoder {
            y = stage.first.forward(tape, bound, y)?;
            y = stage.second.forward(tape, bound, y)?;
            for r in &stage.residual {
                y = r.forward(tape, bound, y)?;
            }
            skips.push(y);
        }
        skips.pop();
        if let Some(g) = &self.gasa {
            y = g.forward(tape, bound, y, training, rng)?;
        }
        let f = self.cfg.downsample_stride;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            // The pointwise unit commutes with nearest upsampling (instance
            // statistics are unchanged by replication), so it runs first at
            // the coarse resolution.
            let up = stage.up.forward(tape, bound, y)?;
            let up = tape.upsample_nearest(up, [f; 3])?;
            let cat = tape.concat(&[skip, up], 0)?;
            y = stage.fuse.forward(tape, bound, cat)?;
        }
        tape.conv3d(
            y,
            bound.var(self.head.weight),
            bound.var(self.head.bias),
            Conv3dOpts::default(),
        )
    }

    /// Inference-mode logits on a fresh tape.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &bound, xv, false, &mut Rng::new(0))?;
        let out = tape.value(y).clone();
        Ok(out)
    }
}

/// Closed-form learnable-scalar count.
pub fn count_model_params(cfg: &BackboneConfig) -> Result<usize> {
    cfg.validate()?;
    let chans = &cfg.stage_channels;
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for (s, &c) in chans.iter().enumerate() {
        total += ConvUnit::count(cin, c) + ConvUnit::count(c, c);
        total += cfg.res_blocks_after(s) * 2 * ConvUnit::count(c, c);
        cin = c;
    }
    if cfg.gasa_enabled {
        total += count_gasa_params(&cfg.gasa_config()?);
    }
    let mut cin = cfg.decoder_input_channels();
    for s in (0..chans.len() - 1).rev() {
        total += ConvUnit::count_k(cin, chans[s], K1) + ConvUnit::count(2 * chans[s], chans[s]);
        cin = chans[s];
    }
    Ok(total + ConvParams::count(chans[0], cfg.num_classes, K1))
}

/// FLOPs of one 3D convolution: 2 per multiply-add plus one bias add per output.
pub fn conv_flops(cin: usize, cout: usize, kernel: [usize; 3], out_voxels: usize) -> u64 {
    let taps: usize = kernel.iter().product();
    (2 * cin * taps * cout * out_voxels + cout * out_voxels) as u64
}

/// Convolution and matmul FLOPs of one forward pass over `input_spatial`.
pub fn count_model_flops(cfg: &BackboneConfig, input_spatial: [usize; 3]) -> Result<u64> {
    cfg.validate()?;
    let chans = &cfg.stage_channels;
    let vox = |s: [usize; 3]| s.iter().product::<usize>();
    let mut spatial = input_spatial;
    let mut sizes = Vec::with_capacity(chans.len());
    let mut total = 0u64;
    let mut cin = cfg.in_channels;
    for (s, &c) in chans.iter().enumerate() {
        if s > 0 {
            // same-padded 3x3x3 with stride f
            spatial = spatial.map(|e| (e - 1) / cfg.downsample_stride + 1);
        }
        let v = vox(spatial);
        total += conv_flops(cin, c, K3, v) + conv_flops(c, c, K3, v);
        total += cfg.res_blocks_after(s) as u64 * 2 * conv_flops(c, c, K3, v);
        sizes.push(spatial);
        cin = c;
    }
    if cfg.gasa_enabled {
        let g = GasaConfig::new(cfg.gasa.clone(), cfg.bottleneck_channels(), spatial)?;
        total += count_gasa_flops(&g);
    }
    let mut cin = cfg.decoder_input_channels();
    for s in (0..chans.len() - 1).rev() {
        let coarse = vox(sizes[s + 1]);
        let v = vox(sizes[s]);
        total += conv_flops(cin, chans[s], K1, coarse) + conv_flops(2 * chans[s], chans[s], K3, v);
        cin = chans[s];
    }
    Ok(total + conv_flops(chans[0], cfg.num_classes, K1, vox(input_spatial)))
}
