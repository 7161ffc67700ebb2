//! The `gasa` command line: synth, train, eval, ablate, verify.
//!
//! Every command reads one [`RunConfig`] (JSON file, then flag overrides),
//! validates it in full, and writes its outputs under `--out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
//! 3 verification failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{count_model_params, BackboneConfig, Variant};
use crate::error::{Error, Result};
use crate::gasa::PeMode;
use crate::infer::SlidingWindowConfig;
use crate::metrics::{HecSpec, MetricReport};
use crate::pipeline::{evaluate_cases, prepare_split, train_model};
use crate::synth::{make_dataset, PhantomSpec, MANIFEST_NAME};
use crate::train::{load_checkpoint, save_checkpoint, write_log_line, TrainConfig};
use crate::verify::{run_all, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const TRAIN_LOG_NAME: &str = "train_log.jsonl";
pub const RUN_CONFIG_NAME: &str = "run_config.json";
pub const EVAL_REPORT_NAME: &str = "eval_report.json";
pub const EVAL_TABLE_NAME: &str = "eval_table.md";
pub const ABLATION_DIR: &str = "ablation";
pub const ABLATION_TABLE_NAME: &str = "ablation_table.md";
pub const VERIFY_REPORT_NAME: &str = "verify.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 16, n_test: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// `classes` (one group per foreground label) or `kits`.
    pub hec: String,
    /// Surface tolerance in physical units; one voxel when absent.
    pub tau: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hec: "classes".into(),
            tau: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// `(heads, d_model)` pairs.
    pub grid: Vec<(usize, usize)>,
    pub pe_modes: Vec<PeMode>,
    pub layer_norm: Vec<bool>,
    pub epochs: usize,
    pub iters_per_epoch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: vec![(2, 10), (5, 25), (10, 50), (20, 100)],
            pe_modes: vec![PeMode::None, PeMode::BeforeMhsa, PeMode::AfterMhsa],
            layer_norm: vec![false],
            epochs: 4,
            iters_per_epoch: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub sliding_window: SlidingWindowConfig,
    pub metrics: MetricsConfig,
    pub phantom: PhantomSpec,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sliding_window.validate()?;
        self.phantom.validate()?;
        if self.phantom.num_classes != self.model.num_classes {
            return Err(Error::InvalidConfig(format!(
                "phantom has {} classes but the model predicts {}",
                self.phantom.num_classes, self.model.num_classes
            )));
        }
        if self.sliding_window.patch_size != self.model.patch_size {
            return Err(Error::InvalidConfig(format!(
                "sliding window patch {:?} differs from model patch {:?}",
                self.sliding_window.patch_size, self.model.patch_size
            )));
        }
        self.hec()?;
        if let Some(t) = self.metrics.tau {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig(format!("tau {t} must be >= 0")));
            }
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::InvalidConfig("need at least one train and one test case".into()));
        }
        let a = &self.ablation;
        if a.epochs == 0 || a.iters_per_epoch == 0 {
            return Err(Error::InvalidConfig("ablation epochs and iterations must be >= 1".into()));
        }
        for &(heads, d_model) in &a.grid {
            let mut m = self.model.clone();
            m.gasa.heads = heads;
            m.gasa.d_model = d_model;
            m.gasa_enabled = true;
            m.validate()?;
        }
        Ok(())
    }

    pub fn hec(&self) -> Result<HecSpec> {
        HecSpec::by_name(&self.metrics.hec, self.model.num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Base,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PeArg {
    None,
    Before,
    After,
}

impl From<PeArg> for PeMode {
    fn from(p: PeArg) -> Self {
        match p {
            PeArg::None => PeMode::None,
            PeArg::Before => PeMode::BeforeMhsa,
            PeArg::After => PeMode::AfterMhsa,
        }
    }
}

/// Flags shared by the data and model commands. Flags win over the file.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "gasa_out")]
    pub out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Seed for both phantom generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub gasa: Option<Switch>,
    #[arg(long, value_enum)]
    pub pe: Option<PeArg>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dmodel: Option<usize>,
    #[arg(long, value_enum)]
    pub layernorm: Option<Switch>,
    /// Average predictions over all eight axis mirrorings.
    #[arg(long)]
    pub tta: bool,
    /// Evaluation grouping: `classes` or `kits`.
    #[arg(long)]
    pub hec: Option<String>,
    /// Training epochs (per-cell epochs for `ablate`).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of classes including background.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl RunArgs {
    /// Config file (or defaults) with every given flag applied.
    pub fn resolve(&self, ablate: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.phantom.seed = s;
            cfg.train.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = match v {
                VariantArg::Base => Variant::Base,
                VariantArg::Large => Variant::Large,
            };
        }
        if let Some(g) = self.gasa {
            cfg.model.gasa_enabled = g.on();
        }
        if let Some(p) = self.pe {
            cfg.model.gasa.pe_mode = p.into();
        }
        if let Some(h) = self.heads {
            cfg.model.gasa.heads = h;
        }
        if let Some(d) = self.dmodel {
            cfg.model.gasa.d_model = d;
        }
        if let Some(l) = self.layernorm {
            cfg.model.gasa.use_layer_norm = l.on();
        }
        if self.tta {
            cfg.sliding_window.tta_mirror = true;
        }
        if let Some(h) = &self.hec {
            cfg.metrics.hec = h.clone();
        }
        if let Some(e) = self.epochs {
            if ablate {
                cfg.ablation.epochs = e;
            } else {
                cfg.train.epochs = e;
            }
        }
        if let Some(c) = self.classes {
            cfg.model.num_classes = c;
            cfg.phantom.num_classes = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate; repeat to average several models.
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long = "checkpoint", value_name = "PATH")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON summary into this directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Adds an offset to every analytic gradient; the run must then fail.
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb_gradient: f64,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Write a phantom dataset and its manifest.
    Synth(RunArgs),
    /// Preprocess the training split and train one model.
    Train(RunArgs),
    /// Score checkpoints on the test split.
    Eval(EvalArgs),
    /// Sweep attention heads, width, positional embedding and layer norm.
    Ablate(RunArgs),
    /// Run the built-in oracle checks.
    Verify(VerifyArgs),
}

#[derive(Clone, Debug, Parser)]
#[command(name = "gasa", version, about = "Axial self-attention U-Net for volumetric segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug)]
pub enum Outcome {
    Done,
    VerifyFailed,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(cfg: &RunConfig, data_dir: &Path, out: &mut impl Write) -> Result<()> {
    let manifest = make_dataset(&cfg.phantom, cfg.data.n_train, cfg.data.n_test, data_dir)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(data_dir, e))
}

pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, out: &mut impl Write) -> Result<()> {
    create_dir(out_dir)?;
    write_json(&out_dir.join(RUN_CONFIG_NAME), cfg)?;
    let split = prepare_split(&data_dir.join(MANIFEST_NAME), cfg.model.num_classes)?;
    let log_path = out_dir.join(TRAIN_LOG_NAME);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let (trainer, _) = train_model(&cfg.model, &cfg.train, &split.train, |l| {
        write_log_line(&mut log, l)?;
        writeln!(out, "epoch {:>3}  lr {:.6}  loss {:.5}", l.epoch, l.lr, l.loss).map_err(|e| Error::io(&log_path, e))
    })?;
    save_checkpoint(&trainer.checkpoint(), &out_dir.join(CHECKPOINT_NAME))
}

pub fn cmd_eval(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, checkpoints: &[PathBuf], out: &mut impl Write) -> Result<MetricReport> {
    let default = [out_dir.join(CHECKPOINT_NAME)];
    let paths = if checkpoints.is_empty() { &default[..] } else { checkpoints };
    let models = paths
        .iter()
        .map(|p| load_checkpoint(p)?.build_model())
        .collect::<Result<Vec<_>>>()?;
    let num_classes = models[0].config().num_classes;
    if models.iter().any(|m| m.config().num_classes != num_classes) {
        return Err(Error::InvalidConfig("checkpoints disagree on the class count".into()));
    }
    let mut swc = cfg.sliding_window.clone();
    swc.patch_size = models[0].config().patch_size;
    if models.iter().any(|m| m.config().patch_size != swc.patch_size) {
        return Err(Error::InvalidConfig("checkpoints disagree on the patch size".into()));
    }
    let hec = HecSpec::by_name(&cfg.metrics.hec, num_classes)?;
    let split = prepare_split(&data_dir.join(MANIFEST_NAME), num_classes)?;
    let (cases, agg) = evaluate_cases(&models, &split.test, &swc, num_classes, Some(&hec), cfg.metrics.tau)?;
    create_dir(out_dir)?;
    #[derive(Serialize)]
    struct EvalReport<'a> {
        checkpoints: &'a [PathBuf],
        tta_mirror: bool,
        hec: &'a str,
        aggregate: &'a MetricReport,
        cases: &'a [MetricReport],
    }
    write_json(
        &out_dir.join(EVAL_REPORT_NAME),
        &EvalReport {
            checkpoints: paths,
            tta_mirror: swc.tta_mirror,
            hec: &cfg.metrics.hec,
            aggregate: &agg,
            cases: &cases,
        },
    )?;
    let table = agg.to_table();
    let table_path = out_dir.join(EVAL_TABLE_NAME);
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    write!(out, "{table}").map_err(|e| Error::io(&table_path, e))?;
    Ok(agg)
}

/// One finished ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub heads: usize,
    pub d_model: usize,
    pub pe_mode: PeMode,
    pub layer_norm: bool,
    pub params: usize,
    pub final_loss: f64,
    pub mean_dice: Option<f64>,
    pub mean_nsd: Option<f64>,
}

impl AblationCell {
    pub fn file_name(heads: usize, d_model: usize, pe: PeMode, ln: bool) -> String {
        format!("cell_h{heads}_d{d_model}_pe-{}_ln-{ln}.json", pe.label())
    }
}

/// Trains and scores every grid cell not already on disk, then writes the
/// table over all cells.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, out: &mut impl Write) -> Result<Vec<AblationCell>> {
    let cell_dir = out_dir.join(ABLATION_DIR);
    create_dir(&cell_dir)?;
    let num_classes = cfg.model.num_classes;
    let split = prepare_split(&data_dir.join(MANIFEST_NAME), num_classes)?;
    let hec = cfg.hec()?;
    let mut train = cfg.train.clone();
    train.epochs = cfg.ablation.epochs;
    train.iters_per_epoch = cfg.ablation.iters_per_epoch;
    let io = |e| Error::io(&cell_dir, e);
    let mut cells = Vec::new();
    for &ln in &cfg.ablation.layer_norm {
        for &(heads, d_model) in &cfg.ablation.grid {
            for &pe in &cfg.ablation.pe_modes {
                let path = cell_dir.join(AblationCell::file_name(heads, d_model, pe, ln));
                if path.exists() {
                    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let cell: AblationCell = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
                    writeln!(out, "skip   h={heads} d={d_model} pe={} ln={ln}", pe.label()).map_err(io)?;
                    cells.push(cell);
                    continue;
                }
                let mut model = cfg.model.clone();
                model.gasa_enabled = true;
                model.gasa.heads = heads;
                model.gasa.d_model = d_model;
                model.gasa.pe_mode = pe;
                model.gasa.use_layer_norm = ln;
                let (trainer, logs) = train_model(&model, &train, &split.train, |_| Ok(()))?;
                let (_, agg) = evaluate_cases(
                    std::slice::from_ref(trainer.model()),
                    &split.test,
                    &cfg.sliding_window,
                    num_classes,
                    Some(&hec),
                    cfg.metrics.tau,
                )?;
                let cell = AblationCell {
                    heads,
                    d_model,
                    pe_mode: pe,
                    layer_norm: ln,
                    params: count_model_params(&model)?,
                    final_loss: logs.last().map_or(f64::NAN, |l| l.loss),
                    mean_dice: agg.mean_dice,
                    mean_nsd: agg.mean_nsd,
                };
                write_json(&path, &cell)?;
                writeln!(
                    out,
                    "done   h={heads} d={d_model} pe={} ln={ln} dice={}",
                    pe.label(),
                    pct(cell.mean_dice)
                )
                .map_err(io)?;
                cells.push(cell);
            }
        }
    }
    let table = ablation_table(&cells);
    let table_path = out_dir.join(ABLATION_TABLE_NAME);
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    write!(out, "{table}").map_err(io)?;
    Ok(cells)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Mean Dice (x100) with one row per (heads, width, layer norm) and one
/// column per positional embedding mode.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut modes: Vec<PeMode> = Vec::new();
    let mut rows: Vec<(usize, usize, bool)> = Vec::new();
    for c in cells {
        if !modes.contains(&c.pe_mode) {
            modes.push(c.pe_mode);
        }
        if !rows.contains(&(c.heads, c.d_model, c.layer_norm)) {
            rows.push((c.heads, c.d_model, c.layer_norm));
        }
    }
    let mut s = String::from("| Head/Dim | LN | Params |");
    for m in &modes {
        s += &format!(" PE {} |", m.label());
    }
    s += "\n|---|---|---|";
    s += &"---|".repeat(modes.len());
    s += "\n";
    for &(h, d, ln) in &rows {
        let params = cells
            .iter()
            .find(|c| (c.heads, c.d_model, c.layer_norm) == (h, d, ln))
            .map_or(0, |c| c.params);
        s += &format!("| {h}/{d} | {} | {params} |", if ln { "on" } else { "off" });
        for &m in &modes {
            let v = cells
                .iter()
                .find(|c| (c.heads, c.d_model, c.layer_norm, c.pe_mode) == (h, d, ln, m))
                .and_then(|c| c.mean_dice);
            s += &format!(" {} |", pct(v));
        }
        s += "\n";
    }
    s
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut impl Write) -> Result<bool> {
    let report = run_all(&VerifyOptions {
        seed: args.seed,
        perturb_gradient: args.perturb_gradient,
    });
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json(&dir.join(VERIFY_REPORT_NAME), &report)?;
    }
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(report.passed)
}

/// Either a configuration problem (exit 1) or a failure while running (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(Error),
    Runtime(Error),
}

fn run_args(args: &RunArgs, ablate: bool, out: &mut impl Write) -> std::result::Result<Option<RunConfig>, CliError> {
    let cfg = args.resolve(ablate).map_err(CliError::Usage)?;
    if args.print_config {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.into()))?;
        writeln!(out, "{text}").map_err(|e| CliError::Runtime(Error::io("<stdout>", e)))?;
        return Ok(None);
    }
    Ok(Some(cfg))
}

pub fn execute(cli: &Cli, out: &mut impl Write) -> std::result::Result<Outcome, CliError> {
    let rt = CliError::Runtime;
    match &cli.command {
        Command::Synth(a) => {
            if let Some(cfg) = run_args(a, false, out)? {
                cmd_synth(&cfg, &a.data_dir(), out).map_err(rt)?;
            }
        }
        Command::Train(a) => {
            if let Some(cfg) = run_args(a, false, out)? {
                cmd_train(&cfg, &a.data_dir(), &a.out, out).map_err(rt)?;
            }
        }
        Command::Eval(e) => {
            if let Some(cfg) = run_args(&e.run, false, out)? {
                cmd_eval(&cfg, &e.run.data_dir(), &e.run.out, &e.checkpoints, out).map_err(rt)?;
            }
        }
        Command::Ablate(a) => {
            if let Some(cfg) = run_args(a, true, out)? {
                cmd_ablate(&cfg, &a.data_dir(), &a.out, out).map_err(rt)?;
            }
        }
        Command::Verify(v) => {
            if !cmd_verify(v, out).map_err(rt)? {
                return Ok(Outcome::VerifyFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(&cli, &mut out) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::VerifyFailed) => EXIT_VERIFY,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
