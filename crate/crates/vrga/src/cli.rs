//! Command-line front end.
//!
//! Every option can also come from `--config FILE`, a JSON object keyed by
//! long flag name (`overlap_min` and `overlap-min` both work). Flags given on
//! the command line win over the file; the file wins over `VRGA_SEED`.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use vrga_core::layout::bbox_to_tokens_in;
use vrga_core::localize::Aggregation;
use vrga_core::metrics::{aggregate_regressions, fit_r_h_regression, layer_rrar, r_h_pairs};
use vrga_core::select::{default_k, efr_guided_selection};
use vrga_core::synth::{generate_modes, RhLine};
use vrga_core::toy::eval::{
    ablation_report, ablation_sample, reweight_report, reweight_sample, rrar_report, rrar_sample, ProtocolConfig,
    ReweightConfig, Strategy,
};
use vrga_core::toy::gradcheck::grad_check;
use vrga_core::toy::task::{dataset, layout as toy_layout};
use vrga_core::toy::train::{accuracy, train_with};
use vrga_core::toy::{Hook, Optimizer, TaskKind, ToyConfig, ToyModel};
use vrga_core::{
    generate, refine_map, select_tokens, AttentionDump, Grid, HeadTable, MetricsConfig, PixelBox, Plan, PromptMode,
    RefineConfig, RegionMask, ReweightPlan, RowCheck, SelectionConfig, Span, SynthSpec,
};

use crate::container::{load_checkpoint, load_dump, save_checkpoint, save_dump};
use crate::error::{AppError, AppResult};
use crate::fsutil::{read, to_json_bytes, write_atomic};
use crate::manifest::RunManifest;
use crate::plan::{load_plan, PlanFile};
use crate::report::{
    fmt_g9, heatmap_csvs, layer_rrar_csv, metrics_csv, FitJson, MetricsReport, ModeReportJson, RefinedMapJson,
    RegressionJson, SelectionJson,
};

#[derive(Debug, Parser)]
#[command(name = "vrga", version, about = "Visual attention analysis and steering for multimodal transformers")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "VRGA_SEED")]
    pub seed: Option<u64>,
    /// JSON file with default values for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for per-sample work (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Accept dumps whose rows do not sum to 1, with a warning.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Record the wall-clock time in manifests.
    #[arg(long, global = true)]
    pub stamp_time: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-head attention metrics of a dump.
    Metrics(MetricsArgs),
    /// Head selection, refined map and reweighting plan for a dump.
    Pipeline(PipelineArgs),
    /// Grid-shaped CSV of a refined map.
    Heatmap(HeatmapArgs),
    /// Compare relevant-region ratios across prompting modes.
    Modes(ModesArgs),
    /// Fit image-attention ratio against entropy across dumps.
    Regress(RegressArgs),
    /// Write a synthetic dump with planted heads and its labels.
    Synth(SynthArgs),
    /// Train and evaluate the toy transformer.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegionArgs {
    /// Relevant-region token indices.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub region: Vec<usize>,
    /// Relevant region as a pixel box `x0,y0,x1,y1` on an image grid.
    #[arg(long, value_delimiter = ',', conflicts_with = "region")]
    pub bbox: Option<Vec<u32>>,
    /// Image the box refers to.
    #[arg(long, default_value_t = 0)]
    pub image: usize,
    /// Fraction of a patch the box must cover.
    #[arg(long, default_value_t = vrga_core::layout::DEFAULT_OVERLAP_MIN)]
    pub overlap_min: f64,
}

impl RegionArgs {
    fn given(&self) -> bool {
        !self.region.is_empty() || self.bbox.is_some()
    }

    fn resolve(&self, dump: &AttentionDump) -> AppResult<Option<RegionMask>> {
        if !self.region.is_empty() {
            return Ok(Some(RegionMask::explicit(dump.layout(), self.region.clone())?));
        }
        match &self.bbox {
            Some(b) => {
                let [x0, y0, x1, y1] = b[..] else {
                    return Err(AppError::validation("--bbox takes four values"));
                };
                let mask = bbox_to_tokens_in(dump.layout(), self.image, PixelBox::new(x0, y0, x1, y1), self.overlap_min)?;
                Ok(Some(mask))
            }
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub region: RegionArgs,
    /// Require the relevant-region ratio columns.
    #[arg(long)]
    pub rrar: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long, default_value_t = vrga_core::metrics::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationArg {
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub dump: PathBuf,
    /// Heads per layer; defaults by head count.
    #[arg(long)]
    pub k: Option<usize>,
    /// Per-layer image-attention quantile a vision head must reach.
    #[arg(long, default_value_t = 0.5)]
    pub quantile: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = vrga_core::steer::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = AggregationArg::Normalized)]
    pub aggregation: AggregationArg,
    /// Plan JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the metric table, selection and refined map.
    #[arg(long)]
    pub intermediates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeatmapArgs {
    /// Refined map JSON.
    #[arg(long)]
    pub map: PathBuf,
    /// CSV to write; multi-image maps write `<stem>.<i>.csv` per image.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModesArgs {
    /// `mode=manifest` pairs; modes are reason, direct and region-guided.
    #[arg(long = "dump", required = true)]
    #[serde(rename = "dump")]
    pub dumps: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub region: RegionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegressArgs {
    #[arg(long = "dump", required = true)]
    #[serde(rename = "dump")]
    pub dumps: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Planted vision heads, a sink and dispersed heads.
    Standard,
    /// Heads whose image ratio follows a line in entropy.
    RhLine,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    /// Noise of the line preset.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Also write one dump per prompting mode.
    #[arg(long)]
    pub modes: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Accuracy with k heads per layer masked, per head-choice strategy.
    Ablate(AblateArgs),
    /// Accuracy with the ground-truth region reweighted on vision heads.
    ReweightEval(ReweightArgs),
    /// Layer-mean relevant-region ratio split by correctness.
    RrarReport(RrarArgs),
    /// Analytic against central-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Attention dump of one evaluation sample.
    Dump(ToyDumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    FindPatch,
    Distract,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Decoy cells per sample in the distract task.
    #[arg(long, default_value_t = 1)]
    pub decoys: usize,
    /// How closely a decoy's position code resembles the target's.
    #[arg(long, default_value_t = 0.8)]
    pub salience: f64,
}

impl TaskArgs {
    fn kind(&self, default: TaskArg) -> TaskKind {
        match self.task.unwrap_or(default) {
            TaskArg::FindPatch => TaskKind::FindPatch,
            TaskArg::Distract => TaskKind::FindPatchDistract {
                decoys: self.decoys,
                salience: self.salience,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = ToyConfig::default().d_model)]
    pub d_model: usize,
    #[arg(long, default_value_t = ToyConfig::default().layers)]
    pub layers: usize,
    #[arg(long, default_value_t = ToyConfig::default().heads)]
    pub heads: usize,
    #[arg(long, default_value_t = ToyConfig::default().d_ff)]
    pub d_ff: usize,
    /// Grid side; the grid is square.
    #[arg(long, default_value_t = ToyConfig::default().grid_rows)]
    pub grid: usize,
    #[arg(long, default_value_t = ToyConfig::default().symbols)]
    pub symbols: usize,
    #[arg(long, default_value_t = ToyConfig::default().question_len)]
    pub question_len: usize,
    #[arg(long, default_value_t = ToyConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = ToyConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = ToyConfig::default().batch)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Momentum of the sgd optimizer.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = ToyConfig::default().pos_init)]
    pub pos_init: f64,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ToyConfig {
        ToyConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            grid_rows: self.grid,
            grid_cols: self.grid,
            symbols: self.symbols,
            question_len: self.question_len,
            learning_rate: self.lr,
            steps: self.steps,
            batch: self.batch,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::adam(),
                OptimizerArg::Sgd => Optimizer::Sgd { momentum: self.momentum },
            },
            pos_init: self.pos_init,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Held-out samples for the final accuracy.
    #[arg(long, default_value_t = 2000)]
    pub eval_samples: usize,
    /// Checkpoint manifest to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training-curve JSON to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Heads per layer; defaults by head count.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub quantile: f64,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    fn protocol(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            k: self.k,
            r_img_quantile: self.quantile,
            seed,
            ..ProtocolConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "baseline,random,low-visual,efr-guided")]
    pub strategies: Vec<String>,
    /// Renormalize masked rows over the remaining tokens.
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReweightArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = vrga_core::steer::DEFAULT_GAMMA)]
    pub gamma: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RrarArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    /// Checkpoint to check; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Parameters compared.
    #[arg(long, default_value_t = 200)]
    pub params: usize,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ToyDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Index into the evaluation stream.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Plan applied during the forward pass.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Dump manifest to write; labels go to `<stem>.labels.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Global settings shared by every command.
struct Ctx {
    seed: u64,
    jobs: Option<usize>,
    check: RowCheck,
    stamp_time: bool,
    config_file: Option<(PathBuf, Vec<u8>)>,
}

impl Ctx {
    fn manifest<T: Serialize>(&self, command: &str, args: &T) -> AppResult<RunManifest> {
        let mut config = serde_json::to_value(args).map_err(|e| AppError::internal(e.to_string()))?;
        if let serde_json::Value::Object(m) = &mut config {
            m.insert("seed".into(), self.seed.into());
        }
        let mut man = RunManifest::new(command, config, self.stamp_time)?;
        if let Some((path, bytes)) = &self.config_file {
            man.add_input_bytes(path, bytes);
        }
        Ok(man)
    }

    fn load_dump(&self, path: &Path, man: &mut RunManifest) -> AppResult<AttentionDump> {
        let (dump, warnings) = load_dump(path, self.check)?;
        for w in warnings {
            eprintln!(
                "warning: row sum {} at step {} layer {} head {}",
                fmt_g9(w.sum),
                w.step,
                w.layer,
                w.head
            );
        }
        man.add_input(path)?;
        if let Ok(m) = crate::container::read_dump_manifest(path) {
            man.add_input(&path.parent().unwrap_or(Path::new(".")).join(m.payload_file))?;
        }
        Ok(dump)
    }

    fn pool(&self) -> AppResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.unwrap_or(0))
            .build()
            .map_err(|e| AppError::internal(e.to_string()))
    }

    /// Maps `f` over `items` on the job pool, keeping input order.
    fn par_map<T, R, F>(&self, items: &[T], f: F) -> AppResult<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> vrga_core::Result<R> + Sync + Send,
    {
        let pool = self.pool()?;
        let out = pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, x)| f(i, x))
                .collect::<vrga_core::Result<Vec<R>>>()
        });
        Ok(out?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

fn write_csv(path: &Path, body: &str, man: &RunManifest) -> AppResult<()> {
    write_atomic(path, body.as_bytes())?;
    man.write_sidecar(path)
}

/// `dir/name.ext` → `dir/name.<infix>.ext`.
fn with_infix(path: &Path, infix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.{infix}.{ext}"),
        None => format!("{stem}.{infix}"),
    };
    path.with_file_name(name)
}

fn cmd_metrics(ctx: &Ctx, a: &MetricsArgs) -> AppResult<()> {
    let mut man = ctx.manifest("metrics", a)?;
    let dump = ctx.load_dump(&a.dump, &mut man)?;
    let mut region = a.region.resolve(&dump)?;
    if region.as_ref().is_some_and(RegionMask::is_empty) {
        if a.rrar {
            return Err(AppError::validation("the region covers no visual token"));
        }
        eprintln!("warning: the region covers no visual token; ratio columns omitted");
        region = None;
    }
    if a.rrar && region.is_none() {
        return Err(AppError::validation("--rrar needs --region or --bbox"));
    }
    let cfg = MetricsConfig { epsilon: a.epsilon };
    let table = HeadTable::from_dump(&dump, region.as_ref(), &cfg)?;
    let layers = region.as_ref().map(|r| layer_rrar(&dump, r)).transpose()?;
    match a.format {
        Format::Csv => {
            write_csv(&a.out, &metrics_csv(&table, region.is_some()), &man)?;
            if let Some(ls) = &layers {
                write_csv(&with_infix(&a.out, "layers"), &layer_rrar_csv(ls), &man)?;
            }
        }
        Format::Json => {
            let report = MetricsReport::new(&table, region.as_ref().map(RegionMask::tokens), layers.as_deref(), man.to_value());
            write_json(&a.out, &report)?;
        }
    }
    Ok(())
}

/// Selection, refined map and plan for one dump.
pub struct PipelineOutput {
    pub table: HeadTable,
    pub selection: vrga_core::HeadSelection,
    pub map: vrga_core::RefinedMap,
    pub tokens: Vec<usize>,
    pub plan: Plan,
}

/// The library calls behind `vrga pipeline`.
pub fn run_pipeline(dump: &AttentionDump, a: &PipelineArgs) -> AppResult<PipelineOutput> {
    let table = HeadTable::from_dump(dump, None, &MetricsConfig::default())?;
    let sel_cfg = SelectionConfig {
        heads_per_layer: a.k.unwrap_or_else(|| default_k(dump.heads())),
        r_img_quantile: a.quantile,
        ..SelectionConfig::for_heads(dump.heads())
    };
    let selection = efr_guided_selection(&table, &sel_cfg)?;
    if selection.vision_heads.is_empty() {
        return Err(AppError::validation("no vision-focused head was selected"));
    }
    let refine = RefineConfig {
        lambda: a.lambda,
        tau: a.tau,
        aggregation: match a.aggregation {
            AggregationArg::Normalized => Aggregation::Normalized,
            AggregationArg::Raw => Aggregation::Raw,
        },
    };
    let map = refine_map(dump, &selection, &refine)?;
    let tokens = select_tokens(&map, a.tau);
    let plan = Plan::Reweight(ReweightPlan::new(selection.vision_heads.clone(), tokens.clone(), a.gamma));
    plan.validate(dump.layout())?;
    Ok(PipelineOutput {
        table,
        selection,
        map,
        tokens,
        plan,
    })
}

fn cmd_pipeline(ctx: &Ctx, a: &PipelineArgs) -> AppResult<()> {
    let mut man = ctx.manifest("pipeline", a)?;
    let dump = ctx.load_dump(&a.dump, &mut man)?;
    let out = run_pipeline(&dump, a)?;
    for w in &out.selection.warnings {
        eprintln!("warning: {w:?}");
    }
    if out.tokens.is_empty() {
        eprintln!("warning: no visual token passed tau = {}; the plan is the identity", fmt_g9(a.tau));
    }
    if let Some(dir) = &a.intermediates {
        write_csv(&dir.join("metrics.csv"), &metrics_csv(&out.table, false), &man)?;
        let mut sel = SelectionJson::from(&out.selection);
        sel.manifest = Some(man.to_value());
        write_json(&dir.join("selection.json"), &sel)?;
        let mut map = RefinedMapJson::from(&out.map);
        map.tau = Some(a.tau);
        map.selected_tokens = Some(out.tokens.clone());
        map.manifest = Some(man.to_value());
        write_json(&dir.join("refined.json"), &map)?;
    }
    let mut plan = PlanFile::from(&out.plan);
    plan.manifest = Some(man.to_value());
    write_json(&a.out, &plan)
}

fn cmd_heatmap(ctx: &Ctx, a: &HeatmapArgs) -> AppResult<()> {
    let mut man = ctx.manifest("heatmap", a)?;
    let bytes = read(&a.map)?;
    man.add_input_bytes(&a.map, &bytes);
    let json: RefinedMapJson = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::validation(format!("malformed refined map {}: {e}", a.map.display())))?;
    let csvs = heatmap_csvs(&json.to_map()?)?;
    if csvs.len() == 1 {
        return write_csv(&a.out, &csvs[0], &man);
    }
    for (i, body) in csvs.iter().enumerate() {
        write_csv(&with_infix(&a.out, &i.to_string()), body, &man)?;
    }
    Ok(())
}

fn cmd_modes(ctx: &Ctx, a: &ModesArgs) -> AppResult<()> {
    let mut man = ctx.manifest("modes", a)?;
    let mut dumps = Vec::with_capacity(a.dumps.len());
    for spec in &a.dumps {
        let (mode, path) = spec
            .split_once('=')
            .ok_or_else(|| AppError::validation(format!("--dump {spec:?} is not mode=path")))?;
        let mode = PromptMode::parse(mode).ok_or_else(|| AppError::validation(format!("unknown prompting mode {mode:?}")))?;
        dumps.push((mode, ctx.load_dump(Path::new(path), &mut man)?));
    }
    if !a.region.given() {
        return Err(AppError::validation("modes needs --region or --bbox"));
    }
    let region = a.region.resolve(&dumps[0].1)?.expect("region given");
    let refs: Vec<(PromptMode, &AttentionDump)> = dumps.iter().map(|(m, d)| (*m, d)).collect();
    let report = vrga_core::metrics::compare_modes(&refs, &region)?;
    write_json(&a.out, &ModeReportJson::new(&report, man.to_value()))
}

fn cmd_regress(ctx: &Ctx, a: &RegressArgs) -> AppResult<()> {
    let mut man = ctx.manifest("regress", a)?;
    let mut samples = Vec::with_capacity(a.dumps.len());
    for p in &a.dumps {
        let dump = ctx.load_dump(p, &mut man)?;
        let table = HeadTable::from_dump(&dump, None, &MetricsConfig::default())?;
        samples.push(r_h_pairs(&table));
    }
    let fits = samples
        .iter()
        .map(|s| fit_r_h_regression(s).ok().map(|f| FitJson::from(&f)))
        .collect();
    let stats = aggregate_regressions(&samples)?;
    write_json(&a.out, &RegressionJson::new(fits, &stats, man.to_value()))
}

/// Synthetic fixture behind `vrga synth --preset`.
pub fn synth_spec(preset: Preset, seed: u64, noise: f64) -> SynthSpec {
    match preset {
        Preset::Standard => SynthSpec::standard(seed),
        Preset::RhLine => {
            let mut spec = SynthSpec::new(8, 12, 80, Span::new(0, 64), seed);
            spec.grid = Some(Grid {
                rows: 8,
                cols: 8,
                patch_px: 14,
            });
            spec.r_h_line = Some(RhLine {
                slope: 0.2,
                intercept: 0.0,
                noise,
            });
            spec
        }
    }
}

/// Concentration multipliers of the three prompting modes.
pub const MODE_FACTORS: [(PromptMode, f64); 3] = [
    (PromptMode::Reason, 0.6),
    (PromptMode::Direct, 1.0),
    (PromptMode::RegionGuided, 1.05),
];

#[derive(Serialize)]
struct LabelsJson<'a> {
    vision_heads: Vec<[usize; 2]>,
    sink_heads: Vec<[usize; 2]>,
    sink_tokens: &'a [usize],
    region: &'a [usize],
    seed: u64,
    manifest: serde_json::Value,
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> AppResult<()> {
    let man = ctx.manifest("synth", a)?;
    let mut spec = synth_spec(a.preset, ctx.seed, a.noise);
    let (dump, labels) = generate(&spec)?;
    save_dump(&a.out_dir.join("dump.json"), &dump)?;
    if a.modes {
        spec.mode_offsets = MODE_FACTORS.to_vec();
        for (mode, d, _) in generate_modes(&spec)? {
            save_dump(&a.out_dir.join(format!("dump.{}.json", mode.as_str())), &d)?;
        }
    }
    let pairs = crate::report::head_pairs;
    write_json(
        &a.out_dir.join("labels.json"),
        &LabelsJson {
            vision_heads: pairs(&labels.vision_heads),
            sink_heads: pairs(&labels.sink_heads),
            sink_tokens: &labels.sink_tokens,
            region: &labels.region,
            seed: labels.seed,
            manifest: man.to_value(),
        },
    )
}

#[derive(Serialize)]
struct TrainJson {
    losses: Vec<f64>,
    eval_samples: usize,
    eval_accuracy: f64,
    manifest: serde_json::Value,
}

/// Evaluation samples are drawn from the stream after the training seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> AppResult<()> {
    let man = ctx.manifest("toy train", a)?;
    let cfg = a.model.config(ctx.seed);
    let kind = a.task.kind(TaskArg::FindPatch);
    let log_every = (cfg.steps / 20).max(1);
    let (model, report) = train_with(&cfg, kind, |step, loss| {
        if (step + 1) % log_every == 0 {
            eprintln!("step {:>6}  loss {}", step + 1, fmt_g9(loss));
        }
    })?;
    let samples = dataset(&cfg, kind, a.eval_samples, eval_seed(ctx.seed));
    let acc = accuracy(&model, &samples)?;
    println!("eval accuracy {} on {} samples", fmt_g9(acc), a.eval_samples);
    save_checkpoint(&a.out, &model, Some(man.to_value()))?;
    if let Some(path) = &a.report {
        write_json(
            path,
            &TrainJson {
                losses: report.losses,
                eval_samples: a.eval_samples,
                eval_accuracy: acc,
                manifest: man.to_value(),
            },
        )?;
    }
    Ok(())
}

fn load_model(path: &Path, man: &mut RunManifest) -> AppResult<ToyModel> {
    let model = load_checkpoint(path)?;
    man.add_input(path)?;
    Ok(model)
}

#[derive(Serialize)]
struct AblationRowJson {
    strategy: &'static str,
    accuracy: f64,
    correct: usize,
    total: usize,
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> AppResult<()> {
    let mut man = ctx.manifest("toy ablate", a)?;
    let model = load_model(&a.eval.checkpoint, &mut man)?;
    let strategies = a
        .strategies
        .iter()
        .map(|s| Strategy::parse(s).ok_or_else(|| AppError::validation(format!("unknown strategy {s:?}"))))
        .collect::<AppResult<Vec<_>>>()?;
    let cfg = model.config();
    let kind = a.eval.task.kind(TaskArg::FindPatch);
    kind.validate(cfg)?;
    let samples = dataset(cfg, kind, a.eval.samples, eval_seed(ctx.seed));
    let protocol = ProtocolConfig {
        mask_renormalize: a.renormalize,
        ..a.eval.protocol(ctx.seed)
    };
    let k = a.eval.k.unwrap_or_else(|| default_k(cfg.heads));
    if k > cfg.heads {
        return Err(AppError::validation(format!("k = {k} exceeds {} heads per layer", cfg.heads)));
    }
    let outcomes = ctx.par_map(&samples, |i, s| ablation_sample(&model, s, i, &strategies, &protocol))?;
    let report = ablation_report(k, &strategies, &outcomes);
    println!("{:<12} {:>10} {:>8}", "strategy", "accuracy", "correct");
    for r in &report.rows {
        println!("{:<12} {:>10} {:>8}", r.strategy.as_str(), fmt_g9(r.accuracy), r.correct);
    }
    if let Some(out) = &a.eval.out {
        let rows: Vec<AblationRowJson> = report
            .rows
            .iter()
            .map(|r| AblationRowJson {
                strategy: r.strategy.as_str(),
                accuracy: r.accuracy,
                correct: r.correct,
                total: r.total,
            })
            .collect();
        write_json(out, &serde_json::json!({"k": report.k, "rows": rows, "manifest": man.to_value()}))?;
    }
    Ok(())
}

fn cmd_reweight(ctx: &Ctx, a: &ReweightArgs) -> AppResult<()> {
    let mut man = ctx.manifest("toy reweight-eval", a)?;
    let model = load_model(&a.eval.checkpoint, &mut man)?;
    let cfg = model.config();
    let kind = a.eval.task.kind(TaskArg::Distract);
    kind.validate(cfg)?;
    let samples = dataset(cfg, kind, a.eval.samples, eval_seed(ctx.seed));
    let rcfg = ReweightConfig {
        gamma: a.gamma,
        protocol: a.eval.protocol(ctx.seed),
    };
    let outcomes = ctx.par_map(&samples, |i, s| reweight_sample(&model, s, i, &rcfg))?;
    let r = reweight_report(&outcomes)?;
    println!("baseline     {}", fmt_g9(r.baseline_accuracy));
    println!("reweighted   {}", fmt_g9(r.reweighted_accuracy));
    println!("ceiling      {}", fmt_g9(r.ceiling_accuracy));
    println!("gap recovered {}", r.gap_recovered.map(fmt_g9).unwrap_or_else(|| "n/a".into()));
    if let Some(out) = &a.eval.out {
        write_json(
            out,
            &serde_json::json!({
                "samples": r.samples,
                "baseline_accuracy": r.baseline_accuracy,
                "reweighted_accuracy": r.reweighted_accuracy,
                "ceiling_accuracy": r.ceiling_accuracy,
                "gap_recovered": r.gap_recovered,
                "planned_rrar_clean": r.planned_rrar_clean,
                "planned_rrar_reweighted": r.planned_rrar_reweighted,
                "manifest": man.to_value(),
            }),
        )?;
    }
    Ok(())
}

fn cmd_rrar(ctx: &Ctx, a: &RrarArgs) -> AppResult<()> {
    let mut man = ctx.manifest("toy rrar-report", a)?;
    let model = load_model(&a.checkpoint, &mut man)?;
    let cfg = model.config();
    let kind = a.task.kind(TaskArg::Distract);
    kind.validate(cfg)?;
    let samples = dataset(cfg, kind, a.samples, eval_seed(ctx.seed));
    let outcomes = ctx.par_map(&samples, |_, s| rrar_sample(&model, s))?;
    let r = rrar_report(cfg.layers, &outcomes);
    println!("correct {}  incorrect {}", r.n_correct, r.n_incorrect);
    let opt = |v: Option<f64>| v.map(fmt_g9).unwrap_or_else(|| "-".into());
    println!("{:<6} {:>12} {:>12}", "layer", "correct", "incorrect");
    for l in &r.layers {
        println!("{:<6} {:>12} {:>12}", l.layer, opt(l.correct), opt(l.incorrect));
    }
    match r.correct_higher_fraction {
        Some(f) => println!("correct higher on {} of layers", fmt_g9(f)),
        None => println!("comparison skipped: one side of the split is empty"),
    }
    if let Some(out) = &a.out {
        let layers: Vec<serde_json::Value> = r
            .layers
            .iter()
            .map(|l| serde_json::json!({"layer": l.layer, "correct": l.correct, "incorrect": l.incorrect}))
            .collect();
        write_json(
            out,
            &serde_json::json!({
                "layers": layers,
                "n_correct": r.n_correct,
                "n_incorrect": r.n_incorrect,
                "correct_higher_fraction": r.correct_higher_fraction,
                "manifest": man.to_value(),
            }),
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> AppResult<()> {
    let mut man = ctx.manifest("toy gradcheck", a)?;
    let model = match &a.checkpoint {
        Some(p) => load_model(p, &mut man)?,
        None => ToyModel::init(&a.model.config(ctx.seed))?,
    };
    let kind = a.task.kind(TaskArg::FindPatch);
    kind.validate(model.config())?;
    let samples = dataset(model.config(), kind, a.samples, eval_seed(ctx.seed));
    let r = grad_check(&model, &samples, a.params, ctx.seed)?;
    println!("max relative error {} over {} parameters", fmt_g9(r.max_rel_error), r.checked);
    let pass = r.passes(a.tolerance);
    if let Some(out) = &a.out {
        write_json(
            out,
            &serde_json::json!({
                "max_rel_error": r.max_rel_error,
                "worst_index": r.worst_index,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "checked": r.checked,
                "tolerance": a.tolerance,
                "pass": pass,
                "manifest": man.to_value(),
            }),
        )?;
    }
    if !pass {
        return Err(AppError::internal(format!(
            "gradient check failed: {} > {}",
            fmt_g9(r.max_rel_error),
            fmt_g9(a.tolerance)
        )));
    }
    Ok(())
}

fn cmd_toy_dump(ctx: &Ctx, a: &ToyDumpArgs) -> AppResult<()> {
    let mut man = ctx.manifest("toy dump", a)?;
    let model = load_model(&a.checkpoint, &mut man)?;
    let cfg = model.config();
    let kind = a.task.kind(TaskArg::FindPatch);
    kind.validate(cfg)?;
    let sample = dataset(cfg, kind, a.index + 1, eval_seed(ctx.seed)).pop().expect("index + 1 samples");
    let plan = match &a.plan {
        Some(p) => {
            man.add_input(p)?;
            Some(load_plan(p)?)
        }
        None => None,
    };
    let hook = plan.as_ref().map_or(Hook::None, Hook::Plan);
    let out = model.forward(&sample, hook)?;
    let lay = toy_layout(cfg)?;
    let dump = out.dump(&lay)?;
    save_dump(&a.out, &dump)?;
    let st = cfg.visual_start();
    write_json(
        &with_infix(&a.out, "labels"),
        &serde_json::json!({
            "region": [sample.cell_token(cfg)],
            "decoy_tokens": sample.decoy_cells.iter().map(|c| c + st).collect::<Vec<_>>(),
            "answer": sample.answer,
            "prediction": out.prediction(),
            "manifest": man.to_value(),
        }),
    )
}

fn clap_err(e: clap::Error) -> AppError {
    let msg = e.to_string();
    AppError::validation(msg.trim_start_matches("error: ").trim_end())
}

/// Folds `--config` values into `args` as flags, for every key not already
/// given on the command line.
fn merge_config(args: &[OsString], path: &Path, bytes: &[u8]) -> AppResult<Vec<OsString>> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| AppError::validation(format!("malformed config {}: {e}", path.display())))?;
    let serde_json::Value::Object(map) = value else {
        return Err(AppError::validation(format!("config {} must be a JSON object", path.display())));
    };
    let root = Cli::command();
    // required flags may still be missing at this point
    let matches = root.clone().ignore_errors(true).try_get_matches_from(args).map_err(clap_err)?;
    let mut cmd = root.clone();
    let mut leaf = &matches;
    while let Some((name, sub)) = leaf.subcommand() {
        cmd = cmd.find_subcommand(name).expect("matched subcommand exists").clone();
        leaf = sub;
    }
    let mut out = args.to_vec();
    for (key, v) in map {
        let long = key.replace('_', "-");
        let arg = cmd
            .get_arguments()
            .chain(root.get_arguments().filter(|a| a.is_global_set()))
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| AppError::validation(format!("unknown config key {key:?}")))?;
        if long == "config" {
            return Err(AppError::validation("config files cannot nest"));
        }
        if leaf.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{}", arg.get_long().expect("checked above"));
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            serde_json::Value::Bool(b) => Ok(b.to_string()),
            _ => Err(AppError::validation(format!("config key {key:?} must be a scalar or a list"))),
        };
        match (arg.get_action(), &v) {
            (ArgAction::SetTrue, serde_json::Value::Bool(b)) => {
                if *b {
                    out.push(flag.into());
                }
            }
            (ArgAction::SetTrue, _) => {
                return Err(AppError::validation(format!("config key {key:?} must be true or false")));
            }
            (_, serde_json::Value::Null) => {}
            (_, serde_json::Value::Array(items)) => {
                for item in items {
                    out.push(format!("{flag}={}", scalar(item)?).into());
                }
            }
            (_, v) => out.push(format!("{flag}={}", scalar(v)?).into()),
        }
    }
    Ok(out)
}

fn find_config(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn parse(args: Vec<OsString>) -> Result<(Cli, Option<(PathBuf, Vec<u8>)>), AppError> {
    let (args, config) = match find_config(&args) {
        Some(path) => {
            let bytes = read(&path)?;
            (merge_config(&args, &path, &bytes)?, Some((path, bytes)))
        }
        None => (args, None),
    };
    let matches = Cli::command()
        .try_get_matches_from(args)
        .map_err(clap_err)?;
    let cli = Cli::from_arg_matches(&matches).map_err(clap_err)?;
    Ok((cli, config))
}

fn dispatch(cli: Cli, config_file: Option<(PathBuf, Vec<u8>)>) -> AppResult<()> {
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        jobs: cli.jobs,
        check: if cli.lenient { RowCheck::Lenient } else { RowCheck::Strict },
        stamp_time: cli.stamp_time,
        config_file,
    };
    match &cli.command {
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Pipeline(a) => cmd_pipeline(&ctx, a),
        Command::Heatmap(a) => cmd_heatmap(&ctx, a),
        Command::Modes(a) => cmd_modes(&ctx, a),
        Command::Regress(a) => cmd_regress(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Toy(t) => match t {
            ToyCommand::Train(a) => cmd_train(&ctx, a),
            ToyCommand::Ablate(a) => cmd_ablate(&ctx, a),
            ToyCommand::ReweightEval(a) => cmd_reweight(&ctx, a),
            ToyCommand::RrarReport(a) => cmd_rrar(&ctx, a),
            ToyCommand::Gradcheck(a) => cmd_gradcheck(&ctx, a),
            ToyCommand::Dump(a) => cmd_toy_dump(&ctx, a),
        },
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    // help and version exit 0 before anything else is read
    if let Err(e) = Cli::command().try_get_matches_from(&args) {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            return 0;
        }
        if find_config(&args).is_none() {
            let _ = e.print();
            return 1;
        }
    }
    let result = parse(args).and_then(|(cli, cfg)| dispatch(cli, cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "{e}");
            e.exit_code()
        }
    }
}
