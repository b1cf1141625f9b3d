//! Command-line entry points: corpus forging and curation, the three
//! training phases, sampling, and evaluation, all driven by one sectioned
//! TOML configuration with dotted `--set` overrides.
//!
//! Every command validates its configuration before touching the
//! filesystem, and every stochastic choice descends from the config seeds,
//! so a fixed config produces byte-identical primary outputs across runs.
//! The `ICX_SEED` environment variable overrides every section seed at
//! once.

use crate::bench::{
    benchmark_items_from, multiref_compare, run_benchmark, EmbedProvider, FileProvider,
    MetricReport, ToyProvider,
};
use crate::error::{Error, Result};
use crate::flow::{
    euler_sample, restore_optimizer, run_stage, ResumeState, SampleRequest, TSchedule,
    TrainConfig, TrainStage,
};
use crate::forge::{
    curate, generate_items, read_items, rgb_f, synthesize_multiref, write_items, MaskRules,
    ShapeClass, Vocab, WorldConfig, MULTIREF_MAX,
};
use crate::geometry::{assemble_polyptych, assemble_single};
use crate::icma::{RopeStyle, TaskMode};
use crate::image::{read_pgm, read_ppm, CanvasLayout, Image};
use crate::model::{Model, ModelConfig};
use crate::rng::SeedSplitter;
use crate::tensor::optim::{AdamW, AdamWConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "icx",
    about = "Identity-consistent image customization on a synthetic shape world",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Render a deterministic corpus of multi-scene items to disk.
    Forge(ForgeArgs),
    /// Filter a corpus by embedding coherence; optionally grow it with
    /// model-synthesized scenes.
    Curate(CurateArgs),
    /// Train the backbone on single panels (phase before customization).
    Pretrain(PretrainArgs),
    /// Customization training: stage 1 (one reference) or stage 2 (mixed
    /// reference counts).
    Train(TrainArgs),
    /// Generate a target panel from references with a trained checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint over a corpus and write a metric report.
    Eval(EvalArgs),
    /// Re-read a metric report, verify it, and print its summaries.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Sectioned TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted overrides, e.g. --set train.steps=500. Values are
    /// type-checked against the key they replace.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ForgeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Item count; defaults to [forge].items.
    #[arg(long)]
    pub items: Option<usize>,
    /// Replace an existing corpus at --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Input corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output corpus directory for the kept items.
    #[arg(long)]
    pub out: PathBuf,
    /// Coherence threshold; defaults to [forge].threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Embedding provider: "toy" or "file:<path>". Defaults to
    /// [eval].provider.
    #[arg(long)]
    pub provider: Option<String>,
    /// Checkpoint used to synthesize extra reference scenes for
    /// multi-reference training.
    #[arg(long, value_name = "CHECKPOINT")]
    pub synthesize: Option<PathBuf>,
    /// Replace an existing corpus at --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    pub out: PathBuf,
    /// Customization stage: 1 or 2.
    #[arg(long)]
    pub stage: String,
    /// Starting checkpoint (pretrained for stage 1, stage-1 for stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Mid-stage checkpoint to continue from; replaces --init.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference scene (PPM); repeat for several references.
    #[arg(long = "ref", value_name = "PPM", required = true)]
    pub refs: Vec<PathBuf>,
    /// Existing target scene to edit (position-aware modes).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Region to regenerate, as a PGM over the target panel (white =
    /// regenerate). Required by position-aware modes.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Target caption, e.g. "red circle on white room".
    #[arg(long)]
    pub prompt: String,
    /// Reference caption; omitting it drops the reference clause.
    #[arg(long)]
    pub ref_prompt: Option<String>,
    /// Task mode: precise, user_drawn, or position_free.
    #[arg(long)]
    pub mode: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Integration steps; defaults to [sample].steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise seed; defaults to [sample].seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to score.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus to score against.
    #[arg(long)]
    pub data: PathBuf,
    /// Report file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Embedding provider; defaults to [eval].provider.
    #[arg(long)]
    pub provider: Option<String>,
    /// Comma-separated task modes; defaults to all three.
    #[arg(long)]
    pub modes: Option<String>,
    /// Second checkpoint: also write an identity-vs-reference-count
    /// comparison (this checkpoint as baseline, --ckpt as candidate).
    #[arg(long, value_name = "CHECKPOINT")]
    pub compare: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Report file to verify and summarize.
    #[arg(long = "in")]
    pub input: PathBuf,
}

// ---------------------------------------------------------------------
// Configuration file schema
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub forge: ForgeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            world: WorldSection::default(),
            forge: ForgeSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub canvas_sizes: Vec<(usize, usize)>,
    pub patch: usize,
    pub shapes: Vec<String>,
    pub palette: Vec<(String, [u8; 3])>,
    pub backgrounds: Vec<(String, [u8; 3])>,
    pub scenes_min: usize,
    pub scenes_max: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub center_jitter: f64,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> WorldSection {
        let w = WorldConfig::desk();
        WorldSection {
            canvas_sizes: w.canvas_sizes,
            patch: w.patch,
            shapes: w.shapes.iter().map(|s| s.name().to_string()).collect(),
            palette: w.palette,
            backgrounds: w.backgrounds,
            scenes_min: w.scenes_min,
            scenes_max: w.scenes_max,
            scale_min: w.scale_range.0,
            scale_max: w.scale_range.1,
            center_jitter: w.center_jitter,
            seed: w.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeSection {
    pub items: usize,
    /// Minimum pairwise scene similarity an item must keep at curation.
    pub threshold: f64,
}

impl Default for ForgeSection {
    fn default() -> ForgeSection {
        ForgeSection { items: 64, threshold: crate::forge::CURATION_THRESHOLD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub heads: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub max_text_len: usize,
    pub max_refs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_double_prefix: usize,
    pub lora_single_prefix: usize,
    pub rope_base: f64,
    pub rope_style: String,
    pub share_registers: bool,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        let m = ModelConfig::desk(1);
        ModelSection {
            dim: m.dim,
            heads: m.heads,
            double_blocks: m.double_blocks,
            single_blocks: m.single_blocks,
            max_text_len: m.max_text_len,
            max_refs: m.max_refs,
            lora_rank: m.lora_rank,
            lora_alpha: m.lora_alpha,
            lora_double_prefix: m.lora_double_prefix,
            lora_single_prefix: m.lora_single_prefix,
            rope_base: m.rope_base,
            rope_style: m.rope_style.name().to_string(),
            share_registers: m.share_registers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Task-mode draw probabilities: precise, user-drawn, position-free.
    pub mode_probs: [f64; 3],
    pub prompt_drop: f64,
    /// "uniform" or "logit_normal".
    pub t_schedule: String,
    pub logit_mean: f64,
    pub logit_std: f64,
    pub loss_target_only: bool,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            pretrain_steps: 400,
            steps: 2000,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 42,
            checkpoint_every: 500,
            mode_probs: [0.4, 0.3, 0.3],
            prompt_drop: 0.3,
            t_schedule: "uniform".into(),
            logit_mean: 0.0,
            logit_std: 1.0,
            loss_target_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> SampleSection {
        SampleSection { steps: 16, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub provider: String,
    pub seed: u64,
    pub steps: usize,
    /// References per benchmark subject.
    pub ref_cap: usize,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection { provider: "toy".into(), seed: 9, steps: 8, ref_cap: 1 }
    }
}

impl RunConfig {
    pub fn world_config(&self) -> Result<WorldConfig> {
        let shapes = self
            .world
            .shapes
            .iter()
            .map(|s| ShapeClass::from_name(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(WorldConfig {
            canvas_sizes: self.world.canvas_sizes.clone(),
            patch: self.world.patch,
            shapes,
            palette: self.world.palette.clone(),
            backgrounds: self.world.backgrounds.clone(),
            scenes_min: self.world.scenes_min,
            scenes_max: self.world.scenes_max,
            scale_range: (self.world.scale_min, self.world.scale_max),
            center_jitter: self.world.center_jitter,
            target_scene: None,
            seed: self.world.seed,
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let rope_style = RopeStyle::from_name(&self.model.rope_style).ok_or_else(|| {
            Error::Config(format!(
                "unknown rope style {:?}; expected additive or replace",
                self.model.rope_style
            ))
        })?;
        Ok(ModelConfig {
            dim: self.model.dim,
            heads: self.model.heads,
            double_blocks: self.model.double_blocks,
            single_blocks: self.model.single_blocks,
            patch: self.world.patch,
            channels: 3,
            vocab_size,
            max_text_len: self.model.max_text_len,
            max_refs: self.model.max_refs,
            lora_rank: self.model.lora_rank,
            lora_alpha: self.model.lora_alpha,
            lora_double_prefix: self.model.lora_double_prefix,
            lora_single_prefix: self.model.lora_single_prefix,
            rope_base: self.model.rope_base,
            rope_style,
            share_registers: self.model.share_registers,
        })
    }

    pub fn train_config(&self, stage: TrainStage) -> Result<TrainConfig> {
        let t_schedule = match self.train.t_schedule.as_str() {
            "uniform" => TSchedule::Uniform,
            "logit_normal" => TSchedule::LogitNormal {
                mean: self.train.logit_mean,
                std: self.train.logit_std,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown t schedule {other:?}; expected uniform or logit_normal"
                )))
            }
        };
        let cfg = TrainConfig {
            mode_probs: self.train.mode_probs,
            prompt_drop: self.train.prompt_drop,
            steps: if stage == TrainStage::Pretrain {
                self.train.pretrain_steps
            } else {
                self.train.steps
            },
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            t_schedule,
            loss_target_only: self.train.loss_target_only,
            buckets: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full validation of every derived module config; run before any
    /// command touches the filesystem.
    pub fn validate(&self) -> Result<()> {
        let world = self.world_config()?;
        world.validate()?;
        let vocab = Vocab::from_world(&world);
        self.model_config(vocab.len())?.validate()?;
        self.train_config(TrainStage::Stage1)?;
        self.train_config(TrainStage::Pretrain)?;
        if self.sample.steps == 0 || self.eval.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if self.eval.ref_cap == 0 {
            return Err(Error::Config("eval.ref_cap must be positive".into()));
        }
        if !(self.forge.threshold.is_finite()) {
            return Err(Error::Config("forge.threshold must be finite".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Config loading: file over defaults, then dotted overrides, then the
// environment seed.
// ---------------------------------------------------------------------

fn toml_type(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

/// Numbers cross-assign (an integer literal may land on a float key);
/// everything else must match exactly.
fn types_compatible(old: &toml::Value, new: &toml::Value) -> bool {
    matches!(
        (old, new),
        (toml::Value::Float(_), toml::Value::Integer(_))
    ) || std::mem::discriminant(old) == std::mem::discriminant(new)
}

fn merge_section(
    section: &str,
    base: &mut toml::value::Table,
    incoming: toml::value::Table,
) -> Result<()> {
    for (key, value) in incoming {
        let slot = base.get_mut(&key).ok_or_else(|| {
            Error::Config(format!("unknown config key {section}.{key}"))
        })?;
        if !types_compatible(slot, &value) {
            return Err(Error::Config(format!(
                "config key {section}.{key} expects a {}, got a {}",
                toml_type(slot),
                toml_type(&value)
            )));
        }
        let coerced = coerce(slot, value);
        *slot = coerced;
    }
    Ok(())
}

fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn parse_override(raw: &str) -> Result<(String, String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {raw:?} is not KEY=VALUE")))?;
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::Usage(format!("override key {key:?} is not section.key")))?;
    if field.contains('.') {
        return Err(Error::Usage(format!("override key {key:?} nests too deep")));
    }
    // Parse the value as a TOML literal; bare words fall back to strings.
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((section.to_string(), field.to_string(), parsed))
}

/// Load a run configuration: defaults, the file's sections, dotted
/// overrides, then `ICX_SEED`. Unknown sections or keys and type
/// mismatches are config errors.
pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut base = toml::Table::try_from(RunConfig::default())
        .expect("default config serializes");
    for (section, value) in file {
        let slot = base.get_mut(&section).ok_or_else(|| {
            Error::Config(format!("unknown config section [{section}]"))
        })?;
        let (base_table, incoming) = match (slot, value) {
            (toml::Value::Table(t), toml::Value::Table(v)) => (t, v),
            (slot, _) => {
                return Err(Error::Config(format!(
                    "config entry {section} must be a [{section}] section of type {}",
                    toml_type(slot)
                )))
            }
        };
        merge_section(&section, base_table, incoming)?;
    }
    for raw in sets {
        let (section, field, value) = parse_override(raw)?;
        let table = base
            .get_mut(&section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config section [{section}]")))?;
        let mut single = toml::value::Table::new();
        single.insert(field, value);
        merge_section(&section, table, single)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(base)
        .try_into()
        .map_err(|e| Error::Config(format!("configuration does not fit the schema: {e}")))?;
    if let Ok(seed_text) = std::env::var("ICX_SEED") {
        let seed: u64 = seed_text.parse().map_err(|_| {
            Error::Config(format!("ICX_SEED must be an unsigned integer, got {seed_text:?}"))
        })?;
        cfg.world.seed = seed;
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------
// Shared command plumbing
// ---------------------------------------------------------------------

pub fn resolve_provider(name: &str, world: &WorldConfig) -> Result<Box<dyn EmbedProvider>> {
    if name == "toy" {
        let palette = world.palette.iter().map(|(n, c)| (n.clone(), rgb_f(*c))).collect();
        return Ok(Box::new(ToyProvider::new(palette)));
    }
    if let Some(path) = name.strip_prefix("file:") {
        return Ok(Box::new(FileProvider::load(Path::new(path))?));
    }
    Err(Error::Config(format!(
        "unknown provider {name:?}; available providers: toy, file:<path>"
    )))
}

fn load_checkpoint_model(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(Model, Vec<crate::model::checkpoint::NamedArray>)> {
    let (model, arrays) = Model::load(path)?;
    let (want, have) = (expected.to_text(), model.cfg.to_text());
    if want != have {
        let clash = want
            .lines()
            .zip(have.lines())
            .find(|(w, h)| w != h)
            .map(|(w, h)| format!("config wants {w}, checkpoint has {h}"))
            .unwrap_or_else(|| "config text lengths differ".into());
        return Err(Error::Config(format!(
            "checkpoint {} does not match this configuration: {clash}",
            path.display()
        )));
    }
    Ok((model, arrays))
}

fn refuse_existing_corpus(dir: &Path, force: bool) -> Result<()> {
    if dir.join("manifest.txt").exists() {
        if !force {
            return Err(Error::Usage(format!(
                "{} already holds a corpus; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Canvas-wide keep-mask from an explicit panel region: references kept,
/// the region (or the whole panel when `region` is None) regenerated.
fn keep_mask_from_region(layout: &CanvasLayout, region: Option<&Image>) -> Result<Image> {
    let target = layout
        .target()
        .ok_or_else(|| Error::Shape("layout has no target panel".into()))?;
    let (h, w) = (layout.height, layout.width());
    let mut mask = Image::filled(h, w, &[1.0]);
    match region {
        None => {
            for y in 0..h {
                for x in 0..target.width {
                    mask.data[y * w + target.offset + x] = 0.0;
                }
            }
        }
        Some(r) => {
            if r.c != 1 || r.h != h || r.w != target.width {
                return Err(Error::Shape(format!(
                    "mask {}x{}x{} does not fit the {h}x{} target panel",
                    r.h, r.w, r.c, target.width
                )));
            }
            let mut any = false;
            for y in 0..h {
                for x in 0..target.width {
                    if r.data[y * target.width + x] > 0.5 {
                        mask.data[y * w + target.offset + x] = 0.0;
                        any = true;
                    }
                }
            }
            if !any {
                return Err(Error::Data(
                    "degenerate mask: no pixels are marked for regeneration".into(),
                ));
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Forge(a) => cmd_forge(a),
        Cmd::Curate(a) => cmd_curate(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

pub fn cmd_forge(args: ForgeArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let world = cfg.world_config()?;
    let n = args.items.unwrap_or(cfg.forge.items);
    refuse_existing_corpus(&args.out, args.force)?;
    let items = generate_items(&world, n)?;
    let hash = write_items(&args.out, &items)?;
    println!("forged {n} items into {} (hash {hash:016x})", args.out.display());
    Ok(())
}

pub fn cmd_curate(args: CurateArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let world = cfg.world_config()?;
    let provider_name = args.provider.as_deref().unwrap_or(&cfg.eval.provider);
    let provider = resolve_provider(provider_name, &world)?;
    let threshold = args.threshold.unwrap_or(cfg.forge.threshold);
    refuse_existing_corpus(&args.out, args.force)?;
    let items = read_items(&args.data)?;
    let total = items.len();
    let outcome = curate(items, provider.as_ref(), threshold);
    let mut kept = outcome.kept;
    let n_curated = kept.len();
    let mut log: Vec<String> = outcome.events.iter().map(|e| e.line()).collect();
    if let Some(ckpt) = &args.synthesize {
        let vocab = Vocab::from_world(&world);
        let (model, _) = load_checkpoint_model(ckpt, &cfg.model_config(vocab.len())?)?;
        let splitter = SeedSplitter::new(world.seed);
        let (synth, synth_log) = synthesize_multiref(
            &model,
            &kept,
            &world,
            &vocab,
            provider.as_ref(),
            threshold,
            cfg.sample.steps,
            &splitter,
        )?;
        log.extend(synth_log);
        kept.extend(synth);
    }
    let n_synth = kept.len() - n_curated;
    let hash = write_items(&args.out, &kept)?;
    append_lines(&args.out.join("curation.log"), &log)?;
    println!(
        "kept {n_curated}/{total} items, synthesized {n_synth}, into {} (hash {hash:016x}, {} log lines)",
        args.out.display(),
        log.len()
    );
    Ok(())
}

fn finish_stage(
    model: &Model,
    outcome: crate::flow::StageOutcome,
    out: &Path,
    stage: TrainStage,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let log_path = out.join(format!("train_stage_{}.log", stage.label()));
    let lines: Vec<String> = outcome.records.iter().map(|r| r.line()).collect();
    append_lines(&log_path, &lines)?;
    let ckpt_path = out.join(match stage {
        TrainStage::Pretrain => "pretrain.icx".to_string(),
        _ => format!("stage{}.icx", stage.label()),
    });
    model.save(&ckpt_path, &outcome.opt_arrays)?;
    let last = outcome.records.last().map(|r| r.loss);
    println!(
        "stage {} done: {} steps logged to {}, checkpoint {}{}",
        stage.label(),
        outcome.records.len(),
        log_path.display(),
        ckpt_path.display(),
        last.map(|l| format!(", final loss {l:.6}")).unwrap_or_default()
    );
    Ok(())
}

pub fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let world = cfg.world_config()?;
    let vocab = Vocab::from_world(&world);
    let model_cfg = cfg.model_config(vocab.len())?;
    let train_cfg = cfg.train_config(TrainStage::Pretrain)?;
    let items = read_items(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let splitter = SeedSplitter::new(train_cfg.seed);
    let mut model = Model::new(&model_cfg, &mut splitter.rng("model.init", 0))?;
    let outcome = run_stage(
        &mut model,
        &items,
        &vocab,
        &train_cfg,
        TrainStage::Pretrain,
        Some(&args.out),
        None,
    )?;
    finish_stage(&model, outcome, &args.out, TrainStage::Pretrain)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let stage = match args.stage.as_str() {
        "1" => TrainStage::Stage1,
        "2" => TrainStage::Stage2,
        other => {
            return Err(Error::Usage(format!("--stage must be 1 or 2, got {other:?}")))
        }
    };
    if args.init.is_some() && args.resume.is_some() {
        return Err(Error::Usage("--init and --resume are mutually exclusive".into()));
    }
    let world = cfg.world_config()?;
    let vocab = Vocab::from_world(&world);
    let model_cfg = cfg.model_config(vocab.len())?;
    let train_cfg = cfg.train_config(stage)?;
    let items = read_items(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let splitter = SeedSplitter::new(train_cfg.seed);

    let (mut model, resume) = match (&args.resume, &args.init) {
        (Some(path), _) => {
            let (model, arrays) = load_checkpoint_model(path, &model_cfg)?;
            let mut opt = AdamW::new(AdamWConfig::default());
            restore_optimizer(&mut opt, &arrays)?;
            let start_step = opt.steps() as usize;
            println!("resuming at step {start_step} from {}", path.display());
            (model, Some(ResumeState { start_step, opt_arrays: arrays }))
        }
        (None, Some(path)) => {
            let (model, _) = load_checkpoint_model(path, &model_cfg)?;
            (model, None)
        }
        (None, None) => {
            if stage == TrainStage::Stage2 {
                return Err(Error::Usage(
                    "stage 2 continues a stage-1 checkpoint; pass --init".into(),
                ));
            }
            let model = Model::new(&model_cfg, &mut splitter.rng("model.init", 0))?;
            (model, None)
        }
    };
    let has_lora = model.named_params().iter().any(|p| p.name.contains(".lora."));
    if stage == TrainStage::Stage2 && !has_lora {
        return Err(Error::Data(format!(
            "stage 2 needs a stage-1 checkpoint; {} has no adapter parameters",
            args.init
                .as_deref()
                .or(args.resume.as_deref())
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        )));
    }
    if !has_lora && model_cfg.lora_rank > 0 {
        model.attach_lora(&mut splitter.rng("lora.init", 0))?;
        let report = crate::model::trainable_param_report(&model, stage.trainable_groups());
        println!("{report}");
    }
    let outcome =
        run_stage(&mut model, &items, &vocab, &train_cfg, stage, Some(&args.out), resume)?;
    finish_stage(&model, outcome, &args.out, stage)
}

pub fn cmd_sample(args: SampleArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let mode = TaskMode::from_name(&args.mode).ok_or_else(|| {
        Error::Usage(format!(
            "unknown mode {:?}; expected precise, user_drawn, or position_free",
            args.mode
        ))
    })?;
    let aware = mode != TaskMode::PositionFree;
    if aware && args.mask.is_none() {
        return Err(Error::Usage(format!(
            "{} mode needs --mask (white pixels mark the region to regenerate)",
            mode.name()
        )));
    }
    if aware && args.target.is_none() {
        return Err(Error::Usage(format!(
            "{} mode edits an existing scene; pass --target",
            mode.name()
        )));
    }
    if !aware && args.mask.is_some() {
        eprintln!("warning: position-free mode regenerates the whole panel; --mask ignored");
    }
    if !aware && args.target.is_some() {
        eprintln!("warning: position-free mode starts from noise; --target ignored");
    }
    let world = cfg.world_config()?;
    let vocab = Vocab::from_world(&world);
    let (model, _) = load_checkpoint_model(&args.ckpt, &cfg.model_config(vocab.len())?)?;

    let refs: Vec<Image> = args
        .refs
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<Vec<_>>>()?;
    let ref_views: Vec<&Image> = refs.iter().collect();
    let target = match (aware, &args.target) {
        (true, Some(path)) => Some(read_ppm(path)?),
        _ => None,
    };
    let patch = model.cfg.patch;
    let layout = match &target {
        Some(t) => assemble_polyptych(&ref_views, t, patch)?.1,
        None => {
            let blank = Image::new(refs[0].h, refs[0].w, refs[0].c);
            if ref_views.is_empty() {
                assemble_single(&blank, patch)?.1
            } else {
                assemble_polyptych(&ref_views, &blank, patch)?.1
            }
        }
    };
    let region = match (aware, &args.mask) {
        (true, Some(path)) => Some(read_pgm(path)?),
        _ => None,
    };
    let mask = keep_mask_from_region(&layout, region.as_ref())?;

    let text = match &args.ref_prompt {
        Some(r) => format!(
            "{} {} {} {}",
            crate::forge::REF_MARKER,
            r,
            crate::forge::TARGET_MARKER,
            args.prompt
        ),
        None => format!("{} {}", crate::forge::TARGET_MARKER, args.prompt),
    };
    let text_ids = vocab.encode(&text)?;
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let seed = args.seed.unwrap_or(cfg.sample.seed);
    let req = SampleRequest {
        refs: ref_views,
        target_context: target.as_ref(),
        mask,
        text_ids,
        mode,
        steps,
        seed,
    };
    let (mut canvas, mut crop) = euler_sample(&model, &req)?;
    canvas.clamp01();
    crop.clamp01();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    crate::image::write_ppm(&args.out.join("target.ppm"), &crop)?;
    crate::image::write_ppm(&args.out.join("canvas.ppm"), &canvas)?;
    write_text(
        &args.out.join("sample.txt"),
        &format!("mode={}\nseed={seed}\nsteps={steps}\n", mode.name()),
    )?;
    println!(
        "wrote {}(target.ppm, canvas.ppm, sample.txt) mode={} seed={seed} steps={steps}",
        args.out.join("").display(),
        mode.name()
    );
    Ok(())
}

fn parse_modes(arg: Option<&str>) -> Result<Vec<TaskMode>> {
    match arg {
        None => Ok(TaskMode::ALL.to_vec()),
        Some(csv) => csv
            .split(',')
            .map(|m| {
                let m = m.trim();
                TaskMode::from_name(m).ok_or_else(|| {
                    Error::Usage(format!(
                        "unknown mode {m:?}; expected precise, user_drawn, or position_free"
                    ))
                })
            })
            .collect(),
    }
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common.config, &args.common.set)?;
    let world = cfg.world_config()?;
    let provider_name = args.provider.as_deref().unwrap_or(&cfg.eval.provider);
    let provider = resolve_provider(provider_name, &world)?;
    let modes = parse_modes(args.modes.as_deref())?;
    let vocab = Vocab::from_world(&world);
    let model_cfg = cfg.model_config(vocab.len())?;
    let (model, _) = load_checkpoint_model(&args.ckpt, &model_cfg)?;
    let items = read_items(&args.data)?;
    let splitter = SeedSplitter::new(cfg.eval.seed);
    let bench_items = benchmark_items_from(
        &items,
        &MaskRules::conservative(),
        cfg.eval.ref_cap,
        &splitter,
    )?;
    let report = run_benchmark(
        &model,
        &vocab,
        &bench_items,
        &modes,
        provider.as_ref(),
        cfg.eval.seed,
        cfg.eval.steps,
    )?;
    write_text(&args.out, &report.text())?;
    for mode in &modes {
        match report.mode_mean(*mode) {
            Some((id, tx, n)) => println!(
                "mode {:<13} n={n} identity={id:.6} text={tx:.6}",
                mode.name()
            ),
            None => println!("mode {:<13} no scored rows", mode.name()),
        }
    }
    if let Some(baseline) = &args.compare {
        let (base_model, _) = load_checkpoint_model(baseline, &model_cfg)?;
        let counts: Vec<usize> = (1..=MULTIREF_MAX).collect();
        let compare = multiref_compare(
            &base_model,
            &model,
            ("baseline", "candidate"),
            &items,
            &vocab,
            &counts,
            provider.as_ref(),
            cfg.eval.seed,
            cfg.eval.steps,
        )?;
        let compare_path = args.out.with_extension("compare.txt");
        write_text(&compare_path, &compare.text())?;
        print!("{}", compare.text());
        println!("comparison written to {}", compare_path.display());
    }
    println!("report written to {}", args.out.display());
    let missing = report.missing();
    if missing > 0 {
        return Err(Error::Data(format!(
            "{missing} of {} rows have no scores",
            report.rows.len()
        )));
    }
    Ok(())
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    // The config is loaded for validation symmetry with every other
    // command; the report itself is self-contained.
    let _ = load_config(&args.common.config, &args.common.set)?;
    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let report = MetricReport::parse(&text)?;
    if report.text() != text {
        return Err(Error::Data(format!(
            "{} does not match its canonical serialization; it was edited or truncated",
            args.input.display()
        )));
    }
    println!(
        "provider={} seed={} steps={} fingerprint={:016x} rows={}",
        report.provider,
        report.seed,
        report.steps,
        report.fingerprint,
        report.rows.len()
    );
    let mut seen = Vec::new();
    for row in &report.rows {
        if !seen.contains(&row.mode) {
            seen.push(row.mode);
        }
    }
    for mode in seen {
        match report.mode_mean(mode) {
            Some((id, tx, n)) => println!(
                "mode {:<13} n={n} identity={id:.6} text={tx:.6}",
                mode.name()
            ),
            None => println!("mode {:<13} no scored rows", mode.name()),
        }
    }
    let missing = report.missing();
    println!("missing={missing}");
    if missing > 0 {
        return Err(Error::Data(format!(
            "{missing} of {} rows have no scores",
            report.rows.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod cli_tests {
    use super::*;
    use std::sync::Mutex;

    // load_config reads ICX_SEED, which is process-global; every test
    // that calls it holds this lock so the env test cannot race them.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn defaults_round_trip_and_file_overrides_merge() {
        let _env = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "a.toml", "[train]\nsteps = 7\nlr = 0.5\n");
        let cfg = load_config(&path, &[]).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr, 0.5);
        // Untouched sections keep their defaults.
        assert_eq!(cfg, {
            let mut want = RunConfig::default();
            want.train.steps = 7;
            want.train.lr = 0.5;
            want
        });
    }

    #[test]
    fn overrides_are_type_checked() {
        let _env = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "empty.toml", "");
        let cfg =
            load_config(&path, &["train.steps=11".into(), "eval.provider=toy".into()]).unwrap();
        assert_eq!(cfg.train.steps, 11);
        // Integer literals may land on float keys.
        let cfg = load_config(&path, &["train.lr=1".into()]).unwrap();
        assert_eq!(cfg.train.lr, 1.0);
        // Type mismatch names the key and both types.
        match load_config(&path, &["train.steps=fast".into()]) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("train.steps"), "{msg}");
                assert!(msg.contains("integer") && msg.contains("string"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
        // Unknown keys are refused, in files and overrides alike.
        assert!(matches!(
            load_config(&path, &["train.velocity=3".into()]),
            Err(Error::Config(_))
        ));
        let bad = write_config(dir.path(), "b.toml", "[train]\nvelocity = 3\n");
        assert!(matches!(load_config(&bad, &[]), Err(Error::Config(_))));
        let bad = write_config(dir.path(), "c.toml", "[rocket]\nfuel = 3\n");
        match load_config(&bad, &[]) {
            Err(Error::Config(msg)) => assert!(msg.contains("[rocket]"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        // Malformed override syntax is a usage error.
        assert!(matches!(
            load_config(&path, &["train.steps".into()]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn env_seed_overrides_every_section() {
        let _env = ENV_LOCK.lock().unwrap();
        // Env vars are process-global; run both halves in one test to
        // avoid racing other tests.
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "d.toml", "[world]\nseed = 3\n");
        std::env::set_var("ICX_SEED", "99");
        let cfg = load_config(&path, &[]);
        std::env::remove_var("ICX_SEED");
        let cfg = cfg.unwrap();
        assert_eq!(cfg.world.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.sample.seed, 99);
        assert_eq!(cfg.eval.seed, 99);
        std::env::set_var("ICX_SEED", "not-a-number");
        let err = load_config(&path, &[]);
        std::env::remove_var("ICX_SEED");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_geometry_is_refused_before_any_output() {
        let _env = ENV_LOCK.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        // 13 is not divisible by the patch size 2.
        let path = write_config(dir.path(), "e.toml", "[world]\ncanvas_sizes = [[13, 12]]\n");
        assert!(matches!(load_config(&path, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn provider_resolution_lists_choices() {
        let world = WorldConfig::desk();
        assert!(resolve_provider("toy", &world).is_ok());
        match resolve_provider("clip", &world) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("toy") && msg.contains("file:"), "{msg}")
            }
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
        // A file provider needs an existing table.
        assert!(resolve_provider("file:/nonexistent/table.bin", &world).is_err());
    }

    #[test]
    fn keep_mask_respects_region_and_rejects_empty() {
        let r = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
        let t = Image::filled(4, 4, &[0.2, 0.2, 0.2]);
        let (_, layout) = assemble_polyptych(&[&r], &t, 2).unwrap();
        let whole = keep_mask_from_region(&layout, None).unwrap();
        assert_eq!(whole.data.iter().filter(|&&v| v == 0.0).count(), 16);
        let mut region = Image::new(4, 4, 1);
        region.data[5] = 1.0;
        let partial = keep_mask_from_region(&layout, Some(&region)).unwrap();
        assert_eq!(partial.data.iter().filter(|&&v| v == 0.0).count(), 1);
        assert_eq!(partial.data[1 * 8 + 4 + 1], 0.0);
        let empty = Image::new(4, 4, 1);
        assert!(matches!(
            keep_mask_from_region(&layout, Some(&empty)),
            Err(Error::Data(_))
        ));
        let off = Image::new(3, 4, 1);
        assert!(matches!(
            keep_mask_from_region(&layout, Some(&off)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shipped_configs_load_and_desk_matches_defaults() {
        let _env = ENV_LOCK.lock().unwrap();
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let desk = load_config(&root.join("desk.toml"), &[]).unwrap();
        let mut want = RunConfig::default();
        want.world.seed = 7;
        assert_eq!(desk, want, "desk.toml drifted from the built-in defaults");
        let micro = load_config(&root.join("micro.toml"), &[]).unwrap();
        assert_eq!(micro.model.dim, 16);
        assert_eq!(micro.train.steps, 40);
        micro.validate().unwrap();
    }

    #[test]
    fn mode_lists_parse() {
        assert_eq!(parse_modes(None).unwrap(), TaskMode::ALL.to_vec());
        assert_eq!(
            parse_modes(Some("precise, position_free")).unwrap(),
            vec![TaskMode::PositionAwarePrecise, TaskMode::PositionFree]
        );
        assert!(matches!(parse_modes(Some("fuzzy")), Err(Error::Usage(_))));
    }
}
