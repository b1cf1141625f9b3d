//! The velocity-prediction transformer: trainable input layers, double
//! blocks (image/text streams with joint attention), single blocks (fused
//! stream), and a zero-initialized output head mapping each canvas token to
//! a per-patch velocity vector.
//!
//! Parameters are registered by name into four groups -- backbone, input
//! layers, in-context attention extras, and adapters -- so the training
//! phases can freeze and report them independently.

pub mod blocks;
pub mod checkpoint;
pub mod linear;

use crate::error::{Error, Result};
use crate::geometry::{RopeTable, TokenSequence};
use crate::icma::{RegisterBank, RopeStyle, TaskMode};
use crate::tensor::Tensor;
use blocks::{AttnContext, DoubleBlock, SingleBlock, TimeEmbed, LN_EPS};
use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedArray, OPT_PREFIX};
use linear::LinearLayer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub double_blocks: usize,
    pub single_blocks: usize,
    pub patch: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_refs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_double_prefix: usize,
    pub lora_single_prefix: usize,
    pub rope_base: f64,
    pub rope_style: RopeStyle,
    pub share_registers: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for finite-difference testing,
    /// structurally complete.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            dim: 64,
            heads: 4,
            double_blocks: 2,
            single_blocks: 2,
            patch: 2,
            channels: 3,
            vocab_size,
            max_text_len: 24,
            max_refs: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            lora_double_prefix: 2,
            lora_single_prefix: 2,
            rope_base: 10_000.0,
            rope_style: RopeStyle::Additive,
            share_registers: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Per-token input width: noisy patch, masked-image patch, mask patch.
    pub fn input_dim(&self) -> usize {
        self.patch * self.patch * (2 * self.channels + 1)
    }

    /// Per-token output width: one velocity value per patch pixel-channel.
    pub fn velocity_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.dim
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be divisible by 4 for two-axis rotation",
                self.head_dim()
            )));
        }
        if self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("patch size and channel count must be positive".into()));
        }
        if self.vocab_size == 0 || self.max_text_len == 0 {
            return Err(Error::Config("vocab size and max text length must be positive".into()));
        }
        if self.max_refs == 0 {
            return Err(Error::Config("max reference count must be positive".into()));
        }
        if self.lora_double_prefix > self.double_blocks
            || self.lora_single_prefix > self.single_blocks
        {
            return Err(Error::Config(format!(
                "adapter prefixes {}/{} exceed block counts {}/{}",
                self.lora_double_prefix,
                self.lora_single_prefix,
                self.double_blocks,
                self.single_blocks
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "dim={}\nheads={}\ndouble_blocks={}\nsingle_blocks={}\npatch={}\nchannels={}\n\
             vocab_size={}\nmax_text_len={}\nmax_refs={}\nlora_rank={}\nlora_alpha={}\n\
             lora_double_prefix={}\nlora_single_prefix={}\nrope_base={}\nrope_style={}\n\
             share_registers={}\n",
            self.dim,
            self.heads,
            self.double_blocks,
            self.single_blocks,
            self.patch,
            self.channels,
            self.vocab_size,
            self.max_text_len,
            self.max_refs,
            self.lora_rank,
            self.lora_alpha,
            self.lora_double_prefix,
            self.lora_single_prefix,
            self.rope_base,
            self.rope_style.name(),
            self.share_registers,
        )
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk(1);
        let mut seen = std::collections::HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad config line: {line}")))?;
            fn field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
                value
                    .parse()
                    .map_err(|_| Error::Data(format!("bad value for {key}: {value}")))
            }
            match key {
                "dim" => cfg.dim = field(key, value)?,
                "heads" => cfg.heads = field(key, value)?,
                "double_blocks" => cfg.double_blocks = field(key, value)?,
                "single_blocks" => cfg.single_blocks = field(key, value)?,
                "patch" => cfg.patch = field(key, value)?,
                "channels" => cfg.channels = field(key, value)?,
                "vocab_size" => cfg.vocab_size = field(key, value)?,
                "max_text_len" => cfg.max_text_len = field(key, value)?,
                "max_refs" => cfg.max_refs = field(key, value)?,
                "lora_rank" => cfg.lora_rank = field(key, value)?,
                "lora_alpha" => cfg.lora_alpha = field(key, value)?,
                "lora_double_prefix" => cfg.lora_double_prefix = field(key, value)?,
                "lora_single_prefix" => cfg.lora_single_prefix = field(key, value)?,
                "rope_base" => cfg.rope_base = field(key, value)?,
                "rope_style" => {
                    cfg.rope_style = RopeStyle::from_name(value)
                        .ok_or_else(|| Error::Data(format!("unknown rope style {value}")))?
                }
                "share_registers" => cfg.share_registers = field(key, value)?,
                _ => return Err(Error::Data(format!("unknown config key {key}"))),
            }
            seen.insert(key.to_string());
        }
        if seen.len() != 16 {
            return Err(Error::Data(format!(
                "config block has {} of 16 required keys",
                seen.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Freezing and reporting granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    InputLayers,
    IcmaExtras,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Backbone, ParamGroup::InputLayers, ParamGroup::IcmaExtras, ParamGroup::Lora];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::InputLayers => "input_layers",
            ParamGroup::IcmaExtras => "icma_extras",
            ParamGroup::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub rope: RopeTable,
    pub img_in: LinearLayer,
    pub txt_table: Tensor,
    pub txt_in: LinearLayer,
    pub time: TimeEmbed,
    pub doubles: Vec<DoubleBlock>,
    pub singles: Vec<SingleBlock>,
    pub shared_registers: Option<RegisterBank>,
    pub head: LinearLayer,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        cfg.validate()?;
        let rope = RopeTable::new(cfg.head_dim(), cfg.rope_base)?;
        let img_in = LinearLayer::new(cfg.input_dim(), cfg.dim, rng);
        let txt_table = Tensor::randn(&[cfg.vocab_size, cfg.dim], rng)
            .mul_scalar(1.0 / (cfg.dim as f64).sqrt())
            .detach_into_param();
        let txt_in = LinearLayer::new(cfg.dim, cfg.dim, rng);
        let time = TimeEmbed::new(cfg.dim, rng);
        let mut doubles: Vec<DoubleBlock> = (0..cfg.double_blocks)
            .map(|_| DoubleBlock::new(cfg.dim, cfg.head_dim(), cfg.max_refs, rng))
            .collect();
        let mut singles: Vec<SingleBlock> = (0..cfg.single_blocks)
            .map(|_| SingleBlock::new(cfg.dim, cfg.head_dim(), cfg.max_refs, rng))
            .collect();
        let shared_registers = if cfg.share_registers {
            let bank = RegisterBank::zeros(cfg.dim);
            for b in &mut doubles {
                b.registers = bank.clone();
            }
            for b in &mut singles {
                b.registers = bank.clone();
            }
            Some(bank)
        } else {
            None
        };
        let head = LinearLayer::zeros(cfg.dim, cfg.velocity_dim());
        Ok(Model {
            cfg: cfg.clone(),
            rope,
            img_in,
            txt_table,
            txt_in,
            time,
            doubles,
            singles,
            shared_registers,
            head,
        })
    }

    /// Per-token velocity for every canvas token. Text ids embed through
    /// the table and input projection; an empty prompt drops the text
    /// stream entirely.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        text_ids: &[usize],
        t: f64,
        mode: TaskMode,
    ) -> Result<Tensor> {
        if seq.dim != self.cfg.input_dim() {
            return Err(Error::Shape(format!(
                "token dim {} but the model expects {}",
                seq.dim,
                self.cfg.input_dim()
            )));
        }
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("time {t} outside [0, 1]")));
        }
        if text_ids.len() > self.cfg.max_text_len {
            return Err(Error::Data(format!(
                "prompt has {} tokens, the model accepts at most {}",
                text_ids.len(),
                self.cfg.max_text_len
            )));
        }
        for &id in text_ids {
            if id >= self.cfg.vocab_size {
                return Err(Error::Vocab(format!(
                    "token id {id} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
        }

        let x = Tensor::from_vec(&[seq.n, seq.dim], seq.tokens.clone());
        let mut img = self.img_in.forward(&x);
        let mut txt = if text_ids.is_empty() {
            None
        } else {
            Some(self.txt_in.forward(&self.txt_table.select_rows(text_ids)))
        };
        let cond = self.time.forward(t).silu();
        let ctx = AttnContext {
            tags: &seq.tags,
            positions: &seq.positions,
            mode,
            rope: &self.rope,
            style: self.cfg.rope_style,
            heads: self.cfg.heads,
        };
        for b in &self.doubles {
            let (i, tx) = b.forward(&img, txt.as_ref(), &cond, &ctx)?;
            img = i;
            txt = tx;
        }
        let n = seq.n;
        let mut fused = match &txt {
            Some(tkns) => Tensor::concat_rows(&[&img, tkns]),
            None => img,
        };
        for b in &self.singles {
            fused = b.forward(&fused, n, &cond, &ctx)?;
        }
        let vis = if fused.rows() > n { fused.slice_rows(0..n) } else { fused };
        Ok(self.head.forward(&vis.layer_norm(LN_EPS)))
    }

    /// Attach adapters to the attention projections (q, k, v, output) of
    /// the first configured double and single blocks. Errors if any target
    /// layer already carries one.
    pub fn attach_lora(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (rank, alpha) = (self.cfg.lora_rank, self.cfg.lora_alpha);
        for i in 0..self.cfg.lora_double_prefix {
            let b = &mut self.doubles[i];
            for stream in [&mut b.img, &mut b.txt] {
                for layer in [&mut stream.q, &mut stream.k, &mut stream.v, &mut stream.o] {
                    layer.attach_lora(rank, alpha, rng)?;
                }
            }
        }
        for i in 0..self.cfg.lora_single_prefix {
            let s = &mut self.singles[i].stream;
            for layer in [&mut s.q, &mut s.k, &mut s.v, &mut s.o] {
                layer.attach_lora(rank, alpha, rng)?;
            }
        }
        Ok(())
    }

    /// Every parameter with a stable unique name and its freezing group.
    pub fn named_params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<NamedParam>, prefix: &str, l: &LinearLayer, group: ParamGroup| {
            out.push(NamedParam {
                name: format!("{prefix}.weight"),
                tensor: l.weight.clone(),
                group,
            });
            out.push(NamedParam { name: format!("{prefix}.bias"), tensor: l.bias.clone(), group });
            if let Some(a) = &l.lora {
                out.push(NamedParam {
                    name: format!("{prefix}.lora.down"),
                    tensor: a.down.clone(),
                    group: ParamGroup::Lora,
                });
                out.push(NamedParam {
                    name: format!("{prefix}.lora.up"),
                    tensor: a.up.clone(),
                    group: ParamGroup::Lora,
                });
            }
        };
        lin(&mut out, "img_in", &self.img_in, ParamGroup::InputLayers);
        out.push(NamedParam {
            name: "txt_embed.table".into(),
            tensor: self.txt_table.clone(),
            group: ParamGroup::InputLayers,
        });
        lin(&mut out, "txt_in", &self.txt_in, ParamGroup::InputLayers);
        lin(&mut out, "time.fc1", &self.time.fc1, ParamGroup::Backbone);
        lin(&mut out, "time.fc2", &self.time.fc2, ParamGroup::Backbone);

        let stream = |out: &mut Vec<NamedParam>, prefix: &str, s: &blocks::StreamWeights| {
            lin(out, &format!("{prefix}.attn.q"), &s.q, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.attn.k"), &s.k, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.attn.v"), &s.v, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.attn.o"), &s.o, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.mlp.fc1"), &s.fc1, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.mlp.fc2"), &s.fc2, ParamGroup::Backbone);
            lin(out, &format!("{prefix}.mod"), &s.modulation.layer, ParamGroup::Backbone);
        };
        let icma = |out: &mut Vec<NamedParam>,
                        prefix: &str,
                        b: &crate::icma::BoundaryEmbeddings,
                        r: &RegisterBank| {
            for (name, t) in
                [("canvas", &b.canvas), ("target", &b.target), ("index", &b.index)]
            {
                out.push(NamedParam {
                    name: format!("{prefix}.icma.{name}"),
                    tensor: t.clone(),
                    group: ParamGroup::IcmaExtras,
                });
            }
            if !self.cfg.share_registers {
                for (m, t) in r.tensors().iter().enumerate() {
                    out.push(NamedParam {
                        name: format!("{prefix}.registers.{m}"),
                        tensor: t.clone(),
                        group: ParamGroup::IcmaExtras,
                    });
                }
            }
        };
        for (i, b) in self.doubles.iter().enumerate() {
            stream(&mut out, &format!("double.{i}.img"), &b.img);
            stream(&mut out, &format!("double.{i}.txt"), &b.txt);
            icma(&mut out, &format!("double.{i}"), &b.boundary, &b.registers);
        }
        for (i, b) in self.singles.iter().enumerate() {
            stream(&mut out, &format!("single.{i}"), &b.stream);
            icma(&mut out, &format!("single.{i}"), &b.boundary, &b.registers);
        }
        if let Some(bank) = &self.shared_registers {
            for (m, t) in bank.tensors().iter().enumerate() {
                out.push(NamedParam {
                    name: format!("shared.registers.{m}"),
                    tensor: t.clone(),
                    group: ParamGroup::IcmaExtras,
                });
            }
        }
        lin(&mut out, "head", &self.head, ParamGroup::Backbone);
        out
    }

    /// Named parameters restricted to the given trainable groups.
    pub fn params_in(&self, groups: &[ParamGroup]) -> Vec<NamedParam> {
        self.named_params().into_iter().filter(|p| groups.contains(&p.group)).collect()
    }

    pub fn save(&self, path: &Path, opt_arrays: &[NamedArray]) -> Result<()> {
        let mut arrays: Vec<NamedArray> = self
            .named_params()
            .into_iter()
            .map(|p| NamedArray {
                name: p.name,
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data(),
            })
            .collect();
        for a in opt_arrays {
            if !a.name.starts_with(OPT_PREFIX) {
                return Err(Error::Data(format!(
                    "extra array {} must use the {OPT_PREFIX} prefix",
                    a.name
                )));
            }
            arrays.push(a.clone());
        }
        write_checkpoint(path, &Checkpoint { config: self.cfg.clone(), arrays })
    }

    /// Rebuild a model from a checkpoint; returns the optimizer arrays
    /// alongside. Adapters are re-attached when the file carries them.
    pub fn load(path: &Path) -> Result<(Model, Vec<NamedArray>)> {
        let cp = read_checkpoint(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&cp.config, &mut rng)?;
        if cp.model_arrays().any(|a| a.name.contains(".lora.")) {
            model.attach_lora(&mut rng)?;
        }
        let named = model.named_params();
        let mut by_name: std::collections::HashMap<&str, &NamedParam> =
            named.iter().map(|p| (p.name.as_str(), p)).collect();
        for a in cp.model_arrays() {
            let p = by_name.remove(a.name.as_str()).ok_or_else(|| {
                Error::Data(format!("checkpoint array {} does not match any parameter", a.name))
            })?;
            if p.tensor.shape() != a.shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint array {} has shape {:?}, parameter wants {:?}",
                    a.name,
                    a.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data(a.data.clone());
        }
        if let Some(missing) = by_name.keys().next() {
            return Err(Error::Data(format!("checkpoint is missing parameter {missing}")));
        }
        let opt = cp.opt_arrays().cloned().collect();
        Ok((model, opt))
    }
}

/// Exact per-group parameter counts plus the trainable fraction.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub counts: Vec<(ParamGroup, usize)>,
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

impl ParamReport {
    pub fn group_count(&self, g: ParamGroup) -> usize {
        self.counts.iter().find(|(k, _)| *k == g).map_or(0, |(_, n)| *n)
    }
}

impl std::fmt::Display for ParamReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (g, n) in &self.counts {
            writeln!(f, "{:<13} {n}", g.name())?;
        }
        writeln!(f, "total         {}", self.total)?;
        writeln!(f, "trainable     {} ({:.4}%)", self.trainable, self.fraction * 100.0)
    }
}

pub fn trainable_param_report(model: &Model, trainable: &[ParamGroup]) -> ParamReport {
    let mut counts: Vec<(ParamGroup, usize)> =
        ParamGroup::ALL.iter().map(|g| (*g, 0usize)).collect();
    for p in model.named_params() {
        let slot = counts.iter_mut().find(|(g, _)| *g == p.group).unwrap();
        slot.1 += p.tensor.numel();
    }
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    let trainable_count: usize = counts
        .iter()
        .filter(|(g, _)| trainable.contains(g))
        .map(|(_, n)| n)
        .sum();
    ParamReport {
        counts,
        total,
        trainable: trainable_count,
        fraction: trainable_count as f64 / total as f64,
    }
}
