//! Rectified-flow training and sampling over polyptych canvases.
//!
//! The path is linear: `x_t = t * data + (1 - t) * noise`, so the velocity
//! target `data - noise` does not depend on t. Model inputs stack three
//! channel groups per pixel: the noisy canvas, the clean canvas gated by
//! the keep-mask, and the mask itself. Sampling integrates the learned
//! velocity with explicit Euler steps on a uniform grid.

use crate::error::{Error, Result};
use crate::forge::{
    bucket_batches, item_bucket, Bucket, Item, MaskRules, Vocab, MULTIREF_MAX, REF_MARKER,
    TARGET_MARKER,
};
use crate::geometry::{
    assemble_polyptych, assemble_single, patchify, tokenize_canvas, tokenize_sequence,
    unpatchify, TokenSequence,
};
use crate::icma::TaskMode;
use crate::image::{CanvasLayout, Image, PanelRole};
use crate::model::checkpoint::NamedArray;
use crate::model::{Model, ParamGroup};
use crate::rng::SeedSplitter;
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Linear interpolation between noise (t = 0) and data (t = 1). Endpoints
/// are exact.
pub fn noising(data: &Image, noise: &Image, t: f64) -> Result<Image> {
    if data.h != noise.h || data.w != noise.w || data.c != noise.c {
        return Err(Error::Shape(format!(
            "noising shapes differ: {}x{}x{} vs {}x{}x{}",
            data.h, data.w, data.c, noise.h, noise.w, noise.c
        )));
    }
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("time {t} outside [0, 1]")));
    }
    let mut out = Image::new(data.h, data.w, data.c);
    for (o, (d, n)) in out.data.iter_mut().zip(data.data.iter().zip(&noise.data)) {
        *o = if t == 0.0 {
            *n
        } else if t == 1.0 {
            *d
        } else {
            t * d + (1.0 - t) * n
        };
    }
    Ok(out)
}

/// The regression target of the flow objective; independent of t.
pub fn velocity_target(data: &Image, noise: &Image) -> Result<Image> {
    if data.h != noise.h || data.w != noise.w || data.c != noise.c {
        return Err(Error::Shape("velocity target needs matching shapes".into()));
    }
    let mut out = Image::new(data.h, data.w, data.c);
    for (o, (d, n)) in out.data.iter_mut().zip(data.data.iter().zip(&noise.data)) {
        *o = d - n;
    }
    Ok(out)
}

/// Canvas-wide keep-mask for one task mode: 1 everywhere on references,
/// and on the target panel either all 0 (position-free), 0 exactly on the
/// silhouette (precise), or 0 on a synthesized user blob (user-drawn).
/// Position-aware modes require a non-empty silhouette sized like the
/// target panel.
pub fn make_mask(
    mode: TaskMode,
    layout: &CanvasLayout,
    silhouette: Option<&Image>,
    rules: &MaskRules,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let target = layout
        .target()
        .ok_or_else(|| Error::Shape("layout has no target panel".into()))?;
    let (h, w) = (layout.height, layout.width());
    let mut mask = Image::filled(h, w, &[1.0]);
    let zero_region = |mask: &mut Image, region: &Image| {
        for y in 0..h {
            for x in 0..region.w {
                if region.data[y * region.w + x] > 0.5 {
                    mask.data[y * w + target.offset + x] = 0.0;
                }
            }
        }
    };
    match mode {
        TaskMode::PositionFree => {
            for y in 0..h {
                for x in 0..target.width {
                    mask.data[y * w + target.offset + x] = 0.0;
                }
            }
        }
        TaskMode::PositionAwarePrecise | TaskMode::PositionAwareUserDrawn => {
            let sil = silhouette.ok_or_else(|| {
                Error::Data(format!("{} mode needs a silhouette", mode.name()))
            })?;
            if sil.c != 1 || sil.h != h || sil.w != target.width {
                return Err(Error::Shape(format!(
                    "silhouette {}x{}x{} does not fit a {h}x{} target panel",
                    sil.h, sil.w, sil.c, target.width
                )));
            }
            if sil.data.iter().all(|&v| v <= 0.5) {
                return Err(Error::Data(
                    "degenerate mask: the silhouette marks no pixels".into(),
                ));
            }
            if mode == TaskMode::PositionAwarePrecise {
                zero_region(&mut mask, sil);
            } else {
                let blob = crate::forge::synthesize_user_mask(sil, rules, rng)?;
                zero_region(&mut mask, &blob);
            }
        }
    }
    Ok(mask)
}

/// Stack the per-pixel input channels `[x_t | context * mask | mask]` and
/// tokenize over the canvas grid. `x_t` is the current noisy (or, during
/// sampling, integrated) canvas; `context` is the clean canvas whose kept
/// region conditions generation.
pub fn build_model_input(
    x_t: &Image,
    context: &Image,
    mask: &Image,
    layout: &CanvasLayout,
    patch: usize,
) -> Result<TokenSequence> {
    if x_t.h != context.h || x_t.w != context.w || x_t.c != context.c {
        return Err(Error::Shape("noisy canvas and context canvas differ in shape".into()));
    }
    if mask.c != 1 || mask.h != x_t.h || mask.w != x_t.w {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} does not match canvas {}x{}",
            mask.h, mask.w, mask.c, x_t.h, x_t.w
        )));
    }
    let c = x_t.c;
    let mut stacked = Image::new(x_t.h, x_t.w, 2 * c + 1);
    for i in 0..x_t.h * x_t.w {
        let o = i * (2 * c + 1);
        for ch in 0..c {
            stacked.data[o + ch] = x_t.data[i * c + ch];
            stacked.data[o + c + ch] = context.data[i * c + ch] * mask.data[i];
        }
        stacked.data[o + 2 * c] = mask.data[i];
    }
    tokenize_canvas(&stacked, layout, patch)
}

/// Flow-matching objective over the whole canvas: mean over every canvas
/// token of the squared error between predicted and true velocity. With
/// `target_only` the mean is restricted to target-panel tokens (the
/// ablation weighting).
#[allow(clippy::too_many_arguments)]
pub fn polyptych_loss(
    model: &Model,
    canvas: &Image,
    layout: &CanvasLayout,
    mask: &Image,
    noise: &Image,
    t: f64,
    text_ids: &[usize],
    mode: TaskMode,
    target_only: bool,
) -> Result<Tensor> {
    let patch = model.cfg.patch;
    let x_t = noising(canvas, noise, t)?;
    let seq = build_model_input(&x_t, canvas, mask, layout, patch)?;
    let pred = model.forward(&seq, text_ids, t, mode)?;
    let vel = velocity_target(canvas, noise)?;
    let (vt, _, _) = patchify(&vel, patch)?;
    let target = Tensor::from_vec(&[seq.n, model.cfg.velocity_dim()], vt);
    let diff = pred.sub(&target);
    if target_only {
        let rows: Vec<usize> = seq
            .tags
            .iter()
            .enumerate()
            .filter(|(_, tag)| **tag == PanelRole::Target)
            .map(|(i, _)| i)
            .collect();
        let n = rows.len();
        Ok(diff.select_rows(&rows).square().sum_all().mul_scalar(1.0 / n as f64))
    } else {
        Ok(diff.square().sum_all().mul_scalar(1.0 / seq.n as f64))
    }
}

/// The sequence-condition objective kept for comparison: the noisy target
/// panel and the clean reference panels are separate sequence entries with
/// panel-local positions, nothing is stitched, and the context/mask channel
/// groups are held at zero so conditioning flows only through attention.
/// The loss is truncated to the target tokens.
pub fn baseline_seq_loss(
    model: &Model,
    target_img: &Image,
    refs: &[&Image],
    noise: &Image,
    t: f64,
    text_ids: &[usize],
    mode: TaskMode,
) -> Result<Tensor> {
    let patch = model.cfg.patch;
    let x_t = noising(target_img, noise, t)?;
    let seq = tokenize_sequence(&x_t, refs, patch)?;
    let full_dim = model.cfg.input_dim();
    let mut tokens = vec![0.0; seq.n * full_dim];
    for (i, chunk) in seq.tokens.chunks_exact(seq.dim).enumerate() {
        tokens[i * full_dim..i * full_dim + seq.dim].copy_from_slice(chunk);
    }
    let seq = TokenSequence { tokens, dim: full_dim, ..seq };
    let pred = model.forward(&seq, text_ids, t, mode)?;
    let n_target = seq.grid_h * seq.grid_w;
    let vel = velocity_target(target_img, noise)?;
    let (vt, _, _) = patchify(&vel, patch)?;
    let target = Tensor::from_vec(&[n_target, model.cfg.velocity_dim()], vt);
    let diff = pred.slice_rows(0..n_target).sub(&target);
    Ok(diff.square().sum_all().mul_scalar(1.0 / n_target as f64))
}

/// Explicit Euler on the unit interval: `x <- x + (1/steps) * v(x, k/steps)`.
/// Any non-finite state aborts with the offending step index.
pub fn euler_integrate(
    x0: &[f64],
    steps: usize,
    mut velocity: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!(
                "velocity returned {} values for {} states",
                v.len(),
                x.len()
            )));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state at integration step {k}"
            )));
        }
    }
    Ok(x)
}

/// Standard-normal image, Box-Muller over the stream.
pub fn noise_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(h, w, c);
    let mut i = 0;
    while i < img.data.len() {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, co) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        img.data[i] = r * co;
        i += 1;
        if i < img.data.len() {
            img.data[i] = r * s;
            i += 1;
        }
    }
    img
}

/// One sampling job: references on the left, an optional existing target
/// scene as context (required content for position-aware edits), a
/// canvas-wide keep-mask, a prompt, and the integration grid.
pub struct SampleRequest<'a> {
    pub refs: Vec<&'a Image>,
    pub target_context: Option<&'a Image>,
    pub mask: Image,
    pub text_ids: Vec<usize>,
    pub mode: TaskMode,
    pub steps: usize,
    pub seed: u64,
}

/// Integrate the model's velocity field from seeded noise. Returns the
/// final canvas and the target-panel crop. Deterministic per seed.
pub fn euler_sample(model: &Model, req: &SampleRequest) -> Result<(Image, Image)> {
    let patch = model.cfg.patch;
    let channels = model.cfg.channels;
    let zeros;
    let target_panel: &Image = match (req.target_context, req.refs.first()) {
        (Some(ctx), _) => ctx,
        (None, Some(first)) => {
            zeros = Image::new(first.h, first.w, first.c);
            &zeros
        }
        (None, None) => {
            return Err(Error::Data(
                "sampling needs a reference or a target context to size the canvas".into(),
            ))
        }
    };
    let (context, layout) = if req.refs.is_empty() {
        assemble_single(target_panel, patch)?
    } else {
        assemble_polyptych(&req.refs, target_panel, patch)?
    };
    if context.c != channels {
        return Err(Error::Shape(format!(
            "panels have {} channels, the model expects {channels}",
            context.c
        )));
    }
    if req.mask.h != context.h || req.mask.w != context.w || req.mask.c != 1 {
        return Err(Error::Shape(format!(
            "mask {}x{}x{} does not match the {}x{} canvas",
            req.mask.h, req.mask.w, req.mask.c, context.h, context.w
        )));
    }
    let mut rng = SeedSplitter::new(req.seed).rng("sample.noise", 0);
    let noise = noise_image(context.h, context.w, channels, &mut rng);
    let (gh, gw) = (context.h / patch, context.w / patch);
    let final_state = euler_integrate(&noise.data, req.steps, |state, t| {
        let mut x_t = Image::new(context.h, context.w, channels);
        x_t.data.copy_from_slice(state);
        let seq = build_model_input(&x_t, &context, &req.mask, &layout, patch)?;
        let vel = model.forward(&seq, &req.text_ids, t, req.mode)?;
        Ok(unpatchify(&vel.data(), gh, gw, patch, channels).data)
    })?;
    let mut canvas = Image::new(context.h, context.w, channels);
    canvas.data = final_state;
    let target = layout.target().expect("assembled layouts always carry a target");
    let crop = canvas.crop_cols(target.offset, target.width);
    Ok((canvas, crop))
}

/// Prompt template: "[REF-SCENE] {refs} [TARGET-SCENE] {target}", with the
/// reference part dropped (selective context) with probability `p_drop`.
pub fn compose_prompt(
    vocab: &Vocab,
    ref_text: &str,
    target_text: &str,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let dropped = rng.gen::<f64>() < p_drop;
    let text = if dropped {
        format!("{TARGET_MARKER} {target_text}")
    } else {
        format!("{REF_MARKER} {ref_text} {TARGET_MARKER} {target_text}")
    };
    vocab.encode(&text)
}

/// How sampling times are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TSchedule {
    Uniform,
    /// sigmoid(mean + std * z) with standard-normal z.
    LogitNormal { mean: f64, std: f64 },
}

impl TSchedule {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            TSchedule::Uniform => rng.gen(),
            TSchedule::LogitNormal { mean, std } => {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                1.0 / (1.0 + (-(mean + std * z)).exp())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Probability of each task mode per step, ordered precise,
    /// user-drawn, position-free. Must sum to 1.
    pub mode_probs: [f64; 3],
    /// Probability the reference part of the prompt is dropped.
    pub prompt_drop: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables cadence saves.
    pub checkpoint_every: usize,
    pub t_schedule: TSchedule,
    /// Ablation: average the loss over target tokens only.
    pub loss_target_only: bool,
    /// Explicit bucket list; empty derives one bucket per distinct item
    /// shape in the corpus.
    pub buckets: Vec<Bucket>,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            mode_probs: [0.4, 0.3, 0.3],
            prompt_drop: 0.3,
            steps: 200,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 0.0,
            seed,
            checkpoint_every: 0,
            t_schedule: TSchedule::Uniform,
            loss_target_only: false,
            buckets: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_probs.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
            return Err(Error::Config("mode probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = self.mode_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mode probabilities sum to {sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop) {
            return Err(Error::Config(format!("prompt drop {} outside [0, 1]", self.prompt_drop)));
        }
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cumulative draw over the three task modes.
pub fn draw_mode(probs: &[f64; 3], rng: &mut ChaCha8Rng) -> TaskMode {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (p, mode) in probs.iter().zip(TaskMode::ALL) {
        acc += p;
        if u < acc {
            return mode;
        }
    }
    TaskMode::PositionFree
}

/// Which phase of the pipeline is training, and therefore which parameter
/// groups move. Pre-training tunes the backbone on single panels; the two
/// customization stages freeze it and tune input layers, the in-context
/// extras, and adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Stage1,
    Stage2,
}

impl TrainStage {
    pub fn label(self) -> &'static str {
        match self {
            TrainStage::Pretrain => "pretrain",
            TrainStage::Stage1 => "1",
            TrainStage::Stage2 => "2",
        }
    }

    pub fn from_label(s: &str) -> Option<TrainStage> {
        match s {
            "pretrain" => Some(TrainStage::Pretrain),
            "1" => Some(TrainStage::Stage1),
            "2" => Some(TrainStage::Stage2),
            _ => None,
        }
    }

    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            TrainStage::Pretrain => &[ParamGroup::Backbone, ParamGroup::InputLayers],
            _ => &[ParamGroup::InputLayers, ParamGroup::IcmaExtras, ParamGroup::Lora],
        }
    }

    /// Largest reference count a sample may use in this stage.
    fn ref_cap(self) -> usize {
        match self {
            TrainStage::Pretrain => 0,
            TrainStage::Stage1 => 1,
            TrainStage::Stage2 => MULTIREF_MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub stage: &'static str,
    pub mode: TaskMode,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn line(&self) -> String {
        format!(
            "step={} stage={} mode={} loss={:.6} lr={}",
            self.step,
            self.stage,
            self.mode.name(),
            self.loss,
            self.lr
        )
    }
}

/// Optimizer state as checkpoint arrays under the reserved "opt." prefix.
pub fn optimizer_arrays(opt: &AdamW) -> Vec<NamedArray> {
    let mut arrays = vec![NamedArray {
        name: "opt.steps".into(),
        shape: vec![1],
        data: vec![opt.steps() as f64],
    }];
    for (name, m, v) in opt.export_state() {
        arrays.push(NamedArray { name: format!("opt.m.{name}"), shape: vec![m.len()], data: m });
        arrays.push(NamedArray { name: format!("opt.v.{name}"), shape: vec![v.len()], data: v });
    }
    arrays
}

pub fn restore_optimizer(opt: &mut AdamW, arrays: &[NamedArray]) -> Result<()> {
    let mut steps = 0u64;
    let mut ms: Vec<(String, Vec<f64>)> = Vec::new();
    let mut vs: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    for a in arrays {
        if a.name == "opt.steps" {
            steps = *a.data.first().ok_or_else(|| {
                Error::Data("opt.steps array is empty".into())
            })? as u64;
        } else if let Some(n) = a.name.strip_prefix("opt.m.") {
            ms.push((n.to_string(), a.data.clone()));
        } else if let Some(n) = a.name.strip_prefix("opt.v.") {
            vs.insert(n.to_string(), a.data.clone());
        } else if a.name.starts_with("opt.") {
            return Err(Error::Data(format!("unrecognized optimizer array {}", a.name)));
        }
    }
    let mut slots = Vec::with_capacity(ms.len());
    for (name, m) in ms {
        let v = vs.remove(&name).ok_or_else(|| {
            Error::Data(format!("optimizer state for {name} has first moments but no second"))
        })?;
        slots.push((name, m, v));
    }
    if let Some(name) = vs.keys().next() {
        return Err(Error::Data(format!(
            "optimizer state for {name} has second moments but no first"
        )));
    }
    opt.import_state(steps, slots);
    Ok(())
}

/// Continuation point for a training run: the step to resume at and the
/// optimizer arrays from the checkpoint.
pub struct ResumeState {
    pub start_step: usize,
    pub opt_arrays: Vec<NamedArray>,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub records: Vec<StepRecord>,
    pub warnings: Vec<String>,
    /// Final optimizer state, ready to ride along in a checkpoint.
    pub opt_arrays: Vec<NamedArray>,
}

struct PreparedSample {
    canvas: Image,
    layout: CanvasLayout,
    mask: Image,
    text_ids: Vec<usize>,
}

/// Assemble the canvas, mask, and prompt for one item under one stage.
fn prepare_sample(
    item: &Item,
    stage: TrainStage,
    refs_wanted: usize,
    mode: TaskMode,
    vocab: &Vocab,
    prompt_drop: f64,
    patch: usize,
    pick_rng: &mut ChaCha8Rng,
    mask_rng: &mut ChaCha8Rng,
    prompt_rng: &mut ChaCha8Rng,
) -> Result<PreparedSample> {
    if stage == TrainStage::Pretrain {
        let scene = &item.scenes[pick_rng.gen_range(0..item.scenes.len())];
        let (canvas, layout) = assemble_single(&scene.image, patch)?;
        let mask = Image::new(canvas.h, canvas.w, 1);
        let text_ids = compose_prompt(vocab, "", &scene.caption, 1.0, prompt_rng)?;
        return Ok(PreparedSample { canvas, layout, mask, text_ids });
    }
    let mut pool: Vec<usize> =
        (0..item.scenes.len()).filter(|&i| i != item.target).collect();
    pool.shuffle(pick_rng);
    if pool.len() < refs_wanted {
        return Err(Error::Data(format!(
            "item {} has {} reference scenes, the bucket wants {refs_wanted}",
            item.id,
            pool.len()
        )));
    }
    pool.truncate(refs_wanted);
    let ref_imgs: Vec<&Image> = pool.iter().map(|&i| &item.scenes[i].image).collect();
    let target = item.target_scene();
    let (canvas, layout) = assemble_polyptych(&ref_imgs, &target.image, patch)?;
    let mask = make_mask(
        mode,
        &layout,
        Some(&target.silhouette),
        &MaskRules::conservative(),
        mask_rng,
    )?;
    let ref_text = pool
        .iter()
        .map(|&i| item.scenes[i].caption.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let text_ids = compose_prompt(vocab, &ref_text, &target.caption, prompt_drop, prompt_rng)?;
    Ok(PreparedSample { canvas, layout, mask, text_ids })
}

/// One training phase: bucketed epochs over the items, one task mode per
/// step, flow loss averaged over the batch, AdamW on the stage's trainable
/// groups. All randomness derives from per-step streams, so a run resumed
/// from a checkpoint at step k reproduces the uninterrupted run bitwise.
pub fn run_stage(
    model: &mut Model,
    items: &[Item],
    vocab: &Vocab,
    cfg: &TrainConfig,
    stage: TrainStage,
    out_dir: Option<&Path>,
    resume: Option<ResumeState>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("training needs at least one item".into()));
    }
    let cap = stage.ref_cap();
    if stage == TrainStage::Stage2 && items.iter().all(|i| i.scenes.len() < 3) {
        return Err(Error::Data(
            "stage 2 mixes reference counts but no item has more than one reference scene"
                .into(),
        ));
    }
    let descriptors: Vec<Bucket> = items.iter().map(|i| item_bucket(i, cap)).collect();
    let buckets: Vec<Bucket> = if cfg.buckets.is_empty() {
        let mut seen = Vec::new();
        for d in &descriptors {
            if !seen.contains(d) {
                seen.push(*d);
            }
        }
        seen
    } else {
        cfg.buckets.clone()
    };
    let mut warnings = Vec::new();
    for b in &buckets {
        if !descriptors.contains(b) {
            warnings.push(format!("bucket {} has no samples; skipped", b.key_text()));
        }
    }
    let splitter = SeedSplitter::new(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let start_step = match resume {
        Some(r) => {
            restore_optimizer(&mut opt, &r.opt_arrays)?;
            r.start_step
        }
        None => 0,
    };
    let trainable: Vec<(String, Tensor)> = model
        .params_in(stage.trainable_groups())
        .into_iter()
        .map(|p| (p.name, p.tensor))
        .collect();
    let mut records = Vec::new();
    let mut schedule: Vec<(Bucket, Vec<usize>)> = Vec::new();
    let mut schedule_epoch = usize::MAX;
    for step in start_step..cfg.steps {
        // The schedule length is constant across epochs, so the epoch index
        // is derivable from the step alone; resume lands mid-epoch safely.
        if schedule_epoch == usize::MAX {
            schedule = bucket_batches(
                &descriptors,
                &buckets,
                cfg.batch_size,
                splitter.derive("train.epoch", 0),
            )?;
        }
        let per_epoch = schedule.len();
        let epoch = step / per_epoch;
        if epoch != schedule_epoch {
            schedule = bucket_batches(
                &descriptors,
                &buckets,
                cfg.batch_size,
                splitter.derive("train.epoch", epoch as u64),
            )?;
            schedule_epoch = epoch;
        }
        let (bucket, idxs) = &schedule[step % per_epoch];
        let step_split = splitter.child("train.step", step as u64);
        let mode = if stage == TrainStage::Pretrain {
            TaskMode::PositionFree
        } else {
            draw_mode(&cfg.mode_probs, &mut step_split.rng("mode", 0))
        };
        let mut loss_acc: Option<Tensor> = None;
        for (j, &idx) in idxs.iter().enumerate() {
            let item = &items[idx];
            let sample = prepare_sample(
                item,
                stage,
                bucket.refs,
                mode,
                vocab,
                cfg.prompt_drop,
                model.cfg.patch,
                &mut step_split.rng("pick", j as u64),
                &mut step_split.rng("mask", j as u64),
                &mut step_split.rng("prompt", j as u64),
            )?;
            let noise = noise_image(
                sample.canvas.h,
                sample.canvas.w,
                sample.canvas.c,
                &mut step_split.rng("noise", j as u64),
            );
            let t = cfg.t_schedule.draw(&mut step_split.rng("t", j as u64));
            let loss = polyptych_loss(
                model,
                &sample.canvas,
                &sample.layout,
                &sample.mask,
                &noise,
                t,
                &sample.text_ids,
                mode,
                cfg.loss_target_only,
            )?;
            loss_acc = Some(match loss_acc {
                Some(acc) => acc.add(&loss),
                None => loss,
            });
        }
        let loss = loss_acc.unwrap().mul_scalar(1.0 / idxs.len() as f64);
        let loss_val = loss.data()[0];
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        for (_, p) in &trainable {
            p.zero_grad();
        }
        loss.backward();
        opt.step(&trainable)?;
        records.push(StepRecord {
            step,
            stage: stage.label(),
            mode,
            loss: loss_val,
            lr: cfg.lr,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!(
                    "checkpoint_stage{}_{:06}.icx",
                    stage.label(),
                    step + 1
                ));
                model.save(&path, &optimizer_arrays(&opt))?;
            }
        }
    }
    Ok(StageOutcome { records, warnings, opt_arrays: optimizer_arrays(&opt) })
}

#[cfg(test)]
mod flow_tests {
    use super::*;
    use crate::forge::{generate_items, WorldConfig};
    use crate::icma::RopeStyle;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn tiny_world() -> WorldConfig {
        WorldConfig { seed: 21, ..WorldConfig::desk() }
    }

    fn tiny_model(world: &WorldConfig) -> (Model, Vocab) {
        let vocab = Vocab::from_world(world);
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            double_blocks: 1,
            single_blocks: 1,
            patch: 2,
            channels: 3,
            vocab_size: vocab.len(),
            max_text_len: 24,
            max_refs: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            lora_double_prefix: 1,
            lora_single_prefix: 1,
            rope_base: 10000.0,
            rope_style: RopeStyle::Additive,
            share_registers: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (Model::new(&cfg, &mut rng).unwrap(), vocab)
    }

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = SeedSplitter::new(seed).rng("img", 0);
        let mut img = Image::new(h, w, c);
        for v in &mut img.data {
            *v = rng.gen();
        }
        img
    }

    #[test]
    fn noising_endpoints_are_exact() {
        let data = rand_image(4, 6, 3, 1);
        let noise = rand_image(4, 6, 3, 2);
        let at0 = noising(&data, &noise, 0.0).unwrap();
        let at1 = noising(&data, &noise, 1.0).unwrap();
        assert_eq!(at0.data, noise.data);
        assert_eq!(at1.data, data.data);
        let bad = Image::new(4, 4, 3);
        assert!(matches!(noising(&data, &bad, 0.5), Err(Error::Shape(_))));
        assert!(matches!(noising(&data, &noise, 1.5), Err(Error::Config(_))));
        let vel = velocity_target(&data, &noise).unwrap();
        for ((v, d), n) in vel.data.iter().zip(&data.data).zip(&noise.data) {
            assert_eq!(*v, d - n);
        }
    }

    #[test]
    fn masks_follow_the_mode() {
        let refs = rand_image(8, 8, 3, 3);
        let target = rand_image(8, 8, 3, 4);
        let (_, layout) = assemble_polyptych(&[&refs], &target, 2).unwrap();
        let mut sil = Image::new(8, 8, 1);
        for y in 2..5 {
            for x in 3..6 {
                sil.data[y * 8 + x] = 1.0;
            }
        }
        let rules = MaskRules::conservative();
        let splitter = SeedSplitter::new(9);
        let free = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &rules,
            &mut splitter.rng("m", 0),
        )
        .unwrap();
        // References all kept, target all regenerated.
        for y in 0..8 {
            for x in 0..16 {
                let expect = if x < 8 { 1.0 } else { 0.0 };
                assert_eq!(free.data[y * 16 + x], expect);
            }
        }
        let precise = make_mask(
            TaskMode::PositionAwarePrecise,
            &layout,
            Some(&sil),
            &rules,
            &mut splitter.rng("m", 1),
        )
        .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = 1.0 - sil.data[y * 8 + x];
                assert_eq!(precise.data[y * 16 + 8 + x], expect);
                assert_eq!(precise.data[y * 16 + x], 1.0);
            }
        }
        let drawn = make_mask(
            TaskMode::PositionAwareUserDrawn,
            &layout,
            Some(&sil),
            &rules,
            &mut splitter.rng("m", 2),
        )
        .unwrap();
        // The regenerated region is a superset of the silhouette.
        for y in 0..8 {
            for x in 0..8 {
                if sil.data[y * 8 + x] == 1.0 {
                    assert_eq!(drawn.data[y * 16 + 8 + x], 0.0);
                }
                assert_eq!(drawn.data[y * 16 + x], 1.0);
            }
        }
        // Degenerate silhouette is refused for position-aware modes.
        let empty = Image::new(8, 8, 1);
        match make_mask(
            TaskMode::PositionAwarePrecise,
            &layout,
            Some(&empty),
            &rules,
            &mut splitter.rng("m", 3),
        ) {
            Err(Error::Data(msg)) => assert!(msg.contains("degenerate")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn fully_masked_aware_equals_position_free_bitwise() {
        let refs = rand_image(8, 8, 3, 5);
        let target = rand_image(8, 8, 3, 6);
        let (canvas, layout) = assemble_polyptych(&[&refs], &target, 2).unwrap();
        let full = Image::filled(8, 8, &[1.0]);
        let rules = MaskRules::conservative();
        let splitter = SeedSplitter::new(10);
        let aware = make_mask(
            TaskMode::PositionAwarePrecise,
            &layout,
            Some(&full),
            &rules,
            &mut splitter.rng("m", 0),
        )
        .unwrap();
        let free = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &rules,
            &mut splitter.rng("m", 1),
        )
        .unwrap();
        assert_eq!(aware.data, free.data);
        let noise = rand_image(8, 16, 3, 7);
        let x_t = noising(&canvas, &noise, 0.3).unwrap();
        let a = build_model_input(&x_t, &canvas, &aware, &layout, 2).unwrap();
        let b = build_model_input(&x_t, &canvas, &free, &layout, 2).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tokens), bits(&b.tokens));
    }

    #[test]
    fn model_input_stacks_channels_per_pixel() {
        let refs = rand_image(2, 2, 3, 8);
        let target = rand_image(2, 2, 3, 9);
        let (canvas, layout) = assemble_polyptych(&[&refs], &target, 1).unwrap();
        let mut mask = Image::filled(2, 4, &[1.0]);
        mask.data[3] = 0.0; // pixel (0, 3) regenerated
        let x_t = rand_image(2, 4, 3, 10);
        let seq = build_model_input(&x_t, &canvas, &mask, &layout, 1).unwrap();
        assert_eq!(seq.dim, 7);
        assert_eq!(seq.n, 8);
        // Token for pixel (0, 3): [x_t | canvas * 0 | 0].
        let tok = &seq.tokens[3 * 7..4 * 7];
        for ch in 0..3 {
            assert_eq!(tok[ch], x_t.get(0, 3)[ch]);
            assert_eq!(tok[3 + ch], 0.0);
        }
        assert_eq!(tok[6], 0.0);
        // Token for pixel (1, 1): kept, so context passes through.
        let tok = &seq.tokens[5 * 7..6 * 7];
        for ch in 0..3 {
            assert_eq!(tok[3 + ch], canvas.get(1, 1)[ch]);
        }
        assert_eq!(tok[6], 1.0);
    }

    #[test]
    fn zero_model_loss_is_the_velocity_energy() {
        let world = tiny_world();
        let (model, vocab) = tiny_model(&world);
        let items = generate_items(&world, 2).unwrap();
        let item = &items[0];
        let ref_img = &item.scenes[0].image;
        let (canvas, layout) = assemble_polyptych(&[ref_img], &item.target_scene().image, 2).unwrap();
        let splitter = SeedSplitter::new(40);
        let mask = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &MaskRules::conservative(),
            &mut splitter.rng("m", 0),
        )
        .unwrap();
        let noise = noise_image(canvas.h, canvas.w, 3, &mut splitter.rng("n", 0));
        let ids = vocab.encode(&item.target_scene().caption).unwrap();
        let loss = polyptych_loss(
            &model, &canvas, &layout, &mask, &noise, 0.4, &ids, TaskMode::PositionFree, false,
        )
        .unwrap();
        let vel = velocity_target(&canvas, &noise).unwrap();
        let (vt, _, _) = patchify(&vel, 2).unwrap();
        let n = seq_tokens(&canvas, 2);
        let expect: f64 = vt.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((loss.data()[0] - expect).abs() < 1e-12);
    }

    fn seq_tokens(img: &Image, patch: usize) -> usize {
        (img.h / patch) * (img.w / patch)
    }

    #[test]
    fn hand_oracle_two_token_loss() {
        // Two 2x2 panels, patch 2: one reference token and one target token.
        // At zero init loss = (||d0 - n0||^2 + ||d1 - n1||^2) / 2.
        let world = tiny_world();
        let (model, _) = tiny_model(&world);
        let mut refp = Image::new(2, 2, 3);
        let mut tgt = Image::new(2, 2, 3);
        for (i, v) in refp.data.iter_mut().enumerate() {
            *v = 0.1 * i as f64;
        }
        for (i, v) in tgt.data.iter_mut().enumerate() {
            *v = 0.05 * i as f64 + 0.2;
        }
        let (canvas, layout) = assemble_polyptych(&[&refp], &tgt, 2).unwrap();
        let mut noise = Image::new(2, 4, 3);
        for (i, v) in noise.data.iter_mut().enumerate() {
            *v = ((i * 7) % 5) as f64 * 0.13 - 0.2;
        }
        let mask = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &MaskRules::conservative(),
            &mut SeedSplitter::new(0).rng("m", 0),
        )
        .unwrap();
        let loss =
            polyptych_loss(&model, &canvas, &layout, &mask, &noise, 0.7, &[], TaskMode::PositionFree, false)
                .unwrap();
        let mut expect = 0.0;
        for i in 0..canvas.data.len() {
            expect += (canvas.data[i] - noise.data[i]).powi(2);
        }
        expect /= 2.0; // two tokens
        assert!((loss.data()[0] - expect).abs() < 1e-12, "{} vs {expect}", loss.data()[0]);

        // Target-only weighting averages over the single target token.
        let loss_t =
            polyptych_loss(&model, &canvas, &layout, &mask, &noise, 0.7, &[], TaskMode::PositionFree, true)
                .unwrap();
        let mut expect_t = 0.0;
        for y in 0..2 {
            for x in 2..4 {
                for ch in 0..3 {
                    let i = (y * 4 + x) * 3 + ch;
                    expect_t += (canvas.data[i] - noise.data[i]).powi(2);
                }
            }
        }
        assert!((loss_t.data()[0] - expect_t).abs() < 1e-12);
    }

    #[test]
    fn baseline_objective_truncates_to_target_tokens() {
        let world = tiny_world();
        let (model, vocab) = tiny_model(&world);
        let items = generate_items(&world, 1).unwrap();
        let item = &items[0];
        let target = &item.target_scene().image;
        let refs: Vec<&Image> = item.reference_scenes().map(|s| &s.image).collect();
        let noise = noise_image(target.h, target.w, 3, &mut SeedSplitter::new(2).rng("n", 0));
        let ids = vocab.encode(&item.target_scene().caption).unwrap();
        let loss = baseline_seq_loss(
            &model, target, &refs, &noise, 0.5, &ids, TaskMode::PositionFree,
        )
        .unwrap();
        let vel = velocity_target(target, &noise).unwrap();
        let (vt, _, _) = patchify(&vel, 2).unwrap();
        let n = seq_tokens(target, 2);
        let expect: f64 = vt.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((loss.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn euler_converges_at_first_order() {
        // v = a - x has the exact solution x(1) = a + (x0 - a) / e.
        let a = 1.7;
        let x0 = vec![-0.4];
        let exact = a + (x0[0] - a) * (-1.0f64).exp();
        let err = |steps: usize| {
            let x = euler_integrate(&x0, steps, |x, _| Ok(vec![a - x[0]])).unwrap();
            (x[0] - exact).abs()
        };
        let (e8, e16, e32) = (err(8), err(16), err(32));
        for ratio in [e8 / e16, e16 / e32] {
            assert!((1.7..=2.3).contains(&ratio), "convergence ratio {ratio}");
        }
        // One constant-velocity step lands exactly on x0 + v.
        let one = euler_integrate(&[2.0], 1, |_, _| Ok(vec![0.5])).unwrap();
        assert_eq!(one, vec![2.5]);
        // Non-finite states abort with the step index.
        let res = euler_integrate(&[0.0], 8, |_, t| {
            Ok(vec![if t >= 3.0 / 8.0 { f64::NAN } else { 1.0 }])
        });
        match res {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 3"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn sampling_is_deterministic_and_zero_model_returns_noise() {
        let world = tiny_world();
        let (model, vocab) = tiny_model(&world);
        let items = generate_items(&world, 1).unwrap();
        let item = &items[0];
        let ref_img = &item.scenes[0].image;
        let (_, layout) = assemble_polyptych(&[ref_img], &item.target_scene().image, 2).unwrap();
        let mask = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &MaskRules::conservative(),
            &mut SeedSplitter::new(0).rng("m", 0),
        )
        .unwrap();
        let req = SampleRequest {
            refs: vec![ref_img],
            target_context: None,
            mask: mask.clone(),
            text_ids: vocab.encode(&item.target_scene().caption).unwrap(),
            mode: TaskMode::PositionFree,
            steps: 4,
            seed: 77,
        };
        let (canvas_a, crop_a) = euler_sample(&model, &req).unwrap();
        let (canvas_b, _) = euler_sample(&model, &req).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&canvas_a.data), bits(&canvas_b.data));
        assert_eq!(crop_a.w, item.target_scene().image.w);
        // A fresh model predicts zero velocity everywhere, so the state
        // never moves off the seeded noise.
        let mut rng = SeedSplitter::new(77).rng("sample.noise", 0);
        let noise = noise_image(canvas_a.h, canvas_a.w, 3, &mut rng);
        assert_eq!(bits(&canvas_a.data), bits(&noise.data));
        let other = euler_sample(&model, &SampleRequest { seed: 78, ..clone_req(&req) }).unwrap();
        assert_ne!(bits(&other.0.data), bits(&canvas_a.data));
    }

    fn clone_req<'a>(req: &SampleRequest<'a>) -> SampleRequest<'a> {
        SampleRequest {
            refs: req.refs.clone(),
            target_context: req.target_context,
            mask: req.mask.clone(),
            text_ids: req.text_ids.clone(),
            mode: req.mode,
            steps: req.steps,
            seed: req.seed,
        }
    }

    #[test]
    fn prompt_template_and_drop() {
        let world = tiny_world();
        let vocab = Vocab::from_world(&world);
        let a = "red circle on gray field";
        let b = "red circle on white room";
        // p_drop = 0 always keeps the reference part.
        let mut rng = SeedSplitter::new(5).rng("p", 0);
        let full = compose_prompt(&vocab, a, b, 0.0, &mut rng).unwrap();
        assert_eq!(full.len(), 2 + 5 + 5);
        assert_eq!(full[0], vocab.id(REF_MARKER).unwrap());
        assert_eq!(full[6], vocab.id(TARGET_MARKER).unwrap());
        // p_drop = 1 always drops it.
        let dropped = compose_prompt(&vocab, a, b, 1.0, &mut rng).unwrap();
        assert_eq!(dropped.len(), 1 + 5);
        assert_eq!(dropped[0], vocab.id(TARGET_MARKER).unwrap());
        assert!(compose_prompt(&vocab, "purple haze", b, 0.0, &mut rng).is_err());
    }

    #[test]
    fn mode_draws_match_probabilities() {
        let probs = [0.4, 0.3, 0.3];
        let splitter = SeedSplitter::new(123);
        let mut counts = [0usize; 3];
        let n = 10_000;
        let mut rng = splitter.rng("mode", 0);
        for _ in 0..n {
            counts[draw_mode(&probs, &mut rng).index()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (*c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "mode count {c} deviates {dev} > 3 sigma {sigma}");
        }
    }

    #[test]
    fn t_schedules_stay_in_range() {
        let splitter = SeedSplitter::new(7);
        let mut rng = splitter.rng("t", 0);
        for sched in [TSchedule::Uniform, TSchedule::LogitNormal { mean: 0.0, std: 1.0 }] {
            for _ in 0..500 {
                let t = sched.draw(&mut rng);
                assert!((0.0..=1.0).contains(&t) && t.is_finite());
            }
        }
    }

    #[test]
    fn training_runs_deterministically_and_resumes_bitwise() {
        let world = tiny_world();
        let items = generate_items(&world, 6).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::desk(42)
        };
        let (mut model_a, vocab) = tiny_model(&world);
        let out_a =
            run_stage(&mut model_a, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
        assert_eq!(out_a.records.len(), 6);
        for (i, r) in out_a.records.iter().enumerate() {
            assert_eq!(r.step, i);
            let line = r.line();
            assert!(line.starts_with(&format!("step={i} stage=1 mode=")));
            assert!(line.contains("loss=") && line.contains("lr="));
        }
        // Same seed, fresh model: identical loss trajectory bitwise.
        let (mut model_b, _) = tiny_model(&world);
        let out_b =
            run_stage(&mut model_b, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
        for (a, b) in out_a.records.iter().zip(&out_b.records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.mode, b.mode);
        }
        // Split run: 3 steps, checkpoint through save/load, resume to 6.
        let (mut model_c, _) = tiny_model(&world);
        let half = TrainConfig { steps: 3, ..cfg.clone() };
        let out_c1 =
            run_stage(&mut model_c, &items, &vocab, &half, TrainStage::Stage1, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.icx");
        model_c.save(&ckpt, &out_c1.opt_arrays).unwrap();
        let (mut model_d, opt_arrays) = Model::load(&ckpt).unwrap();
        let out_c2 = run_stage(
            &mut model_d,
            &items,
            &vocab,
            &cfg,
            TrainStage::Stage1,
            None,
            Some(ResumeState { start_step: 3, opt_arrays }),
        )
        .unwrap();
        let resumed: Vec<u64> = out_c1
            .records
            .iter()
            .chain(&out_c2.records)
            .map(|r| r.loss.to_bits())
            .collect();
        let direct: Vec<u64> = out_a.records.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(resumed, direct);
        // Final parameters match bitwise too.
        for (pa, pd) in model_a.named_params().iter().zip(model_d.named_params().iter()) {
            assert_eq!(pa.name, pd.name);
            let (da, dd) = (pa.tensor.data(), pd.tensor.data());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&da), bits(&dd), "parameter {} diverged", pa.name);
        }
    }

    #[test]
    fn stage_two_needs_multireference_items() {
        let world = WorldConfig { scenes_min: 2, scenes_max: 2, seed: 3, ..WorldConfig::desk() };
        let items = generate_items(&world, 4).unwrap();
        let (mut model, vocab) = tiny_model(&world);
        let cfg = TrainConfig { steps: 2, ..TrainConfig::desk(1) };
        match run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage2, None, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("stage 2")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn pretrain_uses_single_panels_and_logs_position_free() {
        let world = tiny_world();
        let items = generate_items(&world, 4).unwrap();
        let (mut model, vocab) = tiny_model(&world);
        let cfg = TrainConfig { steps: 3, batch_size: 2, ..TrainConfig::desk(8) };
        let out =
            run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Pretrain, None, None).unwrap();
        assert_eq!(out.records.len(), 3);
        for r in &out.records {
            assert_eq!(r.stage, "pretrain");
            assert_eq!(r.mode, TaskMode::PositionFree);
        }
        // Pretraining must not move the in-context extras or adapters.
        for p in model.params_in(&[ParamGroup::IcmaExtras]) {
            assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{} moved", p.name);
        }
    }

    #[test]
    fn starved_bucket_warns_and_unmapped_sample_errors() {
        let world = tiny_world();
        let items = generate_items(&world, 3).unwrap();
        let (mut model, vocab) = tiny_model(&world);
        let (h, w) = items[0].size();
        let good = Bucket { height: h, width: w, refs: 1 };
        let ghost = Bucket { height: h * 2, width: w, refs: 1 };
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 2,
            buckets: vec![good, ghost],
            ..TrainConfig::desk(4)
        };
        let out =
            run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("no samples"));
        // A bucket list that misses the samples entirely is an error that
        // names the first unmapped sample.
        let cfg = TrainConfig { buckets: vec![ghost], ..cfg };
        match run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None) {
            Err(Error::Data(msg)) => assert!(msg.contains("sample 0"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
