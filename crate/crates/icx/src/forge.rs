//! Synthetic identity corpus: deterministic scene rendering with exact
//! silhouettes, captions over a closed vocabulary, embedding-based curation,
//! user-drawn mask synthesis, resolution buckets, and item shards on disk.

use crate::bench::{self, EmbedProvider};
use crate::error::{Error, Result};
use crate::image::{read_pgm, read_ppm, write_pgm, write_ppm, Image};
use crate::rng::SeedSplitter;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

/// Default minimum pairwise scene similarity an item must keep.
pub const CURATION_THRESHOLD: f64 = 0.2;

/// Largest reference count a multi-panel sample is bucketed under.
pub const MULTIREF_MAX: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Result<ShapeClass> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Data(format!("unknown shape class {name:?}")))
    }
}

/// Everything the renderer may vary. Scene identity within an item is the
/// (shape, color) pair; background, placement, and scale vary per scene.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    /// (height, width) choices; all must divide evenly into patches.
    pub canvas_sizes: Vec<(usize, usize)>,
    pub patch: usize,
    pub shapes: Vec<ShapeClass>,
    /// Caption color words with their 8-bit RGB values.
    pub palette: Vec<(String, [u8; 3])>,
    /// Background styles; names may span several caption words.
    pub backgrounds: Vec<(String, [u8; 3])>,
    pub scenes_min: usize,
    pub scenes_max: usize,
    /// Shape radius as a fraction of the shorter canvas side.
    pub scale_range: (f64, f64),
    /// Center offset from panel middle, as a fraction of the shorter side.
    pub center_jitter: f64,
    /// Scene index forced as target; default is the last-rendered scene.
    pub target_scene: Option<usize>,
    pub seed: u64,
}

impl WorldConfig {
    pub fn desk() -> WorldConfig {
        WorldConfig {
            canvas_sizes: vec![(12, 12)],
            patch: 2,
            shapes: ShapeClass::ALL.to_vec(),
            palette: vec![
                ("red".into(), [204, 26, 26]),
                ("blue".into(), [26, 26, 204]),
                ("green".into(), [26, 153, 26]),
                ("yellow".into(), [230, 204, 26]),
            ],
            backgrounds: vec![
                ("gray field".into(), [153, 153, 153]),
                ("white room".into(), [242, 242, 242]),
                ("dark yard".into(), [26, 26, 26]),
            ],
            scenes_min: 2,
            scenes_max: 4,
            scale_range: (0.2, 0.3),
            center_jitter: 0.2,
            target_scene: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_sizes.is_empty() {
            return Err(Error::Config("world needs at least one canvas size".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        for &(h, w) in &self.canvas_sizes {
            if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
                return Err(Error::Config(format!(
                    "canvas {h}x{w} is not divisible into {0}x{0} patches",
                    self.patch
                )));
            }
            let min_dim = h.min(w) as f64;
            // Largest shape plus a half-pixel margin must fit in the panel.
            if (self.scale_range.1 * min_dim + 1.0) * 2.0 >= min_dim {
                return Err(Error::Config(format!(
                    "scale {} leaves no room on a {h}x{w} canvas",
                    self.scale_range.1
                )));
            }
        }
        if self.shapes.is_empty() || self.palette.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config("world needs shapes, colors, and backgrounds".into()));
        }
        if self.scenes_min < 2 || self.scenes_max < self.scenes_min {
            return Err(Error::Config(format!(
                "scene count range {}..{} is invalid (need at least 2 scenes)",
                self.scenes_min, self.scenes_max
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale range {lo}..{hi} is invalid")));
        }
        if let Some(t) = self.target_scene {
            if t >= self.scenes_min {
                return Err(Error::Config(format!(
                    "target scene {t} may exceed the scene count (min {})",
                    self.scenes_min
                )));
            }
        }
        // Every subject color must be separable from every background under
        // the foreground threshold, or blob extraction cannot see it.
        for (cn, c) in &self.palette {
            for (bn, b) in &self.backgrounds {
                let linf = c
                    .iter()
                    .zip(b)
                    .map(|(x, y)| ((*x as f64 - *y as f64) / 255.0).abs())
                    .fold(0.0f64, f64::max);
                if linf < 2.0 * bench::FOREGROUND_DELTA {
                    return Err(Error::Config(format!(
                        "color {cn:?} is too close to background {bn:?} (L-inf {linf:.3})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn rgb_f(rgb: [u8; 3]) -> [f64; 3] {
    [rgb[0] as f64 / 255.0, rgb[1] as f64 / 255.0, rgb[2] as f64 / 255.0]
}

/// Closed caption vocabulary: prompt markers, template words, then every
/// world word in declaration order.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

pub const REF_MARKER: &str = "[REF-SCENE]";
pub const TARGET_MARKER: &str = "[TARGET-SCENE]";

impl Vocab {
    pub fn from_world(world: &WorldConfig) -> Vocab {
        let mut words: Vec<String> = vec![REF_MARKER.into(), TARGET_MARKER.into(), "on".into()];
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for (name, _) in &world.palette {
            push(name);
        }
        for s in &world.shapes {
            push(s.name());
        }
        for (name, _) in &world.backgrounds {
            for w in name.split_whitespace() {
                push(w);
            }
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    /// One-channel {0,1} map of exactly the pixels the shape painted.
    pub silhouette: Image,
    pub caption: String,
    pub background: String,
}

#[derive(Debug, Clone)]
pub struct Item {
    pub id: u64,
    pub shape: ShapeClass,
    pub color: String,
    pub scenes: Vec<Scene>,
    pub target: usize,
}

impl Item {
    pub fn target_scene(&self) -> &Scene {
        &self.scenes[self.target]
    }

    pub fn reference_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().enumerate().filter(|(i, _)| *i != self.target).map(|(_, s)| s)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.scenes[0].image.h, self.scenes[0].image.w)
    }
}

/// Pixel-center inclusion test; the single source of truth for both the
/// painted image and the silhouette.
fn inside_shape(shape: ShapeClass, py: f64, px: f64, cy: f64, cx: f64, r: f64) -> bool {
    match shape {
        ShapeClass::Circle => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        ShapeClass::Square => (py - cy).abs() <= r && (px - cx).abs() <= r,
        ShapeClass::Triangle => {
            let s = r * 3.0f64.sqrt() / 2.0;
            let a = (cx, cy - r);
            let b = (cx - s, cy + r / 2.0);
            let c = (cx + s, cy + r / 2.0);
            let cross = |u: (f64, f64), v: (f64, f64)| {
                (v.0 - u.0) * (py - u.1) - (v.1 - u.1) * (px - u.0)
            };
            let (c1, c2, c3) = (cross(a, b), cross(b, c), cross(c, a));
            let has_pos = c1 > 0.0 || c2 > 0.0 || c3 > 0.0;
            let has_neg = c1 < 0.0 || c2 < 0.0 || c3 < 0.0;
            !(has_pos && has_neg)
        }
    }
}

pub fn render_scene(
    h: usize,
    w: usize,
    shape: ShapeClass,
    color: [f64; 3],
    background: [f64; 3],
    center: (f64, f64),
    radius: f64,
) -> (Image, Image) {
    let mut img = Image::new(h, w, 3);
    let mut sil = Image::new(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let inside =
                inside_shape(shape, y as f64 + 0.5, x as f64 + 0.5, center.0, center.1, radius);
            img.set(y, x, if inside { &color } else { &background });
            sil.set(y, x, &[if inside { 1.0 } else { 0.0 }]);
        }
    }
    (img, sil)
}

/// One item: a fixed (shape, color) identity rendered into several scenes
/// that differ in background, placement, and scale.
pub fn generate_item(world: &WorldConfig, id: u64, rng: &mut ChaCha8Rng) -> Item {
    let (h, w) = world.canvas_sizes[rng.gen_range(0..world.canvas_sizes.len())];
    let shape = world.shapes[rng.gen_range(0..world.shapes.len())];
    let (color_name, color_rgb) = world.palette[rng.gen_range(0..world.palette.len())].clone();
    let n_scenes = rng.gen_range(world.scenes_min..=world.scenes_max);
    let min_dim = h.min(w) as f64;
    let scenes = (0..n_scenes)
        .map(|_| {
            let (bg_name, bg_rgb) =
                world.backgrounds[rng.gen_range(0..world.backgrounds.len())].clone();
            let (lo, hi) = world.scale_range;
            let radius = (lo + rng.gen::<f64>() * (hi - lo)) * min_dim;
            let jitter = world.center_jitter * min_dim;
            let place = |dim: usize, rng: &mut ChaCha8Rng| {
                let mid = dim as f64 / 2.0;
                let margin = radius + 1.0;
                let raw = mid + (rng.gen::<f64>() * 2.0 - 1.0) * jitter;
                raw.clamp(margin, dim as f64 - margin)
            };
            let cy = place(h, rng);
            let cx = place(w, rng);
            let (image, silhouette) =
                render_scene(h, w, shape, rgb_f(color_rgb), rgb_f(bg_rgb), (cy, cx), radius);
            Scene {
                image,
                silhouette,
                caption: format!("{color_name} {} on {bg_name}", shape.name()),
                background: bg_name,
            }
        })
        .collect::<Vec<_>>();
    let target = world.target_scene.unwrap_or(n_scenes - 1).min(n_scenes - 1);
    Item { id, shape, color: color_name, scenes, target }
}

pub fn generate_items(world: &WorldConfig, n_items: usize) -> Result<Vec<Item>> {
    world.validate()?;
    let splitter = SeedSplitter::new(world.seed);
    Ok((0..n_items)
        .map(|i| {
            let mut rng = splitter.rng("forge.item", i as u64);
            generate_item(world, i as u64, &mut rng)
        })
        .collect())
}

/// Decision rule for blankness, split out so the boundary is testable:
/// variance strictly below 1e-4 AND foreground at most 0.5% of pixels.
pub fn is_blank_measurements(max_channel_variance: f64, foreground_fraction: f64) -> bool {
    max_channel_variance < 1e-4 && foreground_fraction <= 0.005
}

pub fn blank_background_detect(img: &Image) -> bool {
    let n = (img.h * img.w) as f64;
    let var_max = (0..img.c)
        .map(|ch| {
            let mean: f64 =
                (0..img.h * img.w).map(|i| img.data[i * img.c + ch]).sum::<f64>() / n;
            (0..img.h * img.w)
                .map(|i| (img.data[i * img.c + ch] - mean).powi(2))
                .sum::<f64>()
                / n
        })
        .fold(0.0f64, f64::max);
    let fg = bench::foreground_mask(img);
    let cover = fg.iter().filter(|&&b| b).count() as f64 / n;
    is_blank_measurements(var_max, cover)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurationAction {
    Dropped,
    Redesignated,
    Quarantined,
}

#[derive(Debug, Clone)]
pub struct CurationEvent {
    pub item_id: u64,
    /// Which rule fired: "similarity", "all_blank", "blank_target", "provider".
    pub rule: &'static str,
    pub action: CurationAction,
    pub detail: String,
}

impl CurationEvent {
    pub fn line(&self) -> String {
        format!(
            "item={} rule={} action={:?} {}",
            self.item_id, self.rule, self.action, self.detail
        )
    }
}

#[derive(Debug)]
pub struct CurationOutcome {
    pub kept: Vec<Item>,
    pub events: Vec<CurationEvent>,
}

/// Filters a corpus down to identity-consistent items. Similarity is judged
/// among non-blank scenes; an item is dropped when any such pair falls below
/// the threshold, or when every scene is blank. A blank designated target is
/// re-pointed at the last non-blank scene. Provider failures quarantine the
/// item rather than silently passing it.
pub fn curate(
    items: Vec<Item>,
    provider: &dyn EmbedProvider,
    threshold: f64,
) -> CurationOutcome {
    let mut kept = Vec::new();
    let mut events = Vec::new();
    'items: for mut item in items {
        let mut embeds = Vec::with_capacity(item.scenes.len());
        for (i, scene) in item.scenes.iter().enumerate() {
            match provider.embed_image(&scene.image) {
                Ok(e) => embeds.push(e),
                Err(e) => {
                    events.push(CurationEvent {
                        item_id: item.id,
                        rule: "provider",
                        action: CurationAction::Quarantined,
                        detail: format!("scene {i}: {e}"),
                    });
                    continue 'items;
                }
            }
        }
        let blank: Vec<bool> =
            item.scenes.iter().map(|s| blank_background_detect(&s.image)).collect();
        let solid: Vec<usize> =
            (0..item.scenes.len()).filter(|&i| !blank[i]).collect();
        let mut low_pair = None;
        for (a, &i) in solid.iter().enumerate() {
            for &j in &solid[a + 1..] {
                let c = bench::cosine(&embeds[i], &embeds[j]);
                if c < threshold {
                    low_pair = Some((i, j, c));
                    break;
                }
            }
        }
        if let Some((i, j, c)) = low_pair {
            events.push(CurationEvent {
                item_id: item.id,
                rule: "similarity",
                action: CurationAction::Dropped,
                detail: format!("cos(scene {i}, scene {j}) = {c:.4} < {threshold}"),
            });
            continue;
        }
        if solid.is_empty() {
            events.push(CurationEvent {
                item_id: item.id,
                rule: "all_blank",
                action: CurationAction::Dropped,
                detail: format!("all {} scenes are blank background", item.scenes.len()),
            });
            continue;
        }
        if blank[item.target] {
            let new_target = *solid.last().unwrap();
            events.push(CurationEvent {
                item_id: item.id,
                rule: "blank_target",
                action: CurationAction::Redesignated,
                detail: format!("target moved from scene {} to scene {new_target}", item.target),
            });
            item.target = new_target;
        }
        kept.push(item);
    }
    CurationOutcome { kept, events }
}

/// Pixel ranges for the three user-mask families. Dilation radii and box
/// pads are absolute pixels; all ranges are inclusive.
#[derive(Debug, Clone, Copy)]
pub struct MaskRules {
    pub dilate_radius: (usize, usize),
    pub bbox_pad: (usize, usize),
    pub hull_expand: (usize, usize),
}

impl MaskRules {
    /// Full spread, including the radius-0 limiting case.
    pub fn broad() -> MaskRules {
        MaskRules { dilate_radius: (0, 3), bbox_pad: (0, 2), hull_expand: (1, 3) }
    }

    /// Never collapses to the silhouette and never over-masks; the ranges
    /// used when building training and sampling masks.
    pub fn conservative() -> MaskRules {
        MaskRules { dilate_radius: (1, 3), bbox_pad: (0, 1), hull_expand: (1, 2) }
    }
}

impl Default for MaskRules {
    fn default() -> MaskRules {
        MaskRules::broad()
    }
}

fn sil_points(sil: &Image) -> Vec<(usize, usize)> {
    assert_eq!(sil.c, 1, "silhouette must be one channel");
    (0..sil.h * sil.w)
        .filter(|&i| sil.data[i] > 0.5)
        .map(|i| (i / sil.w, i % sil.w))
        .collect()
}

/// Chebyshev dilation; radius 0 returns the silhouette unchanged.
pub fn dilate_mask(sil: &Image, radius: usize) -> Image {
    let mut out = Image::new(sil.h, sil.w, 1);
    for (y, x) in sil_points(sil) {
        let y0 = y.saturating_sub(radius);
        let x0 = x.saturating_sub(radius);
        for yy in y0..=(y + radius).min(sil.h - 1) {
            for xx in x0..=(x + radius).min(sil.w - 1) {
                out.data[yy * sil.w + xx] = 1.0;
            }
        }
    }
    out
}

fn bbox_of(points: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    points.iter().fold(
        (usize::MAX, usize::MAX, 0usize, 0usize),
        |(y0, x0, y1, x1), &(y, x)| (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
    )
}

fn fill_box(h: usize, w: usize, bbox: (usize, usize, usize, usize), pad: usize) -> Image {
    let (y0, x0, y1, x1) = bbox;
    let mut out = Image::new(h, w, 1);
    for y in y0.saturating_sub(pad)..=(y1 + pad).min(h - 1) {
        for x in x0.saturating_sub(pad)..=(x1 + pad).min(w - 1) {
            out.data[y * w + x] = 1.0;
        }
    }
    out
}

/// Monotone-chain convex hull, counter-clockwise in (x, y).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross < -1e-9 {
            return false;
        }
    }
    true
}

/// A plausible hand-drawn selection: a random superset of the silhouette
/// from one of three families (dilation, padded box, convex blob), clipped
/// to the panel. A silhouette touching all four borders forces the box
/// family. The result always contains the silhouette.
pub fn synthesize_user_mask(
    sil: &Image,
    rules: &MaskRules,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let points = sil_points(sil);
    if points.is_empty() {
        return Err(Error::Data("user mask needs a non-empty silhouette".into()));
    }
    let (h, w) = (sil.h, sil.w);
    let touches = |pred: &dyn Fn(&(usize, usize)) -> bool| points.iter().any(pred);
    let all_borders = touches(&|&(y, _)| y == 0)
        && touches(&|&(y, _)| y == h - 1)
        && touches(&|&(_, x)| x == 0)
        && touches(&|&(_, x)| x == w - 1);
    let family = if all_borders { 1 } else { rng.gen_range(0..3) };
    let mask = match family {
        0 => {
            let r = rng.gen_range(rules.dilate_radius.0..=rules.dilate_radius.1);
            dilate_mask(sil, r)
        }
        1 => {
            let pad = rng.gen_range(rules.bbox_pad.0..=rules.bbox_pad.1);
            fill_box(h, w, bbox_of(&points), pad)
        }
        _ => {
            let (y0, x0, y1, x1) = bbox_of(&points);
            let mut pts: Vec<(f64, f64)> =
                points.iter().map(|&(y, x)| (x as f64 + 0.5, y as f64 + 0.5)).collect();
            let (lo, hi) = rules.hull_expand;
            let bump = |px: f64, py: f64, dx: f64, dy: f64, rng: &mut ChaCha8Rng| {
                let e = rng.gen_range(lo..=hi) as f64;
                (px + dx * e, py + dy * e)
            };
            let (cx0, cy0) = (x0 as f64 + 0.5, y0 as f64 + 0.5);
            let (cx1, cy1) = (x1 as f64 + 0.5, y1 as f64 + 0.5);
            let (mx, my) = ((cx0 + cx1) / 2.0, (cy0 + cy1) / 2.0);
            for (px, py, dx, dy) in [
                (cx0, cy0, -1.0, -1.0),
                (cx1, cy0, 1.0, -1.0),
                (cx1, cy1, 1.0, 1.0),
                (cx0, cy1, -1.0, 1.0),
                (mx, cy0, 0.0, -1.0),
                (cx1, my, 1.0, 0.0),
                (mx, cy1, 0.0, 1.0),
                (cx0, my, -1.0, 0.0),
            ] {
                pts.push(bump(px, py, dx, dy, rng));
            }
            let hull = convex_hull(pts);
            let mut out = Image::new(h, w, 1);
            for y in 0..h {
                for x in 0..w {
                    if point_in_convex(&hull, (x as f64 + 0.5, y as f64 + 0.5)) {
                        out.data[y * w + x] = 1.0;
                    }
                }
            }
            out
        }
    };
    debug_assert!(points.iter().all(|&(y, x)| mask.data[y * w + x] == 1.0));
    Ok(mask)
}

/// Resolution/reference-count class a sample trains under. Batches never
/// mix buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bucket {
    pub height: usize,
    pub width: usize,
    pub refs: usize,
}

impl Bucket {
    pub fn key_text(&self) -> String {
        format!("h={} w={} refs={}", self.height, self.width, self.refs)
    }
}

pub fn item_bucket(item: &Item, cap: usize) -> Bucket {
    let (h, w) = item.size();
    Bucket { height: h, width: w, refs: (item.scenes.len() - 1).min(cap) }
}

/// One epoch's batch schedule: every sample exactly once, batches
/// homogeneous in bucket, a partial final batch per bucket, order shuffled
/// deterministically under the seed.
pub fn bucket_batches(
    sample_buckets: &[Bucket],
    buckets: &[Bucket],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Bucket, Vec<usize>)>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); buckets.len()];
    for (i, sb) in sample_buckets.iter().enumerate() {
        match buckets.iter().position(|b| b == sb) {
            Some(p) => groups[p].push(i),
            None => {
                return Err(Error::Data(format!(
                    "sample {i} ({}) maps to no configured bucket",
                    sb.key_text()
                )))
            }
        }
    }
    let splitter = SeedSplitter::new(seed);
    let mut batches = Vec::new();
    for (p, mut idxs) in groups.into_iter().enumerate() {
        if idxs.is_empty() {
            continue;
        }
        idxs.shuffle(&mut splitter.rng("bucket", p as u64));
        for chunk in idxs.chunks(batch_size) {
            batches.push((buckets[p], chunk.to_vec()));
        }
    }
    batches.shuffle(&mut splitter.rng("order", 0));
    Ok(batches)
}

fn meta_text(item: &Item) -> String {
    let mut s = String::new();
    s.push_str(&format!("id={}\n", item.id));
    s.push_str(&format!("shape={}\n", item.shape.name()));
    s.push_str(&format!("color={}\n", item.color));
    s.push_str(&format!("target={}\n", item.target));
    s.push_str(&format!("scenes={}\n", item.scenes.len()));
    for (k, scene) in item.scenes.iter().enumerate() {
        s.push_str(&format!("background_{k}={}\n", scene.background));
        s.push_str(&format!("caption_{k}={}\n", scene.caption));
    }
    s
}

fn item_bytes(item: &Item) -> Vec<u8> {
    let mut bytes = meta_text(item).into_bytes();
    for scene in &item.scenes {
        bytes.extend_from_slice(&scene.image.to_bytes());
        bytes.extend_from_slice(&scene.silhouette.to_bytes());
    }
    bytes
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Corpus content hash: stable across runs for identical items.
pub fn items_hash(items: &[Item]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for item in items {
        h ^= fnv(&item_bytes(item));
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn manifest_text(items: &[Item]) -> String {
    let mut counts: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for item in items {
        let b = item_bucket(item, MULTIREF_MAX);
        *counts.entry((b.height, b.width, b.refs)).or_default() += 1;
    }
    let mut s = format!("items={}\nhash={:016x}\n", items.len(), items_hash(items));
    for ((h, w, r), count) in counts {
        s.push_str(&format!("bucket h={h} w={w} refs={r} count={count}\n"));
    }
    s
}

/// Writes one directory per item (scene PPMs, silhouette PGMs, metadata)
/// plus a manifest with per-bucket counts and the corpus hash.
pub fn write_items(dir: &Path, items: &[Item]) -> Result<u64> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, item) in items.iter().enumerate() {
        let idir = dir.join(format!("item_{i:05}"));
        std::fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
        let meta = idir.join("meta.txt");
        std::fs::write(&meta, meta_text(item)).map_err(|e| Error::io(&meta, e))?;
        for (k, scene) in item.scenes.iter().enumerate() {
            write_ppm(&idir.join(format!("scene_{k}.ppm")), &scene.image)?;
            write_pgm(&idir.join(format!("scene_{k}_sil.pgm")), &scene.silhouette)?;
        }
    }
    let manifest = dir.join("manifest.txt");
    std::fs::write(&manifest, manifest_text(items)).map_err(|e| Error::io(&manifest, e))?;
    Ok(items_hash(items))
}

fn parse_meta(text: &str, path: &Path) -> Result<(u64, ShapeClass, String, usize, usize, Vec<(String, String)>)> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad metadata line {line:?} in {}", path.display())))?;
        map.insert(k.to_string(), v.to_string());
    }
    let field = |k: &str| -> Result<String> {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("metadata missing {k:?} in {}", path.display())))
    };
    let id: u64 = field("id")?
        .parse()
        .map_err(|_| Error::Data(format!("bad id in {}", path.display())))?;
    let shape = ShapeClass::from_name(&field("shape")?)?;
    let color = field("color")?;
    let target: usize = field("target")?
        .parse()
        .map_err(|_| Error::Data(format!("bad target in {}", path.display())))?;
    let n: usize = field("scenes")?
        .parse()
        .map_err(|_| Error::Data(format!("bad scene count in {}", path.display())))?;
    let mut per_scene = Vec::with_capacity(n);
    for k in 0..n {
        per_scene.push((field(&format!("background_{k}"))?, field(&format!("caption_{k}"))?));
    }
    Ok((id, shape, color, target, n, per_scene))
}

pub fn read_items(dir: &Path) -> Result<Vec<Item>> {
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    std::fs::File::open(&manifest_path)
        .and_then(|mut f| f.read_to_string(&mut manifest))
        .map_err(|e| Error::io(&manifest_path, e))?;
    let mut count = None;
    let mut stored_hash = None;
    for line in manifest.lines() {
        if let Some(v) = line.strip_prefix("items=") {
            count = v.parse::<usize>().ok();
        }
        if let Some(v) = line.strip_prefix("hash=") {
            stored_hash = u64::from_str_radix(v, 16).ok();
        }
    }
    let count =
        count.ok_or_else(|| Error::Data(format!("manifest {} lacks an item count", manifest_path.display())))?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let idir = dir.join(format!("item_{i:05}"));
        let meta_path = idir.join("meta.txt");
        let mut meta = String::new();
        std::fs::File::open(&meta_path)
            .and_then(|mut f| f.read_to_string(&mut meta))
            .map_err(|e| Error::io(&meta_path, e))?;
        let (id, shape, color, target, n, per_scene) = parse_meta(&meta, &meta_path)?;
        if target >= n {
            return Err(Error::Data(format!(
                "target {target} out of range for {n} scenes in {}",
                meta_path.display()
            )));
        }
        let mut scenes = Vec::with_capacity(n);
        for (k, (background, caption)) in per_scene.into_iter().enumerate() {
            let image = read_ppm(&idir.join(format!("scene_{k}.ppm")))?;
            let silhouette = read_pgm(&idir.join(format!("scene_{k}_sil.pgm")))?;
            if silhouette.h != image.h || silhouette.w != image.w {
                return Err(Error::Shape(format!(
                    "silhouette {}x{} does not match scene {}x{} for item {i}",
                    silhouette.h, silhouette.w, image.h, image.w
                )));
            }
            scenes.push(Scene { image, silhouette, caption, background });
        }
        items.push(Item { id, shape, color, scenes, target });
    }
    if let Some(stored) = stored_hash {
        let actual = items_hash(&items);
        if actual != stored {
            return Err(Error::Data(format!(
                "corpus hash mismatch in {}: manifest {stored:016x}, contents {actual:016x}",
                dir.display()
            )));
        }
    }
    Ok(items)
}

/// Id offset for items whose target scene was generated rather than drawn.
pub const SYNTH_ID_OFFSET: u64 = 100_000;

/// Grow the corpus for multi-reference training: for each item, sample a
/// new scene of the same subject on a freshly chosen background, using the
/// item's existing scenes as references in position-free mode. The result
/// is appended as an extra reference scene under id `SYNTH_ID_OFFSET + id`.
/// Generations that come back blank, contain no foreground blob, or drift
/// from the references (mean embedding cosine below `threshold`) are
/// skipped with a log line. Deterministic under the splitter.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_multiref(
    model: &crate::model::Model,
    items: &[Item],
    world: &WorldConfig,
    vocab: &Vocab,
    provider: &dyn crate::bench::EmbedProvider,
    threshold: f64,
    steps: usize,
    splitter: &crate::rng::SeedSplitter,
) -> Result<(Vec<Item>, Vec<String>)> {
    use crate::flow::{compose_prompt, euler_sample, make_mask, SampleRequest};
    use crate::icma::TaskMode;

    let mut out = Vec::new();
    let mut logs = Vec::new();
    for item in items {
        let child = splitter.child("multiref.item", item.id);
        let mut pick = child.rng("refs", 0);
        let mut idxs: Vec<usize> = (0..item.scenes.len()).collect();
        idxs.shuffle(&mut pick);
        idxs.truncate(MULTIREF_MAX);
        idxs.sort_unstable();
        let refs: Vec<&Image> = idxs.iter().map(|&i| &item.scenes[i].image).collect();

        let bg = &world.backgrounds[child.rng("bg", 0).gen_range(0..world.backgrounds.len())];
        let caption = format!("{} {} on {}", item.color, item.shape.name(), bg.0);
        let ref_text = idxs
            .iter()
            .map(|&i| item.scenes[i].caption.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let text_ids = compose_prompt(vocab, &ref_text, &caption, 0.0, &mut child.rng("p", 0))?;

        let (_, layout) =
            assemble_polyptych_for(&refs, item.size(), world.patch)?;
        let mask = make_mask(
            TaskMode::PositionFree,
            &layout,
            None,
            &MaskRules::conservative(),
            &mut child.rng("mask", 0),
        )?;
        let req = SampleRequest {
            refs,
            target_context: None,
            mask,
            text_ids,
            mode: TaskMode::PositionFree,
            steps,
            seed: child.derive("seed", 0),
        };
        let (_, mut crop) = euler_sample(model, &req)?;
        crop.clamp01();

        if blank_background_detect(&crop) {
            logs.push(format!("item {}: generated scene is blank; skipped", item.id));
            continue;
        }
        let blob = match crate::bench::dominant_blob(&crop) {
            Some(b) => b,
            None => {
                logs.push(format!("item {}: no foreground blob in generation; skipped", item.id));
                continue;
            }
        };
        let ref_imgs: Vec<&Image> = item.scenes.iter().map(|s| &s.image).collect();
        let identity = crate::bench::identity_score(&crop, &ref_imgs, provider)?;
        if identity < threshold {
            logs.push(format!(
                "item {}: identity {identity:.4} below threshold {threshold}; skipped",
                item.id
            ));
            continue;
        }

        let mut sil = Image::new(crop.h, crop.w, 1);
        for &(y, x) in &blob.pixels {
            sil.data[y * crop.w + x] = 1.0;
        }
        let mut scenes = item.scenes.clone();
        scenes.push(Scene { image: crop, silhouette: sil, caption, background: bg.0.clone() });
        out.push(Item {
            id: SYNTH_ID_OFFSET + item.id,
            shape: item.shape,
            color: item.color.clone(),
            scenes,
            target: item.target,
        });
        logs.push(format!(
            "item {}: synthesized scene kept (identity {identity:.4}), new id {}",
            item.id,
            SYNTH_ID_OFFSET + item.id
        ));
    }
    Ok((out, logs))
}

/// Layout helper for generation: the references plus a blank target panel
/// of the item's scene size.
fn assemble_polyptych_for(
    refs: &[&Image],
    size: (usize, usize),
    patch: usize,
) -> Result<(Image, crate::image::CanvasLayout)> {
    let blank = Image::new(size.0, size.1, refs.first().map_or(3, |r| r.c));
    crate::geometry::assemble_polyptych(refs, &blank, patch)
}
