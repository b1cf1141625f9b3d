//! Identity and text-alignment metrics with pluggable embedding providers,
//! plus the benchmark runner and the multi-reference comparison harness.
//!
//! The toy embedder is fully deterministic: an 8-bin-per-channel color
//! histogram of the dominant foreground blob concatenated with that blob's
//! seven normalized shape moments, unit-normalized. It is the default for
//! curation and scoring; precomputed external embeddings can be dropped in
//! through the binary table provider without code changes.

use crate::error::{Error, Result};
use crate::image::Image;
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

/// Foreground threshold: a pixel belongs to the foreground when its largest
/// per-channel distance from the median background color exceeds this.
pub const FOREGROUND_DELTA: f64 = 0.15;

const HIST_BINS: usize = 8;

/// Embedding dimensionality of the toy provider: 3 channels x 8 bins + 7
/// shape moments.
pub const TOY_EMBED_DIM: usize = 3 * HIST_BINS + 7;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine over mismatched dims");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-channel median color, the background estimate for blob extraction.
pub fn median_background(img: &Image) -> Vec<f64> {
    (0..img.c)
        .map(|ch| {
            let mut vals: Vec<f64> = (0..img.h * img.w).map(|i| img.data[i * img.c + ch]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals[vals.len() / 2]
        })
        .collect()
}

/// Boolean foreground map against the median background.
pub fn foreground_mask(img: &Image) -> Vec<bool> {
    let bg = median_background(img);
    (0..img.h * img.w)
        .map(|i| {
            (0..img.c)
                .map(|ch| (img.data[i * img.c + ch] - bg[ch]).abs())
                .fold(0.0f64, f64::max)
                > FOREGROUND_DELTA
        })
        .collect()
}

/// The dominant foreground blob: largest 4-connected foreground component,
/// ties broken by scan order.
#[derive(Debug, Clone)]
pub struct Blob {
    /// (row, col) pixels, in scan order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: (usize, usize, usize, usize),
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Area over bounding-box area; separates the three shape classes.
    pub fn extent(&self) -> f64 {
        let (y0, x0, y1, x1) = self.bbox;
        self.area() as f64 / (((y1 - y0 + 1) * (x1 - x0 + 1)) as f64)
    }

    pub fn mean_color(&self, img: &Image) -> Vec<f64> {
        let mut acc = vec![0.0; img.c];
        for &(y, x) in &self.pixels {
            for (a, v) in acc.iter_mut().zip(img.get(y, x)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= self.pixels.len() as f64;
        }
        acc
    }
}

pub fn dominant_blob(img: &Image) -> Option<Blob> {
    let fg = foreground_mask(img);
    let (h, w) = (img.h, img.w);
    let mut seen = vec![false; h * w];
    let mut best: Option<Vec<usize>> = None;
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        if best.as_ref().map_or(true, |b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    best.map(|mut comp| {
        comp.sort_unstable();
        let pixels: Vec<(usize, usize)> = comp.iter().map(|&i| (i / w, i % w)).collect();
        let bbox = pixels.iter().fold(
            (usize::MAX, usize::MAX, 0usize, 0usize),
            |(y0, x0, y1, x1), &(y, x)| (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
        );
        Blob { pixels, bbox }
    })
}

/// Seven rotation/translation/scale-normalized moments of the blob's
/// binary support.
fn shape_moments(blob: &Blob) -> [f64; 7] {
    let n = blob.area() as f64;
    let (mut cy, mut cx) = (0.0, 0.0);
    for &(y, x) in &blob.pixels {
        cy += y as f64;
        cx += x as f64;
    }
    cy /= n;
    cx /= n;
    let mut mu = [[0.0f64; 4]; 4];
    for &(y, x) in &blob.pixels {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        for (p, row) in mu.iter_mut().enumerate() {
            for (q, cell) in row.iter_mut().enumerate() {
                if p + q <= 3 {
                    *cell += dx.powi(p as i32) * dy.powi(q as i32);
                }
            }
        }
    }
    let eta = |p: usize, q: usize| mu[p][q] / n.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        (n30 + n12).powi(2) + (n21 + n03).powi(2),
        (n30 - 3.0 * n12) * (n30 + n12)
            * ((n30 + n12).powi(2) - 3.0 * (n21 + n03).powi(2))
            + (3.0 * n21 - n03) * (n21 + n03)
                * (3.0 * (n30 + n12).powi(2) - (n21 + n03).powi(2)),
        (n20 - n02) * ((n30 + n12).powi(2) - (n21 + n03).powi(2))
            + 4.0 * n11 * (n30 + n12) * (n21 + n03),
        (3.0 * n21 - n03) * (n30 + n12)
            * ((n30 + n12).powi(2) - 3.0 * (n21 + n03).powi(2))
            - (n30 - 3.0 * n12) * (n21 + n03)
                * (3.0 * (n30 + n12).powi(2) - (n21 + n03).powi(2)),
    ]
}

fn histogram(img: &Image, pixels: impl Iterator<Item = (usize, usize)>, count: usize) -> Vec<f64> {
    let mut hist = vec![0.0; img.c * HIST_BINS];
    for (y, x) in pixels {
        for (ch, &v) in img.get(y, x).iter().enumerate() {
            let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[ch * HIST_BINS + bin] += 1.0;
        }
    }
    for h in &mut hist {
        *h /= count as f64;
    }
    hist
}

/// Deterministic image fingerprint: blob color histogram plus blob shape
/// moments, unit-normalized. A blank image (no foreground) falls back to a
/// whole-image histogram with zero moments.
pub fn toy_embed(img: &Image) -> Vec<f64> {
    let mut v = match dominant_blob(img) {
        Some(blob) => {
            let mut v = histogram(img, blob.pixels.iter().copied(), blob.area());
            v.extend_from_slice(&shape_moments(&blob));
            v
        }
        None => {
            let all = (0..img.h).flat_map(|y| (0..img.w).map(move |x| (y, x)));
            let mut v = histogram(img, all, img.h * img.w);
            v.extend_from_slice(&[0.0; 7]);
            v
        }
    };
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Extent-based shape class of a blob: squares fill their box, circles sit
/// near pi/4, triangles near one half.
pub fn classify_extent(extent: f64) -> &'static str {
    if extent >= 0.9 {
        "square"
    } else if extent >= 0.65 {
        "circle"
    } else {
        "triangle"
    }
}

/// Image-to-vector (and text-scoring) backend.
pub trait EmbedProvider {
    fn name(&self) -> &str;
    /// Unit-norm embedding, deterministic per input.
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    /// Alignment of an image with a caption, in [0, 1].
    fn text_score(&self, image: &Image, caption: &str) -> Result<f64>;
}

/// The built-in provider: histogram-plus-moments embeddings and
/// attribute-matching text scores over a closed caption vocabulary.
pub struct ToyProvider {
    pub palette: Vec<(String, [f64; 3])>,
}

impl ToyProvider {
    pub fn new(palette: Vec<(String, [f64; 3])>) -> ToyProvider {
        ToyProvider { palette }
    }
}

impl EmbedProvider for ToyProvider {
    fn name(&self) -> &str {
        "toy"
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(toy_embed(image))
    }

    /// Fraction of the caption's (color, shape) attributes the dominant
    /// blob satisfies. Caption format: "<color> <shape> ...".
    fn text_score(&self, image: &Image, caption: &str) -> Result<f64> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        if words.len() < 2 {
            return Err(Error::Data(format!("caption too short to score: {caption:?}")));
        }
        let color = words[0];
        if !self.palette.iter().any(|(n, _)| n == color) {
            return Err(Error::Data(format!("unknown color word {color:?} in caption")));
        }
        let shape = words[1];
        if !["circle", "square", "triangle"].contains(&shape) {
            return Err(Error::Data(format!("unknown shape word {shape:?} in caption")));
        }
        let blob = match dominant_blob(image) {
            Some(b) => b,
            None => return Ok(0.0),
        };
        let mean = blob.mean_color(image);
        let nearest = self
            .palette
            .iter()
            .min_by(|(_, a), (_, b)| {
                let da: f64 = a.iter().zip(&mean).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = b.iter().zip(&mean).map(|(x, y)| (x - y) * (x - y)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(n, _)| n.as_str())
            .unwrap();
        let mut matched = 0;
        if nearest == color {
            matched += 1;
        }
        if classify_extent(blob.extent()) == shape {
            matched += 1;
        }
        Ok(matched as f64 / 2.0)
    }
}

/// FNV-1a over an image's quantized bytes; the lookup key for precomputed
/// embedding tables.
pub fn image_key(img: &Image) -> u64 {
    fnv(&img.to_bytes())
}

pub fn text_key(caption: &str) -> u64 {
    fnv(caption.as_bytes())
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Precomputed embeddings keyed by content hash: image entries under
/// `image_key`, caption entries under `text_key`. Lets externally computed
/// vectors stand in for the toy embedder.
pub struct FileProvider {
    label: String,
    map: HashMap<u64, Vec<f64>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<FileProvider> {
        let entries = read_embedding_table(path)?;
        Ok(FileProvider {
            label: format!("file:{}", path.display()),
            map: entries.into_iter().collect(),
        })
    }

    pub fn from_entries(label: &str, entries: Vec<(u64, Vec<f64>)>) -> FileProvider {
        FileProvider { label: label.to_string(), map: entries.into_iter().collect() }
    }
}

impl EmbedProvider for FileProvider {
    fn name(&self) -> &str {
        &self.label
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let key = image_key(image);
        self.map
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no precomputed embedding for image key {key:016x}")))
    }

    fn text_score(&self, image: &Image, caption: &str) -> Result<f64> {
        let img = self.embed_image(image)?;
        let txt = self.map.get(&text_key(caption)).ok_or_else(|| {
            Error::Data(format!("no precomputed embedding for caption {caption:?}"))
        })?;
        Ok((cosine(&img, txt) + 1.0) / 2.0)
    }
}

/// Binary embedding table: count, then (key u64, dim u32, f64 values), all
/// little-endian.
pub fn write_embedding_table(path: &Path, entries: &[(u64, Vec<f64>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, v) in entries {
        buf.extend_from_slice(&key.to_le_bytes());
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_table(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > buf.len() {
            return Err(Error::Data("embedding table truncated".into()));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let key = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(dim * 8)?;
        entries.push((
            key,
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ));
    }
    Ok(entries)
}

/// Cosine between provider embeddings; with several references, the mean
/// of the per-reference cosines.
pub fn identity_score(
    generated: &Image,
    references: &[&Image],
    provider: &dyn EmbedProvider,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Data("identity score needs at least one reference".into()));
    }
    let g = provider.embed_image(generated)?;
    let mut acc = 0.0;
    for r in references {
        acc += cosine(&g, &provider.embed_image(r)?);
    }
    Ok(acc / references.len() as f64)
}

pub fn text_score(image: &Image, caption: &str, provider: &dyn EmbedProvider) -> Result<f64> {
    provider.text_score(image, caption)
}

/// Round a score to six decimals. Applied at measurement time so every
/// consumer of a report (means, serialization, regeneration) sees the same
/// value and reports reproduce byte for byte.
pub fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// One evaluation subject: references, the held-out target scene it must
/// reproduce, masks for both position-aware modes built once up front, and
/// the prompt pieces. `rigid` alternates across the set so both halves of
/// the rigidity split are exactly balanced.
pub struct BenchmarkItem {
    pub id: u64,
    pub refs: Vec<Image>,
    pub target: Image,
    pub precise_mask: Image,
    pub user_mask: Image,
    pub caption: String,
    pub ref_text: String,
    pub rigid: bool,
}

/// Build benchmark subjects from corpus items: the first `ref_cap`
/// reference scenes become the references, the target scene stays the
/// target, and the two position-aware masks are synthesized here so every
/// later run scores the same task.
pub fn benchmark_items_from(
    items: &[crate::forge::Item],
    rules: &crate::forge::MaskRules,
    ref_cap: usize,
    splitter: &crate::rng::SeedSplitter,
) -> Result<Vec<BenchmarkItem>> {
    use crate::flow::make_mask;
    use crate::icma::TaskMode;
    if ref_cap == 0 {
        return Err(Error::Config("benchmark items need at least one reference".into()));
    }
    let mut out = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let refs: Vec<Image> = item
            .reference_scenes()
            .take(ref_cap)
            .map(|s| s.image.clone())
            .collect();
        let ref_text = item
            .reference_scenes()
            .take(ref_cap)
            .map(|s| s.caption.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        let target = item.target_scene();
        let ref_views: Vec<&Image> = refs.iter().collect();
        let (_, layout) =
            crate::geometry::assemble_polyptych(&ref_views, &target.image, 1)?;
        let child = splitter.child("bench.mask", idx as u64);
        let precise_mask = make_mask(
            TaskMode::PositionAwarePrecise,
            &layout,
            Some(&target.silhouette),
            rules,
            &mut child.rng("precise", 0),
        )?;
        let user_mask = make_mask(
            TaskMode::PositionAwareUserDrawn,
            &layout,
            Some(&target.silhouette),
            rules,
            &mut child.rng("user", 0),
        )?;
        out.push(BenchmarkItem {
            id: item.id,
            refs,
            target: target.image.clone(),
            precise_mask,
            user_mask,
            caption: target.caption.clone(),
            ref_text,
            rigid: idx % 2 == 0,
        });
    }
    Ok(out)
}

/// Content hash of a benchmark set; stamped into reports so a report can be
/// matched to the exact corpus it measured.
pub fn benchmark_fingerprint(items: &[BenchmarkItem]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut fold = |k: u64| {
        for b in k.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for item in items {
        fold(item.id);
        for r in &item.refs {
            fold(image_key(r));
        }
        fold(image_key(&item.target));
        fold(image_key(&item.precise_mask));
        fold(image_key(&item.user_mask));
        fold(text_key(&item.caption));
        fold(item.rigid as u64);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub item: u64,
    pub mode: crate::icma::TaskMode,
    pub rigid: bool,
    /// None when generation or scoring failed; such rows are counted as
    /// missing and excluded from every mean.
    pub scores: Option<(f64, f64)>,
}

impl MetricRow {
    fn line(&self) -> String {
        match self.scores {
            Some((id, tx)) => format!(
                "row item={} mode={} rigid={} identity={:.6} text={:.6} status=ok",
                self.item,
                self.mode.name(),
                self.rigid,
                id,
                tx
            ),
            None => format!(
                "row item={} mode={} rigid={} identity=- text=- status=missing",
                self.item,
                self.mode.name(),
                self.rigid
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub provider: String,
    pub seed: u64,
    pub steps: usize,
    pub fingerprint: u64,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Mean identity and text scores over scored rows of one mode, with
    /// the count; None when the mode has no scored rows.
    pub fn mode_mean(&self, mode: crate::icma::TaskMode) -> Option<(f64, f64, usize)> {
        let scored: Vec<(f64, f64)> =
            self.rows.iter().filter(|r| r.mode == mode).filter_map(|r| r.scores).collect();
        if scored.is_empty() {
            return None;
        }
        let n = scored.len() as f64;
        let (si, st) = scored
            .iter()
            .fold((0.0, 0.0), |(ai, at), (i, t)| (ai + i, at + t));
        Some((si / n, st / n, scored.len()))
    }

    pub fn missing(&self) -> usize {
        self.rows.iter().filter(|r| r.scores.is_none()).count()
    }

    /// Line-oriented serialization: header, one row per measurement, one
    /// summary per mode that appears, and the missing-row count. A pure
    /// function of the fields, so regenerating a report from the same
    /// model and corpus reproduces the bytes.
    pub fn text(&self) -> String {
        let mut s = format!(
            "provider={} seed={} steps={} fingerprint={:016x}\n",
            self.provider, self.seed, self.steps, self.fingerprint
        );
        for row in &self.rows {
            s.push_str(&row.line());
            s.push('\n');
        }
        let mut seen = Vec::new();
        for row in &self.rows {
            if !seen.contains(&row.mode) {
                seen.push(row.mode);
            }
        }
        for mode in seen {
            match self.mode_mean(mode) {
                Some((id, tx, n)) => s.push_str(&format!(
                    "summary mode={} n={} identity={:.6} text={:.6}\n",
                    mode.name(),
                    n,
                    id,
                    tx
                )),
                None => s.push_str(&format!("summary mode={} n=0 identity=- text=-\n", mode.name())),
            }
        }
        s.push_str(&format!("missing={}\n", self.missing()));
        s
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        use crate::icma::TaskMode;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty report".into()))?;
        let field = |line: &str, key: &str| -> Result<String> {
            line.split_whitespace()
                .find_map(|tok| tok.strip_prefix(&format!("{key}=")).map(str::to_string))
                .ok_or_else(|| Error::Data(format!("report line lacks {key}=: {line}")))
        };
        let provider = field(header, "provider")?;
        let seed = field(header, "seed")?
            .parse::<u64>()
            .map_err(|_| Error::Data("bad seed in report header".into()))?;
        let steps = field(header, "steps")?
            .parse::<usize>()
            .map_err(|_| Error::Data("bad steps in report header".into()))?;
        let fingerprint = u64::from_str_radix(&field(header, "fingerprint")?, 16)
            .map_err(|_| Error::Data("bad fingerprint in report header".into()))?;
        let mut rows = Vec::new();
        for line in lines {
            if line.starts_with("summary ") || line.starts_with("missing=") || line.is_empty() {
                continue;
            }
            if !line.starts_with("row ") {
                return Err(Error::Data(format!("unrecognized report line: {line}")));
            }
            let item = field(line, "item")?
                .parse::<u64>()
                .map_err(|_| Error::Data("bad item id in report row".into()))?;
            let mode_name = field(line, "mode")?;
            let mode = TaskMode::from_name(&mode_name)
                .ok_or_else(|| Error::Data(format!("unknown task mode {mode_name}")))?;
            let rigid = field(line, "rigid")?
                .parse::<bool>()
                .map_err(|_| Error::Data("bad rigid flag in report row".into()))?;
            let status = field(line, "status")?;
            let scores = match status.as_str() {
                "ok" => {
                    let id = field(line, "identity")?
                        .parse::<f64>()
                        .map_err(|_| Error::Data("bad identity score in report row".into()))?;
                    let tx = field(line, "text")?
                        .parse::<f64>()
                        .map_err(|_| Error::Data("bad text score in report row".into()))?;
                    Some((id, tx))
                }
                "missing" => None,
                other => return Err(Error::Data(format!("unknown row status {other}"))),
            };
            rows.push(MetricRow { item, mode, rigid, scores });
        }
        Ok(MetricReport { provider, seed, steps, fingerprint, rows })
    }
}

/// Score a model over a benchmark set: one generation per item and mode,
/// identity against the references and alignment with the caption, both
/// rounded at measurement. Failed generations or scorings become missing
/// rows rather than aborting the run.
pub fn run_benchmark(
    model: &crate::model::Model,
    vocab: &crate::forge::Vocab,
    items: &[BenchmarkItem],
    modes: &[crate::icma::TaskMode],
    provider: &dyn EmbedProvider,
    seed: u64,
    steps: usize,
) -> Result<MetricReport> {
    use crate::flow::{compose_prompt, euler_sample, SampleRequest};
    use crate::icma::TaskMode;
    let splitter = crate::rng::SeedSplitter::new(seed);
    let mut rows = Vec::with_capacity(items.len() * modes.len());
    for (idx, item) in items.iter().enumerate() {
        let child = splitter.child("bench.item", idx as u64);
        for &mode in modes {
            let refs: Vec<&Image> = item.refs.iter().collect();
            let text_ids = compose_prompt(
                vocab,
                &item.ref_text,
                &item.caption,
                0.0,
                &mut child.rng("prompt", mode.index() as u64),
            )?;
            let (target_context, mask) = match mode {
                TaskMode::PositionFree => (None, free_mask_for(item)),
                TaskMode::PositionAwarePrecise => (Some(&item.target), item.precise_mask.clone()),
                TaskMode::PositionAwareUserDrawn => (Some(&item.target), item.user_mask.clone()),
            };
            let req = SampleRequest {
                refs,
                target_context,
                mask,
                text_ids,
                mode,
                steps,
                seed: child.derive(mode.name(), 0),
            };
            let scores = euler_sample(model, &req).ok().and_then(|(_, mut crop)| {
                crop.clamp01();
                let ref_views: Vec<&Image> = item.refs.iter().collect();
                let id = identity_score(&crop, &ref_views, provider).ok()?;
                let tx = provider.text_score(&crop, &item.caption).ok()?;
                Some((round6(id), round6(tx)))
            });
            rows.push(MetricRow { item: item.id, mode, rigid: item.rigid, scores });
        }
    }
    Ok(MetricReport {
        provider: provider.name().to_string(),
        seed,
        steps,
        fingerprint: benchmark_fingerprint(items),
        rows,
    })
}

/// The position-free mask over this item's canvas: references kept, the
/// whole target panel regenerated. Shares the geometry of the stored masks.
fn free_mask_for(item: &BenchmarkItem) -> Image {
    let (h, w) = (item.precise_mask.h, item.precise_mask.w);
    let ref_w: usize = item.refs.iter().map(|r| r.w).sum();
    let mut mask = Image::filled(h, w, &[1.0]);
    for y in 0..h {
        for x in ref_w..w {
            mask.data[y * w + x] = 0.0;
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub ref_count: usize,
    /// (mean identity, items scored) per model, in argument order.
    pub a: (f64, usize),
    pub b: (f64, usize),
}

/// Identity as a function of reference count, side by side for two models.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<CompareRow>,
    pub logs: Vec<String>,
}

impl CompareReport {
    /// mean(b) - mean(a) at one reference count.
    pub fn margin_at(&self, ref_count: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.ref_count == ref_count && r.a.1 > 0 && r.b.1 > 0)
            .map(|r| r.b.0 - r.a.0)
    }

    pub fn text(&self) -> String {
        let mut s = format!("compare a={} b={}\n", self.label_a, self.label_b);
        for r in &self.rows {
            s.push_str(&format!(
                "refs={} a_identity={:.6} a_n={} b_identity={:.6} b_n={}\n",
                r.ref_count, r.a.0, r.a.1, r.b.0, r.b.1
            ));
        }
        for log in &self.logs {
            s.push_str(&format!("note {log}\n"));
        }
        s
    }
}

/// Generate position-free with the first k references at each requested
/// count and score identity for both models under identical noise. Items
/// short on references are skipped with a note; the margin at the largest
/// count is logged for the stage comparison.
#[allow(clippy::too_many_arguments)]
pub fn multiref_compare(
    model_a: &crate::model::Model,
    model_b: &crate::model::Model,
    labels: (&str, &str),
    items: &[crate::forge::Item],
    vocab: &crate::forge::Vocab,
    ref_counts: &[usize],
    provider: &dyn EmbedProvider,
    seed: u64,
    steps: usize,
) -> Result<CompareReport> {
    use crate::flow::{compose_prompt, euler_sample, make_mask, SampleRequest};
    use crate::icma::TaskMode;
    if ref_counts.is_empty() || ref_counts.contains(&0) {
        return Err(Error::Config("comparison needs positive reference counts".into()));
    }
    let splitter = crate::rng::SeedSplitter::new(seed);
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &k in ref_counts {
        let mut sums = [(0.0, 0usize), (0.0, 0usize)];
        for (idx, item) in items.iter().enumerate() {
            let refs: Vec<&Image> =
                item.reference_scenes().take(k).map(|s| &s.image).collect();
            if refs.len() < k {
                logs.push(format!(
                    "item {}: {} references available, skipped at refs={k}",
                    item.id,
                    refs.len()
                ));
                continue;
            }
            let ref_text = item
                .reference_scenes()
                .take(k)
                .map(|s| s.caption.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let target = item.target_scene();
            let child = splitter.child("compare.item", idx as u64);
            let text_ids = compose_prompt(
                vocab,
                &ref_text,
                &target.caption,
                0.0,
                &mut child.rng("prompt", k as u64),
            )?;
            let (_, layout) =
                crate::geometry::assemble_polyptych(&refs, &target.image, 1)?;
            let mask = make_mask(
                TaskMode::PositionFree,
                &layout,
                None,
                &crate::forge::MaskRules::conservative(),
                &mut child.rng("mask", k as u64),
            )?;
            for (slot, model) in [model_a, model_b].into_iter().enumerate() {
                let req = SampleRequest {
                    refs: refs.clone(),
                    target_context: None,
                    mask: mask.clone(),
                    text_ids: text_ids.clone(),
                    mode: TaskMode::PositionFree,
                    steps,
                    seed: child.derive("noise", k as u64),
                };
                let (_, mut crop) = euler_sample(model, &req)?;
                crop.clamp01();
                let id = round6(identity_score(&crop, &refs, provider)?);
                sums[slot].0 += id;
                sums[slot].1 += 1;
            }
        }
        let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { 0.0 };
        rows.push(CompareRow {
            ref_count: k,
            a: (mean(sums[0]), sums[0].1),
            b: (mean(sums[1]), sums[1].1),
        });
    }
    let report = CompareReport {
        label_a: labels.0.to_string(),
        label_b: labels.1.to_string(),
        rows,
        logs,
    };
    if let Some(&k) = ref_counts.iter().max() {
        if let Some(margin) = report.margin_at(k) {
            let mut report = report;
            report.logs.push(format!(
                "margin at refs={k}: {} - {} = {margin:+.6}",
                report.label_b, report.label_a
            ));
            return Ok(report);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod embed_tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use rand::Rng;

    /// Minimal scene painter used as an oracle-independent fixture.
    fn paint(
        h: usize,
        w: usize,
        bg: [f64; 3],
        color: [f64; 3],
        shape: &str,
        cy: f64,
        cx: f64,
        r: f64,
    ) -> Image {
        let mut img = Image::new(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let inside = match shape {
                    "circle" => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
                    "square" => (py - cy).abs() <= r && (px - cx).abs() <= r,
                    _ => unreachable!(),
                };
                img.set(y, x, if inside { &color } else { &bg });
            }
        }
        img
    }

    const RED: [f64; 3] = [0.8, 0.0, 0.0];
    const BLUE: [f64; 3] = [0.0, 0.0, 0.8];
    const GRAY: [f64; 3] = [0.5, 0.5, 0.5];

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = SeedSplitter::new(800).rng("bench", 0);
        for _ in 0..100 {
            let mut img = Image::new(8, 8, 3);
            for v in &mut img.data {
                *v = rng.gen();
            }
            let e = toy_embed(&img);
            assert_eq!(e.len(), TOY_EMBED_DIM);
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let img = paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0);
        let provider = ToyProvider::new(vec![("red".into(), RED)]);
        let s = identity_score(&img, &[&img], &provider).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn color_change_hurts_more_than_translation() {
        let red = paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0);
        let red_moved = paint(16, 16, GRAY, RED, "circle", 6.0, 10.0, 4.0);
        let blue = paint(16, 16, GRAY, BLUE, "circle", 8.0, 8.0, 4.0);
        let (er, em, eb) = (toy_embed(&red), toy_embed(&red_moved), toy_embed(&blue));
        let translated = cosine(&er, &em);
        let recolored = cosine(&er, &eb);
        assert!(recolored < translated, "{recolored} vs {translated}");
        assert!(translated >= 0.95, "translation tolerance: {translated}");
    }

    #[test]
    fn blob_extraction_finds_the_shape_exactly() {
        let img = paint(16, 16, GRAY, RED, "square", 8.0, 8.0, 3.0);
        let blob = dominant_blob(&img).unwrap();
        // Pixel centers within +-3 of (8, 8): rows/cols 5..=10.
        assert_eq!(blob.area(), 36);
        assert_eq!(blob.bbox, (5, 5, 10, 10));
        assert!((blob.extent() - 1.0).abs() < 1e-12);
        assert_eq!(classify_extent(blob.extent()), "square");
        let circle = dominant_blob(&paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0)).unwrap();
        assert_eq!(classify_extent(circle.extent()), "circle");
    }

    #[test]
    fn moments_ignore_translation_exactly() {
        let a = dominant_blob(&paint(16, 16, GRAY, RED, "square", 7.0, 7.0, 3.0)).unwrap();
        let b = dominant_blob(&paint(16, 16, GRAY, RED, "square", 9.0, 8.0, 3.0)).unwrap();
        let (ma, mb) = (shape_moments(&a), shape_moments(&b));
        for (x, y) in ma.iter().zip(&mb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_text_score_matches_attributes() {
        let provider = ToyProvider::new(vec![("red".into(), RED), ("blue".into(), BLUE)]);
        let red_circle = paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0);
        assert_eq!(provider.text_score(&red_circle, "red circle on gray field").unwrap(), 1.0);
        let blue_circle = paint(16, 16, GRAY, BLUE, "circle", 8.0, 8.0, 4.0);
        assert_eq!(provider.text_score(&blue_circle, "red circle on gray field").unwrap(), 0.5);
        let blank = Image::filled(16, 16, &GRAY);
        assert_eq!(provider.text_score(&blank, "red circle on gray field").unwrap(), 0.0);
        assert!(provider.text_score(&red_circle, "mauve circle").is_err());
        assert!(provider.text_score(&red_circle, "red").is_err());
    }

    #[test]
    fn multi_reference_identity_is_the_mean_of_pairwise_scores() {
        let provider = ToyProvider::new(vec![("red".into(), RED)]);
        let g = paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0);
        let r1 = paint(16, 16, GRAY, RED, "circle", 7.0, 9.0, 4.0);
        let r2 = paint(16, 16, GRAY, RED, "square", 8.0, 8.0, 3.0);
        let r3 = paint(16, 16, GRAY, BLUE, "circle", 8.0, 8.0, 4.0);
        let mean = identity_score(&g, &[&r1, &r2, &r3], &provider).unwrap();
        let each: f64 = [&r1, &r2, &r3]
            .iter()
            .map(|r| identity_score(&g, &[r], &provider).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((mean - each).abs() < 1e-12);
    }

    #[test]
    fn file_provider_round_trips_and_fails_loudly() {
        let img = paint(8, 8, GRAY, RED, "circle", 4.0, 4.0, 2.0);
        let other = paint(8, 8, GRAY, BLUE, "circle", 4.0, 4.0, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeds.bin");
        let entries = vec![
            (image_key(&img), vec![1.0, 0.0]),
            (text_key("red circle"), vec![0.6, 0.8]),
        ];
        write_embedding_table(&path, &entries).unwrap();
        let provider = FileProvider::load(&path).unwrap();
        assert_eq!(provider.embed_image(&img).unwrap(), vec![1.0, 0.0]);
        assert!(provider.embed_image(&other).is_err());
        let ts = provider.text_score(&img, "red circle").unwrap();
        assert!((ts - 0.8).abs() < 1e-12); // (0.6 + 1) / 2
        assert!(provider.text_score(&img, "blue circle").is_err());
    }

    #[test]
    fn identity_score_is_symmetric() {
        let provider = ToyProvider::new(vec![("red".into(), RED)]);
        let a = paint(16, 16, GRAY, RED, "circle", 8.0, 8.0, 4.0);
        let b = paint(16, 16, GRAY, BLUE, "square", 7.0, 9.0, 3.0);
        let ab = identity_score(&a, &[&b], &provider).unwrap();
        let ba = identity_score(&b, &[&a], &provider).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }
}
