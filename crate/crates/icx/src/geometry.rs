//! Canvas assembly and token geometry: stitching panels into one polyptych,
//! patchifying to token sequences with region tags and grid positions, and
//! the two-axis rotary tables used by attention.
//!
//! Token order is always raster order over the full canvas patch grid, so
//! tokens of different panels interleave row by row. Region membership is
//! carried by per-token tags, and `region_groups` recovers each region's
//! token indices in a canonical order (references by index, then target)
//! that does not depend on where panels sit in the canvas.

use crate::error::{Error, Result};
use crate::image::{CanvasLayout, Image, PanelRole, PanelSpec};

/// Tokenized canvas: `n` rows of `dim = p*p*c` values in canvas raster
/// order, one region tag and one (grid row, grid col) position per token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub tags: Vec<PanelRole>,
    pub positions: Vec<(usize, usize)>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Stitch reference panels (left, in index order) and the target panel
/// (rightmost) into one canvas. Heights and channel counts must agree and
/// every width must be divisible by the patch size, so patches never span
/// a panel boundary.
pub fn assemble_polyptych(
    refs: &[&Image],
    target: &Image,
    patch: usize,
) -> Result<(Image, CanvasLayout)> {
    if refs.is_empty() {
        return Err(Error::Data(
            "polyptych needs at least one reference; use assemble_single for the \
             unconditional single-panel mode"
                .into(),
        ));
    }
    assemble(refs, target, patch)
}

/// Unconditional single-panel canvas (no references): the layout holds just
/// the target. Used by the text-to-image pre-training phase.
pub fn assemble_single(target: &Image, patch: usize) -> Result<(Image, CanvasLayout)> {
    assemble(&[], target, patch)
}

fn assemble(refs: &[&Image], target: &Image, patch: usize) -> Result<(Image, CanvasLayout)> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let mut panels: Vec<&Image> = refs.to_vec();
    panels.push(target);
    for (i, p) in panels.iter().enumerate() {
        if p.h != target.h || p.c != target.c {
            return Err(Error::Shape(format!(
                "panel {i} is {}x{}x{}, target is {}x{}x{}",
                p.h, p.w, p.c, target.h, target.w, target.c
            )));
        }
        if p.w % patch != 0 || p.h % patch != 0 {
            return Err(Error::Shape(format!(
                "panel {i} is {}x{}, not divisible by patch {patch}",
                p.h, p.w
            )));
        }
    }
    let canvas = crate::image::hcat(&panels)?;
    let mut specs = Vec::with_capacity(panels.len());
    let mut offset = 0usize;
    for (i, p) in refs.iter().enumerate() {
        specs.push(PanelSpec { role: PanelRole::Reference(i), offset, width: p.w });
        offset += p.w;
    }
    specs.push(PanelSpec { role: PanelRole::Target, offset, width: target.w });
    Ok((canvas, CanvasLayout { height: target.h, panels: specs }))
}

/// Cut a canvas back into panel images per the layout.
pub fn extract_panels(canvas: &Image, layout: &CanvasLayout) -> Result<Vec<(PanelRole, Image)>> {
    if layout.width() != canvas.w || layout.height != canvas.h {
        return Err(Error::Shape(format!(
            "layout {}x{} does not match canvas {}x{}",
            layout.height,
            layout.width(),
            canvas.h,
            canvas.w
        )));
    }
    Ok(layout
        .panels
        .iter()
        .map(|p| (p.role, canvas.crop_cols(p.offset, p.width)))
        .collect())
}

/// Raster-order tokens of `p x p x c` values. Within a token, values are
/// ordered (dy, dx, channel) row-major, matching `unpatchify`.
pub fn patchify(img: &Image, patch: usize) -> Result<(Vec<f64>, usize, usize)> {
    if patch == 0 || img.h % patch != 0 || img.w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by patch {patch}",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / patch, img.w / patch);
    let dim = patch * patch * img.c;
    let mut tokens = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    tokens.extend_from_slice(img.get(gy * patch + dy, gx * patch + dx));
                }
            }
        }
    }
    Ok((tokens, gh, gw))
}

/// Inverse of `patchify`: bit-identical round trip.
pub fn unpatchify(tokens: &[f64], grid_h: usize, grid_w: usize, patch: usize, c: usize) -> Image {
    let dim = patch * patch * c;
    assert_eq!(tokens.len(), grid_h * grid_w * dim, "token buffer size");
    let mut img = Image::new(grid_h * patch, grid_w * patch, c);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let tok = &tokens[(gy * grid_w + gx) * dim..(gy * grid_w + gx + 1) * dim];
            let mut at = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    img.set(gy * patch + dy, gx * patch + dx, &tok[at..at + c]);
                    at += c;
                }
            }
        }
    }
    img
}

/// Tokenize a stitched canvas: raster order over the full grid, each token
/// tagged by the panel covering its column span, positions global over the
/// canvas grid.
pub fn tokenize_canvas(
    canvas: &Image,
    layout: &CanvasLayout,
    patch: usize,
) -> Result<TokenSequence> {
    if layout.width() != canvas.w || layout.height != canvas.h {
        return Err(Error::Shape(format!(
            "layout {}x{} does not match canvas {}x{}",
            layout.height,
            layout.width(),
            canvas.h,
            canvas.w
        )));
    }
    for p in &layout.panels {
        if p.width % patch != 0 || p.offset % patch != 0 {
            return Err(Error::Shape(format!(
                "panel at offset {} width {} not aligned to patch {patch}",
                p.offset, p.width
            )));
        }
    }
    let (tokens, gh, gw) = patchify(canvas, patch)?;
    let dim = patch * patch * canvas.c;
    let mut tags = Vec::with_capacity(gh * gw);
    let mut positions = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let x = gx * patch;
            let panel = layout
                .panels
                .iter()
                .find(|p| x >= p.offset && x < p.offset + p.width)
                .ok_or_else(|| Error::Shape(format!("column {x} not covered by any panel")))?;
            tags.push(panel.role);
            positions.push((gy, gx));
        }
    }
    Ok(TokenSequence { tokens, n: gh * gw, dim, tags, positions, grid_h: gh, grid_w: gw })
}

/// Tokenize for the sequence-condition baseline: target tokens first, then
/// each reference panel appended along the sequence, every panel with its
/// own local grid positions. `grid_h`/`grid_w` describe the target panel.
pub fn tokenize_sequence(target: &Image, refs: &[&Image], patch: usize) -> Result<TokenSequence> {
    let (mut tokens, gh, gw) = patchify(target, patch)?;
    let dim = patch * patch * target.c;
    let mut tags = vec![PanelRole::Target; gh * gw];
    let mut positions: Vec<(usize, usize)> = (0..gh)
        .flat_map(|gy| (0..gw).map(move |gx| (gy, gx)))
        .collect();
    for (i, r) in refs.iter().enumerate() {
        if r.c != target.c {
            return Err(Error::Shape(format!(
                "reference {i} has {} channels, target {}",
                r.c, target.c
            )));
        }
        let (t, rh, rw) = patchify(r, patch)?;
        tokens.extend_from_slice(&t);
        tags.extend(std::iter::repeat(PanelRole::Reference(i)).take(rh * rw));
        positions.extend((0..rh).flat_map(|gy| (0..rw).map(move |gx| (gy, gx))));
    }
    let n = tags.len();
    Ok(TokenSequence { tokens, n, dim, tags, positions, grid_h: gh, grid_w: gw })
}

/// Token indices per region in canonical order: Reference(0), Reference(1),
/// ..., then Target; indices ascend within each group. The canonical order
/// is a property of the tags alone, independent of panel placement, which
/// is what lets grouped attention reductions stay bit-identical when
/// reference panels are permuted.
pub fn region_groups(tags: &[PanelRole]) -> Vec<Vec<usize>> {
    let mut max_ref = None;
    for t in tags {
        if let PanelRole::Reference(j) = t {
            max_ref = Some(max_ref.map_or(*j, |m: usize| m.max(*j)));
        }
    }
    let mut groups = Vec::new();
    if let Some(m) = max_ref {
        for j in 0..=m {
            let g: Vec<usize> = tags
                .iter()
                .enumerate()
                .filter(|(_, t)| **t == PanelRole::Reference(j))
                .map(|(i, _)| i)
                .collect();
            if !g.is_empty() {
                groups.push(g);
            }
        }
    }
    let target: Vec<usize> = tags
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == PanelRole::Target)
        .map(|(i, _)| i)
        .collect();
    if !target.is_empty() {
        groups.push(target);
    }
    groups
}

/// Two-axis rotary tables: of the `head_dim / 2` rotation pairs, the first
/// half takes its angle from the grid row, the second half from the grid
/// column, each with the usual geometric frequency ladder.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeTable {
    /// `head_dim` must be divisible by 4 so both axes get whole rotation
    /// pairs (which also covers the even-head-dim requirement).
    pub fn new(head_dim: usize, base: f64) -> Result<RopeTable> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rotary tables need head_dim divisible by 4, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::Config(format!("rotary base must be finite and > 1, got {base}")));
        }
        Ok(RopeTable { head_dim, base })
    }

    /// Flat `n x head_dim/2` cosine and sine tables for the given positions.
    pub fn tables(&self, positions: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
        let pairs = self.head_dim / 2;
        let per_axis = pairs / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(row, col) in positions {
            for k in 0..pairs {
                let (pos, j) = if k < per_axis { (row, k) } else { (col, k - per_axis) };
                let freq = self.base.powf(-(j as f64) / per_axis as f64);
                let angle = pos as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        (cos, sin)
    }
}
