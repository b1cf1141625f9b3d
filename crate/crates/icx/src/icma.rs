//! In-context multi-modal attention: boundary-aware positional augmentation
//! of visual queries and keys, plus task-oriented register tokens appended
//! to keys and values.
//!
//! Augmentation happens after the q/k/v projections, at head dimension, and
//! the same embedding row is broadcast across heads. Text rows pass through
//! untouched; values are never augmented. Register rows extend K and V only,
//! so the output row count always equals the query row count.
//!
//! All attention reductions (softmax normalizers and the probs-times-values
//! contraction) are accumulated per region in a canonical region order, which
//! makes the output bit-identical under any permutation of the input rows
//! that carries tags and positions along. See `tensor` for the grouped ops.

use crate::error::{Error, Result};
use crate::geometry::{region_groups, RopeTable};
use crate::image::PanelRole;
use crate::tensor::Tensor;

/// Register tokens appended to K and V per attention call.
pub const REGISTER_TOKENS: usize = 4;

/// The three customization regimes a sample can be trained or sampled under.
/// Selects which register bank the attention appends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskMode {
    PositionAwarePrecise,
    PositionAwareUserDrawn,
    PositionFree,
}

impl TaskMode {
    pub const ALL: [TaskMode; 3] =
        [TaskMode::PositionAwarePrecise, TaskMode::PositionAwareUserDrawn, TaskMode::PositionFree];

    pub fn index(self) -> usize {
        match self {
            TaskMode::PositionAwarePrecise => 0,
            TaskMode::PositionAwareUserDrawn => 1,
            TaskMode::PositionFree => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskMode::PositionAwarePrecise => "precise",
            TaskMode::PositionAwareUserDrawn => "user_drawn",
            TaskMode::PositionFree => "position_free",
        }
    }

    pub fn from_name(s: &str) -> Option<TaskMode> {
        TaskMode::ALL.iter().copied().find(|m| m.name() == s)
    }
}

/// How the rotary term combines with the raw row.
///
/// `Additive` keeps the un-rotated row and adds the rotated copy on top of
/// the boundary embedding; `Replace` drops the un-rotated row, which is the
/// conventional rotary form and the one where an identity rotation reduces
/// the augmentation to `x + embedding` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RopeStyle {
    #[default]
    Additive,
    Replace,
}

impl RopeStyle {
    pub fn name(self) -> &'static str {
        match self {
            RopeStyle::Additive => "additive",
            RopeStyle::Replace => "replace",
        }
    }

    pub fn from_name(s: &str) -> Option<RopeStyle> {
        match s {
            "additive" => Some(RopeStyle::Additive),
            "replace" => Some(RopeStyle::Replace),
            _ => None,
        }
    }
}

/// Learnable boundary embeddings at head dimension: a canvas row shared by
/// every reference token, one index row per reference slot, and a target
/// row. All zero-initialized so a freshly attached block is a no-op shift.
#[derive(Debug, Clone)]
pub struct BoundaryEmbeddings {
    pub canvas: Tensor,
    pub target: Tensor,
    pub index: Tensor,
}

impl BoundaryEmbeddings {
    pub fn zeros(head_dim: usize, max_refs: usize) -> BoundaryEmbeddings {
        assert!(head_dim > 0 && max_refs > 0, "embedding dims must be positive");
        BoundaryEmbeddings {
            canvas: Tensor::param(&[1, head_dim], vec![0.0; head_dim]),
            target: Tensor::param(&[1, head_dim], vec![0.0; head_dim]),
            index: Tensor::param(&[max_refs, head_dim], vec![0.0; max_refs * head_dim]),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.canvas.cols()
    }

    pub fn max_refs(&self) -> usize {
        self.index.rows()
    }

    /// Per-token additive rows: Reference(j) -> CE + IE[j], Target -> TE.
    /// Built by gathering from one stacked table so gradients scatter back
    /// into all three parameters.
    pub fn rows_for(&self, tags: &[PanelRole]) -> Result<Tensor> {
        let nmax = self.max_refs();
        let mut idx = Vec::with_capacity(tags.len());
        for t in tags {
            idx.push(match t {
                PanelRole::Reference(j) => {
                    if *j >= nmax {
                        return Err(Error::Config(format!(
                            "reference index {j} outside the {nmax}-row index embedding table"
                        )));
                    }
                    *j
                }
                PanelRole::Target => nmax,
            });
        }
        let table = Tensor::concat_rows(&[&self.index.add_rowvec(&self.canvas), &self.target]);
        Ok(table.select_rows(&idx))
    }
}

/// One learnable 4 x d register bank per task mode.
#[derive(Debug, Clone)]
pub struct RegisterBank {
    banks: Vec<Tensor>,
}

impl RegisterBank {
    pub fn zeros(model_dim: usize) -> RegisterBank {
        let banks = (0..TaskMode::ALL.len())
            .map(|_| Tensor::param(&[REGISTER_TOKENS, model_dim], vec![0.0; REGISTER_TOKENS * model_dim]))
            .collect();
        RegisterBank { banks }
    }

    pub fn select(&self, mode: TaskMode) -> &Tensor {
        &self.banks[mode.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.banks
    }

    pub fn model_dim(&self) -> usize {
        self.banks[0].cols()
    }
}

/// Boundary-plus-rotary augmentation of visual rows (queries or keys).
/// Row tagged Reference(j) becomes x + CE + IE[j] combined with RoPE(x);
/// row tagged Target becomes x + TE combined with RoPE(x). The `style`
/// decides whether the un-rotated x stays in the sum.
pub fn pos_augment(
    x: &Tensor,
    tags: &[PanelRole],
    positions: &[(usize, usize)],
    emb: &BoundaryEmbeddings,
    rope: &RopeTable,
    style: RopeStyle,
) -> Result<Tensor> {
    let n = x.rows();
    if tags.len() != n || positions.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} tags and {} positions",
            tags.len(),
            positions.len()
        )));
    }
    if x.cols() != emb.head_dim() || x.cols() != rope.head_dim {
        return Err(Error::Shape(format!(
            "row dim {} vs embedding dim {} vs rotary dim {}",
            x.cols(),
            emb.head_dim(),
            rope.head_dim
        )));
    }
    let rows = emb.rows_for(tags)?;
    let (cos, sin) = rope.tables(positions);
    Ok(augment_core(x, &rows, &cos, &sin, style))
}

fn augment_core(x: &Tensor, emb_rows: &Tensor, cos: &[f64], sin: &[f64], style: RopeStyle) -> Tensor {
    let rot = x.rotate_pairs(cos, sin);
    match style {
        RopeStyle::Additive => x.add(emb_rows).add(&rot),
        RopeStyle::Replace => emb_rows.add(&rot),
    }
}

/// Expected (query rows, key/value rows, output rows) for n visual and l
/// text tokens: registers extend only K and V.
pub fn attention_row_counts(n_visual: usize, n_text: usize) -> (usize, usize, usize) {
    (n_visual + n_text, n_visual + n_text + REGISTER_TOKENS, n_visual + n_text)
}

/// Full attention call over one block's projected rows.
///
/// `txt` carries the projected text q/k/v when the prompt contributes rows.
/// The selected register bank is appended to K and V (never Q). Reductions
/// run grouped per region in canonical order (references by index, target,
/// text, registers), which pins the floating-point summation order to the
/// region structure rather than to row placement.
#[allow(clippy::too_many_arguments)]
pub fn icma_attention(
    q_vis: &Tensor,
    k_vis: &Tensor,
    v_vis: &Tensor,
    txt: Option<(&Tensor, &Tensor, &Tensor)>,
    tags: &[PanelRole],
    positions: &[(usize, usize)],
    mode: TaskMode,
    emb: &BoundaryEmbeddings,
    registers: &RegisterBank,
    rope: &RopeTable,
    style: RopeStyle,
    heads: usize,
) -> Result<Tensor> {
    let n = q_vis.rows();
    let d = q_vis.cols();
    if n == 0 {
        return Err(Error::Shape("attention needs at least one visual row".into()));
    }
    for (name, t) in [("k_vis", k_vis), ("v_vis", v_vis)] {
        if t.rows() != n || t.cols() != d {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected {n}x{d}",
                t.rows(),
                t.cols()
            )));
        }
    }
    let l = match txt {
        Some((qt, kt, vt)) => {
            if kt.rows() != qt.rows() || vt.rows() != qt.rows() {
                return Err(Error::Shape(format!(
                    "text rows disagree: q {} k {} v {}",
                    qt.rows(),
                    kt.rows(),
                    vt.rows()
                )));
            }
            if qt.cols() != d || kt.cols() != d || vt.cols() != d {
                return Err(Error::Shape("text row dim differs from visual".into()));
            }
            qt.rows()
        }
        None => 0,
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model dim {d}")));
    }
    let dh = d / heads;
    if rope.head_dim != dh || emb.head_dim() != dh {
        return Err(Error::Config(format!(
            "head dim {dh} vs rotary {} vs boundary {}",
            rope.head_dim,
            emb.head_dim()
        )));
    }
    if registers.model_dim() != d {
        return Err(Error::Shape(format!(
            "register dim {} vs model dim {d}",
            registers.model_dim()
        )));
    }
    if tags.len() != n || positions.len() != n {
        return Err(Error::Shape(format!(
            "{n} visual rows but {} tags and {} positions",
            tags.len(),
            positions.len()
        )));
    }

    let bank = registers.select(mode);
    let emb_rows = emb.rows_for(tags)?;
    let (cos, sin) = rope.tables(positions);
    let mut groups = region_groups(tags);
    if l > 0 {
        groups.push((n..n + l).collect());
    }
    groups.push((n + l..n + l + REGISTER_TOKENS).collect());

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = h * dh..(h + 1) * dh;
        let qa = augment_core(&q_vis.slice_cols(span.clone()), &emb_rows, &cos, &sin, style);
        let ka = augment_core(&k_vis.slice_cols(span.clone()), &emb_rows, &cos, &sin, style);
        let vv = v_vis.slice_cols(span.clone());
        let rh = bank.slice_cols(span.clone());
        let (q_full, k_full, v_full) = match txt {
            Some((qt, kt, vt)) => (
                Tensor::concat_rows(&[&qa, &qt.slice_cols(span.clone())]),
                Tensor::concat_rows(&[&ka, &kt.slice_cols(span.clone()), &rh]),
                Tensor::concat_rows(&[&vv, &vt.slice_cols(span.clone()), &rh]),
            ),
            None => (qa, Tensor::concat_rows(&[&ka, &rh]), Tensor::concat_rows(&[&vv, &rh])),
        };
        let scores = q_full.matmul(&k_full.transpose()).mul_scalar(scale);
        let probs = scores.softmax_rows_grouped(&groups);
        head_outputs.push(probs.matmul_grouped(&v_full, &groups));
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    Ok(if refs.len() == 1 { head_outputs[0].clone() } else { Tensor::concat_cols(&refs) })
}

/// Reduction sanity check: evaluates the full attention with the given
/// parameters and compares it against an independently coded dense
/// softmax attention that has no boundary embeddings and no registers
/// (rotary only). Returns true iff the two agree within 1e-6.
///
/// Meaningful when the caller zeroes CE/TE/IE and sets register keys to
/// -1e6 against queries with positive row sums, so the register scores
/// underflow to zero attention mass; any other setting is expected to
/// return false.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_reduction_check(
    q_vis: &Tensor,
    k_vis: &Tensor,
    v_vis: &Tensor,
    txt: Option<(&Tensor, &Tensor, &Tensor)>,
    tags: &[PanelRole],
    positions: &[(usize, usize)],
    mode: TaskMode,
    emb: &BoundaryEmbeddings,
    registers: &RegisterBank,
    rope: &RopeTable,
    style: RopeStyle,
    heads: usize,
) -> Result<bool> {
    let full = icma_attention(
        q_vis, k_vis, v_vis, txt, tags, positions, mode, emb, registers, rope, style, heads,
    )?;
    let plain = plain_attention(q_vis, k_vis, v_vis, txt, positions, rope, style, heads)?;
    let got = full.data();
    if got.len() != plain.len() {
        return Ok(false);
    }
    let diff = got
        .iter()
        .zip(&plain)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    Ok(diff.is_finite() && diff <= 1e-6)
}

/// Independent oracle: dense multi-head softmax attention over
/// [visual; text] rows with rotary applied to visual q/k per `style`,
/// no boundary embeddings, no registers, no grouped accumulation.
/// Written with plain scalar loops on purpose.
pub fn plain_attention(
    q_vis: &Tensor,
    k_vis: &Tensor,
    v_vis: &Tensor,
    txt: Option<(&Tensor, &Tensor, &Tensor)>,
    positions: &[(usize, usize)],
    rope: &RopeTable,
    style: RopeStyle,
    heads: usize,
) -> Result<Vec<f64>> {
    let n = q_vis.rows();
    let d = q_vis.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide model dim {d}")));
    }
    let dh = d / heads;
    if rope.head_dim != dh {
        return Err(Error::Config("rotary dim differs from head dim".into()));
    }
    let (cos, sin) = rope.tables(positions);
    let rotate = |row: &[f64], tok: usize| -> Vec<f64> {
        let mut out = vec![0.0; dh];
        for p in 0..dh / 2 {
            let (c, s) = (cos[tok * (dh / 2) + p], sin[tok * (dh / 2) + p]);
            let (x0, x1) = (row[2 * p], row[2 * p + 1]);
            out[2 * p] = c * x0 - s * x1;
            out[2 * p + 1] = s * x0 + c * x1;
        }
        if matches!(style, RopeStyle::Additive) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    };

    let (qd, kd, vd) = (q_vis.data(), k_vis.data(), v_vis.data());
    let text = txt.map(|(qt, kt, vt)| (qt.rows(), qt.data(), kt.data(), vt.data()));
    let l = text.as_ref().map_or(0, |t| t.0);
    let rows = n + l;
    let mut out = vec![0.0; rows * d];
    for h in 0..heads {
        let off = h * dh;
        // Materialize this head's q/k/v rows, visual rows rotated.
        let mut q = Vec::with_capacity(rows);
        let mut k = Vec::with_capacity(rows);
        let mut v = Vec::with_capacity(rows);
        for i in 0..n {
            q.push(rotate(&qd[i * d + off..i * d + off + dh], i));
            k.push(rotate(&kd[i * d + off..i * d + off + dh], i));
            v.push(vd[i * d + off..i * d + off + dh].to_vec());
        }
        if let Some((lt, qt, kt, vt)) = &text {
            for i in 0..*lt {
                q.push(qt[i * d + off..i * d + off + dh].to_vec());
                k.push(kt[i * d + off..i * d + off + dh].to_vec());
                v.push(vt[i * d + off..i * d + off + dh].to_vec());
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..rows {
            let scores: Vec<f64> = (0..rows)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                let num: f64 = (0..rows).map(|j| exps[j] * v[j][c]).sum();
                out[i * d + off + c] = num / z;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use crate::tensor::gradcheck::{check_gradients, max_rel_err, TOL_COMPOSED};
    use rand::Rng;

    fn rope4() -> RopeTable {
        RopeTable::new(4, 100.0).unwrap()
    }

    fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeedSplitter::new(seed).rng("icma", 0);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 0.9 + 0.1).collect();
        Tensor::param(shape, data)
    }

    fn diptych_tags(n_ref: usize, n_tgt: usize) -> Vec<PanelRole> {
        let mut tags = vec![PanelRole::Reference(0); n_ref];
        tags.extend(std::iter::repeat(PanelRole::Target).take(n_tgt));
        tags
    }

    fn grid_positions(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i / 3, i % 3)).collect()
    }

    #[test]
    fn zero_embeddings_leave_only_the_rotary_pathway() {
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 2);
        let x = Tensor::randn(&[3, 4], &mut SeedSplitter::new(1).rng("x", 0));
        let tags = diptych_tags(2, 1);
        let pos = grid_positions(3);
        let (cos, sin) = rope.tables(&pos);
        let got = pos_augment(&x, &tags, &pos, &emb, &rope, RopeStyle::Additive).unwrap();
        let want = x.add(&x.rotate_pairs(&cos, &sin));
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn identity_rotation_replace_style_is_row_plus_embedding() {
        // All positions at the grid origin make the rotation an identity, so
        // the replace form collapses to x + CE + IE[1] for a Reference(1) row.
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 3);
        emb.canvas.set_data(vec![0.1, 0.2, 0.3, 0.4]);
        emb.index.set_data(vec![0.0, 0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let got = pos_augment(
            &x,
            &[PanelRole::Reference(1)],
            &[(0, 0)],
            &emb,
            &rope,
            RopeStyle::Replace,
        )
        .unwrap();
        assert_eq!(got.data(), vec![1.0 + 0.1 + 5.0, 2.0 + 0.2 + 6.0, 3.0 + 0.3 + 7.0, 4.0 + 0.4 + 8.0]);
    }

    #[test]
    fn augment_matches_scalar_reference_on_three_tokens() {
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 2);
        let mut rng = SeedSplitter::new(7).rng("emb", 0);
        for t in [&emb.canvas, &emb.target, &emb.index] {
            let n = t.numel();
            t.set_data((0..n).map(|_| rng.gen::<f64>() - 0.5).collect());
        }
        let x = Tensor::randn(&[3, 4], &mut rng);
        let tags = [PanelRole::Reference(1), PanelRole::Target, PanelRole::Reference(0)];
        let pos = [(0, 2), (1, 0), (2, 1)];
        let got = pos_augment(&x, &tags, &pos, &emb, &rope, RopeStyle::Additive).unwrap();

        let (xd, ce, te, ie) = (x.data(), emb.canvas.data(), emb.target.data(), emb.index.data());
        let (cos, sin) = rope.tables(&pos);
        let mut want = vec![0.0; 12];
        for i in 0..3 {
            let row = &xd[i * 4..(i + 1) * 4];
            let e: Vec<f64> = match tags[i] {
                PanelRole::Reference(j) => (0..4).map(|c| ce[c] + ie[j * 4 + c]).collect(),
                PanelRole::Target => te.clone(),
            };
            for p in 0..2 {
                let (c, s) = (cos[i * 2 + p], sin[i * 2 + p]);
                want[i * 4 + 2 * p] = row[2 * p] + e[2 * p] + c * row[2 * p] - s * row[2 * p + 1];
                want[i * 4 + 2 * p + 1] =
                    row[2 * p + 1] + e[2 * p + 1] + s * row[2 * p] + c * row[2 * p + 1];
            }
        }
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tag_outside_index_table_is_a_config_error() {
        let emb = BoundaryEmbeddings::zeros(4, 2);
        let x = Tensor::randn(&[1, 4], &mut SeedSplitter::new(2).rng("x", 1));
        let err = pos_augment(&x, &[PanelRole::Reference(2)], &[(0, 0)], &emb, &rope4(), RopeStyle::Additive);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn row_counts_follow_the_register_contract() {
        assert_eq!(attention_row_counts(2, 1), (3, 7, 3));
        let d = 8;
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 2);
        let registers = RegisterBank::zeros(d);
        let q = positive_tensor(&[2, d], 10);
        let k = positive_tensor(&[2, d], 11);
        let v = positive_tensor(&[2, d], 12);
        let qt = positive_tensor(&[1, d], 13);
        let kt = positive_tensor(&[1, d], 14);
        let vt = positive_tensor(&[1, d], 15);
        let out = icma_attention(
            &q,
            &k,
            &v,
            Some((&qt, &kt, &vt)),
            &diptych_tags(1, 1),
            &grid_positions(2),
            TaskMode::PositionAwarePrecise,
            &emb,
            &registers,
            &rope,
            RopeStyle::Additive,
            2,
        )
        .unwrap();
        assert_eq!(out.shape(), &[3, d]);
    }

    #[test]
    fn degenerate_single_token_attends_to_its_own_value() {
        // One visual token, no text; register keys at -1e6 get zero mass, so
        // the single real row takes all of it and the output is its value.
        let d = 4;
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 1);
        let registers = RegisterBank::zeros(d);
        for bank in registers.tensors() {
            bank.set_data(vec![-1e6; REGISTER_TOKENS * d]);
        }
        let q = positive_tensor(&[1, d], 20);
        let k = positive_tensor(&[1, d], 21);
        let v = positive_tensor(&[1, d], 22);
        let out = icma_attention(
            &q,
            &k,
            &v,
            None,
            &[PanelRole::Target],
            &[(0, 0)],
            TaskMode::PositionFree,
            &emb,
            &registers,
            &rope,
            RopeStyle::Additive,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, d]);
        for (a, b) in out.data().iter().zip(&v.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// Scalar re-implementation of the full mechanism (embeddings, rotary,
    /// registers) with plain row-major softmax, used as the dense oracle.
    #[allow(clippy::too_many_arguments)]
    fn naive_full(
        q_vis: &Tensor,
        k_vis: &Tensor,
        v_vis: &Tensor,
        txt: Option<(&Tensor, &Tensor, &Tensor)>,
        tags: &[PanelRole],
        positions: &[(usize, usize)],
        emb: &BoundaryEmbeddings,
        bank: &Tensor,
        rope: &RopeTable,
        style: RopeStyle,
        heads: usize,
    ) -> Vec<f64> {
        let n = q_vis.rows();
        let d = q_vis.cols();
        let dh = d / heads;
        let (cos, sin) = rope.tables(positions);
        let (ce, te, ie) = (emb.canvas.data(), emb.target.data(), emb.index.data());
        let aug = |row: &[f64], tok: usize, head: usize| -> Vec<f64> {
            let e: Vec<f64> = match tags[tok] {
                PanelRole::Reference(j) => (0..dh).map(|c| ce[c] + ie[j * dh + c]).collect(),
                PanelRole::Target => te.clone(),
            };
            let mut out = vec![0.0; dh];
            let _ = head;
            for p in 0..dh / 2 {
                let (c, s) = (cos[tok * (dh / 2) + p], sin[tok * (dh / 2) + p]);
                out[2 * p] = c * row[2 * p] - s * row[2 * p + 1] + e[2 * p];
                out[2 * p + 1] = s * row[2 * p] + c * row[2 * p + 1] + e[2 * p + 1];
            }
            if matches!(style, RopeStyle::Additive) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            out
        };
        let (qd, kd, vd) = (q_vis.data(), k_vis.data(), v_vis.data());
        let text = txt.map(|(qt, kt, vt)| (qt.rows(), qt.data(), kt.data(), vt.data()));
        let l = text.as_ref().map_or(0, |t| t.0);
        let bd = bank.data();
        let rows_q = n + l;
        let rows_kv = n + l + REGISTER_TOKENS;
        let mut out = vec![0.0; rows_q * d];
        for h in 0..heads {
            let off = h * dh;
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            for i in 0..n {
                q.push(aug(&qd[i * d + off..i * d + off + dh], i, h));
                k.push(aug(&kd[i * d + off..i * d + off + dh], i, h));
                v.push(vd[i * d + off..i * d + off + dh].to_vec());
            }
            if let Some((lt, qt, kt, vt)) = &text {
                for i in 0..*lt {
                    q.push(qt[i * d + off..i * d + off + dh].to_vec());
                    k.push(kt[i * d + off..i * d + off + dh].to_vec());
                    v.push(vt[i * d + off..i * d + off + dh].to_vec());
                }
            }
            for r in 0..REGISTER_TOKENS {
                k.push(bd[r * d + off..r * d + off + dh].to_vec());
                v.push(bd[r * d + off..r * d + off + dh].to_vec());
            }
            let scale = 1.0 / (dh as f64).sqrt();
            for i in 0..rows_q {
                let scores: Vec<f64> = (0..rows_kv)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let num: f64 = (0..rows_kv).map(|j| exps[j] * v[j][c]).sum();
                    out[i * d + off + c] = num / z;
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_oracle_with_full_augmentation() {
        // 3 visual + 2 text tokens, random weights, both head counts and
        // both rotary styles.
        let d = 8;
        let mut rng = SeedSplitter::new(30).rng("oracle", 0);
        let registers = RegisterBank::zeros(d);
        for bank in registers.tensors() {
            bank.set_data((0..REGISTER_TOKENS * d).map(|_| rng.gen::<f64>() - 0.5).collect());
        }
        let q = Tensor::randn(&[3, d], &mut rng);
        let k = Tensor::randn(&[3, d], &mut rng);
        let v = Tensor::randn(&[3, d], &mut rng);
        let qt = Tensor::randn(&[2, d], &mut rng);
        let kt = Tensor::randn(&[2, d], &mut rng);
        let vt = Tensor::randn(&[2, d], &mut rng);
        let tags = [PanelRole::Reference(0), PanelRole::Reference(1), PanelRole::Target];
        let pos = [(0, 0), (0, 1), (0, 2)];
        for style in [RopeStyle::Additive, RopeStyle::Replace] {
            for heads in [1usize, 2] {
                let rope = RopeTable::new(d / heads, 100.0).unwrap();
                let emb = BoundaryEmbeddings::zeros(d / heads, 2);
                for t in [&emb.canvas, &emb.target, &emb.index] {
                    let m = t.numel();
                    t.set_data((0..m).map(|_| rng.gen::<f64>() - 0.5).collect());
                }
                let got = icma_attention(
                    &q,
                    &k,
                    &v,
                    Some((&qt, &kt, &vt)),
                    &tags,
                    &pos,
                    TaskMode::PositionAwareUserDrawn,
                    &emb,
                    &registers,
                    &rope,
                    style,
                    heads,
                )
                .unwrap();
                let want = naive_full(
                    &q,
                    &k,
                    &v,
                    Some((&qt, &kt, &vt)),
                    &tags,
                    &pos,
                    &emb,
                    registers.select(TaskMode::PositionAwareUserDrawn),
                    &rope,
                    style,
                    heads,
                );
                let diff = got
                    .data()
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff < 1e-12, "style {style:?} heads {heads}: max diff {diff}");
            }
        }
    }

    #[test]
    fn vanilla_check_accepts_the_reduction_and_rejects_perturbations() {
        let d = 8;
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 2);
        let registers = RegisterBank::zeros(d);
        for bank in registers.tensors() {
            bank.set_data(vec![-1e6; REGISTER_TOKENS * d]);
        }
        // Positive-entry rows keep register scores hugely negative, so their
        // attention mass underflows to exactly zero.
        let q = positive_tensor(&[4, d], 40);
        let k = positive_tensor(&[4, d], 41);
        let v = positive_tensor(&[4, d], 42);
        let tags = diptych_tags(2, 2);
        let pos = grid_positions(4);
        let ok = vanilla_reduction_check(
            &q,
            &k,
            &v,
            None,
            &tags,
            &pos,
            TaskMode::PositionAwarePrecise,
            &emb,
            &registers,
            &rope,
            RopeStyle::Additive,
            2,
        )
        .unwrap();
        assert!(ok);

        emb.target.set_data(vec![0.5, 0.0, 0.0, 0.0]);
        let perturbed = vanilla_reduction_check(
            &q,
            &k,
            &v,
            None,
            &tags,
            &pos,
            TaskMode::PositionAwarePrecise,
            &emb,
            &registers,
            &rope,
            RopeStyle::Additive,
            2,
        )
        .unwrap();
        assert!(!perturbed);
    }

    #[test]
    fn task_mode_changes_output_iff_banks_differ() {
        let d = 4;
        let rope = rope4();
        let emb = BoundaryEmbeddings::zeros(4, 1);
        let registers = RegisterBank::zeros(d);
        let q = positive_tensor(&[2, d], 50);
        let k = positive_tensor(&[2, d], 51);
        let v = positive_tensor(&[2, d], 52);
        let tags = diptych_tags(1, 1);
        let pos = grid_positions(2);
        let run = |mode: TaskMode| {
            icma_attention(
                &q, &k, &v, None, &tags, &pos, mode, &emb, &registers, &rope,
                RopeStyle::Additive, 1,
            )
            .unwrap()
            .data()
        };
        // Identical (zero) banks: outputs bitwise equal across modes.
        let a = run(TaskMode::PositionAwarePrecise);
        let b = run(TaskMode::PositionFree);
        assert_eq!(a, b);
        // Distinct banks: L-infinity gap strictly positive.
        registers.tensors()[2].set_data((0..REGISTER_TOKENS * d).map(|i| 0.1 * i as f64).collect());
        let c = run(TaskMode::PositionFree);
        let gap = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(gap > 0.0);
    }

    #[test]
    fn permuting_panels_with_tags_and_positions_permutes_outputs_bitwise() {
        // Two reference panels of two tokens each plus a two-token target.
        // Swapping the two panel blocks in sequence order, carrying tags and
        // positions along, must permute output rows with zero tolerance.
        let d = 8;
        let rope = rope4();
        let mut rng = SeedSplitter::new(60).rng("perm", 0);
        let emb = BoundaryEmbeddings::zeros(4, 2);
        for t in [&emb.canvas, &emb.target, &emb.index] {
            let m = t.numel();
            t.set_data((0..m).map(|_| rng.gen::<f64>() - 0.5).collect());
        }
        let registers = RegisterBank::zeros(d);
        for bank in registers.tensors() {
            bank.set_data((0..REGISTER_TOKENS * d).map(|_| rng.gen::<f64>() - 0.5).collect());
        }
        let q = Tensor::randn(&[6, d], &mut rng);
        let k = Tensor::randn(&[6, d], &mut rng);
        let v = Tensor::randn(&[6, d], &mut rng);
        let qt = Tensor::randn(&[2, d], &mut rng);
        let kt = Tensor::randn(&[2, d], &mut rng);
        let vt = Tensor::randn(&[2, d], &mut rng);
        let tags = [
            PanelRole::Reference(0),
            PanelRole::Reference(0),
            PanelRole::Reference(1),
            PanelRole::Reference(1),
            PanelRole::Target,
            PanelRole::Target,
        ];
        let pos = [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5)];
        // Swap the Reference(0) and Reference(1) blocks.
        let perm = [2usize, 3, 0, 1, 4, 5];
        let permute_rows = |t: &Tensor| {
            let src = t.data();
            let mut out = vec![0.0; src.len()];
            for (dst, &s) in perm.iter().enumerate() {
                out[dst * d..(dst + 1) * d].copy_from_slice(&src[s * d..(s + 1) * d]);
            }
            Tensor::from_vec(&[6, d], out)
        };
        let tags_p: Vec<PanelRole> = perm.iter().map(|&s| tags[s]).collect();
        let pos_p: Vec<(usize, usize)> = perm.iter().map(|&s| pos[s]).collect();
        let run = |q: &Tensor, k: &Tensor, v: &Tensor, tags: &[PanelRole], pos: &[(usize, usize)]| {
            icma_attention(
                q,
                k,
                v,
                Some((&qt, &kt, &vt)),
                tags,
                pos,
                TaskMode::PositionAwarePrecise,
                &emb,
                &registers,
                &rope,
                RopeStyle::Additive,
                2,
            )
            .unwrap()
            .data()
        };
        let base = run(&q, &k, &v, &tags, &pos);
        let swapped = run(&permute_rows(&q), &permute_rows(&k), &permute_rows(&v), &tags_p, &pos_p);
        for (dst, &s) in perm.iter().enumerate() {
            for c in 0..d {
                assert_eq!(
                    swapped[dst * d + c].to_bits(),
                    base[s * d + c].to_bits(),
                    "row {dst} col {c}"
                );
            }
        }
        // Text rows (after the visual block) also stay bit-identical.
        for i in 6 * d..8 * d {
            assert_eq!(swapped[i].to_bits(), base[i].to_bits());
        }
    }

    #[test]
    fn boundary_and_register_gradients_pass_finite_differences() {
        let d = 8;
        let rope = rope4();
        let mut rng = SeedSplitter::new(70).rng("fd", 0);
        let emb = BoundaryEmbeddings::zeros(4, 2);
        for t in [&emb.canvas, &emb.target, &emb.index] {
            let m = t.numel();
            t.set_data((0..m).map(|_| 0.3 * (rng.gen::<f64>() - 0.5)).collect());
        }
        let registers = RegisterBank::zeros(d);
        for bank in registers.tensors() {
            bank.set_data((0..REGISTER_TOKENS * d).map(|_| 0.3 * (rng.gen::<f64>() - 0.5)).collect());
        }
        let q = Tensor::randn(&[3, d], &mut rng);
        let k = Tensor::randn(&[3, d], &mut rng);
        let v = Tensor::randn(&[3, d], &mut rng);
        let tags = [PanelRole::Reference(0), PanelRole::Reference(1), PanelRole::Target];
        let pos = [(0, 0), (0, 1), (1, 0)];
        let weight = Tensor::randn(&[3, d], &mut rng);
        let bank = registers.select(TaskMode::PositionFree).clone();
        let params = [emb.canvas.clone(), emb.target.clone(), emb.index.clone(), bank];
        let probes: Vec<(usize, usize)> = vec![(0, 0), (0, 2), (1, 1), (2, 3), (2, 5), (3, 7), (3, 12)];
        let loss = || {
            icma_attention(
                &q,
                &k,
                &v,
                None,
                &tags,
                &pos,
                TaskMode::PositionFree,
                &emb,
                &registers,
                &rope,
                RopeStyle::Additive,
                2,
            )
            .unwrap()
            .mul(&weight)
            .sum_all()
        };
        let results = check_gradients(&params, &probes, &loss);
        assert!(
            max_rel_err(&results) <= TOL_COMPOSED,
            "max rel err {}",
            max_rel_err(&results)
        );
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TaskMode::ALL {
            assert_eq!(TaskMode::from_name(m.name()), Some(m));
        }
        assert_eq!(TaskMode::from_name("nope"), None);
        for s in [RopeStyle::Additive, RopeStyle::Replace] {
            assert_eq!(RopeStyle::from_name(s.name()), Some(s));
        }
    }
}
