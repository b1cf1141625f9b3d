//! Transformer blocks: timestep conditioning, per-stream modulation, and
//! the double (separate image/text streams, joint attention) and single
//! (fused stream) block types.
//!
//! Modulation layers are zero-initialized, so every block starts as an
//! exact identity and training opens the gates; combined with the zero
//! output head this gives a quiet start for velocity training.

use crate::error::Result;
use crate::geometry::RopeTable;
use crate::icma::{icma_attention, BoundaryEmbeddings, RegisterBank, RopeStyle, TaskMode};
use crate::image::PanelRole;
use crate::model::linear::LinearLayer;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

/// Sinusoidal features of a scalar time in [0, 1]: half sines, half
/// cosines over a geometric frequency ladder (time scaled by 1000 so the
/// fastest feature sweeps many periods across the unit interval).
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "feature dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let angle = 1000.0 * t * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

/// Two-layer MLP over the sinusoidal features; its silu'd output is the
/// conditioning vector handed to every modulation layer.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl TimeEmbed {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> TimeEmbed {
        TimeEmbed { fc1: LinearLayer::new(dim, dim, rng), fc2: LinearLayer::new(dim, dim, rng) }
    }

    pub fn forward(&self, t: f64) -> Tensor {
        self.fc2.forward(&self.fc1.forward(&timestep_features(t, self.fc1.d_in())).silu())
    }
}

/// The six per-stream modulation rows: shift/scale/gate around attention,
/// then shift/scale/gate around the MLP.
pub struct ModOut {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

/// Linear(d -> 6d) over the conditioning vector. Zero-initialized: with a
/// zero conditioning vector the output is exactly the learned bias.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub layer: LinearLayer,
}

impl Modulation {
    pub fn new(dim: usize) -> Modulation {
        Modulation { layer: LinearLayer::zeros(dim, 6 * dim) }
    }

    pub fn compute(&self, cond: &Tensor) -> ModOut {
        let d = self.layer.d_in();
        let all = self.layer.forward(cond);
        ModOut {
            shift_attn: all.slice_cols(0..d),
            scale_attn: all.slice_cols(d..2 * d),
            gate_attn: all.slice_cols(2 * d..3 * d),
            shift_mlp: all.slice_cols(3 * d..4 * d),
            scale_mlp: all.slice_cols(4 * d..5 * d),
            gate_mlp: all.slice_cols(5 * d..6 * d),
        }
    }
}

/// Norm-then-modulate: LN(x) * (1 + scale) + shift, rows broadcast.
fn modulated(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Tensor {
    x.layer_norm(LN_EPS).mul_rowvec(&scale.add_scalar(1.0)).add_rowvec(shift)
}

/// One stream's weights: attention projections, MLP, and modulation.
#[derive(Debug, Clone)]
pub struct StreamWeights {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub o: LinearLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub modulation: Modulation,
}

impl StreamWeights {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> StreamWeights {
        StreamWeights {
            q: LinearLayer::new(dim, dim, rng),
            k: LinearLayer::new(dim, dim, rng),
            v: LinearLayer::new(dim, dim, rng),
            o: LinearLayer::new(dim, dim, rng),
            fc1: LinearLayer::new(dim, MLP_RATIO * dim, rng),
            fc2: LinearLayer::new(MLP_RATIO * dim, dim, rng),
            modulation: Modulation::new(dim),
        }
    }

    fn mlp(&self, x: &Tensor, m: &ModOut) -> Tensor {
        let h = modulated(x, &m.shift_mlp, &m.scale_mlp);
        x.add(&self.fc2.forward(&self.fc1.forward(&h).gelu()).mul_rowvec(&m.gate_mlp))
    }
}

/// Everything the attention call needs besides the projected rows.
pub struct AttnContext<'a> {
    pub tags: &'a [PanelRole],
    pub positions: &'a [(usize, usize)],
    pub mode: TaskMode,
    pub rope: &'a RopeTable,
    pub style: RopeStyle,
    pub heads: usize,
}

/// Separate image and text streams sharing one joint attention.
#[derive(Debug, Clone)]
pub struct DoubleBlock {
    pub img: StreamWeights,
    pub txt: StreamWeights,
    pub boundary: BoundaryEmbeddings,
    pub registers: RegisterBank,
}

impl DoubleBlock {
    pub fn new(dim: usize, head_dim: usize, max_refs: usize, rng: &mut ChaCha8Rng) -> DoubleBlock {
        DoubleBlock {
            img: StreamWeights::new(dim, rng),
            txt: StreamWeights::new(dim, rng),
            boundary: BoundaryEmbeddings::zeros(head_dim, max_refs),
            registers: RegisterBank::zeros(dim),
        }
    }

    pub fn forward(
        &self,
        img: &Tensor,
        txt: Option<&Tensor>,
        cond: &Tensor,
        ctx: &AttnContext,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let n = img.rows();
        let im = self.img.modulation.compute(cond);
        let hi = modulated(img, &im.shift_attn, &im.scale_attn);
        let (qi, ki, vi) = (self.img.q.forward(&hi), self.img.k.forward(&hi), self.img.v.forward(&hi));

        let txt_state = txt.map(|x| {
            let tm = self.txt.modulation.compute(cond);
            let ht = modulated(x, &tm.shift_attn, &tm.scale_attn);
            let triple =
                (self.txt.q.forward(&ht), self.txt.k.forward(&ht), self.txt.v.forward(&ht));
            (tm, triple)
        });
        let txt_qkv = txt_state.as_ref().map(|(_, (q, k, v))| (q, k, v));

        let attn = icma_attention(
            &qi,
            &ki,
            &vi,
            txt_qkv,
            ctx.tags,
            ctx.positions,
            ctx.mode,
            &self.boundary,
            &self.registers,
            ctx.rope,
            ctx.style,
            ctx.heads,
        )?;

        let a_img = if txt.is_some() { attn.slice_rows(0..n) } else { attn.clone() };
        let img_out = img.add(&self.img.o.forward(&a_img).mul_rowvec(&im.gate_attn));
        let img_out = self.img.mlp(&img_out, &im);

        let txt_out = match (txt, txt_state) {
            (Some(x), Some((tm, _))) => {
                let a_txt = attn.slice_rows(n..attn.rows());
                let y = x.add(&self.txt.o.forward(&a_txt).mul_rowvec(&tm.gate_attn));
                Some(self.txt.mlp(&y, &tm))
            }
            _ => None,
        };
        Ok((img_out, txt_out))
    }
}

/// Fused stream: one set of weights over the concatenated visual and text
/// rows; attention still tells the two apart through `n_visual`.
#[derive(Debug, Clone)]
pub struct SingleBlock {
    pub stream: StreamWeights,
    pub boundary: BoundaryEmbeddings,
    pub registers: RegisterBank,
}

impl SingleBlock {
    pub fn new(dim: usize, head_dim: usize, max_refs: usize, rng: &mut ChaCha8Rng) -> SingleBlock {
        SingleBlock {
            stream: StreamWeights::new(dim, rng),
            boundary: BoundaryEmbeddings::zeros(head_dim, max_refs),
            registers: RegisterBank::zeros(dim),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        n_visual: usize,
        cond: &Tensor,
        ctx: &AttnContext,
    ) -> Result<Tensor> {
        let rows = x.rows();
        let m = self.stream.modulation.compute(cond);
        let h = modulated(x, &m.shift_attn, &m.scale_attn);
        let (q, k, v) = (self.stream.q.forward(&h), self.stream.k.forward(&h), self.stream.v.forward(&h));
        let (qv, kv, vv) =
            (q.slice_rows(0..n_visual), k.slice_rows(0..n_visual), v.slice_rows(0..n_visual));
        let txt_qkv = if rows > n_visual {
            Some((
                q.slice_rows(n_visual..rows),
                k.slice_rows(n_visual..rows),
                v.slice_rows(n_visual..rows),
            ))
        } else {
            None
        };
        let attn = icma_attention(
            &qv,
            &kv,
            &vv,
            txt_qkv.as_ref().map(|(a, b, c)| (a, b, c)),
            ctx.tags,
            ctx.positions,
            ctx.mode,
            &self.boundary,
            &self.registers,
            ctx.rope,
            ctx.style,
            ctx.heads,
        )?;
        let y = x.add(&self.stream.o.forward(&attn).mul_rowvec(&m.gate_attn));
        Ok(self.stream.mlp(&y, &m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    fn rng(i: u64) -> ChaCha8Rng {
        SeedSplitter::new(901).rng("blocks", i)
    }

    #[test]
    fn timestep_features_are_deterministic_and_distinct() {
        let a = timestep_features(0.3, 8).data();
        let b = timestep_features(0.3, 8).data();
        let c = timestep_features(0.7, 8).data();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Sine/cosine pairs stay on the unit circle.
        for i in 0..4 {
            assert!((a[i] * a[i] + a[4 + i] * a[4 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_conditioning_reduces_modulation_to_its_bias() {
        let m = Modulation::new(4);
        let mut bias = vec![0.0; 24];
        for (i, b) in bias.iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        m.layer.bias.set_data(bias.clone());
        let out = m.compute(&Tensor::from_vec(&[1, 4], vec![0.0; 4]));
        assert_eq!(out.shift_attn.data(), &bias[0..4]);
        assert_eq!(out.scale_attn.data(), &bias[4..8]);
        assert_eq!(out.gate_mlp.data(), &bias[20..24]);
    }

    fn ctx_for<'a>(
        tags: &'a [PanelRole],
        positions: &'a [(usize, usize)],
        rope: &'a RopeTable,
    ) -> AttnContext<'a> {
        AttnContext {
            tags,
            positions,
            mode: TaskMode::PositionAwarePrecise,
            rope,
            style: RopeStyle::Additive,
            heads: 2,
        }
    }

    #[test]
    fn fresh_blocks_are_exact_identities() {
        // Zero-initialized modulation gates every residual branch shut.
        let rope = RopeTable::new(4, 100.0).unwrap();
        let tags = [PanelRole::Reference(0), PanelRole::Target];
        let pos = [(0, 0), (0, 1)];
        let ctx = ctx_for(&tags, &pos, &rope);
        let mut r = rng(0);
        let dbl = DoubleBlock::new(8, 4, 2, &mut r);
        let img = Tensor::randn(&[2, 8], &mut r);
        let txt = Tensor::randn(&[1, 8], &mut r);
        let (io, to) = dbl.forward(&img, Some(&txt), &Tensor::from_vec(&[1, 8], vec![0.1; 8]), &ctx).unwrap();
        assert_eq!(io.data(), img.data());
        assert_eq!(to.unwrap().data(), txt.data());

        let single = SingleBlock::new(8, 4, 2, &mut r);
        let x = Tensor::randn(&[3, 8], &mut r);
        let y = single.forward(&x, 2, &Tensor::from_vec(&[1, 8], vec![0.1; 8]), &ctx).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn opened_gates_change_both_streams() {
        let rope = RopeTable::new(4, 100.0).unwrap();
        let tags = [PanelRole::Reference(0), PanelRole::Target];
        let pos = [(0, 0), (0, 1)];
        let ctx = ctx_for(&tags, &pos, &rope);
        let mut r = rng(1);
        let dbl = DoubleBlock::new(8, 4, 2, &mut r);
        for m in [&dbl.img.modulation, &dbl.txt.modulation] {
            m.layer.bias.set_data((0..48).map(|i| 0.02 * i as f64).collect());
        }
        let img = Tensor::randn(&[2, 8], &mut r);
        let txt = Tensor::randn(&[1, 8], &mut r);
        let cond = Tensor::from_vec(&[1, 8], vec![0.1; 8]);
        let (io, to) = dbl.forward(&img, Some(&txt), &cond, &ctx).unwrap();
        assert_ne!(io.data(), img.data());
        assert_ne!(to.unwrap().data(), txt.data());
        assert_eq!(io.shape(), &[2, 8]);

        // No text rows at all is legal for the image stream.
        let (io2, to2) = dbl.forward(&img, None, &cond, &ctx).unwrap();
        assert_eq!(io2.shape(), &[2, 8]);
        assert!(to2.is_none());
    }
}
