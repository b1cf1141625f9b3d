//! Dense layers with optional low-rank adapters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Low-rank adapter: effective weight = W + (alpha/r) * A * B. B starts at
/// zero so attaching never changes the forward pass.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f64,
}

/// Linear map [d_in -> d_out] with bias, applied to row-major token
/// matrices. The adapter term is computed factored, (x A) B, never as a
/// materialized weight delta.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl LinearLayer {
    /// Gaussian weights scaled by 1/sqrt(d_in), zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = Tensor::randn(&[d_in, d_out], rng).mul_scalar(scale).detach_into_param();
        LinearLayer { weight, bias: Tensor::param(&[1, d_out], vec![0.0; d_out]), lora: None }
    }

    /// All-zero layer; used for the output head so a fresh model predicts
    /// zero velocity.
    pub fn zeros(d_in: usize, d_out: usize) -> LinearLayer {
        LinearLayer {
            weight: Tensor::param(&[d_in, d_out], vec![0.0; d_in * d_out]),
            bias: Tensor::param(&[1, d_out], vec![0.0; d_out]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let base = x.matmul(&self.weight).add_rowvec(&self.bias);
        match &self.lora {
            Some(l) => base.add(&x.matmul(&l.down).matmul(&l.up).mul_scalar(l.scale)),
            None => base,
        }
    }

    /// Attach a rank-r adapter. A gets small Gaussian entries, B is zero.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("adapter already attached to this layer".into()));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let a_scale = 1.0 / (d_in as f64).sqrt();
        let down = Tensor::randn(&[d_in, rank], rng).mul_scalar(a_scale).detach_into_param();
        let up = Tensor::param(&[rank, d_out], vec![0.0; rank * d_out]);
        self.lora = Some(LoraAdapter { down, up, scale: alpha / rank as f64 });
        Ok(())
    }

    /// Parameters a rank-r adapter adds to this layer.
    pub fn lora_param_count(&self) -> usize {
        self.lora.as_ref().map_or(0, |l| l.down.numel() + l.up.numel())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    fn rng(i: u64) -> ChaCha8Rng {
        SeedSplitter::new(900).rng("linear", i)
    }

    #[test]
    fn forward_is_affine() {
        let layer = LinearLayer::new(3, 2, &mut rng(0));
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = layer.forward(&x);
        let w = layer.weight.data();
        // Rows of the identity pick out weight rows (bias is zero).
        assert_eq!(&y.data()[0..2], &w[0..2]);
        assert_eq!(&y.data()[2..4], &w[2..4]);
    }

    #[test]
    fn attach_is_a_no_op_until_b_moves() {
        let mut layer = LinearLayer::new(4, 4, &mut rng(1));
        let x = Tensor::randn(&[3, 4], &mut rng(2));
        let before = layer.forward(&x).data();
        layer.attach_lora(2, 2.0, &mut rng(3)).unwrap();
        let after = layer.forward(&x).data();
        assert_eq!(before, after);

        // Move B: output must now include (alpha/r) x A B.
        let l = layer.lora.as_ref().unwrap();
        l.up.set_data(vec![0.5; 8]);
        let shifted = layer.forward(&x);
        let delta = x.matmul(&l.down).matmul(&l.up).mul_scalar(l.scale);
        let want = Tensor::from_vec(&[3, 4], before).add(&delta);
        for (a, b) in shifted.data().iter().zip(&want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_attach_is_a_config_error() {
        let mut layer = LinearLayer::new(4, 4, &mut rng(4));
        layer.attach_lora(2, 2.0, &mut rng(5)).unwrap();
        assert!(matches!(layer.attach_lora(2, 2.0, &mut rng(6)), Err(Error::Config(_))));
    }

    #[test]
    fn adapter_param_count_matches_the_closed_form() {
        // One 64x64 matrix at rank 4 adds r*(d_in + d_out) = 512 parameters.
        let mut layer = LinearLayer::new(64, 64, &mut rng(7));
        assert_eq!(layer.lora_param_count(), 0);
        layer.attach_lora(4, 4.0, &mut rng(8)).unwrap();
        assert_eq!(layer.lora_param_count(), 512);
    }

    #[test]
    fn zero_rank_rejected() {
        let mut layer = LinearLayer::new(4, 4, &mut rng(9));
        assert!(layer.attach_lora(0, 1.0, &mut rng(10)).is_err());
    }
}
