//! AdamW with bias correction and decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment slots are keyed by parameter name, so optimizer state survives a
/// checkpoint round trip independent of parameter iteration order.
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    slots: HashMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, steps: 0, slots: HashMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. A parameter with no gradient is treated as having
    /// a zero gradient (weight decay still applies). If any gradient holds
    /// a non-finite value the whole step is rejected: no parameter moves,
    /// no moment updates, the step counter stays put, and the error names
    /// the offending parameter.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        for (name, t) in params {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} in parameter {name} at optimizer step {}; \
                     step rejected, parameters unchanged",
                    self.steps + 1
                )));
            }
            grads.push(g);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for ((name, p), g) in params.iter().zip(&grads) {
            let n = g.len();
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n] });
            assert_eq!(slot.m.len(), n, "optimizer slot size changed for {name}");
            let mut data = p.data();
            for i in 0..n {
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g[i];
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / c1;
                let vhat = slot.v[i] / c2;
                data[i] -= self.cfg.lr * self.cfg.weight_decay * data[i];
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
            p.set_data(data);
        }
        Ok(())
    }

    /// Moment vectors in name-sorted order, for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut names: Vec<&String> = self.slots.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                let s = &self.slots[n];
                (n.clone(), s.m.clone(), s.v.clone())
            })
            .collect()
    }

    pub fn import_state(&mut self, steps: u64, slots: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.steps = steps;
        self.slots = slots
            .into_iter()
            .map(|(n, m, v)| {
                assert_eq!(m.len(), v.len(), "moment length mismatch for {n}");
                (n, Slot { m, v })
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> (Vec<(String, Tensor)>, Tensor) {
        let p = Tensor::param(&[2], vec![1.0, -2.0]);
        (vec![("p".to_string(), p.clone())], p)
    }

    // One hand-run of the update rule. Start p = 1, loss = p^2 so g = 2:
    //   m = 0.1 * 2 = 0.2          v = 0.001 * 4 = 0.004
    //   mhat = 0.2 / (1 - 0.9) = 2 vhat = 0.004 / (1 - 0.999) = 4
    //   step = lr * 2 / (sqrt(4) + 1e-8) ~= lr * 1
    //   p <- 1 - 0.1 * 1 = 0.9  (lr = 0.1, wd = 0)
    #[test]
    fn first_step_matches_hand_computation() {
        let p = Tensor::param(&[1], vec![1.0]);
        let loss = p.square().sum_all();
        loss.backward();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..AdamWConfig::default() });
        opt.step(&[("p".into(), p.clone())]).unwrap();
        let got = p.data()[0];
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let p = Tensor::param(&[1], vec![4.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.5, weight_decay: 0.1, ..Default::default() });
        // No backward ran: gradient is zero, only decay acts.
        opt.step(&[("p".into(), p.clone())]).unwrap();
        let got = p.data()[0];
        assert!((got - 4.0 * (1.0 - 0.05)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let (params, p) = quadratic_params();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
        for _ in 0..400 {
            let loss = p.square().sum_all();
            loss.backward();
            opt.step(&params).unwrap();
        }
        // Adam with a fixed lr orbits the optimum at roughly lr scale, so
        // ask for 2 * lr rather than machine zero.
        let d = p.data();
        assert!(d[0].abs() < 0.1 && d[1].abs() < 0.1, "did not converge: {d:?}");
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let good = Tensor::param(&[1], vec![1.0]);
        let bad = Tensor::param(&[1], vec![1.0]);
        let loss = good.square().sum_all();
        loss.backward();
        bad.accumulate_grad(&[f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt
            .step(&[("good".into(), good.clone()), ("bad".into(), bad.clone())])
            .unwrap_err();
        assert!(err.to_string().contains("bad"), "error should name the parameter: {err}");
        // Nothing moved, nothing counted.
        assert_eq!(good.data(), vec![1.0]);
        assert_eq!(bad.data(), vec![1.0]);
        assert_eq!(opt.steps(), 0);
        assert!(opt.export_state().is_empty());
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let run = |resume_at: Option<u64>| -> Vec<f64> {
            let p = Tensor::param(&[2], vec![1.0, -2.0]);
            let params = vec![("p".to_string(), p.clone())];
            let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
            let mut saved: Option<(u64, Vec<(String, Vec<f64>, Vec<f64>)>, Vec<f64>)> = None;
            for step in 0..20u64 {
                if resume_at == Some(step) {
                    let (s, state, data) = saved.take().unwrap();
                    opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
                    opt.import_state(s, state);
                    p.set_data(data);
                }
                let loss = p.square().sum_all();
                loss.backward();
                opt.step(&params).unwrap();
                if resume_at.is_some() && step + 1 == resume_at.unwrap() {
                    saved = Some((opt.steps(), opt.export_state(), p.data()));
                }
            }
            p.data()
        };
        let straight = run(None);
        let resumed = run(Some(10));
        assert_eq!(straight, resumed, "resume must be bit-identical");
    }
}
