//! Finite-difference verification of analytic gradients.
//!
//! Central differences with step `h` carry O(h^2) truncation error plus
//! roughly `eps_machine * |loss| / h` cancellation error. With h = 1e-5 and
//! losses of order one, both sit near 1e-10 absolute, so well-conditioned
//! gradients of order one should agree to about 1e-6 relative. Tolerances
//! widen where conditioning degrades.

use super::Tensor;

/// Central-difference step. Chosen so truncation and cancellation errors
/// balance near 1e-10 for order-one losses.
pub const FD_STEP: f64 = 1e-5;

/// Linear and mildly nonlinear ops (matmul, slicing, softmax, gelu, silu):
/// both error terms stay near 1e-10, so 1e-6 relative has four decades of
/// headroom without masking a wrong formula.
pub const TOL_TIGHT: f64 = 1e-6;

/// Normalization ops divide by a data-dependent scale, which amplifies
/// cancellation when rows are nearly constant; one extra decade.
pub const TOL_NORM: f64 = 1e-5;

/// Deep composite graphs (a whole transformer forward) accumulate
/// conditioning loss through dozens of ops; 1e-4 still catches any wrong
/// term, which shows up at order one.
pub const TOL_COMPOSED: f64 = 1e-4;

/// |a - b| / max(|a|, |b|, 1e-6). The floor keeps the ratio meaningful when
/// both values sit at zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    /// Index into the parameter list.
    pub param: usize,
    /// Flat element index within that parameter.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic gradients against central differences at the probed
/// elements. `loss` must be a pure function of the current parameter
/// values: it is re-evaluated under small perturbations, so any randomness
/// inside must be frozen.
pub fn check_gradients(
    params: &[Tensor],
    probes: &[(usize, usize)],
    loss: &dyn Fn() -> Tensor,
) -> Vec<ProbeResult> {
    let l = loss();
    l.backward();
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(p, i)| params[p].grad().map_or(0.0, |g| g[i]))
        .collect();
    let mut out = Vec::with_capacity(probes.len());
    for (k, &(p, i)) in probes.iter().enumerate() {
        let orig = params[p].data();
        let mut bumped = orig.clone();
        bumped[i] = orig[i] + FD_STEP;
        params[p].set_data(bumped);
        let up = loss().item();
        let mut bumped = orig.clone();
        bumped[i] = orig[i] - FD_STEP;
        params[p].set_data(bumped);
        let down = loss().item();
        params[p].set_data(orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.push(ProbeResult {
            param: p,
            index: i,
            analytic: analytic[k],
            numeric,
            rel_err: relative_error(analytic[k], numeric),
        });
    }
    out
}

pub fn max_rel_err(results: &[ProbeResult]) -> f64 {
    results.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
