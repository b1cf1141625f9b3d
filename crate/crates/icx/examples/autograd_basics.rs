//! The reverse-mode engine underneath everything else.
//!
//!     cargo run --example autograd_basics
//!
//! Builds a two-layer network by hand, differentiates a scalar loss, and
//! cross-checks every probed gradient against central finite differences.

use icx::tensor::gradcheck::{check_gradients, max_rel_err};
use icx::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // Parameters are tracked; plain tensors are constants.
    let w1 = Tensor::randn(&[4, 8], &mut rng).detach_into_param();
    let b1 = Tensor::param(&[1, 8], vec![0.0; 8]);
    let w2 = Tensor::randn(&[8, 2], &mut rng).detach_into_param();
    let x = Tensor::randn(&[3, 4], &mut rng);
    let target = Tensor::randn(&[3, 2], &mut rng);

    let loss = |w1: &Tensor, b1: &Tensor, w2: &Tensor| {
        let h = x.matmul(w1).add_rowvec(b1).gelu();
        let y = h.matmul(w2).layer_norm(1e-6);
        y.sub(&target).square().mean_all()
    };

    let l = loss(&w1, &b1, &w2);
    println!("loss = {:.6}", l.item());
    l.backward();
    let g = w2.grad().expect("w2 is a parameter");
    println!("dL/dw2[0..4] = {:?}", &g[..4].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());

    // Gradcheck: bump one coordinate at a time and compare the slope.
    // Probe a few entries of each parameter.
    let params = [w1.clone(), b1.clone(), w2.clone()];
    let probes: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| (0..4).map(move |i| (p, i * 2)))
        .collect();
    for p in &params {
        p.zero_grad();
    }
    let results = check_gradients(&params, &probes, &|| loss(&params[0], &params[1], &params[2]));
    for r in &results {
        println!(
            "param {} index {:>2}: analytic {:+.8} numeric {:+.8} rel_err {:.2e}",
            r.param, r.index, r.analytic, r.numeric, r.rel_err
        );
    }
    let worst = max_rel_err(&results);
    println!("worst relative error: {worst:.2e}");
    assert!(worst < 1e-4, "gradients disagree with finite differences");
    println!("all probed gradients agree");
}
