//! Rectified flow in five minutes.
//!
//!     cargo run --example flow_euler
//!
//! The training target is the straight line between noise and data: at
//! every time t the state is t*data + (1-t)*noise and the velocity is
//! data - noise, independent of t. Sampling integrates a learned
//! velocity field with Euler steps; on an analytic field with a known
//! solution, halving the step size halves the error (first order).

use icx::flow::{euler_integrate, noising, velocity_target};
use icx::image::Image;
use icx::rng::SeedSplitter;

fn main() {
    // Interpolation endpoints are exact: t=0 is pure noise, t=1 data.
    let data = Image::filled(4, 4, &[0.8, 0.1, 0.3]);
    let noise = icx::flow::noise_image(4, 4, 3, &mut SeedSplitter::new(3).rng("n", 0));
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = noising(&data, &noise, t).unwrap();
        println!("t={t:.2}  x[0]={:+.4}", x.data[0]);
    }
    assert_eq!(noising(&data, &noise, 0.0).unwrap().data, noise.data);
    assert_eq!(noising(&data, &noise, 1.0).unwrap().data, data.data);

    let v = velocity_target(&data, &noise).unwrap();
    println!(
        "velocity = data - noise; v[0] = {:+.4} (constant along the path)\n",
        v.data[0]
    );

    // Analytic test field: v(x, t) = a - x. The exact endpoint from x0
    // is a + (x0 - a)/e, so Euler's global error is measurable.
    let a = [0.6, -0.2];
    let x0 = vec![2.0, -1.0];
    let exact: Vec<f64> =
        a.iter().zip(&x0).map(|(ai, xi)| ai + (xi - ai) / std::f64::consts::E).collect();

    let mut errs = Vec::new();
    for steps in [8usize, 16, 32, 64, 128] {
        let end = euler_integrate(&x0, steps, |x, _t| {
            Ok(a.iter().zip(x).map(|(ai, xi)| ai - xi).collect())
        })
        .unwrap();
        let err: f64 = end
            .iter()
            .zip(&exact)
            .map(|(e, x)| (e - x).abs())
            .fold(0.0, f64::max);
        println!("steps={steps:>4}  max error {err:.6}");
        errs.push(err);
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        println!("halving the step: error ratio {ratio:.3} (first order: about 2)");
        assert!((1.7..2.3).contains(&ratio));
    }
}
