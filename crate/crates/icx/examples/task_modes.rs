//! The three customization tasks and their masks.
//!
//!     cargo run --example task_modes
//!
//! A mask over the assembled canvas decides which pixels the model may
//! rewrite (0) and which it must keep (1). References are always kept.
//! Precise placement keeps everything except the subject silhouette;
//! user-drawn placement carves a rough blob around it; position-free
//! releases the whole target panel.

use icx::flow::{build_model_input, make_mask, noising, velocity_target};
use icx::forge::MaskRules;
use icx::geometry::assemble_polyptych;
use icx::icma::TaskMode;
use icx::image::Image;
use icx::rng::SeedSplitter;

fn ascii(mask: &Image, label: &str) {
    println!("{label}: ('.' keep, '#' regenerate)");
    for y in 0..mask.h {
        let row: String = (0..mask.w)
            .map(|x| if mask.data[y * mask.w + x] > 0.5 { '.' } else { '#' })
            .collect();
        println!("  {row}");
    }
}

fn main() {
    // One reference and a target with a small square subject.
    let reference = Image::filled(8, 8, &[0.8, 0.2, 0.2]);
    let mut target = Image::filled(8, 8, &[0.9, 0.9, 0.9]);
    let mut silhouette = Image::new(8, 8, 1);
    for y in 2..6 {
        for x in 3..7 {
            silhouette.data[y * 8 + x] = 1.0;
            for ch in 0..3 {
                target.data[(y * 8 + x) * 3 + ch] = 0.2;
            }
        }
    }
    let (_, layout) = assemble_polyptych(&[&reference], &target, 2).unwrap();
    let rules = MaskRules::conservative();
    let splitter = SeedSplitter::new(3);

    for mode in TaskMode::ALL {
        let mut rng = splitter.rng("mask", mode.index() as u64);
        let mask = make_mask(mode, &layout, Some(&silhouette), &rules, &mut rng).unwrap();
        ascii(&mask, mode.name());
        let held = mask.data.iter().filter(|&&v| v > 0.5).count();
        println!("  kept {held}/{} pixels\n", mask.data.len());
    }

    // A silhouette covering the whole panel makes precise placement
    // indistinguishable from position-free, byte for byte: same mask,
    // and therefore the same model input.
    let full = Image::filled(8, 8, &[1.0]);
    let mut rng = splitter.rng("full", 0);
    let precise_full =
        make_mask(TaskMode::PositionAwarePrecise, &layout, Some(&full), &rules, &mut rng).unwrap();
    let free =
        make_mask(TaskMode::PositionFree, &layout, None, &rules, &mut rng).unwrap();
    assert_eq!(precise_full.data, free.data);

    let noise = Image::filled(8, 16, &[0.5, 0.5, 0.5]);
    let (canvas, _) = assemble_polyptych(&[&reference], &target, 2).unwrap();
    let x_t = noising(&canvas, &noise, 0.3).unwrap();
    let a = build_model_input(&x_t, &canvas, &precise_full, &layout, 2).unwrap();
    let b = build_model_input(&x_t, &canvas, &free, &layout, 2).unwrap();
    assert_eq!(a.tokens, b.tokens);
    println!("full-silhouette precise == position-free: identical model input");

    // The regression target never depends on the mask or the mode: it
    // is the straight line from noise to data.
    let v = velocity_target(&canvas, &noise).unwrap();
    println!(
        "velocity target range [{:.3}, {:.3}] (data - noise, everywhere)",
        v.data.iter().cloned().fold(f64::INFINITY, f64::min),
        v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );
}
