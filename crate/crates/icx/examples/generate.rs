//! Sampling: from noise to a target panel, three ways.
//!
//!     cargo run --release --example generate
//!
//! Trains a small model briefly, then generates a subject into a target
//! panel under each task mode. Outputs land in ./generate_out as PPM
//! files you can open with any image viewer.

use icx::flow::{
    euler_sample, make_mask, run_stage, SampleRequest, TrainConfig, TrainStage,
};
use icx::forge::{generate_items, MaskRules, Vocab, WorldConfig};
use icx::geometry::assemble_polyptych;
use icx::icma::TaskMode;
use icx::image::write_ppm;
use icx::model::{Model, ModelConfig};
use icx::rng::SeedSplitter;
use std::path::Path;

fn main() {
    let mut world = WorldConfig::desk();
    world.seed = 11;
    let items = generate_items(&world, 16).unwrap();
    let vocab = Vocab::from_world(&world);

    let model_cfg = ModelConfig {
        dim: 16,
        heads: 2,
        double_blocks: 1,
        single_blocks: 1,
        lora_rank: 2,
        lora_double_prefix: 1,
        lora_single_prefix: 1,
        ..ModelConfig::desk(vocab.len())
    };
    let splitter = SeedSplitter::new(42);
    let mut model = Model::new(&model_cfg, &mut splitter.rng("init", 0)).unwrap();

    // A short warmup so the velocity field points somewhere sensible;
    // quality needs the full pipeline, this is about the mechanics.
    let mut cfg = TrainConfig::desk(42);
    cfg.steps = 60;
    cfg.batch_size = 2;
    run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Pretrain, None, None).unwrap();
    model.attach_lora(&mut splitter.rng("lora", 0)).unwrap();
    run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
    println!("warmed up on {} items", items.len());

    let item = &items[2];
    let reference = &item.reference_scenes().next().unwrap().image;
    let target = item.target_scene();
    let prompt = format!(
        "[REF-SCENE] {} [TARGET-SCENE] {}",
        item.reference_scenes().next().unwrap().caption,
        target.caption
    );
    let text_ids = vocab.encode(&prompt).unwrap();
    println!("prompt: {prompt}");

    let out_dir = Path::new("generate_out");
    std::fs::create_dir_all(out_dir).unwrap();
    let rules = MaskRules::conservative();

    for mode in TaskMode::ALL {
        // Position-aware modes edit an existing scene; position-free
        // composes the panel from scratch.
        let (context, sil) = match mode {
            TaskMode::PositionFree => (None, None),
            _ => (Some(&target.image), Some(&target.silhouette)),
        };
        let blank;
        let panel = match context {
            Some(img) => img,
            None => {
                blank = icx::image::Image::new(reference.h, reference.w, reference.c);
                &blank
            }
        };
        let (_, layout) = assemble_polyptych(&[reference], panel, model_cfg.patch).unwrap();
        let mask = make_mask(
            mode,
            &layout,
            sil,
            &rules,
            &mut splitter.rng("mask", mode.index() as u64),
        )
        .unwrap();

        let req = SampleRequest {
            refs: vec![reference],
            target_context: context,
            mask,
            text_ids: text_ids.clone(),
            mode,
            steps: 16,
            seed: 7,
        };
        let (mut canvas, mut crop) = euler_sample(&model, &req).unwrap();
        canvas.clamp01();
        crop.clamp01();
        let path = out_dir.join(format!("{}.ppm", mode.name()));
        write_ppm(&path, &crop).unwrap();
        write_ppm(&out_dir.join(format!("{}_canvas.ppm", mode.name())), &canvas).unwrap();
        println!(
            "{:<13} -> {} ({}x{} panel, mean {:.3})",
            mode.name(),
            path.display(),
            crop.h,
            crop.w,
            crop.data.iter().sum::<f64>() / crop.data.len() as f64
        );
    }

    // Same seed, same bytes: sampling is a pure function of the request.
    let (_, layout) = assemble_polyptych(
        &[reference],
        &icx::image::Image::new(reference.h, reference.w, reference.c),
        model_cfg.patch,
    )
    .unwrap();
    let mask = make_mask(
        TaskMode::PositionFree,
        &layout,
        None,
        &rules,
        &mut splitter.rng("mask", 99),
    )
    .unwrap();
    let req = SampleRequest {
        refs: vec![reference],
        target_context: None,
        mask,
        text_ids,
        mode: TaskMode::PositionFree,
        steps: 16,
        seed: 7,
    };
    let (_, a) = euler_sample(&model, &req).unwrap();
    let (_, b) = euler_sample(&model, &req).unwrap();
    assert_eq!(a.data, b.data);
    println!("\nrepeat with the same seed: bitwise identical");
}
