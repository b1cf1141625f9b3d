//! The two-phase training recipe, miniaturized.
//!
//!     cargo run --release --example train_identity
//!
//! Phase one teaches the backbone to denoise single panels. Phase two
//! freezes the backbone, attaches low-rank adapters, and trains the
//! customization pathway on reference-target canvases. Watch which
//! parameter groups move in each phase.

use icx::flow::{run_stage, TrainConfig, TrainStage};
use icx::forge::{generate_items, Vocab, WorldConfig};
use icx::model::{trainable_param_report, Model, ModelConfig, ParamGroup};
use icx::rng::SeedSplitter;

fn group_norm(model: &Model, group: ParamGroup) -> f64 {
    model
        .params_in(&[group])
        .iter()
        .flat_map(|p| p.tensor.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

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

    let mut cfg = TrainConfig::desk(42);
    cfg.steps = 30;
    cfg.batch_size = 2;

    println!("phase 1: single-panel pretraining (backbone + input layers)");
    let before = group_norm(&model, ParamGroup::Backbone);
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Pretrain, None, None)
        .unwrap();
    for r in out.records.iter().step_by(10) {
        println!("  {}", r.line());
    }
    println!(
        "  backbone norm {:.4} -> {:.4}",
        before,
        group_norm(&model, ParamGroup::Backbone)
    );

    println!("\nphase 2: customization (adapters + in-context extras; backbone frozen)");
    model.attach_lora(&mut splitter.rng("lora", 0)).unwrap();
    let report = trainable_param_report(&model, TrainStage::Stage1.trainable_groups());
    println!("{report}");
    let frozen = group_norm(&model, ParamGroup::Backbone);
    let extras_before = group_norm(&model, ParamGroup::IcmaExtras);
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None)
        .unwrap();
    for r in out.records.iter().step_by(10) {
        println!("  {}", r.line());
    }
    assert_eq!(
        frozen,
        group_norm(&model, ParamGroup::Backbone),
        "stage 1 must not touch the backbone"
    );
    println!("  backbone norm unchanged at {frozen:.4}");
    println!(
        "  in-context extras norm {:.4} -> {:.4} (registers start at zero)",
        extras_before,
        group_norm(&model, ParamGroup::IcmaExtras)
    );
}
