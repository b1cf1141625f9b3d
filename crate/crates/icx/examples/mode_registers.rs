//! What the task mode actually changes inside attention.
//!
//!     cargo run --example mode_registers
//!
//! The mode never reaches the pixels directly: it selects one of three
//! register banks whose rows join the sequence. The banks start at zero
//! and single-panel pretraining never trains them, so all modes agree
//! until the customization phase gives the banks distinct values.

use icx::flow::{run_stage, TrainConfig, TrainStage};
use icx::forge::{generate_items, Vocab, WorldConfig};
use icx::icma::{attention_row_counts, RegisterBank, TaskMode, REGISTER_TOKENS};
use icx::image::Image;
use icx::model::{Model, ModelConfig};
use icx::rng::SeedSplitter;

fn main() {
    println!("task modes and their register banks:");
    for m in TaskMode::ALL {
        println!(
            "  index {} name {:<13} round trip {:?}",
            m.index(),
            m.name(),
            TaskMode::from_name(m.name())
        );
    }
    let bank = RegisterBank::zeros(16);
    println!(
        "\neach bank holds {REGISTER_TOKENS} rows of the model width ({} banks, zero-initialized)",
        bank.tensors().len()
    );
    let (q_rows, kv_rows, out_rows) = attention_row_counts(18, 5);
    println!(
        "attention over 18 visual + 5 text tokens: {q_rows} query rows, {kv_rows} key/value rows (registers extend K and V only), {out_rows} outputs"
    );

    let mut world = WorldConfig::desk();
    world.seed = 11;
    let items = generate_items(&world, 8).unwrap();
    let vocab = Vocab::from_world(&world);
    let splitter = SeedSplitter::new(8);
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        double_blocks: 1,
        single_blocks: 1,
        lora_rank: 0,
        lora_double_prefix: 0,
        lora_single_prefix: 0,
        ..ModelConfig::desk(vocab.len())
    };
    let mut model = Model::new(&cfg, &mut splitter.rng("init", 0)).unwrap();

    // Probe input: a one-reference canvas with everything visible.
    let reference = Image::filled(4, 4, &[0.5, 0.5, 0.5]);
    let target = Image::filled(4, 4, &[0.1, 0.1, 0.1]);
    let (canvas, layout) =
        icx::geometry::assemble_polyptych(&[&reference], &target, 2).unwrap();
    let mask = Image::filled(4, 8, &[1.0]);
    let input = icx::flow::build_model_input(&canvas, &canvas, &mask, &layout, 2).unwrap();
    let text = vec![0usize, 1, 2];
    let probe = |model: &Model| -> Vec<Vec<f64>> {
        TaskMode::ALL
            .iter()
            .map(|&m| model.forward(&input, &text, 0.5, m).unwrap().data())
            .collect()
    };

    // Output projections start gated to zero, so a fresh model predicts
    // exactly zero velocity everywhere. That zero is what makes early
    // training losses analytically checkable.
    let fresh = probe(&model);
    assert!(fresh.iter().all(|o| o.iter().all(|&v| v == 0.0)));
    println!("\nfresh model: output is exactly zero (gates closed)");

    // Pretraining opens the gates but never touches the banks: the
    // modes still agree bit for bit.
    let mut tc = TrainConfig::desk(42);
    tc.steps = 20;
    tc.batch_size = 2;
    run_stage(&mut model, &items, &vocab, &tc, TrainStage::Pretrain, None, None).unwrap();
    let pre = probe(&model);
    assert!(pre[0].iter().any(|&v| v != 0.0), "training opened the gates");
    assert_eq!(pre[0], pre[1]);
    assert_eq!(pre[1], pre[2]);
    println!("after pretraining: nonzero output, but all modes still identical");

    // Give one bank a value by hand and only its mode separates; this
    // is the lever the customization stages actually train.
    let bank = model.doubles[0].registers.select(TaskMode::PositionFree);
    let mut data = bank.data();
    for v in &mut data {
        *v = 0.05;
    }
    bank.set_data(data);
    let after = probe(&model);
    assert_eq!(after[0], after[1], "untouched banks still agree");
    assert_ne!(after[1], after[2], "the nudged bank changes its mode only");
    let diff: f64 = after[1]
        .iter()
        .zip(&after[2])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("after nudging the position-free bank: that mode diverges (max delta {diff:.2e})");
}
