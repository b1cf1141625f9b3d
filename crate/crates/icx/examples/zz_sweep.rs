use icx::bench::{benchmark_items_from, run_benchmark, ToyProvider};
use icx::flow::{run_stage, TrainConfig, TrainStage, TSchedule};
use icx::forge::{generate_items, rgb_f, MaskRules, Vocab, WorldConfig};
use icx::icma::TaskMode;
use icx::model::{Model, ModelConfig};
use icx::rng::SeedSplitter;
use std::time::Instant;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let pre_steps: usize = env("PRE_STEPS", 400);
    let s1_steps: usize = env("S1_STEPS", 1000);
    let batch: usize = env("BATCH", 8);
    let lr: f64 = env("LR", 2e-3);
    let target_only: bool = env("TARGET_ONLY", 0u8) == 1;
    let logit_t: bool = env("LOGIT_T", 0u8) == 1;
    let pdrop: f64 = env("PDROP", 0.3);
    println!("variant pre={pre_steps} s1={s1_steps} batch={batch} lr={lr} target_only={target_only} logit_t={logit_t} pdrop={pdrop}");

    let mut world = WorldConfig::desk();
    world.seed = 7;
    let items = generate_items(&world, 64).unwrap();
    let vocab = Vocab::from_world(&world);
    let model_cfg = ModelConfig::desk(vocab.len());
    let splitter = SeedSplitter::new(42);
    let mut model = Model::new(&model_cfg, &mut splitter.rng("model.init", 0)).unwrap();
    let palette = world.palette.iter().map(|(n, c)| (n.clone(), rgb_f(*c))).collect();
    let provider = ToyProvider::new(palette);
    let bench = benchmark_items_from(&items[..16], &MaskRules::conservative(), 1, &splitter).unwrap();
    let score = |model: &Model, label: &str| {
        let r = run_benchmark(model, &vocab, &bench, &TaskMode::ALL, &provider, 9, 16).unwrap();
        for m in TaskMode::ALL {
            let (i, t, n) = r.mode_mean(m).unwrap();
            println!("{label} mode {:<13} identity={i:.4} text={t:.4} n={n}", m.name());
        }
    };

    let mut cfg = TrainConfig::desk(42);
    cfg.batch_size = batch;
    cfg.lr = lr;
    cfg.prompt_drop = pdrop;
    cfg.loss_target_only = target_only;
    if logit_t {
        cfg.t_schedule = TSchedule::LogitNormal { mean: 0.0, std: 1.0 };
    }

    let t0 = Instant::now();
    cfg.steps = pre_steps;
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Pretrain, None, None).unwrap();
    println!("pretrain {pre_steps} in {:.1}s final loss {:.4}", t0.elapsed().as_secs_f64(), out.records.last().unwrap().loss);
    score(&model, "after-pretrain");

    let t1 = Instant::now();
    model.attach_lora(&mut splitter.rng("lora.init", 0)).unwrap();
    cfg.steps = s1_steps;
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
    println!("stage1 {s1_steps} in {:.1}s final loss {:.4}", t1.elapsed().as_secs_f64(), out.records.last().unwrap().loss);
    score(&model, "after-stage1");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
