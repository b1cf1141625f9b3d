use icx::bench::{benchmark_items_from, multiref_compare, run_benchmark, ToyProvider};
use icx::flow::{run_stage, TrainConfig, TrainStage};
use icx::forge::{generate_items, rgb_f, synthesize_multiref, MaskRules, Vocab, WorldConfig};
use icx::icma::TaskMode;
use icx::model::{Model, ModelConfig};
use icx::rng::SeedSplitter;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let mut world = WorldConfig::desk();
    world.seed = 7;
    let items = generate_items(&world, 64).unwrap();
    let vocab = Vocab::from_world(&world);
    let model_cfg = ModelConfig::desk(vocab.len());
    let splitter = SeedSplitter::new(42);
    let mut model = Model::new(&model_cfg, &mut splitter.rng("model.init", 0)).unwrap();
    let untrained = Model::new(&model_cfg, &mut splitter.rng("model.init", 0)).unwrap();
    let palette = world.palette.iter().map(|(n, c)| (n.clone(), rgb_f(*c))).collect();
    let provider = ToyProvider::new(palette);

    let mut cfg = TrainConfig::desk(42);
    cfg.steps = 400;
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Pretrain, None, None).unwrap();
    println!("pretrain 400 steps in {:.1}s, final loss {:.4}", t0.elapsed().as_secs_f64(), out.records.last().unwrap().loss);

    let t1 = Instant::now();
    model.attach_lora(&mut splitter.rng("lora.init", 0)).unwrap();
    cfg.steps = 2000;
    let out = run_stage(&mut model, &items, &vocab, &cfg, TrainStage::Stage1, None, None).unwrap();
    println!("stage1 2000 steps in {:.1}s, final loss {:.4}", t1.elapsed().as_secs_f64(), out.records.last().unwrap().loss);
    for r in out.records.iter().step_by(250) { println!("  {}", r.line()); }

    let t2 = Instant::now();
    let bench = benchmark_items_from(&items, &MaskRules::conservative(), 1, &splitter).unwrap();
    let report = run_benchmark(&model, &vocab, &bench, &TaskMode::ALL, &provider, 9, 16).unwrap();
    let base = run_benchmark(&untrained, &vocab, &bench, &TaskMode::ALL, &provider, 9, 16).unwrap();
    for m in TaskMode::ALL {
        let t = report.mode_mean(m); let u = base.mode_mean(m);
        println!("mode {:<13} trained {:?} untrained {:?}", m.name(), t, u);
    }
    println!("bench in {:.1}s", t2.elapsed().as_secs_f64());

    let t3 = Instant::now();
    let (synth, log) = synthesize_multiref(&model, &items, &world, &vocab, &provider, 0.2, 16, &splitter).unwrap();
    println!("synth kept {}/{} in {:.1}s", synth.len(), items.len(), t3.elapsed().as_secs_f64());
    for l in log.iter().take(4) { println!("  {l}"); }
    let mut merged = items.clone();
    merged.extend(synth);

    let t4 = Instant::now();
    let ckpt = std::env::temp_dir().join("zz_exp_stage1.icx");
    model.save(&ckpt, &[]).unwrap();
    let (mut s2model, _) = Model::load(&ckpt).unwrap();
    cfg.steps = 800;
    let _ = run_stage(&mut s2model, &merged, &vocab, &cfg, TrainStage::Stage2, None, None).unwrap();
    println!("stage2 800 steps in {:.1}s", t4.elapsed().as_secs_f64());
    let cmp = multiref_compare(&model, &s2model, ("stage1", "stage2"), &merged, &vocab, &[3], &provider, 9, 16).unwrap();
    print!("{}", cmp.text());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
