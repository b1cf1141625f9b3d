use icx::bench::{cosine, toy_embed, ToyProvider, EmbedProvider};
use icx::flow::{euler_sample, make_mask, SampleRequest};
use icx::forge::{generate_items, rgb_f, MaskRules, Vocab, WorldConfig};
use icx::geometry::assemble_polyptych;
use icx::icma::TaskMode;
use icx::image::Image;
use icx::model::Model;
use icx::rng::SeedSplitter;

fn ascii(img: &Image, palette: &[(String, [f64; 3])]) -> String {
    let mut s = String::new();
    for y in 0..img.h {
        for x in 0..img.w {
            let px: Vec<f64> = (0..img.c).map(|c| img.data[(y * img.w + x) * img.c + c]).collect();
            let (mut best, mut bd) = ('?', f64::MAX);
            for (name, c) in palette {
                let d: f64 = px.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                if d < bd { bd = d; best = name.chars().next().unwrap(); }
            }
            // grayish background
            let gray: f64 = px.iter().map(|v| (v - 0.5).powi(2)).sum();
            let dark: f64 = px.iter().map(|v| (v - 0.15).powi(2)).sum();
            let white: f64 = px.iter().map(|v| (v - 0.95).powi(2)).sum();
            if gray.min(dark).min(white) < bd { best = '.'; }
            s.push(best);
        }
        s.push('\n');
    }
    s
}

fn main() {
    let mut world = WorldConfig::desk();
    world.seed = 7;
    let items = generate_items(&world, 64).unwrap();
    let vocab = Vocab::from_world(&world);
    let palette: Vec<(String, [f64; 3])> =
        world.palette.iter().map(|(n, c)| (n.clone(), rgb_f(*c))).collect();
    let provider = ToyProvider::new(palette.clone());
    let (model, _) = Model::load(std::env::temp_dir().join("zz_exp_stage1.icx").as_path()).unwrap();

    let item = &items[0];
    let refs: Vec<&Image> = item.reference_scenes().map(|s| &s.image).take(1).collect();
    let t_scene = item.target_scene();
    println!("item 0: {} {} / target caption {:?}", item.color, item.shape.name(), t_scene.caption);
    println!("ceiling cos(target, ref) = {:.4}",
        cosine(&toy_embed(&t_scene.image), &toy_embed(refs[0])));

    let (_, layout) = assemble_polyptych(&refs, &t_scene.image, 2).unwrap();
    let splitter = SeedSplitter::new(77);
    for mode in [TaskMode::PositionAwarePrecise, TaskMode::PositionFree] {
        for steps in [8usize, 16, 32, 64] {
            let mut rng = splitter.rng("mask", 0);
            let mask = match mode {
                TaskMode::PositionFree => make_mask(mode, &layout, None, &MaskRules::conservative(), &mut rng).unwrap(),
                _ => make_mask(mode, &layout, Some(&t_scene.silhouette), &MaskRules::conservative(), &mut rng).unwrap(),
            };
            let req = SampleRequest {
                refs: refs.clone(),
                target_context: matches!(mode, TaskMode::PositionAwarePrecise).then_some(&t_scene.image),
                mask,
                text_ids: vocab.encode(&format!("[REF-SCENE] {} [TARGET-SCENE] {}", refs_caption(item), t_scene.caption)).unwrap(),
                mode,
                steps,
                seed: 5,
            };
            let (_, out) = euler_sample(&model, &req).unwrap();
            let mut clamped = out.clone();
            for v in clamped.data.iter_mut() { *v = v.clamp(0.0, 1.0); }
            let e = toy_embed(&clamped);
            let id = cosine(&e, &toy_embed(refs[0]));
            let (lo, hi) = out.data.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let txt = provider.text_score(&clamped, &t_scene.caption).unwrap();
            println!("mode {:<13} steps {:>2}: identity {:.4} text {:.4} range [{:.2}, {:.2}]",
                mode.name(), steps, id, txt, lo, hi);
            if steps == 32 { print!("{}", ascii(&clamped, &palette)); }
        }
    }
    bench_rows(&model, &items, &vocab, &provider);
}

fn bench_rows(model: &Model, items: &[icx::forge::Item], vocab: &Vocab, provider: &ToyProvider) {
    use icx::bench::{benchmark_items_from, run_benchmark};
    let splitter = SeedSplitter::new(42);
    let bench = benchmark_items_from(&items[..16], &MaskRules::conservative(), 1, &splitter).unwrap();
    let report = run_benchmark(model, vocab, &bench, &TaskMode::ALL, provider, 9, 16).unwrap();
    let mut hist = [0usize; 10];
    for row in &report.rows {
        if let Some((id, _)) = row.scores {
            hist[(id.clamp(0.0, 0.999) * 10.0) as usize] += 1;
        }
    }
    println!("identity histogram (0.0-1.0 in tenths): {hist:?}");
    for row in report.rows.iter().take(24) {
        println!("item={} mode={:<13} rigid={} scores={:?}", row.item, row.mode.name(), row.rigid, row.scores);
    }
}

fn refs_caption(item: &icx::forge::Item) -> String {
    item.reference_scenes().map(|s| s.caption.clone()).collect::<Vec<_>>().join(" ")
}
