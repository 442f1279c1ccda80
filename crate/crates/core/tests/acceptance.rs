//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use nametune::baselines::{linear_probe_fit, support_by_class, vl_prototype_build};
use nametune::checkpoint::{decode_checkpoint, encode_checkpoint};
use nametune::classify::{predict, tuned_head, zero_shot_head, PromptSpec, Scorer};
use nametune::encoder::{read_feature_cache, write_feature_cache, BuiltinEncoder, FeatureCache, FrozenDualEncoder};
use nametune::io::config::RunConfigFile;
use nametune::io::manifest::{load_manifest, parse_manifest, write_manifest};
use nametune::lbfgs::LbfgsOptions;
use nametune::protocol::{
    evaluate, run_protocol, sample_episode, DatasetSplit, Item, Paradigm, Phase, ProtocolConfig, ProtocolMethod,
    Stage,
};
use nametune::rng::SeededRng;
use nametune::textparams::{init_parameters, Method, TextParameterSet};
use nametune::toy::{generate_toy, ToyConfig};
use nametune::train::{fit_to_convergence, gradients, loss, train_run, CheckpointPolicy, Example, TrainConfig};
use ndarray::Array1;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

fn examples(items: &[Item]) -> Vec<Example> {
    items.iter().map(|i| Example::new(i.embedding.clone(), i.label)).collect()
}

fn offset_norm(p: &TextParameterSet) -> f64 {
    p.offsets().unwrap().iter().flat_map(|e| e.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

fn toy_queries(enc: &BuiltinEncoder, seed: u64, per_class: usize) -> Vec<Example> {
    let cfg = ToyConfig {
        seed,
        items_per_class: per_class,
        ..Default::default()
    };
    generate_toy(enc, &cfg)
        .unwrap()
        .videos
        .into_iter()
        .map(|v| Example::new(v.embedding, v.class_id))
        .collect()
}

fn zero_init_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for enc in [transformer(), linear()] {
        let classes = toy_classes(&enc, 5);
        let p = prompt(&enc);
        let params = init_parameters(Method::NameTuning, &classes, 0, Some(&p), &SeededRng::new(3), false).unwrap();
        let tuned = tuned_head(&enc, &params, &classes).unwrap();
        let zs = zero_shot_head(&enc, &p, &classes).unwrap();
        let mut rng = SeededRng::new(101);
        for _ in 0..100 {
            let v = random_vector(&mut rng, enc.space().d_embed, 1.0);
            let a = tuned.probabilities(v.view()).unwrap();
            let b = zs.probabilities(v.view()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
            count += 1;
        }
    }
    ensure!(worst <= 1e-6, "max probability gap {worst:e}");
    Ok(format!("{count} inputs, max gap {worst:e}"))
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut zero = 0;
    for (name, enc) in [("toy-transformer", transformer()), ("linear", linear())] {
        let classes = toy_classes(&enc, 3);
        let mut rng = SeededRng::new(202);
        for method in METHODS {
            for draw in 0..20 {
                let l = if method == Method::NameTuning { 0 } else { 2 };
                let params = random_params(method, &enc, &classes, l, &mut rng, 0.2);
                let batch = random_batch(&mut rng, 4, enc.space().d_embed, 3);
                let alpha = rng.uniform();
                let analytic: Vec<f64> = gradients(&params, &batch, &enc, &classes, alpha)
                    .unwrap()
                    .iter()
                    .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
                    .collect();
                let numeric = finite_difference_gradient(&params, &batch, &enc, &classes, alpha);
                let err = relative_error(&analytic, &numeric);
                ensure!(err < 1e-4, "{name} {method} draw {draw}: relative error {err:e}");
                if analytic.iter().map(|g| g * g).sum::<f64>().sqrt() < GRADIENT_NORM_FLOOR {
                    zero += 1;
                }
                worst = worst.max(err);
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} draws ({zero} with an exactly-zero gradient), max relative error {worst:e}"))
}

fn objective_oracle() -> Outcome {
    let encoders = [transformer(), linear(), linear_cosine()];
    let mut rng = SeededRng::new(303);
    let (mut worst_p, mut worst_l) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let enc = &encoders[i % encoders.len()];
        let method = METHODS[rng.below(4) as usize];
        let n = 2 + rng.below(3) as usize;
        let classes = toy_classes(enc, n);
        let l = if method == Method::NameTuning { 0 } else { 1 + rng.below(3) as usize };
        let params = random_params(method, enc, &classes, l, &mut rng, 0.3);
        let size = 1 + rng.below(4) as usize;
        let batch = random_batch(&mut rng, size, enc.space().d_embed, n);
        let alpha = rng.uniform() * 2.0;

        let head = tuned_head(enc, &params, &classes).unwrap();
        let text = class_text(&params, enc, &classes);
        let space = enc.space();
        for ex in &batch {
            let got = head.probabilities(ex.embedding.view()).unwrap();
            let want = oracle_probabilities(&text, ex.embedding.as_slice().unwrap(), space.similarity, space.temperature);
            for (a, b) in got.iter().zip(&want) {
                worst_p = worst_p.max((a - b).abs());
            }
        }
        let got = loss(&params, &batch, enc, &classes, alpha).unwrap();
        let want = oracle_loss(&params, &batch, enc, &classes, alpha);
        worst_l = worst_l.max((got - want).abs() / want.abs().max(1.0));
    }
    ensure!(worst_p <= 1e-6 && worst_l <= 1e-6, "probability gap {worst_p:e}, loss gap {worst_l:e}");
    Ok(format!("200 instances, probability gap {worst_p:e}, loss gap {worst_l:e}"))
}

fn regularization_path() -> Outcome {
    let enc = linear();
    let data = generate_toy(
        &enc,
        &ToyConfig {
            items_per_class: 25,
            ..Default::default()
        },
    )
    .unwrap();
    let classes = class_set(&enc, &data.class_names);
    // videos are class-major: the first five of each class are the support set
    let (support, queries): (Vec<_>, Vec<_>) = data
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (i % 25, Example::new(v.embedding.clone(), v.class_id)))
        .partition(|(j, _)| *j < 5);
    let support: Vec<Example> = support.into_iter().map(|(_, e)| e).collect();
    let queries: Vec<Example> = queries.into_iter().map(|(_, e)| e).collect();
    ensure!(support.len() == 25 && queries.len() == 100, "split sizes {} / {}", support.len(), queries.len());

    let p = prompt(&enc);
    let init = init_parameters(Method::NameTuning, &classes, 0, Some(&p), &SeededRng::new(0), false).unwrap();
    let opts = LbfgsOptions {
        history: 10,
        max_iterations: 20_000,
        gradient_tolerance: 1e-7,
    };
    let mut norms = Vec::new();
    for alpha in [0.01, 0.1, 1.0, 10.0] {
        let (fit, report) = fit_to_convergence(&init, &support, &enc, &classes, alpha, &opts).unwrap();
        ensure!(report.converged, "α={alpha} did not converge: {report:?}");
        norms.push(offset_norm(&fit));
    }
    ensure!(norms.windows(2).all(|w| w[1] <= w[0]), "norms not non-increasing: {norms:?}");

    let (fit, report) = fit_to_convergence(&init, &support, &enc, &classes, 1e6, &opts).unwrap();
    ensure!(report.converged, "α=1e6 did not converge: {report:?}");
    let big = offset_norm(&fit);
    ensure!(big < 1e-3, "‖ε‖ = {big:e} at α=1e6");
    let tuned = tuned_head(&enc, &fit, &classes).unwrap();
    let zs = zero_shot_head(&enc, &p, &classes).unwrap();
    for q in &queries {
        ensure!(
            predict(q.embedding.view(), &tuned).unwrap() == predict(q.embedding.view(), &zs).unwrap(),
            "prediction differs from zero-shot"
        );
    }
    Ok(format!("‖ε‖ over α {{0.01,0.1,1,10}} = {norms:.4?}; α=1e6 gives {big:.2e}, 100/100 predictions match"))
}

fn cona_reduction() -> Outcome {
    let fx = bundled_toy();
    let DatasetSplit::Traditional { train, .. } = &fx.split else { unreachable!() };
    let train = examples(train);
    for seed in [0, 5, 11] {
        let mut nt = TrainConfig::defaults(Method::NameTuning);
        nt.prompt_template = "{}".into();
        nt.learning_rate = 4e-3;
        nt.alpha = 0.1;
        nt.epochs = 10;
        nt.seed = seed;
        nt.checkpoint_policy = CheckpointPolicy::FinalEpoch;
        let mut cona = nt.clone();
        cona.method = Method::Cona;
        cona.l_context = 0;
        let a = train_run(&train, None, &nt, &fx.enc, &fx.classes).unwrap();
        let b = train_run(&train, None, &cona, &fx.enc, &fx.classes).unwrap();
        let la: Vec<u64> = a.history.losses().iter().map(|v| v.to_bits()).collect();
        let lb: Vec<u64> = b.history.losses().iter().map(|v| v.to_bits()).collect();
        ensure!(la == lb, "seed {seed}: loss curves differ");
        ensure!(a.final_params.offsets() == b.final_params.offsets(), "seed {seed}: offsets differ");
    }
    Ok("3 seeds × 10 epochs, loss curves bit-identical".into())
}

fn toy_efficacy() -> Outcome {
    let fx = bundled_toy();
    let DatasetSplit::Traditional { test, .. } = &fx.split else { unreachable!() };
    let zs = evaluate(&zero_shot_head(&fx.enc, &prompt(&fx.enc), &fx.classes).unwrap(), &examples(test)).unwrap();
    ensure!(zs <= 0.6, "zero-shot accuracy {zs}");
    let run = RunConfigFile::load(&toy_dir().join("name_tuning.toml")).unwrap();
    let cfg = run.protocol;
    ensure!(cfg.train.epochs <= 20 && cfg.k_shot == Some(5) && cfg.n_way == 5, "config is not 5-way 5-shot, ≤20 epochs");
    let out = run_protocol(&fx.split, &cfg, &fx.enc, &fx.classes).unwrap();
    let min = out.record.per_seed.iter().map(|s| s.accuracy).fold(f64::INFINITY, f64::min);
    ensure!(min >= 0.95, "per-seed accuracies {:?}", out.record.per_seed);
    Ok(format!(
        "zero-shot {:.1}%, name tuning {:.1}% ± {:.1} (min {:.1}%) over {} seeds",
        zs * 100.0,
        out.record.mean * 100.0,
        out.record.std * 100.0,
        min * 100.0,
        out.record.seeds.len()
    ))
}

fn protocol_integrity() -> Outcome {
    let fx = bundled_toy();
    let pool = fx.split.phase_classes(Phase::MetaTest);
    let mut rng = SeededRng::new(707);
    for i in 0..1000 {
        let n = 1 + rng.below(5) as usize;
        let k = 1 + rng.below(8) as usize;
        let ep = sample_episode(&fx.split, Phase::MetaTest, n, k, None, &mut rng).unwrap();
        if let Some(v) = episode_violation(&ep, &pool, n, k) {
            return Err(format!("traditional episode {i}: {v}"));
        }
    }
    let enc = transformer();
    let (meta, classes) = meta_toy(&enc, 24, 12);
    let pool = meta.phase_classes(Phase::MetaTest);
    for i in 0..1000 {
        let n = 1 + rng.below(8) as usize;
        let k = 1 + rng.below(6) as usize;
        let ep = sample_episode(&meta, Phase::MetaTest, n, k, Some(4), &mut rng).unwrap();
        if let Some(v) = episode_violation(&ep, &pool, n, k) {
            return Err(format!("meta episode {i}: {v}"));
        }
    }

    let val_classes: BTreeSet<usize> = meta.phase_classes(Phase::MetaVal).into_iter().collect();
    let test_classes: BTreeSet<usize> = pool.iter().copied().collect();
    let mut cfg = ProtocolConfig::new(Paradigm::MetaLearning, ProtocolMethod::Tune(Method::NameTuning));
    cfg.seeds = vec![0, 1, 2];
    cfg.validation_episodes = 2;
    cfg.train.epochs = 2;
    cfg.grid.learning_rates = vec![4e-3];
    cfg.grid.alphas = vec![0.1, 1.0];
    let out = run_protocol(&meta, &cfg, &enc, &classes).unwrap();
    let t = &out.trace;
    let sel = &t.trained_classes[&Stage::Selection];
    let eval = &t.trained_classes[&Stage::Evaluation];
    ensure!(sel.is_subset(&val_classes), "selection trained on {sel:?}");
    ensure!(eval.is_subset(&test_classes), "evaluation trained on {eval:?}");
    ensure!(sel.is_disjoint(eval), "selection and evaluation share classes");
    let meta_record = out.record;

    let mut worst = 0.0f64;
    let mut probe = ProtocolConfig::new(Paradigm::Traditional, ProtocolMethod::LinearProbe);
    probe.k_shot = Some(2);
    probe.seeds = vec![9, 4, 1, 7, 3];
    probe.lambda_grid = vec![1e-2, 1.0];
    let mut proto = ProtocolConfig::new(Paradigm::MetaLearning, ProtocolMethod::VlPrototype);
    proto.seeds = (0..6).collect();
    proto.text_weight_grid = vec![0.1, 1.0];
    let records = [
        meta_record,
        run_protocol(&fx.split, &probe, &fx.enc, &fx.classes).unwrap().record,
        run_protocol(&meta, &proto, &enc, &classes).unwrap().record,
    ];
    for r in &records {
        let accs: Vec<f64> = r.per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = hand_mean_std(&accs);
        worst = worst.max((r.mean - mean).abs()).max((r.std - std).abs());
    }
    ensure!(worst <= 1e-9, "aggregate gap {worst:e}");
    Ok(format!("2000 episodes valid, no class leakage, aggregate gap {worst:e}"))
}

fn nametune(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nametune")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn run_files(dir: &Path) -> Vec<(String, String)> {
    let mut files = vec![("run_record.json".to_string(), sha256_file(&dir.join("run_record.json")))];
    if let Ok(entries) = std::fs::read_dir(dir.join("checkpoints")) {
        let mut names: Vec<_> = entries.map(|e| e.unwrap().path()).collect();
        names.sort();
        files.extend(names.iter().map(|p| (p.display().to_string().replace(&dir.display().to_string(), ""), sha256_file(p))));
    }
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for (cmd, cfg) in [("tune", "name_tuning.toml"), ("baseline", "linear_probe.toml")] {
        let cfg = toy_dir().join(cfg);
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        for out in [&a, &b] {
            nametune(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
        }
        let (fa, fb) = (run_files(&a), run_files(&b));
        ensure!(fa == fb, "{cmd}: outputs differ");
        ensure!(
            std::fs::read(a.join("run_record.json")).unwrap() == std::fs::read(b.join("run_record.json")).unwrap(),
            "{cmd}: run records differ"
        );
        compared += fa.len();
    }
    Ok(format!("{compared} files byte-identical across repeated tune and baseline runs"))
}

fn format_round_trips() -> Outcome {
    let dir = toy_dir();
    let bytes = std::fs::read(dir.join("features.ntfc")).unwrap();
    let cache = read_feature_cache(&bytes).unwrap();
    ensure!(write_feature_cache(&cache) == bytes, "feature cache rewrite differs");
    let tmp = tempfile::tempdir().unwrap();
    cache.save(&tmp.path().join("c.ntfc")).unwrap();
    ensure!(FeatureCache::load(&tmp.path().join("c.ntfc")).unwrap() == cache, "feature cache reload differs");
    ensure!(sha256_file(&tmp.path().join("c.ntfc")) == sha256_file(&dir.join("features.ntfc")), "feature cache digest differs");

    let enc = transformer();
    let classes = toy_classes(&enc, 5);
    let mut rng = SeededRng::new(909);
    for method in METHODS {
        let l = if method == Method::NameTuning { 0 } else { 4 };
        let mut params = random_params(method, &enc, &classes, l, &mut rng, 0.1);
        let rounded: Vec<f64> = params.flatten().iter().map(|v| *v as f32 as f64).collect();
        params.set_flat(&rounded).unwrap();
        let bytes = encode_checkpoint(&params, 3, 17);
        let fixed = (method == Method::NameTuning).then(|| prompt(&enc));
        let back = decode_checkpoint(&bytes, fixed).unwrap();
        ensure!(back.params == params, "{method}: checkpoint parameters differ");
        ensure!(encode_checkpoint(&back.params, back.epoch, back.seed) == bytes, "{method}: checkpoint rewrite differs");
    }

    let text = std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    let m = parse_manifest(&text).unwrap();
    ensure!(write_manifest(&m.rows) == text, "manifest rewrite differs");
    ensure!(load_manifest(&dir.join("manifest.jsonl")).unwrap() == m, "manifest reload differs");
    Ok("feature cache, 4 checkpoint kinds and manifest rewrite to identical bytes".into())
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    dot / (aa.sqrt() * bb.sqrt())
}

fn baseline_limits() -> Outcome {
    let fx = bundled_toy();
    let DatasetSplit::Traditional { train, .. } = &fx.split else { unreachable!() };
    let mut rng = SeededRng::new(1010);
    let mut support = examples(train);
    rng.shuffle(&mut support);
    let mut per_class = [0usize; 5];
    support.retain(|e| {
        per_class[e.label] += 1;
        per_class[e.label] <= 5
    });
    let queries = toy_queries(&fx.enc, 77, 20);
    ensure!(queries.len() == 100, "{} queries", queries.len());

    let zs = zero_shot_head(&fx.enc, &PromptSpec::new(&TrainConfig::defaults(Method::NameTuning).prompt_template, &fx.enc).unwrap(), &fx.classes).unwrap();
    let grouped = support_by_class(&support, 5).unwrap();
    let text_heavy = vl_prototype_build(&zs, &grouped, 1e9).unwrap();
    let visual_heavy = vl_prototype_build(&zs, &grouped, 1e-9).unwrap();

    let cosine_space = fx.enc.space().similarity == nametune::space::Similarity::Cosine;
    let means: Vec<Array1<f64>> = grouped
        .iter()
        .map(|items| {
            let mut m = Array1::zeros(items[0].len());
            for v in items {
                if cosine_space {
                    m += &(v / v.dot(v).sqrt());
                } else {
                    m += v;
                }
            }
            m / items.len() as f64
        })
        .collect();
    let mut nearest_agree = 0;
    for q in &queries {
        ensure!(
            text_heavy.predict(q.embedding.view()).unwrap() == predict(q.embedding.view(), &zs).unwrap(),
            "w_t=1e9 disagrees with zero-shot"
        );
        let scores: Vec<f64> = means
            .iter()
            .map(|m| if cosine_space { cosine(m, &q.embedding) } else { m.dot(&q.embedding) })
            .collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        ensure!(visual_heavy.predict(q.embedding.view()).unwrap() == best, "w_t=1e-9 disagrees with nearest support mean");
        nearest_agree += 1;
    }

    let probe = linear_probe_fit(&support, 5, 1e6).unwrap();
    let norm = probe.weight_norm();
    ensure!(norm < 1e-2, "‖W‖ = {norm:e} at λ=1e6");
    Ok(format!("{nearest_agree}/100 queries match both limits, probe ‖W‖ = {norm:.2e}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("zero-init equivalence", zero_init_equivalence),
        ("gradient correctness", gradient_correctness),
        ("classifier and objective oracle", objective_oracle),
        ("convex regularization path", regularization_path),
        ("cona reduction", cona_reduction),
        ("toy efficacy", toy_efficacy),
        ("protocol integrity", protocol_integrity),
        ("determinism", determinism),
        ("format round-trips", format_round_trips),
        ("baseline limits", baseline_limits),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
