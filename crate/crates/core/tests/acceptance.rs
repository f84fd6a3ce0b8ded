//! Acceptance run: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the report is always printed. Failed criteria turn into
//! a non-zero exit only with `ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck::{self, ALIGN, CONCEPT, TASK, TOL};
use common::oracle;
use sscbm::alignment::{concept_heatmaps, pool_scores};
use sscbm::dataset::{
    generate_synthetic, split_semi, train_test_split, Dataset, Example, SemiSplit, SplitSpec, SyntheticDataset,
    SyntheticSpec,
};
use sscbm::encoder::{mix_embedding, HeatmapEmbedding, Model, SpatialFeatureMap, Variant};
use sscbm::pseudolabel::{build_pseudo_labels, pseudo_label_split, PseudoLabel, ReferenceFeature};
use sscbm::serving::cli;
use sscbm::training::{
    evaluate, intervene_output, intervention_sweep, ratio_range, saliency_localization, train, Ablation,
    InterventionMode, SelectionOrder, TermWeights, TrainConfig,
};

/// Epoch budget for every synthetic run.
const EPOCHS: usize = 60;
const N_EXAMPLES: usize = 2500;
const TEST_FRACTION: f64 = 0.2;
const LABEL_RATIO: f64 = 0.1;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        let line = format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((ok, line));
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_knn_instance(
    rng: &mut ChaCha8Rng,
    k_nn: usize,
) -> (Vec<(ReferenceFeature, Vec<u8>)>, Vec<ReferenceFeature>) {
    let d = rng.random_range(2..16);
    let k = rng.random_range(1..12);
    let n_l = rng.random_range(k_nn..k_nn + 25);
    let n_u = rng.random_range(1..12);
    let mut labeled: Vec<(ReferenceFeature, Vec<u8>)> = Vec::with_capacity(n_l);
    for i in 0..n_l {
        // occasional exact duplicates and positive rescalings force ties
        let vec = if i > 0 && rng.random_bool(0.15) {
            let j = rng.random_range(0..i);
            let s = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
            labeled[j].0.vec.iter().map(|x| x * s).collect()
        } else {
            oracle::uniform_vec(rng, d)
        };
        labeled.push((ReferenceFeature { id: format!("L{:03}", rng.random_range(0..1000)) + &format!("_{i}"), vec }, oracle::bits(rng, k)));
    }
    let unlabeled = (0..n_u)
        .map(|i| {
            let vec = if rng.random_bool(0.1) {
                labeled[rng.random_range(0..n_l)].0.vec.clone()
            } else {
                oracle::uniform_vec(rng, d)
            };
            ReferenceFeature { id: format!("U{i}"), vec }
        })
        .collect();
    (labeled, unlabeled)
}

fn oracle_equivalence(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut instances, mut mismatches) = (0, 0);
    for t in 0..1000 {
        let k_nn = [1, 2, 5][t % 3];
        let (labeled, unlabeled) = random_knn_instance(&mut rng, k_nn);
        let got = build_pseudo_labels(&labeled, &unlabeled, k_nn).unwrap();
        let brute: Vec<(String, Vec<f64>, Vec<u8>)> =
            labeled.iter().map(|(f, c)| (f.id.clone(), f.vec.clone(), c.clone())).collect();
        let ok = unlabeled.iter().all(|u| {
            let (ids, weights, c) = oracle::knn(&u.vec, &brute, k_nn);
            let pl = &got[&u.id];
            pl.neighbor_ids == ids && pl.weights == weights && pl.c_img == c
        });
        instances += 1;
        mismatches += usize::from(!ok);
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w, m, k) = (
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..20),
            rng.random_range(1..12),
        );
        let v = oracle::uniform_vec(&mut rng, h * w * m);
        let emb: Vec<Vec<f64>> = (0..k).map(|_| oracle::uniform_vec(&mut rng, m)).collect();
        let map = SpatialFeatureMap {
            height: h,
            width: w,
            raw_channels: 0,
            raw: vec![],
            channels: m,
            projected: v.clone(),
        };
        let stack = concept_heatmaps(&map, &emb).unwrap();
        let (heat, s) = oracle::heatmap_and_pool(&v, h, w, m, &emb);
        for (a, b) in stack.values.iter().zip(&heat).chain(pool_scores(&stack).iter().zip(&s)) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    r.check(
        "oracle equivalence",
        mismatches == 0 && worst <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "KNN {}/{instances} instances exact (k_nn in 1,2,5); heatmap+pool max |diff| {worst:.2e} over 200 tensors; {}",
            instances - mismatches,
            secs(elapsed)
        ),
    );
}

fn gradient_checks(r: &mut Report) {
    let start = Instant::now();
    let full = gradcheck::settings(Ablation::Full);
    let mut results = Vec::new();
    for (label, weights, heatmap) in [
        ("task", TASK, HeatmapEmbedding::Mixed),
        ("concept", CONCEPT, HeatmapEmbedding::Mixed),
        ("align", ALIGN, HeatmapEmbedding::Mixed),
        ("align(positive)", ALIGN, HeatmapEmbedding::Positive),
        ("total", TermWeights::from_settings(&full), HeatmapEmbedding::Mixed),
    ] {
        let model = gradcheck::tiny_model(Variant::Sscbm, heatmap, 11);
        let errs = gradcheck::check(&model, &full, weights);
        results.push((label, gradcheck::worst(&errs)));
    }
    let elapsed = start.elapsed();
    let ok = results.iter().all(|(_, (_, e))| *e <= TOL) && elapsed < Duration::from_secs(120);
    let detail = results
        .iter()
        .map(|(l, (g, e))| format!("{l} {e:.1e} ({g})"))
        .collect::<Vec<_>>()
        .join(", ");
    r.check("gradient checks", ok, format!("worst group rel. err: {detail}; {}", secs(elapsed)));
}

struct Setup {
    synth: SyntheticDataset,
    train: Vec<Example>,
    test: Dataset,
}

fn setup() -> Setup {
    let synth = generate_synthetic(&SyntheticSpec {
        n_examples: N_EXAMPLES,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    let (train, test) = train_test_split(&synth.dataset.examples, TEST_FRACTION, 0).unwrap();
    let test = Dataset::new(synth.dataset.schema.clone(), synth.dataset.n_classes, test).unwrap();
    Setup { synth, train, test }
}

struct Run {
    model: Model,
    concept: f64,
    task: f64,
    elapsed: Duration,
}

fn pseudo_labels(split: &SemiSplit, cfg: &TrainConfig, shape: [usize; 3], k: usize, l: usize) -> BTreeMap<String, PseudoLabel> {
    if split.unlabeled.is_empty() {
        return BTreeMap::new();
    }
    pseudo_label_split(&cfg.reference_encoder(shape, k, l).unwrap(), split, cfg.k_nn).unwrap()
}

fn run(s: &Setup, ratio: f64, split_seed: u64, cfg: &TrainConfig) -> Run {
    let start = Instant::now();
    let split = split_semi(&s.train, &SplitSpec::ratio(ratio, split_seed)).unwrap();
    let shape = s.test.input_shape().unwrap();
    let (k, l) = (s.test.schema.k, s.test.n_classes);
    let pseudo = pseudo_labels(&split, cfg, shape, k, l);
    let mut model = Model::new(cfg.model_config(shape, k, l), cfg.seed).unwrap();
    train(&mut model, &split, &pseudo, cfg, None, |_| {}).unwrap();
    let m = evaluate(&model, &s.test).unwrap();
    Run {
        model,
        concept: m.concept_accuracy,
        task: m.task_accuracy,
        elapsed: start.elapsed(),
    }
}

fn config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        seed,
        ablation,
        ..TrainConfig::default()
    }
}

fn mixture_and_intervention(r: &mut Report, model: &Model, test: &Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut endpoints = true;
    for _ in 0..200 {
        let pos = oracle::uniform_vec(&mut rng, 16);
        let neg = oracle::uniform_vec(&mut rng, 16);
        endpoints &= mix_embedding(&pos, &neg, 1.0) == pos && mix_embedding(&pos, &neg, 0.0) == neg;
    }
    let k = model.config.k;
    let (mut identity_diff, mut hits, mut total) = (0.0f64, 0usize, 0usize);
    for ex in &test.examples {
        let truth = ex.concepts.as_deref().unwrap();
        let out = model.forward(&ex.input).unwrap();
        let empty = intervene_output(model, &out, &BTreeMap::new()).unwrap();
        identity_diff = empty
            .p_hat
            .iter()
            .zip(&out.p_hat)
            .chain(empty.logits.iter().zip(&out.logits))
            .fold(identity_diff, |m, (a, b)| m.max((a - b).abs()));
        let all: BTreeMap<usize, f64> = (0..k).map(|i| (i, f64::from(truth[i]))).collect();
        let fixed = intervene_output(model, &out, &all).unwrap();
        hits += fixed
            .p_hat
            .iter()
            .zip(truth)
            .filter(|(p, &t)| u8::from(**p >= 0.5) == t)
            .count();
        total += k;
    }
    let acc = hits as f64 / total as f64;
    r.check(
        "mixture/intervention invariants",
        endpoints && acc == 1.0 && identity_diff <= 1e-12,
        format!(
            "mix endpoints exact: {endpoints}; concept acc after full GT intervention {acc:.4}; empty intervention max |diff| {identity_diff:.1e}"
        ),
    );
}

fn determinism(r: &mut Report) {
    const CFG: &str = "n_h = 16\nm = 8\nepochs = 2\n\n[data]\nn_examples = 200\nimage_size = 16\nseed = 3\n\n[split]\nratio = 0.2\nseed = 1\n";
    let run_all = |dir: &Path| -> bool {
        let cfg = dir.join("cfg.toml");
        fs::write(&cfg, CFG).unwrap();
        let p = |x: &str| dir.join(x).to_str().unwrap().to_string();
        let c = cfg.to_str().unwrap().to_string();
        let stages: Vec<Vec<String>> = vec![
            vec!["gen-data".into(), "--config".into(), c.clone(), "--out".into(), p("data")],
            vec!["split".into(), "--config".into(), c.clone(), "--data".into(), p("data")],
            vec!["pseudo-label".into(), "--config".into(), c.clone(), "--data".into(), p("data")],
            vec!["train".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--out".into(), p("ck"), "--seed".into(), "0".into(), "--eval-each-epoch".into()],
            vec!["eval".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--checkpoint".into(), p("ck")],
            vec!["intervene-sweep".into(), "--data".into(), p("data"), "--checkpoint".into(), p("ck"), "--ratios".into(), "0.0:1.0:0.1".into()],
            vec!["export-saliency".into(), "--data".into(), p("data"), "--checkpoint".into(), p("ck"), "--png".into(), "--limit".into(), "3".into()],
            vec!["ablate".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--out".into(), p("abl"), "--epochs".into(), "1".into()],
            vec!["sweep".into(), "--config".into(), c.clone(), "--data".into(), p("data"), "--out".into(), p("sweep.csv"), "--ratios".into(), "0.2,0.4".into(), "--epochs".into(), "1".into()],
        ];
        stages.iter().all(|args| cli::run(std::iter::once("sscbm".to_string()).chain(args.iter().cloned())) == 0)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ran = run_all(a.path()) && run_all(b.path());
    let files = |root: &Path| -> BTreeMap<String, Vec<u8>> {
        walk(root)
            .into_iter()
            .filter(|p| p.file_name().unwrap() != "cfg.toml")
            .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()))
            .collect()
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    r.check(
        "CLI determinism",
        ran && fa.len() == fb.len() && differing.is_empty(),
        format!(
            "9 stages run twice; {} artifacts compared, {} differ{}",
            fa.len(),
            differing.len(),
            differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    );
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn main() {
    let mut r = Report { lines: Vec::new() };
    let start = Instant::now();

    oracle_equivalence(&mut r);
    gradient_checks(&mut r);

    let s = setup();
    let shape = s.test.input_shape().unwrap();
    let (k, l) = (s.test.schema.k, s.test.n_classes);
    let untrained = Model::new(config(0, Ablation::Full).model_config(shape, k, l), 0).unwrap();

    let e2e = run(&s, LABEL_RATIO, 0, &config(0, Ablation::Full));
    let upper = run(&s, 1.0, 0, &config(0, Ablation::Full));
    let gap_c = upper.concept - e2e.concept;
    let gap_a = upper.task - e2e.task;
    r.check(
        "synthetic end-to-end",
        e2e.concept >= 0.90
            && e2e.task >= 0.90
            && gap_c <= 0.05
            && gap_a <= 0.05
            && e2e.elapsed < Duration::from_secs(15 * 60)
            && N_EXAMPLES >= 2000
            && k >= 8
            && l >= 6,
        format!(
            "{N_EXAMPLES} examples, k={k}, l={l}, ratio {LABEL_RATIO}, {EPOCHS} epochs in {}: concept {:.4}, task {:.4}; fully labeled concept {:.4}, task {:.4} (gaps {:+.4}, {:+.4})",
            secs(e2e.elapsed),
            e2e.concept,
            e2e.task,
            upper.concept,
            upper.task,
            gap_c,
            gap_a
        ),
    );

    mixture_and_intervention(&mut r, &e2e.model, &s.test);

    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let full_c = if seed == 0 {
            e2e.concept
        } else {
            run(&s, LABEL_RATIO, seed, &config(seed, Ablation::Full)).concept
        };
        let wo = run(&s, LABEL_RATIO, seed, &config(seed, Ablation::WoAlign)).concept;
        wins += usize::from(full_c >= wo + 0.03);
        rows.push(format!("seed {seed}: full {full_c:.4} vs wo_align {wo:.4}"));
    }
    r.check(
        "ablation ordering",
        wins * 2 > ABLATION_SEEDS.len(),
        format!("full >= wo_align + 3pts on {wins}/3 seeds ({})", rows.join("; ")),
    );

    let ratios = ratio_range("0.0:1.0:0.1").unwrap();
    let curve = intervention_sweep(&e2e.model, &s.test, &ratios, InterventionMode::Individual, SelectionOrder::MostErroneous)
        .unwrap();
    let acc: Vec<f64> = curve.iter().map(|p| p.task_accuracy).collect();
    let worst_drop = acc.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
    r.check(
        "intervention monotonicity",
        worst_drop <= 0.01 && acc[10] >= acc[0],
        format!(
            "A(r) = [{}]; largest consecutive drop {worst_drop:.4}",
            acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let low = run(&s, 0.05, 0, &config(0, Ablation::Full)).concept;
    let high = run(&s, 0.2, 0, &config(0, Ablation::Full)).concept;
    r.check(
        "label-ratio monotonicity",
        high >= low,
        format!("concept acc at ratio 0.2 {high:.4} vs 0.05 {low:.4}"),
    );

    let trained = saliency_localization(&e2e.model, &s.test, &s.synth.regions).unwrap();
    let before = saliency_localization(&untrained, &s.test, &s.synth.regions).unwrap();
    r.check(
        "saliency localization",
        trained.rate >= 0.60 && before.rate <= before.chance + 0.05,
        format!(
            "trained {:.4} over {} pairs (need >= 0.60); untrained {:.4}; chance {:.4}",
            trained.rate, trained.pairs, before.rate, before.chance
        ),
    );

    determinism(&mut r);

    let failed = r.lines.iter().filter(|(ok, _)| !ok).count();
    println!(
        "acceptance: {} passed, {failed} failed in {}",
        r.lines.len() - failed,
        secs(start.elapsed())
    );
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
