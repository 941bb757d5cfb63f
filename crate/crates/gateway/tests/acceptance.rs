//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance`. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::Parser;
use ndarray::{Array1, Array2};
use ond_core::benchkit::{build_benchmark, Benchmark};
use ond_core::evalkit::{auroc, fpr_at_tpr, ScoreSet};
use ond_core::featurestore::{
    from_binary_bytes, generate_synthetic, load_dataset, to_binary_bytes, write_dataset, Dataset, DatasetHeader,
    FeatureRecord, Format, SyntheticConfig,
};
use ond_core::losses::{bce_head_loss, supcon_loss};
use ond_core::looprunner::{baseline_reports, run_oracle_loop, step_gradients, train_session, ReplayEntry};
use ond_core::ndnet::{init_model, Mode, NdModel, RegularizerConfig, ScorePath, Upstream};
use ond_core::optim::{Method, Phase, TrainConfig};
use ond_gateway::cli::{run, Cli};
use ond_gateway::config::{read_pairs, Settings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, outcome: Outcome) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(d) if secs < limit_s => Ok(d),
        Ok(d) => Err(format!("{d}; took {secs:.2} s, limit {limit_s} s")),
        Err(d) => Err(d),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Binary labels where both values occur at least twice, so every anchor
/// has a positive partner.
fn paired_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
    y[..4].copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
    y
}

/// The contrastive loss written out term by term.
fn supcon_literal(z: &Array2<f64>, y: &[f64], tau: f64) -> f64 {
    let n = z.nrows();
    let sim = |i: usize, j: usize| {
        let (a, b) = (z.row(i), z.row(j));
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (sim(i, j) / tau).exp();
            }
        }
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && y[p] == y[i]).collect();
        let mut term = 0.0;
        for &p in &positives {
            term += ((sim(i, p) / tau).exp() / denom).ln();
        }
        total += -term / positives.len() as f64;
    }
    total / n as f64
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(4..=16);
        let d = rng.random_range(1..=16);
        let z = random_matrix(&mut rng, n, d);
        let y = paired_labels(&mut rng, n);
        let got = supcon_loss(z.view(), &y, 0.1).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - supcon_literal(&z, &y, 0.1)).abs());
    }
    let z = random_matrix(&mut rng, 9, 5);
    let y: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
    let bce = bce_head_loss(z.view(), &y, Array1::zeros(5).view()).map_err(|e| e.to_string())?.value;
    let bce_dev = (bce - std::f64::consts::LN_2).abs();
    let row = random_matrix(&mut rng, 1, 7);
    let dup = ndarray::concatenate![ndarray::Axis(0), row, row];
    let dup_loss = supcon_loss(dup.view(), &[1.0, 1.0], 0.1).map_err(|e| e.to_string())?.value;
    check(
        worst < 1e-9 && bce_dev < 1e-12 && dup_loss.abs() < 1e-9,
        format!("supcon max dev {worst:.1e}, bce(w=0) - ln2 = {bce_dev:.1e}, duplicate pair {dup_loss:.1e}"),
    )
}

const H: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn probe(model: &NdModel, x: &Array2<f64>, cz: &Array2<f64>, cl: &Array1<f64>) -> f64 {
    let out = model.predict(x.view()).unwrap();
    (&out.z * cz).sum() + (&out.logits * cl).sum()
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let n = rng.random_range(4..12);
        let d = rng.random_range(2..10);
        let z = random_matrix(&mut rng, n, d);
        let y = paired_labels(&mut rng, n);
        let g = supcon_loss(z.view(), &y, 0.1).unwrap().grad_embeddings;
        for i in 0..n {
            for j in 0..d {
                let (mut p, mut m) = (z.clone(), z.clone());
                p[[i, j]] += H;
                m[[i, j]] -= H;
                let num = (supcon_loss(p.view(), &y, 0.1).unwrap().value - supcon_loss(m.view(), &y, 0.1).unwrap().value)
                    / (2.0 * H);
                worst = worst.max(rel_err(g[[i, j]], num));
            }
        }

        let w = Array1::from_shape_fn(d, |_| rng.random_range(-2.0..2.0));
        let gw = bce_head_loss(z.view(), &y, w.view()).unwrap().grad_projection.unwrap();
        for j in 0..d {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[j] += H;
            m[j] -= H;
            let num = (bce_head_loss(z.view(), &y, p.view()).unwrap().value
                - bce_head_loss(z.view(), &y, m.view()).unwrap().value)
                / (2.0 * H);
            worst = worst.max(rel_err(gw[j], num));
        }

        let input = rng.random_range(2..7);
        let widths: Vec<usize> = (0..4).map(|_| rng.random_range(2..7)).collect();
        let mut model = init_model(input, &widths, seed).unwrap();
        for layer in &mut model.hidden {
            layer.bias.fill(0.3);
        }
        let rows = rng.random_range(1..6);
        let x = random_matrix(&mut rng, rows, input);
        let cz = random_matrix(&mut rng, rows, widths[3]);
        let cl = Array1::from_shape_fn(rows, |_| rng.random_range(-1.0..1.0));
        let fwd = model.forward(x.view(), Mode::Train, &RegularizerConfig::default(), 0).unwrap();
        let grads = model
            .backward(
                &fwd,
                Upstream {
                    d_embedding: Some(cz.view()),
                    d_logit: Some(cl.view()),
                    score_path: ScorePath::Attached,
                },
            )
            .unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (t, tensor) in analytic.iter().enumerate() {
            for (k, &a) in tensor.iter().enumerate() {
                let orig = model.parameters()[t][k];
                model.parameters_mut()[t][k] = orig + H;
                let up = probe(&model, &x, &cz, &cl);
                model.parameters_mut()[t][k] = orig - H;
                let down = probe(&model, &x, &cz, &cl);
                model.parameters_mut()[t][k] = orig;
                worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
            }
        }
        instances += 1;
    }
    check(
        worst < 1e-4,
        format!("{instances} instances each of supcon dZ, bce dw, 4-layer backprop; max rel err {worst:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut batches = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let n = rng.random_range(4..20);
        let mut model = init_model(6, &[12, 10, 8, 8], seed).unwrap();
        // keeps embeddings off the origin
        for layer in &mut model.hidden {
            layer.bias.fill(0.5);
        }
        let x = random_matrix(&mut rng, n, 6);
        let y = paired_labels(&mut rng, n);
        let fwd = model.forward(x.view(), Mode::Train, &RegularizerConfig::default(), seed).unwrap();
        if fwd.z.rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
            continue;
        }

        let bce = bce_head_loss(fwd.z.view(), &y, model.projection.view()).unwrap();
        let dl = bce.grad_logits.unwrap();
        let from_bce = model
            .backward(
                &fwd,
                Upstream {
                    d_embedding: None,
                    d_logit: Some(dl.view()),
                    score_path: ScorePath::Detached,
                },
            )
            .unwrap();
        if from_bce.hidden.iter().any(|l| l.weight.iter().chain(l.bias.iter()).any(|&v| v != 0.0)) {
            return Err(format!("batch {seed}: BCE reached a hidden layer"));
        }

        let con = supcon_loss(fwd.z.view(), &y, 0.1).unwrap();
        let from_con = model
            .backward(
                &fwd,
                Upstream {
                    d_embedding: Some(con.grad_embeddings.view()),
                    d_logit: None,
                    score_path: ScorePath::Detached,
                },
            )
            .unwrap();
        if from_con.projection.iter().any(|&v| v != 0.0) {
            return Err(format!("batch {seed}: SupCon reached the projection"));
        }

        // The trainer's joint step splits the same way.
        let cfg = TrainConfig {
            widths: vec![12, 10, 8, 8],
            ..TrainConfig::iconp()
        };
        let (_, joint) = step_gradients(&model, &x, &y, &cfg, seed).unwrap();
        if joint.hidden != from_con.hidden || joint.projection != from_bce.projection {
            return Err(format!("batch {seed}: joint step mixes the two paths"));
        }
        batches += 1;
    }
    check(batches >= 40, format!("{batches} batches, all cross-path gradients exactly 0"))
}

fn fpr_oracle(s: &ScoreSet, target: f64) -> f64 {
    let mut best: Option<f64> = None;
    for &t in &s.id_scores {
        let tpr = s.id_scores.iter().filter(|&&v| v >= t).count() as f64 / s.id_scores.len() as f64;
        if tpr >= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    s.ood_scores.iter().filter(|&&v| v >= t).count() as f64 / s.ood_scores.len() as f64
}

fn auroc_oracle(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    for &a in &s.id_scores {
        for &b in &s.ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (s.id_scores.len() * s.ood_scores.len()) as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..250 {
        let total = rng.random_range(5..=500);
        let n_id = rng.random_range(1..total);
        let levels = rng.random_range(2..40);
        let mut draw = |shift: f64| {
            if rng.random_bool(0.5) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                rng.random_range(0.0..1.0) + shift
            }
        };
        let id: Vec<f64> = (0..n_id).map(|_| draw(0.2)).collect();
        let ood: Vec<f64> = (0..total - n_id).map(|_| draw(0.0)).collect();
        let s = ScoreSet::new(id, ood, "m", "g");
        let (fpr, _) = fpr_at_tpr(&s, 0.95).map_err(|e| e.to_string())?;
        let au = auroc(&s).map_err(|e| e.to_string())?;
        worst = worst.max((fpr - fpr_oracle(&s, 0.95)).abs()).max((au - auroc_oracle(&s)).abs());
    }
    let sep = ScoreSet::new(vec![0.9, 0.8, 0.7], vec![0.3, 0.2], "m", "g");
    let flat = ScoreSet::new(vec![0.5; 4], vec![0.5; 3], "m", "g");
    let sep_r = (fpr_at_tpr(&sep, 0.95).unwrap().0, auroc(&sep).unwrap());
    let flat_r = (fpr_at_tpr(&flat, 0.95).unwrap().0, auroc(&flat).unwrap());
    check(
        worst < 1e-9 && sep_r == (0.0, 1.0) && flat_r == (1.0, 0.5),
        format!("250 score sets, max dev {worst:.1e}; separated {sep_r:?}, constant {flat_r:?}"),
    )
}

fn class_dataset(n_id: i32, n_ood: i32, per_class: usize) -> Dataset {
    let mut records = Vec::new();
    for c in 0..n_id + n_ood {
        for _ in 0..per_class {
            records.push(FeatureRecord {
                image_id: records.len() as u64,
                bbox: [0.0; 4],
                class_id: c,
                is_id: c < n_id,
                feature: vec![0.0],
                logits: vec![0.0],
            });
        }
    }
    Dataset::new(DatasetHeader::new(1, 1, 0..n_id), records).unwrap()
}

fn shares(b: &Benchmark) -> Vec<usize> {
    b.groups.iter().chain([&b.holdout]).map(|g| g.ood_classes.len()).collect()
}

fn criterion_5() -> Outcome {
    let ds60 = class_dataset(10, 60, 2);
    let b60 = build_benchmark(&ds60, &(0..10).collect(), &ds60.ood_classes(), 5, 30, 0).map_err(|e| e.to_string())?;
    let ds96 = class_dataset(10, 96, 2);
    let b96 = build_benchmark(&ds96, &(0..10).collect(), &ds96.ood_classes(), 5, 48, 0).map_err(|e| e.to_string())?;
    let (s60, s96) = (shares(&b60), shares(&b96));
    if s60 != [30, 6, 6, 6, 6, 6] || s96 != [48, 10, 10, 10, 9, 9] {
        return Err(format!("shares {s60:?} and {s96:?}"));
    }

    // Multi-object images: every image holds 1 to 3 records.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ds = class_dataset(6, 40, 6);
    let mut image = 0u64;
    let mut left = 0;
    for r in ds.records.iter_mut() {
        if left == 0 {
            image = rng.random_range(0..u64::MAX / 2);
            left = rng.random_range(1..=3);
        }
        r.image_id = image;
        left -= 1;
    }
    for seed in 0..100u64 {
        let b = build_benchmark(&ds, &(0..6).collect(), &ds.ood_classes(), 5, 20, seed).map_err(|e| e.to_string())?;
        let groups: Vec<_> = b.groups.iter().chain([&b.holdout]).collect();
        for (i, a) in groups.iter().enumerate() {
            let a_images: BTreeSet<u64> = a.records().iter().map(|&r| ds.records[r].image_id).collect();
            for bb in &groups[i + 1..] {
                if !a.ood_classes.is_disjoint(&bb.ood_classes) {
                    return Err(format!("seed {seed}: ood classes shared between {} and {}", a.tag, bb.tag));
                }
                if bb.records().iter().any(|&r| a_images.contains(&ds.records[r].image_id)) {
                    return Err(format!("seed {seed}: image shared between {} and {}", a.tag, bb.tag));
                }
            }
        }
    }
    check(true, format!("shares {s60:?} and {s96:?}; disjoint over 100 seeds"))
}

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.conf")
}

fn settings(method: Method, seed: u64) -> Settings {
    let mut pairs = read_pairs(&config_path()).expect("acceptance config");
    pairs.push(("method".into(), method.to_string()));
    let mut s = Settings::from_pairs(&pairs).expect("acceptance settings");
    s.set_seed(seed);
    s
}

struct TrendRun {
    /// Holdout FPR@95 after each session.
    holdout_fpr: Vec<f64>,
    s0_auroc: f64,
    maxlogit_auroc: f64,
}

fn trend_run(method: Method, seed: u64) -> TrendRun {
    let s = settings(method, seed);
    let ds = generate_synthetic(&s.synth).unwrap();
    let id: BTreeSet<i32> = (0..s.synth.id_clusters as i32).collect();
    let b = build_benchmark(&ds, &id, &ds.ood_classes(), s.bench.sessions, s.bench.g0_classes, s.bench.seed).unwrap();
    let state = run_oracle_loop(&ds, &b, &s.train, s.bench.sessions).unwrap();
    let holdout: Vec<_> = state.history.iter().filter(|r| r.group == "holdout").collect();
    let maxlogit = baseline_reports(&ds, &b, 0, 0)
        .unwrap()
        .into_iter()
        .find(|r| r.method == "maxlogit" && r.group == "holdout")
        .unwrap();
    TrendRun {
        holdout_fpr: holdout.iter().map(|r| r.fpr_at_95).collect(),
        s0_auroc: holdout[0].auroc,
        maxlogit_auroc: maxlogit.auroc,
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(iconp: &[TrendRun], ibce: &[TrendRun]) -> Outcome {
    let s0 = mean(iconp.iter().map(|r| r.holdout_fpr[0]));
    let s4 = mean(iconp.iter().map(|r| r.holdout_fpr[4]));
    let ibce_s4 = mean(ibce.iter().map(|r| r.holdout_fpr[4]));
    let drop = 1.0 - s4 / s0;
    check(
        drop >= 0.30 && s4 <= ibce_s4,
        format!(
            "iconp holdout FPR@95 S_0 {:.2}% -> S_4 {:.2}% ({:.0}% relative drop); ibce S_4 {:.2}%",
            100.0 * s0,
            100.0 * s4,
            100.0 * drop,
            100.0 * ibce_s4
        ),
    )
}

fn criterion_7(iconp: &[TrendRun]) -> Outcome {
    let pairs: Vec<String> = iconp
        .iter()
        .map(|r| format!("{:.3}>{:.3}", r.s0_auroc, r.maxlogit_auroc))
        .collect();
    check(
        iconp.iter().all(|r| r.s0_auroc > r.maxlogit_auroc),
        format!("S_0 holdout AUROC iconp vs maxlogit per seed: {}", pairs.join(", ")),
    )
}

fn loop_once(dir: &std::path::Path) -> Result<(String, Vec<u8>), String> {
    let run_dir = dir.to_str().unwrap();
    let config = config_path();
    let cli = Cli::try_parse_from([
        "ond",
        "--run-dir",
        run_dir,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "11",
        "loop",
        "--sessions",
        "5",
        "--method",
        "iconp",
        "--annotator",
        "oracle",
    ])
    .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    run(cli, &mut out).map_err(|e| format!("{e:#}"))?;
    let table = std::fs::read(dir.join("history.tsv")).map_err(|e| e.to_string())?;
    Ok((String::from_utf8(out).unwrap(), table))
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (out_a, table_a) = loop_once(&tmp.path().join("a"))?;
    let (out_b, table_b) = loop_once(&tmp.path().join("b"))?;
    let rows = String::from_utf8_lossy(&table_a).lines().count() - 1;
    check(
        table_a == table_b && out_a == out_b && rows == 10,
        format!("two loop runs, {rows} history rows, tables identical: {}", table_a == table_b),
    )
}

fn same_records(a: &[FeatureRecord], b: &[FeatureRecord]) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.image_id == y.image_id
                && x.class_id == y.class_id
                && x.is_id == y.is_id
                && bits(&x.bbox) == bits(&y.bbox)
                && bits(&x.feature) == bits(&y.feature)
                && bits(&x.logits) == bits(&y.logits)
        })
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = generate_synthetic(&SyntheticConfig {
        feature_dim: 16,
        id_clusters: 3,
        ood_clusters: 5,
        samples_per_cluster: 10,
        seed: 9,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut ok = true;
    for (name, format) in [("d.ondf", Format::Binary), ("d.jsonl", Format::Jsonl)] {
        let path = tmp.path().join(name);
        write_dataset(&ds.records, &ds.header, &path, format).map_err(|e| e.to_string())?;
        let back = load_dataset(&path, format).map_err(|e| e.to_string())?;
        ok &= back.header == ds.header && same_records(&back.records, &ds.records);
    }
    let mem = from_binary_bytes(&to_binary_bytes(&ds.header, &ds.records)).map_err(|e| e.to_string())?;
    ok &= same_records(&mem.records, &ds.records);

    let cfg = TrainConfig {
        widths: vec![8, 8, 8, 8],
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 16,
        ..TrainConfig::iconp()
    };
    let mut model = init_model(16, &cfg.widths, 3).map_err(|e| e.to_string())?;
    let pool: Vec<ReplayEntry> = (0..ds.len())
        .map(|record| ReplayEntry {
            record,
            is_id: ds.records[record].is_id,
        })
        .collect();
    train_session(&mut model, &ds, &pool, &cfg, Phase::Initial, 0).map_err(|e| e.to_string())?;
    let ckpt = tmp.path().join("m.ondm");
    model.save(&ckpt).map_err(|e| e.to_string())?;
    let back = NdModel::load(&ckpt).map_err(|e| e.to_string())?;
    let bits = |m: &NdModel| -> Vec<u64> { m.parameters().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect() };
    let ckpt_ok = bits(&back) == bits(&model) && back.widths() == model.widths();
    check(
        ok && ckpt_ok,
        format!("binary, jsonl and in-memory round trips exact: {ok}; checkpoint bit-identical: {ckpt_ok}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, limit: Option<f64>, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let elapsed = t.elapsed();
        let out = match limit {
            Some(l) => within(elapsed, l, out),
            None => out,
        };
        results.push((n, name, out, elapsed));
    };
    timed(1, "loss oracles", Some(5.0), &criterion_1);
    timed(2, "gradient checks", Some(30.0), &criterion_2);
    timed(3, "stop-gradient contract", None, &criterion_3);
    timed(4, "metric oracles", None, &criterion_4);
    timed(5, "benchmark construction", None, &criterion_5);

    let t = Instant::now();
    let iconp: Vec<TrendRun> = SEEDS.iter().map(|&s| trend_run(Method::Iconp, s)).collect();
    let ibce: Vec<TrendRun> = SEEDS.iter().map(|&s| trend_run(Method::Ibce, s)).collect();
    let trend_time = t.elapsed();
    results.push((6, "incremental trend", within(trend_time, 120.0, criterion_6(&iconp, &ibce)), trend_time));
    results.push((7, "baseline ordering", criterion_7(&iconp), Duration::ZERO));

    let mut timed = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        results.push((n, name, out, t.elapsed()));
    };
    timed(8, "determinism", &criterion_8);
    timed(9, "format round trips", &criterion_9);

    let mut failed = 0;
    for (n, name, out, elapsed) in &results {
        let (tag, detail) = match out {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {tag} {name} ({:.2} s): {detail}", elapsed.as_secs_f64());
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
