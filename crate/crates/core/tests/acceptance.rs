//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The MNIST criteria read IDX files from `$DBLE_MNIST_DIR`, falling back to
//! `data/mnist` at the workspace root.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use dble::autodiff::{finite_diff_check, DistanceMode, Graph, ParamSet};
use dble::cli::{
    cmd_train, load_splits, run_ablation, run_train, Ablation, DatasetKind, RunConfig, ARM_ALL_SAMPLES,
    ARM_ERRORS_ONLY, ARM_TEMPERATURE, ARM_VANILLA, CHECKPOINT_FILE,
};
use dble::confidence::{collect_errors, confidence_loss, Selection};
use dble::data::{sample_episode, Dataset};
use dble::metrics::{accuracy_by_distance, ece, spearman, EvalRecord};
use dble::model::{head_logits, init_confidence, init_encoder, init_head, ConfidenceConfig, EncoderConfig};
use dble::proto::{proto_loss, CenterSource, CenterTable};
use dble::rng::{RngStreams, DROPOUT, EPSILON};
use dble::train::cross_entropy;
use dble::Tensor;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, started: Instant, outcome: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    if took <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, scale: f64, r: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Overwrites every parameter with a fresh normal draw, so zero-initialized
/// biases and output layers take part in the check.
fn randomize<R: Rng>(p: &ParamSet, scale: f64, r: &mut R) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in p.iter() {
        let data = (0..t.len()).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    }
    out
}

/// Labels `0..classes` repeated `per_class` times with uniform features.
fn random_dataset<R: Rng>(classes: usize, per_class: usize, dims: usize, r: &mut R) -> Dataset {
    let n = classes * per_class;
    let labels = (0..n).map(|i| i % classes).collect();
    let features = Tensor::matrix(n, dims, (0..n * dims).map(|_| r.random::<f64>()).collect()).unwrap();
    Dataset::new(features, labels, classes).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradients against central differences

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 10;
// Central-difference steps. The proto loss is unchanged by any parameter
// shift that translates every embedding and center alike (the output bias,
// hidden biases of units active on every row), so those gradients are exactly
// zero and the quotient there is pure roundoff, a few ulps of the loss over
// 2h, which the 1e-8 floor amplifies. Its step is the largest whose truncation
// error stays small against the smallest nonzero gradients, and instances are
// kept to losses below 1. The other losses have no such directions.
const PROTO_STEP: f64 = 7e-4;
const GRAD_STEP: f64 = 1e-4;
const MAX_LOSS: f64 = 1.0;
// Instances with a ReLU pre-activation closer than this to zero are redrawn;
// finite differences are not an oracle across a kink. Likewise for a query
// sitting almost on a center, where the distance's curvature blows up.
const KINK_MARGIN: f64 = 1e-2;
const DISTANCE_MARGIN: f64 = 3e-1;

fn min_center_distance(theta: &ParamSet, layers: usize, ds: &Dataset, ep: &dble::data::Episode) -> f64 {
    let embed = |row: usize| embed_oracle(theta, layers, ds.features().row(row));
    let centers: Vec<Vec<f64>> = ep
        .classes
        .iter()
        .map(|&c| {
            let members: Vec<Vec<f64>> = ep.support.iter().filter(|&&i| ds.labels()[i] == c).map(|&i| embed(i)).collect();
            let dim = members[0].len();
            (0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect()
        })
        .collect();
    let mut min = f64::INFINITY;
    for &q in &ep.query {
        let e = embed(q);
        for c in &centers {
            min = min.min(e.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    min
}

/// Smallest |pre-activation| over the hidden ReLUs of a `prefix.{i}` MLP.
fn relu_margin<'a>(p: &ParamSet, prefix: &str, layers: usize, rows: impl Iterator<Item = &'a [f64]>) -> f64 {
    let mut margin = f64::INFINITY;
    for x in rows {
        let mut a = x.to_vec();
        for i in 0..layers - 1 {
            let pre = affine(p, prefix, i, &a);
            margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            a = pre.iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

fn affine(p: &ParamSet, prefix: &str, i: usize, a: &[f64]) -> Vec<f64> {
    let w = p.get(&format!("{prefix}.{i}.weight")).unwrap();
    let b = p.get(&format!("{prefix}.{i}.bias")).unwrap();
    let fan_out = w.shape()[1];
    (0..fan_out)
        .map(|j| b.data()[j] + a.iter().enumerate().map(|(k, ak)| ak * w.data()[k * fan_out + j]).sum::<f64>())
        .collect()
}

fn gradient_oracle() -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut done = [0usize; 3];
    let mut seed = 0u64;
    while done.iter().any(|d| *d < GRAD_INSTANCES) {
        let mut r = rng(seed);
        seed += 1;

        let enc = EncoderConfig {
            input_dim: 3,
            hidden_dims: vec![4],
            embed_dim: 3,
        };
        let theta = randomize(&init_encoder(&enc, &mut r).unwrap(), 0.7, &mut r);
        if theta.num_scalars() > 50 {
            return Err(format!("encoder has {} parameters", theta.num_scalars()));
        }
        let ds = random_dataset(3, 4, 3, &mut r);
        let ep = sample_episode(&ds, 2, 2, 2, &mut r).unwrap();
        let rows = ep.support.iter().chain(&ep.query).map(|&i| ds.features().row(i));
        if done[0] < GRAD_INSTANCES
            && relu_margin(&theta, "encoder", enc.num_layers(), rows) > KINK_MARGIN
            && min_center_distance(&theta, enc.num_layers(), &ds, &ep) > DISTANCE_MARGIN
            && [DistanceMode::Euclidean, DistanceMode::Squared]
                .iter()
                .all(|&m| proto_oracle(&theta, enc.num_layers(), &ds, &ep, m) < MAX_LOSS)
        {
            for mode in [DistanceMode::Euclidean, DistanceMode::Squared] {
                let rep = finite_diff_check(&theta, PROTO_STEP, |g, b| Ok(proto_loss(g, &enc, b, &ep, &ds, mode)?.loss))
                    .map_err(|e| e.to_string())?;
                worst[0] = worst[0].max(rep.max_rel_error);
            }
            done[0] += 1;
        }

        let conf = ConfidenceConfig {
            hidden_dim: 4,
            dropout_rate: 0.0,
            ..ConfidenceConfig::default()
        };
        let phi = randomize(&init_confidence(&conf, 3, &mut r).unwrap(), 0.5, &mut r);
        if phi.num_scalars() > 50 {
            return Err(format!("confidence head has {} parameters", phi.num_scalars()));
        }
        let centers = CenterTable::new(vec![0, 1, 2], normal_tensor(3, 3, 1.0, &mut r), CenterSource::Episode).unwrap();
        let h = normal_tensor(5, 3, 1.0, &mut r);
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        let batch = collect_errors(&h, &labels, &centers, Selection::AllSamples).unwrap();
        if done[1] < GRAD_INSTANCES && relu_margin(&phi, "confidence", 2, (0..5).map(|i| h.row(i))) > KINK_MARGIN {
            let s = RngStreams::new(seed);
            for mode in [DistanceMode::Euclidean, DistanceMode::Squared] {
                // Fresh streams on every call freeze both the noise and the
                // dropout mask.
                let rep = finite_diff_check(&phi, GRAD_STEP, |g, b| {
                    confidence_loss(g, &conf, b, &batch, mode, &mut s.stream(EPSILON), &mut s.stream(DROPOUT))
                })
                .map_err(|e| e.to_string())?;
                worst[1] = worst[1].max(rep.max_rel_error);
            }
            done[1] += 1;
        }

        let head = randomize(&init_head(4, 3, &mut r).unwrap(), 0.8, &mut r);
        let emb = normal_tensor(6, 4, 1.0, &mut r);
        let y: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
        if done[2] < GRAD_INSTANCES {
            let rep = finite_diff_check(&head, GRAD_STEP, |g, b| {
                let x = g.constant(emb.clone());
                let logits = head_logits(g, b, x)?;
                cross_entropy(g, logits, &y)
            })
            .map_err(|e| e.to_string())?;
            worst[2] = worst[2].max(rep.max_rel_error);
            done[2] += 1;
        }
    }
    check(
        worst.iter().all(|w| *w < GRAD_TOL),
        format!(
            "max rel error proto {:.2e}, confidence {:.2e}, cross-entropy {:.2e} over {GRAD_INSTANCES} instances each, {seed} drawn (tol {GRAD_TOL:e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. losses and metrics against brute force

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: u64 = 120;

fn embed_oracle(theta: &ParamSet, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for i in 0..layers {
        let w = theta.get(&format!("encoder.{i}.weight")).unwrap();
        let b = theta.get(&format!("encoder.{i}.bias")).unwrap();
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let mut next = vec![0.0; fan_out];
        for (j, out) in next.iter_mut().enumerate() {
            let mut s = b.data()[j];
            for (k, ak) in a.iter().enumerate().take(fan_in) {
                s += ak * w.data()[k * fan_out + j];
            }
            *out = if i + 1 < layers { s.max(0.0) } else { s };
        }
        a = next;
    }
    a
}

fn proto_oracle(theta: &ParamSet, layers: usize, ds: &Dataset, ep: &dble::data::Episode, mode: DistanceMode) -> f64 {
    let embed = |row: usize| embed_oracle(theta, layers, ds.features().row(row));
    let centers: Vec<Vec<f64>> = ep
        .classes
        .iter()
        .map(|&c| {
            let members: Vec<Vec<f64>> = ep
                .support
                .iter()
                .zip(&ep.support_labels)
                .filter(|(_, &l)| l == c)
                .map(|(&row, _)| embed(row))
                .collect();
            let mut m = vec![0.0; members[0].len()];
            for v in &members {
                for (mi, vi) in m.iter_mut().zip(v) {
                    *mi += vi / members.len() as f64;
                }
            }
            m
        })
        .collect();
    let mut total = 0.0;
    for (&row, &label) in ep.query.iter().zip(&ep.query_labels) {
        let h = embed(row);
        let d: Vec<f64> = centers
            .iter()
            .map(|c| {
                let s: f64 = h.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                match mode {
                    DistanceMode::Euclidean => (s + 1e-12).sqrt(),
                    DistanceMode::Squared => s,
                }
            })
            .collect();
        let own = ep.classes.iter().position(|&c| c == label).unwrap();
        let z: f64 = d.iter().map(|v| (-v).exp()).sum();
        total += -((-d[own]).exp() / z).ln();
    }
    total / ep.query.len() as f64
}

/// Sorts by confidence and sweeps the `l` right-closed bins in order.
fn ece_oracle(records: &[EvalRecord], l: usize) -> f64 {
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let n = records.len() as f64;
    let mut at = 0;
    let mut total = 0.0;
    for k in 0..l {
        let hi = (k + 1) as f64 / l as f64;
        let (mut conf, mut hits, mut count) = (0.0, 0.0, 0usize);
        while at < sorted.len() && (sorted[at].confidence <= hi || k + 1 == l) {
            conf += sorted[at].confidence;
            hits += f64::from(u8::from(sorted[at].label == sorted[at].predicted));
            count += 1;
            at += 1;
        }
        if count > 0 {
            total += (count as f64 / n) * (hits / count as f64 - conf / count as f64).abs();
        }
    }
    total
}

fn random_records<R: Rng>(n: usize, classes: usize, r: &mut R) -> Vec<EvalRecord> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| r.random::<f64>().powi(3) + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let predicted = (0..classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            let label = r.random_range(0..classes);
            EvalRecord {
                label,
                predicted,
                confidence: p[predicted],
                distribution: p,
                d_true: 0.0,
                d_pred: 0.0,
                sigma_mean: None,
            }
        })
        .collect()
}

fn loss_metric_oracle() -> Outcome {
    let (mut proto_err, mut ece_err) = (0.0f64, 0.0f64);
    for seed in 0..ORACLE_INSTANCES {
        let mut r = rng(1000 + seed);
        let classes = r.random_range(2..=4);
        let dims = r.random_range(1..=4);
        let enc = EncoderConfig {
            input_dim: dims,
            hidden_dims: (0..r.random_range(0..=2)).map(|_| r.random_range(2..=5)).collect(),
            embed_dim: r.random_range(1..=4),
        };
        let theta = randomize(&init_encoder(&enc, &mut r).unwrap(), 0.8, &mut r);
        let (k, kq) = (r.random_range(1..=3), r.random_range(1..=3));
        let ds = random_dataset(classes, k + kq + 1, dims, &mut r);
        let n_way = r.random_range(2..=classes);
        let ep = sample_episode(&ds, n_way, k, kq, &mut r).unwrap();
        for mode in [DistanceMode::Euclidean, DistanceMode::Squared] {
            let mut g = Graph::new();
            let b = g.bind_frozen(&theta);
            let fwd = proto_loss(&mut g, &enc, &b, &ep, &ds, mode).map_err(|e| e.to_string())?;
            let got = g.value(fwd.loss).data()[0];
            proto_err = proto_err.max((got - proto_oracle(&theta, enc.num_layers(), &ds, &ep, mode)).abs());
        }

        let records = random_records(r.random_range(1..=200), r.random_range(2..=10), &mut r);
        for l in [1, 5, 15] {
            let got = ece(&records, l).map_err(|e| e.to_string())?;
            ece_err = ece_err.max((got - ece_oracle(&records, l)).abs());
        }
    }
    check(
        proto_err <= ORACLE_TOL && ece_err <= ORACLE_TOL,
        format!("max abs error proto {proto_err:.2e}, ece {ece_err:.2e} over {ORACLE_INSTANCES} instances (tol {ORACLE_TOL:e})"),
    )
}

// ---------------------------------------------------------------------------
// 3-6. MNIST

fn mnist_dir() -> PathBuf {
    std::env::var_os("DBLE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn arm<'a>(a: &'a Ablation, name: &str) -> &'a dble::cli::ArmSummary {
    a.arms.iter().find(|x| x.name == name).expect("arm present")
}

fn mnist_table(a: &Ablation) -> Outcome {
    let v = arm(a, ARM_VANILLA);
    let d = arm(a, ARM_ERRORS_ONLY);
    let secs = v.train_secs + d.train_secs;
    let checks = [
        (v.accuracy >= 0.975, "vanilla acc >= 97.5%"),
        ((d.accuracy - v.accuracy).abs() <= 0.01, "|dble - vanilla| acc <= 1 pt"),
        (d.ece < v.ece, "dble ece < vanilla ece"),
        (d.ece <= 0.02, "dble ece <= 2%"),
        (d.nll < v.nll, "dble nll < vanilla nll"),
        (secs <= 30.0 * 60.0, "train time <= 30 min"),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1).collect();
    check(
        failed.is_empty(),
        format!(
            "vanilla acc {:.4} ece {:.4} nll {:.4}; dble acc {:.4} ece {:.4} nll {:.4}; train {secs:.0}s{}",
            v.accuracy,
            v.ece,
            v.nll,
            d.accuracy,
            d.ece,
            d.nll,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

const CURVE_BINS: usize = 20;

fn distance_curve(a: &Ablation) -> Outcome {
    let samples: Vec<(f64, bool)> = a.records[ARM_ERRORS_ONLY].iter().map(|r| (r.d_true, r.correct())).collect();
    let curve = accuracy_by_distance(&samples, CURVE_BINS).map_err(|e| e.to_string())?;
    let x: Vec<f64> = curve.iter().map(|p| p.bin_center).collect();
    let y: Vec<f64> = curve.iter().map(|p| p.accuracy).collect();
    let rho = spearman(&x, &y).ok_or("fewer than two occupied bins")?;
    let drop = y[0] - y[y.len() - 1];
    check(
        rho <= -0.8 && drop >= 0.3,
        format!("spearman {rho:.3} (need <= -0.8), first - last bin accuracy {drop:.3} (need >= 0.3) over {} bins", y.len()),
    )
}

fn ablation_orderings(a: &Ablation, started: Instant) -> Outcome {
    let e = arm(a, ARM_ERRORS_ONLY);
    let s = arm(a, ARM_ALL_SAMPLES);
    let mean = |x: &dble::cli::ArmSummary| x.sigma.as_ref().map(|s| s.stats.mean).unwrap_or(f64::NAN);
    let ratio = mean(e) / mean(s);
    within(started, Duration::from_secs(60 * 60))?;
    check(
        e.ece < s.ece && ratio > 1.5,
        format!(
            "ece errors_only {:.4} vs all_samples {:.4}; mean sigma {:.4} vs {:.4}, ratio {ratio:.2} (need > 1.5)",
            e.ece,
            s.ece,
            mean(e),
            mean(s)
        ),
    )
}

fn temperature(a: &Ablation) -> Outcome {
    let fit = arm(a, ARM_TEMPERATURE).temperature.as_ref().ok_or("no temperature fit")?;
    check(
        fit.val_nll_after < fit.val_nll_before && fit.val_accuracy_after.to_bits() == fit.val_accuracy_before.to_bits(),
        format!(
            "T {:.4}; val nll {:.5} -> {:.5}; val acc {:.4} -> {:.4}",
            fit.temperature, fit.val_nll_before, fit.val_nll_after, fit.val_accuracy_before, fit.val_accuracy_after
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-8. synthetic

fn blobs_config() -> RunConfig {
    RunConfig {
        dataset: DatasetKind::Blobs,
        ..RunConfig::default()
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let cfg = RunConfig {
            seed: 3,
            out_dir: tmp.path().join(run),
            ..blobs_config()
        };
        cmd_train(&cfg).map_err(|e| e.to_string())?;
        let read = |f: &str| std::fs::read(cfg.out_dir.join(f)).map_err(|e| e.to_string());
        files.push((read("trainlog.csv")?, read(CHECKPOINT_FILE)?));
    }
    check(
        files[0] == files[1],
        format!("trainlog {} bytes, checkpoint {} bytes, identical: {}", files[0].0.len(), files[0].1.len(), files[0] == files[1]),
    )
}

fn blobs_sanity(started: Instant) -> Outcome {
    let cfg = blobs_config();
    let splits = load_splits(&cfg).map_err(|e| e.to_string())?;
    let out = run_train(&cfg, &splits).map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(120))?;
    let r = &out.test_report;
    check(
        r.accuracy == 1.0 && r.ece < 0.02,
        format!(
            "separation {}x spread: test acc {:.4}, ece {:.4} on {} samples",
            cfg.blobs_separation / cfg.blobs_spread,
            r.accuracy,
            r.ece,
            r.n
        ),
    )
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };

    let t = Instant::now();
    let out = gradient_oracle().and_then(|d| within(t, Duration::from_secs(60)).map(|_| d));
    report.record(1, "gradient oracle", t, out);

    let t = Instant::now();
    let out = loss_metric_oracle().and_then(|d| within(t, Duration::from_secs(60)).map(|_| d));
    report.record(2, "loss/metric oracle", t, out);

    let t = Instant::now();
    let cfg = RunConfig {
        mnist_dir: mnist_dir(),
        ..RunConfig::default()
    };
    match load_splits(&cfg).and_then(|s| run_ablation(&cfg, &s)) {
        Ok(a) => {
            report.record(3, "mnist accuracy/ece/nll", t, mnist_table(&a));
            report.record(4, "accuracy falls with distance", t, distance_curve(&a));
            report.record(5, "errors-only vs all-samples", t, ablation_orderings(&a, t));
            report.record(6, "temperature scaling", t, temperature(&a));
        }
        Err(e) => {
            for (id, name) in [
                (3, "mnist accuracy/ece/nll"),
                (4, "accuracy falls with distance"),
                (5, "errors-only vs all-samples"),
                (6, "temperature scaling"),
            ] {
                report.record(id, name, t, Err(format!("mnist run failed: {e}")));
            }
        }
    }

    let t = Instant::now();
    report.record(7, "determinism", t, determinism());

    let t = Instant::now();
    report.record(8, "blobs sanity", t, blobs_sanity(t));

    println!("{} of 8 criteria passed", 8 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
