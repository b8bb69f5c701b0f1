//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 9`.
//! Every criterion is reported; the exit status is non-zero on a failure
//! only when `TRAFX_ACCEPTANCE_STRICT=1` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trafx::bench::{time_inference, InferenceOptions};
use trafx::codec::{
    encode_images, load_dataset, save_dataset, stratified_split, EncodeOptions, ImageDataset, TrafficImage,
};
use trafx::config::RunConfig;
use trafx::explain::{
    grad_cam, grad_cam_network, kernel_shap, spatial_compactness, RegionPartition, DEFAULT_TOP_FRACTION,
};
use trafx::flow::{clean, FlowRecord, FlowTable};
use trafx::metrics::{
    accuracy, balanced_accuracy, confusion, evaluate, hamming, kappa, macro_prf, mcc_multiclass, youden_macro,
    ConfusionMatrix, IntervalMetric, PredictionSet,
};
use trafx::nn::{plateau_schedule, Layer, LayerKind, LayerSpec, Network, Tensor, TrainConfig};
use trafx::pipeline::{read_json, EvalArtifact, Run, Stamped};
use trafx::report::{TABLE_COST, TABLE_PERFORMANCE, TABLE_RANKING, TABLE_RELIABILITY};
use trafx::synth::{augment, generate, SynthConfig};
use trafx::zoo::{build, train, Family, Model, ModelConfig, Predictor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

fn random_row(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

// ---------------------------------------------------------------- 1 and 2

/// Sample-loop reference statistics computed from raw label vectors.
struct Reference {
    accuracy: f64,
    hamming: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    balanced: f64,
    kappa: Option<f64>,
    mcc: Option<f64>,
    youden: Option<f64>,
}

fn reference(truth: &[usize], pred: &[usize], k: usize) -> Reference {
    let n = truth.len() as f64;
    let count = |f: &dyn Fn(usize, usize) -> bool| truth.iter().zip(pred).filter(|(&t, &p)| f(t, p)).count() as f64;
    let correct = count(&|t, p| t == p);

    let (mut prec, mut rec, mut f1) = (0.0, 0.0, 0.0);
    let mut youden = Vec::new();
    let mut chance = 0.0;
    for c in 0..k {
        let tp = count(&|t, p| t == c && p == c);
        let actual = count(&|t, _| t == c);
        let called = count(&|_, p| p == c);
        let p = if called > 0.0 { tp / called } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        chance += (actual / n) * (called / n);
        if actual > 0.0 && actual < n {
            let tn = count(&|t, p| t != c && p != c);
            youden.push(tp / actual + tn / (n - actual) - 1.0);
        }
    }
    let p_o = correct / n;
    let kappa = (chance != 1.0).then(|| (p_o - chance) / (1.0 - chance));

    // correlation of one-hot indicator matrices
    let mean = |labels: &[usize], c: usize| labels.iter().filter(|&&l| l == c).count() as f64 / n;
    let cov = |a: &[usize], b: &[usize]| -> f64 {
        let mut s = 0.0;
        for c in 0..k {
            let (ma, mb) = (mean(a, c), mean(b, c));
            for (&x, &y) in a.iter().zip(b) {
                s += (f64::from(u8::from(x == c)) - ma) * (f64::from(u8::from(y == c)) - mb);
            }
        }
        s
    };
    let (tt, pp) = (cov(truth, truth), cov(pred, pred));
    let mcc = (tt > 1e-12 && pp > 1e-12).then(|| cov(truth, pred) / (tt * pp).sqrt());

    Reference {
        accuracy: p_o,
        hamming: 1.0 - p_o,
        precision: prec / k as f64,
        recall: rec / k as f64,
        f1: f1 / k as f64,
        balanced: rec / k as f64,
        kappa,
        mcc,
        youden: (!youden.is_empty()).then(|| youden.iter().sum::<f64>() / youden.len() as f64),
    }
}

fn defined(r: trafx::Result<f64>) -> Result<Option<f64>, String> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(trafx::Error::UndefinedMetric { .. }) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut sets = 0;
    for i in 0..500 {
        let k = [2, 4, 12][i % 3];
        let n = [20, 500][(i / 3) % 2];
        let skill = rng.random::<f64>();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probs: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| {
                let mut row = random_row(&mut rng, k);
                if rng.random::<f64>() < skill {
                    row.iter_mut().for_each(|v| *v *= 0.2);
                    row[t] += 0.8;
                }
                row
            })
            .collect();
        let preds = ok(PredictionSet::new(probs, truth.clone(), names(k)))?;
        let predicted = preds.predicted_labels();
        let cm = confusion(&preds);
        let want = reference(&truth, &predicted, k);
        let (p, r, f) = ok(macro_prf(&cm))?;
        let pairs = [
            ("accuracy", Some(ok(accuracy(&cm))?), Some(want.accuracy)),
            ("hamming", Some(ok(hamming(&cm))?), Some(want.hamming)),
            ("precision", Some(p), Some(want.precision)),
            ("recall", Some(r), Some(want.recall)),
            ("f1", Some(f), Some(want.f1)),
            ("balanced accuracy", Some(ok(balanced_accuracy(&cm))?), Some(want.balanced)),
            ("kappa", defined(kappa(&cm))?, want.kappa),
            ("mcc", defined(mcc_multiclass(&cm))?, want.mcc),
            ("youden", defined(youden_macro(&cm))?, want.youden),
        ];
        for (name, got, exp) in pairs {
            match (got, exp) {
                (Some(g), Some(e)) => {
                    let d = (g - e).abs();
                    ensure!(d <= 1e-10, "set {i} (K={k}, N={n}): {name} {g} vs reference {e}");
                    worst = worst.max(d);
                }
                (None, None) => {}
                _ => return Err(format!("set {i}: {name} definedness differs ({got:?} vs {exp:?})")),
            }
        }
        sets += 1;
    }
    Ok(format!("{sets} sets, max deviation {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [2usize, 4, 12] {
        let rows: Vec<Vec<u64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { rng.random_range(1..50) } else { 0 }).collect())
            .collect();
        let cm = ok(ConfusionMatrix::from_rows(&rows))?;
        let (kp, mc, j) = (ok(kappa(&cm))?, ok(mcc_multiclass(&cm))?, ok(youden_macro(&cm))?);
        ensure!(kp == 1.0 && mc == 1.0 && j == 1.0, "diagonal K={k}: kappa {kp}, mcc {mc}, J {j}");
    }

    let (n, k) = (100_000, 4);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let probs: Vec<Vec<f64>> = (0..n).map(|_| random_row(&mut rng, k)).collect();
    let preds = ok(PredictionSet::new(probs, truth, names(k)))?;
    let r = ok(evaluate(&preds, IntervalMetric::Accuracy))?;
    let (kp, mc, j) = (r.kappa.unwrap_or(f64::NAN), r.mcc.unwrap_or(f64::NAN), r.youden_macro.unwrap_or(f64::NAN));
    let auc = r.auc_macro.unwrap_or(f64::NAN);
    ensure!(kp.abs() < 0.02 && mc.abs() < 0.02 && j.abs() < 0.02, "independent: kappa {kp}, mcc {mc}, J {j}");
    ensure!(auc > 0.48 && auc < 0.52, "independent: macro AUC {auc}");
    Ok(format!("diagonal identities exact; independent kappa {kp:+.4}, MCC {mc:+.4}, J {j:+.4}, AUC {auc:.4}"))
}

// ---------------------------------------------------------------- 3

fn random_kind(rng: &mut impl Rng, kind: usize) -> (LayerKind, Vec<usize>) {
    let c = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    match kind {
        0 => {
            let kernel = [1, 3][rng.random_range(0..2)];
            (
                LayerKind::Conv2d {
                    in_channels: c,
                    out_channels: rng.random_range(1..=3),
                    kernel,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=kernel / 2),
                },
                vec![c, h, w],
            )
        }
        1 => {
            let kernel = [1, 3][rng.random_range(0..2)];
            (
                LayerKind::DepthwiseConv2d {
                    channels: c,
                    kernel,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=kernel / 2),
                },
                vec![c, h, w],
            )
        }
        2 => (
            LayerKind::PointwiseConv2d {
                in_channels: c,
                out_channels: rng.random_range(1..=4),
            },
            vec![c, h, w],
        ),
        3 => {
            let inputs = rng.random_range(1..=8);
            (
                LayerKind::Dense {
                    inputs,
                    outputs: rng.random_range(1..=6),
                },
                vec![inputs],
            )
        }
        4 => (LayerKind::Relu, vec![c, h, w]),
        5 => (LayerKind::GlobalAvgPool, vec![c, h, w]),
        6 => (LayerKind::Softmax, vec![rng.random_range(2..=8)]),
        7 => (LayerKind::ChannelAffine { channels: c }, vec![c, h, w]),
        _ => (
            LayerKind::ConcatDenseBlock {
                in_channels: c,
                growth: rng.random_range(1..=3),
                kernel: [1, 3][rng.random_range(0..2)],
            },
            vec![c, h, w],
        ),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn weighted_output(layer: &Layer, x: &Tensor, r: &[f64]) -> Result<f64, String> {
    let (y, _) = ok(layer.forward(x))?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

fn criterion_3() -> Outcome {
    const EPS: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for kind_id in 0..9 {
        let mut shapes = 0;
        while shapes < 20 {
            let (kind, in_shape) = random_kind(&mut rng, kind_id);
            if kind.output_shape(&in_shape).is_err() {
                continue;
            }
            let label = kind.label();
            let mut layer = ok(Layer::init(LayerSpec::new("g", kind), &mut rng))?;
            for p in &mut layer.params {
                p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            let n: usize = in_shape.iter().product();
            // keep activations away from the ReLU kink
            let data = (0..n)
                .map(|_| {
                    let m = rng.random_range(0.05..1.0);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let x = ok(Tensor::new(in_shape.clone(), data))?;
            let (y, cache) = ok(layer.forward(&x))?;
            let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grad_out = ok(Tensor::new(y.shape().to_vec(), r.clone()))?;
            let grads = ok(layer.backward(&cache, &grad_out, true))?;

            let analytic_x = grads.input.ok_or("no input gradient")?;
            let mut numeric_x = vec![0.0; n];
            for (i, slot) in numeric_x.iter_mut().enumerate() {
                let mut plus = x.clone();
                plus.data_mut()[i] += EPS;
                let mut minus = x.clone();
                minus.data_mut()[i] -= EPS;
                *slot = (weighted_output(&layer, &plus, &r)? - weighted_output(&layer, &minus, &r)?) / (2.0 * EPS);
            }
            let e = rel_err(analytic_x.data(), &numeric_x);
            ensure!(e < 1e-4, "{label} {in_shape:?}: input gradient relative error {e:.2e}");
            worst = worst.max(e);

            for (t, analytic) in grads.params.iter().enumerate() {
                let mut numeric = vec![0.0; analytic.len()];
                for (i, slot) in numeric.iter_mut().enumerate() {
                    let mut plus = layer.clone();
                    plus.params[t].data_mut()[i] += EPS;
                    let mut minus = layer.clone();
                    minus.params[t].data_mut()[i] -= EPS;
                    *slot = (weighted_output(&plus, &x, &r)? - weighted_output(&minus, &x, &r)?) / (2.0 * EPS);
                }
                let e = rel_err(analytic.data(), &numeric);
                ensure!(e < 1e-4, "{label} {in_shape:?}: parameter {t} relative error {e:.2e}");
                worst = worst.max(e);
            }
            shapes += 1;
            checked += 1;
        }
    }
    Ok(format!("9 layer kinds x 20 shapes ({checked} cases), max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

/// Synthetic dataset encoded from `records` flows per class and grown to
/// `per_class` images.
fn synthetic_images(records: usize, per_class: usize, seed: u64) -> Result<ImageDataset, String> {
    let table = ok(generate(&SynthConfig {
        records_per_class: records,
        seed,
        ..Default::default()
    }))?;
    let (table, _) = ok(clean(&table))?;
    let ds = ok(encode_images(&table, &EncodeOptions::default()))?;
    ok(augment(&ds, per_class, 4.0, seed))
}

fn criterion_4() -> Outcome {
    let ds = synthetic_images(720, 40, 4)?;
    let split = ok(stratified_split(&ds, 0.2, 0.2, 4))?;
    let mut model = ok(build(&ModelConfig::new(Family::MicroMobile, 4), 4))?;
    ok(model.calibrate_on_split(&ds, &split))?;
    let cfg = TrainConfig {
        epochs: 5,
        seed: 4,
        ..Default::default()
    };
    let (trained, _) = ok(train(&model, &ds, &split, &cfg))?;

    let mut frozen_params = 0;
    let mut trainable_changed = false;
    for (before, after) in model.network.layers.iter().zip(&trained.network.layers) {
        let same = before
            .params
            .iter()
            .zip(&after.params)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if before.spec.trainable {
            trainable_changed |= !same;
        } else {
            ensure!(same, "frozen layer {} changed", before.spec.name);
            frozen_params += before.param_count();
        }
    }
    ensure!(trainable_changed, "no trainable parameter moved");

    let summary = ok(trained.summary())?;
    let part = summary.partition;
    let total: usize = trained.network.layers.iter().map(Layer::param_count).sum();
    let trainable: usize = trained
        .network
        .layers
        .iter()
        .filter(|l| l.spec.trainable)
        .map(Layer::param_count)
        .sum();
    ensure!(part.trainable + part.non_trainable == part.total, "partition {part:?} does not add up");
    ensure!(part.total == total && part.trainable == trainable, "partition {part:?} vs enumeration {trainable}/{total}");
    ensure!(part.non_trainable == frozen_params, "non-trainable {} vs frozen {frozen_params}", part.non_trainable);
    Ok(format!(
        "{} frozen parameters bit-identical; {} trainable + {} non-trainable = {} total",
        frozen_params, part.trainable, part.non_trainable, part.total
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let cases: [(&str, Vec<f64>, Vec<f64>); 3] = [
        (
            "improving",
            (0..10).map(|i| 1.0 - 0.05 * i as f64).collect(),
            vec![0.001; 10],
        ),
        (
            "flat",
            vec![1.0; 7],
            [vec![0.001; 4], vec![0.0005; 3]].concat(),
        ),
        (
            "double plateau",
            vec![1.0, 1.0, 1.0, 1.0, 0.9, 0.9, 0.9, 0.9, 0.8],
            [vec![0.001; 4], vec![0.0005; 4], vec![0.00025]].concat(),
        ),
    ];
    for (name, losses, want) in &cases {
        let got = ok(plateau_schedule(losses, 0.5, 3, 0.001))?;
        ensure!(&got == want, "{name}: {got:?}, expected {want:?}");
    }
    Ok("improving, flat and double-plateau sequences match exactly".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let features = 60;
    let counts = [400usize, 190, 540];
    let mut records = Vec::new();
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            records.push(FlowRecord {
                features: (0..features).map(|f| rng.random_range(-5.0..20.0) * (f + 1) as f64).collect(),
                label: class,
                complete: true,
            });
        }
    }
    // plant exact extremes of column 0 in class 0's first image
    records[3].features[0] = -1000.0;
    records[70].features[0] = 5000.0;
    let table = ok(FlowTable::new(
        records.clone(),
        (0..features).map(|f| format!("f{f}")).collect(),
        names(counts.len()),
    ))?;
    let ds = ok(encode_images(&table, &EncodeOptions::default()))?;

    let (mut lo, mut hi) = (vec![f64::INFINITY; features], vec![f64::NEG_INFINITY; features]);
    for r in &records {
        for (f, &v) in r.features.iter().enumerate() {
            lo[f] = lo[f].min(v);
            hi[f] = hi[f].max(v);
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        ensure!(ds.class_counts[class] == count / 180, "class {class}: {} images", ds.class_counts[class]);
    }
    let mut checked = 0usize;
    for (class, &count) in counts.iter().enumerate() {
        let own: Vec<&FlowRecord> = records.iter().filter(|r| r.label == class).collect();
        let images: Vec<&TrafficImage> = ds.images.iter().filter(|i| i.label == class).collect();
        for (j, img) in images.iter().enumerate() {
            for c in 0..3 {
                for r in 0..60 {
                    let rec = own[j * 180 + 60 * c + r];
                    for f in 0..features {
                        let want = (255.0 * (rec.features[f] - lo[f]) / (hi[f] - lo[f])).round() as u8;
                        let got = img.get(c, r, f);
                        ensure!(got == want, "class {class} image {j} ({c},{r},{f}): {got} vs {want}");
                        checked += 1;
                    }
                }
            }
        }
        let _ = count;
    }
    let first = ds.images.iter().find(|i| i.label == 0).ok_or("no class-0 image")?;
    ensure!(first.get(0, 3, 0) == 0 && first.get(1, 10, 0) == 255, "extremes did not map to 0/255");

    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("fixture.trim");
    ok(save_dataset(&ds, None, &path))?;
    let (back, split) = ok(load_dataset(&path))?;
    ensure!(back == ds && split.is_none(), "round trip changed the dataset");
    let again = dir.path().join("again.trim");
    ok(save_dataset(&back, None, &again))?;
    ensure!(
        ok(std::fs::read(&path))? == ok(std::fs::read(&again))?,
        "re-saved container differs"
    );
    Ok(format!("{checked} pixels match, extremes map to 0/255, round trip bit-identical"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let images = (0..400).map(|i| TrafficImage::filled(2, 2, (i % 251) as u8, i % 4)).collect();
    let ds = ok(ImageDataset::new(2, 2, images, names(4)))?;
    let a = ok(stratified_split(&ds, 0.2, 0.2, 7))?;
    let b = ok(stratified_split(&ds, 0.2, 0.2, 7))?;
    let c = ok(stratified_split(&ds, 0.2, 0.2, 8))?;
    ensure!(a == b, "same seed produced different splits");
    ensure!(a != c, "seed has no effect");
    for class in 0..4 {
        let per = |idx: &[usize]| idx.iter().filter(|&&i| ds.images[i].label == class).count();
        let got = (per(&a.train), per(&a.validation), per(&a.test));
        ensure!(got == (64, 16, 20), "class {class}: {got:?}");
    }
    let mut all: Vec<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
    all.sort_unstable();
    ensure!(all == (0..400).collect::<Vec<_>>(), "split is not a partition");
    Ok("64/16/20 per class, seed-deterministic".into())
}

// ---------------------------------------------------------------- 8

fn desk_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut cfg = ok(RunConfig::load(&desk_config()))?;
    let dir = ok(tempfile::tempdir())?;
    cfg.out = dir.path().join("desk");

    let table = ok(generate(&cfg.data.synth))?;
    ensure!(cfg.data.synth.records_per_class >= 720, "generator configured below 720 records/class");
    let (table, _) = ok(clean(&table))?;
    let raw = ok(encode_images(&table, &EncodeOptions::default()))?;
    ensure!(raw.class_counts.iter().all(|&c| c >= 4), "before augmentation: {:?}", raw.class_counts);

    let run = ok(Run::open(cfg.clone()))?;
    ok(run.run_all())?;
    let elapsed = start.elapsed();
    let (ds, _) = ok(load_dataset(&run.path("dataset.trim")))?;
    ensure!(ds.class_counts.iter().all(|&c| c == 500), "after augmentation: {:?}", ds.class_counts);

    let mut lines = Vec::new();
    for entry in &cfg.models {
        let name = entry.name();
        let eval: Stamped<EvalArtifact> = ok(read_json(&run.path(&format!("eval/{name}.eval.json"))))?;
        let m = &eval.data.metrics;
        let mcc = m.mcc.unwrap_or(f64::NAN);
        let auc = m.auc_macro.unwrap_or(f64::NAN);
        ensure!(
            m.accuracy >= 0.95 && mcc >= 0.90 && auc >= 0.98,
            "{name}: accuracy {:.4}, MCC {mcc:.4}, macro AUC {auc:.4}",
            m.accuracy
        );
        lines.push(format!("{name} acc {:.3} MCC {mcc:.3} AUC {auc:.3}", m.accuracy));
        for file in [
            format!("roc_{name}.csv"),
            format!("learning_curve_{name}.csv"),
            format!("confusion_{name}.csv"),
        ] {
            ensure!(run.path(&format!("report/{file}")).is_file(), "report lacks {file}");
        }
    }
    for table in [TABLE_COST, TABLE_PERFORMANCE, TABLE_RELIABILITY, TABLE_RANKING] {
        ensure!(run.path(&format!("report/{table}")).is_file(), "report lacks {table}");
    }
    ensure!(elapsed < Duration::from_secs(600), "run took {:.0} s", elapsed.as_secs_f64());
    Ok(format!("{}; {:.0} s", lines.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 9

/// Exact Shapley values of a game given as values on every coalition mask.
fn shapley_enumeration(v: &[f64], m: usize) -> Vec<f64> {
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    (0..m)
        .map(|i| {
            (0..1usize << m)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    fact(size) * fact(m - size - 1) / fact(m) * (v[s | 1 << i] - v[s])
                })
                .sum()
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let regions = ok(RegionPartition::grid(4, 4, 2, 2))?;
    let m = regions.len();
    ensure!(m == 4, "expected 4 regions, got {m}");
    let image = TrafficImage::filled(4, 4, 255, 0);
    let baseline = TrafficImage::filled(4, 4, 0, 0);
    // top-left pixel of each 2x2 cell
    let anchors = [(0, 0), (0, 2), (2, 0), (2, 2)];
    let (mut worst, mut worst_eff, mut worst_sym): (f64, f64, f64) = (0.0, 0.0, 0.0);

    for g in 0..50 {
        let symmetric = g % 5 == 0;
        let by_size: Vec<f64> = (0..=m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..1usize << m)
            .map(|s| {
                if symmetric {
                    by_size[s.count_ones() as usize]
                } else {
                    rng.random_range(-2.0..2.0)
                }
            })
            .collect();
        let f = |img: &TrafficImage| -> trafx::Result<f64> {
            let mask = anchors
                .iter()
                .enumerate()
                .filter(|(_, &(r, c))| img.get(0, r, c) > 127)
                .fold(0usize, |acc, (i, _)| acc | 1 << i);
            Ok(v[mask])
        };
        let ex = ok(kernel_shap(&f, &image, &baseline, &regions, 0, 1 << m, g))?;
        ensure!(ex.exhaustive, "game {g}: not run in exhaustive mode");
        let exact = shapley_enumeration(&v, m);
        for (a, b) in ex.region_values.iter().zip(&exact) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst <= 1e-8, "game {g}: {:?} vs exact {exact:?}", ex.region_values);
        let eff = (ex.region_values.iter().sum::<f64>() - (v[(1 << m) - 1] - v[0])).abs();
        worst_eff = worst_eff.max(eff);
        ensure!(eff <= 1e-6, "game {g}: efficiency gap {eff:.2e}");
        if symmetric {
            let phi = &ex.region_values;
            let spread = phi.iter().map(|p| (p - phi[0]).abs()).fold(0.0, f64::max);
            worst_sym = worst_sym.max(spread);
            ensure!(spread <= 1e-10, "game {g}: symmetric players differ by {spread:.2e}");
        }
    }
    Ok(format!(
        "50 games: max |phi - exact| {worst:.1e}, efficiency {worst_eff:.1e}, symmetry {worst_sym:.1e}"
    ))
}

// ---------------------------------------------------------------- 10

fn is_normalized(values: &[f64]) -> bool {
    let max = values.iter().copied().fold(0.0, f64::max);
    values.iter().all(|&v| (0.0..=1.0).contains(&v)) && (max == 1.0 || values.iter().all(|&v| v == 0.0))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w, k, classes) = (6usize, 5usize, 3usize, 3usize);
    let conv_w: Vec<f64> = (0..k * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let conv_b: Vec<f64> = (0..k).map(|_| rng.random_range(-0.2..0.2)).collect();
    let dense_w: Vec<f64> = (0..classes * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dense_b: Vec<f64> = (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect();
    let layers = vec![
        ok(Layer::new(
            LayerSpec::new(
                "conv",
                LayerKind::Conv2d {
                    in_channels: 1,
                    out_channels: k,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ),
            vec![ok(Tensor::new(vec![k, 1, 3, 3], conv_w.clone()))?, Tensor::vector(conv_b.clone())],
        ))?,
        ok(Layer::new(LayerSpec::new("relu", LayerKind::Relu), vec![]))?,
        ok(Layer::new(LayerSpec::new("pool", LayerKind::GlobalAvgPool), vec![]))?,
        ok(Layer::new(
            LayerSpec::new("fc", LayerKind::Dense { inputs: k, outputs: classes }),
            vec![ok(Tensor::new(vec![classes, k], dense_w.clone()))?, Tensor::vector(dense_b)],
        ))?,
        ok(Layer::new(LayerSpec::new("softmax", LayerKind::Softmax), vec![]))?,
    ];
    let net = ok(Network::new(layers, vec![1, h, w], 3))?;

    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = ok(Tensor::new(vec![1, h, w], x.clone()))?;
        // activations A_k = relu(conv_k(x)) with zero padding
        let mut act = vec![0.0; k * h * w];
        for ch in 0..k {
            for r in 0..h {
                for c in 0..w {
                    let mut s = conv_b[ch];
                    for dr in 0..3 {
                        for dc in 0..3 {
                            let (rr, cc) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                s += conv_w[ch * 9 + dr * 3 + dc] * x[rr as usize * w + cc as usize];
                            }
                        }
                    }
                    act[ch * h * w + r * w + c] = s.max(0.0);
                }
            }
        }
        for target in 0..classes {
            let mut cam: Vec<f64> = (0..h * w)
                .map(|p| {
                    (0..k)
                        .map(|ch| dense_w[target * k + ch] / (h * w) as f64 * act[ch * h * w + p])
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect();
            let max = cam.iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                cam.iter_mut().for_each(|v| *v /= max);
            }
            let got = ok(grad_cam_network(&net, &input, target, None, h, w))?;
            ensure!(is_normalized(&got), "trial {trial}, class {target}: map violates [0, 1] contract");
            for (a, b) in got.iter().zip(&cam) {
                worst = worst.max((a - b).abs());
            }
            ensure!(worst <= 1e-6, "trial {trial}, class {target}: deviation {worst:.2e}");
        }
    }

    let ds = synthetic_images(360, 2, 10)?;
    let mut maps = 0;
    for family in [Family::MicroMobile, Family::MicroDense] {
        let model = ok(build(&ModelConfig::new(family, 4), 10))?;
        for img in &ds.images {
            for class in 0..4 {
                let map = ok(grad_cam(&model, img, class, None))?;
                ensure!(is_normalized(&map.values), "{} map violates [0, 1] contract", family.name());
                maps += 1;
            }
        }
    }
    Ok(format!("closed form within {worst:.1e}; {maps} model maps normalized"))
}

// ---------------------------------------------------------------- 11

fn mean_compactness(model: &Model, images: &[&TrafficImage]) -> Result<f64, String> {
    let mut total = 0.0;
    for img in images {
        total += spatial_compactness(&ok(grad_cam(model, img, img.label, None))?, DEFAULT_TOP_FRACTION);
    }
    Ok(total / images.len() as f64)
}

fn criterion_11() -> Outcome {
    let seeds = 10u64;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..seeds {
        let ds = synthetic_images(720, 200, 100 + seed)?;
        let split = ok(stratified_split(&ds, 0.2, 0.2, seed))?;
        let mut model = ok(build(&ModelConfig::new(Family::MicroMobile, 4), seed))?;
        ok(model.calibrate_on_split(&ds, &split))?;
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..Default::default()
        };
        let (trained, _) = ok(train(&model, &ds, &split, &cfg))?;
        let mut shuffled = trained.clone();
        shuffled.shuffle_parameters(seed + 1000);
        let test = ds.select(&split.test);
        let a = mean_compactness(&trained, &test)?;
        let b = mean_compactness(&shuffled, &test)?;
        if a > b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    // one-sided sign test under H0: P(win) = 1/2
    let p: f64 = (wins..=seeds as usize)
        .map(|w| {
            let c = (0..w).fold(1.0, |acc, i| acc * (seeds as usize - i) as f64 / (i + 1) as f64);
            c / 2f64.powi(seeds as i32)
        })
        .sum();
    let detail = format!("trained wins {wins}/{seeds}, sign-test p = {p:.4} (trained/shuffled: {})", pairs.join(" "));
    ensure!(p < 0.05, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 12

struct Sleeper;

impl Predictor for Sleeper {
    fn predict_one(&self, _: &TrafficImage) -> trafx::Result<Vec<f64>> {
        std::thread::sleep(Duration::from_millis(1));
        Ok(vec![1.0])
    }
}

fn criterion_12() -> Outcome {
    let images: Vec<TrafficImage> = (0..50).map(|i| TrafficImage::filled(60, 60, i as u8, 0)).collect();
    let refs: Vec<&TrafficImage> = images.iter().collect();
    let opts = InferenceOptions { trials: 5, threads: 1 };
    let t = ok(time_inference(&Sleeper, &refs, opts))?;
    let ms = t.mean * 1e3;
    ensure!((1.0..=1.5).contains(&ms), "sleeper mean {ms:.3} ms/sample");

    let model = ok(build(&ModelConfig::new(Family::MicroMobile, 4), 12))?;
    let t = ok(time_inference(&model, &refs[..20], opts))?;
    let cov = t.coefficient_of_variation();
    ensure!(cov < 0.5, "model latency CoV {cov:.3}");
    Ok(format!(
        "sleeper {ms:.3} ms/sample; model {:.3} ms/sample, CoV {cov:.3}",
        t.mean * 1e3
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("metric oracle equivalence", criterion_1),
        ("perfect and independent identities", criterion_2),
        ("layer gradient checks", criterion_3),
        ("freeze contract", criterion_4),
        ("plateau scheduler", criterion_5),
        ("encoder fidelity", criterion_6),
        ("stratified split", criterion_7),
        ("desk-scale end-to-end run", criterion_8),
        ("Shapley exactness", criterion_9),
        ("Grad-CAM closed form", criterion_10),
        ("attribution sanity ordering", criterion_11),
        ("latency harness", criterion_12),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let budgets = [30.0, f64::INFINITY, 60.0, f64::INFINITY, f64::INFINITY, 5.0];

    let mut failed = 0;
    let mut ran = 0;
    for (i, (title, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match result {
            Ok(detail) if secs > budgets.get(i).copied().unwrap_or(f64::INFINITY) => {
                Err(format!("{detail}; exceeded runtime budget"))
            }
            other => other,
        };
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status} {title}: {detail} [{secs:.1} s]");
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var("TRAFX_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
