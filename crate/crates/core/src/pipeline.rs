//! Pipeline stages over a run directory.
//!
//! Layout under the run directory:
//! `dataset.trim`, `clean_report.json`, `split.json`, `models/`, `eval/`,
//! `explain/`, `bench/`, `report/` and the append-only `manifest.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{environment_note, time_inference, time_training, BenchReport, InferenceOptions};
use crate::codec::{encode_images, load_dataset, save_dataset, stratified_split, DatasetSplit, EncodeOptions, ImageDataset, TrafficImage};
use crate::config::{ModelEntry, RunConfig};
use crate::error::{Error, Result};
use crate::explain::{assess, grad_cam_batch, model_shap, ExplainQualityReport, RegionPartition};
use crate::flow::{clean, parse_flows, CleanReport, FlowSchema, FlowTable};
use crate::metrics::{confusion, evaluate, roc_auc, ConfusionMatrix, MetricsReport, RocReport};
use crate::nn::{ParamPartition, TrainHistory};
use crate::report::{emit_report, ModelEvaluation, ReportInputs};
use crate::synth::{augment, generate};
use crate::zoo::{build, train, Model, ModelSummary};

pub const MANIFEST: &str = "manifest.jsonl";
pub const LOCK: &str = ".lock";
pub const DATASET: &str = "dataset.trim";
pub const CLEAN_REPORT: &str = "clean_report.json";
pub const SPLIT: &str = "split.json";

/// JSON artifact tagged with the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub seed: u64,
    pub config_hash: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the run directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Consistency(format!(
                "run directory {} is locked by another invocation (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A locked run directory plus the validated configuration driving it.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    _lock: RunLock,
}

struct StageLog {
    stage: String,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    start: Instant,
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out.clone();
        let lock = RunLock::acquire(&dir)?;
        Ok(Run {
            config_hash: config.hash(),
            dir,
            config,
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn begin(&self, stage: &str) -> StageLog {
        log::info!("stage {stage}");
        StageLog {
            stage: stage.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Checks an upstream artifact exists, is unmodified and came from the
    /// same seed.
    fn require(&self, log: &mut StageLog, path: &Path) -> Result<()> {
        if !path.is_file() {
            return Err(Error::Dependency {
                stage: log.stage.clone(),
                path: path.to_path_buf(),
            });
        }
        let rel = self.rel(path);
        let sha = sha256_file(path)?;
        let producer = read_manifest(&self.dir)?
            .into_iter()
            .rev()
            .find(|e| e.outputs.iter().any(|o| o.path == rel));
        if let Some(entry) = producer {
            let recorded = entry.outputs.iter().find(|o| o.path == rel).map(|o| o.sha256.clone());
            if recorded.as_deref() != Some(sha.as_str()) {
                return Err(Error::Consistency(format!(
                    "{rel} changed since stage {} wrote it",
                    entry.stage
                )));
            }
            if entry.seed != self.config.seed {
                return Err(Error::Consistency(format!(
                    "{rel} was produced with seed {}, this run uses seed {}",
                    entry.seed, self.config.seed
                )));
            }
            if entry.config_hash != self.config_hash {
                log::warn!("{rel} was produced under a different configuration");
            }
        }
        log.inputs.push(FileRecord { path: rel, sha256: sha });
        Ok(())
    }

    fn produced(&self, log: &mut StageLog, path: &Path) -> Result<()> {
        log.outputs.push(FileRecord {
            path: self.rel(path),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn write_bytes(&self, log: &mut StageLog, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        self.produced(log, path)
    }

    fn write_json<T: Serialize>(&self, log: &mut StageLog, path: &Path, data: T) -> Result<()> {
        let stamped = Stamped {
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            data,
        };
        let mut bytes =
            serde_json::to_vec_pretty(&stamped).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        bytes.push(b'\n');
        self.write_bytes(log, path, &bytes)
    }

    fn finish(&self, log: StageLog) -> Result<ManifestEntry> {
        let entry = ManifestEntry {
            stage: log.stage,
            inputs: log.inputs,
            outputs: log.outputs,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            wall_time_s: log.start.elapsed().as_secs_f64(),
        };
        let path = self.path(MANIFEST);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        Ok(entry)
    }

    fn models(&self, only: Option<&str>) -> Result<Vec<ModelEntry>> {
        match only {
            Some(name) => Ok(vec![self.config.model(name)?.clone()]),
            None => Ok(self.config.models.clone()),
        }
    }

    fn load_inputs(&self, log: &mut StageLog) -> Result<(ImageDataset, DatasetSplit)> {
        let ds_path = self.path(DATASET);
        let split_path = self.path(SPLIT);
        self.require(log, &ds_path)?;
        self.require(log, &split_path)?;
        let (dataset, _) = load_dataset(&ds_path)?;
        let split: Stamped<DatasetSplit> = read_json(&split_path)?;
        if split.data.total() != dataset.len() {
            return Err(Error::Consistency(format!(
                "split covers {} images, dataset has {}",
                split.data.total(),
                dataset.len()
            )));
        }
        Ok((dataset, split.data))
    }

    fn load_model(&self, log: &mut StageLog, name: &str) -> Result<Model> {
        let path = self.path(&format!("models/{name}.ckpt"));
        self.require(log, &path)?;
        Model::load(&path)
    }

    /// Reads the flow table (CSV or synthetic), cleans it, encodes images
    /// and optionally augments them.
    pub fn encode(&self) -> Result<ManifestEntry> {
        let mut log = self.begin("encode");
        let data = &self.config.data;
        let table: FlowTable = match &data.input {
            Some(path) => {
                self.require(&mut log, path)?;
                let schema = match &data.schema_file {
                    Some(p) => {
                        self.require(&mut log, p)?;
                        FlowSchema::from_json_file(p)?
                    }
                    None => data.schema.clone(),
                };
                let f = File::open(path).map_err(|e| Error::io(path, e))?;
                parse_flows(std::io::BufReader::new(f), &schema)?
            }
            None => generate(&data.synth)?,
        };
        let (table, report): (FlowTable, CleanReport) = clean(&table)?;
        let opts = EncodeOptions {
            width: self.config.encode.width,
            records_per_image: self.config.encode.records_per_image,
            table_id: 0,
        };
        let mut dataset = encode_images(&table, &opts)?;
        if let Some(n) = data.augment_per_class {
            dataset = augment(&dataset, n, data.augment_noise, self.config.seed)?;
        }
        self.write_json(&mut log, &self.path(CLEAN_REPORT), &report)?;
        let ds_path = self.path(DATASET);
        save_dataset(&dataset, None, &ds_path)?;
        self.produced(&mut log, &ds_path)?;
        self.finish(log)
    }

    pub fn split(&self) -> Result<ManifestEntry> {
        let mut log = self.begin("split");
        let ds_path = self.path(DATASET);
        self.require(&mut log, &ds_path)?;
        let (dataset, _) = load_dataset(&ds_path)?;
        let split = stratified_split(
            &dataset,
            self.config.split.val_frac,
            self.config.split.test_frac,
            self.config.seed,
        )?;
        self.write_json(&mut log, &self.path(SPLIT), &split)?;
        self.finish(log)
    }

    pub fn train(&self, only: Option<&str>) -> Result<ManifestEntry> {
        let models = self.models(only)?;
        let mut log = self.begin("train");
        let (dataset, split) = self.load_inputs(&mut log)?;
        for entry in models {
            let name = entry.name();
            let config = entry.model_config(dataset.num_classes(), dataset.width);
            let mut model = build(&config, self.config.seed)?;
            model.calibrate_on_split(&dataset, &split)?;
            let ((trained, history), secs) = time_training(|| train(&model, &dataset, &split, &self.config.train))?;
            let ckpt = self.path(&format!("models/{name}.ckpt"));
            self.write_bytes(&mut log, &ckpt, &trained.to_checkpoint_bytes()?)?;
            self.write_json(&mut log, &self.path(&format!("models/{name}.summary.json")), trained.summary()?)?;
            self.write_json(&mut log, &self.path(&format!("models/{name}.history.json")), &history)?;
            let mut csv = Vec::new();
            history.write_csv(&mut csv)?;
            self.write_bytes(&mut log, &self.path(&format!("models/{name}.history.csv")), &csv)?;
            // wall time kept apart so the other training artifacts are reproducible
            self.write_json(&mut log, &self.path(&format!("models/{name}.time.json")), secs)?;
        }
        self.finish(log)
    }

    pub fn eval(&self, only: Option<&str>) -> Result<ManifestEntry> {
        let models = self.models(only)?;
        let mut log = self.begin("eval");
        let (dataset, split) = self.load_inputs(&mut log)?;
        for entry in models {
            let name = entry.name();
            let model = self.load_model(&mut log, &name)?;
            let preds = model.predict_par(&dataset.select(&split.test), &dataset.class_names)?;
            let evaluation = EvalArtifact {
                params: model.network.param_partition(),
                metrics: evaluate(&preds, self.config.interval_metric)?,
                roc: roc_auc(&preds),
                confusion: confusion(&preds),
            };
            let mut roc = Vec::new();
            evaluation.roc.write_csv(&dataset.class_names, &mut roc)?;
            self.write_bytes(&mut log, &self.path(&format!("eval/{name}.roc.csv")), &roc)?;
            let mut cm = Vec::new();
            evaluation.confusion.write_csv(&dataset.class_names, &mut cm)?;
            self.write_bytes(&mut log, &self.path(&format!("eval/{name}.confusion.csv")), &cm)?;
            self.write_json(&mut log, &self.path(&format!("eval/{name}.eval.json")), &evaluation)?;
        }
        self.finish(log)
    }

    pub fn explain(&self, only: Option<&str>) -> Result<ManifestEntry> {
        let models = self.models(only)?;
        let mut log = self.begin("explain");
        let (dataset, split) = self.load_inputs(&mut log)?;
        let opts = &self.config.explain;
        let mut picked: Vec<&TrafficImage> = Vec::new();
        for class in 0..dataset.num_classes() {
            picked.extend(
                split
                    .test
                    .iter()
                    .map(|&i| &dataset.images[i])
                    .filter(|img| img.label == class)
                    .take(opts.samples_per_class),
            );
        }
        if picked.is_empty() {
            return Err(Error::DegenerateDataset("no test images to explain".into()));
        }
        let regions = RegionPartition::grid(dataset.height, dataset.width, opts.shap_cell, opts.shap_cell)?;
        let baseline = TrafficImage::filled(dataset.height, dataset.width, 0, 0);
        for entry in models {
            let name = entry.name();
            let model = self.load_model(&mut log, &name)?;
            let cams = grad_cam_batch(&model, &picked, opts.tap.as_deref())?;
            let shap = picked
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    model_shap(&model, img, &baseline, &regions, opts.shap_budget, self.config.seed + i as u64)
                        .map(|e| e.map)
                })
                .collect::<Result<Vec<_>>>()?;
            let quality = assess(&cams, &picked, &shap, opts.top_fraction, opts.background_threshold)?;
            self.write_json(&mut log, &self.path(&format!("explain/{name}.quality.json")), quality)?;
            for (i, img) in picked.iter().enumerate().take(opts.overlays) {
                for (kind, map) in [("gradcam", &cams[i]), ("shap", &shap[i])] {
                    let png = self.path(&format!("explain/{name}_{kind}_{i}.png"));
                    map.export_overlay_png(img, &png)?;
                    self.produced(&mut log, &png)?;
                    let mut csv = Vec::new();
                    map.write_csv(&mut csv)?;
                    self.write_bytes(&mut log, &self.path(&format!("explain/{name}_{kind}_{i}.csv")), &csv)?;
                }
            }
        }
        self.finish(log)
    }

    pub fn bench(&self, only: Option<&str>) -> Result<ManifestEntry> {
        let models = self.models(only)?;
        let mut log = self.begin("bench");
        let (dataset, split) = self.load_inputs(&mut log)?;
        let images = dataset.select(&split.test);
        for entry in models {
            let name = entry.name();
            let model = self.load_model(&mut log, &name)?;
            let time_path = self.path(&format!("models/{name}.time.json"));
            self.require(&mut log, &time_path)?;
            let train_secs: Stamped<f64> = read_json(&time_path)?;
            let timing = time_inference(
                &model,
                &images,
                InferenceOptions {
                    trials: self.config.bench.trials,
                    threads: self.config.bench.threads,
                },
            )?;
            let report = BenchReport {
                model: name.clone(),
                train_wall_time: train_secs.data,
                inference_mean: timing.mean,
                inference_std: timing.std,
                trials: timing.per_trial.len(),
                sample_count: timing.samples,
                environment: environment_note(),
            };
            report.validate()?;
            self.write_json(&mut log, &self.path(&format!("bench/{name}.bench.json")), &report)?;
        }
        self.finish(log)
    }

    /// Assembles the report from every configured model's artifacts.
    pub fn report(&self) -> Result<ManifestEntry> {
        let mut log = self.begin("report");
        let ds_path = self.path(DATASET);
        self.require(&mut log, &ds_path)?;
        let (dataset, _) = load_dataset(&ds_path)?;
        let mut inputs = ReportInputs {
            class_names: dataset.class_names.clone(),
            seed: self.config.seed,
            config_hash: Some(self.config_hash.clone()),
            ..Default::default()
        };
        for entry in &self.config.models {
            let name = entry.name();
            let mut load = |rel: String| -> Result<PathBuf> {
                let p = self.path(&rel);
                self.require(&mut log, &p)?;
                Ok(p)
            };
            let eval: Stamped<EvalArtifact> = read_json(&load(format!("eval/{name}.eval.json"))?)?;
            let bench: Stamped<BenchReport> = read_json(&load(format!("bench/{name}.bench.json"))?)?;
            let quality: Stamped<ExplainQualityReport> = read_json(&load(format!("explain/{name}.quality.json"))?)?;
            let history: Stamped<TrainHistory> = read_json(&load(format!("models/{name}.history.json"))?)?;
            inputs.evaluations.push(ModelEvaluation {
                model: name.clone(),
                params: eval.data.params,
                metrics: eval.data.metrics,
                roc: eval.data.roc,
                confusion: eval.data.confusion,
            });
            inputs.bench.push(bench.data);
            inputs.quality.push((name.clone(), quality.data));
            inputs.histories.push((name, history.data));
        }
        let bundle = emit_report(&inputs)?;
        for (file, bytes) in &bundle.files {
            self.write_bytes(&mut log, &self.path(&format!("report/{file}")), bytes)?;
        }
        self.finish(log)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<ManifestEntry>> {
        Ok(vec![
            self.encode()?,
            self.split()?,
            self.train(None)?,
            self.eval(None)?,
            self.explain(None)?,
            self.bench(None)?,
            self.report()?,
        ])
    }
}

/// Test-set evaluation persisted by the eval stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub params: ParamPartition,
    pub metrics: MetricsReport,
    pub roc: RocReport,
    pub confusion: ConfusionMatrix,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Model summary artifact, re-exported for callers reading `models/*.summary.json`.
pub type SummaryArtifact = Stamped<ModelSummary>;
