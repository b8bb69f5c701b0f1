//! Wall-clock training time and per-sample inference latency.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::TrafficImage;
use crate::error::{Error, Result};
use crate::zoo::Predictor;

pub const MIN_TRIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    /// Seconds.
    pub train_wall_time: f64,
    /// Seconds per sample.
    pub inference_mean: f64,
    /// Sample standard deviation over trials, seconds per sample.
    pub inference_std: f64,
    pub trials: usize,
    pub sample_count: usize,
    pub environment: String,
}

impl BenchReport {
    pub fn validate(&self) -> Result<()> {
        let times = [self.train_wall_time, self.inference_mean, self.inference_std];
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) || self.trials == 0 {
            return Err(Error::Bench(format!("invalid timings for {}", self.model)));
        }
        Ok(())
    }
}

/// OS, architecture and available parallelism, for the report's free-text note.
pub fn environment_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {cpus} logical cpus, rayon pool {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Runs `f` once and returns its output with the elapsed monotonic wall time in seconds.
pub fn time_training<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    let secs = start.elapsed().as_secs_f64();
    if !secs.is_finite() || secs < 0.0 {
        return Err(Error::Bench(format!("clock returned {secs}")));
    }
    Ok((out, secs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub trials: usize,
    /// 1 runs the serial path on the calling thread.
    pub threads: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { trials: 5, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub mean: f64,
    pub std: f64,
    /// Seconds per sample for each trial.
    pub per_trial: Vec<f64>,
    pub samples: usize,
}

impl InferenceTiming {
    pub fn coefficient_of_variation(&self) -> f64 {
        if self.mean > 0.0 {
            self.std / self.mean
        } else {
            0.0
        }
    }
}

fn pass<P: Predictor + ?Sized>(predictor: &P, images: &[&TrafficImage], pool: Option<&rayon::ThreadPool>) -> Result<()> {
    match pool {
        None => {
            for img in images {
                std::hint::black_box(predictor.predict_one(img)?);
            }
            Ok(())
        }
        Some(pool) => pool.install(|| {
            images
                .par_iter()
                .try_for_each(|img| predictor.predict_one(img).map(|p| drop(std::hint::black_box(p))))
        }),
    }
}

/// Mean and sample standard deviation of per-sample latency across
/// `opts.trials` full passes over `images`, after one discarded warm-up pass.
pub fn time_inference<P: Predictor + ?Sized>(
    predictor: &P,
    images: &[&TrafficImage],
    opts: InferenceOptions,
) -> Result<InferenceTiming> {
    if images.is_empty() {
        return Err(Error::Bench("empty test set".into()));
    }
    if opts.trials < MIN_TRIALS {
        return Err(Error::Bench(format!(
            "{} trials requested, at least {MIN_TRIALS} required",
            opts.trials
        )));
    }
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::Bench(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    pass(predictor, images, pool.as_ref())?;
    let mut per_trial = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        let start = Instant::now();
        pass(predictor, images, pool.as_ref())?;
        per_trial.push(start.elapsed().as_secs_f64() / images.len() as f64);
    }
    let n = per_trial.len() as f64;
    let mean = per_trial.iter().sum::<f64>() / n;
    let var = per_trial.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(InferenceTiming {
        mean,
        std: var.sqrt(),
        per_trial,
        samples: images.len(),
    })
}
