//! Synthetic flow tables for desk-scale runs.
//!
//! Every class shares one contiguous band of signal columns and differs in
//! the band's pattern. Columns outside the band are heavy-tailed noise that
//! is independent of the class, so after min-max scaling they are mostly
//! dark with sparse bright specks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{ImageDataset, TrafficImage};
use crate::error::{Error, Result};
use crate::flow::{FlowRecord, FlowTable};

pub const CLASS_NAMES: [&str; 4] = ["benign", "dns_amp", "syn_flood", "udp_flood"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub records_per_class: usize,
    pub features: usize,
    pub band_start: usize,
    pub band_width: usize,
    /// Standard deviation of per-cell noise on band columns.
    pub band_noise: f64,
    /// Exponent applied to uniform draws for background columns.
    pub background_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records_per_class: 720,
            features: 60,
            band_start: 26,
            band_width: 8,
            band_noise: 0.05,
            background_exponent: 20.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.records_per_class == 0 {
            problems.push("records_per_class must be positive".to_string());
        }
        if self.band_width < 2 {
            problems.push(format!("band_width {} is below 2", self.band_width));
        }
        if self.band_start + self.band_width > self.features {
            problems.push(format!(
                "band {}..{} exceeds {} features",
                self.band_start,
                self.band_start + self.band_width,
                self.features
            ));
        }
        if !(self.band_noise >= 0.0 && self.band_noise.is_finite()) {
            problems.push(format!("band_noise {} is invalid", self.band_noise));
        }
        if !(self.background_exponent >= 1.0) {
            problems.push(format!("background_exponent {} is below 1", self.background_exponent));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Noise-free level of `class` at offset `j` of a band `width` columns wide:
    /// uniform high, alternating, high-then-low halves, uniform mid.
    pub fn band_level(class: usize, j: usize, width: usize) -> f64 {
        let high = match class {
            0 => true,
            1 => j % 2 == 0,
            2 => j < width / 2,
            _ => return 0.45,
        };
        if high {
            0.9
        } else {
            0.1
        }
    }
}

/// Generates a labelled table, records grouped by class.
pub fn generate(cfg: &SynthConfig) -> Result<FlowTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.band_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("band noise: {e}")))?;
    let band = cfg.band_start..cfg.band_start + cfg.band_width;
    let mut records = Vec::with_capacity(cfg.records_per_class * CLASS_NAMES.len());
    for class in 0..CLASS_NAMES.len() {
        for _ in 0..cfg.records_per_class {
            let features = (0..cfg.features)
                .map(|f| {
                    if band.contains(&f) {
                        (SynthConfig::band_level(class, f - cfg.band_start, cfg.band_width) + noise.sample(&mut rng))
                            .clamp(0.0, 1.0)
                    } else {
                        rng.random::<f64>().powf(cfg.background_exponent)
                    }
                })
                .collect();
            records.push(FlowRecord {
                features,
                label: class,
                complete: true,
            });
        }
    }
    FlowTable::new(
        records,
        (0..cfg.features).map(|f| format!("f{f:02}")).collect(),
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Grows each class to `per_class` images by cycling its images and adding
/// Gaussian pixel noise (standard deviation `pixel_noise`, in 8-bit units)
/// to every copy after the originals.
pub fn augment(dataset: &ImageDataset, per_class: usize, pixel_noise: f64, seed: u64) -> Result<ImageDataset> {
    let noise = Normal::new(0.0, pixel_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("pixel noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * dataset.num_classes());
    for class in 0..dataset.num_classes() {
        let sources: Vec<&TrafficImage> = dataset.images.iter().filter(|i| i.label == class).collect();
        if sources.is_empty() {
            return Err(Error::DegenerateDataset(format!(
                "class {} has no images to augment",
                dataset.class_names[class]
            )));
        }
        for n in 0..per_class {
            let mut img = sources[n % sources.len()].clone();
            if n >= sources.len() {
                for p in &mut img.pixels {
                    *p = (f64::from(*p) + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
                }
            }
            images.push(img);
        }
    }
    ImageDataset::new(
        dataset.height,
        dataset.width,
        images,
        dataset.class_names.clone(),
    )
}
