//! Attribution maps and their quality scores.
//!
//! Grad-CAM weighs a convolutional feature map by the spatially averaged
//! gradient of a class logit. KernelSHAP attributes a scalar prediction to
//! image regions by weighted least squares over region coalitions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{write_rgb_png, Provenance, TrafficImage, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{LayerKind, Network, ParamGrads, Tensor};
use crate::zoo::Model;

pub const DEFAULT_TOP_FRACTION: f64 = 0.10;
pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 10.0 / 255.0;
/// Largest region count for which exhaustive enumeration is attempted.
pub const MAX_EXHAUSTIVE_REGIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Gradcam,
    Shap,
}

/// Per-pixel attribution over an image grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub kind: MapKind,
    pub target_class: usize,
    pub provenance: Provenance,
}

impl AttributionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    fn total_mass(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for row in self.values.chunks(self.width.max(1)) {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::Format(format!("attribution csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::Format(format!("attribution csv: {e}")))
    }

    /// Heatmap blended over the image at half opacity. Grad-CAM maps use a
    /// black-red-yellow ramp; SHAP maps are red for positive and blue for
    /// negative attribution, scaled by the largest magnitude.
    pub fn overlay_rgb(&self, image: &TrafficImage) -> Result<Vec<u8>> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::shape(
                "overlay",
                format!(
                    "map is {}x{}, image is {}x{}",
                    self.height, self.width, image.height, image.width
                ),
            ));
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut out = Vec::with_capacity(self.values.len() * 3);
        for (p, &v) in self.values.iter().enumerate() {
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            let heat = match self.kind {
                MapKind::Gradcam => [(2.0 * t).min(1.0), (2.0 * t - 1.0).max(0.0), 0.0],
                MapKind::Shap if t >= 0.0 => [t, 0.0, 0.0],
                MapKind::Shap => [0.0, 0.0, -t],
            };
            let px = &image.pixels[p * CHANNELS..(p + 1) * CHANNELS];
            for c in 0..3 {
                let base = f64::from(px[c.min(CHANNELS - 1)]);
                out.push((0.5 * base + 0.5 * 255.0 * heat[c]).round() as u8);
            }
        }
        Ok(out)
    }

    pub fn export_overlay_png(&self, image: &TrafficImage, path: &Path) -> Result<()> {
        write_rgb_png(path, self.width, self.height, &self.overlay_rgb(image)?)
    }
}

fn max_normalize(mut values: Vec<f64>) -> Vec<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    values
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_src: usize, n_dst: usize| {
        let x = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn first_pool(net: &Network) -> usize {
    net.layers
        .iter()
        .position(|l| l.spec.kind == LayerKind::GlobalAvgPool)
        .unwrap_or(net.layers.len())
}

/// Index of the layer whose output feeds the first global pooling layer,
/// i.e. the final activated convolutional feature map.
pub fn default_tap(net: &Network) -> Result<usize> {
    let pool = first_pool(net);
    let has_conv = net.layers[..pool].iter().any(|l| l.spec.kind.is_convolutional());
    if pool == 0 || !has_conv {
        return Err(Error::Config("network has no convolutional feature map to tap".into()));
    }
    Ok(pool - 1)
}

/// A tap must produce a spatial map at or after the first convolution and
/// ahead of global pooling.
fn resolve_tap(net: &Network, tap: Option<&str>) -> Result<usize> {
    let Some(name) = tap else {
        return default_tap(net);
    };
    let i = net
        .layers
        .iter()
        .position(|l| l.spec.name == name)
        .ok_or_else(|| Error::Config(format!("no layer named {name}")))?;
    let first_conv = net.layers.iter().position(|l| l.spec.kind.is_convolutional());
    if first_conv.is_none_or(|c| i < c) || i >= first_pool(net) {
        return Err(Error::Config(format!(
            "tap layer {name} ({}) does not output a convolutional feature map",
            net.layers[i].spec.kind.label()
        )));
    }
    Ok(i)
}

/// Grad-CAM on a raw network input `[C, H, W]`, upsampled to `out_h x out_w`.
pub fn grad_cam_network(
    net: &Network,
    input: &Tensor,
    target_class: usize,
    tap: Option<&str>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<f64>> {
    let t = resolve_tap(net, tap)?;
    let end = net.logits_end();
    if t + 1 >= end {
        return Err(Error::Config(format!(
            "tap layer {} must be followed by at least one layer before the logits",
            net.layers[t].spec.name
        )));
    }
    let (logits, caches) = net.forward_cached(input, end)?;
    if logits.len() <= target_class {
        return Err(Error::Config(format!(
            "target class {target_class} outside {} classes",
            logits.len()
        )));
    }
    let mut seed = Tensor::zeros(logits.shape().to_vec());
    seed.data_mut()[target_class] = 1.0;
    let activation = caches[t + 1].input();
    let grad = net
        .backward(&caches, seed, t + 1, ParamGrads::None, true)?
        .input
        .ok_or_else(|| Error::Contract("backward produced no input gradient".into()))?;
    let &[channels, h, w] = activation.shape() else {
        return Err(Error::shape(
            &net.layers[t].spec.name,
            "tap output is not a [C, H, W] feature map",
        ));
    };
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for k in 0..channels {
        let g = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        let a = &activation.data()[k * plane..(k + 1) * plane];
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += alpha * v;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let up = bilinear_resize(&raw, h, w, out_h, out_w);
    let map = max_normalize(up.into_iter().map(|v| v.max(0.0)).collect());
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Grad-CAM map".into()));
    }
    Ok(map)
}

/// Grad-CAM map of `target_class` for one image.
pub fn grad_cam(model: &Model, image: &TrafficImage, target_class: usize, tap: Option<&str>) -> Result<AttributionMap> {
    let input = model.input_tensor(image)?;
    let values = grad_cam_network(&model.network, &input, target_class, tap, image.height, image.width)?;
    Ok(AttributionMap {
        height: image.height,
        width: image.width,
        values,
        kind: MapKind::Gradcam,
        target_class,
        provenance: image.provenance,
    })
}

/// Grad-CAM maps for each image's true class, computed in parallel.
pub fn grad_cam_batch(model: &Model, images: &[&TrafficImage], tap: Option<&str>) -> Result<Vec<AttributionMap>> {
    images
        .par_iter()
        .map(|img| grad_cam(model, img, img.label, tap))
        .collect()
}

/// Assignment of every pixel to exactly one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub height: usize,
    pub width: usize,
    assignment: Vec<usize>,
    count: usize,
}

impl RegionPartition {
    /// Rectangular cells of `cell_h x cell_w` pixels, row-major region order.
    pub fn grid(height: usize, width: usize, cell_h: usize, cell_w: usize) -> Result<Self> {
        if cell_h == 0 || cell_w == 0 || height % cell_h != 0 || width % cell_w != 0 {
            return Err(Error::Partition(format!(
                "{cell_h}x{cell_w} cells do not tile a {height}x{width} grid"
            )));
        }
        let cols = width / cell_w;
        let assignment = (0..height * width)
            .map(|p| (p / width / cell_h) * cols + (p % width) / cell_w)
            .collect();
        Ok(RegionPartition {
            height,
            width,
            assignment,
            count: (height / cell_h) * cols,
        })
    }

    /// Builds a partition from per-region pixel masks, rejecting overlap,
    /// gaps and empty regions.
    pub fn from_masks(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let n = height * width;
        let mut assignment = vec![usize::MAX; n];
        for (r, mask) in masks.iter().enumerate() {
            if mask.len() != n {
                return Err(Error::Partition(format!(
                    "mask {r} has {} cells for a {height}x{width} grid",
                    mask.len()
                )));
            }
            if !mask.iter().any(|&b| b) {
                return Err(Error::Partition(format!("region {r} is empty")));
            }
            for (p, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
                if assignment[p] != usize::MAX {
                    return Err(Error::Partition(format!(
                        "pixel {p} belongs to regions {} and {r}",
                        assignment[p]
                    )));
                }
                assignment[p] = r;
            }
        }
        if let Some(p) = assignment.iter().position(|&a| a == usize::MAX) {
            return Err(Error::Partition(format!("pixel {p} is not covered by any region")));
        }
        Ok(RegionPartition {
            height,
            width,
            assignment,
            count: masks.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn region_of(&self, row: usize, col: usize) -> usize {
        self.assignment[row * self.width + col]
    }
}

/// Scalar model output on an image, e.g. one class probability.
pub type PredictFn<'a> = dyn Fn(&TrafficImage) -> Result<f64> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub map: AttributionMap,
    pub region_values: Vec<f64>,
    /// Output on the baseline image.
    pub base_value: f64,
    /// Output on the explained image.
    pub output_value: f64,
    pub exhaustive: bool,
    pub evaluations: usize,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of one coalition of size `s` out of `m` players.
pub fn shapley_kernel(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

fn compose(image: &TrafficImage, baseline: &TrafficImage, regions: &RegionPartition, present: &[bool]) -> TrafficImage {
    let mut out = baseline.clone();
    out.label = image.label;
    out.provenance = image.provenance;
    for (p, &r) in regions.assignment.iter().enumerate() {
        if present[r] {
            out.pixels[p * CHANNELS..(p + 1) * CHANNELS]
                .copy_from_slice(&image.pixels[p * CHANNELS..(p + 1) * CHANNELS]);
        }
    }
    out
}

/// Solves the efficiency-constrained weighted regression
/// `min sum w (y - sum_i phi_i z_i)^2  s.t.  sum_i phi_i = total`
/// by eliminating the last coefficient.
fn constrained_wls(rows: &[(Vec<bool>, f64, f64)], m: usize, total: f64) -> Result<Vec<f64>> {
    if m == 1 {
        return Ok(vec![total]);
    }
    let d = m - 1;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for (z, y, w) in rows {
        let last = f64::from(u8::from(z[d]));
        let x: Vec<f64> = (0..d).map(|i| f64::from(u8::from(z[i])) - last).collect();
        let target = y - last * total;
        for i in 0..d {
            xty[i] += w * x[i] * target;
            for j in 0..d {
                xtx[(i, j)] += w * x[i] * x[j];
            }
        }
    }
    let solved = xtx
        .svd(true, true)
        .solve(&xty, 1e-12)
        .map_err(|e| Error::Numeric(format!("KernelSHAP regression: {e}")))?;
    let mut phi: Vec<f64> = solved.iter().copied().collect();
    phi.push(total - phi.iter().sum::<f64>());
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Shapley estimate".into()));
    }
    Ok(phi)
}

/// KernelSHAP attribution over `regions`, with `baseline` pixels standing in
/// for absent regions.
///
/// With at most [`MAX_EXHAUSTIVE_REGIONS`] regions and `budget >= 2^M`, every
/// coalition is evaluated and the result equals the exact Shapley values.
/// Otherwise `budget - 2` coalitions are sampled in complementary pairs with
/// sizes drawn in proportion to their total kernel weight.
pub fn kernel_shap(
    predict: &PredictFn,
    image: &TrafficImage,
    baseline: &TrafficImage,
    regions: &RegionPartition,
    target_class: usize,
    budget: usize,
    seed: u64,
) -> Result<ShapExplanation> {
    if image.height != regions.height || image.width != regions.width {
        return Err(Error::Partition(format!(
            "partition is {}x{}, image is {}x{}",
            regions.height, regions.width, image.height, image.width
        )));
    }
    if baseline.height != image.height || baseline.width != image.width {
        return Err(Error::shape("kernel_shap", "baseline and image sizes differ"));
    }
    let m = regions.len();
    if m == 0 {
        return Err(Error::Partition("partition has no regions".into()));
    }
    if budget < m + 2 {
        return Err(Error::InsufficientSampling {
            budget,
            required: m + 2,
        });
    }
    let exhaustive = m <= MAX_EXHAUSTIVE_REGIONS && budget >= 1 << m;

    // coalition -> accumulated regression weight
    let mut coalitions: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    if exhaustive {
        for mask in 1..(1u64 << m) - 1 {
            let z: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            let s = z.iter().filter(|&&b| b).count();
            coalitions.insert(z, shapley_kernel(m, s));
        }
    } else {
        let sizes: Vec<usize> = (1..m).collect();
        let size_weights: Vec<f64> = sizes
            .iter()
            .map(|&s| (m - 1) as f64 / (s * (m - s)) as f64)
            .collect();
        let dist = rand::distr::weighted::WeightedIndex::new(&size_weights)
            .map_err(|e| Error::Numeric(format!("coalition size distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn = 0;
        while drawn < budget - 2 {
            let s = sizes[rng.sample(&dist)];
            let mut z = vec![false; m];
            for i in sample(&mut rng, m, s) {
                z[i] = true;
            }
            let complement: Vec<bool> = z.iter().map(|b| !b).collect();
            *coalitions.entry(z).or_insert(0.0) += 1.0;
            drawn += 1;
            if drawn < budget - 2 {
                *coalitions.entry(complement).or_insert(0.0) += 1.0;
                drawn += 1;
            }
        }
    }

    let base_value = predict(baseline)?;
    let output_value = predict(image)?;
    let evaluated: Vec<(Vec<bool>, f64, f64)> = coalitions
        .into_par_iter()
        .map(|(z, w)| {
            let y = predict(&compose(image, baseline, regions, &z))?;
            Ok((z, y - base_value, w))
        })
        .collect::<Result<_>>()?;
    if !base_value.is_finite() || !output_value.is_finite() || evaluated.iter().any(|r| !r.1.is_finite()) {
        return Err(Error::Numeric("predictor returned a non-finite value".into()));
    }
    let phi = constrained_wls(&evaluated, m, output_value - base_value)?;
    let values = regions.assignment.iter().map(|&r| phi[r]).collect();
    Ok(ShapExplanation {
        map: AttributionMap {
            height: image.height,
            width: image.width,
            values,
            kind: MapKind::Shap,
            target_class,
            provenance: image.provenance,
        },
        region_values: phi,
        base_value,
        output_value,
        exhaustive,
        evaluations: evaluated.len() + 2,
    })
}

/// KernelSHAP of the model's probability for the image's true class.
pub fn model_shap(
    model: &Model,
    image: &TrafficImage,
    baseline: &TrafficImage,
    regions: &RegionPartition,
    budget: usize,
    seed: u64,
) -> Result<ShapExplanation> {
    let class = image.label;
    let f = |img: &TrafficImage| -> Result<f64> { Ok(model.probabilities(img)?[class]) };
    kernel_shap(&f, image, baseline, regions, class, budget, seed)
}

/// Share of absolute attribution mass held by the top `top_fraction` of pixels.
pub fn spatial_compactness(map: &AttributionMap, top_fraction: f64) -> f64 {
    let total = map.total_mass();
    if !(total > 0.0) {
        log::warn!("spatial compactness of an all-zero map is reported as 0");
        return 0.0;
    }
    let mut mags: Vec<f64> = map.values.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let k = ((top_fraction * mags.len() as f64).round() as usize).clamp(1, mags.len());
    (mags[..k].iter().sum::<f64>() / total).min(1.0)
}

/// `1 - background mass / total mass`, where background pixels have mean
/// channel intensity below `threshold` (in `[0, 1]`).
pub fn background_suppression(map: &AttributionMap, image: &TrafficImage, threshold: f64) -> Result<f64> {
    if image.height != map.height || image.width != map.width {
        return Err(Error::shape("background_suppression", "map and image sizes differ"));
    }
    let intensity = image.mean_intensity();
    if !intensity.iter().any(|&v| v < threshold) {
        log::warn!("image has no background pixels; suppression reported as 1");
        return Ok(1.0);
    }
    let total = map.total_mass();
    if !(total > 0.0) {
        log::warn!("background suppression of an all-zero map is reported as 0");
        return Ok(0.0);
    }
    let background: f64 = map
        .values
        .iter()
        .zip(&intensity)
        .filter(|(_, &i)| i < threshold)
        .map(|(v, _)| v.abs())
        .sum();
    Ok((1.0 - background / total).clamp(0.0, 1.0))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Unweighted mean over classes of the mean pairwise cosine similarity of
/// that class's maps. Classes with fewer than two maps and zero-norm maps
/// are skipped; with nothing left the score is 0.
pub fn class_consistency(groups: &[Vec<&AttributionMap>]) -> f64 {
    let mut class_means = Vec::new();
    for (c, maps) in groups.iter().enumerate() {
        if maps.len() < 2 {
            log::warn!("class consistency: group {c} has fewer than two maps, excluded");
            continue;
        }
        let mut sims = Vec::new();
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                match cosine(&maps[i].values, &maps[j].values) {
                    Some(s) => sims.push(s),
                    None => log::warn!("class consistency: zero map in group {c}, pair skipped"),
                }
            }
        }
        if !sims.is_empty() {
            class_means.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    if class_means.is_empty() {
        log::warn!("class consistency undefined; reported as 0");
        return 0.0;
    }
    class_means.iter().sum::<f64>() / class_means.len() as f64
}

/// Groups maps by target class (in ascending class order).
pub fn group_by_class(maps: &[AttributionMap]) -> Vec<Vec<&AttributionMap>> {
    let mut groups: BTreeMap<usize, Vec<&AttributionMap>> = BTreeMap::new();
    for m in maps {
        groups.entry(m.target_class).or_default().push(m);
    }
    groups.into_values().collect()
}

/// `(max |phi|, mean one-sidedness)` over SHAP maps.
pub fn shap_summary(maps: &[AttributionMap]) -> (f64, f64) {
    if maps.is_empty() {
        log::warn!("SHAP summary of no maps is (0, 0)");
        return (0.0, 0.0);
    }
    let magnitude = maps
        .iter()
        .flat_map(|m| m.values.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let separation = maps
        .iter()
        .map(|m| {
            let pos: f64 = m.values.iter().filter(|v| **v > 0.0).sum();
            let neg: f64 = -m.values.iter().filter(|v| **v < 0.0).sum::<f64>();
            if pos + neg > 0.0 {
                (pos - neg).abs() / (pos + neg)
            } else {
                log::warn!("SHAP map with zero mass has separation 0");
                0.0
            }
        })
        .sum::<f64>()
        / maps.len() as f64;
    (magnitude, separation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainQualityReport {
    pub spatial_compactness: f64,
    pub background_suppression: f64,
    pub class_consistency: f64,
    pub shap_magnitude: f64,
    pub pos_neg_separation: f64,
}

impl ExplainQualityReport {
    pub fn axes(&self) -> [f64; 5] {
        [
            self.spatial_compactness,
            self.background_suppression,
            self.class_consistency,
            self.shap_magnitude,
            self.pos_neg_separation,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.axes();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("quality report has non-finite scores".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(a[0]) || !unit(a[1]) || !(-1.0..=1.0).contains(&a[2]) || a[3] < 0.0 || !unit(a[4]) {
            return Err(Error::Numeric(format!("quality scores out of range: {a:?}")));
        }
        Ok(())
    }
}

/// Scores Grad-CAM maps (paired with their images) and SHAP maps.
pub fn assess(
    gradcam: &[AttributionMap],
    images: &[&TrafficImage],
    shap: &[AttributionMap],
    top_fraction: f64,
    background_threshold: f64,
) -> Result<ExplainQualityReport> {
    if gradcam.is_empty() || gradcam.len() != images.len() {
        return Err(Error::Consistency(format!(
            "{} Grad-CAM maps for {} images",
            gradcam.len(),
            images.len()
        )));
    }
    let n = gradcam.len() as f64;
    let compactness = gradcam.iter().map(|m| spatial_compactness(m, top_fraction)).sum::<f64>() / n;
    let mut suppression = 0.0;
    for (m, img) in gradcam.iter().zip(images) {
        suppression += background_suppression(m, img, background_threshold)?;
    }
    let (shap_magnitude, pos_neg_separation) = shap_summary(shap);
    let report = ExplainQualityReport {
        spatial_compactness: compactness,
        background_suppression: suppression / n,
        class_consistency: class_consistency(&group_by_class(gradcam)),
        shap_magnitude,
        pos_neg_separation,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub model: String,
    pub score: f64,
    /// Min-max normalized axes in [`ExplainQualityReport::axes`] order.
    pub normalized: [f64; 5],
    pub raw: ExplainQualityReport,
}

/// Ranks models by the mean of their min-max normalized quality axes. An
/// axis on which all models agree normalizes to 1. Ties go alphabetically.
pub fn interpretability_rank(reports: &[(String, ExplainQualityReport)]) -> Vec<RankEntry> {
    let mut lo = [f64::INFINITY; 5];
    let mut hi = [f64::NEG_INFINITY; 5];
    for (_, r) in reports {
        for (i, v) in r.axes().into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let mut entries: Vec<RankEntry> = reports
        .iter()
        .map(|(name, r)| {
            let mut normalized = [0.0; 5];
            for (i, v) in r.axes().into_iter().enumerate() {
                normalized[i] = if hi[i] > lo[i] { (v - lo[i]) / (hi[i] - lo[i]) } else { 1.0 };
            }
            RankEntry {
                rank: 0,
                model: name.clone(),
                score: normalized.iter().sum::<f64>() / 5.0,
                normalized,
                raw: *r,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.model.cmp(&b.model)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerSpec};

    fn map(values: Vec<f64>, h: usize, w: usize, kind: MapKind) -> AttributionMap {
        AttributionMap {
            height: h,
            width: w,
            values,
            kind,
            target_class: 0,
            provenance: Provenance::default(),
        }
    }

    fn quality(v: [f64; 5]) -> ExplainQualityReport {
        ExplainQualityReport {
            spatial_compactness: v[0],
            background_suppression: v[1],
            class_consistency: v[2],
            shap_magnitude: v[3],
            pos_neg_separation: v[4],
        }
    }

    #[test]
    fn compactness_edge_cases() {
        let mut single = vec![0.0; 100];
        single[37] = 4.0;
        assert_eq!(spatial_compactness(&map(single, 10, 10, MapKind::Gradcam), 0.1), 1.0);
        let uniform = map(vec![0.3; 3600], 60, 60, MapKind::Gradcam);
        assert!((spatial_compactness(&uniform, 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(spatial_compactness(&map(vec![0.0; 4], 2, 2, MapKind::Gradcam), 0.1), 0.0);
    }

    #[test]
    fn two_band_compactness() {
        // 10x10: column 0 holds 1.0, column 1 holds 0.5 -> top 10 pixels = column 0
        let mut v = vec![0.0; 100];
        for r in 0..10 {
            v[r * 10] = 1.0;
            v[r * 10 + 1] = 0.5;
        }
        let c = spatial_compactness(&map(v, 10, 10, MapKind::Gradcam), 0.1);
        assert!((c - 10.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn suppression_partitions_mass() {
        let mut img = TrafficImage::filled(2, 2, 0, 0);
        for c in 0..3 {
            let i = img.index(c, 0, 0);
            img.pixels[i] = 200;
            let i = img.index(c, 0, 1);
            img.pixels[i] = 200;
        }
        let fg_only = map(vec![1.0, 1.0, 0.0, 0.0], 2, 2, MapKind::Gradcam);
        let bg_only = map(vec![0.0, 0.0, 1.0, 1.0], 2, 2, MapKind::Gradcam);
        let half = map(vec![1.0, 0.0, 1.0, 0.0], 2, 2, MapKind::Gradcam);
        let t = DEFAULT_BACKGROUND_THRESHOLD;
        assert_eq!(background_suppression(&fg_only, &img, t).unwrap(), 1.0);
        assert_eq!(background_suppression(&bg_only, &img, t).unwrap(), 0.0);
        assert_eq!(background_suppression(&half, &img, t).unwrap(), 0.5);
        let bright = TrafficImage::filled(2, 2, 255, 0);
        assert_eq!(background_suppression(&bg_only, &bright, t).unwrap(), 1.0);
    }

    #[test]
    fn consistency_identical_and_negated() {
        let a = map(vec![1.0, -2.0, 0.5], 1, 3, MapKind::Shap);
        let neg = map(vec![-1.0, 2.0, -0.5], 1, 3, MapKind::Shap);
        assert!((class_consistency(&[vec![&a, &a.clone()]]) - 1.0).abs() < 1e-12);
        assert!((class_consistency(&[vec![&a, &neg]]) + 1.0).abs() < 1e-12);
        assert_eq!(class_consistency(&[vec![&a]]), 0.0);
    }

    #[test]
    fn shap_summary_fixtures() {
        let one_sided = map(vec![1.0, 2.0], 1, 2, MapKind::Shap);
        let balanced = map(vec![1.0, -1.0], 1, 2, MapKind::Shap);
        let three_to_one = map(vec![3.0, -1.0], 1, 2, MapKind::Shap);
        assert_eq!(shap_summary(&[one_sided]).1, 1.0);
        assert_eq!(shap_summary(&[balanced]).1, 0.0);
        let (mag, sep) = shap_summary(&[three_to_one]);
        assert_eq!((mag, sep), (3.0, 0.5));
    }

    #[test]
    fn ranking_by_normalized_mean() {
        let single = interpretability_rank(&[("m".into(), quality([0.2; 5]))]);
        assert_eq!(single[0].rank, 1);
        let a = quality([0.5, 0.9, 0.4, 0.02, 0.8]);
        let b = quality([0.3, 0.7, 0.6, 0.01, 0.2]);
        // a wins on 4 of 5 normalized axes: score a = 4/5, b = 1/5
        let r = interpretability_rank(&[("b".into(), b), ("a".into(), a)]);
        assert_eq!(r[0].model, "a");
        assert!((r[0].score - 0.8).abs() < 1e-12);
        assert!((r[1].score - 0.2).abs() < 1e-12);
        let tie = interpretability_rank(&[("z".into(), a), ("y".into(), a)]);
        assert_eq!(tie[0].model, "y");
    }

    #[test]
    fn grid_partition_and_masks() {
        let g = RegionPartition::grid(60, 60, 10, 10).unwrap();
        assert_eq!(g.len(), 36);
        assert_eq!(g.region_of(59, 59), 35);
        assert_eq!(g.region_of(0, 15), 1);
        assert!(RegionPartition::grid(60, 60, 7, 10).is_err());
        let full = vec![true; 4];
        assert!(matches!(
            RegionPartition::from_masks(2, 2, &[full.clone(), full]),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            RegionPartition::from_masks(2, 2, &[vec![true, true, false, false]]),
            Err(Error::Partition(_))
        ));
    }

    fn quadrant_image() -> (TrafficImage, TrafficImage, RegionPartition) {
        let mut img = TrafficImage::filled(4, 4, 0, 0);
        for r in 0..4 {
            for c in 0..4 {
                let i = img.index(0, r, c);
                img.pixels[i] = (10 * (r * 4 + c)) as u8;
            }
        }
        (img, TrafficImage::filled(4, 4, 0, 0), RegionPartition::grid(4, 4, 2, 2).unwrap())
    }

    #[test]
    fn additive_surrogate_exact() {
        let (img, base, parts) = quadrant_image();
        let g = [1.0, -2.0, 0.5, 3.0];
        let p2 = parts.clone();
        let f = move |x: &TrafficImage| -> Result<f64> {
            let mut sums = [0.0; 4];
            for r in 0..4 {
                for c in 0..4 {
                    sums[p2.region_of(r, c)] += f64::from(x.get(0, r, c));
                }
            }
            Ok(sums.iter().zip(&g).map(|(s, k)| s * k).sum())
        };
        let e = kernel_shap(&f, &img, &base, &parts, 0, 16, 0).unwrap();
        assert!(e.exhaustive);
        for (r, &phi) in e.region_values.iter().enumerate() {
            let mut s = 0.0;
            for row in 0..4 {
                for col in 0..4 {
                    if parts.region_of(row, col) == r {
                        s += f64::from(img.get(0, row, col));
                    }
                }
            }
            assert!((phi - g[r] * s).abs() < 1e-8, "region {r}: {phi} vs {}", g[r] * s);
        }
    }

    #[test]
    fn baseline_equal_to_image_gives_zero() {
        let (img, _, parts) = quadrant_image();
        let f = |x: &TrafficImage| -> Result<f64> { Ok(x.pixels.iter().map(|&v| f64::from(v)).sum::<f64>().sqrt()) };
        let e = kernel_shap(&f, &img, &img, &parts, 0, 16, 0).unwrap();
        assert!(e.region_values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn insufficient_budget_rejected() {
        let (img, base, parts) = quadrant_image();
        let f = |_: &TrafficImage| -> Result<f64> { Ok(0.0) };
        assert!(matches!(
            kernel_shap(&f, &img, &base, &parts, 0, 5, 0),
            Err(Error::InsufficientSampling { budget: 5, required: 6 })
        ));
    }

    #[test]
    fn sampled_mode_keeps_efficiency() {
        let (img, base, parts) = quadrant_image();
        let f = |x: &TrafficImage| -> Result<f64> {
            let a = f64::from(x.get(0, 0, 0)) + f64::from(x.get(0, 3, 3));
            Ok(a * a / 100.0)
        };
        let e = kernel_shap(&f, &img, &base, &parts, 0, 8, 3).unwrap();
        assert!(!e.exhaustive);
        let sum: f64 = e.region_values.iter().sum();
        assert!((sum - (e.output_value - e.base_value)).abs() < 1e-9);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(bilinear_resize(&src, 3, 4, 3, 4), src);
        let up = bilinear_resize(&[2.5; 4], 2, 2, 7, 5);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    fn conv_gap_dense(weight: f64) -> Network {
        let conv = Layer::new(
            LayerSpec::new(
                "conv",
                LayerKind::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
            ),
            vec![Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), Tensor::zeros(vec![1])],
        )
        .unwrap();
        let gap = Layer::new(LayerSpec::new("gap", LayerKind::GlobalAvgPool), vec![]).unwrap();
        let fc = Layer::new(
            LayerSpec::new("fc", LayerKind::Dense { inputs: 1, outputs: 2 }),
            vec![
                Tensor::new(vec![2, 1], vec![weight, -weight]).unwrap(),
                Tensor::zeros(vec![2]),
            ],
        )
        .unwrap();
        Network::new(vec![conv, gap, fc], vec![1, 3, 3], 1).unwrap()
    }

    #[test]
    fn grad_cam_recovers_activation_grid() {
        let net = conv_gap_dense(2.0);
        let a: Vec<f64> = (1..=9).map(f64::from).collect();
        let input = Tensor::new(vec![1, 3, 3], a.clone()).unwrap();
        let m = grad_cam_network(&net, &input, 0, None, 3, 3).unwrap();
        for (got, want) in m.iter().zip(&a) {
            assert!((got - want / 9.0).abs() < 1e-12);
        }
        // class 1 has negative weight: ReLU removes everything
        let m1 = grad_cam_network(&net, &input, 1, None, 3, 3).unwrap();
        assert!(m1.iter().all(|&v| v == 0.0));
        // scaling the gradient leaves the normalized map unchanged
        let m2 = grad_cam_network(&conv_gap_dense(7.0), &input, 0, None, 3, 3).unwrap();
        for (x, y) in m.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            grad_cam_network(&net, &input, 0, Some("gap"), 3, 3),
            Err(Error::Config(_))
        ));
    }
}
