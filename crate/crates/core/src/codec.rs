//! Flow tables to RGB traffic images, stratified splits and the `TRIM`
//! dataset container.
//!
//! Each image holds `3 * height` records of one class: records
//! `0..height` fill the red channel row by row, the next `height` the green
//! channel and the last `height` the blue channel. A record's first `width`
//! min–max scaled features fill its row; shorter rows are zero padded.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTable;

pub const CHANNELS: usize = 3;
pub const DEFAULT_WIDTH: usize = 60;
pub const DEFAULT_RECORDS_PER_IMAGE: usize = 180;

const MAGIC: &[u8; 4] = b"TRIM";
const FORMAT_VERSION: u16 = 1;

/// Where an image's records came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub table_id: u32,
    /// Index, in the cleaned table, of the chunk's first record.
    pub first_record: u64,
}

/// An 8-bit RGB image stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub label: usize,
    pub provenance: Provenance,
}

impl TrafficImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, label: usize) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::shape(
                "TrafficImage",
                format!(
                    "{} bytes for a {height}x{width}x{CHANNELS} image",
                    pixels.len()
                ),
            ));
        }
        Ok(TrafficImage {
            height,
            width,
            pixels,
            label,
            provenance: Provenance::default(),
        })
    }

    pub fn filled(height: usize, width: usize, value: u8, label: usize) -> Self {
        TrafficImage {
            height,
            width,
            pixels: vec![value; height * width * CHANNELS],
            label,
            provenance: Provenance::default(),
        }
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (row * self.width + col) * CHANNELS + channel
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.pixels[self.index(channel, row, col)]
    }

    /// Channel-major `[C, H, W]` copy scaled to `[0, 1]`, the network input layout.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * CHANNELS];
        for (p, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + p] = f64::from(px[c]) / 255.0;
            }
        }
        out
    }

    /// Mean channel intensity per pixel, in `[0, 1]`.
    pub fn mean_intensity(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(CHANNELS)
            .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / (255.0 * CHANNELS as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub images: Vec<TrafficImage>,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
}

impl ImageDataset {
    pub fn new(
        height: usize,
        width: usize,
        images: Vec<TrafficImage>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let mut class_counts = vec![0; class_names.len()];
        for (i, img) in images.iter().enumerate() {
            if img.height != height || img.width != width {
                return Err(Error::shape(
                    "ImageDataset",
                    format!(
                        "image {i} is {}x{}, dataset is {height}x{width}",
                        img.height, img.width
                    ),
                ));
            }
            *class_counts.get_mut(img.label).ok_or_else(|| {
                Error::Format(format!(
                    "image {i} has label {} but only {} classes",
                    img.label,
                    class_names.len()
                ))
            })? += 1;
        }
        Ok(ImageDataset {
            height,
            width,
            images,
            class_names,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&TrafficImage> {
        indices.iter().map(|&i| &self.images[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub width: usize,
    pub records_per_image: usize,
    pub table_id: u32,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            width: DEFAULT_WIDTH,
            records_per_image: DEFAULT_RECORDS_PER_IMAGE,
            table_id: 0,
        }
    }
}

/// Min–max scaling of one value to `[0, 255]`; a constant column maps to 0.
#[inline]
pub fn normalize_value(x: f64, min: f64, max: f64) -> f64 {
    if max == min {
        0.0
    } else {
        (x - min) / (max - min) * 255.0
    }
}

pub fn normalize_column(values: &[f64], min: f64, max: f64) -> Result<Vec<f64>> {
    if min > max || min.is_nan() || max.is_nan() {
        return Err(Error::Statistics { min, max });
    }
    Ok(values.iter().map(|&x| normalize_value(x, min, max)).collect())
}

/// Round half up and clamp to a byte.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a cleaned table into label-pure images, chunking within each class.
pub fn encode_images(table: &FlowTable, opts: &EncodeOptions) -> Result<ImageDataset> {
    if opts.width == 0 || opts.records_per_image == 0 || opts.records_per_image % CHANNELS != 0 {
        return Err(Error::Config(format!(
            "records_per_image must be a positive multiple of {CHANNELS} and width positive \
             (got {} and {})",
            opts.records_per_image, opts.width
        )));
    }
    if let Some(r) = table.records.iter().position(|r| !r.complete) {
        return Err(Error::DegenerateDataset(format!(
            "record {r} is incomplete; clean the table before encoding"
        )));
    }
    for (j, (&lo, &hi)) in table
        .per_column_min
        .iter()
        .zip(&table.per_column_max)
        .enumerate()
    {
        if lo > hi {
            return Err(Error::Statistics { min: lo, max: hi });
        }
        debug_assert!(j < table.feature_count());
    }

    let height = opts.records_per_image / CHANNELS;
    let width = opts.width;
    let used = table.feature_count().min(width);

    let per_class: Vec<Vec<TrafficImage>> = (0..table.class_names.len())
        .into_par_iter()
        .map(|class| {
            let members: Vec<usize> = table
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.label == class)
                .map(|(i, _)| i)
                .collect();
            if members.len() < opts.records_per_image {
                log::warn!(
                    "class '{}' has {} records (< {}); no images produced",
                    table.class_names[class],
                    members.len(),
                    opts.records_per_image
                );
            }
            members
                .chunks_exact(opts.records_per_image)
                .map(|chunk| {
                    let mut pixels = vec![0u8; height * width * CHANNELS];
                    for (k, &rec) in chunk.iter().enumerate() {
                        let (channel, row) = (k / height, k % height);
                        let features = &table.records[rec].features;
                        for f in 0..used {
                            let v = normalize_value(
                                features[f],
                                table.per_column_min[f],
                                table.per_column_max[f],
                            );
                            pixels[(row * width + f) * CHANNELS + channel] = quantize(v);
                        }
                    }
                    TrafficImage {
                        height,
                        width,
                        pixels,
                        label: class,
                        provenance: Provenance {
                            table_id: opts.table_id,
                            first_record: chunk[0] as u64,
                        },
                    }
                })
                .collect()
        })
        .collect();

    ImageDataset::new(
        height,
        width,
        per_class.into_iter().flatten().collect(),
        table.class_names.clone(),
    )
}

/// Disjoint train/validation/test index lists into an [`ImageDataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Per-class stratified split.
///
/// For each class of `n` images, `round(n * test_frac)` are held out for
/// testing first, then `round((n - test) * val_frac)` of the remainder go to
/// validation and the rest to training. With both fractions at 0.2 this gives
/// 64/16/20 percent train/validation/test.
pub fn stratified_split(
    dataset: &ImageDataset,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    for (name, f) in [("val_frac", val_frac), ("test_frac", test_frac)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = dataset
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| img.label == class)
            .map(|(i, _)| i)
            .collect();
        let n = members.len();
        if n == 0 {
            return Err(Error::DegenerateDataset(format!(
                "class '{}' has no images",
                dataset.class_names[class]
            )));
        }
        if n < 3 {
            log::warn!(
                "class '{}' has {n} image(s); fewer than the three split parts, \
                 rounding leaves some parts empty",
                dataset.class_names[class]
            );
        }
        members.shuffle(&mut rng);
        let n_test = (n as f64 * test_frac).round() as usize;
        let n_val = ((n - n_test) as f64 * val_frac).round() as usize;
        split.test.extend_from_slice(&members[..n_test]);
        split.validation.extend_from_slice(&members[n_test..n_test + n_val]);
        split.train.extend_from_slice(&members[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a dataset (and optional split) into the `TRIM` container.
///
/// Layout, all integers little-endian:
/// `"TRIM" | version u16 | height u16 | width u16 | K u32 | count u64 |
/// K x (len u32, utf8 name) | count x (label u32, table_id u32, first_record u64) |
/// pixel payload (count x height x width x 3 bytes) | has_split u8 |
/// [seed u64 | 3 x (len u64, len x u64 index)]`.
pub fn encode_container(dataset: &ImageDataset, split: Option<&DatasetSplit>) -> Result<Vec<u8>> {
    let to_u16 = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u16")))
    };
    let mut buf = Vec::with_capacity(64 + dataset.len() * (16 + dataset.height * dataset.width * 3));
    buf.extend_from_slice(MAGIC);
    put_u16(&mut buf, FORMAT_VERSION);
    put_u16(&mut buf, to_u16(dataset.height, "height")?);
    put_u16(&mut buf, to_u16(dataset.width, "width")?);
    put_u32(&mut buf, dataset.num_classes() as u32);
    put_u64(&mut buf, dataset.len() as u64);
    for name in &dataset.class_names {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
    }
    for img in &dataset.images {
        put_u32(&mut buf, img.label as u32);
        put_u32(&mut buf, img.provenance.table_id);
        put_u64(&mut buf, img.provenance.first_record);
    }
    for img in &dataset.images {
        buf.extend_from_slice(&img.pixels);
    }
    match split {
        None => buf.push(0),
        Some(s) => {
            if let Some(&bad) = s
                .train
                .iter()
                .chain(&s.validation)
                .chain(&s.test)
                .find(|&&i| i >= dataset.len())
            {
                return Err(Error::Format(format!(
                    "split index {bad} out of range for {} images",
                    dataset.len()
                )));
            }
            buf.push(1);
            put_u64(&mut buf, s.seed);
            for part in [&s.train, &s.validation, &s.test] {
                put_u64(&mut buf, part.len() as u64);
                for &i in part {
                    put_u64(&mut buf, i as u64);
                }
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // every counted item occupies at least one byte
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Format(format!("length {v} exceeds remaining bytes")));
        }
        Ok(v as usize)
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<(ImageDataset, Option<DatasetSplit>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a TRIM dataset".into()));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let height = cur.u16()? as usize;
    let width = cur.u16()? as usize;
    let k = cur.u32()? as usize;
    let count = cur.len()?;
    let mut class_names = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        let n = cur.u32()? as usize;
        let raw = cur.take(n)?;
        class_names.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Format("class name is not UTF-8".into()))?,
        );
    }
    let mut meta = Vec::with_capacity(count);
    for _ in 0..count {
        let label = cur.u32()? as usize;
        let table_id = cur.u32()?;
        let first_record = cur.u64()?;
        meta.push((label, Provenance { table_id, first_record }));
    }
    let plane = height * width * CHANNELS;
    let mut images = Vec::with_capacity(count);
    for (label, provenance) in meta {
        images.push(TrafficImage {
            height,
            width,
            pixels: cur.take(plane)?.to_vec(),
            label,
            provenance,
        });
    }
    let split = match cur.u8()? {
        0 => None,
        1 => {
            let seed = cur.u64()?;
            let mut parts: [Vec<usize>; 3] = Default::default();
            for part in parts.iter_mut() {
                let n = cur.len()?;
                for _ in 0..n {
                    let i = cur.u64()? as usize;
                    if i >= count {
                        return Err(Error::Format(format!("split index {i} out of range")));
                    }
                    part.push(i);
                }
            }
            let [train, validation, test] = parts;
            Some(DatasetSplit {
                train,
                validation,
                test,
                seed,
            })
        }
        other => return Err(Error::Format(format!("bad split marker {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after container",
            bytes.len() - cur.pos
        )));
    }
    let dataset = ImageDataset::new(height, width, images, class_names)?;
    Ok((dataset, split))
}

pub fn save_dataset(dataset: &ImageDataset, split: Option<&DatasetSplit>, path: &Path) -> Result<()> {
    let bytes = encode_container(dataset, split)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<(ImageDataset, Option<DatasetSplit>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// Writes an 8-bit RGB PNG from interleaved pixel data.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png {}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn export_png(image: &TrafficImage, path: &Path) -> Result<()> {
    write_rgb_png(path, image.width, image.height, &image.pixels)
}
