//! Dataset handling: synthetic toy data, image-folder ingestion with a
//! label CSV, deterministic splits, and PNG round-trips.
//!
//! Images are `(channels, height, width)` tensors of reals in `[0, 1]`,
//! batched as `(n, c, h, w)`.

use crate::error::{Error, Result};
use crate::{derive_rng, Rng};
use ndarray::{Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A labeled image classification dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f64> {
        self.images.index_axis(Axis(0), i)
    }

    /// Image shape as `(c, h, w)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers a minibatch by index.
    pub fn select(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let mut out = Array4::zeros((idx.len(), c, h, w));
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.image(i));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }

    /// Replaces every image through `f`, keeping labels.
    pub fn map_images<F>(&self, mut f: F) -> Result<Dataset>
    where
        F: FnMut(usize, ArrayView3<'_, f64>) -> Result<ndarray::Array3<f64>>,
    {
        let mut images = self.images.clone();
        for i in 0..self.len() {
            let new = f(i, self.image(i))?;
            if new.shape() != self.image(i).shape() {
                return Err(Error::Dataset("image transform changed the shape".into()));
            }
            images.index_axis_mut(Axis(0), i).assign(&new);
        }
        Dataset::new(images, self.labels.clone(), self.classes)
    }
}

/// Train/test partition of one dataset.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Deterministic shuffled split; `test_fraction` of the samples
/// (rounded, at least 1) become the test set.
pub fn split_dataset(data: &Dataset, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParam(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::Dataset("need at least 2 samples to split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(seed, 0x5711);
    order.shuffle(&mut rng);
    let test_count = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(test_count);
    let (test_images, test_labels) = data.select(test_idx);
    let (train_images, train_labels) = data.select(train_idx);
    Ok(DataSplit {
        train: Dataset::new(train_images, train_labels, data.classes)?,
        test: Dataset::new(test_images, test_labels, data.classes)?,
    })
}

/// Parameters of the synthetic shape dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToyParams {
    pub classes: usize,
    pub image_size: usize,
    pub samples: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams { classes: 3, image_size: 16, samples: 600, noise: 0.04, seed: 7 }
    }
}

const BACKGROUND: f64 = 0.12;

/// Foreground color for a class: a bright, class-distinct channel mix.
fn class_color(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 4] = [
        [0.92, 0.30, 0.30],
        [0.30, 0.92, 0.30],
        [0.32, 0.40, 0.95],
        [0.92, 0.88, 0.30],
    ];
    if class < BASE.len() {
        BASE[class]
    } else {
        // golden-angle hue walk for additional classes
        let h = (class as f64 * 0.381_966_011) % 1.0;
        [
            0.35 + 0.6 * (h * std::f64::consts::TAU).sin().abs(),
            0.35 + 0.6 * ((h + 0.33) * std::f64::consts::TAU).sin().abs(),
            0.35 + 0.6 * ((h + 0.67) * std::f64::consts::TAU).sin().abs(),
        ]
    }
}

/// Class-conditional geometric patterns: each class has a distinct
/// shape and color, drawn at a jittered position over a dark noisy
/// background. Linear models struggle with the jitter; a small CNN
/// separates the classes comfortably.
pub fn generate_toy_dataset(p: &ToyParams) -> Result<Dataset> {
    if p.classes < 2 {
        return Err(Error::InvalidParam(format!("toy dataset needs >= 2 classes, got {}", p.classes)));
    }
    if p.image_size < 8 {
        return Err(Error::InvalidParam(format!("toy image size must be >= 8, got {}", p.image_size)));
    }
    if p.samples == 0 {
        return Err(Error::InvalidParam("toy dataset needs at least 1 sample".into()));
    }
    if p.noise < 0.0 {
        return Err(Error::InvalidParam(format!("toy noise must be >= 0, got {}", p.noise)));
    }
    let s = p.image_size;
    let mut images = Array4::from_elem((p.samples, 3, s, s), BACKGROUND);
    let mut labels = Vec::with_capacity(p.samples);
    let mut rng = derive_rng(p.seed, 0x7079);
    let noise = Normal::new(0.0, p.noise.max(1e-300)).expect("valid std");
    for i in 0..p.samples {
        let class = i % p.classes;
        labels.push(class);
        let mut img = images.index_axis_mut(Axis(0), i);
        draw_shape(&mut img, class, s, &mut rng);
        if p.noise > 0.0 {
            img.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    Dataset::new(images, labels, p.classes)
}

fn draw_shape(img: &mut ArrayViewMut3<'_, f64>, class: usize, s: usize, rng: &mut Rng) {
    let color = class_color(class);
    let jitter = (s / 8) as i64;
    let dx = rng.random_range(-jitter..=jitter);
    let dy = rng.random_range(-jitter..=jitter);
    let c = (s as i64 / 2 + dy, s as i64 / 2 + dx);
    let half = (s / 4) as i64;
    let mut paint = |y: i64, x: i64| {
        if y >= 0 && x >= 0 && (y as usize) < s && (x as usize) < s {
            for ch in 0..3 {
                img[[ch, y as usize, x as usize]] = color[ch];
            }
        }
    };
    match class % 4 {
        // filled square
        0 => {
            for y in c.0 - half..c.0 + half {
                for x in c.1 - half..c.1 + half {
                    paint(y, x);
                }
            }
        }
        // plus sign
        1 => {
            let arm = (s / 8).max(1) as i64;
            for y in c.0 - 2 * half..c.0 + 2 * half {
                for x in c.1 - arm / 2..=c.1 + arm / 2 {
                    paint(y, x);
                }
            }
            for x in c.1 - 2 * half..c.1 + 2 * half {
                for y in c.0 - arm / 2..=c.0 + arm / 2 {
                    paint(y, x);
                }
            }
        }
        // two horizontal bars
        2 => {
            let bar = (s / 8).max(1) as i64;
            for x in c.1 - half - bar..c.1 + half + bar {
                for y in c.0 - half - bar..c.0 - half {
                    paint(y, x);
                }
                for y in c.0 + half..c.0 + half + bar {
                    paint(y, x);
                }
            }
        }
        // filled disc
        _ => {
            for y in c.0 - half..=c.0 + half {
                for x in c.1 - half..=c.1 + half {
                    let dy = (y - c.0) as f64;
                    let dx = (x - c.1) as f64;
                    if dy * dy + dx * dx <= (half * half) as f64 {
                        paint(y, x);
                    }
                }
            }
        }
    }
}

/// Reads `filename,label` rows; blank lines are skipped and parse
/// failures are reported with their line number. Images must all be
/// decodable 8-bit RGB files of one common size; pixel values scale to
/// `[0, 1]`. `classes: None` infers the class count from the labels.
pub fn ingest_image_folder(dir: &Path, label_csv: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(label_csv)
        .map_err(|e| Error::Dataset(format!("cannot open label csv {}: {e}", label_csv.display())))?;
    let mut rows: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (name, label) = trimmed.split_once(',').ok_or_else(|| {
            Error::Dataset(format!("line {}: expected 'filename,label', got '{trimmed}'", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Dataset(format!("line {}: label '{}' is not a non-negative integer", lineno + 1, label.trim()))
        })?;
        rows.push((name.trim().to_string(), label));
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("label csv {} contains no rows", label_csv.display())));
    }
    let classes = match classes {
        Some(k) => {
            if let Some((name, bad)) = rows.iter().find(|(_, l)| *l >= k) {
                return Err(Error::Dataset(format!("label {bad} for {name} out of range for {k} classes")));
            }
            k
        }
        None => rows.iter().map(|(_, l)| *l).max().expect("nonempty") + 1,
    };

    let mut images: Option<Array4<f64>> = None;
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (name, label)) in rows.iter().enumerate() {
        let path = dir.join(name);
        let img = image::open(&path)
            .map_err(|e| Error::Dataset(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let store = images.get_or_insert_with(|| Array4::zeros((rows.len(), 3, h as usize, w as usize)));
        let shape = store.shape().to_vec();
        if shape[2] != h as usize || shape[3] != w as usize {
            return Err(Error::Dataset(format!(
                "image {} is {}x{} but the first image was {}x{}",
                path.display(),
                w,
                h,
                shape[3],
                shape[2]
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                store[[i, ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
            }
        }
        labels.push(*label);
    }
    Dataset::new(images.expect("rows nonempty"), labels, classes)
}

/// Writes the dataset as zero-padded `img_#####.png` files plus a
/// `labels.csv`; the inverse of [`ingest_image_folder`].
pub fn save_image_folder(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = data.image_shape();
    if c != 3 {
        return Err(Error::Dataset(format!("png export needs 3 channels, got {c}")));
    }
    let mut csv = std::fs::File::create(dir.join("labels.csv"))?;
    for i in 0..data.len() {
        let name = format!("img_{i:05}.png");
        let view = data.image(i);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for ch in 0..3 {
                px.0[ch] = (view[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(dir.join(&name))?;
        writeln!(csv, "{name},{}", data.labels[i])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_is_seed_deterministic() {
        let p = ToyParams { samples: 30, ..ToyParams::default() };
        let a = generate_toy_dataset(&p).unwrap();
        let b = generate_toy_dataset(&p).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn toy_dataset_balance_exact_when_divisible() {
        let p = ToyParams { classes: 3, samples: 60, ..ToyParams::default() };
        let d = generate_toy_dataset(&p).unwrap();
        for class in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&l| l == class).count(), 20);
        }
    }

    #[test]
    fn toy_dataset_pixels_in_unit_interval() {
        let d = generate_toy_dataset(&ToyParams { samples: 12, noise: 0.3, ..ToyParams::default() }).unwrap();
        assert!(d.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn toy_dataset_rejects_bad_params() {
        assert!(generate_toy_dataset(&ToyParams { classes: 1, ..ToyParams::default() }).is_err());
        assert!(generate_toy_dataset(&ToyParams { image_size: 4, ..ToyParams::default() }).is_err());
    }

    #[test]
    fn split_ten_samples_at_tenth_gives_nine_one() {
        let p = ToyParams { classes: 2, samples: 10, ..ToyParams::default() };
        let d = generate_toy_dataset(&p).unwrap();
        let split = split_dataset(&d, 0.1, 3).unwrap();
        assert_eq!(split.train.len(), 9);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let d = generate_toy_dataset(&ToyParams { samples: 10, ..ToyParams::default() }).unwrap();
        assert!(split_dataset(&d, 0.0, 1).is_err());
        assert!(split_dataset(&d, 1.0, 1).is_err());
    }

    #[test]
    fn png_roundtrip_hits_scaling_endpoints() {
        let mut images = Array4::zeros((1, 3, 8, 8));
        images[[0, 0, 0, 0]] = 1.0; // 255 -> 1.0
        let data = Dataset::new(images, vec![0], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_image_folder(&data, dir.path()).unwrap();
        let back = ingest_image_folder(dir.path(), &dir.path().join("labels.csv"), None).unwrap();
        assert_eq!(back.images[[0, 0, 0, 0]], 1.0);
        assert_eq!(back.images[[0, 1, 0, 0]], 0.0);
    }

    #[test]
    fn ingest_rejects_empty_csv() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "\n\n").unwrap();
        let err = ingest_image_folder(dir.path(), &dir.path().join("labels.csv"), None).unwrap_err();
        assert!(err.to_string().contains("no rows"));
    }

    #[test]
    fn ingest_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "a.png,0\nbroken-row\n").unwrap();
        let err = ingest_image_folder(dir.path(), &dir.path().join("labels.csv"), None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn ingest_rejects_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "a.png,5\n").unwrap();
        let err = ingest_image_folder(dir.path(), &dir.path().join("labels.csv"), Some(3)).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn ingest_rejects_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "ghost.png,0\n").unwrap();
        let err = ingest_image_folder(dir.path(), &dir.path().join("labels.csv"), None).unwrap_err();
        assert!(err.to_string().contains("ghost.png"));
    }
}
