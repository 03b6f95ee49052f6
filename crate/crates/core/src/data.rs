//! Datasets: the synthetic Gaussian-blob generator and CSV ingestion.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Labelled samples of a fixed shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 {
            return Err(Error::Domain("empty sample shape".into()));
        }
        if features.len() != d * labels.len() {
            return Err(Error::Domain(format!(
                "{} features do not fit {} samples of size {d}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.sample(i).to_vec()).expect("sample shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Reads `label,f_1,...,f_D` rows. A header row is skipped when its first
    /// field is not an integer.
    pub fn from_csv<R: Read>(reader: R, sample_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("csv row {}: {e}", row + 1)))?;
            let mut fields = rec.iter();
            let first = fields.next().unwrap_or("").trim();
            let Ok(label) = first.parse::<usize>() else {
                if row == 0 {
                    continue;
                }
                return Err(Error::Format(format!("csv row {}: bad label {first:?}", row + 1)));
            };
            let before = features.len();
            for f in fields {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("csv row {}: bad value {f:?}", row + 1)))?;
                features.push(v);
            }
            if features.len() - before != d {
                return Err(Error::Format(format!(
                    "csv row {}: expected {d} features, found {}",
                    row + 1,
                    features.len() - before
                )));
            }
            labels.push(label);
        }
        Dataset::new(sample_shape, features, labels, num_classes)
    }

    pub fn from_csv_path(path: &Path, sample_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?, sample_shape, num_classes)
    }
}

/// Synthetic class-conditional Gaussian-blob images.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Samples generated per class, before splitting 60/20/20 into
    /// train/cert/eval.
    pub per_class: usize,
    /// Distance from each class prototype to the nearest pairwise
    /// bisecting hyperplane, in units of `noise_std`.
    pub margin: f64,
    /// Per-pixel standard deviation of the within-class noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            channels: 3,
            image_size: 8,
            per_class: 600,
            margin: 1.5,
            noise_std: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub cert: Dataset,
    pub eval: Dataset,
}

/// Unit-free class prototypes before scaling: a spatial bump per class with a
/// class-dependent channel mix.
fn raw_prototypes(cfg: &DataConfig) -> Vec<Vec<f64>> {
    let s = cfg.image_size as f64;
    let c0 = (s - 1.0) / 2.0;
    let width = (s / 5.0).max(0.75);
    (0..cfg.num_classes)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / cfg.num_classes as f64;
            let (cx, cy) = (c0 + 0.25 * s * theta.cos(), c0 + 0.25 * s * theta.sin());
            let mut img = Vec::with_capacity(cfg.channels * cfg.image_size * cfg.image_size);
            for ch in 0..cfg.channels {
                let mix = 1.0 + 0.5 * (theta + std::f64::consts::TAU * ch as f64 / cfg.channels as f64).cos();
                for y in 0..cfg.image_size {
                    for x in 0..cfg.image_size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        img.push(mix * (-d2 / (2.0 * width * width)).exp());
                    }
                }
            }
            img
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class prototypes centred at the origin, scaled so the closest pair sits
/// `2 · margin · noise_std` apart.
pub fn prototypes(cfg: &DataConfig) -> Vec<Vec<f64>> {
    let mut protos = raw_prototypes(cfg);
    let d = protos[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| protos.iter().map(|p| p[j]).sum::<f64>() / protos.len() as f64)
        .collect();
    for p in protos.iter_mut() {
        p.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let mut min_dist = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            min_dist = min_dist.min(distance(&protos[i], &protos[j]));
        }
    }
    let scale = 2.0 * cfg.margin * cfg.noise_std / min_dist;
    for p in protos.iter_mut() {
        p.iter_mut().for_each(|v| *v *= scale);
    }
    protos
}

/// Generates the deterministic train/cert/eval splits.
pub fn gen_dataset(cfg: &DataConfig) -> Result<DatasetSplits> {
    if cfg.num_classes < 2 || cfg.channels == 0 || cfg.image_size == 0 {
        return Err(Error::Config("need at least 2 classes and non-empty images".into()));
    }
    if cfg.per_class < 5 {
        return Err(Error::Config(format!(
            "per-class count must be at least 5, got {}",
            cfg.per_class
        )));
    }
    if !(cfg.margin > 0.0 && cfg.margin.is_finite()) {
        return Err(Error::Config(format!("margin must be positive, got {}", cfg.margin)));
    }
    if !(cfg.noise_std > 0.0 && cfg.noise_std.is_finite()) {
        return Err(Error::Config("noise_std must be positive".into()));
    }
    let protos = prototypes(cfg);
    let d = protos[0].len();
    let shape = vec![cfg.channels, cfg.image_size, cfg.image_size];
    let mut rng = rng::stream(cfg.seed, Purpose::Data);

    let n = cfg.per_class * cfg.num_classes;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..cfg.per_class {
        for (k, proto) in protos.iter().enumerate() {
            for &m in proto {
                let e: f64 = rng.sample(StandardNormal);
                features.push(m + cfg.noise_std * e);
            }
            labels.push(k);
        }
    }
    let all = Dataset::new(shape, features, labels, cfg.num_classes)?;

    // Stratified split so every part keeps the class balance.
    let mut split_rng = rng::stream(cfg.seed, Purpose::Split);
    let n_train = cfg.per_class * 3 / 5;
    let n_cert = (cfg.per_class - n_train) / 2;
    let (mut train, mut cert, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..cfg.num_classes {
        let mut idx: Vec<usize> = (0..cfg.per_class).map(|i| i * cfg.num_classes + k).collect();
        idx.shuffle(&mut split_rng);
        train.extend_from_slice(&idx[..n_train]);
        cert.extend_from_slice(&idx[n_train..n_train + n_cert]);
        eval.extend_from_slice(&idx[n_train + n_cert..]);
    }
    for part in [&mut train, &mut cert, &mut eval] {
        part.shuffle(&mut split_rng);
    }
    Ok(DatasetSplits {
        train: all.subset(&train),
        cert: all.subset(&cert),
        eval: all.subset(&eval),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_split() {
        let cfg = DataConfig {
            per_class: 20,
            ..DataConfig::default()
        };
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 36);
        assert_eq!(a.cert.len(), 12);
        assert_eq!(a.eval.len(), 12);
        for k in 0..3 {
            assert_eq!(a.cert.labels().iter().filter(|&&l| l == k).count(), 4);
        }
    }

    #[test]
    fn prototypes_respect_margin() {
        let cfg = DataConfig {
            margin: 2.0,
            noise_std: 0.5,
            ..DataConfig::default()
        };
        let p = prototypes(&cfg);
        let mut min = f64::INFINITY;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                min = min.min(distance(&p[i], &p[j]));
            }
        }
        assert!((min - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let zero = DataConfig {
            per_class: 0,
            ..DataConfig::default()
        };
        assert!(matches!(gen_dataset(&zero), Err(Error::Config(_))));
        let flat = DataConfig {
            margin: 0.0,
            ..DataConfig::default()
        };
        assert!(matches!(gen_dataset(&flat), Err(Error::Config(_))));
    }

    #[test]
    fn csv_ingestion() {
        let text = "label,a,b\n1,0.5,-1\n0,2,3\n";
        let ds = Dataset::from_csv(text.as_bytes(), vec![2], 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample(0), &[0.5, -1.0]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert!(Dataset::from_csv("1,0.5\n".as_bytes(), vec![2], 2).is_err());
        assert!(Dataset::from_csv("3,0.5,1\n".as_bytes(), vec![2], 2).is_err());
    }
}
