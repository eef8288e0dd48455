//! Labelled sample sets: seeded synthetic generators and a CSV directory loader.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::rng::{self, Rng};
use crate::compute::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

/// One minibatch: inputs `[N, ...sample_shape]` and their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            sample_shape,
            inputs,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Batch {
            x: Tensor::new(&shape, data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive minibatches in the given order; the last may be short.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Vec<Batch> {
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Minibatches in index order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        self.batches(&order, batch_size)
    }

    /// A fixed, seeded subset of at most `cap` samples.
    pub fn subset(&self, cap: usize, seed: u64) -> Dataset {
        let mut order = rng::permutation(&mut rng::stream(seed, "subset"), self.len());
        order.truncate(cap);
        order.sort_unstable();
        let b = self.batch(&order);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs: b.x.into_data(),
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    /// Splits off the last `count` samples.
    pub fn split_off(mut self, count: usize) -> (Dataset, Dataset) {
        let keep = self.len().saturating_sub(count);
        let per = self.sample_len();
        let tail = Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs: self.inputs.split_off(keep * per),
            labels: self.labels.split_off(keep),
            num_classes: self.num_classes,
        };
        (self, tail)
    }
}

/// Isotropic Gaussian clusters, one per class, with seeded centres.
pub fn gaussian_blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "blobs");
    let centres: Vec<f64> = (0..classes * dim).map(|_| rng::normal(&mut r, 2.0)).collect();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            inputs.push(centres[c * dim + d] + rng::normal(&mut r, spread));
        }
    }
    Dataset::new(vec![dim], inputs, labels, classes).expect("consistent blobs")
}

/// Parameters of the procedural oriented-grating image task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GratingTask {
    pub classes: usize,
    pub size: usize,
    /// Cycles per image width.
    pub frequency: f64,
    /// Added to every class orientation, in radians.
    pub angle_offset: f64,
    pub noise: f64,
}

impl Default for GratingTask {
    fn default() -> Self {
        Self {
            classes: 10,
            size: 16,
            frequency: 2.5,
            angle_offset: 0.0,
            noise: 0.5,
        }
    }
}

/// 3×size×size images of a sinusoidal grating whose orientation encodes the
/// class (classes evenly spaced over half a turn). Phase, colour balance, and
/// pixel noise are random per sample.
pub fn gratings(task: &GratingTask, n: usize, seed: u64) -> Dataset {
    let mut r: Rng = rng::stream(seed, "gratings");
    let s = task.size;
    let mut inputs = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % task.classes;
        labels.push(c);
        let theta = task.angle_offset + PI * c as f64 / task.classes as f64 + rng::uniform(&mut r, -0.05, 0.05);
        let phase = rng::uniform(&mut r, 0.0, 2.0 * PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let colour: [f64; 3] = std::array::from_fn(|_| rng::uniform(&mut r, 0.5, 1.5));
        for w in colour {
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (x as f64 / s as f64 - 0.5, y as f64 / s as f64 - 0.5);
                    let g = (2.0 * PI * task.frequency * (u * ct + v * st) + phase).sin();
                    inputs.push(w * g + rng::normal(&mut r, task.noise));
                }
            }
        }
    }
    Dataset::new(vec![3, s, s], inputs, labels, task.classes).expect("consistent gratings")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirMeta {
    sample_shape: Vec<usize>,
    num_classes: usize,
}

/// Loads `meta.toml` (`sample_shape`, `num_classes`) and `samples.csv`
/// (header-less rows `label,v1,...,vk`) from `dir`.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let meta = std::fs::read_to_string(dir.join("meta.toml"))?;
    let meta: DirMeta = toml::from_str(&meta).map_err(|e| Error::Config(format!("meta.toml: {e}")))?;
    let per: usize = meta.sample_shape.iter().product();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(dir.join("samples.csv"))
        .map_err(|e| Error::Config(format!("samples.csv: {e}")))?;
    let mut inputs = vec![];
    let mut labels = vec![];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("samples.csv: {e}")))?;
        if record.len() != per + 1 {
            return Err(Error::Config(format!(
                "samples.csv row {}: {} fields, expected {}",
                line + 1,
                record.len(),
                per + 1
            )));
        }
        let bad = |f: &str| Error::Config(format!("samples.csv row {}: bad value `{f}`", line + 1));
        labels.push(record[0].trim().parse::<usize>().map_err(|_| bad(&record[0]))?);
        for f in record.iter().skip(1) {
            inputs.push(f.trim().parse::<f64>().map_err(|_| bad(f))?);
        }
    }
    Dataset::new(meta.sample_shape, inputs, labels, meta.num_classes)
}
