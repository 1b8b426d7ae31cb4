//! Datasets and their non-IID split across clients.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be > 0".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be > 0".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Mismatch(format!(
                "{} feature values for {} labels of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
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

    /// Builds a dataset from the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Row indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Moves the last `per_class` rows of every class into a held-out set.
    /// Returns `(train, test)`.
    pub fn split_per_class(&self, per_class: usize) -> Result<(Dataset, Dataset)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, rows) in self.class_indices().into_iter().enumerate() {
            if rows.len() <= per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} rows, cannot hold out {per_class}",
                    rows.len()
                )));
            }
            let cut = rows.len() - per_class;
            train.extend_from_slice(&rows[..cut]);
            test.extend_from_slice(&rows[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Isotropic unit-variance Gaussian clusters, one per class, with each class
/// mean at distance `class_separation` from the origin along a random
/// direction. The directions are mutually orthogonal when there are no more
/// classes than dimensions. Rows are ordered class-major.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "num_classes, dim and samples_per_class must all be > 0".into(),
        ));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::InvalidArgument(
            "class_separation must be a positive finite number".into(),
        ));
    }

    let mut means_rng = rng::stream(seed, &["synthetic".into(), "means".into()]);
    let orthogonal = num_classes <= dim;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while dirs.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut means_rng)).collect();
        if orthogonal {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let means: Vec<Vec<f64>> = dirs
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * class_separation).collect())
        .collect();

    let mut sample_rng = rng::stream(seed, &["synthetic".into(), "samples".into()]);
    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut sample_rng);
                features.push(m + z);
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, dim, num_classes)
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated header while reading {what}")))
}

/// Reads an IDX image/label file pair (the MNIST layout). Pixels are scaled
/// to `[0, 1]`, each image is flattened row-major, and the class count is
/// one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(images, 4, "image count")? as usize;
    let rows = read_be_u32(images, 8, "image rows")? as usize;
    let cols = read_be_u32(images, 12, "image cols")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Format("image dimensions must be nonzero".into()));
    }
    let body = &images[16..];
    if body.len() != count * dim {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header promises {count}x{rows}x{cols} = {}",
            body.len(),
            count * dim
        )));
    }

    let magic = read_be_u32(labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_be_u32(labels, 4, "label count")? as usize;
    let label_body = &labels[8..];
    if label_body.len() != label_count {
        return Err(Error::Format(format!(
            "label payload has {} bytes, header promises {label_count}",
            label_body.len()
        )));
    }
    if label_count != count {
        return Err(Error::Mismatch(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 {
        return Err(Error::Format("IDX files contain no samples".into()));
    }

    let features = body.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = label_body.iter().map(|&l| usize::from(l)).collect();
    let num_classes = 1 + labels.iter().copied().max().unwrap_or(0);
    Dataset::new(features, labels, dim, num_classes)
}

/// How samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Iid,
    /// A `psi` share of every client's samples comes from one class.
    DominantClass { psi: f64 },
    /// Every client lacks `psi` classes entirely.
    SkewedLabel { psi: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.scheme {
            Scheme::Iid => Ok(()),
            Scheme::DominantClass { psi } if (0.0..=1.0).contains(&psi) => Ok(()),
            Scheme::DominantClass { psi } => Err(Error::InvalidArgument(format!(
                "dominant_class requires 0 <= psi <= 1, got {psi}"
            ))),
            Scheme::SkewedLabel { psi } if psi < num_classes => Ok(()),
            Scheme::SkewedLabel { psi } => Err(Error::InvalidArgument(format!(
                "skewed_label requires psi < num_classes ({num_classes}), got {psi}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl Partition {
    fn from_assignments(assignments: Vec<Vec<usize>>) -> Self {
        let total: usize = assignments.iter().map(Vec::len).sum();
        let weights = assignments
            .iter()
            .map(|a| a.len() as f64 / total as f64)
            .collect();
        Partition {
            assignments,
            weights,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Per-client label counts.
    pub fn class_histogram(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|rows| {
                let mut h = vec![0; dataset.num_classes()];
                for &r in rows {
                    h[dataset.label(r)] += 1;
                }
                h
            })
            .collect()
    }

    /// JSON object mapping client id to its sample indices.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .assignments
            .iter()
            .enumerate()
            .map(|(c, rows)| (c.to_string(), serde_json::json!(rows)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Class pools drawn from without replacement. Draws fall back to sampling
/// with replacement from the full class once the pools run dry.
struct Pools {
    remaining: Vec<Vec<usize>>,
    full: Vec<Vec<usize>>,
}

impl Pools {
    fn new(dataset: &Dataset, rng: &mut rng::Stream) -> Self {
        let full = dataset.class_indices();
        let remaining = full
            .iter()
            .map(|rows| {
                let mut r = rows.clone();
                r.shuffle(rng);
                r
            })
            .collect();
        Pools { remaining, full }
    }

    fn draw_from(&mut self, class: usize, rng: &mut rng::Stream) -> Result<usize> {
        if let Some(i) = self.remaining[class].pop() {
            return Ok(i);
        }
        let full = &self.full[class];
        if full.is_empty() {
            return Err(Error::ExhaustedClass(class));
        }
        Ok(full[rng.random_range(0..full.len())])
    }

    /// Uniform draw over the union of the remaining samples of `classes`.
    fn draw_union(&mut self, classes: &[usize], rng: &mut rng::Stream) -> Result<usize> {
        let live: usize = classes.iter().map(|&c| self.remaining[c].len()).sum();
        if live > 0 {
            let mut pick = rng.random_range(0..live);
            for &c in classes {
                let n = self.remaining[c].len();
                if pick < n {
                    return self.draw_from(c, rng);
                }
                pick -= n;
            }
            unreachable!("pick is below the live total");
        }
        let nonempty: Vec<usize> = classes
            .iter()
            .copied()
            .filter(|&c| !self.full[c].is_empty())
            .collect();
        if nonempty.is_empty() {
            return Err(Error::ExhaustedClass(classes.first().copied().unwrap_or(0)));
        }
        let c = nonempty[rng.random_range(0..nonempty.len())];
        self.draw_from(c, rng)
    }
}

fn iid_split(total: usize, sizes: &[usize], rng: &mut rng::Stream) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = (0..total).collect();
    all.shuffle(rng);
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(all[at..at + s].to_vec());
        at += s;
    }
    out
}

fn client_sizes(total: usize, num_clients: usize) -> Vec<usize> {
    let base = total / num_clients;
    let rem = total % num_clients;
    (0..num_clients).map(|n| base + usize::from(n < rem)).collect()
}

/// Splits `dataset` across `num_clients` clients.
///
/// Each client gets `⌊|D|/N⌋` samples, with the remainder going to the first
/// clients. Under `dominant_class`, client `n`'s dominant class is
/// `n mod num_classes`; `⌈ψ·s_n⌉` of its samples come from it and the rest are
/// drawn uniformly from the remaining samples of the other classes. `ψ = 0`
/// is the IID split.
pub fn partition(dataset: &Dataset, num_clients: usize, spec: &PartitionSpec) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot partition an empty dataset".into()));
    }
    spec.validate(dataset.num_classes())?;

    let mut rng = rng::stream(spec.seed, &["partition".into()]);
    let sizes = client_sizes(dataset.len(), num_clients);
    let classes = dataset.num_classes();

    let assignments = match spec.scheme {
        Scheme::DominantClass { psi: 0.0 } => iid_split(dataset.len(), &sizes, &mut rng),
        Scheme::Iid => iid_split(dataset.len(), &sizes, &mut rng),
        Scheme::DominantClass { psi } => {
            let mut pools = Pools::new(dataset, &mut rng);
            let mut out: Vec<Vec<usize>> = Vec::with_capacity(num_clients);
            // All dominant shares are drawn first so that the other-class
            // draws never eat into a class some later client needs.
            for (n, &s) in sizes.iter().enumerate() {
                let dom = n % classes;
                let take = ((psi * s as f64).ceil() as usize).min(s);
                let mut rows = Vec::with_capacity(s);
                for _ in 0..take {
                    rows.push(pools.draw_from(dom, &mut rng)?);
                }
                out.push(rows);
            }
            for (n, &s) in sizes.iter().enumerate() {
                let dom = n % classes;
                let others: Vec<usize> = (0..classes).filter(|&c| c != dom).collect();
                while out[n].len() < s {
                    let row = if others.is_empty() {
                        pools.draw_from(dom, &mut rng)?
                    } else {
                        pools.draw_union(&others, &mut rng)?
                    };
                    out[n].push(row);
                }
            }
            out
        }
        Scheme::SkewedLabel { psi } => {
            let mut pools = Pools::new(dataset, &mut rng);
            let mut out = Vec::with_capacity(num_clients);
            for &s in &sizes {
                let mut all: Vec<usize> = (0..classes).collect();
                all.shuffle(&mut rng);
                let mut allowed = all[psi..].to_vec();
                allowed.sort_unstable();
                let mut rows = Vec::with_capacity(s);
                for _ in 0..s {
                    rows.push(pools.draw_union(&allowed, &mut rng)?);
                }
                out.push(rows);
            }
            out
        }
    };
    Ok(Partition::from_assignments(assignments))
}
