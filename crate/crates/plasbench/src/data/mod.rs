//! Dataset ingestion, the staged-split constructor, and the non-stationary
//! batch samplers.

pub mod cifar;
pub mod idx;
pub mod sampler;
pub mod stages;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

/// An immutable labeled dataset: N examples of one shape, class labels in
/// `0..num_classes`. Shareable across concurrent runs after load.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub name: String,
    feature_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<u32>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        feature_shape: Vec<usize>,
        features: Vec<f32>,
        labels: Vec<u32>,
        num_classes: usize,
    ) -> Result<Self> {
        let per_example: usize = feature_shape.iter().product();
        if per_example == 0 || labels.is_empty() || features.len() != labels.len() * per_example {
            return Err(Error::Consistency(format!(
                "dataset needs N >= 1 examples of shape {:?}; got {} feature values for {} labels",
                feature_shape,
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Consistency(
                "dataset needs at least 2 classes".into(),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::Label {
                label: l,
                num_classes,
                index: i,
            });
        }
        Ok(LabeledDataset {
            name: name.into(),
            feature_shape,
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let k: usize = self.feature_shape.iter().product();
        &self.features[i * k..(i + 1) * k]
    }

    /// Reinterprets every example under a new shape with the same element
    /// count (e.g. flat vectors viewed as 1xHxW images).
    pub fn with_feature_shape(mut self, shape: Vec<usize>) -> Result<Self> {
        let old: usize = self.feature_shape.iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(Error::Dim {
                op: "with_feature_shape",
                lhs: self.feature_shape.clone(),
                rhs: shape,
            });
        }
        self.feature_shape = shape;
        Ok(self)
    }

    /// Assembles the batch `[len(idxs), feature_shape...]` with its labels.
    pub fn gather_batch<E: Scalar>(&self, idxs: &[u32]) -> (Tensor<E>, Vec<u32>) {
        let k: usize = self.feature_shape.iter().product();
        let mut data = Vec::with_capacity(idxs.len() * k);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let i = i as usize;
            data.extend(self.features[i * k..(i + 1) * k].iter().map(|&v| E::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idxs.len()];
        shape.extend_from_slice(&self.feature_shape);
        (Tensor::new(shape, data).expect("shape matches data"), labels)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// SHA-256 over the raw feature and label bytes, for `datacheck`.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// In-place per-channel standardization (mean 0, std 1 over the dataset),
    /// assuming the leading feature axis is the channel axis.
    pub fn standardize_per_channel(&mut self) {
        let channels = self.feature_shape[0];
        let plane: usize = self.feature_shape[1..].iter().product::<usize>().max(1);
        let per_example = channels * plane;
        for c in 0..channels {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for e in 0..self.len() {
                let base = e * per_example + c * plane;
                for i in 0..plane {
                    sum += self.features[base + i] as f64;
                    count += 1;
                }
            }
            let mean = sum / count as f64;
            let mut var = 0.0f64;
            for e in 0..self.len() {
                let base = e * per_example + c * plane;
                for i in 0..plane {
                    let d = self.features[base + i] as f64 - mean;
                    var += d * d;
                }
            }
            let std = (var / count as f64).sqrt().max(1e-8);
            for e in 0..self.len() {
                let base = e * per_example + c * plane;
                for i in 0..plane {
                    self.features[base + i] =
                        ((self.features[base + i] as f64 - mean) / std) as f32;
                }
            }
        }
    }
}

/// Orthonormal class directions scaled by `margin` (Gram-Schmidt over seeded
/// Gaussian draws). Falls back to plain unit directions when there are more
/// classes than dimensions.
fn class_centers(num_classes: usize, dim: usize, margin: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    use rand_distr::StandardNormal;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64>;
        loop {
            v = (0..dim)
                .map(|_| rand::Rng::sample(rng, StandardNormal))
                .collect();
            if num_classes <= dim {
                for other in &centers {
                    let dot: f64 = v.iter().zip(other).map(|(a, b)| a * b).sum();
                    let scale = dot / (margin * margin);
                    for (vi, oi) in v.iter_mut().zip(other) {
                        *vi -= scale * oi;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in v.iter_mut() {
                    *x *= margin / norm;
                }
                break;
            }
        }
        centers.push(v);
    }
    centers
}

/// Gaussian blobs (unit noise) around margin-scaled unit-direction class
/// centers. Deterministic per seed; balanced `per_class` examples per class,
/// labels grouped then interleaved by construction order.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    margin: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let (train, _) = make_synthetic_split(num_classes, per_class, 0, input_dim, margin, seed)?;
    Ok(train)
}

/// Train and test sets drawn around the same class centers.
pub fn make_synthetic_split(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    input_dim: usize,
    margin: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    use rand_distr::StandardNormal;
    if margin <= 0.0 {
        return Err(Error::Config("synthetic margin must be positive".into()));
    }
    if num_classes < 2 || per_class_train == 0 || input_dim == 0 {
        return Err(Error::Config(
            "synthetic corpus needs >= 2 classes, >= 1 example per class, dim >= 1".into(),
        ));
    }
    let mut center_rng = rng::rng_from(rng::derive(seed, "synthetic-centers"));
    let centers = class_centers(num_classes, input_dim, margin, &mut center_rng);

    let draw = |per_class: usize, tag: &str| -> (Vec<f32>, Vec<u32>) {
        let mut rng = rng::rng_from(rng::derive(seed, tag));
        let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
        let mut labels = Vec::with_capacity(num_classes * per_class);
        for _ in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                for &mu in center {
                    let z: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                    features.push((mu + z) as f32);
                }
                labels.push(c as u32);
            }
        }
        (features, labels)
    };

    let (train_x, train_y) = draw(per_class_train, "synthetic-train");
    let train = LabeledDataset::new(
        "synthetic",
        vec![input_dim],
        train_x,
        train_y,
        num_classes,
    )?;
    let test = if per_class_test == 0 {
        train.clone()
    } else {
        let (test_x, test_y) = draw(per_class_test, "synthetic-test");
        LabeledDataset::new("synthetic-test", vec![input_dim], test_x, test_y, num_classes)?
    };
    Ok((train, test))
}

/// Uniformly random half (floor(N/2)) as the pretrain index set; the full set
/// is every index. Deterministic per seed; both sets sorted ascending.
pub fn half_split(dataset: &LabeledDataset, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Config("half_split needs at least 2 examples".into()));
    }
    use rand::seq::SliceRandom;
    let mut rng = rng::rng_from(rng::derive(seed, "half-split"));
    let mut idxs: Vec<u32> = (0..n as u32).collect();
    idxs.shuffle(&mut rng);
    let mut pretrain: Vec<u32> = idxs[..n / 2].to_vec();
    pretrain.sort_unstable();
    let full: Vec<u32> = (0..n as u32).collect();
    Ok((pretrain, full))
}
