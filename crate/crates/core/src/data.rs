//! In-memory datasets and the synthetic transfer classification generator.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Features `[n × k]` with targets whose leading dimension is `n`.
/// Classification targets hold integer class indices stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    targets: Tensor,
    num_classes: Option<usize>,
}

impl Dataset {
    pub fn classification(features: Tensor, labels: Tensor, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        for (i, &y) in labels.data().iter().enumerate() {
            if y.fract() != 0.0 || y < 0.0 || y >= num_classes as f64 {
                return Err(invalid(format!("label {y} at row {i} outside [0, {num_classes})")));
            }
        }
        Self::build(features, labels, Some(num_classes))
    }

    pub fn regression(features: Tensor, targets: Tensor) -> Result<Self> {
        Self::build(features, targets, None)
    }

    fn build(features: Tensor, targets: Tensor, num_classes: Option<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(invalid(format!(
                "features must be a matrix, got {:?}",
                features.shape()
            )));
        }
        if targets.rows() != features.rows() || targets.shape().is_empty() {
            return Err(invalid(format!(
                "{} feature rows but targets have shape {:?}",
                features.rows(),
                targets.shape()
            )));
        }
        Ok(Self {
            features,
            targets,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// `None` for regression.
    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn is_classification(&self) -> bool {
        self.num_classes.is_some()
    }

    /// Rows `idx` as a `(features, targets)` mini-batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (self.features.select_rows(idx), self.targets.select_rows(idx))
    }

    /// Contiguous rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (start..end.min(self.len())).collect();
        self.batch(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Source and target tasks drawn from one shared set of blobs.
#[derive(Debug, Clone)]
pub struct SynthTransfer {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

/// Builds a pair of related classification tasks.
///
/// `2C` blob centres sit at `separation · u` for random unit vectors `u`;
/// samples are a centre plus `N(0, I)` noise. Target class `c` is the union
/// of blobs `c` and `c + C`; source class `c` pairs blob `c` with blob
/// `(c + 1) mod C + C`. The tasks share every blob but not the partition,
/// so source features are useful yet the source head is wrong.
pub fn make_synth_classification(spec: &SynthSpec) -> Result<SynthTransfer> {
    let c = spec.num_classes;
    if c < 2 {
        return Err(invalid(format!("need at least 2 classes, got {c}")));
    }
    if spec.per_class == 0 || spec.dim == 0 {
        return Err(invalid("per_class and dim must be positive"));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(invalid(format!("separation must be >= 0, got {}", spec.separation)));
    }
    let root = Rng::new(spec.seed);
    let centres = blob_centres(2 * c, spec.dim, spec.separation, &mut root.derive("centres"));
    let target_blobs = |k: usize, j: usize| if j.is_multiple_of(2) { k } else { k + c };
    let source_blobs = |k: usize, j: usize| if j.is_multiple_of(2) { k } else { (k + 1) % c + c };
    let test_n = spec.test_per_class.unwrap_or(spec.per_class);
    let gen = |blobs: &dyn Fn(usize, usize) -> usize, n: usize, stream: &str| {
        sample_blobs(&centres, c, n, spec.dim, blobs, &mut root.derive(stream))
    };
    Ok(SynthTransfer {
        source_train: gen(&source_blobs, spec.per_class, "source-train")?,
        source_test: gen(&source_blobs, test_n, "source-test")?,
        target_train: gen(&target_blobs, spec.per_class, "target-train")?,
        target_test: gen(&target_blobs, test_n, "target-test")?,
    })
}

fn blob_centres(count: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| separation * x / norm).collect()
        })
        .collect()
}

/// `per_class` samples per class, alternating between the class's two blobs.
fn sample_blobs(
    centres: &[Vec<f64>],
    num_classes: usize,
    per_class: usize,
    dim: usize,
    blob_of: &dyn Fn(usize, usize) -> usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for j in 0..per_class {
        for k in 0..num_classes {
            let centre = &centres[blob_of(k, j)];
            features.extend(centre.iter().map(|m| m + rng.normal()));
            labels.push(k as f64);
        }
    }
    Dataset::classification(
        Tensor::new(vec![n, dim], features)?,
        Tensor::from_vec(labels),
        num_classes,
    )
}
