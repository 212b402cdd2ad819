use serde::{Deserialize, Serialize};

use super::tape::Matrix;
use crate::error::ModelError;

/// Geometric decay of the query count across decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySchedule {
    pub n_first: usize,
    pub n_last: usize,
    pub rho: f64,
    pub layers: usize,
}

impl QuerySchedule {
    /// A schedule that keeps every query in every layer.
    pub fn constant(n: usize, layers: usize) -> Self {
        Self {
            n_first: n,
            n_last: n,
            rho: 0.5,
            layers,
        }
    }

    /// `n_last == n_first` is accepted and means no pruning.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_first == 0 || self.n_last == 0 {
            return Err(ModelError::Config("query counts must be positive".into()));
        }
        if self.n_last > self.n_first {
            return Err(ModelError::Config(format!(
                "n_last {} exceeds n_first {}",
                self.n_last, self.n_first
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(ModelError::Config(format!("rho {} outside (0, 1)", self.rho)));
        }
        if self.layers == 0 {
            return Err(ModelError::Config("need at least one layer".into()));
        }
        Ok(())
    }

    /// Number of queries alive in layer `i`, rounded half up and clamped to
    /// `[n_last, n_first]`.
    pub fn query_count(&self, i: usize) -> Result<usize, ModelError> {
        if i >= self.layers {
            return Err(ModelError::LayerOutOfRange {
                index: i,
                layers: self.layers,
            });
        }
        if i == 0 {
            return Ok(self.n_first);
        }
        let span = (self.n_first - self.n_last) as f64;
        let raw = span * self.rho.powi(i as i32) + self.n_last as f64;
        let n = (raw + 0.5).floor() as usize;
        Ok(n.clamp(self.n_last, self.n_first))
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|i| self.query_count(i).expect("index in range"))
            .collect()
    }
}

/// Query features entering a decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryState {
    /// One row per query.
    pub features: Matrix,
    /// Reference point of each query in logit space (pre-sigmoid,
    /// normalized image coordinates).
    pub refs: Vec<[f64; 2]>,
    /// Index of each query in the first layer.
    pub ids: Vec<usize>,
}

impl QueryState {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.refs.len() != self.features.rows || self.ids.len() != self.features.rows {
            return Err(ModelError::Shape(format!(
                "{} feature rows, {} refs, {} ids",
                self.features.rows,
                self.refs.len(),
                self.ids.len()
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` highest scores, returned in ascending index order.
/// Equal scores prefer the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>, ModelError> {
    if k > scores.len() {
        return Err(ModelError::TopKTooLarge {
            k,
            count: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Keeps the `k` queries with the largest class probability. Survivors
/// keep their relative order and their features are copied untouched.
pub fn select_topk(state: &QueryState, class_probs: &[f64], k: usize) -> Result<QueryState, ModelError> {
    state.check()?;
    if class_probs.len() != state.len() {
        return Err(ModelError::Shape(format!(
            "{} probabilities for {} queries",
            class_probs.len(),
            state.len()
        )));
    }
    let keep = topk_indices(class_probs, k)?;
    Ok(QueryState {
        features: state.features.gather_rows(&keep),
        refs: keep.iter().map(|&i| state.refs[i]).collect(),
        ids: keep.iter().map(|&i| state.ids[i]).collect(),
    })
}

/// Element-wise sum of the two branch outputs. References and ids come from
/// `class_features`.
pub fn fuse_features(class_features: &QueryState, box_features: &QueryState) -> Result<QueryState, ModelError> {
    class_features.check()?;
    if class_features.features.shape() != box_features.features.shape() {
        return Err(ModelError::Shape(format!(
            "fusing {:?} with {:?}",
            class_features.features.shape(),
            box_features.features.shape()
        )));
    }
    let a = &class_features.features;
    let data = a
        .data
        .iter()
        .zip(&box_features.features.data)
        .map(|(x, y)| x + y)
        .collect();
    Ok(QueryState {
        features: Matrix::from_vec(a.rows, a.cols, data),
        refs: class_features.refs.clone(),
        ids: class_features.ids.clone(),
    })
}
