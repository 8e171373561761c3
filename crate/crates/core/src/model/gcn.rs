//! Graph pieces: the trainable general correlation matrix, the
//! sample-specific correlation head, and the two-layer GCN weights.

use crate::error::{Error, Result};
use crate::model::backbone::{leaky_relu, uniform_signed};
use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which matrices drive the two GCN layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmMode {
    /// Learned general matrix in layer 1, sample-specific matrix in layer 2.
    #[serde(rename = "general+specific")]
    GeneralSpecific,
    /// Learned general matrix in both layers.
    #[serde(rename = "general-only")]
    GeneralOnly,
    /// A fixed co-occurrence matrix in both layers; nothing graph-side is
    /// learned about relationships.
    #[serde(rename = "statistical")]
    Statistical,
}

/// Trainable square class-relationship matrix. Grows block-wise: expansion
/// keeps the old block bit-for-bit and fills new rows/columns with small
/// positive values drawn at the scale fixed by the first task's class count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    values: Array2<f64>,
    init_scale: f64,
}

impl CorrelationMatrix {
    pub fn new(classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("correlation matrix needs at least 1 class"));
        }
        let init_scale = 1.0 / classes as f64;
        let dist = Uniform::new(0.0, init_scale);
        let values = Array2::from_shape_fn((classes, classes), |_| dist.sample(rng));
        Ok(CorrelationMatrix { values, init_scale })
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    /// Grows to (old+new) x (old+new). The old block is moved bit-for-bit.
    pub fn expand(&mut self, new_classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::config("expansion must add at least one class"));
        }
        let old = self.size();
        let total = old + new_classes;
        let dist = Uniform::new(0.0, self.init_scale);
        let mut grown = Array2::zeros((total, total));
        grown
            .slice_mut(ndarray::s![..old, ..old])
            .assign(&self.values);
        // Fill the border row-major so the draw order is stable.
        for i in 0..total {
            for j in 0..total {
                if i >= old || j >= old {
                    grown[(i, j)] = dist.sample(rng);
                }
            }
        }
        self.values = grown;
        Ok(())
    }
}

/// Produces the sample-specific correlation matrix from first-layer node
/// features: nodes are summed into a global feature, passed through a
/// learned linear map, concatenated back onto every node, and mixed into
/// pairwise scores squashed by a sigmoid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SpecificCmHead {
    /// [D1, D1] applied to the node sum.
    pub(crate) w_pool: Array2<f64>,
    pub(crate) b_pool: Array1<f64>,
    /// [2*D1, |C|]; column j scores edges into class j.
    pub(crate) w_mix: Array2<f64>,
}

#[derive(Debug)]
pub(crate) struct SpecificTrace {
    /// Node sum over classes, [D1].
    pub(crate) node_sum: Array1<f64>,
    /// [V1 | v] per node, [|C|, 2*D1]; the right half repeats the pooled
    /// global feature v on every row.
    pub(crate) augmented: Array2<f64>,
    /// sigmoid(augmented . w_mix), [|C|, |C|].
    pub(crate) a_s: Array2<f64>,
}

impl SpecificCmHead {
    pub(crate) fn new(d1: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_pool = Array2::from_shape_vec((d1, d1), uniform_signed(d1, rng, d1 * d1))
            .expect("init length matches shape");
        let w_mix =
            Array2::from_shape_vec((2 * d1, classes), uniform_signed(2 * d1, rng, 2 * d1 * classes))
                .expect("init length matches shape");
        SpecificCmHead {
            w_pool,
            b_pool: Array1::zeros(d1),
            w_mix,
        }
    }

    pub(crate) fn expand(&mut self, new_classes: usize, rng: &mut ChaCha8Rng) {
        let rows = self.w_mix.nrows();
        let old = self.w_mix.ncols();
        let fresh = uniform_signed(rows, rng, rows * new_classes);
        let mut grown = Array2::zeros((rows, old + new_classes));
        grown.slice_mut(ndarray::s![.., ..old]).assign(&self.w_mix);
        for (i, v) in fresh.into_iter().enumerate() {
            grown[(i / new_classes, old + i % new_classes)] = v;
        }
        self.w_mix = grown;
    }

    pub(crate) fn forward(&self, v1: &Array2<f64>) -> Result<SpecificTrace> {
        let d1 = self.w_pool.nrows();
        if v1.ncols() != d1 {
            return Err(Error::shape(
                "specific cm input",
                format!("{d1} features"),
                format!("{}", v1.ncols()),
            ));
        }
        let classes = v1.nrows();
        let node_sum = v1.sum_axis(Axis(0));
        let pooled = node_sum.dot(&self.w_pool) + &self.b_pool;
        let mut augmented = Array2::zeros((classes, 2 * d1));
        for c in 0..classes {
            for d in 0..d1 {
                augmented[(c, d)] = v1[(c, d)];
                augmented[(c, d1 + d)] = pooled[d];
            }
        }
        let a_s = augmented.dot(&self.w_mix).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Ok(SpecificTrace {
            node_sum,
            augmented,
            a_s,
        })
    }
}

/// Shared feature transforms of the two graph layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct GcnStack {
    /// [D0, D1]
    pub(crate) w_g: Array2<f64>,
    /// [D1, D2]
    pub(crate) w_s: Array2<f64>,
}

impl GcnStack {
    pub(crate) fn new(d0: usize, d1: usize, d2: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_g = Array2::from_shape_vec((d0, d1), uniform_signed(d0, rng, d0 * d1))
            .expect("init length matches shape");
        let w_s = Array2::from_shape_vec((d1, d2), uniform_signed(d1, rng, d1 * d2))
            .expect("init length matches shape");
        GcnStack { w_g, w_s }
    }
}

/// One propagation layer: LReLU(A . V . W). Returns (pre-activation, output).
pub(crate) fn gcn_layer(
    adjacency: &Array2<f64>,
    nodes: &Array2<f64>,
    weight: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let pre = adjacency.dot(nodes).dot(weight);
    let post = pre.mapv(leaky_relu);
    (pre, post)
}
