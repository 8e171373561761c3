//! Class activation maps: a per-class 1x1 convolution over backbone
//! features, normalized into spatial masks that pool features into one graph
//! node per class.

use crate::error::{Error, Result};
use crate::model::backbone::uniform_signed;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How raw class maps become pooling masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Softmax over spatial positions per class channel: each mask is a
    /// spatial distribution (sums to 1).
    #[serde(rename = "softmax-spatial")]
    SoftmaxSpatial,
    /// Element-wise sigmoid of the raw maps.
    #[serde(rename = "sigmoid")]
    Sigmoid,
}

/// 1x1 convolution without bias; column c is class c's channel weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CamHead {
    /// [D0, |C|]
    pub(crate) weight: Array2<f64>,
}

impl CamHead {
    pub(crate) fn new(d0: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_vec((d0, classes), uniform_signed(d0, rng, d0 * classes))
            .expect("init length matches shape");
        CamHead { weight }
    }

    pub(crate) fn classes(&self) -> usize {
        self.weight.ncols()
    }

    /// Appends `new_classes` freshly initialized channels; existing columns
    /// are moved bit-for-bit.
    pub(crate) fn expand(&mut self, new_classes: usize, rng: &mut ChaCha8Rng) {
        let d0 = self.weight.nrows();
        let old = self.weight.ncols();
        let fresh = uniform_signed(d0, rng, d0 * new_classes);
        let mut grown = Array2::zeros((d0, old + new_classes));
        grown.slice_mut(ndarray::s![.., ..old]).assign(&self.weight);
        for (i, v) in fresh.into_iter().enumerate() {
            grown[(i / new_classes, old + i % new_classes)] = v;
        }
        self.weight = grown;
    }

    /// Raw class maps [H'W', |C|] from features [H'W', D0].
    pub(crate) fn forward(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.weight.nrows() {
            return Err(Error::shape(
                "cam head input",
                format!("{} channels", self.weight.nrows()),
                format!("{}", features.ncols()),
            ));
        }
        Ok(features.dot(&self.weight))
    }
}

/// Normalizes raw class maps into masks. Softmax runs per class column over
/// the spatial axis with a max shift for stability.
pub(crate) fn normalize_masks(maps: &Array2<f64>, mode: MaskMode) -> Array2<f64> {
    match mode {
        MaskMode::Sigmoid => maps.mapv(|v| 1.0 / (1.0 + (-v).exp())),
        MaskMode::SoftmaxSpatial => {
            let mut masks = maps.clone();
            for mut col in masks.columns_mut() {
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                col.mapv_inplace(|v| (v - max).exp());
                let sum = col.sum();
                col.mapv_inplace(|v| v / sum);
            }
            masks
        }
    }
}

/// Gradient through the normalization: given dL/dM and the masks themselves,
/// returns dL/d(raw maps).
pub(crate) fn masks_backward(
    masks: &Array2<f64>,
    d_masks: &Array2<f64>,
    mode: MaskMode,
) -> Array2<f64> {
    match mode {
        MaskMode::Sigmoid => d_masks * &masks.mapv(|m| m * (1.0 - m)),
        MaskMode::SoftmaxSpatial => {
            let mut out = Array2::zeros(masks.raw_dim());
            for c in 0..masks.ncols() {
                let m = masks.column(c);
                let dm = d_masks.column(c);
                let dot: f64 = m.iter().zip(dm).map(|(a, b)| a * b).sum();
                for i in 0..masks.nrows() {
                    out[(i, c)] = m[i] * (dm[i] - dot);
                }
            }
            out
        }
    }
}

/// Pools features into per-class node vectors: V0 = M^T F, so
/// V0[c] = sum over spatial positions of M[., c] * F[., :].
pub fn decouple(features: &Array2<f64>, masks: &Array2<f64>) -> Result<Array2<f64>> {
    if features.nrows() != masks.nrows() {
        return Err(Error::shape(
            "decouple",
            format!("{} spatial positions", features.nrows()),
            format!("{}", masks.nrows()),
        ));
    }
    Ok(masks.t().dot(features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand::seq::SliceRandom;

    #[test]
    fn delta_masks_select_single_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hw = 16;
        let d0 = 5;
        let features = Array2::from_shape_fn((hw, d0), |_| rng.gen_range(-1.0..1.0));
        let cells = [3usize, 7, 12];
        let mut masks = Array2::zeros((hw, cells.len()));
        for (c, &cell) in cells.iter().enumerate() {
            masks[(cell, c)] = 1.0;
        }
        let v0 = decouple(&features, &masks).unwrap();
        for (c, &cell) in cells.iter().enumerate() {
            for d in 0..d0 {
                assert_eq!(v0[(c, d)], features[(cell, d)]);
            }
        }
    }

    #[test]
    fn uniform_masks_average_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hw = 9;
        let features = Array2::from_shape_fn((hw, 4), |_| rng.gen_range(-1.0..1.0));
        // softmax of an all-zero map is uniform
        let masks = normalize_masks(&Array2::zeros((hw, 2)), MaskMode::SoftmaxSpatial);
        let v0 = decouple(&features, &masks).unwrap();
        let mean = features.sum_axis(ndarray::Axis(0)) / hw as f64;
        for c in 0..2 {
            for d in 0..4 {
                assert!((v0[(c, d)] - mean[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupling_matches_triple_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (hw, d0, classes) = (16, 8, 3);
        let features = Array2::from_shape_fn((hw, d0), |_| rng.gen_range(-1.0..1.0));
        let raw = Array2::from_shape_fn((hw, classes), |_| rng.gen_range(-1.0..1.0));
        let masks = normalize_masks(&raw, MaskMode::SoftmaxSpatial);
        let v0 = decouple(&features, &masks).unwrap();
        for c in 0..classes {
            for d in 0..d0 {
                let mut acc = 0.0;
                for s in 0..hw {
                    acc += masks[(s, c)] * features[(s, d)];
                }
                assert!((v0[(c, d)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_masks_are_spatial_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = Array2::from_shape_fn((25, 6), |_| rng.gen_range(-30.0..30.0));
        let masks = normalize_masks(&raw, MaskMode::SoftmaxSpatial);
        for c in 0..6 {
            let sum: f64 = masks.column(c).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(masks.column(c).iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn sigmoid_masks_stay_in_unit_interval() {
        let raw = ndarray::array![[-50.0, 0.0], [50.0, 2.0]];
        let masks = normalize_masks(&raw, MaskMode::Sigmoid);
        assert!(masks.iter().all(|&m| (0.0..=1.0).contains(&m)));
        assert!((masks[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mask_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        let d_masks = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        for mode in [MaskMode::SoftmaxSpatial, MaskMode::Sigmoid] {
            let masks = normalize_masks(&raw, mode);
            let analytic = masks_backward(&masks, &d_masks, mode);
            let eps = 1e-6;
            let mut idx: Vec<(usize, usize)> = (0..8).flat_map(|i| [(i, 0), (i, 1)]).collect();
            idx.shuffle(&mut rng);
            for &(i, j) in idx.iter().take(6) {
                let mut up = raw.clone();
                up[(i, j)] += eps;
                let mut down = raw.clone();
                down[(i, j)] -= eps;
                let loss = |r: &Array2<f64>| (&normalize_masks(r, mode) * &d_masks).sum();
                let fd = (loss(&up) - loss(&down)) / (2.0 * eps);
                assert!(
                    (fd - analytic[(i, j)]).abs() < 1e-6,
                    "{mode:?} ({i},{j}): {fd} vs {}",
                    analytic[(i, j)]
                );
            }
        }
    }

    #[test]
    fn expansion_appends_channels_and_preserves_old_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut head = CamHead::new(6, 2, &mut rng);
        let before = head.weight.clone();
        head.expand(3, &mut rng);
        assert_eq!(head.classes(), 5);
        for d in 0..6 {
            for c in 0..2 {
                assert_eq!(head.weight[(d, c)].to_bits(), before[(d, c)].to_bits());
            }
        }
        // fresh columns are within the init bound and not all zero
        let bound = 1.0 / 6.0_f64.sqrt();
        let mut nonzero = false;
        for d in 0..6 {
            for c in 2..5 {
                assert!(head.weight[(d, c)].abs() <= bound);
                nonzero |= head.weight[(d, c)] != 0.0;
            }
        }
        assert!(nonzero);
    }
}
