//! Synthetic multi-label corpus generator.
//!
//! Labels come from sequential conditional sampling against a pairwise
//! co-occurrence matrix; images are class-specific textured blobs placed at
//! disjoint-preferring locations plus Gaussian pixel noise, so the label set
//! of every image is exactly the set of rendered blobs.

use super::{Corpus, LabeledImage};
use crate::error::{Error, Result};
use crate::util::derive_seed;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Per-class blob appearance: home position with jitter, size range in units
/// of the shorter image side, base color, and a seed fixing the stripe
/// texture that stays constant for the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobPrototype {
    pub center: (f64, f64),
    pub center_jitter: f64,
    pub size_range: (f64, f64),
    pub color: [f64; 3],
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_classes: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    /// Symmetric matrix: diagonal = marginal inclusion probability of each
    /// class, off-diagonal = pairwise joint probability of both classes.
    pub cooccurrence: Vec<Vec<f64>>,
    pub blob_prototypes: Vec<BlobPrototype>,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_level: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

const MAX_REJECTIONS: usize = 10_000;
const BACKGROUND: f64 = 0.10;

impl SyntheticCorpusSpec {
    /// Spec with ring-layout prototypes derived from `style_seed`.
    pub fn with_default_prototypes(
        num_classes: usize,
        image_size: (usize, usize),
        cooccurrence: Vec<Vec<f64>>,
        noise_level: f64,
        train_samples: usize,
        test_samples: usize,
        style_seed: u64,
    ) -> Self {
        SyntheticCorpusSpec {
            num_classes,
            image_size,
            cooccurrence,
            blob_prototypes: default_prototypes(num_classes, style_seed),
            noise_level,
            train_samples,
            test_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k == 0 {
            return Err(Error::config("synthetic corpus needs at least 1 class"));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::config(format!(
                "image_size {:?} too small; minimum is 8x8",
                self.image_size
            )));
        }
        if self.blob_prototypes.len() != k {
            return Err(Error::config(format!(
                "expected {k} blob prototypes, got {}",
                self.blob_prototypes.len()
            )));
        }
        if self.cooccurrence.len() != k || self.cooccurrence.iter().any(|r| r.len() != k) {
            return Err(Error::config(format!(
                "cooccurrence matrix must be {k}x{k}"
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level < 0.5) {
            return Err(Error::config(format!(
                "noise_level must lie in [0, 0.5), got {}",
                self.noise_level
            )));
        }
        let m = &self.cooccurrence;
        for i in 0..k {
            let pi = m[i][i];
            if !(0.0..=1.0).contains(&pi) || pi <= 0.0 {
                return Err(Error::config(format!(
                    "marginal cooccurrence[{i}][{i}] = {pi} must lie in (0, 1]"
                )));
            }
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let v = m[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!(
                        "cooccurrence[{i}][{j}] = {v} outside [0, 1]"
                    )));
                }
                if (v - m[j][i]).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "cooccurrence must be symmetric; [{i}][{j}] = {v} but [{j}][{i}] = {}",
                        m[j][i]
                    )));
                }
                // A pairwise joint can never exceed either marginal nor drop
                // below the overlap forced by them.
                let (pi, pj) = (m[i][i], m[j][j]);
                if v > pi.min(pj) + 1e-9 || v < (pi + pj - 1.0).max(0.0) - 1e-9 {
                    return Err(Error::config(format!(
                        "cooccurrence[{i}][{j}] = {v} infeasible for marginals {pi} and {pj}"
                    )));
                }
            }
        }
        for (i, p) in self.blob_prototypes.iter().enumerate() {
            if p.size_range.0 <= 0.0 || p.size_range.1 < p.size_range.0 || p.size_range.1 > 0.5 {
                return Err(Error::config(format!(
                    "blob prototype {i} size_range {:?} invalid (need 0 < min <= max <= 0.5)",
                    p.size_range
                )));
            }
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    let pc = p.clamp(1e-9, 1.0 - 1e-9);
    (pc / (1.0 - pc)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws one label vector by walking the classes in index order. Each class
/// starts from its marginal log-odds and accumulates, per already-decided
/// class, the log-odds shift between the pairwise conditional and the
/// marginal (zero for independent pairs). All-negative vectors are rejected
/// and redrawn, so every sample carries at least one label.
pub fn sample_labels(cooccurrence: &[Vec<f64>], rng: &mut impl Rng) -> Result<Vec<bool>> {
    let k = cooccurrence.len();
    for _ in 0..MAX_REJECTIONS {
        let mut labels = vec![false; k];
        for c in 0..k {
            let pi_c = cooccurrence[c][c];
            let mut lo = logit(pi_c);
            for i in 0..c {
                let joint = cooccurrence[i][c];
                let pi_i = cooccurrence[i][i];
                if (joint - pi_i * pi_c).abs() < 1e-12 {
                    continue;
                }
                let cond = if labels[i] {
                    joint / pi_i.max(1e-12)
                } else {
                    (pi_c - joint) / (1.0 - pi_i).max(1e-12)
                };
                lo += logit(cond) - logit(pi_c);
            }
            labels[c] = rng.gen_bool(sigmoid(lo).clamp(0.0, 1.0));
        }
        if labels.iter().any(|&l| l) {
            return Ok(labels);
        }
    }
    Err(Error::config(
        "label sampling rejected 10000 all-negative draws; marginals are too small",
    ))
}

/// A correlated random co-occurrence matrix: marginals drawn from
/// `marginal_range`, a `pair_density` fraction of pairs pushed away from
/// independence by up to `strength` of the feasible slack (both directions),
/// everything else independent. Always satisfies the feasibility checks in
/// [`SyntheticCorpusSpec::validate`].
pub fn random_cooccurrence(
    num_classes: usize,
    pair_density: f64,
    marginal_range: (f64, f64),
    strength: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = num_classes;
    let mut m = vec![vec![0.0; k]; k];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = rng.gen_range(marginal_range.0..=marginal_range.1);
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let (pi, pj) = (m[i][i], m[j][j]);
            let indep = pi * pj;
            let joint = if rng.gen_bool(pair_density) {
                let hi = pi.min(pj);
                let lo = (pi + pj - 1.0).max(0.0);
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let slack = if u >= 0.0 { hi - indep } else { indep - lo };
                // keep a sliver of slack so the matrix stays strictly feasible
                indep + u * strength * slack * 0.95
            } else {
                indep
            };
            m[i][j] = joint;
            m[j][i] = joint;
        }
    }
    m
}

/// Empirical marginals (diagonal) and pairwise joint frequencies computed by
/// counting label pairs; the oracle the generator is checked against.
pub fn empirical_cooccurrence(samples: &[LabeledImage], num_classes: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for s in samples {
        for i in 0..num_classes {
            if !s.labels[i] {
                continue;
            }
            for j in 0..num_classes {
                if s.labels[j] {
                    counts[i][j] += 1;
                }
            }
        }
    }
    let n = samples.len().max(1) as f64;
    counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / n).collect())
        .collect()
}

/// Prototypes on a ring: evenly spread home positions, distinct hues, and a
/// per-class texture seed.
pub fn default_prototypes(num_classes: usize, style_seed: u64) -> Vec<BlobPrototype> {
    (0..num_classes)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / num_classes as f64;
            let hue = i as f64 / num_classes as f64;
            BlobPrototype {
                center: (0.5 + 0.28 * angle.cos(), 0.5 + 0.28 * angle.sin()),
                center_jitter: 0.10,
                size_range: (0.14, 0.22),
                color: hsv_to_rgb(hue, 0.80, 0.95),
                texture_seed: derive_seed(style_seed, &[0x7e87, i as u64]),
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + (v - c), g + (v - c), b + (v - c)]
}

#[derive(Debug, Clone)]
pub(crate) struct Placement {
    /// Read by rendering oracles in tests.
    #[cfg_attr(not(test), allow(dead_code))]
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
}

/// Renders one image for the given label set. Blobs are placed for every
/// positive class, preferring candidate positions far from already placed
/// blobs; later texture/noise never removes a blob, so labels and rendered
/// classes match exactly.
pub(crate) fn render_sample(
    spec: &SyntheticCorpusSpec,
    labels: &[bool],
    rng: &mut impl Rng,
) -> (Array3<f64>, Vec<Placement>) {
    let (h, w) = spec.image_size;
    let min_dim = h.min(w) as f64;
    let mut img = Array3::from_elem((3, h, w), BACKGROUND);
    let mut placements: Vec<Placement> = Vec::new();

    for (class, proto) in spec.blob_prototypes.iter().enumerate() {
        if !labels[class] {
            continue;
        }
        let radius = rng.gen_range(proto.size_range.0..=proto.size_range.1) * min_dim;
        let margin_x = radius / w as f64;
        let margin_y = radius / h as f64;
        let jitter = proto.center_jitter;

        let mut best: Option<(f64, f64, f64)> = None;
        for _ in 0..3 {
            let cx = (proto.center.0 + rng.gen_range(-jitter..=jitter))
                .clamp(margin_x, 1.0 - margin_x)
                * w as f64;
            let cy = (proto.center.1 + rng.gen_range(-jitter..=jitter))
                .clamp(margin_y, 1.0 - margin_y)
                * h as f64;
            let dist = placements
                .iter()
                .map(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(d, _, _)| dist > d) {
                best = Some((dist, cx, cy));
            }
        }
        let (_, cx, cy) = best.unwrap();

        let mut tex_rng = ChaCha8Rng::seed_from_u64(proto.texture_seed);
        let theta: f64 = tex_rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = tex_rng.gen_range(1.5..3.5);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

        let x_lo = (cx - radius - 1.0).floor().max(0.0) as usize;
        let x_hi = ((cx + radius + 1.0).ceil() as usize).min(w);
        let y_lo = (cy - radius - 1.0).floor().max(0.0) as usize;
        let y_hi = ((cy + radius + 1.0).ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d = (dx * dx + dy * dy).sqrt();
                let alpha = ((radius - d) / 1.5).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let u = (dx * theta.cos() + dy * theta.sin()) / radius;
                let tex = (std::f64::consts::TAU * freq * u + phase).sin() * 0.5 + 0.5;
                let shade = 0.65 + 0.35 * tex;
                for ch in 0..3 {
                    let target = proto.color[ch] * shade;
                    img[(ch, y, x)] += alpha * (target - img[(ch, y, x)]);
                }
            }
        }
        placements.push(Placement { class, cx, cy });
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level).expect("validated noise level");
        for v in img.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (img, placements)
}

/// Generates train and test splits. Every randomized choice derives from
/// `seed` plus the split tag and sample index, so generation is reproducible
/// and independent of thread scheduling.
pub fn generate_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let classes = (0..spec.num_classes)
        .map(|i| format!("class{i:02}"))
        .collect();
    let make_split = |tag: u64, count: usize| -> Result<Vec<LabeledImage>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag, i as u64]));
                let labels = sample_labels(&spec.cooccurrence, &mut rng)?;
                let (image, _) = render_sample(spec, &labels, &mut rng);
                Ok(LabeledImage {
                    image: Arc::new(image),
                    labels,
                })
            })
            .collect()
    };
    Ok(Corpus {
        classes,
        train: make_split(1, spec.train_samples)?,
        test: make_split(2, spec.test_samples)?,
    })
}
