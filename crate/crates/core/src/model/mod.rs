//! The incremental multi-label model: CNN backbone, class-activation
//! classifier head, and a two-layer GCN over per-class nodes whose
//! correlation matrices grow with the class set.
//!
//! All math is f64 on the CPU. Forward passes cache what the hand-written
//! backward pass needs; gradients come back as one flat vector aligned with
//! `param_vec` so the optimizer and finite-difference checks share a single
//! parameter ordering.

mod backbone;
mod cam;
mod checkpoint;
mod gcn;

pub use cam::{decouple, MaskMode};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gcn::{CmMode, CorrelationMatrix};

use crate::error::{Error, Result};
use backbone::{leaky_relu_grad, uniform_signed, Backbone, BackboneTrace};
use cam::{masks_backward, normalize_masks, CamHead};
use gcn::{gcn_layer, GcnStack, SpecificCmHead, SpecificTrace};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_channels() -> Vec<usize> {
    vec![16, 32, 64]
}
fn default_dim() -> usize {
    32
}
fn default_mask_mode() -> MaskMode {
    MaskMode::SoftmaxSpatial
}
fn default_cm_mode() -> CmMode {
    CmMode::GeneralSpecific
}
fn default_use_graph() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the stride-2 conv blocks; the last entry is D0.
    pub backbone_channels: Vec<usize>,
    pub d1: usize,
    pub d2: usize,
    pub mask_mode: MaskMode,
    pub cm_mode: CmMode,
    /// With the graph branch off the model is a plain CAM classifier.
    pub use_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_channels: default_channels(),
            d1: default_dim(),
            d2: default_dim(),
            mask_mode: default_mask_mode(),
            cm_mode: default_cm_mode(),
            use_graph: default_use_graph(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::config(
                "backbone_channels must be a non-empty list of positive counts",
            ));
        }
        if self.d1 == 0 || self.d2 == 0 {
            return Err(Error::config("graph feature dims d1 and d2 must be positive"));
        }
        if !self.use_graph && self.cm_mode != default_cm_mode() {
            return Err(Error::config(
                "cm_mode has no effect without the graph branch; leave it at the default",
            ));
        }
        Ok(())
    }
}

/// Everything graph-side; absent when the model runs as a plain classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct GraphBranch {
    pub(crate) a_g: CorrelationMatrix,
    pub(crate) specific: SpecificCmHead,
    pub(crate) stack: GcnStack,
    pub(crate) w_out: Array1<f64>,
    pub(crate) b_out: f64,
    /// Fixed co-occurrence matrix for `CmMode::Statistical`; rebuilt per
    /// task by the trainer, cleared on expansion.
    pub(crate) statistical_cm: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CscModel {
    config: ModelConfig,
    backbone: Backbone,
    cam: CamHead,
    pub(crate) graph: Option<GraphBranch>,
    known_classes: usize,
}

/// Caches the graph backward pass needs.
#[derive(Debug)]
pub(crate) struct GraphCaches {
    /// Matrix applied in layer 1 (general or statistical).
    a1: Array2<f64>,
    /// Matrix applied in layer 2 (specific, general, or statistical).
    a2: Array2<f64>,
    pre1: Array2<f64>,
    pre2: Array2<f64>,
    specific: Option<SpecificTrace>,
}

/// Forward outputs plus intermediates. Graph-side matrices are 0x0 when the
/// graph branch is disabled; in general-only or statistical mode `a_s` holds
/// the matrix actually used in layer 2.
#[derive(Debug)]
pub struct ForwardTrace {
    pub y_hat: Vec<f64>,
    pub logits: Vec<f64>,
    pub cls_logits: Vec<f64>,
    pub gcn_logits: Vec<f64>,
    /// Normalized masks, [H'W', |C|].
    pub masks: Array2<f64>,
    pub v0: Array2<f64>,
    pub v1: Array2<f64>,
    pub v2: Array2<f64>,
    pub a_s: Array2<f64>,
    /// (H', W') of the mask grid.
    pub mask_grid: (usize, usize),
    pub(crate) backbone: BackboneTrace,
    pub(crate) cam_maps: Array2<f64>,
    pub(crate) graph: Option<GraphCaches>,
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Whether weight decay applies (biases and the general CM are exempt).
    pub decay: bool,
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, location: &str) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numerical(
                location,
                format!("entry {i} is {v}"),
            ));
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CscModel {
    pub fn new(config: ModelConfig, initial_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if initial_classes == 0 {
            return Err(Error::config("a model needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone_channels, &mut rng)?;
        let d0 = backbone.out_channels();
        let cam = CamHead::new(d0, initial_classes, &mut rng);
        let graph = if config.use_graph {
            let a_g = CorrelationMatrix::new(initial_classes, &mut rng)?;
            let specific = SpecificCmHead::new(config.d1, initial_classes, &mut rng);
            let stack = GcnStack::new(d0, config.d1, config.d2, &mut rng);
            let w_out = Array1::from_vec(uniform_signed(config.d2, &mut rng, config.d2));
            Some(GraphBranch {
                a_g,
                specific,
                stack,
                w_out,
                b_out: 0.0,
                statistical_cm: None,
            })
        } else {
            None
        };
        Ok(CscModel {
            config,
            backbone,
            cam,
            graph,
            known_classes: initial_classes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn known_classes(&self) -> usize {
        self.known_classes
    }

    pub fn general_cm(&self) -> Option<&CorrelationMatrix> {
        self.graph.as_ref().map(|g| &g.a_g)
    }

    /// Installs the fixed co-occurrence matrix used by statistical mode.
    pub fn set_statistical_cm(&mut self, cm: Array2<f64>) -> Result<()> {
        let graph = self
            .graph
            .as_mut()
            .ok_or_else(|| Error::config("statistical CM requires the graph branch"))?;
        if cm.dim() != (self.known_classes, self.known_classes) {
            return Err(Error::shape(
                "statistical CM",
                format!("{0}x{0}", self.known_classes),
                format!("{}x{}", cm.nrows(), cm.ncols()),
            ));
        }
        check_finite(cm.iter(), "statistical CM")?;
        graph.statistical_cm = Some(cm);
        Ok(())
    }

    fn layer_matrices(&self, graph: &GraphBranch) -> Result<(Array2<f64>, bool)> {
        // Returns the layer-1 matrix and whether it is the trainable A_g.
        match self.config.cm_mode {
            CmMode::GeneralSpecific | CmMode::GeneralOnly => {
                Ok((graph.a_g.values().clone(), true))
            }
            CmMode::Statistical => {
                let z = graph.statistical_cm.as_ref().ok_or_else(|| {
                    Error::config("statistical cm_mode needs set_statistical_cm before forward")
                })?;
                Ok((z.clone(), false))
            }
        }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<ForwardTrace> {
        let bb = self.backbone.forward(image)?;
        check_finite(bb.features.iter(), "backbone features")?;
        let cam_maps = self.cam.forward(&bb.features)?;
        check_finite(cam_maps.iter(), "classifier activation maps")?;
        let hw = cam_maps.nrows() as f64;
        let cls_logits: Vec<f64> = cam_maps
            .sum_axis(Axis(0))
            .iter()
            .map(|s| s / hw)
            .collect();
        let masks = normalize_masks(&cam_maps, self.config.mask_mode);

        let c = self.known_classes;
        let empty = || Array2::<f64>::zeros((0, 0));
        let (gcn_logits, v0, v1, v2, a_s_out, caches) = match &self.graph {
            None => (vec![0.0; c], empty(), empty(), empty(), empty(), None),
            Some(graph) => {
                let v0 = decouple(&bb.features, &masks)?;
                check_finite(v0.iter(), "graph nodes v0")?;
                let (a1, _) = self.layer_matrices(graph)?;
                if a1.dim() != (c, c) {
                    return Err(Error::shape(
                        "layer-1 correlation matrix",
                        format!("{c}x{c}"),
                        format!("{}x{}", a1.nrows(), a1.ncols()),
                    ));
                }
                let (pre1, v1) = gcn_layer(&a1, &v0, &graph.stack.w_g);
                check_finite(v1.iter(), "graph layer 1")?;
                let (a2, specific) = match self.config.cm_mode {
                    CmMode::GeneralSpecific => {
                        let trace = graph.specific.forward(&v1)?;
                        check_finite(trace.a_s.iter(), "specific correlation matrix")?;
                        (trace.a_s.clone(), Some(trace))
                    }
                    CmMode::GeneralOnly => (graph.a_g.values().clone(), None),
                    CmMode::Statistical => (a1.clone(), None),
                };
                let (pre2, v2) = gcn_layer(&a2, &v1, &graph.stack.w_s);
                check_finite(v2.iter(), "graph layer 2")?;
                let gcn_logits: Vec<f64> =
                    v2.dot(&graph.w_out).iter().map(|z| z + graph.b_out).collect();
                let caches = GraphCaches {
                    a1,
                    a2: a2.clone(),
                    pre1,
                    pre2,
                    specific,
                };
                (gcn_logits, v0, v1, v2, a2, Some(caches))
            }
        };

        let logits: Vec<f64> = cls_logits
            .iter()
            .zip(&gcn_logits)
            .map(|(a, b)| a + b)
            .collect();
        check_finite(logits.iter(), "output logits")?;
        let y_hat: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(ForwardTrace {
            y_hat,
            logits,
            cls_logits,
            gcn_logits,
            masks,
            v0,
            v1,
            v2,
            a_s: a_s_out,
            mask_grid: (bb.out_h, bb.out_w),
            backbone: bb,
            cam_maps,
            graph: caches,
        })
    }

    /// Confidence vector over the known classes, each in (0,1).
    pub fn predict(&self, image: &Array3<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.y_hat)
    }

    /// Gradient of a loss w.r.t. all parameters, given dL/d(logits).
    /// Returns a flat vector aligned with `param_vec`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &[f64]) -> Result<Vec<f64>> {
        if d_logits.len() != self.known_classes {
            return Err(Error::shape(
                "backward d_logits",
                format!("{}", self.known_classes),
                format!("{}", d_logits.len()),
            ));
        }
        self.backward_internal(trace, Some(d_logits), None)
    }

    /// Gradient of a loss defined directly on the V2 node features,
    /// bypassing both output heads. Used by gradient-flow checks.
    pub fn backward_from_v2(&self, trace: &ForwardTrace, d_v2: &Array2<f64>) -> Result<Vec<f64>> {
        let graph = trace
            .graph
            .as_ref()
            .ok_or_else(|| Error::config("backward_from_v2 needs the graph branch"))?;
        if d_v2.dim() != graph.pre2.dim() {
            return Err(Error::shape(
                "backward d_v2",
                format!("{:?}", graph.pre2.dim()),
                format!("{:?}", d_v2.dim()),
            ));
        }
        self.backward_internal(trace, None, Some(d_v2))
    }

    fn backward_internal(
        &self,
        trace: &ForwardTrace,
        d_logits: Option<&[f64]>,
        d_v2_direct: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        let c = self.known_classes;
        let hw = trace.cam_maps.nrows();
        let features = &trace.backbone.features;
        let d0 = features.ncols();

        let mut g_cam = Array2::<f64>::zeros((d0, c));
        let mut d_features = Array2::<f64>::zeros((hw, d0));

        // Graph-side gradient holders (sized lazily below).
        let mut graph_grads: Option<GraphGrads> = None;

        // dL/d(raw cam maps), accumulated from the GAP path and the mask path.
        let mut d_cam_maps = Array2::<f64>::zeros((hw, c));
        if let Some(dz) = d_logits {
            for cls in 0..c {
                let per_cell = dz[cls] / hw as f64;
                for s in 0..hw {
                    d_cam_maps[(s, cls)] += per_cell;
                }
            }
        }

        if let (Some(graph), Some(caches)) = (&self.graph, &trace.graph) {
            let mut gg = GraphGrads::zeros(graph, c);

            // Entry gradient at V2.
            let d_v2 = match (d_logits, d_v2_direct) {
                (_, Some(direct)) => direct.clone(),
                (Some(dz), None) => {
                    let mut d_v2 = Array2::zeros(trace.v2.raw_dim());
                    for cls in 0..c {
                        gg.b_out += dz[cls];
                        for d in 0..graph.w_out.len() {
                            d_v2[(cls, d)] = dz[cls] * graph.w_out[d];
                            gg.w_out[d] += dz[cls] * trace.v2[(cls, d)];
                        }
                    }
                    d_v2
                }
                (None, None) => Array2::zeros(trace.v2.raw_dim()),
            };

            // Layer 2: V2 = LReLU(A2 . V1 . W_s)
            let d_pre2 = &d_v2 * &caches.pre2.mapv(leaky_relu_grad);
            let q2 = caches.a2.dot(&trace.v1);
            gg.w_s = q2.t().dot(&d_pre2);
            let d_q2 = d_pre2.dot(&graph.stack.w_s.t());
            let d_a2 = d_q2.dot(&trace.v1.t());
            let mut d_v1 = caches.a2.t().dot(&d_q2);

            match self.config.cm_mode {
                CmMode::GeneralSpecific => {
                    let spec = caches
                        .specific
                        .as_ref()
                        .expect("specific trace cached in general+specific mode");
                    // A_s = sigmoid(augmented . w_mix)
                    let d_spre = &d_a2 * &spec.a_s.mapv(|a| a * (1.0 - a));
                    gg.w_mix = spec.augmented.t().dot(&d_spre);
                    let d_aug = d_spre.dot(&graph.specific.w_mix.t());
                    let d1 = self.config.d1;
                    // First half feeds V1 directly; second half is the pooled
                    // feature replicated onto every node.
                    let mut d_pooled = Array1::<f64>::zeros(d1);
                    for cls in 0..c {
                        for d in 0..d1 {
                            d_v1[(cls, d)] += d_aug[(cls, d)];
                            d_pooled[d] += d_aug[(cls, d1 + d)];
                        }
                    }
                    // pooled = node_sum . w_pool + b_pool
                    for i in 0..d1 {
                        for j in 0..d1 {
                            gg.w_pool[(i, j)] += spec.node_sum[i] * d_pooled[j];
                        }
                    }
                    gg.b_pool += &d_pooled;
                    let d_node_sum = graph.specific.w_pool.dot(&d_pooled);
                    // node_sum is the column sum of V1.
                    for cls in 0..c {
                        for d in 0..d1 {
                            d_v1[(cls, d)] += d_node_sum[d];
                        }
                    }
                }
                CmMode::GeneralOnly => gg.a_g += &d_a2,
                CmMode::Statistical => {}
            }

            // Layer 1: V1 = LReLU(A1 . V0 . W_g)
            let d_pre1 = &d_v1 * &caches.pre1.mapv(leaky_relu_grad);
            let q1 = caches.a1.dot(&trace.v0);
            gg.w_g = q1.t().dot(&d_pre1);
            let d_q1 = d_pre1.dot(&graph.stack.w_g.t());
            if self.config.cm_mode != CmMode::Statistical {
                gg.a_g += &d_q1.dot(&trace.v0.t());
            }
            let d_v0 = caches.a1.t().dot(&d_q1);

            // V0 = masks^T . features
            let d_masks = features.dot(&d_v0.t());
            d_features += &trace.masks.dot(&d_v0);
            d_cam_maps += &masks_backward(&trace.masks, &d_masks, self.config.mask_mode);

            graph_grads = Some(gg);
        }

        // CAM head and backbone.
        g_cam += &features.t().dot(&d_cam_maps);
        d_features += &d_cam_maps.dot(&self.cam.weight.t());
        let conv_grads = self.backbone.backward(&trace.backbone, &d_features);

        // Flatten in the canonical parameter order.
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in &conv_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(g_cam.iter());
        if let Some(gg) = graph_grads {
            flat.extend(gg.a_g.iter());
            flat.extend(gg.w_g.iter());
            flat.extend(gg.w_s.iter());
            flat.extend(gg.w_pool.iter());
            flat.extend(gg.b_pool.iter());
            flat.extend(gg.w_mix.iter());
            flat.extend(gg.w_out.iter());
            flat.push(gg.b_out);
        }
        debug_assert_eq!(flat.len(), self.num_params());
        Ok(flat)
    }

    /// Adds output slots for `new_classes` classes. Existing parameters are
    /// untouched bit-for-bit; only the CAM head, the general CM, and the
    /// specific head's mixing weights grow. Any installed statistical CM is
    /// cleared because its size no longer matches.
    pub fn expand(&mut self, new_classes: usize, seed: u64) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::config("expansion must add at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.cam.expand(new_classes, &mut rng);
        if let Some(graph) = &mut self.graph {
            graph.a_g.expand(new_classes, &mut rng)?;
            graph.specific.expand(new_classes, &mut rng);
            graph.statistical_cm = None;
        }
        self.known_classes += new_classes;
        Ok(())
    }

    /// Deep frozen copy for pseudo-labels and distillation targets.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            model: self.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_segments().iter().map(|s| s.len).sum()
    }

    /// All trainable parameters as one flat vector. Order: conv blocks
    /// (weight then bias), CAM weights, then graph parameters (A_g, W_g,
    /// W_s, pool map, pool bias, mixing weights, output head).
    pub fn param_vec(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.backbone.layers {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat.extend(self.cam.weight.iter());
        if let Some(graph) = &self.graph {
            flat.extend(graph.a_g.values().iter());
            flat.extend(graph.stack.w_g.iter());
            flat.extend(graph.stack.w_s.iter());
            flat.extend(graph.specific.w_pool.iter());
            flat.extend(graph.specific.b_pool.iter());
            flat.extend(graph.specific.w_mix.iter());
            flat.extend(graph.w_out.iter());
            flat.push(graph.b_out);
        }
        flat
    }

    pub fn set_param_vec(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(
                "set_param_vec",
                format!("{} values", self.num_params()),
                format!("{}", values.len()),
            ));
        }
        let mut pos = 0;
        let take = |dst: &mut [f64], pos: &mut usize| {
            dst.copy_from_slice(&values[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for layer in &mut self.backbone.layers {
            take(layer.weight.as_slice_mut().expect("contiguous"), &mut pos);
            take(layer.bias.as_slice_mut().expect("contiguous"), &mut pos);
        }
        take(self.cam.weight.as_slice_mut().expect("contiguous"), &mut pos);
        if let Some(graph) = &mut self.graph {
            take(
                graph.a_g.values_mut().as_slice_mut().expect("contiguous"),
                &mut pos,
            );
            take(graph.stack.w_g.as_slice_mut().expect("contiguous"), &mut pos);
            take(graph.stack.w_s.as_slice_mut().expect("contiguous"), &mut pos);
            take(
                graph.specific.w_pool.as_slice_mut().expect("contiguous"),
                &mut pos,
            );
            take(
                graph.specific.b_pool.as_slice_mut().expect("contiguous"),
                &mut pos,
            );
            take(
                graph.specific.w_mix.as_slice_mut().expect("contiguous"),
                &mut pos,
            );
            take(graph.w_out.as_slice_mut().expect("contiguous"), &mut pos);
            graph.b_out = values[pos];
            pos += 1;
        }
        debug_assert_eq!(pos, values.len());
        Ok(())
    }

    /// Named slices of the flat parameter vector, with weight-decay flags.
    pub fn param_segments(&self) -> Vec<ParamSegment> {
        let mut segs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, decay: bool, offset: &mut usize| {
            segs.push(ParamSegment {
                name,
                offset: *offset,
                len,
                decay,
            });
            *offset += len;
        };
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            push(format!("conv{}.weight", i + 1), layer.weight.len(), true, &mut offset);
            push(format!("conv{}.bias", i + 1), layer.bias.len(), false, &mut offset);
        }
        push("cam.weight".into(), self.cam.weight.len(), true, &mut offset);
        if let Some(graph) = &self.graph {
            push("graph.a_g".into(), graph.a_g.values().len(), false, &mut offset);
            push("graph.w_g".into(), graph.stack.w_g.len(), true, &mut offset);
            push("graph.w_s".into(), graph.stack.w_s.len(), true, &mut offset);
            push(
                "graph.w_pool".into(),
                graph.specific.w_pool.len(),
                true,
                &mut offset,
            );
            push(
                "graph.b_pool".into(),
                graph.specific.b_pool.len(),
                false,
                &mut offset,
            );
            push(
                "graph.w_mix".into(),
                graph.specific.w_mix.len(),
                true,
                &mut offset,
            );
            push("graph.w_out".into(), graph.w_out.len(), true, &mut offset);
            push("graph.b_out".into(), 1, false, &mut offset);
        }
        segs
    }

    /// Consistency of sizes across components; checkpoint loading runs this.
    pub(crate) fn validate_integrity(&self) -> Result<()> {
        self.config.validate()?;
        if self.known_classes == 0 {
            return Err(Error::config("model has zero classes"));
        }
        if self.cam.classes() != self.known_classes {
            return Err(Error::shape(
                "cam head classes",
                format!("{}", self.known_classes),
                format!("{}", self.cam.classes()),
            ));
        }
        if self.config.use_graph != self.graph.is_some() {
            return Err(Error::config("graph branch does not match use_graph"));
        }
        if let Some(graph) = &self.graph {
            if graph.a_g.size() != self.known_classes {
                return Err(Error::shape(
                    "general CM size",
                    format!("{}", self.known_classes),
                    format!("{}", graph.a_g.size()),
                ));
            }
            if graph.specific.w_mix.dim() != (2 * self.config.d1, self.known_classes) {
                return Err(Error::shape(
                    "mixing weights",
                    format!("{}x{}", 2 * self.config.d1, self.known_classes),
                    format!("{:?}", graph.specific.w_mix.dim()),
                ));
            }
            if graph.stack.w_g.dim() != (self.backbone.out_channels(), self.config.d1)
                || graph.stack.w_s.dim() != (self.config.d1, self.config.d2)
                || graph.w_out.len() != self.config.d2
            {
                return Err(Error::config("graph weight shapes do not match dims"));
            }
        }
        check_finite(self.param_vec().iter(), "checkpoint parameters")?;
        Ok(())
    }
}

struct GraphGrads {
    a_g: Array2<f64>,
    w_g: Array2<f64>,
    w_s: Array2<f64>,
    w_pool: Array2<f64>,
    b_pool: Array1<f64>,
    w_mix: Array2<f64>,
    w_out: Array1<f64>,
    b_out: f64,
}

impl GraphGrads {
    fn zeros(graph: &GraphBranch, classes: usize) -> Self {
        GraphGrads {
            a_g: Array2::zeros((classes, classes)),
            w_g: Array2::zeros(graph.stack.w_g.raw_dim()),
            w_s: Array2::zeros(graph.stack.w_s.raw_dim()),
            w_pool: Array2::zeros(graph.specific.w_pool.raw_dim()),
            b_pool: Array1::zeros(graph.specific.b_pool.len()),
            w_mix: Array2::zeros(graph.specific.w_mix.raw_dim()),
            w_out: Array1::zeros(graph.w_out.len()),
            b_out: 0.0,
        }
    }
}

/// Deep frozen copy of a model. Only inference is exposed, so the copy can
/// serve as a distillation/pseudo-label source while the live model trains.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: CscModel,
}

impl ModelSnapshot {
    pub fn known_classes(&self) -> usize {
        self.model.known_classes()
    }

    pub fn predict(&self, image: &Array3<f64>) -> Result<Vec<f64>> {
        self.model.predict(image)
    }

    pub fn param_vec(&self) -> Vec<f64> {
        self.model.param_vec()
    }
}
