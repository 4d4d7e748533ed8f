//! The model layer: stacked equilibrium layers with input maps, an output
//! head, dropout, readout, and exact end-to-end gradients.
//!
//! A layer holds one weight matrix and one input map per relation; ordinary
//! graphs are the single-relation case. Layer `l` consumes the previous
//! layer's fixed point (optionally through an affine+activation inter-layer
//! map), layer 1 consumes the dataset features or a learnable feature
//! matrix. Dropout is applied to the final state right before the head, in
//! training mode only, with inverted scaling.

pub mod checkpoint;
pub mod loss;

use crate::equilibrium::{
    solve_forward_hetero, Activation, BlockActivation, EquilibriumSolution, SolveError,
};
use crate::graph::NodeDataset;
use crate::implicit_grad::{
    param_grads_hetero, solve_backward_hetero, GradientBundle, InputMap,
};
use crate::linalg::{matmul, DenseMatrix, LinalgError};
use crate::wellposed::{project_w, rescale_weights, ConstraintSpec, WellPosedError};
use rand::Rng;
use thiserror::Error;

pub use crate::implicit_grad::BForm;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer {layer}: {source}")]
    Solver {
        layer: usize,
        #[source]
        source: SolveError,
    },
    #[error("model/dataset mismatch: {0}")]
    Mismatch(String),
    #[error("dataset provides no features and the model has no learnable feature matrix")]
    NoFeatures,
    #[error("dataset features and a learnable feature matrix are both present")]
    AmbiguousFeatures,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("rescaling requires positively homogeneous activations (relu, leaky relu, identity)")]
    NotHomogeneous,
    #[error("rescaling supports single-relation layers only")]
    RescaleMultiRelation,
    #[error(transparent)]
    WellPosed(#[from] WellPosedError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Output head: a bare linear map or a one-hidden-layer affine-phi-affine.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear {
        theta: DenseMatrix,
    },
    Mlp {
        w1: DenseMatrix,
        b1: Vec<f64>,
        activation: Activation,
        w2: DenseMatrix,
        b2: Vec<f64>,
    },
}

impl Head {
    pub fn classes(&self) -> usize {
        match self {
            Head::Linear { theta } => theta.rows(),
            Head::Mlp { w2, .. } => w2.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Linear { theta } => theta.cols(),
            Head::Mlp { w1, .. } => w1.cols(),
        }
    }
}

/// Node-level or graph-level predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Node,
    GraphSum,
    GraphMean,
}

/// Affine+activation map applied between consecutive equilibrium layers.
#[derive(Debug, Clone, PartialEq)]
pub struct InterMap {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl InterMap {
    fn apply(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
        let mut pre = matmul(&self.weight, x)?;
        for r in 0..pre.rows() {
            for c in 0..pre.cols() {
                pre.set(r, c, pre.get(r, c) + self.bias[r]);
            }
        }
        let out = self.activation.apply(&pre);
        Ok((pre, out))
    }
}

/// One equilibrium layer: per-relation weights and input maps, a shared
/// activation, and the per-relation norm budgets it is trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct IgnnLayer {
    pub ws: Vec<DenseMatrix>,
    pub input_maps: Vec<InputMap>,
    pub activation: BlockActivation,
    pub kappas: Vec<f64>,
}

impl IgnnLayer {
    pub fn state_dim(&self) -> usize {
        self.ws[0].rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.input_maps[0].feature_dim()
    }

    pub fn relations(&self) -> usize {
        self.ws.len()
    }
}

/// A full model: ordered equilibrium layers, optional inter-layer maps, the
/// head, the readout mode, dropout, and an optional learnable feature matrix
/// for datasets that ship none.
#[derive(Debug, Clone, PartialEq)]
pub struct IgnnModel {
    pub layers: Vec<IgnnLayer>,
    pub inter_maps: Vec<Option<InterMap>>,
    pub head: Head,
    pub readout: Readout,
    pub dropout: f64,
    pub learnable_u: Option<DenseMatrix>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// The input actually fed to each layer (post inter-map).
    pub layer_inputs: Vec<DenseMatrix>,
    pub solutions: Vec<EquilibriumSolution>,
    /// Pre-activations of the inter-layer maps, when present.
    pub inter_pre: Vec<Option<DenseMatrix>>,
    /// Scaled dropout mask (entries 0 or 1/(1-rate)); `None` in eval mode.
    pub dropout_mask: Option<DenseMatrix>,
    /// Final state after dropout, as seen by the head.
    pub head_input: DenseMatrix,
    /// Hidden pre-activation of an MLP head.
    pub head_hidden_pre: Option<DenseMatrix>,
    pub predictions: DenseMatrix,
}

impl ForwardCache {
    pub fn forward_iterations(&self) -> usize {
        self.solutions.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone)]
pub enum HeadGradients {
    Linear {
        theta: DenseMatrix,
    },
    Mlp {
        w1: DenseMatrix,
        b1: Vec<f64>,
        w2: DenseMatrix,
        b2: Vec<f64>,
    },
}

/// Exact gradients for every trainable tensor in the model.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub layers: Vec<GradientBundle>,
    pub inter: Vec<Option<(DenseMatrix, Vec<f64>)>>,
    pub head: HeadGradients,
    pub learnable_u: Option<DenseMatrix>,
}

impl ModelGradients {
    pub fn backward_iterations(&self) -> usize {
        self.layers.iter().map(|b| b.iterations).sum()
    }
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite init")
}

/// What to build; realized by [`IgnnModel::init`].
#[derive(Debug, Clone)]
pub struct Architecture {
    /// State dimension of each equilibrium layer, input to output.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub relations: usize,
    pub b_form: BForm,
    pub activation: Activation,
    /// Per-relation norm budgets, shared by all layers.
    pub kappas: Vec<f64>,
    /// Hidden width of an MLP head; `None` for the linear head.
    pub mlp_head_hidden: Option<usize>,
    pub readout: Readout,
    pub dropout: f64,
    /// Node count for a learnable feature matrix; `None` when the dataset
    /// provides features.
    pub learnable_u_nodes: Option<usize>,
}

impl IgnnModel {
    /// Initializes all weights uniformly in [-1/sqrt(m), 1/sqrt(m)] (with m
    /// the layer's state dimension) and immediately projects every W onto
    /// its constraint set so the first forward solve is feasible. Learnable
    /// features use [-1/sqrt(p), 1/sqrt(p)].
    pub fn init(
        arch: &Architecture,
        constraints: &ConstraintSpec,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        if arch.hidden.is_empty() || arch.relations == 0 {
            return Err(ModelError::Mismatch(
                "at least one layer and one relation are required".into(),
            ));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(ModelError::BadDropout(arch.dropout));
        }
        if arch.kappas.len() != arch.relations {
            return Err(ModelError::Mismatch(format!(
                "{} kappas for {} relations",
                arch.kappas.len(),
                arch.relations
            )));
        }
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut in_dim = arch.feature_dim;
        for &m in &arch.hidden {
            let scale = 1.0 / (m as f64).sqrt();
            let mut ws = Vec::with_capacity(arch.relations);
            let mut input_maps = Vec::with_capacity(arch.relations);
            for r in 0..arch.relations {
                let w = uniform_matrix(rng, m, m, scale);
                ws.push(project_w(&w, constraints.radii[r])?);
                let omega = uniform_matrix(rng, m, in_dim, scale);
                input_maps.push(match arch.b_form {
                    BForm::OmegaUA => InputMap::omega_ua(omega),
                    BForm::OmegaU => InputMap::omega_u(omega),
                    BForm::Split => {
                        InputMap::split(omega, uniform_matrix(rng, m, in_dim, scale))
                    }
                });
            }
            layers.push(IgnnLayer {
                ws,
                input_maps,
                activation: arch.activation.into(),
                kappas: arch.kappas.clone(),
            });
            in_dim = m;
        }
        let last_m = *arch.hidden.last().unwrap();
        let head_scale = 1.0 / (last_m as f64).sqrt();
        let head = match arch.mlp_head_hidden {
            None => Head::Linear {
                theta: uniform_matrix(rng, arch.classes, last_m, head_scale),
            },
            Some(h) => Head::Mlp {
                w1: uniform_matrix(rng, h, last_m, head_scale),
                b1: vec![0.0; h],
                activation: arch.activation,
                w2: uniform_matrix(rng, arch.classes, h, 1.0 / (h as f64).sqrt()),
                b2: vec![0.0; arch.classes],
            },
        };
        let learnable_u = arch.learnable_u_nodes.map(|n| {
            let p = arch.feature_dim;
            uniform_matrix(rng, p, n, 1.0 / (p as f64).sqrt())
        });
        Ok(Self {
            layers,
            inter_maps: vec![None; arch.hidden.len() - 1],
            head,
            readout: arch.readout,
            dropout: arch.dropout,
            learnable_u,
        })
    }

    pub fn relations(&self) -> usize {
        self.layers[0].relations()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].feature_dim()
    }

    fn features<'a>(&'a self, dataset: &'a NodeDataset) -> Result<&'a DenseMatrix, ModelError> {
        match (&dataset.features, &self.learnable_u) {
            (Some(u), None) => Ok(u),
            (None, Some(u)) => Ok(u),
            (None, None) => Err(ModelError::NoFeatures),
            (Some(_), Some(_)) => Err(ModelError::AmbiguousFeatures),
        }
    }

    fn check_dataset(&self, dataset: &NodeDataset) -> Result<(), ModelError> {
        let relations = dataset.graph.relation_count();
        if relations != self.relations() {
            return Err(ModelError::Mismatch(format!(
                "model has {} relations, dataset has {relations}",
                self.relations()
            )));
        }
        let u = self.features(dataset)?;
        if u.rows() != self.feature_dim() {
            return Err(ModelError::Mismatch(format!(
                "model expects {}-dimensional features, got {}",
                self.feature_dim(),
                u.rows()
            )));
        }
        if u.cols() != dataset.n() {
            return Err(ModelError::Mismatch(format!(
                "feature matrix covers {} nodes, graph has {}",
                u.cols(),
                dataset.n()
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass without dropout.
    pub fn forward_eval(
        &self,
        dataset: &NodeDataset,
        tol: f64,
        max_iter: usize,
        warm: Option<&ForwardCache>,
    ) -> Result<ForwardCache, ModelError> {
        self.forward_impl(dataset, tol, max_iter, warm, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Training-mode forward pass: dropout is sampled from `rng` and applied
    /// to the final state before the head.
    pub fn forward_train(
        &self,
        dataset: &NodeDataset,
        tol: f64,
        max_iter: usize,
        warm: Option<&ForwardCache>,
        rng: &mut impl Rng,
    ) -> Result<ForwardCache, ModelError> {
        self.forward_impl(dataset, tol, max_iter, warm, Some(rng))
    }

    fn forward_impl(
        &self,
        dataset: &NodeDataset,
        tol: f64,
        max_iter: usize,
        warm: Option<&ForwardCache>,
        mut rng: Option<&mut impl Rng>,
    ) -> Result<ForwardCache, ModelError> {
        self.check_dataset(dataset)?;
        let adjs = dataset.graph.adjacencies();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut solutions: Vec<EquilibriumSolution> = Vec::with_capacity(self.layers.len());
        let mut inter_pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (pre, input) = if l == 0 {
                (None, self.features(dataset)?.clone())
            } else {
                let prev_x = &solutions[l - 1].x;
                match &self.inter_maps[l - 1] {
                    Some(map) => {
                        let (pre, out) = map.apply(prev_x)?;
                        (Some(pre), out)
                    }
                    None => (None, prev_x.clone()),
                }
            };
            let mut bs = Vec::with_capacity(layer.relations());
            for (imap, a) in layer.input_maps.iter().zip(&adjs) {
                bs.push(
                    imap.eval(&input, a)
                        .map_err(|source| ModelError::Solver { layer: l, source })?,
                );
            }
            let ws: Vec<&DenseMatrix> = layer.ws.iter().collect();
            let bs_ref: Vec<&DenseMatrix> = bs.iter().collect();
            let x0 = warm.and_then(|c| c.solutions.get(l)).map(|s| &s.x);
            let sol = solve_forward_hetero(
                &ws,
                &adjs,
                &bs_ref,
                &layer.activation,
                tol,
                max_iter,
                x0,
            )
            .map_err(|source| ModelError::Solver { layer: l, source })?;
            layer_inputs.push(input);
            inter_pre.push(pre);
            solutions.push(sol);
        }
        let x_last = &solutions.last().unwrap().x;
        let (dropout_mask, head_state) = match rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask = DenseMatrix::from_vec(
                    x_last.rows(),
                    x_last.cols(),
                    (0..x_last.rows() * x_last.cols())
                        .map(|_| {
                            if rng.random::<f64>() < self.dropout {
                                0.0
                            } else {
                                1.0 / keep
                            }
                        })
                        .collect(),
                )
                .expect("finite mask");
                let dropped = x_last.hadamard(&mask);
                (Some(mask), dropped)
            }
            _ => (None, x_last.clone()),
        };
        let head_input = match self.readout {
            Readout::Node => head_state,
            Readout::GraphSum | Readout::GraphMean => {
                let n = head_state.cols();
                let scale = if self.readout == Readout::GraphMean {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                let mut pooled = DenseMatrix::zeros(head_state.rows(), 1);
                for r in 0..head_state.rows() {
                    let sum: f64 = head_state.row(r).iter().sum();
                    pooled.set(r, 0, sum * scale);
                }
                pooled
            }
        };
        let (head_hidden_pre, predictions) = match &self.head {
            Head::Linear { theta } => (None, matmul(theta, &head_input)?),
            Head::Mlp {
                w1,
                b1,
                activation,
                w2,
                b2,
            } => {
                let mut pre = matmul(w1, &head_input)?;
                for r in 0..pre.rows() {
                    for c in 0..pre.cols() {
                        pre.set(r, c, pre.get(r, c) + b1[r]);
                    }
                }
                let hidden = activation.apply(&pre);
                let mut out = matmul(w2, &hidden)?;
                for r in 0..out.rows() {
                    for c in 0..out.cols() {
                        out.set(r, c, out.get(r, c) + b2[r]);
                    }
                }
                (Some(pre), out)
            }
        };
        Ok(ForwardCache {
            layer_inputs,
            solutions,
            inter_pre,
            dropout_mask,
            head_input,
            head_hidden_pre,
            predictions,
        })
    }

    /// Exact gradients for every parameter given the loss gradient on the
    /// predictions. Layers are unwound last to first; the gradient a layer
    /// produces on its input becomes the upstream layer's state gradient.
    pub fn backward(
        &self,
        dataset: &NodeDataset,
        cache: &ForwardCache,
        grad_predictions: &DenseMatrix,
        tol: f64,
        max_iter: usize,
    ) -> Result<ModelGradients, ModelError> {
        let adjs = dataset.graph.adjacencies();
        // head
        let (head_grads, grad_head_input) = match &self.head {
            Head::Linear { theta } => {
                let grad_theta = matmul(grad_predictions, &cache.head_input.transpose())?;
                let grad_input = matmul(&theta.transpose(), grad_predictions)?;
                (HeadGradients::Linear { theta: grad_theta }, grad_input)
            }
            Head::Mlp {
                w1,
                activation,
                w2,
                ..
            } => {
                let pre = cache
                    .head_hidden_pre
                    .as_ref()
                    .expect("MLP head cached its hidden pre-activation");
                let hidden = activation.apply(pre);
                let grad_w2 = matmul(grad_predictions, &hidden.transpose())?;
                let grad_b2: Vec<f64> = (0..grad_predictions.rows())
                    .map(|r| grad_predictions.row(r).iter().sum())
                    .collect();
                let gh = matmul(&w2.transpose(), grad_predictions)?
                    .hadamard(&activation.derivative(pre));
                let grad_w1 = matmul(&gh, &cache.head_input.transpose())?;
                let grad_b1: Vec<f64> = (0..gh.rows()).map(|r| gh.row(r).iter().sum()).collect();
                let grad_input = matmul(&w1.transpose(), &gh)?;
                (
                    HeadGradients::Mlp {
                        w1: grad_w1,
                        b1: grad_b1,
                        w2: grad_w2,
                        b2: grad_b2,
                    },
                    grad_input,
                )
            }
        };
        // undo readout
        let n = cache.solutions.last().unwrap().x.cols();
        let grad_state = match self.readout {
            Readout::Node => grad_head_input,
            Readout::GraphSum | Readout::GraphMean => {
                let scale = if self.readout == Readout::GraphMean {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                let mut grad = DenseMatrix::zeros(grad_head_input.rows(), n);
                for r in 0..grad_head_input.rows() {
                    let g = grad_head_input.get(r, 0) * scale;
                    for c in 0..n {
                        grad.set(r, c, g);
                    }
                }
                grad
            }
        };
        // undo dropout
        let mut grad_x = match &cache.dropout_mask {
            Some(mask) => grad_state.hadamard(mask),
            None => grad_state,
        };
        // unwind the layers
        let mut layer_bundles: Vec<GradientBundle> = Vec::with_capacity(self.layers.len());
        let mut inter_grads: Vec<Option<(DenseMatrix, Vec<f64>)>> =
            vec![None; self.inter_maps.len()];
        let mut grad_learnable_u = None;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let sol = &cache.solutions[l];
            let ws: Vec<&DenseMatrix> = layer.ws.iter().collect();
            let backward = solve_backward_hetero(&ws, &adjs, &sol.d, &grad_x, tol, max_iter)
                .map_err(|source| ModelError::Solver { layer: l, source })?;
            let want_input_grad = l > 0 || self.learnable_u.is_some();
            let imaps: Vec<&InputMap> = layer.input_maps.iter().collect();
            let bundle = param_grads_hetero(
                &backward,
                &sol.x,
                &adjs,
                &cache.layer_inputs[l],
                &imaps,
                want_input_grad,
            )
            .map_err(|source| ModelError::Solver { layer: l, source })?;
            if l > 0 {
                let grad_input = bundle
                    .grad_u
                    .as_ref()
                    .expect("input gradient requested for stacked layer");
                grad_x = match &self.inter_maps[l - 1] {
                    Some(map) => {
                        let pre = cache.inter_pre[l]
                            .as_ref()
                            .expect("inter map cached its pre-activation");
                        let gh = grad_input.hadamard(&map.activation.derivative(pre));
                        let grad_w =
                            matmul(&gh, &cache.solutions[l - 1].x.transpose())?;
                        let grad_b: Vec<f64> =
                            (0..gh.rows()).map(|r| gh.row(r).iter().sum()).collect();
                        inter_grads[l - 1] = Some((grad_w, grad_b));
                        matmul(&map.weight.transpose(), &gh)?
                    }
                    None => grad_input.clone(),
                };
            } else if self.learnable_u.is_some() {
                grad_learnable_u = bundle.grad_u.clone();
            }
            layer_bundles.push(bundle);
        }
        layer_bundles.reverse();
        Ok(ModelGradients {
            layers: layer_bundles,
            inter: inter_grads,
            head: head_grads,
            learnable_u: grad_learnable_u,
        })
    }

    /// Projects every relation's weight matrix onto its L1-row budget.
    pub fn project_constraints(&mut self, spec: &ConstraintSpec) -> Result<(), ModelError> {
        for layer in &mut self.layers {
            for (w, &radius) in layer.ws.iter_mut().zip(&spec.radii) {
                *w = project_w(w, radius)?;
            }
        }
        Ok(())
    }

    /// Largest amount by which any layer's weight norm exceeds its budget.
    pub fn constraint_violation(&self, spec: &ConstraintSpec) -> f64 {
        let mut worst = 0.0f64;
        for layer in &self.layers {
            for (w, &radius) in layer.ws.iter().zip(&spec.radii) {
                if radius.is_finite() {
                    worst = worst.max(w.inf_norm() - radius);
                }
            }
        }
        worst
    }

    /// Visits every trainable tensor in a fixed order (layer weights and
    /// input maps, inter-layer maps, head, learnable features). Gradient
    /// flattening follows the same order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            for w in &mut layer.ws {
                f(w.data_mut());
            }
            for imap in &mut layer.input_maps {
                for omega in &mut imap.omegas {
                    f(omega.data_mut());
                }
            }
        }
        for map in self.inter_maps.iter_mut().flatten() {
            f(map.weight.data_mut());
            f(&mut map.bias);
        }
        match &mut self.head {
            Head::Linear { theta } => f(theta.data_mut()),
            Head::Mlp { w1, b1, w2, b2, .. } => {
                f(w1.data_mut());
                f(b1);
                f(w2.data_mut());
                f(b2);
            }
        }
        if let Some(u) = &mut self.learnable_u {
            f(u.data_mut());
        }
    }

    /// Flattens gradients in the order [`Self::for_each_param_mut`] visits
    /// parameters.
    pub fn flatten_gradients(&self, grads: &ModelGradients) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (layer, bundle) in self.layers.iter().zip(&grads.layers) {
            for gw in &bundle.grad_w {
                out.push(gw.data().to_vec());
            }
            let _ = layer;
            for per_relation in &bundle.grad_omega {
                for go in per_relation {
                    out.push(go.data().to_vec());
                }
            }
        }
        for (map, grad) in self.inter_maps.iter().zip(&grads.inter) {
            if map.is_some() {
                let (gw, gb) = grad
                    .as_ref()
                    .expect("gradient present for existing inter map");
                out.push(gw.data().to_vec());
                out.push(gb.clone());
            }
        }
        match &grads.head {
            HeadGradients::Linear { theta } => out.push(theta.data().to_vec()),
            HeadGradients::Mlp { w1, b1, w2, b2 } => {
                out.push(w1.data().to_vec());
                out.push(b1.clone());
                out.push(w2.data().to_vec());
                out.push(b2.clone());
            }
        }
        if let Some(gu) = &grads.learnable_u {
            out.push(gu.data().to_vec());
        }
        out
    }

    /// Rescales every layer so `||W||_inf` drops to `lambda_pf(|W|)`,
    /// absorbing the diagonal scalings into the input maps, inter-layer
    /// maps, and head. Predictions are unchanged for positively homogeneous
    /// activations, which is required and checked.
    pub fn rescale(&self) -> Result<IgnnModel, ModelError> {
        for layer in &self.layers {
            if !layer.activation.positively_homogeneous() {
                return Err(ModelError::NotHomogeneous);
            }
            if layer.relations() != 1 {
                return Err(ModelError::RescaleMultiRelation);
            }
        }
        let mut out = self.clone();
        let mut prev_v: Option<Vec<f64>> = None;
        for l in 0..out.layers.len() {
            let (w_new, v) = rescale_weights(&out.layers[l].ws[0])?;
            out.layers[l].ws[0] = w_new;
            // b'(.) = S b(.): scale every omega's rows by 1/v
            for omega in &mut out.layers[l].input_maps[0].omegas {
                for r in 0..omega.rows() {
                    for c in 0..omega.cols() {
                        omega.set(r, c, omega.get(r, c) / v[r]);
                    }
                }
            }
            if l > 0 {
                let pv = prev_v.as_ref().unwrap();
                if let Some(map) = out.inter_maps[l - 1].as_mut() {
                    // the inter map consumes the rescaled upstream state;
                    // fold S^-1 into its weight so its output is unchanged
                    for r in 0..map.weight.rows() {
                        for c in 0..map.weight.cols() {
                            map.weight.set(r, c, map.weight.get(r, c) * pv[c]);
                        }
                    }
                } else {
                    // no inter map: the input maps consume S_{l-1} X, so
                    // fold S_{l-1}^-1 into their columns
                    for omega in &mut out.layers[l].input_maps[0].omegas {
                        for r in 0..omega.rows() {
                            for c in 0..omega.cols() {
                                omega.set(r, c, omega.get(r, c) * pv[c]);
                            }
                        }
                    }
                }
            }
            prev_v = Some(v);
        }
        // head consumes S_L X_L: fold S_L^-1 into its input columns
        let v = prev_v.expect("at least one layer");
        match &mut out.head {
            Head::Linear { theta } => {
                for r in 0..theta.rows() {
                    for c in 0..theta.cols() {
                        theta.set(r, c, theta.get(r, c) * v[c]);
                    }
                }
            }
            Head::Mlp { w1, .. } => {
                for r in 0..w1.rows() {
                    for c in 0..w1.cols() {
                        w1.set(r, c, w1.get(r, c) * v[c]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Embeds an explicit 2-layer graph convolution `Yhat = W2 phi(W1 U A) A`
/// as a single equilibrium layer over the stacked state `(X2, X1)`. The
/// stacked weight matrix is strictly upper block triangular, hence
/// nilpotent, so the construction is well-posed for any adjacency and the
/// solver converges in a fixed handful of iterations.
pub fn gcn_as_ignn(w1: &DenseMatrix, w2: &DenseMatrix, phi1: Activation) -> IgnnModel {
    let (h, p) = (w1.rows(), w1.cols());
    let c = w2.rows();
    let m = c + h;
    let mut w_block = DenseMatrix::zeros(m, m);
    for r in 0..c {
        for j in 0..h {
            w_block.set(r, c + j, w2.get(r, j));
        }
    }
    let mut omega = DenseMatrix::zeros(m, p);
    for r in 0..h {
        for j in 0..p {
            omega.set(c + r, j, w1.get(r, j));
        }
    }
    let mut theta = DenseMatrix::zeros(c, m);
    for r in 0..c {
        theta.set(r, r, 1.0);
    }
    IgnnModel {
        layers: vec![IgnnLayer {
            ws: vec![w_block],
            input_maps: vec![InputMap::omega_ua(omega)],
            activation: BlockActivation::Stacked(vec![(c, Activation::Identity), (h, phi1)]),
            kappas: vec![0.95],
        }],
        inter_maps: Vec::new(),
        head: Head::Linear { theta },
        readout: Readout::Node,
        dropout: 0.0,
        learnable_u: None,
    }
}

/// Flattens a stack of single-relation `OmegaUA` layers into one equilibrium
/// over the concatenated state, with the per-layer weights on the block
/// diagonal and each omega coupling a layer to the one below on the
/// superdiagonal. Used to cross-check the multi-layer forward pass.
pub fn flatten_multilayer(model: &IgnnModel) -> Result<IgnnModel, ModelError> {
    for (l, layer) in model.layers.iter().enumerate() {
        if layer.relations() != 1 {
            return Err(ModelError::Mismatch("flatten supports one relation".into()));
        }
        if layer.input_maps[0].form != BForm::OmegaUA {
            return Err(ModelError::Mismatch(
                "flatten requires the aggregated input form".into(),
            ));
        }
        if l > 0 && model.inter_maps[l - 1].is_some() {
            return Err(ModelError::Mismatch(
                "flatten does not support inter-layer maps".into(),
            ));
        }
    }
    let dims: Vec<usize> = model.layers.iter().map(|l| l.state_dim()).collect();
    let total: usize = dims.iter().sum();
    // stacked state is (X_L, ..., X_1): offsets from the top
    let mut offsets = vec![0usize; dims.len()];
    let mut acc = 0;
    for l in (0..dims.len()).rev() {
        offsets[l] = acc;
        acc += dims[l];
    }
    let mut w_block = DenseMatrix::zeros(total, total);
    let mut blocks = Vec::new();
    for l in (0..dims.len()).rev() {
        let layer = &model.layers[l];
        let off = offsets[l];
        for r in 0..dims[l] {
            for c in 0..dims[l] {
                w_block.set(off + r, off + c, layer.ws[0].get(r, c));
            }
        }
        if l > 0 {
            // omega of layer l couples to layer l-1's block
            let omega = &layer.input_maps[0].omegas[0];
            let below = offsets[l - 1];
            for r in 0..dims[l] {
                for c in 0..dims[l - 1] {
                    w_block.set(off + r, below + c, omega.get(r, c));
                }
            }
        }
        match &layer.activation {
            BlockActivation::Uniform(act) => blocks.push((dims[l], *act)),
            BlockActivation::Stacked(_) => {
                return Err(ModelError::Mismatch(
                    "flatten expects uniform per-layer activations".into(),
                ))
            }
        }
    }
    blocks.reverse();
    let p = model.layers[0].feature_dim();
    let mut omega_block = DenseMatrix::zeros(total, p);
    let bottom = offsets[0];
    let omega0 = &model.layers[0].input_maps[0].omegas[0];
    for r in 0..dims[0] {
        for c in 0..p {
            omega_block.set(bottom + r, c, omega0.get(r, c));
        }
    }
    let last = model.layers.len() - 1;
    let (classes, theta_cols) = match &model.head {
        Head::Linear { theta } => (theta.rows(), theta.cols()),
        Head::Mlp { .. } => {
            return Err(ModelError::Mismatch("flatten expects a linear head".into()))
        }
    };
    if theta_cols != dims[last] {
        return Err(ModelError::Mismatch("head width mismatch".into()));
    }
    let mut theta_block = DenseMatrix::zeros(classes, total);
    if let Head::Linear { theta } = &model.head {
        for r in 0..classes {
            for c in 0..dims[last] {
                theta_block.set(r, offsets[last] + c, theta.get(r, c));
            }
        }
    }
    Ok(IgnnModel {
        layers: vec![IgnnLayer {
            ws: vec![w_block],
            input_maps: vec![InputMap::omega_ua(omega_block)],
            activation: BlockActivation::Stacked(blocks),
            kappas: model.layers[0].kappas.clone(),
        }],
        inter_maps: Vec::new(),
        head: Head::Linear { theta: theta_block },
        readout: model.readout,
        dropout: model.dropout,
        learnable_u: model.learnable_u.clone(),
    })
}

pub use loss::{
    accuracy, bce_multilabel, binarize_multiclass, binarize_multilabel, macro_f1, micro_f1,
    softmax_xent_masked,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, GraphKind};
    use crate::linalg::rmul_sparse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DenseMatrix {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn toy_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, classes: usize) -> NodeDataset {
        let mut triplets = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            triplets.push((i, j, 0.5));
            triplets.push((j, i, 0.5));
        }
        let a = SparseAdjacency::from_triplets(n, &triplets).unwrap();
        let features = random_matrix(rng, p, n, -1.0, 1.0);
        let mut labels = DenseMatrix::zeros(classes, n);
        for node in 0..n {
            labels.set(node % classes, node, 1.0);
        }
        NodeDataset::new(
            GraphKind::Ordinary(Graph::new(a)),
            Some(features),
            labels,
            (0..n / 2).collect(),
            (n / 2..3 * n / 4).collect(),
            (3 * n / 4..n).collect(),
        )
        .unwrap()
    }

    fn small_model(rng: &mut ChaCha8Rng, dataset: &NodeDataset, hidden: Vec<usize>) -> IgnnModel {
        let adjs = dataset.graph.adjacencies();
        let spec = ConstraintSpec::ordinary(0.9, adjs[0]).unwrap();
        let arch = Architecture {
            hidden,
            feature_dim: dataset.features.as_ref().unwrap().rows(),
            classes: dataset.classes(),
            relations: 1,
            b_form: BForm::OmegaUA,
            activation: Activation::Relu,
            kappas: vec![0.9],
            mlp_head_hidden: None,
            readout: Readout::Node,
            dropout: 0.0,
            learnable_u_nodes: None,
        };
        IgnnModel::init(&arch, &spec, rng).unwrap()
    }

    #[test]
    fn zero_weight_single_layer_is_head_of_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dataset = toy_dataset(&mut rng, 6, 3, 2);
        let mut model = small_model(&mut rng, &dataset, vec![4]);
        model.layers[0].ws[0] = DenseMatrix::zeros(4, 4);
        model.layers[0].activation = BlockActivation::Uniform(Activation::Identity);
        let cache = model.forward_eval(&dataset, 1e-10, 50, None).unwrap();
        let adjs = dataset.graph.adjacencies();
        let b = model.layers[0].input_maps[0]
            .eval(dataset.features.as_ref().unwrap(), adjs[0])
            .unwrap();
        let want = match &model.head {
            Head::Linear { theta } => matmul(theta, &b).unwrap(),
            _ => unreachable!(),
        };
        assert!(cache.predictions.max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dataset = toy_dataset(&mut rng, 8, 3, 2);
        let model = small_model(&mut rng, &dataset, vec![4]);
        let a = model.forward_eval(&dataset, 1e-9, 300, None).unwrap();
        let b = model.forward_eval(&dataset, 1e-9, 300, None).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn two_layer_forward_composes_single_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dataset = toy_dataset(&mut rng, 5, 3, 2);
        let model = small_model(&mut rng, &dataset, vec![4, 3]);
        let cache = model.forward_eval(&dataset, 1e-11, 500, None).unwrap();
        // compose by hand with two independent forward solves
        let adjs = dataset.graph.adjacencies();
        let u = dataset.features.as_ref().unwrap();
        let b1 = model.layers[0].input_maps[0].eval(u, adjs[0]).unwrap();
        let x1 = solve_forward_hetero(
            &[&model.layers[0].ws[0]],
            &adjs,
            &[&b1],
            &model.layers[0].activation,
            1e-11,
            500,
            None,
        )
        .unwrap()
        .x;
        let b2 = model.layers[1].input_maps[0].eval(&x1, adjs[0]).unwrap();
        let x2 = solve_forward_hetero(
            &[&model.layers[1].ws[0]],
            &adjs,
            &[&b2],
            &model.layers[1].activation,
            1e-11,
            500,
            None,
        )
        .unwrap()
        .x;
        assert!(cache.solutions[1].x.max_abs_diff(&x2) <= 1e-9);
    }

    #[test]
    fn zero_loss_gradient_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dataset = toy_dataset(&mut rng, 6, 3, 2);
        let model = small_model(&mut rng, &dataset, vec![4, 3]);
        let cache = model.forward_eval(&dataset, 1e-10, 500, None).unwrap();
        let zero_grad = DenseMatrix::zeros(2, 6);
        let grads = model
            .backward(&dataset, &cache, &zero_grad, 1e-10, 500)
            .unwrap();
        let flat = model.flatten_gradients(&grads);
        for tensor in flat {
            assert!(tensor.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn full_model_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dataset = toy_dataset(&mut rng, 5, 2, 2);
        let mut model = small_model(&mut rng, &dataset, vec![3, 2]);
        model.layers[0].activation = BlockActivation::Uniform(Activation::Tanh);
        model.layers[1].activation = BlockActivation::Uniform(Activation::Tanh);
        let tol = 1e-13;
        let target = random_matrix(&mut rng, 2, 5, -1.0, 1.0);
        let loss_of = |m: &IgnnModel| -> f64 {
            let cache = m.forward_eval(&dataset, tol, 20_000, None).unwrap();
            cache
                .predictions
                .sub(&target)
                .data()
                .iter()
                .map(|v| 0.5 * v * v)
                .sum()
        };
        let cache = model.forward_eval(&dataset, tol, 20_000, None).unwrap();
        let grad_pred = cache.predictions.sub(&target);
        let grads = model
            .backward(&dataset, &cache, &grad_pred, tol, 20_000)
            .unwrap();
        let flat = model.flatten_gradients(&grads);

        // walk parameters in the same order, perturbing one entry per tensor
        let h = 1e-5;
        let mut tensor_idx = 0;
        let mut checked = 0;
        let param_sizes: Vec<usize> = flat.iter().map(|t| t.len()).collect();
        for (ti, size) in param_sizes.iter().enumerate() {
            for entry in [0usize, size.saturating_sub(1)] {
                let mut plus = model.clone();
                let mut visit = 0;
                plus.for_each_param_mut(&mut |slice| {
                    if visit == ti {
                        slice[entry] += h;
                    }
                    visit += 1;
                });
                let mut minus = model.clone();
                let mut visit = 0;
                minus.for_each_param_mut(&mut |slice| {
                    if visit == ti {
                        slice[entry] -= h;
                    }
                    visit += 1;
                });
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let analytic = flat[ti][entry];
                let tol_fd = (1e-6f64).max(1e-4 * fd.abs());
                assert!(
                    (analytic - fd).abs() <= tol_fd,
                    "tensor {ti} entry {entry}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
            tensor_idx += 1;
        }
        assert_eq!(tensor_idx, param_sizes.len());
        assert!(checked >= 8);
    }

    #[test]
    fn gcn_construction_matches_explicit_two_layer_gcn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (p, h, c, n) = (3, 4, 2, 5);
            let w1 = random_matrix(&mut rng, h, p, -1.0, 1.0);
            let w2 = random_matrix(&mut rng, c, h, -1.0, 1.0);
            let dataset = toy_dataset(&mut rng, n, p, c);
            let adjs = dataset.graph.adjacencies();
            let u = dataset.features.as_ref().unwrap();
            // explicit evaluation: W2 phi(W1 U A) A
            let ua = rmul_sparse(u, adjs[0]).unwrap();
            let x1 = Activation::Relu.apply(&matmul(&w1, &ua).unwrap());
            let want = rmul_sparse(&matmul(&w2, &x1).unwrap(), adjs[0]).unwrap();

            let model = gcn_as_ignn(&w1, &w2, Activation::Relu);
            let cache = model.forward_eval(&dataset, 1e-12, 50, None).unwrap();
            assert!(cache.predictions.max_abs_diff(&want) <= 1e-12);
            assert!(cache.solutions[0].iterations <= 3);
        }
    }

    #[test]
    fn gcn_construction_zero_weights() {
        let w1 = DenseMatrix::zeros(3, 2);
        let w2 = DenseMatrix::zeros(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dataset = toy_dataset(&mut rng, 4, 2, 2);
        let model = gcn_as_ignn(&w1, &w2, Activation::Relu);
        let cache = model.forward_eval(&dataset, 1e-12, 50, None).unwrap();
        assert_eq!(cache.predictions, DenseMatrix::zeros(2, 4));
    }

    #[test]
    fn multilayer_equals_flattened_block_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dataset = toy_dataset(&mut rng, 5, 3, 2);
        let mut model = small_model(&mut rng, &dataset, vec![4, 3]);
        // keep the flattened block operator well-posed: scale the couplings
        for layer in &mut model.layers {
            layer.ws[0] = layer.ws[0].scale(0.4 / layer.ws[0].inf_norm().max(1e-9));
            for omega in &mut layer.input_maps[0].omegas {
                *omega = omega.scale(0.4 / omega.inf_norm().max(1e-9));
            }
        }
        let flat = flatten_multilayer(&model).unwrap();
        let a = model.forward_eval(&dataset, 1e-12, 5000, None).unwrap();
        let b = flat.forward_eval(&dataset, 1e-12, 5000, None).unwrap();
        assert!(a.predictions.max_abs_diff(&b.predictions) <= 1e-8);
    }

    #[test]
    fn rescale_preserves_relu_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dataset = toy_dataset(&mut rng, 6, 3, 2);
        let mut model = small_model(&mut rng, &dataset, vec![4]);
        // inflate inf_norm while keeping lambda_pf(|W|) < 1: skewed similarity
        let base = random_matrix(&mut rng, 4, 4, 0.05, 0.2);
        let mut skew = DenseMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let scale = [1.0, 8.0, 0.5, 2.0];
                skew.set(i, j, base.get(i, j) * scale[i] / scale[j]);
            }
        }
        model.layers[0].ws[0] = skew;
        let report = crate::wellposed::check(
            &model.layers[0].ws[0],
            dataset.graph.adjacencies()[0],
        )
        .unwrap();
        assert!(report.pf_holds);
        let rescaled = model.rescale().unwrap();
        let before = model.forward_eval(&dataset, 1e-12, 20_000, None).unwrap();
        let after = rescaled.forward_eval(&dataset, 1e-12, 20_000, None).unwrap();
        assert!(before.predictions.max_abs_diff(&after.predictions) <= 1e-8);
        let w = &rescaled.layers[0].ws[0];
        let (lambda, _) =
            crate::linalg::pf_eigen(&model.layers[0].ws[0].abs(), 1e-12, 100_000).unwrap();
        assert!((w.inf_norm() - lambda).abs() <= 1e-6);
    }

    #[test]
    fn rescale_rejects_tanh_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dataset = toy_dataset(&mut rng, 4, 2, 2);
        let mut model = small_model(&mut rng, &dataset, vec![3]);
        model.layers[0].activation = BlockActivation::Uniform(Activation::Tanh);
        assert!(matches!(model.rescale(), Err(ModelError::NotHomogeneous)));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dataset = toy_dataset(&mut rng, 6, 3, 2);
        let mut model = small_model(&mut rng, &dataset, vec![4]);
        model.dropout = 0.5;
        let eval = model.forward_eval(&dataset, 1e-9, 300, None).unwrap();
        assert!(eval.dropout_mask.is_none());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let train = model
            .forward_train(&dataset, 1e-9, 300, None, &mut drop_rng)
            .unwrap();
        let mask = train.dropout_mask.as_ref().unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_ne!(eval.predictions, train.predictions);
    }

    #[test]
    fn warm_start_reaches_same_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dataset = toy_dataset(&mut rng, 6, 3, 2);
        let model = small_model(&mut rng, &dataset, vec![4]);
        let tol = 1e-9;
        let cold = model.forward_eval(&dataset, tol, 500, None).unwrap();
        let warm = model.forward_eval(&dataset, tol, 500, Some(&cold)).unwrap();
        assert!(warm.solutions[0].iterations <= 2);
        assert!(cold.predictions.max_abs_diff(&warm.predictions) <= 10.0 * tol);
    }
}
