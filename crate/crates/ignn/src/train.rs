//! Projected-gradient training and evaluation.
//!
//! Every epoch runs: forward solve (warm-started from the previous epoch) ->
//! loss -> adjoint solve -> weight-decay gradient addition -> optimizer step
//! on all parameters -> projection of every relation's weight matrix back
//! onto its norm budget. The constraint therefore holds after every step,
//! which is what keeps the next forward solve convergent. Runs are
//! deterministic given the seed.

use crate::equilibrium::Activation;
use crate::graph::{
    load_edge_list, load_features, load_graph_collection, load_labels, load_splits, renormalize,
    Graph, GraphCollection, GraphError, GraphKind, HeteroGraph, NodeDataset,
};
use crate::implicit_grad::BForm;
use crate::model::loss::LossError;
use crate::model::{
    bce_multilabel, binarize_multiclass, binarize_multilabel, checkpoint::CheckpointError,
    loss, softmax_xent_masked, Architecture, ForwardCache, IgnnModel, ModelError, Readout,
};
use crate::wellposed::{ConstraintSpec, WellPosedError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("constraint violated after projection at epoch {epoch} (excess {violation:e})")]
    ConstraintViolation { epoch: usize, violation: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    WellPosed(#[from] WellPosedError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    NodeMulticlass,
    NodeMultilabel,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Everything a run needs; every field is addressable from the config file
/// (`key = value` lines, `#` comments, unknown keys rejected).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub kappas: Vec<f64>,
    pub weight_decay: f64,
    pub dropout: f64,
    pub forward_tol: f64,
    pub backward_tol: Option<f64>,
    pub forward_max_iter: usize,
    pub backward_max_iter: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub b_form: BForm,
    pub activation: Activation,
    pub mlp_head_hidden: Option<usize>,
    pub readout: Readout,
    pub renormalize: bool,
    pub hetero: bool,
    pub warm_start: bool,
    pub metrics_every: usize,
    pub early_stop_val_f1: Option<f64>,
    pub early_stop_patience: usize,
    pub feature_dim: Option<usize>,
    pub edges: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub nodes: Option<usize>,
    pub graph_dir: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::NodeMulticlass,
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            kappas: vec![0.95],
            weight_decay: 0.0,
            dropout: 0.0,
            forward_tol: 1e-6,
            backward_tol: None,
            forward_max_iter: 300,
            backward_max_iter: 300,
            seed: 0,
            hidden: vec![16],
            b_form: BForm::OmegaUA,
            activation: Activation::Relu,
            mlp_head_hidden: None,
            readout: Readout::Node,
            renormalize: true,
            hetero: false,
            warm_start: true,
            metrics_every: 1,
            early_stop_val_f1: None,
            early_stop_patience: 10,
            feature_dim: None,
            edges: None,
            features: None,
            labels: None,
            splits: None,
            nodes: None,
            graph_dir: None,
            checkpoint_out: None,
            metrics_out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        for &k in &self.kappas {
            if !(0.0..1.0).contains(&k) {
                return Err(TrainError::Config(format!("kappa must lie in [0, 1), got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.metrics_every == 0 {
            return Err(TrainError::Config("metrics_every must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(TrainError::Config("hidden must list positive widths".into()));
        }
        Ok(())
    }

    pub fn backward_tol(&self) -> f64 {
        self.backward_tol.unwrap_or(self.forward_tol)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(TrainError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, TrainError> {
    value
        .split(',')
        .map(|tok| parse_num(key, tok.trim()))
        .collect()
}

fn parse_activation(value: &str) -> Result<Activation, TrainError> {
    Ok(match value {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        "sigmoid" => Activation::Sigmoid,
        "identity" => Activation::Identity,
        other => match other.strip_prefix("leaky:") {
            Some(slope) => Activation::LeakyRelu(parse_num("activation", slope)?),
            None => {
                return Err(TrainError::Config(format!(
                    "activation: unknown kind {value:?} (relu, leaky:<slope>, tanh, sigmoid, identity)"
                )))
            }
        },
    })
}

/// Parses the `key = value` config format.
pub fn parse_config(text: &str) -> Result<TrainConfig, TrainError> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            TrainError::Config(format!("line {line_no}: expected key = value, got {line:?}"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "task" => {
                cfg.task = match value {
                    "node-multiclass" => Task::NodeMulticlass,
                    "node-multilabel" => Task::NodeMultilabel,
                    "graph" => Task::Graph,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "task: unknown value {value:?}"
                        )))
                    }
                }
            }
            "optimizer" => {
                cfg.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "optimizer: unknown value {value:?}"
                        )))
                    }
                }
            }
            "lr" => cfg.lr = parse_num(key, value)?,
            "beta1" => cfg.beta1 = parse_num(key, value)?,
            "beta2" => cfg.beta2 = parse_num(key, value)?,
            "eps" => cfg.eps = parse_num(key, value)?,
            "epochs" => cfg.epochs = parse_num(key, value)?,
            "kappa" => cfg.kappas = parse_list(key, value)?,
            "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
            "dropout" => cfg.dropout = parse_num(key, value)?,
            "forward_tol" => cfg.forward_tol = parse_num(key, value)?,
            "backward_tol" => cfg.backward_tol = Some(parse_num(key, value)?),
            "forward_max_iter" => cfg.forward_max_iter = parse_num(key, value)?,
            "backward_max_iter" => cfg.backward_max_iter = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "hidden" => cfg.hidden = parse_list(key, value)?,
            "b_form" => {
                cfg.b_form = match value {
                    "omega-ua" => BForm::OmegaUA,
                    "omega-u" => BForm::OmegaU,
                    "split" => BForm::Split,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "b_form: unknown value {value:?}"
                        )))
                    }
                }
            }
            "activation" => cfg.activation = parse_activation(value)?,
            "head" => {
                cfg.mlp_head_hidden = match value {
                    "linear" => None,
                    other => match other.strip_prefix("mlp:") {
                        Some(h) => Some(parse_num(key, h)?),
                        None => {
                            return Err(TrainError::Config(format!(
                                "head: expected linear or mlp:<width>, got {value:?}"
                            )))
                        }
                    },
                }
            }
            "readout" => {
                cfg.readout = match value {
                    "node" => Readout::Node,
                    "graph-sum" => Readout::GraphSum,
                    "graph-mean" => Readout::GraphMean,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "readout: unknown value {value:?}"
                        )))
                    }
                }
            }
            "renormalize" => cfg.renormalize = parse_bool(key, value)?,
            "hetero" => cfg.hetero = parse_bool(key, value)?,
            "warm_start" => cfg.warm_start = parse_bool(key, value)?,
            "metrics_every" => cfg.metrics_every = parse_num(key, value)?,
            "early_stop_val_f1" => cfg.early_stop_val_f1 = Some(parse_num(key, value)?),
            "early_stop_patience" => cfg.early_stop_patience = parse_num(key, value)?,
            "feature_dim" => cfg.feature_dim = Some(parse_num(key, value)?),
            "edges" => cfg.edges = Some(PathBuf::from(value)),
            "features" => cfg.features = Some(PathBuf::from(value)),
            "labels" => cfg.labels = Some(PathBuf::from(value)),
            "splits" => cfg.splits = Some(PathBuf::from(value)),
            "nodes" => cfg.nodes = Some(parse_num(key, value)?),
            "graph_dir" => cfg.graph_dir = Some(PathBuf::from(value)),
            "checkpoint_out" => cfg.checkpoint_out = Some(PathBuf::from(value)),
            "metrics_out" => cfg.metrics_out = Some(PathBuf::from(value)),
            _ => {
                return Err(TrainError::Config(format!(
                    "line {line_no}: unknown key {key:?}"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * (g + weight_decay * *p);
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] + weight_decay * param[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// SGD or Adam over the model's parameter tensors, with weight decay folded
/// into the gradient before the update. State persists across epochs.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::sgd(cfg.lr),
            OptimizerKind::Adam => Self::adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
        }
    }

    /// One update over all tensors; `grads` must follow the model's
    /// parameter visit order.
    pub fn apply(&mut self, model: &mut IgnnModel, grads: &[Vec<f64>], weight_decay: f64) {
        self.step += 1;
        let (kind, lr, b1, b2, eps, t) =
            (self.kind, self.lr, self.beta1, self.beta2, self.eps, self.step);
        let (m_state, v_state) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.for_each_param_mut(&mut |param| {
            let grad = &grads[idx];
            debug_assert_eq!(param.len(), grad.len());
            match kind {
                OptimizerKind::Sgd => sgd_step(param, grad, lr, weight_decay),
                OptimizerKind::Adam => {
                    if m_state.len() <= idx {
                        m_state.push(vec![0.0; param.len()]);
                        v_state.push(vec![0.0; param.len()]);
                    }
                    adam_step(
                        param,
                        grad,
                        &mut m_state[idx],
                        &mut v_state[idx],
                        t,
                        lr,
                        b1,
                        b2,
                        eps,
                        weight_decay,
                    );
                }
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_f1: f64,
    pub val_f1: f64,
    pub fwd_iters: usize,
    pub bwd_iters: usize,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{}\t{}\t{:.3}",
            self.epoch, self.loss, self.train_f1, self.val_f1, self.fwd_iters, self.bwd_iters,
            self.seconds
        )
    }

    pub fn tsv_header() -> &'static str {
        "epoch\tloss\ttrain_f1\tval_f1\tfwd_iters\tbwd_iters\tseconds"
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_val_f1(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.val_f1)
            .filter(|v| !v.is_nan())
            .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.max(v))))
    }
}

pub struct TrainOutcome {
    /// The best-validation model (final model when no validation mask).
    pub model: IgnnModel,
    pub history: TrainHistory,
    pub constraints: ConstraintSpec,
}

fn expand_kappas(cfg: &TrainConfig, relations: usize) -> Result<Vec<f64>, TrainError> {
    if cfg.kappas.len() == relations {
        Ok(cfg.kappas.clone())
    } else if cfg.kappas.len() == 1 {
        Ok(vec![cfg.kappas[0]; relations])
    } else {
        Err(TrainError::Config(format!(
            "{} kappas given for {} relations",
            cfg.kappas.len(),
            relations
        )))
    }
}

fn binarize_for(task: Task, logits: &crate::DenseMatrix) -> crate::DenseMatrix {
    match task {
        Task::NodeMulticlass | Task::Graph => binarize_multiclass(logits),
        Task::NodeMultilabel => binarize_multilabel(logits),
    }
}

fn loss_for(
    task: Task,
    logits: &crate::DenseMatrix,
    labels: &crate::DenseMatrix,
    mask: &[usize],
) -> Result<(f64, crate::DenseMatrix), LossError> {
    match task {
        Task::NodeMulticlass | Task::Graph => softmax_xent_masked(logits, labels, mask),
        Task::NodeMultilabel => bce_multilabel(logits, labels, mask),
    }
}

/// Builds the constraint budgets for a dataset: the PF value of the (single)
/// adjacency for ordinary graphs, per-relation column norms for hetero.
pub fn constraints_for(
    dataset: &NodeDataset,
    cfg: &TrainConfig,
) -> Result<ConstraintSpec, TrainError> {
    let adjs = dataset.graph.adjacencies();
    let kappas = expand_kappas(cfg, adjs.len())?;
    Ok(if adjs.len() == 1 {
        ConstraintSpec::ordinary(kappas[0], adjs[0])?
    } else {
        ConstraintSpec::hetero(&kappas, &adjs)?
    })
}

fn architecture_for(
    dataset: &NodeDataset,
    cfg: &TrainConfig,
    readout: Readout,
) -> Result<Architecture, TrainError> {
    let relations = dataset.graph.relation_count();
    let feature_dim = match (&dataset.features, cfg.feature_dim) {
        (Some(u), _) => u.rows(),
        (None, Some(p)) => p,
        (None, None) => {
            return Err(TrainError::Config(
                "dataset has no features; set feature_dim to learn them".into(),
            ))
        }
    };
    Ok(Architecture {
        hidden: cfg.hidden.clone(),
        feature_dim,
        classes: dataset.classes(),
        relations,
        b_form: cfg.b_form,
        activation: cfg.activation,
        kappas: expand_kappas(cfg, relations)?,
        mlp_head_hidden: cfg.mlp_head_hidden,
        readout,
        dropout: cfg.dropout,
        learnable_u_nodes: dataset.features.is_none().then(|| dataset.n()),
    })
}

/// Trains on a node-classification dataset. Per epoch: warm-started forward,
/// masked loss, adjoint backward, optimizer step, projection, then a cold
/// deterministic evaluation pass for the metrics. The best-validation model
/// is retained and returned.
pub fn train_node(
    dataset: &NodeDataset,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.task == Task::Graph {
        return Err(TrainError::Config(
            "train_node cannot run the graph task".into(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(TrainError::Config("train mask is empty".into()));
    }
    let spec = constraints_for(dataset, cfg)?;
    let arch = architecture_for(dataset, cfg, Readout::Node)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = IgnnModel::init(&arch, &spec, &mut rng)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut optimizer = Optimizer::from_config(cfg);
    let mut warm: Option<ForwardCache> = None;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, IgnnModel)> = None;
    let mut streak = 0usize;
    let (mut last_train_f1, mut last_val_f1) = (f64::NAN, f64::NAN);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let warm_ref = if cfg.warm_start { warm.as_ref() } else { None };
        let cache = model.forward_train(
            dataset,
            cfg.forward_tol,
            cfg.forward_max_iter,
            warm_ref,
            &mut dropout_rng,
        )?;
        let (loss_value, grad_pred) =
            loss_for(cfg.task, &cache.predictions, &dataset.labels, &dataset.train)?;
        let grads = model.backward(
            dataset,
            &cache,
            &grad_pred,
            cfg.backward_tol(),
            cfg.backward_max_iter,
        )?;
        let flat = model.flatten_gradients(&grads);
        optimizer.apply(&mut model, &flat, cfg.weight_decay);
        model.project_constraints(&spec)?;
        let violation = model.constraint_violation(&spec);
        if violation > 1e-12 {
            return Err(TrainError::ConstraintViolation { epoch, violation });
        }
        let fwd_iters = cache.forward_iterations();
        let bwd_iters = grads.backward_iterations();
        warm = Some(cache);

        if epoch % cfg.metrics_every == 0 || epoch == cfg.epochs {
            let eval = model.forward_eval(dataset, cfg.forward_tol, cfg.forward_max_iter, None)?;
            let pred = binarize_for(cfg.task, &eval.predictions);
            last_train_f1 = loss::micro_f1(&pred, &dataset.labels, &dataset.train)?;
            last_val_f1 = if dataset.val.is_empty() {
                f64::NAN
            } else {
                loss::micro_f1(&pred, &dataset.labels, &dataset.val)?
            };
            if !last_val_f1.is_nan() {
                let better = best
                    .as_ref()
                    .map_or(true, |(b, _)| last_val_f1 > *b);
                if better {
                    best = Some((last_val_f1, model.clone()));
                }
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_value,
            train_f1: last_train_f1,
            val_f1: last_val_f1,
            fwd_iters,
            bwd_iters,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        history.epochs.push(record);
        if let Some(threshold) = cfg.early_stop_val_f1 {
            if !last_val_f1.is_nan() && last_val_f1 >= threshold {
                streak += 1;
                if streak >= cfg.early_stop_patience {
                    break;
                }
            } else {
                streak = 0;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(TrainOutcome {
        model,
        history,
        constraints: spec,
    })
}

/// Trains a graph-level classifier by sequential per-graph gradient
/// accumulation within each epoch. The weight budget uses the largest PF
/// value over all graphs in the collection so every member stays solvable.
pub fn train_graphs(
    collection: &GraphCollection,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if collection.train.is_empty() {
        return Err(TrainError::Config("train split is empty".into()));
    }
    let readout = if cfg.readout == Readout::Node {
        Readout::GraphSum
    } else {
        cfg.readout
    };
    let mut max_lambda = 0.0f64;
    for ds in &collection.graphs {
        for a in ds.graph.adjacencies() {
            max_lambda = max_lambda.max(a.lambda_pf().map_err(WellPosedError::from)?);
        }
    }
    let kappas = expand_kappas(cfg, 1)?;
    let spec = ConstraintSpec {
        kappas: kappas.clone(),
        radii: vec![if max_lambda == 0.0 {
            f64::INFINITY
        } else {
            kappas[0] / max_lambda
        }],
    };
    let first = collection
        .graphs
        .first()
        .ok_or_else(|| TrainError::Config("collection has no graphs".into()))?;
    let classes = collection.labels.rows();
    let mut labeled_first = first.clone();
    labeled_first.labels = crate::DenseMatrix::zeros(classes, first.n());
    let arch = architecture_for(&labeled_first, cfg, readout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = IgnnModel::init(&arch, &spec, &mut rng)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut optimizer = Optimizer::from_config(cfg);
    let mut warm: Vec<Option<ForwardCache>> = vec![None; collection.graphs.len()];
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, IgnnModel)> = None;
    let label_column = |g: usize| -> crate::DenseMatrix {
        let mut col = crate::DenseMatrix::zeros(classes, 1);
        for r in 0..classes {
            col.set(r, 0, collection.labels.get(r, g));
        }
        col
    };
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut accum: Option<Vec<Vec<f64>>> = None;
        let mut loss_sum = 0.0;
        let mut fwd_iters = 0;
        let mut bwd_iters = 0;
        for &g in &collection.train {
            let ds = &collection.graphs[g];
            let warm_ref = if cfg.warm_start { warm[g].as_ref() } else { None };
            let cache = model.forward_train(
                ds,
                cfg.forward_tol,
                cfg.forward_max_iter,
                warm_ref,
                &mut dropout_rng,
            )?;
            let label = label_column(g);
            let (loss_value, grad_pred) = loss_for(cfg.task, &cache.predictions, &label, &[0])?;
            loss_sum += loss_value;
            let grads = model.backward(
                ds,
                &cache,
                &grad_pred,
                cfg.backward_tol(),
                cfg.backward_max_iter,
            )?;
            let flat = model.flatten_gradients(&grads);
            match &mut accum {
                None => accum = Some(flat),
                Some(acc) => {
                    for (a, f) in acc.iter_mut().zip(&flat) {
                        for (x, y) in a.iter_mut().zip(f) {
                            *x += y;
                        }
                    }
                }
            }
            fwd_iters += cache.forward_iterations();
            bwd_iters += grads.backward_iterations();
            warm[g] = Some(cache);
        }
        let count = collection.train.len() as f64;
        let mut flat = accum.expect("train split is nonempty");
        for tensor in &mut flat {
            for v in tensor.iter_mut() {
                *v /= count;
            }
        }
        optimizer.apply(&mut model, &flat, cfg.weight_decay);
        model.project_constraints(&spec)?;
        let violation = model.constraint_violation(&spec);
        if violation > 1e-12 {
            return Err(TrainError::ConstraintViolation { epoch, violation });
        }

        let eval_split = |model: &IgnnModel, split: &[usize]| -> Result<f64, TrainError> {
            if split.is_empty() {
                return Ok(f64::NAN);
            }
            let mut logits = crate::DenseMatrix::zeros(classes, split.len());
            let mut labels = crate::DenseMatrix::zeros(classes, split.len());
            for (i, &g) in split.iter().enumerate() {
                let cache = model.forward_eval(
                    &collection.graphs[g],
                    cfg.forward_tol,
                    cfg.forward_max_iter,
                    None,
                )?;
                for r in 0..classes {
                    logits.set(r, i, cache.predictions.get(r, 0));
                    labels.set(r, i, collection.labels.get(r, g));
                }
            }
            let pred = binarize_for(Task::Graph, &logits);
            Ok(loss::micro_f1(&pred, &labels, &(0..split.len()).collect::<Vec<_>>())?)
        };
        let train_f1 = eval_split(&model, &collection.train)?;
        let val_f1 = eval_split(&model, &collection.val)?;
        if !val_f1.is_nan() {
            let better = best.as_ref().map_or(true, |(b, _)| val_f1 > *b);
            if better {
                best = Some((val_f1, model.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / count,
            train_f1,
            val_f1,
            fwd_iters,
            bwd_iters,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&record);
        }
        history.epochs.push(record);
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok(TrainOutcome {
        model,
        history,
        constraints: spec,
    })
}

/// Per-split evaluation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub train: Option<SplitMetrics>,
    pub val: Option<SplitMetrics>,
    pub test: SplitMetrics,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let fmt = |name: &str, m: &SplitMetrics| match m.accuracy {
            Some(acc) => format!(
                "{name}\tmicro_f1 {:.4}\tmacro_f1 {:.4}\taccuracy {:.4}\n",
                m.micro_f1, m.macro_f1, acc
            ),
            None => format!("{name}\tmicro_f1 {:.4}\tmacro_f1 {:.4}\n", m.micro_f1, m.macro_f1),
        };
        if let Some(m) = &self.train {
            out.push_str(&fmt("train", m));
        }
        if let Some(m) = &self.val {
            out.push_str(&fmt("val", m));
        }
        out.push_str(&fmt("test", &self.test));
        out
    }
}

fn split_metrics(
    task: Task,
    pred: &crate::DenseMatrix,
    logits: &crate::DenseMatrix,
    labels: &crate::DenseMatrix,
    mask: &[usize],
) -> Result<SplitMetrics, TrainError> {
    Ok(SplitMetrics {
        micro_f1: loss::micro_f1(pred, labels, mask)?,
        macro_f1: loss::macro_f1(pred, labels, mask)?,
        accuracy: match task {
            Task::NodeMulticlass | Task::Graph => Some(loss::accuracy(logits, labels, mask)?),
            Task::NodeMultilabel => None,
        },
    })
}

/// Deterministic evaluation of a model on a node dataset: micro/macro F1
/// (plus accuracy for multiclass) per split. The test mask must be nonempty.
pub fn evaluate(
    model: &IgnnModel,
    dataset: &NodeDataset,
    task: Task,
    cfg: &TrainConfig,
) -> Result<EvalReport, TrainError> {
    if dataset.test.is_empty() {
        return Err(TrainError::Loss(LossError::EmptyMask));
    }
    let cache = model.forward_eval(dataset, cfg.forward_tol, cfg.forward_max_iter, None)?;
    let pred = binarize_for(task, &cache.predictions);
    let logits = &cache.predictions;
    let section = |mask: &[usize]| -> Result<Option<SplitMetrics>, TrainError> {
        if mask.is_empty() {
            Ok(None)
        } else {
            Ok(Some(split_metrics(task, &pred, logits, &dataset.labels, mask)?))
        }
    };
    Ok(EvalReport {
        train: section(&dataset.train)?,
        val: section(&dataset.val)?,
        test: split_metrics(task, &pred, logits, &dataset.labels, &dataset.test)?,
    })
}

/// Writes predictions (binarized per task) for every node, one line per
/// node, for external recounting.
pub fn export_predictions(
    model: &IgnnModel,
    dataset: &NodeDataset,
    task: Task,
    cfg: &TrainConfig,
    mut sink: impl std::io::Write,
) -> Result<(), TrainError> {
    let cache = model.forward_eval(dataset, cfg.forward_tol, cfg.forward_max_iter, None)?;
    let pred = binarize_for(task, &cache.predictions);
    for node in 0..pred.cols() {
        let row: Vec<String> = (0..pred.rows())
            .map(|r| format!("{}", pred.get(r, node) as u8))
            .collect();
        writeln!(sink, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Loads the node dataset named by the config paths, applying
/// renormalization when configured.
pub fn load_node_dataset(cfg: &TrainConfig) -> Result<NodeDataset, TrainError> {
    let edges = cfg
        .edges
        .as_ref()
        .ok_or_else(|| TrainError::Config("edges path is required".into()))?;
    let labels_path = cfg
        .labels
        .as_ref()
        .ok_or_else(|| TrainError::Config("labels path is required".into()))?;
    let labels_text = std::fs::read_to_string(labels_path)?;
    let n = match cfg.nodes {
        Some(n) => n,
        None => labels_text.lines().filter(|l| !l.trim().is_empty()).count(),
    };
    let labels = load_labels(std::io::Cursor::new(labels_text), n)?;
    let graph = load_edge_list(BufReader::new(File::open(edges)?), n, cfg.hetero)?;
    let graph = if cfg.renormalize {
        match graph {
            GraphKind::Ordinary(g) => GraphKind::Ordinary(renormalize(&g)?),
            GraphKind::Hetero(h) => {
                let mut relations = Vec::with_capacity(h.relations.len());
                for (name, a) in h.relations {
                    let g = renormalize(&Graph::new(a))?;
                    relations.push((name, g.adjacency));
                }
                GraphKind::Hetero(HeteroGraph { n: h.n, relations })
            }
        }
    } else {
        graph
    };
    let features = match &cfg.features {
        Some(path) if path.exists() => {
            Some(load_features(BufReader::new(File::open(path)?), n)?)
        }
        _ => None,
    };
    let (train, val, test) = match &cfg.splits {
        Some(path) => load_splits(BufReader::new(File::open(path)?), n)?,
        None => return Err(TrainError::Config("splits path is required".into())),
    };
    Ok(NodeDataset::new(graph, features, labels, train, val, test)?)
}

/// End-to-end driver: loads the dataset named by the config, dispatches on
/// the task, and returns the trained model plus history. Checkpoint and
/// metrics files are the caller's concern.
pub fn train(
    cfg: &TrainConfig,
    progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome, TrainError> {
    match cfg.task {
        Task::Graph => {
            let dir = cfg
                .graph_dir
                .as_ref()
                .ok_or_else(|| TrainError::Config("graph_dir is required for the graph task".into()))?;
            let collection = load_graph_collection(dir)?;
            train_graphs(&collection, cfg, progress)
        }
        _ => {
            let dataset = load_node_dataset(cfg)?;
            train_node(&dataset, cfg, progress)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gen_chains;
    use crate::model::checkpoint::save_checkpoint;
    use crate::{DenseMatrix, SparseAdjacency};
    use rand::Rng;

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut param = [1.0, -2.0, 3.0];
        sgd_step(&mut param, &[0.0, 0.0, 0.0], 0.1, 0.0);
        assert_eq!(param, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn sgd_scalar_step() {
        let mut param = [2.0];
        sgd_step(&mut param, &[0.5], 0.1, 0.0);
        assert!((param[0] - 1.95).abs() <= 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for &g in &[1e-4, 1.0, 1e4] {
            let mut param = [0.0];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_step(&mut param, &[g], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8, 0.0);
            assert!(
                (param[0].abs() - 0.01).abs() <= 1e-5,
                "gradient {g}: step {}",
                param[0]
            );
        }
    }

    fn chains_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            hidden: vec![8],
            lr: 0.02,
            weight_decay: 5e-4,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn renormalized_chains(l: usize, seed: u64) -> NodeDataset {
        let ds = gen_chains(l, 6, 8, 8, 16, 16, seed).unwrap();
        let GraphKind::Ordinary(g) = &ds.graph else { panic!() };
        let renorm = renormalize(g).unwrap();
        NodeDataset::new(
            GraphKind::Ordinary(renorm),
            ds.features.clone(),
            ds.labels.clone(),
            ds.train.clone(),
            ds.val.clone(),
            ds.test.clone(),
        )
        .unwrap()
    }

    #[test]
    fn constraint_holds_after_every_epoch() {
        let dataset = renormalized_chains(3, 11);
        let cfg = TrainConfig {
            epochs: 50,
            ..chains_config()
        };
        // the loop itself rejects violations; run it and double-check at the end
        let outcome = train_node(&dataset, &cfg, None).unwrap();
        assert!(outcome.model.constraint_violation(&outcome.constraints) <= 1e-12);
        assert_eq!(outcome.history.epochs.len(), 50);
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = renormalized_chains(3, 13);
        let cfg = TrainConfig {
            epochs: 8,
            ..chains_config()
        };
        let a = train_node(&dataset, &cfg, None).unwrap();
        let b = train_node(&dataset, &cfg, None).unwrap();
        for (ra, rb) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.train_f1, rb.train_f1);
            assert_eq!(ra.val_f1, rb.val_f1);
            assert_eq!(ra.fwd_iters, rb.fwd_iters);
        }
        let mut bytes_a = Vec::new();
        save_checkpoint(&a.model, &mut bytes_a).unwrap();
        let mut bytes_b = Vec::new();
        save_checkpoint(&b.model, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn warm_start_matches_cold_losses() {
        let dataset = renormalized_chains(3, 17);
        let base = TrainConfig {
            epochs: 5,
            optimizer: OptimizerKind::Sgd,
            lr: 0.005,
            ..chains_config()
        };
        let warm = train_node(&dataset, &base, None).unwrap();
        let cold_cfg = TrainConfig {
            warm_start: false,
            ..base
        };
        let cold = train_node(&dataset, &cold_cfg, None).unwrap();
        for (rw, rc) in warm.history.epochs.iter().zip(&cold.history.epochs) {
            assert!(
                (rw.loss - rc.loss).abs() <= 10.0 * base.forward_tol,
                "warm {} vs cold {}",
                rw.loss,
                rc.loss
            );
        }
    }

    #[test]
    fn clamped_w_reduces_to_logistic_regression() {
        // kappa = 0 forces W = 0; identity activation and an identity graph
        // make the model an affine classifier on the features
        let n = 40;
        let p = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut features = DenseMatrix::zeros(p, n);
        let mut labels = DenseMatrix::zeros(2, n);
        for i in 0..n {
            let class = i % 2;
            // linearly separable clusters around (+-1.5, +-1.5)
            let center = if class == 0 { -1.5 } else { 1.5 };
            features.set(0, i, center + 0.5 * (rng.random::<f64>() - 0.5));
            features.set(1, i, center + 0.5 * (rng.random::<f64>() - 0.5));
            labels.set(class, i, 1.0);
        }
        let graph = GraphKind::Ordinary(crate::graph::Graph::new(SparseAdjacency::identity(n)));
        let dataset = NodeDataset::new(
            graph,
            Some(features.clone()),
            labels.clone(),
            (0..30).collect(),
            (30..34).collect(),
            (34..40).collect(),
        )
        .unwrap();
        let cfg = TrainConfig {
            kappas: vec![0.0],
            activation: Activation::Identity,
            b_form: BForm::OmegaU,
            hidden: vec![4],
            epochs: 200,
            lr: 0.05,
            renormalize: false,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train_node(&dataset, &cfg, None).unwrap();
        for layer in &outcome.model.layers {
            assert_eq!(layer.ws[0].inf_norm(), 0.0, "W must stay clamped at zero");
        }
        let report = evaluate(&outcome.model, &dataset, Task::NodeMulticlass, &cfg).unwrap();
        assert_eq!(report.train.unwrap().micro_f1, 1.0);
        assert_eq!(report.test.micro_f1, 1.0);

        // independent logistic-regression oracle on the same features
        let mut w = vec![0.0f64; p + 1];
        for _ in 0..2000 {
            let mut grad = vec![0.0f64; p + 1];
            for i in 0..30 {
                let x = [features.get(0, i), features.get(1, i), 1.0];
                let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let prob = 1.0 / (1.0 + (-z).exp());
                let y = labels.get(1, i);
                for k in 0..=p {
                    grad[k] += (prob - y) * x[k];
                }
            }
            for k in 0..=p {
                w[k] -= 0.1 * grad[k] / 30.0;
            }
        }
        let mut correct = 0;
        for i in 0..30 {
            let x = [features.get(0, i), features.get(1, i), 1.0];
            let z: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let pred = usize::from(z > 0.0);
            if labels.get(pred, i) == 1.0 {
                correct += 1;
            }
        }
        assert_eq!(correct, 30, "oracle must also separate the data");
    }

    #[test]
    fn evaluate_reproduces_recorded_best_val_metric() {
        let dataset = renormalized_chains(4, 19);
        let cfg = TrainConfig {
            epochs: 12,
            ..chains_config()
        };
        let outcome = train_node(&dataset, &cfg, None).unwrap();
        let best = outcome.history.best_val_f1().unwrap();
        let report = evaluate(&outcome.model, &dataset, cfg.task, &cfg).unwrap();
        assert_eq!(report.val.unwrap().micro_f1, best);
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let text = "\
# a comment
task = node-multilabel
optimizer = sgd
lr = 0.5
epochs = 3
kappa = 0.7,0.2
hidden = 8,4
activation = leaky:0.25
head = mlp:12
b_form = split
readout = graph-mean
renormalize = false
hetero = true
seed = 9
weight_decay = 0.001 # trailing comment
early_stop_val_f1 = 0.99
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.task, Task::NodeMultilabel);
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.kappas, vec![0.7, 0.2]);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.activation, Activation::LeakyRelu(0.25));
        assert_eq!(cfg.mlp_head_hidden, Some(12));
        assert_eq!(cfg.b_form, BForm::Split);
        assert_eq!(cfg.readout, Readout::GraphMean);
        assert!(!cfg.renormalize);
        assert!(cfg.hetero);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.weight_decay, 0.001);
        assert_eq!(cfg.early_stop_val_f1, Some(0.99));

        let err = parse_config("bogus_key = 1\n").unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
        assert!(parse_config("lr = -1\n").is_err());
        assert!(parse_config("kappa = 1.0\n").is_err());
    }

    #[test]
    fn empty_test_mask_rejected_by_evaluate() {
        let dataset = renormalized_chains(3, 23);
        let stripped = NodeDataset::new(
            dataset.graph.clone(),
            dataset.features.clone(),
            dataset.labels.clone(),
            dataset.train.clone(),
            dataset.val.clone(),
            Vec::new(),
        )
        .unwrap();
        let cfg = chains_config();
        let outcome = train_node(&stripped, &TrainConfig { epochs: 2, ..cfg.clone() }, None).unwrap();
        assert!(matches!(
            evaluate(&outcome.model, &stripped, cfg.task, &cfg),
            Err(TrainError::Loss(LossError::EmptyMask))
        ));
    }

    #[test]
    fn hetero_training_runs_and_respects_budgets() {
        // two-relation toy: a ring split into two edge sets
        let n = 8;
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            if i % 2 == 0 {
                t1.push((i, j, 1.0));
                t1.push((j, i, 1.0));
            } else {
                t2.push((i, j, 1.0));
                t2.push((j, i, 1.0));
            }
        }
        let h = HeteroGraph {
            n,
            relations: vec![
                ("even".into(), SparseAdjacency::from_triplets(n, &t1).unwrap()),
                ("odd".into(), SparseAdjacency::from_triplets(n, &t2).unwrap()),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut features = DenseMatrix::zeros(3, n);
        for i in 0..n {
            for d in 0..3 {
                features.set(d, i, rng.random::<f64>() - 0.5 + if i < n / 2 { 1.0 } else { -1.0 });
            }
        }
        let mut labels = DenseMatrix::zeros(2, n);
        for i in 0..n {
            labels.set(usize::from(i >= n / 2), i, 1.0);
        }
        let dataset = NodeDataset::new(
            GraphKind::Hetero(h),
            Some(features),
            labels,
            vec![0, 1, 4, 5],
            vec![2, 6],
            vec![3, 7],
        )
        .unwrap();
        let cfg = TrainConfig {
            kappas: vec![0.5, 0.4],
            epochs: 40,
            hidden: vec![6],
            seed: 2,
            ..TrainConfig::default()
        };
        let outcome = train_node(&dataset, &cfg, None).unwrap();
        assert!(outcome.model.constraint_violation(&outcome.constraints) <= 1e-12);
        assert_eq!(outcome.constraints.radii.len(), 2);
        let report = evaluate(&outcome.model, &dataset, cfg.task, &cfg).unwrap();
        assert!(report.test.micro_f1 >= 0.5);
    }
}
