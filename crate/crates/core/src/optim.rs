//! SGD with momentum and the minimax training loop.
//!
//! One [`train_step`] runs a single forward pass over a source and a target
//! batch, builds every loss, then back-propagates twice over the same tape:
//! once from `L + λ6·L_H` for all parameters except the prototypes, and once
//! from `L − λ6·L_H` for the prototypes. Both groups are updated in the same
//! step. With [`OptConfig::strict_alternate`] the prototype update is applied
//! first and the rest of the network is then updated from a second forward
//! pass.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{generate_pair, sample_batch, Batch, DomainData, SUPPORT_PER_CLASS};
use crate::error::{MetfaError, Result};
use crate::eval::{evaluate, DomainMetrics};
use crate::graph::{Gradients, Graph};
use crate::losses::{
    loss_ce, loss_classdist, loss_entropy_logits, loss_metric, loss_prior, loss_rec, objectives, LossTerm,
    LossValues, LossVars, LossWeights, PseudoLabels,
};
use crate::model::{forward, Bound, Mode, NetConfig, ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "metfa-manifest-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub l2_scale: f64,
    pub epochs: usize,
    /// `None` means `⌈|source train| / (5·M)⌉`.
    pub steps_per_epoch: Option<usize>,
    /// Update the prototypes first, then the rest from a fresh forward pass.
    pub strict_alternate: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { lr: 2e-4, momentum: 0.9, l2_scale: 1e-5, epochs: 100, steps_per_epoch: None, strict_alternate: false }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(MetfaError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MetfaError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.l2_scale >= 0.0) {
            return Err(MetfaError::Config("l2_scale must be ≥ 0".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(MetfaError::Config("steps_per_epoch must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, source_rows: usize, num_classes: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| source_rows.div_ceil(SUPPORT_PER_CLASS * num_classes).max(1))
    }
}

/// Per-parameter velocities, zero-initialised, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Tensor>,
}

impl MomentumState {
    pub fn zeros(store: &ParamStore) -> Self {
        Self { velocity: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect() }
    }

    pub fn velocity(&self, i: usize) -> &Tensor {
        &self.velocity[i]
    }
}

/// `v ← momentum·v + (g + l2·w)`, then `w ← w − lr·v`.
pub fn sgd_step(w: &mut Tensor, grad: &Tensor, v: &mut Tensor, cfg: &OptConfig) -> Result<()> {
    if !w.same_shape(grad) || !w.same_shape(v) {
        return Err(MetfaError::Shape(format!("parameter {:?} vs gradient {:?}", w.shape(), grad.shape())));
    }
    if !grad.is_finite() {
        return Err(MetfaError::Numeric("non-finite gradient".into()));
    }
    for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
        *vi = cfg.momentum * *vi + (gi + cfg.l2_scale * *wi);
        *wi -= cfg.lr * *vi;
    }
    Ok(())
}

/// Applies `grads` to the members of `group`. All gradients are checked
/// before anything is written, so a failed step leaves the store intact.
pub fn apply_group(
    store: &mut ParamStore,
    state: &mut MomentumState,
    grads: &[Tensor],
    group: ParamGroup,
    cfg: &OptConfig,
) -> Result<()> {
    for (e, g) in store.entries().iter().zip(grads) {
        if e.group == group && !g.is_finite() {
            return Err(MetfaError::Numeric(format!("non-finite gradient for {}", e.name)));
        }
    }
    for ((e, v), g) in store.entries_mut().iter_mut().zip(&mut state.velocity).zip(grads) {
        if e.group == group {
            sgd_step(&mut e.value, g, v, cfg)?;
        }
    }
    Ok(())
}

/// Loss values and gradient norms of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub losses: LossValues,
    /// Each loss multiplied by its (masked) weight.
    pub contributions: LossValues,
    pub main_objective: f64,
    pub proto_objective: f64,
    pub grad_norm_main: f64,
    pub grad_norm_proto: f64,
    pub clamped_rows: usize,
}

/// Output of [`build_step_graph`].
pub struct StepGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub terms: LossVars,
    pub main: crate::graph::Var,
    pub proto: crate::graph::Var,
    pub pseudo: PseudoLabels,
    pub clamped_rows: usize,
}

/// One forward pass over a batch with every loss and both objectives on
/// the tape. Target labels are never touched.
pub fn build_step_graph<R: Rng + ?Sized>(
    batch: &Batch,
    store: &ParamStore,
    net: &NetConfig,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = g.constant(batch.x_s.clone());
    let xt = g.constant(batch.x_t.clone());
    let fs = forward(&mut g, &p, net, xs, Mode::Train, rng)?;
    let ft = forward(&mut g, &p, net, xt, Mode::Train, rng)?;

    let pseudo = PseudoLabels::from_scores(g.value(ft.clf.probs));
    let y_s = &batch.y_s;
    let terms = LossVars {
        ce: Some(loss_ce(&mut g, fs.clf.logits, y_s)?),
        prior: Some(loss_prior(&mut g, fs.code.mu, fs.code.logvar, ft.code.mu, ft.code.logvar)?),
        metric: Some(loss_metric(&mut g, fs.code.z, y_s, ft.code.z, &pseudo)?),
        rec: Some(loss_rec(&mut g, fs.features, fs.recon, ft.features, ft.recon)?),
        kl: Some(loss_classdist(&mut g, fs.clf.logits, y_s, ft.clf.logits, &pseudo, weights.tau1)?),
        entropy: Some(loss_entropy_logits(&mut g, ft.clf.logits)?),
    };
    let obj = objectives(&mut g, &terms, weights)?;
    Ok(StepGraph {
        graph: g,
        bound: p,
        terms,
        main: obj.main,
        proto: obj.proto,
        pseudo,
        clamped_rows: fs.clf.clamped_rows + ft.clf.clamped_rows,
    })
}

fn collect(grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
    bound.vars().iter().map(|&v| grads.get(v)).collect()
}

fn group_norm(store: &ParamStore, grads: &[Tensor], group: ParamGroup) -> f64 {
    store
        .entries()
        .iter()
        .zip(grads)
        .filter(|(e, _)| e.group == group)
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn report(sg: &StepGraph, weights: &LossWeights) -> Result<StepReport> {
    let mut losses = LossValues::default();
    for t in LossTerm::ALL {
        if let Some(v) = sg.terms.get(t) {
            losses.set(t, sg.graph.value(v).item()?);
        }
    }
    let main_objective = sg.graph.value(sg.main).item()?;
    let proto_objective = sg.graph.value(sg.proto).item()?;
    if !main_objective.is_finite() || !proto_objective.is_finite() {
        return Err(MetfaError::Numeric(format!("objective is {main_objective} / {proto_objective}")));
    }
    Ok(StepReport {
        losses,
        contributions: losses.weighted(weights),
        main_objective,
        proto_objective,
        clamped_rows: sg.clamped_rows,
        ..Default::default()
    })
}

/// One minimax update on a batch.
pub fn train_step<R: Rng + ?Sized>(
    batch: &Batch,
    store: &mut ParamStore,
    state: &mut MomentumState,
    net: &NetConfig,
    weights: &LossWeights,
    cfg: &OptConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let sg = build_step_graph(batch, store, net, weights, rng)?;
    let mut rep = report(&sg, weights)?;
    let proto_grads = collect(&sg.graph.backward(sg.proto)?, &sg.bound);
    rep.grad_norm_proto = group_norm(store, &proto_grads, ParamGroup::Prototype);

    if cfg.strict_alternate {
        apply_group(store, state, &proto_grads, ParamGroup::Prototype, cfg)?;
        let sg2 = build_step_graph(batch, store, net, weights, rng)?;
        let main_grads = collect(&sg2.graph.backward(sg2.main)?, &sg2.bound);
        rep.grad_norm_main = group_norm(store, &main_grads, ParamGroup::Main);
        apply_group(store, state, &main_grads, ParamGroup::Main, cfg)?;
    } else {
        let main_grads = collect(&sg.graph.backward(sg.main)?, &sg.bound);
        rep.grad_norm_main = group_norm(store, &main_grads, ParamGroup::Main);
        // validate both before mutating either group
        for (e, (gm, gp)) in store.entries().iter().zip(main_grads.iter().zip(&proto_grads)) {
            let g = if e.group == ParamGroup::Main { gm } else { gp };
            if !g.is_finite() {
                return Err(MetfaError::Numeric(format!("non-finite gradient for {}", e.name)));
            }
        }
        apply_group(store, state, &main_grads, ParamGroup::Main, cfg)?;
        apply_group(store, state, &proto_grads, ParamGroup::Prototype, cfg)?;
    }
    Ok(rep)
}

/// Per-epoch record in a manifest. Epoch 0 holds the metrics before any
/// update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each loss over the epoch's steps.
    pub losses: LossValues,
    pub contributions: LossValues,
    pub main_objective: f64,
    pub proto_objective: f64,
    pub metrics: DomainMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Reproducible record of one run. Wall time is kept out of the manifest
/// so that identical runs produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config: RunConfig,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub history: Vec<EpochRecord>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_metrics(&self) -> Option<&DomainMetrics> {
        self.history.last().map(|r| &r.metrics)
    }
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub store: ParamStore,
    pub data: DomainData,
    /// The error that stopped a failed run.
    pub error: Option<MetfaError>,
    pub wall_time_secs: f64,
}

fn mean_of(reports: &[StepReport]) -> (LossValues, LossValues, f64, f64) {
    let n = reports.len().max(1) as f64;
    let mut l = LossValues::default();
    let mut c = LossValues::default();
    for t in LossTerm::ALL {
        l.set(t, reports.iter().map(|r| r.losses.get(t)).sum::<f64>() / n);
        c.set(t, reports.iter().map(|r| r.contributions.get(t)).sum::<f64>() / n);
    }
    let main = reports.iter().map(|r| r.main_objective).sum::<f64>() / n;
    let proto = reports.iter().map(|r| r.proto_objective).sum::<f64>() / n;
    (l, c, main, proto)
}

/// Generates the data described by `cfg.shift` and trains on it.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_pair(&cfg.shift)?;
    train_on(cfg, data)
}

/// Trains on already generated data. Target labels in `data` are only
/// consulted by the evaluation module when metrics are recorded.
pub fn train_on(cfg: &RunConfig, data: DomainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let weights = cfg.effective_weights();
    let mut store = ParamStore::init(&cfg.net, cfg.seed)?;
    let mut state = MomentumState::zeros(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps = cfg.opt.steps_for(data.source_train.x.rows(), cfg.net.num_classes);

    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        steps_per_epoch: steps,
        status: RunStatus::Completed,
        failure: None,
        history: vec![EpochRecord {
            epoch: 0,
            losses: LossValues::default(),
            contributions: LossValues::default(),
            main_objective: 0.0,
            proto_objective: 0.0,
            metrics: evaluate(&store, &cfg.net, &data)?,
        }],
    };

    let mut error = None;
    'epochs: for epoch in 1..=cfg.opt.epochs {
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = sample_batch(&data, &mut rng)
                .and_then(|b| train_step(&b, &mut store, &mut state, &cfg.net, &weights, &cfg.opt, &mut rng));
            match step {
                Ok(r) => reports.push(r),
                Err(e) => {
                    log::error!("epoch {epoch}: {e}");
                    manifest.status = RunStatus::Failed;
                    manifest.failure = Some(format!("epoch {epoch}: {e}"));
                    error = Some(e);
                    break 'epochs;
                }
            }
        }
        let (losses, contributions, main_objective, proto_objective) = mean_of(&reports);
        let metrics = evaluate(&store, &cfg.net, &data)?;
        log::debug!(
            "epoch {epoch}: main {main_objective:.4} source F1 {:.4} target F1 {:.4}",
            metrics.source.f1,
            metrics.target.f1
        );
        manifest.history.push(EpochRecord { epoch, losses, contributions, main_objective, proto_objective, metrics });
    }

    Ok(TrainOutcome { manifest, store, data, error, wall_time_secs: started.elapsed().as_secs_f64() })
}
