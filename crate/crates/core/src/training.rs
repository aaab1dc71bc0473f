//! Adam, non-parametric and parametric training loops, the supervised
//! baseline, and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, GradCheckReport, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fem::{fem_solve_dirichlet, P2Space, PdeCoefficients};
use crate::model::{node_features, GraphContext, Mode, Model};
use crate::physics::{physics_loss, relative_l2, supervised_loss, ResidualSystem};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Physics,
    Supervised,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    1000
}
fn default_batch() -> usize {
    1
}
fn default_threshold() -> f64 {
    3e-3
}
fn default_patience() -> usize {
    2000
}
fn default_val_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stop once the best validation error is below this.
    #[serde(default = "default_threshold")]
    pub val_threshold: f64,
    /// Stop after this many epochs without a new best validation error.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: TrainMode,
    /// Validate every this many epochs (and at the last epoch).
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Sum of squared residual norms instead of norms.
    #[serde(default)]
    pub squared_loss: bool,
    /// Wall-clock cap in seconds.
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            val_threshold: default_threshold(),
            patience: default_patience(),
            seed: 0,
            mode: TrainMode::Physics,
            val_every: default_val_every(),
            squared_loss: false,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidArgument("validation cadence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "adam parameter count",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch {
                context: "adam gradient length",
                expected: p.len(),
                actual: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_rel_l2: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub stop_reason: String,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `epoch,loss,val_rel_l2,seconds`; epochs without validation leave the
    /// third column empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_rel_l2,seconds\n");
        for r in &self.records {
            let val = r.val_rel_l2.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.epoch, r.loss, val, r.seconds).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Single-instance training problem.
#[derive(Clone)]
pub struct Problem {
    pub ctx: GraphContext,
    pub system: Arc<ResidualSystem>,
    /// Nodal reference for validation.
    pub reference: Option<Vec<f64>>,
}

/// One parametric sample: source vector, its residual system, and an
/// optional reference solution on the training mesh.
#[derive(Clone)]
pub struct Sample {
    pub mu: Vec<f64>,
    pub coeffs: PdeCoefficients,
    pub system: Arc<ResidualSystem>,
    pub reference: Option<Vec<f64>>,
}

impl Sample {
    /// Shares the operator of `base`; the reference is the same-mesh FEM
    /// solution when `with_reference`.
    pub fn new(space: &P2Space, base: &ResidualSystem, mu: Vec<f64>, coeffs: PdeCoefficients, with_reference: bool) -> Result<Self> {
        let system = Arc::new(base.with_load(space, &coeffs)?);
        let reference = if with_reference {
            Some(fem_solve_dirichlet(space, &coeffs)?)
        } else {
            None
        };
        Ok(Self {
            mu,
            coeffs,
            system,
            reference,
        })
    }
}

struct Stopper {
    start: Instant,
    best: Option<(usize, f64)>,
}

impl Stopper {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            best: None,
        }
    }

    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    /// Validation epochs: every `val_every`, the last epoch, and whichever
    /// epoch hits the wall-clock cap.
    fn validates(&self, epoch: usize, cfg: &TrainConfig) -> bool {
        epoch.is_multiple_of(cfg.val_every) || epoch == cfg.max_epochs || cfg.max_seconds.is_some_and(|cap| self.elapsed() >= cap)
    }

    /// Returns true when `val` is a new best.
    fn observe(&mut self, epoch: usize, val: f64) -> bool {
        match self.best {
            Some((_, b)) if val >= b => false,
            _ => {
                self.best = Some((epoch, val));
                true
            }
        }
    }

    fn should_stop(&self, epoch: usize, cfg: &TrainConfig) -> Option<String> {
        if let Some((best_epoch, best)) = self.best {
            if best < cfg.val_threshold {
                return Some(format!("validation {best:.3e} below threshold"));
            }
            if epoch - best_epoch >= cfg.patience {
                return Some(format!("no improvement for {} epochs", epoch - best_epoch));
            }
        }
        if let Some(cap) = cfg.max_seconds {
            if self.elapsed() >= cap {
                return Some(format!("wall-clock cap {cap}s reached"));
            }
        }
        None
    }
}

fn numeric_failure(epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFiniteActivation { layer } => Error::NonFiniteLoss {
            epoch,
            detail: format!("non-finite activations in layer {layer}"),
        },
        Error::NonFinite { op } => Error::NonFiniteLoss {
            epoch,
            detail: format!("non-finite value from `{op}`"),
        },
        other => other,
    }
}

/// One optimizer step on `features` (stacked graphs, one per system).
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    ctx: &GraphContext,
    features: &Tensor,
    systems: &[Arc<ResidualSystem>],
    labels: Option<&[&[f64]]>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model
        .forward(&mut tape, ctx, features, Mode::Train)
        .map_err(|e| numeric_failure(epoch, e))?;
    let loss = match labels {
        Some(l) => supervised_loss(&mut tape, systems, pass.output, l),
        None => physics_loss(&mut tape, systems, pass.output, cfg.squared_loss),
    }
    .map_err(|e| numeric_failure(epoch, e))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            detail: format!("loss evaluated to {value}"),
        });
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = pass
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    adam_step(model.params_mut(), &grads, adam, cfg.learning_rate)?;
    model.update_running_stats(&pass.batch_stats);
    Ok(value)
}

/// Central-difference audit of the full physics-loss gradient (train-mode
/// forward, so batchnorm uses batch statistics).
pub fn gradient_audit(
    model: &Model,
    ctx: &GraphContext,
    features: &Tensor,
    systems: &[Arc<ResidualSystem>],
    h: f64,
) -> Result<GradCheckReport> {
    let systems: Vec<Arc<ResidualSystem>> = systems
        .iter()
        .map(|s| s.with_delta(model.delta()).map(Arc::new))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, ctx, features, Mode::Train)?;
    let loss = physics_loss(&mut tape, &systems, pass.output, false)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = pass
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    let mut probe = model.clone();
    finite_difference_check(model.params(), &grads, h, |params| {
        probe.params_mut().clone_from_slice(params);
        let mut tape = Tape::new();
        let pass = probe.forward(&mut tape, ctx, features, Mode::Train)?;
        let loss = physics_loss(&mut tape, &systems, pass.output, false)?;
        Ok(tape.value(loss).item())
    })
}

/// Physics-loss training on one PDE instance. Returns the model with the
/// best validation error seen (or the last model without a reference).
pub fn train_nonparametric(mut model: Model, problem: &Problem, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if model.config().input_width() != 2 {
        return Err(Error::InvalidArgument(format!(
            "non-parametric training needs 2 input features, architecture has {}",
            model.config().input_width()
        )));
    }
    let sys = problem.system.with_delta(model.delta())?;
    let systems = [Arc::new(sys)];
    let features = node_features(&problem.ctx.topo, &[])?;
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut stopper = Stopper::new();
    let labels_store;
    let labels = match cfg.mode {
        TrainMode::Physics => None,
        TrainMode::Supervised => {
            labels_store = problem
                .reference
                .clone()
                .ok_or_else(|| Error::InvalidArgument("supervised training needs a reference".into()))?;
            Some(vec![&labels_store[..]])
        }
    };
    history.stop_reason = "epoch budget exhausted".into();
    for epoch in 1..=cfg.max_epochs {
        let loss = train_step(&mut model, &mut adam, &problem.ctx, &features, &systems, labels.as_deref(), cfg, epoch)?;
        let mut val = None;
        if let Some(reference) = &problem.reference {
            if stopper.validates(epoch, cfg) {
                let u = predict_solution(&model, &problem.ctx, &systems[0], &features)?;
                let err = relative_l2(&u, reference)?;
                if stopper.observe(epoch, err) {
                    best = model.clone();
                }
                val = Some(err);
            }
        }
        history.records.push(EpochRecord {
            epoch,
            loss,
            val_rel_l2: val,
            seconds: stopper.elapsed(),
        });
        if let Some(reason) = stopper.should_stop(epoch, cfg) {
            history.stop_reason = reason;
            break;
        }
    }
    finish(model, best, stopper, history)
}

fn finish(last: Model, best: Model, stopper: Stopper, mut history: TrainHistory) -> Result<(Model, TrainHistory)> {
    match stopper.best {
        Some((epoch, val)) => {
            history.best_epoch = Some(epoch);
            history.best_val = Some(val);
            Ok((best, history))
        }
        None => Ok((last, history)),
    }
}

/// Eval-mode prediction of the full nodal solution for one graph.
pub fn predict_solution(model: &Model, ctx: &GraphContext, sys: &ResidualSystem, features: &Tensor) -> Result<Vec<f64>> {
    let out = model.predict(ctx, features)?;
    let sys = sys.with_delta(model.delta())?;
    sys.assemble_full_solution(&sys.interior_outputs(&out)?)
}

/// Batched eval-mode prediction of full nodal solutions.
pub fn predict_batch(model: &Model, ctx: &GraphContext, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let n = ctx.num_nodes();
    let mus: Vec<&[f64]> = samples.iter().map(|s| &s.mu[..]).collect();
    let out = model.predict(ctx, &node_features(&ctx.topo, &mus)?)?;
    samples
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let sys = s.system.with_delta(model.delta())?;
            sys.assemble_full_solution(&sys.interior_outputs(&out[b * n..(b + 1) * n])?)
        })
        .collect()
}

fn mean_validation(model: &Model, ctx: &GraphContext, val: &[Sample]) -> Result<Option<f64>> {
    if val.is_empty() || val.iter().any(|s| s.reference.is_none()) {
        return Ok(None);
    }
    let refs: Vec<&Sample> = val.iter().collect();
    let preds = predict_batch(model, ctx, &refs)?;
    let mut acc = 0.0;
    for (u, s) in preds.iter().zip(val) {
        acc += relative_l2(u, s.reference.as_ref().unwrap())?;
    }
    Ok(Some(acc / val.len() as f64))
}

/// Mini-batch training over parametric samples sharing one mesh. In
/// supervised mode each training sample needs a reference.
pub fn train_parametric(mut model: Model, ctx: &GraphContext, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("parametric training needs at least one sample"));
    }
    if model.config().input_width() != 3 {
        return Err(Error::InvalidArgument(format!(
            "parametric training needs 3 input features, architecture has {}",
            model.config().input_width()
        )));
    }
    if cfg.mode == TrainMode::Supervised && train.iter().any(|s| s.reference.is_none()) {
        return Err(Error::InvalidArgument("supervised training needs labeled samples".into()));
    }
    let systems: Vec<Arc<ResidualSystem>> = train
        .iter()
        .map(|s| s.system.with_delta(model.delta()).map(Arc::new))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut stopper = Stopper::new();
    history.stop_reason = "epoch budget exhausted".into();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mus: Vec<&[f64]> = chunk.iter().map(|&i| &train[i].mu[..]).collect();
            let features = node_features(&ctx.topo, &mus)?;
            let sys: Vec<_> = chunk.iter().map(|&i| systems[i].clone()).collect();
            let labels: Option<Vec<&[f64]>> = match cfg.mode {
                TrainMode::Physics => None,
                TrainMode::Supervised => Some(chunk.iter().map(|&i| &train[i].reference.as_ref().unwrap()[..]).collect()),
            };
            total += train_step(&mut model, &mut adam, ctx, &features, &sys, labels.as_deref(), cfg, epoch)?;
            batches += 1;
        }
        let mut val_err = None;
        if stopper.validates(epoch, cfg) {
            val_err = mean_validation(&model, ctx, val)?;
            if let Some(err) = val_err {
                if stopper.observe(epoch, err) {
                    best = model.clone();
                }
            }
        }
        history.records.push(EpochRecord {
            epoch,
            loss: total / batches as f64,
            val_rel_l2: val_err,
            seconds: stopper.elapsed(),
        });
        if let Some(reason) = stopper.should_stop(epoch, cfg) {
            history.stop_reason = reason;
            break;
        }
    }
    finish(model, best, stopper, history)
}

/// Supervised baseline: same network and optimizer, MSE against labels.
pub fn train_supervised(model: Model, ctx: &GraphContext, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let cfg = TrainConfig {
        mode: TrainMode::Supervised,
        ..cfg.clone()
    };
    train_parametric(model, ctx, train, val, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub per_sample: Vec<f64>,
    /// Mean single-sample inference wall-clock (forward plus assembly).
    pub infer_seconds: f64,
    /// Mean FEM solve wall-clock (assembly plus solve) on the same mesh.
    pub fem_seconds: f64,
}

impl Evaluation {
    /// FEM time over inference time.
    pub fn speedup(&self) -> f64 {
        self.fem_seconds / self.infer_seconds
    }
}

/// Per-sample relative L2 errors against each sample's reference, with
/// single-sample timing of the model and of the FEM oracle.
pub fn evaluate(model: &Model, ctx: &GraphContext, space: &P2Space, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("nothing to evaluate"));
    }
    if ctx.num_nodes() != space.num_nodes() || samples.iter().any(|s| s.system.num_nodes() != ctx.num_nodes()) {
        return Err(Error::InvalidArgument("samples do not match the model topology".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut infer = 0.0;
    let mut fem = 0.0;
    for s in samples {
        let t = Instant::now();
        let u = predict_batch(model, ctx, &[s])?.pop().unwrap();
        infer += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let u_fem = fem_solve_dirichlet(space, &s.coeffs)?;
        fem += t.elapsed().as_secs_f64();
        let reference = s.reference.as_ref().unwrap_or(&u_fem);
        per_sample.push(relative_l2(&u, reference)?);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        mean: per_sample.iter().sum::<f64>() / n,
        min: per_sample.iter().copied().fold(f64::INFINITY, f64::min),
        max: per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_sample,
        infer_seconds: infer / n,
        fem_seconds: fem / n,
    })
}
