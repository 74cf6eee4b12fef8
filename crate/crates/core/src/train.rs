//! Optimization: SGD with momentum and weight decay, the Kolen-Pollack step,
//! the cosine schedule, dropout masks, the alignment metric and the epoch
//! loop with its CSV metric log.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, AugmentOptions, Dataset};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::estimators::{self, EstimatorKind};
use crate::model::{Connection, GradientEstimate, LayerGeom, Network, ParamSet, Parameters};
use crate::oracles;
use crate::tensor::Tensor;

/// How the parameter update direction is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GradientMethod {
    Ep(EstimatorKind),
    /// Negated loss gradient from backpropagation through the free phase.
    Bptt,
}

impl FromStr for GradientMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "bptt" {
            Ok(GradientMethod::Bptt)
        } else {
            s.parse().map(GradientMethod::Ep)
        }
    }
}

impl TryFrom<String> for GradientMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GradientMethod> for String {
    fn from(m: GradientMethod) -> String {
        m.to_string()
    }
}

impl fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientMethod::Ep(k) => write!(f, "{k}"),
            GradientMethod::Bptt => f.write_str("bptt"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::invalid(
                "precision",
                format!("expected f32 or f64, got `{s}`"),
            )),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Free-phase steps `T`.
    pub free_steps: usize,
    /// Steps of each nudged phase `K`.
    pub nudged_steps: usize,
    pub beta: f64,
    pub estimator: GradientMethod,
    /// One initial learning rate per parameter group: one per layer, then
    /// one for the readout when present.
    pub learning_rates: Vec<f64>,
    pub final_learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Apply weight decay to biases as well.
    #[serde(default = "default_true")]
    pub bias_weight_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub cosine_decay_epochs: usize,
    /// Dropout probability for `dropout_layer`.
    #[serde(default)]
    pub dropout: f64,
    /// 1-based layer that receives dropout; defaults to the last conv layer.
    #[serde(default)]
    pub dropout_layer: Option<usize>,
    #[serde(default)]
    pub augment: AugmentOptions,
    #[serde(default)]
    pub seed: u64,
    /// Multiply layer estimates by the activation slope so that they
    /// approach the loss gradient. When off, updates use the raw phase
    /// differences (twice as large with the default activation).
    #[serde(default = "default_true")]
    pub slope_normalization: bool,
    #[serde(default)]
    pub precision: Precision,
    /// Write a checkpoint every this many epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Hyperparams {
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.free_steps == 0 {
            return Err(Error::config("free_steps", "must be at least 1"));
        }
        if self.nudged_steps == 0 {
            return Err(Error::config("nudged_steps", "must be at least 1"));
        }
        if self.beta == 0.0 || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be finite and nonzero"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if let Some(l) = self.dropout_layer {
            if l == 0 || l > net.num_layers() {
                return Err(Error::config(
                    "dropout_layer",
                    format!("must lie in 1..={}", net.num_layers()),
                ));
            }
        }
        let groups = net.num_layers()
            + usize::from(net.arch().head == crate::model::LossHead::SoftmaxReadout);
        if self.learning_rates.len() != groups {
            return Err(Error::config(
                "learning_rates",
                format!(
                    "expected {groups} entries, got {}",
                    self.learning_rates.len()
                ),
            ));
        }
        if self
            .learning_rates
            .iter()
            .any(|&l| !(l >= 0.0 && l.is_finite()))
            || self.final_learning_rate.is_nan()
            || self.final_learning_rate < 0.0
        {
            return Err(Error::config(
                "learning_rates",
                "must be finite and nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and nonnegative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.cosine_decay_epochs == 0 {
            return Err(Error::config("cosine_decay_epochs", "must be at least 1"));
        }
        if let GradientMethod::Ep(kind) = self.estimator {
            if kind.required_connection() != net.connection() {
                return Err(Error::config(
                    "estimator",
                    format!("{kind} needs {:?} connections", kind.required_connection()),
                ));
            }
            if kind == EstimatorKind::KpVfSym {
                for &lr in &self.learning_rates {
                    if (1.0 - lr * self.weight_decay).abs() >= 1.0 {
                        return Err(Error::config(
                            "weight_decay",
                            "Kolen-Pollack needs |1 - lr * weight_decay| < 1 for every group",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// 0-based layer receiving dropout, if dropout is on.
    fn dropout_target(&self, net: &Network) -> Option<usize> {
        if self.dropout == 0.0 {
            return None;
        }
        Some(match self.dropout_layer {
            Some(l) => l - 1,
            None => net
                .geometry()
                .iter()
                .rposition(LayerGeom::is_conv)
                .unwrap_or(net.num_layers() - 1),
        })
    }
}

/// `final + (initial - final)(1 + cos(π min(epoch, decay) / decay)) / 2`.
pub fn cosine_lr(initial: f64, final_lr: f64, epoch: usize, decay_epochs: usize) -> Result<f64> {
    if decay_epochs == 0 {
        return Err(Error::invalid("cosine_lr", "decay epochs must be positive"));
    }
    let progress = epoch.min(decay_epochs) as f64 / decay_epochs as f64;
    Ok(final_lr + 0.5 * (initial - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: ParamSet,
    pub epoch: usize,
    pub learning_rates: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &Parameters, learning_rates: &[f64]) -> Self {
        Self {
            momentum: ParamSet::zeros_like(params),
            epoch: 0,
            learning_rates: learning_rates.to_vec(),
        }
    }

    /// Moves the schedule to `epoch`.
    pub fn set_epoch(&mut self, hp: &Hyperparams, epoch: usize) -> Result<()> {
        self.epoch = epoch;
        self.learning_rates = hp
            .learning_rates
            .iter()
            .map(|&lr| cosine_lr(lr, hp.final_learning_rate, epoch, hp.cosine_decay_epochs))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

fn check_update(
    params: &Parameters,
    est: &GradientEstimate,
    lrs: &[f64],
    op: &'static str,
) -> Result<()> {
    params.check_congruent(est, op)?;
    if !est.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{op}: gradient estimate"),
        });
    }
    if lrs.len() != params.group_count() {
        return Err(Error::shape(op, params.group_count(), lrs.len()));
    }
    Ok(())
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

/// Ascent with momentum: `v ← μ v + (Δ − λ θ)`, `θ ← θ + η v`, with `η` per
/// parameter group.
pub fn sgd_step(
    params: &mut Parameters,
    est: &GradientEstimate,
    opt: &mut OptimizerState,
    momentum: f64,
    weight_decay: f64,
    bias_weight_decay: bool,
) -> Result<()> {
    check_update(params, est, &opt.learning_rates, "sgd_step")?;
    opt.momentum.check_congruent(params, "sgd_step")?;
    let groups = params.groups();
    let lrs = opt.learning_rates.clone();
    let named = params.named_mut();
    for (((name, theta), delta), (v, g)) in named
        .into_iter()
        .zip(est.tensors())
        .zip(opt.momentum.tensors_mut().into_iter().zip(groups))
    {
        let lambda = if is_bias(&name) && !bias_weight_decay {
            0.0
        } else {
            weight_decay
        };
        let eta = lrs[g];
        for ((t, d), m) in theta
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .zip(v.data_mut())
        {
            *m = momentum * *m + (d - lambda * *t);
            *t += eta * *m;
        }
    }
    Ok(())
}

/// Literal Kolen-Pollack update `θ ← θ + η (Δ − λ θ)` applied to every
/// tensor, for estimates whose forward and feedback entries are shared.
pub fn kp_step(
    params: &mut Parameters,
    est: &GradientEstimate,
    learning_rates: &[f64],
    weight_decay: f64,
) -> Result<()> {
    check_update(params, est, learning_rates, "kp_step")?;
    if params.layers.iter().all(|l| l.backward.is_none()) {
        return Err(Error::ModeMismatch {
            op: "kp_step",
            required: "unidirectional",
        });
    }
    for l in &est.layers {
        if let Some(b) = &l.backward {
            if b != &l.weight {
                return Err(Error::invalid(
                    "kp_step",
                    "forward and feedback estimates must be shared",
                ));
            }
        }
    }
    let groups = params.groups();
    for ((theta, delta), g) in params
        .tensors_mut()
        .into_iter()
        .zip(est.tensors())
        .zip(groups)
    {
        let eta = learning_rates[g];
        for (t, d) in theta.data_mut().iter_mut().zip(delta.data()) {
            *t += eta * (d - weight_decay * *t);
        }
    }
    Ok(())
}

/// Entries `0` with probability `p`, otherwise `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(
            "dropout_mask",
            format!("p = {p} outside [0, 1)"),
        ));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(shape, |_| {
        if p > 0.0 && rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Angle in degrees between two weight tensors viewed as vectors.
pub fn alignment_angle(wf: &Tensor, wb: &Tensor) -> Result<f64> {
    let dot = wf.dot(wb)?;
    let (nf, nb) = (wf.norm(), wb.norm());
    if nf == 0.0 || nb == 0.0 {
        return Err(Error::invalid("alignment_angle", "weights must be nonzero"));
    }
    Ok((dot / (nf * nb)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Alignment angle of every layer with feedback weights, `(layer, degrees)`
/// with 1-based layers.
pub fn alignment_angles(params: &Parameters) -> Result<Vec<(usize, f64)>> {
    params
        .layers
        .iter()
        .enumerate()
        .filter_map(|(n, l)| {
            l.backward
                .as_ref()
                .map(|b| alignment_angle(&l.weight, b).map(|a| (n + 1, a)))
        })
        .collect()
}

/// One-hot rows for the given labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (b, &l) in labels.iter().enumerate() {
        t.sample_mut(b)[l] = 1.0;
    }
    t
}

/// Classification error and mean loss over a dataset after a free phase of
/// `free_steps`.
pub fn evaluate(
    net: &Network,
    params: &Parameters,
    data: &Dataset,
    free_steps: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut wrong = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let y = one_hot(&labels, net.classes());
        let dynamics = Dynamics::new(net, params, &x)?;
        let state = dynamics.free(free_steps)?.state;
        let pred = net.predict(state.top(), params.readout.as_ref())?;
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
        loss += net
            .loss(state.top(), &y, params.readout.as_ref())?
            .iter()
            .sum::<f64>();
    }
    Ok((wrong as f64 / n as f64, loss / n as f64))
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    pub residual_free: f64,
    pub residual_pos: f64,
    pub residual_neg: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub train_loss: f64,
    pub learning_rates: Vec<f64>,
    /// Alignment angle per layer with feedback weights.
    pub angles: Vec<(usize, f64)>,
}

impl EpochMetrics {
    pub fn csv_header(&self) -> String {
        let mut h = vec![
            "epoch".to_string(),
            "iter".into(),
            "phase_residual_free".into(),
            "phase_residual_pos".into(),
            "phase_residual_neg".into(),
            "train_err".into(),
            "test_err".into(),
            "train_loss".into(),
        ];
        h.extend((0..self.learning_rates.len()).map(|i| format!("lr_{i}")));
        h.extend(self.angles.iter().map(|(n, _)| format!("angle_layer_{n}")));
        h.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut r = vec![
            self.epoch.to_string(),
            self.iter.to_string(),
            format!("{:e}", self.residual_free),
            format!("{:e}", self.residual_pos),
            format!("{:e}", self.residual_neg),
            format!("{:.6}", self.train_err),
            format!("{:.6}", self.test_err),
            format!("{:.9}", self.train_loss),
        ];
        r.extend(self.learning_rates.iter().map(|l| format!("{l:e}")));
        r.extend(self.angles.iter().map(|(_, a)| format!("{a:.6}")));
        r.join(",")
    }
}

/// What the observer sees after every optimizer step.
pub struct IterationEvent<'a> {
    pub epoch: usize,
    pub iter: usize,
    pub estimate: &'a GradientEstimate,
    pub params: &'a Parameters,
    /// Dropout masks shared by all phases of the iteration.
    pub masks: Option<&'a [Option<Tensor>]>,
    pub free_residual: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: Parameters,
    pub history: Vec<EpochMetrics>,
    /// Test error stayed within 1% of chance for the last three or more
    /// epochs.
    pub collapsed: bool,
}

/// Output locations of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.csv"))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("checkpoint-epoch{epoch:04}.eqp")))
    }

    pub fn final_checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("final.eqp"))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Trains `params` (or a fresh initialization from `hp.seed`) on `train`
/// and reports test error on `test` after every epoch.
pub fn train(
    net: &Network,
    hp: &Hyperparams,
    train_set: &Dataset,
    test_set: &Dataset,
    initial: Option<Parameters>,
    output: &RunOutput,
    mut observer: impl FnMut(&IterationEvent<'_>),
) -> Result<TrainReport> {
    hp.validate(net)?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut params = initial.unwrap_or_else(|| net.init_params(hp.seed));
    net.check_params(&params)?;
    let mut opt = OptimizerState::new(&params, &hp.learning_rates);
    let mut shuffle_rng = stream(hp.seed, 1);
    let mut sign_rng = stream(hp.seed, 2);
    let mut mask_rng = stream(hp.seed, 3);
    let mut aug_rng = stream(hp.seed, 4);
    let dropout_layer = hp.dropout_target(net);
    let slope = net.activation().slope();

    let mut log = match output.metrics_path() {
        Some(p) => {
            std::fs::create_dir_all(p.parent().expect("file in a directory"))
                .map_err(io_err(&p))?;
            Some((std::fs::File::create(&p).map_err(io_err(&p))?, p))
        }
        None => None,
    };
    let mut history: Vec<EpochMetrics> = Vec::new();
    let chance_err = 1.0 - 1.0 / net.classes() as f64;
    let mut near_chance = 0usize;
    let mut iter = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hp.epochs {
        opt.set_epoch(hp, epoch)?;
        order.shuffle(&mut shuffle_rng);
        let (mut res_free, mut res_pos, mut res_neg) = (0.0f64, 0.0f64, 0.0f64);
        let mut wrong = 0usize;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let (mut x, labels) = train_set.batch(chunk);
            if hp.augment.enabled() {
                x = augment(&x, &mut aug_rng, &hp.augment)?;
            }
            let y = one_hot(&labels, net.classes());
            let masks: Option<Vec<Option<Tensor>>> = match dropout_layer {
                Some(l) => {
                    let mut m = vec![None; net.num_layers()];
                    m[l] = Some(dropout_mask(
                        &net.geometry()[l].batched_shape(x.batch()),
                        hp.dropout,
                        &mut mask_rng,
                    )?);
                    Some(m)
                }
                None => None,
            };
            let mut dynamics = Dynamics::new(net, &params, &x)?;
            if let Some(m) = masks.as_deref() {
                dynamics = dynamics.with_masks(m)?;
            }
            let (mut est, free_state, free_residual) = match hp.estimator {
                GradientMethod::Ep(kind) => {
                    let (est, run) = estimators::estimate(
                        &dynamics,
                        &y,
                        kind,
                        hp.beta,
                        hp.free_steps,
                        hp.nudged_steps,
                        &mut sign_rng,
                    )?;
                    res_pos = res_pos.max(run.pos.residual);
                    if let Some(n) = &run.neg {
                        res_neg = res_neg.max(n.residual);
                    }
                    (est, run.free.state, run.free.residual)
                }
                GradientMethod::Bptt => {
                    let (report, traj) = dynamics.relax(
                        &dynamics.zero_state(),
                        hp.free_steps,
                        None,
                        crate::dynamics::RelaxOptions {
                            record: true,
                            tolerance: None,
                        },
                    )?;
                    let g = oracles::bptt(&dynamics, &traj.expect("recorded"), &y, false)?;
                    let mut est = g.total;
                    est.scale(-1.0);
                    (est, report.state, report.residual)
                }
            };
            res_free = res_free.max(free_residual);
            let top = dynamics.effective(&free_state)?;
            let pred = net.predict(top.top(), params.readout.as_ref())?;
            wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
            let batch_loss = net.mean_loss(top.top(), &y, params.readout.as_ref())?;
            loss_sum += batch_loss;
            batches += 1;
            drop(dynamics);
            if !hp.slope_normalization && matches!(hp.estimator, GradientMethod::Ep(_)) {
                let r = est.readout.take();
                est.scale(1.0 / slope);
                est.readout = r;
            }
            sgd_step(
                &mut params,
                &est,
                &mut opt,
                hp.momentum,
                hp.weight_decay,
                hp.bias_weight_decay,
            )?;
            if hp.precision == Precision::F32 {
                params.round_to_f32();
            }
            if !params.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("parameters after iteration {iter}"),
                });
            }
            iter += 1;
            observer(&IterationEvent {
                epoch,
                iter,
                estimate: &est,
                params: &params,
                masks: masks.as_deref(),
                free_residual,
                train_loss: batch_loss,
            });
        }
        let (test_err, _) = evaluate(net, &params, test_set, hp.free_steps, hp.batch_size)?;
        near_chance = if (test_err - chance_err).abs() <= 0.01 {
            near_chance + 1
        } else {
            0
        };
        let metrics = EpochMetrics {
            epoch,
            iter,
            residual_free: res_free,
            residual_pos: res_pos,
            residual_neg: res_neg,
            train_err: wrong as f64 / train_set.len() as f64,
            test_err,
            train_loss: loss_sum / batches as f64,
            learning_rates: opt.learning_rates.clone(),
            angles: alignment_angles(&params)?,
        };
        if let Some((f, p)) = log.as_mut() {
            if epoch == 0 {
                writeln!(f, "{}", metrics.csv_header()).map_err(io_err(p))?;
            }
            writeln!(f, "{}", metrics.csv_row()).map_err(io_err(p))?;
            f.flush().map_err(io_err(p))?;
        }
        history.push(metrics);
        let last = epoch + 1 == hp.epochs;
        if hp.checkpoint_every > 0 && (epoch + 1) % hp.checkpoint_every == 0 {
            if let Some(p) = output.checkpoint_path(epoch + 1) {
                Checkpoint::new(
                    net.arch().clone(),
                    hp.clone(),
                    params.clone(),
                    train_set.norm.clone(),
                    epoch + 1,
                )
                .save(&p)?;
            }
        }
        if last {
            if let Some(p) = output.final_checkpoint_path() {
                Checkpoint::new(
                    net.arch().clone(),
                    hp.clone(),
                    params.clone(),
                    train_set.norm.clone(),
                    epoch + 1,
                )
                .save(&p)?;
            }
        }
    }
    Ok(TrainReport {
        params,
        history,
        collapsed: near_chance >= 3,
    })
}

/// Requires unidirectional mode for alignment tracking.
pub fn require_feedback(net: &Network) -> Result<()> {
    if net.connection() != Connection::Unidirectional {
        return Err(Error::ModeMismatch {
            op: "alignment",
            required: "unidirectional",
        });
    }
    Ok(())
}
