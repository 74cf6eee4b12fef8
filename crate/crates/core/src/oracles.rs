//! Reference gradients: backpropagation through the recorded free phase,
//! central finite differences of the steady-state loss, and comparisons of
//! the estimators against them.
//!
//! Oracles return loss gradients (descent convention). Comparison helpers
//! negate them before measuring distances to ascent-convention estimates.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{Dynamics, Nudge, RelaxOptions, Trajectory};
use crate::error::{Error, Result};
use crate::estimators::{dphi_dtheta, EstimatorContext};
use crate::model::{
    Connection, GradientEstimate, LayerGeom, Network, NetworkState, ParamSet, Parameters,
};
use crate::ops::{self, PoolIndices};
use crate::tensor::Tensor;

/// Loss gradient from reverse accumulation through a recorded trajectory.
#[derive(Debug, Clone)]
pub struct BpttGradient {
    /// `∂L/∂θ`, readout included.
    pub total: GradientEstimate,
    /// `per_step[t]` is the contribution of the step `s_t -> s_{t+1}`
    /// (readout entry zero). Empty unless requested.
    pub per_step: Vec<GradientEstimate>,
}

impl BpttGradient {
    /// Sum of the contributions of the last `t` steps.
    pub fn truncated(&self, t: usize) -> Result<GradientEstimate> {
        let steps = self.per_step.len();
        if t > steps {
            return Err(Error::invalid(
                "truncated",
                format!("t = {t} exceeds {steps} recorded steps"),
            ));
        }
        let mut acc = ParamSet::zeros_like(&self.total);
        acc.readout = acc.readout.map(|r| Tensor::zeros_like(&r));
        for g in &self.per_step[steps - t..] {
            acc.axpy(1.0, g)?;
        }
        Ok(acc)
    }
}

/// Adjoint of the feedback term `feedback(n, w, s^n, ind)` with respect to
/// `s^n`, applied to `a` (shaped like layer `n - 1`).
fn feedback_adjoint(
    net: &Network,
    n: usize,
    w: &Tensor,
    a: &Tensor,
    ind: Option<&PoolIndices>,
) -> Result<Tensor> {
    match net.geometry()[n] {
        LayerGeom::Conv { padding, .. } => {
            let y = ops::conv2d(w, a, None, padding)?;
            match ind {
                Some(ind) => ops::pool_at(&y, ind),
                None => Ok(y),
            }
        }
        LayerGeom::Fc { .. } => ops::linear(&ops::flatten(a)?, w, None),
    }
}

/// Gradient of the mean loss at the last state of a free trajectory with
/// respect to every parameter, treating the recorded pooling offsets as
/// constants. With `keep_steps` the per-step contributions are returned too.
pub fn bptt(
    dynamics: &Dynamics<'_>,
    traj: &Trajectory,
    y: &Tensor,
    keep_steps: bool,
) -> Result<BpttGradient> {
    let net = dynamics.network();
    let params = dynamics.params();
    let x = dynamics.input();
    if dynamics.masks().is_some() {
        return Err(Error::invalid("bptt", "dropout masks are not supported"));
    }
    if traj.steps() == 0 || traj.states.len() != traj.steps() + 1 {
        return Err(Error::invalid("bptt", "missing or malformed trajectory"));
    }
    let layers = net.num_layers();
    let act = net.activation();
    let batch = x.batch() as f64;
    let top = traj.last().top();
    let w_out = params.readout.as_ref();

    let mut total = ParamSet::zeros_like(params);
    if let Some(w) = w_out {
        let err = net.output(top, Some(w))?.sub(y)?;
        let mut g = ops::outer_sum(&err, &ops::flatten(top)?)?;
        g.scale_inplace(1.0 / batch);
        total.readout = Some(g);
    }
    let mut adj: Vec<Tensor> = traj.last().layers.iter().map(Tensor::zeros_like).collect();
    let mut g_top = net.loss_grad(top, y, w_out)?;
    g_top.scale_inplace(1.0 / batch);
    adj[layers - 1] = g_top;

    let mut per_step = Vec::with_capacity(if keep_steps { traj.steps() } else { 0 });
    for t in (0..traj.steps()).rev() {
        let prev = &traj.states[t];
        let next = &traj.states[t + 1];
        let ind = &traj.indices[t];
        let a: Vec<Tensor> = adj
            .iter()
            .zip(&next.layers)
            .map(|(g, s)| g.zip_map(s, |g, s| g * act.deriv_from_output(s)))
            .collect::<Result<_>>()?;
        let mut step = ParamSet::zeros_like(params);
        step.readout = step.readout.map(|r| Tensor::zeros_like(&r));
        let mut new_adj: Vec<Tensor> = prev.layers.iter().map(Tensor::zeros_like).collect();
        for n in 0..layers {
            let w = &params.layers[n].weight;
            let pre = if n == 0 { x } else { &prev.layers[n - 1] };
            let (dw, db) = net.synapse_grad(n, w, &a[n], pre, ind.forward[n].as_ref())?;
            step.layers[n].weight.add_assign(&dw)?;
            step.layers[n].bias.add_assign(&db)?;
            if n > 0 {
                new_adj[n - 1].add_assign(&net.feedback(
                    n,
                    w,
                    &a[n],
                    ind.forward[n].as_ref(),
                )?)?;
                // feedback from layer n into layer n - 1
                let wb = net.feedback_weight(params, n);
                let fb_ind = ind.feedback[n].as_ref();
                new_adj[n].add_assign(&feedback_adjoint(net, n, wb, &a[n - 1], fb_ind)?)?;
                let (dwb, _) = net.synapse_grad(n, wb, &prev.layers[n], &a[n - 1], fb_ind)?;
                match net.connection() {
                    Connection::Bidirectional => step.layers[n].weight.add_assign(&dwb)?,
                    Connection::Unidirectional => step.layers[n]
                        .backward
                        .as_mut()
                        .expect("unidirectional layers above the first have feedback weights")
                        .add_assign(&dwb)?,
                }
            }
        }
        total.axpy(1.0, &step)?;
        if keep_steps {
            per_step.push(step);
        }
        adj = new_adj;
    }
    per_step.reverse();
    Ok(BpttGradient { total, per_step })
}

/// Records a free phase of `steps` from zero and backpropagates through it.
pub fn bptt_gradient(
    dynamics: &Dynamics<'_>,
    y: &Tensor,
    steps: usize,
    keep_steps: bool,
) -> Result<BpttGradient> {
    let (_, traj) = dynamics.relax(
        &dynamics.zero_state(),
        steps,
        None,
        RelaxOptions {
            record: true,
            tolerance: None,
        },
    )?;
    bptt(dynamics, &traj.expect("recorded"), y, keep_steps)
}

/// Mean loss after a free relaxation of `steps` from zero.
fn steady_loss(
    net: &Network,
    params: &Parameters,
    x: &Tensor,
    y: &Tensor,
    steps: usize,
    tolerance: f64,
) -> Result<f64> {
    let dynamics = Dynamics::new(net, params, x)?;
    let report = dynamics.free(steps)?;
    if report.residual > tolerance {
        return Err(Error::NotConverged {
            residual: report.residual,
            steps,
            tolerance,
        });
    }
    net.mean_loss(report.state.top(), y, params.readout.as_ref())
}

/// Central finite differences of the steady-state loss. Every perturbation
/// re-relaxes from zero for `steps`; a final residual above `tolerance`
/// is an error.
pub fn finite_diff_loss_grad(
    net: &Network,
    params: &Parameters,
    x: &Tensor,
    y: &Tensor,
    steps: usize,
    eps: f64,
    tolerance: f64,
) -> Result<GradientEstimate> {
    if eps <= 0.0 {
        return Err(Error::invalid(
            "finite_diff_loss_grad",
            "epsilon must be positive",
        ));
    }
    steady_loss(net, params, x, y, steps, tolerance)?;
    let mut grad = ParamSet::zeros_like(params);
    let mut probe = params.clone();
    let count = params.tensors().len();
    for ti in 0..count {
        let len = params.tensors()[ti].len();
        for k in 0..len {
            let orig = params.tensors()[ti].data()[k];
            probe.tensors_mut()[ti].data_mut()[k] = orig + eps;
            let lp = steady_loss(net, &probe, x, y, steps, tolerance)?;
            probe.tensors_mut()[ti].data_mut()[k] = orig - eps;
            let lm = steady_loss(net, &probe, x, y, steps, tolerance)?;
            probe.tensors_mut()[ti].data_mut()[k] = orig;
            grad.tensors_mut()[ti].data_mut()[k] = (lp - lm) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Relative distance `|a - b| / |b|` over all tensors.
pub fn relative_error(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let mut diff = a.clone();
    diff.axpy(-1.0, b)?;
    Ok(diff.norm() / b.norm().max(f64::MIN_POSITIVE))
}

/// Largest entrywise `|a - b| / max(|b|, floor)`.
pub fn max_relative_deviation(a: &ParamSet, b: &ParamSet, floor: f64) -> Result<f64> {
    a.check_congruent(b, "max_relative_deviation")?;
    let mut worst: f64 = 0.0;
    for (ta, tb) in a.tensors().into_iter().zip(b.tensors()) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            worst = worst.max((x - y).abs() / y.abs().max(floor));
        }
    }
    Ok(worst)
}

/// Cosine similarity of two tensors viewed as flat vectors (0 when either is
/// zero).
pub fn cosine(a: &[&Tensor], b: &[&Tensor]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Relaxation budget shared by the comparison helpers.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    pub free_steps: usize,
    pub nudged_steps: usize,
    /// Residual tolerance for the finite-difference relaxations.
    pub tolerance: f64,
    pub eps: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            free_steps: 60,
            nudged_steps: 15,
            tolerance: 1e-9,
            eps: 1e-5,
        }
    }
}

/// Estimates at one nudging strength next to the finite-difference gradient.
#[derive(Debug, Clone)]
pub struct EstimatorCheck {
    pub beta: f64,
    pub one_sided: GradientEstimate,
    pub symmetric: GradientEstimate,
    /// `-∂L*/∂θ` from finite differences.
    pub target: GradientEstimate,
    /// `|symmetric - target| / |target|`
    pub symmetric_error: f64,
    /// `|one_sided - target| / |target|`
    pub one_sided_error: f64,
    /// Largest entrywise relative deviation of the symmetric estimate.
    pub max_relative_deviation: f64,
}

fn neg(g: &GradientEstimate) -> GradientEstimate {
    let mut g = g.clone();
    g.scale(-1.0);
    g
}

/// Symmetric and one-sided estimates at `beta` against `-∂L*/∂θ`. The
/// finite-difference target may be passed in to share it across a sweep.
pub fn theorem1_check(
    net: &Network,
    params: &Parameters,
    x: &Tensor,
    y: &Tensor,
    beta: f64,
    budget: Budget,
    target: Option<&GradientEstimate>,
) -> Result<EstimatorCheck> {
    if net.connection() != Connection::Bidirectional {
        return Err(Error::ModeMismatch {
            op: "theorem1_check",
            required: "bidirectional",
        });
    }
    let target = match target {
        Some(t) => t.clone(),
        None => neg(&finite_diff_loss_grad(
            net,
            params,
            x,
            y,
            budget.free_steps,
            budget.eps,
            budget.tolerance,
        )?),
    };
    let dynamics = Dynamics::new(net, params, x)?;
    let free = dynamics.free(budget.free_steps)?;
    let pos = dynamics.run(
        &free.state,
        budget.nudged_steps,
        Some(Nudge { beta, target: y }),
    )?;
    let negp = dynamics.run(
        &free.state,
        budget.nudged_steps,
        Some(Nudge {
            beta: -beta,
            target: y,
        }),
    )?;
    let ctx = EstimatorContext::from_dynamics(&dynamics, y);
    let one_sided = crate::estimators::estimate_one_sided(&ctx, &free.state, &pos.state, beta)?;
    let symmetric = crate::estimators::estimate_symmetric(&ctx, &pos.state, &negp.state, beta)?;
    Ok(EstimatorCheck {
        beta,
        symmetric_error: relative_error(&symmetric, &target)?,
        one_sided_error: relative_error(&one_sided, &target)?,
        max_relative_deviation: max_relative_deviation(
            &symmetric,
            &target,
            1e-3 * target.max_abs(),
        )?,
        one_sided,
        symmetric,
        target,
    })
}

/// One row of a nudging-strength sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub one_sided_error: f64,
    pub symmetric_error: f64,
}

/// Estimator errors over a list of nudging strengths, sharing one
/// finite-difference target.
pub fn beta_sweep(
    net: &Network,
    params: &Parameters,
    x: &Tensor,
    y: &Tensor,
    betas: &[f64],
    budget: Budget,
) -> Result<Vec<SweepRow>> {
    let target = neg(&finite_diff_loss_grad(
        net,
        params,
        x,
        y,
        budget.free_steps,
        budget.eps,
        budget.tolerance,
    )?);
    betas
        .iter()
        .map(|&beta| {
            let r = theorem1_check(net, params, x, y, beta, budget, Some(&target))?;
            Ok(SweepRow {
                beta,
                one_sided_error: r.one_sided_error,
                symmetric_error: r.symmetric_error,
            })
        })
        .collect()
}

/// Ratios of consecutive errors in a sweep with halving nudging strengths:
/// `(one_sided, symmetric)` per halving.
pub fn halving_ratios(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    rows.windows(2)
        .map(|w| {
            (
                w[1].one_sided_error / w[0].one_sided_error,
                w[1].symmetric_error / w[0].symmetric_error,
            )
        })
        .collect()
}

/// Log-log slope of error against nudging strength, fitted by least squares.
pub fn order_slope(betas: &[f64], errors: &[f64]) -> f64 {
    let n = betas.len() as f64;
    let lx: Vec<f64> = betas.iter().map(|b| b.abs().ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Truncated estimates and truncated BPTT gradients over the nudged phase.
#[derive(Debug, Clone)]
pub struct TruncatedCurve {
    pub beta: f64,
    /// One-sided estimate with the nudged phase cut at step `t`, `t = 0..=K`.
    pub one_sided: Vec<GradientEstimate>,
    /// Symmetric estimate with both nudged phases cut at step `t`.
    pub symmetric: Vec<GradientEstimate>,
    /// `-∇BPTT(t)`: negated loss gradient summed over the last `t` steps.
    pub bptt: Vec<GradientEstimate>,
    /// Final residual of the free phase.
    pub free_residual: f64,
}

/// Curve summary for one layer and one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub t: usize,
    pub layer: usize,
    pub estimator: &'static str,
    pub norm: f64,
    pub cosine_vs_bptt: f64,
}

fn layer_parts(g: &GradientEstimate, n: usize) -> Vec<&Tensor> {
    let l = &g.layers[n];
    let mut v = vec![&l.weight, &l.bias];
    if let Some(b) = &l.backward {
        v.push(b);
    }
    v
}

fn norm_of(parts: &[&Tensor]) -> f64 {
    parts.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
}

impl TruncatedCurve {
    pub fn len(&self) -> usize {
        self.bptt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bptt.is_empty()
    }

    /// Per-layer cosine similarity between an estimator curve and the BPTT
    /// curve at step `t`. `symmetric` selects the curve.
    pub fn layer_cosines(&self, t: usize, symmetric: bool) -> Vec<f64> {
        let est = if symmetric {
            &self.symmetric[t]
        } else {
            &self.one_sided[t]
        };
        (0..est.layers.len())
            .map(|n| cosine(&layer_parts(est, n), &layer_parts(&self.bptt[t], n)))
            .collect()
    }

    pub fn rows(&self) -> Vec<CurveRow> {
        let mut rows = Vec::new();
        for t in 0..self.len() {
            let sym = self.layer_cosines(t, true);
            let one = self.layer_cosines(t, false);
            for n in 0..self.bptt[t].layers.len() {
                rows.push(CurveRow {
                    t,
                    layer: n + 1,
                    estimator: "bptt",
                    norm: norm_of(&layer_parts(&self.bptt[t], n)),
                    cosine_vs_bptt: 1.0,
                });
                rows.push(CurveRow {
                    t,
                    layer: n + 1,
                    estimator: "one-sided",
                    norm: norm_of(&layer_parts(&self.one_sided[t], n)),
                    cosine_vs_bptt: one[n],
                });
                rows.push(CurveRow {
                    t,
                    layer: n + 1,
                    estimator: "symmetric",
                    norm: norm_of(&layer_parts(&self.symmetric[t], n)),
                    cosine_vs_bptt: sym[n],
                });
            }
        }
        rows
    }

    /// Writes the curve as CSV: `t,layer,estimator,norm,cosine_vs_bptt`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "t,layer,estimator,norm,cosine_vs_bptt")?;
        for r in self.rows() {
            writeln!(
                w,
                "{},{},{},{:e},{:.12}",
                r.t, r.layer, r.estimator, r.norm, r.cosine_vs_bptt
            )?;
        }
        Ok(())
    }
}

fn strip_readout(mut g: GradientEstimate) -> GradientEstimate {
    g.readout = g.readout.map(|r| Tensor::zeros_like(&r));
    g
}

/// Truncated one-sided and symmetric estimates at every nudged step
/// `t = 0..=K` next to the negated truncated BPTT gradient of a free phase of
/// `T` steps. Readout entries are zero throughout.
pub fn gdu_curves(
    net: &Network,
    params: &Parameters,
    x: &Tensor,
    y: &Tensor,
    free_steps: usize,
    nudged_steps: usize,
    beta: f64,
) -> Result<TruncatedCurve> {
    if net.connection() != Connection::Bidirectional {
        return Err(Error::ModeMismatch {
            op: "gdu_curves",
            required: "bidirectional",
        });
    }
    if nudged_steps > free_steps {
        return Err(Error::invalid(
            "gdu_curves",
            "nudged steps cannot exceed free steps",
        ));
    }
    let dynamics = Dynamics::new(net, params, x)?;
    let record = RelaxOptions {
        record: true,
        tolerance: None,
    };
    let (free, free_traj) = dynamics.relax(&dynamics.zero_state(), free_steps, None, record)?;
    let grads = bptt(&dynamics, &free_traj.expect("recorded"), y, true)?;
    let (_, pos) = dynamics.relax(
        &free.state,
        nudged_steps,
        Some(Nudge { beta, target: y }),
        record,
    )?;
    let (_, negt) = dynamics.relax(
        &free.state,
        nudged_steps,
        Some(Nudge {
            beta: -beta,
            target: y,
        }),
        record,
    )?;
    let (pos, negt) = (pos.expect("recorded"), negt.expect("recorded"));
    let gain = net.activation().slope();
    let base = dphi_dtheta(net, x, &free.state, params)?;
    let dphi = |s: &NetworkState| dphi_dtheta(net, x, s, params);
    let mut curve = TruncatedCurve {
        beta,
        one_sided: Vec::with_capacity(nudged_steps + 1),
        symmetric: Vec::with_capacity(nudged_steps + 1),
        bptt: Vec::with_capacity(nudged_steps + 1),
        free_residual: free.residual,
    };
    for t in 0..=nudged_steps {
        let dp = dphi(&pos.states[t])?;
        let mut one = dp.clone();
        one.axpy(-1.0, &base)?;
        one.scale(gain / beta);
        let mut sym = dp;
        sym.axpy(-1.0, &dphi(&negt.states[t])?)?;
        sym.scale(gain / (2.0 * beta));
        curve.one_sided.push(strip_readout(one));
        curve.symmetric.push(strip_readout(sym));
        curve.bptt.push(strip_readout(neg(&grads.truncated(t)?)));
    }
    Ok(curve)
}
