//! Gradient estimators built from the endpoints of the free and nudged
//! phases. Every estimate follows the ascent convention (`θ += η Δ`) and is
//! averaged over the batch.
//!
//! The nudge enters the dynamics after the activation, whose slope on its
//! linear piece is `c`. Differences of `∂Φ/∂θ` between phases therefore
//! approach `-(1/c) ∂L*/∂θ` as the nudging strength vanishes. The estimators
//! multiply the layer components by `c` so that they approach the loss
//! gradient itself. The readout rule is a direct loss derivative and is
//! left as is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, Nudge, RelaxReport};
use crate::error::{Error, Result};
use crate::model::{
    Connection, GradientEstimate, LayerParams, Network, NetworkState, ParamSet, Parameters,
};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    OneSided,
    RandomSign,
    Symmetric,
    VfSym,
    KpVfSym,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::OneSided,
        EstimatorKind::RandomSign,
        EstimatorKind::Symmetric,
        EstimatorKind::VfSym,
        EstimatorKind::KpVfSym,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::OneSided => "one-sided",
            EstimatorKind::RandomSign => "random-sign",
            EstimatorKind::Symmetric => "symmetric",
            EstimatorKind::VfSym => "vf-sym",
            EstimatorKind::KpVfSym => "kp-vf-sym",
        }
    }

    /// Number of nudged phases per iteration.
    pub fn nudged_phases(self) -> usize {
        match self {
            EstimatorKind::OneSided | EstimatorKind::RandomSign => 1,
            _ => 2,
        }
    }

    pub fn required_connection(self) -> Connection {
        match self {
            EstimatorKind::VfSym | EstimatorKind::KpVfSym => Connection::Unidirectional,
            _ => Connection::Bidirectional,
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("estimator", format!("unknown estimator `{s}`")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which weight of a unidirectional layer a layer-wise derivative refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    Forward,
    Backward,
}

/// `+1` or `-1` with even probability.
pub fn draw_sign(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn require(net: &Network, op: &'static str, mode: Connection) -> Result<()> {
    if net.connection() != mode {
        return Err(Error::ModeMismatch {
            op,
            required: match mode {
                Connection::Bidirectional => "bidirectional",
                Connection::Unidirectional => "unidirectional",
            },
        });
    }
    Ok(())
}

fn require_beta(beta: f64, op: &'static str) -> Result<()> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::invalid(op, "beta must be finite and nonzero"));
    }
    Ok(())
}

fn zero_estimate(params: &Parameters) -> GradientEstimate {
    ParamSet::zeros_like(params)
}

/// Scales the layer tensors by `gain` and the readout by `readout_gain`.
fn scale_parts(est: &mut GradientEstimate, gain: f64, readout_gain: f64) {
    for l in &mut est.layers {
        l.weight.scale_inplace(gain);
        l.bias.scale_inplace(gain);
        if let Some(b) = &mut l.backward {
            b.scale_inplace(gain);
        }
    }
    if let Some(r) = &mut est.readout {
        r.scale_inplace(readout_gain);
    }
}

/// `∂Φ/∂θ` at `state`, batch-averaged. Pooling offsets come from a forward
/// evaluation at the given state. The readout entry is zero.
pub fn dphi_dtheta(
    net: &Network,
    x: &Tensor,
    state: &NetworkState,
    params: &Parameters,
) -> Result<GradientEstimate> {
    require(net, "dphi_dtheta", Connection::Bidirectional)?;
    net.check_state(state)?;
    let inv_batch = 1.0 / state.batch() as f64;
    let mut out = zero_estimate(params);
    for n in 0..net.num_layers() {
        let pre = if n == 0 { x } else { &state.layers[n - 1] };
        let w = &params.layers[n].weight;
        let (dw, db) = net.synapse_grad(n, w, &state.layers[n], pre, None)?;
        out.layers[n].weight = dw.scale(inv_batch);
        out.layers[n].bias = db.scale(inv_batch);
    }
    Ok(out)
}

/// Layer-wise derivative `∂Φ̃ⁿ/∂wⁿ` for one half of every layer, with the
/// postsynaptic activity taken from `post` and the presynaptic activity from
/// `pre`. Pooling offsets come from the selected weight applied to `pre`.
/// Components of the other half are zero. Batch-averaged.
pub fn vf_half(
    net: &Network,
    x: &Tensor,
    post: &NetworkState,
    pre: &NetworkState,
    params: &Parameters,
    which: Half,
) -> Result<GradientEstimate> {
    require(net, "vf_half", Connection::Unidirectional)?;
    net.check_state(post)?;
    net.check_state(pre)?;
    let inv_batch = 1.0 / post.batch() as f64;
    let mut out = zero_estimate(params);
    for n in 0..net.num_layers() {
        let input = if n == 0 { x } else { &pre.layers[n - 1] };
        match which {
            Half::Forward => {
                let (dw, db) =
                    net.synapse_grad(n, &params.layers[n].weight, &post.layers[n], input, None)?;
                out.layers[n].weight = dw.scale(inv_batch);
                out.layers[n].bias = db.scale(inv_batch);
            }
            Half::Backward => {
                if let Some(wb) = &params.layers[n].backward {
                    let (dw, _) = net.synapse_grad(n, wb, &post.layers[n], input, None)?;
                    out.layers[n].backward = Some(dw.scale(inv_batch));
                }
            }
        }
    }
    Ok(out)
}

/// Direct readout rule `-(ŷ - y) flatten(s_top)^T`, batch-averaged.
fn readout_rule(
    net: &Network,
    state: &NetworkState,
    y: &Tensor,
    params: &Parameters,
) -> Result<Option<Tensor>> {
    let Some(w_out) = &params.readout else {
        return Ok(None);
    };
    let top = ops::flatten(state.top())?;
    let err = net.output(state.top(), Some(w_out))?.sub(y)?;
    let mut g = ops::outer_sum(&err, &top)?;
    g.scale_inplace(-1.0 / top.batch() as f64);
    Ok(Some(g))
}

/// Everything an estimator needs besides the phase endpoints.
#[derive(Clone, Copy)]
pub struct EstimatorContext<'a> {
    pub net: &'a Network,
    pub params: &'a Parameters,
    pub x: &'a Tensor,
    pub y: &'a Tensor,
}

impl<'a> EstimatorContext<'a> {
    pub fn from_dynamics(dynamics: &'a Dynamics<'a>, y: &'a Tensor) -> Self {
        Self {
            net: dynamics.network(),
            params: dynamics.params(),
            x: dynamics.input(),
            y,
        }
    }

    fn gain(&self) -> f64 {
        self.net.activation().slope()
    }
}

/// `c (∂Φ/∂θ(s_β) − ∂Φ/∂θ(s_free)) / β`, readout `-(ŷ_β − y) s_βᵀ`.
pub fn estimate_one_sided(
    ctx: &EstimatorContext<'_>,
    free: &NetworkState,
    nudged: &NetworkState,
    beta: f64,
) -> Result<GradientEstimate> {
    require_beta(beta, "estimate_one_sided")?;
    let mut est = dphi_dtheta(ctx.net, ctx.x, nudged, ctx.params)?;
    est.axpy(-1.0, &dphi_dtheta(ctx.net, ctx.x, free, ctx.params)?)?;
    scale_parts(&mut est, ctx.gain() / beta, 1.0);
    est.readout = readout_rule(ctx.net, nudged, ctx.y, ctx.params)?;
    Ok(est)
}

/// `c (∂Φ/∂θ(s_β) − ∂Φ/∂θ(s_−β)) / 2β`, readout averaged over both phases.
pub fn estimate_symmetric(
    ctx: &EstimatorContext<'_>,
    pos: &NetworkState,
    neg: &NetworkState,
    beta: f64,
) -> Result<GradientEstimate> {
    require_beta(beta, "estimate_symmetric")?;
    let mut est = dphi_dtheta(ctx.net, ctx.x, pos, ctx.params)?;
    est.axpy(-1.0, &dphi_dtheta(ctx.net, ctx.x, neg, ctx.params)?)?;
    scale_parts(&mut est, ctx.gain() / (2.0 * beta), 1.0);
    est.readout = symmetric_readout(ctx, pos, neg)?;
    Ok(est)
}

fn symmetric_readout(
    ctx: &EstimatorContext<'_>,
    pos: &NetworkState,
    neg: &NetworkState,
) -> Result<Option<Tensor>> {
    match (
        readout_rule(ctx.net, pos, ctx.y, ctx.params)?,
        readout_rule(ctx.net, neg, ctx.y, ctx.params)?,
    ) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b)?;
            a.scale_inplace(0.5);
            Ok(Some(a))
        }
        _ => Ok(None),
    }
}

/// One-sided estimate at `sign * beta` where the sign is drawn from `rng`.
/// Runs the nudged phase from `free` for `steps` steps.
pub fn estimate_random_sign(
    dynamics: &Dynamics<'_>,
    y: &Tensor,
    free: &NetworkState,
    beta: f64,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<(GradientEstimate, f64)> {
    require_beta(beta, "estimate_random_sign")?;
    let signed = draw_sign(rng) * beta;
    let nudged = dynamics.run(
        free,
        steps,
        Some(Nudge {
            beta: signed,
            target: y,
        }),
    )?;
    let ctx = EstimatorContext::from_dynamics(dynamics, y);
    Ok((
        estimate_one_sided(&ctx, free, &nudged.state, signed)?,
        signed,
    ))
}

/// Symmetrized vector-field rule: forward weights contract the nudged
/// postsynaptic difference with free presynaptic activity; backward weights
/// contract free postsynaptic activity with the nudged presynaptic
/// difference. Pooling offsets come from the free state.
pub fn estimate_vf_sym(
    ctx: &EstimatorContext<'_>,
    free: &NetworkState,
    pos: &NetworkState,
    neg: &NetworkState,
    beta: f64,
) -> Result<GradientEstimate> {
    require(ctx.net, "estimate_vf_sym", Connection::Unidirectional)?;
    require_beta(beta, "estimate_vf_sym")?;
    let net = ctx.net;
    for s in [free, pos, neg] {
        net.check_state(s)?;
    }
    let inv_batch = 1.0 / free.batch() as f64;
    let scale = ctx.gain() * inv_batch / (2.0 * beta);
    let mut est = zero_estimate(ctx.params);
    for n in 0..net.num_layers() {
        let pre_free = if n == 0 { ctx.x } else { &free.layers[n - 1] };
        let l = &ctx.params.layers[n];
        let ind = net.pool_indices(n, &l.weight, pre_free)?;
        let post_diff = pos.layers[n].sub(&neg.layers[n])?;
        let (dw, db) = net.synapse_grad(n, &l.weight, &post_diff, pre_free, ind.as_ref())?;
        est.layers[n].weight = dw.scale(scale);
        est.layers[n].bias = db.scale(scale);
        if let Some(wb) = &l.backward {
            let ind = net.pool_indices(n, wb, pre_free)?;
            let pre_diff = pos.layers[n - 1].sub(&neg.layers[n - 1])?;
            let (dwb, _) = net.synapse_grad(n, wb, &free.layers[n], &pre_diff, ind.as_ref())?;
            est.layers[n].backward = Some(dwb.scale(scale));
        }
    }
    est.readout = symmetric_readout(ctx, pos, neg)?;
    Ok(est)
}

/// Kolen-Pollack vector-field estimate: for each layer the forward and
/// backward same-state differences, each evaluated with pooling offsets of
/// its own weight at each nudged endpoint, are averaged and assigned to both
/// weights. The first layer and the biases use the forward half.
pub fn estimate_kp_vf_sym(
    ctx: &EstimatorContext<'_>,
    pos: &NetworkState,
    neg: &NetworkState,
    beta: f64,
) -> Result<GradientEstimate> {
    require(ctx.net, "estimate_kp_vf_sym", Connection::Unidirectional)?;
    require_beta(beta, "estimate_kp_vf_sym")?;
    let scale = ctx.gain() / (2.0 * beta);
    let mut fwd = vf_half(ctx.net, ctx.x, pos, pos, ctx.params, Half::Forward)?;
    fwd.axpy(
        -1.0,
        &vf_half(ctx.net, ctx.x, neg, neg, ctx.params, Half::Forward)?,
    )?;
    let mut bwd = vf_half(ctx.net, ctx.x, pos, pos, ctx.params, Half::Backward)?;
    bwd.axpy(
        -1.0,
        &vf_half(ctx.net, ctx.x, neg, neg, ctx.params, Half::Backward)?,
    )?;
    let layers = fwd
        .layers
        .into_iter()
        .zip(bwd.layers)
        .map(|(f, b)| -> Result<LayerParams> {
            let (weight, backward) = match b.backward {
                Some(bw) => {
                    let mut shared = f.weight.add(&bw)?;
                    shared.scale_inplace(0.5 * scale);
                    (shared.clone(), Some(shared))
                }
                None => (f.weight.scale(scale), None),
            };
            Ok(LayerParams {
                weight,
                bias: f.bias.scale(scale),
                backward,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet {
        layers,
        readout: symmetric_readout(ctx, pos, neg)?,
    })
}

/// Endpoints of the phases of one estimator iteration.
#[derive(Debug, Clone)]
pub struct PhaseRun {
    pub free: RelaxReport,
    /// Nudged phase at `+beta` (or at the drawn sign for random-sign).
    pub pos: RelaxReport,
    /// Nudged phase at `-beta` for the three-phase estimators.
    pub neg: Option<RelaxReport>,
    /// Signed nudging strength of `pos`.
    pub beta_pos: f64,
}

/// Runs the free phase from zero for `free_steps`, then the nudged phases the
/// estimator needs, each for `nudged_steps` from the free endpoint.
pub fn run_phases(
    dynamics: &Dynamics<'_>,
    y: &Tensor,
    kind: EstimatorKind,
    beta: f64,
    free_steps: usize,
    nudged_steps: usize,
    rng: &mut impl Rng,
) -> Result<PhaseRun> {
    require_beta(beta, "run_phases")?;
    require(dynamics.network(), kind.name(), kind.required_connection())?;
    let free = dynamics.free(free_steps)?;
    let beta_pos = match kind {
        EstimatorKind::RandomSign => draw_sign(rng) * beta,
        _ => beta,
    };
    let pos = dynamics.run(
        &free.state,
        nudged_steps,
        Some(Nudge {
            beta: beta_pos,
            target: y,
        }),
    )?;
    let neg = if kind.nudged_phases() == 2 {
        Some(dynamics.run(
            &free.state,
            nudged_steps,
            Some(Nudge {
                beta: -beta,
                target: y,
            }),
        )?)
    } else {
        None
    };
    Ok(PhaseRun {
        free,
        pos,
        neg,
        beta_pos,
    })
}

/// Assembles the estimate of `kind` from phase endpoints. States must be the
/// ones seen by the primitive function (masked when dropout is active).
pub fn estimate_from_states(
    ctx: &EstimatorContext<'_>,
    kind: EstimatorKind,
    free: &NetworkState,
    pos: &NetworkState,
    neg: Option<&NetworkState>,
    beta_pos: f64,
) -> Result<GradientEstimate> {
    let need_neg =
        || neg.ok_or_else(|| Error::invalid(kind.name(), "the estimator needs a negative phase"));
    match kind {
        EstimatorKind::OneSided | EstimatorKind::RandomSign => {
            estimate_one_sided(ctx, free, pos, beta_pos)
        }
        EstimatorKind::Symmetric => estimate_symmetric(ctx, pos, need_neg()?, beta_pos),
        EstimatorKind::VfSym => estimate_vf_sym(ctx, free, pos, need_neg()?, beta_pos),
        EstimatorKind::KpVfSym => estimate_kp_vf_sym(ctx, pos, need_neg()?, beta_pos),
    }
}

/// Runs the phases and returns the estimate with the phase endpoints.
pub fn estimate(
    dynamics: &Dynamics<'_>,
    y: &Tensor,
    kind: EstimatorKind,
    beta: f64,
    free_steps: usize,
    nudged_steps: usize,
    rng: &mut impl Rng,
) -> Result<(GradientEstimate, PhaseRun)> {
    let run = run_phases(dynamics, y, kind, beta, free_steps, nudged_steps, rng)?;
    let ctx = EstimatorContext::from_dynamics(dynamics, y);
    let free = dynamics.effective(&run.free.state)?;
    let pos = dynamics.effective(&run.pos.state)?;
    let neg = run
        .neg
        .as_ref()
        .map(|r| dynamics.effective(&r.state))
        .transpose()?;
    let est = estimate_from_states(&ctx, kind, &free, &pos, neg.as_ref(), run.beta_pos)?;
    if !est.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} estimate", kind.name()),
        });
    }
    Ok((est, run))
}
