//! Free and nudged relaxation.
//!
//! All layers are updated synchronously: every right-hand side reads `s_t`
//! and the step writes `s_{t+1}`. Pooling argmaxes are recomputed at every
//! step from the current activity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Connection, Network, NetworkState, Parameters};
use crate::ops::PoolIndices;
use crate::tensor::Tensor;

/// Output nudging: strength `beta` toward `target`.
#[derive(Debug, Clone, Copy)]
pub struct Nudge<'a> {
    pub beta: f64,
    pub target: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Phase {
    Free,
    Nudged(f64),
}

/// Pooling offsets used by one step, per layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepIndices {
    /// Argmaxes of each layer's forward drive.
    pub forward: Vec<Option<PoolIndices>>,
    /// Argmaxes of `w^b_n * s^{n-1}` used by the feedback into layer `n-1`.
    /// Equal to `forward` in bidirectional mode.
    pub feedback: Vec<Option<PoolIndices>>,
}

/// Recorded relaxation `s_0..s_T` with the offsets each step used.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<NetworkState>,
    /// `indices[t]` produced `states[t + 1]` from `states[t]`.
    pub indices: Vec<StepIndices>,
    pub phase: Phase,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.indices.len()
    }

    pub fn last(&self) -> &NetworkState {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }
}

#[derive(Debug, Clone)]
pub struct RelaxReport {
    pub state: NetworkState,
    /// Max over layers of `|s_T - s_{T-1}|_inf`.
    pub residual: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RelaxOptions {
    pub record: bool,
    /// Stop as soon as the residual falls below this value.
    pub tolerance: Option<f64>,
}

/// Relaxation context for one input batch: the network, its parameters, the
/// static input and optional per-layer dropout masks. The drive of the first
/// layer depends on the input only and is computed once.
pub struct Dynamics<'a> {
    net: &'a Network,
    params: &'a Parameters,
    x: &'a Tensor,
    masks: Option<&'a [Option<Tensor>]>,
    first: (Tensor, Option<PoolIndices>),
}

impl<'a> Dynamics<'a> {
    pub fn new(net: &'a Network, params: &'a Parameters, x: &'a Tensor) -> Result<Self> {
        net.check_params(params)?;
        let expected = net.input_shape(x.batch());
        if x.shape() != expected.as_slice() {
            return Err(Error::shape("Dynamics::new", expected, x.shape()));
        }
        x.ensure_finite(|| "network input".into())?;
        let l = &params.layers[0];
        let first = net.forward_drive(0, &l.weight, Some(&l.bias), x)?;
        Ok(Self {
            net,
            params,
            x,
            masks: None,
            first,
        })
    }

    /// Attaches dropout masks, one optional tensor per layer shaped like the
    /// batched state of that layer.
    pub fn with_masks(mut self, masks: &'a [Option<Tensor>]) -> Result<Self> {
        if masks.len() != self.net.num_layers() {
            return Err(Error::shape(
                "with_masks",
                self.net.num_layers(),
                masks.len(),
            ));
        }
        for (g, m) in self.net.geometry().iter().zip(masks) {
            if let Some(m) = m {
                let want = g.batched_shape(self.x.batch());
                if m.shape() != want.as_slice() {
                    return Err(Error::shape("with_masks", want, m.shape()));
                }
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn params(&self) -> &Parameters {
        self.params
    }

    pub fn input(&self) -> &Tensor {
        self.x
    }

    pub fn masks(&self) -> Option<&[Option<Tensor>]> {
        self.masks
    }

    pub fn zero_state(&self) -> NetworkState {
        self.net.zero_state(self.x.batch())
    }

    /// State as seen by the primitive function: masked when dropout is on.
    pub fn effective(&self, state: &NetworkState) -> Result<NetworkState> {
        match self.masks {
            Some(m) => state.masked(m),
            None => Ok(state.clone()),
        }
    }

    fn check_nudge(&self, nudge: Option<Nudge<'_>>) -> Result<()> {
        if let Some(n) = nudge {
            let want = self.net.target_shape(self.x.batch());
            if n.target.shape() != want.as_slice() {
                return Err(Error::shape("nudge target", want, n.target.shape()));
            }
            if !n.beta.is_finite() {
                return Err(Error::invalid("nudge", "beta must be finite"));
            }
        }
        Ok(())
    }

    /// One synchronous update of every layer.
    pub fn step(&self, state: &NetworkState, nudge: Option<Nudge<'_>>) -> Result<NetworkState> {
        self.check_nudge(nudge)?;
        self.net.check_state(state)?;
        Ok(self.step_unchecked(state, nudge)?.0)
    }

    pub(crate) fn step_unchecked(
        &self,
        state: &NetworkState,
        nudge: Option<Nudge<'_>>,
    ) -> Result<(NetworkState, StepIndices)> {
        let net = self.net;
        let layers = net.num_layers();
        let act = net.activation();
        let eff = self.effective(state)?;
        let mut drives = Vec::with_capacity(layers);
        let mut forward = Vec::with_capacity(layers);
        drives.push(self.first.0.clone());
        forward.push(self.first.1.clone());
        for n in 1..layers {
            let l = &self.params.layers[n];
            let (d, ind) = net.forward_drive(n, &l.weight, Some(&l.bias), &eff.layers[n - 1])?;
            drives.push(d);
            forward.push(ind);
        }
        let mut feedback: Vec<Option<PoolIndices>> = vec![None; layers];
        if net.connection() == Connection::Bidirectional {
            feedback.clone_from(&forward);
        } else {
            for (n, slot) in feedback.iter_mut().enumerate().skip(1) {
                *slot =
                    net.pool_indices(n, net.feedback_weight(self.params, n), &eff.layers[n - 1])?;
            }
        }
        let mut next = Vec::with_capacity(layers);
        for (n, mut pre) in drives.into_iter().enumerate() {
            if n + 1 < layers {
                let fb = net.feedback(
                    n + 1,
                    net.feedback_weight(self.params, n + 1),
                    &eff.layers[n + 1],
                    feedback[n + 1].as_ref(),
                )?;
                pre.add_assign(&fb)?;
            }
            if let Some(Some(m)) = self.masks.map(|m| &m[n]) {
                pre.mul_assign(m)?;
            }
            pre.map_inplace(|v| act.eval(v));
            next.push(pre);
        }
        if let Some(nudge) = nudge.filter(|n| n.beta != 0.0) {
            let mut grad = net.loss_grad(eff.top(), nudge.target, self.params.readout.as_ref())?;
            if let Some(Some(m)) = self.masks.map(|m| m.last().expect("at least one layer")) {
                grad.mul_assign(m)?;
            }
            next.last_mut()
                .expect("at least one layer")
                .axpy(-nudge.beta, &grad)?;
        }
        Ok((
            NetworkState { layers: next },
            StepIndices { forward, feedback },
        ))
    }

    /// Applies `steps` updates starting from `state0`.
    pub fn relax(
        &self,
        state0: &NetworkState,
        steps: usize,
        nudge: Option<Nudge<'_>>,
        opts: RelaxOptions,
    ) -> Result<(RelaxReport, Option<Trajectory>)> {
        if steps == 0 {
            return Err(Error::invalid("relax", "steps must be at least 1"));
        }
        self.check_nudge(nudge)?;
        self.net.check_state(state0)?;
        let phase = match nudge {
            Some(n) if n.beta != 0.0 => Phase::Nudged(n.beta),
            _ => Phase::Free,
        };
        let mut traj = opts.record.then(|| Trajectory {
            states: vec![state0.clone()],
            indices: Vec::with_capacity(steps),
            phase,
        });
        let mut state = state0.clone();
        let mut residual = f64::INFINITY;
        let mut taken = 0;
        for t in 0..steps {
            let (next, ind) = self.step_unchecked(&state, nudge)?;
            for (n, layer) in next.layers.iter().enumerate() {
                layer.ensure_finite(|| format!("relaxation step {} at layer {}", t + 1, n + 1))?;
            }
            residual = next.residual(&state)?;
            state = next;
            taken = t + 1;
            if let Some(tr) = traj.as_mut() {
                tr.states.push(state.clone());
                tr.indices.push(ind);
            }
            if opts.tolerance.is_some_and(|tol| residual < tol) {
                break;
            }
        }
        Ok((
            RelaxReport {
                state,
                residual,
                steps: taken,
            },
            traj,
        ))
    }

    /// Relaxation without recording.
    pub fn run(
        &self,
        state0: &NetworkState,
        steps: usize,
        nudge: Option<Nudge<'_>>,
    ) -> Result<RelaxReport> {
        Ok(self.relax(state0, steps, nudge, RelaxOptions::default())?.0)
    }

    /// Free relaxation from the zero state.
    pub fn free(&self, steps: usize) -> Result<RelaxReport> {
        self.run(&self.zero_state(), steps, None)
    }
}
