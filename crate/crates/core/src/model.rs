//! Architecture description, parameter container, primitive function and
//! readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, PoolIndices};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossHead {
    /// The last layer is the output; loss `0.5 * |y - s_last|^2`.
    SquaredError,
    /// Cross-entropy on `softmax(w_out * flatten(s_last))`.
    SoftmaxReadout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connection {
    /// Feedback through transposes of the forward weights.
    Bidirectional,
    /// Separate feedback weights for every layer but the first.
    Unidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub padding: usize,
    /// Max-pool window and stride; 1 disables pooling.
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_pool() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Input extents `[C, H, W]`.
    pub input: [usize; 3],
    #[serde(default)]
    pub conv: Vec<ConvLayerSpec>,
    /// Fully connected layer widths after the conv stack. With the squared
    /// error head the last entry is the output layer.
    #[serde(default)]
    pub fc: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub activation: Activation,
    pub head: LossHead,
    pub connection: Connection,
}

/// Resolved extents of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerGeom {
    Conv {
        in_channels: usize,
        channels: usize,
        kernel: usize,
        padding: usize,
        pool: usize,
        /// Output extents after pooling.
        height: usize,
        width: usize,
    },
    Fc {
        in_features: usize,
        units: usize,
    },
}

impl LayerGeom {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerGeom::Conv { .. })
    }

    /// Per-example state shape.
    pub fn state_shape(&self) -> Vec<usize> {
        match *self {
            LayerGeom::Conv {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
            LayerGeom::Fc { units, .. } => vec![units],
        }
    }

    pub fn batched_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(self.state_shape());
        s
    }

    pub fn features(&self) -> usize {
        self.state_shape().iter().product()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerGeom::Conv {
                in_channels,
                channels,
                kernel,
                ..
            } => vec![channels, in_channels, kernel, kernel],
            LayerGeom::Fc { in_features, units } => vec![units, in_features],
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerGeom::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerGeom::Fc { in_features, .. } => in_features,
        }
    }

    fn out_channels(&self) -> usize {
        match *self {
            LayerGeom::Conv { channels, .. } => channels,
            LayerGeom::Fc { units, .. } => units,
        }
    }
}

impl ArchitectureConfig {
    /// Checks the configuration and resolves per-layer extents.
    pub fn layer_geometry(&self) -> Result<Vec<LayerGeom>> {
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::config("input", "extents must be positive"));
        }
        if self.conv.is_empty() && self.fc.is_empty() {
            return Err(Error::config("conv", "at least one layer is required"));
        }
        if self.classes < 2 {
            return Err(Error::config(
                "classes",
                "at least two classes are required",
            ));
        }
        let mut geom = Vec::with_capacity(self.conv.len() + self.fc.len());
        let (mut c, mut h, mut w) = (c0, h0, w0);
        for (n, spec) in self.conv.iter().enumerate() {
            let field = format!("conv[{n}]");
            if spec.channels == 0 || spec.kernel == 0 || spec.pool == 0 {
                return Err(Error::config(
                    field,
                    "channels, kernel and pool must be positive",
                ));
            }
            let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
            if hp < spec.kernel || wp < spec.kernel {
                return Err(Error::config(
                    field,
                    format!("kernel {} exceeds padded input {hp}x{wp}", spec.kernel),
                ));
            }
            let (ho, wo) = (hp - spec.kernel + 1, wp - spec.kernel + 1);
            if ho % spec.pool != 0 || wo % spec.pool != 0 {
                return Err(Error::config(
                    field,
                    format!(
                        "convolution output {ho}x{wo} not divisible by pool {}",
                        spec.pool
                    ),
                ));
            }
            geom.push(LayerGeom::Conv {
                in_channels: c,
                channels: spec.channels,
                kernel: spec.kernel,
                padding: spec.padding,
                pool: spec.pool,
                height: ho / spec.pool,
                width: wo / spec.pool,
            });
            (c, h, w) = (spec.channels, ho / spec.pool, wo / spec.pool);
        }
        let mut features = c * h * w;
        for (n, &units) in self.fc.iter().enumerate() {
            if units == 0 {
                return Err(Error::config(format!("fc[{n}]"), "width must be positive"));
            }
            geom.push(LayerGeom::Fc {
                in_features: features,
                units,
            });
            features = units;
        }
        if self.head == LossHead::SquaredError
            && geom.last().map(LayerGeom::features) != Some(self.classes)
        {
            return Err(Error::config(
                "fc",
                format!(
                    "squared-error head needs a last layer of {} units",
                    self.classes
                ),
            ));
        }
        Ok(geom)
    }
}

/// Trainable tensors of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Feedback weights (unidirectional mode, every layer but the first).
    pub backward: Option<Tensor>,
}

/// A parameter-shaped collection of tensors. Holds network weights as well
/// as gradient estimates and optimizer buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    pub readout: Option<Tensor>,
}

pub type Parameters = ParamSet;
pub type GradientEstimate = ParamSet;

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        other.map(Tensor::zeros_like)
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: f(&l.weight),
                    bias: f(&l.bias),
                    backward: l.backward.as_ref().map(&mut f),
                })
                .collect(),
            readout: self.readout.as_ref().map(f),
        }
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{}.weight", n + 1), &l.weight));
            out.push((format!("layer{}.bias", n + 1), &l.bias));
            if let Some(b) = &l.backward {
                out.push((format!("layer{}.backward", n + 1), b));
            }
        }
        if let Some(r) = &self.readout {
            out.push(("readout".to_string(), r));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.weight", n + 1), &mut l.weight));
            out.push((format!("layer{}.bias", n + 1), &mut l.bias));
            if let Some(b) = &mut l.backward {
                out.push((format!("layer{}.backward", n + 1), b));
            }
        }
        if let Some(r) = &mut self.readout {
            out.push(("readout".to_string(), r));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    /// Parameter group of each tensor in [`ParamSet::named`] order: one group
    /// per layer, the readout in a group of its own after the layers.
    pub fn groups(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (n, l) in self.layers.iter().enumerate() {
            out.push(n);
            out.push(n);
            if l.backward.is_some() {
                out.push(n);
            }
        }
        if self.readout.is_some() {
            out.push(self.layers.len());
        }
        out
    }

    pub fn group_count(&self) -> usize {
        self.layers.len() + usize::from(self.readout.is_some())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_congruent(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(Error::shape(op, a.len(), b.len()));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape(
                    op,
                    format!("{na} {:?}", ta.shape()),
                    format!("{nb} {:?}", tb.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_congruent(other, "ParamSet::axpy")?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale_inplace(alpha);
        }
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other, "ParamSet::dot")?;
        let mut acc = 0.0;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            acc += a.dot(b)?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    /// Copies every forward weight into the matching feedback weight.
    pub fn tie_backward_to_forward(&mut self) {
        for l in &mut self.layers {
            if let Some(b) = &mut l.backward {
                *b = l.weight.clone();
            }
        }
    }
}

/// Neuron activations of every state layer, each with a leading batch extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub layers: Vec<Tensor>,
}

impl NetworkState {
    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, Tensor::batch)
    }

    /// Max over layers of the entrywise max-abs difference.
    pub fn residual(&self, other: &NetworkState) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "residual",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        let mut r: f64 = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            r = r.max(a.max_abs_diff(b)?);
        }
        Ok(r)
    }

    pub fn top(&self) -> &Tensor {
        self.layers.last().expect("state has at least one layer")
    }

    /// Applies per-layer dropout masks (missing masks leave a layer as is).
    pub fn masked(&self, masks: &[Option<Tensor>]) -> Result<NetworkState> {
        let mut layers = self.layers.clone();
        for (s, m) in layers.iter_mut().zip(masks) {
            if let Some(m) = m {
                s.mul_assign(m)?;
            }
        }
        Ok(NetworkState { layers })
    }
}

/// Free-standing residual between two states.
pub fn residual(a: &NetworkState, b: &NetworkState) -> Result<f64> {
    a.residual(b)
}

/// An architecture with validated geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ArchitectureConfig,
    geom: Vec<LayerGeom>,
}

/// Output of a forward term: the (pooled) pre-activation and the argmax
/// offsets for conv layers.
pub(crate) type Drive = (Tensor, Option<PoolIndices>);

impl Network {
    pub fn new(arch: ArchitectureConfig) -> Result<Self> {
        let geom = arch.layer_geometry()?;
        Ok(Self { arch, geom })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn geometry(&self) -> &[LayerGeom] {
        &self.geom
    }

    pub fn num_layers(&self) -> usize {
        self.geom.len()
    }

    pub fn activation(&self) -> Activation {
        self.arch.activation
    }

    pub fn head(&self) -> LossHead {
        self.arch.head
    }

    pub fn connection(&self) -> Connection {
        self.arch.connection
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let [c, h, w] = self.arch.input;
        vec![batch, c, h, w]
    }

    /// Shape of a batch of targets: one-hot rows for the readout head, the
    /// output layer shape for squared error.
    pub fn target_shape(&self, batch: usize) -> Vec<usize> {
        match self.arch.head {
            LossHead::SoftmaxReadout => vec![batch, self.arch.classes],
            LossHead::SquaredError => self.geom.last().expect("validated").batched_shape(batch),
        }
    }

    pub fn zero_state(&self, batch: usize) -> NetworkState {
        NetworkState {
            layers: self
                .geom
                .iter()
                .map(|g| Tensor::zeros(&g.batched_shape(batch)))
                .collect(),
        }
    }

    /// Uniform initialization with bound `1/sqrt(fan_in)` for weights and
    /// biases; feedback weights drawn independently of forward weights.
    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform =
            |shape: &[usize], bound: f64| Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        let mut layers = Vec::with_capacity(self.geom.len());
        for (n, g) in self.geom.iter().enumerate() {
            let bound = 1.0 / (g.fan_in() as f64).sqrt();
            let weight = uniform(&g.weight_shape(), bound);
            let bias = uniform(&[g.out_channels()], bound);
            let backward = (self.arch.connection == Connection::Unidirectional && n > 0)
                .then(|| uniform(&g.weight_shape(), bound));
            layers.push(LayerParams {
                weight,
                bias,
                backward,
            });
        }
        let readout = (self.arch.head == LossHead::SoftmaxReadout).then(|| {
            let features = self.geom.last().expect("validated").features();
            uniform(
                &[self.arch.classes, features],
                1.0 / (features as f64).sqrt(),
            )
        });
        ParamSet { layers, readout }
    }

    /// Checks that `params` has exactly the tensors this network expects.
    pub fn check_params(&self, params: &Parameters) -> Result<()> {
        if params.layers.len() != self.geom.len() {
            return Err(Error::shape(
                "check_params",
                self.geom.len(),
                params.layers.len(),
            ));
        }
        for (n, (g, l)) in self.geom.iter().zip(&params.layers).enumerate() {
            if l.weight.shape() != g.weight_shape().as_slice() {
                return Err(Error::shape(
                    "check_params",
                    g.weight_shape(),
                    l.weight.shape(),
                ));
            }
            if l.bias.shape() != [g.out_channels()] {
                return Err(Error::shape(
                    "check_params",
                    [g.out_channels()],
                    l.bias.shape(),
                ));
            }
            let wants_backward = self.arch.connection == Connection::Unidirectional && n > 0;
            match (&l.backward, wants_backward) {
                (Some(b), true) if b.shape() == g.weight_shape().as_slice() => {}
                (None, false) => {}
                (b, _) => {
                    return Err(Error::shape(
                        "check_params",
                        format!(
                            "layer{} backward {:?}",
                            n + 1,
                            wants_backward.then(|| g.weight_shape())
                        ),
                        b.as_ref().map(|b| b.shape().to_vec()),
                    ))
                }
            }
        }
        let want_readout = self.arch.head == LossHead::SoftmaxReadout;
        match (&params.readout, want_readout) {
            (Some(r), true) => {
                let expect = [
                    self.arch.classes,
                    self.geom.last().expect("validated").features(),
                ];
                if r.shape() != expect {
                    return Err(Error::shape("check_params", expect, r.shape()));
                }
            }
            (None, false) => {}
            _ => {
                return Err(Error::invalid(
                    "check_params",
                    "readout presence does not match the loss head",
                ))
            }
        }
        Ok(())
    }

    /// Drive of layer `n` from the activity `input` of the layer below:
    /// `P(w * input + B)` for conv layers, `w . flatten(input) + b` for fc.
    pub(crate) fn forward_drive(
        &self,
        n: usize,
        weight: &Tensor,
        bias: Option<&Tensor>,
        input: &Tensor,
    ) -> Result<Drive> {
        match self.geom[n] {
            LayerGeom::Conv { padding, pool, .. } => {
                let y = ops::conv2d(weight, input, bias, padding)?;
                if pool == 1 {
                    return Ok((y, None));
                }
                let (p, ind) = ops::maxpool(&y, pool)?;
                Ok((p, Some(ind)))
            }
            LayerGeom::Fc { .. } => Ok((ops::linear(&ops::flatten(input)?, weight, bias)?, None)),
        }
    }

    /// Argmax offsets of `P(weight * input)` for conv layer `n`.
    pub(crate) fn pool_indices(
        &self,
        n: usize,
        weight: &Tensor,
        input: &Tensor,
    ) -> Result<Option<PoolIndices>> {
        match self.geom[n] {
            LayerGeom::Conv { padding, pool, .. } if pool > 1 => {
                let y = ops::conv2d(weight, input, None, padding)?;
                Ok(Some(ops::maxpool(&y, pool)?.1))
            }
            _ => Ok(None),
        }
    }

    /// Feedback into layer `n - 1` from the activity `upper` of layer `n`
    /// through `weight` (the forward weight in bidirectional mode).
    pub(crate) fn feedback(
        &self,
        n: usize,
        weight: &Tensor,
        upper: &Tensor,
        ind: Option<&PoolIndices>,
    ) -> Result<Tensor> {
        match self.geom[n] {
            LayerGeom::Conv { padding, .. } => match ind {
                Some(ind) => ops::conv2d_transpose(weight, &ops::unpool(upper, ind)?, padding),
                None => ops::conv2d_transpose(weight, upper, padding),
            },
            LayerGeom::Fc { .. } => {
                let g = ops::linear_transpose(upper, weight)?;
                match self.geom[n - 1] {
                    LayerGeom::Conv {
                        channels,
                        height,
                        width,
                        ..
                    } => ops::unflatten(&g, (channels, height, width)),
                    LayerGeom::Fc { .. } => Ok(g),
                }
            }
        }
    }

    /// Gradient of `sum_b post_b . drive(pre_b)` with respect to the weight
    /// and bias of layer `n`, with pooling offsets `ind` (recomputed from
    /// `weight` and `pre` when `None`). Summed over the batch.
    pub(crate) fn synapse_grad(
        &self,
        n: usize,
        weight: &Tensor,
        post: &Tensor,
        pre: &Tensor,
        ind: Option<&PoolIndices>,
    ) -> Result<(Tensor, Tensor)> {
        match self.geom[n] {
            LayerGeom::Conv {
                padding,
                kernel,
                pool,
                ..
            } => {
                let up = if pool == 1 {
                    post.clone()
                } else {
                    match ind {
                        Some(ind) => ops::unpool(post, ind)?,
                        None => {
                            let ind = self.pool_indices(n, weight, pre)?.expect("pooled layer");
                            ops::unpool(post, &ind)?
                        }
                    }
                };
                ops::conv2d_weight_grad(&up, pre, padding, kernel)
            }
            LayerGeom::Fc { units, .. } => {
                let post = post.clone().reshape(&[post.batch(), units])?;
                let dw = ops::outer_sum(&post, &ops::flatten(pre)?)?;
                let mut db = Tensor::zeros(&[units]);
                for b in 0..post.batch() {
                    for (d, v) in db.data_mut().iter_mut().zip(post.sample(b)) {
                        *d += v;
                    }
                }
                Ok((dw, db))
            }
        }
    }

    /// Feedback weight of layer `n` (`n >= 1`): the separate feedback tensor
    /// in unidirectional mode, the forward weight otherwise.
    pub(crate) fn feedback_weight<'p>(&self, params: &'p Parameters, n: usize) -> &'p Tensor {
        let l = &params.layers[n];
        match (self.arch.connection, &l.backward) {
            (Connection::Unidirectional, Some(b)) => b,
            _ => &l.weight,
        }
    }

    /// Primitive function, one value per batch element:
    /// `sum_n s^n . drive_n(s^{n-1})` with `s^0 = x`.
    pub fn phi(&self, x: &Tensor, state: &NetworkState, params: &Parameters) -> Result<Vec<f64>> {
        if self.arch.connection != Connection::Bidirectional {
            return Err(Error::ModeMismatch {
                op: "phi",
                required: "bidirectional",
            });
        }
        self.check_state(state)?;
        let batch = state.batch();
        let mut out = vec![0.0; batch];
        for n in 0..self.geom.len() {
            let input = if n == 0 { x } else { &state.layers[n - 1] };
            let l = &params.layers[n];
            let (drive, _) = self.forward_drive(n, &l.weight, Some(&l.bias), input)?;
            add_rowwise_dot(&mut out, &state.layers[n], &drive)?;
        }
        Ok(out)
    }

    /// Layer-wise surrogate for unidirectional nets, one value per batch
    /// element (`n` is 1-based):
    /// `s^n . drive^f_n(s^{n-1}) + s^{n+1} . drive^b_{n+1}(s^n)`, and at the
    /// top layer `s^N . drive^f_N(s^{N-1}) - beta * loss`.
    #[allow(clippy::too_many_arguments)]
    pub fn phi_tilde(
        &self,
        n: usize,
        params: &Parameters,
        state: &NetworkState,
        x: &Tensor,
        y: &Tensor,
        beta: f64,
    ) -> Result<Vec<f64>> {
        if self.arch.connection != Connection::Unidirectional {
            return Err(Error::ModeMismatch {
                op: "phi_tilde",
                required: "unidirectional",
            });
        }
        let layers = self.geom.len();
        if n == 0 || n > layers {
            return Err(Error::invalid(
                "phi_tilde",
                format!("layer {n} outside 1..={layers}"),
            ));
        }
        self.check_state(state)?;
        let i = n - 1;
        let input = if i == 0 { x } else { &state.layers[i - 1] };
        let l = &params.layers[i];
        let (drive, _) = self.forward_drive(i, &l.weight, Some(&l.bias), input)?;
        let mut out = vec![0.0; state.batch()];
        add_rowwise_dot(&mut out, &state.layers[i], &drive)?;
        if n < layers {
            let wb = self.feedback_weight(params, n);
            let (up, _) = self.forward_drive(n, wb, None, &state.layers[i])?;
            add_rowwise_dot(&mut out, &state.layers[n], &up)?;
        } else if beta != 0.0 {
            let loss = self.loss(state.top(), y, params.readout.as_ref())?;
            for (o, l) in out.iter_mut().zip(loss) {
                *o -= beta * l;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_state(&self, state: &NetworkState) -> Result<()> {
        if state.layers.len() != self.geom.len() {
            return Err(Error::shape("state", self.geom.len(), state.layers.len()));
        }
        let batch = state.batch();
        for (g, s) in self.geom.iter().zip(&state.layers) {
            if s.shape() != g.batched_shape(batch).as_slice() {
                return Err(Error::shape("state", g.batched_shape(batch), s.shape()));
            }
        }
        Ok(())
    }

    fn readout_weight<'p>(&self, w_out: Option<&'p Tensor>) -> Result<&'p Tensor> {
        w_out.ok_or_else(|| Error::invalid("readout", "softmax head requires a readout matrix"))
    }

    /// Per-example loss at the top layer activity.
    pub fn loss(&self, top: &Tensor, y: &Tensor, w_out: Option<&Tensor>) -> Result<Vec<f64>> {
        match self.arch.head {
            LossHead::SquaredError => {
                top.check_same_shape(y, "loss")?;
                Ok((0..top.batch())
                    .map(|b| {
                        0.5 * top
                            .sample(b)
                            .iter()
                            .zip(y.sample(b))
                            .map(|(s, t)| (s - t) * (s - t))
                            .sum::<f64>()
                    })
                    .collect())
            }
            LossHead::SoftmaxReadout => {
                let probs = readout(top, self.readout_weight(w_out)?)?;
                probs.check_same_shape(y, "loss")?;
                Ok((0..probs.batch())
                    .map(|b| {
                        -probs
                            .sample(b)
                            .iter()
                            .zip(y.sample(b))
                            .filter(|(_, &t)| t != 0.0)
                            .map(|(p, t)| t * p.max(f64::MIN_POSITIVE).ln())
                            .sum::<f64>()
                    })
                    .collect())
            }
        }
    }

    /// Mean loss over the batch.
    pub fn mean_loss(&self, top: &Tensor, y: &Tensor, w_out: Option<&Tensor>) -> Result<f64> {
        let l = self.loss(top, y, w_out)?;
        Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
    }

    /// Per-example gradient of the loss with respect to the top layer,
    /// shaped like `top`.
    pub fn loss_grad(&self, top: &Tensor, y: &Tensor, w_out: Option<&Tensor>) -> Result<Tensor> {
        match self.arch.head {
            LossHead::SquaredError => top.sub(y),
            LossHead::SoftmaxReadout => {
                let w = self.readout_weight(w_out)?;
                let err = readout(top, w)?.sub(y)?;
                ops::linear_transpose(&err, w)?.reshape(top.shape())
            }
        }
    }

    /// Network output used for classification: readout probabilities or the
    /// output layer, shaped `[B, classes]`.
    pub fn output(&self, top: &Tensor, w_out: Option<&Tensor>) -> Result<Tensor> {
        match self.arch.head {
            LossHead::SquaredError => top.clone().reshape(&[top.batch(), self.arch.classes]),
            LossHead::SoftmaxReadout => readout(top, self.readout_weight(w_out)?),
        }
    }

    /// Predicted class per batch element.
    pub fn predict(&self, top: &Tensor, w_out: Option<&Tensor>) -> Result<Vec<usize>> {
        let out = self.output(top, w_out)?;
        Ok((0..out.batch()).map(|b| argmax(out.sample(b))).collect())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn add_rowwise_dot(out: &mut [f64], a: &Tensor, b: &Tensor) -> Result<()> {
    a.check_same_shape(b, "phi")?;
    for (bi, o) in out.iter_mut().enumerate() {
        *o += a
            .sample(bi)
            .iter()
            .zip(b.sample(bi))
            .map(|(p, q)| p * q)
            .sum::<f64>();
    }
    Ok(())
}

/// Class probabilities `softmax(w_out . flatten(s_last))`, computed with the
/// per-row maximum subtracted.
pub fn readout(s_last: &Tensor, w_out: &Tensor) -> Result<Tensor> {
    let mut logits = ops::linear(&ops::flatten(s_last)?, w_out, None)?;
    let classes = w_out.shape()[0];
    for row in logits.data_mut().chunks_mut(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(logits)
}
