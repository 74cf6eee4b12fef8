//! Small fixed problems for gradient checks, self tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::AugmentOptions;
use crate::data::{synthetic, Dataset};
use crate::dynamics::Dynamics;
use crate::error::Result;
use crate::estimators::EstimatorKind;
use crate::model::{ArchitectureConfig, Connection, ConvLayerSpec, LossHead, Network, Parameters};
use crate::ops::Activation;
use crate::tensor::Tensor;
use crate::train::{one_hot, GradientMethod, Hyperparams, Precision};

/// One conv layer (4 channels, 8x8 input pooled to 4x4) and one fc layer
/// over 3 classes.
pub fn architecture(head: LossHead, connection: Connection) -> ArchitectureConfig {
    ArchitectureConfig {
        input: [1, 8, 8],
        conv: vec![ConvLayerSpec {
            channels: 4,
            kernel: 3,
            padding: 1,
            pool: 2,
        }],
        fc: vec![if head == LossHead::SquaredError { 3 } else { 5 }],
        classes: 3,
        activation: Activation::HardSigmoidHalf,
        head,
        connection,
    }
}

/// Fresh parameters with the top-layer biases moved into the linear range
/// of the activation, so that no output unit starts saturated.
pub fn lively_params(net: &Network, seed: u64) -> Parameters {
    let mut params = net.init_params(seed);
    let top = params.layers.len() - 1;
    params.layers[top].bias.map_inplace(|b| 1.0 + 0.3 * b);
    params
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub net: Network,
    pub params: Parameters,
    pub x: Tensor,
    pub y: Tensor,
}

/// A batch of two random inputs with targets. Squared-error targets sit
/// within 0.2 of the free fixed point; softmax targets are random one-hot
/// labels.
pub fn problem_for(arch: ArchitectureConfig, seed: u64) -> Result<Problem> {
    let net = Network::new(arch)?;
    let params = lively_params(&net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = 2;
    let x = Tensor::from_fn(&net.input_shape(batch), |_| rng.gen_range(0.0..1.0));
    let y = match net.head() {
        LossHead::SquaredError => {
            let free = Dynamics::new(&net, &params, &x)?.free(200)?;
            let top = free.state.top();
            let data = top
                .data()
                .iter()
                .map(|s| (s + rng.gen_range(-0.2..0.2)).clamp(0.05, 0.95))
                .collect();
            Tensor::new(top.shape().to_vec(), data)?
        }
        LossHead::SoftmaxReadout => {
            let labels: Vec<usize> = (0..batch)
                .map(|_| rng.gen_range(0..net.classes()))
                .collect();
            one_hot(&labels, net.classes())
        }
    };
    Ok(Problem { net, params, x, y })
}

pub fn problem(head: LossHead, connection: Connection, seed: u64) -> Problem {
    problem_for(architecture(head, connection), seed).expect("toy architecture is valid")
}

/// Three noisy prototypes on 8x8 inputs: 192 training and 48 held-out
/// examples.
pub fn task() -> (Dataset, Dataset) {
    let all = synthetic(240, [1, 8, 8], 3, 0.3, 7);
    let train: Vec<usize> = (0..192).collect();
    let test: Vec<usize> = (192..240).collect();
    (all.subset(&train), all.subset(&test))
}

/// Training settings for `task` with the softmax toy network.
pub fn training_hyperparams(estimator: EstimatorKind, beta: f64, seed: u64) -> Hyperparams {
    Hyperparams {
        free_steps: 30,
        nudged_steps: 10,
        beta,
        estimator: GradientMethod::Ep(estimator),
        learning_rates: vec![0.3, 0.2, 0.1],
        final_learning_rate: 1e-3,
        momentum: 0.9,
        weight_decay: 0.0,
        bias_weight_decay: true,
        batch_size: 16,
        epochs: 20,
        cosine_decay_epochs: 20,
        dropout: 0.0,
        dropout_layer: None,
        augment: AugmentOptions::default(),
        seed,
        slope_normalization: true,
        precision: Precision::F64,
        checkpoint_every: 0,
    }
}

/// Full-batch Kolen-Pollack training on `task` with the unidirectional
/// softmax toy network: constant rates, no momentum, decay on weights only.
/// One epoch is one iteration.
pub fn alignment_hyperparams(iterations: usize, seed: u64) -> Hyperparams {
    Hyperparams {
        free_steps: 30,
        nudged_steps: 10,
        beta: 0.5,
        estimator: GradientMethod::Ep(EstimatorKind::KpVfSym),
        learning_rates: vec![0.8; 3],
        final_learning_rate: 0.8,
        momentum: 0.0,
        weight_decay: 0.04,
        bias_weight_decay: false,
        batch_size: 192,
        epochs: iterations,
        cosine_decay_epochs: iterations,
        ..training_hyperparams(EstimatorKind::KpVfSym, 0.5, seed)
    }
}
