//! Fixtures shared by the benchmarks.

use eqprop::ops::Activation;
use eqprop::{
    ArchitectureConfig, Connection, ConvLayerSpec, LossHead, Network, Parameters, Tensor,
};

/// Deterministic values in `[0, 1)` from a low-discrepancy sequence.
pub fn filled(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.618_033_988_75).fract())
}

/// The two-conv MNIST network with fresh parameters.
pub fn mnist_net(connection: Connection) -> (Network, Parameters) {
    let net = Network::new(ArchitectureConfig {
        input: [1, 28, 28],
        conv: vec![
            ConvLayerSpec {
                channels: 32,
                kernel: 5,
                padding: 0,
                pool: 3,
            },
            ConvLayerSpec {
                channels: 32,
                kernel: 3,
                padding: 1,
                pool: 2,
            },
        ],
        fc: vec![],
        classes: 10,
        activation: Activation::HardSigmoidHalf,
        head: LossHead::SoftmaxReadout,
        connection,
    })
    .expect("valid architecture");
    let params = net.init_params(0);
    (net, params)
}
