//! Invariant checks on toy networks, one line per check.

use std::io::Write;

use eqprop::estimators::{estimate_one_sided, estimate_symmetric, EstimatorContext};
use eqprop::oracles::{self, bptt_gradient, finite_diff_loss_grad, relative_error};
use eqprop::train::kp_step;
use eqprop::{ops, toy, Checkpoint, Connection, Dynamics, LossHead, Nudge, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, fn() -> Result<String, String>);

/// Runs every check and returns the number of failures.
pub fn run(out: &mut impl Write) -> usize {
    let checks: [Check; 8] = [
        ("conv2d transpose adjoint", conv_adjoint),
        ("maxpool unpool round trip", pool_round_trip),
        ("bptt matches finite differences", bptt_vs_fd),
        ("symmetric estimate order", symmetric_order),
        ("random-sign mean is symmetric", random_sign_identity),
        ("kolen-pollack geometric decay", kp_decay),
        ("checkpoint round trip", checkpoint_round_trip),
        ("config rejects unknown keys", config_unknown_key),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let (tag, detail) = match check() {
            Ok(d) => ("ok  ", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{tag} {name}: {detail}");
    }
    failed
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn expect(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_adjoint() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for padding in 0..3 {
        let w = random(&[3, 2, 3, 3], &mut rng);
        let x = random(&[2, 2, 7, 6], &mut rng);
        let y = ops::conv2d(&w, &x, None, padding).map_err(err)?;
        let v = random(y.shape(), &mut rng);
        let lhs = y.dot(&v).map_err(err)?;
        let rhs = x
            .dot(&ops::conv2d_transpose(&w, &v, padding).map_err(err)?)
            .map_err(err)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    expect(worst <= 1e-10, format!("relative gap {worst:.2e}"))
}

fn pool_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[2, 3, 6, 6], &mut rng);
    let (p, ind) = ops::maxpool(&x, 2).map_err(err)?;
    let y = p.map(f64::abs);
    let back = ops::maxpool(&ops::unpool(&y, &ind).map_err(err)?, 2)
        .map_err(err)?
        .0;
    let again = ops::pool_at(&ops::unpool(&p, &ind).map_err(err)?, &ind).map_err(err)?;
    expect(back == y && again == p, "exact".into())
}

fn bptt_vs_fd() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for head in [LossHead::SquaredError, LossHead::SoftmaxReadout] {
        for connection in [Connection::Bidirectional, Connection::Unidirectional] {
            let mut p = toy::problem(head, connection, 1);
            p.params.tie_backward_to_forward();
            let d = Dynamics::new(&p.net, &p.params, &p.x).map_err(err)?;
            let g = bptt_gradient(&d, &p.y, 200, false).map_err(err)?.total;
            let fd = finite_diff_loss_grad(&p.net, &p.params, &p.x, &p.y, 200, 1e-6, 1e-12)
                .map_err(err)?;
            worst = worst.max(relative_error(&g, &fd).map_err(err)?);
        }
    }
    expect(
        worst <= 1e-5,
        format!("worst relative error {worst:.2e} over both heads and modes"),
    )
}

fn symmetric_order() -> Result<String, String> {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    let rows = oracles::beta_sweep(
        &p.net,
        &p.params,
        &p.x,
        &p.y,
        &[0.2, 0.1],
        oracles::Budget::default(),
    )
    .map_err(err)?;
    let (one, sym) = oracles::halving_ratios(&rows)[0];
    expect(
        (0.4..=0.6).contains(&one) && (0.2..=0.35).contains(&sym),
        format!("halving ratios one-sided {one:.3}, symmetric {sym:.3}"),
    )
}

fn random_sign_identity() -> Result<String, String> {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 2);
    let d = Dynamics::new(&p.net, &p.params, &p.x).map_err(err)?;
    let beta = 0.3;
    let free = d.free(60).map_err(err)?.state;
    let pos = d
        .run(&free, 15, Some(Nudge { beta, target: &p.y }))
        .map_err(err)?
        .state;
    let neg = d
        .run(
            &free,
            15,
            Some(Nudge {
                beta: -beta,
                target: &p.y,
            }),
        )
        .map_err(err)?
        .state;
    let ctx = EstimatorContext::from_dynamics(&d, &p.y);
    let mut mean = estimate_one_sided(&ctx, &free, &pos, beta).map_err(err)?;
    mean.axpy(
        1.0,
        &estimate_one_sided(&ctx, &free, &neg, -beta).map_err(err)?,
    )
    .map_err(err)?;
    mean.scale(0.5);
    let sym = estimate_symmetric(&ctx, &pos, &neg, beta).map_err(err)?;
    let gap = relative_error(&mean, &sym).map_err(err)?;
    expect(gap <= 1e-12, format!("relative gap {gap:.2e}"))
}

fn kp_decay() -> Result<String, String> {
    let net = eqprop::Network::new(toy::architecture(
        LossHead::SoftmaxReadout,
        Connection::Unidirectional,
    ))
    .map_err(err)?;
    let mut params = net.init_params(3);
    let zero = eqprop::ParamSet::zeros_like(&params);
    let (eta, lambda) = (0.1, 0.2);
    let diff0 = params.layers[1]
        .weight
        .sub(params.layers[1].backward.as_ref().unwrap())
        .map_err(err)?;
    let steps = 50;
    for _ in 0..steps {
        kp_step(&mut params, &zero, &[eta; 3], lambda).map_err(err)?;
    }
    let diff = params.layers[1]
        .weight
        .sub(params.layers[1].backward.as_ref().unwrap())
        .map_err(err)?;
    let expected = diff0.scale((1.0 - eta * lambda).powi(steps));
    let gap = diff.sub(&expected).map_err(err)?.max_abs() / expected.max_abs();
    expect(
        gap <= 1e-12,
        format!("relative gap {gap:.2e} after {steps} steps"),
    )
}

fn checkpoint_round_trip() -> Result<String, String> {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Unidirectional, 4);
    let hp = toy::training_hyperparams(eqprop::EstimatorKind::VfSym, 0.5, 4);
    let ckpt = Checkpoint::new(p.net.arch().clone(), hp, p.params, None, 3);
    let bytes = ckpt.to_bytes().map_err(err)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(err)?;
    let same = back == ckpt && back.to_bytes().map_err(err)? == bytes;
    expect(same, format!("{} bytes", bytes.len()))
}

fn config_unknown_key() -> Result<String, String> {
    let text = include_str!("../../../configs/toy.toml");
    RunConfig::from_toml_str(text).map_err(err)?;
    let bad = text.replacen("[hyperparams]", "[hyperparams]\nlearning_rat = 0.1", 1);
    match RunConfig::from_toml_str(&bad) {
        Err(eqprop::Error::InvalidConfig { field, .. }) if field.contains("learning_rat") => {
            Ok(format!("rejected `{field}`"))
        }
        other => Err(format!("unexpected result {other:?}")),
    }
}
