use eqprop::estimators::{
    estimate, estimate_kp_vf_sym, estimate_one_sided, estimate_symmetric, estimate_vf_sym,
    EstimatorContext,
};
use eqprop::oracles::{
    beta_sweep, bptt_gradient, finite_diff_loss_grad, halving_ratios, relative_error,
    theorem1_check, Budget,
};
use eqprop::train::dropout_mask;
use eqprop::{
    toy, Connection, Dynamics, EstimatorKind, LossHead, Network, Nudge, ParamSet, Parameters,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Same weights in a bidirectional network.
fn as_bidirectional(p: &toy::Problem) -> (Network, Parameters) {
    let mut arch = p.net.arch().clone();
    arch.connection = Connection::Bidirectional;
    let net = Network::new(arch).unwrap();
    let mut params = p.params.clone();
    for l in &mut params.layers {
        l.backward = None;
    }
    (net, params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_sign_average_is_the_symmetric_estimate(seed in 0u64..1000, beta in 0.05f64..1.0) {
        let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, seed);
        let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
        let free = d.free(40).unwrap().state;
        let pos = d.run(&free, 12, Some(Nudge { beta, target: &p.y })).unwrap().state;
        let neg = d.run(&free, 12, Some(Nudge { beta: -beta, target: &p.y })).unwrap().state;
        let ctx = EstimatorContext::from_dynamics(&d, &p.y);
        let mut mean = estimate_one_sided(&ctx, &free, &pos, beta).unwrap();
        mean.axpy(1.0, &estimate_one_sided(&ctx, &free, &neg, -beta).unwrap()).unwrap();
        mean.scale(0.5);
        let sym = estimate_symmetric(&ctx, &pos, &neg, beta).unwrap();
        prop_assert!(relative_error(&mean, &sym).unwrap() <= 1e-12);
    }

    #[test]
    fn kolen_pollack_with_tied_weights_is_symmetric(seed in 0u64..1000, beta in 0.05f64..1.0) {
        let mut p = toy::problem(LossHead::SoftmaxReadout, Connection::Unidirectional, seed);
        p.params.tie_backward_to_forward();
        let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
        let free = d.free(40).unwrap().state;
        let pos = d.run(&free, 12, Some(Nudge { beta, target: &p.y })).unwrap().state;
        let neg = d.run(&free, 12, Some(Nudge { beta: -beta, target: &p.y })).unwrap().state;
        let kp = estimate_kp_vf_sym(&EstimatorContext::from_dynamics(&d, &p.y), &pos, &neg, beta).unwrap();

        let (bnet, bparams) = as_bidirectional(&p);
        let bd = Dynamics::new(&bnet, &bparams, &p.x).unwrap();
        let bfree = bd.free(40).unwrap().state;
        prop_assert_eq!(&bfree, &free);
        let bpos = bd.run(&bfree, 12, Some(Nudge { beta, target: &p.y })).unwrap().state;
        let bneg = bd.run(&bfree, 12, Some(Nudge { beta: -beta, target: &p.y })).unwrap().state;
        let sym = estimate_symmetric(&EstimatorContext::from_dynamics(&bd, &p.y), &bpos, &bneg, beta).unwrap();

        let scale = sym.max_abs();
        for (n, (a, b)) in kp.layers.iter().zip(&sym.layers).enumerate() {
            prop_assert!(a.weight.max_abs_diff(&b.weight).unwrap() <= 1e-12 * scale, "layer {}", n);
            prop_assert!(a.bias.max_abs_diff(&b.bias).unwrap() <= 1e-12 * scale);
            if let Some(wb) = &a.backward {
                prop_assert_eq!(wb, &a.weight);
            }
        }
        prop_assert_eq!(kp.readout, sym.readout);
    }
}

#[test]
fn symmetric_estimate_approaches_the_loss_gradient() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    let budget = Budget {
        free_steps: 200,
        nudged_steps: 100,
        tolerance: 1e-12,
        eps: 1e-6,
    };
    let r = theorem1_check(&p.net, &p.params, &p.x, &p.y, 0.01, budget, None).unwrap();
    assert!(
        r.symmetric_error < 1e-3,
        "symmetric error {:e}",
        r.symmetric_error
    );
    assert!(
        r.one_sided_error < 2e-2,
        "one-sided error {:e}",
        r.one_sided_error
    );
    assert!(r.symmetric_error < r.one_sided_error);
    assert!(theorem1_check(
        &toy::problem(LossHead::SoftmaxReadout, Connection::Unidirectional, 1).net,
        &p.params,
        &p.x,
        &p.y,
        0.1,
        budget,
        None
    )
    .is_err());
}

#[test]
fn readout_estimate_is_the_exact_gradient_at_the_nudged_state() {
    // with the readout the loss depends on it directly; the estimate is
    // -(softmax - y) s^T averaged over the batch, which equals -dL/dW_out
    // when evaluated at a fixed top state
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 4);
    let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
    let free = d.free(100).unwrap().state;
    let ctx = EstimatorContext::from_dynamics(&d, &p.y);
    let tiny = 1e-9;
    let pos = d
        .run(
            &free,
            50,
            Some(Nudge {
                beta: tiny,
                target: &p.y,
            }),
        )
        .unwrap()
        .state;
    let est = estimate_one_sided(&ctx, &free, &pos, tiny).unwrap();
    let g = bptt_gradient(&d, &p.y, 100, false).unwrap().total;
    let r = est.readout.unwrap();
    let want = g.readout.unwrap().scale(-1.0);
    assert!(r.max_abs_diff(&want).unwrap() < 1e-7 * want.max_abs().max(1.0));
}

#[test]
fn estimators_enforce_connection_modes() {
    let bi = toy::problem(LossHead::SquaredError, Connection::Bidirectional, 1);
    let uni = toy::problem(LossHead::SquaredError, Connection::Unidirectional, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bd = Dynamics::new(&bi.net, &bi.params, &bi.x).unwrap();
    let ud = Dynamics::new(&uni.net, &uni.params, &uni.x).unwrap();
    for kind in [EstimatorKind::VfSym, EstimatorKind::KpVfSym] {
        assert!(matches!(
            estimate(&bd, &bi.y, kind, 0.5, 10, 5, &mut rng),
            Err(eqprop::Error::ModeMismatch { .. })
        ));
        assert!(estimate(&ud, &uni.y, kind, 0.5, 10, 5, &mut rng).is_ok());
    }
    for kind in [
        EstimatorKind::OneSided,
        EstimatorKind::Symmetric,
        EstimatorKind::RandomSign,
    ] {
        assert!(estimate(&bd, &bi.y, kind, 0.5, 10, 5, &mut rng).is_ok());
    }
    let s = ud.free(5).unwrap().state;
    let ctx = EstimatorContext::from_dynamics(&bd, &bi.y);
    assert!(estimate_vf_sym(&ctx, &s, &s, &s, 0.5).is_err());
    assert!(estimate(&bd, &bi.y, EstimatorKind::Symmetric, 0.0, 10, 5, &mut rng).is_err());
}

#[test]
fn estimates_have_the_parameter_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (connection, kinds) in [
        (
            Connection::Bidirectional,
            &[
                EstimatorKind::OneSided,
                EstimatorKind::Symmetric,
                EstimatorKind::RandomSign,
            ][..],
        ),
        (
            Connection::Unidirectional,
            &[EstimatorKind::VfSym, EstimatorKind::KpVfSym][..],
        ),
    ] {
        for head in [LossHead::SquaredError, LossHead::SoftmaxReadout] {
            let p = toy::problem(head, connection, 2);
            let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
            for &kind in kinds {
                let (est, run) = estimate(&d, &p.y, kind, 0.4, 20, 8, &mut rng).unwrap();
                p.params.check_congruent(&est, "test").unwrap();
                assert!(est.is_finite());
                assert_eq!(run.neg.is_some(), kind.nudged_phases() == 2);
                if kind != EstimatorKind::RandomSign {
                    assert_eq!(run.beta_pos, 0.4);
                } else {
                    assert_eq!(run.beta_pos.abs(), 0.4);
                }
            }
        }
    }
}

#[test]
fn random_sign_draws_both_signs_evenly() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 2);
    let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws = 400;
    let positive = (0..draws)
        .filter(|_| {
            let (_, run) =
                estimate(&d, &p.y, EstimatorKind::RandomSign, 0.2, 1, 1, &mut rng).unwrap();
            run.beta_pos > 0.0
        })
        .count();
    // binomial(400, 1/2) has standard deviation 10
    assert!(
        (positive as i64 - 200).abs() <= 40,
        "{positive} positive draws"
    );
}

#[test]
fn dropped_units_stay_silent_in_every_phase() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masks: Vec<_> = p
        .net
        .geometry()
        .iter()
        .map(|g| Some(dropout_mask(&g.batched_shape(2), 0.5, &mut rng).unwrap()))
        .collect();
    let d = Dynamics::new(&p.net, &p.params, &p.x)
        .unwrap()
        .with_masks(&masks)
        .unwrap();
    let free = d.free(30).unwrap().state;
    let pos = d
        .run(
            &free,
            10,
            Some(Nudge {
                beta: 0.7,
                target: &p.y,
            }),
        )
        .unwrap()
        .state;
    let neg = d
        .run(
            &free,
            10,
            Some(Nudge {
                beta: -0.7,
                target: &p.y,
            }),
        )
        .unwrap()
        .state;
    let mut dropped = 0;
    for s in [&free, &pos, &neg] {
        for (layer, m) in s.layers.iter().zip(&masks) {
            for (v, k) in layer.data().iter().zip(m.as_ref().unwrap().data()) {
                if *k == 0.0 {
                    assert_eq!(*v, 0.0);
                    dropped += 1;
                }
            }
        }
    }
    assert!(dropped > 0);
    // effective states are the masked ones and feed the estimate unchanged
    let eff = d.effective(&free).unwrap();
    for (e, (s, m)) in eff.layers.iter().zip(free.layers.iter().zip(&masks)) {
        assert_eq!(e, &s.mul(m.as_ref().unwrap()).unwrap());
    }
}

#[test]
fn finite_differences_need_settled_dynamics() {
    let p = toy::problem(LossHead::SquaredError, Connection::Bidirectional, 1);
    // three steps cannot reach a residual of 1e-12
    assert!(finite_diff_loss_grad(&p.net, &p.params, &p.x, &p.y, 3, 1e-6, 1e-12).is_err());
    assert!(finite_diff_loss_grad(&p.net, &p.params, &p.x, &p.y, 200, 0.0, 1e-12).is_err());
    let zero = ParamSet::zeros_like(&p.params);
    assert_eq!(relative_error(&zero, &zero).unwrap(), 0.0);
}

#[test]
fn vector_field_halves_add_up_to_the_symmetric_estimate() {
    // fc-only network with tied weights: the forward and feedback halves of
    // the vector-field rule split the product rule of the symmetric estimate
    let arch = eqprop::ArchitectureConfig {
        input: [1, 3, 3],
        conv: vec![],
        fc: vec![6, 5],
        classes: 3,
        activation: eqprop::ops::Activation::HardSigmoidHalf,
        head: LossHead::SoftmaxReadout,
        connection: Connection::Unidirectional,
    };
    let mut p = toy::problem_for(arch, 8).unwrap();
    p.params.tie_backward_to_forward();
    let beta = 1e-3;
    let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
    let free = d.free(100).unwrap().state;
    let pos = d
        .run(&free, 60, Some(Nudge { beta, target: &p.y }))
        .unwrap()
        .state;
    let neg = d
        .run(
            &free,
            60,
            Some(Nudge {
                beta: -beta,
                target: &p.y,
            }),
        )
        .unwrap()
        .state;
    let vf = estimate_vf_sym(
        &EstimatorContext::from_dynamics(&d, &p.y),
        &free,
        &pos,
        &neg,
        beta,
    )
    .unwrap();

    let (bnet, bparams) = as_bidirectional(&p);
    let bd = Dynamics::new(&bnet, &bparams, &p.x).unwrap();
    let bpos = bd
        .run(&free, 60, Some(Nudge { beta, target: &p.y }))
        .unwrap()
        .state;
    let bneg = bd
        .run(
            &free,
            60,
            Some(Nudge {
                beta: -beta,
                target: &p.y,
            }),
        )
        .unwrap()
        .state;
    let sym = estimate_symmetric(
        &EstimatorContext::from_dynamics(&bd, &p.y),
        &bpos,
        &bneg,
        beta,
    )
    .unwrap();

    for (n, (v, s)) in vf.layers.iter().zip(&sym.layers).enumerate() {
        let combined = match &v.backward {
            Some(b) => v.weight.add(b).unwrap(),
            None => v.weight.clone(),
        };
        let rel = combined.sub(&s.weight).unwrap().norm() / s.weight.norm();
        assert!(rel < 1e-3, "layer {n}: {rel:e}");
        let rel_b = v.bias.sub(&s.bias).unwrap().norm() / s.bias.norm();
        assert!(rel_b < 1e-3, "layer {n} bias: {rel_b:e}");
    }
}

#[test]
fn symmetric_error_quarters_at_small_nudges() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    let budget = Budget {
        free_steps: 200,
        nudged_steps: 100,
        tolerance: 1e-12,
        eps: 1e-6,
    };
    let rows = beta_sweep(&p.net, &p.params, &p.x, &p.y, &[0.1, 0.05, 0.025], budget).unwrap();
    for (one, sym) in halving_ratios(&rows) {
        assert!((0.2..=0.35).contains(&sym), "symmetric ratio {sym}");
        assert!((0.4..=0.6).contains(&one), "one-sided ratio {one}");
    }
}
