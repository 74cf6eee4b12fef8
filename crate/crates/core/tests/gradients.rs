use eqprop::oracles::{
    bptt_gradient, finite_diff_loss_grad, gdu_curves, max_relative_deviation, relative_error,
};
use eqprop::{toy, Connection, Dynamics, LossHead};

#[test]
fn bptt_matches_finite_differences_at_equilibrium() {
    for head in [LossHead::SquaredError, LossHead::SoftmaxReadout] {
        for connection in [Connection::Bidirectional, Connection::Unidirectional] {
            let mut p = toy::problem(head, connection, 1);
            p.params.tie_backward_to_forward();
            let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
            let g = bptt_gradient(&d, &p.y, 200, false).unwrap().total;
            let fd =
                finite_diff_loss_grad(&p.net, &p.params, &p.x, &p.y, 200, 1e-6, 1e-12).unwrap();
            let err = relative_error(&g, &fd).unwrap();
            assert!(err <= 1e-6, "{head:?} {connection:?}: {err:e}");
        }
    }
}

#[test]
fn bptt_is_exact_for_short_horizons_with_untied_feedback() {
    // away from equilibrium the loss after exactly T steps is still a smooth
    // function of the weights; feedback weights get their own gradient
    for head in [LossHead::SquaredError, LossHead::SoftmaxReadout] {
        let p = toy::problem(head, Connection::Unidirectional, 6);
        let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
        for steps in [1, 2, 5] {
            let g = bptt_gradient(&d, &p.y, steps, false).unwrap().total;
            let fd =
                finite_diff_loss_grad(&p.net, &p.params, &p.x, &p.y, steps, 1e-6, f64::INFINITY)
                    .unwrap();
            let floor = 1e-4 * fd.max_abs();
            let dev = max_relative_deviation(&g, &fd, floor).unwrap();
            assert!(dev <= 1e-5, "{head:?} T = {steps}: {dev:e}");
        }
    }
}

#[test]
fn truncated_sums_recover_the_total() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 2);
    let d = Dynamics::new(&p.net, &p.params, &p.x).unwrap();
    let steps = 30;
    let g = bptt_gradient(&d, &p.y, steps, true).unwrap();
    assert_eq!(g.per_step.len(), steps);
    let zero = g.truncated(0).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
    let mut all = g.truncated(steps).unwrap();
    // per-step parts leave the readout out
    let mut expected = g.total.clone();
    expected.readout = expected.readout.map(|r| r.scale(0.0));
    all.axpy(-1.0, &expected).unwrap();
    assert!(all.max_abs() <= 1e-12 * g.total.max_abs());
    assert!(g.truncated(steps + 1).is_err());
    // truncations grow by exactly one step
    let mut diff = g.truncated(5).unwrap();
    diff.axpy(-1.0, &g.truncated(4).unwrap()).unwrap();
    let mut want = g.per_step[steps - 5].clone();
    want.axpy(-1.0, &diff).unwrap();
    assert!(want.max_abs() <= 1e-14 * g.total.max_abs().max(1.0));
}

#[test]
fn truncated_estimates_track_truncated_bptt_for_small_nudges() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    let curve = gdu_curves(&p.net, &p.params, &p.x, &p.y, 60, 15, 0.01).unwrap();
    assert_eq!(curve.len(), 16);
    // layer n only sees the nudge after reaching it through n steps
    for t in p.net.num_layers()..=15 {
        for c in curve.layer_cosines(t, true) {
            assert!(c > 0.9999, "t = {t}: {c}");
        }
    }
    // both sides vanish at t = 0
    assert_eq!(curve.symmetric[0].max_abs(), 0.0);
    assert_eq!(curve.bptt[0].max_abs(), 0.0);
    let mut csv = Vec::new();
    curve.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + curve.rows().len());
}

#[test]
fn gdu_rejects_feedback_networks_and_long_nudges() {
    let uni = toy::problem(LossHead::SoftmaxReadout, Connection::Unidirectional, 1);
    assert!(gdu_curves(&uni.net, &uni.params, &uni.x, &uni.y, 20, 5, 0.1).is_err());
    let bi = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    assert!(gdu_curves(&bi.net, &bi.params, &bi.x, &bi.y, 5, 6, 0.1).is_err());
}

#[test]
fn bptt_refuses_dropout() {
    let p = toy::problem(LossHead::SoftmaxReadout, Connection::Bidirectional, 1);
    let masks: Vec<_> = p.net.geometry().iter().map(|_| None).collect();
    let d = Dynamics::new(&p.net, &p.params, &p.x)
        .unwrap()
        .with_masks(&masks)
        .unwrap();
    assert!(bptt_gradient(&d, &p.y, 5, false).is_err());
}
