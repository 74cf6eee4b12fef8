use eqprop::data::synthetic;
use eqprop::train::{
    alignment_angle, alignment_angles, cosine_lr, dropout_mask, kp_step, sgd_step, train,
    Precision, RunOutput,
};
use eqprop::{
    toy, Checkpoint, Connection, EstimatorKind, GradientMethod, LossHead, Network, OptimizerState,
    ParamSet, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ce_net(connection: Connection) -> Network {
    Network::new(toy::architecture(LossHead::SoftmaxReadout, connection)).unwrap()
}

fn filled(like: &ParamSet, v: f64) -> ParamSet {
    like.map(|t| Tensor::full(t.shape(), v))
}

#[test]
fn sgd_accumulates_momentum() {
    let net = ce_net(Connection::Bidirectional);
    let params = net.init_params(1);
    let est = filled(&params, 0.5);
    let lrs = [0.1, 0.2, 0.3];
    let mut opt = OptimizerState::new(&params, &lrs);
    let mut p = params.clone();
    sgd_step(&mut p, &est, &mut opt, 0.9, 0.0, true).unwrap();
    let once = p.clone();
    sgd_step(&mut p, &est, &mut opt, 0.9, 0.0, true).unwrap();
    let groups = params.groups();
    for (((a, b), c), g) in params
        .tensors()
        .into_iter()
        .zip(once.tensors())
        .zip(p.tensors())
        .zip(groups)
    {
        let eta = lrs[g];
        for ((x0, x1), x2) in a.data().iter().zip(b.data()).zip(c.data()) {
            assert!((x1 - x0 - eta * 0.5).abs() < 1e-15);
            assert!((x2 - x1 - eta * 1.9 * 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn weight_decay_skips_biases_on_request() {
    let net = ce_net(Connection::Bidirectional);
    let params = net.init_params(2);
    let zero = ParamSet::zeros_like(&params);
    let mut opt = OptimizerState::new(&params, &[0.1; 3]);
    let mut p = params.clone();
    sgd_step(&mut p, &zero, &mut opt, 0.0, 0.5, false).unwrap();
    for ((name, before), after) in params.named().into_iter().zip(p.tensors()) {
        let expected = if name.ends_with(".bias") {
            before.clone()
        } else {
            before.scale(0.95)
        };
        assert!(after.max_abs_diff(&expected).unwrap() < 1e-15, "{name}");
    }
    // without decay a zero estimate leaves the parameters alone
    let mut q = params.clone();
    sgd_step(
        &mut q,
        &zero,
        &mut OptimizerState::new(&params, &[0.1; 3]),
        0.9,
        0.0,
        true,
    )
    .unwrap();
    assert_eq!(q, params);
}

#[test]
fn updates_reject_malformed_estimates() {
    let net = ce_net(Connection::Bidirectional);
    let mut params = net.init_params(2);
    let mut bad = filled(&params, 1.0);
    bad.layers[0].bias.data_mut()[0] = f64::NAN;
    let mut opt = OptimizerState::new(&params, &[0.1; 3]);
    assert!(sgd_step(&mut params, &bad, &mut opt, 0.9, 0.0, true).is_err());
    let mut opt = OptimizerState::new(&params, &[0.1; 2]);
    let ones = filled(&params, 1.0);
    assert!(sgd_step(&mut params, &ones, &mut opt, 0.9, 0.0, true).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.1, 0.001, 0, 10).unwrap(), 0.1);
    assert!((cosine_lr(0.1, 0.001, 5, 10).unwrap() - 0.0505).abs() < 1e-15);
    assert!((cosine_lr(0.1, 0.001, 10, 10).unwrap() - 0.001).abs() < 1e-15);
    assert!((cosine_lr(0.1, 0.001, 50, 10).unwrap() - 0.001).abs() < 1e-15);
    assert!(cosine_lr(0.1, 0.001, 0, 0).is_err());
    let mut prev = f64::INFINITY;
    for e in 0..=10 {
        let lr = cosine_lr(1.0, 0.0, e, 10).unwrap();
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn kolen_pollack_decays_the_weight_gap_geometrically() {
    let net = ce_net(Connection::Unidirectional);
    let mut params = net.init_params(3);
    let zero = ParamSet::zeros_like(&params);
    let (eta, lambda) = (0.1, 0.2);
    let gap0 = params.layers[1]
        .weight
        .sub(params.layers[1].backward.as_ref().unwrap())
        .unwrap();
    for _ in 0..50 {
        kp_step(&mut params, &zero, &[eta; 3], lambda).unwrap();
    }
    let gap = params.layers[1]
        .weight
        .sub(params.layers[1].backward.as_ref().unwrap())
        .unwrap();
    let expected = gap0.scale((1.0 - eta * lambda).powi(50));
    assert!(gap.max_abs_diff(&expected).unwrap() <= 1e-12 * expected.max_abs());

    let mut unshared = zero.clone();
    unshared.layers[1].weight = Tensor::full(unshared.layers[1].weight.shape(), 1.0);
    assert!(kp_step(&mut params, &unshared, &[eta; 3], lambda).is_err());
    let mut bi = ce_net(Connection::Bidirectional).init_params(3);
    let bz = ParamSet::zeros_like(&bi);
    assert!(kp_step(&mut bi, &bz, &[eta; 3], lambda).is_err());
}

#[test]
fn dropout_masks_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = 0.3;
    let n = 100_000;
    let m = dropout_mask(&[n], p, &mut rng).unwrap();
    let mean = m.sum() / n as f64;
    let keep = 1.0 / (1.0 - p);
    assert!(m.data().iter().all(|&v| v == 0.0 || v == keep));
    // each entry has variance p / (1 - p)
    let sd = (p / (1.0 - p) / n as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * sd, "mean {mean}");
    let ones = dropout_mask(&[1000], 0.0, &mut rng).unwrap();
    assert!(ones.data().iter().all(|&v| v == 1.0));
    assert!(dropout_mask(&[3], 1.0, &mut rng).is_err());
    assert!(dropout_mask(&[3], -0.1, &mut rng).is_err());
}

#[test]
fn alignment_angles_of_simple_pairs() {
    let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
    assert!(alignment_angle(&a, &a.scale(3.0)).unwrap().abs() < 1e-6);
    assert!((alignment_angle(&a, &a.scale(-1.0)).unwrap() - 180.0).abs() < 1e-6);
    assert!((alignment_angle(&a, &b).unwrap() - 90.0).abs() < 1e-12);
    assert!(alignment_angle(&a, &Tensor::zeros(&[2])).is_err());
    let net = ce_net(Connection::Unidirectional);
    let mut params = net.init_params(0);
    assert_eq!(alignment_angles(&params).unwrap().len(), 1);
    params.tie_backward_to_forward();
    assert!(alignment_angles(&params).unwrap()[0].1.abs() < 1e-6);
}

fn small_run(kind: EstimatorKind, connection: Connection, seed: u64) -> eqprop::Hyperparams {
    let mut hp = toy::training_hyperparams(kind, 0.5, seed);
    hp.epochs = 3;
    hp.cosine_decay_epochs = 3;
    if connection == Connection::Unidirectional {
        hp.weight_decay = 1e-3;
    }
    hp
}

#[test]
fn training_reduces_the_loss() {
    let all = synthetic(512, [1, 8, 8], 3, 0.3, 21);
    let (tr, te) = (
        all.subset(&(0..448).collect::<Vec<_>>()),
        all.subset(&(448..512).collect::<Vec<_>>()),
    );
    for (kind, connection) in [
        (EstimatorKind::Symmetric, Connection::Bidirectional),
        (EstimatorKind::OneSided, Connection::Bidirectional),
        (EstimatorKind::VfSym, Connection::Unidirectional),
    ] {
        let net = ce_net(connection);
        let hp = small_run(kind, connection, 1);
        let report = train(&net, &hp, &tr, &te, None, &RunOutput::default(), |_| {}).unwrap();
        let first = report.history.first().unwrap().train_loss;
        let last = report.history.last().unwrap().train_loss;
        assert!(last < first, "{kind:?}: {first} -> {last}");
        assert!(report.history.last().unwrap().test_err < 0.5, "{kind:?}");
        assert!(!report.collapsed);
    }
}

#[test]
fn bptt_baseline_trains() {
    let (tr, te) = toy::task();
    let net = ce_net(Connection::Bidirectional);
    let mut hp = small_run(EstimatorKind::Symmetric, Connection::Bidirectional, 2);
    hp.estimator = GradientMethod::Bptt;
    let report = train(&net, &hp, &tr, &te, None, &RunOutput::default(), |_| {}).unwrap();
    assert!(report.history.last().unwrap().train_loss < report.history[0].train_loss);
}

#[test]
fn runs_are_reproducible_and_logged() {
    let (tr, te) = toy::task();
    let net = ce_net(Connection::Bidirectional);
    let mut hp = small_run(EstimatorKind::RandomSign, Connection::Bidirectional, 5);
    hp.dropout = 0.2;
    hp.augment.hflip = true;
    hp.checkpoint_every = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    let mut iters = 0;
    for d in &dirs {
        let out = RunOutput {
            dir: Some(d.path().join("run")),
        };
        let report = train(&net, &hp, &tr, &te, None, &out, |e| {
            iters = e.iter;
            assert!(e.masks.is_some());
        })
        .unwrap();
        assert_eq!(report.history.len(), 3);
        logs.push(std::fs::read_to_string(out.metrics_path().unwrap()).unwrap());
        let ck = Checkpoint::load(&out.checkpoint_path(2).unwrap()).unwrap();
        assert_eq!(ck.epoch, 2);
        let fin = Checkpoint::load(&out.final_checkpoint_path().unwrap()).unwrap();
        assert_eq!(fin.params, report.params);
        assert!(!out.checkpoint_path(3).unwrap().exists());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(iters, 3 * 12);
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("epoch,iter,phase_residual_free"));
    let cols = lines[0].split(',').count();
    let mut last_iter = 0;
    for (i, row) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), cols);
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        let it: usize = f[1].parse().unwrap();
        assert!(it > last_iter);
        last_iter = it;
    }
    // a different seed gives a different run
    let mut other = hp.clone();
    other.seed = 6;
    let r = train(&net, &other, &tr, &te, None, &RunOutput::default(), |_| {}).unwrap();
    let csv: Vec<String> = r.history.iter().map(|m| m.csv_row()).collect();
    assert_ne!(csv.join("\n"), lines[1..].join("\n"));
}

#[test]
fn single_precision_keeps_parameters_representable() {
    let (tr, te) = toy::task();
    let net = ce_net(Connection::Bidirectional);
    let mut hp = small_run(EstimatorKind::Symmetric, Connection::Bidirectional, 3);
    hp.epochs = 1;
    hp.precision = Precision::F32;
    let report = train(&net, &hp, &tr, &te, None, &RunOutput::default(), |e| {
        for t in e.params.tensors() {
            assert!(t.data().iter().all(|&v| v as f32 as f64 == v));
        }
    })
    .unwrap();
    assert!(report.history[0].train_loss.is_finite());
}

#[test]
fn training_validates_its_settings() {
    let (tr, te) = toy::task();
    let net = ce_net(Connection::Bidirectional);
    let mut hp = small_run(EstimatorKind::VfSym, Connection::Bidirectional, 3);
    assert!(train(&net, &hp, &tr, &te, None, &RunOutput::default(), |_| {}).is_err());
    hp.estimator = GradientMethod::Ep(EstimatorKind::Symmetric);
    hp.learning_rates = vec![0.1, 0.1];
    assert!(train(&net, &hp, &tr, &te, None, &RunOutput::default(), |_| {}).is_err());
    hp.learning_rates = vec![0.1; 3];
    hp.beta = 0.0;
    assert!(train(&net, &hp, &tr, &te, None, &RunOutput::default(), |_| {}).is_err());
}
