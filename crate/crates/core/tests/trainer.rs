use rifle_core::data::{make_synth_classification, Dataset, SynthSpec};
use rifle_core::graph::{init_params, mlp, LossKind, Perturbations};
use rifle_core::oracle::{make_oracles, oracle_output, synth_dataset, OracleSpec};
use rifle_core::regularizers::RegularizerKind;
use rifle_core::schedules::{PolicyConfig, Strategy};
use rifle_core::tensor::gaussian_init;
use rifle_core::trainer::{evaluate, grad_norm_probe, train, train_observed, TrainConfig};
use rifle_core::{Error, ParamStore, Rng, Tensor};

fn synth(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> (Dataset, Dataset) {
    let t = make_synth_classification(&SynthSpec {
        num_classes: classes,
        per_class,
        test_per_class: None,
        dim,
        separation,
        seed,
    })
    .unwrap();
    (t.target_train, t.target_test)
}

fn config(strategy: Strategy, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        regularizer: RegularizerKind::l2(0.0),
        policy: PolicyConfig::new(strategy),
        ..TrainConfig::default()
    }
}

fn fresh(model: &rifle_core::graph::Model, seed: u64) -> ParamStore {
    let mut p = init_params(model, &mut Rng::new(seed), 0.01).unwrap();
    p.freeze_start_point();
    p
}

#[test]
fn separable_blobs_reach_full_train_accuracy() {
    let (train_set, test_set) = synth(2, 50, 4, 6.0, 0);
    // Each class is two blobs, so a hidden layer is needed.
    let model = mlp(4, &[16], 2, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = fresh(&model, 1);
    let tel = train(&model, &mut params, &train_set, &test_set, &config(Strategy::None, 40)).unwrap();
    assert_eq!(tel.len(), 40);
    assert_eq!(evaluate(&model, &params, &train_set).unwrap().top1, 1.0);
}

#[test]
fn rifle_resets_mark_telemetry_and_cost_accuracy() {
    let (train_set, test_set) = synth(10, 20, 16, 4.0, 3);
    let model = mlp(16, &[32], 10, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = fresh(&model, 0);
    let cfg = config(Strategy::Rifle, 12);
    let tel = train(&model, &mut params, &train_set, &test_set, &cfg).unwrap();
    let bpe = cfg.batches_per_epoch(train_set.len());
    let period = cfg.schedule(train_set.len()).unwrap().period;
    let resets: Vec<usize> = tel.iter().filter(|r| r.reset_event).map(|r| r.epoch).collect();
    assert_eq!(resets, vec![1, 4, 7, 10]);
    for r in &tel {
        assert_eq!(r.step, (r.epoch - 1) * bpe);
        assert_eq!(r.reset_event, r.step % period == 0);
    }
    for &e in &resets[1..] {
        let (now, before) = (tel[e - 1].train_top1, tel[e - 2].train_top1);
        assert!(now < before, "epoch {e}: {now} vs {before}");
    }
}

#[test]
fn identical_runs_are_bitwise_equal() {
    let (train_set, test_set) = synth(4, 15, 8, 3.0, 2);
    let pert = Perturbations {
        dropout_hidden: Some(0.2),
        ..Default::default()
    };
    let model = mlp(8, &[12], 4, LossKind::SoftmaxCe, &pert).unwrap();
    let mut cfg = config(Strategy::Rifle, 8);
    cfg.seed = 11;
    cfg.probe_layers = vec!["fc1.weight".into()];
    let run = || {
        let mut p = fresh(&model, 5);
        let tel = train(&model, &mut p, &train_set, &test_set, &cfg).unwrap();
        (p, tel)
    };
    let (pa, ta) = run();
    let (pb, tb) = run();
    assert!(pa.bitwise_eq(&pb));
    assert_eq!(format!("{ta:?}"), format!("{tb:?}"));
    cfg.seed = 12;
    let mut pc = fresh(&model, 5);
    train(&model, &mut pc, &train_set, &test_set, &cfg).unwrap();
    assert!(!pa.bitwise_eq(&pc));
}

fn linear_problem(n: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = Rng::new(seed);
    let x = gaussian_init(&[n, d], 0.0, 1.0, &mut rng).unwrap();
    let w = gaussian_init(&[d, 1], 0.0, 1.0, &mut rng).unwrap();
    let y = x.matmul(&w).unwrap();
    (x, w, y)
}

#[test]
fn probe_matches_closed_form_linear_gradient() {
    let (n, d) = (13, 5);
    let (x, _, _) = linear_problem(n, d, 0);
    let mut rng = Rng::new(9);
    let y = gaussian_init(&[n, 1], 0.0, 1.0, &mut rng).unwrap();
    let model = mlp(d, &[], 1, LossKind::Mse, &Perturbations::default()).unwrap();
    let mut params = init_params(&model, &mut rng, 1.0).unwrap();
    let w = params.get("head.weight").unwrap().clone();
    params.set("head.bias", Tensor::zeros(&[1])).unwrap();
    let norms = grad_norm_probe(&model, &params, &x, &y, &["head.weight".into()]).unwrap();
    // ∇ = 2 Xᵀ(Xω − y) / n
    let r = x.matmul(&w).unwrap();
    let mut expected = 0.0f64;
    for j in 0..d {
        let g: f64 = (0..n)
            .map(|i| x.data()[i * d + j] * (r.data()[i] - y.data()[i]))
            .sum::<f64>()
            * 2.0
            / n as f64;
        expected += g * g;
    }
    let expected = expected.sqrt();
    assert_eq!(norms.len(), 1);
    assert!(
        (norms[0].1 - expected).abs() / expected < 1e-10,
        "{} vs {expected}",
        norms[0].1
    );
}

#[test]
fn probe_vanishes_at_interpolation_point() {
    let (x, w, y) = linear_problem(20, 6, 1);
    let model = mlp(6, &[], 1, LossKind::Mse, &Perturbations::default()).unwrap();
    let mut params = init_params(&model, &mut Rng::new(0), 1.0).unwrap();
    params.set("head.weight", w).unwrap();
    let norms = grad_norm_probe(&model, &params, &x, &y, &["head.*".into()]).unwrap();
    assert_eq!(norms.len(), 2);
    for (name, v) in norms {
        assert!(v < 1e-8, "{name}: {v:e}");
    }
}

#[test]
fn convex_full_batch_loss_never_increases() {
    let (x, _, _) = linear_problem(40, 4, 2);
    let y = gaussian_init(&[40, 1], 0.0, 1.0, &mut Rng::new(3)).unwrap();
    let data = Dataset::regression(x, y).unwrap();
    let model = mlp(4, &[], 1, LossKind::Mse, &Perturbations::default()).unwrap();
    let mut params = fresh(&model, 4);
    let cfg = TrainConfig {
        batch_size: 40,
        momentum: 0.0,
        eta_max: 0.05,
        ..config(Strategy::None, 60)
    };
    let tel = train(&model, &mut params, &data, &data, &cfg).unwrap();
    for w in tel.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss, "epoch {}", w[1].epoch);
        assert!(w[1].test_loss <= w[0].test_loss, "epoch {}", w[1].epoch);
    }
}

#[test]
fn backbone_moves_every_iteration_under_rifle() {
    let (train_set, test_set) = synth(3, 10, 6, 3.0, 4);
    let model = mlp(6, &[8], 3, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = fresh(&model, 2);
    let mut cfg = config(Strategy::Rifle, 4);
    cfg.batch_size = 10;
    let fc1 = params.index_of("fc1.weight").unwrap();
    let mut last = params.value(fc1).clone();
    let mut seen = 0;
    train_observed(&model, &mut params, &train_set, &test_set, &cfg, |t, p| {
        assert!(!p.value(fc1).bitwise_eq(&last), "backbone frozen at iteration {t}");
        last = p.value(fc1).clone();
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 4 * 3);
}

#[test]
fn evaluate_reference_cases() {
    // Perfect predictor: logits are one-hot scaled copies of the input.
    let labels = Tensor::from_vec(vec![0.0, 2.0, 1.0, 2.0]);
    let mut x = Tensor::zeros(&[4, 3]);
    for (i, &y) in labels.data().iter().enumerate() {
        x.data_mut()[i * 3 + y as usize] = 1.0;
    }
    let data = Dataset::classification(x.clone(), labels.clone(), 3).unwrap();
    let model = mlp(3, &[], 3, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = init_params(&model, &mut Rng::new(0), 0.01).unwrap();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 10.0;
    }
    params.set("head.weight", eye).unwrap();
    assert_eq!(evaluate(&model, &params, &data).unwrap().top1, 1.0);

    // Constant logits on a balanced set: ties go to class 0.
    let c = 5;
    let balanced = Tensor::from_vec((0..20).map(|i| (i % c) as f64).collect());
    let feats = gaussian_init(&[20, 3], 0.0, 1.0, &mut Rng::new(1)).unwrap();
    let data = Dataset::classification(feats, balanced, c).unwrap();
    let model = mlp(3, &[], c, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = init_params(&model, &mut Rng::new(0), 0.01).unwrap();
    params.set("head.weight", Tensor::zeros(&[3, c])).unwrap();
    let m = evaluate(&model, &params, &data).unwrap();
    assert_eq!(m.top1, 1.0 / c as f64);
    assert!((m.loss - (c as f64).ln()).abs() < 1e-12);

    // Noise-free oracle data under the true weights.
    let spec = OracleSpec::default();
    let o = make_oracles(&spec).unwrap();
    let data = synth_dataset(&o.w1, &o.w2, 200, 0.0, &mut Rng::new(2)).unwrap();
    let model = rifle_core::graph::oracle_mlp(spec.input_dim, spec.hidden_dim).unwrap();
    let mut params = init_params(&model, &mut Rng::new(0), 0.1).unwrap();
    params.set("hidden.weight", o.w1.clone()).unwrap();
    params.set("head.weight", o.w2.clone()).unwrap();
    assert_eq!(evaluate(&model, &params, &data).unwrap().top1, 0.0);
    let direct = oracle_output(data.features(), &o.w1, &o.w2).unwrap();
    assert!(direct.bitwise_eq(data.targets()));
}

#[test]
fn divergence_names_the_offending_layer() {
    let (train_set, test_set) = synth(3, 10, 6, 3.0, 4);
    let model = mlp(6, &[8], 3, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = fresh(&model, 2);
    let cfg = TrainConfig {
        eta_max: 1e300,
        ..config(Strategy::None, 5)
    };
    match train(&model, &mut params, &train_set, &test_set, &cfg) {
        Err(Error::NonFinite { layer, .. }) => assert!(!layer.is_empty()),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn unfrozen_start_point_is_rejected() {
    let (train_set, test_set) = synth(3, 10, 6, 3.0, 4);
    let model = mlp(6, &[8], 3, LossKind::SoftmaxCe, &Perturbations::default()).unwrap();
    let mut params = init_params(&model, &mut Rng::new(0), 0.01).unwrap();
    let err = train(&model, &mut params, &train_set, &test_set, &config(Strategy::None, 1)).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
}
