use jkoflow::datagen::{make_potential_dataset, make_trajectory_dataset, PotentialKind, PotentialOptions, Split, TrajectoryKind};
use jkoflow::energy::{energy_grid, grid_argmin, GridSpec, Mlp, Potential, QuadraticPotential};
use jkoflow::forward::forward_step;
use jkoflow::icnn::{IcnnConfig, IcnnParams};
use jkoflow::jko::{jko_step, JkoConfig};
use jkoflow::ot::SinkhornOptions;
use jkoflow::trainer::{
    fit, outer_gradient, predict_trajectory, train, train_forward, train_jkonet, Model, ModelKind, PredictMode,
    TrainConfig,
};
use jkoflow::{Error, GeneratorInfo, PointCloud, SnapshotDataset};
use jkoflow_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_cloud(seed: u64, n: usize, d: usize, scale: f64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(d, (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn dataset(snaps: Vec<PointCloud>) -> SnapshotDataset {
    let ts = (0..snaps.len()).map(|t| t as f64).collect();
    let gen = GeneratorInfo {
        kind: "custom".into(),
        params: serde_json::Value::Null,
    };
    SnapshotDataset::new("test", snaps, ts, gen, 0, "train").unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        icnn_width: 8,
        icnn_depth: 2,
        energy_hidden: 8,
        epochs: 2,
        jko: JkoConfig {
            min_iters: 10,
            max_iters: 10,
            ..JkoConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn global_norm(g: &[Tensor]) -> f64 {
    g.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[test]
fn gradient_vanishes_when_prediction_matches() {
    let cfg = small_cfg();
    let nu = random_cloud(1, 12, 2, 1.0);
    let theta0 = IcnnParams::init(cfg.icnn(2), 3).unwrap();
    let e = Mlp::init(&[2, 8, 8, 1], 5).unwrap();

    let target = forward_step(&e, &nu).unwrap();
    let s = outer_gradient(ModelKind::Forward, &e, &theta0, &nu, &target, &cfg).unwrap();
    assert!(s.loss.abs() < 1e-9, "{}", s.loss);
    assert!(global_norm(&s.grads) < 1e-4);

    let target = jko_step(&e, &nu, &theta0, &cfg.jko).unwrap().next;
    let s = outer_gradient(ModelKind::Jkonet, &e, &theta0, &nu, &target, &cfg).unwrap();
    assert!(s.loss.abs() < 1e-9, "{}", s.loss);
    assert!(global_norm(&s.grads) < 1e-4, "{}", global_norm(&s.grads));
}

#[test]
fn outer_gradient_matches_finite_differences() {
    let mut cfg = small_cfg();
    cfg.clip_norm = 1e12;
    cfg.jko.min_iters = 5;
    cfg.jko.max_iters = 5;
    cfg.jko.lr = 0.05;
    cfg.sinkhorn = SinkhornOptions {
        marginal_tol: 1e-13,
        max_iter: 200_000,
    };
    let nu = PointCloud::new(1, vec![-0.7, 1.1]).unwrap();
    let target = PointCloud::new(1, vec![0.2, 2.4]).unwrap();
    let theta0 = IcnnParams::init(IcnnConfig::new(1, 4, 2), 2).unwrap();
    let e = Mlp::init(&[1, 6, 6, 1], 8).unwrap();
    let s = outer_gradient(ModelKind::Jkonet, &e, &theta0, &nu, &target, &cfg).unwrap();

    let loss_at = |delta: f64, block: usize, idx: usize| {
        let mut blocks = e.blocks().to_vec();
        let mut data = blocks[block].data().to_vec();
        data[idx] += delta;
        blocks[block] = Tensor::new(blocks[block].shape().to_vec(), data).unwrap();
        let mut p = e.clone();
        p.set_blocks(blocks).unwrap();
        outer_gradient(ModelKind::Jkonet, &p, &theta0, &nu, &target, &cfg).unwrap().loss
    };
    let h = 1e-5;
    let mut checked = 0;
    for (block, idx) in [(0, 2), (2, 7), (4, 3), (1, 1)] {
        let fd = (loss_at(h, block, idx) - loss_at(-h, block, idx)) / (2.0 * h);
        let an = s.grads[block].data()[idx];
        if fd.abs() < 1e-8 && an.abs() < 1e-8 {
            continue;
        }
        let rel = (fd - an).abs() / fd.abs().max(an.abs());
        assert!(rel < 1e-2, "block {block}[{idx}]: analytic {an} vs fd {fd}");
        checked += 1;
    }
    assert!(checked >= 2);
}

#[test]
fn clipping_bounds_norm_and_keeps_direction() {
    let nu = random_cloud(2, 10, 2, 1.0);
    let target = random_cloud(3, 10, 2, 2.0);
    let e = Mlp::init(&[2, 8, 8, 1], 1).unwrap();
    let theta0 = IcnnParams::init(IcnnConfig::new(2, 8, 2), 4).unwrap();
    let mut cfg = small_cfg();
    cfg.clip_norm = 1e12;
    let free = outer_gradient(ModelKind::Jkonet, &e, &theta0, &nu, &target, &cfg).unwrap();
    let raw = global_norm(&free.grads);
    assert!((free.pre_clip_norm - raw).abs() <= 1e-12 * raw);
    cfg.clip_norm = raw / 10.0;
    let clipped = outer_gradient(ModelKind::Jkonet, &e, &theta0, &nu, &target, &cfg).unwrap();
    assert!((global_norm(&clipped.grads) - cfg.clip_norm).abs() <= 1e-12 * cfg.clip_norm);
    assert_eq!(clipped.pre_clip_norm, free.pre_clip_norm);
    for (a, b) in clipped.grads.iter().zip(&free.grads) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * 10.0 - y).abs() <= 1e-12 * raw);
        }
    }
}

#[test]
fn clipping_reaches_the_bound() {
    let mut g = vec![Tensor::row(vec![60.0, 0.0]).unwrap(), Tensor::row(vec![80.0]).unwrap()];
    let pre = jkoflow::optim::clip_global_norm(&mut g, 10.0);
    assert_eq!(pre, 100.0);
    assert!((global_norm(&g) - 10.0).abs() < 1e-12);
}

#[test]
fn unroll_is_required() {
    let mut cfg = small_cfg();
    cfg.jko.unroll = false;
    let c = random_cloud(1, 5, 2, 1.0);
    let e = Mlp::init(&[2, 8, 8, 1], 1).unwrap();
    let theta0 = IcnnParams::init(cfg.icnn(2), 0).unwrap();
    assert!(outer_gradient(ModelKind::Jkonet, &e, &theta0, &c, &c, &cfg).is_err());
    assert!(outer_gradient(ModelKind::Forward, &e, &theta0, &c, &c, &cfg).is_ok());
}

#[test]
fn training_is_deterministic() {
    let ds = make_trajectory_dataset(TrajectoryKind::Line, 30, 0.5, 4, Split::Train).unwrap();
    let mut cfg = small_cfg();
    cfg.batch_size = 20;
    cfg.seed = 9;
    for kind in [ModelKind::Jkonet, ModelKind::Forward] {
        let a = train(kind, &[ds.clone()], &cfg, |_, _| Ok(())).unwrap();
        let b = train(kind, &[ds.clone()], &cfg, |_, _| Ok(())).unwrap();
        let la: Vec<u64> = a.log.iter().map(|l| l.loss.to_bits()).collect();
        let lb: Vec<u64> = b.log.iter().map(|l| l.loss.to_bits()).collect();
        assert_eq!(la, lb);
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 4);
    }
}

#[test]
fn teacher_forcing_is_moot_for_one_transition() {
    let ds = make_trajectory_dataset(TrajectoryKind::Line, 30, 0.5, 4, Split::Train)
        .unwrap()
        .subsample(2)
        .unwrap();
    assert_eq!(ds.transitions(), 1);
    let mut cfg = small_cfg();
    cfg.epochs = 3;
    let off = train_jkonet(&[ds.clone()], &cfg).unwrap();
    cfg.teacher_forcing = true;
    let on = train_jkonet(&[ds], &cfg).unwrap();
    assert_eq!(off.model.energy, on.model.energy);
    assert_eq!(off.log, on.log);
}

#[test]
fn teacher_forcing_matches_free_running_at_a_fixed_point() {
    // The identity map reproduces every snapshot, so both branches feed
    // identical inputs.
    let c = random_cloud(6, 15, 2, 1.0);
    let ds = dataset(vec![c.clone(), c.clone(), c.clone(), c]);
    let mut cfg = small_cfg();
    cfg.epochs = 3;
    // Adam rescales even a vanishing gradient, so only a step too small to
    // register keeps the identity in place.
    cfg.lr = 1e-300;
    let identity = QuadraticPotential::new(2, 0.5);
    let free = fit(ModelKind::Forward, identity.clone(), &[ds.clone()], &cfg, |_, _| Ok(())).unwrap();
    cfg.teacher_forcing = true;
    let forced = fit(ModelKind::Forward, identity, &[ds], &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(free.log, forced.log);
    assert_eq!(free.energy, forced.energy);
    assert_eq!(forced.energy.coefficient(), 0.5);
}

#[test]
fn forward_fit_recovers_a_linear_contraction() {
    // ∇(c‖x‖²) = 2cx reproduces x ↦ x/2 exactly when c = 1/4.
    let x0 = random_cloud(8, 40, 2, 2.0);
    let snaps: Vec<PointCloud> = (0..4)
        .map(|k| x0.map_points(|p, out| {
            for (o, v) in out.iter_mut().zip(p) {
                *o = v * 0.5f64.powi(k);
            }
        }))
        .collect();
    let ds = dataset(snaps);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 300,
        teacher_forcing: true,
        ..TrainConfig::default()
    };
    let out = fit(ModelKind::Forward, QuadraticPotential::new(2, 1.0), &[ds], &cfg, |_, _| Ok(())).unwrap();
    let c = out.best_energy.coefficient();
    assert!((c - 0.25).abs() < 0.01, "coefficient {c}");
}

#[test]
fn forward_training_loss_halves() {
    let ds = make_potential_dataset(PotentialKind::Quadratic, 200, 3, &PotentialOptions::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 250,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train_forward(&[ds], &cfg).unwrap();
    assert_eq!(out.log.len(), 1000);
    let at10 = out.log[9].loss;
    let min = out.log.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
    assert!(min <= 0.5 * at10, "step 10 loss {at10}, minimum {min}");
}

#[test]
fn jkonet_learns_the_quadratic_flow() {
    let ds = make_potential_dataset(PotentialKind::Quadratic, 100, 0, &PotentialOptions::default()).unwrap();
    let cfg = TrainConfig {
        icnn_width: 16,
        icnn_depth: 2,
        energy_hidden: 32,
        epochs: 250,
        ..TrainConfig::default()
    };
    let out = train_jkonet(&[ds.clone()], &cfg).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.loss).collect();
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min <= 0.5 * losses[9], "step 10 loss {}, minimum {min}", losses[9]);

    let rows = energy_grid(&out.model.energy, &GridSpec::square(4.0, 100)).unwrap();
    let [x, y] = grid_argmin(&rows).unwrap();
    assert!(x.hypot(y) < 0.5, "arg-min at ({x}, {y})");

    let traj = predict_trajectory(&out.model, &ds.snapshots()[0], 4, PredictMode::AllSteps, None).unwrap();
    let norms: Vec<f64> = traj.iter().map(PointCloud::mean_sq_norm).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
}

#[test]
fn prediction_edge_cases() {
    let cfg = small_cfg();
    let model = Model::new(ModelKind::Jkonet, 2, cfg).unwrap();
    let mu0 = random_cloud(1, 6, 2, 1.0);
    assert_eq!(predict_trajectory(&model, &mu0, 0, PredictMode::AllSteps, None).unwrap(), vec![mu0.clone()]);
    assert!(predict_trajectory(&model, &mu0, 2, PredictMode::OneStep, None).is_err());
    assert!(predict_trajectory(&model, &mu0, 2, PredictMode::OneStep, Some(&[mu0.clone()])).is_err());
    let one = predict_trajectory(&model, &mu0, 2, PredictMode::OneStep, Some(&[mu0.clone(), mu0.clone()])).unwrap();
    assert_eq!(one.len(), 3);
    // Conditioning on μ₀ twice gives the same step twice.
    assert_eq!(one[1], one[2]);
    let wrong_dim = random_cloud(1, 6, 3, 1.0);
    assert!(predict_trajectory(&model, &wrong_dim, 1, PredictMode::AllSteps, None).is_err());
}

#[test]
fn constant_energy_barely_moves_points() {
    let cfg = TrainConfig {
        icnn_width: 8,
        icnn_depth: 2,
        jko: JkoConfig {
            lr: 0.001,
            beta1: 0.9,
            min_iters: 10_000,
            max_iters: 10_000,
            ..JkoConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelKind::Jkonet, 2, cfg).unwrap();
    model.energy = Mlp::zeros(model.energy.sizes()).unwrap();
    let mu0 = random_cloud(3, 20, 2, 1.0);
    let traj = predict_trajectory(&model, &mu0, 3, PredictMode::AllSteps, None).unwrap();
    for rho in &traj[1..] {
        let disp = rho
            .points()
            .zip(mu0.points())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 20.0;
        assert!(disp < 3e-2, "mean displacement {disp}");
    }
}

#[test]
fn non_finite_parameters_abort_training() {
    let ds = make_trajectory_dataset(TrajectoryKind::Line, 10, 0.5, 4, Split::Train).unwrap();
    let mut e = Mlp::init(&[2, 8, 8, 1], 0).unwrap();
    let mut blocks = e.blocks().to_vec();
    blocks[4] = blocks[4].map(|_| f64::NAN);
    e.set_blocks(blocks).unwrap();
    let err = fit(ModelKind::Forward, e, &[ds], &small_cfg(), |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let ds = make_trajectory_dataset(TrajectoryKind::Line, 10, 0.5, 4, Split::Train).unwrap();
    let mut cfg = small_cfg();
    cfg.batch_size = 0;
    assert!(train_jkonet(&[ds.clone()], &cfg).is_err());
    assert!(train_jkonet(&[], &small_cfg()).is_err());
    let three_d = dataset(vec![random_cloud(1, 5, 3, 1.0), random_cloud(2, 5, 3, 1.0)]);
    assert!(train_jkonet(&[ds.clone(), three_d], &small_cfg()).is_err());
    let single = ds.subsample(5).unwrap();
    assert!(train_forward(&[single], &small_cfg()).is_err());
}

#[test]
fn on_step_sees_every_update() {
    let ds = make_trajectory_dataset(TrajectoryKind::Line, 10, 0.5, 4, Split::Train).unwrap();
    let mut seen = Vec::new();
    let out = train(ModelKind::Forward, &[ds], &small_cfg(), |m, log| {
        seen.push((log.step, m.steps));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
    assert_eq!(out.model.steps, 4);
    assert!(out.model.fitted);
}

#[test]
fn unconverged_loss_skips_updates() {
    let ds = make_trajectory_dataset(TrajectoryKind::Semicircle, 10, 0.5, 4, Split::Train).unwrap();
    let mut cfg = small_cfg();
    cfg.sinkhorn = SinkhornOptions {
        marginal_tol: 1e-12,
        max_iter: 1,
    };
    let init = Mlp::init(&[2, 8, 8, 1], 0).unwrap();
    for tf in [false, true] {
        cfg.teacher_forcing = tf;
        let out = fit(ModelKind::Forward, init.clone(), &[ds.clone()], &cfg, |_, _| Ok(())).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.energy, init);
        assert!(out.epoch_losses.iter().all(|l| l.is_nan()));
    }
}
