use jkoflow::energy::{
    energy_eval, energy_grid, energy_of_measure, eval_points, gradient_points, grid_argmin, init_energy, GridSpec, Mlp,
    Potential, QuadraticPotential,
};
use jkoflow::PointCloud;
use jkoflow_autodiff::{finite_diff_check, max_relative_error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
    PointCloud::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn constant_energy(d: usize, c: f64) -> Mlp {
    let mut m = Mlp::zeros(&[d, 64, 64, 1]).unwrap();
    let mut blocks = m.blocks().to_vec();
    blocks[5] = Tensor::full(&[1, 1], c);
    m.set_blocks(blocks).unwrap();
    m
}

#[test]
fn init_shapes_and_determinism() {
    let a = init_energy(3, 11).unwrap();
    let shapes: Vec<&[usize]> = a.blocks().iter().map(|b| b.shape()).collect();
    assert_eq!(shapes, vec![&[3, 64][..], &[1, 64], &[64, 64], &[1, 64], &[64, 1], &[1, 1]]);
    assert_eq!(a, init_energy(3, 11).unwrap());
    assert_ne!(a, init_energy(3, 12).unwrap());
    assert!(a.blocks()[1].data().iter().all(|&b| b == 0.0));
}

#[test]
fn zero_weights_give_final_bias() {
    let e = constant_energy(2, 1.75);
    assert_eq!(energy_eval(&e, &[3.0, -8.0]).unwrap(), 1.75);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = random_cloud(&mut rng, 7, 2);
    assert_eq!(energy_of_measure(&e, &c).unwrap(), 1.75);
}

#[test]
fn batch_equals_loop() {
    let e = init_energy(2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_cloud(&mut rng, 9, 2);
    let batch = eval_points(&e, &c).unwrap();
    for (p, v) in c.points().zip(&batch) {
        assert!((energy_eval(&e, p).unwrap() - v).abs() < 1e-14);
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let e = init_energy(2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_cloud(&mut rng, 5, 2);
    let g = gradient_points(&e, &c).unwrap();
    let h = 1e-5;
    let mut numeric = Vec::new();
    let mut probe = c.data().to_vec();
    for k in 0..probe.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let plus: f64 = eval_points(&e, &PointCloud::new(2, probe.clone()).unwrap()).unwrap().iter().sum();
        probe[k] = orig - h;
        let minus: f64 = eval_points(&e, &PointCloud::new(2, probe.clone()).unwrap()).unwrap().iter().sum();
        probe[k] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    assert!(max_relative_error(g.data(), &numeric) < 1e-6);
}

#[test]
fn measure_energy_cases() {
    let e = init_energy(2, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_cloud(&mut rng, 3, 2);
    let direct: f64 = c.points().map(|p| energy_eval(&e, p).unwrap()).sum::<f64>() / 3.0;
    assert!((energy_of_measure(&e, &c).unwrap() - direct).abs() < 1e-14);

    let doubled: Vec<f64> = c.points().flat_map(|p| [p, p]).flatten().copied().collect();
    let d = PointCloud::new(2, doubled).unwrap();
    assert!((energy_of_measure(&e, &d).unwrap() - direct).abs() < 1e-14);

    assert!(energy_of_measure(&e, &PointCloud::new(2, vec![]).unwrap()).is_err());
    assert!(eval_points(&e, &random_cloud(&mut rng, 2, 3)).is_err());
}

#[test]
fn mixture_and_permutation_invariance() {
    let e = init_energy(2, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_cloud(&mut rng, 6, 2);
    let b = random_cloud(&mut rng, 6, 2);
    let mix = PointCloud::new(2, [a.data(), b.data()].concat()).unwrap();
    let ja = energy_of_measure(&e, &a).unwrap();
    let jb = energy_of_measure(&e, &b).unwrap();
    assert!((energy_of_measure(&e, &mix).unwrap() - 0.5 * (ja + jb)).abs() < 1e-13);
    let perm = a.select(&[3, 0, 5, 1, 4, 2]);
    assert!((energy_of_measure(&e, &perm).unwrap() - ja).abs() < 1e-13);
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let e = init_energy(2, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = random_cloud(&mut rng, 5, 2);
    for k in 0..e.blocks().len() {
        let f = |tape: &Tape, blk: &jkoflow_autodiff::Var| {
            let mut params: Vec<_> = e.blocks().iter().map(|b| tape.constant(b.clone())).collect();
            params[k] = blk.clone();
            let x = tape.constant(c.to_tensor());
            Ok(e.eval_with(&params, &x).expect("energy eval").mean()?)
        };
        let err = finite_diff_check(f, &e.blocks()[k], 1e-5).unwrap();
        assert!(err < 1e-4, "block {k}: {err}");
    }
}

#[test]
fn quadratic_potential_and_grid() {
    let q = QuadraticPotential::new(2, 0.5);
    assert_eq!(energy_eval(&q, &[3.0, 4.0]).unwrap(), 12.5);
    let rows = energy_grid(&q, &GridSpec::square(4.0, 100)).unwrap();
    assert_eq!(rows.len(), 10_000);
    let m = grid_argmin(&rows).unwrap();
    assert!(m[0].hypot(m[1]) < 0.1);
    assert!(energy_grid(&QuadraticPotential::new(3, 1.0), &GridSpec::square(1.0, 3)).is_err());
}
