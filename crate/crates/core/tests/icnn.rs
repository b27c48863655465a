use jkoflow::icnn::{convexity_penalty_var, icnn_forward, init_icnn, IcnnConfig, IcnnParams};
use jkoflow::PointCloud;
use jkoflow_autodiff::{finite_diff_check, max_relative_error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> PointCloud {
    PointCloud::new(d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Random parameters with latent weights of both signs.
fn unprojected(cfg: IcnnConfig, rng: &mut ChaCha8Rng) -> IcnnParams {
    let blocks = cfg
        .block_shapes()
        .iter()
        .map(|s| Tensor::new(s.to_vec(), (0..s[0] * s[1]).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap())
        .collect();
    IcnnParams::from_blocks(cfg, blocks).unwrap()
}

fn small() -> IcnnConfig {
    IcnnConfig::new(2, 8, 3)
}

#[test]
fn default_layer_shapes() {
    let p = init_icnn(2, 64, 4, 0).unwrap();
    let names = p.config().block_names();
    let shapes: Vec<(String, Vec<usize>)> = names.into_iter().zip(p.blocks().iter().map(|b| b.shape().to_vec())).collect();
    let wx: Vec<&Vec<usize>> = shapes.iter().filter(|(n, _)| n.starts_with("wx")).map(|(_, s)| s).collect();
    assert_eq!(wx, vec![&vec![2, 64], &vec![2, 64], &vec![2, 64], &vec![2, 1]]);
    let wz: Vec<&Vec<usize>> = shapes.iter().filter(|(n, _)| n.starts_with("wz")).map(|(_, s)| s).collect();
    assert_eq!(wz, vec![&vec![64, 64], &vec![64, 64], &vec![64, 1]]);
}

#[test]
fn init_is_deterministic_and_feasible() {
    let a = init_icnn(2, 16, 3, 9).unwrap();
    assert_eq!(a, init_icnn(2, 16, 3, 9).unwrap());
    assert!(a.is_convex());
    for (b, name) in a.blocks().iter().zip(a.config().block_names()) {
        if name.starts_with('b') {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn batch_equals_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = init_icnn(2, 8, 3, 1).unwrap();
    let c = random_cloud(&mut rng, 6, 2);
    let batch = p.forward(&c).unwrap();
    for (i, x) in c.points().enumerate() {
        let single = p.forward(&PointCloud::new(2, x.to_vec()).unwrap()).unwrap();
        assert!((single[0] - batch[i]).abs() < 1e-14);
    }
    assert!(p.forward(&random_cloud(&mut rng, 2, 3)).is_err());
}

fn convexity_holds(p: &IcnnParams, rng: &mut ChaCha8Rng, trials: usize) -> bool {
    for _ in 0..trials {
        let x = random_cloud(rng, 1, 2);
        let y = random_cloud(rng, 1, 2);
        let l: f64 = rng.random();
        let mid: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| l * a + (1.0 - l) * b).collect();
        let both = PointCloud::new(2, [x.data(), y.data(), &mid].concat()).unwrap();
        let v = p.forward(&both).unwrap();
        if v[2] > l * v[0] + (1.0 - l) * v[1] + 1e-9 {
            return false;
        }
    }
    true
}

#[test]
fn projected_networks_are_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let p = unprojected(small(), &mut rng).projected();
        assert!(convexity_holds(&p, &mut rng, 200));
    }
}

#[test]
fn unprojected_networks_can_be_nonconvex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let violated = (0..20).any(|_| {
        let p = unprojected(small(), &mut rng);
        !p.is_convex() && !convexity_holds(&p, &mut rng, 200)
    });
    assert!(violated);
}

#[test]
fn zero_network_gradient_map() {
    let p = IcnnParams::zeros(small()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = random_cloud(&mut rng, 10, 2);
    assert_eq!(p.pushforward(&c, 1.0).unwrap(), c);
    let shrunk = p.pushforward(&c, 0.8).unwrap();
    for (a, b) in c.data().iter().zip(shrunk.data()) {
        assert!((0.8 * a - b).abs() < 1e-15);
    }
}

#[test]
fn gradient_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = init_icnn(2, 8, 3, 5).unwrap();
    let c = random_cloud(&mut rng, 4, 2);
    for ell in [0.0, 0.8] {
        let t = p.gradient_map(&c, ell).unwrap();
        let h = 1e-5;
        let mut probe = c.data().to_vec();
        let mut numeric = Vec::new();
        let aug = |data: &[f64]| -> f64 {
            let cl = PointCloud::new(2, data.to_vec()).unwrap();
            let psi: f64 = p.forward(&cl).unwrap().iter().sum();
            psi + 0.5 * ell * data.iter().map(|v| v * v).sum::<f64>()
        };
        for k in 0..probe.len() {
            let orig = probe[k];
            probe[k] = orig + h;
            let plus = aug(&probe);
            probe[k] = orig - h;
            let minus = aug(&probe);
            probe[k] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        assert!(max_relative_error(t.data(), &numeric) < 1e-4);
    }
}

#[test]
fn potential_gradient_wrt_params_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = init_icnn(2, 8, 3, 6).unwrap();
    let c = random_cloud(&mut rng, 5, 2);
    for k in 0..p.blocks().len() {
        let f = |tape: &Tape, blk: &Var| {
            let mut params: Vec<Var> = p.blocks().iter().map(|b| tape.constant(b.clone())).collect();
            params[k] = blk.clone();
            let x = tape.constant(c.to_tensor());
            Ok(icnn_forward(p.config(), &params, &x).expect("icnn eval").sum()?)
        };
        let err = finite_diff_check(f, &p.blocks()[k], 1e-5).unwrap();
        assert!(err < 1e-4, "block {k}: {err}");
    }
}

#[test]
fn strong_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ell = 0.8;
    for seed in 0..3 {
        let p = init_icnn(2, 16, 3, seed).unwrap();
        let c = random_cloud(&mut rng, 200, 2);
        let t = p.gradient_map(&c, ell).unwrap();
        for i in (0..200).step_by(2) {
            let (x, y) = (c.point(i), c.point(i + 1));
            let (tx, ty) = (t.point(i), t.point(i + 1));
            let inner: f64 = (0..2).map(|k| (tx[k] - ty[k]) * (x[k] - y[k])).sum();
            let d2: f64 = (0..2).map(|k| (x[k] - y[k]).powi(2)).sum();
            assert!(inner >= ell * d2 - 1e-9);
        }
    }
}

#[test]
fn projection_cases() {
    let cfg = IcnnConfig::new(1, 1, 2);
    let blocks = vec![
        Tensor::full(&[1, 1], -0.5),
        Tensor::zeros(&[1, 1]),
        Tensor::full(&[1, 1], -0.1),
        Tensor::full(&[1, 1], -0.3),
        Tensor::full(&[1, 1], -0.7),
    ];
    let p = IcnnParams::from_blocks(cfg, blocks).unwrap();
    let q = p.projected();
    assert_eq!(q.blocks()[3].item(), 0.0);
    for k in [0, 1, 2, 4] {
        assert_eq!(q.blocks()[k], p.blocks()[k]);
    }
    assert_eq!(q.projected(), q);
}

#[test]
fn penalty_cases() {
    let cfg = IcnnConfig::new(1, 1, 2);
    let mut blocks: Vec<Tensor> = cfg.block_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    blocks[3] = Tensor::full(&[1, 1], -2.0);
    let p = IcnnParams::from_blocks(cfg, blocks).unwrap();
    assert_eq!(p.convexity_penalty(1.0), 4.0);
    assert_eq!(p.projected().convexity_penalty(1.0), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let r = unprojected(small(), &mut rng);
    let mut direct = 0.0;
    for (b, latent) in r.blocks().iter().zip(r.config().latent_mask()) {
        if latent {
            for &v in b.data() {
                if v < 0.0 {
                    direct += v * v;
                }
            }
        }
    }
    assert!((r.convexity_penalty(0.3) - 0.3 * direct).abs() < 1e-12);
    let tape = Tape::new();
    let vars: Vec<Var> = r.blocks().iter().map(|b| tape.leaf(b.clone())).collect();
    let pv = convexity_penalty_var(r.config(), &vars, 0.3).unwrap();
    assert!((pv.item() - 0.3 * direct).abs() < 1e-12);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn projection_idempotent_and_nonexpansive(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = unprojected(small(), &mut rng);
            let q = p.projected();
            prop_assert_eq!(q.projected(), q.clone());
            prop_assert!(q.is_convex());
            for ((a, b), latent) in p.blocks().iter().zip(q.blocks()).zip(p.config().latent_mask()) {
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    if latent {
                        prop_assert!(y >= 0.0);
                        prop_assert!((-y).max(0.0) <= (-x).max(0.0));
                    } else {
                        prop_assert_eq!(x, y);
                    }
                }
            }
        }

        #[test]
        fn convex_after_projection(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = unprojected(small(), &mut rng).projected();
            prop_assert!(convexity_holds(&p, &mut rng, 50));
        }
    }
}
