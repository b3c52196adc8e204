use proptest::prelude::*;

use nlora_core::adapters::{trainable_params, Adapter, AdapterConfig, ModelLayout, Site, TrainMask, Variant};
use nlora_core::linalg::random::{rng, standard_normal};
use nlora_core::linalg::{pseudoinverse, svd_square, DEFAULT_RANK_TOL};
use nlora_core::nystrom::{
    extend_singular_vectors, flop_estimate, nystrom_approximate, Core, FlopMethod, MatrixBlocks, Sampling,
    DEFAULT_SV_FLOOR,
};
use nlora_core::trainer::lr_schedule;
use nlora_core::Matrix64;

fn rel(a: &Matrix64, b: &Matrix64) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn gauss(rows: usize, cols: usize, seed: u64) -> Matrix64 {
    standard_normal(rows, cols, &mut rng(seed))
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Lora), Just(Variant::Slora), Just(Variant::Nlora)]
}

/// An adapter with every factor random, so no product vanishes.
fn random_adapter(m: usize, n: usize, r: usize, v: Variant, alpha: f64, seed: u64) -> Adapter<f64> {
    let mut g = rng(seed);
    let mut cfg = AdapterConfig::new(v, r);
    cfg.alpha = alpha;
    let base = standard_normal(m, n, &mut g);
    let a = standard_normal(m, r, &mut g);
    let mid = v.has_intermediate().then(|| standard_normal(r, r, &mut g));
    let b = standard_normal(r, n, &mut g);
    Adapter::from_parts(base, a, mid, b, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pseudoinverse_satisfies_penrose_axioms(n in 2usize..=16, deficient in any::<bool>(), seed in any::<u64>()) {
        let a = if deficient {
            let k = 1 + (seed as usize % (n - 1));
            gauss(n, k, seed).matmul(&gauss(k, n, seed ^ 1)).unwrap()
        } else {
            gauss(n, n, seed)
        };
        let x = pseudoinverse(&a, DEFAULT_RANK_TOL).unwrap();
        let ax = a.matmul(&x).unwrap();
        let xa = x.matmul(&a).unwrap();
        prop_assert!(rel(&ax.matmul(&a).unwrap(), &a) < 1e-8);
        prop_assert!(rel(&xa.matmul(&x).unwrap(), &x) < 1e-8);
        prop_assert!(rel(&ax.transpose(), &ax) < 1e-8);
        prop_assert!(rel(&xa.transpose(), &xa) < 1e-8);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal(n in 1usize..=32, seed in any::<u64>()) {
        let a = gauss(n, n, seed);
        let svd = svd_square(&a).unwrap();
        prop_assert!(rel(&svd.reconstruct().unwrap(), &a) < 1e-10);
        prop_assert!(rel(&svd.u.t_matmul(&svd.u).unwrap(), &Matrix64::identity(n)) < 1e-10);
        prop_assert!(rel(&svd.v.t_matmul(&svd.v).unwrap(), &Matrix64::identity(n)) < 1e-10);
        prop_assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn matmul_is_associative(m in 1usize..12, k in 1usize..12, l in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        let (a, b, c) = (gauss(m, k, seed), gauss(k, l, seed ^ 1), gauss(l, n, seed ^ 2));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(rel(&left, &right) < 1e-12);
    }

    #[test]
    fn flop_estimate_favours_nystrom(m in 2usize..5000, n in 2usize..5000, r_seed in any::<usize>()) {
        let r = 1 + r_seed % (m.min(n) - 1);
        prop_assert!(
            flop_estimate(m, n, r, FlopMethod::Nystrom) <= flop_estimate(m, n, r, FlopMethod::FullSvd)
        );
    }

    #[test]
    fn trainable_params_match_enumeration(
        sites in prop::collection::vec((2usize..300, 2usize..300), 1..20),
        r in 1usize..64,
        v in variant(),
        inttune in any::<bool>(),
    ) {
        let layout = ModelLayout {
            sites: sites.iter().enumerate().map(|(i, &(m, n))| Site { name: format!("s{i}"), m, n }).collect(),
        };
        let mut cfg = AdapterConfig::new(v, r);
        if inttune && v != Variant::Lora {
            cfg.train_mask = TrainMask::IntermediateOnly;
        }
        let mut enumerated = 0u64;
        for &(m, n) in &sites {
            for (rows, cols, trainable) in [
                (m, r, !cfg.frozen().a),
                (r, r, v.has_intermediate() && !cfg.frozen().n),
                (r, n, !cfg.frozen().b),
            ] {
                if trainable {
                    enumerated += (rows * cols) as u64;
                }
            }
        }
        prop_assert_eq!(trainable_params(&layout, &cfg), enumerated);
    }

    #[test]
    fn lr_schedule_is_monotone_by_phase(total in 1usize..3000, ratio in 0.0f64..0.99, peak in 1e-6f64..1.0) {
        let warm = (ratio * total as f64).ceil() as usize;
        for step in 1..total {
            let (prev, cur) = (lr_schedule(step - 1, total, ratio, peak), lr_schedule(step, total, ratio, peak));
            prop_assert!(cur >= 0.0 && cur <= peak * (1.0 + 1e-12));
            if step <= warm {
                prop_assert!(cur >= prev);
            } else {
                prop_assert!(cur <= prev);
            }
        }
        prop_assert_eq!(lr_schedule(total, total, ratio, peak), 0.0);
    }

    #[test]
    fn merged_weight_matches_split_forward(
        m in 3usize..16, n in 3usize..16, r_seed in any::<usize>(), v in variant(),
        alpha in 0.25f64..8.0, seed in any::<u64>(),
    ) {
        let r = 1 + r_seed % (m.min(n) - 1);
        let ad = random_adapter(m, n, r, v, alpha, seed);
        let x = gauss(5, m, seed ^ 7);
        let merged = x.matmul(&ad.merge().unwrap()).unwrap();
        prop_assert!(rel(&ad.forward(&x).unwrap(), &merged) < 1e-10);
    }

    #[test]
    fn delta_scales_linearly_with_alpha(
        m in 3usize..16, n in 3usize..16, r_seed in any::<usize>(), v in variant(),
        alpha in 0.25f64..8.0, seed in any::<u64>(),
    ) {
        let r = 1 + r_seed % (m.min(n) - 1);
        let one = random_adapter(m, n, r, v, r as f64, seed);
        let scaled = random_adapter(m, n, r, v, alpha, seed);
        let expected = one.delta().unwrap().scale(alpha / r as f64);
        prop_assert!(rel(&scaled.delta().unwrap(), &expected) < 1e-12);
        prop_assert!((scaled.config().scaling() - alpha / r as f64).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nystrom_is_exact_on_rank_r(m in 8usize..=64, n in 8usize..=64, r_seed in any::<usize>(), seed in any::<u64>(), permute in any::<bool>()) {
        let r = 1 + r_seed % (m.min(n) - 1).min(8);
        let w = gauss(m, r, seed).matmul(&gauss(r, n, seed ^ 1)).unwrap();
        let sampling = if permute { Sampling::Random { seed } } else { Sampling::Leading };
        let blocks = MatrixBlocks::partition(&w, r, sampling).unwrap();
        let factors = extend_singular_vectors(&blocks, DEFAULT_SV_FLOOR);
        prop_assume!(factors.is_ok());
        let three = nystrom_approximate(&blocks, Core::Pseudoinverse { rank_tol: DEFAULT_RANK_TOL }).unwrap();
        prop_assert!(rel(&three, &w) < 1e-8);
        prop_assert!(rel(&factors.unwrap().reconstruct().unwrap(), &three) < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gradients_match_central_differences(
        m in 2usize..10, n in 2usize..10, r_seed in any::<usize>(), v in variant(),
        alpha in 0.25f64..4.0, batch in 1usize..5, seed in any::<u64>(),
    ) {
        let r = 1 + r_seed % (m.min(n) - 1).max(1);
        prop_assume!(r < m.min(n));
        let ad = random_adapter(m, n, r, v, alpha, seed);
        let x = gauss(batch, m, seed ^ 3);
        let c = gauss(batch, n, seed ^ 4);
        let loss = |ad: &Adapter<f64>| -> f64 {
            let y = ad.forward(&x).unwrap();
            y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
        };
        let grads = ad.backward(&x, &c).unwrap();
        let h = 1e-6;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for slot in nlora_core::adapters::Slot::ALL {
            let Some(analytic) = grads.get(slot) else { continue };
            for (i, &ga) in analytic.as_slice().iter().enumerate() {
                let mut plus = ad.clone();
                plus.trainable_mut(slot).unwrap().as_mut_slice()[i] += h;
                let mut minus = ad.clone();
                minus.trainable_mut(slot).unwrap().as_mut_slice()[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                diff += (fd - ga).powi(2);
                norm += ga * ga;
            }
        }
        prop_assert!(diff.sqrt() / norm.sqrt() < 1e-5);

        // Input gradient against the same differences on X.
        let gx = ad.input_grad(&c, None).unwrap();
        let mut diff = 0.0f64;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let f = |x: &Matrix64| -> f64 {
                ad.forward(x).unwrap().as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
            };
            diff += ((f(&xp) - f(&xm)) / (2.0 * h) - gx.as_slice()[i]).powi(2);
        }
        prop_assert!(diff.sqrt() / gx.frobenius_norm() < 1e-5);
    }
}
