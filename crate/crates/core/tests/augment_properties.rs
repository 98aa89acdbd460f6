use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tta_core::augment::{
    apply_basic, policy_weight_gradient, sample_and_weight, softmax, AugmentationPolicy, BasicStrategy, Op,
    COMBO_COUNT,
};
use tta_core::volume::Volume;

#[test]
fn sampling_frequencies_are_uniform() {
    let p = AugmentationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; COMBO_COUNT];
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_and_weight(&p, &mut rng).0 {
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 5.0 / 11.0).abs() < 0.02, "{f}");
    }
}

fn weighted_loss(w: &[f64], losses: &[f64]) -> f64 {
    softmax(w).iter().zip(losses).map(|(a, l)| a * l).sum()
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let k = rng.gen_range(2..8);
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let l: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..3.0)).collect();
        let analytic = policy_weight_gradient(&softmax(&w), &l);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..k)
            .map(|i| {
                let mut p = w.clone();
                let mut m = w.clone();
                p[i] += h;
                m[i] -= h;
                (weighted_loss(&p, &l) - weighted_loss(&m, &l)) / (2.0 * h)
            })
            .collect();
        let scale = analytic.iter().chain(&numeric).fold(1e-12f64, |a, v| a.max(v.abs()));
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale;
        assert!(err < 1e-6, "{err}");
        assert!(analytic.iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn descent_moves_mass_to_smallest_loss() {
    let l = [0.9, 0.3, 0.6, 0.5, 0.8];
    let mut w = vec![0.0; 5];
    let mut last = softmax(&w)[1];
    for _ in 0..50 {
        let g = policy_weight_gradient(&softmax(&w), &l);
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= 0.5 * gi;
        }
        let now = softmax(&w)[1];
        assert!(now > last);
        last = now;
    }
}

fn volume(seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * 125)
        .map(|i| if i % 125 < 25 { 0.0 } else { rng.gen_range(-3.0..3.0) })
        .collect();
    Volume::new(2, [5, 5, 5], [1.0; 3], data).unwrap()
}

proptest! {
    #[test]
    fn samples_are_distinct_and_alphas_normalized(seed in any::<u64>(), k in 1usize..=11, w0 in -5.0f64..5.0) {
        let mut p = AugmentationPolicy::default();
        p.k = k;
        for (i, c) in p.combos.iter_mut().enumerate() {
            c.w = w0 * (i as f64 - 5.0);
        }
        let (idx, a) = sample_and_weight(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn ops_stay_finite(seed in any::<u64>(), op in 0usize..8, m in 0.0f64..=10.0, rho in 0.0f64..=1.0) {
        let s = BasicStrategy { op: Op::ALL[op], m, rho };
        let x = volume(seed);
        let y = apply_basic(&s, &x, true, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(y.data.iter().all(|v| v.is_finite()));
    }
}
