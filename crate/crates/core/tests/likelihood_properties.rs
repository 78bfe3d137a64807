use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uotalign::classifier::{ce_grad_wrt_distances, ce_loss, likelihood, one_hot, predict};
use uotalign::oracle::{finite_diff_grad, relative_error};
use uotalign::Mat;

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

#[test]
fn thousand_random_score_vectors() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let k = r.random_range(1..=12);
        let d: Vec<f64> = (0..k).map(|_| r.random_range(0.0..2.0)).collect();
        let tau = [0.01, 0.1, 1.0][r.random_range(0..3)];
        let p = likelihood(&d, tau).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shift = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let q = likelihood(&shifted, tau).unwrap();
        assert_eq!(argmax(&p), argmax(&q));
        assert_eq!(argmax(&p), predict(&d));
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let k = r.random_range(2..6);
        let tau = 0.1;
        let d: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        let label = r.random_range(0..k);
        let loss = |x: &[f64]| {
            let p = likelihood(x, tau).unwrap();
            ce_loss(&Mat::new(1, k, p).unwrap(), &one_hot(&[label], k).unwrap()).unwrap()
        };
        let fd = finite_diff_grad(loss, &d, 1e-6).unwrap();
        let analytic = ce_grad_wrt_distances(&likelihood(&d, tau).unwrap(), label, 1, tau);
        assert!(relative_error(&analytic, &fd) < 1e-6);
    }
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(
        d in prop::collection::vec(-3.0f64..3.0, 1..20),
        tau in 0.005f64..2.0,
        shift in -10.0f64..10.0,
    ) {
        let p = likelihood(&d, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let q = likelihood(&d.iter().map(|x| x + shift).collect::<Vec<_>>(), tau).unwrap();
        prop_assert_eq!(argmax(&p), argmax(&q));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn smaller_distance_never_less_likely(d in prop::collection::vec(0.0f64..2.0, 2..10), tau in 0.01f64..1.0) {
        let p = likelihood(&d, tau).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }
}
