use als_core::gradcheck::{central_difference, max_relative_error, FD_STEP};
use als_core::losses::*;
use als_core::prob::{adaptive_alpha, softmax, AlphaValue, Logits, ProbDist};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const DRAWS: usize = 1000;
const FD_TOL: f64 = 1e-5;

struct Draw {
    z: Vec<f64>,
    zt: Vec<f64>,
    y: usize,
    alpha: f64,
    beta: f64,
}

fn draws(seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).unwrap();
    (0..DRAWS)
        .map(|_| {
            let n = rng.random_range(2..=12);
            Draw {
                z: (0..n).map(|_| normal.sample(&mut rng)).collect(),
                zt: (0..n).map(|_| normal.sample(&mut rng)).collect(),
                y: rng.random_range(0..n),
                alpha: rng.random(),
                beta: rng.random_range(0.0..2.0),
            }
        })
        .collect()
}

fn logits(v: &[f64]) -> Logits<f64> {
    Logits::new(v.to_vec()).unwrap()
}

fn label(d: &Draw) -> TargetLabel {
    TargetLabel::new(d.y, d.z.len()).unwrap()
}

fn check<F>(name: &str, seed: u64, mut loss: F)
where
    F: FnMut(&Draw, &[f64]) -> LossAndGrad<f64>,
{
    let mut worst = 0.0f64;
    for d in draws(seed) {
        let (_, analytic) = loss(&d, &d.z);
        let numeric = central_difference(&d.z, FD_STEP, |z| loss(&d, z).0.total);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    assert!(worst < FD_TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn ce_matches_finite_differences() {
    check("ce", 1, |d, z| ce_loss(&logits(z), label(d)).unwrap());
}

#[test]
fn label_smoothing_matches_finite_differences() {
    check("ls uniform", 2, |d, z| {
        label_smoothing_loss(&logits(z), label(d), &PriorDistribution::Uniform, AlphaValue::new(d.alpha).unwrap()).unwrap()
    });
    check("ls unigram", 3, |d, z| {
        let labels: Vec<usize> = (0..z.len()).flat_map(|i| std::iter::repeat_n(i, i + 1)).collect();
        let prior = PriorDistribution::unigram_from_labels(&labels, z.len()).unwrap();
        label_smoothing_loss(&logits(z), label(d), &prior, AlphaValue::new(d.alpha).unwrap()).unwrap()
    });
}

#[test]
fn kd_matches_finite_differences() {
    check("kd T=1", 4, |d, z| {
        kd_loss(&logits(z), &logits(&d.zt), label(d), AlphaValue::new(d.alpha).unwrap(), 1.0).unwrap()
    });
    check("kd T=3", 5, |d, z| {
        kd_loss(&logits(z), &logits(&d.zt), label(d), AlphaValue::new(d.alpha).unwrap(), 3.0).unwrap()
    });
}

/// The analytic gradient treats α as a constant, so the finite difference
/// holds α at its value for the unperturbed logits.
#[test]
fn adaptive_skd_matches_finite_differences_with_frozen_alpha() {
    let mut worst = 0.0f64;
    for d in draws(6) {
        let (lb, analytic) = adaptive_skd_loss(&logits(&d.z), Some(&logits(&d.zt)), label(&d)).unwrap();
        let phi = softmax(&logits(&d.zt));
        let numeric = central_difference(&d.z, FD_STEP, |z| {
            soft_target_loss(&softmax(&logits(z)), label(&d), &phi, lb.alpha_used)
                .unwrap()
                .0
                .total
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    assert!(worst < FD_TOL, "worst relative error {worst:e}");
}

#[test]
fn rederived_alpha_breaks_the_match() {
    // differentiating through α changes the gradient for non-degenerate inputs
    let mut mismatches = 0;
    let all = draws(7);
    for d in &all {
        let (_, analytic) = adaptive_skd_loss(&logits(&d.z), Some(&logits(&d.zt)), label(d)).unwrap();
        let numeric = central_difference(&d.z, FD_STEP, |z| {
            adaptive_skd_loss(&logits(z), Some(&logits(&d.zt)), label(d)).unwrap().0.total
        });
        if max_relative_error(&analytic, &numeric) > 1e-3 {
            mismatches += 1;
        }
    }
    assert!(mismatches > all.len() * 9 / 10, "only {mismatches} of {} differ", all.len());
}

#[test]
fn confidence_penalty_matches_finite_differences() {
    check("confidence penalty", 8, |d, z| {
        confidence_penalty_loss(&logits(z), label(d), d.beta).unwrap()
    });
}

fn logit_vec(max_classes: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2..=max_classes).prop_flat_map(|n| {
        (
            prop::collection::vec(-8.0f64..8.0, n),
            prop::collection::vec(-8.0f64..8.0, n),
            0..n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn gradients_sum_to_zero((z, zt, y) in logit_vec(16), a in 0.0f64..=1.0) {
        let yl = TargetLabel::new(y, z.len()).unwrap();
        let alpha = AlphaValue::new(a).unwrap();
        let grads = [
            ce_loss(&logits(&z), yl).unwrap().1,
            label_smoothing_loss(&logits(&z), yl, &PriorDistribution::Uniform, alpha).unwrap().1,
            kd_loss(&logits(&z), &logits(&zt), yl, alpha, 1.0).unwrap().1,
            adaptive_skd_loss(&logits(&z), Some(&logits(&zt)), yl).unwrap().1,
        ];
        for g in grads {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn adaptive_skd_decomposes((z, zt, y) in logit_vec(16)) {
        let yl = TargetLabel::new(y, z.len()).unwrap();
        let (lb, _) = adaptive_skd_loss(&logits(&z), Some(&logits(&zt)), yl).unwrap();
        let a = lb.alpha_used.get();
        let p = softmax(&logits(&z));
        let ce = ce_from_probs(&p, yl).unwrap().0.total;
        let phi = softmax(&logits(&zt));
        let cross: f64 = phi.probs().iter().zip(p.probs()).map(|(q, pi)| -q * pi.max(1e-12).ln()).sum();
        prop_assert!((lb.total - ((1.0 - a) * ce + a * cross)).abs() < 1e-9);
        prop_assert!((lb.total - lb.reconstruct()).abs() < 1e-9);
        let expect = adaptive_alpha(&p.detached()).unwrap().get();
        prop_assert_eq!(a, expect);
    }

    #[test]
    fn uniform_teacher_is_uniform_smoothing((z, _zt, y) in logit_vec(16), a in 0.0f64..=1.0) {
        let n = z.len();
        let yl = TargetLabel::new(y, n).unwrap();
        let alpha = AlphaValue::new(a).unwrap();
        let (kd, gk) = kd_loss(&logits(&z), &logits(&vec![0.0; n]), yl, alpha, 1.0).unwrap();
        let (ls, gl) = label_smoothing_loss(&logits(&z), yl, &PriorDistribution::Uniform, alpha).unwrap();
        prop_assert!((kd.total - ls.total).abs() < 1e-10);
        for (u, v) in gk.iter().zip(&gl) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_stays_in_unit_interval((z, _zt, _y) in logit_vec(32)) {
        let a = adaptive_alpha(&softmax(&logits(&z)).detached()).unwrap().get();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn matched_teacher_leaves_only_the_hard_term((z, _zt, y) in logit_vec(16)) {
        let yl = TargetLabel::new(y, z.len()).unwrap();
        let (lb, g) = adaptive_skd_loss(&logits(&z), Some(&logits(&z)), yl).unwrap();
        let (_, gce) = ce_loss(&logits(&z), yl).unwrap();
        let a = lb.alpha_used.get();
        for (u, v) in g.iter().zip(&gce) {
            prop_assert!((u - (1.0 - a) * v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution((z, _zt, _y) in logit_vec(32), t in 0.05f64..20.0) {
        let p = als_core::prob::softmax_with_temperature(&logits(&z), t).unwrap();
        prop_assert!(ProbDist::new(p.probs().to_vec()).is_ok());
    }
}
