use cdo::loss::{
    baseline_loss, cdo_loss, cdo_loss_grad, coefficients, loss, mom_loss, oom_weights, DDBatch, LossMode, DEFAULT_EPS,
};
use proptest::prelude::*;

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..4.0, 1..40),
        prop::collection::vec(0.0f64..4.0, 1..40),
    )
}

proptest! {
    #[test]
    fn reduction_chain((d_n, d_s) in batch()) {
        let base = baseline_loss(&d_n).unwrap();
        let mom = mom_loss(&d_n, &d_s).unwrap();
        let via_base = (d_n.len() as f64 * base - d_s.iter().sum::<f64>()) / (d_n.len() + d_s.len()) as f64;
        prop_assert_eq!(cdo_loss(&d_n, &d_s, 0.0).unwrap(), mom);
        prop_assert!((mom - via_base).abs() < 1e-9);
    }

    #[test]
    fn mom_pressure_directions((d_n, d_s) in batch(), i in any::<prop::sample::Index>(), bump in 0.01f64..1.0) {
        let l0 = mom_loss(&d_n, &d_s).unwrap();
        let mut up_n = d_n.clone();
        up_n[i.index(d_n.len())] += bump;
        prop_assert!(mom_loss(&up_n, &d_s).unwrap() > l0);
        let mut up_s = d_s.clone();
        up_s[i.index(d_s.len())] += bump;
        prop_assert!(mom_loss(&d_n, &up_s).unwrap() < l0);
    }

    #[test]
    fn tail_samples_are_up_weighted((d_n, d_s) in batch(), gamma in 0.1f64..4.0) {
        let w = oom_weights(&d_n, &d_s, gamma, DEFAULT_EPS).unwrap();
        let mu_n = d_n.iter().sum::<f64>() / d_n.len() as f64;
        let mu_s = d_s.iter().sum::<f64>() / d_s.len() as f64;
        for (d, w) in d_n.iter().zip(&w.w_n) {
            prop_assert!(*w >= 0.0 && w.is_finite());
            if *d > mu_n * (1.0 + 1e-9) {
                prop_assert!(*w > 1.0);
            }
        }
        for (d, w) in d_s.iter().zip(&w.w_s) {
            prop_assert!(*w > 0.0 && w.is_finite());
            if *d < mu_s * (1.0 - 1e-9) && mu_s > DEFAULT_EPS {
                prop_assert!(*w > 1.0);
            }
        }
    }

    #[test]
    fn equal_values_make_oom_inert(n in 1usize..20, s in 1usize..20, a in 0.1f64..3.0, b in 0.1f64..3.0, gamma in 0.0f64..5.0) {
        let d_n = vec![a; n];
        let d_s = vec![b; s];
        let diff = cdo_loss(&d_n, &d_s, gamma).unwrap() - mom_loss(&d_n, &d_s).unwrap();
        prop_assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn frozen_weight_gradient_matches_finite_differences((d_n, d_s) in batch(), gamma in 0.0f64..4.0) {
        let (g_n, g_s) = cdo_loss_grad(&d_n, &d_s, gamma, DEFAULT_EPS).unwrap();
        let w = oom_weights(&d_n, &d_s, gamma, DEFAULT_EPS).unwrap();
        let frozen = |d_n: &[f64], d_s: &[f64]| {
            let num: f64 = w.w_n.iter().zip(d_n).map(|(w, d)| w * d).sum::<f64>()
                - w.w_s.iter().zip(d_s).map(|(w, d)| w * d).sum::<f64>();
            num / (w.w_n.iter().sum::<f64>() + w.w_s.iter().sum::<f64>())
        };
        // the 1e-5 floor absorbs central-difference rounding on near-zero gradients
        let h = 1e-5;
        for i in 0..d_n.len() {
            let (mut p, mut m) = (d_n.clone(), d_n.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (frozen(&p, &d_s) - frozen(&m, &d_s)) / (2.0 * h);
            prop_assert!((fd - g_n[i]).abs() <= 1e-4 * fd.abs().max(g_n[i].abs()).max(1e-5));
        }
        for j in 0..d_s.len() {
            let (mut p, mut m) = (d_s.clone(), d_s.clone());
            p[j] += h;
            m[j] -= h;
            let fd = (frozen(&d_n, &p) - frozen(&d_n, &m)) / (2.0 * h);
            prop_assert!((fd - g_s[j]).abs() <= 1e-4 * fd.abs().max(g_s[j].abs()).max(1e-5));
        }
    }

    #[test]
    fn coefficients_reproduce_each_mode((d_n, d_s) in batch(), gamma in 0.0f64..4.0) {
        let b = DDBatch::new(d_n, d_s);
        for mode in LossMode::ALL {
            let c = coefficients(mode, &b, gamma, DEFAULT_EPS).unwrap();
            let direct = loss(mode, &b, gamma, DEFAULT_EPS).unwrap();
            prop_assert!((c.apply(&b) - direct).abs() < 1e-9);
        }
    }
}

#[test]
fn normal_only_modes_ignore_abnormal_cells() {
    let b = DDBatch::new(vec![0.5, 1.5], vec![3.0, 0.1]);
    for mode in [LossMode::Baseline, LossMode::BaselineOom] {
        let c = coefficients(mode, &b, 2.0, DEFAULT_EPS).unwrap();
        assert!(c.d_s.iter().all(|&v| v == 0.0));
        assert!((c.d_n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn all_zero_normals_keep_focal_baseline_finite() {
    let b = DDBatch::new(vec![0.0; 3], vec![]);
    let c = coefficients(LossMode::BaselineOom, &b, 2.0, DEFAULT_EPS).unwrap();
    assert_eq!(c.d_n, vec![1.0 / 3.0; 3]);
    assert_eq!(loss(LossMode::BaselineOom, &b, 2.0, DEFAULT_EPS).unwrap(), 0.0);
}

#[test]
fn random_batch_against_direct_summation() {
    let d_n = [0.31, 1.7, 0.02, 0.9];
    let d_s = [2.2, 0.4, 1.1];
    assert!((baseline_loss(&d_n).unwrap() - 2.93 / 4.0).abs() < 1e-12);
    assert!((mom_loss(&d_n, &d_s).unwrap() - (2.93 - 3.7) / 7.0).abs() < 1e-12);
}
