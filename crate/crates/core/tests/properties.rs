//! Randomized invariants across optics, autodiff, losses and metrics.

use std::f64::consts::PI;

use proptest::prelude::*;

use polarapp::losses::{self, DemosaicWeights};
use polarapp::metrics;
use polarapp::models;
use polarapp::optics::{self, Pattern, PatternTransform, PolStack};
use polarapp::{grad, Array, Tensor};

fn arr(shape: &[usize], data: Vec<f64>) -> Array {
    Array::new(shape.to_vec(), data).unwrap()
}

/// Physical Stokes triple from (s0, dolp, angle).
fn physical(s0: f64, p: f64, phi: f64) -> [f64; 3] {
    [s0, s0 * p * (2.0 * phi).cos(), s0 * p * (2.0 * phi).sin()]
}

fn stokes_field(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec((0.0..1.0f64, 0.0..=1.0f64, -PI..PI).prop_map(|(s, p, a)| physical(s, p, a)), n)
}

fn planes(px: &[[f64; 3]], h: usize, w: usize) -> (Array, Array, Array) {
    let pick = |k: usize| arr(&[3, h, w], (0..3 * h * w).map(|i| px[i % px.len()][k]).collect());
    (pick(0), pick(1), pick(2))
}

fn stack(values: Vec<f64>, h: usize, w: usize) -> PolStack {
    PolStack::new(arr(&[12, h, w], values)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stokes_round_trips_both_ways(px in stokes_field(48)) {
        let (s0, s1, s2) = planes(&px, 4, 4);
        let st = optics::stack_from_stokes(&s0, &s1, &s2).unwrap();
        let back = optics::stokes_from_stack(&st);
        for (a, b) in [(&back.s0, &s0), (&back.s1, &s1), (&back.s2, &s2)] {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        let again = optics::stack_from_stokes(&back.s0, &back.s1, &back.s2).unwrap();
        for (x, y) in again.array().data().iter().zip(st.array().data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for d in back.dolp.data() {
            prop_assert!(*d >= 0.0 && *d <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn wrapped_aop_diff_is_a_pseudometric(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
        let d = optics::wrapped_aop_diff(a, b);
        prop_assert!((0.0..=PI / 2.0 + 1e-15).contains(&d));
        prop_assert!((d - optics::wrapped_aop_diff(b, a)).abs() <= 1e-12);
        prop_assert!((d - optics::wrapped_aop_diff(a + PI, b)).abs() <= 1e-9);
        prop_assert!(d <= optics::wrapped_aop_diff(a, c) + optics::wrapped_aop_diff(c, b) + 1e-12);
    }

    #[test]
    fn mosaic_then_regroup_is_a_permutation(values in prop::collection::vec(0.0..1.0f64, 12 * 8 * 8)) {
        let p = stack(values, 8, 8);
        let raw = optics::cpfa_mosaic(&p, Pattern::default()).unwrap();
        let views = optics::regroup_dofp(&raw, Pattern::default()).unwrap();
        let mut a = raw.data().to_vec();
        let mut b = views.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let back = optics::interleave_dofp(&views, Pattern::default()).unwrap();
        prop_assert_eq!(back.data(), raw.data());
    }

    #[test]
    fn operator_commutes_with_every_generator(values in prop::collection::vec(0.0..1.0f64, 12 * 16 * 16), which in 0usize..2) {
        let p = stack(values, 16, 16);
        let t = PatternTransform::generators()[which];
        let moved = PolStack::new(optics::apply_transform(p.array(), t, false).unwrap()).unwrap();
        let lhs = optics::operator_a(&moved).unwrap();
        let rhs = optics::apply_transform(optics::operator_a(&p).unwrap().array(), t, true).unwrap();
        prop_assert_eq!(lhs.array().data(), rhs.data());
    }

    #[test]
    fn transforms_form_a_group(a in -8isize..8, b in -8isize..8, c in -8isize..8, d in -8isize..8) {
        let t = PatternTransform::translate(4 * a, 4 * b).unwrap();
        let u = PatternTransform::translate(4 * c, 4 * d).unwrap();
        let tu = t.compose(&u);
        prop_assert!(PatternTransform::translate(tu.offset().0, tu.offset().1).is_ok());
        prop_assert!(t.compose(&t.inverse()).equivalent_on(&PatternTransform::identity(), 16, 16));
        let x = Array::from_fn(&[2, 16, 16], |i| i as f64);
        let there = optics::apply_transform(&x, t, false).unwrap();
        let back = optics::apply_transform(&there, t.inverse(), false).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn losses_vanish_on_identical_inputs(values in prop::collection::vec(0.05..1.0f64, 12 * 8 * 8)) {
        let x = Tensor::constant(arr(&[1, 12, 8, 8], values));
        let l = losses::loss_d(&x, &x, &DemosaicWeights::default()).unwrap().item();
        prop_assert_eq!(l, 0.0);
        // Only the smoothness prior on the prediction survives.
        let t = x.slice(1, 0, 3).unwrap();
        let tv = losses::total_variation(&t).unwrap().item() * losses::TV_WEIGHT;
        prop_assert!((losses::loss_t_dfp(&t, &t).unwrap().item() - tv).abs() <= 1e-12);
    }

    #[test]
    fn demosaic_loss_is_nonnegative(a in prop::collection::vec(0.0..1.0f64, 12 * 8 * 8), b in prop::collection::vec(0.0..1.0f64, 12 * 8 * 8)) {
        let (a, b) = (Tensor::constant(arr(&[1, 12, 8, 8], a)), Tensor::constant(arr(&[1, 12, 8, 8], b)));
        prop_assert!(losses::loss_d(&a, &b, &DemosaicWeights::default()).unwrap().item() >= 0.0);
    }

    #[test]
    fn alignment_loss_stays_in_range(v in prop::collection::vec(-1.0..1.0f64, 6 * 4)) {
        let rows = |o: usize| -> Vec<Tensor> {
            (0..3).map(|j| {
                let t = Tensor::constant(arr(&[1, 4], v[(o + j) * 4..(o + j + 1) * 4].to_vec()));
                models::unit_rows(&t).unwrap()
            }).collect()
        };
        let (vd, vt) = (rows(0), rows(3));
        let l = losses::loss_fa(&vd, &vt).unwrap().item();
        prop_assert!((-1e-12..=6.0 + 1e-12).contains(&l));
        let twice: Vec<Tensor> = vd.iter().map(|t| models::unit_rows(&t.scale(2.0)).unwrap()).collect();
        prop_assert!((losses::loss_fa(&twice, &vt).unwrap().item() - l).abs() <= 1e-12);
    }

    #[test]
    fn gradient_is_linear_in_the_loss(x in prop::collection::vec(-1.0..1.0f64, 6), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let leaf = Tensor::leaf(arr(&[6], x));
        let l1 = leaf.tanh().square().sum();
        let l2 = leaf.sin().mul(&leaf).unwrap().sum();
        let both = l1.scale(a).add(&l2.scale(b)).unwrap();
        let g = grad(&both, &[&leaf], false).unwrap();
        let g1 = grad(&l1, &[&leaf], false).unwrap();
        let g2 = grad(&l2, &[&leaf], false).unwrap();
        for i in 0..6 {
            let want = a * g1[0].value().data()[i] + b * g2[0].value().data()[i];
            prop_assert!((g[0].value().data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_decreases_with_offset(base in prop::collection::vec(0.0..1.0f64, 64), d1 in 0.001..0.5f64, extra in 0.001..0.5f64) {
        let a = arr(&[1, 8, 8], base);
        let b1 = a.map(|v| v + d1);
        let b2 = a.map(|v| v + d1 + extra);
        prop_assert!(metrics::psnr(&a, &b1, 1.0).unwrap() > metrics::psnr(&a, &b2, 1.0).unwrap());
    }

    #[test]
    fn aop_mae_ignores_half_turns(a in prop::collection::vec(-1.5..1.5f64, 16), b in prop::collection::vec(-1.5..1.5f64, 16)) {
        let (a, b) = (arr(&[1, 4, 4], a), arr(&[1, 4, 4], b));
        let m = metrics::aop_mae(&a, &b).unwrap();
        prop_assert!((metrics::aop_mae(&a.map(|v| v + PI), &b).unwrap() - m).abs() <= 1e-9);
        prop_assert!((metrics::aop_mae(&a, &b.map(|v| v - PI)).unwrap() - m).abs() <= 1e-9);
    }

    #[test]
    fn ssim_is_symmetric(a in prop::collection::vec(0.0..1.0f64, 3 * 12 * 12), b in prop::collection::vec(0.0..1.0f64, 3 * 12 * 12)) {
        let (a, b) = (arr(&[3, 12, 12], a), arr(&[3, 12, 12], b));
        let s = metrics::ssim(&a, &b).unwrap();
        prop_assert!((s - metrics::ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn normal_accuracies_grow_with_threshold(v in prop::collection::vec(-1.0..1.0f64, 2 * 3 * 16)) {
        let unit = |o: usize| -> Array {
            let mut d = vec![0.0; 3 * 16];
            for p in 0..16 {
                let (x, y, z) = (v[o + p], v[o + 16 + p], v[o + 32 + p].abs() + 0.1);
                let n = (x * x + y * y + z * z).sqrt();
                d[p] = x / n;
                d[16 + p] = y / n;
                d[32 + p] = z / n;
            }
            arr(&[3, 4, 4], d)
        };
        let m = metrics::normal_metrics(&unit(0), &unit(48), &Array::full(&[1, 4, 4], 1.0)).unwrap();
        prop_assert!(m.acc[0] <= m.acc[1] && m.acc[1] <= m.acc[2]);
        prop_assert!(m.mean_deg <= m.rmse_deg + 1e-9);
    }

    #[test]
    fn aop_encoding_has_period_pi(s0 in 0.2..1.0f64, p in 0.05..1.0f64, phi in -PI..PI) {
        let pack = |phi: f64| {
            let px = vec![physical(s0, p, phi)];
            let (a, b, c) = planes(&px, 4, 4);
            let st = optics::stack_from_stokes(&a, &b, &c).unwrap();
            models::feature_pack(&optics::stokes_from_stack(&st), 4, 4).unwrap()
        };
        let (x, y) = (pack(phi), pack(phi + PI));
        for (u, v) in x.data().iter().zip(y.data()) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }
}
