use std::rc::Rc;

use proptest::prelude::*;
use wpgrec::gradcheck::check_gradients;
use wpgrec::layout::SeqLayout;
use wpgrec::optim::ParameterStore;
use wpgrec::spectrum::power_spectrum;
use wpgrec::tape::Tape;
use wpgrec::wavelet::{
    extend_boundary, filter_bank, spectral_flatness, subband_energy, swpt, swpt_on_tape, BoundaryTokens, FilterPair,
    PaddingMode, WaveletFamily,
};
use wpgrec::Tensor;

fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (2..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Tensor::matrix(r, c, v).unwrap())
    })
}

fn family_strategy() -> impl Strategy<Value = WaveletFamily> {
    prop::sample::select(WaveletFamily::ALL.to_vec())
}

fn shift_rows(x: &Tensor, s: usize) -> Tensor {
    let n = x.rows();
    let rows: Vec<Vec<f64>> = (0..n).map(|t| x.row((t + n - s % n) % n).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn filter_invariants_hold_for_every_family() {
    for family in WaveletFamily::ALL {
        let f = FilterPair::new(family);
        assert!((f.low.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-10, "{family}");
        assert!(f.high.iter().sum::<f64>().abs() < 1e-10, "{family}");
        assert!((f.low.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10, "{family}");
        assert_eq!(filter_bank(family.name()).unwrap(), f);
    }
}

#[test]
fn power_spectrum_examples() {
    assert_eq!(power_spectrum(&[2.0; 4]).iter().map(|v| v.round()).collect::<Vec<_>>(), vec![64.0, 0.0, 0.0, 0.0]);
    let alt = power_spectrum(&[1.0, -1.0, 1.0, -1.0]);
    assert!((alt[2] - 16.0).abs() < 1e-12);
    assert!(alt[0].abs() + alt[1].abs() + alt[3].abs() < 1e-12);
}

/// Mean flatness of white Gaussian noise, T' = 128, four channels, 100 seeds.
#[test]
fn white_noise_flatness_interval() {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut total = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..128 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        total += spectral_flatness(&Tensor::matrix(128, 4, v).unwrap()).unwrap();
    }
    let mean = total / 100.0;
    assert!((0.4..=0.8).contains(&mean), "mean SFM {mean}");
    // Independent numpy Monte-Carlo put this near 0.56.
    assert!((mean - 0.5625).abs() < 0.03, "mean SFM {mean}");
}

#[test]
fn boundary_tokens_receive_gradient_from_row_zero() {
    let mut store = ParameterStore::new(0);
    store.insert("left", Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]]).unwrap()).unwrap();
    store.insert("right", Tensor::from_rows(&[vec![0.7, 0.2], vec![-0.5, 0.9]]).unwrap()).unwrap();
    let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.5]).unwrap();
    let build = |t: &mut Tape, s: &ParameterStore| {
        let left = t.param("left", s.require("left")?);
        let right = t.param("right", s.require("right")?);
        let xv = t.constant(x.clone());
        let ext = t.concat_rows(&[left, xv, right])?;
        let r0 = t.slice_rows(ext, 0, 1)?;
        let sq = t.mul(r0, r0)?;
        Ok(t.sum(sq))
    };
    let mut tape = Tape::new();
    let l = build(&mut tape, &store).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get("left").unwrap().row(0).iter().all(|v| *v != 0.0));
    assert!(g.get("right").unwrap().data().iter().all(|v| *v == 0.0));
    let checks = check_gradients(&store, &g, |s| {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        t.value(l).item()
    }, |_| true)
    .unwrap();
    assert!(checks.iter().all(|c| c.rel_error < 1e-4));

    let tok = BoundaryTokens::new(store.require("left").unwrap().clone(), store.require("right").unwrap().clone()).unwrap();
    let plain = extend_boundary(&x, &tok).unwrap();
    assert_eq!(plain.row(0), store.require("left").unwrap().row(0));
    assert_eq!(plain.rows(), 7);
}

#[test]
fn swpt_gradients_through_boundary_tokens() {
    let mut store = ParameterStore::new(3);
    store.init_normal("left", &[2, 3], 0.5).unwrap();
    store.init_normal("right", &[2, 3], 0.5).unwrap();
    store.init_normal("x", &[5, 3], 1.0).unwrap();
    for mode in [PaddingMode::Periodic, PaddingMode::Symmetric] {
        let build = |t: &mut Tape, s: &ParameterStore| {
            let left = t.param("left", s.require("left")?);
            let right = t.param("right", s.require("right")?);
            let x = t.param("x", s.require("x")?);
            let ext = t.concat_rows(&[left, x, right])?;
            let layout = Rc::new(SeqLayout::single(9));
            let leaves = swpt_on_tape(t, ext, &FilterPair::new(WaveletFamily::Sym2), 2, mode, layout.clone())?;
            let mut acc = None;
            for (b, z) in leaves.into_iter().enumerate() {
                let e = t.segment_energy(z, layout.clone())?;
                let f = t.segment_flatness(z, layout.clone())?;
                let e = t.scale(e, 1.0 + b as f64);
                let s = t.add(e, f)?;
                let s = t.sum(s);
                acc = Some(match acc {
                    None => s,
                    Some(a) => t.add(a, s)?,
                });
            }
            Ok(acc.unwrap())
        };
        let mut tape = Tape::new();
        let l = build(&mut tape, &store).unwrap();
        let g = tape.backward(l).unwrap();
        let checks = check_gradients(&store, &g, |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            t.value(l).item()
        }, |_| true)
        .unwrap();
        for c in checks {
            assert!(c.rel_error < 1e-4, "{mode}: {} {:.3e}", c.name, c.rel_error);
            assert!(c.max_abs_analytic > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn subbands_keep_input_length(x in matrix_strategy(12, 3), family in family_strategy(), level in 0usize..4) {
        for mode in [PaddingMode::Periodic, PaddingMode::Symmetric] {
            let s = swpt(&x, family, level, mode).unwrap();
            prop_assert_eq!(s.num_subbands(), 1 << level);
            for z in &s.subbands {
                prop_assert_eq!(z.shape(), x.shape());
            }
        }
    }

    #[test]
    fn periodic_shift_equivariance(x in matrix_strategy(12, 3), family in family_strategy(), level in 1usize..4, shift in 0usize..12) {
        let base = swpt(&x, family, level, PaddingMode::Periodic).unwrap();
        let shifted = swpt(&shift_rows(&x, shift), family, level, PaddingMode::Periodic).unwrap();
        for (a, b) in base.subbands.iter().zip(&shifted.subbands) {
            prop_assert!(shift_rows(a, shift).max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn linearity(
        (x, y) in matrix_strategy(10, 3).prop_flat_map(|x| {
            let shape = x.shape().to_vec();
            let n = x.len();
            (Just(x), prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap()))
        }),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        family in family_strategy(),
        level in 0usize..3,
    ) {
        for mode in [PaddingMode::Periodic, PaddingMode::Symmetric] {
            let combo = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = swpt(&combo, family, level, mode).unwrap();
            let sx = swpt(&x, family, level, mode).unwrap();
            let sy = swpt(&y, family, level, mode).unwrap();
            for i in 0..lhs.num_subbands() {
                let rhs = sx.subbands[i].scale(a).add(&sy.subbands[i].scale(b)).unwrap();
                prop_assert!(lhs.subbands[i].max_abs_diff(&rhs) <= 1e-10);
            }
        }
    }

    #[test]
    fn haar_energy_doubles_per_level(x in matrix_strategy(16, 3), level in 1usize..4) {
        let s = swpt(&x, WaveletFamily::Haar, level, PaddingMode::Periodic).unwrap();
        let total: f64 = s.subbands.iter().map(|z| subband_energy(z).unwrap()).sum::<f64>() * x.rows() as f64;
        let expected = (1u64 << level) as f64 * x.sum_squares();
        prop_assert!((total - expected).abs() <= 1e-9 * expected.max(1e-300));
    }

    #[test]
    fn flatness_is_bounded_and_scale_invariant(z in matrix_strategy(16, 3), c in 0.1f64..10.0) {
        let s = spectral_flatness(&z).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        // The log epsilon only washes out when every spectral bin is well
        // above it.
        for col in 0..z.shape()[1] {
            let v: Vec<f64> = (0..z.rows()).map(|r| z.row(r)[col]).collect();
            prop_assume!(power_spectrum(&v).iter().all(|&p| p > 1e-4));
        }
        let scaled = spectral_flatness(&z.scale(c)).unwrap();
        prop_assert!((s - scaled).abs() <= 1e-9);
    }

    #[test]
    fn parseval(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let p = power_spectrum(&v);
        let lhs: f64 = p.iter().sum();
        let rhs = v.len() as f64 * v.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1e-300));
    }

    #[test]
    fn softmax_rows_are_normalized_and_shift_invariant(z in matrix_strategy(6, 5), c in -50.0f64..50.0) {
        let s = wpgrec::nn::softmax(&z, 1).unwrap();
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = wpgrec::nn::softmax(&z.map(|v| v + c), 1).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) <= 1e-12);
    }
}
