//! Every differentiable tape op checked against central finite differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpgrec::gradcheck::check_gradients;
use wpgrec::layout::SeqLayout;
use wpgrec::optim::ParameterStore;
use wpgrec::sparse::CsrMatrix;
use wpgrec::tape::{Tape, Var};
use wpgrec::wavelet::{FilterPair, PaddingMode, WaveletFamily};
use wpgrec::{Error, Result, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection so that
/// every output entry gets a distinct upstream gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv)?;
    Ok(tape.sum(prod))
}

fn assert_grads(store: &ParameterStore, build: impl Fn(&mut Tape, &ParameterStore) -> Result<Var>) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).unwrap();
    let grads = tape.backward(loss).unwrap();
    let checks = check_gradients(
        store,
        &grads,
        |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s)?;
            t.value(l).item()
        },
        |_| true,
    )
    .unwrap();
    for c in checks {
        assert!(c.rel_error < 1e-4, "{}: rel err {:.3e}", c.name, c.rel_error);
        assert!(c.max_abs_analytic > 0.0, "{}: zero gradient", c.name);
    }
}

fn store_with(seed: u64, entries: &[(&str, &[usize])]) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParameterStore::new(seed);
    for (name, shape) in entries {
        s.insert(name, random(&mut rng, shape, -1.0, 1.0)).unwrap();
    }
    s
}

#[test]
fn record_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

    let m = tape.constant(Tensor::zeros(&[2, 3]));
    let n = tape.constant(Tensor::zeros(&[3, 2]));
    let p = tape.matmul(m, n).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 2]);

    let bad = tape.constant(Tensor::zeros(&[2, 2]));
    match tape.matmul(m, bad) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let w = tape.param("w", &Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.sum(w);
    assert_eq!(tape.backward(s).unwrap().get("w").unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let w = tape.param("w", &Tensor::vector(vec![1.0, 2.0, 3.0]));
    let unused = tape.param("unused", &Tensor::vector(vec![5.0]));
    let _ = unused;
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(g.get("unused").unwrap().data(), &[0.0]);

    assert!(tape.backward(sq).is_err());
}

#[test]
fn fan_out_accumulates() {
    // loss = sum(w) + sum(3w) reuses w twice.
    let mut tape = Tape::new();
    let w = tape.param("w", &Tensor::vector(vec![0.5, -0.5]));
    let a = tape.sum(w);
    let w3 = tape.scale(w, 3.0);
    let b = tape.sum(w3);
    let l = tape.add(a, b).unwrap();
    assert_eq!(tape.backward(l).unwrap().get("w").unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn elementwise_and_dense_ops() {
    let s = store_with(1, &[("a", &[3, 4]), ("b", &[3, 4]), ("w", &[4, 2]), ("v", &[5, 4]), ("bias", &[4])]);
    assert_grads(&s, |t, s| {
        let a = t.param("a", s.require("a")?);
        let b = t.param("b", s.require("b")?);
        let w = t.param("w", s.require("w")?);
        let v = t.param("v", s.require("v")?);
        let bias = t.param("bias", s.require("bias")?);
        let x = t.mul(a, b)?;
        let x = t.sub(x, b)?;
        let x = t.add_row(x, bias)?;
        let th = t.tanh(x);
        let y = t.matmul(th, w)?;
        let r = t.relu(y);
        let z = t.matmul_t(a, v)?;
        let l1 = project(t, r, 10)?;
        let l2 = project(t, z, 11)?;
        let l2 = t.scale(l2, 0.5);
        t.add(l1, l2)
    });
}

#[test]
fn layer_norm_and_softmax() {
    let s = store_with(2, &[("x", &[4, 5]), ("g", &[5]), ("b", &[5])]);
    assert_grads(&s, |t, s| {
        let x = t.param("x", s.require("x")?);
        let g = t.param("g", s.require("g")?);
        let b = t.param("b", s.require("b")?);
        let y = t.layer_norm(x, g, b)?;
        let sm = t.softmax_rows(y);
        project(t, sm, 3)
    });
}

#[test]
fn ln1p_entropy_and_cross_entropy() {
    let mut s = store_with(3, &[("logits", &[3, 6]), ("g", &[4, 3])]);
    let pos = s.require("g").unwrap().map(|v| v.abs() + 0.1);
    *s.get_mut("g").unwrap() = pos;
    assert_grads(&s, |t, s| {
        let lg = t.param("logits", s.require("logits")?);
        let ce = t.softmax_cross_entropy(lg, Rc::from(vec![0usize, 5, 2]))?;
        let g = t.param("g", s.require("g")?);
        let gs = t.softmax_rows(g);
        let ent = t.mean_row_entropy(gs);
        let l = t.ln1p(g);
        let pl = project(t, l, 4)?;
        let x = t.add(ce, ent)?;
        t.add(x, pl)
    });
}

#[test]
fn gather_concat_slice_and_columns() {
    let s = store_with(4, &[("table", &[5, 3]), ("other", &[2, 3]), ("w", &[4, 1]), ("c", &[4, 2])]);
    assert_grads(&s, |t, s| {
        let table = t.param("table", s.require("table")?);
        let other = t.param("other", s.require("other")?);
        let idx: Rc<[Option<usize>]> = Rc::from(vec![Some(4), None, Some(1), Some(4)]);
        let g = t.gather_rows(table, idx)?;
        let cat = t.concat_rows(&[g, other])?;
        let sl = t.slice_rows(cat, 1, 4)?;
        let w = t.param("w", s.require("w")?);
        let sc = t.scale_rows(sl, w)?;
        let c = t.param("c", s.require("c")?);
        let cc = t.concat_cols(&[sc, c])?;
        let col = t.column(cc, 4)?;
        let l1 = project(t, cc, 5)?;
        let l2 = project(t, col, 6)?;
        t.add(l1, l2)
    });
}

#[test]
fn sparse_product() {
    let mat = Rc::new(CsrMatrix::from_triplets(4, 4, vec![(0, 1, 0.5), (1, 0, 0.5), (2, 3, -0.7), (3, 2, -0.7), (1, 3, 0.2)]).unwrap());
    let s = store_with(5, &[("h", &[4, 3])]);
    assert_grads(&s, |t, s| {
        let h = t.param("h", s.require("h")?);
        let y = t.spmm(mat.clone(), h)?;
        let y2 = t.spmm(mat.clone(), y)?;
        project(t, y2, 7)
    });
}

#[test]
fn dilated_conv_in_both_modes_with_padding_rows() {
    let layout = Rc::new(SeqLayout::new(7, vec![3, 0, 5]).unwrap());
    let s = store_with(6, &[("x", &[21, 2])]);
    for family in [WaveletFamily::Haar, WaveletFamily::Sym4, WaveletFamily::Coif2] {
        for mode in [PaddingMode::Periodic, PaddingMode::Symmetric] {
            let f = FilterPair::new(family);
            assert_grads(&s, |t, s| {
                let x = t.param("x", s.require("x")?);
                let lo = t.dilated_conv(x, f.low.clone().into(), 1, mode, layout.clone())?;
                let hi = t.dilated_conv(lo, f.high.clone().into(), 4, mode, layout.clone())?;
                project(t, hi, 8)
            });
        }
    }
}

#[test]
fn segment_ops() {
    let layout = Rc::new(SeqLayout::new(6, vec![2, 0, 4]).unwrap());
    let s = store_with(7, &[("x", &[18, 3]), ("scores", &[18, 1])]);
    assert_grads(&s, |t, s| {
        let x = t.param("x", s.require("x")?);
        let sc = t.param("scores", s.require("scores")?);
        let w = t.segment_softmax(sc, layout.clone())?;
        let p = t.segment_weighted_sum(w, x, layout.clone())?;
        let e = t.segment_energy(x, layout.clone())?;
        let f = t.segment_flatness(x, layout.clone())?;
        let l1 = project(t, p, 9)?;
        let l2 = project(t, e, 10)?;
        let l3 = project(t, f, 11)?;
        let a = t.add(l1, l2)?;
        t.add(a, l3)
    });
}

#[test]
fn segment_softmax_ignores_padding_rows() {
    let layout = Rc::new(SeqLayout::new(4, vec![1, 3]).unwrap());
    let mut tape = Tape::new();
    let sc = tape.constant(Tensor::matrix(8, 1, vec![100.0, 0.0, 1.0, 2.0, 50.0, 60.0, 70.0, 0.5]).unwrap());
    let w = tape.segment_softmax(sc, layout).unwrap();
    let v = tape.value(w).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(&v[4..7], &[0.0, 0.0, 0.0]);
    assert_eq!(v[7], 1.0);
}
