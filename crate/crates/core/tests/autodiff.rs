mod common;

use bowunida::autodiff::{OpKind, Tape, Tensor};
use common::{gradcheck, random_instances, rel_err, FD_STEP};
use proptest::prelude::*;

#[test]
fn every_operator_matches_finite_differences() {
    for seed in 0..20 {
        for (name, op, inputs, diff) in random_instances(seed) {
            let err = gradcheck(&op, &inputs, &diff, seed);
            assert!(err < 1e-4, "{name} seed {seed}: max rel err {err:e}");
        }
    }
}

fn toy_loss(w: &[f64], x: &[f64], y: usize) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::new(&[3, 4], w.to_vec()).unwrap());
    let xv = tape.constant(Tensor::new(&[4, 1], x.to_vec()).unwrap());
    let z = tape.matmul(wv, xv).unwrap();
    let z = tape.reshape(z, &[1, 3]).unwrap();
    let p = tape.softmax(z).unwrap();
    let lp = tape.log(p).unwrap();
    let mut onehot = vec![0.0; 3];
    onehot[y] = 1.0;
    let oh = tape.constant(Tensor::new(&[1, 3], onehot).unwrap());
    let picked = tape.mul(lp, oh).unwrap();
    let s = tape.sum(picked).unwrap();
    let loss = tape.scale(s, -1.0).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(loss).item(), tape.grad(wv).to_vec())
}

#[test]
fn three_class_cross_entropy_of_softmax() {
    let w: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let x = [0.5, -1.0, 0.25, 2.0];
    let (_, g) = toy_loss(&w, &x, 1);
    for i in 0..12 {
        let mut p = w.clone();
        p[i] += FD_STEP;
        let mut m = w.clone();
        m[i] -= FD_STEP;
        let num = (toy_loss(&p, &x, 1).0 - toy_loss(&m, &x, 1).0) / (2.0 * FD_STEP);
        assert!(rel_err(g[i], num) < 1e-4);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        random_instances(7)
            .into_iter()
            .map(|(_, op, inputs, _)| {
                let mut tape = Tape::new();
                let vars: Vec<_> = inputs.into_iter().map(|t| tape.leaf(t)).collect();
                let y = tape.apply(op, &vars).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap();
                let mut out = tape.value(y).values().to_vec();
                for v in vars {
                    out.extend_from_slice(tape.grad(v));
                }
                out
            })
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn conv_shapes_follow_stride_and_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
    let bad = tape.constant(Tensor::zeros(&[5, 2, 3, 3]));
    assert!(tape.conv2d(x, bad, None, 1, 1).is_err());
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape
        .apply(OpKind::CrossEntropy { targets: vec![0, 3] }, &[z])
        .is_err());
    assert!(tape
        .apply(OpKind::CrossEntropy { targets: vec![0] }, &[z])
        .is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        s in 1usize..4,
    ) {
        let c = 12 / s / 2;
        prop_assume!(c >= 1);
        let n = 12 / (c * s);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[n, c, s], vals[..n * c * s].to_vec()).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).values();
        for ni in 0..n {
            for si in 0..s {
                let sum: f64 = (0..c).map(|ci| v[(ni * c + ci) * s + si]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(v.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn entropy_of_one_hot_and_uniform(k in 1usize..20, hot in 0usize..20) {
        let hot = hot % k;
        let mut v = vec![0.0; 2 * k];
        v[hot] = 1.0;
        v[k..].iter_mut().for_each(|x| *x = 1.0 / k as f64);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[2, k], v).unwrap());
        let h = tape.entropy(p).unwrap();
        let h = tape.value(h).values();
        prop_assert!(h[0].abs() < 1e-9);
        prop_assert!((h[1] - (k as f64).ln()).abs() < 1e-9);
    }
}
