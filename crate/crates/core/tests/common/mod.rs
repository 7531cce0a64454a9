#![allow(dead_code)]

pub mod fixtures;
pub mod oracles;

use bowunida::autodiff::{OpKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// |a − n| / max(|a|, |n|, 1e-4); the floor turns the check into an absolute
/// one for gradients too small for a meaningful ratio.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Scalar objective `sum(op(inputs) * weights)` evaluated without a tape.
fn objective(op: &OpKind, inputs: &[Tensor], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = tape.apply(op.clone(), &vars).unwrap();
    tape.value(y)
        .values()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum()
}

/// Max relative error between tape gradients and central differences over
/// every element of every differentiable input.
pub fn gradcheck(op: &OpKind, inputs: &[Tensor], diff_inputs: &[bool], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(diff_inputs)
        .map(|(t, &d)| {
            if d {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let y = tape.apply(op.clone(), &vars).unwrap();
    let n_out = tape.value(y).len();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(tape.value(y).shape(), weights.clone()).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        if !diff_inputs[k] {
            continue;
        }
        let analytic = tape.grad(*v).to_vec();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].values_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].values_mut()[i] -= FD_STEP;
            let numeric = (objective(op, &plus, &weights) - objective(op, &minus, &weights))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// Rows along axis 1 drawn from a positive simplex.
pub fn simplex_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize) -> Tensor {
    let mut v = vec![0.0; n * c * s];
    for ni in 0..n {
        for si in 0..s {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for ci in 0..c {
                v[(ni * c + ci) * s + si] = raw[ci] / z;
            }
        }
    }
    let shape = if s == 1 { vec![n, c] } else { vec![n, c, s] };
    Tensor::new(&shape, v).unwrap()
}

/// One random instance per operator tag: (label, op, inputs, which inputs are
/// differentiable). Every instance has at most 64 elements per input.
pub fn random_instances(seed: u64) -> Vec<(&'static str, OpKind, Vec<Tensor>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    out.push((
        "matmul",
        OpKind::MatMul,
        vec![random_tensor(r, &[m, k], -1.0, 1.0), random_tensor(r, &[k, n], -1.0, 1.0)],
        vec![true, true],
    ));
    let stride = r.gen_range(1..3);
    let padding = r.gen_range(0..2);
    let ks = if r.gen_bool(0.3) { 1 } else { 3 };
    let (c, o, h) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(3..6));
    out.push((
        "conv2d",
        OpKind::Conv2d { stride, padding },
        vec![
            random_tensor(r, &[1, c, h, h], -1.0, 1.0),
            random_tensor(r, &[o, c, ks, ks], -1.0, 1.0),
            random_tensor(r, &[o], -0.5, 0.5),
        ],
        vec![true, true, true],
    ));
    out.push(("relu", OpKind::Relu, vec![away_from_zero(r, &[2, 3, 2])], vec![true]));
    let (b, cls) = (r.gen_range(1..4), r.gen_range(2..6));
    out.push((
        "softmax",
        OpKind::Softmax,
        vec![random_tensor(r, &[b, cls, 2], -2.0, 2.0)],
        vec![true],
    ));
    out.push((
        "global_avg_pool",
        OpKind::GlobalAvgPool,
        vec![random_tensor(r, &[2, 2, 3, 3], -1.0, 1.0)],
        vec![true],
    ));
    out.push((
        "avg_pool2",
        OpKind::AvgPool2,
        vec![random_tensor(r, &[1, 2, 4, 4], -1.0, 1.0)],
        vec![true],
    ));
    out.push(("log", OpKind::Log, vec![random_tensor(r, &[3, 4], 0.2, 2.0)], vec![true]));
    let sh = [r.gen_range(1..4), r.gen_range(1..5)];
    out.push((
        "mul",
        OpKind::Mul,
        vec![random_tensor(r, &sh, -1.0, 1.0), random_tensor(r, &sh, -1.0, 1.0)],
        vec![true, true],
    ));
    out.push((
        "add",
        OpKind::Add,
        vec![random_tensor(r, &sh, -1.0, 1.0), random_tensor(r, &sh, -1.0, 1.0)],
        vec![true, true],
    ));
    out.push((
        "add_bias",
        OpKind::AddBias,
        vec![random_tensor(r, &[2, 3, 2, 2], -1.0, 1.0), random_tensor(r, &[3], -1.0, 1.0)],
        vec![true, true],
    ));
    out.push((
        "scale",
        OpKind::Scale(r.gen_range(-2.0..2.0)),
        vec![random_tensor(r, &[5], -1.0, 1.0)],
        vec![true],
    ));
    out.push(("sum", OpKind::Sum, vec![random_tensor(r, &[2, 5], -1.0, 1.0)], vec![true]));
    out.push(("mean", OpKind::Mean, vec![random_tensor(r, &[3, 5], -1.0, 1.0)], vec![true]));
    let (b, cls) = (r.gen_range(1..5), r.gen_range(2..6));
    let targets = (0..b).map(|_| r.gen_range(0..cls)).collect();
    out.push((
        "cross_entropy",
        OpKind::CrossEntropy { targets },
        vec![random_tensor(r, &[b, cls], -2.0, 2.0)],
        vec![true],
    ));
    let (b, cls, s) = (r.gen_range(1..4), r.gen_range(2..6), r.gen_range(1..4));
    out.push(("entropy", OpKind::Entropy, vec![simplex_tensor(r, b, cls, s)], vec![true]));
    out.push((
        "reshape",
        OpKind::Reshape(vec![3, 4]),
        vec![random_tensor(r, &[2, 6], -1.0, 1.0)],
        vec![true],
    ));
    out.push((
        "slice_batch",
        OpKind::SliceBatch { start: 1, len: 2 },
        vec![random_tensor(r, &[4, 3], -1.0, 1.0)],
        vec![true],
    ));
    out.push((
        "concat_batch",
        OpKind::ConcatBatch,
        vec![random_tensor(r, &[1, 3], -1.0, 1.0), random_tensor(r, &[2, 3], -1.0, 1.0)],
        vec![true, true],
    ));
    out
}
