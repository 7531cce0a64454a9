use super::gemm::{gemm, Layout};
use super::{AutodiffError, Tensor};

/// Operator tags understood by [`super::Tape::apply`].
///
/// Axis conventions: batched activations are `[N, C, ...]`. `Softmax` and
/// `Entropy` act along axis 1; `GlobalAvgPool` averages every axis after 1.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] · [k, n]`
    MatMul,
    /// Inputs `x [N, C, H, W]`, `w [O, C, KH, KW]` and an optional bias `[O]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Softmax,
    GlobalAvgPool,
    /// 2×2 average pooling with stride 2.
    AvgPool2,
    Log,
    Mul,
    Add,
    /// `x [N, C, ...] + b [C]`
    AddBias,
    Scale(f64),
    Sum,
    Mean,
    /// Mean cross-entropy of logits `[N, C]` against integer targets.
    CrossEntropy { targets: Vec<usize> },
    /// Shannon entropy (nats) of distributions stored along axis 1.
    Entropy,
    Reshape(Vec<usize>),
    /// Rows `start..start+len` of axis 0.
    SliceBatch { start: usize, len: usize },
    /// Concatenation of all inputs along axis 0.
    ConcatBatch,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::AvgPool2 => "avg_pool2",
            OpKind::Log => "log",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Entropy => "entropy",
            OpKind::Reshape(_) => "reshape",
            OpKind::SliceBatch { .. } => "slice_batch",
            OpKind::ConcatBatch => "concat_batch",
        }
    }
}

pub(crate) struct Forward {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub saved: Vec<f64>,
}

fn arity(op: &OpKind, inputs: &[&Tensor], expected: usize) -> Result<(), AutodiffError> {
    if inputs.len() != expected {
        return Err(AutodiffError::Arity {
            op: op.name(),
            expected,
            got: inputs.len(),
        });
    }
    Ok(())
}

fn mismatch(op: &OpKind, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// (N, C, S) view of a tensor with rank ≥ 2.
fn ncs(op: &OpKind, shape: &[usize]) -> Result<(usize, usize, usize), AutodiffError> {
    if shape.len() < 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: op.name(),
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn conv_geom(
    op: &OpKind,
    x: &[usize],
    wt: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, AutodiffError> {
    if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] || stride == 0 {
        return Err(mismatch(op, x, wt));
    }
    let (hp, wp) = (x[2] + 2 * pad, x[3] + 2 * pad);
    if hp < wt[2] || wp < wt[3] {
        return Err(mismatch(op, x, wt));
    }
    Ok(ConvGeom {
        n: x[0],
        c: x[1],
        h: x[2],
        w: x[3],
        o: wt[0],
        kh: wt[2],
        kw: wt[3],
        ho: (hp - wt[2]) / stride + 1,
        wo: (wp - wt[3]) / stride + 1,
        stride,
        pad,
    })
}

/// Largest column buffer (in elements) built at once; keeps im2col in cache.
const COL_BUDGET: usize = 1 << 17;

impl ConvGeom {
    /// Samples per im2col chunk.
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.ho * self.wo).max(1)).clamp(1, self.n)
    }
}

/// Columns for samples `n0..n0+nb`: `[C·KH·KW, nb·Ho·Wo]`.
fn im2col(g: &ConvGeom, x: &[f64], n0: usize, nb: usize, cols: &mut Vec<f64>) {
    let ncols = nb * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    cols.clear();
    cols.resize(g.rows() * ncols, 0.0);
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for n in 0..nb {
                    let p = (n0 + n) * g.c + c;
                    let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
                    let dst = &mut row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], n0: usize, nb: usize, dx: &mut [f64]) {
    let ncols = nb * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for n in 0..nb {
                    let base = ((n0 + n) * g.c + c) * g.h * g.w;
                    let src = &row[n * hw_out..(n + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = base + iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[dst_row + ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Forward, AutodiffError> {
    let plain = |shape: Vec<usize>, values: Vec<f64>| Forward {
        shape,
        values,
        saved: Vec::new(),
    };
    match op {
        OpKind::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0].shape(), inputs[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(mismatch(op, a, b));
            }
            let (m, k, n) = (a[0], a[1], b[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                inputs[0].values(),
                Layout::row_major(k),
                inputs[1].values(),
                Layout::row_major(n),
                0.0,
                &mut out,
            );
            Ok(plain(vec![m, n], out))
        }
        OpKind::Conv2d { stride, padding } => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: 2,
                    got: inputs.len(),
                });
            }
            let g = conv_geom(op, inputs[0].shape(), inputs[1].shape(), *stride, *padding)?;
            if let Some(b) = inputs.get(2) {
                if b.shape() != [g.o] {
                    return Err(mismatch(op, inputs[1].shape(), b.shape()));
                }
            }
            let hw = g.ho * g.wo;
            let mut out = vec![0.0; g.n * g.o * hw];
            let mut cols = Vec::new();
            let mut mat = Vec::new();
            let x = inputs[0].values();
            let step = g.chunk();
            for n0 in (0..g.n).step_by(step) {
                let nb = step.min(g.n - n0);
                let ncols = nb * hw;
                im2col(&g, x, n0, nb, &mut cols);
                mat.clear();
                mat.resize(g.o * ncols, 0.0);
                gemm(
                    g.o,
                    g.rows(),
                    ncols,
                    inputs[1].values(),
                    Layout::row_major(g.rows()),
                    &cols,
                    Layout::row_major(ncols),
                    0.0,
                    &mut mat,
                );
                for o in 0..g.o {
                    let bias = inputs.get(2).map_or(0.0, |b| b.values()[o]);
                    for n in 0..nb {
                        let src = &mat[o * ncols + n * hw..o * ncols + (n + 1) * hw];
                        let d0 = ((n0 + n) * g.o + o) * hw;
                        for (d, s) in out[d0..d0 + hw].iter_mut().zip(src) {
                            *d = s + bias;
                        }
                    }
                }
            }
            Ok(plain(vec![g.n, g.o, g.ho, g.wo], out))
        }
        OpKind::Relu => {
            arity(op, inputs, 1)?;
            let v = inputs[0].values().iter().map(|&x| x.max(0.0)).collect();
            Ok(plain(inputs[0].shape().to_vec(), v))
        }
        OpKind::Log => {
            arity(op, inputs, 1)?;
            let v = inputs[0].values().iter().map(|&x| x.ln()).collect();
            Ok(plain(inputs[0].shape().to_vec(), v))
        }
        OpKind::Scale(c) => {
            arity(op, inputs, 1)?;
            let v = inputs[0].values().iter().map(|&x| x * c).collect();
            Ok(plain(inputs[0].shape().to_vec(), v))
        }
        OpKind::Add | OpKind::Mul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a.shape(), b.shape()));
            }
            let v = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| if *op == OpKind::Add { x + y } else { x * y })
                .collect();
            Ok(plain(a.shape().to_vec(), v))
        }
        OpKind::AddBias => {
            arity(op, inputs, 2)?;
            let (n, c, s) = ncs(op, inputs[0].shape())?;
            if inputs[1].shape() != [c] {
                return Err(mismatch(op, inputs[0].shape(), inputs[1].shape()));
            }
            let b = inputs[1].values();
            let mut v = inputs[0].values().to_vec();
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * s;
                    v[off..off + s].iter_mut().for_each(|x| *x += b[ci]);
                }
            }
            Ok(plain(inputs[0].shape().to_vec(), v))
        }
        OpKind::Softmax => {
            arity(op, inputs, 1)?;
            let (n, c, s) = ncs(op, inputs[0].shape())?;
            let x = inputs[0].values();
            let mut v = vec![0.0; x.len()];
            for ni in 0..n {
                for si in 0..s {
                    let idx = |ci: usize| (ni * c + ci) * s + si;
                    let max = (0..c).map(|ci| x[idx(ci)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for ci in 0..c {
                        let e = (x[idx(ci)] - max).exp();
                        v[idx(ci)] = e;
                        z += e;
                    }
                    for ci in 0..c {
                        v[idx(ci)] /= z;
                    }
                }
            }
            Ok(plain(inputs[0].shape().to_vec(), v))
        }
        OpKind::Entropy => {
            arity(op, inputs, 1)?;
            let shape = inputs[0].shape();
            let (n, c, s) = ncs(op, shape)?;
            let p = inputs[0].values();
            let mut v = vec![0.0; n * s];
            for ni in 0..n {
                for si in 0..s {
                    v[ni * s + si] = -(0..c)
                        .map(|ci| plogp(p[(ni * c + ci) * s + si]))
                        .sum::<f64>();
                }
            }
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&shape[2..]);
            Ok(plain(out_shape, v))
        }
        OpKind::GlobalAvgPool => {
            arity(op, inputs, 1)?;
            let (n, c, s) = ncs(op, inputs[0].shape())?;
            let x = inputs[0].values();
            let v = (0..n * c)
                .map(|i| x[i * s..(i + 1) * s].iter().sum::<f64>() / s as f64)
                .collect();
            Ok(plain(vec![n, c], v))
        }
        OpKind::AvgPool2 => {
            arity(op, inputs, 1)?;
            let sh = inputs[0].shape();
            if sh.len() != 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0 {
                return Err(mismatch(op, sh, &[2, 2]));
            }
            let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
            let (ho, wo) = (h / 2, w / 2);
            let x = inputs[0].values();
            let mut v = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut v[p * ho * wo..(p + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let (y, xx) = (2 * oy, 2 * ox);
                        dst[oy * wo + ox] = 0.25
                            * (src[y * w + xx]
                                + src[y * w + xx + 1]
                                + src[(y + 1) * w + xx]
                                + src[(y + 1) * w + xx + 1]);
                    }
                }
            }
            Ok(plain(vec![n, c, ho, wo], v))
        }
        OpKind::Sum | OpKind::Mean => {
            arity(op, inputs, 1)?;
            let x = inputs[0].values();
            let mut s: f64 = x.iter().sum();
            if *op == OpKind::Mean {
                s /= x.len() as f64;
            }
            Ok(plain(vec![1], vec![s]))
        }
        OpKind::CrossEntropy { targets } => {
            arity(op, inputs, 1)?;
            let sh = inputs[0].shape();
            if sh.len() != 2 {
                return Err(mismatch(op, sh, &[targets.len()]));
            }
            let (n, c) = (sh[0], sh[1]);
            if targets.len() != n {
                return Err(AutodiffError::TargetCount {
                    targets: targets.len(),
                    batch: n,
                });
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= c) {
                return Err(AutodiffError::TargetOutOfRange { target: t, classes: c });
            }
            let z = inputs[0].values();
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for i in 0..n {
                let row = &z[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
                loss += lse - row[targets[i]];
            }
            Ok(Forward {
                shape: vec![1],
                values: vec![loss / n as f64],
                saved: probs,
            })
        }
        OpKind::Reshape(shape) => {
            arity(op, inputs, 1)?;
            let n: usize = shape.iter().product();
            if n != inputs[0].len() || shape.contains(&0) {
                return Err(mismatch(op, inputs[0].shape(), shape));
            }
            Ok(plain(shape.clone(), inputs[0].values().to_vec()))
        }
        OpKind::SliceBatch { start, len } => {
            arity(op, inputs, 1)?;
            let sh = inputs[0].shape();
            if *len == 0 || start + len > sh[0] {
                return Err(mismatch(op, sh, &[*start, *len]));
            }
            let row: usize = sh[1..].iter().product();
            let v = inputs[0].values()[start * row..(start + len) * row].to_vec();
            let mut shape = sh.to_vec();
            shape[0] = *len;
            Ok(plain(shape, v))
        }
        OpKind::ConcatBatch => {
            if inputs.is_empty() {
                return Err(AutodiffError::Arity {
                    op: op.name(),
                    expected: 1,
                    got: 0,
                });
            }
            let first = inputs[0].shape();
            let mut rows = 0;
            let mut v = Vec::new();
            for t in inputs {
                if t.shape()[1..] != first[1..] {
                    return Err(mismatch(op, first, t.shape()));
                }
                rows += t.shape()[0];
                v.extend_from_slice(t.values());
            }
            let mut shape = first.to_vec();
            shape[0] = rows;
            Ok(plain(shape, v))
        }
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Adjoints for each input (None where not requested).
pub(crate) fn backward(
    op: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &[f64],
    gout: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        OpKind::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            if need[0] {
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    gout,
                    Layout::row_major(n),
                    inputs[1].values(),
                    Layout::transposed(n),
                    0.0,
                    &mut da,
                );
                grads[0] = Some(da);
            }
            if need[1] {
                let mut db = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    inputs[0].values(),
                    Layout::transposed(k),
                    gout,
                    Layout::row_major(n),
                    0.0,
                    &mut db,
                );
                grads[1] = Some(db);
            }
        }
        OpKind::Conv2d { stride, padding } => {
            let g = conv_geom(op, inputs[0].shape(), inputs[1].shape(), *stride, *padding)
                .expect("validated in forward");
            let hw = g.ho * g.wo;
            let need_b = need.get(2).copied().unwrap_or(false);
            let mut dw = vec![0.0; g.o * g.rows()];
            let mut db = vec![0.0; g.o];
            let mut dx = vec![0.0; if need[0] { inputs[0].len() } else { 0 }];
            let (mut cols, mut gmat, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
            let step = g.chunk();
            for n0 in (0..g.n).step_by(step) {
                let nb = step.min(g.n - n0);
                let ncols = nb * hw;
                gmat.clear();
                gmat.resize(g.o * ncols, 0.0);
                for n in 0..nb {
                    for o in 0..g.o {
                        let s0 = ((n0 + n) * g.o + o) * hw;
                        gmat[o * ncols + n * hw..o * ncols + (n + 1) * hw]
                            .copy_from_slice(&gout[s0..s0 + hw]);
                    }
                }
                if need_b {
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += gmat[o * ncols..(o + 1) * ncols].iter().sum::<f64>();
                    }
                }
                if need[1] {
                    im2col(&g, inputs[0].values(), n0, nb, &mut cols);
                    gemm(
                        g.o,
                        ncols,
                        g.rows(),
                        &gmat,
                        Layout::row_major(ncols),
                        &cols,
                        Layout::transposed(ncols),
                        1.0,
                        &mut dw,
                    );
                }
                if need[0] {
                    dcols.clear();
                    dcols.resize(g.rows() * ncols, 0.0);
                    gemm(
                        g.rows(),
                        g.o,
                        ncols,
                        inputs[1].values(),
                        Layout::transposed(g.rows()),
                        &gmat,
                        Layout::row_major(ncols),
                        0.0,
                        &mut dcols,
                    );
                    col2im(&g, &dcols, n0, nb, &mut dx);
                }
            }
            if need[0] {
                grads[0] = Some(dx);
            }
            if need[1] {
                grads[1] = Some(dw);
            }
            if need_b {
                grads[2] = Some(db);
            }
        }
        OpKind::Relu => {
            let g = inputs[0]
                .values()
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            grads[0] = Some(g);
        }
        OpKind::Log => {
            let g = inputs[0]
                .values()
                .iter()
                .zip(gout)
                .map(|(&x, &g)| g / x)
                .collect();
            grads[0] = Some(g);
        }
        OpKind::Scale(c) => grads[0] = Some(gout.iter().map(|g| g * c).collect()),
        OpKind::Add => {
            for (i, slot) in grads.iter_mut().enumerate() {
                if need[i] {
                    *slot = Some(gout.to_vec());
                }
            }
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0].values(), inputs[1].values());
            if need[0] {
                grads[0] = Some(gout.iter().zip(b).map(|(g, y)| g * y).collect());
            }
            if need[1] {
                grads[1] = Some(gout.iter().zip(a).map(|(g, x)| g * x).collect());
            }
        }
        OpKind::AddBias => {
            if need[0] {
                grads[0] = Some(gout.to_vec());
            }
            if need[1] {
                let (n, c, s) = ncs(op, inputs[0].shape()).unwrap();
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for (ci, d) in db.iter_mut().enumerate() {
                        let off = (ni * c + ci) * s;
                        *d += gout[off..off + s].iter().sum::<f64>();
                    }
                }
                grads[1] = Some(db);
            }
        }
        OpKind::Softmax => {
            let (n, c, s) = ncs(op, inputs[0].shape()).unwrap();
            let y = output.values();
            let mut g = vec![0.0; y.len()];
            for ni in 0..n {
                for si in 0..s {
                    let idx = |ci: usize| (ni * c + ci) * s + si;
                    let dot: f64 = (0..c).map(|ci| y[idx(ci)] * gout[idx(ci)]).sum();
                    for ci in 0..c {
                        g[idx(ci)] = y[idx(ci)] * (gout[idx(ci)] - dot);
                    }
                }
            }
            grads[0] = Some(g);
        }
        OpKind::Entropy => {
            let (n, c, s) = ncs(op, inputs[0].shape()).unwrap();
            let p = inputs[0].values();
            let mut g = vec![0.0; p.len()];
            for ni in 0..n {
                for si in 0..s {
                    let go = gout[ni * s + si];
                    for ci in 0..c {
                        let i = (ni * c + ci) * s + si;
                        if p[i] > 0.0 {
                            g[i] = -go * (p[i].ln() + 1.0);
                        }
                    }
                }
            }
            grads[0] = Some(g);
        }
        OpKind::GlobalAvgPool => {
            let (n, c, s) = ncs(op, inputs[0].shape()).unwrap();
            let mut g = vec![0.0; n * c * s];
            for i in 0..n * c {
                let v = gout[i] / s as f64;
                g[i * s..(i + 1) * s].iter_mut().for_each(|x| *x = v);
            }
            grads[0] = Some(g);
        }
        OpKind::AvgPool2 => {
            let sh = inputs[0].shape();
            let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut g = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &gout[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = 0.25 * src[(y / 2) * wo + x / 2];
                    }
                }
            }
            grads[0] = Some(g);
        }
        OpKind::Sum => grads[0] = Some(vec![gout[0]; inputs[0].len()]),
        OpKind::Mean => {
            let n = inputs[0].len();
            grads[0] = Some(vec![gout[0] / n as f64; n]);
        }
        OpKind::CrossEntropy { targets } => {
            let c = inputs[0].shape()[1];
            let n = targets.len();
            let scale = gout[0] / n as f64;
            let mut g: Vec<f64> = saved.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                g[i * c + t] -= scale;
            }
            grads[0] = Some(g);
        }
        OpKind::Reshape(_) => grads[0] = Some(gout.to_vec()),
        OpKind::SliceBatch { start, len } => {
            let sh = inputs[0].shape();
            let row: usize = sh[1..].iter().product();
            let mut g = vec![0.0; inputs[0].len()];
            g[start * row..(start + len) * row].copy_from_slice(gout);
            grads[0] = Some(g);
        }
        OpKind::ConcatBatch => {
            let mut off = 0;
            for (i, t) in inputs.iter().enumerate() {
                if need[i] {
                    grads[i] = Some(gout[off..off + t.len()].to_vec());
                }
                off += t.len();
            }
        }
    }
    grads
}
