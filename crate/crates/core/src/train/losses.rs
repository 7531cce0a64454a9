use super::TrainError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::synthgen::ClassId;

/// Tolerance of the simplex check applied to histogram rows.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Reserved prediction meaning "none of the source classes".
pub const UNKNOWN: ClassId = ClassId::MAX;

/// Checks that every row along axis 1 of `field` is a distribution.
pub fn check_simplex(field: &Tensor) -> Result<(), TrainError> {
    let sh = field.shape();
    if sh.len() < 2 {
        return Err(TrainError::NotSimplex { row: 0, sum: f64::NAN });
    }
    let (n, k) = (sh[0], sh[1]);
    let s: usize = sh[2..].iter().product();
    let v = field.values();
    for ni in 0..n {
        for si in 0..s {
            let row = (0..k).map(|ki| v[(ni * k + ki) * s + si]);
            let mut sum = 0.0;
            let mut ok = true;
            for p in row {
                ok &= p >= -SIMPLEX_TOL && p.is_finite();
                sum += p;
            }
            if !ok || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(TrainError::NotSimplex { row: ni * s + si, sum });
            }
        }
    }
    Ok(())
}

/// Mean Shannon entropy (nats) over every location of a histogram field
/// `[N, K, ...]`.
pub fn loss_em_value(field: &Tensor) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let f = tape.constant(field.clone());
    let l = loss_em(&mut tape, f)?;
    Ok(tape.value(l).item())
}

/// Differentiable mean self-entropy of a histogram field.
pub fn loss_em(tape: &mut Tape, field: Var) -> Result<Var, TrainError> {
    check_simplex(tape.value(field))?;
    let h = tape.entropy(field)?;
    Ok(tape.mean(h)?)
}

/// Mean cross-entropy of pretext logits against 1-based instance counts.
pub fn loss_pretext(
    tape: &mut Tape,
    logits: Var,
    y_ins: &[usize],
    grid_size: usize,
) -> Result<Var, TrainError> {
    if y_ins.is_empty() {
        return Err(TrainError::EmptyBatch("pretext"));
    }
    let targets = y_ins
        .iter()
        .map(|&y| {
            if (1..=grid_size).contains(&y) {
                Ok(y - 1)
            } else {
                Err(TrainError::LabelOutOfRange { label: y, max: grid_size })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// `J = CE(source logits, labels) + λ · mean H(softmax(target logits))`.
pub fn baseline_unida_loss(
    tape: &mut Tape,
    source_logits: Var,
    labels: &[usize],
    target_logits: Var,
    lambda: f64,
) -> Result<Var, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyBatch("source"));
    }
    if tape.value(target_logits).shape()[0] == 0 {
        return Err(TrainError::EmptyBatch("target"));
    }
    let ce = tape.cross_entropy(source_logits, labels)?;
    let p = tape.softmax(target_logits)?;
    let h = tape.entropy(p)?;
    let h = tape.mean(h)?;
    let h = tape.scale(h, lambda)?;
    Ok(tape.add(ce, h)?)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Thresholded decision on goal probabilities: the index of the largest
/// probability (lowest index on ties) when `H(p) ≤ rho`, otherwise `None`.
pub fn infer_index(probs: &[f64], rho: f64) -> Option<usize> {
    if entropy(probs) > rho {
        return None;
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Some(best)
}

/// [`infer_index`] mapped to class ids; rejection yields [`UNKNOWN`].
pub fn infer(probs: &[f64], rho: f64, classes: &[ClassId]) -> ClassId {
    infer_index(probs, rho).map_or(UNKNOWN, |i| classes[i])
}

/// Default rejection threshold `ln(|C_s|) / 2`.
pub fn default_rho(num_source_classes: usize) -> f64 {
    (num_source_classes as f64).ln() / 2.0
}
