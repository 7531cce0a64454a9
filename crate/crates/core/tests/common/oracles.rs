//! Deliberately naive re-implementations used to cross-check the metrics.

use bowunida::metrics::{LayerTrials, TradeoffCriterion};
use bowunida::synthgen::ClassId;

pub const UNKNOWN: ClassId = ClassId::MAX;

fn shannon(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

/// Counts samples whose "entropy above threshold" flag equals the private flag.
pub fn ntr(probs: &[Vec<f64>], private: &[bool], rho: f64) -> f64 {
    let mut agree = 0;
    for i in 0..probs.len() {
        let flagged_unknown = shannon(&probs[i]) > rho;
        if flagged_unknown == private[i] {
            agree += 1;
        }
    }
    agree as f64 / probs.len() as f64
}

/// `(h, shared_acc, private_acc)`
pub fn h_score(preds: &[ClassId], truth: &[Option<ClassId>]) -> (f64, f64, f64) {
    let shared: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].is_some()).collect();
    let private: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].is_none()).collect();
    let a = shared.iter().filter(|&&i| Some(preds[i]) == truth[i]).count() as f64 / shared.len() as f64;
    let b = private.iter().filter(|&&i| preds[i] == UNKNOWN).count() as f64 / private.len() as f64;
    let h = if a == 0.0 && b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
    (h, a, b)
}

/// Rank by counting: 1 + #smaller + (#equal − 1)/2.
fn rank(x: &[f64], i: usize) -> f64 {
    let smaller = x.iter().filter(|&&v| v < x[i]).count() as f64;
    let equal = x.iter().filter(|&&v| v == x[i]).count() as f64;
    1.0 + smaller + (equal - 1.0) / 2.0
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let rx: Vec<f64> = (0..n).map(|i| rank(x, i)).collect();
    let ry: Vec<f64> = (0..n).map(|i| rank(y, i)).collect();
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx.sqrt() * syy.sqrt()))
    }
}

/// Enumerates qualifying layers, sorts by (score desc, layer desc), takes
/// the first.
pub fn select_layer(table: &[LayerTrials], c: &TradeoffCriterion) -> Option<usize> {
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for t in table {
        let n = t.trials.len() as f64;
        let mut ok = 0.0;
        let (mut sn, mut sd) = (0.0, 0.0);
        for &(ntr, dis) in &t.trials {
            if ntr <= c.zeta_n + c.eps_n && dis >= c.zeta_d - c.eps_d {
                ok += 1.0;
            }
            sn += ntr;
            sd += dis;
        }
        if ok / n >= 1.0 - c.delta {
            candidates.push((sd / n - sn / n, t.layer));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    candidates.first().map(|c| c.1)
}

/// Handcrafted `(probs, private flags, rho)` tables.
pub fn ntr_tables() -> Vec<(Vec<Vec<f64>>, Vec<bool>, f64)> {
    let rho = 6f64.ln() / 2.0;
    vec![
        (
            vec![
                vec![0.9, 0.02, 0.02, 0.02, 0.02, 0.02],
                vec![1.0 / 6.0; 6],
                vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
                vec![0.3, 0.3, 0.2, 0.2, 0.0, 0.0],
            ],
            vec![false, true, false, true],
            rho,
        ),
        (
            vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.6, 0.4]],
            vec![true, true, false],
            0.5,
        ),
        (
            vec![vec![0.25; 4], vec![0.7, 0.1, 0.1, 0.1], vec![0.4, 0.4, 0.1, 0.1]],
            vec![false, false, true],
            1.0,
        ),
    ]
}

/// Handcrafted `(predictions, truth)` tables.
pub fn h_score_tables() -> Vec<(Vec<ClassId>, Vec<Option<ClassId>>)> {
    vec![
        (
            vec![0, 1, 2, UNKNOWN, UNKNOWN, 3, UNKNOWN, 0],
            vec![Some(0), Some(1), Some(3), None, None, None, Some(2), None],
        ),
        (vec![UNKNOWN, UNKNOWN], vec![Some(4), None]),
        (vec![5, 5, 5, 5], vec![Some(5), Some(5), None, None]),
        (
            vec![1, 2, 3, UNKNOWN, UNKNOWN, UNKNOWN],
            vec![Some(1), Some(2), Some(3), None, None, None],
        ),
    ]
}

pub fn spearman_tables() -> Vec<(Vec<f64>, Vec<f64>)> {
    vec![
        (vec![1.0, 2.0, 3.0, 4.0], vec![0.1, 0.3, 0.2, 0.9]),
        (vec![1.0, 2.0, 3.0, 4.0], vec![0.9, 0.7, 0.5, 0.1]),
        (vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0, 2.0, 1.0, 3.0, 3.0]),
        (vec![3.0, 1.0, 2.0], vec![30.0, 10.0, 20.0]),
        (vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.5, 0.5, 0.5]),
        (vec![0.2, 0.2, 0.8, 0.4, 0.8, 0.1], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0]),
    ]
}

fn trials(layer: usize, t: &[(f64, f64)]) -> LayerTrials {
    LayerTrials { layer, trials: t.to_vec() }
}

pub fn select_layer_tables() -> Vec<Vec<LayerTrials>> {
    vec![
        // Several layers qualify; the widest DIS − NTR margin wins.
        vec![
            trials(1, &[(0.5, 0.9), (0.52, 0.92), (0.48, 0.88)]),
            trials(2, &[(0.6, 0.7), (0.62, 0.68), (0.6, 0.71)]),
            trials(3, &[(0.7, 0.5), (0.72, 0.5), (0.74, 0.46)]),
            trials(4, &[(0.9, 0.2), (0.9, 0.25), (0.88, 0.3)]),
        ],
        // No layer qualifies.
        vec![
            trials(1, &[(0.9, 0.1), (0.95, 0.1)]),
            trials(2, &[(0.8, 0.3), (0.9, 0.2)]),
        ],
        // Equal scores: the deeper layer wins.
        vec![
            trials(1, &[(0.25, 0.75), (0.25, 0.75)]),
            trials(2, &[(0.5, 1.0), (0.5, 1.0)]),
        ],
        // One failing trial out of five is tolerated at δ = 0.2.
        vec![
            trials(1, &[(0.9, 0.5), (0.5, 0.5), (0.5, 0.5), (0.5, 0.5), (0.5, 0.5)]),
            trials(2, &[(0.9, 0.9), (0.9, 0.9), (0.5, 0.5), (0.5, 0.5), (0.5, 0.5)]),
        ],
    ]
}
