use serde::{Deserialize, Serialize};

use super::losses::{baseline_unida_loss, infer_index, loss_em, loss_pretext};
use super::{GradientRoutingPolicy, LossWeights, Term, TrainError};
use crate::autodiff::{ParamId, Sgd, Tape, Var};
use crate::bownet::{images_to_tensor, Model, Want};
use crate::synthgen::{Image, PretextSample};

/// A UniDA training algorithm plugged under the subsidiary objective.
pub trait UnidaAlgo {
    fn name(&self) -> &'static str;

    /// Goal-task loss `J` on a labeled source batch and an unlabeled target
    /// batch; `params` are the model's tape bindings.
    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        params: &[Var],
        source: &[&Image],
        labels: &[usize],
        target: &[&Image],
    ) -> Result<Var, TrainError>;

    /// Source-class index, or `None` for unknown.
    fn predict(&self, probs: &[f64]) -> Option<usize>;
}

/// Source cross-entropy plus λ-weighted target entropy minimization, with a
/// fixed entropy threshold at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyThreshold {
    pub lambda: f64,
    pub rho: f64,
}

impl UnidaAlgo for EntropyThreshold {
    fn name(&self) -> &'static str {
        "entropy_threshold"
    }

    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        params: &[Var],
        source: &[&Image],
        labels: &[usize],
        target: &[&Image],
    ) -> Result<Var, TrainError> {
        if source.is_empty() || labels.len() != source.len() {
            return Err(TrainError::EmptyBatch("source"));
        }
        if target.is_empty() {
            return Err(TrainError::EmptyBatch("target"));
        }
        // One pass over source ∪ target, split afterwards.
        let all: Vec<&Image> = source.iter().chain(target).copied().collect();
        let x = tape.constant(images_to_tensor(&all));
        let want = Want { goal: true, ..Want::default() };
        let z = model.forward(tape, params, x, want)?.goal_logits.unwrap();
        let zs = tape.slice_batch(z, 0, source.len())?;
        let zt = tape.slice_batch(z, source.len(), target.len())?;
        baseline_unida_loss(tape, zs, labels, zt, self.lambda)
    }

    fn predict(&self, probs: &[f64]) -> Option<usize> {
        infer_index(probs, self.rho)
    }
}

/// Inputs of one optimizer step. Pretext batches may be empty when the
/// pretext term is inactive.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub source: &'a [&'a Image],
    pub source_labels: &'a [usize],
    pub target: &'a [&'a Image],
    pub pretext_source: &'a [&'a PretextSample],
    pub pretext_target: &'a [&'a PretextSample],
}

/// Terms requested for a step; a term also needs a positive weight (and ψ,
/// for L_em) to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub goal: bool,
    pub pretext: bool,
    pub em: bool,
}

impl TermSet {
    pub const ALL: Self = Self { goal: true, pretext: true, em: true };
    pub const GOAL: Self = Self { goal: true, pretext: false, em: false };
    pub const SUBSIDIARY: Self = Self { goal: false, pretext: true, em: true };
}

/// Loss values of one step; absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_tn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_em: Option<f64>,
}

impl StepRecord {
    /// Field-wise union, later values winning.
    pub fn merge(&mut self, other: &StepRecord) {
        self.j = other.j.or(self.j);
        self.l_sn = other.l_sn.or(self.l_sn);
        self.l_tn = other.l_tn.or(self.l_tn);
        self.l_em = other.l_em.or(self.l_em);
    }
}

fn finite(term: &'static str, value: f64, iter: usize) -> Result<f64, TrainError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite { term, value, iter })
    }
}

/// One optimizer update. Each active term is differentiated on its own tape
/// with only its routed parameter groups bound as trainable (everything else
/// enters as constants, so gradients still flow *through* frozen layers).
/// Gradients of all active terms accumulate before a single SGD step over
/// the union of their update sets.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    algo: &dyn UnidaAlgo,
    policy: &GradientRoutingPolicy,
    weights: &LossWeights,
    opt: &mut Sgd,
    batch: &StepBatch,
    terms: TermSet,
    iter: usize,
) -> Result<StepRecord, TrainError> {
    let mut rec = StepRecord { iter, ..StepRecord::default() };
    let mut active = Vec::new();
    model.params.zero_grads();

    if terms.goal {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |g| policy.updates(Term::Goal, g));
        let j = algo.loss(model, &mut tape, &p, batch.source, batch.source_labels, batch.target)?;
        rec.j = Some(finite("goal (J)", tape.value(j).item(), iter)?);
        tape.backward(j)?;
        tape.accumulate_into(&mut model.params);
        active.push(Term::Goal);
    }

    let pretext_on = terms.pretext
        && weights.weight_pretext > 0.0
        && !(batch.pretext_source.is_empty() && batch.pretext_target.is_empty());
    if pretext_on {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |g| policy.updates(Term::Pretext, g));
        let mut total: Option<Var> = None;
        for (set, slot, name) in [
            (batch.pretext_source, &mut rec.l_sn, "pretext source (L_s,n)"),
            (batch.pretext_target, &mut rec.l_tn, "pretext target (L_t,n)"),
        ] {
            if set.is_empty() {
                continue;
            }
            let imgs: Vec<&Image> = set.iter().map(|s| &s.pixels).collect();
            let y: Vec<usize> = set.iter().map(|s| s.y_ins).collect();
            let x = tape.constant(images_to_tensor(&imgs));
            let want = Want { pretext: true, ..Want::default() };
            let z = model.forward(&mut tape, &p, x, want)?.pretext_logits.unwrap();
            let l = loss_pretext(&mut tape, z, &y, model.grid_size)?;
            *slot = Some(finite(name, tape.value(l).item(), iter)?);
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.unwrap(), weights.weight_pretext)?;
        tape.backward(loss)?;
        tape.accumulate_into(&mut model.params);
        active.push(Term::Pretext);
    }

    if terms.em && weights.weight_em > 0.0 && model.has_psi() {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |g| policy.updates(Term::Em, g));
        let all: Vec<&Image> = batch.source.iter().chain(batch.target).copied().collect();
        if all.is_empty() {
            return Err(TrainError::EmptyBatch("self-entropy"));
        }
        let x = tape.constant(images_to_tensor(&all));
        let want = Want { histogram_only: true, ..Want::default() };
        let hist = model.forward(&mut tape, &p, x, want)?.histogram.unwrap();
        let l = loss_em(&mut tape, hist)?;
        rec.l_em = Some(finite("self-entropy (L_em)", tape.value(l).item(), iter)?);
        let loss = tape.scale(l, weights.weight_em)?;
        tape.backward(loss)?;
        tape.accumulate_into(&mut model.params);
        active.push(Term::Em);
    }

    let ids: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&id| active.iter().any(|&t| policy.updates(t, model.group(id))))
        .collect();
    opt.step(&mut model.params, &ids, iter);
    model.params.zero_grads();
    Ok(rec)
}
