use serde::Serialize;

use crate::align::sim_dot;
use crate::attention::AttentionMap;
use crate::error::{contract, Result};
use crate::model::{argmax, forward_q2a, forward_qa2r, CandidateScore, GistModel};
use crate::synth::Instance;
use crate::Scalar;

/// Validation metrics of one model over one dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub acc_q2a: f64,
    pub acc_qa2r: f64,
    pub acc_q2ar: f64,
    /// Mean similarity between the gold answer's and gold rationale's maps.
    pub gold_similarity: f64,
    pub evidence_mass_qa: f64,
    pub evidence_mass_qar: f64,
}

/// Per-instance predictions and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceOutcome {
    pub answer: usize,
    pub rationale: usize,
    pub gold_similarity: f64,
    pub evidence_mass_qa: f64,
    pub evidence_mass_qar: f64,
}

fn layer_mean<S: Scalar>(maps: &[AttentionMap<S>], f: impl Fn(&AttentionMap<S>) -> Result<S>) -> Result<f64> {
    let mut total = 0.0;
    for m in maps {
        total += f(m)?.as_f64();
    }
    Ok(total / maps.len() as f64)
}

fn gold_pair_similarity<S: Scalar>(a: &CandidateScore<S>, r: &CandidateScore<S>) -> Result<f64> {
    if a.maps.len() != r.maps.len() {
        return Err(contract("processes produced different layer counts"));
    }
    let mut total = 0.0;
    for (p, t) in a.maps.iter().zip(&r.maps) {
        total += sim_dot(p, t)?.as_f64();
    }
    Ok(total / a.maps.len() as f64)
}

/// Rationale selection conditions on the gold answer.
pub fn evaluate_instance<S: Scalar, M: GistModel<S> + ?Sized>(model: &M, inst: &Instance) -> Result<InstanceOutcome> {
    let qa = forward_q2a(model, inst)?;
    let qar = forward_qa2r(model, inst, inst.gold_answer())?;
    let gold_a = &qa[inst.answer_label];
    let gold_r = &qar[inst.rationale_label];
    let evidence = |m: &AttentionMap<S>| Ok(m.weights()[inst.evidence]);
    Ok(InstanceOutcome {
        answer: argmax(&qa),
        rationale: argmax(&qar),
        gold_similarity: gold_pair_similarity(gold_a, gold_r)?,
        evidence_mass_qa: layer_mean(&gold_a.maps, evidence)?,
        evidence_mass_qar: layer_mean(&gold_r.maps, evidence)?,
    })
}

/// Q→A, QA→R and joint accuracy of `(answer, rationale)` predictions.
pub fn accuracies(predictions: &[(usize, usize)], data: &[Instance]) -> Result<(f64, f64, f64)> {
    if predictions.len() != data.len() || data.is_empty() {
        return Err(contract(format!("{} predictions for {} instances", predictions.len(), data.len())));
    }
    let (mut a, mut r, mut both) = (0usize, 0usize, 0usize);
    for (&(pa, pr), inst) in predictions.iter().zip(data) {
        let ok_a = pa == inst.answer_label;
        let ok_r = pr == inst.rationale_label;
        a += ok_a as usize;
        r += ok_r as usize;
        both += (ok_a && ok_r) as usize;
    }
    let n = data.len() as f64;
    Ok((a as f64 / n, r as f64 / n, both as f64 / n))
}

pub fn evaluate<S: Scalar, M: GistModel<S> + ?Sized>(model: &M, data: &[Instance]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(contract("cannot evaluate on an empty dataset"));
    }
    let outcomes = data.iter().map(|inst| evaluate_instance(model, inst)).collect::<Result<Vec<_>>>()?;
    let preds: Vec<(usize, usize)> = outcomes.iter().map(|o| (o.answer, o.rationale)).collect();
    let (acc_q2a, acc_qa2r, acc_q2ar) = accuracies(&preds, data)?;
    let n = data.len() as f64;
    let mean = |f: fn(&InstanceOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    Ok(EvalMetrics {
        acc_q2a,
        acc_qa2r,
        acc_q2ar,
        gold_similarity: mean(|o| o.gold_similarity),
        evidence_mass_qa: mean(|o| o.evidence_mass_qa),
        evidence_mass_qar: mean(|o| o.evidence_mass_qar),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Equal-width bins over `[0, 1]`; the top bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistBin>> {
    if bins < 2 {
        return Err(contract(format!("need at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(contract(format!("similarity {v} outside [0, 1]")));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin { bin_low: i as f64 / bins as f64, bin_high: (i + 1) as f64 / bins as f64, count })
        .collect())
}

pub fn gold_similarities<S: Scalar, M: GistModel<S> + ?Sized>(model: &M, data: &[Instance]) -> Result<Vec<f64>> {
    data.iter().map(|inst| Ok(evaluate_instance(model, inst)?.gold_similarity)).collect()
}

pub fn similarity_histogram<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &M,
    data: &[Instance],
    bins: usize,
) -> Result<Vec<HistBin>> {
    // Rounding can push a dot product of distributions a hair past 1.
    let values: Vec<f64> = gold_similarities(model, data)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    histogram(&values, bins)
}
