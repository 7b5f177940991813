//! Attention-alignment similarities and losses.
//!
//! Two similarities compare an attention map `p` against a target map `t`:
//!
//! * dot: `pᵀt`, differentiable in both arguments;
//! * rank: NDCG of the sigmoid-smoothed ranks of `p` against the hard ranks
//!   of `t`, differentiable in `p` only.
//!
//! The listwise alignment loss is a cross-entropy over the similarities of
//! every candidate's map against the gold map of the other process.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::Scalar;

/// Candidates per process.
pub const NUM_CHOICES: usize = 4;

/// Default smoothing sharpness of the approximate ranks.
pub const DEFAULT_ALPHA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Dot,
    Rank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub mode: AlignMode,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { mode: AlignMode::Dot, alpha: DEFAULT_ALPHA, lambda: 1.0 }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Rank positions, 1 for the largest weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RankVector<S> {
    ranks: Vec<S>,
    hard: bool,
}

impl<S: Scalar> RankVector<S> {
    /// Exact ranks; must be a permutation of `1..=N`.
    pub fn hard(ranks: &[usize]) -> Result<Self> {
        let mut seen = vec![false; ranks.len()];
        for &r in ranks {
            if r == 0 || r > ranks.len() || std::mem::replace(&mut seen[r - 1], true) {
                return Err(contract(format!("{ranks:?} is not a permutation of 1..={}", ranks.len())));
            }
        }
        Ok(RankVector { ranks: ranks.iter().map(|&r| S::from_usize_lossy(r)).collect(), hard: true })
    }

    pub fn ranks(&self) -> &[S] {
        &self.ranks
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Rounds every rank to the nearest integer.
    pub fn rounded(&self) -> Vec<usize> {
        self.ranks.iter().map(|r| r.round().to_usize().unwrap_or(0)).collect()
    }
}

/// Integer ranks of `weights`: descending order, ties to the lower index.
pub fn hard_rank_positions<S: Scalar>(weights: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0; weights.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

pub fn hard_ranks<S: Scalar>(c: &AttentionMap<S>) -> RankVector<S> {
    RankVector::hard(&hard_rank_positions(c.weights())).expect("sort yields a permutation")
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(contract(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}

/// `pᵀt` as a scalar node.
pub fn sim_dot_var<S: Scalar>(g: &mut Graph<S>, p: Var, t: Var) -> Result<Var> {
    check_len(g.value(p).len(), g.value(t).len(), "sim_dot")?;
    g.dot(p, t)
}

/// Smoothed ranks `1 + Σ_{j≠i} sigmoid(-α(c_i - c_j))`, shape `[N]`.
pub fn approx_ranks_var<S: Scalar>(g: &mut Graph<S>, c: Var, alpha: S) -> Result<Var> {
    let n = g.value(c).len();
    let diffs = g.pairwise_diff(c)?;
    let scaled = g.scale(diffs, -alpha)?;
    let pairs = g.sigmoid(scaled)?;
    let ones = g.constant(Tensor::ones(vec![n, 1]))?;
    let row_sums = g.matmul(pairs, ones)?;
    let row_sums = g.reshape(row_sums, vec![n])?;
    // The diagonal contributes sigmoid(0) = 1/2 to every row sum.
    g.add_scalar(row_sums, S::lit(0.5))
}

/// Unnormalised DCG of predicted ranks against hard target ranks:
/// `Σ_i (2^{N+1-π_p,i} - 1) / ln(1 + π_t,i)`.
fn dcg_var<S: Scalar>(g: &mut Graph<S>, pred: Var, target: &[usize]) -> Result<Var> {
    let n = target.len();
    let relevance = g.scale(pred, -S::one())?;
    let relevance = g.add_scalar(relevance, S::from_usize_lossy(n + 1))?;
    let exponent = g.scale(relevance, S::lit(std::f64::consts::LN_2))?;
    let gain = g.exp(exponent)?;
    let gain = g.add_scalar(gain, -S::one())?;
    let discount: Vec<S> = target.iter().map(|&t| S::from_usize_lossy(1 + t).ln().recip()).collect();
    let discount = g.constant(Tensor::vector(discount)?)?;
    g.dot(gain, discount)
}

/// NDCG of `pred` (hard or smoothed ranks node) against hard `target` ranks.
pub fn ndcg_var<S: Scalar>(g: &mut Graph<S>, pred: Var, target: &[usize]) -> Result<Var> {
    check_len(g.value(pred).len(), target.len(), "ndcg")?;
    let ideal_ranks = g.constant(Tensor::vector(target.iter().map(|&t| S::from_usize_lossy(t)).collect())?)?;
    let ideal = dcg_var(g, ideal_ranks, target)?;
    let ideal = g.item(ideal)?;
    let dcg = dcg_var(g, pred, target)?;
    g.div_scalar(dcg, ideal)
}

/// Rank similarity; the target's hard ranks are read off its current value.
pub fn sim_rank_var<S: Scalar>(g: &mut Graph<S>, p: Var, t: Var, alpha: S) -> Result<Var> {
    check_len(g.value(p).len(), g.value(t).len(), "sim_rank")?;
    let target = hard_rank_positions(g.value(t).data());
    let smoothed = approx_ranks_var(g, p, alpha)?;
    ndcg_var(g, smoothed, &target)
}

/// Similarity between two per-layer map stacks: the mean of the per-layer
/// similarity over the layers selected by `mask` (all layers when `None`).
pub fn layerwise_similarity_var<S: Scalar>(
    g: &mut Graph<S>,
    p: &[Var],
    t: &[Var],
    mode: AlignMode,
    alpha: S,
    mask: Option<&[bool]>,
) -> Result<Var> {
    check_len(p.len(), t.len(), "layer count")?;
    if let Some(m) = mask {
        check_len(m.len(), p.len(), "layer mask")?;
    }
    let mut sims = Vec::with_capacity(p.len());
    for (layer, (&pl, &tl)) in p.iter().zip(t).enumerate() {
        if mask.is_some_and(|m| !m[layer]) {
            continue;
        }
        sims.push(match mode {
            AlignMode::Dot => sim_dot_var(g, pl, tl)?,
            AlignMode::Rank => sim_rank_var(g, pl, tl, alpha)?,
        });
    }
    match sims.len() {
        0 => Err(contract("no layers selected for alignment")),
        1 => Ok(sims[0]),
        k => {
            let rows = sims.iter().map(|&s| g.reshape(s, vec![1])).collect::<Result<Vec<_>>>()?;
            let stacked = g.concat(&rows, 0)?;
            let total = g.sum(stacked)?;
            g.div_scalar(total, S::from_usize_lossy(k))
        }
    }
}

/// The two listwise alignment cross-entropies and their sum.
#[derive(Clone, Copy, Debug)]
pub struct AlignLossVars {
    pub qa: Var,
    pub qar: Var,
    pub align: Var,
}

/// Alignment losses over per-candidate map stacks (one entry per layer;
/// single-layer models pass one map per candidate).
pub fn alignment_losses_var<S: Scalar>(
    g: &mut Graph<S>,
    maps_qa: &[Vec<Var>],
    maps_qar: &[Vec<Var>],
    gold_a: usize,
    gold_r: usize,
    cfg: &AlignConfig,
    mask: Option<&[bool]>,
) -> Result<AlignLossVars> {
    if maps_qa.len() != NUM_CHOICES || maps_qar.len() != NUM_CHOICES {
        return Err(contract(format!(
            "alignment needs {NUM_CHOICES} candidates per process, got {} and {}",
            maps_qa.len(),
            maps_qar.len()
        )));
    }
    if gold_a >= NUM_CHOICES {
        return Err(Error::Index { index: gold_a, len: NUM_CHOICES });
    }
    if gold_r >= NUM_CHOICES {
        return Err(Error::Index { index: gold_r, len: NUM_CHOICES });
    }
    let alpha = S::lit(cfg.alpha);
    let listwise = |g: &mut Graph<S>, cands: &[Vec<Var>], target: &[Var], gold: usize| -> Result<Var> {
        let sims = cands
            .iter()
            .map(|c| {
                let s = layerwise_similarity_var(g, c, target, cfg.mode, alpha, mask)?;
                g.reshape(s, vec![1])
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = g.concat(&sims, 0)?;
        g.cross_entropy_with_logits(logits, gold)
    };
    let qa = listwise(g, maps_qa, &maps_qar[gold_r], gold_a)?;
    let qar = listwise(g, maps_qar, &maps_qa[gold_a], gold_r)?;
    let align = g.add(qa, qar)?;
    Ok(AlignLossVars { qa, qar, align })
}

/// `L_qa + L_qar + λ·L_align`; with `λ = 0` the alignment term is left off the graph.
pub fn total_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    l_qa: Var,
    l_qar: Var,
    l_align: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let base = g.add(l_qa, l_qar)?;
    match l_align {
        Some(a) if lambda != 0.0 => {
            let weighted = g.scale(a, S::lit(lambda))?;
            g.add(base, weighted)
        }
        _ => Ok(base),
    }
}

pub fn total_loss<S: Scalar>(l_qa: S, l_qar: S, l_align: S, lambda: S) -> S {
    if lambda == S::zero() {
        l_qa + l_qar
    } else {
        l_qa + l_qar + lambda * l_align
    }
}

fn eval_maps<S: Scalar, T>(maps: &[&AttentionMap<S>], f: impl FnOnce(&mut Graph<S>, &[Var]) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    let vars = maps.iter().map(|m| g.constant(m.tensor().clone())).collect::<Result<Vec<_>>>()?;
    f(&mut g, &vars)
}

pub fn sim_dot<S: Scalar>(p: &AttentionMap<S>, t: &AttentionMap<S>) -> Result<S> {
    eval_maps(&[p, t], |g, v| {
        let s = sim_dot_var(g, v[0], v[1])?;
        g.item(s)
    })
}

pub fn approx_ranks<S: Scalar>(c: &AttentionMap<S>, alpha: S) -> Result<RankVector<S>> {
    if alpha <= S::zero() {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    eval_maps(&[c], |g, v| {
        let r = approx_ranks_var(g, v[0], alpha)?;
        Ok(RankVector { ranks: g.value(r).data().to_vec(), hard: false })
    })
}

pub fn ndcg<S: Scalar>(pred: &RankVector<S>, target: &RankVector<S>) -> Result<S> {
    check_len(pred.len(), target.len(), "ndcg")?;
    if !target.is_hard() {
        return Err(contract("ndcg target ranks must be hard"));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(pred.ranks.clone())?)?;
    let out = ndcg_var(&mut g, p, &target.rounded())?;
    g.item(out)
}

pub fn sim_rank<S: Scalar>(p: &AttentionMap<S>, t: &AttentionMap<S>, alpha: S) -> Result<S> {
    eval_maps(&[p, t], |g, v| {
        let s = sim_rank_var(g, v[0], v[1], alpha)?;
        g.item(s)
    })
}

/// Constant-input evaluation of [`alignment_losses_var`]: `(L_qa, L_qar, L_align)`.
pub fn alignment_losses<S: Scalar>(
    maps_qa: &[AttentionMap<S>],
    maps_qar: &[AttentionMap<S>],
    gold_a: usize,
    gold_r: usize,
    cfg: &AlignConfig,
) -> Result<(S, S, S)> {
    let all: Vec<&AttentionMap<S>> = maps_qa.iter().chain(maps_qar).collect();
    let split = maps_qa.len();
    eval_maps(&all, |g, v| {
        let qa: Vec<Vec<Var>> = v[..split].iter().map(|&x| vec![x]).collect();
        let qar: Vec<Vec<Var>> = v[split..].iter().map(|&x| vec![x]).collect();
        let l = alignment_losses_var(g, &qa, &qar, gold_a, gold_r, cfg, None)?;
        Ok((g.item(l.qa)?, g.item(l.qar)?, g.item(l.align)?))
    })
}
