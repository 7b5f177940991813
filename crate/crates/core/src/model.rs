//! Interface shared by the two architectures: per-candidate scoring for the
//! answering (QA) and rationale (QAR) processes, and the joint objective.

use serde::{Deserialize, Serialize};

use crate::align::{alignment_losses_var, total_loss_var, AlignConfig, NUM_CHOICES};
use crate::attention::AttentionMap;
use crate::error::{contract, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::synth::{tokens, Instance, TokenId};
use crate::transformer::{TransformerDims, TransformerModel};
use crate::vanilla::{VanillaDims, VanillaModel};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Transformer,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Transformer => "transformer",
        })
    }
}

/// Which of the two jointly trained selectors a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Process {
    /// Question to answer.
    Qa,
    /// Question plus answer to rationale.
    Qar,
}

impl Process {
    pub fn prefix(self) -> &'static str {
        match self {
            Process::Qa => "qa",
            Process::Qar => "qar",
        }
    }
}

/// Prefix of parameters used by both processes.
pub const SHARED: &str = "shared";

/// Query for rationale selection: question, separator, given answer.
pub fn qar_query(question: &[TokenId], answer: &[TokenId]) -> Vec<TokenId> {
    let mut q = question.to_vec();
    q.push(tokens::SEP);
    q.extend_from_slice(answer);
    q
}

/// A choice model over an instance's candidates.
pub trait GistModel<S: Scalar> {
    fn variant(&self) -> Variant;
    fn params(&self) -> &ParamStore<S>;
    fn params_mut(&mut self) -> &mut ParamStore<S>;
    /// Object maps produced per candidate (one per layer).
    fn num_layers(&self) -> usize;

    /// Records one candidate's logit (shape `[]`) and its per-layer object
    /// distributions (each shape `[N]`).
    fn score_var(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        inst: &Instance,
        query: &[TokenId],
        candidate: &[TokenId],
        process: Process,
    ) -> Result<(Var, Vec<Var>)>;
}

/// Logits `[4]` and per-candidate map stacks of one process.
#[derive(Clone, Debug)]
pub struct ProcessVars {
    pub logits: Var,
    pub maps: Vec<Vec<Var>>,
}

pub fn forward_process_var<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    inst: &Instance,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    process: Process,
) -> Result<ProcessVars> {
    if candidates.len() != NUM_CHOICES {
        return Err(contract(format!("expected {NUM_CHOICES} candidates, got {}", candidates.len())));
    }
    let mut logits = Vec::with_capacity(NUM_CHOICES);
    let mut maps = Vec::with_capacity(NUM_CHOICES);
    for cand in candidates {
        let (logit, layer_maps) = model.score_var(g, p, inst, query, cand, process)?;
        logits.push(g.reshape(logit, vec![1])?);
        maps.push(layer_maps);
    }
    let logits = g.concat(&logits, 0)?;
    Ok(ProcessVars { logits, maps })
}

/// What the training loss includes beyond the two selection cross-entropies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Objective {
    /// `None` trains the two processes independently.
    pub align: Option<AlignConfig>,
    /// Layers entering the alignment term (all when `None`).
    pub layer_mask: Option<Vec<bool>>,
}

impl Objective {
    pub fn lambda(&self) -> f64 {
        self.align.as_ref().map_or(0.0, |c| c.lambda)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceLossVars {
    pub total: Var,
    pub qa: Var,
    pub qar: Var,
    pub align: Option<Var>,
}

/// Full per-instance loss; QAR conditions on the gold answer.
pub fn instance_loss_var<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &M,
    g: &mut Graph<S>,
    p: &Bound,
    inst: &Instance,
    objective: &Objective,
) -> Result<InstanceLossVars> {
    let qa = forward_process_var(model, g, p, inst, &inst.question, &inst.answers, Process::Qa)?;
    let query = qar_query(&inst.question, inst.gold_answer());
    let qar = forward_process_var(model, g, p, inst, &query, &inst.rationales, Process::Qar)?;
    let l_qa = g.cross_entropy_with_logits(qa.logits, inst.answer_label)?;
    let l_qar = g.cross_entropy_with_logits(qar.logits, inst.rationale_label)?;
    let align = match &objective.align {
        Some(cfg) => Some(
            alignment_losses_var(
                g,
                &qa.maps,
                &qar.maps,
                inst.answer_label,
                inst.rationale_label,
                cfg,
                objective.layer_mask.as_deref(),
            )?
            .align,
        ),
        None => None,
    };
    let total = total_loss_var(g, l_qa, l_qar, align, objective.lambda())?;
    Ok(InstanceLossVars { total, qa: l_qa, qar: l_qar, align })
}

/// One candidate's score and object maps (one per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScore<S> {
    pub logit: S,
    pub maps: Vec<AttentionMap<S>>,
}

impl<S: Scalar> CandidateScore<S> {
    /// The last layer's map.
    pub fn attention(&self) -> &AttentionMap<S> {
        self.maps.last().expect("at least one layer")
    }
}

/// Scores every candidate with constant parameters.
pub fn score_candidates<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &M,
    inst: &Instance,
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    process: Process,
) -> Result<Vec<CandidateScore<S>>> {
    let mut g = Graph::new();
    let p = model.params().bind_constant(&mut g)?;
    let vars = forward_process_var(model, &mut g, &p, inst, query, candidates, process)?;
    let logits = g.value(vars.logits).data().to_vec();
    logits
        .into_iter()
        .zip(&vars.maps)
        .map(|(logit, layers)| {
            let maps = layers.iter().map(|&m| AttentionMap::from_tensor(g.value(m).clone())).collect::<Result<_>>()?;
            Ok(CandidateScore { logit, maps })
        })
        .collect()
}

pub fn forward_q2a<S: Scalar, M: GistModel<S> + ?Sized>(model: &M, inst: &Instance) -> Result<Vec<CandidateScore<S>>> {
    score_candidates(model, inst, &inst.question, &inst.answers, Process::Qa)
}

pub fn forward_qa2r<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &M,
    inst: &Instance,
    answer: &[TokenId],
) -> Result<Vec<CandidateScore<S>>> {
    score_candidates(model, inst, &qar_query(&inst.question, answer), &inst.rationales, Process::Qar)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<S: Scalar>(scores: &[CandidateScore<S>]) -> usize {
    scores.iter().enumerate().fold(0, |best, (i, s)| if s.logit > scores[best].logit { i } else { best })
}

/// Objects as a tensor of the model's scalar type.
pub(crate) fn object_tensor<S: Scalar>(inst: &Instance) -> Result<Tensor<S>> {
    Ok(Tensor::from_rows(&inst.objects)?.cast())
}

/// Either architecture, chosen at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel<S> {
    Vanilla(VanillaModel<S>),
    Transformer(TransformerModel<S>),
}

impl<S: Scalar> AnyModel<S> {
    pub fn new(
        variant: Variant,
        vanilla: VanillaDims,
        transformer: TransformerDims,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(match variant {
            Variant::Vanilla => AnyModel::Vanilla(VanillaModel::new(vanilla, rng)?),
            Variant::Transformer => AnyModel::Transformer(TransformerModel::new(transformer, rng)?),
        })
    }

    pub fn from_params(
        variant: Variant,
        vanilla: VanillaDims,
        transformer: TransformerDims,
        params: ParamStore<S>,
    ) -> Result<Self> {
        Ok(match variant {
            Variant::Vanilla => AnyModel::Vanilla(VanillaModel::from_params(vanilla, params)?),
            Variant::Transformer => AnyModel::Transformer(TransformerModel::from_params(transformer, params)?),
        })
    }

    fn inner(&self) -> &dyn GistModel<S> {
        match self {
            AnyModel::Vanilla(m) => m,
            AnyModel::Transformer(m) => m,
        }
    }
}

impl<S: Scalar> GistModel<S> for AnyModel<S> {
    fn variant(&self) -> Variant {
        self.inner().variant()
    }

    fn params(&self) -> &ParamStore<S> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        match self {
            AnyModel::Vanilla(m) => m.params_mut(),
            AnyModel::Transformer(m) => m.params_mut(),
        }
    }

    fn num_layers(&self) -> usize {
        self.inner().num_layers()
    }

    fn score_var(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        inst: &Instance,
        query: &[TokenId],
        candidate: &[TokenId],
        process: Process,
    ) -> Result<(Var, Vec<Var>)> {
        self.inner().score_var(g, p, inst, query, candidate, process)
    }
}
