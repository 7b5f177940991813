//! Recurrent answer/rationale selector with re-attention over objects.
//!
//! Tokens are embedded together with a visual feature (the tagged object's
//! projection for tag tokens, the mean projection otherwise), encoded by a
//! bidirectional gated recurrent unit, and scored by a two-layer classifier
//! on the final state and the attention-pooled object feature.

use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, object_wise_attention, token_wise_attention, ReAttentionVars};
use crate::error::{Error, Result};
use crate::model::{object_tensor, GistModel, Process, Variant, SHARED};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::synth::{tokens, Instance, TokenId, FEATURE_DIM};
use crate::Scalar;

fn default_dim() -> usize {
    32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanillaDims {
    /// Token embedding width.
    #[serde(default = "default_dim")]
    pub d_t: usize,
    /// Projected object width.
    #[serde(default = "default_dim")]
    pub d_o: usize,
    /// Hidden width of each recurrent direction.
    #[serde(default = "default_dim")]
    pub d_h: usize,
    #[serde(default = "default_dim")]
    pub d_att: usize,
    /// Classifier hidden width.
    #[serde(default = "default_dim")]
    pub d_cls: usize,
}

impl Default for VanillaDims {
    fn default() -> Self {
        Self::uniform(default_dim())
    }
}

impl VanillaDims {
    pub fn uniform(d: usize) -> Self {
        VanillaDims { d_t: d, d_o: d, d_h: d, d_att: d, d_cls: d }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_t, self.d_o, self.d_h, self.d_att, self.d_cls].contains(&0) {
            return Err(Error::Config("vanilla dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one recurrent direction; gate blocks ordered update, reset, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<S> {
    /// `d_in × 3h`
    pub w_input: Tensor<S>,
    /// `h × 3h`
    pub w_hidden: Tensor<S>,
    /// `[3h]`
    pub b_input: Tensor<S>,
    /// `[3h]`
    pub b_hidden: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub b_input: Var,
    pub b_hidden: Var,
}

impl<S: Scalar> GruParams<S> {
    pub fn bind_constant(&self, g: &mut Graph<S>) -> Result<GruVars> {
        Ok(GruVars {
            w_input: g.constant(self.w_input.clone())?,
            w_hidden: g.constant(self.w_hidden.clone())?,
            b_input: g.constant(self.b_input.clone())?,
            b_hidden: g.constant(self.b_hidden.clone())?,
        })
    }
}

/// Embeds `tokens` against already-projected objects `[N × d_o]`.
///
/// Returns the full `[M × (d_t + d_o)]` sequence and the token-embedding
/// part `[M × d_t]` on its own.
pub fn embed_sequence_var<S: Scalar>(
    g: &mut Graph<S>,
    token_embedding: Var,
    projected_objects: Var,
    tokens: &[TokenId],
) -> Result<(Var, Var)> {
    let (n, _) = g.value(projected_objects).dims2("embed_sequence")?;
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    let mut visual_idx = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match tokens::tag_object(t) {
            Some(o) if o >= n => {
                return Err(Error::Data(format!("tag token {t} references object {o} but only {n} objects exist")))
            }
            Some(o) => visual_idx.push(o),
            None => visual_idx.push(n),
        }
    }
    let text = g.index_select(token_embedding, tokens)?;
    let mean = g.mean_rows(projected_objects)?;
    let d_o = g.shape(mean)[0];
    let mean = g.reshape(mean, vec![1, d_o])?;
    let table = g.concat(&[projected_objects, mean], 0)?;
    let visual = g.index_select(table, &visual_idx)?;
    let seq = g.concat(&[text, visual], 1)?;
    Ok((seq, text))
}

/// Runs one direction over `xw = X·W_in + b_in`; returns states in position order.
fn gru_direction<S: Scalar>(g: &mut Graph<S>, xw: Var, p: &GruVars, h: usize, reverse: bool) -> Result<Vec<Var>> {
    let m = g.shape(xw)[0];
    let mut state = g.constant(Tensor::zeros(vec![1, h]))?;
    let mut states = vec![state; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for t in order {
        state = g.gru_step(xw, t, state, p.w_hidden, p.b_hidden)?;
        states[t] = state;
    }
    Ok(states)
}

/// Bidirectional encoding of `seq [M × d_in]`: per-position states
/// `[M × 2h]` and the final state `[2h]` (last forward, last backward).
pub fn bi_gru_encode_var<S: Scalar>(g: &mut Graph<S>, seq: Var, fwd: &GruVars, bwd: &GruVars) -> Result<(Var, Var)> {
    let (m, _) = g.value(seq).dims2("bi_gru_encode")?;
    let h = g.value(fwd.w_hidden).dims2("bi_gru_encode")?.0;
    let run = |g: &mut Graph<S>, p: &GruVars, reverse: bool| -> Result<Vec<Var>> {
        let xw = g.matmul(seq, p.w_input)?;
        let xw = g.add_row(xw, p.b_input)?;
        gru_direction(g, xw, p, h, reverse)
    };
    let f = run(g, fwd, false)?;
    let b = run(g, bwd, true)?;
    let f_all = g.concat(&f, 0)?;
    let b_all = g.concat(&b, 0)?;
    let states = g.concat(&[f_all, b_all], 1)?;
    let last = g.concat(&[f[m - 1], b[0]], 1)?;
    let last = g.reshape(last, vec![2 * h])?;
    Ok((states, last))
}

/// Constant-input evaluation of [`bi_gru_encode_var`].
pub fn bi_gru_encode<S: Scalar>(
    seq: &Tensor<S>,
    fwd: &GruParams<S>,
    bwd: &GruParams<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let x = g.constant(seq.clone())?;
    let f = fwd.bind_constant(&mut g)?;
    let b = bwd.bind_constant(&mut g)?;
    let (states, last) = bi_gru_encode_var(&mut g, x, &f, &b)?;
    Ok((g.value(states).clone(), g.value(last).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VanillaModel<S> {
    dims: VanillaDims,
    params: ParamStore<S>,
}

fn name(prefix: &str, rest: &str) -> String {
    format!("{prefix}.{rest}")
}

impl<S: Scalar> VanillaModel<S> {
    pub fn new(dims: VanillaDims, rng: &mut SplitMix64) -> Result<Self> {
        dims.validate()?;
        let VanillaDims { d_t, d_o, d_h, d_att, d_cls } = dims;
        let mut p = ParamStore::new();
        p.insert_uniform(name(SHARED, "token_embedding"), vec![tokens::VOCAB_SIZE, d_t], d_t, rng)?;
        p.insert_uniform(name(SHARED, "visual_projection"), vec![FEATURE_DIM, d_o], FEATURE_DIM, rng)?;
        let d_in = d_t + d_o;
        for process in [Process::Qa, Process::Qar] {
            let pre = process.prefix();
            for dir in ["gru_fwd", "gru_bwd"] {
                p.insert_uniform(name(pre, &format!("{dir}.w_input")), vec![d_in, 3 * d_h], d_h, rng)?;
                p.insert_uniform(name(pre, &format!("{dir}.w_hidden")), vec![d_h, 3 * d_h], d_h, rng)?;
                p.insert_uniform(name(pre, &format!("{dir}.b_input")), vec![3 * d_h], d_h, rng)?;
                p.insert_uniform(name(pre, &format!("{dir}.b_hidden")), vec![3 * d_h], d_h, rng)?;
            }
            p.insert_uniform(name(pre, "reatt.token_query"), vec![d_t, d_att], d_t, rng)?;
            p.insert_uniform(name(pre, "reatt.object_key"), vec![d_o, d_att], d_o, rng)?;
            p.insert_uniform(name(pre, "reatt.sequence_query"), vec![2 * d_h, d_att], 2 * d_h, rng)?;
            p.insert_uniform(name(pre, "reatt.state_key"), vec![2 * d_h, d_att], 2 * d_h, rng)?;
            p.insert_uniform(name(pre, "classifier.w0"), vec![2 * d_h + d_o, d_cls], 2 * d_h + d_o, rng)?;
            p.insert_uniform(name(pre, "classifier.w1"), vec![d_cls, 1], d_cls, rng)?;
        }
        Ok(VanillaModel { dims, params: p })
    }

    /// Wraps existing parameters, checking names and shapes against `dims`.
    pub fn from_params(dims: VanillaDims, params: ParamStore<S>) -> Result<Self> {
        let reference = Self::new(dims, &mut SplitMix64::new(0))?;
        if !reference.params.matches_layout(&params) {
            return Err(Error::Config("parameter layout does not match the vanilla dimensions".into()));
        }
        Ok(VanillaModel { dims, params })
    }

    pub fn dims(&self) -> VanillaDims {
        self.dims
    }

    pub fn gru_params(&self, process: Process, backward: bool) -> Result<GruParams<S>> {
        let dir = if backward { "gru_bwd" } else { "gru_fwd" };
        let get = |k: &str| Ok::<_, Error>(self.params.get(&name(process.prefix(), &format!("{dir}.{k}")))?.clone());
        Ok(GruParams {
            w_input: get("w_input")?,
            w_hidden: get("w_hidden")?,
            b_input: get("b_input")?,
            b_hidden: get("b_hidden")?,
        })
    }

    /// Constant-input evaluation of [`embed_sequence_var`] with this model's tables.
    pub fn embed_sequence(&self, tokens: &[TokenId], objects: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g)?;
        let objs = g.constant(objects.clone())?;
        let proj = g.matmul(objs, p.var(&name(SHARED, "visual_projection"))?)?;
        let (seq, _) = embed_sequence_var(&mut g, p.var(&name(SHARED, "token_embedding"))?, proj, tokens)?;
        Ok(g.value(seq).clone())
    }

    fn gru_vars(p: &Bound, pre: &str, dir: &str) -> Result<GruVars> {
        let v = |k: &str| p.var(&name(pre, &format!("{dir}.{k}")));
        Ok(GruVars {
            w_input: v("w_input")?,
            w_hidden: v("w_hidden")?,
            b_input: v("b_input")?,
            b_hidden: v("b_hidden")?,
        })
    }

    fn reatt_vars(p: &Bound, pre: &str) -> Result<ReAttentionVars> {
        let v = |k: &str| p.var(&name(pre, &format!("reatt.{k}")));
        Ok(ReAttentionVars {
            token_query: v("token_query")?,
            object_key: v("object_key")?,
            sequence_query: v("sequence_query")?,
            state_key: v("state_key")?,
        })
    }
}

impl<S: Scalar> GistModel<S> for VanillaModel<S> {
    fn variant(&self) -> Variant {
        Variant::Vanilla
    }

    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn num_layers(&self) -> usize {
        1
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
        let pre = process.prefix();
        let mut seq_tokens = query.to_vec();
        seq_tokens.push(tokens::SEP);
        seq_tokens.extend_from_slice(candidate);

        let objs = g.constant(object_tensor(inst)?)?;
        let proj = g.matmul(objs, p.var(&name(SHARED, "visual_projection"))?)?;
        let (seq, text) = embed_sequence_var(g, p.var(&name(SHARED, "token_embedding"))?, proj, &seq_tokens)?;
        let fwd = Self::gru_vars(p, pre, "gru_fwd")?;
        let bwd = Self::gru_vars(p, pre, "gru_bwd")?;
        let (states, last) = bi_gru_encode_var(g, seq, &fwd, &bwd)?;

        let reatt = Self::reatt_vars(p, pre)?;
        let per_token = object_wise_attention(g, text, proj, &reatt)?;
        let weights = token_wise_attention(g, states, last, &reatt)?;
        let (map, pooled) = aggregate(g, weights, per_token, proj)?;

        let feat = g.concat(&[last, pooled], 0)?;
        let width = g.shape(feat)[0];
        let feat = g.reshape(feat, vec![1, width])?;
        let hidden = g.matmul(feat, p.var(&name(pre, "classifier.w0"))?)?;
        let hidden = g.leaky_relu(hidden)?;
        let logit = g.matmul(hidden, p.var(&name(pre, "classifier.w1"))?)?;
        let logit = g.reshape(logit, vec![])?;
        Ok((logit, vec![map]))
    }
}
