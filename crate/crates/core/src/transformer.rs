//! Single-stream encoder over text and visual tokens, classified from the
//! leading [CLS] state. Each layer's [CLS] attention over the visual tokens,
//! averaged across heads and renormalized, is that layer's object map.

use serde::{Deserialize, Serialize};

use crate::align::{layerwise_similarity_var, AlignConfig};
use crate::attention::AttentionMap;
use crate::error::{contract, Error, Result};
use crate::model::{object_tensor, GistModel, Process, Variant, SHARED};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::synth::{tokens, Instance, TokenId, FEATURE_DIM};
use crate::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const SEGMENT_TEXT: usize = 0;
const SEGMENT_VISUAL: usize = 1;

fn default_d_model() -> usize {
    32
}
fn default_heads() -> usize {
    2
}
fn default_layers() -> usize {
    2
}
fn default_d_ff() -> usize {
    64
}
fn default_max_len() -> usize {
    64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerDims {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for TransformerDims {
    fn default() -> Self {
        TransformerDims {
            d_model: default_d_model(),
            heads: default_heads(),
            layers: default_layers(),
            d_ff: default_d_ff(),
            max_len: default_max_len(),
        }
    }
}

impl TransformerDims {
    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.heads, self.layers, self.d_ff, self.max_len].contains(&0) {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Per-layer `[CLS]`-to-object distributions, one row per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttentionStack<S> {
    rows: Tensor<S>,
}

impl<S: Scalar> LayerAttentionStack<S> {
    pub fn from_tensor(rows: Tensor<S>) -> Result<Self> {
        let (l, _) = rows.dims2("LayerAttentionStack")?;
        for i in 0..l {
            AttentionMap::new(rows.row(i).to_vec())?;
        }
        Ok(LayerAttentionStack { rows })
    }

    pub fn from_maps(maps: &[AttentionMap<S>]) -> Result<Self> {
        let rows: Vec<Vec<S>> = maps.iter().map(|m| m.weights().to_vec()).collect();
        Self::from_tensor(Tensor::from_rows(&rows)?)
    }

    pub fn rows(&self) -> &Tensor<S> {
        &self.rows
    }

    pub fn num_layers(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn num_objects(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn layer(&self, l: usize) -> Result<AttentionMap<S>> {
        if l >= self.num_layers() {
            return Err(Error::Index { index: l, len: self.num_layers() });
        }
        AttentionMap::new(self.rows.row(l).to_vec())
    }
}

/// Attention projections of one layer, each `d × d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Scaled dot-product attention with `heads` column blocks.
///
/// Returns the projected output `[S × d]` and each head's `[S × S]` weights.
pub fn multi_head_self_attention_var<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = g.value(x).dims2("multi_head_self_attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(contract(format!("model width {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = g.matmul(x, p.query)?;
    let k = g.matmul(x, p.key)?;
    let v = g.matmul(x, p.value)?;
    let scale = S::one() / S::from_usize_lossy(dk).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dk, dk)?;
        let kh = g.slice(k, 1, h * dk, dk)?;
        let vh = g.slice(v, 1, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let a = g.softmax(scores, 1)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let out = g.matmul(cat, p.output)?;
    Ok((out, weights))
}

/// Constant-input evaluation of [`multi_head_self_attention_var`]; the
/// attention weights come back as one `[k × S × S]` tensor.
pub fn multi_head_self_attention<S: Scalar>(
    x: &Tensor<S>,
    query: &Tensor<S>,
    key: &Tensor<S>,
    value: &Tensor<S>,
    output: &Tensor<S>,
    heads: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let p = AttentionVars {
        query: g.constant(query.clone())?,
        key: g.constant(key.clone())?,
        value: g.constant(value.clone())?,
        output: g.constant(output.clone())?,
    };
    let (out, weights) = multi_head_self_attention_var(&mut g, xv, &p, heads)?;
    let s = x.shape()[0];
    let data = weights.iter().flat_map(|&w| g.value(w).data().to_vec()).collect();
    Ok((g.value(out).clone(), Tensor::new(vec![heads, s, s], data)?))
}

/// Head-averaged `[CLS]` row restricted to `visual` positions and renormalized, shape `[N]`.
pub fn cls_visual_attention_var<S: Scalar>(g: &mut Graph<S>, heads: &[Var], visual: &[usize]) -> Result<Var> {
    if heads.is_empty() || visual.is_empty() {
        return Err(contract("need at least one head and one visual position"));
    }
    let mut acc = None;
    for &h in heads {
        let row = g.slice(h, 0, 0, 1)?;
        acc = Some(match acc {
            None => row,
            Some(a) => g.add(a, row)?,
        });
    }
    let acc = acc.expect("nonempty heads");
    let mean = g.scale(acc, S::one() / S::from_usize_lossy(heads.len()))?;
    let s = g.shape(mean)[1];
    let mean = g.reshape(mean, vec![s])?;
    let vis = g.index_select(mean, visual)?;
    let mass = g.sum(vis)?;
    if g.item(mass)? <= S::zero() {
        return Err(contract("no attention mass on visual tokens"));
    }
    let inv = g.recip(mass)?;
    g.mul_scalar_var(vis, inv)
}

/// Per-layer extraction from `[k × S × S]` attention tensors.
pub fn extract_cls_visual_attention<S: Scalar>(
    per_layer: &[Tensor<S>],
    visual: &[usize],
) -> Result<LayerAttentionStack<S>> {
    let mut g = Graph::new();
    let mut rows = Vec::with_capacity(per_layer.len());
    for t in per_layer {
        let &[k, s, s2] = t.shape() else {
            return Err(contract(format!("attention tensor must be k×S×S, got {:?}", t.shape())));
        };
        if s != s2 {
            return Err(contract(format!("attention tensor must be square, got {:?}", t.shape())));
        }
        let heads = (0..k)
            .map(|h| g.constant(Tensor::new(vec![s, s], t.data()[h * s * s..(h + 1) * s * s].to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        let row = cls_visual_attention_var(&mut g, &heads, visual)?;
        rows.push(g.value(row).data().to_vec());
    }
    LayerAttentionStack::from_tensor(Tensor::from_rows(&rows)?)
}

/// Mean over (masked) layers of the per-layer similarity.
pub fn layerwise_alignment<S: Scalar>(
    stack_p: &LayerAttentionStack<S>,
    stack_t: &LayerAttentionStack<S>,
    cfg: &AlignConfig,
    mask: Option<&[bool]>,
) -> Result<S> {
    if stack_p.num_layers() != stack_t.num_layers() {
        return Err(contract(format!("layer count {} vs {}", stack_p.num_layers(), stack_t.num_layers())));
    }
    let mut g = Graph::new();
    let rows = |g: &mut Graph<S>, st: &LayerAttentionStack<S>| -> Result<Vec<Var>> {
        (0..st.num_layers()).map(|l| g.constant(Tensor::vector(st.rows.row(l).to_vec())?)).collect()
    };
    let p = rows(&mut g, stack_p)?;
    let t = rows(&mut g, stack_t)?;
    let s = layerwise_similarity_var(&mut g, &p, &t, cfg.mode, S::lit(cfg.alpha), mask)?;
    g.item(s)
}

/// Embedded sequence `[S × d]` and the positions of its visual tokens.
#[derive(Clone, Debug)]
pub struct SequenceVars {
    pub embedded: Var,
    pub visual: Vec<usize>,
}

/// Token ids of the text frame: `[CLS] query [SEP] candidate [SEP]` and `[END]` last.
fn text_frame(query: &[TokenId], candidate: &[TokenId]) -> Vec<TokenId> {
    let mut t = Vec::with_capacity(query.len() + candidate.len() + 4);
    t.push(tokens::CLS);
    t.extend_from_slice(query);
    t.push(tokens::SEP);
    t.extend_from_slice(candidate);
    t.push(tokens::SEP);
    t.push(tokens::END);
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<S> {
    dims: TransformerDims,
    params: ParamStore<S>,
}

fn name(prefix: &str, rest: &str) -> String {
    format!("{prefix}.{rest}")
}

impl<S: Scalar> TransformerModel<S> {
    pub fn new(dims: TransformerDims, rng: &mut SplitMix64) -> Result<Self> {
        dims.validate()?;
        let TransformerDims { d_model: d, layers, d_ff, max_len, .. } = dims;
        let mut p = ParamStore::new();
        p.insert_uniform(name(SHARED, "token_embedding"), vec![tokens::VOCAB_SIZE, d], d, rng)?;
        p.insert_uniform(name(SHARED, "visual_projection"), vec![FEATURE_DIM, d], FEATURE_DIM, rng)?;
        for process in [Process::Qa, Process::Qar] {
            let pre = process.prefix();
            p.insert_uniform(name(pre, "position"), vec![max_len, d], d, rng)?;
            p.insert_uniform(name(pre, "visual_position"), vec![d], d, rng)?;
            p.insert_uniform(name(pre, "segment"), vec![2, d], d, rng)?;
            for l in 0..layers {
                let lp = format!("{pre}.layer{l}");
                for m in ["query", "key", "value", "output"] {
                    p.insert_uniform(format!("{lp}.attn.{m}"), vec![d, d], d, rng)?;
                }
                p.insert_uniform(format!("{lp}.ffn.w1"), vec![d, d_ff], d, rng)?;
                p.insert_uniform(format!("{lp}.ffn.b1"), vec![d_ff], d, rng)?;
                p.insert_uniform(format!("{lp}.ffn.w2"), vec![d_ff, d], d_ff, rng)?;
                p.insert_uniform(format!("{lp}.ffn.b2"), vec![d], d_ff, rng)?;
                for ln in ["ln1", "ln2"] {
                    p.insert(format!("{lp}.{ln}.gamma"), Tensor::ones(vec![d]))?;
                    p.insert(format!("{lp}.{ln}.beta"), Tensor::zeros(vec![d]))?;
                }
            }
            p.insert_uniform(name(pre, "head"), vec![d, 1], d, rng)?;
        }
        Ok(TransformerModel { dims, params: p })
    }

    pub fn from_params(dims: TransformerDims, params: ParamStore<S>) -> Result<Self> {
        let reference = Self::new(dims, &mut SplitMix64::new(0))?;
        if !reference.params.matches_layout(&params) {
            return Err(Error::Config("parameter layout does not match the transformer dimensions".into()));
        }
        Ok(TransformerModel { dims, params })
    }

    pub fn dims(&self) -> TransformerDims {
        self.dims
    }

    /// Assembles `[CLS] q [SEP] c [SEP] v_1..v_N [END]` with position and
    /// segment embeddings. Text tokens take ordinal positions; every visual
    /// token shares one position row. Tag tokens also carry their object's
    /// projected feature.
    pub fn build_sequence_var(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        process: Process,
        query: &[TokenId],
        candidate: &[TokenId],
        projected_objects: Var,
    ) -> Result<SequenceVars> {
        let pre = process.prefix();
        let (n, d) = g.value(projected_objects).dims2("build_sequence")?;
        let text_ids = text_frame(query, candidate);
        let t = text_ids.len();
        if t + n > self.dims.max_len {
            return Err(Error::Data(format!("sequence length {} exceeds maximum {}", t + n, self.dims.max_len)));
        }
        let mut tag_idx = Vec::with_capacity(t);
        for &tok in &text_ids {
            match tokens::tag_object(tok) {
                Some(o) if o >= n => {
                    return Err(Error::Data(format!(
                        "tag token {tok} references object {o} but only {n} objects exist"
                    )))
                }
                Some(o) => tag_idx.push(o),
                None => tag_idx.push(n),
            }
        }
        let text = g.index_select(p.var(&name(SHARED, "token_embedding"))?, &text_ids)?;
        let zero = g.constant(Tensor::zeros(vec![1, d]))?;
        let tag_table = g.concat(&[projected_objects, zero], 0)?;
        let tag_feats = g.index_select(tag_table, &tag_idx)?;
        let text = g.add(text, tag_feats)?;
        let ordinals: Vec<usize> = (0..t).collect();
        let pos = g.index_select(p.var(&name(pre, "position"))?, &ordinals)?;
        let text = g.add(text, pos)?;
        let segment = p.var(&name(pre, "segment"))?;
        let seg_text = g.index_select(segment, &vec![SEGMENT_TEXT; t])?;
        let text = g.add(text, seg_text)?;

        let seg_vis = g.slice(segment, 0, SEGMENT_VISUAL, 1)?;
        let seg_vis = g.reshape(seg_vis, vec![d])?;
        let vis = g.add_row(projected_objects, p.var(&name(pre, "visual_position"))?)?;
        let vis = g.add_row(vis, seg_vis)?;

        let head = g.slice(text, 0, 0, t - 1)?;
        let end = g.slice(text, 0, t - 1, 1)?;
        let embedded = g.concat(&[head, vis, end], 0)?;
        Ok(SequenceVars { embedded, visual: (t - 1..t - 1 + n).collect() })
    }

    /// One post-norm block; returns the new states and the per-head weights.
    fn block(&self, g: &mut Graph<S>, p: &Bound, lp: &str, x: Var) -> Result<(Var, Vec<Var>)> {
        let v = |k: &str| p.var(&format!("{lp}.{k}"));
        let attn = AttentionVars {
            query: v("attn.query")?,
            key: v("attn.key")?,
            value: v("attn.value")?,
            output: v("attn.output")?,
        };
        let eps = S::lit(LAYER_NORM_EPS);
        let (a, heads) = multi_head_self_attention_var(g, x, &attn, self.dims.heads)?;
        let x1 = g.add(x, a)?;
        let x1 = g.layer_norm(x1, v("ln1.gamma")?, v("ln1.beta")?, eps)?;
        let f = g.matmul(x1, v("ffn.w1")?)?;
        let f = g.add_row(f, v("ffn.b1")?)?;
        let f = g.leaky_relu(f)?;
        let f = g.matmul(f, v("ffn.w2")?)?;
        let f = g.add_row(f, v("ffn.b2")?)?;
        let x2 = g.add(x1, f)?;
        let x2 = g.layer_norm(x2, v("ln2.gamma")?, v("ln2.beta")?, eps)?;
        Ok((x2, heads))
    }

    /// Encodes one (query, candidate) pair; returns the logit `[]`, the
    /// per-layer `[N]` maps, and each layer's head weights.
    pub fn forward_var(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        inst: &Instance,
        query: &[TokenId],
        candidate: &[TokenId],
        process: Process,
    ) -> Result<(Var, Vec<Var>, Vec<Vec<Var>>)> {
        let pre = process.prefix();
        let objs = g.constant(object_tensor(inst)?)?;
        let proj = g.matmul(objs, p.var(&name(SHARED, "visual_projection"))?)?;
        let seq = self.build_sequence_var(g, p, process, query, candidate, proj)?;
        let mut x = seq.embedded;
        let mut maps = Vec::with_capacity(self.dims.layers);
        let mut all_heads = Vec::with_capacity(self.dims.layers);
        for l in 0..self.dims.layers {
            let (next, heads) = self.block(g, p, &format!("{pre}.layer{l}"), x)?;
            maps.push(cls_visual_attention_var(g, &heads, &seq.visual)?);
            all_heads.push(heads);
            x = next;
        }
        let cls = g.slice(x, 0, 0, 1)?;
        let logit = g.matmul(cls, p.var(&name(pre, "head"))?)?;
        let logit = g.reshape(logit, vec![])?;
        Ok((logit, maps, all_heads))
    }

    /// Logit and layer stack with constant parameters.
    pub fn transformer_forward(
        &self,
        inst: &Instance,
        query: &[TokenId],
        candidate: &[TokenId],
        process: Process,
    ) -> Result<(S, LayerAttentionStack<S>)> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g)?;
        let (logit, maps, _) = self.forward_var(&mut g, &p, inst, query, candidate, process)?;
        let rows: Vec<Vec<S>> = maps.iter().map(|&m| g.value(m).data().to_vec()).collect();
        Ok((g.item(logit)?, LayerAttentionStack::from_tensor(Tensor::from_rows(&rows)?)?))
    }

    /// The embedded sequence with constant parameters.
    pub fn build_sequence(
        &self,
        inst: &Instance,
        query: &[TokenId],
        candidate: &[TokenId],
        process: Process,
    ) -> Result<(Tensor<S>, Vec<usize>)> {
        let mut g = Graph::new();
        let p = self.params.bind_constant(&mut g)?;
        let objs = g.constant(object_tensor(inst)?)?;
        let proj = g.matmul(objs, p.var(&name(SHARED, "visual_projection"))?)?;
        let seq = self.build_sequence_var(&mut g, &p, process, query, candidate, proj)?;
        Ok((g.value(seq.embedded).clone(), seq.visual))
    }
}

impl<S: Scalar> GistModel<S> for TransformerModel<S> {
    fn variant(&self) -> Variant {
        Variant::Transformer
    }

    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn num_layers(&self) -> usize {
        self.dims.layers
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
        let (logit, maps, _) = self.forward_var(g, p, inst, query, candidate, process)?;
        Ok((logit, maps))
    }
}
