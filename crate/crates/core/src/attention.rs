//! Two-stage re-attention over an instance's objects.
//!
//! Each token attends over the objects, the final recurrent state attends
//! over the tokens, and the token weights mix the per-token object
//! distributions into one [`AttentionMap`] plus an attention-pooled object
//! feature.

use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::Scalar;

/// Tolerance on simplex sums when a map crosses a module boundary.
pub const INTERFACE_TOL: f64 = 1e-6;

/// A probability distribution over the objects of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S> {
    weights: Tensor<S>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn new(weights: Vec<S>) -> Result<Self> {
        Self::from_tensor(Tensor::vector(weights)?)
    }

    pub fn from_tensor(weights: Tensor<S>) -> Result<Self> {
        if weights.rank() != 1 {
            return Err(contract(format!("attention map must be a vector, got {:?}", weights.shape())));
        }
        if weights.data().iter().any(|&w| w < S::zero() || !w.is_finite()) {
            return Err(contract("attention weights must be finite and nonnegative"));
        }
        let total = weights.sum().as_f64();
        if (total - 1.0).abs() > INTERFACE_TOL {
            return Err(contract(format!("attention weights sum to {total}, not 1")));
        }
        Ok(AttentionMap { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(contract("attention map over zero objects"));
        }
        let w = S::one() / S::from_usize_lossy(n);
        Self::new(vec![w; n])
    }

    pub fn one_hot(n: usize, at: usize) -> Result<Self> {
        if at >= n {
            return Err(Error::Index { index: at, len: n });
        }
        let mut w = vec![S::zero(); n];
        w[at] = S::one();
        Self::new(w)
    }

    pub fn weights(&self) -> &[S] {
        self.weights.data()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Applies an object permutation: output entry `i` is input entry `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let w = perm.iter().map(|&p| self.weights()[p]).collect();
        Self::new(w)
    }
}

/// Projection matrices of the attention MLPs (linear map then leaky ReLU).
#[derive(Clone, Debug, PartialEq)]
pub struct ReAttentionParams<S> {
    /// `d_t × d_att`
    pub token_query: Tensor<S>,
    /// `d_o × d_att`
    pub object_key: Tensor<S>,
    /// `d_h × d_att`
    pub sequence_query: Tensor<S>,
    /// `d_h × d_att`
    pub state_key: Tensor<S>,
}

/// [`ReAttentionParams`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ReAttentionVars {
    pub token_query: Var,
    pub object_key: Var,
    pub sequence_query: Var,
    pub state_key: Var,
}

impl<S: Scalar> ReAttentionParams<S> {
    pub fn bind_constant(&self, g: &mut Graph<S>) -> Result<ReAttentionVars> {
        Ok(ReAttentionVars {
            token_query: g.constant(self.token_query.clone())?,
            object_key: g.constant(self.object_key.clone())?,
            sequence_query: g.constant(self.sequence_query.clone())?,
            state_key: g.constant(self.state_key.clone())?,
        })
    }
}

fn mlp<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.leaky_relu(h)
}

fn as_row<S: Scalar>(g: &mut Graph<S>, v: Var) -> Result<Var> {
    match *g.shape(v) {
        [_, _] => Ok(v),
        [d] => g.reshape(v, vec![1, d]),
        ref other => Err(Error::Shape { op: "as_row", left: other.to_vec(), right: vec![] }),
    }
}

/// Row `i` of the result is `softmax_j(MLP(t_i) · MLP(o_j))`, shape `M × N`.
pub fn object_wise_attention<S: Scalar>(
    g: &mut Graph<S>,
    token_feats: Var,
    object_feats: Var,
    p: &ReAttentionVars,
) -> Result<Var> {
    let (m, _) = g.value(token_feats).dims2("object_wise_attention")?;
    let (n, _) = g.value(object_feats).dims2("object_wise_attention")?;
    if m == 0 || n == 0 {
        return Err(contract("object-wise attention needs at least one token and one object"));
    }
    let queries = mlp(g, token_feats, p.token_query)?;
    let keys = mlp(g, object_feats, p.object_key)?;
    let keys_t = g.transpose(keys)?;
    let logits = g.matmul(queries, keys_t)?;
    g.softmax(logits, 1)
}

/// `softmax_i(MLP(h_M) · MLP(h_i))` over the `M` hidden states, shape `[M]`.
pub fn token_wise_attention<S: Scalar>(
    g: &mut Graph<S>,
    hidden_states: Var,
    final_state: Var,
    p: &ReAttentionVars,
) -> Result<Var> {
    let (m, _) = g.value(hidden_states).dims2("token_wise_attention")?;
    let final_row = as_row(g, final_state)?;
    let query = mlp(g, final_row, p.sequence_query)?;
    let keys = mlp(g, hidden_states, p.state_key)?;
    let keys_t = g.transpose(keys)?;
    let logits = g.matmul(query, keys_t)?;
    let weights = g.softmax(logits, 1)?;
    g.reshape(weights, vec![m])
}

fn check_simplex<S: Scalar>(values: &[S], what: &str) -> Result<()> {
    let total: f64 = values.iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > INTERFACE_TOL || values.iter().any(|&v| v < S::zero()) {
        return Err(contract(format!("{what} is not a distribution (sum {total})")));
    }
    Ok(())
}

/// Mixes per-token object distributions by token weight.
///
/// Returns the overall object distribution `c_o = Σ_i w_i · row_i` (shape
/// `[N]`) and the pooled feature `Σ_j c_o[j] · o_j` (shape `[d_o]`).
pub fn aggregate<S: Scalar>(
    g: &mut Graph<S>,
    token_weights: Var,
    per_token_maps: Var,
    object_feats: Var,
) -> Result<(Var, Var)> {
    let (m, n) = g.value(per_token_maps).dims2("aggregate")?;
    let (n_obj, d_o) = g.value(object_feats).dims2("aggregate")?;
    if g.value(token_weights).len() != m || n_obj != n {
        return Err(Error::Shape {
            op: "aggregate",
            left: g.shape(per_token_maps).to_vec(),
            right: g.shape(object_feats).to_vec(),
        });
    }
    check_simplex(g.value(token_weights).data(), "token weights")?;
    for i in 0..m {
        check_simplex(g.value(per_token_maps).row(i), "per-token object map")?;
    }
    let w = g.reshape(token_weights, vec![1, m])?;
    let mix = g.matmul(w, per_token_maps)?;
    let pooled = g.matmul(mix, object_feats)?;
    let map = g.reshape(mix, vec![n])?;
    let pooled = g.reshape(pooled, vec![d_o])?;
    Ok((map, pooled))
}

impl<S: Scalar> ReAttentionParams<S> {
    /// Constant-input evaluation of [`object_wise_attention`].
    pub fn object_wise(&self, token_feats: &Tensor<S>, object_feats: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g)?;
        let t = g.constant(token_feats.clone())?;
        let o = g.constant(object_feats.clone())?;
        let out = object_wise_attention(&mut g, t, o, &p)?;
        Ok(g.value(out).clone())
    }

    /// Constant-input evaluation of [`token_wise_attention`].
    pub fn token_wise(&self, hidden_states: &Tensor<S>, final_state: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.bind_constant(&mut g)?;
        let h = g.constant(hidden_states.clone())?;
        let f = g.constant(final_state.clone())?;
        let out = token_wise_attention(&mut g, h, f, &p)?;
        Ok(g.value(out).clone())
    }
}

/// Constant-input evaluation of [`aggregate`].
pub fn aggregate_values<S: Scalar>(
    token_weights: &Tensor<S>,
    per_token_maps: &Tensor<S>,
    object_feats: &Tensor<S>,
) -> Result<(AttentionMap<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let w = g.constant(token_weights.clone())?;
    let m = g.constant(per_token_maps.clone())?;
    let o = g.constant(object_feats.clone())?;
    let (map, pooled) = aggregate(&mut g, w, m, o)?;
    Ok((AttentionMap::from_tensor(g.value(map).clone())?, g.value(pooled).clone()))
}
