use crate::error::Result;
use crate::grad::{Activation, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::history::HistoryBatch;
use crate::rng::Rng;

/// Permutation-invariant history embedding.
///
/// Each step's features pass through `ENC` (two layers). The embedding is the
/// running sum of step encodings concatenated with the mean over steps of one
/// multi-head self-attention block applied to them. Empty histories map to
/// zeros.
#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    pub step: Mlp,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
}

impl HistoryEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        hidden: usize,
        embed_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(heads > 0 && embed_dim.is_multiple_of(heads), "embed_dim must split evenly over heads");
        let step = Mlp::new(
            store,
            &format!("{prefix}enc"),
            &[feature_dim, hidden, embed_dim],
            Activation::Relu,
            false,
            rng,
        );
        let mut lin = |n: &str| Linear::new(store, &format!("{prefix}attn.{n}"), embed_dim, embed_dim, rng);
        let (wq, wk, wv, wo) = (lin("q"), lin("k"), lin("v"), lin("o"));
        Self {
            step,
            wq,
            wk,
            wv,
            wo,
            heads,
            embed_dim,
            feature_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.embed_dim
    }

    /// `batch × out_dim` embedding. With `frozen` no gradient reaches the
    /// encoder parameters.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &HistoryBatch, frozen: bool) -> Result<Var> {
        let layout = &batch.layout;
        let x = g.input(batch.features.clone());
        let lin = |g: &mut Graph, l: &Linear, x: Var| {
            if frozen {
                l.forward_frozen(g, store, x)
            } else {
                l.forward(g, store, x)
            }
        };
        let e = if frozen {
            self.step.forward_frozen(g, store, x)?
        } else {
            self.step.forward(g, store, x)?
        };
        let sum = g.set_pool(e, layout, false)?;
        let q = lin(g, &self.wq, e)?;
        let k = lin(g, &self.wk, e)?;
        let v = lin(g, &self.wv, e)?;
        let scores = g.attn_scores(q, k, self.heads, layout)?;
        let t = layout.t_max;
        let valid: Vec<usize> = (0..layout.batch() * self.heads * t)
            .map(|r| layout.lengths[r / (self.heads * t)])
            .collect();
        let w = g.masked_softmax(scores, &valid)?;
        let mixed = g.attn_mix(w, v, self.heads, layout)?;
        let out = lin(g, &self.wo, mixed)?;
        let pooled = g.set_pool(out, layout, true)?;
        g.concat(&[sum, pooled], 1)
    }

    /// Embeddings as plain rows, no gradient.
    pub fn embed(&self, store: &ParamStore, batch: &HistoryBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.forward(&mut g, store, batch, true)?;
        Ok(g.value(b).clone())
    }

    /// `ENC(d_i, y_i)` for each step of one history (flat features).
    pub fn step_encodings(&self, store: &ParamStore, features: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = features.len() / self.feature_dim;
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(n, self.feature_dim, features.to_vec())?);
        let e = self.step.forward_frozen(&mut g, store, x)?;
        let v = g.value(e);
        Ok((0..n).map(|i| v.row_slice(i).to_vec()).collect())
    }
}
