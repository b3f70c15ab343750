use std::collections::BTreeMap;

use super::{Activation, Batch, Model};
use crate::error::{Error, Result};
use crate::tensor::rng::Rng;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

const MASKED: f64 = -1e9;

/// Graph leaves for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Binds parameters as differentiable leaves.
    pub fn trainable(g: &mut Graph, params: &ParamStore) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Binds parameters as constants (no gradients recorded).
    pub fn constant(g: &mut Graph, params: &ParamStore) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradient of every bound parameter (zeros where none flowed).
    pub fn gradients(&self, g: &Graph) -> Gradients {
        let mut out = Gradients::new();
        for (n, &v) in &self.vars {
            let grad = g
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
            out.insert(n.clone(), grad);
        }
        out
    }
}

/// Padded token ids with their validity mask.
pub(crate) struct Tokens<'a> {
    pub ids: &'a [usize],
    pub mask: &'a [bool],
    pub rows: usize,
    pub len: usize,
}

fn maybe_dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<&mut Rng>) -> Var {
    match rng {
        Some(r) => g.dropout(x, rate, r),
        None => x,
    }
}

/// Additive attention mask `[rows * heads, tq, tk]`.
fn attention_mask(rows: usize, heads: usize, tq: usize, keys: &Tokens<'_>, causal: bool) -> Tensor {
    let tk = keys.len;
    let mut data = Vec::with_capacity(rows * heads * tq * tk);
    for b in 0..rows {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    let visible = keys.mask[b * tk + j] && (!causal || j <= i);
                    data.push(if visible { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::new(vec![rows * heads, tq, tk], data).expect("mask shape")
}

impl Model {
    fn linear(&self, g: &mut Graph, b: &Bindings, x: Var, name: &str) -> Result<Var> {
        let w = b.get(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }

    fn norm(&self, g: &mut Graph, b: &Bindings, x: Var, name: &str) -> Result<Var> {
        let w = b.get(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        g.layer_norm(x, w, bias)
    }

    /// `[rows * len, dim] -> [rows * heads, len, head_dim]`
    fn split_heads(&self, g: &mut Graph, x: Var, rows: usize, len: usize) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.model_dim / h;
        let x = g.reshape(x, &[rows, len, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[rows * h, len, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, rows: usize, len: usize) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.model_dim / h;
        let x = g.reshape(x, &[rows, h, len, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[rows * len, h * dh])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        b: &Bindings,
        name: &str,
        query: Var,
        memory: Var,
        rows: usize,
        tq: usize,
        tk: usize,
        mask: &Tensor,
    ) -> Result<Var> {
        let dh = self.config.model_dim / self.config.heads;
        let q = self.linear(g, b, query, &format!("{name}.q"))?;
        let k = self.linear(g, b, memory, &format!("{name}.k"))?;
        let v = self.linear(g, b, memory, &format!("{name}.v"))?;
        let q = self.split_heads(g, q, rows, tq)?;
        let k = self.split_heads(g, k, rows, tk)?;
        let v = self.split_heads(g, v, rows, tk)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add_const(scores, mask)?;
        let probs = g.softmax(scores);
        let ctx = g.bmm(probs, v, false)?;
        let ctx = self.merge_heads(g, ctx, rows, tq)?;
        self.linear(g, b, ctx, &format!("{name}.o"))
    }

    fn ffn(&self, g: &mut Graph, b: &Bindings, x: Var, name: &str, rng: &mut Option<&mut Rng>) -> Result<Var> {
        let h = self.linear(g, b, x, &format!("{name}.fc1"))?;
        let h = match self.config.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        let h = maybe_dropout(g, h, self.config.dropout, rng);
        self.linear(g, b, h, &format!("{name}.fc2"))
    }

    /// `sublayer output -> dropout -> residual -> layer norm`
    fn residual_norm(
        &self,
        g: &mut Graph,
        b: &Bindings,
        x: Var,
        sub: Var,
        norm: &str,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let sub = maybe_dropout(g, sub, self.config.dropout, rng);
        let y = g.add(x, sub)?;
        self.norm(g, b, y, norm)
    }

    fn concat_ext(&self, g: &mut Graph, b: &Bindings, base: &str, as_rows: bool) -> Result<Var> {
        let first = b.get(base)?;
        if self.config.extensions.is_empty() {
            return Ok(first);
        }
        let mut parts = vec![first];
        for k in 0..self.config.extensions.len() {
            parts.push(b.get(&format!("{base}.ext{k}"))?);
        }
        if as_rows {
            return g.concat_rows(&parts);
        }
        let cols: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let n = g.value(p).len();
                g.reshape(p, &[n, 1])
            })
            .collect::<Result<_>>()?;
        let joined = g.concat_rows(&cols)?;
        let n = g.value(joined).len();
        g.reshape(joined, &[n])
    }

    fn embed(&self, g: &mut Graph, b: &Bindings, table: Var, toks: &Tokens<'_>, pos: &str) -> Result<Var> {
        if toks.len > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_len {}",
                toks.len, self.config.max_len
            )));
        }
        let e = g.embedding(table, toks.ids)?;
        let positions: Vec<usize> = (0..toks.rows).flat_map(|_| 0..toks.len).collect();
        let p = g.embedding(b.get(pos)?, &positions)?;
        g.add(e, p)
    }

    pub(crate) fn encode(
        &self,
        g: &mut Graph,
        b: &Bindings,
        src: &Tokens<'_>,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let table = self.concat_ext(g, b, "embed.tokens", true)?;
        let x = self.embed(g, b, table, src, "encoder.pos")?;
        let mut x = maybe_dropout(g, x, self.config.dropout, rng);
        let mask = attention_mask(src.rows, self.config.heads, src.len, src, false);
        for l in 0..self.config.layers {
            let p = format!("encoder.layer{l}");
            let a = self.attention(g, b, &format!("{p}.self_attn"), x, x, src.rows, src.len, src.len, &mask)?;
            x = self.residual_norm(g, b, x, a, &format!("{p}.self_attn_norm"), rng)?;
            let f = self.ffn(g, b, x, &format!("{p}.ffn"), rng)?;
            x = self.residual_norm(g, b, x, f, &format!("{p}.ffn_norm"), rng)?;
        }
        Ok(x)
    }

    /// Decoder logits `[rows * tgt_len, vocab]` for teacher-forced inputs.
    pub(crate) fn decode(
        &self,
        g: &mut Graph,
        b: &Bindings,
        memory: Var,
        src: &Tokens<'_>,
        tgt: &Tokens<'_>,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let table = self.concat_ext(g, b, "embed.tokens", true)?;
        let y = self.embed(g, b, table, tgt, "decoder.pos")?;
        let mut y = maybe_dropout(g, y, self.config.dropout, rng);
        let self_mask = attention_mask(tgt.rows, self.config.heads, tgt.len, tgt, true);
        let cross_mask = attention_mask(tgt.rows, self.config.heads, tgt.len, src, false);
        for l in 0..self.config.layers {
            let p = format!("decoder.layer{l}");
            let a = self.attention(g, b, &format!("{p}.self_attn"), y, y, tgt.rows, tgt.len, tgt.len, &self_mask)?;
            y = self.residual_norm(g, b, y, a, &format!("{p}.self_attn_norm"), rng)?;
            let c = self.attention(g, b, &format!("{p}.cross_attn"), y, memory, tgt.rows, tgt.len, src.len, &cross_mask)?;
            y = self.residual_norm(g, b, y, c, &format!("{p}.cross_attn_norm"), rng)?;
            let f = self.ffn(g, b, y, &format!("{p}.ffn"), rng)?;
            y = self.residual_norm(g, b, y, f, &format!("{p}.ffn_norm"), rng)?;
        }
        let w = self.concat_ext(g, b, "output.proj", true)?;
        let bias = self.concat_ext(g, b, "output.bias", false)?;
        let logits = g.matmul_t(y, w)?;
        g.add_bias(logits, bias)
    }

    /// Teacher-forced logits `[batch * tgt_len, vocab]`. Dropout is applied
    /// only when an RNG is supplied.
    pub fn logits(&self, g: &mut Graph, b: &Bindings, batch: &Batch, rng: Option<&mut Rng>) -> Result<Var> {
        let mut rng = rng;
        let src = Tokens {
            ids: &batch.src,
            mask: &batch.src_mask,
            rows: batch.size,
            len: batch.src_len,
        };
        let tgt = Tokens {
            ids: &batch.tgt_in,
            mask: &batch.tgt_mask,
            rows: batch.size,
            len: batch.tgt_len,
        };
        let memory = self.encode(g, b, &src, &mut rng)?;
        self.decode(g, b, memory, &src, &tgt, &mut rng)
    }

    /// Per-position weights that turn a summed NLL into the mean over
    /// non-pad target tokens.
    pub fn mean_token_weights(batch: &Batch) -> Vec<f64> {
        let n = batch.target_tokens().max(1) as f64;
        batch
            .tgt_mask
            .iter()
            .map(|&m| if m { 1.0 / n } else { 0.0 })
            .collect()
    }

    /// Mean cross-entropy node over non-pad target tokens.
    pub fn ce_loss(&self, g: &mut Graph, b: &Bindings, batch: &Batch, rng: Option<&mut Rng>) -> Result<Var> {
        let logits = self.logits(g, b, batch, rng)?;
        let logp = g.log_softmax(logits);
        g.nll_gather(logp, &batch.tgt_out, &Self::mean_token_weights(batch))
    }

    /// Mean per-token cross-entropy of the batch.
    pub fn loss(&self, batch: &Batch, rng: Option<&mut Rng>) -> Result<f64> {
        let mut g = Graph::new();
        let b = Bindings::constant(&mut g, &self.params);
        let l = self.ce_loss(&mut g, &b, batch, rng)?;
        Ok(g.scalar(l))
    }

    /// Mean per-token cross-entropy and its gradient.
    pub fn loss_and_grad(&self, batch: &Batch, rng: Option<&mut Rng>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let b = Bindings::trainable(&mut g, &self.params);
        let l = self.ce_loss(&mut g, &b, batch, rng)?;
        g.backward(l)?;
        Ok((g.scalar(l), b.gradients(&g)))
    }

    /// Summed target-token negative log-likelihood of the batch and its
    /// gradient, without dropout.
    pub fn nll_sum_and_grad(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let b = Bindings::trainable(&mut g, &self.params);
        let logits = self.logits(&mut g, &b, batch, None)?;
        let logp = g.log_softmax(logits);
        let w: Vec<f64> = batch.tgt_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let l = g.nll_gather(logp, &batch.tgt_out, &w)?;
        g.backward(l)?;
        Ok((g.scalar(l), b.gradients(&g)))
    }

    /// Teacher-forced log-probabilities `[batch * tgt_len, vocab]`, no dropout.
    pub fn log_probs(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Bindings::constant(&mut g, &self.params);
        let logits = self.logits(&mut g, &b, batch, None)?;
        let lp = g.log_softmax(logits);
        Ok(g.value(lp).clone())
    }

    /// Teacher-forced output distributions; every row sums to one.
    pub fn probabilities(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = Bindings::constant(&mut g, &self.params);
        let logits = self.logits(&mut g, &b, batch, None)?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }
}
