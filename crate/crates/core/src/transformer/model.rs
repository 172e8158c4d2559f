//! Tracked forward pass used for training and gradient checks.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::l0drop::{self, GateMode, GateSet};
use crate::numcore::{kernels, Graph, Real, RngState, Tensor, Var};

use super::params::{AttnIds, FfnIds, NormIds};
use super::{ModelParams, BOS, EOS};

/// One gate layer's outputs inside a tracked encoder pass.
pub struct GateLayer {
    pub layer: usize,
    pub log_alpha: Var,
    pub set: GateSet,
}

pub struct Encoding {
    /// Final encoder output after gating (pruned rows are zero).
    pub memory: Var,
    pub gates: Vec<GateLayer>,
}

/// Per-sentence loss terms.
pub struct SentenceLoss {
    pub total: Var,
    pub nll: Var,
    pub penalty: Option<Var>,
    pub gates: Vec<GateLayer>,
    pub target_tokens: usize,
}

/// A model bound to a graph: every parameter is a tracked leaf.
pub struct Forward<'a, T: Real> {
    pub params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

pub fn causal_mask(m: usize) -> Rc<[bool]> {
    (0..m * m).map(|i| i % m <= i / m).collect::<Vec<_>>().into()
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(g: &mut Graph<T>, params: &'a ModelParams<T>) -> Self {
        Self {
            vars: params.bind(g),
            params,
        }
    }

    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn embed(&self, g: &mut Graph<T>, table: usize, ids: &[usize], rng: &mut RngState) -> Result<Var> {
        let cfg = &self.params.config;
        if ids.len() > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence of length {} exceeds max_len {}",
                ids.len(),
                cfg.max_len
            )));
        }
        let mut x = g.embedding(self.vars[table], ids)?;
        if cfg.scale_embeddings {
            x = g.scale(x, T::lit((cfg.d as f64).sqrt()))?;
        }
        if cfg.positional_encoding {
            let pe = kernels::sinusoid_table::<T>(ids.len(), cfg.d);
            let pe = g.constant(Tensor::new(&[ids.len(), cfg.d], pe)?);
            x = g.add(x, pe)?;
        }
        g.dropout(x, cfg.dropout, rng)
    }

    /// Multi-head attention of queries `h` (J×d) over `m` (I×d). `mask` marks
    /// allowed (query, key) pairs row-major.
    pub fn attention(
        &self,
        g: &mut Graph<T>,
        ids: &AttnIds,
        h: Var,
        m: Var,
        mask: Option<Rc<[bool]>>,
        rng: &mut RngState,
    ) -> Result<Var> {
        let cfg = &self.params.config;
        let dk = cfg.head_dim();
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let q = g.matmul(h, self.vars[ids.wq])?;
        let k = g.matmul(m, self.vars[ids.wk])?;
        let v = g.matmul(m, self.vars[ids.wv])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, hd * dk, dk)?,
                    g.slice_cols(k, hd * dk, dk)?,
                    g.slice_cols(v, hd * dk, dk)?,
                )
            };
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s, mask.clone())?;
            let a = g.dropout(a, cfg.attn_dropout, rng)?;
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        g.matmul(cat, self.vars[ids.wo])
    }

    fn ffn(&self, g: &mut Graph<T>, ids: &FfnIds, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.vars[ids.w1])?;
        let h = g.add_row(h, self.vars[ids.b1])?;
        let h = g.relu(h)?;
        let o = g.matmul(h, self.vars[ids.w2])?;
        g.add_row(o, self.vars[ids.b2])
    }

    /// `norm(x + dropout(sub))`
    fn residual(&self, g: &mut Graph<T>, x: Var, sub: Var, norm: &NormIds, rng: &mut RngState) -> Result<Var> {
        let sub = g.dropout(sub, self.params.config.dropout, rng)?;
        let s = g.add(x, sub)?;
        g.layer_norm(
            s,
            self.vars[norm.gamma],
            self.vars[norm.beta],
            T::lit(self.params.config.ln_eps),
        )
    }

    pub fn encode(&self, g: &mut Graph<T>, src: &[usize], mode: GateMode, rng: &mut RngState) -> Result<Encoding> {
        if src.is_empty() {
            return Err(Error::Data("empty source sentence".into()));
        }
        let cfg = &self.params.config;
        let layout = &self.params.layout;
        let mut x = self.embed(g, layout.src_embed, src, rng)?;
        let mut gates = Vec::new();
        let top = cfg.layers.checked_sub(1);
        for (l, ids) in layout.encoder.iter().enumerate() {
            let a = self.attention(g, &ids.self_attn, x, x, None, rng)?;
            x = self.residual(g, x, a, &ids.norm1, rng)?;
            let f = self.ffn(g, &ids.ffn, x)?;
            x = self.residual(g, x, f, &ids.norm2, rng)?;

            if let GateMode::Fixed(fixed) = mode {
                if Some(l) == top {
                    let gv = g.constant(Tensor::new(&[fixed.len()], fixed.iter().map(|&v| T::lit(v)).collect())?);
                    x = g.mul_col(x, gv)?;
                }
                continue;
            }
            let Some(w) = layout.gate_for_layer(l) else { continue };
            let w = self.vars[w];
            let hc = &cfg.hard_concrete;
            let tracked = match mode {
                GateMode::Disabled | GateMode::Fixed(_) => continue,
                GateMode::Sampled => {
                    let noise: Vec<f64> = (0..src.len()).map(|_| rng.uniform_open()).collect();
                    l0drop::apply_gates_train_tracked(g, x, w, hc, &noise, None)?
                }
                GateMode::Frozen(noise) => {
                    let u = noise.get(gates.len()).ok_or_else(|| {
                        Error::Contract(format!("no frozen noise for gate layer {}", gates.len()))
                    })?;
                    l0drop::apply_gates_train_tracked(g, x, w, hc, u, None)?
                }
                GateMode::Expected => l0drop::apply_gates_eval_tracked(g, x, w, hc, None)?,
            };
            x = tracked.gated;
            gates.push(GateLayer {
                layer: l,
                log_alpha: tracked.log_alpha,
                set: tracked.set,
            });
        }
        Ok(Encoding { memory: x, gates })
    }

    /// Teacher-forced decoder pass; `tgt_in` starts with the begin marker.
    /// Returns `M×V` next-token logits.
    pub fn decode_train(&self, g: &mut Graph<T>, tgt_in: &[usize], memory: Var, rng: &mut RngState) -> Result<Var> {
        if tgt_in.is_empty() {
            return Err(Error::Data("empty target sentence".into()));
        }
        let layout = &self.params.layout;
        let mask = causal_mask(tgt_in.len());
        let mut y = self.embed(g, layout.tgt_embed, tgt_in, rng)?;
        for ids in &layout.decoder {
            let a = self.attention(g, &ids.self_attn, y, y, Some(mask.clone()), rng)?;
            y = self.residual(g, y, a, &ids.norm1, rng)?;
            let c = self.attention(g, &ids.cross_attn, y, memory, None, rng)?;
            y = self.residual(g, y, c, &ids.norm2, rng)?;
            let f = self.ffn(g, &ids.ffn, y)?;
            y = self.residual(g, y, f, &ids.norm3, rng)?;
        }
        let logits = g.matmul(y, self.vars[layout.out_w])?;
        g.add_row(logits, self.vars[layout.out_b])
    }

    /// Summed label-smoothed NLL of `tgt` plus `lambda` times the expected L0
    /// of every gate layer.
    pub fn sentence_loss(
        &self,
        g: &mut Graph<T>,
        src: &[usize],
        tgt: &[usize],
        mode: GateMode,
        lambda: f64,
        rng: &mut RngState,
    ) -> Result<SentenceLoss> {
        if tgt.is_empty() {
            return Err(Error::Data("empty target sentence".into()));
        }
        let enc = self.encode(g, src, mode, rng)?;
        let (tgt_in, tgt_out) = teacher_forcing(tgt);
        let logits = self.decode_train(g, &tgt_in, enc.memory, rng)?;
        let nll = g.cross_entropy(logits, &tgt_out, self.params.config.label_smoothing)?;
        let hc = &self.params.config.hard_concrete;
        let penalizes = matches!(mode, GateMode::Sampled | GateMode::Frozen(_));
        let mut penalty = None;
        if penalizes {
            for layer in &enc.gates {
                let p = l0drop::penalty_tracked(g, layer.log_alpha, hc, None)?;
                penalty = Some(match penalty {
                    None => p,
                    Some(acc) => g.add(acc, p)?,
                });
            }
        }
        let total = match penalty {
            Some(p) if lambda != 0.0 => {
                let weighted = g.scale(p, T::lit(lambda))?;
                g.add(nll, weighted)?
            }
            _ => nll,
        };
        Ok(SentenceLoss {
            total,
            nll,
            penalty,
            gates: enc.gates,
            target_tokens: tgt_out.len(),
        })
    }
}

/// Decoder inputs `[BOS] + tgt` and outputs `tgt + [EOS]`.
pub fn teacher_forcing(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(tgt);
    let mut tgt_out = tgt.to_vec();
    tgt_out.push(EOS);
    (tgt_in, tgt_out)
}
