//! Tape-free inference: encoder in eval mode, and an incremental decoder with
//! per-layer self-attention caches. Cross-attention reads from any
//! [`CrossMemory`], so dense and compacted memories share one decoder.

use crate::error::{Error, Result};
use crate::l0drop::{self, GatePredictor, GateSet};
use crate::numcore::{kernels, Real, Tensor};

use super::params::{AttnIds, FfnIds, NormIds};
use super::ModelParams;

/// How gates are applied when encoding for inference.
#[derive(Debug, Clone, Copy)]
pub enum EvalGates<'a> {
    /// Gate layers are skipped.
    Disabled,
    /// Deterministic expected gates from the model's predictors.
    Expected,
    /// Externally supplied gates replace the top gate layer.
    Fixed(&'a GateSet),
}

/// Encoder output for one sentence.
#[derive(Debug, Clone)]
pub struct Encoded<T: Real> {
    /// Final output after gating: pruned rows are zero.
    pub memory: Tensor<T>,
    /// Final encoder layer output before its gate.
    pub encodings: Tensor<T>,
    /// Gates applied to the final encoder layer (all-open when it is ungated).
    pub gates: GateSet,
    /// Gates of every gate layer, bottom up.
    pub layer_gates: Vec<GateSet>,
    /// Last encoder layer's self-attention, one `N×N` matrix per head, when
    /// requested.
    pub last_self_attention: Option<Vec<Tensor<T>>>,
}

/// Reads the gated source for cross-attention in decoder layer `layer`.
pub trait CrossMemory<T: Real> {
    /// Original source length.
    fn source_len(&self) -> usize;
    /// Number of rows attention actually visits.
    fn attended_rows(&self) -> usize;
    /// Per-head attention of projected query `q` (length d); writes the
    /// concatenated head outputs into `out`. When `weights` is given it
    /// receives `heads × source_len` attention weights over the original
    /// positions.
    fn attend(&self, layer: usize, q: &[T], out: &mut [T], weights: Option<&mut Vec<T>>) -> Result<()>;
}

/// Row `x[1×d] · W[d×n]`.
fn vec_mat<T: Real>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![T::zero(); n];
    kernels::matmul_acc(x, w.data(), 1, k, n, &mut out);
    out
}

/// Matrix `x[r×d] · W[d×n]`.
pub fn mat_mat<T: Real>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![T::zero(); rows * n];
    kernels::matmul_acc(x, w.data(), rows, k, n, &mut out);
    out
}

/// Single-query multi-head attention over `rows` keys/values (each `d` wide).
/// With `counts`, each key's exponentiated logit is weighted by its count.
#[allow(clippy::too_many_arguments)]
pub fn attend_one<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    rows: usize,
    heads: usize,
    counts: Option<&[T]>,
    out: &mut [T],
    mut weights: Option<&mut Vec<T>>,
) -> Result<()> {
    let d = q.len();
    let dk = d / heads;
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let mut logits = vec![T::zero(); rows];
    out.iter_mut().for_each(|v| *v = T::zero());
    if let Some(w) = weights.as_deref_mut() {
        w.clear();
    }
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        for (j, l) in logits.iter_mut().enumerate() {
            *l = kernels::dot(qh, &keys[j * d + h * dk..j * d + (h + 1) * dk]) * scale;
        }
        let ok = match counts {
            Some(c) => kernels::count_softmax_in_place(&mut logits, c),
            None => kernels::softmax_in_place(&mut logits, None),
        };
        if !ok {
            return Err(Error::Contract("attention row has no admissible key".into()));
        }
        let oh = &mut out[h * dk..(h + 1) * dk];
        for (j, &a) in logits.iter().enumerate() {
            if a != T::zero() {
                kernels::axpy(a, &values[j * d + h * dk..j * d + (h + 1) * dk], oh);
            }
        }
        if let Some(w) = weights.as_deref_mut() {
            w.extend_from_slice(&logits);
        }
    }
    Ok(())
}

/// Dense cross-attention memory: every source row (zero rows included) is
/// projected per decoder layer.
pub struct DenseMemory<T: Real> {
    n: usize,
    heads: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> DenseMemory<T> {
    pub fn new(params: &ModelParams<T>, memory: &Tensor<T>) -> Self {
        let n = memory.rows();
        let (keys, values) = params
            .layout
            .decoder
            .iter()
            .map(|ids| {
                let ca = &ids.cross_attn;
                (
                    mat_mat(memory.data(), n, params.get(ca.wk)),
                    mat_mat(memory.data(), n, params.get(ca.wv)),
                )
            })
            .unzip();
        Self {
            n,
            heads: params.config.heads,
            keys,
            values,
        }
    }
}

impl<T: Real> CrossMemory<T> for DenseMemory<T> {
    fn source_len(&self) -> usize {
        self.n
    }

    fn attended_rows(&self) -> usize {
        self.n
    }

    fn attend(&self, layer: usize, q: &[T], out: &mut [T], weights: Option<&mut Vec<T>>) -> Result<()> {
        attend_one(q, &self.keys[layer], &self.values[layer], self.n, self.heads, None, out, weights)
    }
}

/// Growing self-attention keys and values, one buffer per decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderCache<T: Real> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> DecoderCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-step record of cross-attention weights: `[layer][head × N]`.
pub type CrossWeights<T> = Vec<Vec<T>>;

/// Inference over frozen parameters.
pub struct Engine<'a, T: Real> {
    pub params: &'a ModelParams<T>,
    positions: Vec<T>,
}

impl<'a, T: Real> Engine<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        let cfg = &params.config;
        let positions = if cfg.positional_encoding {
            kernels::sinusoid_table(cfg.max_len + 1, cfg.d)
        } else {
            vec![T::zero(); (cfg.max_len + 1) * cfg.d]
        };
        Self { params, positions }
    }

    fn embed_row(&self, table: usize, id: usize, pos: usize, out: &mut [T]) -> Result<()> {
        let cfg = &self.params.config;
        let t = self.params.get(table);
        if id >= t.rows() {
            return Err(Error::Data(format!("token id {id} outside vocabulary of {}", t.rows())));
        }
        if pos > cfg.max_len {
            return Err(Error::Data(format!("position {pos} exceeds max_len {}", cfg.max_len)));
        }
        let s = if cfg.scale_embeddings {
            T::lit((cfg.d as f64).sqrt())
        } else {
            T::one()
        };
        let pe = &self.positions[pos * cfg.d..(pos + 1) * cfg.d];
        for ((o, &e), &p) in out.iter_mut().zip(t.row(id)).zip(pe) {
            *o = e * s + p;
        }
        Ok(())
    }

    fn norm(&self, ids: &NormIds, x: &mut [T]) {
        let d = self.params.config.d;
        let rows = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_rows(
            x,
            d,
            self.params.get(ids.gamma).data(),
            self.params.get(ids.beta).data(),
            T::lit(self.params.config.ln_eps),
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        x.copy_from_slice(&out);
    }

    fn ffn(&self, ids: &FfnIds, x: &[T], rows: usize) -> Vec<T> {
        let mut h = mat_mat(x, rows, self.params.get(ids.w1));
        let b1 = self.params.get(ids.b1).data();
        for row in h.chunks_exact_mut(b1.len()) {
            for (v, &b) in row.iter_mut().zip(b1) {
                *v = (*v + b).max(T::zero());
            }
        }
        let mut o = mat_mat(&h, rows, self.params.get(ids.w2));
        let b2 = self.params.get(ids.b2).data();
        for row in o.chunks_exact_mut(b2.len()) {
            for (v, &b) in row.iter_mut().zip(b2) {
                *v = *v + b;
            }
        }
        o
    }

    /// Full (unmasked) self-attention over `rows` positions; optionally keeps
    /// each head's attention matrix.
    fn self_attention(&self, ids: &AttnIds, x: &[T], rows: usize, record: Option<&mut Vec<Tensor<T>>>) -> Result<Vec<T>> {
        let cfg = &self.params.config;
        let d = cfg.d;
        let q = mat_mat(x, rows, self.params.get(ids.wq));
        let k = mat_mat(x, rows, self.params.get(ids.wk));
        let v = mat_mat(x, rows, self.params.get(ids.wv));
        let mut cat = vec![T::zero(); rows * d];
        let mut per_head: Vec<Vec<T>> = vec![Vec::with_capacity(rows * rows); cfg.heads];
        let mut w = Vec::new();
        for i in 0..rows {
            attend_one(&q[i * d..(i + 1) * d], &k, &v, rows, cfg.heads, None, &mut cat[i * d..(i + 1) * d], Some(&mut w))?;
            for (h, ph) in per_head.iter_mut().enumerate() {
                ph.extend_from_slice(&w[h * rows..(h + 1) * rows]);
            }
        }
        if let Some(rec) = record {
            rec.clear();
            for ph in per_head {
                rec.push(Tensor::new(&[rows, rows], ph)?);
            }
        }
        Ok(mat_mat(&cat, rows, self.params.get(ids.wo)))
    }

    /// Eval-mode encoder.
    pub fn encode(&self, src: &[usize], gates: EvalGates, record_attention: bool) -> Result<Encoded<T>> {
        let cfg = &self.params.config;
        let layout = &self.params.layout;
        if src.is_empty() {
            return Err(Error::Data("empty source sentence".into()));
        }
        if src.len() > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence of length {} exceeds max_len {}",
                src.len(),
                cfg.max_len
            )));
        }
        let n = src.len();
        let d = cfg.d;
        let mut x = vec![T::zero(); n * d];
        for (i, &id) in src.iter().enumerate() {
            self.embed_row(layout.src_embed, id, i, &mut x[i * d..(i + 1) * d])?;
        }
        let mut layer_gates = Vec::new();
        let mut attn_record = Vec::new();
        let mut pre_gate = None;
        let mut top_gates = None;
        let top = cfg.layers.checked_sub(1);
        for (l, ids) in layout.encoder.iter().enumerate() {
            let rec = (record_attention && Some(l) == top).then_some(&mut attn_record);
            let a = self.self_attention(&ids.self_attn, &x, n, rec)?;
            x.iter_mut().zip(&a).for_each(|(xv, &av)| *xv = *xv + av);
            self.norm(&ids.norm1, &mut x);
            let f = self.ffn(&ids.ffn, &x, n);
            x.iter_mut().zip(&f).for_each(|(xv, &fv)| *xv = *xv + fv);
            self.norm(&ids.norm2, &mut x);
            if Some(l) == top {
                pre_gate = Some(x.clone());
            }

            let set = match gates {
                EvalGates::Disabled => None,
                EvalGates::Fixed(fixed) => (Some(l) == top).then(|| fixed.clone()),
                EvalGates::Expected => match layout.gate_for_layer(l) {
                    None => None,
                    Some(w) => {
                        let t = Tensor::new(&[n, d], x)?;
                        let pred = GatePredictor::from_slice(self.params.get(w).data())?;
                        let (gated, set) = l0drop::apply_gates_eval(&t, &pred, &cfg.hard_concrete, None)?;
                        x = gated.into_data();
                        Some(set)
                    }
                },
            };
            if let Some(set) = set {
                if let EvalGates::Fixed(_) = gates {
                    let t = Tensor::new(&[n, d], x)?;
                    x = l0drop::apply_fixed_gates(&t, &set)?.into_data();
                }
                if Some(l) == top {
                    top_gates = Some(set.clone());
                }
                layer_gates.push(set);
            }
        }
        let top_gates = top_gates.unwrap_or_else(|| GateSet::all_open(n));
        let encodings = Tensor::new(&[n, d], pre_gate.unwrap_or_else(|| x.clone()))?;
        Ok(Encoded {
            memory: Tensor::new(&[n, d], x)?,
            encodings,
            gates: top_gates,
            layer_gates,
            last_self_attention: record_attention.then_some(attn_record),
        })
    }

    /// One incremental decoder step for `token` at position `cache.len()`.
    /// Returns next-token logits. `record` receives per-layer cross-attention
    /// weights over the original source positions.
    pub fn step(
        &self,
        cache: &mut DecoderCache<T>,
        token: usize,
        memory: &dyn CrossMemory<T>,
        mut record: Option<&mut CrossWeights<T>>,
    ) -> Result<Vec<T>> {
        let cfg = &self.params.config;
        let layout = &self.params.layout;
        let d = cfg.d;
        let pos = cache.len;
        let mut x = vec![T::zero(); d];
        self.embed_row(layout.tgt_embed, token, pos, &mut x)?;
        let mut attn = vec![T::zero(); d];
        if let Some(r) = record.as_deref_mut() {
            r.clear();
        }
        for (l, ids) in layout.decoder.iter().enumerate() {
            let sa = &ids.self_attn;
            let q = vec_mat(&x, self.params.get(sa.wq));
            cache.keys[l].extend(vec_mat(&x, self.params.get(sa.wk)));
            cache.values[l].extend(vec_mat(&x, self.params.get(sa.wv)));
            attend_one(&q, &cache.keys[l], &cache.values[l], pos + 1, cfg.heads, None, &mut attn, None)?;
            let o = vec_mat(&attn, self.params.get(sa.wo));
            x.iter_mut().zip(&o).for_each(|(xv, &ov)| *xv = *xv + ov);
            self.norm(&ids.norm1, &mut x);

            let ca = &ids.cross_attn;
            let q = vec_mat(&x, self.params.get(ca.wq));
            let mut w = Vec::new();
            memory.attend(l, &q, &mut attn, record.is_some().then_some(&mut w))?;
            if let Some(r) = record.as_deref_mut() {
                r.push(w);
            }
            let o = vec_mat(&attn, self.params.get(ca.wo));
            x.iter_mut().zip(&o).for_each(|(xv, &ov)| *xv = *xv + ov);
            self.norm(&ids.norm2, &mut x);

            let f = self.ffn(&ids.ffn, &x, 1);
            x.iter_mut().zip(&f).for_each(|(xv, &fv)| *xv = *xv + fv);
            self.norm(&ids.norm3, &mut x);
        }
        cache.len += 1;
        let mut logits = vec_mat(&x, self.params.get(layout.out_w));
        for (v, &b) in logits.iter_mut().zip(self.params.get(layout.out_b).data()) {
            *v = *v + b;
        }
        Ok(logits)
    }

    /// Teacher-forced logits via incremental steps, `M×V`.
    pub fn forced_logits(&self, tgt_in: &[usize], memory: &dyn CrossMemory<T>) -> Result<Tensor<T>> {
        let mut cache = DecoderCache::new(self.params.config.layers);
        let mut rows = Vec::with_capacity(tgt_in.len());
        for &t in tgt_in {
            rows.push(self.step(&mut cache, t, memory, None)?);
        }
        Tensor::from_rows(&rows)
    }
}

/// Log-softmax of a logit row, in f64.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v.as_f64() - lse).collect()
}
