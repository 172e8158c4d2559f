//! Decoding over a shortened source memory.
//!
//! All pruned positions carry the zero vector, so with bias-free projections
//! they share one key and one value. [`compact`] keeps a single zero row in
//! their place with a multiplicity equal to their number; attention weights
//! that row by its count, which reproduces dense attention over the full
//! zero-padded sequence while visiting only `N′ + 1` rows per query.

mod bench;

pub use bench::{bench_cross_attention, BenchRecord};

use crate::error::{Error, Result};
use crate::l0drop::GateSet;
use crate::numcore::{Real, Tensor};
use crate::transformer::{attend_one, mat_mat, CrossMemory, DenseMemory, Encoded, ModelParams};

/// Compacted source: a zero row standing in for every pruned position,
/// followed by the gate-scaled retained rows in source order.
#[derive(Debug, Clone)]
pub struct CompactedMemory<T: Real> {
    indices: Vec<usize>,
    x_bar: Tensor<T>,
    counts: Vec<T>,
    n: usize,
    heads: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

/// Builds the compacted memory from pre-gate encodings and their gates.
pub fn compact<T: Real>(encodings: &Tensor<T>, gates: &GateSet) -> Result<CompactedMemory<T>> {
    let n = encodings.rows();
    if gates.len() != n {
        return Err(Error::shape("compact", encodings.shape(), &[gates.len()]));
    }
    let d = encodings.cols();
    let indices: Vec<usize> = (0..n).filter(|&i| gates.open_mask[i]).collect();
    if indices.is_empty() {
        return Err(Error::DegenerateMemory);
    }
    let mut data = vec![T::zero(); (indices.len() + 1) * d];
    for (r, &i) in indices.iter().enumerate() {
        let g = T::lit(gates.gates[i]);
        for (o, &v) in data[(r + 1) * d..(r + 2) * d].iter_mut().zip(encodings.row(i)) {
            *o = v * g;
        }
    }
    let mut counts = vec![T::one(); indices.len() + 1];
    counts[0] = T::lit((n - indices.len()) as f64);
    Ok(CompactedMemory {
        x_bar: Tensor::new(&[indices.len() + 1, d], data)?,
        indices,
        counts,
        n,
        heads: 1,
        keys: vec![],
        values: vec![],
    })
}

impl<T: Real> CompactedMemory<T> {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn x_bar(&self) -> &Tensor<T> {
        &self.x_bar
    }

    pub fn counts(&self) -> &[T] {
        &self.counts
    }

    pub fn retained(&self) -> usize {
        self.indices.len()
    }

    /// Caches key/value projections for one more attention layer.
    pub fn push_layer(&mut self, wk: &Tensor<T>, wv: &Tensor<T>, heads: usize) -> Result<()> {
        let d = self.x_bar.cols();
        if wk.shape() != [d, d] || wv.shape() != [d, d] || heads == 0 || d % heads != 0 {
            return Err(Error::shape("compacted projection", &[d, heads], wk.shape()));
        }
        let rows = self.x_bar.rows();
        self.keys.push(mat_mat(self.x_bar.data(), rows, wk));
        self.values.push(mat_mat(self.x_bar.data(), rows, wv));
        self.heads = heads;
        Ok(())
    }

    /// Caches projections for every decoder layer of `params`.
    pub fn project(mut self, params: &ModelParams<T>) -> Result<Self> {
        self.keys.clear();
        self.values.clear();
        for ids in &params.layout.decoder {
            self.push_layer(params.get(ids.cross_attn.wk), params.get(ids.cross_attn.wv), params.config.heads)?;
        }
        Ok(self)
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }
}

/// Count-weighted attention of a projected query over cached layer `layer`.
/// Returns the concatenated head outputs (length d).
pub fn attend_with_counts<T: Real>(query: &[T], mem: &CompactedMemory<T>, layer: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); query.len()];
    mem.attend(layer, query, &mut out, None)?;
    Ok(out)
}

impl<T: Real> CrossMemory<T> for CompactedMemory<T> {
    fn source_len(&self) -> usize {
        self.n
    }

    fn attended_rows(&self) -> usize {
        self.x_bar.rows()
    }

    fn attend(&self, layer: usize, q: &[T], out: &mut [T], weights: Option<&mut Vec<T>>) -> Result<()> {
        let keys = self
            .keys
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no cached projections for layer {layer}")))?;
        if q.len() != self.x_bar.cols() {
            return Err(Error::shape("attend_with_counts", &[q.len()], self.x_bar.shape()));
        }
        let rows = self.x_bar.rows();
        match weights {
            None => attend_one(q, keys, &self.values[layer], rows, self.heads, Some(&self.counts), out, None),
            Some(w) => {
                let mut compact_w = Vec::new();
                attend_one(q, keys, &self.values[layer], rows, self.heads, Some(&self.counts), out, Some(&mut compact_w))?;
                // Spread back to source positions: each pruned position gets an
                // equal share of the dummy row's mass.
                w.clear();
                let pruned = self.counts[0];
                for h in 0..self.heads {
                    let hw = &compact_w[h * rows..(h + 1) * rows];
                    let share = if pruned > T::zero() { hw[0] / pruned } else { T::zero() };
                    let mut full = vec![share; self.n];
                    for (r, &i) in self.indices.iter().enumerate() {
                        full[i] = hw[r + 1];
                    }
                    w.extend(full);
                }
                Ok(())
            }
        }
    }
}

/// Cross-attention sublayer (without residual) for a block of decoder states
/// against compacted memory: `Wo · attend(states · Wq)` row by row.
pub fn sparse_cross_attention_layer<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    states: &Tensor<T>,
    mem: &CompactedMemory<T>,
) -> Result<Tensor<T>> {
    let ids = params
        .layout
        .decoder
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("decoder has no layer {layer}")))?
        .cross_attn;
    let d = params.config.d;
    let rows = states.rows();
    let q = mat_mat(states.data(), rows, params.get(ids.wq));
    let mut cat = vec![T::zero(); rows * d];
    for r in 0..rows {
        mem.attend(layer, &q[r * d..(r + 1) * d], &mut cat[r * d..(r + 1) * d], None)?;
    }
    Tensor::new(&[rows, d], mat_mat(&cat, rows, params.get(ids.wo)))
}

/// Memory used by the decoder for one encoded sentence.
pub enum DecodeMemory<T: Real> {
    Dense(DenseMemory<T>),
    Sparse(CompactedMemory<T>),
}

impl<T: Real> DecodeMemory<T> {
    /// Compacted memory when `sparse`, falling back to dense attention (with
    /// a warning) for a sentence whose every position was pruned.
    pub fn build(params: &ModelParams<T>, enc: &Encoded<T>, sparse: bool) -> Result<Self> {
        if !sparse {
            return Ok(Self::Dense(DenseMemory::new(params, &enc.memory)));
        }
        match compact(&enc.encodings, &enc.gates) {
            Ok(m) => Ok(Self::Sparse(m.project(params)?)),
            Err(Error::DegenerateMemory) => {
                log::warn!(
                    "all {} source positions pruned; decoding this sentence with dense attention",
                    enc.gates.len()
                );
                Ok(Self::Dense(DenseMemory::new(params, &enc.memory)))
            }
            Err(e) => Err(e),
        }
    }

    pub fn as_cross(&self) -> &dyn CrossMemory<T> {
        match self {
            Self::Dense(m) => m,
            Self::Sparse(m) => m,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Self::Sparse(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;
    use crate::transformer::{greedy, DecodeOptions, Engine, EvalGates, ModelConfig};

    fn rows(v: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn gates(g: &[f64]) -> GateSet {
        let mut s = GateSet::from_binary(&g.iter().map(|&v| v > 0.0).collect::<Vec<_>>());
        s.gates = g.to_vec();
        s
    }

    #[test]
    fn hand_traced_compaction() {
        let x = rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.0]]);
        let m = compact(&x, &gates(&[0.0, 1.0, 0.0, 0.5, 0.0])).unwrap();
        assert_eq!(m.indices(), &[1, 3]);
        assert_eq!(m.counts(), &[3.0, 1.0, 1.0]);
        assert_eq!(m.x_bar().data(), &[0.0, 0.0, 3.0, 4.0, 3.5, 4.0]);
    }

    #[test]
    fn nothing_pruned_and_everything_pruned() {
        let x = rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let m = compact(&x, &gates(&[1.0, 1.0])).unwrap();
        assert_eq!(m.counts(), &[0.0, 1.0, 1.0]);
        assert_eq!(&m.x_bar().data()[2..], x.data());
        assert!(matches!(compact(&x, &gates(&[0.0, 0.0])), Err(Error::DegenerateMemory)));
    }

    #[test]
    fn unit_counts_are_plain_softmax_over_retained_rows() {
        let mut rng = RngState::new(3);
        let d = 4;
        let x = Tensor::new(&[3, d], (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let w = |rng: &mut RngState| Tensor::new(&[d, d], (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let (wk, wv) = (w(&mut rng), w(&mut rng));
        let mut m = compact(&x, &gates(&[1.0, 1.0, 1.0])).unwrap();
        m.push_layer(&wk, &wv, 2).unwrap();
        let q: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let got = attend_with_counts(&q, &m, 0).unwrap();
        let k = x.matmul(&wk).unwrap();
        let v = x.matmul(&wv).unwrap();
        let mut want = vec![0.0; d];
        attend_one(&q, k.data(), v.data(), 3, 2, None, &mut want, None).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_position_closed_form() {
        // x = [[2], [5]], gate [0, 1], Wk = [3], Wv = [7], q = 0.5.
        // Dense: keys [0, 15], logits [0, 7.5], values [0, 35].
        let x = Tensor::new(&[2, 1], vec![2.0, 5.0]).unwrap();
        let mut m = compact(&x, &gates(&[0.0, 1.0])).unwrap();
        let wk = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        let wv = Tensor::new(&[1, 1], vec![7.0]).unwrap();
        m.push_layer(&wk, &wv, 1).unwrap();
        let out = attend_with_counts(&[0.5], &m, 0).unwrap();
        let want = 35.0 * 7.5f64.exp() / (1.0 + 7.5f64.exp());
        assert!((out[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cached_projections_match_per_step_recompute() {
        let cfg = ModelConfig {
            d: 8,
            ffn_dim: 16,
            heads: 2,
            layers: 2,
            src_vocab: 10,
            tgt_vocab: 10,
            ..Default::default()
        };
        let p = ModelParams::<f64>::init(&cfg, &mut RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let x = Tensor::new(&[5, 8], (0..40).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let g = gates(&[0.0, 0.7, 1.0, 0.0, 0.2]);
        let mem = compact(&x, &g).unwrap().project(&p).unwrap();
        let states = Tensor::new(&[3, 8], (0..24).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        for layer in 0..2 {
            let cached = sparse_cross_attention_layer(&p, layer, &states, &mem).unwrap();
            for r in 0..3 {
                let fresh = compact(&x, &g).unwrap().project(&p).unwrap();
                let one = Tensor::new(&[1, 8], states.row(r).to_vec()).unwrap();
                let again = sparse_cross_attention_layer(&p, layer, &one, &fresh).unwrap();
                assert_eq!(again.row(0), cached.row(r));
            }
        }
    }

    #[test]
    fn expanded_weights_match_dense() {
        let cfg = ModelConfig {
            d: 8,
            ffn_dim: 16,
            heads: 2,
            layers: 1,
            src_vocab: 10,
            tgt_vocab: 10,
            ..Default::default()
        };
        let mut p = ModelParams::<f64>::init(&cfg, &mut RngState::new(4)).unwrap();
        let w = p.layout.gates[0].1;
        p.get_mut(w).data_mut().copy_from_slice(&[6.0, -6.0, 4.0, -3.0, 5.0, -5.0, 2.0, 1.0]);
        let e = Engine::new(&p);
        let enc = e.encode(&[4, 5, 6, 7, 8, 9], EvalGates::Expected, false).unwrap();
        assert!(enc.gates.closed_count() > 0);
        let dense = DenseMemory::new(&p, &enc.memory);
        let sparse = DecodeMemory::build(&p, &enc, true).unwrap();
        assert!(sparse.is_sparse());
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let (mut o1, mut o2) = (vec![0.0; 8], vec![0.0; 8]);
        let (mut w1, mut w2) = (vec![], vec![]);
        dense.attend(0, &q, &mut o1, Some(&mut w1)).unwrap();
        sparse.as_cross().attend(0, &q, &mut o2, Some(&mut w2)).unwrap();
        for (a, b) in w1.iter().zip(&w2).chain(o1.iter().zip(&o2)) {
            assert!((a - b).abs() < 1e-12);
        }
        let opts = DecodeOptions::default();
        assert_eq!(
            greedy(&e, &dense, opts.max_steps).unwrap().tokens,
            greedy(&e, sparse.as_cross(), opts.max_steps).unwrap().tokens
        );
    }

    #[test]
    fn all_pruned_falls_back_to_dense() {
        let cfg = ModelConfig {
            d: 8,
            ffn_dim: 16,
            heads: 2,
            layers: 1,
            src_vocab: 10,
            tgt_vocab: 10,
            ..Default::default()
        };
        let p = ModelParams::<f64>::init(&cfg, &mut RngState::new(4)).unwrap();
        let e = Engine::new(&p);
        let closed = GateSet::from_binary(&[false; 3]);
        let enc = e.encode(&[4, 5, 6], EvalGates::Fixed(&closed), false).unwrap();
        assert!(!DecodeMemory::build(&p, &enc, true).unwrap().is_sparse());
    }

    proptest::proptest! {
        #[test]
        fn counts_conserve_length_and_attention_matches_dense(
            seed in 0u64..500,
            n in 1usize..24,
            heads in 1usize..4,
            dh in 1usize..5,
        ) {
            let d = heads * dh;
            let mut rng = RngState::new(seed);
            let mut random = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect() };
            let x = Tensor::new(&[n, d], random(n * d)).unwrap();
            let wk = Tensor::new(&[d, d], random(d * d)).unwrap();
            let wv = Tensor::new(&[d, d], random(d * d)).unwrap();
            let q = random(d);
            let mut g: Vec<f64> = random(n).iter().map(|&u| if u < 0.0 { 0.0 } else { u.max(0.05) }).collect();
            g[n - 1] = 1.0;
            let mut m = compact(&x, &gates(&g)).unwrap();
            proptest::prop_assert_eq!(m.counts().iter().sum::<f64>(), n as f64);
            m.push_layer(&wk, &wv, heads).unwrap();
            let got = attend_with_counts(&q, &m, 0).unwrap();

            let mut gated = x.clone();
            for (i, gi) in g.iter().enumerate() {
                gated.row_mut(i).iter_mut().for_each(|v| *v *= gi);
            }
            let k = gated.matmul(&wk).unwrap();
            let v = gated.matmul(&wv).unwrap();
            let mut want = vec![0.0; d];
            attend_one(&q, k.data(), v.data(), n, heads, None, &mut want, None).unwrap();
            for (a, b) in got.iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
