//! Post-norm encoder-decoder Transformer with bias-free attention projections
//! and sinusoidal positions.
//!
//! Training runs through the tracked [`Forward`] pass; decoding runs through
//! the tape-free [`Engine`], which caches decoder self-attention and reads
//! cross-attention from a [`CrossMemory`].

mod beam;
mod checkpoint;
mod config;
mod infer;
mod model;
mod params;

pub use beam::{beam_search, greedy, length_penalty, DecodeOptions, Hypothesis};
pub use checkpoint::{Checkpoint, StoredTensor};
pub use config::ModelConfig;
pub use infer::{
    attend_one, log_softmax, mat_mat, CrossMemory, CrossWeights, DecoderCache, DenseMemory, Encoded, Engine, EvalGates,
};
pub use model::{causal_mask, teacher_forcing, Encoding, Forward, GateLayer, SentenceLoss};
pub use params::{AttnIds, DecoderLayerIds, EncoderLayerIds, FfnIds, Layout, ModelParams, NormIds};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids before the first content token.
pub const SPECIALS: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l0drop::{GateMode, GatePlacement, GateSet};
    use crate::numcore::{Graph, RngState, Tensor};
    use proptest::prelude::*;

    fn tiny(layers: usize) -> ModelConfig {
        ModelConfig {
            d: 16,
            ffn_dim: 24,
            heads: 2,
            layers,
            src_vocab: 12,
            tgt_vocab: 12,
            dropout: 0.0,
            attn_dropout: 0.0,
            max_len: 32,
            ..Default::default()
        }
    }

    fn model(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
        ModelParams::init(cfg, &mut RngState::new(seed)).unwrap()
    }

    fn rand_rows(r: usize, c: usize, rng: &mut RngState) -> Tensor<f64> {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    /// Multi-head attention with every intermediate materialized.
    fn naive_attention(p: &ModelParams<f64>, ids: &AttnIds, h: &Tensor<f64>, m: &Tensor<f64>) -> Tensor<f64> {
        let heads = p.config.heads;
        let dk = p.config.head_dim();
        let q = h.matmul(p.get(ids.wq)).unwrap();
        let k = m.matmul(p.get(ids.wk)).unwrap();
        let v = m.matmul(p.get(ids.wv)).unwrap();
        let (j, i) = (h.rows(), m.rows());
        let mut cat = vec![0.0; j * p.config.d];
        for hd in 0..heads {
            let mut a = vec![vec![0.0; i]; j];
            for r in 0..j {
                for c in 0..i {
                    let mut s = 0.0;
                    for t in 0..dk {
                        s += q.row(r)[hd * dk + t] * k.row(c)[hd * dk + t];
                    }
                    a[r][c] = s / (dk as f64).sqrt();
                }
                let max = a[r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = a[r].iter().map(|x| (x - max).exp()).sum();
                for c in 0..i {
                    a[r][c] = (a[r][c] - max).exp() / z;
                }
            }
            for r in 0..j {
                for t in 0..dk {
                    cat[r * p.config.d + hd * dk + t] = (0..i).map(|c| a[r][c] * v.row(c)[hd * dk + t]).sum();
                }
            }
        }
        Tensor::new(&[j, p.config.d], cat).unwrap().matmul(p.get(ids.wo)).unwrap()
    }

    #[test]
    fn attention_matches_naive_reference() {
        let p = model(&tiny(1), 1);
        let mut rng = RngState::new(9);
        let h = rand_rows(3, 16, &mut rng);
        let m = rand_rows(4, 16, &mut rng);
        let mut g = Graph::new(false);
        let f = Forward::new(&mut g, &p);
        let hv = g.constant(h.clone());
        let mv = g.constant(m.clone());
        let ids = p.layout.decoder[0].cross_attn;
        let out = f.attention(&mut g, &ids, hv, mv, None, &mut rng).unwrap();
        let want = naive_attention(&p, &ids, &h, &m);
        assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn single_key_returns_its_value() {
        let v = [0.5, -1.0, 2.0, 3.0];
        let mut out = [0.0; 4];
        attend_one(&[1.0, 2.0, 3.0, 4.0], &[0.3, 0.1, 0.2, 0.9], &v, 1, 2, None, &mut out, None).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn equal_logits_average_values() {
        let keys = [0.7, 0.1, 0.7, 0.1, 0.7, 0.1];
        let vals = [1.0, 2.0, 3.0, 4.0, 8.0, 0.0];
        let mut out = [0.0f64; 2];
        attend_one(&[0.4, -0.2], &keys, &vals, 3, 1, None, &mut out, None).unwrap();
        assert!((out[0] - 4.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..1000, rows in 1usize..12, heads in 1usize..4) {
            let d = heads * 3;
            let mut rng = RngState::new(seed);
            let mut draw = |n: usize| (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect::<Vec<f64>>();
            let (q, k, v) = (draw(d), draw(rows * d), draw(rows * d));
            let mut out = vec![0.0; d];
            let mut w = Vec::new();
            attend_one(&q, &k, &v, rows, heads, None, &mut out, Some(&mut w)).unwrap();
            for h in 0..heads {
                let s: f64 = w[h * rows..(h + 1) * rows].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layer_encoder_is_embedding_plus_position() {
        let cfg = ModelConfig {
            gate_placement: GatePlacement::None,
            ..tiny(0)
        };
        let p = model(&cfg, 2);
        let src = [4, 5, 6];
        let enc = Engine::new(&p).encode(&src, EvalGates::Expected, false).unwrap();
        let pe = crate::numcore::kernels::sinusoid_table::<f64>(3, 16);
        for (i, &t) in src.iter().enumerate() {
            for c in 0..16 {
                let want = p.get(p.layout.src_embed).row(t)[c] * 4.0 + pe[i * 16 + c];
                assert_eq!(enc.memory.row(i)[c], want);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let cfg = ModelConfig {
            positional_encoding: false,
            ..tiny(2)
        };
        let p = model(&cfg, 3);
        let e = Engine::new(&p);
        let a = e.encode(&[4, 7, 9, 5], EvalGates::Expected, false).unwrap().memory;
        let b = e.encode(&[9, 4, 5, 7], EvalGates::Expected, false).unwrap().memory;
        for (ia, ib) in [(0, 1), (1, 3), (2, 0), (3, 2)] {
            for c in 0..16 {
                assert!((a.row(ia)[c] - b.row(ib)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let cfg = ModelConfig {
                dropout: 0.1,
                attn_dropout: 0.1,
                ..tiny(2)
            };
            let p = model(&cfg, 4);
            let mut g = Graph::new(true);
            let f = Forward::new(&mut g, &p);
            let mut rng = RngState::new(8);
            let l = f.sentence_loss(&mut g, &[4, 5, 6, 7], &[4, 5, 6, 7], GateMode::Sampled, 0.3, &mut rng).unwrap();
            g.value(l.total).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_is_causal() {
        let p = model(&tiny(2), 5);
        let logits = |tgt: &[usize]| {
            let mut g = Graph::new(false);
            let f = Forward::new(&mut g, &p);
            let mut rng = RngState::new(0);
            let enc = f.encode(&mut g, &[4, 5, 6], GateMode::Expected, &mut rng).unwrap();
            let out = f.decode_train(&mut g, tgt, enc.memory, &mut rng).unwrap();
            g.value(out).clone()
        };
        let a = logits(&[BOS, 4, 5, 6, 7]);
        let b = logits(&[BOS, 4, 5, 11, 10]);
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn incremental_decoder_matches_tracked_pass() {
        for placement in [GatePlacement::Top, GatePlacement::PerLayer] {
            let cfg = ModelConfig {
                gate_placement: placement,
                ..tiny(2)
            };
            let mut p = model(&cfg, 6);
            // Non-zero predictors so some gates close.
            let mut rng = RngState::new(1);
            for &(_, w) in &p.layout.gates.clone() {
                p.get_mut(w).data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-3.0, 3.0));
            }
            let src = [4, 8, 5, 9, 10];
            let tgt_in = [BOS, 4, 8, 5];
            let mut g = Graph::new(false);
            let f = Forward::new(&mut g, &p);
            let enc = f.encode(&mut g, &src, GateMode::Expected, &mut rng).unwrap();
            let logits = f.decode_train(&mut g, &tgt_in, enc.memory, &mut rng).unwrap();
            let tracked = g.value(logits).clone();

            let e = Engine::new(&p);
            let plain = e.encode(&src, EvalGates::Expected, false).unwrap();
            assert!(plain.memory.max_abs_diff(g.value(enc.memory)).unwrap() < 1e-12);
            let tracked_set = &enc.gates.last().unwrap().set;
            assert_eq!(plain.gates.open_mask, tracked_set.open_mask);
            assert!(plain.gates.open_mask.contains(&false));
            for (a, b) in plain.gates.gates.iter().zip(&tracked_set.gates) {
                assert!((a - b).abs() < 1e-12);
            }
            let mem = DenseMemory::new(&p, &plain.memory);
            let inc = e.forced_logits(&tgt_in, &mem).unwrap();
            assert!(inc.max_abs_diff(&tracked).unwrap() < 1e-10);
        }
    }

    #[test]
    fn open_gates_leave_decoder_unchanged() {
        let p = model(&tiny(2), 7);
        let e = Engine::new(&p);
        let ones = GateSet::from_binary(&[true; 4]);
        let fixed = e.encode(&[4, 5, 6, 7], EvalGates::Fixed(&ones), false).unwrap();
        let plain = e.encode(&[4, 5, 6, 7], EvalGates::Disabled, false).unwrap();
        assert_eq!(fixed.memory, plain.memory);
        let a = e.forced_logits(&[BOS, 4], &DenseMemory::new(&p, &fixed.memory)).unwrap();
        let b = e.forced_logits(&[BOS, 4], &DenseMemory::new(&p, &plain.memory)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_overlong_inputs_are_rejected() {
        let p = model(&tiny(1), 8);
        let mut g = Graph::new(false);
        let f = Forward::new(&mut g, &p);
        let mut rng = RngState::new(0);
        assert!(f.encode(&mut g, &[], GateMode::Disabled, &mut rng).is_err());
        assert!(f.encode(&mut g, &[4; 40], GateMode::Disabled, &mut rng).is_err());
        let enc = f.encode(&mut g, &[4], GateMode::Disabled, &mut rng).unwrap();
        assert!(f.decode_train(&mut g, &[], enc.memory, &mut rng).is_err());
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = ModelConfig {
            label_smoothing: 0.1,
            ..tiny(1)
        };
        let mut p = model(&cfg, 10);
        let mut rng = RngState::new(2);
        let w = p.layout.gates[0].1;
        p.get_mut(w).data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        let src = [4, 5, 6, 7, 8];
        let tgt = [9, 10, 11];
        let noise = vec![vec![0.37, 0.81, 0.55, 0.22, 0.64]];
        let loss = |p: &ModelParams<f64>| {
            let mut g = Graph::new(true);
            let f = Forward::new(&mut g, p);
            let mut rng = RngState::new(0);
            let l = f.sentence_loss(&mut g, &src, &tgt, GateMode::Frozen(&noise), 0.3, &mut rng).unwrap();
            (g.value(l.total).data()[0], g.backward(l.total).unwrap(), f.vars().to_vec())
        };
        let (_, grads, vars) = loss(&p);
        let h = 1e-5;
        for k in 0..p.len() {
            let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.get(k).numel()]);
            // Sample a spread of entries per tensor to keep the check fast.
            let n = p.get(k).numel();
            for i in (0..n).step_by((n / 7).max(1)) {
                let mut up = p.clone();
                up.get_mut(k).data_mut()[i] += h;
                let mut dn = p.clone();
                dn.get_mut(k).data_mut()[i] -= h;
                let fd = (loss(&up).0 - loss(&dn).0) / (2.0 * h);
                let a = analytic[i];
                let scale = a.abs().max(fd.abs()).max(1e-3);
                assert!((a - fd).abs() / scale < 1e-5, "{}[{i}]: {a} vs {fd}", p.name(k));
            }
        }
    }

    #[test]
    fn beam_of_one_is_greedy_and_zero_penalty_is_raw_score() {
        let p = model(&tiny(2), 11);
        let e = Engine::new(&p);
        for src in [[4usize, 5, 6], [7, 7, 8], [11, 4, 9]] {
            let enc = e.encode(&src, EvalGates::Expected, false).unwrap();
            let mem = DenseMemory::new(&p, &enc.memory);
            let g = greedy(&e, &mem, 12).unwrap();
            let opts = DecodeOptions {
                beam: 1,
                length_penalty: 0.6,
                max_steps: 12,
            };
            assert_eq!(beam_search(&e, &mem, &opts).unwrap().tokens, g.tokens);
            let raw = beam_search(
                &e,
                &mem,
                &DecodeOptions {
                    beam: 4,
                    length_penalty: 0.0,
                    ..opts
                },
            )
            .unwrap();
            assert_eq!(raw.score, raw.log_prob);
        }
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert!((length_penalty(7, 0.6) - 2f64.powf(0.6)).abs() < 1e-15);
    }
}
