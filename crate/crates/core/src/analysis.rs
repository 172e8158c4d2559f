//! Attention diagnostics: how much cross-attention each source word receives
//! and how spread out the encoder's last self-attention is.

use crate::error::{Error, Result};
use crate::l0drop::GateSet;
use crate::numcore::Real;
use crate::sparse_decode::DecodeMemory;
use crate::transformer::{teacher_forcing, CrossMemory, CrossWeights, DecoderCache, Engine, EvalGates};

/// Cross-attention weight per source position, averaged over decoder layers
/// and heads at each step, then summed over the steps fed in `tgt_in`.
pub fn summed_attention_mass<T: Real>(
    engine: &Engine<T>,
    memory: &dyn CrossMemory<T>,
    tgt_in: &[usize],
) -> Result<Vec<f64>> {
    let n = memory.source_len();
    let heads = engine.params.config.heads;
    let mut mass = vec![0.0; n];
    let mut cache = DecoderCache::new(engine.params.config.layers);
    let mut rec: CrossWeights<T> = Vec::new();
    for &tok in tgt_in {
        engine.step(&mut cache, tok, memory, Some(&mut rec))?;
        let scale = 1.0 / (rec.len() * heads) as f64;
        for layer in &rec {
            for h in 0..heads {
                for (m, w) in mass.iter_mut().zip(&layer[h * n..(h + 1) * n]) {
                    *m += w.as_f64() * scale;
                }
            }
        }
    }
    Ok(mass)
}

/// Shannon entropy (nats) of a probability row; zero entries contribute 0.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Per-word measurements for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct WordStats {
    pub mass: Vec<f64>,
    /// Entropy of each position's last-layer encoder self-attention row,
    /// averaged over heads.
    pub entropy: Vec<f64>,
    pub gates: GateSet,
}

/// Measures one sentence pair under teacher forcing (the end-marker step
/// included).
pub fn analyze_sentence<T: Real>(engine: &Engine<T>, src: &[usize], tgt: &[usize], gates: EvalGates) -> Result<WordStats> {
    let enc = engine.encode(src, gates, true)?;
    let mem = DecodeMemory::build(engine.params, &enc, false)?;
    let (tgt_in, _) = teacher_forcing(tgt);
    let mass = summed_attention_mass(engine, mem.as_cross(), &tgt_in)?;
    let n = src.len();
    let heads = enc.last_self_attention.unwrap_or_default();
    if heads.is_empty() {
        return Err(Error::Contract("model has no encoder layer to inspect".into()));
    }
    let entropy = (0..n)
        .map(|i| {
            heads
                .iter()
                .map(|h| entropy(&h.row(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
                .sum::<f64>()
                / heads.len() as f64
        })
        .collect();
    Ok(WordStats {
        mass,
        entropy,
        gates: enc.gates,
    })
}

/// Distribution summary of per-word attention mass.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSummary {
    pub words: usize,
    pub mean: f64,
    /// Fraction of words whose mass is below `threshold`.
    pub frac_below: f64,
    pub threshold: f64,
    /// `(lower edge, count)` for bins of `bin_width`; the last bin is open.
    pub histogram: Vec<(f64, usize)>,
    pub bin_width: f64,
}

impl MassSummary {
    pub fn new(masses: &[f64], threshold: f64, bin_width: f64, bins: usize) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut histogram: Vec<(f64, usize)> = (0..bins).map(|b| (b as f64 * bin_width, 0)).collect();
        for &m in masses {
            let b = ((m / bin_width).floor().max(0.0) as usize).min(bins - 1);
            histogram[b].1 += 1;
        }
        Ok(Self {
            words: masses.len(),
            mean: masses.iter().sum::<f64>() / masses.len() as f64,
            frac_below: masses.iter().filter(|&&m| m < threshold).count() as f64 / masses.len() as f64,
            threshold,
            histogram,
            bin_width,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        let last = self.histogram.len() - 1;
        for (i, &(lo, c)) in self.histogram.iter().enumerate() {
            let hi = if i == last { "inf".to_string() } else { format!("{:.3}", lo + self.bin_width) };
            s.push_str(&format!("{lo:.3},{hi},{c}\n"));
        }
        s
    }
}

/// Mean last-layer self-attention entropy of retained and pruned positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySplit {
    pub retained_mean: f64,
    pub retained: usize,
    /// NaN when no position was pruned.
    pub pruned_mean: f64,
    pub pruned: usize,
}

pub fn entropy_split(stats: &[WordStats]) -> EntropySplit {
    let (mut rs, mut rn, mut ps, mut pn) = (0.0, 0, 0.0, 0);
    for s in stats {
        for (e, &open) in s.entropy.iter().zip(&s.gates.open_mask) {
            if open {
                rs += e;
                rn += 1;
            } else {
                ps += e;
                pn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    EntropySplit {
        retained_mean: mean(rs, rn),
        retained: rn,
        pruned_mean: mean(ps, pn),
        pruned: pn,
    }
}

/// Masses of the words each sentence's `keep` mask selects.
pub fn selected_masses(stats: &[WordStats], keep: &[Vec<bool>]) -> Vec<f64> {
    stats
        .iter()
        .zip(keep)
        .flat_map(|(s, k)| s.mass.iter().zip(k).filter(|(_, &k)| k).map(|(&m, _)| m))
        .collect()
}
