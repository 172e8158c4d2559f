//! Greedy and beam-search decoding on top of the incremental engine.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numcore::Real;

use super::infer::{log_softmax, CrossMemory, DecoderCache, Engine};
use super::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Exponent of the length penalty; 0 ranks by raw log-probability.
    pub length_penalty: f64,
    /// Hard cap on generated tokens (the end marker included).
    pub max_steps: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 4,
            length_penalty: 0.6,
            max_steps: 64,
        }
    }
}

impl DecodeOptions {
    /// Step cap for a source of length `n`: `2n + 10`, bounded by the model's
    /// position table.
    pub fn for_source(beam: usize, length_penalty: f64, n: usize, max_len: usize) -> Self {
        Self {
            beam,
            length_penalty,
            max_steps: (2 * n + 10).min(max_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without begin/end markers.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

/// `((5 + len) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<T: Real>(engine: &Engine<T>, memory: &dyn CrossMemory<T>, max_steps: usize) -> Result<Hypothesis> {
    let mut cache = DecoderCache::new(engine.params.config.layers);
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = BOS;
    for _ in 0..max_steps {
        let lp = log_softmax(&engine.step(&mut cache, prev, memory, None)?);
        let next = argmax(&lp);
        log_prob += lp[next];
        if next == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score: log_prob,
                finished: true,
            });
        }
        tokens.push(next);
        prev = next;
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob,
        finished: false,
    })
}

struct Live<T: Real> {
    tokens: Vec<usize>,
    log_prob: f64,
    cache: DecoderCache<T>,
}

/// Beam search where the best expansions survive each step; those ending in
/// the end marker retire and keep their slot, so the live set only shrinks.
/// With `beam = 1` this is exactly greedy decoding.
pub fn beam_search<T: Real>(engine: &Engine<T>, memory: &dyn CrossMemory<T>, opts: &DecodeOptions) -> Result<Hypothesis> {
    if opts.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let mut live = vec![Live {
        tokens: vec![],
        log_prob: 0.0,
        cache: DecoderCache::new(engine.params.config.layers),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let score = |h_len: usize, lp: f64| lp / length_penalty(h_len, opts.length_penalty);

    for _ in 0..opts.max_steps {
        if live.is_empty() {
            break;
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter_mut().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let lp = log_softmax(&engine.step(&mut h.cache, prev, memory, None)?);
            cands.extend(lp.iter().enumerate().map(|(tok, &l)| (h.log_prob + l, hi, tok)));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        // The best `beam - retired` expansions survive.
        let keep = opts.beam - finished.len();
        let mut next = Vec::new();
        let mut retired = Vec::new();
        for &(lp, hi, tok) in cands.iter().take(keep) {
            if tok == EOS {
                let tokens = live[hi].tokens.clone();
                retired.push(Hypothesis {
                    score: score(tokens.len() + 1, lp),
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next.push(Live {
                    tokens,
                    log_prob: lp,
                    cache: live[hi].cache.clone(),
                });
            }
        }
        finished.extend(retired);
        live = next;
    }
    finished.extend(live.into_iter().map(|h| Hypothesis {
        score: score(h.tokens.len(), h.log_prob),
        tokens: h.tokens,
        log_prob: h.log_prob,
        finished: false,
    }));
    finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}
