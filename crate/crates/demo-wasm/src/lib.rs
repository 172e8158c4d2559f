//! Browser bindings for three small interactive views: HardConcrete gate
//! sampling, count-softmax versus dense attention, and rule-based masks.
//! Every function returns a JSON string; errors come back as `{"error": ...}`.

use l0drop::hardconcrete::{expected_gate, prob_one, prob_zero, sample_gate, HardConcreteParams};
use l0drop::l0drop::GateSet;
use l0drop::numcore::{RngState, Tensor};
use l0drop::patterns::{mask_sentence, FrequencyTable, SparsityPattern};
use l0drop::sparse_decode::compact;
use l0drop::transformer::{attend_one, mat_mat, CrossMemory};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<S: Serialize>(r: Result<S, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}")),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Serialize)]
pub struct GateView {
    pub prob_zero: f64,
    pub prob_one: f64,
    pub expected_gate: f64,
    pub mc_zero: f64,
    pub mc_one: f64,
    pub mc_mean: f64,
    /// Counts of strictly fractional samples in equal bins over (0, 1).
    pub histogram: Vec<usize>,
}

pub fn gate_view(log_alpha: f64, beta: f64, eps: f64, samples: usize, bins: usize, seed: u64) -> Result<GateView, String> {
    let params = HardConcreteParams { beta, eps };
    params.validate().map_err(|e| e.to_string())?;
    if samples == 0 || bins == 0 {
        return Err("samples and bins must be positive".into());
    }
    let mut rng = RngState::new(seed);
    let (mut zero, mut one, mut sum) = (0usize, 0usize, 0.0);
    let mut histogram = vec![0; bins];
    for _ in 0..samples {
        let g = sample_gate(log_alpha, &params, rng.uniform_open()).map_err(|e| e.to_string())?.g;
        sum += g;
        if g == 0.0 {
            zero += 1;
        } else if g == 1.0 {
            one += 1;
        } else {
            histogram[((g * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let n = samples as f64;
    Ok(GateView {
        prob_zero: prob_zero(log_alpha, &params),
        prob_one: prob_one(log_alpha, &params),
        expected_gate: expected_gate(log_alpha, &params),
        mc_zero: zero as f64 / n,
        mc_one: one as f64 / n,
        mc_mean: sum / n,
        histogram,
    })
}

/// Closed-form and sampled HardConcrete gate statistics.
#[wasm_bindgen]
pub fn hardconcrete_explorer(log_alpha: f64, beta: f64, eps: f64, samples: usize, seed: u64) -> String {
    to_json(gate_view(log_alpha, beta, eps, samples, 40, seed))
}

#[derive(Serialize)]
pub struct AttentionView {
    pub gates: Vec<f64>,
    /// Head-averaged attention weight per source position.
    pub dense_weights: Vec<f64>,
    pub sparse_weights: Vec<f64>,
    pub max_output_diff: f64,
    pub dense_rows: usize,
    pub sparse_rows: usize,
}

pub fn attention_view(n: usize, d: usize, heads: usize, sparsity: f64, seed: u64) -> Result<AttentionView, String> {
    if n == 0 || heads == 0 || d == 0 || d % heads != 0 {
        return Err(format!("need N > 0 and d divisible by heads (d={d}, heads={heads})"));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err("sparsity must lie in [0, 1)".into());
    }
    let mut rng = RngState::new(seed);
    let mut random = |rows: usize, cols: usize, scale: f64| {
        let v = (0..rows * cols).map(|_| rng.uniform_range(-scale, scale)).collect();
        Tensor::new(&[rows, cols], v).expect("shape")
    };
    let x = random(n, d, 1.0);
    let w = (3.0 / d as f64).sqrt();
    let (wk, wv) = (random(d, d, w), random(d, d, w));
    let q: Vec<f64> = random(1, d, 2.0).data().to_vec();
    // Pruned positions get gate 0, the rest a fractional gate in (0.3, 1].
    let pruned = ((sparsity * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut gates = vec![0.0; n];
    for &i in &order[pruned..] {
        gates[i] = 0.3 + 0.7 * rng.uniform_open();
    }
    let set = GateSet {
        log_alphas: vec![0.0; n],
        open_mask: gates.iter().map(|&g| g > 0.0).collect(),
        pad_mask: vec![false; n],
        gates: gates.clone(),
    };

    let mut gated = x.clone();
    for (i, g) in gates.iter().enumerate() {
        gated.row_mut(i).iter_mut().for_each(|v| *v *= g);
    }
    let keys = mat_mat(gated.data(), n, &wk);
    let values = mat_mat(gated.data(), n, &wv);
    let mut dense_out = vec![0.0; d];
    let mut dense_w = Vec::new();
    attend_one(&q, &keys, &values, n, heads, None, &mut dense_out, Some(&mut dense_w)).map_err(|e| e.to_string())?;

    let mut mem = compact(&x, &set).map_err(|e| e.to_string())?;
    mem.push_layer(&wk, &wv, heads).map_err(|e| e.to_string())?;
    let mut sparse_out = vec![0.0; d];
    let mut sparse_w = Vec::new();
    mem.attend(0, &q, &mut sparse_out, Some(&mut sparse_w)).map_err(|e| e.to_string())?;

    let average = |w: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..heads).map(|h| w[h * n + i]).sum::<f64>() / heads as f64)
            .collect()
    };
    Ok(AttentionView {
        gates,
        dense_weights: average(&dense_w),
        sparse_weights: average(&sparse_w),
        max_output_diff: dense_out
            .iter()
            .zip(&sparse_out)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())),
        dense_rows: mem.source_len(),
        sparse_rows: mem.attended_rows(),
    })
}

/// Dense-with-zeros attention next to the compacted count-softmax form on a
/// random source of length `n`.
#[wasm_bindgen]
pub fn count_softmax_compare(n: usize, d: usize, heads: usize, sparsity: f64, seed: u64) -> String {
    to_json(attention_view(n, d, heads, sparsity, seed))
}

#[derive(Serialize)]
pub struct MaskView {
    pub sentences: Vec<Vec<(String, bool)>>,
    pub sparsity: f64,
    pub dropped_types: Vec<String>,
}

/// `pattern` is one of `group`, `freq`, `inv-freq`, `tag`. For `tag`, each
/// token is written `word/TAG` and `drop_tags` lists the tags to drop.
pub fn mask_view(corpus: &str, pattern: &str, coverage: f64, drop_tags: &str) -> Result<MaskView, String> {
    let lines: Vec<Vec<String>> = corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if lines.is_empty() {
        return Err("enter at least one sentence".into());
    }
    let split = |t: &str| -> (String, String) {
        match t.rsplit_once('/') {
            Some((w, tag)) if !w.is_empty() => (w.to_string(), tag.to_string()),
            _ => (t.to_string(), String::new()),
        }
    };
    let words: Vec<Vec<String>> = lines.iter().map(|l| l.iter().map(|t| split(t).0).collect()).collect();
    let tags: Vec<Vec<String>> = lines.iter().map(|l| l.iter().map(|t| split(t).1).collect()).collect();
    let table = FrequencyTable::from_sentences(&words);
    let p = match pattern {
        "group" => SparsityPattern::Group,
        "freq" => SparsityPattern::freq(&table, coverage).map_err(|e| e.to_string())?,
        "inv-freq" => SparsityPattern::inv_freq(&table, coverage).map_err(|e| e.to_string())?,
        "tag" => SparsityPattern::tag(&drop_tags.split([',', ' ']).filter(|s| !s.is_empty()).collect::<Vec<_>>()),
        other => return Err(format!("unknown pattern {other:?}")),
    };
    let dropped_types = match &p {
        SparsityPattern::Freq { drop, .. } | SparsityPattern::InvFreq { drop, .. } => drop.iter().cloned().collect(),
        _ => Vec::new(),
    };
    let (mut dropped, mut total) = (0usize, 0usize);
    let mut sentences = Vec::with_capacity(words.len());
    for (w, t) in words.iter().zip(&tags) {
        let keep = mask_sentence(&p, w, Some(t)).map_err(|e| e.to_string())?;
        dropped += keep.iter().filter(|&&k| !k).count();
        total += keep.len();
        sentences.push(w.iter().cloned().zip(keep).collect());
    }
    Ok(MaskView {
        sentences,
        sparsity: dropped as f64 / total as f64,
        dropped_types,
    })
}

/// Keep/drop masks of a rule-based pattern over a small corpus.
#[wasm_bindgen]
pub fn pattern_masks(corpus: &str, pattern: &str, coverage: f64, drop_tags: &str) -> String {
    to_json(mask_view(corpus, pattern, coverage, drop_tags))
}
