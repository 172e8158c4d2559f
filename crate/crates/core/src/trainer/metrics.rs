use std::collections::HashMap;

/// Position-wise matches over `max(|ref|, |hyp|)` summed across the corpus,
/// so both wrong and missing or surplus tokens count as errors.
pub fn token_accuracy(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        hit += r.iter().zip(h).filter(|(a, b)| a == b).count();
        total += r.len().max(h.len());
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

fn ngrams(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus n-gram overlap: geometric mean of clipped 1–4-gram precisions
/// times a brevity penalty, in [0, 1].
pub fn ngram_overlap(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (r, h) in refs.iter().zip(hyps) {
            let rg = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matched += c.min(rg.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        if total == 0 || matched == 0 {
            return 0.0;
        }
        log_p += (matched as f64 / total as f64).ln() / 4.0;
    }
    let r_len: usize = refs.iter().map(Vec::len).sum();
    let h_len: usize = hyps.iter().map(Vec::len).sum();
    let bp = if h_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / h_len as f64).exp()
    };
    bp * log_p.exp()
}
