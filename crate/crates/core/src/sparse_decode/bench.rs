use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::l0drop::GateSet;
use crate::numcore::{RngState, Tensor};
use crate::transformer::{attend_one, mat_mat};

use super::compact;

/// One benchmark configuration. Times are per decoded step and include the
/// once-per-sentence memory construction amortized over the `m` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub n_kept: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub dense_ns_per_step: f64,
    pub sparse_ns_per_step: f64,
    pub speedup: f64,
}

impl fmt::Display for BenchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} N'={} M={} d={} heads={} dense_ns_per_step={:.1} sparse_ns_per_step={:.1} speedup={:.3}",
            self.n, self.n_kept, self.m, self.d, self.heads, self.dense_ns_per_step, self.sparse_ns_per_step, self.speedup
        )
    }
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "N,N',M,d,heads,dense_ns_per_step,sparse_ns_per_step,speedup";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.1},{:.1},{:.4}",
            self.n, self.n_kept, self.m, self.d, self.heads, self.dense_ns_per_step, self.sparse_ns_per_step, self.speedup
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| (rng.uniform_range(-1.0, 1.0) * scale) as f32).collect())
        .expect("positive dims")
}

/// Cross-attention cost of decoding `m` steps against a source of length
/// `n` with `round(sparsity·n)` pruned positions (at least one kept), dense
/// versus compacted, in 32-bit arithmetic. Reports medians over
/// `repetitions` runs.
pub fn bench_cross_attention(
    n: usize,
    sparsity: f64,
    m: usize,
    d: usize,
    heads: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchRecord> {
    if n == 0 || m == 0 || d == 0 || heads == 0 || d % heads != 0 || repetitions == 0 {
        return Err(Error::Config(format!(
            "invalid benchmark shape N={n} M={m} d={d} heads={heads} reps={repetitions}"
        )));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    let mut rng = RngState::new(seed);
    let x = random(&[n, d], 1.0, &mut rng);
    let w_scale = (1.0 / d as f64).sqrt();
    let wq = random(&[d, d], w_scale, &mut rng);
    let wk = random(&[d, d], w_scale, &mut rng);
    let wv = random(&[d, d], w_scale, &mut rng);
    let wo = random(&[d, d], w_scale, &mut rng);
    let states = random(&[m, d], 1.0, &mut rng);

    let pruned = ((sparsity * n as f64).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut keep = vec![true; n];
    for &i in &order[..pruned] {
        keep[i] = false;
    }
    let gates = GateSet::from_binary(&keep);
    // Dense memory holds the gated sequence: zero rows where pruned.
    let mut gated = x.clone();
    for (i, &k) in keep.iter().enumerate() {
        if !k {
            gated.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let steps = |keys: &[f32], values: &[f32], rows: usize, counts: Option<&[f32]>| -> Result<()> {
        let mut attn = vec![0f32; d];
        for s in 0..m {
            let q = mat_mat(states.row(s), 1, &wq);
            attend_one(&q, keys, values, rows, heads, counts, &mut attn, None)?;
            black_box(mat_mat(&attn, 1, &wo));
        }
        Ok(())
    };

    let mut dense_times = Vec::with_capacity(repetitions);
    let mut sparse_times = Vec::with_capacity(repetitions);
    let mut n_kept = 0;
    for _ in 0..repetitions {
        let t = Instant::now();
        let k = mat_mat(gated.data(), n, &wk);
        let v = mat_mat(gated.data(), n, &wv);
        steps(&k, &v, n, None)?;
        dense_times.push(t.elapsed().as_nanos() as f64 / m as f64);

        let t = Instant::now();
        let mut mem = compact(black_box(&x), &gates)?;
        mem.push_layer(&wk, &wv, heads)?;
        let rows = mem.x_bar().rows();
        steps(&mem.keys[0], &mem.values[0], rows, Some(mem.counts()))?;
        sparse_times.push(t.elapsed().as_nanos() as f64 / m as f64);
        n_kept = mem.retained();
    }
    let dense = median(dense_times);
    let sparse = median(sparse_times);
    Ok(BenchRecord {
        n,
        n_kept,
        m,
        d,
        heads,
        dense_ns_per_step: dense,
        sparse_ns_per_step: sparse,
        speedup: dense / sparse,
    })
}
