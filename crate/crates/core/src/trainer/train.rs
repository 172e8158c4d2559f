use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::l0drop::{GateMode, GateSet};
use crate::numcore::{Graph, Real, RngState, Tensor, Var};
use crate::transformer::{Checkpoint, Forward, ModelParams};

use super::config::{TrainConfig, TrainMode};
use super::data::Corpus;
use super::optim::{clip_global_norm, lambda_schedule, lr_schedule, Adam};

/// Scalar summary of one batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    /// Mean per-sentence joint loss.
    pub loss: f64,
    /// Mean per-sentence label-smoothed NLL.
    pub mle: f64,
    /// Mean per-sentence expected L0 (0 when gates are not penalized).
    pub l0: f64,
    pub sentences: usize,
    pub positions: usize,
    pub closed: usize,
}

impl BatchStats {
    pub fn sparsity(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.closed as f64 / self.positions as f64
        }
    }
}

/// Builds the batch objective on `g`: mean over sentences of
/// `NLL + lambda · expected L0`.
pub fn joint_loss<'m, T: Real>(
    g: &mut Graph<T>,
    fwd: &Forward<T>,
    corpus: &Corpus,
    batch: &[usize],
    mode: &dyn Fn(usize) -> GateMode<'m>,
    lambda: f64,
    rng: &mut RngState,
) -> Result<(Var, BatchStats)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total: Option<Var> = None;
    let mut stats = BatchStats {
        loss: 0.0,
        mle: 0.0,
        l0: 0.0,
        sentences: batch.len(),
        positions: 0,
        closed: 0,
    };
    for &i in batch {
        let sl = fwd.sentence_loss(g, &corpus.src[i], &corpus.tgt[i], mode(i), lambda, rng)?;
        stats.mle += g.value(sl.nll).data()[0].as_f64();
        if let Some(p) = sl.penalty {
            stats.l0 += g.value(p).data()[0].as_f64();
        }
        if let Some(top) = sl.gates.last() {
            stats.positions += top.set.len();
            stats.closed += top.set.closed_count();
        }
        total = Some(match total {
            None => sl.total,
            Some(acc) => g.add(acc, sl.total)?,
        });
    }
    let n = batch.len() as f64;
    let loss = g.scale(total.expect("non-empty batch"), T::lit(1.0 / n))?;
    stats.mle /= n;
    stats.l0 /= n;
    stats.loss = g.value(loss).data()[0].as_f64();
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss {} (mle {}, l0 {}, lambda {lambda})",
            stats.loss, stats.mle, stats.l0
        )));
    }
    Ok((loss, stats))
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub mle: f64,
    pub l0: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Fraction of closed top-layer gates among the batches since the last record.
    pub sparsity: f64,
    pub elapsed_secs: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} mle={:.6} l0={:.4} lambda={:.4} lr={:.3e} sparsity={:.4} elapsed={:.2}s",
            self.step, self.loss, self.mle, self.l0, self.lambda, self.lr, self.sparsity, self.elapsed_secs
        )
    }
}

const STATE_PREFIX: &str = "train.";

impl TrainConfig {
    /// The configuration a checkpoint was trained with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut kv = ck.model_config()?.to_kv();
        for (k, v) in &ck.meta {
            if let Some(k) = k.strip_prefix(STATE_PREFIX) {
                kv.insert(k.to_string(), v.clone());
            }
        }
        Self::from_kv(&kv)
    }
}

/// Training state: parameters, optimizer moments, step counter, random
/// stream and position in the shuffled data.
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub rng: RngState,
    pub epoch: u64,
    pub batch_pos: usize,
    /// Fixed per-sentence gates for pattern finetuning.
    pub fixed_gates: Option<Vec<Vec<f64>>>,
    /// Wall time spent training in this process; not persisted, so
    /// checkpoints depend only on inputs and seed.
    elapsed: f64,
}

impl<T: Real> Trainer<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(config.seed);
        let params = ModelParams::init(&config.model, &mut rng)?;
        Self::with_params(config, params)
    }

    /// Continues from existing parameters (finetuning). Step count, moments
    /// and schedules start over. The model's gate placement is replaced by
    /// the config's when they differ.
    pub fn with_params(mut config: TrainConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let params = if params.config.gate_placement != config.model.gate_placement {
            params.with_gate_placement(config.model.gate_placement.clone())?
        } else {
            params
        };
        config.model = params.config.clone();
        let shapes: Vec<&[usize]> = params.tensors().iter().map(Tensor::shape).collect();
        let adam = Adam::new(&shapes, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let rng = RngState::new(config.seed ^ 0x5EED_0F_7EA1);
        Ok(Self {
            config,
            params,
            adam,
            step: 0,
            rng,
            epoch: 0,
            batch_pos: 0,
            fixed_gates: None,
            elapsed: 0.0,
        })
    }

    /// Supplies one gate vector per training sentence for pattern mode.
    pub fn with_fixed_gates(mut self, corpus: &Corpus, gates: &[GateSet]) -> Result<Self> {
        if gates.len() != corpus.len() {
            return Err(Error::Data(format!("{} gate sets for {} sentences", gates.len(), corpus.len())));
        }
        for (i, (gs, s)) in gates.iter().zip(&corpus.src).enumerate() {
            if gs.len() != s.len() {
                return Err(Error::Data(format!("sentence {i}: {} gates for {} tokens", gs.len(), s.len())));
            }
        }
        self.fixed_gates = Some(gates.iter().map(|g| g.gates.clone()).collect());
        Ok(self)
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let v = corpus.vocab.len();
        let m = &self.params.config;
        if v > m.src_vocab || v > m.tgt_vocab {
            return Err(Error::Data(format!(
                "corpus vocabulary of {v} exceeds model vocabulary ({}, {})",
                m.src_vocab, m.tgt_vocab
            )));
        }
        if self.config.mode == TrainMode::FinetunePattern && self.fixed_gates.is_none() {
            return Err(Error::Config("pattern finetuning needs fixed gates".into()));
        }
        Ok(())
    }

    fn next_batch(&mut self, corpus: &Corpus) -> Vec<usize> {
        loop {
            let batches = corpus.batches(self.config.batch_tokens, self.config.seed, self.epoch);
            if let Some(b) = batches.get(self.batch_pos) {
                self.batch_pos += 1;
                return b.clone();
            }
            self.epoch += 1;
            self.batch_pos = 0;
        }
    }

    pub fn lambda_now(&self) -> f64 {
        if self.config.mode.gated() {
            lambda_schedule(self.step, self.config.lambda, self.config.lambda_warmup_steps)
        } else {
            0.0
        }
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<(BatchStats, f64)> {
        self.check_corpus(corpus)?;
        let start = Instant::now();
        let batch = self.next_batch(corpus);
        let lambda = self.lambda_now();
        let mode = self.config.mode;
        let fixed = self.fixed_gates.as_deref();
        let gate_mode = |i: usize| match mode {
            TrainMode::Pretrain => GateMode::Disabled,
            TrainMode::FinetuneL0drop | TrainMode::ScratchL0drop => GateMode::Sampled,
            TrainMode::FinetunePattern => GateMode::Fixed(&fixed.expect("checked")[i]),
        };
        let mut g = Graph::new(true);
        let fwd = Forward::new(&mut g, &self.params);
        let (loss, stats) = joint_loss(&mut g, &fwd, corpus, &batch, &gate_mode, lambda, &mut self.rng)?;
        let grads = g.backward(loss)?;
        let mut per_param: Vec<Option<Vec<T>>> = fwd.vars().iter().map(|&v| grads.get(v).map(<[T]>::to_vec)).collect();
        drop(g);
        clip_global_norm(&mut per_param, self.config.clip_norm);
        self.step += 1;
        let lr = lr_schedule(self.step, self.params.config.d, self.config.warmup) * self.config.lr_scale;
        self.adam.step(self.params.tensors_mut(), &per_param, lr);
        self.elapsed += start.elapsed().as_secs_f64();
        Ok((stats, lr))
    }

    /// Runs `steps` updates, emitting one record every `log_every` steps.
    pub fn train(&mut self, corpus: &Corpus, steps: u64, mut on_log: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
        let mut records = Vec::new();
        let (mut loss, mut mle, mut l0, mut n) = (0.0, 0.0, 0.0, 0u64);
        let (mut pos, mut closed) = (0usize, 0usize);
        for _ in 0..steps {
            let lambda = self.lambda_now();
            let (s, lr) = self.train_step(corpus)?;
            loss += s.loss;
            mle += s.mle;
            l0 += s.l0;
            n += 1;
            pos += s.positions;
            closed += s.closed;
            if self.step % self.config.log_every == 0 {
                let k = n as f64;
                let rec = LogRecord {
                    step: self.step,
                    loss: loss / k,
                    mle: mle / k,
                    l0: l0 / k,
                    lambda,
                    lr,
                    sparsity: if pos == 0 { 0.0 } else { closed as f64 / pos as f64 },
                    elapsed_secs: self.elapsed,
                };
                on_log(&rec);
                records.push(rec);
                (loss, mle, l0, n, pos, closed) = (0.0, 0.0, 0.0, 0, 0, 0);
            }
        }
        Ok(records)
    }

    /// Full state: model, moments, counters and random stream.
    pub fn checkpoint(&self, vocab_fingerprint: &str) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.put_model(&self.params);
        for (k, v) in self.config.to_kv() {
            if !crate::transformer::ModelConfig::is_key(&k) {
                ck.meta.insert(format!("{STATE_PREFIX}{k}"), v);
            }
        }
        let put = |ck: &mut Checkpoint, k: &str, v: String| {
            ck.meta.insert(format!("state.{k}"), v);
        };
        put(&mut ck, "step", self.step.to_string());
        put(&mut ck, "epoch", self.epoch.to_string());
        put(&mut ck, "batch_pos", self.batch_pos.to_string());
        put(&mut ck, "rng", self.rng.encode());
        put(
            &mut ck,
            "adam_t",
            self.adam.t.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        ck.meta.insert("vocab.fingerprint".into(), vocab_fingerprint.to_string());
        for (i, name) in self.params.names().iter().enumerate() {
            ck.push(&format!("adam.m.{name}"), &self.adam.m[i]);
            ck.push(&format!("adam.v.{name}"), &self.adam.v[i]);
        }
        ck
    }

    /// Restores a state written by [`Trainer::checkpoint`]. Fixed gates are
    /// not part of the state and must be supplied again.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_checkpoint(ck)?;
        let params = ck.model::<T>()?;
        let mut t = Self::with_params(config, params)?;
        let state = |k: &str| -> Result<&str> {
            ck.meta
                .get(&format!("state.{k}"))
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks training state {k:?}")))
        };
        let num = |k: &str| -> Result<u64> {
            state(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad training state {k:?}")))
        };
        t.step = num("step")?;
        t.epoch = num("epoch")?;
        t.batch_pos = num("batch_pos")? as usize;
        t.rng = RngState::decode(state("rng")?)?;
        let steps: Vec<u64> = state("adam_t")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Format("bad optimizer step list".into())))
            .collect::<Result<_>>()?;
        if steps.len() != t.params.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        t.adam.t = steps;
        for i in 0..t.params.len() {
            let name = t.params.name(i).to_string();
            for (prefix, dst) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let st = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor {prefix}{name}")))?;
                *dst = st.to_tensor::<T>()?;
            }
        }
        Ok(t)
    }

    /// Checks a checkpoint's stored vocabulary fingerprint against `expected`.
    pub fn check_vocab(ck: &Checkpoint, expected: &str) -> Result<()> {
        match ck.meta.get("vocab.fingerprint") {
            Some(f) if f == expected => Ok(()),
            Some(f) => Err(Error::Data(format!(
                "vocabulary mismatch: checkpoint {f}, corpus {expected}"
            ))),
            None => Ok(()),
        }
    }
}
