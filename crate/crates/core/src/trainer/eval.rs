use crate::error::Result;
use crate::l0drop::{sparsity_rate, GateSet};
use crate::numcore::Real;
use crate::sparse_decode::DecodeMemory;
use crate::transformer::{beam_search, DecodeOptions, Engine, EvalGates, ModelParams};

use super::config::TrainConfig;
use super::data::Corpus;
use super::metrics::{ngram_overlap, token_accuracy};
use super::train::{LogRecord, Trainer};

/// Where evaluation gates come from.
#[derive(Debug, Clone, Copy)]
pub enum GateSource<'a> {
    Disabled,
    /// Deterministic expected gates of the model's own predictors.
    Expected,
    /// One externally built gate set per sentence (rule-based patterns).
    Fixed(&'a [GateSet]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub ngram_overlap: f64,
    /// Pruned fraction of all source positions.
    pub sparsity: f64,
    pub hypotheses: Vec<Vec<usize>>,
    pub gates: Vec<GateSet>,
    /// Sentences decoded densely because every position was pruned.
    pub dense_fallbacks: usize,
}

/// Decodes every source sentence and scores the output against the targets.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    corpus: &Corpus,
    source: GateSource,
    beam: usize,
    length_penalty: f64,
    sparse: bool,
) -> Result<EvalReport> {
    let engine = Engine::new(params);
    let mut hypotheses = Vec::with_capacity(corpus.len());
    let mut gates = Vec::with_capacity(corpus.len());
    let mut dense_fallbacks = 0;
    for (i, src) in corpus.src.iter().enumerate() {
        let eg = match source {
            GateSource::Disabled => EvalGates::Disabled,
            GateSource::Expected => EvalGates::Expected,
            GateSource::Fixed(sets) => EvalGates::Fixed(&sets[i]),
        };
        let enc = engine.encode(src, eg, false)?;
        let mem = DecodeMemory::build(params, &enc, sparse)?;
        if sparse && !mem.is_sparse() {
            dense_fallbacks += 1;
        }
        let opts = DecodeOptions::for_source(beam, length_penalty, src.len(), params.config.max_len);
        hypotheses.push(beam_search(&engine, mem.as_cross(), &opts)?.tokens);
        gates.push(enc.gates);
    }
    Ok(EvalReport {
        token_accuracy: token_accuracy(&corpus.tgt, &hypotheses),
        ngram_overlap: ngram_overlap(&corpus.tgt, &hypotheses),
        sparsity: sparsity_rate(&gates)?,
        hypotheses,
        gates,
        dense_fallbacks,
    })
}

/// One point of a λ sweep.
pub struct FinetuneOutcome<T: Real> {
    pub lambda: f64,
    pub params: ModelParams<T>,
    pub report: EvalReport,
    pub log: Vec<LogRecord>,
}

/// Finetunes a copy of `baseline` with gates for every λ in `lambdas`
/// (same seed and data order for each), then evaluates with expected gates
/// and sparse decoding.
pub fn finetune_l0drop<T: Real>(
    baseline: &ModelParams<T>,
    config: &TrainConfig,
    train: &Corpus,
    eval: &Corpus,
    lambdas: &[f64],
    beam: usize,
    mut on_log: impl FnMut(f64, &LogRecord),
) -> Result<Vec<FinetuneOutcome<T>>> {
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.lambda = lambda;
        if !cfg.mode.gated() {
            cfg.mode = super::TrainMode::FinetuneL0drop;
        }
        let mut t = Trainer::with_params(cfg, baseline.clone())?;
        let log = t.train(train, t.config.steps, |r| on_log(lambda, r))?;
        let report = evaluate(&t.params, eval, GateSource::Expected, beam, 0.6, true)?;
        out.push(FinetuneOutcome {
            lambda,
            params: t.params,
            report,
            log,
        });
    }
    Ok(out)
}
