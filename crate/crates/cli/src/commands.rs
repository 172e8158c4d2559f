use std::path::Path;
use std::time::Instant;

use l0drop::analysis::{analyze_sentence, entropy_split, selected_masses, MassSummary, WordStats};
use l0drop::kv;
use l0drop::l0drop::{sparsity_rate, GatePlacement, GateSet};
use l0drop::numcore::Real;
use l0drop::patterns::{mask_gates, parse_tag_file, SparsityPattern};
use l0drop::sparse_decode::{bench_cross_attention, BenchRecord, DecodeMemory};
use l0drop::trainer::{
    make_toy_corpus, ngram_overlap, token_accuracy, Corpus, ToySpec, ToyTask, TrainConfig, TrainMode, Trainer, Vocab,
};
use l0drop::transformer::{beam_search, Checkpoint, DecodeOptions, Engine, EvalGates, ModelConfig, ModelParams};

use crate::dataset::{self, detokenize, tokenize};
use crate::error::{read, write, CliError, CliResult};
use crate::manifest::{manifest_path, RunManifest};
use crate::{
    Analysis, AnalyzeArgs, BenchArgs, DecodeArgs, FinetuneArgs, GateChoice, PatternArgs, PatternKind, Precision,
    PrepareArgs, TrainArgs,
};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Verify => "verify",
        Precision::Fast => "fast",
    }
}

pub fn prepare(a: &PrepareArgs) -> CliResult<()> {
    let mut m = RunManifest::new("prepare", Some(a.seed));
    let mut corpus = match (&a.toy, &a.src, &a.tgt) {
        (Some(task), None, None) => {
            if a.vocab.is_some() {
                return Err(usage("--vocab applies to text input only"));
            }
            let spec = ToySpec {
                task: ToyTask::parse(task)?,
                vocab: a.toy_vocab,
                min_len: a.min_len,
                max_len: a.max_len,
                size: a.size,
                seed: a.seed,
            };
            m.set("toy.task", task);
            m.set("toy.vocab", a.toy_vocab);
            m.set("toy.min_len", a.min_len);
            m.set("toy.max_len", a.max_len);
            m.set("toy.size", a.size);
            make_toy_corpus(&spec)?
        }
        (None, Some(src), Some(tgt)) => {
            m.input("src", src);
            m.input("tgt", tgt);
            let (s, t) = (read(src)?, read(tgt)?);
            match &a.vocab {
                None => Corpus::from_text(&s, &t)?,
                Some(v) => {
                    m.input("vocab", v);
                    let vocab = dataset::load_vocab(v)?;
                    let (s, t) = (tokenize(&s), tokenize(&t));
                    if s.is_empty() {
                        return Err(l0drop::Error::Data("empty input corpus".into()).into());
                    }
                    let src = s.iter().map(|l| vocab.encode(l)).collect();
                    let tgt = t.iter().map(|l| vocab.encode(l)).collect();
                    Corpus::new(vocab, src, tgt)?
                }
            }
        }
        _ => return Err(usage("give either --toy or both --src and --tgt")),
    };
    if let Some(tags) = &a.tags_file {
        m.input("tags", tags);
        corpus = corpus.with_tags(parse_tag_file(&read(tags)?))?;
    }
    for (name, bytes) in dataset::save(&a.out, &corpus)? {
        m.output(name, &a.out.join(name), &bytes);
    }
    m.set("sentences", corpus.len());
    m.set("vocab_size", corpus.vocab.len());
    eprintln!("prepared {} sentence pairs, vocabulary {}", corpus.len(), corpus.vocab.len());
    m.save(&manifest_path(&a.out, true))
}

/// A pattern plus the tag sequences it needs, if any.
struct PatternSpec {
    pattern: SparsityPattern,
    tags: Option<Vec<Vec<String>>>,
}

impl PatternSpec {
    fn from_args(
        a: &PatternArgs,
        default_freq: Option<&Path>,
        default_tags: Option<&Vec<Vec<String>>>,
        m: &mut RunManifest,
    ) -> CliResult<Option<Self>> {
        let Some(kind) = a.pattern else {
            if a.coverage.is_some() || !a.drop_tags.is_empty() {
                return Err(usage("--coverage and --drop-tags need --pattern"));
            }
            return Ok(None);
        };
        let mut tags = None;
        let pattern = match kind {
            PatternKind::Group => SparsityPattern::Group,
            PatternKind::Freq | PatternKind::InvFreq => {
                let coverage = a.coverage.ok_or_else(|| usage("frequency patterns need --coverage"))?;
                let path = a
                    .freq_table
                    .as_deref()
                    .or(default_freq)
                    .ok_or_else(|| usage("frequency patterns need --freq-table"))?;
                m.input("freq_table", path);
                m.set("coverage", coverage);
                let table = dataset::load_freq(path)?;
                if kind == PatternKind::Freq {
                    SparsityPattern::freq(&table, coverage)?
                } else {
                    SparsityPattern::inv_freq(&table, coverage)?
                }
            }
            PatternKind::Tag => {
                if a.drop_tags.is_empty() {
                    return Err(usage("the tag pattern needs --drop-tags"));
                }
                tags = match &a.tags_file {
                    Some(p) => {
                        m.input("tags", p);
                        Some(parse_tag_file(&read(p)?))
                    }
                    None => default_tags.cloned(),
                };
                if tags.is_none() {
                    return Err(usage("the tag pattern needs --tags-file"));
                }
                m.set("drop_tags", a.drop_tags.join(","));
                SparsityPattern::tag(&a.drop_tags)
            }
        };
        m.set("pattern", pattern.name());
        Ok(Some(Self { pattern, tags }))
    }

    fn gates(&self, sentences: &[Vec<String>]) -> CliResult<Vec<GateSet>> {
        if let Some(t) = &self.tags {
            if t.len() < sentences.len() {
                return Err(l0drop::Error::Data(format!("{} tag lines for {} sentences", t.len(), sentences.len())).into());
            }
        }
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| Ok(mask_gates(&self.pattern, s, self.tags.as_ref().map(|t| &t[i][..]))?))
            .collect()
    }
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String], allow_model: bool) -> CliResult<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        let k = k.trim();
        if !allow_model && ModelConfig::is_key(k) {
            return Err(usage(format!("model key {k:?} is fixed by the checkpoint")));
        }
        cfg.set(k, v.trim())?;
    }
    Ok(())
}

enum Start {
    Fresh,
    Resume(Checkpoint),
    From(Checkpoint),
}

struct TrainJob<'a> {
    cfg: TrainConfig,
    corpus: &'a Corpus,
    start: Start,
    fixed: Option<Vec<GateSet>>,
    target_steps: u64,
    out: &'a Path,
}

fn log_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    s.into()
}

fn run_training<T: Real>(job: TrainJob, m: &mut RunManifest) -> CliResult<()> {
    let mut t = match job.start {
        Start::Fresh => Trainer::<T>::new(job.cfg)?,
        Start::Resume(ck) => Trainer::<T>::resume(&ck)?,
        Start::From(ck) => Trainer::<T>::with_params(job.cfg, ck.model::<T>()?)?,
    };
    if let Some(f) = &job.fixed {
        t = t.with_fixed_gates(job.corpus, f)?;
    }
    t.config.steps = job.target_steps;
    m.config(&t.config.to_kv());
    let first = t.step;
    let mut log = String::from("step,loss,mle,l0,lambda,lr,sparsity\n");
    let started = Instant::now();
    t.train(job.corpus, job.target_steps.saturating_sub(t.step), |r| {
        eprintln!("{r}");
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6}\n",
            r.step, r.loss, r.mle, r.l0, r.lambda, r.lr, r.sparsity
        ));
    })?;
    m.time("train_secs", started.elapsed().as_secs_f64());
    m.set("steps.from", first);
    m.set("steps.to", t.step);
    let bytes = t.checkpoint(&job.corpus.vocab.fingerprint()).to_bytes();
    write(job.out, &bytes)?;
    m.output("checkpoint", job.out, &bytes);
    let lp = log_path(job.out);
    write(&lp, &log)?;
    m.output("log", &lp, log.as_bytes());
    eprintln!("wrote {} after step {}", job.out.display(), t.step);
    Ok(())
}

fn dispatch_training(p: Precision, job: TrainJob, m: &mut RunManifest) -> CliResult<()> {
    m.set("precision", precision_name(p));
    match p {
        Precision::Verify => run_training::<f64>(job, m),
        Precision::Fast => run_training::<f32>(job, m),
    }
}

fn source_sentences(corpus: &Corpus) -> Vec<Vec<String>> {
    (0..corpus.len()).map(|i| corpus.src_tokens(i)).collect()
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let corpus = dataset::load(&a.data)?;
    let mut m = RunManifest::new("train", None);
    m.input("data", &a.data);
    let (mut cfg, start) = match &a.resume {
        Some(p) => {
            m.input("resume", p);
            let ck = load_checkpoint(p)?;
            Trainer::<f64>::check_vocab(&ck, &corpus.vocab.fingerprint())?;
            (TrainConfig::from_checkpoint(&ck)?, Start::Resume(ck))
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => {
                    m.input("config", p);
                    TrainConfig::parse(&read(p)?)?
                }
                None => TrainConfig::default(),
            };
            apply_overrides(&mut cfg, &a.overrides, true)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(l) = a.lambda {
                cfg.lambda = l;
            }
            cfg.model.src_vocab = corpus.vocab.len();
            cfg.model.tgt_vocab = corpus.vocab.len();
            (cfg, Start::Fresh)
        }
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    m.set("seed", cfg.seed);
    let fixed = match PatternSpec::from_args(&a.pattern, Some(&a.data.join(dataset::FREQ)), corpus.tags.as_ref(), &mut m)? {
        Some(p) => Some(p.gates(&source_sentences(&corpus))?),
        None if cfg.mode == TrainMode::FinetunePattern => {
            return Err(usage("pattern training needs --pattern to rebuild its masks"))
        }
        None => None,
    };
    let job = TrainJob {
        target_steps: cfg.steps,
        cfg,
        corpus: &corpus,
        start,
        fixed,
        out: &a.out,
    };
    dispatch_training(a.mode, job, &mut m)?;
    m.save(&manifest_path(&a.out, false))
}

pub fn finetune(a: &FinetuneArgs) -> CliResult<()> {
    let corpus = dataset::load(&a.data)?;
    let mut m = RunManifest::new("finetune", None);
    m.input("data", &a.data);
    m.input("from", &a.from);
    let ck = load_checkpoint(&a.from)?;
    Trainer::<f64>::check_vocab(&ck, &corpus.vocab.fingerprint())?;
    let mut cfg = TrainConfig::from_checkpoint(&ck)?;
    if let Some(p) = &a.config {
        m.input("config", p);
        let entries: Vec<String> = kv::parse(&read(p)?)?.into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        apply_overrides(&mut cfg, &entries, false)?;
    }
    apply_overrides(&mut cfg, &a.overrides, false)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let pattern = PatternSpec::from_args(&a.pattern, Some(&a.data.join(dataset::FREQ)), corpus.tags.as_ref(), &mut m)?;
    let fixed = match &pattern {
        Some(p) => {
            if a.lambda.is_some() {
                return Err(usage("--lambda has no effect with a fixed pattern"));
            }
            cfg.mode = TrainMode::FinetunePattern;
            cfg.lambda = 0.0;
            Some(p.gates(&source_sentences(&corpus))?)
        }
        None => {
            cfg.mode = TrainMode::FinetuneL0drop;
            if let Some(l) = a.lambda {
                cfg.lambda = l;
            }
            None
        }
    };
    cfg.validate()?;
    m.set("seed", cfg.seed);
    let job = TrainJob {
        target_steps: cfg.steps,
        cfg,
        corpus: &corpus,
        start: Start::From(ck),
        fixed,
        out: &a.out,
    };
    dispatch_training(a.mode, job, &mut m)?;
    m.save(&manifest_path(&a.out, false))
}

/// Gate choice resolved against what the checkpoint was trained with.
enum Gating {
    Disabled,
    Expected,
    Fixed(Vec<GateSet>),
}

impl Gating {
    fn resolve(
        choice: GateChoice,
        pattern: Option<&PatternSpec>,
        ck: &Checkpoint,
        sentences: &[Vec<String>],
    ) -> CliResult<Self> {
        if let Some(p) = pattern {
            return Ok(Self::Fixed(p.gates(sentences)?));
        }
        let trained = TrainConfig::from_checkpoint(ck).ok().map(|c| c.mode);
        let placement = ck.model_config()?.gate_placement;
        match choice {
            GateChoice::Disabled => Ok(Self::Disabled),
            GateChoice::Expected if placement == GatePlacement::None => {
                Err(usage("this model has no gate predictor"))
            }
            GateChoice::Expected => Ok(Self::Expected),
            GateChoice::Auto => match trained {
                Some(TrainMode::FinetunePattern) => {
                    Err(usage("this model was finetuned with a fixed pattern; pass --pattern"))
                }
                Some(mode) if mode.gated() && placement != GatePlacement::None => Ok(Self::Expected),
                _ => Ok(Self::Disabled),
            },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Disabled => "disabled",
            Self::Expected => "expected",
            Self::Fixed(_) => "pattern",
        }
    }

    fn for_sentence(&self, i: usize) -> EvalGates<'_> {
        match self {
            Self::Disabled => EvalGates::Disabled,
            Self::Expected => EvalGates::Expected,
            Self::Fixed(sets) => EvalGates::Fixed(&sets[i]),
        }
    }
}

struct Decoded {
    hypotheses: Vec<Vec<usize>>,
    gates: Vec<GateSet>,
    dense_fallbacks: usize,
    secs: f64,
}

fn decode_all<T: Real>(
    params: &ModelParams<T>,
    src: &[Vec<usize>],
    gating: &Gating,
    beam: usize,
    length_penalty: f64,
    sparse: bool,
) -> CliResult<Decoded> {
    let engine = Engine::new(params);
    let started = Instant::now();
    let mut out = Decoded {
        hypotheses: Vec::with_capacity(src.len()),
        gates: Vec::with_capacity(src.len()),
        dense_fallbacks: 0,
        secs: 0.0,
    };
    for (i, s) in src.iter().enumerate() {
        let enc = engine.encode(s, gating.for_sentence(i), false)?;
        let mem = DecodeMemory::build(params, &enc, sparse)?;
        out.dense_fallbacks += usize::from(sparse && !mem.is_sparse());
        let opts = DecodeOptions::for_source(beam, length_penalty, s.len(), params.config.max_len);
        out.hypotheses.push(beam_search(&engine, mem.as_cross(), &opts)?.tokens);
        out.gates.push(enc.gates);
    }
    out.secs = started.elapsed().as_secs_f64();
    Ok(out)
}

fn decode_with(
    p: Precision,
    ck: &Checkpoint,
    src: &[Vec<usize>],
    gating: &Gating,
    beam: usize,
    lp: f64,
    sparse: bool,
) -> CliResult<Decoded> {
    match p {
        Precision::Verify => decode_all(&ck.model::<f64>()?, src, gating, beam, lp, sparse),
        Precision::Fast => decode_all(&ck.model::<f32>()?, src, gating, beam, lp, sparse),
    }
}

fn open_model(checkpoint: &Path, vocab: &Path, m: &mut RunManifest) -> CliResult<(Checkpoint, Vocab)> {
    m.input("checkpoint", checkpoint);
    m.input("vocab", vocab);
    let ck = load_checkpoint(checkpoint)?;
    let vocab = dataset::load_vocab(vocab)?;
    Trainer::<f64>::check_vocab(&ck, &vocab.fingerprint())?;
    let cfg = ck.model_config()?;
    if vocab.len() > cfg.src_vocab.min(cfg.tgt_vocab) {
        return Err(l0drop::Error::Data(format!(
            "vocabulary of {} tokens does not fit the model's {}",
            vocab.len(),
            cfg.src_vocab.min(cfg.tgt_vocab)
        ))
        .into());
    }
    Ok((ck, vocab))
}

pub fn decode(a: &DecodeArgs) -> CliResult<()> {
    let mut m = RunManifest::new("decode", None);
    let (ck, vocab) = open_model(&a.checkpoint, &a.vocab, &mut m)?;
    m.input("input", &a.input);
    let sentences = tokenize(&read(&a.input)?);
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
    let pattern = PatternSpec::from_args(&a.pattern, None, None, &mut m)?;
    let gating = Gating::resolve(a.gates, pattern.as_ref(), &ck, &sentences)?;
    let sparse = !a.dense;
    m.set("beam", a.beam);
    m.set("length_penalty", a.length_penalty);
    m.set("memory", if sparse { "sparse" } else { "dense" });
    m.set("gates", gating.name());
    m.set("precision", precision_name(a.mode));
    let d = decode_with(a.mode, &ck, &ids, &gating, a.beam, a.length_penalty, sparse)?;
    m.time("decode_secs", d.secs);

    let text: String = d.hypotheses.iter().map(|h| detokenize(&vocab.decode(h)) + "\n").collect();
    write(&a.out, &text)?;
    m.output("hypotheses", &a.out, text.as_bytes());

    let mut report = String::from("sentence\tlength\tpruned\tsparsity\n");
    for (i, g) in d.gates.iter().enumerate() {
        let n = g.source_len();
        report.push_str(&format!("{i}\t{n}\t{}\t{:.6}\n", g.closed_count(), g.sparsity()?));
    }
    let corpus_rate = sparsity_rate(&d.gates)?;
    let (n, pruned): (usize, usize) = d.gates.iter().fold((0, 0), |(n, p), g| (n + g.source_len(), p + g.closed_count()));
    report.push_str(&format!("corpus\t{n}\t{pruned}\t{corpus_rate:.6}\n"));
    let rp = a.out.with_extension("sparsity.tsv");
    write(&rp, &report)?;
    m.output("sparsity", &rp, report.as_bytes());
    m.set("sparsity", format!("{corpus_rate:.6}"));
    m.set("dense_fallbacks", d.dense_fallbacks);

    if let Some(path) = &a.gate_dump {
        let mut dump = String::from("sentence\tposition\ttoken\tlog_alpha\tgate\tkept\n");
        for (i, (g, s)) in d.gates.iter().zip(&sentences).enumerate() {
            for (j, tok) in s.iter().enumerate() {
                dump.push_str(&format!(
                    "{i}\t{j}\t{tok}\t{:.6}\t{:.6}\t{}\n",
                    g.log_alphas[j],
                    g.gates[j],
                    u8::from(g.open_mask[j])
                ));
            }
        }
        write(path, &dump)?;
        m.output("gate_dump", path, dump.as_bytes());
    }
    if let Some(r) = &a.reference {
        m.input("reference", r);
        let refs: Vec<Vec<usize>> = tokenize(&read(r)?).iter().map(|s| vocab.encode(s)).collect();
        if refs.len() != d.hypotheses.len() {
            return Err(l0drop::Error::Data(format!(
                "{} reference lines for {} inputs",
                refs.len(),
                d.hypotheses.len()
            ))
            .into());
        }
        let acc = token_accuracy(&refs, &d.hypotheses);
        let overlap = ngram_overlap(&refs, &d.hypotheses);
        m.set("token_accuracy", format!("{acc:.6}"));
        m.set("ngram_overlap", format!("{overlap:.6}"));
        eprintln!("token accuracy {acc:.4}, n-gram overlap {overlap:.4}");
    }
    eprintln!(
        "decoded {} sentences in {:.2}s, corpus sparsity {corpus_rate:.4}",
        d.hypotheses.len(),
        d.secs
    );
    m.save(&manifest_path(&a.out, false))
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let mut m = RunManifest::new("bench", Some(a.seed));
    let mut csv = format!("{}\n", BenchRecord::CSV_HEADER);
    for &n in &a.n {
        for &s in &a.sparsity {
            let r = bench_cross_attention(n, s, a.m, a.d, a.heads, a.reps, a.seed)?;
            eprintln!("N={n} sparsity={s}: {:.2}x", r.speedup);
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
    }
    write(&a.out, &csv)?;
    m.output("microbenchmark", &a.out, csv.as_bytes());

    if let (Some(c), Some(v), Some(input)) = (&a.checkpoint, &a.vocab, &a.input) {
        let (ck, vocab) = open_model(c, v, &mut m)?;
        m.input("input", input);
        let sentences = tokenize(&read(input)?);
        let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
        let gating = Gating::resolve(GateChoice::Auto, None, &ck, &sentences)?;
        let dense = decode_with(a.mode, &ck, &ids, &gating, a.beam, a.length_penalty, false)?;
        let sparse = decode_with(a.mode, &ck, &ids, &gating, a.beam, a.length_penalty, true)?;
        let same = dense.hypotheses == sparse.hypotheses;
        let report = format!(
            "sentences={}\nsparsity={:.6}\ndense_secs={:.6}\nsparse_secs={:.6}\nspeedup={:.4}\nidentical_output={same}\n",
            ids.len(),
            sparsity_rate(&sparse.gates)?,
            dense.secs,
            sparse.secs,
            dense.secs / sparse.secs
        );
        let rp = a.out.with_extension("decode.txt");
        write(&rp, &report)?;
        m.output("decode_timing", &rp, report.as_bytes());
        eprint!("{report}");
    }
    m.save(&manifest_path(&a.out, false))
}

fn analyze_all<T: Real>(params: &ModelParams<T>, src: &[Vec<usize>], tgt: &[Vec<usize>], gating: &Gating) -> CliResult<Vec<WordStats>> {
    let engine = Engine::new(params);
    src.iter()
        .zip(tgt)
        .enumerate()
        .map(|(i, (s, t))| Ok(analyze_sentence(&engine, s, t, gating.for_sentence(i))?))
        .collect()
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let mut m = RunManifest::new("analyze", None);
    let (ck, vocab) = open_model(&a.checkpoint, &a.vocab, &mut m)?;
    m.input("src", &a.src);
    m.input("tgt", &a.tgt);
    let src_tokens = tokenize(&read(&a.src)?);
    let tgt_tokens = tokenize(&read(&a.tgt)?);
    if src_tokens.len() != tgt_tokens.len() || src_tokens.is_empty() {
        return Err(l0drop::Error::Data(format!(
            "{} source lines and {} target lines",
            src_tokens.len(),
            tgt_tokens.len()
        ))
        .into());
    }
    let src: Vec<Vec<usize>> = src_tokens.iter().map(|s| vocab.encode(s)).collect();
    let tgt: Vec<Vec<usize>> = tgt_tokens.iter().map(|s| vocab.encode(s)).collect();
    let pattern = PatternSpec::from_args(&a.pattern, None, None, &mut m)?;
    let gating = Gating::resolve(a.gates, pattern.as_ref(), &ck, &src_tokens)?;
    m.set("gates", gating.name());
    m.set("precision", precision_name(a.mode));
    let stats = match a.mode {
        Precision::Verify => analyze_all(&ck.model::<f64>()?, &src, &tgt, &gating)?,
        Precision::Fast => analyze_all(&ck.model::<f32>()?, &src, &tgt, &gating)?,
    };
    let mut files: Vec<(&str, String)> = Vec::new();
    if matches!(a.which, Analysis::AttentionMass | Analysis::Both) {
        let kept: Vec<Vec<bool>> = stats.iter().map(|s| s.gates.open_mask.clone()).collect();
        let all: Vec<Vec<bool>> = stats.iter().map(|s| vec![true; s.mass.len()]).collect();
        let retained = MassSummary::new(&selected_masses(&stats, &kept), a.threshold, a.bin_width, a.bins)?;
        let every = MassSummary::new(&selected_masses(&stats, &all), a.threshold, a.bin_width, a.bins)?;
        let summary = format!(
            "threshold={}\nretained.words={}\nretained.mean={:.6}\nretained.frac_below={:.6}\n\
             all.words={}\nall.mean={:.6}\nall.frac_below={:.6}\n",
            a.threshold, retained.words, retained.mean, retained.frac_below, every.words, every.mean, every.frac_below
        );
        let mut words = String::from("sentence,position,token,mass,entropy,gate,kept\n");
        for (i, (s, toks)) in stats.iter().zip(&src_tokens).enumerate() {
            for (j, tok) in toks.iter().enumerate() {
                words.push_str(&format!(
                    "{i},{j},{tok},{:.6},{:.6},{:.6},{}\n",
                    s.mass[j],
                    s.entropy[j],
                    s.gates.gates[j],
                    u8::from(s.gates.open_mask[j])
                ));
            }
        }
        eprintln!(
            "attention mass over retained words: mean {:.4}, {:.1}% below {}",
            retained.mean,
            100.0 * retained.frac_below,
            a.threshold
        );
        files.push(("attention_mass.csv", retained.to_csv()));
        files.push(("attention_mass_summary.txt", summary));
        files.push(("attention_words.csv", words));
    }
    if matches!(a.which, Analysis::Entropy | Analysis::Both) {
        let e = entropy_split(&stats);
        eprintln!("retained entropy {:.4} ({}), pruned {:.4} ({})", e.retained_mean, e.retained, e.pruned_mean, e.pruned);
        files.push((
            "entropy.txt",
            format!(
                "retained.mean={:.6}\nretained.count={}\npruned.mean={:.6}\npruned.count={}\n",
                e.retained_mean, e.retained, e.pruned_mean, e.pruned
            ),
        ));
    }
    for (name, body) in &files {
        let p = a.out.join(name);
        write(&p, body)?;
        m.output(name, &p, body.as_bytes());
    }
    m.save(&manifest_path(&a.out, true))
}
