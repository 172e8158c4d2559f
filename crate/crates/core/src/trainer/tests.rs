use super::*;
use crate::hardconcrete::prob_open;
use crate::l0drop::{GateMode, GatePlacement};
use crate::numcore::{Graph, RngState};
use crate::transformer::{Forward, ModelParams};

fn toy(task: ToyTask, size: usize, seed: u64) -> Corpus {
    make_toy_corpus(&ToySpec {
        task,
        vocab: 8,
        min_len: 3,
        max_len: 6,
        size,
        seed,
    })
    .unwrap()
}

fn tiny_config(corpus: &Corpus) -> TrainConfig {
    let v = corpus.vocab.len();
    TrainConfig::parse(&format!(
        "d=16\nffn_dim=32\nheads=2\nlayers=1\nsrc_vocab={v}\ntgt_vocab={v}\ndropout=0.1\nattn_dropout=0\n\
         batch_tokens=40\nwarmup=50\nlr_scale=2\nlog_every=10\nseed=3\n"
    ))
    .unwrap()
}

fn batch_loss(params: &ModelParams<f64>, corpus: &Corpus, mode: &dyn Fn(usize) -> GateMode<'static>, lambda: f64) -> (f64, BatchStats) {
    let mut g = Graph::new(true);
    let f = Forward::new(&mut g, params);
    let batch: Vec<usize> = (0..corpus.len()).collect();
    let (l, s) = joint_loss(&mut g, &f, corpus, &batch, mode, lambda, &mut RngState::new(5)).unwrap();
    (g.value(l).data()[0], s)
}

fn no_dropout(mut c: TrainConfig) -> TrainConfig {
    c.model.dropout = 0.0;
    c
}

#[test]
fn lambda_zero_is_the_gated_likelihood() {
    let c = toy(ToyTask::Copy, 4, 1);
    let cfg = no_dropout(tiny_config(&c));
    let p = ModelParams::<f64>::init(&cfg.model, &mut RngState::new(1)).unwrap();
    let (loss, s) = batch_loss(&p, &c, &|_| GateMode::Sampled, 0.0);
    assert_eq!(loss, s.mle);
    let (loss, s) = batch_loss(&p, &c, &|_| GateMode::Sampled, 0.4);
    assert!((loss - (s.mle + 0.4 * s.l0)).abs() < 1e-10);
    // Zero predictor: every position is open with the same probability.
    let n: usize = c.src.iter().map(Vec::len).sum();
    let expect = n as f64 * prob_open(0.0, &cfg.model.hard_concrete) / c.len() as f64;
    assert!((s.l0 - expect).abs() < 1e-12);
}

#[test]
fn disabled_gates_match_an_ungated_model_exactly() {
    let c = toy(ToyTask::Reverse, 6, 2);
    let cfg = tiny_config(&c);
    let mut plain = cfg.clone();
    plain.model.gate_placement = GatePlacement::None;
    let mut a = Trainer::<f64>::new(cfg).unwrap();
    let mut b = Trainer::<f64>::new(plain).unwrap();
    let la = a.train(&c, 20, |_| {}).unwrap();
    let lb = b.train(&c, 20, |_| {}).unwrap();
    let bits = |r: &[LogRecord]| r.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
    for name in b.params.names() {
        let x = a.params.by_name(name).unwrap();
        let y = b.params.by_name(name).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}");
    }
}

#[test]
fn batch_objective_gradient_matches_finite_differences() {
    let c = toy(ToyTask::Copy, 3, 4);
    let cfg = no_dropout(tiny_config(&c));
    let mut p = ModelParams::<f64>::init(&cfg.model, &mut RngState::new(8)).unwrap();
    let mut rng = RngState::new(9);
    let w = p.layout.gates[0].1;
    p.get_mut(w).data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
    let noise: Vec<Vec<Vec<f64>>> = c
        .src
        .iter()
        .map(|s| vec![s.iter().map(|_| rng.uniform_range(0.05, 0.95)).collect()])
        .collect();
    let eval = |p: &ModelParams<f64>| {
        let mut g = Graph::new(true);
        let f = Forward::new(&mut g, p);
        let mode = |i: usize| GateMode::Frozen(&noise[i]);
        let batch: Vec<usize> = (0..c.len()).collect();
        let (l, _) = joint_loss(&mut g, &f, &c, &batch, &mode, 0.7, &mut RngState::new(0)).unwrap();
        (g.value(l).data()[0], g.backward(l).unwrap(), f.vars().to_vec())
    };
    let (_, grads, vars) = eval(&p);
    let h = 1e-5;
    for k in 0..p.len() {
        let n = p.get(k).numel();
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        for i in (0..n).step_by((n / 5).max(1)) {
            let mut up = p.clone();
            up.get_mut(k).data_mut()[i] += h;
            let mut dn = p.clone();
            dn.get_mut(k).data_mut()[i] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            let a = analytic[i];
            let scale = a.abs().max(fd.abs()).max(1e-3);
            assert!((a - fd).abs() / scale < 1e-5, "{}[{i}]: {a} vs {fd}", p.name(k));
        }
    }
}

#[test]
fn sampled_objective_upper_bounds_the_expected_gate_likelihood() {
    let c = toy(ToyTask::Copy, 1, 6);
    let cfg = no_dropout(tiny_config(&c));
    let mut p = ModelParams::<f64>::init(&cfg.model, &mut RngState::new(2)).unwrap();
    let w = p.layout.gates[0].1;
    let mut rng = RngState::new(3);
    p.get_mut(w).data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.3, 0.3));
    let nll = |mode: GateMode, rng: &mut RngState| {
        let mut g = Graph::new(false);
        let f = Forward::new(&mut g, &p);
        let l = f.sentence_loss(&mut g, &c.src[0], &c.tgt[0], mode, 0.0, rng).unwrap();
        g.value(l.nll).data()[0]
    };
    let at_expected = nll(GateMode::Expected, &mut rng);
    let samples: Vec<f64> = (0..1000).map(|_| nll(GateMode::Sampled, &mut rng)).collect();
    let mean = samples.iter().sum::<f64>() / 1000.0;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0;
    let se = (var / 1000.0).sqrt();
    assert!(mean >= at_expected - 3.0 * se, "mean {mean} expected-gate {at_expected} se {se}");
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let c = toy(ToyTask::Sorted, 10, 3);
    let run = || {
        let mut t = Trainer::<f64>::new(tiny_config(&c)).unwrap();
        t.train(&c, 15, |_| {}).unwrap();
        t.params.tensors().iter().flat_map(|x| x.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_bit_identically() {
    let c = toy(ToyTask::Copy, 12, 5);
    let mut cfg = tiny_config(&c);
    cfg.mode = TrainMode::ScratchL0drop;
    cfg.lambda = 0.2;
    cfg.lambda_warmup_steps = 8;
    let mut straight = Trainer::<f64>::new(cfg.clone()).unwrap();
    straight.train(&c, 20, |_| {}).unwrap();
    let mut first = Trainer::<f64>::new(cfg).unwrap();
    first.train(&c, 11, |_| {}).unwrap();
    let bytes = first.checkpoint(&c.vocab.fingerprint()).to_bytes();
    let ck = crate::transformer::Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let mut resumed = Trainer::<f64>::resume(&ck).unwrap();
    resumed.train(&c, 9, |_| {}).unwrap();
    assert_eq!(resumed.step, 20);
    assert_eq!(resumed.params.tensors(), straight.params.tensors());
    assert_eq!(resumed.adam, straight.adam);
    assert_eq!(resumed.rng.encode(), straight.rng.encode());
}

#[test]
fn vocabulary_mismatch_is_reported() {
    let c = toy(ToyTask::Copy, 2, 5);
    let t = Trainer::<f64>::new(tiny_config(&c)).unwrap();
    let ck = t.checkpoint("abc");
    assert!(Trainer::<f64>::check_vocab(&ck, "abc").is_ok());
    assert!(matches!(Trainer::<f64>::check_vocab(&ck, "abd"), Err(crate::Error::Data(_))));
}

#[test]
fn overfits_a_pair_down_to_the_smoothing_floor() {
    let c = toy(ToyTask::Reverse, 2, 7);
    let mut cfg = no_dropout(tiny_config(&c));
    cfg.warmup = 30;
    cfg.lr_scale = 4.0;
    let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
    let log = t.train(&c, 1500, |_| {}).unwrap();
    // Per-token minimum of the smoothed cross-entropy is the entropy of the
    // smoothed target distribution.
    let v = cfg.model.tgt_vocab as f64;
    let eps = cfg.model.label_smoothing;
    let (hi, lo) = (1.0 - eps + eps / v, eps / v);
    let floor_tok = -(hi * hi.ln() + (v - 1.0) * lo * lo.ln());
    let tokens = c.tgt.iter().map(|s| s.len() + 1).sum::<usize>() as f64 / c.len() as f64;
    let last = log.last().unwrap().loss;
    assert!(last >= floor_tok * tokens - 1e-9);
    assert!(last < (floor_tok + 0.05) * tokens, "loss {last}, floor {}", floor_tok * tokens);
}

#[test]
fn pattern_mode_requires_gates() {
    let c = toy(ToyTask::Copy, 3, 1);
    let mut cfg = tiny_config(&c);
    cfg.mode = TrainMode::FinetunePattern;
    let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
    assert!(matches!(t.train_step(&c), Err(crate::Error::Config(_))));
    let sets: Vec<_> = c.src.iter().map(|s| crate::l0drop::GateSet::from_binary(&vec![true; s.len()])).collect();
    let mut t = Trainer::<f64>::new(cfg).unwrap().with_fixed_gates(&c, &sets).unwrap();
    let (s, _) = t.train_step(&c).unwrap();
    assert_eq!(s.l0, 0.0);
}
