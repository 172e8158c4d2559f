use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l0drop"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn l0drop")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

const TINY: &str = "d=16\nffn_dim=32\nheads=2\nlayers=2\ndropout=0\nbatch_tokens=80\nwarmup=30\nlr_scale=2\nlog_every=5\nmax_len=64\n";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("tiny.cfg"), TINY).unwrap();
        ok(&[
            "prepare", "--toy", "copy", "--toy-vocab", "12", "--min-len", "3", "--max-len", "8", "--size", "60",
            "--seed", "3", "--out", s(&f.path("data")),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, steps: &str) -> PathBuf {
        let p = self.path(out);
        ok(&[
            "train", "--config", s(&self.path("tiny.cfg")), "--data", s(&self.path("data")), "--steps", steps,
            "--seed", "5", "--out", s(&p),
        ]);
        p
    }
}

#[test]
fn toy_preparation_is_deterministic_and_round_trips() {
    let f = Fixture::new();
    ok(&[
        "prepare", "--toy", "copy", "--toy-vocab", "12", "--min-len", "3", "--max-len", "8", "--size", "60", "--seed",
        "3", "--out", s(&f.path("again")),
    ]);
    for name in ["vocab.txt", "src.ids", "tgt.ids", "src.txt", "freq.tsv"] {
        assert_eq!(read(&f.path("data").join(name)), read(&f.path("again").join(name)), "{name}");
    }
    // Re-encoding the token text with the stored vocabulary gives the same ids.
    let text = f.path("data").join("src.txt");
    let tgt = f.path("data").join("tgt.txt");
    let vocab = f.path("data").join("vocab.txt");
    ok(&["prepare", "--src", s(&text), "--tgt", s(&tgt), "--vocab", s(&vocab), "--out", s(&f.path("re"))]);
    assert_eq!(read(&f.path("data").join("src.ids")), read(&f.path("re").join("src.ids")));
    let manifest = read(&f.path("data").join("manifest.txt"));
    assert!(manifest.starts_with("command=prepare\n"));
    assert!(manifest.contains("sha256.vocab.txt="));
}

#[test]
fn unknown_tokens_map_to_unk() {
    let f = Fixture::new();
    std::fs::write(f.path("s.txt"), "0 zzz 1\n").unwrap();
    std::fs::write(f.path("t.txt"), "0 1\n").unwrap();
    let vocab = f.path("data").join("vocab.txt");
    ok(&["prepare", "--src", s(&f.path("s.txt")), "--tgt", s(&f.path("t.txt")), "--vocab", s(&vocab), "--out", s(&f.path("u"))]);
    assert_eq!(read(&f.path("u").join("src.ids")), "4 3 5\n");
}

#[test]
fn data_and_config_errors_have_distinct_exit_codes() {
    let f = Fixture::new();
    std::fs::write(f.path("a.txt"), "x y\nz\n").unwrap();
    std::fs::write(f.path("b.txt"), "x y\n").unwrap();
    std::fs::write(f.path("empty.txt"), "").unwrap();
    let mismatch = run(&["prepare", "--src", s(&f.path("a.txt")), "--tgt", s(&f.path("b.txt")), "--out", s(&f.path("m"))]);
    assert_eq!(mismatch.status.code(), Some(4));
    let empty = run(&["prepare", "--src", s(&f.path("empty.txt")), "--tgt", s(&f.path("empty.txt")), "--out", s(&f.path("e"))]);
    assert_eq!(empty.status.code(), Some(4));
    let negative = run(&[
        "train", "--config", s(&f.path("tiny.cfg")), "--data", s(&f.path("data")), "--lambda=-0.5", "--out",
        s(&f.path("neg.ckpt")),
    ]);
    assert_eq!(negative.status.code(), Some(3));
    let missing = run(&["train", "--data", s(&f.path("nowhere")), "--out", s(&f.path("x.ckpt"))]);
    assert_eq!(missing.status.code(), Some(6));
}

#[test]
fn training_is_reproducible_and_resumes_bit_identically() {
    let f = Fixture::new();
    let a = f.train("a.ckpt", "20");
    let b = f.train("b.ckpt", "20");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let half = f.train("half.ckpt", "10");
    let resumed = f.path("resumed.ckpt");
    ok(&["train", "--data", s(&f.path("data")), "--resume", s(&half), "--steps", "20", "--out", s(&resumed)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&resumed).unwrap());
    let manifest = read(&f.path("a.ckpt.manifest"));
    let hash = manifest
        .lines()
        .find_map(|l| l.strip_prefix("sha256.checkpoint="))
        .unwrap();
    assert_eq!(hash.len(), 64);
    assert!(manifest.contains("seed=5\n"));
    assert!(manifest.contains("config.d=16\n"));
}

#[test]
fn finetune_logs_sparsity_and_decode_reports_it() {
    let f = Fixture::new();
    let base = f.train("base.ckpt", "30");
    let ft = f.path("ft.ckpt");
    ok(&[
        "finetune", "--from", s(&base), "--data", s(&f.path("data")), "--lambda", "0.3", "--steps", "10", "--out", s(&ft),
    ]);
    let log = read(&f.path("ft.ckpt.log.csv"));
    assert!(log.starts_with("step,loss,mle,l0,lambda,lr,sparsity\n"));
    assert_eq!(log.lines().count(), 3);

    let vocab = f.path("data").join("vocab.txt");
    let input = f.path("data").join("src.txt");
    let decode = |extra: &[&str], out: &str| {
        let p = f.path(out);
        let mut args = vec!["decode", "--checkpoint", s(&ft), "--vocab", s(&vocab), "--input", s(&input), "--out", s(&p)];
        args.extend_from_slice(extra);
        ok(&args);
        p
    };
    let sparse = decode(&["--sparse", "--gate-dump", s(&f.path("gates.tsv"))], "sparse.txt");
    let dense = decode(&["--dense"], "dense.txt");
    assert_eq!(read(&sparse), read(&dense));
    let dump = read(&f.path("gates.tsv"));
    assert!(dump.starts_with("sentence\tposition\ttoken\tlog_alpha\tgate\tkept\n"));
    let report = read(&f.path("sparse.sparsity.tsv"));
    assert!(report.lines().last().unwrap().starts_with("corpus\t"));

    let group = decode(&["--pattern", "group"], "group.txt");
    let _ = group;
    for line in read(&f.path("group.sparsity.tsv")).lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == "corpus" {
            continue;
        }
        let (n, pruned): (usize, usize) = (cols[1].parse().unwrap(), cols[2].parse().unwrap());
        assert_eq!(pruned, n / 2);
    }
}

#[test]
fn decode_rejects_a_foreign_vocabulary() {
    let f = Fixture::new();
    let ck = f.train("m.ckpt", "2");
    ok(&[
        "prepare", "--toy", "copy", "--toy-vocab", "11", "--size", "5", "--out", s(&f.path("other")),
    ]);
    let o = run(&[
        "decode", "--checkpoint", s(&ck), "--vocab", s(&f.path("other").join("vocab.txt")), "--input",
        s(&f.path("data").join("src.txt")), "--out", s(&f.path("o.txt")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary mismatch"));
}

#[test]
fn bench_and_analyze_write_their_data_files() {
    let f = Fixture::new();
    let ck = f.train("m.ckpt", "5");
    let csv = f.path("bench.csv");
    ok(&["bench", "--n", "32", "--sparsity", "0,0.5", "--m", "4", "--d", "16", "--heads", "2", "--reps", "1", "--out", s(&csv)]);
    let text = read(&csv);
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("N,N',M,d,heads,"));

    let data = f.path("data");
    ok(&[
        "analyze", "--checkpoint", s(&ck), "--vocab", s(&data.join("vocab.txt")), "--src", s(&data.join("src.txt")),
        "--tgt", s(&data.join("tgt.txt")), "--out", s(&f.path("an")),
    ]);
    let summary = read(&f.path("an").join("attention_mass_summary.txt"));
    assert!(summary.contains("all.mean="));
    let entropy = read(&f.path("an").join("entropy.txt"));
    // A baseline prunes nothing.
    assert!(entropy.contains("pruned.count=0\n"));
    assert!(read(&f.path("an").join("attention_mass.csv")).starts_with("bin_lo,bin_hi,count\n"));
}
