use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::RngState;
use crate::transformer::{SPECIALS, UNK};

const SPECIAL_TOKENS: [&str; SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id map with the reserved ids `pad=0, bos=1, eos=2, unk=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `content` in the given order.
    pub fn new<S: AsRef<str>>(content: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.iter().map(|s| s.as_ref().to_string()));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Content tokens by descending frequency, ties in lexicographic order.
    pub fn from_sentences<S: AsRef<str>>(sentences: &[&[Vec<S>]]) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for side in sentences {
            for s in side.iter() {
                for t in s {
                    *counts.entry(t.as_ref()).or_insert(0) += 1;
                }
            }
        }
        let mut order: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::new(&order.iter().map(|(t, _)| *t).collect::<Vec<_>>())
    }

    /// One token per line, specials included.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS || lines[..SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Data("vocabulary file must start with the reserved tokens".into()));
        }
        Self::new(&lines[SPECIALS..])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Stable fingerprint stored with checkpoints to catch vocabulary mismatch.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the newline-joined token list.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Parallel corpus of id sequences over a shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub tags: Option<Vec<Vec<String>>>,
}

impl Corpus {
    pub fn new(vocab: Vocab, src: Vec<Vec<usize>>, tgt: Vec<Vec<usize>>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Data(format!(
                "{} source lines but {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        let v = vocab.len();
        for (i, s) in src.iter().chain(&tgt).enumerate() {
            if s.is_empty() {
                return Err(Error::Data(format!("sentence {} is empty", i % src.len().max(1))));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= v) {
                return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
            }
        }
        Ok(Self {
            vocab,
            src,
            tgt,
            tags: None,
        })
    }

    /// Builds a corpus from whitespace-tokenized text lines, creating the
    /// vocabulary from both sides.
    pub fn from_text(src: &str, tgt: &str) -> Result<Self> {
        let split = |t: &str| -> Vec<Vec<String>> {
            t.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect()
        };
        let (s, t) = (split(src), split(tgt));
        if s.is_empty() {
            return Err(Error::Data("empty input corpus".into()));
        }
        let vocab = Vocab::from_sentences(&[&s, &t])?;
        let src = s.iter().map(|l| vocab.encode(l)).collect();
        let tgt = t.iter().map(|l| vocab.encode(l)).collect();
        Self::new(vocab, src, tgt)
    }

    pub fn with_tags(mut self, tags: Vec<Vec<String>>) -> Result<Self> {
        if tags.len() != self.src.len() {
            return Err(Error::Data(format!(
                "{} tag lines for {} sentences",
                tags.len(),
                self.src.len()
            )));
        }
        for (i, (t, s)) in tags.iter().zip(&self.src).enumerate() {
            if t.len() != s.len() {
                return Err(Error::Data(format!("sentence {i}: {} tags for {} tokens", t.len(), s.len())));
            }
        }
        self.tags = Some(tags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_tokens(&self, i: usize) -> Vec<String> {
        self.vocab.decode(&self.src[i])
    }

    /// Sentences `range` as a new corpus over the same vocabulary.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            vocab: self.vocab.clone(),
            src: self.src[range.clone()].to_vec(),
            tgt: self.tgt[range.clone()].to_vec(),
            tags: self.tags.as_ref().map(|t| t[range].to_vec()),
        }
    }

    /// One id sequence per line, whitespace separated.
    pub fn ids_text(side: &[Vec<usize>]) -> String {
        side.iter()
            .map(|s| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect()
    }

    pub fn parse_ids(text: &str) -> Result<Vec<Vec<usize>>> {
        text.lines()
            .enumerate()
            .map(|(n, l)| {
                l.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Data(format!("line {}: bad id {t:?}", n + 1))))
                    .collect()
            })
            .collect()
    }

    /// Groups shuffled sentence indices into batches of about `batch_tokens`
    /// target tokens (end markers included). The order depends only on
    /// `seed` and `epoch`.
    pub fn batches(&self, batch_tokens: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = RngState::new(seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.shuffle(&mut order);
        let mut batches = Vec::new();
        let mut cur = Vec::new();
        let mut tokens = 0;
        for i in order {
            cur.push(i);
            tokens += self.tgt[i].len() + 1;
            if tokens >= batch_tokens {
                batches.push(std::mem::take(&mut cur));
                tokens = 0;
            }
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
    Sorted,
    /// Copy with interleaved filler tokens that the target omits.
    Filter,
}

impl ToyTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sorted" => Ok(Self::Sorted),
            "filter" => Ok(Self::Filter),
            _ => Err(Error::Config(format!("unknown toy task {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Sorted => "sorted",
            Self::Filter => "filter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub task: ToyTask,
    /// Number of content tokens.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.size == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("invalid toy corpus spec {self:?}")));
        }
        Ok(())
    }
}

/// Filler share of source positions in [`ToyTask::Filter`].
pub const FILLER_RATE: f64 = 0.4;

/// Number of filler types in [`ToyTask::Filter`]: the last content tokens.
pub fn filler_types(vocab: usize) -> usize {
    (vocab / 10).clamp(1, 5).min(vocab - 1)
}

/// Synthetic corpus over tokens `0 … vocab-1` (as text). Lengths and tokens
/// are uniform; in the filter task each source position is a filler with
/// probability [`FILLER_RATE`] (at least one position is not).
pub fn make_toy_corpus(spec: &ToySpec) -> Result<Corpus> {
    spec.validate()?;
    if spec.task == ToyTask::Filter && spec.vocab < 2 {
        return Err(Error::Config("the filter task needs at least two tokens".into()));
    }
    let words: Vec<String> = (0..spec.vocab).map(|i| i.to_string()).collect();
    let vocab = Vocab::new(&words)?;
    let mut rng = RngState::new(spec.seed);
    let mut src = Vec::with_capacity(spec.size);
    let mut tgt = Vec::with_capacity(spec.size);
    let fillers = filler_types(spec.vocab);
    let content = spec.vocab - fillers;
    for _ in 0..spec.size {
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let (s, t) = match spec.task {
            ToyTask::Filter => {
                let mut s: Vec<usize> = (0..len)
                    .map(|_| {
                        if rng.uniform_open() < FILLER_RATE {
                            SPECIALS + content + rng.below(fillers)
                        } else {
                            SPECIALS + rng.below(content)
                        }
                    })
                    .collect();
                if s.iter().all(|&x| x >= SPECIALS + content) {
                    s[0] = SPECIALS + rng.below(content);
                }
                let t = s.iter().copied().filter(|&x| x < SPECIALS + content).collect();
                (s, t)
            }
            task => {
                let s: Vec<usize> = (0..len).map(|_| SPECIALS + rng.below(spec.vocab)).collect();
                let t = match task {
                    ToyTask::Reverse => s.iter().rev().copied().collect(),
                    ToyTask::Sorted => {
                        let mut t = s.clone();
                        t.sort_unstable();
                        t
                    }
                    _ => s.clone(),
                };
                (s, t)
            }
        };
        src.push(s);
        tgt.push(t);
    }
    Corpus::new(vocab, src, tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: ToyTask) -> ToySpec {
        ToySpec {
            task,
            vocab: 50,
            min_len: 5,
            max_len: 20,
            size: 200,
            seed: 7,
        }
    }

    #[test]
    fn toy_pairs() {
        let c = make_toy_corpus(&spec(ToyTask::Copy)).unwrap();
        assert_eq!(c.src, c.tgt);
        assert!(c.src.iter().all(|s| (5..=20).contains(&s.len())));
        assert_eq!(c.vocab.len(), 54);
        let r = make_toy_corpus(&spec(ToyTask::Reverse)).unwrap();
        let mut s = r.src[0].clone();
        s.reverse();
        assert_eq!(r.tgt[0], s);
        let so = make_toy_corpus(&spec(ToyTask::Sorted)).unwrap();
        assert!(so.tgt[3].windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn filter_targets_drop_exactly_the_fillers() {
        let c = make_toy_corpus(&ToySpec {
            size: 2000,
            ..spec(ToyTask::Filter)
        })
        .unwrap();
        let first_filler = SPECIALS + 50 - filler_types(50);
        let (mut fill, mut total) = (0, 0);
        for (s, t) in c.src.iter().zip(&c.tgt) {
            let kept: Vec<usize> = s.iter().copied().filter(|&x| x < first_filler).collect();
            assert_eq!(&kept, t);
            assert!(!t.is_empty());
            fill += s.len() - t.len();
            total += s.len();
        }
        assert!((fill as f64 / total as f64 - FILLER_RATE).abs() < 0.02);
    }

    #[test]
    fn copy_example_tokens() {
        let v = Vocab::new(&["7", "3", "9"]).unwrap();
        let ids = v.encode(&["7", "3", "9"]);
        let c = Corpus::new(v.clone(), vec![ids.clone()], vec![ids.iter().rev().copied().collect()]).unwrap();
        assert_eq!(c.vocab.decode(&c.tgt[0]), vec!["9", "3", "7"]);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn seeded_regeneration_is_byte_identical() {
        let a = make_toy_corpus(&spec(ToyTask::Copy)).unwrap();
        let b = make_toy_corpus(&spec(ToyTask::Copy)).unwrap();
        assert_eq!(Corpus::ids_text(&a.src), Corpus::ids_text(&b.src));
        assert_eq!(a.vocab.to_text(), b.vocab.to_text());
    }

    #[test]
    fn text_round_trip() {
        let c = Corpus::from_text("a b c\nb b\n", "c a\nb\n").unwrap();
        assert_eq!(c.vocab.token(SPECIALS), "b");
        let back: Vec<String> = c.vocab.decode(&c.src[0]);
        assert_eq!(back, vec!["a", "b", "c"]);
        assert_eq!(Vocab::parse(&c.vocab.to_text()).unwrap(), c.vocab);
        assert_eq!(Corpus::parse_ids(&Corpus::ids_text(&c.tgt)).unwrap(), c.tgt);
        assert!(Corpus::from_text("a\nb\n", "a\n").is_err());
        assert!(Corpus::from_text("", "").is_err());
    }

    #[test]
    fn batches_cover_every_sentence_once() {
        let c = make_toy_corpus(&spec(ToyTask::Copy)).unwrap();
        let b = c.batches(100, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(b, c.batches(100, 1, 0));
        assert_ne!(b, c.batches(100, 1, 1));
    }
}
