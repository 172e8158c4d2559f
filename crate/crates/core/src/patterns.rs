//! Rule-based keep/drop masks that stand in for learned gates.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::l0drop::GateSet;
use crate::numcore::Real;
use crate::sparse_decode::DecodeMemory;
use crate::transformer::{beam_search, DecodeOptions, Engine, EvalGates, Hypothesis};

/// Corpus token counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn from_sentences<S: AsRef<str>>(sentences: &[Vec<S>]) -> Self {
        let mut t = Self::default();
        for s in sentences {
            for tok in s {
                *t.counts.entry(tok.as_ref().to_string()).or_insert(0) += 1;
                t.total += 1;
            }
        }
        t
    }

    /// Parses `token<TAB>count` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("frequency line {}: expected token<TAB>count", n + 1)))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("frequency line {}: bad count {count:?}", n + 1)))?;
            if count == 0 {
                return Err(Error::Data(format!("frequency line {}: count must be positive", n + 1)));
            }
            if t.counts.insert(tok.to_string(), count).is_some() {
                return Err(Error::Data(format!("frequency line {}: duplicate token {tok:?}", n + 1)));
            }
            t.total += count;
        }
        Ok(t)
    }

    /// Lines in descending-count order.
    pub fn to_text(&self) -> String {
        self.ordered(false).iter().map(|(t, c)| format!("{t}\t{c}\n")).collect()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    /// Tokens by count (descending, or ascending when `rare_first`); ties
    /// break on lexicographic token order either way.
    pub fn ordered(&self, rare_first: bool) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.counts.iter().map(|(t, &c)| (t.as_str(), c)).collect();
        if rare_first {
            v.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
        } else {
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        }
        v
    }
}

/// The shortest prefix of the frequency ordering whose corpus mass reaches
/// `coverage`.
pub fn build_drop_set_freq(table: &FrequencyTable, coverage: f64, inverse: bool) -> Result<BTreeSet<String>> {
    if table.is_empty() {
        return Err(Error::Data("frequency table is empty".into()));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Config(format!("coverage must lie in (0, 1), got {coverage}")));
    }
    let mut drop = BTreeSet::new();
    let mut mass = 0u64;
    for (tok, c) in table.ordered(inverse) {
        if mass as f64 >= coverage * table.total as f64 {
            break;
        }
        drop.insert(tok.to_string());
        mass += c;
    }
    Ok(drop)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SparsityPattern {
    /// Drop tokens whose tag is listed.
    Tag { drop_tags: BTreeSet<String> },
    /// Drop the most frequent tokens covering `coverage` of the corpus.
    Freq { drop: BTreeSet<String>, coverage: f64 },
    /// Drop the rarest tokens covering `coverage` of the corpus.
    InvFreq { drop: BTreeSet<String>, coverage: f64 },
    /// Keep odd positions counting from 1, i.e. the first, third, ...
    Group,
    KeepAll,
}

impl SparsityPattern {
    pub fn freq(table: &FrequencyTable, coverage: f64) -> Result<Self> {
        Ok(Self::Freq {
            drop: build_drop_set_freq(table, coverage, false)?,
            coverage,
        })
    }

    pub fn inv_freq(table: &FrequencyTable, coverage: f64) -> Result<Self> {
        Ok(Self::InvFreq {
            drop: build_drop_set_freq(table, coverage, true)?,
            coverage,
        })
    }

    pub fn tag<S: AsRef<str>>(drop_tags: &[S]) -> Self {
        Self::Tag {
            drop_tags: drop_tags.iter().map(|t| t.as_ref().to_string()).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tag { .. } => "tag",
            Self::Freq { .. } => "freq",
            Self::InvFreq { .. } => "inv-freq",
            Self::Group => "group",
            Self::KeepAll => "keep-all",
        }
    }

    pub fn needs_tags(&self) -> bool {
        matches!(self, Self::Tag { .. })
    }
}

/// Binary keep mask for one sentence. A sentence is never fully dropped: if
/// the rule would drop everything, the first token is kept.
pub fn mask_sentence<S: AsRef<str>, U: AsRef<str>>(
    pattern: &SparsityPattern,
    tokens: &[S],
    tags: Option<&[U]>,
) -> Result<Vec<bool>> {
    let mut keep: Vec<bool> = match pattern {
        SparsityPattern::KeepAll => vec![true; tokens.len()],
        SparsityPattern::Group => (0..tokens.len()).map(|i| i % 2 == 0).collect(),
        SparsityPattern::Freq { drop, .. } | SparsityPattern::InvFreq { drop, .. } => {
            tokens.iter().map(|t| !drop.contains(t.as_ref())).collect()
        }
        SparsityPattern::Tag { drop_tags } => {
            let tags = tags.ok_or_else(|| Error::Data("tag pattern needs a tag sequence".into()))?;
            if tags.len() != tokens.len() {
                return Err(Error::Data(format!(
                    "{} tags for {} tokens",
                    tags.len(),
                    tokens.len()
                )));
            }
            tags.iter().map(|t| !drop_tags.contains(t.as_ref())).collect()
        }
    };
    if !keep.is_empty() && !keep.contains(&true) {
        keep[0] = true;
    }
    Ok(keep)
}

pub fn mask_gates<S: AsRef<str>, U: AsRef<str>>(
    pattern: &SparsityPattern,
    tokens: &[S],
    tags: Option<&[U]>,
) -> Result<GateSet> {
    Ok(GateSet::from_binary(&mask_sentence(pattern, tokens, tags)?))
}

/// Token-aligned tag file: one sentence per line, whitespace-separated tags.
pub fn parse_tag_file(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Decodes with the pattern's binary gates in place of learned ones, reading
/// cross-attention from the compacted memory.
pub fn pattern_decode<T: Real, S: AsRef<str>, U: AsRef<str>>(
    engine: &Engine<T>,
    pattern: &SparsityPattern,
    src_tokens: &[S],
    src_ids: &[usize],
    tags: Option<&[U]>,
    opts: &DecodeOptions,
) -> Result<(Hypothesis, GateSet)> {
    if src_tokens.len() != src_ids.len() {
        return Err(Error::Data("token and id sequences differ in length".into()));
    }
    let gates = mask_gates(pattern, src_tokens, tags)?;
    let enc = engine.encode(src_ids, EvalGates::Fixed(&gates), false)?;
    let mem = DecodeMemory::build(engine.params, &enc, true)?;
    Ok((beam_search(engine, mem.as_cross(), opts)?, gates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn freq_drop_set_hand_example() {
        let t = FrequencyTable::parse("a\t50\nb\t30\nc\t20\n").unwrap();
        let drop = build_drop_set_freq(&t, 0.5, false).unwrap();
        assert_eq!(drop.into_iter().collect::<Vec<_>>(), vec!["a"]);
        let rare = build_drop_set_freq(&t, 0.5, true).unwrap();
        assert_eq!(rare.into_iter().collect::<Vec<_>>(), vec!["b", "c"]);
        assert_eq!(build_drop_set_freq(&t, 0.999, false).unwrap().len(), 3);
        assert!(build_drop_set_freq(&FrequencyTable::default(), 0.5, false).is_err());
        assert!(build_drop_set_freq(&t, 1.0, false).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = FrequencyTable::parse("b\t5\na\t5\nc\t1\n").unwrap();
        assert_eq!(t.ordered(false), vec![("a", 5), ("b", 5), ("c", 1)]);
        assert_eq!(t.to_text(), "a\t5\nb\t5\nc\t1\n");
        assert_eq!(FrequencyTable::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn table_file_errors() {
        assert!(FrequencyTable::parse("a 5").is_err());
        assert!(FrequencyTable::parse("a\t0").is_err());
        assert!(FrequencyTable::parse("a\t1\na\t2").is_err());
    }

    #[test]
    fn group_masks() {
        let six = toks("a b c d e f");
        assert_eq!(
            mask_sentence::<_, &str>(&SparsityPattern::Group, &six, None).unwrap(),
            vec![true, false, true, false, true, false]
        );
        assert_eq!(mask_sentence::<_, &str>(&SparsityPattern::Group, &toks("a"), None).unwrap(), vec![true]);
    }

    #[test]
    fn tag_mask_and_errors() {
        let p = SparsityPattern::tag(&["PUNCT"]);
        let tokens = toks("hello , world");
        let tags = toks("X PUNCT X");
        assert_eq!(mask_sentence(&p, &tokens, Some(&tags)).unwrap(), vec![true, false, true]);
        assert!(mask_sentence::<_, &str>(&p, &tokens, None).is_err());
        assert!(mask_sentence(&p, &tokens, Some(&toks("X X"))).is_err());
        assert_eq!(parse_tag_file("X PUNCT X\nN\n"), vec![tags, vec!["N".to_string()]]);
    }

    #[test]
    fn never_drops_everything() {
        let t = FrequencyTable::parse("a\t9\nb\t1\n").unwrap();
        let p = SparsityPattern::freq(&t, 0.5).unwrap();
        assert_eq!(mask_sentence::<_, &str>(&p, &toks("a a a"), None).unwrap(), vec![true, false, false]);
    }

    proptest! {
        #[test]
        fn group_sparsity_is_floor_half(n in 1usize..200) {
            let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let g = mask_gates::<_, &str>(&SparsityPattern::Group, &tokens, None).unwrap();
            prop_assert_eq!(g.closed_count(), n / 2);
        }

        #[test]
        fn freq_coverage_reaches_target_without_excess(
            counts in proptest::collection::vec(1u64..500, 1..60),
            coverage in 0.01f64..0.99,
            inverse: bool,
        ) {
            let text: String = counts.iter().enumerate().map(|(i, c)| format!("w{i}\t{c}\n")).collect();
            let t = FrequencyTable::parse(&text).unwrap();
            let drop = build_drop_set_freq(&t, coverage, inverse).unwrap();
            let mass: u64 = drop.iter().map(|w| t.count(w)).sum();
            let realized = mass as f64 / t.total() as f64;
            prop_assert!(realized >= coverage - 1e-12);
            // Removing the last (boundary) token must fall short of the target.
            let ordered = t.ordered(inverse);
            let boundary = ordered[drop.len() - 1].1 as f64 / t.total() as f64;
            prop_assert!(realized - boundary < coverage + 1e-12);
        }

        #[test]
        fn masks_are_deterministic(words in proptest::collection::vec(0usize..8, 1..30)) {
            let tokens: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            let t = FrequencyTable::from_sentences(std::slice::from_ref(&tokens));
            let p = SparsityPattern::freq(&t, 0.4).unwrap();
            let a = mask_sentence::<_, &str>(&p, &tokens, None).unwrap();
            let b = mask_sentence::<_, &str>(&p, &tokens, None).unwrap();
            prop_assert!(a.contains(&true));
            prop_assert_eq!(a, b);
        }
    }
}
