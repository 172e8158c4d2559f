//! Prepared data directory: `vocab.txt`, `src.ids`, `tgt.ids`, the token
//! text of both sides, a source frequency table and optional `tags.txt`.

use std::path::Path;

use l0drop::patterns::{parse_tag_file, FrequencyTable};
use l0drop::trainer::{Corpus, Vocab};

use crate::error::{read, write, CliResult};

pub const VOCAB: &str = "vocab.txt";
pub const SRC_IDS: &str = "src.ids";
pub const TGT_IDS: &str = "tgt.ids";
pub const SRC_TEXT: &str = "src.txt";
pub const TGT_TEXT: &str = "tgt.txt";
pub const FREQ: &str = "freq.tsv";
pub const TAGS: &str = "tags.txt";

pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Writes every file of a prepared directory and returns `(name, bytes)` for
/// the manifest.
pub fn save(dir: &Path, corpus: &Corpus) -> CliResult<Vec<(&'static str, Vec<u8>)>> {
    let text = |side: &[Vec<usize>]| -> String {
        side.iter()
            .map(|s| detokenize(&corpus.vocab.decode(s)) + "\n")
            .collect()
    };
    let src_tokens: Vec<Vec<String>> = (0..corpus.len()).map(|i| corpus.src_tokens(i)).collect();
    let mut files = vec![
        (VOCAB, corpus.vocab.to_text().into_bytes()),
        (SRC_IDS, Corpus::ids_text(&corpus.src).into_bytes()),
        (TGT_IDS, Corpus::ids_text(&corpus.tgt).into_bytes()),
        (SRC_TEXT, text(&corpus.src).into_bytes()),
        (TGT_TEXT, text(&corpus.tgt).into_bytes()),
        (FREQ, FrequencyTable::from_sentences(&src_tokens).to_text().into_bytes()),
    ];
    if let Some(tags) = &corpus.tags {
        let t: String = tags.iter().map(|l| l.join(" ") + "\n").collect();
        files.push((TAGS, t.into_bytes()));
    }
    for (name, bytes) in &files {
        write(&dir.join(name), bytes)?;
    }
    Ok(files)
}

pub fn load_vocab(path: &Path) -> CliResult<Vocab> {
    Ok(Vocab::parse(&read(path)?)?)
}

pub fn load(dir: &Path) -> CliResult<Corpus> {
    let vocab = load_vocab(&dir.join(VOCAB))?;
    let src = Corpus::parse_ids(&read(&dir.join(SRC_IDS))?)?;
    let tgt = Corpus::parse_ids(&read(&dir.join(TGT_IDS))?)?;
    let corpus = Corpus::new(vocab, src, tgt)?;
    let tags = dir.join(TAGS);
    if tags.exists() {
        return Ok(corpus.with_tags(parse_tag_file(&read(&tags)?))?);
    }
    Ok(corpus)
}

pub fn load_freq(path: &Path) -> CliResult<FrequencyTable> {
    Ok(FrequencyTable::parse(&read(path)?)?)
}
