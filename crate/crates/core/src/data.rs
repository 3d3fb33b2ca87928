//! Token sequences, preference triples and the line-delimited dataset format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"prompt":[3,1],"chosen":[4,0,2],"rejected":[1,1,5],"meta":{"prompt_id":0}}
//! ```
//!
//! `prompt`, `chosen` and `rejected` are required arrays of non-negative
//! integers. `meta` is an optional object carried through unchanged. Unknown
//! keys are ignored; blank lines are skipped but still counted for error
//! line numbers.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    vocab_size: u32,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub meta: Option<Map<String, Value>>,
}

impl PreferenceTriple {
    pub fn new(prompt: TokenSeq, chosen: TokenSeq, rejected: TokenSeq) -> Result<Self> {
        let v = prompt.vocab_size();
        if chosen.vocab_size() != v || rejected.vocab_size() != v {
            return Err(Error::invalid("triple members disagree on vocab_size"));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: Map<String, Value>) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn is_degenerate(&self) -> bool {
        self.chosen == self.rejected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub triples: Vec<PreferenceTriple>,
    pub vocab_size: u32,
    pub source_path: Option<PathBuf>,
}

impl PreferenceDataset {
    pub fn new(triples: Vec<PreferenceTriple>, vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if let Some(i) = triples
            .iter()
            .position(|t| t.prompt.vocab_size() != vocab_size)
        {
            return Err(Error::invalid(format!(
                "triple {i} has vocab size {} (dataset uses {vocab_size})",
                triples[i].prompt.vocab_size()
            )));
        }
        Ok(Self {
            triples,
            vocab_size,
            source_path: None,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferenceTriple> {
        self.triples.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    prompt: Vec<u64>,
    chosen: Vec<u64>,
    rejected: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Map<String, Value>>,
}

fn to_seq(ids: Vec<u64>, vocab_size: u32, line: usize, field: &str) -> Result<TokenSeq> {
    if ids.is_empty() {
        return Err(Error::Parse {
            line,
            message: format!("`{field}` is empty"),
        });
    }
    let mut tokens = Vec::with_capacity(ids.len());
    for id in ids {
        if id >= u64::from(vocab_size) {
            return Err(Error::TokenOutOfRange {
                line,
                token: id,
                vocab_size,
            });
        }
        tokens.push(id as u32);
    }
    TokenSeq::new(tokens, vocab_size)
}

/// Parses one record. `line` is 1-based and only used for error context.
pub fn parse_line(
    text: &str,
    line: usize,
    vocab_size: u32,
    allow_duplicates: bool,
) -> Result<PreferenceTriple> {
    let rec: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let prompt = to_seq(rec.prompt, vocab_size, line, "prompt")?;
    let chosen = to_seq(rec.chosen, vocab_size, line, "chosen")?;
    let rejected = to_seq(rec.rejected, vocab_size, line, "rejected")?;
    if !allow_duplicates && chosen == rejected {
        return Err(Error::DuplicatePair { line });
    }
    Ok(PreferenceTriple {
        prompt,
        chosen,
        rejected,
        meta: rec.meta,
    })
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    vocab_size: u32,
    allow_duplicates: bool,
) -> Result<PreferenceDataset> {
    let path = path.as_ref();
    if vocab_size == 0 {
        return Err(Error::invalid("vocab_size must be positive"));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        triples.push(parse_line(&line, i + 1, vocab_size, allow_duplicates)?);
    }
    Ok(PreferenceDataset {
        triples,
        vocab_size,
        source_path: Some(path.to_path_buf()),
    })
}

pub fn format_triple(t: &PreferenceTriple) -> String {
    let widen = |s: &TokenSeq| s.tokens().iter().map(|&t| u64::from(t)).collect();
    let rec = Record {
        prompt: widen(&t.prompt),
        chosen: widen(&t.chosen),
        rejected: widen(&t.rejected),
        meta: t.meta.clone(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

pub fn write_triples<W: Write>(mut out: W, triples: &[PreferenceTriple]) -> std::io::Result<()> {
    for t in triples {
        writeln!(out, "{}", format_triple(t))?;
    }
    out.flush()
}

pub fn save_dataset(dataset: &PreferenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_triples(BufWriter::new(file), &dataset.triples).map_err(|e| Error::io(path, e))
}
