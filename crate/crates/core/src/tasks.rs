//! Synthetic classification and transduction tasks, plus token-file I/O.
//!
//! Token file format (UTF-8): one example per line,
//! `<source tokens> TAB <target>`, tokens separated by single spaces. The
//! target is a class id for classification files and a token sequence for
//! sequence files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const RESERVED: [&str; 2] = ["<unk>", "<bos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }
}

impl Vocab {
    /// Reserved symbols followed by `s0 .. s{n-1}`.
    pub fn synthetic(content: usize) -> Self {
        let mut v = Vocab::default();
        for i in 0..content {
            v.add(&format!("s{i}"));
        }
        v
    }

    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Deterministic 80/10/10 assignment from a content hash of the source.
    pub fn for_source(source: &[u32]) -> Split {
        let mut h = Sha256::new();
        for t in source {
            h.update(t.to_le_bytes());
        }
        match h.finalize()[0] % 10 {
            0..=7 => Split::Train,
            8 => Split::Dev,
            _ => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Class(usize),
    Sequence(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Target,
    pub split: Split,
}

impl Example {
    pub fn class(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            Target::Sequence(_) => None,
        }
    }

    pub fn sequence(&self) -> Option<&[u32]> {
        match &self.target {
            Target::Sequence(s) => Some(s),
            Target::Class(_) => None,
        }
    }

    /// `BOS` followed by all but the last target token.
    pub fn decoder_input(&self) -> Option<Vec<u32>> {
        self.sequence().map(|s| {
            let mut v = Vec::with_capacity(s.len());
            v.push(BOS);
            v.extend_from_slice(&s[..s.len().saturating_sub(1)]);
            v
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Seq2seq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Example> {
        self.examples.iter().filter(|e| e.split == split).cloned().collect()
    }

    pub fn max_len(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.source.len().max(e.sequence().map_or(0, <[u32]>::len)))
            .max()
            .unwrap_or(0)
    }

    /// Token strings of every example, for vocabulary-independent comparison.
    pub fn decoded(&self) -> Vec<(Vec<String>, String)> {
        let dec = |ids: &[u32]| -> Vec<String> {
            ids.iter()
                .map(|&i| self.vocab.token(i).unwrap_or(RESERVED[0]).to_string())
                .collect()
        };
        self.examples
            .iter()
            .map(|e| {
                let target = match &e.target {
                    Target::Class(c) => c.to_string(),
                    Target::Sequence(s) => dec(s).join(" "),
                };
                (dec(&e.source), target)
            })
            .collect()
    }
}

fn check_generation(size: usize, seq_len: usize, vocab_size: usize) -> Result<()> {
    if vocab_size < 4 {
        return Err(Error::Config(format!(
            "vocabulary of {vocab_size} symbols is degenerate (need >= 4)"
        )));
    }
    if size < 10 {
        return Err(Error::Config(format!("size {size} < 10")));
    }
    if seq_len < 4 {
        return Err(Error::Config(format!("seq_len {seq_len} < 4")));
    }
    Ok(())
}

/// The hidden rule behind [`gen_classification_task`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationRule {
    /// Content symbols (0-based, before the reserved offset) below this are "low".
    pub low_below: u32,
    pub trigram: [u32; 3],
}

impl ClassificationRule {
    pub fn from_seed(seed: u64, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7269_6c65);
        let low_below = (vocab_size / 2) as u32;
        let v = vocab_size as u32;
        let trigram = [
            rng.gen_range(0..low_below),
            rng.gen_range(low_below..v),
            rng.gen_range(0..v),
        ];
        ClassificationRule { low_below, trigram }
    }

    /// `1` iff (more low than high symbols) XOR (trigram present).
    /// `symbols` are content symbols without the reserved offset.
    pub fn label(&self, symbols: &[u32]) -> usize {
        let low = symbols.iter().filter(|&&s| s < self.low_below).count();
        let majority = 2 * low > symbols.len();
        let present = symbols.windows(3).any(|w| w == self.trigram);
        usize::from(majority ^ present)
    }
}

const OFFSET: u32 = RESERVED.len() as u32;

/// Balanced binary classification: label = majority-low XOR trigram present.
/// `vocab_size` counts content symbols; reserved ids come first.
pub fn gen_classification_task(seed: u64, size: usize, seq_len: usize, vocab_size: usize) -> Result<Dataset> {
    check_generation(size, seq_len, vocab_size)?;
    let rule = ClassificationRule::from_seed(seed, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(size);
    let v = vocab_size as u32;
    for i in 0..size {
        let want = i % 2;
        loop {
            let mut s: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(0..v)).collect();
            if rng.gen_bool(0.5) {
                let at = rng.gen_range(0..=seq_len - 3);
                s[at..at + 3].copy_from_slice(&rule.trigram);
            }
            if rule.label(&s) == want {
                let source: Vec<u32> = s.iter().map(|t| t + OFFSET).collect();
                let split = Split::for_source(&source);
                examples.push(Example {
                    source,
                    target: Target::Class(want),
                    split,
                });
                break;
            }
        }
    }
    Ok(Dataset {
        kind: TaskKind::Classification,
        vocab: Vocab::synthetic(vocab_size),
        examples,
        num_classes: 2,
        seed: Some(seed),
    })
}

/// Seeded involution over `0..n`: random disjoint transpositions (one fixed
/// point when `n` is odd).
pub fn involutive_permutation(seed: u64, n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7065_726d));
    let mut perm: Vec<u32> = (0..n as u32).collect();
    for pair in order.chunks_exact(2) {
        perm[pair[0] as usize] = pair[1];
        perm[pair[1] as usize] = pair[0];
    }
    perm
}

/// Reverse the source, then substitute each content symbol through `perm`.
pub fn transduce(source: &[u32], perm: &[u32]) -> Vec<u32> {
    source
        .iter()
        .rev()
        .map(|&t| match t.checked_sub(OFFSET) {
            Some(c) if (c as usize) < perm.len() => perm[c as usize] + OFFSET,
            _ => t,
        })
        .collect()
}

pub fn gen_seq2seq_task(seed: u64, size: usize, seq_len: usize, vocab_size: usize) -> Result<Dataset> {
    check_generation(size, seq_len, vocab_size)?;
    let perm = involutive_permutation(seed, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab_size as u32;
    let examples = (0..size)
        .map(|_| {
            let source: Vec<u32> = (0..seq_len).map(|_| rng.gen_range(0..v) + OFFSET).collect();
            let target = Target::Sequence(transduce(&source, &perm));
            let split = Split::for_source(&source);
            Example { source, target, split }
        })
        .collect();
    Ok(Dataset {
        kind: TaskKind::Seq2seq,
        vocab: Vocab::synthetic(vocab_size),
        examples,
        num_classes: 0,
        seed: Some(seed),
    })
}

#[derive(Debug, Clone)]
pub struct TokenFileFormat {
    pub kind: TaskKind,
    pub split: Split,
    /// Existing vocabulary to map against (unknown tokens become `<unk>`);
    /// `None` builds one from the file.
    pub vocab: Option<Vocab>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub lines: usize,
    pub unknown_tokens: usize,
}

pub fn load_token_file(path: impl AsRef<Path>, format: &TokenFileFormat) -> Result<(Dataset, IngestReport)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut vocab = format.vocab.clone().unwrap_or_default();
    let growing = format.vocab.is_none();
    let mut report = IngestReport::default();
    let mut examples = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut map = |tokens: &str, report: &mut IngestReport| -> Vec<u32> {
        tokens
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(|t| {
                if growing {
                    vocab.add(t)
                } else {
                    vocab.id(t).unwrap_or_else(|| {
                        report.unknown_tokens += 1;
                        UNK
                    })
                }
            })
            .collect()
    };

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(lineno, "missing TAB between source and target".into()))?;
        if tgt.contains('\t') {
            return Err(parse_err(lineno, "more than one TAB".into()));
        }
        let source = map(src, &mut report);
        if source.is_empty() {
            return Err(parse_err(lineno, "empty source".into()));
        }
        let target = match format.kind {
            TaskKind::Classification => Target::Class(
                tgt.trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("class id expected, got {tgt:?}")))?,
            ),
            TaskKind::Seq2seq => {
                let seq = map(tgt, &mut report);
                if seq.is_empty() {
                    return Err(parse_err(lineno, "empty target sequence".into()));
                }
                Target::Sequence(seq)
            }
        };
        report.lines += 1;
        examples.push(Example {
            source,
            target,
            split: format.split,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let num_classes = examples.iter().filter_map(Example::class).max().map_or(0, |c| c + 1);
    Ok((
        Dataset {
            kind: format.kind,
            vocab,
            examples,
            num_classes,
            seed: None,
        },
        report,
    ))
}

/// Writes the examples of `split` (all when `None`) in token-file format.
pub fn write_token_file(path: impl AsRef<Path>, data: &Dataset, split: Option<Split>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let dec = |ids: &[u32]| -> Result<String> {
        ids.iter()
            .map(|&i| {
                data.vocab
                    .token(i)
                    .ok_or_else(|| Error::Input(format!("token id {i} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.join(" "))
    };
    for e in data.examples.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let target = match &e.target {
            Target::Class(c) => c.to_string(),
            Target::Sequence(s) => dec(s)?,
        };
        writeln!(out, "{}\t{}", dec(&e.source)?, target)?;
    }
    out.flush()?;
    Ok(())
}
