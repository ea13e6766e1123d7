//! Instruction/response datasets: JSONL ingestion, the synthetic multi-task
//! generator, and character-level tokenization.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
const RESERVED: u32 = 4;

/// Marker that precedes the checkable answer in every response.
pub const ANSWER_MARKER: char = '=';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub instruction: String,
    pub response: String,
    pub source_tag: String,
}

#[derive(Deserialize)]
struct RawExample {
    id: Option<String>,
    instruction: String,
    response: String,
    source_tag: Option<String>,
}

/// Reads one example per line. Blank lines are skipped but still counted
/// for line numbering.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.instruction.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "instruction is empty".into(),
            });
        }
        out.push(Example {
            id: raw.id.unwrap_or_else(|| format!("line-{line_no}")),
            instruction: raw.instruction,
            response: raw.response,
            source_tag: raw.source_tag.unwrap_or_default(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).expect("example serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Algorithmic task families with disjoint skills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskFamily {
    Add,
    Reverse,
    Sort,
    Copy,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::Add,
        TaskFamily::Reverse,
        TaskFamily::Sort,
        TaskFamily::Copy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Add => "add",
            TaskFamily::Reverse => "reverse",
            TaskFamily::Sort => "sort",
            TaskFamily::Copy => "copy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::UnknownFamily(name.to_string()))
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> (String, String) {
        match self {
            TaskFamily::Add => {
                let a: u32 = rng.random_range(0..100);
                let b: u32 = rng.random_range(0..100);
                (format!("add {a} {b}"), format!("={}", a + b))
            }
            TaskFamily::Reverse => {
                let w = random_word(rng, b'a');
                let rev: String = w.chars().rev().collect();
                (format!("reverse {w}"), format!("={rev}"))
            }
            TaskFamily::Sort => {
                let w = random_word(rng, b'm');
                let mut chars: Vec<char> = w.chars().collect();
                chars.sort_unstable();
                let sorted: String = chars.into_iter().collect();
                (format!("sort {w}"), format!("={sorted}"))
            }
            TaskFamily::Copy => {
                let w = random_word(rng, b'A');
                (format!("copy {w}"), format!("={w};{w}"))
            }
        }
    }
}

/// 3 to 5 letters from the 12 starting at `first`. Each family draws from
/// its own range, so families also differ in their arguments.
fn random_word(rng: &mut ChaCha8Rng, first: u8) -> String {
    let len = rng.random_range(3..=5);
    (0..len)
        .map(|_| char::from(first + rng.random_range(0..12u8)))
        .collect()
}

/// Generates `count` examples per family, shuffled into one mixed list.
/// A pure function of `(task_mix, seed)`.
pub fn synth_generate(task_mix: &[(String, usize)], seed: u64) -> Result<Vec<Example>> {
    let families = task_mix
        .iter()
        .map(|(name, count)| {
            if *count == 0 {
                return Err(Error::Config(format!("family `{name}` has count 0")));
            }
            Ok((TaskFamily::from_name(name)?, *count))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (family, count) in families {
        for n in 0..count {
            let (instruction, response) = family.sample(&mut rng);
            out.push(Example {
                id: format!("{}-{n:05}", family.name()),
                instruction,
                response,
                source_tag: family.name().to_string(),
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Text after the final answer marker, trimmed. `None` if there is no marker.
pub fn extract_answer(text: &str) -> Option<&str> {
    text.rfind(ANSWER_MARKER)
        .map(|idx| text[idx + ANSWER_MARKER.len_utf8()..].trim())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Instr,
    Resp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of leading instruction tokens (BOS through SEP).
    pub fn instruction_len(&self) -> usize {
        self.roles.iter().take_while(|r| **r == Role::Instr).count()
    }

    /// The prefix holding only the instruction part.
    pub fn instruction_prefix(&self) -> TokenSequence {
        let n = self.instruction_len();
        TokenSequence {
            tokens: self.tokens[..n].to_vec(),
            roles: self.roles[..n].to_vec(),
        }
    }

    pub fn push(&mut self, token: u32, role: Role) {
        self.tokens.push(token);
        self.roles.push(role);
    }
}

/// Character-level vocabulary. Ids below 4 are reserved for PAD/BOS/EOS/SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    to_id: BTreeMap<char, u32>,
    to_symbol: Vec<char>,
}

impl Vocab {
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Self {
        let mut sorted: Vec<char> = symbols.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        let to_id = sorted
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32 + RESERVED))
            .collect();
        Vocab {
            to_id,
            to_symbol: sorted,
        }
    }

    /// All printable ASCII characters, space through tilde.
    pub fn printable_ascii() -> Self {
        Self::from_symbols((0x20u8..=0x7e).map(char::from))
    }

    /// Sorted set of every symbol appearing in the examples.
    pub fn from_corpus(examples: &[Example]) -> Self {
        Self::from_symbols(
            examples
                .iter()
                .flat_map(|e| e.instruction.chars().chain(e.response.chars())),
        )
    }

    pub fn size(&self) -> usize {
        self.to_symbol.len() + RESERVED as usize
    }

    pub fn id(&self, c: char) -> Result<u32> {
        self.to_id.get(&c).copied().ok_or(Error::UnknownSymbol(c))
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.to_symbol.get(i as usize))
            .copied()
    }

    pub fn symbols(&self) -> &[char] {
        &self.to_symbol
    }

    /// One symbol per line, sorted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for c in &self.to_symbol {
            writeln!(f, "{c}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut symbols = Vec::new();
        for (idx, line) in text.split('\n').enumerate() {
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (None, _) => continue,
                (Some(c), None) => symbols.push(c),
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("expected one symbol, got {line:?}"),
                    })
                }
            }
        }
        Ok(Self::from_symbols(symbols))
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().filter_map(|t| self.symbol(*t)).collect()
    }
}

/// Lays out `BOS instr SEP resp EOS`; an empty response yields a bare
/// prompt `BOS instr SEP`. Over-length sequences return `Error::OverLength`,
/// which callers treat as a discard signal.
pub fn tokenize(example: &Example, vocab: &Vocab, l_max: usize) -> Result<TokenSequence> {
    let mut seq = TokenSequence {
        tokens: Vec::new(),
        roles: Vec::new(),
    };
    seq.push(BOS, Role::Instr);
    for c in example.instruction.chars() {
        seq.push(vocab.id(c)?, Role::Instr);
    }
    seq.push(SEP, Role::Instr);
    if !example.response.is_empty() {
        for c in example.response.chars() {
            seq.push(vocab.id(c)?, Role::Resp);
        }
        seq.push(EOS, Role::Resp);
    }
    if seq.len() > l_max {
        return Err(Error::OverLength {
            len: seq.len(),
            max: l_max,
        });
    }
    Ok(seq)
}

/// Tokenizes a dataset, dropping over-length examples. Returns the kept
/// `(example index, sequence)` pairs and the number discarded.
pub fn tokenize_all(
    examples: &[Example],
    vocab: &Vocab,
    l_max: usize,
) -> Result<(Vec<(usize, TokenSequence)>, usize)> {
    let mut kept = Vec::with_capacity(examples.len());
    let mut discarded = 0;
    for (i, ex) in examples.iter().enumerate() {
        match tokenize(ex, vocab, l_max) {
            Ok(seq) => kept.push((i, seq)),
            Err(Error::OverLength { .. }) => discarded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, discarded))
}

/// Inverse of [`tokenize`]: returns `(instruction, response)`.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> (String, String) {
    let split = seq
        .tokens
        .iter()
        .position(|t| *t == SEP)
        .unwrap_or(seq.len());
    let instruction = vocab.decode(&seq.tokens[..split]);
    let response = vocab.decode(seq.tokens.get(split + 1..).unwrap_or(&[]));
    (instruction, response)
}
