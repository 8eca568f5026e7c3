//! Conversation ingestion, tokenization, vocabulary construction, id
//! encoding and the per-role word likelihood-ratio analysis.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

pub const UNK: TokenId = 0;
pub const BOT: TokenId = 1;
pub const EOT: TokenId = 2;
pub const RESERVED: [&str; 3] = ["<unk>", "<bot>", "<eot>"];

pub const VOCAB_HEADER: &str = "RCLM-VOCAB 1";

/// Emoticons that survive tokenization verbatim (no lowercasing, no split).
pub const EMOTICONS: [&str; 6] = [":)", ":(", ";)", ":D", ":P", "^^"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size must be at least 1")]
    InvalidMaxSize,
    #[error("no word occurs more than {0} times")]
    NoWordPassesMinCount(u64),
    #[error("vocabulary file line {line}: {message}")]
    VocabFormat { line: usize, message: String },
    #[error("encoded corpus line {line}: {message}")]
    EncodedFormat { line: usize, message: String },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Poster,
    Responder,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Poster, Role::Responder];

    pub fn index(self) -> usize {
        match self {
            Role::Poster => 0,
            Role::Responder => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Poster => "poster",
            Role::Responder => "responder",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poster" => Ok(Role::Poster),
            "responder" => Ok(Role::Responder),
            other => Err(format!("unknown role '{other}' (expected poster or responder)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A turn as ids, framed as `[BOT, words..., EOT]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedTurn {
    pub role: Role,
    pub ids: Vec<TokenId>,
}

impl EncodedTurn {
    /// Frames `words` with BOT/EOT.
    pub fn from_words(role: Role, words: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOT);
        ids.extend_from_slice(words);
        ids.push(EOT);
        EncodedTurn { role, ids }
    }

    /// The ids between the BOT/EOT frame.
    pub fn words(&self) -> &[TokenId] {
        let start = usize::from(self.ids.first() == Some(&BOT));
        let end = if self.ids.len() > start && self.ids.last() == Some(&EOT) {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[start..end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedConversation {
    pub id: String,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedConversation {
    /// Number of predicted positions: every framed token except each BOT.
    pub fn predicted_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.ids.len().saturating_sub(1)).sum()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Rule-based tokenizer: lowercases words, splits on whitespace, keeps
/// word-internal apostrophes, keeps maximal punctuation runs whole and passes
/// [`EMOTICONS`] through untouched.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if EMOTICONS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let start = i;
            if is_word_char(chars[i]) {
                while i < chars.len() {
                    let inner_apostrophe =
                        chars[i] == '\'' && i + 1 < chars.len() && is_word_char(chars[i + 1]);
                    if !is_word_char(chars[i]) && !inner_apostrophe {
                        break;
                    }
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                out.push(word.to_lowercase());
            } else {
                while i < chars.len() && !is_word_char(chars[i]) {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
            }
        }
    }
    out
}

/// Space-joins tokens, attaching punctuation runs to the preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let punct = !EMOTICONS.contains(&tok) && !tok.chars().any(is_word_char);
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Deserialize)]
struct RawTurn {
    role: Role,
    text: String,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRecord {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub conversations: Vec<Conversation>,
    pub malformed: Vec<MalformedRecord>,
    pub dropped_turns: usize,
    pub filtered_out: usize,
}

/// Reads line-delimited conversation records, tokenizes every turn and keeps
/// conversations whose turn count lies in `[min_turns, max_turns]`.
pub fn ingest(path: &Path, min_turns: usize, max_turns: usize) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    ingest_reader(BufReader::new(file), min_turns, max_turns).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(reader: R, min_turns: usize, max_turns: usize) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(Path::new("<reader>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("line {line_no}: skipping malformed record: {e}");
                out.malformed.push(MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let mut turns = Vec::with_capacity(record.turns.len());
        for raw in record.turns {
            let tokens = tokenize(&raw.text);
            if tokens.is_empty() {
                log::warn!("line {line_no}: conversation {}: dropping empty turn", record.id);
                out.dropped_turns += 1;
                continue;
            }
            turns.push(Turn {
                role: raw.role,
                tokens,
            });
        }
        if (min_turns..=max_turns).contains(&turns.len()) {
            out.conversations.push(Conversation {
                id: record.id,
                turns,
            });
        } else {
            out.filtered_out += 1;
        }
    }
    if !out.malformed.is_empty() {
        log::warn!("skipped {} malformed records", out.malformed.len());
    }
    Ok(out)
}

/// Token ↔ id map with reserved `<unk>`, `<bot>` and `<eot>` entries at
/// ids 0, 1 and 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent tokens, breaking count ties
    /// lexicographically.
    pub fn build(conversations: &[Conversation], max_size: usize) -> Result<Self> {
        if max_size < 1 {
            return Err(CorpusError::InvalidMaxSize);
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for conv in conversations {
            for turn in &conv.turns {
                for tok in &turn.tokens {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string())))
    }

    /// Builds from non-reserved tokens, in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps ids back to strings, dropping BOT/EOT.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != BOT && id != EOT)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{VOCAB_HEADER}")?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let bad = |line, message: &str| CorpusError::VocabFormat {
            line,
            message: message.to_string(),
        };
        let io = |e| CorpusError::io(Path::new("<vocab>"), e);
        let header = lines.next().transpose().map_err(io)?;
        if header.as_deref().map(str::trim_end) != Some(VOCAB_HEADER) {
            return Err(bad(1, "missing RCLM-VOCAB 1 header"));
        }
        let mut tokens = Vec::new();
        for line in lines {
            tokens.push(line.map_err(io)?);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(bad(2, "reserved tokens missing"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(bad(i + 2, "duplicate token"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| CorpusError::io(path, e))?;
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Self::read(file)
    }
}

/// Frames every turn as `[BOT, ids..., EOT]`, mapping unknown tokens to UNK.
pub fn encode(conversation: &Conversation, vocab: &Vocabulary) -> EncodedConversation {
    EncodedConversation {
        id: conversation.id.clone(),
        turns: conversation
            .turns
            .iter()
            .map(|t| EncodedTurn::from_words(t.role, &vocab.encode_tokens(&t.tokens)))
            .collect(),
    }
}

pub fn write_encoded(path: &Path, conversations: &[EncodedConversation]) -> Result<()> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for conv in conversations {
        serde_json::to_writer(&mut w, conv).expect("encoded conversations serialize");
        writeln!(w).map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn read_encoded(path: &Path) -> Result<Vec<EncodedConversation>> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let conv = serde_json::from_str(&line).map_err(|e| CorpusError::EncodedFormat {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(conv);
    }
    Ok(out)
}

/// One word's add-one smoothed `p(w | poster) / p(w | responder)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordRatio {
    pub word: String,
    pub count: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleWordLists {
    /// Words most characteristic of posters, highest ratio first.
    pub poster: Vec<WordRatio>,
    /// Words most characteristic of responders, lowest ratio first.
    pub responder: Vec<WordRatio>,
}

/// Ratios for every word whose total count exceeds `min_count`, sorted by
/// word.
pub fn role_word_ratios(conversations: &[Conversation], min_count: u64) -> Result<Vec<WordRatio>> {
    let mut counts: BTreeMap<&str, [u64; 2]> = BTreeMap::new();
    let mut totals = [0u64; 2];
    for conv in conversations {
        for turn in &conv.turns {
            let r = turn.role.index();
            for tok in &turn.tokens {
                counts.entry(tok.as_str()).or_default()[r] += 1;
                totals[r] += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let types = counts.len() as f64;
    let ratios: Vec<WordRatio> = counts
        .into_iter()
        .filter(|(_, c)| c[0] + c[1] > min_count)
        .map(|(w, c)| {
            let p_poster = (c[0] as f64 + 1.0) / (totals[0] as f64 + types);
            let p_responder = (c[1] as f64 + 1.0) / (totals[1] as f64 + types);
            WordRatio {
                word: w.to_string(),
                count: c[0] + c[1],
                ratio: p_poster / p_responder,
            }
        })
        .collect();
    if ratios.is_empty() {
        return Err(CorpusError::NoWordPassesMinCount(min_count));
    }
    Ok(ratios)
}

/// The `top_n` words leaning most towards each role. A word appears in the
/// poster list only if its ratio exceeds 1 and in the responder list only if
/// it is below 1, so the lists never overlap. Ratio ties break by word.
pub fn role_likelihood_ratio(
    conversations: &[Conversation],
    min_count: u64,
    top_n: usize,
) -> Result<RoleWordLists> {
    let ratios = role_word_ratios(conversations, min_count)?;
    let by_ratio = |desc: bool| {
        move |a: &WordRatio, b: &WordRatio| {
            let ord = a.ratio.partial_cmp(&b.ratio).unwrap_or(Ordering::Equal);
            (if desc { ord.reverse() } else { ord }).then_with(|| a.word.cmp(&b.word))
        }
    };
    let mut poster: Vec<WordRatio> = ratios.iter().filter(|w| w.ratio > 1.0).cloned().collect();
    poster.sort_by(by_ratio(true));
    poster.truncate(top_n);
    let mut responder: Vec<WordRatio> = ratios.into_iter().filter(|w| w.ratio < 1.0).collect();
    responder.sort_by(by_ratio(false));
    responder.truncate(top_n);
    Ok(RoleWordLists { poster, responder })
}
