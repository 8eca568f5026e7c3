//! Latent Dirichlet allocation by collapsed Gibbs sampling, and per-turn
//! inference of the topic vector summarizing a conversation's history.
//!
//! Each conversation is one training document. Bags of words exclude the
//! reserved ids (`<unk>`, `<bot>`, `<eot>`).

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EncodedConversation, EncodedTurn, TokenId, RESERVED};

pub const LDA_HEADER: &str = "RCLM-LDA 1";
pub const TOPIC_CACHE_HEADER: &str = "RCLM-TOPICS 1";

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_TRAIN_SWEEPS: usize = 200;
pub const DEFAULT_INFER_SWEEPS: usize = 50;

/// Fraction of the final inference sweeps whose proportions are averaged.
const AVERAGED_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("topic count must be at least 1")]
    NoTopics,
    #[error("{topics} topics requested but the corpus has only {distinct} distinct tokens")]
    TooManyTopics { topics: usize, distinct: usize },
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("alpha and beta must be positive")]
    BadHyperparameter,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("topic model format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, LdaError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaConfig {
    pub topics: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl LdaConfig {
    /// `alpha = 50 / M`, `beta = 0.01`, 200 sweeps, seed 0.
    pub fn new(topics: usize) -> Self {
        LdaConfig {
            topics,
            iterations: DEFAULT_TRAIN_SWEEPS,
            alpha: 50.0 / topics.max(1) as f64,
            beta: DEFAULT_BETA,
            seed: 0,
        }
    }
}

/// A length-M probability vector over topics.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicVector(Vec<f64>);

impl TopicVector {
    pub fn uniform(topics: usize) -> Self {
        TopicVector(vec![1.0 / topics as f64; topics])
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        TopicVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Trained topic-word distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    topics: usize,
    vocab_size: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    /// M × V, row-major.
    phi: Vec<f64>,
    /// Topic indices sorted by their φ rows; inference samples in this order
    /// so relabelling topics relabels the output and nothing else.
    canonical: Vec<usize>,
}

impl TopicModel {
    pub fn from_parts(
        topics: usize,
        vocab_size: usize,
        alpha: f64,
        beta: f64,
        seed: u64,
        phi: Vec<f64>,
    ) -> Result<Self> {
        if topics == 0 {
            return Err(LdaError::NoTopics);
        }
        if phi.len() != topics * vocab_size {
            return Err(LdaError::Format(format!(
                "expected {topics}x{vocab_size} topic-word weights, got {}",
                phi.len()
            )));
        }
        if phi.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(LdaError::Format("topic-word weights must be positive".into()));
        }
        let mut canonical: Vec<usize> = (0..topics).collect();
        canonical.sort_by(|&a, &b| {
            let ra = &phi[a * vocab_size..(a + 1) * vocab_size];
            let rb = &phi[b * vocab_size..(b + 1) * vocab_size];
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(TopicModel {
            topics,
            vocab_size,
            alpha,
            beta,
            seed,
            phi,
            canonical,
        })
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phi_row(&self, topic: usize) -> &[f64] {
        &self.phi[topic * self.vocab_size..(topic + 1) * self.vocab_size]
    }

    /// Returns the model with topic `k` moved to position `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut phi = vec![0.0; self.phi.len()];
        for (k, &to) in perm.iter().enumerate() {
            phi[to * self.vocab_size..(to + 1) * self.vocab_size].copy_from_slice(self.phi_row(k));
        }
        Self::from_parts(self.topics, self.vocab_size, self.alpha, self.beta, self.seed, phi)
    }

    /// The `n` highest-weight word ids of `topic`.
    pub fn top_words(&self, topic: usize, n: usize) -> Vec<TokenId> {
        let row = self.phi_row(topic);
        let mut ids: Vec<TokenId> = (0..self.vocab_size).collect();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        ids.truncate(n);
        ids
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{LDA_HEADER}")?;
        writeln!(w, "{}", self.topics)?;
        writeln!(w, "{}", self.vocab_size)?;
        writeln!(w, "{}", self.alpha)?;
        writeln!(w, "{}", self.beta)?;
        writeln!(w, "{}", self.seed)?;
        let mut line = String::new();
        for k in 0..self.topics {
            line.clear();
            for (i, p) in self.phi_row(k).iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{p}").expect("writing to a String");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| LdaError::Format(format!("missing {what}")))?
                .map_err(|e| LdaError::Format(e.to_string()))
        };
        if next("header")?.trim_end() != LDA_HEADER {
            return Err(LdaError::Format("missing RCLM-LDA 1 header".into()));
        }
        fn parse<T: std::str::FromStr>(s: String, what: &str) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| LdaError::Format(format!("bad {what}: '{s}'")))
        }
        let topics: usize = parse(next("M")?, "M")?;
        let vocab_size: usize = parse(next("V")?, "V")?;
        let alpha: f64 = parse(next("alpha")?, "alpha")?;
        let beta: f64 = parse(next("beta")?, "beta")?;
        let seed: u64 = parse(next("seed")?, "seed")?;
        let mut phi = Vec::with_capacity(topics * vocab_size);
        for k in 0..topics {
            let line = next("topic row")?;
            let before = phi.len();
            for tok in line.split_whitespace() {
                phi.push(parse::<f64>(tok.to_string(), "weight")?);
            }
            if phi.len() - before != vocab_size {
                return Err(LdaError::Format(format!("topic row {k} has wrong length")));
            }
        }
        Self::from_parts(topics, vocab_size, alpha, beta, seed, phi)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| LdaError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| LdaError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::read(file)
    }
}

fn is_content(id: TokenId) -> bool {
    id >= RESERVED.len()
}

/// Content-word ids of the given turns.
pub fn bag_of_turns(turns: &[EncodedTurn]) -> Vec<TokenId> {
    turns
        .iter()
        .flat_map(|t| t.ids.iter().copied())
        .filter(|&id| is_content(id))
        .collect()
}

pub fn conversation_bag(conv: &EncodedConversation) -> Vec<TokenId> {
    bag_of_turns(&conv.turns)
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64], total: f64) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Trains a topic model treating each conversation as one document.
pub fn train_lda(conversations: &[EncodedConversation], vocab_size: usize, config: &LdaConfig) -> Result<TopicModel> {
    let docs: Vec<Vec<TokenId>> = conversations.iter().map(conversation_bag).collect();
    train_lda_docs(&docs, vocab_size, config)
}

/// Collapsed Gibbs sampling over bag-of-id documents.
pub fn train_lda_docs(docs: &[Vec<TokenId>], vocab_size: usize, config: &LdaConfig) -> Result<TopicModel> {
    let m = config.topics;
    if m == 0 {
        return Err(LdaError::NoTopics);
    }
    if config.iterations == 0 {
        return Err(LdaError::NoIterations);
    }
    if !(config.alpha > 0.0 && config.beta > 0.0) {
        return Err(LdaError::BadHyperparameter);
    }
    if docs.iter().all(|d| d.is_empty()) {
        return Err(LdaError::EmptyCorpus);
    }
    let mut seen = vec![false; vocab_size];
    for &w in docs.iter().flatten() {
        if w >= vocab_size {
            return Err(LdaError::TokenOutOfRange {
                id: w,
                vocab: vocab_size,
            });
        }
        seen[w] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    if m > distinct {
        return Err(LdaError::TooManyTopics { topics: m, distinct });
    }

    let (alpha, beta) = (config.alpha, config.beta);
    let v_beta = vocab_size as f64 * beta;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut doc_topic = vec![0u32; docs.len() * m];
    let mut topic_word = vec![0u32; m * vocab_size];
    let mut topic_total = vec![0u32; m];
    let mut assign: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let z: Vec<usize> = doc.iter().map(|_| rng.gen_range(0..m)).collect();
        for (&w, &k) in doc.iter().zip(&z) {
            doc_topic[d * m + k] += 1;
            topic_word[k * vocab_size + w] += 1;
            topic_total[k] += 1;
        }
        assign.push(z);
    }

    let mut weights = vec![0.0; m];
    for _ in 0..config.iterations {
        for (d, doc) in docs.iter().enumerate() {
            let nd = &mut doc_topic[d * m..(d + 1) * m];
            for (i, &w) in doc.iter().enumerate() {
                let old = assign[d][i];
                nd[old] -= 1;
                topic_word[old * vocab_size + w] -= 1;
                topic_total[old] -= 1;
                let mut total = 0.0;
                for k in 0..m {
                    let p = (nd[k] as f64 + alpha) * (topic_word[k * vocab_size + w] as f64 + beta)
                        / (topic_total[k] as f64 + v_beta);
                    weights[k] = p;
                    total += p;
                }
                let new = sample_index(&mut rng, &weights, total);
                assign[d][i] = new;
                nd[new] += 1;
                topic_word[new * vocab_size + w] += 1;
                topic_total[new] += 1;
            }
        }
    }

    let mut phi = vec![0.0; m * vocab_size];
    for k in 0..m {
        let denom = topic_total[k] as f64 + v_beta;
        for w in 0..vocab_size {
            phi[k * vocab_size + w] = (topic_word[k * vocab_size + w] as f64 + beta) / denom;
        }
    }
    TopicModel::from_parts(m, vocab_size, alpha, beta, config.seed, phi)
}

/// Topic proportions of `bag` by Gibbs sampling with φ held fixed, averaged
/// over the final 20% of `sweeps`. An empty bag (after dropping reserved and
/// out-of-range ids) yields the uniform vector.
pub fn infer_topic(model: &TopicModel, bag: &[TokenId], sweeps: usize, seed: u64) -> TopicVector {
    let m = model.topics;
    let words: Vec<TokenId> = bag
        .iter()
        .copied()
        .filter(|&w| is_content(w) && w < model.vocab_size)
        .collect();
    if words.is_empty() {
        return TopicVector::uniform(m);
    }
    let sweeps = sweeps.max(1);
    let kept = ((sweeps as f64 * AVERAGED_FRACTION).ceil() as usize).clamp(1, sweeps);
    let alpha = model.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Sampling runs over canonical slots; slot j is topic canonical[j].
    let slot_phi: Vec<&[f64]> = model.canonical.iter().map(|&k| model.phi_row(k)).collect();
    let mut counts = vec![0u32; m];
    let mut assign: Vec<usize> = words
        .iter()
        .map(|_| {
            let j = rng.gen_range(0..m);
            counts[j] += 1;
            j
        })
        .collect();

    let mut acc = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let denom = words.len() as f64 + m as f64 * alpha;
    for sweep in 0..sweeps {
        for (i, &w) in words.iter().enumerate() {
            counts[assign[i]] -= 1;
            let mut total = 0.0;
            for j in 0..m {
                let p = (counts[j] as f64 + alpha) * slot_phi[j][w];
                weights[j] = p;
                total += p;
            }
            let j = sample_index(&mut rng, &weights, total);
            assign[i] = j;
            counts[j] += 1;
        }
        if sweep >= sweeps - kept {
            for j in 0..m {
                acc[j] += (counts[j] as f64 + alpha) / denom;
            }
        }
    }
    let mut out = vec![0.0; m];
    for (j, &k) in model.canonical.iter().enumerate() {
        out[k] = acc[j] / kept as f64;
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    TopicVector(out)
}

/// Seed used when inferring the history vector for the turn at `turn_index`.
pub fn turn_seed(seed: u64, turn_index: usize) -> u64 {
    seed ^ (turn_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Topic vector of the history preceding `turns.len()`, i.e. the vector used
/// when predicting the turn that follows `turns`.
pub fn history_topic(model: &TopicModel, turns: &[EncodedTurn], sweeps: usize, seed: u64) -> TopicVector {
    infer_topic(model, &bag_of_turns(turns), sweeps, turn_seed(seed, turns.len()))
}

/// One vector per turn; entry `t` summarizes turns `0..t` only.
pub fn context_topic_vectors(
    conversation: &EncodedConversation,
    model: &TopicModel,
    sweeps: usize,
    seed: u64,
) -> Vec<TopicVector> {
    (0..conversation.turns.len())
        .map(|t| history_topic(model, &conversation.turns[..t], sweeps, seed))
        .collect()
}

/// A topic model together with the inference settings used for every
/// history vector derived from it.
#[derive(Debug, Clone, Copy)]
pub struct TopicInference<'a> {
    pub model: &'a TopicModel,
    pub sweeps: usize,
    pub seed: u64,
}

impl<'a> TopicInference<'a> {
    pub fn new(model: &'a TopicModel, sweeps: usize, seed: u64) -> Self {
        TopicInference { model, sweeps, seed }
    }

    /// Vector summarizing `turns`, for predicting the turn after them.
    pub fn history(&self, turns: &[EncodedTurn]) -> TopicVector {
        history_topic(self.model, turns, self.sweeps, self.seed)
    }

    pub fn conversation(&self, conversation: &EncodedConversation) -> Vec<TopicVector> {
        context_topic_vectors(conversation, self.model, self.sweeps, self.seed)
    }
}

/// Writes per-turn topic vectors keyed by conversation id and turn index.
pub fn write_topic_cache<W: Write>(mut w: W, entries: &[(String, Vec<TopicVector>)]) -> std::io::Result<()> {
    writeln!(w, "{TOPIC_CACHE_HEADER}")?;
    let mut line = String::new();
    for (id, vectors) in entries {
        for (t, v) in vectors.iter().enumerate() {
            line.clear();
            write!(line, "{id}\t{t}\t").expect("writing to a String");
            for (i, x) in v.values().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{x}").expect("writing to a String");
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_topic_cache<R: Read>(r: R) -> Result<Vec<(String, Vec<TopicVector>)>> {
    let mut lines = BufReader::new(r).lines();
    let fmt = |m: String| LdaError::Format(m);
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == TOPIC_CACHE_HEADER => {}
        _ => return Err(fmt("missing RCLM-TOPICS 1 header".into())),
    }
    let mut out: Vec<(String, Vec<TopicVector>)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| fmt(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(t), Some(vals)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(fmt(format!("line {}: expected 3 tab-separated fields", n + 2)));
        };
        let t: usize = t.parse().map_err(|_| fmt(format!("line {}: bad turn index", n + 2)))?;
        let values = vals
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fmt(format!("line {}: bad value", n + 2)))?;
        match out.last_mut() {
            Some((last, vs)) if last == id && vs.len() == t => vs.push(TopicVector(values)),
            _ if t == 0 => out.push((id.to_string(), vec![TopicVector(values)])),
            _ => return Err(fmt(format!("line {}: turn indices out of order", n + 2))),
        }
    }
    Ok(out)
}
