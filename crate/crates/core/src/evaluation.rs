//! Perplexity and Recall@K response ranking.
//!
//! A ranking instance asks the model to pick the true turn `t` of a test
//! conversation, given turns `0..t`, out of ten candidates: the truth and
//! nine turns from other conversations whose length is within two tokens of
//! it. All candidates are scored under the true turn's role.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedConversation, EncodedTurn};
use crate::lda::{TopicInference, TopicVector};
use crate::model::{conversation_loss, Cursor, ModelError, ModelParams};
use crate::numerics::Scalar;

pub const CANDIDATES: usize = 10;
pub const NEGATIVES: usize = CANDIDATES - 1;
/// Largest allowed difference in word count between truth and negative.
pub const LENGTH_SLACK: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("ranking needs at least two conversations with turns")]
    EmptyPool,
    #[error("K must be between 1 and {CANDIDATES}, got {0}")]
    BadK(usize),
    #[error("candidate turn is empty")]
    EmptyCandidate,
    #[error("scorer returned {found} scores for {expected} candidates")]
    ScoreCount { expected: usize, found: usize },
    #[error("ranking cache line {line}: {message}")]
    Cache { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A conversation with its per-turn topic vectors (for topic variants).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub conversation: EncodedConversation,
    pub topics: Option<Vec<TopicVector>>,
}

impl Example {
    pub fn new(conversation: EncodedConversation, topics: Option<&TopicInference<'_>>) -> Self {
        let topics = topics.map(|t| t.conversation(&conversation));
        Example {
            conversation,
            topics,
        }
    }
}

/// Pairs each conversation with its topic vectors.
pub fn make_examples(conversations: Vec<EncodedConversation>, topics: Option<&TopicInference<'_>>) -> Vec<Example> {
    conversations
        .into_iter()
        .map(|c| Example::new(c, topics))
        .collect()
}

/// Summed loss and predicted-token count over a set.
pub fn corpus_loss<T: Scalar>(params: &ModelParams<T>, examples: &[Example]) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut count = 0;
    for ex in examples {
        let (l, n) = conversation_loss(params, &ex.conversation, ex.topics.as_deref())?;
        loss += l;
        count += n;
    }
    Ok((loss, count))
}

/// `exp(total loss / predicted tokens)` over the whole set.
pub fn perplexity<T: Scalar>(params: &ModelParams<T>, examples: &[Example]) -> Result<f64> {
    let (loss, count) = corpus_loss(params, examples)?;
    if count == 0 {
        return Err(EvalError::EmptySet);
    }
    Ok((loss / count as f64).exp())
}

/// Position of a turn within an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TurnRef {
    pub conversation: usize,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingInstance {
    /// Conversation whose turn is being predicted.
    pub conversation: usize,
    /// Index of the true turn; turns `0..turn` are the context.
    pub turn: usize,
    pub candidates: Vec<TurnRef>,
    pub truth_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingSet {
    pub instances: Vec<RankingInstance>,
    /// Instances dropped for lack of length-matched negatives.
    pub skipped: usize,
    pub seed: u64,
}

fn word_count(turn: &EncodedTurn) -> usize {
    turn.words().len()
}

/// One instance per turn index `t ≥ 1` of every conversation, with nine
/// negatives drawn uniformly from other conversations' turns of similar
/// length. Instances whose pool has fewer than nine such turns are skipped.
pub fn build_ranking_set(conversations: &[EncodedConversation], seed: u64) -> Result<RankingSet> {
    let mut by_length: BTreeMap<usize, Vec<TurnRef>> = BTreeMap::new();
    for (c, conv) in conversations.iter().enumerate() {
        for (t, turn) in conv.turns.iter().enumerate() {
            by_length.entry(word_count(turn)).or_default().push(TurnRef {
                conversation: c,
                turn: t,
            });
        }
    }
    let with_turns = conversations.iter().filter(|c| !c.turns.is_empty()).count();
    if with_turns < 2 {
        return Err(EvalError::EmptyPool);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    let mut skipped = 0;
    let mut pool: Vec<TurnRef> = Vec::new();
    for (c, conv) in conversations.iter().enumerate() {
        for t in 1..conv.turns.len() {
            let len = word_count(&conv.turns[t]);
            pool.clear();
            for refs in by_length.range(len.saturating_sub(LENGTH_SLACK)..=len + LENGTH_SLACK) {
                pool.extend(refs.1.iter().filter(|r| r.conversation != c));
            }
            if pool.len() < NEGATIVES {
                skipped += 1;
                continue;
            }
            let mut candidates: Vec<TurnRef> = index::sample(&mut rng, pool.len(), NEGATIVES)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let truth = TurnRef {
                conversation: c,
                turn: t,
            };
            candidates.push(truth);
            candidates.shuffle(&mut rng);
            let truth_index = candidates.iter().position(|r| *r == truth).expect("truth was inserted");
            instances.push(RankingInstance {
                conversation: c,
                turn: t,
                candidates,
                truth_index,
            });
        }
    }
    Ok(RankingSet {
        instances,
        skipped,
        seed,
    })
}

/// Log-probability of `candidate` (all of its tokens after BOT, EOT
/// included) following `context`, under the candidate's own role label.
/// `topic` is the vector summarizing `context`, for topic variants.
pub fn score_candidate<T: Scalar>(
    params: &ModelParams<T>,
    context: &[EncodedTurn],
    candidate: &EncodedTurn,
    topic: Option<&TopicVector>,
) -> Result<f64> {
    let mut cursor = Cursor::new(params);
    for turn in context {
        cursor.feed_turn(turn)?;
    }
    score_from(&cursor, candidate, topic)
}

fn score_from<T: Scalar>(cursor: &Cursor<'_, T>, candidate: &EncodedTurn, topic: Option<&TopicVector>) -> Result<f64> {
    if candidate.ids.len() < 2 {
        return Err(EvalError::EmptyCandidate);
    }
    let mut c = cursor.clone();
    Ok(c.observe_turn(candidate, topic)?)
}

/// Produces one score per candidate of an instance; higher is better.
pub trait Scorer {
    fn score(&self, instance: &RankingInstance) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&RankingInstance) -> Vec<f64>,
{
    fn score(&self, instance: &RankingInstance) -> Result<Vec<f64>> {
        Ok(self(instance))
    }
}

/// Scores candidates with a trained model.
pub struct ModelScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub conversations: &'a [EncodedConversation],
    pub topics: Option<TopicInference<'a>>,
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn score(&self, instance: &RankingInstance) -> Result<Vec<f64>> {
        let context = &self.conversations[instance.conversation].turns[..instance.turn];
        let role = self.conversations[instance.conversation].turns[instance.turn].role;
        let topic = self.topics.as_ref().map(|t| t.history(context));
        let mut cursor = Cursor::new(self.params);
        for turn in context {
            cursor.feed_turn(turn)?;
        }
        instance
            .candidates
            .iter()
            .map(|r| {
                let source = &self.conversations[r.conversation].turns[r.turn];
                let candidate = EncodedTurn {
                    role,
                    ids: source.ids.clone(),
                };
                score_from(&cursor, &candidate, topic.as_ref())
            })
            .collect()
    }
}

/// Scores every instance.
pub fn score_instances<S: Scorer>(scorer: &S, instances: &[RankingInstance]) -> Result<Vec<Vec<f64>>> {
    instances
        .iter()
        .map(|inst| {
            let s = scorer.score(inst)?;
            if s.len() != inst.candidates.len() {
                return Err(EvalError::ScoreCount {
                    expected: inst.candidates.len(),
                    found: s.len(),
                });
            }
            Ok(s)
        })
        .collect()
}

/// Whether the truth ranks within the top `k`. Equal scores favour the
/// lower candidate index; NaN ranks last.
pub fn truth_in_top_k(scores: &[f64], truth_index: usize, k: usize) -> bool {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let truth = key(scores[truth_index]);
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| key(s) > truth || (key(s) == truth && i < truth_index))
        .count();
    ahead < k
}

pub fn recall_from_scores(scores: &[Vec<f64>], instances: &[RankingInstance], k: usize) -> Result<f64> {
    if !(1..=CANDIDATES).contains(&k) {
        return Err(EvalError::BadK(k));
    }
    if instances.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let hits = scores
        .iter()
        .zip(instances)
        .filter(|(s, inst)| truth_in_top_k(s, inst.truth_index, k))
        .count();
    Ok(hits as f64 / instances.len() as f64)
}

/// Fraction of instances whose truth is among the `k` best-scored
/// candidates.
pub fn recall_at_k<S: Scorer>(scorer: &S, instances: &[RankingInstance], k: usize) -> Result<f64> {
    if !(1..=CANDIDATES).contains(&k) {
        return Err(EvalError::BadK(k));
    }
    let scores = score_instances(scorer, instances)?;
    recall_from_scores(&scores, instances, k)
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    conversation_id: String,
    t: usize,
    candidates: Vec<(String, usize)>,
    truth_index: usize,
    seed: u64,
}

/// Writes one line-delimited record per instance, with turns referenced by
/// conversation id and turn index.
pub fn write_ranking_cache<W: Write>(
    mut w: W,
    set: &RankingSet,
    conversations: &[EncodedConversation],
) -> std::io::Result<()> {
    for inst in &set.instances {
        let record = CacheRecord {
            conversation_id: conversations[inst.conversation].id.clone(),
            t: inst.turn,
            candidates: inst
                .candidates
                .iter()
                .map(|r| (conversations[r.conversation].id.clone(), r.turn))
                .collect(),
            truth_index: inst.truth_index,
            seed: set.seed,
        };
        serde_json::to_writer(&mut w, &record)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_ranking_cache<R: BufRead>(r: R, conversations: &[EncodedConversation]) -> Result<RankingSet> {
    let ids: BTreeMap<&str, usize> = conversations
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let mut instances = Vec::new();
    let mut seed = 0;
    for (n, line) in r.lines().enumerate() {
        let bad = |message: String| EvalError::Cache { line: n + 1, message };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let lookup = |id: &str, t: usize| -> Result<TurnRef> {
            let c = *ids
                .get(id)
                .ok_or_else(|| bad(format!("unknown conversation '{id}'")))?;
            if t >= conversations[c].turns.len() {
                return Err(bad(format!("conversation '{id}' has no turn {t}")));
            }
            Ok(TurnRef {
                conversation: c,
                turn: t,
            })
        };
        let own = lookup(&rec.conversation_id, rec.t)?;
        let candidates = rec
            .candidates
            .iter()
            .map(|(id, t)| lookup(id, *t))
            .collect::<Result<Vec<_>>>()?;
        if candidates.get(rec.truth_index) != Some(&own) {
            return Err(bad("truth_index does not point at the true turn".into()));
        }
        seed = rec.seed;
        instances.push(RankingInstance {
            conversation: own.conversation,
            turn: own.turn,
            candidates,
            truth_index: rec.truth_index,
        });
    }
    Ok(RankingSet {
        instances,
        skipped: 0,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub model: String,
    pub k: usize,
    pub recall: f64,
    pub instances: usize,
    pub skipped: usize,
}

/// Tab-separated results table with a header row.
pub fn format_recall_table(rows: &[RecallRow]) -> String {
    let mut out = String::from("model\tK\trecall\tn_instances\tn_skipped\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{:.4}\t{}\t{}", r.model, r.k, r.recall, r.instances, r.skipped)
            .expect("writing to a String");
    }
    out
}
