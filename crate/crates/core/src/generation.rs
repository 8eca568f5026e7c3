//! Role-conditioned response generation.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{detokenize, EncodedTurn, Role, TokenId, Vocabulary, BOT, EOT};
use crate::lda::TopicInference;
use crate::model::{Cursor, ModelError, ModelParams};
use crate::numerics::Scalar;

pub const DEFAULT_MAX_LEN: usize = 40;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("max_len must be at least 1")]
    BadMaxLen,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("the {0} variant needs a topic model for generation")]
    MissingTopicModel(crate::model::Variant),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GenerateError>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Strategy {
    #[default]
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub max_len: usize,
    pub strategy: Strategy,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_len: DEFAULT_MAX_LEN,
            strategy: Strategy::Greedy,
        }
    }
}

/// A conversation in progress. Context turns are fed with [`observe`],
/// responses produced with [`generate`]; both advance the same LSTM state,
/// so successive calls continue one conversation.
///
/// [`observe`]: Generator::observe
/// [`generate`]: Generator::generate
pub struct Generator<'a, T> {
    cursor: Cursor<'a, T>,
    topics: Option<TopicInference<'a>>,
    history: Vec<EncodedTurn>,
    config: GenerateConfig,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Generator<'a, T> {
    pub fn new(
        params: &'a ModelParams<T>,
        topics: Option<TopicInference<'a>>,
        config: GenerateConfig,
    ) -> Result<Self> {
        if config.max_len < 1 {
            return Err(GenerateError::BadMaxLen);
        }
        let rng = match config.strategy {
            Strategy::Greedy => None,
            Strategy::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(GenerateError::BadTemperature(temperature));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
        };
        if params.variant.uses_topics() && topics.is_none() {
            return Err(GenerateError::MissingTopicModel(params.variant));
        }
        Ok(Generator {
            cursor: Cursor::new(params),
            topics,
            history: Vec::new(),
            config,
            rng,
        })
    }

    pub fn history(&self) -> &[EncodedTurn] {
        &self.history
    }

    /// Feeds a context turn (framed with BOT/EOT).
    pub fn observe(&mut self, turn: EncodedTurn) -> Result<()> {
        self.cursor.feed_turn(&turn)?;
        self.history.push(turn);
        Ok(())
    }

    /// Emits one response under `role`'s output function. The returned
    /// words exclude BOT and EOT; the turn is appended to the history.
    pub fn generate(&mut self, role: Role) -> Result<Vec<TokenId>> {
        let s = self.topics.as_ref().map(|t| t.history(&self.history));
        self.cursor.feed(BOT)?;
        let mut words = Vec::new();
        while words.len() < self.config.max_len {
            let dist = self.cursor.distribution(s.as_ref(), role)?;
            let next = self.choose(dist.values());
            if next == EOT {
                break;
            }
            words.push(next);
            self.cursor.feed(next)?;
        }
        self.history.push(EncodedTurn::from_words(role, &words));
        Ok(words)
    }

    fn choose(&mut self, probs: &[T]) -> TokenId {
        let Some(rng) = self.rng.as_mut() else {
            return masked_argmax(probs);
        };
        let Strategy::Sample { temperature, .. } = self.config.strategy else {
            unreachable!("an rng exists only for sampling")
        };
        let weights: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| if i == BOT { 0.0 } else { p.as_f64().powf(1.0 / temperature) })
            .collect();
        match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            // every weight underflowed at a very low temperature
            Err(_) => masked_argmax(probs),
        }
    }
}

fn masked_argmax<T: Scalar>(probs: &[T]) -> TokenId {
    let mut best = if BOT == 0 { 1 } else { 0 };
    for (i, &p) in probs.iter().enumerate() {
        if i != BOT && p > probs[best] {
            best = i;
        }
    }
    best
}

/// Generates one response to `context` under `role`.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    context: &[EncodedTurn],
    role: Role,
    config: GenerateConfig,
    topics: Option<TopicInference<'_>>,
) -> Result<Vec<TokenId>> {
    let mut g = Generator::new(params, topics, config)?;
    for turn in context {
        g.observe(turn.clone())?;
    }
    g.generate(role)
}

/// Renders generated ids as text.
pub fn render(vocab: &Vocabulary, ids: &[TokenId]) -> String {
    detokenize(&vocab.decode(ids))
}
