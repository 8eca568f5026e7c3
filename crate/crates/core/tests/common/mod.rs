//! Synthetic corpora with planted structure, shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use convlm::corpus::{self, Conversation, EncodedConversation, Vocabulary};

pub const ROLE_WORDS: usize = 10;
pub const SHARED_WORDS: usize = 30;

pub fn poster_words() -> Vec<String> {
    (0..ROLE_WORDS).map(|i| format!("ask{i}")).collect()
}

pub fn responder_words() -> Vec<String> {
    (0..ROLE_WORDS).map(|i| format!("tell{i}")).collect()
}

pub fn shared_words() -> Vec<String> {
    (0..SHARED_WORDS).map(|i| format!("w{i}")).collect()
}

pub fn topic_words(topic: usize, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("top{topic}x{j}")).collect()
}

/// How each word of a turn is drawn.
#[derive(Debug, Clone, Copy)]
pub struct Mix {
    /// Probability of a word from the speaker's role set.
    pub role: f64,
    /// Probability of a word from the conversation's topic set.
    pub topic: f64,
    /// Number of planted topics (0 disables topics).
    pub topics: usize,
    pub topic_size: usize,
}

pub const ROLE_MIX: Mix = Mix {
    role: 0.6,
    topic: 0.0,
    topics: 0,
    topic_size: 0,
};

/// Topic evidence is sparse and spread over a large vocabulary, so it has
/// to be pooled across the whole history.
pub const ROLE_TOPIC_MIX: Mix = Mix {
    role: 0.3,
    topic: 0.25,
    topics: 10,
    topic_size: 20,
};

/// Raw line-delimited JSON records. The first turn is the poster's; later
/// speakers are drawn at random so the role cannot be read off the turn
/// position.
pub fn planted_records(n: usize, mix: Mix, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poster = poster_words();
    let responder = responder_words();
    let shared = shared_words();
    (0..n)
        .map(|i| {
            let topic = (mix.topics > 0).then(|| topic_words(rng.gen_range(0..mix.topics), mix.topic_size));
            let turns: Vec<_> = (0..rng.gen_range(6..=9))
                .map(|t| {
                    let is_poster = t == 0 || rng.gen_bool(0.5);
                    let own = if is_poster { &poster } else { &responder };
                    let words: Vec<&str> = (0..rng.gen_range(3..=6))
                        .map(|_| {
                            let u: f64 = rng.gen();
                            let set = if u < mix.role {
                                own
                            } else if u < mix.role + mix.topic {
                                topic.as_ref().expect("topic mix without topics")
                            } else {
                                &shared
                            };
                            set.choose(&mut rng).expect("non-empty word set").as_str()
                        })
                        .collect();
                    json!({"role": if is_poster { "poster" } else { "responder" }, "text": words.join(" ")})
                })
                .collect();
            json!({"id": format!("c{i}"), "turns": turns}).to_string()
        })
        .collect()
}

/// Poster turns open with "q!" and responder turns with "a!".
pub fn marker_records(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    (0..n)
        .map(|i| {
            let turns: Vec<_> = (0..rng.gen_range(6..=8))
                .map(|t| {
                    let is_poster = t == 0 || rng.gen_bool(0.5);
                    let mut text = String::from(if is_poster { "q!" } else { "a!" });
                    for _ in 0..rng.gen_range(2..=4) {
                        text.push(' ');
                        text.push_str(shared.choose(&mut rng).expect("non-empty"));
                    }
                    json!({"role": if is_poster { "poster" } else { "responder" }, "text": text})
                })
                .collect();
            json!({"id": format!("m{i}"), "turns": turns}).to_string()
        })
        .collect()
}

pub fn parse(records: &[String]) -> Vec<Conversation> {
    let text = records.join("\n");
    let ingested = corpus::ingest_reader(text.as_bytes(), 6, 20).expect("in-memory corpus");
    assert!(ingested.malformed.is_empty());
    ingested.conversations
}

/// Vocabulary from the first `n_train` conversations, and everything encoded.
pub fn encode_split(
    convs: &[Conversation],
    n_train: usize,
) -> (Vocabulary, Vec<EncodedConversation>, Vec<EncodedConversation>) {
    let vocab = Vocabulary::build(&convs[..n_train], 20000).expect("vocabulary");
    let enc: Vec<EncodedConversation> = convs.iter().map(|c| corpus::encode(c, &vocab)).collect();
    let dev = enc[n_train..].to_vec();
    let mut train = enc;
    train.truncate(n_train);
    (vocab, train, dev)
}

pub fn write_lines(path: &std::path::Path, lines: &[String]) {
    std::fs::write(path, lines.join("\n") + "\n").expect("write fixture");
}
