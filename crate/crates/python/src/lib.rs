//! Python bindings: corpus preparation, topic models, training, evaluation
//! and generation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use convlm::corpus::{self, EncodedConversation, EncodedTurn, Role};
use convlm::evaluation::{build_ranking_set, make_examples, perplexity, recall_at_k, ModelScorer};
use convlm::generation::{GenerateConfig, Generator, Strategy};
use convlm::lda::{self, LdaConfig, TopicInference};
use convlm::model::Variant;
use convlm::training::{self, Checkpoint, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_role(role: &str) -> PyResult<Role> {
    role.parse().map_err(value_err)
}

/// Splits text into tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text)
}

/// Joins tokens back into text.
#[pyfunction]
fn detokenize(tokens: Vec<String>) -> String {
    corpus::detokenize(&tokens)
}

#[pyclass(frozen, name = "Vocabulary", module = "pyconvlm")]
struct PyVocabulary {
    inner: corpus::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Builds a vocabulary from a raw line-delimited JSON corpus.
    #[staticmethod]
    #[pyo3(signature = (path, max_size=20000, min_turns=6, max_turns=20))]
    fn build(path: PathBuf, max_size: usize, min_turns: usize, max_turns: usize) -> PyResult<Self> {
        let ingested = corpus::ingest(&path, min_turns, max_turns).map_err(io_err)?;
        let inner = corpus::Vocabulary::build(&ingested.conversations, max_size).map_err(value_err)?;
        Ok(PyVocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: corpus::Vocabulary::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Id of a token; unknown tokens map to the UNK id.
    fn id(&self, token: &str) -> usize {
        self.inner.id(token)
    }

    fn token(&self, id: usize) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode_tokens(&corpus::tokenize(text))
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        corpus::detokenize(&self.inner.decode(&ids))
    }
}

/// Encoded conversations.
#[pyclass(frozen, name = "Corpus", module = "pyconvlm")]
struct PyCorpus {
    conversations: Vec<EncodedConversation>,
}

#[pymethods]
impl PyCorpus {
    /// Ingests and encodes a raw line-delimited JSON corpus.
    #[staticmethod]
    #[pyo3(signature = (path, vocab, min_turns=6, max_turns=20))]
    fn from_jsonl(path: PathBuf, vocab: &PyVocabulary, min_turns: usize, max_turns: usize) -> PyResult<Self> {
        let ingested = corpus::ingest(&path, min_turns, max_turns).map_err(io_err)?;
        Ok(PyCorpus {
            conversations: ingested
                .conversations
                .iter()
                .map(|c| corpus::encode(c, &vocab.inner))
                .collect(),
        })
    }

    /// Loads an encoded corpus written by `prepare`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            conversations: corpus::read_encoded(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_encoded(&path, &self.conversations).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.conversations.len()
    }

    /// Turns of one conversation as `(role, word ids)` pairs.
    fn turns(&self, index: usize) -> PyResult<Vec<(String, Vec<usize>)>> {
        let conv = self
            .conversations
            .get(index)
            .ok_or_else(|| value_err(format!("conversation {index} out of range")))?;
        Ok(conv
            .turns
            .iter()
            .map(|t| (t.role.to_string(), t.words().to_vec()))
            .collect())
    }
}

#[pyclass(frozen, name = "TopicModel", module = "pyconvlm")]
struct PyTopicModel {
    inner: lda::TopicModel,
}

#[pymethods]
impl PyTopicModel {
    /// Collapsed Gibbs sampling over one bag of words per conversation.
    #[staticmethod]
    #[pyo3(signature = (corpus, vocab_size, topics, iterations=200, alpha=None, beta=0.01, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        corpus: &PyCorpus,
        vocab_size: usize,
        topics: usize,
        iterations: usize,
        alpha: Option<f64>,
        beta: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut config = LdaConfig::new(topics);
        config.iterations = iterations;
        if let Some(a) = alpha {
            config.alpha = a;
        }
        config.beta = beta;
        config.seed = seed;
        let convs = &corpus.conversations;
        let inner = py
            .detach(|| lda::train_lda(convs, vocab_size, &config))
            .map_err(value_err)?;
        Ok(PyTopicModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTopicModel {
            inner: lda::TopicModel::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    #[getter]
    fn topics(&self) -> usize {
        self.inner.topics()
    }

    fn top_words(&self, topic: usize, n: usize) -> PyResult<Vec<usize>> {
        if topic >= self.inner.topics() {
            return Err(value_err(format!("topic {topic} out of range")));
        }
        Ok(self.inner.top_words(topic, n))
    }

    /// Topic proportions of a bag of word ids.
    #[pyo3(signature = (ids, sweeps=50, seed=0))]
    fn infer(&self, ids: Vec<usize>, sweeps: usize, seed: u64) -> Vec<f64> {
        lda::infer_topic(&self.inner, &ids, sweeps, seed).values().to_vec()
    }
}

#[pyclass(frozen, name = "Model", module = "pyconvlm")]
struct PyModel {
    checkpoint: Checkpoint,
}

impl PyModel {
    fn inference<'a>(&self, topic_model: Option<&'a PyTopicModel>) -> PyResult<Option<TopicInference<'a>>> {
        let config = &self.checkpoint.config;
        if !config.variant.uses_topics() {
            return Ok(None);
        }
        let model = topic_model
            .ok_or_else(|| value_err(format!("the {} variant needs a topic model", config.variant)))?;
        if model.inner.topics() != config.topics {
            return Err(value_err(format!(
                "topic model has {} topics but the model expects {}",
                model.inner.topics(),
                config.topics
            )));
        }
        Ok(Some(TopicInference::new(&model.inner, config.topic_sweeps, config.topic_seed)))
    }
}

#[pymethods]
impl PyModel {
    /// Trains with SGD, selecting the epoch with the best dev perplexity.
    #[staticmethod]
    #[pyo3(signature = (
        variant, train, dev, vocab_size, k, h, topic_model=None, lr=0.1, max_epochs=20,
        patience=3, lr_halving=true, seed=1, topic_sweeps=50, topic_seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        variant: &str,
        train: &PyCorpus,
        dev: &PyCorpus,
        vocab_size: usize,
        k: usize,
        h: usize,
        topic_model: Option<&PyTopicModel>,
        lr: f64,
        max_epochs: usize,
        patience: usize,
        lr_halving: bool,
        seed: u64,
        topic_sweeps: usize,
        topic_seed: u64,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(value_err)?;
        let topics = match (variant.uses_topics(), topic_model) {
            (false, _) => 0,
            (true, Some(m)) => m.inner.topics(),
            (true, None) => return Err(value_err(format!("the {variant} variant needs a topic model"))),
        };
        let config = TrainConfig {
            lr,
            max_epochs,
            patience,
            lr_halving,
            seed,
            topic_sweeps,
            topic_seed,
            ..TrainConfig::new(variant, vocab_size, k, h, topics)
        };
        let inference = topic_model
            .filter(|_| variant.uses_topics())
            .map(|m| TopicInference::new(&m.inner, topic_sweeps, topic_seed));
        let (train, dev) = (&train.conversations, &dev.conversations);
        let outcome = py
            .detach(|| {
                let train = make_examples(train.clone(), inference.as_ref());
                let dev = make_examples(dev.clone(), inference.as_ref());
                training::train_model(&config, &train, &dev)
            })
            .map_err(value_err)?;
        Ok(PyModel {
            checkpoint: outcome.checkpoint,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            checkpoint: training::load_checkpoint(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.checkpoint, &path).map_err(io_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.checkpoint.config.variant.to_string()
    }

    #[getter]
    fn dev_perplexity(&self) -> f64 {
        self.checkpoint.dev_perplexity
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.checkpoint.epoch
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.checkpoint.params.parameter_count()
    }

    #[pyo3(signature = (corpus, topic_model=None))]
    fn perplexity(&self, py: Python<'_>, corpus: &PyCorpus, topic_model: Option<&PyTopicModel>) -> PyResult<f64> {
        let inference = self.inference(topic_model)?;
        let convs = &corpus.conversations;
        let params = &self.checkpoint.params;
        py.detach(|| perplexity(params, &make_examples(convs.clone(), inference.as_ref())))
            .map_err(value_err)
    }

    /// Recall@K for each K in `ks` on a freshly sampled ranking set.
    #[pyo3(signature = (corpus, ks=vec![1, 2], seed=1, topic_model=None))]
    fn recall(
        &self,
        py: Python<'_>,
        corpus: &PyCorpus,
        ks: Vec<usize>,
        seed: u64,
        topic_model: Option<&PyTopicModel>,
    ) -> PyResult<Vec<f64>> {
        let topics = self.inference(topic_model)?;
        let convs = &corpus.conversations;
        let params = &self.checkpoint.params;
        py.detach(|| -> convlm::evaluation::Result<Vec<f64>> {
            let set = build_ranking_set(convs, seed)?;
            let scorer = ModelScorer {
                params,
                conversations: convs,
                topics,
            };
            ks.iter().map(|&k| recall_at_k(&scorer, &set.instances, k)).collect()
        })
        .map_err(value_err)
    }

    /// Generates a response under `role` after `context`, a list of
    /// `(role, word ids)` turns. Greedy unless `temperature` is given.
    #[pyo3(signature = (context, role, max_len=40, temperature=None, seed=1, topic_model=None))]
    fn generate(
        &self,
        context: Vec<(String, Vec<usize>)>,
        role: &str,
        max_len: usize,
        temperature: Option<f64>,
        seed: u64,
        topic_model: Option<&PyTopicModel>,
    ) -> PyResult<Vec<usize>> {
        let strategy = match temperature {
            None => Strategy::Greedy,
            Some(temperature) => Strategy::Sample { temperature, seed },
        };
        let config = GenerateConfig { max_len, strategy };
        let mut g = Generator::new(&self.checkpoint.params, self.inference(topic_model)?, config).map_err(value_err)?;
        for (r, ids) in context {
            g.observe(EncodedTurn::from_words(parse_role(&r)?, &ids)).map_err(value_err)?;
        }
        g.generate(parse_role(role)?).map_err(value_err)
    }
}

#[pymodule]
fn pyconvlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTopicModel>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
