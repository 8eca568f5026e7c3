//! SGD training with dev-set model selection, grid search, and the binary
//! checkpoint format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evaluation::{perplexity, EvalError, Example};
use crate::lda::DEFAULT_INFER_SWEEPS;
use crate::model::{accumulate_gradients, Dims, ModelError, ModelParams, Variant};
use crate::numerics::{sgd_step_in_place, NumericsError, Tensor, DEFAULT_CLIP};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged in epoch {epoch} on conversation '{conversation}'")]
    Diverged { epoch: usize, conversation: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("checkpoint inconsistent with its configuration: {0}")]
    Inconsistent(String),
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Word embedding size K.
    pub embed: usize,
    /// LSTM hidden size H.
    pub hidden: usize,
    /// Topic count M (topic variants only).
    pub topics: usize,
    /// Model vocabulary size V, reserved tokens included.
    pub vocab_size: usize,
    pub lr: f64,
    pub lr_halving: bool,
    pub clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub train_path: String,
    pub dev_path: String,
    pub vocab_path: String,
    pub lda_model: String,
    pub topic_sweeps: usize,
    pub topic_seed: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant, vocab_size: usize, embed: usize, hidden: usize, topics: usize) -> Self {
        TrainConfig {
            variant,
            embed,
            hidden,
            topics: if variant.uses_topics() { topics } else { 0 },
            vocab_size,
            lr: 0.1,
            lr_halving: true,
            clip: DEFAULT_CLIP,
            max_epochs: 20,
            patience: 3,
            seed: 1,
            train_path: String::new(),
            dev_path: String::new(),
            vocab_path: String::new(),
            lda_model: String::new(),
            topic_sweeps: DEFAULT_INFER_SWEEPS,
            topic_seed: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.vocab_size, self.embed, self.hidden, self.topics)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.embed < 1 || self.hidden < 1 {
            return bad("K and H must be at least 1");
        }
        if self.variant.uses_topics() && self.topics < 1 {
            return bad("topic variants need M >= 1");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("learning rate must be positive");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad("vocabulary is empty");
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("k", self.embed.to_string()),
            ("h", self.hidden.to_string()),
            ("m", self.topics.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_halving", self.lr_halving.to_string()),
            ("clip", self.clip.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("train", self.train_path.clone()),
            ("dev", self.dev_path.clone()),
            ("vocab", self.vocab_path.clone()),
            ("lda_model", self.lda_model.clone()),
            ("topic_sweeps", self.topic_sweeps.to_string()),
            ("topic_seed", self.topic_seed.to_string()),
        ]
    }

    fn from_pairs(map: &BTreeMap<String, String>) -> std::result::Result<Self, CheckpointError> {
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> std::result::Result<T, CheckpointError> {
            let raw = map
                .get(key)
                .ok_or_else(|| CheckpointError::Metadata(format!("missing key '{key}'")))?;
            raw.parse()
                .map_err(|_| CheckpointError::Metadata(format!("bad value for '{key}': '{raw}'")))
        }
        let text = |key: &str| map.get(key).cloned().unwrap_or_default();
        Ok(TrainConfig {
            variant: get(map, "variant")?,
            vocab_size: get(map, "vocab_size")?,
            embed: get(map, "k")?,
            hidden: get(map, "h")?,
            topics: get(map, "m")?,
            lr: get(map, "lr")?,
            lr_halving: get(map, "lr_halving")?,
            clip: get(map, "clip")?,
            max_epochs: get(map, "max_epochs")?,
            patience: get(map, "patience")?,
            seed: get(map, "seed")?,
            train_path: text("train"),
            dev_path: text("dev"),
            vocab_path: text("vocab"),
            lda_model: text("lda_model"),
            topic_sweeps: get(map, "topic_sweeps")?,
            topic_seed: get(map, "topic_seed")?,
        })
    }
}

/// A trained model with the configuration and selection statistics that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub dev_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_perplexity: f64,
    pub dev_perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Plain SGD, one update per conversation, in a seeded shuffled order.
/// After every epoch the dev perplexity is measured; when it fails to
/// improve the learning rate is halved (if enabled), and after `patience`
/// such epochs in a row training stops. Returns the best-dev parameters.
pub fn train_model(config: &TrainConfig, train: &[Example], dev: &[Example]) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if dev.is_empty() {
        return Err(TrainError::Eval(EvalError::EmptySet));
    }
    let mut params = ModelParams::<f32>::init(config.variant, config.dims(), config.seed)?;
    let mut grads = ModelParams::<f32>::zeros(config.variant, config.dims())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = config.lr;
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut predicted = 0;
        for &i in &order {
            let ex = &train[i];
            for (_, g) in grads.tensors_mut() {
                g.fill(0.0);
            }
            let l = accumulate_gradients(&params, &ex.conversation, ex.topics.as_deref(), &mut grads)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    conversation: ex.conversation.id.clone(),
                });
            }
            loss += l;
            predicted += ex.conversation.predicted_tokens();
            for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                sgd_step_in_place(p, g, lr, config.clip)?;
            }
        }
        if !params.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                conversation: "<parameters>".into(),
            });
        }
        let dev_ppl = perplexity(&params, dev)?;
        let train_ppl = (loss / predicted.max(1) as f64).exp();
        log::info!("epoch {epoch}: lr {lr} train ppl {train_ppl:.4} dev ppl {dev_ppl:.4}");
        log.push(EpochRecord {
            epoch,
            lr,
            train_perplexity: train_ppl,
            dev_perplexity: dev_ppl,
        });
        if !dev_ppl.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                conversation: "<dev set>".into(),
            });
        }
        if best.as_ref().is_none_or(|b| dev_ppl < b.dev_perplexity) {
            best = Some(Checkpoint {
                params: params.clone(),
                config: config.clone(),
                epoch,
                dev_perplexity: dev_ppl,
            });
            stale = 0;
        } else {
            stale += 1;
            if config.lr_halving {
                lr /= 2.0;
            }
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub embed: usize,
    pub hidden: usize,
    pub topics: usize,
    /// `None` when the run failed.
    pub dev_perplexity: Option<f64>,
    pub epochs: usize,
    pub parameters: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: Checkpoint,
    /// One row per grid point, ordered by (K, H, M).
    pub rows: Vec<GridRow>,
}

/// Training data for one topic count: the train and dev sets with their
/// topic vectors (if any), plus the LDA model path to record.
pub struct GridData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub lda_model: String,
}

/// Trains every (K, H, M) combination and keeps the lowest dev perplexity,
/// breaking ties by parameter count. `data_for(M)` supplies the examples
/// for each topic count (M is 0 for variants without topics). Failed grid
/// points are recorded and skipped. Up to `jobs` points train concurrently.
pub fn grid_search<F>(
    template: &TrainConfig,
    k_grid: &[usize],
    h_grid: &[usize],
    m_grid: &[usize],
    mut data_for: F,
    jobs: usize,
) -> Result<GridOutcome>
where
    F: FnMut(usize) -> Result<GridData>,
{
    let m_values: Vec<usize> = if template.variant.uses_topics() {
        m_grid.to_vec()
    } else {
        vec![0]
    };
    if k_grid.is_empty() || h_grid.is_empty() || m_values.is_empty() {
        return Err(TrainError::Config("grid has no points".into()));
    }
    let mut data: BTreeMap<usize, std::result::Result<GridData, String>> = BTreeMap::new();
    for &m in &m_values {
        data.insert(m, data_for(m).map_err(|e| e.to_string()));
    }
    let mut points = Vec::new();
    for &k in k_grid {
        for &h in h_grid {
            for &m in &m_values {
                points.push((k, h, m));
            }
        }
    }
    points.sort_unstable();
    points.dedup();

    type Slot = Option<(GridRow, Option<Checkpoint>)>;
    let results: Mutex<Vec<Slot>> = Mutex::new(vec![None; points.len()]);
    let next = AtomicUsize::new(0);
    let run_point = |&(k, h, m): &(usize, usize, usize)| -> (GridRow, Option<Checkpoint>) {
        let mut config = template.clone();
        config.embed = k;
        config.hidden = h;
        config.topics = m;
        let parameters = ModelParams::<f32>::zeros(config.variant, config.dims())
            .map(|p| p.parameter_count())
            .unwrap_or(0);
        let outcome = match &data[&m] {
            Ok(d) => {
                config.lda_model = d.lda_model.clone();
                train_model(&config, &d.train, &d.dev).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.clone()),
        };
        match outcome {
            Ok(o) => (
                GridRow {
                    embed: k,
                    hidden: h,
                    topics: m,
                    dev_perplexity: Some(o.checkpoint.dev_perplexity),
                    epochs: o.log.len(),
                    parameters,
                    error: None,
                },
                Some(o.checkpoint),
            ),
            Err(e) => {
                log::warn!("grid point K={k} H={h} M={m} failed: {e}");
                (
                    GridRow {
                        embed: k,
                        hidden: h,
                        topics: m,
                        dev_perplexity: None,
                        epochs: 0,
                        parameters,
                        error: Some(e),
                    },
                    None,
                )
            }
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = run_point(&points[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });

    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for (row, ckpt) in results.into_inner().expect("no worker panicked").into_iter().flatten() {
        if let (Some(ppl), Some(c)) = (row.dev_perplexity, ckpt) {
            let better = best
                .as_ref()
                .is_none_or(|(b, n, _)| ppl < *b || (ppl == *b && row.parameters < *n));
            if better {
                best = Some((ppl, row.parameters, c));
            }
        }
        rows.push(row);
    }
    let best = best
        .ok_or_else(|| TrainError::Config("every grid point failed".into()))?
        .2;
    Ok(GridOutcome { best, rows })
}

/// Tab-separated report: `K, H, M, dev_ppl, epochs`.
pub fn format_grid_report(rows: &[GridRow]) -> String {
    let mut out = String::from("K\tH\tM\tdev_ppl\tepochs\n");
    for r in rows {
        let ppl = r
            .dev_perplexity
            .map_or_else(|| "failed".to_string(), |p| format!("{p:.4}"));
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.embed, r.hidden, r.topics, ppl, r.epochs)
            .expect("writing to a String");
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a checkpoint: magic, version, length-prefixed `key=value`
/// metadata, then named f32 tensors.
pub fn checkpoint_bytes(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let mut meta = String::new();
    let mut pairs = checkpoint.config.to_pairs();
    pairs.push(("epoch", checkpoint.epoch.to_string()));
    pairs.push(("dev_ppl", checkpoint.dev_perplexity.to_string()));
    for (k, v) in pairs {
        writeln!(meta, "{k}={v}").expect("writing to a String");
    }
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(meta.as_bytes());
    for (name, t) in checkpoint.params.tensors() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.dims().len() as u32);
        for &d in t.dims() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| CheckpointError::Metadata("metadata is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in meta.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Metadata(format!("line without '=': '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let config = TrainConfig::from_pairs(&map)?;
    let parse_meta = |key: &str| -> std::result::Result<String, CheckpointError> {
        map.get(key)
            .cloned()
            .ok_or_else(|| CheckpointError::Metadata(format!("missing key '{key}'")))
    };
    let epoch: usize = parse_meta("epoch")?
        .parse()
        .map_err(|_| CheckpointError::Metadata("bad epoch".into()))?;
    let dev_perplexity: f64 = parse_meta("dev_ppl")?
        .parse()
        .map_err(|_| CheckpointError::Metadata("bad dev_ppl".into()))?;

    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Metadata("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, data)
            .map_err(|e| CheckpointError::Inconsistent(format!("tensor '{name}': {e}")))?;
        tensors.push((name, t));
    }
    let params = ModelParams::from_named(config.variant, config.dims(), tensors)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    Ok(Checkpoint {
        params,
        config,
        epoch,
        dev_perplexity,
    })
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> std::result::Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&checkpoint_bytes(checkpoint)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?)
        .read_to_end(&mut bytes)
        .map_err(io)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EncodedConversation, EncodedTurn, Role, TokenId};
    use crate::evaluation::make_examples;
    use rand::Rng;

    fn toy(n: usize, vocab: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = (0..n)
            .map(|i| EncodedConversation {
                id: format!("t{i}"),
                turns: (0..3)
                    .map(|t| {
                        let role = if t % 2 == 0 { Role::Poster } else { Role::Responder };
                        let words: Vec<TokenId> = (0..3).map(|_| rng.gen_range(3..vocab)).collect();
                        EncodedTurn::from_words(role, &words)
                    })
                    .collect(),
            })
            .collect();
        make_examples(convs, None)
    }

    fn small_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            max_epochs: 4,
            ..TrainConfig::new(variant, 15, 4, 5, 0)
        }
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let data = toy(8, 15, 1);
        let cfg = small_config(Variant::RConv);
        let a = train_model(&cfg, &data, &data).unwrap();
        let b = train_model(&cfg, &data, &data).unwrap();
        assert_eq!(checkpoint_bytes(&a.checkpoint), checkpoint_bytes(&b.checkpoint));
        for rec in &a.log {
            assert!(a.checkpoint.dev_perplexity <= rec.dev_perplexity);
            assert!(rec.train_perplexity.is_finite());
        }
        let first = a.log[0].dev_perplexity;
        assert!(a.checkpoint.dev_perplexity < first || a.checkpoint.epoch == 1);
    }

    #[test]
    fn training_rejects_bad_input() {
        let cfg = small_config(Variant::Baseline);
        assert!(matches!(train_model(&cfg, &[], &toy(1, 15, 1)), Err(TrainError::EmptyTrainingSet)));
        let bad = TrainConfig { lr: 0.0, ..cfg.clone() };
        assert!(matches!(train_model(&bad, &toy(1, 15, 1), &toy(1, 15, 1)), Err(TrainError::Config(_))));
        let lda = small_config(Variant::LdaConv);
        assert!(matches!(train_model(&lda, &toy(1, 15, 1), &toy(1, 15, 1)), Err(TrainError::Config(_))));
    }

    #[test]
    fn lr_halves_on_stagnation() {
        let data = toy(4, 15, 2);
        let cfg = TrainConfig {
            lr: 50.0,
            max_epochs: 6,
            patience: 10,
            ..small_config(Variant::Baseline)
        };
        let out = train_model(&cfg, &data, &data).unwrap();
        for w in out.log.windows(2) {
            let best_so_far = out
                .log
                .iter()
                .take_while(|r| r.epoch <= w[0].epoch)
                .map(|r| r.dev_perplexity)
                .fold(f64::INFINITY, f64::min);
            let improved = w[0].dev_perplexity <= best_so_far;
            let expected = if improved { w[0].lr } else { w[0].lr / 2.0 };
            assert_eq!(w[1].lr, expected);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let params = ModelParams::<f32>::init(Variant::RLdaConv, Dims::new(12, 3, 4, 2), 9).unwrap();
        let ckpt = Checkpoint {
            params,
            config: TrainConfig {
                lda_model: "lda.txt".into(),
                ..TrainConfig::new(Variant::RLdaConv, 12, 3, 4, 2)
            },
            epoch: 3,
            dev_perplexity: 11.123456789,
        };
        let bytes = checkpoint_bytes(&ckpt);
        assert_eq!(&bytes[..4], b"RCLM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let ckpt = Checkpoint {
            params: ModelParams::<f32>::init(Variant::Baseline, Dims::new(12, 3, 4, 0), 1).unwrap(),
            config: TrainConfig::new(Variant::Baseline, 12, 3, 4, 0),
            epoch: 1,
            dev_perplexity: 5.0,
        };
        let bytes = checkpoint_bytes(&ckpt);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&bad), Err(CheckpointError::Version(2))));

        let shrunk = Checkpoint {
            config: TrainConfig::new(Variant::Baseline, 12, 3, 2, 0),
            ..ckpt.clone()
        };
        // tensors for H=4 under metadata claiming H=2
        let meta_of = |c: &Checkpoint| {
            let b = checkpoint_bytes(c);
            let len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
            b[8..12 + len].to_vec()
        };
        let mut mixed = bytes[..8].to_vec();
        mixed.extend(meta_of(&shrunk));
        mixed.extend(&bytes[8 + meta_of(&ckpt).len()..]);
        assert!(matches!(checkpoint_from_bytes(&mixed), Err(CheckpointError::Inconsistent(_))));

        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn grid_covers_every_point() {
        let data = toy(4, 15, 3);
        let template = TrainConfig {
            max_epochs: 1,
            ..small_config(Variant::Baseline)
        };
        let provide = |_m: usize| {
            Ok(GridData {
                train: data.clone(),
                dev: data.clone(),
                lda_model: String::new(),
            })
        };
        let out = grid_search(&template, &[2, 3], &[2, 3], &[50, 100], provide, 2).unwrap();
        assert_eq!(out.rows.len(), 4);
        let coords: Vec<(usize, usize)> = out.rows.iter().map(|r| (r.embed, r.hidden)).collect();
        assert_eq!(coords, vec![(2, 2), (2, 3), (3, 2), (3, 3)]);
        let best = out
            .rows
            .iter()
            .filter_map(|r| r.dev_perplexity)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.dev_perplexity, best);
        let report = format_grid_report(&out.rows);
        assert!(report.starts_with("K\tH\tM\tdev_ppl\tepochs\n2\t2\t0\t"));

        let single = grid_search(&template, &[2], &[3], &[], provide, 1).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!((single.best.config.embed, single.best.config.hidden), (2, 3));
    }

    #[test]
    fn failed_grid_points_are_recorded() {
        let data = toy(4, 15, 4);
        let template = TrainConfig {
            max_epochs: 1,
            ..small_config(Variant::Baseline)
        };
        let provide = |_m: usize| {
            Ok(GridData {
                train: data.clone(),
                dev: data.clone(),
                lda_model: String::new(),
            })
        };
        let out = grid_search(&template, &[0, 2], &[2], &[], provide, 1).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert!(out.rows[0].error.is_some());
        assert!(format_grid_report(&out.rows).contains("\tfailed\t"));
        assert_eq!(out.best.config.embed, 2);
    }
}
