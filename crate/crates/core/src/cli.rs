//! Command-line front end.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use convlm::corpus::{self, EncodedConversation, EncodedTurn, Role, Vocabulary};
use convlm::evaluation::{
    build_ranking_set, format_recall_table, make_examples, perplexity, read_ranking_cache, recall_at_k,
    write_ranking_cache, Example, ModelScorer, RecallRow,
};
use convlm::generation::{render, GenerateConfig, Generator, Strategy, DEFAULT_MAX_LEN, DEFAULT_TEMPERATURE};
use convlm::lda::{
    self, LdaConfig, TopicInference, TopicModel, DEFAULT_BETA, DEFAULT_INFER_SWEEPS, DEFAULT_TRAIN_SWEEPS,
};
use convlm::model::Variant;
use convlm::training::{
    format_grid_report, grid_search, load_checkpoint, save_checkpoint, train_model, GridData, TrainConfig,
};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "convlm",
    version,
    about = "Role- and topic-conditioned LSTM conversation language models",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest raw conversations, filter by turn count, build the vocabulary and encode.
    Prepare(PrepareArgs),
    /// Train an LDA topic model on per-conversation bags of words.
    LdaTrain(LdaTrainArgs),
    /// Write per-turn history topic vectors for a corpus.
    LdaCache(LdaCacheArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Grid search over K, H and M; keeps the best dev perplexity.
    Grid(GridArgs),
    /// Test-set perplexity of a checkpoint.
    EvalPpl(EvalPplArgs),
    /// Recall@K response ranking of a checkpoint.
    EvalRank(EvalRankArgs),
    /// Words most characteristic of each role.
    AnalyzeRoles(AnalyzeArgs),
    /// Generate a response to a context under a role.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw line-delimited JSON conversations.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; receives vocab.txt and corpus.jsonl.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub min_turns: usize,
    #[arg(long, default_value_t = 20)]
    pub max_turns: usize,
    /// Vocabulary size including the reserved tokens.
    #[arg(long, default_value_t = 20000)]
    pub vocab_size: usize,
    /// Reuse an existing vocabulary (for dev and test splits).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LdaTrainArgs {
    /// Encoded corpus.
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the input.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub topics: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_SWEEPS)]
    pub iterations: usize,
    /// Dirichlet prior on topic proportions; defaults to 50/M.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct LdaCacheArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_INFER_SWEEPS)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainCommon {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the training corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Keep the learning rate fixed when dev perplexity stalls.
    #[arg(long)]
    pub no_lr_halving: bool,
    #[arg(long, default_value_t = convlm::numerics::DEFAULT_CLIP)]
    pub clip: f64,
    #[arg(long, default_value_t = 20)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_INFER_SWEEPS)]
    pub topic_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    pub topic_seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub h: usize,
    #[arg(long, default_value_t = 0)]
    pub m: usize,
    /// Topic model (topic variants only).
    #[arg(long)]
    pub lda_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub h_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Vec<usize>,
    /// Gibbs sweeps for the per-M topic models trained on the training set.
    #[arg(long, default_value_t = DEFAULT_TRAIN_SWEEPS)]
    pub lda_iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub lda_seed: u64,
    /// Grid report; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvalPplArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Overrides the topic model recorded in the checkpoint.
    #[arg(long)]
    pub lda_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Ranking-set cache: read when it exists, written otherwise.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub lda_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Raw line-delimited JSON conversations.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 6000)]
    pub min_count: u64,
    #[arg(long, default_value_t = 15)]
    pub top: usize,
    #[arg(long, default_value_t = 6)]
    pub min_turns: usize,
    #[arg(long, default_value_t = 20)]
    pub max_turns: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One context turn per line: `poster<TAB>text` or `responder<TAB>text`.
    #[arg(long)]
    pub context_file: PathBuf,
    #[arg(long, value_enum)]
    pub role: RoleArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Overrides the vocabulary recorded in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub lda_model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Rconv,
    Ldaconv,
    Rldaconv,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Rconv => Variant::RConv,
            VariantArg::Ldaconv => Variant::LdaConv,
            VariantArg::Rldaconv => Variant::RLdaConv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Poster,
    Responder,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Poster => Role::Poster,
            RoleArg::Responder => Role::Responder,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Sample,
}

/// Expands `--config FILE` into flags placed right after the subcommand, so
/// that flags given on the command line (which come later) take precedence.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .context("--config needs a file argument")?
        .clone();
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("config line {}: expected key=value", n + 1))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        match value {
            "true" => flags.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                flags.push(OsString::from(format!("--{key}")));
                flags.push(OsString::from(value));
            }
        }
    }
    let mut rest = args;
    rest.drain(pos..pos + 2);
    // program name, subcommand, then config flags
    let insert_at = 2.min(rest.len());
    rest.splice(insert_at..insert_at, flags);
    Ok(rest)
}

pub fn run(args: Vec<OsString>) -> Result<()> {
    let args = expand_config(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::LdaTrain(a) => lda_train(a),
        Command::LdaCache(a) => lda_cache(a),
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::EvalPpl(a) => eval_ppl(a),
        Command::EvalRank(a) => eval_rank(a),
        Command::AnalyzeRoles(a) => analyze_roles(a),
        Command::Generate(a) => generate(a),
    }
}

fn sibling_vocab(explicit: Option<PathBuf>, corpus_path: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| corpus_path.with_file_name(VOCAB_FILE))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Vec<EncodedConversation>> {
    corpus::read_encoded(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_lda(path: &Path) -> Result<TopicModel> {
    TopicModel::load(path).with_context(|| format!("loading topic model {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    ensure!(a.min_turns <= a.max_turns, "--min-turns exceeds --max-turns");
    let ingested = corpus::ingest(&a.input, a.min_turns, a.max_turns)
        .with_context(|| format!("ingesting {}", a.input.display()))?;
    log::info!(
        "{} conversations kept, {} filtered by turn count, {} malformed records, {} empty turns dropped",
        ingested.conversations.len(),
        ingested.filtered_out,
        ingested.malformed.len(),
        ingested.dropped_turns
    );
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => Vocabulary::build(&ingested.conversations, a.vocab_size)?,
    };
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    vocab.save(&a.output.join(VOCAB_FILE))?;
    let encoded: Vec<EncodedConversation> = ingested
        .conversations
        .iter()
        .map(|c| corpus::encode(c, &vocab))
        .collect();
    corpus::write_encoded(&a.output.join(CORPUS_FILE), &encoded)?;
    eprintln!(
        "wrote {} conversations and a {}-token vocabulary to {}",
        encoded.len(),
        vocab.len(),
        a.output.display()
    );
    Ok(())
}

fn lda_train(a: LdaTrainArgs) -> Result<()> {
    let convs = load_corpus(&a.input)?;
    let vocab = load_vocab(&sibling_vocab(a.vocab, &a.input))?;
    let mut config = LdaConfig::new(a.topics);
    config.iterations = a.iterations;
    if let Some(alpha) = a.alpha {
        config.alpha = alpha;
    }
    config.beta = a.beta;
    config.seed = a.seed;
    let model = lda::train_lda(&convs, vocab.len(), &config)?;
    model.save(&a.output)?;
    for k in 0..model.topics() {
        let words: Vec<String> = vocab.decode(&model.top_words(k, 10));
        log::info!("topic {k}: {}", words.join(" "));
    }
    Ok(())
}

fn lda_cache(a: LdaCacheArgs) -> Result<()> {
    let convs = load_corpus(&a.input)?;
    let model = load_lda(&a.model)?;
    let inference = TopicInference::new(&model, a.sweeps, a.seed);
    let entries: Vec<(String, Vec<lda::TopicVector>)> = convs
        .iter()
        .map(|c| (c.id.clone(), inference.conversation(c)))
        .collect();
    let mut w = create(&a.output)?;
    lda::write_topic_cache(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

fn base_config(c: &TrainCommon, vocab_path: &Path, vocab_size: usize) -> TrainConfig {
    let mut config = TrainConfig::new(c.variant.into(), vocab_size, 1, 1, 0);
    config.lr = c.lr;
    config.lr_halving = !c.no_lr_halving;
    config.clip = c.clip;
    config.max_epochs = c.max_epochs;
    config.patience = c.patience;
    config.seed = c.seed;
    config.train_path = c.train.display().to_string();
    config.dev_path = c.dev.display().to_string();
    config.vocab_path = vocab_path.display().to_string();
    config.topic_sweeps = c.topic_sweeps;
    config.topic_seed = c.topic_seed;
    config
}

fn train(a: TrainArgs) -> Result<()> {
    let c = &a.common;
    let vocab_path = sibling_vocab(c.vocab.clone(), &c.train);
    let vocab = load_vocab(&vocab_path)?;
    let mut config = base_config(c, &vocab_path, vocab.len());
    config.embed = a.k;
    config.hidden = a.h;
    let variant = config.variant;
    let lda_model = if variant.uses_topics() {
        let path = a.lda_model.as_ref().context("topic variants need --lda-model")?;
        let model = load_lda(path)?;
        ensure!(
            a.m == 0 || a.m == model.topics(),
            "--m {} disagrees with the topic model's {} topics",
            a.m,
            model.topics()
        );
        config.topics = model.topics();
        config.lda_model = path.display().to_string();
        Some(model)
    } else {
        None
    };
    let inference = lda_model
        .as_ref()
        .map(|m| TopicInference::new(m, config.topic_sweeps, config.topic_seed));
    let train_set = make_examples(load_corpus(&c.train)?, inference.as_ref());
    let dev_set = make_examples(load_corpus(&c.dev)?, inference.as_ref());
    let outcome = train_model(&config, &train_set, &dev_set)?;
    save_checkpoint(&outcome.checkpoint, &c.out)?;
    println!("epoch\tlr\ttrain_ppl\tdev_ppl");
    for r in &outcome.log {
        println!("{}\t{}\t{:.4}\t{:.4}", r.epoch, r.lr, r.train_perplexity, r.dev_perplexity);
    }
    eprintln!(
        "best dev perplexity {:.4} at epoch {}; checkpoint written to {}",
        outcome.checkpoint.dev_perplexity,
        outcome.checkpoint.epoch,
        c.out.display()
    );
    Ok(())
}

fn grid(a: GridArgs) -> Result<()> {
    let c = &a.common;
    let vocab_path = sibling_vocab(c.vocab.clone(), &c.train);
    let vocab = load_vocab(&vocab_path)?;
    let template = base_config(c, &vocab_path, vocab.len());
    let variant = template.variant;
    ensure!(
        !variant.uses_topics() || !a.m_grid.is_empty(),
        "topic variants need --m-grid"
    );
    let train_convs = load_corpus(&c.train)?;
    let dev_convs = load_corpus(&c.dev)?;
    let data_for = |m: usize| -> convlm::training::Result<GridData> {
        if m == 0 {
            return Ok(GridData {
                train: make_examples(train_convs.clone(), None),
                dev: make_examples(dev_convs.clone(), None),
                lda_model: String::new(),
            });
        }
        let mut lda_config = LdaConfig::new(m);
        lda_config.iterations = a.lda_iterations;
        lda_config.seed = a.lda_seed;
        let model = lda::train_lda(&train_convs, vocab.len(), &lda_config)
            .map_err(|e| convlm::training::TrainError::Config(e.to_string()))?;
        let mut path = c.out.clone().into_os_string();
        path.push(format!(".lda-m{m}"));
        let path = PathBuf::from(path);
        model
            .save(&path)
            .map_err(|e| convlm::training::TrainError::Config(e.to_string()))?;
        let inference = TopicInference::new(&model, template.topic_sweeps, template.topic_seed);
        Ok(GridData {
            train: make_examples(train_convs.clone(), Some(&inference)),
            dev: make_examples(dev_convs.clone(), Some(&inference)),
            lda_model: path.display().to_string(),
        })
    };
    let outcome = grid_search(&template, &a.k_grid, &a.h_grid, &a.m_grid, data_for, a.jobs)?;
    let report = format_grid_report(&outcome.rows);
    match &a.report {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(report.as_bytes())?;
            w.flush()?;
        }
        None => print!("{report}"),
    }
    save_checkpoint(&outcome.best, &c.out)?;
    let b = &outcome.best.config;
    eprintln!(
        "best K={} H={} M={} dev perplexity {:.4}; checkpoint written to {}",
        b.embed,
        b.hidden,
        b.topics,
        outcome.best.dev_perplexity,
        c.out.display()
    );
    Ok(())
}

/// Loads the topic model a checkpoint needs, honouring an override path.
fn checkpoint_lda(config: &TrainConfig, explicit: Option<&PathBuf>) -> Result<Option<TopicModel>> {
    if !config.variant.uses_topics() {
        return Ok(None);
    }
    let path = match explicit {
        Some(p) => p.clone(),
        None if !config.lda_model.is_empty() => PathBuf::from(&config.lda_model),
        None => bail!("the checkpoint names no topic model; pass --lda-model"),
    };
    let model = load_lda(&path)?;
    ensure!(
        model.topics() == config.topics,
        "topic model {} has {} topics but the checkpoint expects {}",
        path.display(),
        model.topics(),
        config.topics
    );
    Ok(Some(model))
}

fn eval_ppl(a: EvalPplArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let lda_model = checkpoint_lda(&ckpt.config, a.lda_model.as_ref())?;
    let inference = lda_model
        .as_ref()
        .map(|m| TopicInference::new(m, ckpt.config.topic_sweeps, ckpt.config.topic_seed));
    let test: Vec<Example> = make_examples(load_corpus(&a.test)?, inference.as_ref());
    let ppl = perplexity(&ckpt.params, &test)?;
    println!("model\tperplexity\tn_conversations");
    println!("{}\t{:.4}\t{}", ckpt.config.variant, ppl, test.len());
    Ok(())
}

fn eval_rank(a: EvalRankArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let lda_model = checkpoint_lda(&ckpt.config, a.lda_model.as_ref())?;
    let convs = load_corpus(&a.test)?;
    let set = match &a.cache {
        Some(p) if p.exists() => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_ranking_cache(BufReader::new(f), &convs)?
        }
        cache => {
            let set = build_ranking_set(&convs, a.seed)?;
            if let Some(p) = cache {
                let mut w = create(p)?;
                write_ranking_cache(&mut w, &set, &convs)?;
                w.flush()?;
            }
            set
        }
    };
    let scorer = ModelScorer {
        params: &ckpt.params,
        conversations: &convs,
        topics: lda_model
            .as_ref()
            .map(|m| TopicInference::new(m, ckpt.config.topic_sweeps, ckpt.config.topic_seed)),
    };
    let mut rows = Vec::new();
    for &k in &a.k {
        rows.push(RecallRow {
            model: ckpt.config.variant.to_string(),
            k,
            recall: recall_at_k(&scorer, &set.instances, k)?,
            instances: set.instances.len(),
            skipped: set.skipped,
        });
    }
    print!("{}", format_recall_table(&rows));
    Ok(())
}

fn analyze_roles(a: AnalyzeArgs) -> Result<()> {
    let ingested = corpus::ingest(&a.input, a.min_turns, a.max_turns)
        .with_context(|| format!("ingesting {}", a.input.display()))?;
    let lists = corpus::role_likelihood_ratio(&ingested.conversations, a.min_count, a.top)?;
    println!("role\tword\tcount\tratio");
    for (role, words) in [(Role::Poster, &lists.poster), (Role::Responder, &lists.responder)] {
        for w in words {
            println!("{}\t{}\t{}\t{:.4}", role, w.word, w.count, w.ratio);
        }
    }
    Ok(())
}

/// Reads `role<TAB>text` lines; blank lines and `#` comments are skipped.
pub fn read_context(path: &Path, vocab: &Vocabulary) -> Result<Vec<EncodedTurn>> {
    let f = File::open(path).with_context(|| format!("opening context file {}", path.display()))?;
    let mut turns = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (role, text) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected role<TAB>text", path.display(), n + 1))?;
        let role: Role = role
            .trim()
            .parse()
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1))?;
        let ids = vocab.encode_tokens(&corpus::tokenize(text));
        turns.push(EncodedTurn::from_words(role, &ids));
    }
    Ok(turns)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| PathBuf::from(&ckpt.config.vocab_path));
    let vocab = load_vocab(&vocab_path)?;
    ensure!(
        vocab.len() == ckpt.config.vocab_size,
        "vocabulary {} has {} tokens but the checkpoint expects {}",
        vocab_path.display(),
        vocab.len(),
        ckpt.config.vocab_size
    );
    let lda_model = checkpoint_lda(&ckpt.config, a.lda_model.as_ref())?;
    let context = read_context(&a.context_file, &vocab)?;
    let strategy = match a.strategy {
        StrategyArg::Greedy => Strategy::Greedy,
        StrategyArg::Sample => Strategy::Sample {
            temperature: a.temperature,
            seed: a.seed,
        },
    };
    let config = GenerateConfig {
        max_len: a.max_len,
        strategy,
    };
    let inference = lda_model
        .as_ref()
        .map(|m| TopicInference::new(m, ckpt.config.topic_sweeps, ckpt.config.topic_seed));
    let mut generator = Generator::new(&ckpt.params, inference, config)?;
    for turn in context {
        generator.observe(turn)?;
    }
    let ids = generator.generate(a.role.into())?;
    println!("{}", render(&vocab, &ids));
    Ok(())
}
