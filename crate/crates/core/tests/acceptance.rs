//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 7`.

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convlm::corpus::{EncodedConversation, EncodedTurn, Role, TokenId, Vocabulary};
use convlm::evaluation::{build_ranking_set, make_examples, perplexity, recall_at_k, RankingInstance};
use convlm::generation::{render, GenerateConfig, Generator, Strategy};
use convlm::lda::{train_lda_docs, LdaConfig, TopicInference, TopicVector};
use convlm::model::{backward_conversation, conversation_loss, forward_conversation, Dims, ModelParams, Variant};
use convlm::numerics::{finite_diff_check, Tensor};
use convlm::training::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, train_model, TrainConfig};

use common::{Mix, ROLE_MIX, ROLE_TOPIC_MIX};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("reduction identities", reduction_identities),
        ("synthetic role and topic ordering", synthetic_ordering),
        ("LDA recovery", lda_recovery),
        ("ranking harness statistics", ranking_statistics),
        ("overfit sanity", overfit_sanity),
        ("role-conditioned generation", role_generation),
        ("determinism and persistence", determinism_and_persistence),
        ("role word analysis", role_word_analysis),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {n} ({name}): {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn random_conversation(rng: &mut ChaCha8Rng, turns: usize, vocab: usize) -> EncodedConversation {
    EncodedConversation {
        id: "r".into(),
        turns: (0..turns)
            .map(|_| {
                let role = if rng.gen_bool(0.5) { Role::Poster } else { Role::Responder };
                let words: Vec<TokenId> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(3..vocab)).collect();
                EncodedTurn::from_words(role, &words)
            })
            .collect(),
    }
}

fn random_topics(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<TopicVector> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            TopicVector::from_values(raw.into_iter().map(|x| x / s).collect())
        })
        .collect()
}

/// Initial parameters plus noise on every tensor, so role matrices are not
/// the identity and the forget bias is not special.
fn perturbed(variant: Variant, dims: Dims, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(variant, dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    for (_, t) in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.4..0.4);
        }
    }
    p
}

fn gradient_correctness() -> Outcome {
    const TOL: f64 = 1e-4;
    let dims = Dims::new(20, 8, 8, 4);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for v in Variant::ALL {
            let p = perturbed(v, dims, seed);
            let conv = random_conversation(&mut rng, 3, 20);
            let topics = random_topics(&mut rng, 3, 4);
            let topics = v.uses_topics().then_some(topics);
            let (grads, _) = backward_conversation(&p, &conv, topics.as_deref()).unwrap();
            let names: Vec<String> = p.tensors().iter().map(|(n, _)| n.to_string()).collect();
            let flat: Vec<Tensor<f64>> = p.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let gflat: Vec<Tensor<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let err = finite_diff_check(
                |ts| {
                    let named = names.iter().cloned().zip(ts.iter().cloned()).collect();
                    let q = ModelParams::from_named(v, p.dims, named).unwrap();
                    conversation_loss(&q, &conv, topics.as_deref()).unwrap().0
                },
                &flat,
                &gflat,
                1e-4,
            )
            .unwrap();
            worst = worst.max(err);
            checks += 1;
        }
    }
    Outcome::new(
        worst < TOL,
        format!("{checks} instances over 4 variants, max relative error {worst:.2e} (limit {TOL:.0e})"),
    )
}

fn max_abs_diff(a: &[convlm::numerics::ProbVector<f64>], b: &[convlm::numerics::ProbVector<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn reduction_identities() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut role_gap = 0.0f64;
    let mut topic_gap = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let base = perturbed(Variant::Baseline, Dims::new(20, 8, 8, 0), seed);
        let conv = random_conversation(&mut rng, 4, 20);
        let reference = forward_conversation(&base, &conv, None).unwrap().distributions;

        let mut rconv = ModelParams::<f64>::init(Variant::RConv, base.dims, seed).unwrap();
        rconv.embedding = base.embedding.clone();
        rconv.lstm_weight = base.lstm_weight.clone();
        rconv.lstm_bias = base.lstm_bias.clone();
        rconv.output = base.output.clone();
        rconv.roles = Some([Tensor::identity(8), Tensor::identity(8)]);
        let r = forward_conversation(&rconv, &conv, None).unwrap().distributions;
        role_gap = role_gap.max(max_abs_diff(&reference, &r));

        let dims = Dims::new(20, 8, 8, 4);
        let mut lda = perturbed(Variant::LdaConv, dims, seed + 50);
        lda.embedding = base.embedding.clone();
        lda.lstm_weight = base.lstm_weight.clone();
        lda.lstm_bias = base.lstm_bias.clone();
        for w in 0..20 {
            let row = lda.output.row_mut(w);
            row[..8].copy_from_slice(base.output.row(w));
            row[8..].fill(0.0);
        }
        let topics = random_topics(&mut rng, 4, 4);
        let l = forward_conversation(&lda, &conv, Some(&topics)).unwrap().distributions;
        topic_gap = topic_gap.max(max_abs_diff(&reference, &l));
    }
    Outcome::new(
        role_gap <= TOL && topic_gap <= TOL,
        format!("identity roles vs baseline {role_gap:.1e}, zero topic columns vs baseline {topic_gap:.1e} (limit {TOL:.0e})"),
    )
}

struct Corpus {
    vocab: Vocabulary,
    train: Vec<EncodedConversation>,
    dev: Vec<EncodedConversation>,
}

fn synthetic(mix: Mix, seed: u64) -> Corpus {
    let convs = common::parse(&common::planted_records(2000, mix, seed));
    let (vocab, train, dev) = common::encode_split(&convs, 1600);
    Corpus { vocab, train, dev }
}

fn small_config(variant: Variant, vocab: usize, topics: usize, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed,
        ..TrainConfig::new(variant, vocab, 16, 16, topics)
    }
}

fn dev_perplexity(
    corpus: &Corpus,
    variant: Variant,
    seed: u64,
    epochs: usize,
    topics: Option<&TopicInference<'_>>,
) -> f64 {
    let m = topics.map_or(0, |t| t.model.topics());
    let config = small_config(variant, corpus.vocab.len(), m, seed, epochs);
    let topics = topics.filter(|_| variant.uses_topics());
    let train = make_examples(corpus.train.clone(), topics);
    let dev = make_examples(corpus.dev.clone(), topics);
    train_model(&config, &train, &dev).unwrap().checkpoint.dev_perplexity
}

fn synthetic_ordering() -> Outcome {
    const SEEDS: [u64; 3] = [1, 2, 3];
    const LIMIT: Duration = Duration::from_secs(30 * 60);
    let mut lines = Vec::new();

    let start = Instant::now();
    let mut role_wins = 0;
    for seed in SEEDS {
        let corpus = synthetic(ROLE_MIX, 100 + seed);
        let base = dev_perplexity(&corpus, Variant::Baseline, seed, 6, None);
        let rconv = dev_perplexity(&corpus, Variant::RConv, seed, 6, None);
        let gain = 1.0 - rconv / base;
        if gain >= 0.05 {
            role_wins += 1;
        }
        lines.push(format!("role seed {seed}: baseline {base:.3} rconv {rconv:.3} ({:.1}%)", 100.0 * gain));
    }
    let role_time = start.elapsed();

    let start = Instant::now();
    let mut topic_wins = 0;
    for seed in SEEDS {
        let corpus = synthetic(ROLE_TOPIC_MIX, 200 + seed);
        let docs: Vec<Vec<TokenId>> = corpus.train.iter().map(convlm::lda::conversation_bag).collect();
        let lda_config = LdaConfig {
            seed,
            ..LdaConfig::new(ROLE_TOPIC_MIX.topics)
        };
        let lda = train_lda_docs(&docs, corpus.vocab.len(), &lda_config).unwrap();
        let inference = TopicInference::new(&lda, convlm::lda::DEFAULT_INFER_SWEEPS, seed);
        let rconv = dev_perplexity(&corpus, Variant::RConv, seed, 20, None);
        let ldaconv = dev_perplexity(&corpus, Variant::LdaConv, seed, 20, Some(&inference));
        let rlda = dev_perplexity(&corpus, Variant::RLdaConv, seed, 20, Some(&inference));
        if rlda <= rconv && rlda <= ldaconv {
            topic_wins += 1;
        }
        lines.push(format!(
            "topic seed {seed}: rconv {rconv:.3} ldaconv {ldaconv:.3} rldaconv {rlda:.3}"
        ));
    }
    let topic_time = start.elapsed();
    for l in &lines {
        println!("    {l}");
    }
    Outcome::new(
        role_wins >= 2 && topic_wins >= 2 && role_time < LIMIT && topic_time < LIMIT,
        format!(
            "role corpus {role_wins}/3 seeds with >=5% gain ({:.0}s), role+topic corpus {topic_wins}/3 seeds ordered ({:.0}s)",
            role_time.as_secs_f64(),
            topic_time.as_secs_f64()
        ),
    )
}

fn lda_recovery() -> Outcome {
    const VOCAB: usize = 3 + 100;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let planted: [Vec<TokenId>; 2] = [(3..53).collect(), (53..103).collect()];
    let docs: Vec<Vec<TokenId>> = (0..500)
        .map(|d| {
            let words = &planted[d % 2];
            (0..40).map(|_| words[rng.gen_range(0..words.len())]).collect()
        })
        .collect();
    let model = train_lda_docs(&docs, VOCAB, &LdaConfig { seed: 4, ..LdaConfig::new(2) }).unwrap();
    let mut purity = f64::INFINITY;
    for k in 0..2 {
        let top: BTreeSet<TokenId> = model.top_words(k, 50).into_iter().collect();
        let best = planted
            .iter()
            .map(|p| p.iter().filter(|w| top.contains(w)).count())
            .max()
            .unwrap();
        purity = purity.min(best as f64 / 50.0);
    }

    // one topic: phi is the smoothed unigram distribution
    let one = train_lda_docs(&docs, VOCAB, &LdaConfig { seed: 4, ..LdaConfig::new(1) }).unwrap();
    let mut counts = vec![0.0; VOCAB];
    for d in &docs {
        for &w in d {
            counts[w] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let beta = one.beta();
    let mut gap = 0.0f64;
    for (w, c) in counts.iter().enumerate() {
        let expected = (c + beta) / (total + VOCAB as f64 * beta);
        gap = gap.max((one.phi_row(0)[w] - expected).abs());
    }
    Outcome::new(
        purity >= 0.9 && gap <= 1e-6,
        format!("min topic purity {purity:.3} (need 0.9), single-topic unigram gap {gap:.1e} (limit 1e-6)"),
    )
}

fn ranking_statistics() -> Outcome {
    let convs = common::parse(&common::planted_records(400, ROLE_MIX, 5));
    let (_, test, _) = common::encode_split(&convs, 400);
    let set = build_ranking_set(&test, 5).unwrap();
    let n = set.instances.len();

    let rng = RefCell::new(ChaCha8Rng::seed_from_u64(55));
    let random = |inst: &RankingInstance| -> Vec<f64> {
        let mut r = rng.borrow_mut();
        inst.candidates.iter().map(|_| r.gen::<f64>()).collect()
    };
    let r1 = recall_at_k(&random, &set.instances, 1).unwrap();
    let r2 = recall_at_k(&random, &set.instances, 2).unwrap();
    let r10 = recall_at_k(&random, &set.instances, 10).unwrap();
    let oracle = |inst: &RankingInstance| -> Vec<f64> {
        (0..inst.candidates.len())
            .map(|i| if i == inst.truth_index { 1.0 } else { 0.0 })
            .collect()
    };
    let o1 = recall_at_k(&oracle, &set.instances, 1).unwrap();

    let mut violations = 0;
    for inst in &set.instances {
        let truth = &test[inst.conversation].turns[inst.turn];
        let truth_len = truth.words().len();
        let distinct: BTreeSet<_> = inst.candidates.iter().collect();
        let ok = inst.candidates.len() == 10
            && distinct.len() == 10
            && inst.candidates[inst.truth_index].conversation == inst.conversation
            && inst.candidates[inst.truth_index].turn == inst.turn
            && inst.candidates.iter().enumerate().all(|(i, c)| {
                i == inst.truth_index
                    || (c.conversation != inst.conversation
                        && test[c.conversation].turns[c.turn].words().len().abs_diff(truth_len) <= 2)
            });
        if !ok {
            violations += 1;
        }
    }
    Outcome::new(
        n >= 2000
            && (r1 - 0.10).abs() <= 0.02
            && (r2 - 0.20).abs() <= 0.03
            && r10 == 1.0
            && o1 == 1.0
            && violations == 0,
        format!(
            "{n} instances ({} skipped): random R@1 {r1:.4} R@2 {r2:.4} R@10 {r10}, oracle R@1 {o1}, {violations} constraint violations",
            set.skipped
        ),
    )
}

fn overfit_sanity() -> Outcome {
    // four five-word turns of random words per conversation
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let toy: Vec<EncodedConversation> = (0..10)
        .map(|i| EncodedConversation {
            id: format!("toy{i}"),
            turns: (0..4)
                .map(|t| {
                    let role = if t % 2 == 0 { Role::Poster } else { Role::Responder };
                    let words: Vec<TokenId> = (0..5).map(|_| rng.gen_range(3..50)).collect();
                    EncodedTurn::from_words(role, &words)
                })
                .collect(),
        })
        .collect();
    let examples = make_examples(toy, None);
    let config = TrainConfig {
        max_epochs: 500,
        patience: 500,
        lr_halving: false,
        seed: 6,
        ..TrainConfig::new(Variant::Baseline, 50, 16, 16, 0)
    };
    let start = Instant::now();
    let outcome = train_model(&config, &examples, &examples).unwrap();
    let elapsed = start.elapsed();
    let ppl = perplexity(&outcome.checkpoint.params, &examples).unwrap();
    Outcome::new(
        ppl < 1.5 && elapsed < Duration::from_secs(60),
        format!(
            "training perplexity {ppl:.4} after {} epochs (best at {}), {:.1}s",
            outcome.log.len(),
            outcome.checkpoint.epoch,
            elapsed.as_secs_f64()
        ),
    )
}

fn role_generation() -> Outcome {
    let convs = common::parse(&common::marker_records(600, 7));
    let (vocab, train, dev) = common::encode_split(&convs, 500);
    let config = small_config(Variant::RConv, vocab.len(), 0, 7, 6);
    let ckpt = train_model(&config, &make_examples(train, None), &make_examples(dev.clone(), None))
        .unwrap()
        .checkpoint;
    let mut agree = 0;
    for i in 0..100u64 {
        let role = if i % 2 == 0 { Role::Poster } else { Role::Responder };
        let (want, other) = match role {
            Role::Poster => ("q!", "a!"),
            Role::Responder => ("a!", "q!"),
        };
        let gen_config = GenerateConfig {
            max_len: 10,
            strategy: Strategy::Sample {
                temperature: 1.0,
                seed: i,
            },
        };
        let mut g = Generator::new(&ckpt.params, None, gen_config).unwrap();
        let context = &dev[i as usize % dev.len()].turns;
        for turn in &context[..3] {
            g.observe(turn.clone()).unwrap();
        }
        let text = render(&vocab, &g.generate(role).unwrap());
        if text.contains(want) && !text.contains(other) {
            agree += 1;
        }
    }
    Outcome::new(agree >= 90, format!("{agree}/100 sampled responses carry the requested role's marker"))
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_convlm"))
        .args(args)
        .output()
        .expect("run the convlm binary");
    assert!(
        out.status.success(),
        "convlm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().expect("UTF-8 temp path")
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let records = common::planted_records(120, ROLE_MIX, 8);
    common::write_lines(&d.join("train.jsonl"), &records[..100]);
    common::write_lines(&d.join("dev.jsonl"), &records[100..]);
    for run in ["a", "b"] {
        let out = d.join(run);
        cli(&["prepare", "--input", path(&d.join("train.jsonl")), "--output", path(&out)]);
    }
    let read = |p: &Path| std::fs::read(p).unwrap();
    let vocab_same = read(&d.join("a/vocab.txt")) == read(&d.join("b/vocab.txt"));
    let out = d.join("a");
    cli(&[
        "prepare",
        "--input",
        path(&d.join("dev.jsonl")),
        "--output",
        path(&out.join("dev")),
        "--vocab",
        path(&out.join("vocab.txt")),
    ]);
    let (train, dev, model) = (out.join("corpus.jsonl"), out.join("dev/corpus.jsonl"), out.join("model.ckpt"));
    let train_args = [
        "train",
        "--variant",
        "rconv",
        "--k",
        "8",
        "--h",
        "8",
        "--seed",
        "3",
        "--max-epochs",
        "2",
        "--train",
        path(&train),
        "--dev",
        path(&dev),
        "--out",
        path(&model),
    ];
    cli(&train_args);
    let first_run = read(&model);
    cli(&train_args);
    let ckpt_same = first_run == read(&model);

    let ckpt = load_checkpoint(&d.join("a/model.ckpt")).unwrap();
    save_checkpoint(&ckpt, &d.join("copy.ckpt")).unwrap();
    let copy = load_checkpoint(&d.join("copy.ckpt")).unwrap();
    let bits = |p: &ModelParams<f32>| -> Vec<u32> {
        p.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let roundtrip = bits(&ckpt.params) == bits(&copy.params)
        && read(&d.join("copy.ckpt")) == read(&d.join("a/model.ckpt"))
        && checkpoint_from_bytes(&checkpoint_bytes(&copy)).unwrap() == ckpt;

    let convs = common::parse(&records);
    let mut first = Vec::new();
    let mut second = Vec::new();
    Vocabulary::build(&convs, 20000).unwrap().write(&mut first).unwrap();
    Vocabulary::build(&convs, 20000).unwrap().write(&mut second).unwrap();
    let build_same = first == second;

    Outcome::new(
        vocab_same && ckpt_same && roundtrip && build_same,
        format!(
            "vocab files identical: {vocab_same}, checkpoints identical: {ckpt_same}, roundtrip bit-exact: {roundtrip}, vocab build bytes identical: {build_same}"
        ),
    )
}

fn parse_role_lists(stdout: &[u8]) -> (Vec<String>, Vec<String>) {
    let text = String::from_utf8(stdout.to_vec()).unwrap();
    let mut poster = Vec::new();
    let mut responder = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[0] {
            "poster" => poster.push(cols[1].to_string()),
            "responder" => responder.push(cols[1].to_string()),
            other => panic!("unexpected role column '{other}'"),
        }
    }
    (poster, responder)
}

fn role_word_analysis() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synthetic = dir.path().join("roles.jsonl");
    common::write_lines(&synthetic, &common::planted_records(500, ROLE_MIX, 9));
    let out = cli(&["analyze-roles", "--input", path(&synthetic), "--min-count", "50", "--top", "10"]);
    let (poster, responder) = parse_role_lists(&out.stdout);
    let as_set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
    let planted = as_set(&poster) == as_set(&common::poster_words())
        && as_set(&responder) == as_set(&common::responder_words());

    let real = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/ubuntu_sample.jsonl");
    let args = ["analyze-roles", "--input", path(&real), "--min-count", "3", "--top", "15"];
    let a = cli(&args).stdout;
    let b = cli(&args).stdout;
    let (p, r) = parse_role_lists(&a);
    let disjoint = as_set(&p).is_disjoint(&as_set(&r));
    let deterministic = a == b;
    Outcome::new(
        planted && disjoint && deterministic && !p.is_empty() && !r.is_empty(),
        format!(
            "planted markers recovered: {planted}; sample corpus lists ({} poster, {} responder words) disjoint: {disjoint}, deterministic: {deterministic}",
            p.len(),
            r.len()
        ),
    )
}
