//! LSTM conversation language models.
//!
//! All four variants share one LSTM that runs over the whole conversation,
//! turn after turn, without resetting its state at turn boundaries. They
//! differ only in the output layer:
//!
//! | variant    | output                               |
//! |------------|--------------------------------------|
//! | `Baseline` | `softmax(W_out · h)`                 |
//! | `RConv`    | `softmax(W_out · W_role · h)`        |
//! | `LdaConv`  | `softmax(W_out · [h; s])`            |
//! | `RLdaConv` | `softmax(W_out · W_role · [h; s])`   |
//!
//! where `s` is the topic vector of the turns preceding the current one and
//! `W_role` is picked by the role of the current turn.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EncodedConversation, EncodedTurn, Role, TokenId};
use crate::lda::TopicVector;
use crate::numerics::{
    clamped_nll, sigmoid, softmax, softmax_in_place, NumericsError, ProbVector, Scalar, Tensor,
};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("variant {0} needs a topic vector")]
    MissingTopics(Variant),
    #[error("variant {0} needs a role")]
    MissingRole(Variant),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("topic vector has {found} entries, model expects {expected}")]
    TopicDims { expected: usize, found: usize },
    #[error("{turns} turns but {vectors} topic vectors")]
    TopicsMisaligned { turns: usize, vectors: usize },
    #[error("inconsistent parameters: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    RConv,
    LdaConv,
    RLdaConv,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::RConv, Variant::LdaConv, Variant::RLdaConv];

    pub fn uses_roles(self) -> bool {
        matches!(self, Variant::RConv | Variant::RLdaConv)
    }

    pub fn uses_topics(self) -> bool {
        matches!(self, Variant::LdaConv | Variant::RLdaConv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::RConv => "rconv",
            Variant::LdaConv => "ldaconv",
            Variant::RLdaConv => "rldaconv",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "baseline" => Ok(Variant::Baseline),
            "rconv" => Ok(Variant::RConv),
            "ldaconv" => Ok(Variant::LdaConv),
            "rldaconv" => Ok(Variant::RLdaConv),
            other => Err(format!(
                "unknown variant '{other}' (expected baseline, rconv, ldaconv or rldaconv)"
            )),
        }
    }
}

/// Model sizes: vocabulary `V`, embedding `K`, hidden `H`, topics `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Ignored (and normalized to 0) for variants without topics.
    pub topics: usize,
}

impl Dims {
    pub fn new(vocab: usize, embed: usize, hidden: usize, topics: usize) -> Self {
        Dims {
            vocab,
            embed,
            hidden,
            topics,
        }
    }
}

pub const EMBEDDING: &str = "embedding";
pub const LSTM_WEIGHT: &str = "lstm.weight";
pub const LSTM_BIAS: &str = "lstm.bias";
pub const OUTPUT: &str = "output";
pub const ROLE_POSTER: &str = "role.poster";
pub const ROLE_RESPONDER: &str = "role.responder";

/// Parameters of one conversation model.
///
/// The LSTM weight stacks the input, forget, output and candidate gates
/// (in that order) as rows, acting on `[embedding; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub variant: Variant,
    pub dims: Dims,
    /// V × K
    pub embedding: Tensor<T>,
    /// 4H × (K + H)
    pub lstm_weight: Tensor<T>,
    /// 4H
    pub lstm_bias: Tensor<T>,
    /// V × D
    pub output: Tensor<T>,
    /// D × D, indexed by [`Role::index`]; present only for role variants.
    pub roles: Option<[Tensor<T>; 2]>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters of the right shapes (also used as a gradient
    /// accumulator).
    pub fn zeros(variant: Variant, dims: Dims) -> Result<Self> {
        let dims = normalize_dims(variant, dims)?;
        let d = dims.hidden + dims.topics;
        let (k, h, v) = (dims.embed, dims.hidden, dims.vocab);
        Ok(ModelParams {
            variant,
            dims,
            embedding: Tensor::zeros(&[v, k]),
            lstm_weight: Tensor::zeros(&[4 * h, k + h]),
            lstm_bias: Tensor::zeros(&[4 * h]),
            output: Tensor::zeros(&[v, d]),
            roles: variant
                .uses_roles()
                .then(|| [Tensor::zeros(&[d, d]), Tensor::zeros(&[d, d])]),
        })
    }

    /// Uniform weights in `[-0.08, 0.08]`, forget-gate bias 1 and identity
    /// role matrices, so a fresh role variant predicts exactly like the
    /// baseline with the same shared weights.
    pub fn init(variant: Variant, dims: Dims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(variant, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = T::from_f64(INIT_RANGE);
        for t in [&mut p.embedding, &mut p.lstm_weight, &mut p.output] {
            for x in t.data_mut() {
                *x = T::from_f64(rng.gen_range(-INIT_RANGE..=INIT_RANGE)).max(-range).min(range);
            }
        }
        let h = p.dims.hidden;
        for x in &mut p.lstm_bias.data_mut()[h..2 * h] {
            *x = T::from_f64(FORGET_BIAS_INIT);
        }
        if let Some(roles) = &mut p.roles {
            let d = p.output.cols();
            *roles = [Tensor::identity(d), Tensor::identity(d)];
        }
        Ok(p)
    }

    /// Width `D` of the vector fed to the output projection.
    pub fn output_dim(&self) -> usize {
        self.dims.hidden + self.dims.topics
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            (EMBEDDING, &self.embedding),
            (LSTM_WEIGHT, &self.lstm_weight),
            (LSTM_BIAS, &self.lstm_bias),
            (OUTPUT, &self.output),
        ];
        if let Some([poster, responder]) = &self.roles {
            out.push((ROLE_POSTER, poster));
            out.push((ROLE_RESPONDER, responder));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = vec![
            (EMBEDDING, &mut self.embedding),
            (LSTM_WEIGHT, &mut self.lstm_weight),
            (LSTM_BIAS, &mut self.lstm_bias),
            (OUTPUT, &mut self.output),
        ];
        if let Some([poster, responder]) = &mut self.roles {
            out.push((ROLE_POSTER, poster));
            out.push((ROLE_RESPONDER, responder));
        }
        out
    }

    /// Assembles parameters from named tensors, checking every shape.
    pub fn from_named(variant: Variant, dims: Dims, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut p = Self::zeros(variant, dims)?;
        let mut filled: Vec<&'static str> = Vec::new();
        for (name, tensor) in tensors {
            let slot = p
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::Inconsistent(format!("unexpected tensor '{name}'")))?;
            if slot.1.dims() != tensor.dims() {
                return Err(ModelError::Inconsistent(format!(
                    "tensor '{name}' has dims {:?}, configuration implies {:?}",
                    tensor.dims(),
                    slot.1.dims()
                )));
            }
            if !tensor.is_finite() {
                return Err(ModelError::Inconsistent(format!("tensor '{name}' is not finite")));
            }
            *slot.1 = tensor;
            filled.push(slot.0);
        }
        let expected: Vec<&str> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for name in expected {
            if !filled.contains(&name) {
                return Err(ModelError::Inconsistent(format!("missing tensor '{name}'")));
            }
        }
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            variant: self.variant,
            dims: self.dims,
            embedding: self.embedding.cast(),
            lstm_weight: self.lstm_weight.cast(),
            lstm_bias: self.lstm_bias.cast(),
            output: self.output.cast(),
            roles: self.roles.as_ref().map(|[a, b]| [a.cast(), b.cast()]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.squared_norm()).sum()
    }

    pub fn role_matrix(&self, role: Role) -> Option<&Tensor<T>> {
        self.roles.as_ref().map(|r| &r[role.index()])
    }
}

fn normalize_dims(variant: Variant, mut dims: Dims) -> Result<Dims> {
    if dims.vocab == 0 || dims.embed == 0 || dims.hidden == 0 {
        return Err(ModelError::Inconsistent(
            "vocabulary, embedding and hidden sizes must be at least 1".into(),
        ));
    }
    if variant.uses_topics() {
        if dims.topics == 0 {
            return Err(ModelError::Inconsistent(format!("{variant} needs at least one topic")));
        }
    } else {
        dims.topics = 0;
    }
    Ok(dims)
}

/// Hidden and cell state of the LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

/// Intermediate values of one LSTM step, kept for backpropagation.
struct StepTrace<T> {
    token: TokenId,
    /// `[embedding; h_prev]`
    input: Vec<T>,
    /// Activated gates `[i; f; o; g]`.
    gates: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

fn check_token<T: Scalar>(params: &ModelParams<T>, id: TokenId) -> Result<()> {
    if id >= params.dims.vocab {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: params.dims.vocab,
        });
    }
    Ok(())
}

fn lstm_forward<T: Scalar>(params: &ModelParams<T>, token: TokenId, state: &LstmState<T>) -> (LstmState<T>, StepTrace<T>) {
    let h = params.dims.hidden;
    let mut input = Vec::with_capacity(params.dims.embed + h);
    input.extend_from_slice(params.embedding.row(token));
    input.extend_from_slice(&state.h);
    let mut gates = vec![T::zero(); 4 * h];
    params.lstm_weight.matvec_into(&input, &mut gates);
    for (g, &b) in gates.iter_mut().zip(params.lstm_bias.data()) {
        *g = *g + b;
    }
    for g in &mut gates[..3 * h] {
        *g = sigmoid(*g);
    }
    for g in &mut gates[3 * h..] {
        *g = g.tanh();
    }
    let mut c = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut h_new = vec![T::zero(); h];
    for j in 0..h {
        let (i, f, o, g) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c[j] = f * state.c[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    let trace = StepTrace {
        token,
        input,
        gates,
        c_prev: state.c.clone(),
        tanh_c,
    };
    (LstmState { h: h_new, c }, trace)
}

/// One LSTM step on token `x_id`.
pub fn lstm_step<T: Scalar>(params: &ModelParams<T>, x_id: TokenId, state: &LstmState<T>) -> Result<LstmState<T>> {
    check_token(params, x_id)?;
    if state.h.len() != params.dims.hidden || state.c.len() != params.dims.hidden {
        return Err(ModelError::Inconsistent(format!(
            "state has width {}, model has {}",
            state.h.len(),
            params.dims.hidden
        )));
    }
    Ok(lstm_forward(params, x_id, state).0)
}

/// Inputs and activations of the output layer at one position.
struct OutputTrace<T> {
    /// `h` or `[h; s]`
    joined: Vec<T>,
    /// `joined` or `W_role · joined`
    projected: Vec<T>,
    probs: Vec<T>,
}

fn output_forward<T: Scalar>(params: &ModelParams<T>, h: &[T], topics: Option<&[T]>, role: Role) -> OutputTrace<T> {
    let mut joined = Vec::with_capacity(params.output_dim());
    joined.extend_from_slice(h);
    if params.variant.uses_topics() {
        joined.extend_from_slice(topics.expect("topic presence checked by caller"));
    }
    let projected = match &params.roles {
        Some(roles) => roles[role.index()].matvec(&joined),
        None => joined.clone(),
    };
    let mut probs = params.output.matvec(&projected);
    softmax_in_place(&mut probs);
    OutputTrace {
        joined,
        projected,
        probs,
    }
}

fn topic_slice<T: Scalar>(params: &ModelParams<T>, s: Option<&TopicVector>) -> Result<Option<Vec<T>>> {
    if !params.variant.uses_topics() {
        return Ok(None);
    }
    let s = s.ok_or(ModelError::MissingTopics(params.variant))?;
    if s.len() != params.dims.topics {
        return Err(ModelError::TopicDims {
            expected: params.dims.topics,
            found: s.len(),
        });
    }
    Ok(Some(s.values().iter().map(|&v| T::from_f64(v)).collect()))
}

/// Next-token distribution from hidden state `h`, topic vector `s` and role.
pub fn output_distribution<T: Scalar>(
    params: &ModelParams<T>,
    h: &[T],
    s: Option<&TopicVector>,
    role: Option<Role>,
) -> Result<ProbVector<T>> {
    if h.len() != params.dims.hidden {
        return Err(ModelError::Inconsistent(format!(
            "hidden state has width {}, model has {}",
            h.len(),
            params.dims.hidden
        )));
    }
    let topics = topic_slice(params, s)?;
    let role = match (role, params.variant.uses_roles()) {
        (Some(r), _) => r,
        (None, false) => Role::Poster,
        (None, true) => return Err(ModelError::MissingRole(params.variant)),
    };
    let mut joined = h.to_vec();
    if let Some(t) = &topics {
        joined.extend_from_slice(t);
    }
    let projected = match &params.roles {
        Some(roles) => roles[role.index()].matvec(&joined),
        None => joined,
    };
    Ok(softmax(&params.output.matvec(&projected))?)
}

fn check_topics(conv: &EncodedConversation, variant: Variant, topics: Option<&[TopicVector]>) -> Result<()> {
    if !variant.uses_topics() {
        return Ok(());
    }
    let topics = topics.ok_or(ModelError::MissingTopics(variant))?;
    if topics.len() != conv.turns.len() {
        return Err(ModelError::TopicsMisaligned {
            turns: conv.turns.len(),
            vectors: topics.len(),
        });
    }
    Ok(())
}

/// Running model state over a conversation: feeds turns in order and
/// carries the LSTM state across turn boundaries.
#[derive(Debug, Clone)]
pub struct Cursor<'a, T> {
    params: &'a ModelParams<T>,
    state: LstmState<T>,
}

impl<'a, T: Scalar> Cursor<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Cursor {
            params,
            state: LstmState::zeros(params.dims.hidden),
        }
    }

    pub fn with_state(params: &'a ModelParams<T>, state: LstmState<T>) -> Self {
        Cursor { params, state }
    }

    pub fn params(&self) -> &'a ModelParams<T> {
        self.params
    }

    pub fn state(&self) -> &LstmState<T> {
        &self.state
    }

    /// Feeds one token.
    pub fn feed(&mut self, token: TokenId) -> Result<()> {
        check_token(self.params, token)?;
        self.state = lstm_forward(self.params, token, &self.state).0;
        Ok(())
    }

    /// Feeds a framed turn without scoring it: every token but the final
    /// EOT, leaving the state where the next turn's BOT is fed.
    pub fn feed_turn(&mut self, turn: &EncodedTurn) -> Result<()> {
        let n = turn.ids.len().saturating_sub(1);
        for &id in &turn.ids[..n] {
            self.feed(id)?;
        }
        Ok(())
    }

    /// Next-token distribution at the current state.
    pub fn distribution(&self, s: Option<&TopicVector>, role: Role) -> Result<ProbVector<T>> {
        output_distribution(self.params, &self.state.h, s, Some(role))
    }

    /// Runs a framed turn: every token but the last is fed, every token but
    /// the first is predicted. Calls `visit` with each predictive
    /// distribution and its target; returns the summed log-probability.
    pub fn observe_turn_with<F>(&mut self, turn: &EncodedTurn, s: Option<&TopicVector>, mut visit: F) -> Result<f64>
    where
        F: FnMut(&[T], TokenId),
    {
        for &id in &turn.ids {
            check_token(self.params, id)?;
        }
        let topics = topic_slice(self.params, s)?;
        let mut log_prob = 0.0;
        for pair in turn.ids.windows(2) {
            self.state = lstm_forward(self.params, pair[0], &self.state).0;
            let out = output_forward(self.params, &self.state.h, topics.as_deref(), turn.role);
            log_prob -= clamped_nll(out.probs[pair[1]]).as_f64();
            visit(&out.probs, pair[1]);
        }
        Ok(log_prob)
    }

    pub fn observe_turn(&mut self, turn: &EncodedTurn, s: Option<&TopicVector>) -> Result<f64> {
        self.observe_turn_with(turn, s, |_, _| {})
    }
}

/// Result of a forward pass over a conversation.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Predictive distribution at every predicted position, in order.
    pub distributions: Vec<ProbVector<T>>,
    /// Summed cross-entropy.
    pub loss: f64,
    pub predicted: usize,
}

/// Runs the model over a whole conversation from a zero state.
pub fn forward_conversation<T: Scalar>(
    params: &ModelParams<T>,
    conversation: &EncodedConversation,
    topics: Option<&[TopicVector]>,
) -> Result<Forward<T>> {
    forward_impl(params, conversation, topics, true)
}

/// Summed loss and predicted-token count, without keeping distributions.
pub fn conversation_loss<T: Scalar>(
    params: &ModelParams<T>,
    conversation: &EncodedConversation,
    topics: Option<&[TopicVector]>,
) -> Result<(f64, usize)> {
    let f = forward_impl(params, conversation, topics, false)?;
    Ok((f.loss, f.predicted))
}

fn forward_impl<T: Scalar>(
    params: &ModelParams<T>,
    conversation: &EncodedConversation,
    topics: Option<&[TopicVector]>,
    keep: bool,
) -> Result<Forward<T>> {
    check_topics(conversation, params.variant, topics)?;
    let mut cursor = Cursor::new(params);
    let mut distributions = Vec::new();
    let mut loss = 0.0;
    let mut predicted = 0;
    for (t, turn) in conversation.turns.iter().enumerate() {
        let s = topics.map(|v| &v[t]);
        loss -= cursor.observe_turn_with(turn, s, |probs, _| {
            predicted += 1;
            if keep {
                distributions.push(ProbVector::new(probs.to_vec()).expect("softmax output is a distribution"));
            }
        })?;
    }
    Ok(Forward {
        distributions,
        loss,
        predicted,
    })
}

/// Gradients of the summed cross-entropy with respect to every parameter,
/// by backpropagation through time over the whole conversation. Topic
/// vectors are constants.
pub fn backward_conversation<T: Scalar>(
    params: &ModelParams<T>,
    conversation: &EncodedConversation,
    topics: Option<&[TopicVector]>,
) -> Result<(ModelParams<T>, f64)> {
    let mut grads = ModelParams::zeros(params.variant, params.dims)?;
    let loss = accumulate_gradients(params, conversation, topics, &mut grads)?;
    Ok((grads, loss))
}

/// Adds this conversation's gradients into `grads`; returns its loss.
pub fn accumulate_gradients<T: Scalar>(
    params: &ModelParams<T>,
    conversation: &EncodedConversation,
    topics: Option<&[TopicVector]>,
    grads: &mut ModelParams<T>,
) -> Result<f64> {
    check_topics(conversation, params.variant, topics)?;
    let h = params.dims.hidden;
    let k = params.dims.embed;

    struct Position<T> {
        step: StepTrace<T>,
        out: OutputTrace<T>,
        target: TokenId,
        role: Role,
    }

    let mut positions: Vec<Position<T>> = Vec::new();
    let mut state = LstmState::zeros(h);
    let mut loss = 0.0;
    for (t, turn) in conversation.turns.iter().enumerate() {
        for &id in &turn.ids {
            check_token(params, id)?;
        }
        let s = topic_slice(params, topics.map(|v| &v[t]))?;
        for pair in turn.ids.windows(2) {
            let (next, step) = lstm_forward(params, pair[0], &state);
            state = next;
            let out = output_forward(params, &state.h, s.as_deref(), turn.role);
            loss += clamped_nll(out.probs[pair[1]]).as_f64();
            positions.push(Position {
                step,
                out,
                target: pair[1],
                role: turn.role,
            });
        }
    }

    let mut dh_next = vec![T::zero(); h];
    let mut dc_next = vec![T::zero(); h];
    let mut d_logits = vec![T::zero(); params.dims.vocab];
    let mut d_proj = vec![T::zero(); params.output_dim()];
    let mut d_joined = vec![T::zero(); params.output_dim()];
    let mut d_gates = vec![T::zero(); 4 * h];
    let mut d_input = vec![T::zero(); k + h];
    for pos in positions.iter().rev() {
        d_logits.copy_from_slice(&pos.out.probs);
        d_logits[pos.target] = d_logits[pos.target] - T::one();
        grads.output.add_outer(&d_logits, &pos.out.projected);
        d_proj.fill(T::zero());
        params.output.matvec_t_acc(&d_logits, &mut d_proj);
        let d_h_out = match (&params.roles, &mut grads.roles) {
            (Some(roles), Some(groles)) => {
                let r = pos.role.index();
                groles[r].add_outer(&d_proj, &pos.out.joined);
                d_joined.fill(T::zero());
                roles[r].matvec_t_acc(&d_proj, &mut d_joined);
                &d_joined[..h]
            }
            _ => &d_proj[..h],
        };

        let step = &pos.step;
        for j in 0..h {
            let (i, f, o, g) = (
                step.gates[j],
                step.gates[h + j],
                step.gates[2 * h + j],
                step.gates[3 * h + j],
            );
            let tc = step.tanh_c[j];
            let dh = dh_next[j] + d_h_out[j];
            let dc = dc_next[j] + dh * o * (T::one() - tc * tc);
            d_gates[j] = dc * g * i * (T::one() - i);
            d_gates[h + j] = dc * step.c_prev[j] * f * (T::one() - f);
            d_gates[2 * h + j] = dh * tc * o * (T::one() - o);
            d_gates[3 * h + j] = dc * i * (T::one() - g * g);
            dc_next[j] = dc * f;
        }
        grads.lstm_weight.add_outer(&d_gates, &step.input);
        for (b, &d) in grads.lstm_bias.data_mut().iter_mut().zip(&d_gates) {
            *b = *b + d;
        }
        d_input.fill(T::zero());
        params.lstm_weight.matvec_t_acc(&d_gates, &mut d_input);
        for (e, &d) in grads.embedding.row_mut(step.token).iter_mut().zip(&d_input[..k]) {
            *e = *e + d;
        }
        dh_next.copy_from_slice(&d_input[k..]);
    }
    Ok(loss)
}
