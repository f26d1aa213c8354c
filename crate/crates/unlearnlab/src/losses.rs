//! Unlearning objectives over distribution sequences.
//!
//! The preference loss scores a response by the gap between two
//! sequence-KL "returns" (preferred minus dispreferred) squashed through
//! -log sigmoid; the forget and retain instantiations reuse one pair with
//! the roles swapped. Baselines: likelihood ascent (GA), retain descent
//! (GD), retain KL anchoring, negative preference (NPO), and a template
//! preference variant with a fixed refusal answer.
//!
//! All losses differentiate through the model under optimization only; the
//! preference pair and the reference model enter as constants.

use crate::data::TokenId;
use crate::distributions::{
    build_preference_pair, distribution_rows, seq_kl, FilterConfig, ProbDistribution,
};
use crate::error::{Error, Result};
use crate::model::{mean_nodes, TinyLM, TracedModel};
use crate::tensor::{sigmoid, softplus, NodeId, Tape, Tensor};

use serde::{Deserialize, Serialize};

/// Where the preference pair's logits come from: the model being optimized
/// (regenerated every batch) or the frozen reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Current,
    Reference,
}

/// Which member of the pair is preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairRole {
    /// Prefer the suppressed distribution: push knowledge out.
    Forget,
    /// Prefer the enhanced distribution: anchor knowledge in.
    Retain,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DipoConfig {
    pub beta: f64,
    pub filter: FilterConfig,
    pub pair_source: PairSource,
}

impl Default for DipoConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            filter: FilterConfig::default(),
            pair_source: PairSource::Current,
        }
    }
}

impl DipoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        self.filter.validate()
    }
}

/// Question/answer token pairs; the unit every batch loss consumes.
pub type QaBatch = [(Vec<TokenId>, Vec<TokenId>)];

/// The three sequence-KL terms of a distribution-level return and their
/// beta-weighted combination.
#[derive(Clone, Copy, Debug)]
pub struct ReturnValue {
    pub value: f64,
    /// [KL(pi||ref), KL(pi||theta), KL(ref||theta)] summed over steps.
    pub terms: [f64; 3],
}

/// Loss decomposition: x1/x2 are the dispreferred/preferred sequence-KL
/// distances from the optimized model, c the constant reference offset.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub x1: f64,
    pub x2: f64,
    pub c: f64,
    pub beta: f64,
    pub loss: f64,
    pub return_w: f64,
    pub return_l: f64,
}

impl LossBreakdown {
    /// The sigmoid argument beta*(x1 - x2 + c); also return_w - return_l.
    pub fn argument(&self) -> f64 {
        self.beta * (self.x1 - self.x2 + self.c)
    }
}

/// Return of a distribution sequence against the optimized and reference
/// models: beta * (KL(pi||ref) - KL(pi||theta) + KL(ref||theta)).
pub fn returns(
    pi: &[ProbDistribution],
    theta: &[ProbDistribution],
    reference: &[ProbDistribution],
    beta: f64,
) -> Result<ReturnValue> {
    let terms = [
        seq_kl(pi, reference)?,
        seq_kl(pi, theta)?,
        seq_kl(reference, theta)?,
    ];
    Ok(ReturnValue {
        value: beta * (terms[0] - terms[1] + terms[2]),
        terms,
    })
}

/// Pure evaluation of the preference loss and its decomposition.
pub fn dipo_breakdown(
    theta: &[ProbDistribution],
    w: &[ProbDistribution],
    l: &[ProbDistribution],
    reference: &[ProbDistribution],
    beta: f64,
) -> Result<LossBreakdown> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let x1 = seq_kl(l, theta)?;
    let x2 = seq_kl(w, theta)?;
    let c = seq_kl(w, reference)? - seq_kl(l, reference)?;
    let loss = softplus(-(beta * (x1 - x2 + c)));
    let return_w = returns(w, theta, reference, beta)?.value;
    let return_l = returns(l, theta, reference, beta)?.value;
    Ok(LossBreakdown {
        x1,
        x2,
        c,
        beta,
        loss,
        return_w,
        return_l,
    })
}

/// Sum over positions of p·log p for a constant distribution sequence, plus
/// the stacked probability matrix. KL(p||theta) then reduces to
/// `entropy_term - sum(P ⊙ s_theta)`, which keeps the traced graph linear in
/// the optimized model's log-probabilities.
fn constant_kl_pieces(dists: &[ProbDistribution]) -> (Tensor, f64) {
    let v = dists[0].len();
    let mut probs = Vec::with_capacity(dists.len() * v);
    let mut plogp = 0.0;
    for d in dists {
        for &lp in d.log_probs() {
            let p = lp.exp();
            probs.push(p);
            plogp += p * lp;
        }
    }
    (
        Tensor::matrix(dists.len(), v, probs).expect("consistent dims"),
        plogp,
    )
}

fn kl_const_vs_node(
    tape: &mut Tape,
    dists: &[ProbDistribution],
    theta_log_sm: NodeId,
) -> Result<NodeId> {
    let (probs, plogp) = constant_kl_pieces(dists);
    if tape.value(theta_log_sm).shape() != probs.shape() {
        return Err(Error::Dimension(format!(
            "distribution sequence {:?} vs traced log-probs {:?}",
            probs.shape(),
            tape.value(theta_log_sm).shape()
        )));
    }
    let p_node = tape.constant(probs);
    let dot = tape.mul(p_node, theta_log_sm)?;
    let total = tape.sum_all(dot);
    let neg = tape.scale(total, -1.0);
    Ok(tape.add_scalar(neg, plogp))
}

/// Differentiable preference loss over one response. `theta_log_sm` carries
/// the optimized model's response log-probabilities; `w`, `l` and
/// `reference` are detached constants. Returns the loss node plus the
/// evaluated breakdown.
pub fn dipo_loss_node(
    tape: &mut Tape,
    theta_log_sm: NodeId,
    w: &[ProbDistribution],
    l: &[ProbDistribution],
    reference: &[ProbDistribution],
    beta: f64,
) -> Result<(NodeId, LossBreakdown)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    let breakdown = {
        let theta = distribution_rows(tape.value(theta_log_sm));
        // value already normalized; re-normalizing log-probs is a no-op
        dipo_breakdown(&theta, w, l, reference, beta)?
    };
    let x1 = kl_const_vs_node(tape, l, theta_log_sm)?;
    let x2 = kl_const_vs_node(tape, w, theta_log_sm)?;
    let c = seq_kl(w, reference)? - seq_kl(l, reference)?;
    let diff = tape.sub(x1, x2)?;
    let shifted = tape.add_scalar(diff, c);
    let arg = tape.scale(shifted, beta);
    let neg = tape.scale(arg, -1.0);
    Ok((tape.softplus_node(neg), breakdown))
}

fn pair_logits_for(
    model: &TinyLM,
    reference: &TinyLM,
    source: PairSource,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<Tensor> {
    match source {
        PairSource::Current => model.response_logits(x, y),
        PairSource::Reference => reference.response_logits(x, y),
    }
}

/// Batch preference loss, differentiable through the traced model. One
/// preference pair per example, rebuilt from the configured logit source;
/// reference distributions and the pair itself are constants.
pub fn dipo_batch_loss(
    tape: &mut Tape,
    tm: &TracedModel,
    reference: &TinyLM,
    batch: &QaBatch,
    role: PairRole,
    cfg: &DipoConfig,
) -> Result<(NodeId, Vec<LossBreakdown>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut nodes = Vec::with_capacity(batch.len());
    let mut breakdowns = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let s = tm.response_log_softmax(tape, x, y)?;
        let pair_logits = pair_logits_for(tm.model(), reference, cfg.pair_source, x, y)?;
        let pair = build_preference_pair(&pair_logits, &cfg.filter)?;
        let ref_dists = distribution_rows(&reference.response_logits(x, y)?);
        let (w, l) = match role {
            PairRole::Forget => (&pair.pi_f, &pair.pi_m),
            PairRole::Retain => (&pair.pi_m, &pair.pi_f),
        };
        let (node, bd) = dipo_loss_node(tape, s, w, l, &ref_dists, cfg.beta)?;
        nodes.push(node);
        breakdowns.push(bd);
    }
    Ok((mean_nodes(tape, &nodes)?, breakdowns))
}

/// Forget objective value: prefer the suppressed distribution.
pub fn dipo_forget_loss(
    model: &TinyLM,
    reference: &TinyLM,
    batch: &QaBatch,
    cfg: &DipoConfig,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let mut tape = Tape::new();
    let tm = model.begin_trace(&mut tape);
    let (node, bds) = dipo_batch_loss(&mut tape, &tm, reference, batch, PairRole::Forget, cfg)?;
    Ok((tape.value(node).item()?, bds))
}

/// Retain objective value: prefer the enhanced distribution.
pub fn dipo_retain_loss(
    model: &TinyLM,
    reference: &TinyLM,
    batch: &QaBatch,
    cfg: &DipoConfig,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let mut tape = Tape::new();
    let tm = model.begin_trace(&mut tape);
    let (node, bds) = dipo_batch_loss(&mut tape, &tm, reference, batch, PairRole::Retain, cfg)?;
    Ok((tape.value(node).item()?, bds))
}

/// Forget loss plus `lambda` times the retain loss.
pub fn combined_objective(
    model: &TinyLM,
    reference: &TinyLM,
    forget_batch: &QaBatch,
    retain_batch: &QaBatch,
    lambda: f64,
    cfg: &DipoConfig,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (f, _) = dipo_forget_loss(model, reference, forget_batch, cfg)?;
    let (r, _) = dipo_retain_loss(model, reference, retain_batch, cfg)?;
    Ok(f + lambda * r)
}

// ── Baselines ───────────────────────────────────────────────────────

/// Mean sequence log-probability, positive-signed: minimizing it ascends the
/// batch's negative log-likelihood.
pub fn ga_batch_loss(tape: &mut Tape, tm: &TracedModel, batch: &QaBatch) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        nodes.push(tm.sequence_log_prob(tape, x, y)?);
    }
    mean_nodes(tape, &nodes)
}

/// Mean negative sequence log-probability on retain data.
pub fn gd_batch_loss(tape: &mut Tape, tm: &TracedModel, batch: &QaBatch) -> Result<NodeId> {
    let ga = ga_batch_loss(tape, tm, batch)?;
    Ok(tape.scale(ga, -1.0))
}

/// Mean sequence KL from the optimized model to the reference over response
/// positions.
pub fn kl_retain_batch_loss(
    tape: &mut Tape,
    tm: &TracedModel,
    reference: &TinyLM,
    batch: &QaBatch,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let s = tm.response_log_softmax(tape, x, y)?;
        let ref_log_sm = reference.response_logits(x, y)?.log_softmax_rows();
        let r = tape.constant(ref_log_sm);
        let diff = tape.sub(s, r)?;
        let p = tape.exp(s);
        let weighted = tape.mul(p, diff)?;
        nodes.push(tape.sum_all(weighted));
    }
    mean_nodes(tape, &nodes)
}

/// Bounded forget loss: -(2/beta) mean log sigmoid(-beta * log-ratio against
/// the reference).
pub fn npo_batch_loss(
    tape: &mut Tape,
    tm: &TracedModel,
    reference: &TinyLM,
    batch: &QaBatch,
    beta: f64,
) -> Result<NodeId> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let lp = tm.sequence_log_prob(tape, x, y)?;
        let ratio = tape.add_scalar(lp, -reference.sequence_log_prob(x, y)?);
        let arg = tape.scale(ratio, beta);
        let sp = tape.softplus_node(arg);
        nodes.push(tape.scale(sp, 2.0 / beta));
    }
    mean_nodes(tape, &nodes)
}

/// Template preference: prefer the paired alternative answer over the forget
/// answer, both scored as log-ratios against the reference.
pub fn dpo_template_batch_loss(
    tape: &mut Tape,
    tm: &TracedModel,
    reference: &TinyLM,
    batch: &QaBatch,
    alt_answers: &[Vec<TokenId>],
    beta: f64,
) -> Result<NodeId> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch.len() != alt_answers.len() {
        return Err(Error::Contract(format!(
            "unpaired batches: {} prompts vs {} alternatives",
            batch.len(),
            alt_answers.len()
        )));
    }
    let mut nodes = Vec::with_capacity(batch.len());
    for ((x, y_f), y_alt) in batch.iter().zip(alt_answers) {
        let lp_f = tm.sequence_log_prob(tape, x, y_f)?;
        let delta_f = tape.add_scalar(lp_f, -reference.sequence_log_prob(x, y_f)?);
        let lp_alt = tm.sequence_log_prob(tape, x, y_alt)?;
        let delta_alt = tape.add_scalar(lp_alt, -reference.sequence_log_prob(x, y_alt)?);
        let diff = tape.sub(delta_alt, delta_f)?;
        let arg = tape.scale(diff, -beta);
        let sp = tape.softplus_node(arg);
        nodes.push(tape.scale(sp, 1.0 / beta));
    }
    mean_nodes(tape, &nodes)
}

// ── Value wrappers ──────────────────────────────────────────────────

fn value_of(
    model: &TinyLM,
    build: impl FnOnce(&mut Tape, &TracedModel) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tm = model.begin_trace(&mut tape);
    let node = build(&mut tape, &tm)?;
    tape.value(node).item()
}

pub fn ga_loss(model: &TinyLM, batch: &QaBatch) -> Result<f64> {
    value_of(model, |tape, tm| ga_batch_loss(tape, tm, batch))
}

pub fn gd_retain_loss(model: &TinyLM, batch: &QaBatch) -> Result<f64> {
    value_of(model, |tape, tm| gd_batch_loss(tape, tm, batch))
}

pub fn kl_retain_loss(model: &TinyLM, reference: &TinyLM, batch: &QaBatch) -> Result<f64> {
    value_of(model, |tape, tm| {
        kl_retain_batch_loss(tape, tm, reference, batch)
    })
}

pub fn npo_loss(model: &TinyLM, reference: &TinyLM, batch: &QaBatch, beta: f64) -> Result<f64> {
    value_of(model, |tape, tm| {
        npo_batch_loss(tape, tm, reference, batch, beta)
    })
}

pub fn dpo_template_loss(
    model: &TinyLM,
    reference: &TinyLM,
    batch: &QaBatch,
    alt_answers: &[Vec<TokenId>],
    beta: f64,
) -> Result<f64> {
    value_of(model, |tape, tm| {
        dpo_template_batch_loss(tape, tm, reference, batch, alt_answers, beta)
    })
}

/// Analytic partials of -log sigmoid(beta*(x1 - x2 + c)) with respect to x1
/// and x2 treated as free variables.
pub fn argument_partials(x1: f64, x2: f64, c: f64, beta: f64) -> (f64, f64) {
    let s = sigmoid(beta * (x1 - x2 + c));
    (-beta * (1.0 - s), beta * (1.0 - s))
}
