//! Forgetting and utility metrics for toy unlearning runs.
//!
//! Forget quality is the p-value of a two-sample Kolmogorov-Smirnov test
//! comparing truth-ratio distributions against a retain-only retrained
//! model. Utility is the harmonic mean of nine probability / ROUGE-L /
//! truth-ratio sub-scores over three evaluation sets. Memorization scores
//! are ROUGE-L of greedy continuations; the privacy-leak proxy compares
//! per-sample-loss membership AUCs between the unlearned and retrained
//! models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QAExample, Split, TokenId};
use crate::error::{Error, Result};
use crate::model::TinyLM;

// ── Elementary statistics ───────────────────────────────────────────

/// Two-sample Kolmogorov-Smirnov test. Returns the sup-distance between the
/// empirical CDFs and the asymptotic p-value with effective sample size
/// n_a·n_b/(n_a+n_b).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("ks_two_sample on empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));

    let count_le = |sorted: &[f64], v: f64| -> usize {
        sorted.partition_point(|&x| x <= v)
    };
    let mut d: f64 = 0.0;
    for &v in sa.iter().chain(sb.iter()) {
        let fa = count_le(&sa, v) as f64 / sa.len() as f64;
        let fb = count_le(&sb, v) as f64 / sb.len() as f64;
        d = d.max((fa - fb).abs());
    }

    let n_eff = (sa.len() * sb.len()) as f64 / (sa.len() + sb.len()) as f64;
    let lambda = n_eff.sqrt() * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// Asymptotic Kolmogorov survival function Q(λ) = 2 Σ (-1)^{j-1} e^{-2 j² λ²}.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 1e-9 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100u32 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        if j % 2 == 1 {
            sum += term;
        } else {
            sum -= term;
        }
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Membership AUC where LOWER scores indicate members:
/// P(member < nonmember) with ties counted one half.
pub fn auc_member_lower(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Contract("auc on empty sample".into()));
    }
    let n_m = members.len();
    let n_h = nonmembers.len();
    let mut pooled: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    // Midranks over ties, then the rank-sum formulation.
    let mut rank_sum_members = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for p in &pooled[i..j] {
            if p.1 {
                rank_sum_members += midrank;
            }
        }
        i = j;
    }
    let pairs = (n_m * n_h) as f64;
    let auc = ((n_m * n_h) as f64 + (n_m * (n_m + 1)) as f64 / 2.0 - rank_sum_members) / pairs;
    Ok(auc)
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("spearman over unequal lengths".into()));
    }
    if xs.len() < 2 {
        return Err(Error::Contract("spearman needs at least two points".into()));
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("spearman on constant sequence".into()));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = midrank;
        }
        i = j;
    }
    ranks
}

// ── Text metrics ────────────────────────────────────────────────────

/// ROUGE-L F1: longest common subsequence precision/recall, zero when either
/// side is empty.
pub fn rouge_l_f1(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (n, m) = (candidate.len(), reference.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    for i in 1..=n {
        for j in 1..=m {
            dp[i * (m + 1) + j] = if candidate[i - 1] == reference[j - 1] {
                dp[(i - 1) * (m + 1) + j - 1] + 1
            } else {
                dp[(i - 1) * (m + 1) + j].max(dp[i * (m + 1) + j - 1])
            };
        }
    }
    let lcs = dp[n * (m + 1) + m] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / n as f64;
    let recall = lcs / m as f64;
    2.0 * precision * recall / (precision + recall)
}

// ── Model-level metrics ─────────────────────────────────────────────

/// Length-normalized answer probability P(a|q)^{1/|a|}.
pub fn answer_probability(model: &TinyLM, question: &[TokenId], answer: &[TokenId]) -> Result<f64> {
    let lp = model.sequence_log_prob(question, answer)?;
    Ok((lp / answer.len() as f64).exp())
}

/// Ratio of the mean length-normalized perturbed-answer probability to the
/// paraphrased answer's probability. Below one means the model distinguishes
/// the true fact.
pub fn truth_ratio(model: &TinyLM, ex: &QAExample) -> Result<f64> {
    if ex.perturbed_answers.len() != crate::data::N_PERTURBED {
        return Err(Error::Contract(format!(
            "example {} carries {} perturbed answers",
            ex.id,
            ex.perturbed_answers.len()
        )));
    }
    let denom = answer_probability(model, &ex.question_tokens, &ex.paraphrased_answer)?;
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Numeric(format!(
            "degenerate paraphrase probability {denom} on {}",
            ex.id
        )));
    }
    let mut num = 0.0;
    for p in &ex.perturbed_answers {
        num += answer_probability(model, &ex.question_tokens, p)?;
    }
    num /= ex.perturbed_answers.len() as f64;
    Ok(num / denom)
}

/// Truth ratios over a whole example set.
pub fn truth_ratios(model: &TinyLM, examples: &[&QAExample]) -> Result<Vec<f64>> {
    examples.iter().map(|ex| truth_ratio(model, ex)).collect()
}

/// KS p-value between the unlearned and retrained models' truth-ratio
/// distributions on the forget set. High means indistinguishable.
pub fn forget_quality(
    unlearned: &TinyLM,
    retrain: &TinyLM,
    forget_set: &[&QAExample],
) -> Result<f64> {
    let a = truth_ratios(unlearned, forget_set)?;
    let b = truth_ratios(retrain, forget_set)?;
    Ok(ks_two_sample(&a, &b)?.1)
}

/// Mean per-token negative log-likelihood of answers given questions.
pub fn mean_answer_nll(model: &TinyLM, examples: &[&QAExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Contract("mean_answer_nll on empty set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        total -= model.sequence_log_prob(&ex.question_tokens, &ex.answer_tokens)?;
        count += ex.answer_tokens.len();
    }
    Ok(total / count as f64)
}

/// Per-example membership score: per-token NLL over the full sequence.
/// Lower means more member-like.
pub fn per_sample_losses(model: &TinyLM, examples: &[&QAExample]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|ex| {
            let seq = ex.sequence();
            Ok(-model.sequence_log_prob(&[], &seq)? / seq.len() as f64)
        })
        .collect()
}

/// Truth ratio folded into a "higher is better" score in (0,1].
pub fn truth_ratio_score(ratio: f64) -> f64 {
    (1.0 - ratio).max(0.0).max(1e-6)
}

/// (probability, ROUGE-L of greedy answers, rescaled truth ratio) averaged
/// over one evaluation set.
pub fn utility_sub_scores(model: &TinyLM, set: &[&QAExample]) -> Result<[f64; 3]> {
    if set.is_empty() {
        return Err(Error::Contract("utility_sub_scores on empty set".into()));
    }
    let mut prob = 0.0;
    let mut rouge = 0.0;
    let mut truth = 0.0;
    for ex in set {
        prob += answer_probability(model, &ex.question_tokens, &ex.answer_tokens)?;
        let gen = model.greedy_continuation(&ex.question_tokens, ex.answer_tokens.len())?;
        rouge += rouge_l_f1(&gen, &ex.answer_tokens);
        truth += truth_ratio_score(truth_ratio(model, ex)?);
    }
    let n = set.len() as f64;
    Ok([prob / n, rouge / n, truth / n])
}

/// Harmonic mean of the nine sub-scores; zero if any score is zero.
pub fn harmonic_mean(scores: &[f64]) -> f64 {
    if scores.iter().any(|&s| s <= 0.0) {
        return 0.0;
    }
    scores.len() as f64 / scores.iter().map(|s| 1.0 / s).sum::<f64>()
}

/// Harmonic mean of three sub-metrics across the retain set and two held-out
/// evaluation sets (nine scores total).
pub fn model_utility(
    model: &TinyLM,
    retain: &[&QAExample],
    aux: [&[&QAExample]; 2],
) -> Result<f64> {
    let mut scores = Vec::with_capacity(9);
    scores.extend(utility_sub_scores(model, retain)?);
    scores.extend(utility_sub_scores(model, aux[0])?);
    scores.extend(utility_sub_scores(model, aux[1])?);
    Ok(harmonic_mean(&scores))
}

/// Mean ROUGE-L between greedy continuations of `prefix_len`-token prompts
/// and the true continuations.
pub fn verbmem_f(model: &TinyLM, forget_set: &[&QAExample], prefix_len: usize) -> Result<f64> {
    if forget_set.is_empty() {
        return Err(Error::Contract("verbmem on empty set".into()));
    }
    let mut total = 0.0;
    for ex in forget_set {
        let seq = ex.sequence();
        if seq.len() <= prefix_len {
            return Err(Error::Contract(format!(
                "sequence {} not longer than prefix {prefix_len}",
                ex.id
            )));
        }
        let gen = model.greedy_continuation(&seq[..prefix_len], seq.len() - prefix_len)?;
        total += rouge_l_f1(&gen, &seq[prefix_len..]);
    }
    Ok(total / forget_set.len() as f64)
}

/// Mean ROUGE-L between greedy answers and gold answers.
pub fn knowmem(model: &TinyLM, qa_set: &[&QAExample]) -> Result<f64> {
    if qa_set.is_empty() {
        return Err(Error::Contract("knowmem on empty set".into()));
    }
    let mut total = 0.0;
    for ex in qa_set {
        let gen = model.greedy_continuation(&ex.question_tokens, ex.answer_tokens.len())?;
        total += rouge_l_f1(&gen, &ex.answer_tokens);
    }
    Ok(total / qa_set.len() as f64)
}

/// Relative deviation of the unlearned model's membership AUC from the
/// retrained model's, scored on forget (members) vs holdout (non-members)
/// per-sample losses. Zero is ideal.
pub fn privleak_proxy(
    unlearned: &TinyLM,
    retrain: &TinyLM,
    forget_set: &[&QAExample],
    holdout_set: &[&QAExample],
) -> Result<f64> {
    let auc_u = auc_member_lower(
        &per_sample_losses(unlearned, forget_set)?,
        &per_sample_losses(unlearned, holdout_set)?,
    )?;
    let auc_r = auc_member_lower(
        &per_sample_losses(retrain, forget_set)?,
        &per_sample_losses(retrain, holdout_set)?,
    )?;
    if auc_r == 0.0 {
        return Err(Error::Numeric("retrain membership AUC is zero".into()));
    }
    Ok((auc_u - auc_r) / auc_r)
}

// ── Reports ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerExampleMetrics {
    pub split: Split,
    pub truth_ratio: f64,
    pub answer_prob: f64,
    pub rouge_answer: f64,
    pub answer_nll: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_hash: String,
    pub truth_ratios_forget: Vec<f64>,
    pub fq: f64,
    pub mu: f64,
    pub verbmem_f: f64,
    pub knowmem_f: f64,
    pub knowmem_r: f64,
    pub privleak: f64,
    pub forget_answer_nll: f64,
    pub retain_answer_nll: f64,
    pub per_example: BTreeMap<String, PerExampleMetrics>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub const CSV_HEADER: &'static str =
        "model_id,dataset_hash,fq,mu,verbmem_f,knowmem_f,knowmem_r,privleak,forget_answer_nll,retain_answer_nll";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model_id,
            self.dataset_hash,
            self.fq,
            self.mu,
            self.verbmem_f,
            self.knowmem_f,
            self.knowmem_r,
            self.privleak,
            self.forget_answer_nll,
            self.retain_answer_nll
        )
    }
}

/// The two halves of the holdout split, divided by entity; these stand in
/// for the extra evaluation sets model utility needs.
pub fn holdout_halves(data: &Dataset) -> Result<(Vec<&QAExample>, Vec<&QAExample>)> {
    let holdout = data.examples_in(Split::Holdout);
    let mut entities: Vec<&str> = Vec::new();
    for ex in &holdout {
        if !entities.contains(&ex.entity.as_str()) {
            entities.push(&ex.entity);
        }
    }
    if entities.len() < 2 {
        return Err(Error::Contract(
            "need at least two holdout entities for the evaluation sets".into(),
        ));
    }
    let first: Vec<&str> = entities.iter().step_by(2).copied().collect();
    let (a, b): (Vec<&QAExample>, Vec<&QAExample>) = holdout
        .into_iter()
        .partition(|ex| first.contains(&ex.entity.as_str()));
    Ok((a, b))
}

/// Default continuation prompt length for the verbatim-memorization score.
pub const DEFAULT_VERBMEM_PREFIX: usize = 8;

/// Full evaluation of one model against the retrain oracle.
pub fn evaluate(
    model: &TinyLM,
    retrain: &TinyLM,
    data: &Dataset,
    verbmem_prefix: usize,
) -> Result<EvalReport> {
    let forget = data.examples_in(Split::Forget);
    let retain = data.examples_in(Split::Retain);
    let holdout = data.examples_in(Split::Holdout);
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::Contract("evaluation needs forget and retain examples".into()));
    }
    let (aux1, aux2) = holdout_halves(data)?;

    let ratios = truth_ratios(model, &forget)?;
    let fq = forget_quality(model, retrain, &forget)?;
    let mu = model_utility(model, &retain, [&aux1, &aux2])?;

    let mut per_example = BTreeMap::new();
    for ex in data.examples.iter() {
        let gen = model.greedy_continuation(&ex.question_tokens, ex.answer_tokens.len())?;
        per_example.insert(
            ex.id.clone(),
            PerExampleMetrics {
                split: ex.split,
                truth_ratio: truth_ratio(model, ex)?,
                answer_prob: answer_probability(model, &ex.question_tokens, &ex.answer_tokens)?,
                rouge_answer: rouge_l_f1(&gen, &ex.answer_tokens),
                answer_nll: -model.sequence_log_prob(&ex.question_tokens, &ex.answer_tokens)?
                    / ex.answer_tokens.len() as f64,
            },
        );
    }

    Ok(EvalReport {
        model_id: model.param_hash(),
        dataset_hash: data.hash(),
        truth_ratios_forget: ratios,
        fq,
        mu,
        verbmem_f: verbmem_f(model, &forget, verbmem_prefix)?,
        knowmem_f: knowmem(model, &forget)?,
        knowmem_r: knowmem(model, &retain)?,
        privleak: privleak_proxy(model, retrain, &forget, &holdout)?,
        forget_answer_nll: mean_answer_nll(model, &forget)?,
        retain_answer_nll: mean_answer_nll(model, &retain)?,
        per_example,
    })
}
