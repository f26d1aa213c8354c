//! The unlearning loop and its method matrix.
//!
//! One epoch walks every forget mini-batch with retain batches cycling in
//! lockstep, regenerates preference pairs from the current model, applies
//! the configured forget/retain losses, and takes an Adam step. Everything
//! is deterministic given the config seed. Per-epoch artifacts (logs,
//! snapshots, curves) land in a run directory.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QAExample, Split, TokenId};
use crate::distributions::{build_preference_pair, distribution_rows, seq_kl, FilterConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{
    dipo_batch_loss, dipo_breakdown, dpo_template_batch_loss, ga_batch_loss, gd_batch_loss,
    kl_retain_batch_loss, npo_batch_loss, DipoConfig, PairRole, PairSource,
};
use crate::model::{collect_grads, Adam, ModelConfig, TinyLM, TrainConfig};
use crate::tensor::{NodeId, Tape};

/// Directional thresholds pinned for the toy end-to-end run and echoed into
/// every run manifest: after unlearning, forget-set answer NLL must rise by
/// at least this much while retain-set answer NLL rises by at most this much.
pub const FORGET_NLL_INCREASE_MIN: f64 = 2.0;
pub const RETAIN_NLL_INCREASE_MAX: f64 = 0.2;

/// Unlearning method matrix: the preference objective, its ablations, and
/// the baselines they are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dipo,
    DipoFOnly,
    DipoFGd,
    Ga,
    GaGd,
    GaKl,
    Npo,
    NpoGd,
    DpoGd,
    GaDipoR,
    NpoDipoR,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Dipo,
        Method::DipoFOnly,
        Method::DipoFGd,
        Method::Ga,
        Method::GaGd,
        Method::GaKl,
        Method::Npo,
        Method::NpoGd,
        Method::DpoGd,
        Method::GaDipoR,
        Method::NpoDipoR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dipo => "dipo",
            Method::DipoFOnly => "dipo_f_only",
            Method::DipoFGd => "dipo_f_gd",
            Method::Ga => "ga",
            Method::GaGd => "ga_gd",
            Method::GaKl => "ga_kl",
            Method::Npo => "npo",
            Method::NpoGd => "npo_gd",
            Method::DpoGd => "dpo_gd",
            Method::GaDipoR => "ga_dipo_r",
            Method::NpoDipoR => "npo_dipo_r",
        }
    }

    fn uses_dipo_forget(&self) -> bool {
        matches!(self, Method::Dipo | Method::DipoFOnly | Method::DipoFGd)
    }

    fn uses_dipo_retain(&self) -> bool {
        matches!(self, Method::Dipo | Method::GaDipoR | Method::NpoDipoR)
    }

    fn uses_beta(&self) -> bool {
        self.uses_dipo_forget()
            || self.uses_dipo_retain()
            || matches!(self, Method::Npo | Method::NpoGd | Method::NpoDipoR | Method::DpoGd)
    }

    pub fn has_retain_term(&self) -> bool {
        !matches!(self, Method::Ga | Method::Npo | Method::DipoFOnly)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    pub beta_f: f64,
    pub beta_r: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_k: f64,
    pub alpha: f64,
    pub pair_source: PairSource,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Dipo,
            beta_f: 0.05,
            beta_r: 0.05,
            lambda: 1.0,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            p_k: 0.05,
            alpha: 1.0,
            pair_source: PairSource::Current,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed as an explicit null-training probe.
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.method.uses_beta() && !(self.beta_f > 0.0 && self.beta_r > 0.0) {
            return Err(Error::Config(format!(
                "method {} needs positive beta, got beta_f={} beta_r={}",
                self.method.name(),
                self.beta_f,
                self.beta_r
            )));
        }
        if self.method.has_retain_term() && !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.filter().validate()
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            p_k: self.p_k,
            alpha: self.alpha,
        }
    }

    fn dipo(&self, beta: f64) -> DipoConfig {
        DipoConfig {
            beta,
            filter: self.filter(),
            pair_source: self.pair_source,
        }
    }
}

/// One completed epoch: mean component losses, the preferred-minus-
/// dispreferred return gap on the forget set, divergence from the reference,
/// and where the snapshot landed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub forget_loss: f64,
    pub retain_loss: Option<f64>,
    pub return_diff: f64,
    pub kl_from_ref_on_forget: f64,
    pub snapshot: Option<String>,
}

/// Everything needed to reproduce a run, echoed as `run.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: UnlearnConfig,
    pub dataset: crate::data::GenMeta,
    pub dataset_hash: String,
    pub reference_model: String,
    pub reference_config: ModelConfig,
    pub forget_nll_increase_min: f64,
    pub retain_nll_increase_max: f64,
}

/// Optional per-epoch evaluation used to fill the fq/mu curve columns.
pub struct EpochEvalCtx<'a> {
    pub retrain: &'a TinyLM,
    pub verbmem_prefix: usize,
}

fn qa_pairs(examples: &[&QAExample]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    examples
        .iter()
        .map(|e| (e.question_tokens.clone(), e.answer_tokens.clone()))
        .collect()
}

struct BatchOutcome {
    forget: f64,
    retain: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn method_loss(
    tape: &mut Tape,
    tm: &crate::model::TracedModel,
    reference: &TinyLM,
    cfg: &UnlearnConfig,
    fb: &[(Vec<TokenId>, Vec<TokenId>)],
    rb: &[(Vec<TokenId>, Vec<TokenId>)],
    refusal: &[TokenId],
) -> Result<(NodeId, BatchOutcome)> {
    let forget_node = if cfg.method.uses_dipo_forget() {
        dipo_batch_loss(tape, tm, reference, fb, PairRole::Forget, &cfg.dipo(cfg.beta_f))?.0
    } else {
        match cfg.method {
            Method::Ga | Method::GaGd | Method::GaKl | Method::GaDipoR => {
                ga_batch_loss(tape, tm, fb)?
            }
            Method::Npo | Method::NpoGd | Method::NpoDipoR => {
                npo_batch_loss(tape, tm, reference, fb, cfg.beta_f)?
            }
            Method::DpoGd => {
                let alts = vec![refusal.to_vec(); fb.len()];
                dpo_template_batch_loss(tape, tm, reference, fb, &alts, cfg.beta_f)?
            }
            _ => unreachable!("preference-forget methods handled above"),
        }
    };

    let retain_node = if cfg.method.uses_dipo_retain() {
        Some(dipo_batch_loss(tape, tm, reference, rb, PairRole::Retain, &cfg.dipo(cfg.beta_r))?.0)
    } else {
        match cfg.method {
            Method::DipoFGd | Method::GaGd | Method::NpoGd | Method::DpoGd => {
                Some(gd_batch_loss(tape, tm, rb)?)
            }
            Method::GaKl => Some(kl_retain_batch_loss(tape, tm, reference, rb)?),
            _ => None,
        }
    };

    let outcome = BatchOutcome {
        forget: tape.value(forget_node).item()?,
        retain: retain_node.map(|n| tape.value(n).item()).transpose()?,
    };
    let total = match retain_node {
        Some(r) => {
            let scaled = tape.scale(r, cfg.lambda);
            tape.add(forget_node, scaled)?
        }
        None => forget_node,
    };
    Ok((total, outcome))
}

/// Mean return gap (preferred minus dispreferred, forget roles) and mean
/// sequence KL from the reference, over the full forget set.
fn forget_diagnostics(
    model: &TinyLM,
    reference: &TinyLM,
    forget: &[(Vec<TokenId>, Vec<TokenId>)],
    cfg: &UnlearnConfig,
) -> Result<(f64, f64)> {
    let mut gap = 0.0;
    let mut kl = 0.0;
    for (x, y) in forget {
        let theta_logits = model.response_logits(x, y)?;
        let theta = distribution_rows(&theta_logits);
        let refd = distribution_rows(&reference.response_logits(x, y)?);
        let pair = build_preference_pair(&theta_logits, &cfg.filter())?;
        let bd = dipo_breakdown(&theta, &pair.pi_f, &pair.pi_m, &refd, cfg.beta_f)?;
        gap += bd.return_w - bd.return_l;
        kl += seq_kl(&theta, &refd)?;
    }
    let n = forget.len() as f64;
    Ok((gap / n, kl / n))
}

/// Runs the unlearning loop. The model must start from the reference
/// parameters; per-epoch snapshots and logs are written when `run_dir` is
/// given. Returns the final model and one log entry per epoch.
pub fn unlearn(
    model: &TinyLM,
    reference: &TinyLM,
    data: &Dataset,
    cfg: &UnlearnConfig,
    run_dir: Option<&Path>,
    eval_ctx: Option<&EpochEvalCtx>,
) -> Result<(TinyLM, Vec<EpochLog>)> {
    cfg.validate()?;
    let forget = qa_pairs(&data.examples_in(Split::Forget));
    let retain = qa_pairs(&data.examples_in(Split::Retain));
    if forget.is_empty() {
        return Err(Error::Contract("unlearn needs forget examples".into()));
    }
    if cfg.method.has_retain_term() && retain.is_empty() {
        return Err(Error::Contract(format!(
            "method {} needs retain examples",
            cfg.method.name()
        )));
    }
    let refusal = data.refusal_tokens()?;

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            config: cfg.clone(),
            dataset: data.meta.clone(),
            dataset_hash: data.hash(),
            reference_model: reference.param_hash(),
            reference_config: reference.config().clone(),
            forget_nll_increase_min: FORGET_NLL_INCREASE_MIN,
            retain_nll_increase_max: RETAIN_NLL_INCREASE_MAX,
        };
        std::fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
    }

    let mut current = model.clone();
    let mut adam = Adam::new(cfg.lr, current.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut retain_cursor = 0usize;
    let mut logs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut curves: Vec<String> = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..forget.len()).collect();
        order.shuffle(&mut rng);
        let mut forget_sum = 0.0;
        let mut retain_sum = 0.0;
        let mut retain_batches = 0usize;
        let mut n_batches = 0usize;

        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fb: Vec<_> = chunk.iter().map(|&i| forget[i].clone()).collect();
            // Retain batch of matching size, cycling when exhausted.
            let rb: Vec<_> = if cfg.method.has_retain_term() {
                (0..fb.len())
                    .map(|k| retain[(retain_cursor + k) % retain.len()].clone())
                    .collect()
            } else {
                Vec::new()
            };
            if cfg.method.has_retain_term() {
                retain_cursor = (retain_cursor + fb.len()) % retain.len();
            }

            let step = || -> Result<_> {
                let mut tape = Tape::new();
                let tm = current.begin_trace(&mut tape);
                let (node, outcome) =
                    method_loss(&mut tape, &tm, reference, cfg, &fb, &rb, &refusal)?;
                let grads = tape.backward(node)?;
                Ok((
                    tape.value(node).item()?,
                    outcome,
                    collect_grads(&grads, tm.param_ids()),
                ))
            };
            // Numeric blowups mid-run are divergence; report where.
            let (value, outcome, grad_tensors) = step().map_err(|e| match e {
                Error::Numeric(msg) => Error::Training {
                    epoch,
                    batch: bi,
                    msg,
                },
                other => other,
            })?;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    msg: format!("loss became {value}"),
                });
            }
            adam.step(current.params_mut(), &grad_tensors);

            forget_sum += outcome.forget;
            if let Some(r) = outcome.retain {
                retain_sum += r;
                retain_batches += 1;
            }
            n_batches += 1;
        }

        let (return_diff, kl_from_ref) = forget_diagnostics(&current, reference, &forget, cfg)?;
        let snapshot = match run_dir {
            Some(dir) => {
                let path = dir.join(format!("snapshot_{epoch}"));
                current.save_snapshot(&path)?;
                Some(path.to_string_lossy().to_string())
            }
            None => None,
        };
        let log = EpochLog {
            epoch,
            forget_loss: forget_sum / n_batches as f64,
            retain_loss: (retain_batches > 0).then(|| retain_sum / retain_batches as f64),
            return_diff,
            kl_from_ref_on_forget: kl_from_ref,
            snapshot,
        };
        if let Some(dir) = run_dir {
            std::fs::write(
                dir.join(format!("epoch_{epoch}.log.json")),
                serde_json::to_string_pretty(&log)?,
            )?;
        }
        let (fq_cell, mu_cell) = match eval_ctx {
            Some(ctx) => {
                let report = evaluate(&current, ctx.retrain, data, ctx.verbmem_prefix)?;
                (report.fq.to_string(), report.mu.to_string())
            }
            None => (String::new(), String::new()),
        };
        curves.push(format!(
            "{},{},{},{},{},{},{}",
            epoch,
            log.forget_loss,
            log.retain_loss.map(|v| v.to_string()).unwrap_or_default(),
            log.return_diff,
            log.kl_from_ref_on_forget,
            fq_cell,
            mu_cell
        ));
        logs.push(log);
    }

    if let Some(dir) = run_dir {
        let mut f = std::fs::File::create(dir.join("curves.csv"))?;
        writeln!(f, "epoch,forget_loss,retain_loss,return_diff,kl_from_ref,fq,mu")?;
        for row in &curves {
            writeln!(f, "{row}")?;
        }
    }
    Ok((current, logs))
}

/// Trains a fresh model on the retain split only, with the same seed
/// discipline as the original training run.
pub fn retrain_oracle(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TinyLM> {
    let retain_only = data.filtered(&[Split::Retain]);
    if retain_only.examples.is_empty() {
        return Err(Error::Contract("retrain oracle needs retain examples".into()));
    }
    let fresh = TinyLM::init(model_cfg, &retain_only)?;
    fresh.finetune(&retain_only, train_cfg)
}

/// Applies `unlearn` fold by fold, carrying the model forward; each fold's
/// reference is the model as it stood when that fold began. After every fold
/// the model is evaluated on the fixed `eval_data` against the provided
/// retrain oracle, so the metric trajectory is comparable across folds.
pub fn sequential_unlearn(
    model: &TinyLM,
    folds: &[Dataset],
    cfg: &UnlearnConfig,
    retrain: &TinyLM,
    eval_data: &Dataset,
    verbmem_prefix: usize,
) -> Result<Vec<(TinyLM, EvalReport)>> {
    if folds.is_empty() {
        return Err(Error::Contract("sequential_unlearn needs folds".into()));
    }
    // Folds must not share forget entities.
    let mut seen: Vec<String> = Vec::new();
    for fold in folds {
        for ex in fold.examples_in(Split::Forget) {
            if seen.contains(&ex.entity) {
                return Err(Error::Contract(format!(
                    "fold forget entity {} repeats across folds",
                    ex.entity
                )));
            }
        }
        let mut mine: Vec<String> = fold
            .examples_in(Split::Forget)
            .iter()
            .map(|e| e.entity.clone())
            .collect();
        mine.dedup();
        seen.extend(mine);
    }

    let mut current = model.clone();
    let mut out = Vec::with_capacity(folds.len());
    for fold in folds {
        let reference = current.clone();
        let (next, _) = unlearn(&current, &reference, fold, cfg, None, None)?;
        let report = evaluate(&next, retrain, eval_data, verbmem_prefix)?;
        out.push((next.clone(), report));
        current = next;
    }
    Ok(out)
}
