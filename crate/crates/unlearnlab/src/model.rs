//! Toy autoregressive language models over a fixed context window.
//!
//! Two architectures share one interface: a logit table that stores an
//! independent logit row per observed context (exact memorization, cheap
//! retraining) and a windowed MLP whose shared parameters produce the
//! interference that makes unlearning nontrivial.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split, TokenId, BOS};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

pub const SNAPSHOT_MAGIC: &str = "UNLEARNLAB-MODEL-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    LogitTable,
    Mlp,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::LogitTable => write!(f, "logit_table"),
            Arch::Mlp => write!(f, "mlp"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(vocab_size: usize, seed: u64) -> Self {
        Self {
            arch: Arch::Mlp,
            vocab_size,
            context_len: 8,
            embed_dim: 16,
            hidden_dim: 64,
            seed,
        }
    }

    pub fn logit_table(vocab_size: usize, seed: u64) -> Self {
        Self {
            arch: Arch::LogitTable,
            vocab_size,
            context_len: 8,
            embed_dim: 0,
            hidden_dim: 0,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: String,
    pub epochs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

// Parameter slots per architecture.
// MLP: [embed V×d, w1 (n·d)×H, b1 H, w2 H×V, b2 V]
// LogitTable: [rows (contexts+1)×V]; the extra row serves unseen contexts.

#[derive(Clone, Debug)]
pub struct TinyLM {
    cfg: ModelConfig,
    params: Vec<Tensor>,
    contexts: Vec<Vec<TokenId>>,
    ctx_lookup: HashMap<Vec<TokenId>, usize>,
    provenance: Provenance,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

impl TinyLM {
    /// Windowed MLP: concatenated context embeddings, one tanh layer, output
    /// projection. Same seed, same parameters.
    pub fn new_mlp(cfg: &ModelConfig) -> Result<Self> {
        if cfg.arch != Arch::Mlp {
            return Err(Error::Config("new_mlp wants an mlp config".into()));
        }
        validate_dims(cfg)?;
        if cfg.embed_dim == 0 || cfg.hidden_dim == 0 {
            return Err(Error::Config("mlp needs embed_dim and hidden_dim".into()));
        }
        let (v, n, d, h) = (cfg.vocab_size, cfg.context_len, cfg.embed_dim, cfg.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = gaussian_tensor(&mut rng, v, d, 1.0);
        let w1 = gaussian_tensor(&mut rng, n * d, h, 1.0 / ((n * d) as f64).sqrt());
        let b1 = Tensor::zeros(vec![h]);
        let w2 = gaussian_tensor(&mut rng, h, v, 1.0 / (h as f64).sqrt());
        let b2 = Tensor::zeros(vec![v]);
        Ok(Self {
            cfg: cfg.clone(),
            params: vec![embed, w1, b1, w2, b2],
            contexts: Vec::new(),
            ctx_lookup: HashMap::new(),
            provenance: Provenance::default(),
        })
    }

    /// Logit table over the contexts observed in `sequences`, zero-initialized
    /// (uniform next-token distribution), plus one default row for unseen
    /// contexts.
    pub fn new_logit_table(cfg: &ModelConfig, sequences: &[Vec<TokenId>]) -> Result<Self> {
        if cfg.arch != Arch::LogitTable {
            return Err(Error::Config("new_logit_table wants a logit_table config".into()));
        }
        validate_dims(cfg)?;
        let mut contexts = Vec::new();
        let mut ctx_lookup = HashMap::new();
        for seq in sequences {
            check_tokens(seq, cfg.vocab_size)?;
            for t in 0..seq.len() {
                let w = window(seq, t, cfg.context_len);
                if !ctx_lookup.contains_key(&w) {
                    ctx_lookup.insert(w.clone(), contexts.len());
                    contexts.push(w);
                }
            }
        }
        let rows = Tensor::zeros(vec![contexts.len() + 1, cfg.vocab_size]);
        Ok(Self {
            cfg: cfg.clone(),
            params: vec![rows],
            contexts,
            ctx_lookup,
            provenance: Provenance::default(),
        })
    }

    /// Fresh model for `cfg`; the logit-table variant registers the training
    /// contexts of `data`.
    pub fn init(cfg: &ModelConfig, data: &Dataset) -> Result<Self> {
        match cfg.arch {
            Arch::Mlp => Self::new_mlp(cfg),
            Arch::LogitTable => {
                let seqs = data.training_sequences(&[Split::Forget, Split::Retain]);
                Self::new_logit_table(cfg, &seqs)
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn context_len(&self) -> usize {
        self.cfg.context_len
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Hex digest of the parameter payload; identifies a model state.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn table_row(&self, w: &[TokenId]) -> usize {
        *self.ctx_lookup.get(w).unwrap_or(&self.contexts.len())
    }

    /// Row indices consumed by the traced/pure forward passes: token ids per
    /// window slot for the MLP, one registry row per position for the table.
    fn forward_windows(&self, tokens: &[TokenId]) -> Vec<Vec<usize>> {
        (0..tokens.len())
            .map(|t| {
                let w = window(tokens, t, self.cfg.context_len);
                match self.cfg.arch {
                    Arch::Mlp => w.iter().map(|&id| id as usize).collect(),
                    Arch::LogitTable => vec![self.table_row(&w)],
                }
            })
            .collect()
    }

    /// Per-position next-token logits, one row per input position. Row `t`
    /// depends only on tokens before `t` (BOS-padded window).
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on empty sequence".into()));
        }
        check_tokens(tokens, self.cfg.vocab_size)?;
        let windows = self.forward_windows(tokens);
        match self.cfg.arch {
            Arch::LogitTable => {
                let rows = &self.params[0];
                let v = self.cfg.vocab_size;
                let mut data = Vec::with_capacity(tokens.len() * v);
                for w in &windows {
                    data.extend_from_slice(rows.row(w[0]));
                }
                Tensor::matrix(tokens.len(), v, data)
            }
            Arch::Mlp => {
                let [embed, w1, b1, w2, b2] = self.params.as_slice() else {
                    unreachable!("mlp has five parameter slots");
                };
                let d = self.cfg.embed_dim;
                let n = self.cfg.context_len;
                let mut feats = Vec::with_capacity(tokens.len() * n * d);
                for w in &windows {
                    for &row in w {
                        feats.extend_from_slice(embed.row(row));
                    }
                }
                let feats = Tensor::matrix(tokens.len(), n * d, feats)?;
                let mut pre = feats.matmul(w1)?;
                add_bias_in_place(&mut pre, b1);
                for v in pre.data_mut() {
                    *v = v.tanh();
                }
                let mut logits = pre.matmul(w2)?;
                add_bias_in_place(&mut logits, b2);
                Ok(logits)
            }
        }
    }

    /// Logits for the token following `prefix` (which may be empty).
    pub fn next_token_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        check_tokens(prefix, self.cfg.vocab_size)?;
        let mut padded = prefix.to_vec();
        padded.push(BOS); // placeholder; position len(prefix) ignores it
        let t = prefix.len();
        let logits = self.forward(&padded)?;
        Ok(logits.row(t).to_vec())
    }

    /// Sum over response positions of log p(y_t | x, y_<t).
    pub fn sequence_log_prob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::Contract("sequence_log_prob on empty response".into()));
        }
        let mut full = x.to_vec();
        full.extend_from_slice(y);
        let logits = self.forward(&full)?;
        let s = logits.log_softmax_rows();
        let v = self.cfg.vocab_size;
        let mut total = 0.0;
        for t in x.len()..full.len() {
            total += s.data()[t * v + full[t] as usize];
        }
        Ok(total)
    }

    /// Logit rows for the response positions only (the rows that predict `y`).
    pub fn response_logits(&self, x: &[TokenId], y: &[TokenId]) -> Result<Tensor> {
        if y.is_empty() {
            return Err(Error::Contract("response_logits on empty response".into()));
        }
        let mut full = x.to_vec();
        full.extend_from_slice(y);
        let logits = self.forward(&full)?;
        let v = self.cfg.vocab_size;
        let data = logits.data()[x.len() * v..full.len() * v].to_vec();
        Tensor::matrix(y.len(), v, data)
    }

    /// Greedy argmax continuation of `prefix`, `steps` tokens long.
    pub fn greedy_continuation(&self, prefix: &[TokenId], steps: usize) -> Result<Vec<TokenId>> {
        let mut seq = prefix.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = self.next_token_logits(&seq)?;
            let mut best = 0usize;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            out.push(best as TokenId);
            seq.push(best as TokenId);
        }
        Ok(out)
    }

    /// Registers the parameters on a tape for differentiable evaluation.
    pub fn begin_trace<'m>(&'m self, tape: &mut Tape) -> TracedModel<'m> {
        let params = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        TracedModel {
            model: self,
            params,
        }
    }

    /// Next-token prediction training with Adam; deterministic given the
    /// config seed. Trains on the forget and retain splits.
    pub fn finetune(&self, data: &Dataset, cfg: &TrainConfig) -> Result<TinyLM> {
        let seqs = data.training_sequences(&[Split::Forget, Split::Retain]);
        self.finetune_sequences(&seqs, cfg, &data.hash())
    }

    /// Training core shared by [`TinyLM::finetune`] and the retrain oracle.
    pub fn finetune_sequences(
        &self,
        seqs: &[Vec<TokenId>],
        cfg: &TrainConfig,
        dataset_hash: &str,
    ) -> Result<TinyLM> {
        if seqs.is_empty() {
            return Err(Error::Contract("finetune on empty dataset".into()));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        let mut model = self.clone();
        let mut adam = Adam::new(cfg.lr, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..seqs.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let (value, grad_tensors) = {
                    let mut tape = Tape::new();
                    let tm = model.begin_trace(&mut tape);
                    let mut parts = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let lp = tm.sequence_log_prob(&mut tape, &[], &seqs[i])?;
                        parts.push(tape.scale(lp, -1.0 / seqs[i].len() as f64));
                    }
                    let loss = mean_nodes(&mut tape, &parts)?;
                    let grads = tape.backward(loss)?;
                    (
                        tape.value(loss).item()?,
                        collect_grads(&grads, tm.param_ids()),
                    )
                };
                if !value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch: bi,
                        msg: format!("loss became {value}"),
                    });
                }
                adam.step(&mut model.params, &grad_tensors);
            }
        }
        model.provenance = Provenance {
            dataset_hash: dataset_hash.to_string(),
            epochs: cfg.epochs,
        };
        Ok(model)
    }

    /// Mean per-token negative log-likelihood of the given sequences.
    pub fn mean_token_nll(&self, seqs: &[Vec<TokenId>]) -> Result<f64> {
        if seqs.is_empty() {
            return Err(Error::Contract("mean_token_nll on empty set".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for s in seqs {
            total -= self.sequence_log_prob(&[], s)?;
            count += s.len();
        }
        Ok(total / count as f64)
    }

    // ── Snapshot I/O ────────────────────────────────────────────────

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            magic: SNAPSHOT_MAGIC.to_string(),
            config: self.cfg.clone(),
            provenance: self.provenance.clone(),
            contexts: self.contexts.clone(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(SNAPSHOT_MAGIC.as_bytes())?;
        f.write_all(b"\n")?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for p in &self.params {
            for v in p.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<TinyLM> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = vec![0u8; SNAPSHOT_MAGIC.len() + 1];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format("snapshot too short".into()))?;
        if magic != [SNAPSHOT_MAGIC.as_bytes(), b"\n"].concat() {
            return Err(Error::Format("bad snapshot magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: SnapshotHeader = serde_json::from_slice(&header_bytes)?;
        if header.magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad snapshot header magic".into()));
        }
        let mut params = Vec::with_capacity(header.param_shapes.len());
        for shape in &header.param_shapes {
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            f.read_exact(&mut buf)
                .map_err(|_| Error::Format("snapshot payload truncated".into()))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::new(shape.clone(), data)?);
        }
        let mut ctx_lookup = HashMap::new();
        for (i, c) in header.contexts.iter().enumerate() {
            ctx_lookup.insert(c.clone(), i);
        }
        Ok(TinyLM {
            cfg: header.config,
            params,
            contexts: header.contexts,
            ctx_lookup,
            provenance: header.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    magic: String,
    config: ModelConfig,
    provenance: Provenance,
    contexts: Vec<Vec<TokenId>>,
    param_shapes: Vec<Vec<usize>>,
}

fn validate_dims(cfg: &ModelConfig) -> Result<()> {
    if cfg.vocab_size == 0 || cfg.context_len == 0 {
        return Err(Error::Config(
            "vocab_size and context_len must be positive".into(),
        ));
    }
    Ok(())
}

fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} out of vocabulary {vocab}"
        )));
    }
    Ok(())
}

/// Last `n` tokens before position `t`, left-padded with BOS.
fn window(tokens: &[TokenId], t: usize, n: usize) -> Vec<TokenId> {
    (0..n)
        .map(|j| {
            let p = t as isize - n as isize + j as isize;
            if p < 0 {
                BOS
            } else {
                tokens[p as usize]
            }
        })
        .collect()
}

fn add_bias_in_place(m: &mut Tensor, bias: &Tensor) {
    let cols = bias.numel();
    let b = bias.data().to_vec();
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        *v += b[i % cols];
    }
}

/// Arithmetic mean of scalar nodes.
pub fn mean_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut iter = nodes.iter();
    let Some(&first) = iter.next() else {
        return Err(Error::Contract("mean of zero nodes".into()));
    };
    let mut acc = first;
    for &n in iter {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64))
}

/// Gradient tensors for the traced parameter leaves, in slot order.
pub fn collect_grads(grads: &crate::tensor::Gradients, ids: &[NodeId]) -> Vec<Tensor> {
    ids.iter().map(|&id| grads.wrt(id).clone()).collect()
}

/// Model parameters registered on a tape.
pub struct TracedModel<'m> {
    model: &'m TinyLM,
    params: Vec<NodeId>,
}

impl<'m> TracedModel<'m> {
    pub fn model(&self) -> &TinyLM {
        self.model
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    /// Traced twin of [`TinyLM::forward`].
    pub fn forward(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on empty sequence".into()));
        }
        check_tokens(tokens, self.model.cfg.vocab_size)?;
        let windows = self.model.forward_windows(tokens);
        match self.model.cfg.arch {
            Arch::LogitTable => tape.gather_rows_concat(self.params[0], windows),
            Arch::Mlp => {
                let [embed, w1, b1, w2, b2] = self.params.as_slice() else {
                    unreachable!("mlp has five parameter slots");
                };
                let feats = tape.gather_rows_concat(*embed, windows)?;
                let mm = tape.matmul(feats, *w1)?;
                let pre = tape.add_bias(mm, *b1)?;
                let h = tape.tanh(pre);
                let out = tape.matmul(h, *w2)?;
                tape.add_bias(out, *b2)
            }
        }
    }

    /// Log-softmax rows for the positions that predict `y`.
    pub fn response_log_softmax(
        &self,
        tape: &mut Tape,
        x: &[TokenId],
        y: &[TokenId],
    ) -> Result<NodeId> {
        if y.is_empty() {
            return Err(Error::Contract("empty response".into()));
        }
        let mut full = x.to_vec();
        full.extend_from_slice(y);
        let logits = self.forward(tape, &full)?;
        let s = tape.log_softmax_rows(logits);
        tape.slice_rows(s, x.len(), full.len())
    }

    /// Traced twin of [`TinyLM::sequence_log_prob`].
    pub fn sequence_log_prob(
        &self,
        tape: &mut Tape,
        x: &[TokenId],
        y: &[TokenId],
    ) -> Result<NodeId> {
        let s = self.response_log_softmax(tape, x, y)?;
        let picked = tape.gather_cols(s, y.iter().map(|&t| t as usize).collect())?;
        Ok(tape.sum_all(picked))
    }
}

// ── Optimizer ───────────────────────────────────────────────────────

/// Adam with bias correction; β₁=0.9, β₂=0.999, ε=1e-8, no weight decay.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for ((pi, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_corpus() -> Dataset {
        generate_corpus(6, 2, 0.34, 3).unwrap()
    }

    #[test]
    fn zero_init_table_is_uniform() {
        let cfg = ModelConfig::logit_table(4, 0);
        let m = TinyLM::new_logit_table(&cfg, &[vec![1, 2, 3]]).unwrap();
        let logits = m.forward(&[1, 2]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let s = logits.log_softmax_rows();
        let expect = -(4.0f64).ln();
        assert!(s.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::mlp(16, 9);
        let a = TinyLM::new_mlp(&cfg).unwrap();
        let b = TinyLM::new_mlp(&cfg).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn out_of_range_token_is_vocabulary_error() {
        let cfg = ModelConfig::mlp(8, 0);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        assert!(matches!(m.forward(&[9]), Err(Error::Vocabulary(_))));
    }

    proptest! {
        /// Causality: edits after position t leave logits at t unchanged.
        #[test]
        fn suffix_edits_do_not_change_prefix_logits(
            seed in 0u64..200,
            cut in 1usize..6,
            edit in 0u32..12,
        ) {
            let cfg = ModelConfig { arch: Arch::Mlp, vocab_size: 12, context_len: 4, embed_dim: 6, hidden_dim: 8, seed };
            let m = TinyLM::new_mlp(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let tokens: Vec<TokenId> = (0..8).map(|_| rng.gen_range(0..12)).collect();
            let base = m.forward(&tokens).unwrap();
            let mut edited = tokens.clone();
            let cut = cut.min(tokens.len() - 1);
            edited[cut] = edit;
            let changed = m.forward(&edited).unwrap();
            let v = 12usize;
            for t in 0..=cut {
                prop_assert_eq!(&base.data()[t*v..(t+1)*v], &changed.data()[t*v..(t+1)*v]);
            }
        }

        /// exp(log_softmax(forward)) rows each sum to one.
        #[test]
        fn forward_rows_normalize(seed in 0u64..50) {
            let cfg = ModelConfig { arch: Arch::Mlp, vocab_size: 10, context_len: 3, embed_dim: 4, hidden_dim: 6, seed };
            let m = TinyLM::new_mlp(&cfg).unwrap();
            let s = m.forward(&[1, 2, 3, 4]).unwrap().log_softmax_rows();
            for t in 0..4 {
                let total: f64 = s.row(t).iter().map(|v| v.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_forward_matches_straight_line_oracle() {
        let cfg = ModelConfig {
            arch: Arch::Mlp,
            vocab_size: 5,
            context_len: 2,
            embed_dim: 3,
            hidden_dim: 4,
            seed: 11,
        };
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let tokens: Vec<TokenId> = vec![2, 4, 1];
        let got = m.forward(&tokens).unwrap();

        // Straight-line re-implementation of the same arithmetic.
        let embed = &m.params()[0];
        let w1 = &m.params()[1];
        let b1 = &m.params()[2];
        let w2 = &m.params()[3];
        let b2 = &m.params()[4];
        for t in 0..tokens.len() {
            let ctx = [
                if t < 2 { 0 } else { tokens[t - 2] as usize },
                if t < 1 { 0 } else { tokens[t - 1] as usize },
            ];
            let mut feats = Vec::new();
            for id in ctx {
                feats.extend_from_slice(embed.row(id));
            }
            let mut hidden = vec![0.0; 4];
            for (hj, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1.data()[hj];
                for (fi, f) in feats.iter().enumerate() {
                    acc += f * w1.data()[fi * 4 + hj];
                }
                *h = acc.tanh();
            }
            for vj in 0..5 {
                let mut acc = b2.data()[vj];
                for (hj, h) in hidden.iter().enumerate() {
                    acc += h * w2.data()[hj * 5 + vj];
                }
                assert!((got.data()[t * 5 + vj] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_model_sequence_log_prob() {
        let cfg = ModelConfig::logit_table(4, 0);
        let m = TinyLM::new_logit_table(&cfg, &[]).unwrap();
        let lp = m.sequence_log_prob(&[], &[1, 2, 3]).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn length_one_log_prob_is_single_step_entry() {
        let cfg = ModelConfig::mlp(7, 5);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let x = vec![3, 1];
        let lp = m.sequence_log_prob(&x, &[4]).unwrap();
        let direct = crate::tensor::log_softmax_slice(&m.next_token_logits(&x).unwrap())[4];
        assert!((lp - direct).abs() < 1e-12);
    }

    #[test]
    fn sequence_log_prob_matches_per_step_oracle() {
        let cfg = ModelConfig::mlp(9, 2);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let x = vec![1u32, 5];
        let y = vec![2u32, 8, 3];
        let lp = m.sequence_log_prob(&x, &y).unwrap();
        let mut expect = 0.0;
        let mut prefix = x.clone();
        for &t in &y {
            let s = crate::tensor::log_softmax_slice(&m.next_token_logits(&prefix).unwrap());
            expect += s[t as usize];
            prefix.push(t);
        }
        assert!((lp - expect).abs() < 1e-12);
        assert!(matches!(
            m.sequence_log_prob(&x, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn traced_forward_matches_pure_forward() {
        for cfg in [
            ModelConfig {
                arch: Arch::Mlp,
                vocab_size: 8,
                context_len: 3,
                embed_dim: 4,
                hidden_dim: 5,
                seed: 2,
            },
            ModelConfig::logit_table(8, 2),
        ] {
            let m = match cfg.arch {
                Arch::Mlp => TinyLM::new_mlp(&cfg).unwrap(),
                Arch::LogitTable => {
                    TinyLM::new_logit_table(&cfg, &[vec![1, 2, 3, 4]]).unwrap()
                }
            };
            let tokens = vec![1u32, 2, 3, 4];
            let pure = m.forward(&tokens).unwrap();
            let mut tape = Tape::new();
            let tm = m.begin_trace(&mut tape);
            let node = tm.forward(&mut tape, &tokens).unwrap();
            assert_eq!(tape.value(node).data(), pure.data());
        }
    }

    #[test]
    fn finetune_memorizes_single_example() {
        let data = tiny_corpus();
        let one = Dataset {
            examples: vec![data.examples[0].clone()],
            vocab: data.vocab.clone(),
            meta: data.meta.clone(),
        };
        let cfg = ModelConfig::mlp(one.vocab_size(), 1);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let trained = m
            .finetune(
                &one,
                &TrainConfig {
                    epochs: 300,
                    lr: 3e-3,
                    batch_size: 8,
                    seed: 1,
                },
            )
            .unwrap();
        let nll = trained.mean_token_nll(&[one.examples[0].sequence()]).unwrap();
        assert!(nll < 0.1, "memorization nll {nll}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_corpus();
        let cfg = ModelConfig::mlp(data.vocab_size(), 4);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let out = m
            .finetune(
                &data,
                &TrainConfig {
                    epochs: 2,
                    lr: 0.0,
                    batch_size: 8,
                    seed: 5,
                },
            )
            .unwrap();
        assert_eq!(out.param_hash(), m.param_hash());
    }

    #[test]
    fn finetune_is_deterministic() {
        let data = tiny_corpus();
        let cfg = ModelConfig::mlp(data.vocab_size(), 4);
        let m = TinyLM::new_mlp(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 4,
            seed: 9,
        };
        let a = m.finetune(&data, &tc).unwrap();
        let b = m.finetune(&data, &tc).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn snapshot_round_trips_bit_exactly() {
        let data = tiny_corpus();
        for cfg in [
            ModelConfig::mlp(data.vocab_size(), 13),
            ModelConfig::logit_table(data.vocab_size(), 13),
        ] {
            let m = TinyLM::init(&cfg, &data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("snapshot_0");
            m.save_snapshot(&path).unwrap();
            let back = TinyLM::load_snapshot(&path).unwrap();
            assert_eq!(back.param_hash(), m.param_hash());
            assert_eq!(back.config().arch, cfg.arch);
            let probe = vec![1u32, 2, 3];
            assert_eq!(
                back.forward(&probe).unwrap().data(),
                m.forward(&probe).unwrap().data()
            );
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOT-A-SNAPSHOT-FILE!!!____").unwrap();
        assert!(matches!(
            TinyLM::load_snapshot(&path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let grads = vec![Tensor::vector(vec![0.5, -0.25])];
        let mut adam = Adam::new(0.1, &params);
        adam.step(&mut params, &grads);
        adam.step(&mut params, &grads);

        // Hand-rolled scalar Adam, two steps with the same gradient.
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1);
        for (i, &(p0, g)) in [(1.0, 0.5), (-2.0, -0.25)].iter().enumerate() {
            let mut p = p0;
            let mut m = 0.0;
            let mut v = 0.0;
            for t in 1..=2u32 {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32));
                let vh = v / (1.0 - b2.powi(t as i32));
                p -= lr * mh / (vh.sqrt() + eps);
            }
            assert!((params[0].data()[i] - p).abs() < 1e-15);
        }
    }
}
