//! Distribution-level machinery: per-step KL and its sequence sum, the
//! high-confidence logit filter, the masked memory vector, and the
//! memory-enhancing / forgetting-promoting preference pair built from a
//! model's own logits.
//!
//! The filter combines a rank rule and a relative rule: with log-probs
//! `s = log_softmax(z)`, it keeps every token with `s_i >= min(tau_k,
//! tau_rel)`, where `tau_k` is the k-th ranked log-prob for
//! `k = max(1, floor(p_k * V))` and `tau_rel = max(s) + ln(p_k)`. The
//! literature calls this both "top-k" and "top-p" filtering; both names mean
//! this rule here.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_slice, logsumexp, Tensor};

/// Next-token distribution stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDistribution {
    log_probs: Vec<f64>,
}

impl ProbDistribution {
    /// Validates normalization: logsumexp must vanish and no entry may be
    /// positive.
    pub fn new(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::Dimension("empty distribution".into()));
        }
        let lse = logsumexp(&log_probs);
        if lse.abs() > 1e-10 {
            return Err(Error::Numeric(format!(
                "log-probs not normalized: logsumexp = {lse:e}"
            )));
        }
        if log_probs.iter().any(|&v| v > 0.0) {
            return Err(Error::Numeric("positive log-probability".into()));
        }
        Ok(Self { log_probs })
    }

    /// Normalizes raw logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            log_probs: log_softmax_slice(logits),
        }
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }
}

/// One distribution per row of a logit matrix.
pub fn distribution_rows(logits: &Tensor) -> Vec<ProbDistribution> {
    let s = logits.log_softmax_rows();
    match s.shape() {
        [_] => vec![ProbDistribution {
            log_probs: s.data().to_vec(),
        }],
        [r, _] => (0..*r)
            .map(|t| ProbDistribution {
                log_probs: s.row(t).to_vec(),
            })
            .collect(),
        other => panic!("distribution_rows on shape {other:?}"),
    }
}

/// KL(p || q) in nats: sum_i exp(p_i) (p_i - q_i).
pub fn kl_divergence(p: &ProbDistribution, q: &ProbDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence over {} vs {} tokens",
            p.len(),
            q.len()
        )));
    }
    Ok(p.log_probs
        .iter()
        .zip(&q.log_probs)
        .map(|(&pi, &qi)| pi.exp() * (pi - qi))
        .sum())
}

/// Sum of per-step KL divergences along two equally long distribution
/// sequences.
pub fn seq_kl(pi_a: &[ProbDistribution], pi_b: &[ProbDistribution]) -> Result<f64> {
    if pi_a.len() != pi_b.len() {
        return Err(Error::Dimension(format!(
            "seq_kl over {} vs {} steps",
            pi_a.len(),
            pi_b.len()
        )));
    }
    if pi_a.is_empty() {
        return Err(Error::Dimension("seq_kl over empty sequences".into()));
    }
    let mut total = 0.0;
    for (a, b) in pi_a.iter().zip(pi_b) {
        total += kl_divergence(a, b)?;
    }
    Ok(total)
}

/// High-confidence token logits isolated by the filter; zero elsewhere.
#[derive(Clone, Debug)]
pub struct MemoryVector {
    pub values: Vec<f64>,
    pub support: BTreeSet<usize>,
}

/// Filter fraction and modulation strength for preference-pair construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FilterConfig {
    pub p_k: f64,
    pub alpha: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            p_k: 0.05,
            alpha: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_k > 0.0 && self.p_k <= 1.0) {
            return Err(Error::Config(format!("p_k must lie in (0,1], got {}", self.p_k)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Token ids whose log-probability clears the combined rank/relative
/// threshold. At least one token is always selected; ties at the threshold
/// are all included.
pub fn select_support(logits: &[f64], p_k: f64) -> Result<BTreeSet<usize>> {
    FilterConfig { p_k, alpha: 0.0 }.validate()?;
    if logits.is_empty() {
        return Err(Error::Dimension("select_support on empty logits".into()));
    }
    let s = log_softmax_slice(logits);
    let v = s.len();
    let k = ((p_k * v as f64).floor() as usize).max(1);

    let mut sorted = s.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite log-probs"));
    let tau_k = sorted[k - 1];
    let tau_rel = sorted[0] + p_k.ln();
    let tau = tau_k.min(tau_rel);

    Ok(s.iter()
        .enumerate()
        .filter(|(_, &si)| si >= tau)
        .map(|(i, _)| i)
        .collect())
}

/// Copies the supported logits verbatim; everything else is exactly zero.
pub fn memory_vector(logits: &[f64], support: &BTreeSet<usize>) -> Result<MemoryVector> {
    if let Some(&bad) = support.iter().find(|&&i| i >= logits.len()) {
        return Err(Error::Vocabulary(format!(
            "support id {bad} out of vocabulary {}",
            logits.len()
        )));
    }
    let values = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| if support.contains(&i) { z } else { 0.0 })
        .collect();
    Ok(MemoryVector {
        values,
        support: support.clone(),
    })
}

/// Per-position preference pair: `pi_m` boosts the memory vector, `pi_f`
/// suppresses it. The pair is a detached target; gradients never flow
/// through it.
#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub pi_m: Vec<ProbDistribution>,
    pub pi_f: Vec<ProbDistribution>,
}

impl PreferencePair {
    pub fn len(&self) -> usize {
        self.pi_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_m.is_empty()
    }
}

/// Builds the pair from per-position logit rows: at each position,
/// `pi_m = softmax(z + alpha*m)` and `pi_f = softmax(z - alpha*m)` with `m`
/// the memory vector over the filter's support. Supported logits are copied
/// verbatim, negative ones included; nothing is clamped.
pub fn build_preference_pair(logits: &Tensor, config: &FilterConfig) -> Result<PreferencePair> {
    config.validate()?;
    let rows: Vec<&[f64]> = match logits.shape() {
        [_] => vec![logits.data()],
        [r, c] => (0..*r)
            .map(|t| &logits.data()[t * c..(t + 1) * c])
            .collect(),
        other => {
            return Err(Error::Dimension(format!(
                "build_preference_pair on shape {other:?}"
            )))
        }
    };
    let mut pi_m = Vec::with_capacity(rows.len());
    let mut pi_f = Vec::with_capacity(rows.len());
    for z in rows {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let support = select_support(z, config.p_k)?;
        let m = memory_vector(z, &support)?;
        let plus: Vec<f64> = z
            .iter()
            .zip(&m.values)
            .map(|(&zi, &mi)| zi + config.alpha * mi)
            .collect();
        let minus: Vec<f64> = z
            .iter()
            .zip(&m.values)
            .map(|(&zi, &mi)| zi - config.alpha * mi)
            .collect();
        pi_m.push(ProbDistribution::from_logits(&plus));
        pi_f.push(ProbDistribution::from_logits(&minus));
    }
    Ok(PreferencePair { pi_m, pi_f })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dist(r: &mut ChaCha8Rng, v: usize) -> ProbDistribution {
        let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-3.0..3.0)).collect();
        ProbDistribution::from_logits(&logits)
    }

    /// Literal re-statement of the filter rule, kept naive on purpose.
    fn support_oracle(logits: &[f64], p_k: f64) -> BTreeSet<usize> {
        let s = log_softmax_slice(logits);
        let v = s.len();
        let k = std::cmp::max(1, (p_k * v as f64).floor() as usize);
        let mut desc = s.clone();
        desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tau_k = desc[k - 1];
        let max_s = desc[0];
        let tau_rel = max_s + p_k.ln();
        let tau = if tau_k < tau_rel { tau_k } else { tau_rel };
        let mut out = BTreeSet::new();
        for (i, &si) in s.iter().enumerate() {
            if si >= tau {
                out.insert(i);
            }
        }
        out
    }

    #[test]
    fn kl_self_divergence_is_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = rand_dist(&mut r, 10);
            assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn kl_two_term_hand_case() {
        let p = ProbDistribution::new(vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let q = ProbDistribution::new(vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln(4/3)
        let expect = 0.5 * (4.0f64 / 3.0).ln();
        let kl_pq = kl_divergence(&p, &q).unwrap();
        assert!((kl_pq - expect).abs() < 1e-12);
        // Asymmetry on the same pair.
        let kl_qp = kl_divergence(&q, &p).unwrap();
        let expect_qp = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((kl_qp - expect_qp).abs() < 1e-12);
        assert!((kl_pq - kl_qp).abs() > 1e-3);
    }

    #[test]
    fn kl_length_mismatch_is_dimension_error() {
        let p = ProbDistribution::from_logits(&[0.0, 1.0]);
        let q = ProbDistribution::from_logits(&[0.0, 1.0, 2.0]);
        assert!(matches!(kl_divergence(&p, &q), Err(Error::Dimension(_))));
    }

    proptest! {
        /// Gibbs: KL >= 0, and it vanishes only for (numerically) equal inputs.
        #[test]
        fn kl_nonnegative_and_zero_iff_equal(seed in 0u64..300) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_dist(&mut r, 8);
            let q = rand_dist(&mut r, 8);
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-15);
            let equal = p.log_probs().iter().zip(q.log_probs())
                .all(|(a, b)| (a - b).abs() < 1e-12);
            if equal {
                prop_assert!(kl.abs() < 1e-10);
            } else {
                prop_assert!(kl > 0.0);
            }
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        /// SeqKL is additive over concatenated sequences.
        #[test]
        fn seq_kl_additive(seed in 0u64..100, cut in 1usize..4) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<_> = (0..5).map(|_| rand_dist(&mut r, 6)).collect();
            let b: Vec<_> = (0..5).map(|_| rand_dist(&mut r, 6)).collect();
            let whole = seq_kl(&a, &b).unwrap();
            let left = seq_kl(&a[..cut], &b[..cut]).unwrap();
            let right = seq_kl(&a[cut..], &b[cut..]).unwrap();
            prop_assert!((whole - (left + right)).abs() < 1e-12);
        }

        /// Support is nonempty, matches the naive oracle, and always carries
        /// the argmax token. Note the support is NOT monotone in p_k: raising
        /// p_k loosens the rank threshold but tightens the relative one, and
        /// the rule takes their minimum.
        #[test]
        fn support_matches_oracle(seed in 0u64..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v = *[8usize, 64, 256].iter().nth((seed % 3) as usize).unwrap();
            let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-6.0..6.0)).collect();
            let argmax = (0..v).max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap()).unwrap();
            for &p_k in &[0.01, 0.05, 0.5] {
                let got = select_support(&logits, p_k).unwrap();
                prop_assert!(!got.is_empty());
                prop_assert!(got.contains(&argmax));
                prop_assert_eq!(&got, &support_oracle(&logits, p_k));
            }
        }
    }

    #[test]
    fn seq_kl_trivials() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<_> = (0..3).map(|_| rand_dist(&mut r, 5)).collect();
        assert!(seq_kl(&a, &a).unwrap().abs() < 1e-15);
        let b: Vec<_> = (0..3).map(|_| rand_dist(&mut r, 5)).collect();
        let single = seq_kl(&a[..1], &b[..1]).unwrap();
        assert!((single - kl_divergence(&a[0], &b[0]).unwrap()).abs() < 1e-15);
        let total = seq_kl(&a, &b).unwrap();
        let by_hand: f64 = (0..3)
            .map(|t| kl_divergence(&a[t], &b[t]).unwrap())
            .sum();
        assert!((total - by_hand).abs() < 1e-12);
    }

    #[test]
    fn rank_rule_arithmetic() {
        // V = 100, p_k = 0.05: the rank rule keeps at least 5 tokens when the
        // relative threshold does not open wider.
        let mut logits = vec![0.0; 100];
        for (i, z) in logits.iter_mut().enumerate().take(10) {
            *z = 20.0 - i as f64; // well-separated top ranks
        }
        let s = select_support(&logits, 0.05).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s, (0..5).collect());
    }

    #[test]
    fn uniform_logits_open_the_relative_threshold() {
        // Uniform over 20 tokens: tau_k = -ln 20, tau_rel = -ln 20 + ln 0.05,
        // so the minimum selects everything.
        let logits = vec![0.0; 20];
        let s = select_support(&logits, 0.05).unwrap();
        assert_eq!(s.len(), 20);
    }

    #[test]
    fn dominant_logit_matches_oracle() {
        let mut logits = vec![0.0; 100];
        logits[0] = 10.0;
        let got = select_support(&logits, 0.05).unwrap();
        assert_eq!(got, support_oracle(&logits, 0.05));
    }

    #[test]
    fn memory_vector_masks() {
        let z = [3.0, 1.0, 0.0];
        let m = memory_vector(&z, &BTreeSet::from([0])).unwrap();
        assert_eq!(m.values, vec![3.0, 0.0, 0.0]);
        let full = memory_vector(&z, &BTreeSet::from([0, 1, 2])).unwrap();
        assert_eq!(full.values, z.to_vec());
        assert!(matches!(
            memory_vector(&z, &BTreeSet::from([7])),
            Err(Error::Vocabulary(_))
        ));
    }

    proptest! {
        #[test]
        fn memory_vector_matches_elementwise_oracle(seed in 0u64..100) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..12).map(|_| r.gen_range(-4.0..4.0)).collect();
            let support: BTreeSet<usize> =
                (0..12).filter(|_| r.gen_bool(0.4)).collect();
            let m = memory_vector(&z, &support).unwrap();
            for i in 0..12 {
                let want = if support.contains(&i) { z[i] } else { 0.0 };
                prop_assert_eq!(m.values[i], want);
            }
        }
    }

    #[test]
    fn zero_alpha_pair_is_identical_and_zero_kl() {
        let logits = Tensor::matrix(2, 4, vec![1.0, -0.5, 2.0, 0.0, 3.0, 3.0, -1.0, 0.5]).unwrap();
        let pair = build_preference_pair(
            &logits,
            &FilterConfig {
                p_k: 0.05,
                alpha: 0.0,
            },
        )
        .unwrap();
        for (m, f) in pair.pi_m.iter().zip(&pair.pi_f) {
            assert_eq!(m.log_probs(), f.log_probs());
        }
        assert_eq!(seq_kl(&pair.pi_m, &pair.pi_f).unwrap(), 0.0);
    }

    #[test]
    fn sign_flip_hand_case() {
        // z = [2,0,0] with the filter selecting only token 0:
        // pi_m = softmax([4,0,0]); pi_f = softmax([0,0,0]) = uniform.
        let logits = Tensor::vector(vec![2.0, 0.0, 0.0]);
        let pair = build_preference_pair(
            &logits,
            &FilterConfig {
                p_k: 0.33,
                alpha: 1.0,
            },
        )
        .unwrap();
        let want_m = log_softmax_slice(&[4.0, 0.0, 0.0]);
        for (a, b) in pair.pi_m[0].log_probs().iter().zip(&want_m) {
            assert!((a - b).abs() < 1e-12);
        }
        let uniform = -(3.0f64).ln();
        for v in pair.pi_f[0].log_probs() {
            assert!((v - uniform).abs() < 1e-12);
        }
    }

    proptest! {
        /// With positive supported logits, boosting moves mass onto the
        /// support and suppression moves it off, strictly.
        #[test]
        fn supported_mass_ordering(seed in 0u64..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let v = 16usize;
            // Keep all logits positive so supported entries are positive.
            let z: Vec<f64> = (0..v).map(|_| r.gen_range(0.5..4.0)).collect();
            let cfg = FilterConfig { p_k: 0.2, alpha: r.gen_range(0.1..2.0) };
            let support = select_support(&z, cfg.p_k).unwrap();
            let logits = Tensor::vector(z.clone());
            let pair = build_preference_pair(&logits, &cfg).unwrap();
            let base = ProbDistribution::from_logits(&z);
            let mass = |d: &ProbDistribution| -> f64 {
                support.iter().map(|&i| d.log_probs()[i].exp()).sum()
            };
            // Degenerate only if the support is the whole vocabulary.
            if support.len() < v {
                prop_assert!(mass(&pair.pi_m[0]) > mass(&base));
                prop_assert!(mass(&base) > mass(&pair.pi_f[0]));
            }
        }
    }
}
