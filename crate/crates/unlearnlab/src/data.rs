//! Synthetic closed-vocabulary QA corpus: invented entities with attribute
//! facts, entity-level forget/retain/holdout splits, and the paraphrase plus
//! perturbed-answer structure the truth-ratio metric needs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved beginning-of-sequence token; never appears in corpus text.
pub const BOS: TokenId = 0;

/// Number of perturbed answers per example; the truth ratio averages over
/// exactly this many.
pub const N_PERTURBED: usize = 5;

const BOS_WORD: &str = "<bos>";
const TEMPLATE_WORDS: [&str; 5] = ["what", "is", "the", "of", "about"];
const REFUSAL_WORDS: [&str; 3] = ["i", "dont", "know"];
const ATTRIBUTES: [&str; 8] = [
    "color", "origin", "craft", "totem", "motto", "cipher", "anthem", "relic",
];
const VALUES: [&str; 10] = [
    "amber", "cobalt", "crimson", "umber", "viridian", "ochre", "indigo", "sepia", "teal",
    "maroon",
];
const NAME_ONSETS: [&str; 8] = ["va", "zo", "mi", "ka", "re", "lu", "dro", "pel"];
const NAME_CODAS: [&str; 8] = ["ran", "bel", "tok", "mus", "vin", "dal", "nor", "gim"];

/// Largest vocabulary the toy models support.
pub const MAX_VOCAB: usize = 256;

/// Number of question/answer surface forms generated per fact.
pub const SURFACE_FORMS: usize = 3;

// ── Vocabulary ──────────────────────────────────────────────────────

/// Closed token table; ids are indices into `tokens`.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Generation(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))
    }

    /// Whitespace tokenization over the closed vocabulary. Unknown words are
    /// an error; there is no catch-all token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> = tokens.iter().map(|&t| self.word(t)).collect();
        Ok(words?.join(" "))
    }
}

// ── Examples and datasets ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "FORGET")]
    Forget,
    #[serde(rename = "RETAIN")]
    Retain,
    #[serde(rename = "HOLDOUT")]
    Holdout,
}

/// One question/answer pair about a single entity, with the paraphrase and
/// perturbed answers used by the truth-ratio metric.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub entity: String,
    pub question_tokens: Vec<TokenId>,
    pub answer_tokens: Vec<TokenId>,
    pub paraphrased_answer: Vec<TokenId>,
    pub perturbed_answers: Vec<Vec<TokenId>>,
    pub split: Split,
}

impl QAExample {
    /// Question and answer concatenated: the unit of language-model training.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.question_tokens.clone();
        s.extend_from_slice(&self.answer_tokens);
        s
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenMeta {
    pub seed: u64,
    pub forget_fraction: f64,
    pub n_entities: usize,
    pub facts_per_entity: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<QAExample>,
    pub vocab: Vocab,
    pub meta: GenMeta,
}

#[derive(Serialize, Deserialize)]
struct VocabSidecar {
    tokens: Vec<String>,
    meta: GenMeta,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn examples_in(&self, split: Split) -> Vec<&QAExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    /// Training sequences (question ++ answer) drawn from the given splits,
    /// in generation order.
    pub fn training_sequences(&self, splits: &[Split]) -> Vec<Vec<TokenId>> {
        self.examples
            .iter()
            .filter(|e| splits.contains(&e.split))
            .map(|e| e.sequence())
            .collect()
    }

    /// Same vocabulary and metadata, examples restricted to `splits`.
    pub fn filtered(&self, splits: &[Split]) -> Dataset {
        Dataset {
            examples: self
                .examples
                .iter()
                .filter(|e| splits.contains(&e.split))
                .cloned()
                .collect(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Partition the forget entities into `k` entity-disjoint folds. Each
    /// fold keeps the full retain and holdout splits.
    pub fn forget_folds(&self, k: usize) -> Result<Vec<Dataset>> {
        let mut forget_entities: Vec<String> = Vec::new();
        for e in self.examples.iter().filter(|e| e.split == Split::Forget) {
            if !forget_entities.contains(&e.entity) {
                forget_entities.push(e.entity.clone());
            }
        }
        if k == 0 || forget_entities.len() < k {
            return Err(Error::Contract(format!(
                "cannot split {} forget entities into {k} folds",
                forget_entities.len()
            )));
        }
        let mut folds = Vec::with_capacity(k);
        for chunk in chunk_evenly(&forget_entities, k) {
            let examples = self
                .examples
                .iter()
                .filter(|e| e.split != Split::Forget || chunk.contains(&e.entity))
                .cloned()
                .collect();
            folds.push(Dataset {
                examples,
                vocab: self.vocab.clone(),
                meta: self.meta.clone(),
            });
        }
        Ok(folds)
    }

    /// Tokenized refusal answer used by the template-preference baseline.
    pub fn refusal_tokens(&self) -> Result<Vec<TokenId>> {
        self.vocab.tokenize("i dont know")
    }

    /// Hex SHA-256 over the canonical serialized form.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_jsonl().as_bytes());
        hasher.update(self.vocab.tokens.join("\n").as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.unl.jsonl` plus the `<stem>.vocab.json` sidecar.
    pub fn save(&self, jsonl_path: &Path) -> Result<()> {
        std::fs::write(jsonl_path, self.to_jsonl())?;
        let sidecar = VocabSidecar {
            tokens: self.vocab.tokens.clone(),
            meta: self.meta.clone(),
        };
        std::fs::write(
            vocab_sidecar_path(jsonl_path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(jsonl_path: &Path) -> Result<Dataset> {
        let body = std::fs::read_to_string(jsonl_path)?;
        let mut examples = Vec::new();
        for line in body.lines() {
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str::<QAExample>(line)?);
        }
        let sidecar: VocabSidecar =
            serde_json::from_str(&std::fs::read_to_string(vocab_sidecar_path(jsonl_path))?)?;
        Ok(Dataset {
            examples,
            vocab: Vocab::from_tokens(sidecar.tokens)?,
            meta: sidecar.meta,
        })
    }
}

/// `foo.unl.jsonl` → `foo.vocab.json`.
pub fn vocab_sidecar_path(jsonl_path: &Path) -> std::path::PathBuf {
    let name = jsonl_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let stem = name.strip_suffix(".unl.jsonl").unwrap_or(&name);
    jsonl_path.with_file_name(format!("{stem}.vocab.json"))
}

fn chunk_evenly(items: &[String], k: usize) -> Vec<Vec<String>> {
    let mut chunks = vec![Vec::new(); k];
    for (i, it) in items.iter().enumerate() {
        chunks[i % k].push(it.clone());
    }
    chunks
}

fn entity_name(i: usize) -> String {
    let base = format!(
        "{}{}",
        NAME_ONSETS[i % NAME_ONSETS.len()],
        NAME_CODAS[(i / NAME_ONSETS.len()) % NAME_CODAS.len()]
    );
    let round = i / (NAME_ONSETS.len() * NAME_CODAS.len());
    if round == 0 {
        base
    } else {
        format!("{base}{round}")
    }
}

fn question_form(form: usize, attr: &str, entity: &str) -> String {
    match form {
        0 => format!("what is the {attr} of {entity}"),
        1 => format!("what about the {attr} of {entity}"),
        _ => format!("the {attr} of {entity} is what"),
    }
}

fn answer_form(form: usize, attr: &str, entity: &str, value: &str) -> String {
    match form {
        0 => format!("the {attr} of {entity} is {value}"),
        1 => format!("{entity} {attr} is {value}"),
        _ => format!("{value} is the {attr} of {entity}"),
    }
}

/// Builds the templated corpus: `facts_per_entity` attribute facts per
/// entity, each rendered in [`SURFACE_FORMS`] question/answer variants, with
/// entity-level splits. The perturbed answers swap the fact's value for five
/// distinct wrong fillers while keeping the paraphrase's exact length.
pub fn generate_corpus(
    n_entities: usize,
    facts_per_entity: usize,
    forget_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_entities < 2 {
        return Err(Error::Contract("need at least 2 entities".into()));
    }
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "forget_fraction must lie in (0,1), got {forget_fraction}"
        )));
    }
    if facts_per_entity == 0 || facts_per_entity > ATTRIBUTES.len() {
        return Err(Error::Generation(format!(
            "facts_per_entity must lie in 1..={}, got {facts_per_entity}",
            ATTRIBUTES.len()
        )));
    }

    let entities: Vec<String> = (0..n_entities).map(entity_name).collect();

    let mut tokens: Vec<String> = vec![BOS_WORD.to_string()];
    tokens.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(REFUSAL_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(
        ATTRIBUTES[..facts_per_entity]
            .iter()
            .map(|s| s.to_string()),
    );
    tokens.extend(VALUES.iter().map(|s| s.to_string()));
    tokens.extend(entities.iter().cloned());
    if tokens.len() > MAX_VOCAB {
        return Err(Error::Generation(format!(
            "vocabulary overflow: {} tokens exceed the {MAX_VOCAB} limit",
            tokens.len()
        )));
    }
    let vocab = Vocab::from_tokens(tokens)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Entity-level split: forget first, then holdout, remainder retained.
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let n_forget = ((n_entities as f64 * forget_fraction).floor() as usize).max(1);
    if n_forget >= n_entities {
        return Err(Error::Generation(
            "forget fraction leaves no retain entities".into(),
        ));
    }
    let n_holdout = (2 * n_forget).min(n_entities - n_forget - 1);
    let split_of = |idx: usize| -> Split {
        let rank = order.iter().position(|&e| e == idx).expect("present");
        if rank < n_forget {
            Split::Forget
        } else if rank < n_forget + n_holdout {
            Split::Holdout
        } else {
            Split::Retain
        }
    };

    let mut examples = Vec::new();
    for (ei, entity) in entities.iter().enumerate() {
        let split = split_of(ei);
        for attr in &ATTRIBUTES[..facts_per_entity] {
            let correct = VALUES[rng.gen_range(0..VALUES.len())];
            let mut wrong: Vec<&str> = VALUES.iter().copied().filter(|v| *v != correct).collect();
            wrong.shuffle(&mut rng);
            wrong.truncate(N_PERTURBED);

            for form in 0..SURFACE_FORMS {
                let question = question_form(form, attr, entity);
                let answer = answer_form(form, attr, entity, correct);
                let para_form = (form + 1) % SURFACE_FORMS;
                let paraphrase = answer_form(para_form, attr, entity, correct);
                let perturbed: Result<Vec<Vec<TokenId>>> = wrong
                    .iter()
                    .map(|w| vocab.tokenize(&answer_form(para_form, attr, entity, w)))
                    .collect();
                examples.push(QAExample {
                    id: format!("{entity}/{attr}/{form}"),
                    entity: entity.clone(),
                    question_tokens: vocab.tokenize(&question)?,
                    answer_tokens: vocab.tokenize(&answer)?,
                    paraphrased_answer: vocab.tokenize(&paraphrase)?,
                    perturbed_answers: perturbed?,
                    split,
                });
            }
        }
    }

    Ok(Dataset {
        examples,
        vocab,
        meta: GenMeta {
            seed,
            forget_fraction,
            n_entities,
            facts_per_entity,
        },
    })
}
