//! Tables, linearization, vocabulary and the synthetic divergence corpus.
//!
//! Tokenization is word-level on whitespace. Tables are ordered key/value
//! field lists; linearization emits `<key> k-tokens <val> v-tokens <fsep>`
//! per field with per-token provenance, so a linearized source round-trips to
//! the table losslessly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed example: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

// Reserved vocabulary ids, stable across save/load.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NULL: usize = 4;
pub const KEY_SEP: usize = 5;
pub const VAL_SEP: usize = 6;
pub const FIELD_SEP: usize = 7;

pub const RESERVED_TOKENS: [&str; 8] = [
    "<pad>", "<bos>", "<eos>", "<unk>", "<null>", "<key>", "<val>", "<fsep>",
];

/// Token/id maps with a fixed reserved block first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Frequency-ranked vocabulary over whitespace tokens, reserved ids first.
    /// Ties break by token string so the result is deterministic. Tokens that
    /// don't fit under `max_size` map to `<unk>`.
    pub fn build(corpus_tokens: impl Iterator<Item = String>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in corpus_tokens {
            if !RESERVED_TOKENS.contains(&t.as_str()) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(budget).map(|(t, _)| t));
        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Re-derive the token->id map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        std::fs::write(path, out).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(|s| s.as_str()) != Some(*r) {
                return Err(DataError::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Ordered key/value records. Duplicate keys are allowed and order is kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTable {
    pub fields: Vec<(Vec<String>, Vec<String>)>,
}

impl SourceTable {
    pub fn value_tokens(&self) -> impl Iterator<Item = &str> {
        self.fields
            .iter()
            .flat_map(|(_, v)| v.iter().map(|s| s.as_str()))
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = &str> {
        self.fields
            .iter()
            .flat_map(|(k, v)| k.iter().chain(v.iter()).map(|s| s.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Separator,
    Key(usize),
    Value(usize),
}

/// Token-sequence form of a table with per-token field provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedSource {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

/// `<key> k-tokens <val> v-tokens <fsep>` per field, order preserved.
pub fn linearize(table: &SourceTable, vocab: &Vocabulary) -> LinearizedSource {
    let mut tokens = Vec::new();
    let mut provenance = Vec::new();
    for (fi, (key, value)) in table.fields.iter().enumerate() {
        tokens.push(RESERVED_TOKENS[KEY_SEP].to_string());
        provenance.push(Provenance::Separator);
        for k in key {
            tokens.push(k.clone());
            provenance.push(Provenance::Key(fi));
        }
        tokens.push(RESERVED_TOKENS[VAL_SEP].to_string());
        provenance.push(Provenance::Separator);
        for v in value {
            tokens.push(v.clone());
            provenance.push(Provenance::Value(fi));
        }
        tokens.push(RESERVED_TOKENS[FIELD_SEP].to_string());
        provenance.push(Provenance::Separator);
    }
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    LinearizedSource {
        tokens,
        ids,
        provenance,
    }
}

/// Provenance-based inverse of [`linearize`].
pub fn delinearize(src: &LinearizedSource) -> SourceTable {
    let mut fields: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    for (tok, prov) in src.tokens.iter().zip(&src.provenance) {
        match prov {
            Provenance::Separator => {}
            Provenance::Key(fi) => {
                while fields.len() <= *fi {
                    fields.push((Vec::new(), Vec::new()));
                }
                fields[*fi].0.push(tok.clone());
            }
            Provenance::Value(fi) => {
                while fields.len() <= *fi {
                    fields.push((Vec::new(), Vec::new()));
                }
                fields[*fi].1.push(tok.clone());
            }
        }
    }
    SourceTable { fields }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportLabel {
    /// Carries no source information (function words, template glue).
    Templatic,
    /// Value token present in the table.
    Supported,
    /// Value token absent from the table (injected divergence).
    Unsupported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub table: SourceTable,
    pub reference: Vec<String>,
    pub support_labels: Option<Vec<SupportLabel>>,
}

#[derive(Serialize, Deserialize)]
struct ExampleJson {
    table: Vec<[String; 2]>,
    reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_labels: Option<Vec<SupportLabel>>,
}

fn split_ws(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

impl Example {
    fn to_json(&self) -> ExampleJson {
        ExampleJson {
            table: self
                .table
                .fields
                .iter()
                .map(|(k, v)| [k.join(" "), v.join(" ")])
                .collect(),
            reference: self.reference.join(" "),
            support_labels: self.support_labels.clone(),
        }
    }

    fn from_json(j: ExampleJson, path: &str, line: usize) -> Result<Self> {
        let reference = split_ws(&j.reference);
        if let Some(labels) = &j.support_labels {
            if labels.len() != reference.len() {
                return Err(DataError::Malformed {
                    path: path.to_string(),
                    line,
                    msg: format!(
                        "{} support labels for {} reference tokens",
                        labels.len(),
                        reference.len()
                    ),
                });
            }
        }
        let fields: Vec<(Vec<String>, Vec<String>)> = j
            .table
            .iter()
            .map(|[k, v]| (split_ws(k), split_ws(v)))
            .collect();
        for (k, _) in &fields {
            if k.is_empty() {
                return Err(DataError::Malformed {
                    path: path.to_string(),
                    line,
                    msg: "empty table key".into(),
                });
            }
        }
        Ok(Example {
            table: SourceTable { fields },
            reference,
            support_labels: j.support_labels,
        })
    }
}

pub fn save_jsonl(examples: &[Example], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(&ex.to_json()).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExampleJson =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(Example::from_json(parsed, &path.display().to_string(), i + 1)?);
    }
    Ok(out)
}

/// Corpus tokens of a set of examples (table keys, values and references),
/// for vocabulary building.
pub fn corpus_tokens(examples: &[Example]) -> impl Iterator<Item = String> + '_ {
    examples.iter().flat_map(|ex| {
        ex.table
            .all_tokens()
            .map(|t| t.to_string())
            .chain(ex.reference.iter().cloned())
            .collect::<Vec<_>>()
    })
}

// ---------------------------------------------------------------------------
// Synthetic divergence-controlled corpus
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    /// Fraction of references containing exactly one unsupported value token.
    pub divergence_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_train: usize, divergence_rate: f64, seed: u64) -> Self {
        let held = (num_train / 10).max(20);
        SynthConfig {
            num_train,
            num_valid: held,
            num_test: held,
            divergence_rate,
            seed,
        }
    }
}

pub struct SynthDataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

const FIRST_NAMES: &[&str] = &[
    "anna", "boris", "clara", "derek", "elena", "felix", "greta", "hugo", "iris", "jonas", "karin",
    "lars", "mona", "nils", "olga", "pavel", "rosa", "stefan", "tessa", "viktor", "wanda", "yuri",
    "zoe", "marta",
];
const LAST_NAMES: &[&str] = &[
    "adler", "berg", "conti", "dietrich", "engel", "fischer", "gruber", "hoffman", "ivanov",
    "jensen", "keller", "lindgren", "moreau", "novak", "orlov", "peters", "quist", "richter",
    "sorensen", "tanaka", "ullman", "vogel", "weber", "zimmer",
];
const OCCUPATIONS: &[&str] = &[
    "painter", "pilot", "chemist", "novelist", "architect", "farmer", "violinist", "sculptor",
    "surgeon", "historian", "botanist", "engineer", "composer", "teacher", "journalist",
    "astronomer", "carpenter", "geologist",
];
const CITIES: &[&str] = &[
    "lisbon", "oslo", "prague", "vienna", "dublin", "warsaw", "athens", "bergen", "valencia",
    "florence", "ghent", "helsinki", "innsbruck", "krakow", "leipzig", "marseille", "porto",
    "riga",
];
const COUNTRIES: &[&str] = &[
    "portugal", "norway", "austria", "ireland", "poland", "greece", "spain", "italy", "belgium",
    "finland", "france", "latvia",
];
const HOBBIES: &[&str] = &[
    "chess", "sailing", "archery", "gardening", "photography", "cycling", "fencing", "pottery",
    "climbing", "birdwatching", "calligraphy", "rowing",
];

fn year_pool() -> Vec<String> {
    (1950..1990).map(|y| y.to_string()).collect()
}

struct FieldSpec {
    key: &'static str,
    pool: Vec<String>,
}

fn field_specs() -> Vec<FieldSpec> {
    let own = |p: &[&str]| p.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        FieldSpec {
            key: "occupation",
            pool: own(OCCUPATIONS),
        },
        FieldSpec {
            key: "city",
            pool: own(CITIES),
        },
        FieldSpec {
            key: "country",
            pool: own(COUNTRIES),
        },
        FieldSpec {
            key: "birthyear",
            pool: year_pool(),
        },
        FieldSpec {
            key: "hobby",
            pool: own(HOBBIES),
        },
    ]
}

/// One reference token with its gold label.
fn push_tok(
    reference: &mut Vec<String>,
    labels: &mut Vec<SupportLabel>,
    tok: &str,
    label: SupportLabel,
) {
    reference.push(tok.to_string());
    labels.push(label);
}

/// Glue words realizing one field as a phrase, e.g. `lives in <city>`.
fn field_glue(rng: &mut ChaCha8Rng, key: &str) -> &'static [&'static str] {
    match key {
        "occupation" => {
            if rng.gen_bool(0.5) {
                &["is", "a"]
            } else {
                &["works", "as", "a"]
            }
        }
        "city" => {
            if rng.gen_bool(0.5) {
                &["lives", "in"]
            } else {
                &["comes", "from"]
            }
        }
        "country" => &["from"],
        "birthyear" => {
            if rng.gen_bool(0.5) {
                &["born", "in"]
            } else {
                &["was", "born", "in"]
            }
        }
        "hobby" => {
            if rng.gen_bool(0.5) {
                &["enjoys"]
            } else {
                &["loves"]
            }
        }
        _ => unreachable!(),
    }
}

fn gen_example(rng: &mut ChaCha8Rng, specs: &[FieldSpec], divergence_rate: f64) -> Example {
    use SupportLabel::*;
    let first = FIRST_NAMES.choose(rng).unwrap().to_string();
    let last = LAST_NAMES.choose(rng).unwrap().to_string();

    // Table: name plus 2-4 of the other fields; at least one field stays
    // out of the table so a divergent phrase always has something to
    // hallucinate.
    let mut field_ids: Vec<usize> = (0..specs.len()).collect();
    field_ids.shuffle(rng);
    let extra = rng.gen_range(2..=4);
    let mut chosen: Vec<usize> = field_ids.iter().copied().take(extra).collect();
    let unchosen: Vec<usize> = field_ids.iter().copied().skip(extra).collect();
    chosen.sort_unstable();

    let mut fields: Vec<(Vec<String>, Vec<String>)> = vec![(
        vec!["name".to_string()],
        vec![first.clone(), last.clone()],
    )];
    let mut values: Vec<(usize, String)> = Vec::new(); // (spec idx, chosen value)
    for &ci in &chosen {
        let v = specs[ci].pool.choose(rng).unwrap().clone();
        fields.push((vec![specs[ci].key.to_string()], vec![v.clone()]));
        values.push((ci, v));
    }

    // Reference realizes the name and a subset of the table fields, each as
    // a (glue..., value) phrase.
    let mut realized: Vec<&(usize, String)> =
        values.iter().filter(|_| rng.gen_bool(0.8)).collect();
    if realized.is_empty() {
        realized.push(&values[0]);
    }
    let mut phrases: Vec<Vec<(String, SupportLabel)>> = realized
        .iter()
        .map(|(ci, v)| {
            let mut phrase: Vec<(String, SupportLabel)> = field_glue(rng, specs[*ci].key)
                .iter()
                .map(|g| (g.to_string(), Templatic))
                .collect();
            phrase.push((v.clone(), Supported));
            phrase
        })
        .collect();

    // Divergence: insert one phrase realizing a field that is absent from
    // the table, so nothing in the source supports it. The whole phrase is
    // unsupported content.
    if rng.gen_bool(divergence_rate) {
        let ci = *unchosen.choose(rng).unwrap();
        let v = specs[ci].pool.choose(rng).unwrap().clone();
        let mut phrase: Vec<(String, SupportLabel)> = field_glue(rng, specs[ci].key)
            .iter()
            .map(|g| (g.to_string(), Unsupported))
            .collect();
        phrase.push((v, Unsupported));
        let at = rng.gen_range(0..=phrases.len());
        phrases.insert(at, phrase);
    }

    let mut reference = Vec::new();
    let mut labels = Vec::new();
    push_tok(&mut reference, &mut labels, &first, Supported);
    push_tok(&mut reference, &mut labels, &last, Supported);
    for phrase in phrases {
        for (tok, label) in phrase {
            push_tok(&mut reference, &mut labels, &tok, label);
        }
    }
    push_tok(&mut reference, &mut labels, ".", Templatic);

    Example {
        table: SourceTable { fields },
        reference,
        support_labels: Some(labels),
    }
}

/// Seed-deterministic corpus with per-token gold support labels.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_train == 0 {
        return Err(DataError::Infeasible("num_train must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.divergence_rate) {
        return Err(DataError::Infeasible(format!(
            "divergence_rate {} outside [0,1]",
            cfg.divergence_rate
        )));
    }
    let specs = field_specs();
    for s in &specs {
        if s.pool.len() < 2 {
            return Err(DataError::Infeasible(format!(
                "pool for {} too small",
                s.key
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen_split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|_| gen_example(rng, &specs, cfg.divergence_rate))
            .collect()
    };
    Ok(SynthDataset {
        train: gen_split(cfg.num_train, &mut rng),
        valid: gen_split(cfg.num_valid, &mut rng),
        test: gen_split(cfg.num_test, &mut rng),
    })
}
