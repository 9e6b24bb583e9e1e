//! Corpus ingestion: raw review parsing, t-core filtering, splitting,
//! vocabulary construction, and padded/masked document encoding.

mod documents;
mod parse;
mod split;
mod tcore;
mod tokenize;
mod vocab;

pub use documents::{
    encode_pair_call_count, DocumentSet, EncodedCorpus, EncodedReview, EntityDocs, PairRecord,
    COLD_START,
};
pub use parse::{parse_reviews, ParseOutcome};
pub use split::{split, SplitManifest};
pub use tcore::tcore_filter;
pub use tokenize::{tokenize, tokenize_call_count, SentenceTokens};
pub use vocab::{Vocabulary, PAD, UNK};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus format error: {malformed} of {total} records are malformed")]
    Format { malformed: usize, total: usize },
    #[error("split requires at least 10 interactions, got {0}")]
    TooFewInteractions(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad encoded-documents file: {0}")]
    BadDocuments(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

pub type Result<V> = std::result::Result<V, CorpusError>;

/// One raw user-item-rating-review record.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub review_text: String,
    pub timestamp: Option<i64>,
}

/// How reviews are picked when an entity has more than the configured cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    MostRecent,
    FirstSeen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub t_core: usize,
    /// Max reviews kept per user document.
    pub n: usize,
    /// Max reviews kept per item document.
    pub m: usize,
    /// Max sentences per review.
    pub k: usize,
    /// Max words per sentence.
    pub l: usize,
    /// Vocabulary cap, padding/unknown excluded.
    pub vocab_size: usize,
    pub selection: SelectionPolicy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            t_core: 5,
            n: 15,
            m: 15,
            k: 10,
            l: 20,
            vocab_size: 50_000,
            selection: SelectionPolicy::MostRecent,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_core < 1 {
            return Err(CorpusError::Config("t-core must be >= 1".into()));
        }
        for (name, v) in [
            ("n", self.n),
            ("m", self.m),
            ("k", self.k),
            ("l", self.l),
            ("vocab-size", self.vocab_size),
        ] {
            if v < 1 {
                return Err(CorpusError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub parsed_interactions: usize,
    pub malformed_records: usize,
    pub kept_interactions: usize,
    pub vocab_tokens: usize,
    pub train_rating_mean: f64,
}

/// `manifest.json`: config echo, corpus stats, and the split id lists.
/// Ids index into the pair table of the encoded-documents file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub stats: CorpusStats,
    pub splits: SplitManifest,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug)]
pub struct PreprocessSummary {
    pub parsed: usize,
    pub malformed: usize,
    pub kept: usize,
    pub empty_after_tcore: bool,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Run the whole preprocessing pipeline and write a dataset directory
/// (`vocab.txt`, `manifest.json`, `documents.bin`).
///
/// An empty post-filter corpus is a warning, not an error: the directory is
/// written with empty splits and documents.
pub fn preprocess(
    input: &Path,
    out_dir: &Path,
    config: &CorpusConfig,
    seed: u64,
) -> Result<PreprocessSummary> {
    config.validate()?;
    let outcome = parse_reviews(input)?;
    let parsed = outcome.interactions.len();
    let kept = tcore_filter(outcome.interactions, config.t_core);
    let empty = kept.is_empty();

    let splits = if empty {
        SplitManifest {
            seed,
            train: vec![],
            val: vec![],
            test: vec![],
        }
    } else {
        split(kept.len(), seed)?
    };

    let vocab = {
        let train_texts: Vec<&str> = splits
            .train
            .iter()
            .map(|&i| kept[i as usize].review_text.as_str())
            .collect();
        Vocabulary::build(train_texts.iter().copied(), config.vocab_size)
    };

    let corpus = EncodedCorpus::build(&kept, &splits.train, &vocab, config);

    let train_rating_mean = if splits.train.is_empty() {
        0.0
    } else {
        splits
            .train
            .iter()
            .map(|&i| kept[i as usize].rating)
            .sum::<f64>()
            / splits.train.len() as f64
    };

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        stats: CorpusStats {
            users: corpus.users.len(),
            items: corpus.items.len(),
            parsed_interactions: parsed,
            malformed_records: outcome.malformed,
            kept_interactions: kept.len(),
            vocab_tokens: vocab.len(),
            train_rating_mean,
        },
        splits,
    };

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let vocab_path = out_dir.join("vocab.txt");
    vocab.save(&vocab_path).map_err(|e| io_err(&vocab_path, e))?;
    let manifest_path = out_dir.join("manifest.json");
    let manifest_bytes =
        serde_json::to_vec_pretty(&manifest).map_err(|e| CorpusError::BadManifest(e.to_string()))?;
    fs::write(&manifest_path, manifest_bytes).map_err(|e| io_err(&manifest_path, e))?;
    let docs_path = out_dir.join("documents.bin");
    corpus.save(&docs_path).map_err(|e| io_err(&docs_path, e))?;

    Ok(PreprocessSummary {
        parsed,
        malformed: outcome.malformed,
        kept: kept.len(),
        empty_after_tcore: empty,
    })
}

/// A preprocessed dataset directory loaded back into memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub corpus: EncodedCorpus,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let bytes = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| CorpusError::BadManifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CorpusError::BadManifest(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let vocab_path = dir.join("vocab.txt");
        let vocab = Vocabulary::load(&vocab_path).map_err(|e| io_err(&vocab_path, e))?;
        let docs_path = dir.join("documents.bin");
        let corpus = EncodedCorpus::load(&docs_path)?;
        Ok(Dataset {
            manifest,
            vocab,
            corpus,
        })
    }

    /// Ratings for one split as (pair index, rating).
    pub fn split_pairs(&self, name: &str) -> Result<Vec<u32>> {
        match name {
            "train" => Ok(self.manifest.splits.train.clone()),
            "val" => Ok(self.manifest.splits.val.clone()),
            "test" => Ok(self.manifest.splits.test.clone()),
            other => Err(CorpusError::Config(format!(
                "unknown split '{other}', expected train|val|test"
            ))),
        }
    }
}

/// Group interaction indices by entity id, preserving first-seen order.
pub(crate) fn group_by<'a>(
    interactions: &'a [Interaction],
    key: impl Fn(&'a Interaction) -> &'a str,
) -> (Vec<&'a str>, HashMap<&'a str, Vec<usize>>) {
    let mut order: Vec<&str> = Vec::new();
    let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, inter) in interactions.iter().enumerate() {
        let k = key(inter);
        map.entry(k)
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(i);
    }
    (order, map)
}
