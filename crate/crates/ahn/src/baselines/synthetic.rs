//! Synthetic corpora for the verification experiments.
//!
//! Two generators: a tiny memorization set for overfit sanity, and the
//! planted-asymmetry benchmark where the rating depends on the user's
//! affinity for the target item's latent topic, so selecting the user's
//! topic-matching reviews (what co-attention does) is strictly more
//! informative than any fixed weighting of them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{
    CorpusConfig, CorpusStats, Dataset, EncodedCorpus, Interaction, Manifest, SelectionPolicy,
    SplitManifest, Vocabulary, MANIFEST_VERSION,
};

/// Fixed, versioned parameters of the planted-asymmetry generator.
#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    /// Reviews written per user; topics are dealt so several topics appear
    /// twice, keeping topic coverage after the leakage guard removes the
    /// target review.
    pub reviews_per_user: usize,
    pub topics: usize,
    pub noise: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            users: 167,
            items: 167,
            reviews_per_user: 12,
            topics: 8,
            noise: 0.3,
        }
    }
}

const SENTIMENT_WORDS: [&str; 5] = ["terrible", "poor", "okay", "good", "excellent"];
const FILLER_WORDS: [&str; 6] = ["the", "box", "arrived", "today", "fine", "overall"];

fn topic_marker(topic: usize, slot: usize) -> String {
    format!("topic{topic}mark{slot}")
}

fn sentiment_word(rating: f64) -> &'static str {
    let level = (rating.round().clamp(1.0, 5.0) as usize) - 1;
    SENTIMENT_WORDS[level]
}

/// Review text: one sentence carrying the item's topic markers and the
/// rater's sentiment, plus a filler sentence of no predictive value.
fn review_text(topic: usize, affinity: f64, rng: &mut ChaCha8Rng) -> String {
    let filler1 = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
    let filler2 = FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())];
    format!(
        "{} {} {}. {} {}.",
        topic_marker(topic, 0),
        topic_marker(topic, 1),
        sentiment_word(affinity),
        filler1,
        filler2,
    )
}

/// Ratings are the user's per-topic affinity for the item's topic plus
/// Gaussian noise, clamped to the rating scale.
pub fn planted_asymmetry_corpus(seed: u64, config: &PlantedConfig) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise).expect("valid noise sigma");

    let item_topic: Vec<usize> = (0..config.items).map(|i| i % config.topics).collect();
    let affinity: Vec<Vec<f64>> = (0..config.users)
        .map(|_| {
            (0..config.topics)
                .map(|_| rng.gen_range(1..=5) as f64)
                .collect()
        })
        .collect();

    // Per user: deal topics round-robin so every topic is covered and
    // `reviews_per_user - topics` of them twice, then pick a distinct item
    // of each dealt topic.
    let mut interactions = Vec::new();
    let mut clock = 0i64;
    for u in 0..config.users {
        let mut topics: Vec<usize> = (0..config.reviews_per_user)
            .map(|r| (u + r) % config.topics)
            .collect();
        topics.shuffle(&mut rng);
        let mut used_items: Vec<usize> = Vec::new();
        for t in topics {
            // items with this topic: t, t + topics, t + 2*topics, ...
            let candidates: Vec<usize> = (0..config.items)
                .filter(|&i| item_topic[i] == t && !used_items.contains(&i))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let item = candidates[rng.gen_range(0..candidates.len())];
            used_items.push(item);
            let rating = (affinity[u][t] + noise.sample(&mut rng)).clamp(1.0, 5.0);
            let text = review_text(t, affinity[u][t], &mut rng);
            clock += 1;
            interactions.push(Interaction {
                user_id: format!("user{u:04}"),
                item_id: format!("item{item:04}"),
                rating,
                review_text: text,
                timestamp: Some(clock),
            });
        }
    }
    interactions
}

/// Tiny corpus for memorization checks: every pair a distinct user-item
/// combination, ratings a deterministic half-point grid over both ids.
pub fn overfit_corpus(seed: u64, pairs: usize) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (pairs as f64).sqrt().ceil() as usize;
    let mut combos: Vec<(usize, usize)> = (0..side)
        .flat_map(|u| (0..side).map(move |v| (u, v)))
        .collect();
    combos.shuffle(&mut rng);
    combos.truncate(pairs);

    let words = ["solid", "works", "fast", "cheap", "loud", "bright", "heavy", "smooth"];
    let side_effect = |i: usize| (i % 5) as f64 * 0.5 - 1.0; // -1.0 .. 1.0
    combos
        .into_iter()
        .enumerate()
        .map(|(i, (u, v))| {
            let rating = (3.0 + side_effect(u) + side_effect(v + 2)).clamp(1.0, 5.0);
            let w1 = words[rng.gen_range(0..words.len())];
            let w2 = words[rng.gen_range(0..words.len())];
            Interaction {
                user_id: format!("u{u}"),
                item_id: format!("i{v}"),
                rating,
                review_text: format!("{w1} {w2} product. very {w1} indeed."),
                timestamp: Some(i as i64),
            }
        })
        .collect()
}

/// Assemble an in-memory dataset from interactions, without touching disk.
/// `split_seed` drives the 80/10/10 split; `train_all` instead puts every
/// interaction in the training split (for overfit experiments).
pub fn dataset_from_interactions(
    interactions: &[Interaction],
    corpus_cfg: &CorpusConfig,
    split_seed: u64,
    train_all: bool,
) -> crate::corpus::Result<Dataset> {
    let splits = if train_all {
        SplitManifest {
            seed: split_seed,
            train: (0..interactions.len() as u32).collect(),
            val: vec![],
            test: vec![],
        }
    } else {
        crate::corpus::split(interactions.len(), split_seed)?
    };
    let train_texts: Vec<&str> = splits
        .train
        .iter()
        .map(|&i| interactions[i as usize].review_text.as_str())
        .collect();
    let vocab = Vocabulary::build(train_texts.into_iter(), corpus_cfg.vocab_size);
    let corpus = EncodedCorpus::build(interactions, &splits.train, &vocab, corpus_cfg);
    let train_rating_mean = splits
        .train
        .iter()
        .map(|&i| interactions[i as usize].rating)
        .sum::<f64>()
        / splits.train.len().max(1) as f64;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: split_seed,
        config: corpus_cfg.clone(),
        stats: CorpusStats {
            users: corpus.users.len(),
            items: corpus.items.len(),
            parsed_interactions: interactions.len(),
            malformed_records: 0,
            kept_interactions: interactions.len(),
            vocab_tokens: vocab.len(),
            train_rating_mean,
        },
        splits,
    };
    Ok(Dataset {
        manifest,
        vocab,
        corpus,
    })
}

/// Serialize interactions in the newline-delimited JSON convention the
/// parser reads, for pipeline-level tests.
pub fn write_reviews_ndjson(
    path: &std::path::Path,
    interactions: &[Interaction],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in interactions {
        let mut obj = serde_json::json!({
            "reviewerID": i.user_id,
            "asin": i.item_id,
            "overall": i.rating,
            "reviewText": i.review_text,
        });
        if let Some(ts) = i.timestamp {
            obj["unixReviewTime"] = serde_json::json!(ts);
        }
        writeln!(f, "{obj}")?;
    }
    Ok(())
}

/// Corpus shape used by the planted-asymmetry benchmark.
pub fn planted_corpus_config() -> CorpusConfig {
    CorpusConfig {
        t_core: 1,
        n: 12,
        m: 5,
        k: 2,
        l: 4,
        vocab_size: 500,
        selection: SelectionPolicy::MostRecent,
    }
}

/// Corpus shape used by the overfit experiment.
pub fn overfit_corpus_config() -> CorpusConfig {
    CorpusConfig {
        t_core: 1,
        n: 3,
        m: 3,
        k: 2,
        l: 4,
        vocab_size: 100,
        selection: SelectionPolicy::MostRecent,
    }
}
