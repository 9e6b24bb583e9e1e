//! Attention-weight export: for one user-item pair, every review and
//! sentence with the weight the model assigned to it, mapped back to the
//! source text.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EntityDocs, COLD_START};
use crate::model::{forward, DropoutMode, ModelParams, TraceLevel};
use crate::tensor::Real;
use crate::train::{Result, TrainError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceExplanation {
    pub weight: f64,
    pub text: String,
    /// Byte span into the review text.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewExplanation {
    pub weight: f64,
    pub text: String,
    pub sentences: Vec<SentenceExplanation>,
}

/// The record mirrors the forward trace exactly: weights are exported
/// unmodified, so re-running the model on the same checkpoint reproduces
/// them bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub user_id: String,
    pub item_id: String,
    pub predicted_rating: f64,
    pub true_rating: Option<f64>,
    pub cold_start_user: bool,
    pub cold_start_item: bool,
    pub user_reviews: Vec<ReviewExplanation>,
    pub item_reviews: Vec<ReviewExplanation>,
}

fn reviews_of(
    docs: Option<&EntityDocs>,
    chosen: &[Option<u32>],
    rev_weights: &[f64],
    sent_weights: &[Vec<f64>],
    sent_mask: &[Vec<bool>],
) -> Vec<ReviewExplanation> {
    let mut out = Vec::new();
    let Some(docs) = docs else {
        return out;
    };
    for (slot, &pick) in chosen.iter().enumerate() {
        let Some(ri) = pick else { continue };
        let review = &docs.reviews[ri as usize];
        let mut sentences = Vec::new();
        for (si, &(s, e)) in review.spans.iter().enumerate() {
            if si >= sent_mask[slot].len() || !sent_mask[slot][si] {
                break;
            }
            sentences.push(SentenceExplanation {
                weight: sent_weights[slot][si],
                text: review.raw_text[s as usize..e as usize].to_string(),
                start: s as usize,
                end: e as usize,
            });
        }
        out.push(ReviewExplanation {
            weight: rev_weights[slot],
            text: review.raw_text.clone(),
            sentences,
        });
    }
    out
}

/// Run one evaluation-mode forward pass and export its attention weights.
/// Unknown users or items are a cold-start note, never a failure.
pub fn explain_pair<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    user_id: &str,
    item_id: &str,
) -> Result<ExplainRecord> {
    let user_idx = dataset.corpus.user_id_to_index(user_id).unwrap_or(COLD_START);
    let item_idx = dataset.corpus.item_id_to_index(item_id).unwrap_or(COLD_START);
    let (u_doc, v_doc) = dataset.corpus.encode_pair(user_idx, item_idx);

    let mut tape = crate::tensor::Tape::<T>::new();
    let bound = params.bind_frozen(&mut tape);
    let trace = forward(
        &mut tape,
        params,
        &bound,
        &u_doc,
        &v_doc,
        user_idx,
        item_idx,
        DropoutMode::Disabled,
        TraceLevel::Weights,
    )?;

    let true_rating = dataset
        .corpus
        .pairs
        .iter()
        .find(|p| p.user == user_idx && p.item == item_idx)
        .map(|p| p.rating);

    let user_docs = dataset.corpus.users.get(user_idx as usize);
    let item_docs = dataset.corpus.items.get(item_idx as usize);
    Ok(ExplainRecord {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        predicted_rating: trace.predicted_rating,
        true_rating,
        cold_start_user: u_doc.is_cold(),
        cold_start_item: v_doc.is_cold(),
        user_reviews: reviews_of(
            user_docs,
            &u_doc.chosen,
            &trace.user_rev_weights,
            &trace.user_sent_weights,
            &u_doc.sent_mask,
        ),
        item_reviews: reviews_of(
            item_docs,
            &v_doc.chosen,
            &trace.item_rev_weights,
            &trace.item_sent_weights,
            &v_doc.sent_mask,
        ),
    })
}

/// Plain-text rendering: reviews sorted by weight, top three flagged.
pub fn render_text(record: &ExplainRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "pair: user '{}' x item '{}'\npredicted rating: {:.4}",
        record.user_id, record.item_id, record.predicted_rating
    ));
    if let Some(t) = record.true_rating {
        out.push_str(&format!(" (true rating {t:.1})"));
    }
    out.push('\n');
    if record.cold_start_user {
        out.push_str("note: cold-start user, no training reviews\n");
    }
    if record.cold_start_item {
        out.push_str("note: cold-start item, no training reviews\n");
    }
    for (label, reviews) in [
        ("item reviews", &record.item_reviews),
        ("user reviews", &record.user_reviews),
    ] {
        out.push_str(&format!("\n{label}, by attention weight:\n"));
        let mut order: Vec<usize> = (0..reviews.len()).collect();
        order.sort_by(|&a, &b| {
            reviews[b]
                .weight
                .partial_cmp(&reviews[a].weight)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for (rank, &ri) in order.iter().enumerate() {
            let review = &reviews[ri];
            let marker = if rank < 3 { "*" } else { " " };
            out.push_str(&format!(
                "{marker} [{:.4}] {}\n",
                review.weight,
                review.text.replace('\n', " ")
            ));
            let mut sent_order: Vec<usize> = (0..review.sentences.len()).collect();
            sent_order.sort_by(|&a, &b| {
                review.sentences[b]
                    .weight
                    .partial_cmp(&review.sentences[a].weight)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for &si in &sent_order {
                let s = &review.sentences[si];
                out.push_str(&format!("      [{:.4}] {}\n", s.weight, s.text));
            }
        }
    }
    out
}

pub fn to_json(record: &ExplainRecord) -> Result<String> {
    serde_json::to_string_pretty(record)
        .map_err(|e| TrainError::Config(format!("explain record serialization: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::synthetic::{dataset_from_interactions, overfit_corpus_config};
    use crate::corpus::Interaction;
    use crate::model::{ModelConfig, Variant};
    use crate::train::{model_config_for, ModelDims};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            word_dim: 8,
            hidden: 4,
            att_dim: 4,
            id_dim: 4,
            fm_factors: 2,
            coattn_mlp_dim: None,
            dropout: 0.0,
        }
    }

    fn fixture_dataset() -> Dataset {
        let rows = [
            ("alice", "tea", 5.0, "Lovely aroma. Would buy again!"),
            ("alice", "mug", 3.0, "Handle broke. Cheap ceramic."),
            ("bob", "tea", 4.0, "Good value for money."),
            ("bob", "kettle", 2.0, "Heats slowly. Lid sticks."),
            ("carol", "mug", 4.0, "Sturdy and well glazed."),
            ("carol", "kettle", 5.0, "Boils fast. Quiet too."),
        ];
        let interactions: Vec<Interaction> = rows
            .iter()
            .enumerate()
            .map(|(i, &(u, v, r, t))| Interaction {
                user_id: u.into(),
                item_id: v.into(),
                rating: r,
                review_text: t.into(),
                timestamp: Some(i as i64),
            })
            .collect();
        dataset_from_interactions(&interactions, &overfit_corpus_config(), 1, true).unwrap()
    }

    fn params_for(dataset: &Dataset) -> ModelParams<f64> {
        let cfg: ModelConfig = model_config_for(dataset, &tiny_dims());
        let mut p = ModelParams::init(cfg, Variant::Full, 3, 3.8).unwrap();
        p.randomize_uniform(17, 0.3);
        p
    }

    #[test]
    fn review_weights_sum_to_one() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        // alice never reviewed kettle; both sides have 2 stored reviews
        let record = explain_pair(&params, &dataset, "alice", "kettle").unwrap();
        assert_eq!(record.user_reviews.len(), 2);
        assert_eq!(record.item_reviews.len(), 2);
        let total: f64 = record.user_reviews.iter().map(|r| r.weight).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weights_match_a_fresh_forward_pass() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        let a = explain_pair(&params, &dataset, "bob", "mug").unwrap();
        let b = explain_pair(&params, &dataset, "bob", "mug").unwrap();
        assert_eq!(a.predicted_rating.to_bits(), b.predicted_rating.to_bits());
        for (ra, rb) in a.user_reviews.iter().zip(&b.user_reviews) {
            assert_eq!(ra.weight.to_bits(), rb.weight.to_bits());
        }
    }

    #[test]
    fn unknown_user_is_cold_start_with_prediction() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        let record = explain_pair(&params, &dataset, "nobody", "tea").unwrap();
        assert!(record.cold_start_user);
        assert!(!record.cold_start_item);
        assert!(record.predicted_rating.is_finite());
        assert!(record.user_reviews.is_empty());
    }

    #[test]
    fn rendering_sorts_reviews_by_weight() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        let record = explain_pair(&params, &dataset, "alice", "kettle").unwrap();
        let text = render_text(&record);
        let review_weights: Vec<f64> = text
            .lines()
            .filter(|l| l.starts_with("* [") || l.starts_with("  ["))
            .filter_map(|l| {
                let s = l.find('[')?;
                let e = l.find(']')?;
                l[s + 1..e].parse().ok()
            })
            .collect();
        // two blocks (item then user), each sorted descending
        assert_eq!(review_weights.len(), 4);
        assert!(review_weights[0] >= review_weights[1]);
        assert!(review_weights[2] >= review_weights[3]);
    }

    #[test]
    fn sentence_spans_map_into_source_text() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        let record = explain_pair(&params, &dataset, "alice", "kettle").unwrap();
        assert!(!record.user_reviews.is_empty());
        for review in record.user_reviews.iter().chain(&record.item_reviews) {
            assert!(!review.sentences.is_empty());
            for s in &review.sentences {
                assert_eq!(&review.text[s.start..s.end], s.text);
            }
        }
    }

    #[test]
    fn true_rating_reported_when_pair_is_known() {
        let dataset = fixture_dataset();
        let params = params_for(&dataset);
        let record = explain_pair(&params, &dataset, "alice", "tea").unwrap();
        assert_eq!(record.true_rating, Some(5.0));
        let unknown = explain_pair(&params, &dataset, "alice", "kettle").unwrap();
        assert_eq!(unknown.true_rating, None);
    }
}
