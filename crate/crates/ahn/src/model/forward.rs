//! The whole forward pass for one user-item pair.
//!
//! Item path: encode each review's sentences, score them with gated
//! attention, aggregate to review embeddings, score reviews with gated
//! attention, aggregate to the item text embedding. User path: the same
//! encoder, but sentence and review weights come from co-attention against
//! the item's sentences/reviews, with affinity rows rescaled by the item's
//! own attention weights. Id embeddings are concatenated on both sides and
//! the factorization machine reads `[u; v]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::DocumentSet;
use crate::tensor::{Real, Tape, TensorRef};

use super::attention::{
    aggregate, coattention_weights, gated_attention, uniform_weights, AttnHandles,
    CoattentionInputs,
};
use super::fm::{fm_predict, FmHandles};
use super::lstm::{encode_review, BiLstmHandles};
use super::{Bound, ModelParams, Result, Variant};

pub enum DropoutMode<'a> {
    Disabled,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    /// Attention weights, embeddings and the prediction.
    Weights,
    /// Additionally every per-sentence embedding.
    Full,
}

/// Everything a forward pass produced, with attention weights and embedding
/// values extracted for inspection. `prediction` stays on the tape so a loss
/// can be built on top.
pub struct ForwardTrace {
    pub prediction: TensorRef,
    pub predicted_rating: f64,
    /// Per item review: weights over its sentences. All-zero for padding.
    pub item_sent_weights: Vec<Vec<f64>>,
    pub item_rev_weights: Vec<f64>,
    pub user_sent_weights: Vec<Vec<f64>>,
    pub user_rev_weights: Vec<f64>,
    pub user_text_embedding: Vec<f64>,
    pub item_text_embedding: Vec<f64>,
    pub user_id_embedding: Vec<f64>,
    pub item_id_embedding: Vec<f64>,
    pub user_embedding: Vec<f64>,
    pub item_embedding: Vec<f64>,
    /// Per review, per sentence slot: the context-aware sentence embedding.
    /// Populated at `TraceLevel::Full` only.
    pub user_sentence_embeddings: Vec<Vec<Vec<f64>>>,
    pub item_sentence_embeddings: Vec<Vec<Vec<f64>>>,
    pub user_review_embeddings: Vec<Vec<f64>>,
    pub item_review_embeddings: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// All attention vectors with their masks, for invariant checks.
    pub fn attention_vectors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = Vec::new();
        for w in &self.item_sent_weights {
            out.push(("item_sentence", w));
        }
        out.push(("item_review", &self.item_rev_weights));
        for w in &self.user_sent_weights {
            out.push(("user_sentence", w));
        }
        out.push(("user_review", &self.user_rev_weights));
        out
    }
}

/// Latent-id embedding: table column through a one-layer tanh MLP. Indices
/// at or past the table's last column map to the shared cold-start column.
pub fn id_embed<T: Real>(
    tape: &mut Tape<T>,
    table: TensorRef,
    mlp_w: TensorRef,
    mlp_b: TensorRef,
    idx: u32,
) -> Result<TensorRef> {
    let columns = tape.shape(table)[1];
    let resolved = (idx as usize).min(columns - 1);
    let looked = tape.lookup(table, &[resolved])?;
    let v = tape.col(looked, 0)?;
    let pre = tape.matvec(mlp_w, v)?;
    let aff = tape.add(pre, mlp_b)?;
    Ok(tape.tanh(aff))
}

struct SidePath {
    /// Per review slot: [emb, k] sentence matrix, None for padding.
    review_mats: Vec<Option<TensorRef>>,
    /// Per review slot: weights over sentences ([k], zeros for padding).
    sent_weights: Vec<TensorRef>,
    /// [emb, slots] matrix of review embeddings (zero columns for padding).
    review_mat: TensorRef,
    rev_weights: TensorRef,
    text_embedding: TensorRef,
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    user_doc: &DocumentSet,
    item_doc: &DocumentSet,
    user_idx: u32,
    item_idx: u32,
    dropout: DropoutMode<'_>,
    level: TraceLevel,
) -> Result<ForwardTrace> {
    let variant = params.variant;
    let cfg = &params.config;
    let emb = cfg.emb_dim();

    let user_hat = id_embed(
        tape,
        bound.get("id_user.table"),
        bound.get("id_user.mlp_w"),
        bound.get("id_user.mlp_b"),
        user_idx,
    )?;
    let item_hat = id_embed(
        tape,
        bound.get("id_item.table"),
        bound.get("id_item.mlp_w"),
        bound.get("id_item.mlp_b"),
        item_idx,
    )?;

    let (user_side, item_side, x_parts): (Option<SidePath>, Option<SidePath>, Vec<TensorRef>) =
        if variant.uses_text() {
            let word_lstm = BiLstmHandles::bind(bound, "word_lstm", cfg.hidden);
            let ctx_lstm = BiLstmHandles::bind(bound, "ctx_lstm", cfg.hidden);
            let embedding = bound.get("word_embedding");
            let zero_vec = tape.zeros(vec![emb]);
            let zero_mat_k = tape.zeros(vec![emb, item_doc.sent_mask.first().map_or(1, |m| m.len())]);

            // -- item path: gated attention end to end
            let item_path = encode_side(
                tape, embedding, word_lstm, ctx_lstm, item_doc, zero_vec,
            )?;
            let item_side = item_attention(tape, bound, variant, item_doc, &item_path, zero_vec)?;

            // -- user path: co-attention against the item, or plain gated
            // attention in the symmetric variant
            let user_path = encode_side(
                tape, embedding, word_lstm, ctx_lstm, user_doc, zero_vec,
            )?;
            let user_side = if variant.symmetric_user() {
                symmetric_user_attention(tape, bound, variant, user_doc, &user_path, zero_vec)?
            } else {
                coattentive_user_attention(
                    tape, bound, params, user_doc, item_doc, &user_path, &item_side, zero_vec,
                    zero_mat_k,
                )?
            };

            let x = vec![
                user_side.text_embedding,
                user_hat,
                item_side.text_embedding,
                item_hat,
            ];
            (Some(user_side), Some(item_side), x)
        } else {
            (None, None, vec![user_hat, item_hat])
        };

    let mut x = tape.concat(&x_parts)?;
    if let DropoutMode::Train(rng) = dropout {
        if cfg.dropout > 0.0 {
            let keep = 1.0 - cfg.dropout;
            let mask: Vec<bool> = (0..tape.numel(x)).map(|_| rng.gen_bool(keep)).collect();
            x = tape.dropout(x, &mask, keep)?;
        }
    }

    let prediction = if variant.fm_head() {
        fm_predict(tape, FmHandles::bind(bound), x)?
    } else {
        let half = tape.numel(x) / 2;
        let u_part = tape.slice(x, 0, half)?;
        let v_part = tape.slice(x, half, half)?;
        let prod = tape.mul(u_part, v_part)?;
        tape.sum(prod)
    };

    Ok(build_trace(
        tape, prediction, user_side, item_side, user_hat, item_hat, user_doc, item_doc, level, emb,
    ))
}

struct EncodedSide {
    /// Per review slot: [emb, k] sentence matrix (real reviews only).
    mats: Vec<Option<TensorRef>>,
}

fn encode_side<T: Real>(
    tape: &mut Tape<T>,
    embedding: TensorRef,
    word_lstm: BiLstmHandles,
    ctx_lstm: BiLstmHandles,
    doc: &DocumentSet,
    zero_vec: TensorRef,
) -> Result<EncodedSide> {
    let mut mats = Vec::with_capacity(doc.slots());
    for slot in 0..doc.slots() {
        if doc.review_mask[slot] {
            let sents = encode_review(
                tape,
                embedding,
                word_lstm,
                ctx_lstm,
                &doc.words[slot],
                &doc.word_mask[slot],
                zero_vec,
            )?;
            let mat = tape.hstack(&sents)?;
            mats.push(Some(mat));
        } else {
            mats.push(None);
        }
    }
    Ok(EncodedSide { mats })
}

fn item_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    variant: Variant,
    doc: &DocumentSet,
    encoded: &EncodedSide,
    zero_vec: TensorRef,
) -> Result<SidePath> {
    let k = doc.sent_mask.first().map_or(0, |m| m.len());
    let sent_attn = (!variant.item_attention_uniform())
        .then(|| AttnHandles::bind(bound, "item_sent_attn"));
    let rev_attn = (!variant.item_attention_uniform())
        .then(|| AttnHandles::bind(bound, "item_rev_attn"));

    let mut sent_weights = Vec::with_capacity(doc.slots());
    let mut rev_embs = Vec::with_capacity(doc.slots());
    for slot in 0..doc.slots() {
        match encoded.mats[slot] {
            Some(mat) => {
                let mask = &doc.sent_mask[slot];
                let weights = match sent_attn {
                    Some(attn) => gated_attention(tape, attn, mat, mask)?,
                    None => uniform_weights(tape, mask)?,
                };
                sent_weights.push(weights);
                rev_embs.push(aggregate(tape, mat, weights)?);
            }
            None => {
                sent_weights.push(tape.zeros(vec![k]));
                rev_embs.push(zero_vec);
            }
        }
    }
    let review_mat = tape.hstack(&rev_embs)?;
    let cold = doc.is_cold();
    let rev_weights = if cold {
        tape.zeros(vec![doc.slots()])
    } else {
        match rev_attn {
            Some(attn) => gated_attention(tape, attn, review_mat, &doc.review_mask)?,
            None => uniform_weights(tape, &doc.review_mask)?,
        }
    };
    let text_embedding = if cold {
        zero_vec
    } else {
        aggregate(tape, review_mat, rev_weights)?
    };
    Ok(SidePath {
        review_mats: encoded.mats.clone(),
        sent_weights,
        review_mat,
        rev_weights,
        text_embedding,
    })
}

fn symmetric_user_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    variant: Variant,
    doc: &DocumentSet,
    encoded: &EncodedSide,
    zero_vec: TensorRef,
) -> Result<SidePath> {
    let k = doc.sent_mask.first().map_or(0, |m| m.len());
    let sent_attn = AttnHandles::bind(bound, "user_sent_attn");
    let rev_attn = AttnHandles::bind(bound, "user_rev_attn");
    let _ = variant;

    let mut sent_weights = Vec::with_capacity(doc.slots());
    let mut rev_embs = Vec::with_capacity(doc.slots());
    for slot in 0..doc.slots() {
        match encoded.mats[slot] {
            Some(mat) => {
                let weights = gated_attention(tape, sent_attn, mat, &doc.sent_mask[slot])?;
                sent_weights.push(weights);
                rev_embs.push(aggregate(tape, mat, weights)?);
            }
            None => {
                sent_weights.push(tape.zeros(vec![k]));
                rev_embs.push(zero_vec);
            }
        }
    }
    let review_mat = tape.hstack(&rev_embs)?;
    let cold = doc.is_cold();
    let rev_weights = if cold {
        tape.zeros(vec![doc.slots()])
    } else {
        gated_attention(tape, rev_attn, review_mat, &doc.review_mask)?
    };
    let text_embedding = if cold {
        zero_vec
    } else {
        aggregate(tape, review_mat, rev_weights)?
    };
    Ok(SidePath {
        review_mats: encoded.mats.clone(),
        sent_weights,
        review_mat,
        rev_weights,
        text_embedding,
    })
}

#[allow(clippy::too_many_arguments)]
fn coattentive_user_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    params: &ModelParams<T>,
    user_doc: &DocumentSet,
    item_doc: &DocumentSet,
    encoded: &EncodedSide,
    item_side: &SidePath,
    zero_vec: TensorRef,
    zero_mat_k: TensorRef,
) -> Result<SidePath> {
    let variant = params.variant;
    let k = user_doc.sent_mask.first().map_or(0, |m| m.len());
    let m_sent = bound.get("coattn_sent.m");
    let m_rev = bound.get("coattn_rev.m");
    let f_sent = bound.try_get("coattn_sent.f_w");
    let f_rev = bound.try_get("coattn_rev.f_w");

    let item_has_text = !item_doc.is_cold();

    // Concatenate the item's sentence matrices and attention weights; padded
    // reviews contribute zero columns that stay masked.
    let (item_sent_cat, item_sent_mask, omega) = if item_has_text {
        let mats: Vec<TensorRef> = item_side
            .review_mats
            .iter()
            .map(|m| m.unwrap_or(zero_mat_k))
            .collect();
        let cat = tape.concat_cols(&mats)?;
        let mut flat_mask = Vec::new();
        for (slot, mask) in item_doc.sent_mask.iter().enumerate() {
            if item_doc.review_mask[slot] {
                flat_mask.extend_from_slice(mask);
            } else {
                flat_mask.extend(std::iter::repeat(false).take(mask.len()));
            }
        }
        let omega = tape.concat(&item_side.sent_weights)?;
        (Some(cat), flat_mask, Some(omega))
    } else {
        (None, Vec::new(), None)
    };

    let mut sent_weights = Vec::with_capacity(user_doc.slots());
    let mut rev_embs = Vec::with_capacity(user_doc.slots());
    for slot in 0..user_doc.slots() {
        match encoded.mats[slot] {
            Some(mat) => {
                let mask = &user_doc.sent_mask[slot];
                let weights = match (item_sent_cat, &omega) {
                    (Some(cat), Some(om)) => coattention_weights(
                        tape,
                        CoattentionInputs {
                            m: m_sent,
                            f_map: f_sent,
                            own: mat,
                            other: cat,
                            other_weights: *om,
                            own_mask: mask,
                            other_mask: &item_sent_mask,
                            adapt: variant.adapts_affinity(),
                        },
                    )?,
                    // No item text to guide the search: fall back to an
                    // unweighted average of the user's sentences.
                    _ => uniform_weights(tape, mask)?,
                };
                sent_weights.push(weights);
                rev_embs.push(aggregate(tape, mat, weights)?);
            }
            None => {
                sent_weights.push(tape.zeros(vec![k]));
                rev_embs.push(zero_vec);
            }
        }
    }

    let review_mat = tape.hstack(&rev_embs)?;
    let cold = user_doc.is_cold();
    let rev_weights = if cold {
        tape.zeros(vec![user_doc.slots()])
    } else if item_has_text {
        coattention_weights(
            tape,
            CoattentionInputs {
                m: m_rev,
                f_map: f_rev,
                own: review_mat,
                other: item_side.review_mat,
                other_weights: item_side.rev_weights,
                own_mask: &user_doc.review_mask,
                other_mask: &item_doc.review_mask,
                adapt: variant.adapts_affinity(),
            },
        )?
    } else {
        uniform_weights(tape, &user_doc.review_mask)?
    };
    let text_embedding = if cold {
        zero_vec
    } else {
        aggregate(tape, review_mat, rev_weights)?
    };
    Ok(SidePath {
        review_mats: encoded.mats.clone(),
        sent_weights,
        review_mat,
        rev_weights,
        text_embedding,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_trace<T: Real>(
    tape: &Tape<T>,
    prediction: TensorRef,
    user_side: Option<SidePath>,
    item_side: Option<SidePath>,
    user_hat: TensorRef,
    item_hat: TensorRef,
    user_doc: &DocumentSet,
    item_doc: &DocumentSet,
    level: TraceLevel,
    emb: usize,
) -> ForwardTrace {
    let weights_of = |side: &Option<SidePath>, slots: usize, k: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
        match side {
            Some(s) => (
                s.sent_weights.iter().map(|&w| tape.data_f64(w)).collect(),
                tape.data_f64(s.rev_weights),
            ),
            None => (vec![vec![0.0; k]; slots], vec![0.0; slots]),
        }
    };
    let user_k = user_doc.sent_mask.first().map_or(0, |m| m.len());
    let item_k = item_doc.sent_mask.first().map_or(0, |m| m.len());
    let (user_sent_weights, user_rev_weights) = weights_of(&user_side, user_doc.slots(), user_k);
    let (item_sent_weights, item_rev_weights) = weights_of(&item_side, item_doc.slots(), item_k);

    let text_emb = |side: &Option<SidePath>| -> Vec<f64> {
        side.as_ref()
            .map(|s| tape.data_f64(s.text_embedding))
            .unwrap_or_default()
    };
    let user_text_embedding = text_emb(&user_side);
    let item_text_embedding = text_emb(&item_side);
    let user_id_embedding = tape.data_f64(user_hat);
    let item_id_embedding = tape.data_f64(item_hat);

    let mut user_embedding = user_text_embedding.clone();
    user_embedding.extend_from_slice(&user_id_embedding);
    let mut item_embedding = item_text_embedding.clone();
    item_embedding.extend_from_slice(&item_id_embedding);

    let review_embs = |side: &Option<SidePath>, slots: usize| -> Vec<Vec<f64>> {
        match side {
            Some(s) => {
                let flat = tape.data_f64(s.review_mat);
                (0..slots)
                    .map(|j| (0..emb).map(|i| flat[i * slots + j]).collect())
                    .collect()
            }
            None => vec![vec![0.0; emb]; slots],
        }
    };
    let user_review_embeddings = review_embs(&user_side, user_doc.slots());
    let item_review_embeddings = review_embs(&item_side, item_doc.slots());

    let sentence_embs = |side: &Option<SidePath>, doc: &DocumentSet, k: usize| -> Vec<Vec<Vec<f64>>> {
        if level != TraceLevel::Full {
            return Vec::new();
        }
        match side {
            Some(s) => s
                .review_mats
                .iter()
                .map(|mat| match *mat {
                    Some(m) => {
                        let flat = tape.data_f64(m);
                        (0..k)
                            .map(|j| (0..emb).map(|i| flat[i * k + j]).collect())
                            .collect()
                    }
                    None => vec![vec![0.0; emb]; k],
                })
                .collect(),
            None => vec![vec![vec![0.0; emb]; k]; doc.slots()],
        }
    };
    let user_sentence_embeddings = sentence_embs(&user_side, user_doc, user_k);
    let item_sentence_embeddings = sentence_embs(&item_side, item_doc, item_k);

    ForwardTrace {
        prediction,
        predicted_rating: tape.data_f64(prediction)[0],
        item_sent_weights,
        item_rev_weights,
        user_sent_weights,
        user_rev_weights,
        user_text_embedding,
        item_text_embedding,
        user_id_embedding,
        item_id_embedding,
        user_embedding,
        item_embedding,
        user_sentence_embeddings,
        item_sentence_embeddings,
        user_review_embeddings,
        item_review_embeddings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DocumentSet;
    use crate::model::{ModelConfig, ModelParams};
    use crate::model::fm::fm_pairwise_oracle;
    use rand::{Rng, SeedableRng};

    fn doc_from_words(words: Vec<Vec<Vec<u32>>>) -> DocumentSet {
        let slots = words.len();
        let k = words[0].len();
        let l = words[0][0].len();
        let mut set = DocumentSet::all_padding(slots, k, l);
        for (r, review) in words.iter().enumerate() {
            let mut any_sent = false;
            for (s, sent) in review.iter().enumerate() {
                let real = sent.iter().take_while(|&&w| w != 0).count();
                if real > 0 {
                    any_sent = true;
                    set.sent_mask[r][s] = true;
                    for w in 0..real {
                        set.words[r][s][w] = sent[w];
                        set.word_mask[r][s][w] = true;
                    }
                }
            }
            if any_sent {
                set.review_mask[r] = true;
                set.source_pairs[r] = Some(r as u32);
                set.chosen[r] = Some(r as u32);
            }
        }
        set
    }

    fn tiny_params(seed: u64, variant: Variant) -> ModelParams<f64> {
        ModelParams::init(ModelConfig::tiny(16, 4, 4), variant, seed, 3.0).unwrap()
    }

    fn random_doc(rng: &mut rand_chacha::ChaCha8Rng, slots: usize, k: usize, l: usize) -> DocumentSet {
        let reviews = rng.gen_range(1..=slots);
        let mut words = vec![vec![vec![0u32; l]; k]; slots];
        for r in words.iter_mut().take(reviews) {
            let sents = rng.gen_range(1..=k);
            for s in r.iter_mut().take(sents) {
                let n = rng.gen_range(1..=l);
                for w in s.iter_mut().take(n) {
                    *w = rng.gen_range(2..16);
                }
            }
        }
        doc_from_words(words)
    }

    #[test]
    fn all_text_masked_falls_back_to_id_channel() {
        let params = tiny_params(11, Variant::Full);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let cold = DocumentSet::all_padding(2, 2, 3);
        let trace = forward(
            &mut tape, &params, &bound, &cold, &cold, 0, 1,
            DropoutMode::Disabled, TraceLevel::Weights,
        )
        .unwrap();

        // prediction equals fm([0; u_hat; 0; v_hat]) evaluated directly
        let emb = params.config.emb_dim();
        let mut x = vec![0.0; emb];
        x.extend(&trace.user_id_embedding);
        x.extend(vec![0.0; emb]);
        x.extend(&trace.item_id_embedding);
        let bias = params.get("fm.bias").unwrap().data[0];
        let w = &params.get("fm.w").unwrap().data;
        let z = &params.get("fm.z").unwrap().data;
        let expect = fm_pairwise_oracle(bias, w, z, params.config.fm_factors, &x);
        assert!((trace.predicted_rating - expect).abs() < 1e-10);
        assert!(trace.user_text_embedding.iter().all(|&v| v == 0.0));
        assert!(trace.item_rev_weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_review_single_sentence_gets_weight_one() {
        let params = tiny_params(13, Variant::Full);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let doc = doc_from_words(vec![vec![vec![3, 4, 0], vec![0; 3]]]);
        let trace = forward(
            &mut tape, &params, &bound, &doc, &doc, 0, 1,
            DropoutMode::Disabled, TraceLevel::Weights,
        )
        .unwrap();
        assert!((trace.user_sent_weights[0][0] - 1.0).abs() < 1e-12);
        assert_eq!(trace.user_sent_weights[0][1], 0.0);
        assert!((trace.user_rev_weights[0] - 1.0).abs() < 1e-12);
        assert!((trace.item_rev_weights[0] - 1.0).abs() < 1e-12);
        // single review: user text embedding equals that review's embedding
        for (a, b) in trace
            .user_text_embedding
            .iter()
            .zip(&trace.user_review_embeddings[0])
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_sums_to_one_over_support() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let params = tiny_params(19, Variant::Full);
        for _ in 0..20 {
            let user_doc = random_doc(&mut rng, 2, 2, 3);
            let item_doc = random_doc(&mut rng, 2, 2, 3);
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            let trace = forward(
                &mut tape, &params, &bound, &user_doc, &item_doc, 0, 1,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap();
            for (name, w) in trace.attention_vectors() {
                let sum: f64 = w.iter().sum();
                let support = w.iter().filter(|&&v| v > 0.0).count();
                if support > 0 {
                    assert!((sum - 1.0).abs() < 1e-5, "{name}: sum {sum}");
                }
            }
        }
    }

    #[test]
    fn item_weights_ignore_user_documents() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let params = tiny_params(29, Variant::Full);
        let item_doc = random_doc(&mut rng, 2, 2, 3);
        let user_a = random_doc(&mut rng, 2, 2, 3);
        let user_b = random_doc(&mut rng, 2, 2, 3);

        let run = |user_doc: &DocumentSet| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            let trace = forward(
                &mut tape, &params, &bound, user_doc, &item_doc, 0, 1,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap();
            (trace.item_sent_weights, trace.item_rev_weights)
        };
        let (sa, ra) = run(&user_a);
        let (sb, rb) = run(&user_b);
        // bit-identical, not merely close
        assert_eq!(sa, sb);
        assert_eq!(ra, rb);
    }

    #[test]
    fn user_weights_respond_to_item_change() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let params = tiny_params(37, Variant::Full);
        let user_doc = random_doc(&mut rng, 2, 2, 3);
        let item_a = random_doc(&mut rng, 2, 2, 3);
        let item_b = random_doc(&mut rng, 2, 2, 3);

        let run = |item_doc: &DocumentSet| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            forward(
                &mut tape, &params, &bound, &user_doc, item_doc, 0, 1,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap()
            .user_sent_weights
        };
        assert_ne!(run(&item_a), run(&item_b));
    }

    #[test]
    fn padded_content_mutation_leaves_prediction_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let params = tiny_params(43, Variant::Full);
        let user_doc = random_doc(&mut rng, 2, 2, 3);
        let item_doc = random_doc(&mut rng, 2, 2, 3);

        let run = |u: &DocumentSet, v: &DocumentSet| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            forward(
                &mut tape, &params, &bound, u, v, 0, 1,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap()
            .predicted_rating
        };
        let base = run(&user_doc, &item_doc);

        let mut mutated = user_doc.clone();
        for r in 0..mutated.slots() {
            for s in 0..mutated.sent_mask[r].len() {
                for w in 0..mutated.word_mask[r][s].len() {
                    if !mutated.word_mask[r][s][w] {
                        mutated.words[r][s][w] = 13;
                    }
                }
            }
        }
        assert_eq!(base.to_bits(), run(&mutated, &item_doc).predicted_rating_bits());
    }

    trait Bits {
        fn predicted_rating_bits(self) -> u64;
    }
    impl Bits for f64 {
        fn predicted_rating_bits(self) -> u64 {
            self.to_bits()
        }
    }

    #[test]
    fn symmetric_variant_user_weights_ignore_item() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(47);
        let params = tiny_params(53, Variant::SymmetricUser);
        let user_doc = random_doc(&mut rng, 2, 2, 3);
        let item_a = random_doc(&mut rng, 2, 2, 3);
        let item_b = random_doc(&mut rng, 2, 2, 3);

        let run = |item_doc: &DocumentSet| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            let t = forward(
                &mut tape, &params, &bound, &user_doc, item_doc, 0, 1,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap();
            (t.user_sent_weights, t.user_rev_weights)
        };
        assert_eq!(run(&item_a), run(&item_b));
    }

    #[test]
    fn uniform_item_variant_averages_sentences() {
        let params = tiny_params(59, Variant::NoItemAttention);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let item_doc = doc_from_words(vec![
            vec![vec![3, 4, 5], vec![6, 7, 0]],
            vec![vec![8, 0, 0], vec![0; 3]],
        ]);
        let user_doc = doc_from_words(vec![vec![vec![9, 10, 0], vec![0; 3]]]);
        let trace = forward(
            &mut tape, &params, &bound, &user_doc, &item_doc, 0, 1,
            DropoutMode::Disabled, TraceLevel::Weights,
        )
        .unwrap();
        assert_eq!(trace.item_sent_weights[0], vec![0.5, 0.5]);
        assert_eq!(trace.item_sent_weights[1], vec![1.0, 0.0]);
        assert_eq!(trace.item_rev_weights, vec![0.5, 0.5]);
    }

    #[test]
    fn dot_product_head_on_matching_embeddings() {
        let params = tiny_params(61, Variant::DotProductHead);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let doc = doc_from_words(vec![vec![vec![3, 4, 0], vec![0; 3]]]);
        let trace = forward(
            &mut tape, &params, &bound, &doc, &doc, 0, 1,
            DropoutMode::Disabled, TraceLevel::Weights,
        )
        .unwrap();
        let dot: f64 = trace
            .user_embedding
            .iter()
            .zip(&trace.item_embedding)
            .map(|(a, b)| a * b)
            .sum();
        assert!((trace.predicted_rating - dot).abs() < 1e-10);
    }

    #[test]
    fn fm_only_ignores_documents_entirely() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        let params = tiny_params(71, Variant::FmOnly);
        let doc_a = random_doc(&mut rng, 2, 2, 3);
        let doc_b = random_doc(&mut rng, 2, 2, 3);
        let run = |u: &DocumentSet, v: &DocumentSet| {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            forward(
                &mut tape, &params, &bound, u, v, 2, 3,
                DropoutMode::Disabled, TraceLevel::Weights,
            )
            .unwrap()
            .predicted_rating
        };
        assert_eq!(run(&doc_a, &doc_a).to_bits(), run(&doc_b, &doc_b).to_bits());
    }

    #[test]
    fn distinct_ids_give_distinct_embeddings() {
        let params = tiny_params(73, Variant::Full);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let a = id_embed(
            &mut tape,
            bound.get("id_user.table"),
            bound.get("id_user.mlp_w"),
            bound.get("id_user.mlp_b"),
            0,
        )
        .unwrap();
        let b = id_embed(
            &mut tape,
            bound.get("id_user.table"),
            bound.get("id_user.mlp_w"),
            bound.get("id_user.mlp_b"),
            1,
        )
        .unwrap();
        assert_ne!(tape.data(a), tape.data(b));
    }

    #[test]
    fn id_embed_matches_affine_tanh_oracle() {
        let params = tiny_params(79, Variant::Full);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let got = id_embed(
            &mut tape,
            bound.get("id_user.table"),
            bound.get("id_user.mlp_w"),
            bound.get("id_user.mlp_b"),
            2,
        )
        .unwrap();

        let table = params.get("id_user.table").unwrap();
        let w = params.get("id_user.mlp_w").unwrap();
        let b = params.get("id_user.mlp_b").unwrap();
        let d = params.config.id_dim;
        let cols = table.shape[1];
        let col: Vec<f64> = (0..d).map(|i| table.data[i * cols + 2]).collect();
        let expect: Vec<f64> = (0..d)
            .map(|i| {
                let mut s = b.data[i];
                for j in 0..d {
                    s += w.data[i * d + j] * col[j];
                }
                s.tanh()
            })
            .collect();
        for (a, e) in tape.data(got).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cold_ids_map_to_the_shared_column() {
        let params = tiny_params(83, Variant::Full);
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let table = bound.get("id_user.table");
        let w = bound.get("id_user.mlp_w");
        let b = bound.get("id_user.mlp_b");
        let big = id_embed(&mut tape, table, w, b, 999).unwrap();
        let cold = id_embed(&mut tape, table, w, b, crate::corpus::COLD_START).unwrap();
        assert_eq!(tape.data(big), tape.data(cold));
    }
}
