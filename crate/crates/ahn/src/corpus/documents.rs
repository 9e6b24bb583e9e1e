//! Encoded review documents: per-entity integer index arrays plus the
//! fixed-shape padded/masked document sets the model consumes.

use super::tokenize::tokenize;
use super::vocab::Vocabulary;
use super::{CorpusConfig, CorpusError, Interaction, Result, SelectionPolicy};
use crate::binio::*;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::cell::Cell;
use std::path::Path;

const MAGIC: &[u8; 4] = b"AHNC";
const VERSION: u32 = 1;

/// Entity index used for users/items never seen in training.
pub const COLD_START: u32 = u32::MAX;

thread_local! {
    static ENCODE_PAIR_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of pair-document materializations on this thread. Text-free
/// training paths must leave this untouched.
pub fn encode_pair_call_count() -> u64 {
    ENCODE_PAIR_CALLS.with(|c| c.get())
}

/// One training review, tokenized and index-encoded, truncated to at most
/// `k` sentences of at most `l` words.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedReview {
    /// Item index for a user review; user index for an item review.
    pub counterpart: u32,
    /// Index of the originating interaction in the pair table.
    pub pair_index: u32,
    /// Timestamp when available, otherwise file order.
    pub recency: i64,
    pub sentences: Vec<Vec<u32>>,
    pub raw_text: String,
    /// Byte span per kept sentence into `raw_text`.
    pub spans: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityDocs {
    pub id: String,
    /// Training reviews in ascending recency order.
    pub reviews: Vec<EncodedReview>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub recency: i64,
}

/// The whole encoded corpus: entity documents built from training-split
/// reviews only, plus the pair table covering every kept interaction.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub n: u32,
    pub m: u32,
    pub k: u32,
    pub l: u32,
    pub selection: SelectionPolicy,
    pub users: Vec<EntityDocs>,
    pub items: Vec<EntityDocs>,
    pub pairs: Vec<PairRecord>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
}

impl EncodedCorpus {
    /// Encode documents from the training split of `interactions`.
    /// Entities are enumerated over all interactions (val/test users and
    /// items still get an id), but only training reviews are stored.
    pub fn build(
        interactions: &[Interaction],
        train_ids: &[u32],
        vocab: &Vocabulary,
        config: &CorpusConfig,
    ) -> EncodedCorpus {
        let (user_order, _) = super::group_by(interactions, |i| i.user_id.as_str());
        let (item_order, _) = super::group_by(interactions, |i| i.item_id.as_str());
        let user_index: HashMap<String, u32> = user_order
            .iter()
            .enumerate()
            .map(|(i, &u)| (u.to_string(), i as u32))
            .collect();
        let item_index: HashMap<String, u32> = item_order
            .iter()
            .enumerate()
            .map(|(i, &v)| (v.to_string(), i as u32))
            .collect();

        let mut users: Vec<EntityDocs> = user_order
            .iter()
            .map(|&id| EntityDocs {
                id: id.to_string(),
                reviews: Vec::new(),
            })
            .collect();
        let mut items: Vec<EntityDocs> = item_order
            .iter()
            .map(|&id| EntityDocs {
                id: id.to_string(),
                reviews: Vec::new(),
            })
            .collect();

        for &pair_idx in train_ids {
            let inter = &interactions[pair_idx as usize];
            let uid = user_index[&inter.user_id];
            let iid = item_index[&inter.item_id];
            let recency = inter.timestamp.unwrap_or(pair_idx as i64);
            let (sentences, spans) = encode_text(&inter.review_text, vocab, config.k, config.l);
            users[uid as usize].reviews.push(EncodedReview {
                counterpart: iid,
                pair_index: pair_idx,
                recency,
                sentences: sentences.clone(),
                raw_text: inter.review_text.clone(),
                spans: spans.clone(),
            });
            items[iid as usize].reviews.push(EncodedReview {
                counterpart: uid,
                pair_index: pair_idx,
                recency,
                sentences,
                raw_text: inter.review_text.clone(),
                spans,
            });
        }
        for docs in users.iter_mut().chain(items.iter_mut()) {
            docs.reviews
                .sort_by_key(|r| (r.recency, r.pair_index));
        }

        let pairs = interactions
            .iter()
            .enumerate()
            .map(|(i, inter)| PairRecord {
                user: user_index[&inter.user_id],
                item: item_index[&inter.item_id],
                rating: inter.rating,
                recency: inter.timestamp.unwrap_or(i as i64),
            })
            .collect();

        EncodedCorpus {
            n: config.n as u32,
            m: config.m as u32,
            k: config.k as u32,
            l: config.l as u32,
            selection: config.selection,
            users,
            items,
            pairs,
            user_index,
            item_index,
        }
    }

    pub fn user_id_to_index(&self, id: &str) -> Option<u32> {
        self.user_index.get(id).copied()
    }

    pub fn item_id_to_index(&self, id: &str) -> Option<u32> {
        self.item_index.get(id).copied()
    }

    /// Pair indices of every review stored in any document, for leakage
    /// auditing: all of them must come from the training split.
    pub fn all_source_pair_indices(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for docs in self.users.iter().chain(self.items.iter()) {
            out.extend(docs.reviews.iter().map(|r| r.pair_index));
        }
        out
    }

    /// Materialize the padded/masked document pair for predicting
    /// `(user, item)`. Any review the user wrote for this item is excluded
    /// from both sides. `COLD_START` or an unknown side yields an
    /// all-padding document.
    pub fn encode_pair(&self, user: u32, item: u32) -> (DocumentSet, DocumentSet) {
        ENCODE_PAIR_CALLS.with(|c| c.set(c.get() + 1));
        let user_docs = self.users.get(user as usize);
        let item_docs = self.items.get(item as usize);
        let u = build_document_set(
            user_docs.map(|d| d.reviews.as_slice()).unwrap_or(&[]),
            item,
            self.n as usize,
            self.k as usize,
            self.l as usize,
            self.selection,
        );
        let v = build_document_set(
            item_docs.map(|d| d.reviews.as_slice()).unwrap_or(&[]),
            user,
            self.m as usize,
            self.k as usize,
            self.l as usize,
            self.selection,
        );
        (u, v)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        write_u32(&mut w, self.n)?;
        write_u32(&mut w, self.m)?;
        write_u32(&mut w, self.k)?;
        write_u32(&mut w, self.l)?;
        write_u8(
            &mut w,
            match self.selection {
                SelectionPolicy::MostRecent => 0,
                SelectionPolicy::FirstSeen => 1,
            },
        )?;
        write_u32(&mut w, self.users.len() as u32)?;
        write_u32(&mut w, self.items.len() as u32)?;
        write_u32(&mut w, self.pairs.len() as u32)?;
        for docs in self.users.iter().chain(self.items.iter()) {
            write_str(&mut w, &docs.id)?;
            write_u32(&mut w, docs.reviews.len() as u32)?;
            for r in &docs.reviews {
                write_u32(&mut w, r.counterpart)?;
                write_u32(&mut w, r.pair_index)?;
                write_i64(&mut w, r.recency)?;
                write_u32(&mut w, r.sentences.len() as u32)?;
                for (sent, &(s, e)) in r.sentences.iter().zip(&r.spans) {
                    write_u32(&mut w, s)?;
                    write_u32(&mut w, e)?;
                    write_u32(&mut w, sent.len() as u32)?;
                    for &idx in sent {
                        write_u32(&mut w, idx)?;
                    }
                }
                write_str(&mut w, &r.raw_text)?;
            }
        }
        for p in &self.pairs {
            write_u32(&mut w, p.user)?;
            write_u32(&mut w, p.item)?;
            write_f64(&mut w, p.rating)?;
            write_i64(&mut w, p.recency)?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> Result<EncodedCorpus> {
        let io = |e: std::io::Error| CorpusError::BadDocuments(e.to_string());
        let mut r = BufReader::new(File::open(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?);
        let magic = read_magic(&mut r).map_err(io)?;
        if &magic != MAGIC {
            return Err(CorpusError::BadDocuments(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(CorpusError::BadDocuments(format!(
                "unsupported version {version}"
            )));
        }
        let n = read_u32(&mut r).map_err(io)?;
        let m = read_u32(&mut r).map_err(io)?;
        let k = read_u32(&mut r).map_err(io)?;
        let l = read_u32(&mut r).map_err(io)?;
        let selection = match read_u8(&mut r).map_err(io)? {
            0 => SelectionPolicy::MostRecent,
            1 => SelectionPolicy::FirstSeen,
            other => {
                return Err(CorpusError::BadDocuments(format!(
                    "unknown selection policy {other}"
                )))
            }
        };
        let n_users = read_u32(&mut r).map_err(io)? as usize;
        let n_items = read_u32(&mut r).map_err(io)? as usize;
        let n_pairs = read_u32(&mut r).map_err(io)? as usize;

        let read_entities = |count: usize, rd: &mut BufReader<File>| -> Result<Vec<EntityDocs>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let id = read_str(rd).map_err(io)?;
                let n_reviews = read_u32(rd).map_err(io)? as usize;
                let mut reviews = Vec::with_capacity(n_reviews);
                for _ in 0..n_reviews {
                    let counterpart = read_u32(rd).map_err(io)?;
                    let pair_index = read_u32(rd).map_err(io)?;
                    let recency = read_i64(rd).map_err(io)?;
                    let n_sent = read_u32(rd).map_err(io)? as usize;
                    let mut sentences = Vec::with_capacity(n_sent);
                    let mut spans = Vec::with_capacity(n_sent);
                    for _ in 0..n_sent {
                        let s = read_u32(rd).map_err(io)?;
                        let e = read_u32(rd).map_err(io)?;
                        let n_words = read_u32(rd).map_err(io)? as usize;
                        let mut words = Vec::with_capacity(n_words);
                        for _ in 0..n_words {
                            words.push(read_u32(rd).map_err(io)?);
                        }
                        sentences.push(words);
                        spans.push((s, e));
                    }
                    let raw_text = read_str(rd).map_err(io)?;
                    reviews.push(EncodedReview {
                        counterpart,
                        pair_index,
                        recency,
                        sentences,
                        raw_text,
                        spans,
                    });
                }
                out.push(EntityDocs { id, reviews });
            }
            Ok(out)
        };

        let users = read_entities(n_users, &mut r)?;
        let items = read_entities(n_items, &mut r)?;
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let user = read_u32(&mut r).map_err(io)?;
            let item = read_u32(&mut r).map_err(io)?;
            let rating = read_f64(&mut r).map_err(io)?;
            let recency = read_i64(&mut r).map_err(io)?;
            pairs.push(PairRecord {
                user,
                item,
                rating,
                recency,
            });
        }

        let user_index = users
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i as u32))
            .collect();
        let item_index = items
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i as u32))
            .collect();
        Ok(EncodedCorpus {
            n,
            m,
            k,
            l,
            selection,
            users,
            items,
            pairs,
            user_index,
            item_index,
        })
    }
}

fn encode_text(
    text: &str,
    vocab: &Vocabulary,
    k: usize,
    l: usize,
) -> (Vec<Vec<u32>>, Vec<(u32, u32)>) {
    let mut sentences = Vec::new();
    let mut spans = Vec::new();
    for sent in tokenize(text).into_iter().take(k) {
        let words: Vec<u32> = sent
            .tokens
            .iter()
            .take(l)
            .map(|t| vocab.encode(t))
            .collect();
        sentences.push(words);
        spans.push((sent.start as u32, sent.end as u32));
    }
    (sentences, spans)
}

/// Fixed-shape padded/masked review documents for one side of a pair.
/// Masks are prefix-true along every axis: real content precedes padding.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentSet {
    /// `[slots][k][l]` word indices, zero-padded.
    pub words: Vec<Vec<Vec<u32>>>,
    pub word_mask: Vec<Vec<Vec<bool>>>,
    pub sent_mask: Vec<Vec<bool>>,
    pub review_mask: Vec<bool>,
    /// Originating interaction per real review slot.
    pub source_pairs: Vec<Option<u32>>,
    /// Index into the entity's stored review list per real slot.
    pub chosen: Vec<Option<u32>>,
}

impl DocumentSet {
    pub fn slots(&self) -> usize {
        self.review_mask.len()
    }

    pub fn real_reviews(&self) -> usize {
        self.review_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_cold(&self) -> bool {
        self.real_reviews() == 0
    }

    pub fn all_padding(slots: usize, k: usize, l: usize) -> DocumentSet {
        DocumentSet {
            words: vec![vec![vec![0; l]; k]; slots],
            word_mask: vec![vec![vec![false; l]; k]; slots],
            sent_mask: vec![vec![false; k]; slots],
            review_mask: vec![false; slots],
            source_pairs: vec![None; slots],
            chosen: vec![None; slots],
        }
    }
}

fn build_document_set(
    reviews: &[EncodedReview],
    exclude_counterpart: u32,
    slots: usize,
    k: usize,
    l: usize,
    selection: SelectionPolicy,
) -> DocumentSet {
    let usable: Vec<(u32, &EncodedReview)> = reviews
        .iter()
        .enumerate()
        .filter(|(_, r)| r.counterpart != exclude_counterpart)
        .map(|(i, r)| (i as u32, r))
        .collect();
    // Stored order is ascending recency, so "most recent" is the tail.
    let selected: Vec<(u32, &EncodedReview)> = match selection {
        SelectionPolicy::MostRecent => {
            let start = usable.len().saturating_sub(slots);
            usable[start..].to_vec()
        }
        SelectionPolicy::FirstSeen => usable.into_iter().take(slots).collect(),
    };

    let mut set = DocumentSet::all_padding(slots, k, l);
    for (slot, (ri, review)) in selected.into_iter().enumerate() {
        set.review_mask[slot] = true;
        set.source_pairs[slot] = Some(review.pair_index);
        set.chosen[slot] = Some(ri);
        for (si, words) in review.sentences.iter().enumerate().take(k) {
            if words.is_empty() {
                // tokenizer never emits empty sentences, but stay defensive
                continue;
            }
            set.sent_mask[slot][si] = true;
            for (wi, &w) in words.iter().enumerate().take(l) {
                set.words[slot][si][wi] = w;
                set.word_mask[slot][si][wi] = true;
            }
        }
        // A review whose text encodes to zero sentences stays a real review
        // slot only if it has sentences; otherwise it is demoted to padding.
        if !set.sent_mask[slot].iter().any(|&s| s) {
            set.review_mask[slot] = false;
            set.source_pairs[slot] = None;
            set.chosen[slot] = None;
        }
    }
    compact_prefix(&mut set);
    set
}

/// Re-pack real reviews to the front so review masks stay prefix-true even
/// when an empty-text review was demoted to padding mid-list.
fn compact_prefix(set: &mut DocumentSet) {
    let order: Vec<usize> = (0..set.slots())
        .filter(|&i| set.review_mask[i])
        .chain((0..set.slots()).filter(|&i| !set.review_mask[i]))
        .collect();
    let reorder_needed = order.iter().enumerate().any(|(a, &b)| a != b);
    if !reorder_needed {
        return;
    }
    set.words = order.iter().map(|&i| set.words[i].clone()).collect();
    set.word_mask = order.iter().map(|&i| set.word_mask[i].clone()).collect();
    set.sent_mask = order.iter().map(|&i| set.sent_mask[i].clone()).collect();
    set.review_mask = order.iter().map(|&i| set.review_mask[i]).collect();
    set.source_pairs = order.iter().map(|&i| set.source_pairs[i]).collect();
    set.chosen = order.iter().map(|&i| set.chosen[i]).collect();
}
