//! Bidirectional LSTM encoding of sentences and reviews on the tape.
//!
//! Gate layout in the stacked weight matrices is input, forget, candidate,
//! output. Hidden and cell states start at zero. Only the real (unmasked)
//! prefix of a sequence is ever stepped over, so padded positions cannot
//! influence any embedding.

use crate::tensor::{Real, Tape, TensorRef};

use super::{Bound, Result};

#[derive(Clone, Copy)]
pub struct LstmHandles {
    pub w_ih: TensorRef,
    pub w_hh: TensorRef,
    pub bias: TensorRef,
}

#[derive(Clone, Copy)]
pub struct BiLstmHandles {
    pub fwd: LstmHandles,
    pub bwd: LstmHandles,
    pub hidden: usize,
}

impl BiLstmHandles {
    pub fn bind(bound: &Bound, prefix: &str, hidden: usize) -> BiLstmHandles {
        let dir = |d: &str| LstmHandles {
            w_ih: bound.get(&format!("{prefix}.{d}.w_ih")),
            w_hh: bound.get(&format!("{prefix}.{d}.w_hh")),
            bias: bound.get(&format!("{prefix}.{d}.bias")),
        };
        BiLstmHandles {
            fwd: dir("fwd"),
            bwd: dir("bwd"),
            hidden,
        }
    }
}

fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    p: LstmHandles,
    hidden: usize,
    x: TensorRef,
    h_prev: TensorRef,
    c_prev: TensorRef,
) -> Result<(TensorRef, TensorRef)> {
    let wx = tape.matvec(p.w_ih, x)?;
    let uh = tape.matvec(p.w_hh, h_prev)?;
    let lin = tape.add(wx, uh)?;
    let pre = tape.add(lin, p.bias)?;
    let i_pre = tape.slice(pre, 0, hidden)?;
    let f_pre = tape.slice(pre, hidden, hidden)?;
    let g_pre = tape.slice(pre, 2 * hidden, hidden)?;
    let o_pre = tape.slice(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Run one direction over `inputs`; returns a hidden state per input, in
/// input order regardless of direction.
fn lstm_dir<T: Real>(
    tape: &mut Tape<T>,
    p: LstmHandles,
    hidden: usize,
    inputs: &[TensorRef],
    reverse: bool,
) -> Result<Vec<TensorRef>> {
    let mut h = tape.zeros(vec![hidden]);
    let mut c = tape.zeros(vec![hidden]);
    let mut states = Vec::with_capacity(inputs.len());
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for &t in &order {
        let (nh, nc) = lstm_step(tape, p, hidden, inputs[t], h, c)?;
        h = nh;
        c = nc;
        states.push(nh);
    }
    if reverse {
        states.reverse();
    }
    Ok(states)
}

/// Bidirectional pass: per step, forward and backward hidden states
/// concatenated into a `2 * hidden` vector.
pub fn bilstm<T: Real>(
    tape: &mut Tape<T>,
    p: BiLstmHandles,
    inputs: &[TensorRef],
) -> Result<Vec<TensorRef>> {
    let fwd = lstm_dir(tape, p.fwd, p.hidden, inputs, false)?;
    let bwd = lstm_dir(tape, p.bwd, p.hidden, inputs, true)?;
    fwd.into_iter()
        .zip(bwd)
        .map(|(f, b)| Ok(tape.concat(&[f, b])?))
        .collect()
}

/// Encode one review into context-aware sentence embeddings.
///
/// Each real sentence runs through the word BiLSTM and a max-pool over its
/// steps; the pooled sentence vectors then run through the context BiLSTM.
/// The result always has `k` entries: real sentences first, then a shared
/// zero vector per padded slot.
pub fn encode_review<T: Real>(
    tape: &mut Tape<T>,
    embedding: TensorRef,
    word_lstm: BiLstmHandles,
    ctx_lstm: BiLstmHandles,
    words: &[Vec<u32>],
    word_mask: &[Vec<bool>],
    zero_emb: TensorRef,
) -> Result<Vec<TensorRef>> {
    let k = words.len();
    let mut pooled = Vec::new();
    for (sent, mask) in words.iter().zip(word_mask) {
        let real_len = mask.iter().take_while(|&&m| m).count();
        if real_len == 0 {
            break; // prefix-true masks: everything after is padding
        }
        let indices: Vec<usize> = sent[..real_len].iter().map(|&w| w as usize).collect();
        let emb_mat = tape.lookup(embedding, &indices)?;
        let steps: Vec<TensorRef> = (0..real_len)
            .map(|t| tape.col(emb_mat, t))
            .collect::<crate::tensor::Result<_>>()?;
        let hidden_states = bilstm(tape, word_lstm, &steps)?;
        let state_mat = tape.hstack(&hidden_states)?;
        let s = tape.max_cols(state_mat, &vec![true; real_len])?;
        pooled.push(s);
    }
    let mut out = if pooled.is_empty() {
        Vec::new()
    } else {
        bilstm(tape, ctx_lstm, &pooled)?
    };
    while out.len() < k {
        out.push(zero_emb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, Variant};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_lstm(tape: &mut Tape<f64>, hidden: usize, input: usize) -> BiLstmHandles {
        let dir = |tape: &mut Tape<f64>| LstmHandles {
            w_ih: tape.zeros(vec![4 * hidden, input]),
            w_hh: tape.zeros(vec![4 * hidden, hidden]),
            bias: tape.zeros(vec![4 * hidden]),
        };
        BiLstmHandles {
            fwd: dir(tape),
            bwd: dir(tape),
            hidden,
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut tape = Tape::<f64>::new();
        let p = zero_lstm(&mut tape, 1, 3);
        let x = tape.leaf(vec![0.4, -1.0, 2.0], vec![3], false);
        let states = bilstm(&mut tape, p, &[x]).unwrap();
        assert_eq!(tape.data(states[0]), &[0.0, 0.0]);
    }

    /// Plain-f64 single-direction LSTM recurrence, written independently of
    /// the tape ops.
    fn oracle_lstm_dir(
        w_ih: &[f64],
        w_hh: &[f64],
        bias: &[f64],
        hidden: usize,
        inputs: &[Vec<f64>],
        reverse: bool,
    ) -> Vec<Vec<f64>> {
        let input_dim = inputs[0].len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut out = vec![vec![]; inputs.len()];
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for &t in &order {
            let x = &inputs[t];
            let mut pre = vec![0.0; 4 * hidden];
            for r in 0..4 * hidden {
                let mut s = bias[r];
                for q in 0..input_dim {
                    s += w_ih[r * input_dim + q] * x[q];
                }
                for q in 0..hidden {
                    s += w_hh[r * hidden + q] * h[q];
                }
                pre[r] = s;
            }
            let mut nh = vec![0.0; hidden];
            let mut nc = vec![0.0; hidden];
            for j in 0..hidden {
                let i = sig(pre[j]);
                let f = sig(pre[hidden + j]);
                let g = pre[2 * hidden + j].tanh();
                let o = sig(pre[3 * hidden + j]);
                nc[j] = f * c[j] + i * g;
                nh[j] = o * nc[j].tanh();
            }
            h = nh.clone();
            c = nc;
            out[t] = nh;
        }
        out
    }

    #[test]
    fn bilstm_matches_recurrence_oracle() {
        let hidden = 3;
        let input = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rv = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect() };
        let w_ih_f = rv(4 * hidden * input);
        let w_hh_f = rv(4 * hidden * hidden);
        let b_f = rv(4 * hidden);
        let w_ih_b = rv(4 * hidden * input);
        let w_hh_b = rv(4 * hidden * hidden);
        let b_b = rv(4 * hidden);
        let x0 = rv(input);
        let x1 = rv(input);

        let mut tape = Tape::<f64>::new();
        let p = BiLstmHandles {
            fwd: LstmHandles {
                w_ih: tape.leaf(w_ih_f.clone(), vec![4 * hidden, input], false),
                w_hh: tape.leaf(w_hh_f.clone(), vec![4 * hidden, hidden], false),
                bias: tape.leaf(b_f.clone(), vec![4 * hidden], false),
            },
            bwd: LstmHandles {
                w_ih: tape.leaf(w_ih_b.clone(), vec![4 * hidden, input], false),
                w_hh: tape.leaf(w_hh_b.clone(), vec![4 * hidden, hidden], false),
                bias: tape.leaf(b_b.clone(), vec![4 * hidden], false),
            },
            hidden,
        };
        let h0 = tape.leaf(x0.clone(), vec![input], false);
        let h1 = tape.leaf(x1.clone(), vec![input], false);
        let states = bilstm(&mut tape, p, &[h0, h1]).unwrap();

        let fwd = oracle_lstm_dir(&w_ih_f, &w_hh_f, &b_f, hidden, &[x0.clone(), x1.clone()], false);
        let bwd = oracle_lstm_dir(&w_ih_b, &w_hh_b, &b_b, hidden, &[x0, x1], true);
        for t in 0..2 {
            let got = tape.data(states[t]);
            for j in 0..hidden {
                assert!((got[j] - fwd[t][j]).abs() < 1e-12, "fwd state {t},{j}");
                assert!((got[hidden + j] - bwd[t][j]).abs() < 1e-12, "bwd state {t},{j}");
            }
        }
    }

    #[test]
    fn padded_word_positions_never_affect_the_encoding() {
        let cfg = ModelConfig::tiny(12, 2, 2);
        let params = ModelParams::<f64>::init(cfg.clone(), Variant::Full, 5, 3.0).unwrap();

        let run = |padded_word: u32| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let bound = params.bind(&mut tape);
            let emb = bound.get("word_embedding");
            let word_lstm = BiLstmHandles::bind(&bound, "word_lstm", cfg.hidden);
            let ctx_lstm = BiLstmHandles::bind(&bound, "ctx_lstm", cfg.hidden);
            let zero = tape.zeros(vec![cfg.emb_dim()]);
            // one real sentence of 2 words, one padded slot; l = 3
            let words = vec![vec![4, 7, padded_word], vec![padded_word; 3]];
            let mask = vec![vec![true, true, false], vec![false; 3]];
            let sents =
                encode_review(&mut tape, emb, word_lstm, ctx_lstm, &words, &mask, zero).unwrap();
            sents.iter().flat_map(|&s| tape.data_f64(s)).collect()
        };
        assert_eq!(run(0), run(9));
    }

    #[test]
    fn fully_padded_review_encodes_to_zeros() {
        let cfg = ModelConfig::tiny(12, 2, 2);
        let params = ModelParams::<f64>::init(cfg.clone(), Variant::Full, 5, 3.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = params.bind(&mut tape);
        let emb = bound.get("word_embedding");
        let word_lstm = BiLstmHandles::bind(&bound, "word_lstm", cfg.hidden);
        let ctx_lstm = BiLstmHandles::bind(&bound, "ctx_lstm", cfg.hidden);
        let zero = tape.zeros(vec![cfg.emb_dim()]);
        let words = vec![vec![0; 3]; 2];
        let mask = vec![vec![false; 3]; 2];
        let sents = encode_review(&mut tape, emb, word_lstm, ctx_lstm, &words, &mask, zero).unwrap();
        assert_eq!(sents.len(), 2);
        for s in sents {
            assert!(tape.data(s).iter().all(|&v| v == 0.0));
        }
    }
}
