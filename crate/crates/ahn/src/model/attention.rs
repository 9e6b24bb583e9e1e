//! Attention mechanisms: gated scoring for the item side and item-guided
//! co-attention for the user side.

use crate::tensor::{Real, Tape, TensorRef};

use super::{Bound, Result};

/// Parameters of one gated attention scorer. `w_gate` is absent in the
/// gating-free variant, which reduces the score to `v' tanh(W x)`.
#[derive(Clone, Copy)]
pub struct AttnHandles {
    pub w: TensorRef,
    pub w_gate: Option<TensorRef>,
    pub v: TensorRef,
}

impl AttnHandles {
    pub fn bind(bound: &Bound, prefix: &str) -> AttnHandles {
        AttnHandles {
            w: bound.get(&format!("{prefix}.w")),
            w_gate: bound.try_get(&format!("{prefix}.w_gate")),
            v: bound.get(&format!("{prefix}.v")),
        }
    }
}

/// Attention weights over the columns of `xs`.
///
/// Per column x: score = v' (tanh(W x) ⊗ sigmoid(Wg x)), then a masked
/// softmax over the scores. No bias terms anywhere.
pub fn gated_attention<T: Real>(
    tape: &mut Tape<T>,
    attn: AttnHandles,
    xs: TensorRef,
    mask: &[bool],
) -> Result<TensorRef> {
    let pre = tape.matmul(attn.w, xs)?;
    let act = tape.tanh(pre);
    let scored = match attn.w_gate {
        Some(wg) => {
            let gate_pre = tape.matmul(wg, xs)?;
            let gate = tape.sigmoid(gate_pre);
            tape.mul(act, gate)?
        }
        None => act,
    };
    let scores = tape.vecmat(attn.v, scored)?;
    Ok(tape.softmax_masked(scores, mask)?)
}

/// Uniform weights over the unmasked entries, as a constant tensor.
pub fn uniform_weights<T: Real>(tape: &mut Tape<T>, mask: &[bool]) -> Result<TensorRef> {
    let zeros = tape.zeros(vec![mask.len()]);
    Ok(tape.softmax_masked(zeros, mask)?)
}

/// One-sided co-attention: weights for the columns of `own` (the user side),
/// guided by the columns of `other` (the target item side).
///
/// An affinity matrix G = relu(f(own)' M f(other)) scores every own/other
/// column pair. Each row of G is rescaled elementwise by the other side's
/// attention weights, so uninformative columns of `other` cannot attract
/// attention; the per-row masked maximum then feeds a masked softmax over
/// `own`'s columns. `f_map`, when present, is a one-layer tanh MLP;
/// otherwise the affinity map is bilinear.
pub struct CoattentionInputs<'a> {
    pub m: TensorRef,
    pub f_map: Option<TensorRef>,
    pub own: TensorRef,
    pub other: TensorRef,
    pub other_weights: TensorRef,
    pub own_mask: &'a [bool],
    pub other_mask: &'a [bool],
    /// When false the row rescaling is skipped (ablation (c)).
    pub adapt: bool,
}

pub fn coattention_weights<T: Real>(
    tape: &mut Tape<T>,
    inputs: CoattentionInputs<'_>,
) -> Result<TensorRef> {
    let f = |tape: &mut Tape<T>, x: TensorRef| -> Result<TensorRef> {
        match inputs.f_map {
            Some(fw) => {
                let pre = tape.matmul(fw, x)?;
                Ok(tape.tanh(pre))
            }
            None => Ok(x),
        }
    };
    let own_mapped = f(tape, inputs.own)?;
    let other_mapped = f(tape, inputs.other)?;
    let m_other = tape.matmul(inputs.m, other_mapped)?;
    let affinity_pre = tape.matmul_tn(own_mapped, m_other)?;
    let affinity = tape.relu(affinity_pre);
    let adapted = if inputs.adapt {
        tape.rows_mul(affinity, inputs.other_weights)?
    } else {
        affinity
    };
    let row_max = tape.max_cols(adapted, inputs.other_mask)?;
    Ok(tape.softmax_masked(row_max, inputs.own_mask)?)
}

/// Weighted sum of the columns of `vectors`.
pub fn aggregate<T: Real>(
    tape: &mut Tape<T>,
    vectors: TensorRef,
    weights: TensorRef,
) -> Result<TensorRef> {
    Ok(tape.matvec(vectors, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_attn(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, att: usize, dim: usize) -> AttnHandles {
        AttnHandles {
            w: tape.leaf(rand_vec(rng, att * dim), vec![att, dim], false),
            w_gate: Some(tape.leaf(rand_vec(rng, att * dim), vec![att, dim], false)),
            v: tape.leaf(rand_vec(rng, att), vec![att], false),
        }
    }

    #[test]
    fn identical_inputs_get_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let attn = rand_attn(&mut tape, &mut rng, 3, 4);
        let col = rand_vec(&mut rng, 4);
        let mut data = Vec::new();
        for i in 0..4 {
            for _ in 0..3 {
                data.push(col[i]);
            }
        }
        let xs = tape.leaf(data, vec![4, 3], false);
        let w = gated_attention(&mut tape, attn, xs, &[true; 3]).unwrap();
        for &v in tape.data(w) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_column_gets_weight_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let attn = rand_attn(&mut tape, &mut rng, 3, 4);
        let xs = tape.leaf(rand_vec(&mut rng, 4), vec![4, 1], false);
        let w = gated_attention(&mut tape, attn, xs, &[true]).unwrap();
        assert_eq!(tape.data(w), &[1.0]);
    }

    #[test]
    fn gated_attention_matches_direct_formula_oracle() {
        let att = 3;
        let dim = 4;
        let p = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_vec(&mut rng, att * dim);
        let wg = rand_vec(&mut rng, att * dim);
        let v = rand_vec(&mut rng, att);
        let xs = rand_vec(&mut rng, dim * p);

        // direct per-column evaluation of the scoring formula
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut scores = vec![0.0; p];
        for j in 0..p {
            let x: Vec<f64> = (0..dim).map(|i| xs[i * p + j]).collect();
            let mut s = 0.0;
            for a in 0..att {
                let mut wx = 0.0;
                let mut gx = 0.0;
                for i in 0..dim {
                    wx += w[a * dim + i] * x[i];
                    gx += wg[a * dim + i] * x[i];
                }
                s += v[a] * wx.tanh() * sig(gx);
            }
            scores[j] = s;
        }
        let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut tape = Tape::<f64>::new();
        let attn = AttnHandles {
            w: tape.leaf(w, vec![att, dim], false),
            w_gate: Some(tape.leaf(wg, vec![att, dim], false)),
            v: tape.leaf(v, vec![att], false),
        };
        let xs_t = tape.leaf(xs, vec![dim, p], false);
        let got = gated_attention(&mut tape, attn, xs_t, &[true; 3]).unwrap();
        for (a, b) in tape.data(got).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_other_column_reduces_to_scored_softmax() {
        // With q = 1 and weight [1], co-attention is a softmax over
        // relu(f(U)' M f(V)) directly.
        let dim = 3;
        let p = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rand_vec(&mut rng, dim * dim);
        let own = rand_vec(&mut rng, dim * p);
        let other = rand_vec(&mut rng, dim);

        let mut scores = vec![0.0; p];
        for a in 0..p {
            let mut s = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    s += own[i * p + a] * m[i * dim + j] * other[j];
                }
            }
            scores[a] = s.max(0.0);
        }
        let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut tape = Tape::<f64>::new();
        let m_t = tape.leaf(m, vec![dim, dim], false);
        let own_t = tape.leaf(own, vec![dim, p], false);
        let other_t = tape.leaf(other, vec![dim, 1], false);
        let w_t = tape.leaf(vec![1.0], vec![1], false);
        let got = coattention_weights(
            &mut tape,
            CoattentionInputs {
                m: m_t,
                f_map: None,
                own: own_t,
                other: other_t,
                other_weights: w_t,
                own_mask: &[true; 2],
                other_mask: &[true],
                adapt: true,
            },
        )
        .unwrap();
        for (a, b) in tape.data(got).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coattention_matches_direct_oracle() {
        // p = 2 user columns, q = 3 item columns, identity map, relu.
        let dim = 3;
        let (p, q) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = rand_vec(&mut rng, dim * dim);
        let own = rand_vec(&mut rng, dim * p);
        let other = rand_vec(&mut rng, dim * q);
        let omega = [0.5, 0.2, 0.3];

        // direct evaluation: G = relu(U' M V), rows scaled by omega, row max,
        // softmax
        let mut g = vec![0.0; p * q];
        for a in 0..p {
            for b in 0..q {
                let mut s = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        s += own[i * p + a] * m[i * dim + j] * other[j * q + b];
                    }
                }
                g[a * q + b] = s.max(0.0) * omega[b];
            }
        }
        let mut row_max = vec![f64::NEG_INFINITY; p];
        for a in 0..p {
            for b in 0..q {
                row_max[a] = row_max[a].max(g[a * q + b]);
            }
        }
        let exps: Vec<f64> = row_max.iter().map(|s| s.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expect: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut tape = Tape::<f64>::new();
        let m_t = tape.leaf(m, vec![dim, dim], false);
        let own_t = tape.leaf(own, vec![dim, p], false);
        let other_t = tape.leaf(other, vec![dim, q], false);
        let w_t = tape.leaf(omega.to_vec(), vec![q], false);
        let got = coattention_weights(
            &mut tape,
            CoattentionInputs {
                m: m_t,
                f_map: None,
                own: own_t,
                other: other_t,
                other_weights: w_t,
                own_mask: &[true; 2],
                other_mask: &[true; 3],
                adapt: true,
            },
        )
        .unwrap();
        for (a, b) in tape.data(got).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn permuting_other_columns_with_weights_leaves_output_unchanged() {
        let dim = 3;
        let (p, q) = (2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_vec(&mut rng, dim * dim);
        let own = rand_vec(&mut rng, dim * p);
        let other = rand_vec(&mut rng, dim * q);
        let omega = [0.4, 0.1, 0.3, 0.2];
        let perm = [2usize, 0, 3, 1];

        let run = |other_cols: &[f64], w: &[f64]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let m_t = tape.leaf(m.clone(), vec![dim, dim], false);
            let own_t = tape.leaf(own.clone(), vec![dim, p], false);
            let other_t = tape.leaf(other_cols.to_vec(), vec![dim, q], false);
            let w_t = tape.leaf(w.to_vec(), vec![q], false);
            let got = coattention_weights(
                &mut tape,
                CoattentionInputs {
                    m: m_t,
                    f_map: None,
                    own: own_t,
                    other: other_t,
                    other_weights: w_t,
                    own_mask: &[true; 2],
                    other_mask: &[true; 4],
                    adapt: true,
                },
            )
            .unwrap();
            tape.data(got).to_vec()
        };
        let base = run(&other, &omega);

        let mut other_p = vec![0.0; dim * q];
        let mut omega_p = vec![0.0; q];
        for (new, &old) in perm.iter().enumerate() {
            for i in 0..dim {
                other_p[i * q + new] = other[i * q + old];
            }
            omega_p[new] = omega[old];
        }
        let permuted = run(&other_p, &omega_p);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coattention_dimension_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let m_t = tape.zeros(vec![4, 4]); // wrong: columns are 3-dim
        let own_t = tape.zeros(vec![3, 2]);
        let other_t = tape.zeros(vec![3, 2]);
        let w_t = tape.zeros(vec![2]);
        let err = coattention_weights(
            &mut tape,
            CoattentionInputs {
                m: m_t,
                f_map: None,
                own: own_t,
                other: other_t,
                other_weights: w_t,
                own_mask: &[true; 2],
                other_mask: &[true; 2],
                adapt: true,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn aggregate_one_hot_returns_that_column() {
        let mut tape = Tape::<f64>::new();
        let cols = tape.leaf(vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0], vec![3, 2], false);
        let w = tape.leaf(vec![0.0, 1.0], vec![2], false);
        let out = aggregate(&mut tape, cols, w).unwrap();
        assert_eq!(tape.data(out), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn aggregate_uniform_gives_midpoint() {
        let mut tape = Tape::<f64>::new();
        let cols = tape.leaf(vec![1.0, 3.0, 0.0, 2.0], vec![2, 2], false);
        let w = tape.leaf(vec![0.5, 0.5], vec![2], false);
        let out = aggregate(&mut tape, cols, w).unwrap();
        assert_eq!(tape.data(out), &[2.0, 1.0]);
    }

    #[test]
    fn aggregate_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let p = 4;
        let cols = rand_vec(&mut rng, d * p);
        let mut w = rand_vec(&mut rng, p);
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let mut expect = vec![0.0; d];
        for i in 0..d {
            for j in 0..p {
                expect[i] += cols[i * p + j] * w[j];
            }
        }
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(cols, vec![d, p], false);
        let wt = tape.leaf(w, vec![p], false);
        let out = aggregate(&mut tape, c, wt).unwrap();
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
