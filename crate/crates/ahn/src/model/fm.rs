//! Factorization-machine prediction head.

use crate::tensor::{Real, Tape, TensorRef};

use super::{Bound, Result};

#[derive(Clone, Copy)]
pub struct FmHandles {
    pub bias: TensorRef,
    pub w: TensorRef,
    /// Factor matrix, one row per factor: shape [factors, input_dim].
    pub z: TensorRef,
}

impl FmHandles {
    pub fn bind(bound: &Bound) -> FmHandles {
        FmHandles {
            bias: bound.get("fm.bias"),
            w: bound.get("fm.w"),
            z: bound.get("fm.z"),
        }
    }
}

/// g(x) = b + Σ w_i x_i + Σ_{i<j} ⟨z_i, z_j⟩ x_i x_j, computed with the
/// O(D·factors) rearrangement ½ Σ_f [(Σ_i z_fi x_i)² − Σ_i z_fi² x_i²].
pub fn fm_predict<T: Real>(tape: &mut Tape<T>, fm: FmHandles, x: TensorRef) -> Result<TensorRef> {
    let wx = tape.mul(fm.w, x)?;
    let linear = tape.sum(wx);
    let s = tape.matvec(fm.z, x)?;
    let s_sq = tape.mul(s, s)?;
    let z_sq = tape.mul(fm.z, fm.z)?;
    let x_sq = tape.mul(x, x)?;
    let q = tape.matvec(z_sq, x_sq)?;
    let diff = tape.sub(s_sq, q)?;
    let pair_sum = tape.sum(diff);
    let pairwise = tape.scale(pair_sum, 0.5);
    let partial = tape.add(fm.bias, linear)?;
    Ok(tape.add(partial, pairwise)?)
}

/// Brute-force pairwise definition, for oracle checks.
pub fn fm_pairwise_oracle(bias: f64, w: &[f64], z: &[f64], factors: usize, x: &[f64]) -> f64 {
    let d = x.len();
    let mut out = bias;
    for i in 0..d {
        out += w[i] * x[i];
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let mut dot = 0.0;
            for f in 0..factors {
                dot += z[f * d + i] * z[f * d + j];
            }
            out += dot * x[i] * x[j];
        }
    }
    out
}
