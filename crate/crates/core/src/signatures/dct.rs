use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};

use super::SignatureError;

/// Orthonormal DCT-II basis, row-major `n×n`:
/// `C[k][i] = a_k cos(pi (2i+1) k / 2n)`, `a_0 = sqrt(1/n)`, `a_k = sqrt(2/n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            c[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    c
}

fn square_side(t: &Tensor) -> Result<usize, SignatureError> {
    match t.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(SignatureError::NonSquare(s.to_vec())),
    }
}

/// `C X Cᵀ` (forward) or `Cᵀ X C` (inverse) for a square `x`.
fn separable(x: &[f64], n: usize, c: &[f64], inverse: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; n * n];
    let mut out = vec![0.0; n * n];
    gemm(n, n, n, c, inverse, x, false, &mut tmp, false);
    gemm(n, n, n, &tmp, false, c, !inverse, &mut out, false);
    out
}

/// 2-D orthonormal DCT-II of one `S×S` channel.
pub fn dct2(channel: &Tensor) -> Result<Tensor, SignatureError> {
    let n = square_side(channel)?;
    let c = dct_matrix(n);
    Ok(Tensor::new(vec![n, n], separable(channel.data(), n, &c, false)).unwrap())
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &Tensor) -> Result<Tensor, SignatureError> {
    let n = square_side(coeffs)?;
    let c = dct_matrix(n);
    Ok(Tensor::new(vec![n, n], separable(coeffs.data(), n, &c, true)).unwrap())
}

/// Index-sum split between low (`i + j < threshold`) and high
/// (`i + j >= threshold`) DCT frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencySpec {
    pub threshold: usize,
}

impl FrequencySpec {
    /// Threshold at the side length, the midpoint of the index anti-diagonals.
    pub fn for_side(side: usize) -> Self {
        FrequencySpec { threshold: side }
    }

    pub fn validate(&self, side: usize) -> Result<(), SignatureError> {
        let max = 2 * side.saturating_sub(1);
        if self.threshold == 0 || self.threshold > max {
            return Err(SignatureError::BadThreshold { phi: self.threshold, max });
        }
        Ok(())
    }
}

/// Ratio of high- to low-frequency DCT energy, energy being the squared
/// coefficient summed over channels. Accepts `[S,S]` or `[C,S,S]`.
pub fn frequency_ratio(image: &Tensor, spec: FrequencySpec) -> Result<f64, SignatureError> {
    let (channels, side) = match image.shape() {
        [a, b] if a == b => (1, *a),
        [c, a, b] if a == b => (*c, *a),
        s => return Err(SignatureError::NonSquare(s.to_vec())),
    };
    spec.validate(side)?;
    let basis = dct_matrix(side);
    let mut low = 0.0;
    let mut high = 0.0;
    for ch in image.data().chunks(side * side).take(channels) {
        let coeffs = separable(ch, side, &basis, false);
        for i in 0..side {
            for j in 0..side {
                let e = coeffs[i * side + j].powi(2);
                if i + j >= spec.threshold {
                    high += e;
                } else {
                    low += e;
                }
            }
        }
    }
    if low == 0.0 {
        return Err(SignatureError::DegenerateEnergy);
    }
    Ok(high / low)
}
