use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};

use super::SignatureError;

/// Linear-kernel Gram matrix `H Hᵀ` of an `m×c` activation matrix, with
/// every sample flattened to one row.
pub fn gram(h: &Tensor) -> Vec<f64> {
    let m = h.shape()[0];
    let c = h.len() / m;
    let mut k = vec![0.0; m * m];
    gemm(m, c, m, h.data(), false, h.data(), true, &mut k, false);
    k
}

/// `(I − 11ᵀ/m) K (I − 11ᵀ/m)` for an `m×m` Gram matrix, via row, column
/// and grand means.
pub fn center_gram(k: &[f64], m: usize) -> Vec<f64> {
    let mf = m as f64;
    let row_mean: Vec<f64> = k.chunks(m).map(|r| r.iter().sum::<f64>() / mf).collect();
    let col_mean: Vec<f64> = (0..m)
        .map(|j| (0..m).map(|i| k[i * m + j]).sum::<f64>() / mf)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / mf;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = k[i * m + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

/// `vec(K′_i)ᵀ vec(K′_j) / (m−1)²` for already-centered Grams.
pub fn hsic(centered_i: &[f64], centered_j: &[f64], m: usize) -> f64 {
    let dot: f64 = centered_i.iter().zip(centered_j).map(|(a, b)| a * b).sum();
    dot / ((m - 1) as f64).powi(2)
}

/// Layer-by-layer CKA similarities for one batch of `m` samples.
///
/// An entry is `None` when either layer has (numerically) zero self-HSIC,
/// i.e. its activations do not vary across the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub layers: usize,
    pub batch_size: usize,
    /// Row-major `layers × layers`.
    pub values: Vec<Option<f64>>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.layers + j]
    }

    pub fn undefined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Dense copy with undefined entries replaced by NaN.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.layers, self.layers],
            self.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        )
        .unwrap()
    }
}

/// CKA between every pair of tapped layers. `latents[i]` is `[m, …]`; all
/// trailing axes are flattened into the feature vector of a sample.
pub fn cka_matrix(latents: &[Tensor]) -> Result<CkaMatrix, SignatureError> {
    let first = latents
        .first()
        .ok_or_else(|| SignatureError::CkaInput("no layers".into()))?;
    let m = first.shape().first().copied().unwrap_or(0);
    if m < 2 {
        return Err(SignatureError::CkaInput(format!("batch size {m} < 2")));
    }
    if let Some(bad) = latents.iter().find(|t| t.shape().first() != Some(&m)) {
        return Err(SignatureError::CkaInput(format!(
            "layer shape {:?} does not share batch size {m}",
            bad.shape()
        )));
    }
    let centered: Vec<Vec<f64>> = latents.iter().map(|h| center_gram(&gram(h), m)).collect();
    let self_hsic: Vec<Option<f64>> = latents
        .iter()
        .zip(&centered)
        .map(|(h, kc)| {
            let s = hsic(kc, kc, m);
            let scale: f64 = gram(h).iter().map(|v| v * v).sum::<f64>() / ((m - 1) as f64).powi(2);
            (s > 1e-20 * scale && s > 0.0).then_some(s)
        })
        .collect();
    let l = latents.len();
    let mut values = vec![None; l * l];
    for i in 0..l {
        for j in i..l {
            if let (Some(si), Some(sj)) = (self_hsic[i], self_hsic[j]) {
                let v = if i == j {
                    1.0
                } else {
                    (hsic(&centered[i], &centered[j], m) / (si * sj).sqrt()).clamp(0.0, 1.0)
                };
                values[i * l + j] = Some(v);
                values[j * l + i] = Some(v);
            }
        }
    }
    Ok(CkaMatrix { layers: l, batch_size: m, values })
}

/// Absolute difference between a reference CKA matrix and the mean matrix
/// over a set of batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaDifference {
    pub layers: usize,
    pub batches: usize,
    /// `|M_ref − M̄|`; `None` where an entry was undefined somewhere.
    pub d: Vec<Option<f64>>,
    pub s_cka: f64,
    /// Entries left out of the sum.
    pub excluded: Vec<(usize, usize)>,
}

impl CkaDifference {
    /// Per-layer contribution: row sums of the defined entries of `D`.
    pub fn layer_sums(&self) -> Vec<f64> {
        self.d
            .chunks(self.layers)
            .map(|r| r.iter().flatten().sum())
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.layers, self.layers],
            self.d.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        )
        .unwrap()
    }
}

/// Entrywise mean of same-sized matrices; an entry undefined in any
/// matrix stays undefined.
pub fn mean_cka(batches: &[CkaMatrix]) -> Result<CkaMatrix, SignatureError> {
    let first = batches
        .first()
        .ok_or_else(|| SignatureError::CkaInput("no batches".into()))?;
    let l = first.layers;
    if let Some(b) = batches.iter().find(|b| b.layers != l) {
        return Err(SignatureError::CkaInput(format!(
            "batch has {} layers, expected {l}",
            b.layers
        )));
    }
    let inv = 1.0 / batches.len() as f64;
    let values = (0..l * l)
        .map(|idx| {
            batches
                .iter()
                .map(|b| b.values[idx])
                .sum::<Option<f64>>()
                .map(|s| s * inv)
        })
        .collect();
    Ok(CkaMatrix { layers: l, batch_size: first.batch_size, values })
}

pub fn cka_difference_summary(
    reference: &CkaMatrix,
    batches: &[CkaMatrix],
) -> Result<CkaDifference, SignatureError> {
    let mean = mean_cka(batches)?;
    let l = reference.layers;
    if mean.layers != l {
        return Err(SignatureError::CkaInput(format!(
            "batches have {} layers, reference {l}",
            mean.layers
        )));
    }
    let mut d = vec![None; l * l];
    let mut excluded = Vec::new();
    let mut s_cka = 0.0;
    for i in 0..l {
        for j in 0..l {
            let idx = i * l + j;
            if let (Some(r), Some(m)) = (reference.values[idx], mean.values[idx]) {
                let diff = (r - m).abs();
                d[idx] = Some(diff);
                s_cka += diff;
            } else {
                excluded.push((i, j));
            }
        }
    }
    Ok(CkaDifference { layers: l, batches: batches.len(), d, s_cka, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Explicit `H K H` with the centering matrix and plain triple loops.
    fn oracle_cka(a: &Tensor, b: &Tensor) -> f64 {
        let m = a.shape()[0];
        let gram = |x: &Tensor| {
            let c = x.len() / m;
            let mut k = vec![vec![0.0; m]; m];
            for i in 0..m {
                for j in 0..m {
                    k[i][j] = (0..c).map(|t| x.data()[i * c + t] * x.data()[j * c + t]).sum();
                }
            }
            k
        };
        let h: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| f64::from(i == j) - 1.0 / m as f64).collect())
            .collect();
        let mul = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            let mut z = vec![vec![0.0; m]; m];
            for i in 0..m {
                for j in 0..m {
                    z[i][j] = (0..m).map(|t| x[i][t] * y[t][j]).sum();
                }
            }
            z
        };
        let center = |k| mul(&mul(&h, &k), &h);
        let (ka, kb) = (center(gram(a)), center(gram(b)));
        let hs = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            x.iter().flatten().zip(y.iter().flatten()).map(|(p, q)| p * q).sum::<f64>()
                / ((m - 1) as f64).powi(2)
        };
        hs(&ka, &kb) / (hs(&ka, &ka) * hs(&kb, &kb)).sqrt()
    }

    fn random(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Tensor {
        Tensor::new(vec![m, c], (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Random orthogonal matrix by Gram–Schmidt.
    fn orthogonal(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < c {
            let mut v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= d * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        Tensor::from_rows(&q).unwrap()
    }

    #[test]
    fn hand_expanded_four_sample_case() {
        let hi = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]]);
        let hj = mat(&[&[1.0], &[0.0], &[1.0], &[0.0]]);
        let m = cka_matrix(&[hi.clone(), hj.clone()]).unwrap();
        let v = m.get(0, 1).unwrap();
        assert!((v - oracle_cka(&hi, &hj)).abs() < 1e-9);
        // HSIC_ij = 1/9, HSIC_ii = 2/9, HSIC_jj = 1/9
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn identical_layers_have_unit_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random(&mut rng, 4, 6);
        let m = cka_matrix(&[h.clone(), h]).unwrap();
        assert!((m.get(0, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_layer_is_undefined_not_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random(&mut rng, 4, 3);
        let flat = Tensor::full(&[4, 3], 0.7);
        let m = cka_matrix(&[h, flat]).unwrap();
        assert_eq!(m.get(0, 0), Some(1.0));
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(1, 1), None);
        assert_eq!(m.undefined_count(), 3);
    }

    #[test]
    fn bad_batches_are_rejected() {
        assert!(cka_matrix(&[]).is_err());
        assert!(cka_matrix(&[Tensor::zeros(&[1, 3])]).is_err());
        assert!(cka_matrix(&[Tensor::zeros(&[4, 3]), Tensor::zeros(&[3, 3])]).is_err());
    }

    #[test]
    fn difference_summary_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers: Vec<Tensor> = (0..3).map(|_| random(&mut rng, 4, 5)).collect();
        let reference = cka_matrix(&layers).unwrap();
        let same = cka_difference_summary(&reference, &[reference.clone(), reference.clone()])
            .unwrap();
        assert_eq!(same.s_cka, 0.0);
        assert!(same.d.iter().all(|v| *v == Some(0.0)));

        let mut shifted = reference.clone();
        let v = shifted.values[1].unwrap();
        shifted.values[1] = Some(v - 0.2);
        let one = cka_difference_summary(&reference, &[shifted.clone()]).unwrap();
        assert!((one.s_cka - 0.2).abs() < 1e-12);
        assert_eq!(one.layer_sums()[0], one.s_cka);

        shifted.values[5] = None;
        let ex = cka_difference_summary(&reference, &[reference.clone(), shifted]).unwrap();
        assert_eq!(ex.excluded, vec![(1, 2)]);
        assert!((ex.s_cka - 0.1).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn invariants_on_random_batches(seed in any::<u64>(), c1 in 1usize..17, c2 in 1usize..17) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 4, c1);
            let b = random(&mut rng, 4, c2);
            let rot = orthogonal(&mut rng, c1);
            let rotated = crate::tensor::matmul(&a, &rot).unwrap();
            let scaled = a.map(|v| v * 3.7);
            let m = cka_matrix(&[a.clone(), b.clone(), rotated, scaled]).unwrap();
            for i in 0..4 {
                prop_assert!((m.get(i, i).unwrap() - 1.0).abs() < 1e-6);
                for j in 0..4 {
                    let v = m.get(i, j).unwrap();
                    prop_assert!((0.0..=1.0 + 1e-9).contains(&v));
                    prop_assert!((v - m.get(j, i).unwrap()).abs() < 1e-9);
                }
            }
            prop_assert!((m.get(0, 2).unwrap() - 1.0).abs() < 1e-6);
            prop_assert!((m.get(0, 3).unwrap() - 1.0).abs() < 1e-6);
            prop_assert!((m.get(0, 1).unwrap() - oracle_cka(&a, &b)).abs() < 1e-9);
        }
    }
}
