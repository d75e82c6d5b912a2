use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::vit::{InferenceTrace, PatchGrid};

use super::SignatureError;

/// Attention-weighted mean pixel distance between patch centers for one
/// head. `attn` is `(N+1)×(N+1)` with the class token at index 0; its row
/// and column are dropped and the patch block is renormalized by its sum.
pub fn attention_distance(attn: &Tensor, grid: &PatchGrid) -> Result<f64, SignatureError> {
    let n = grid.len();
    if attn.shape() != [n + 1, n + 1] {
        return Err(SignatureError::AttentionShape {
            got: attn.shape().to_vec(),
            expected: n + 1,
        });
    }
    let a = attn.data();
    let d = grid.distances();
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for i in 0..n {
        let row = &a[(i + 1) * (n + 1) + 1..(i + 2) * (n + 1)];
        for (j, &w) in row.iter().enumerate() {
            weighted += w * d[i * n + j];
            mass += w;
        }
    }
    if mass <= 0.0 {
        return Err(SignatureError::ZeroAttention);
    }
    Ok(weighted / mass)
}

/// Attention distance for every `(block, head)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// `[block][head]`, pixels.
    pub distances: Vec<Vec<f64>>,
}

impl AttentionProfile {
    pub fn from_trace(trace: &InferenceTrace, grid: &PatchGrid) -> Result<Self, SignatureError> {
        let distances = trace
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|a| attention_distance(a, grid))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AttentionProfile { distances })
    }

    /// Elementwise mean; all profiles must share one layout.
    pub fn mean(profiles: &[AttentionProfile]) -> Result<Self, SignatureError> {
        let first = profiles
            .first()
            .ok_or_else(|| SignatureError::ProfileMismatch { got: vec![], expected: vec![] })?;
        let layout = first.layout();
        let mut sum: Vec<Vec<f64>> = layout.iter().map(|&h| vec![0.0; h]).collect();
        for p in profiles {
            if p.layout() != layout {
                return Err(SignatureError::ProfileMismatch {
                    got: p.layout(),
                    expected: layout,
                });
            }
            for (s, row) in sum.iter_mut().zip(&p.distances) {
                for (a, b) in s.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / profiles.len() as f64;
        for row in &mut sum {
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Ok(AttentionProfile { distances: sum })
    }

    /// Heads per block.
    pub fn layout(&self) -> Vec<usize> {
        self.distances.iter().map(Vec::len).collect()
    }

    /// Values in block-major order.
    pub fn flat(&self) -> Vec<f64> {
        self.distances.concat()
    }
}

/// `Σ_{b,h} |reference_bh − profile_bh|`.
pub fn attention_profile_summary(
    profile: &AttentionProfile,
    reference: &AttentionProfile,
) -> Result<f64, SignatureError> {
    if profile.layout() != reference.layout() {
        return Err(SignatureError::ProfileMismatch {
            got: profile.layout(),
            expected: reference.layout(),
        });
    }
    Ok(profile
        .flat()
        .iter()
        .zip(reference.flat())
        .map(|(a, r)| (r - a).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    fn grid_2x2() -> PatchGrid {
        PatchGrid::new(&ViTConfig {
            image_side: 16,
            patch_side: 8,
            ..Default::default()
        })
    }

    fn with_cls(patch_block: &[f64], n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n + 1, n + 1]);
        for i in 0..n {
            for j in 0..n {
                t.data_mut()[(i + 1) * (n + 1) + j + 1] = patch_block[i * n + j];
            }
        }
        // class-token row and column carry mass that must be ignored
        t.data_mut()[0] = 1.0;
        t.data_mut()[n + 1] = 0.3;
        t
    }

    #[test]
    fn identity_attention_is_zero_distance() {
        let g = grid_2x2();
        let eye = Tensor::eye(4);
        assert_eq!(attention_distance(&with_cls(eye.data(), 4), &g).unwrap(), 0.0);
    }

    #[test]
    fn uniform_attention_is_mean_pairwise_distance() {
        let g = grid_2x2();
        // enumerate the 16 ordered pairs directly
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let (xi, yi) = ((i % 2) as f64 * 8.0, (i / 2) as f64 * 8.0);
                let (xj, yj) = ((j % 2) as f64 * 8.0, (j / 2) as f64 * 8.0);
                brute += ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
            }
        }
        brute /= 16.0;
        let ad = attention_distance(&with_cls(&[1.0 / 16.0; 16], 4), &g).unwrap();
        assert!((ad - brute).abs() < 1e-12);
        assert!((ad - (4.0 + 2.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn all_mass_on_farthest_pair() {
        let g = grid_2x2();
        let mut block = [0.0; 16];
        block[3] = 1.0; // patch 0 → patch 3, the diagonal
        let ad = attention_distance(&with_cls(&block, 4), &g).unwrap();
        assert!((ad - g.max_distance()).abs() < 1e-12);
    }

    #[test]
    fn zero_patch_attention_and_bad_shapes_are_rejected() {
        let g = grid_2x2();
        assert_eq!(
            attention_distance(&with_cls(&[0.0; 16], 4), &g),
            Err(SignatureError::ZeroAttention)
        );
        assert!(attention_distance(&Tensor::zeros(&[4, 4]), &g).is_err());
    }

    #[test]
    fn summary_is_sum_of_absolute_differences() {
        let r = AttentionProfile { distances: vec![vec![5.0, 6.0], vec![7.0, 8.0]] };
        assert_eq!(attention_profile_summary(&r, &r).unwrap(), 0.0);
        let mut p = r.clone();
        p.distances[1][0] -= 3.5;
        assert_eq!(attention_profile_summary(&p, &r).unwrap(), 3.5);
        let short = AttentionProfile { distances: vec![vec![5.0, 6.0]] };
        assert!(attention_profile_summary(&short, &r).is_err());
    }

    #[test]
    fn mean_profile_has_zero_summary() {
        let a = AttentionProfile { distances: vec![vec![1.0, 3.0]] };
        let b = AttentionProfile { distances: vec![vec![3.0, 5.0]] };
        let m = AttentionProfile::mean(&[a, b]).unwrap();
        assert_eq!(m.distances, vec![vec![2.0, 4.0]]);
        assert_eq!(attention_profile_summary(&m, &m).unwrap(), 0.0);
    }
}
