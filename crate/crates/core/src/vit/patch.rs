use crate::tensor::Tensor;

use super::{ModelError, ViTConfig};

/// Flat source index in a `[C,S,S]` image for every entry of the `[N, C·P²]`
/// patch matrix. Patches are in raster order; within a patch the layout is
/// channel, then row, then column.
pub fn patch_gather_index(cfg: &ViTConfig) -> Vec<usize> {
    let (s, p, g, c) = (cfg.image_side, cfg.patch_side, cfg.grid_side(), cfg.channels);
    let mut index = Vec::with_capacity(c * s * s);
    for gr in 0..g {
        for gc in 0..g {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        index.push(ch * s * s + (gr * p + py) * s + gc * p + px);
                    }
                }
            }
        }
    }
    index
}

fn check_image(image: &Tensor, cfg: &ViTConfig) -> Result<(), ModelError> {
    let expected = cfg.image_shape();
    if image.shape() != expected.as_slice() {
        return Err(ModelError::InputShape {
            expected,
            got: image.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor, ModelError> {
    check_image(image, cfg)?;
    let src = image.data();
    let data = patch_gather_index(cfg).into_iter().map(|i| src[i]).collect();
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)?)
}

pub fn unpatchify(patches: &Tensor, cfg: &ViTConfig) -> Result<Tensor, ModelError> {
    let expected = vec![cfg.num_patches(), cfg.patch_dim()];
    if patches.shape() != expected.as_slice() {
        return Err(ModelError::InputShape {
            expected,
            got: patches.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&cfg.image_shape());
    let dst = out.data_mut();
    for (&i, &v) in patch_gather_index(cfg).iter().zip(patches.data()) {
        dst[i] = v;
    }
    Ok(out)
}

/// Pixel centers of the patches and their pairwise Euclidean distances.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    centers: Vec<(f64, f64)>,
    distances: Vec<f64>,
}

impl PatchGrid {
    pub fn new(cfg: &ViTConfig) -> Self {
        let (g, p) = (cfg.grid_side(), cfg.patch_side as f64);
        let centers: Vec<(f64, f64)> = (0..g * g)
            .map(|i| (((i % g) as f64 + 0.5) * p, ((i / g) as f64 + 0.5) * p))
            .collect();
        let n = centers.len();
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
                distances[i * n + j] = dx.hypot(dy);
            }
        }
        PatchGrid { centers, distances }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `(x, y)` pixel coordinates of patch `i`.
    pub fn center(&self, i: usize) -> (f64, f64) {
        self.centers[i]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.len() + j]
    }

    /// Row-major `N×N` distance matrix.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }
}
