use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_side: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    /// 32×32 RGB, 8-pixel patches (16 patches), 4 blocks of 4 heads.
    fn default() -> Self {
        ViTConfig {
            image_side: 32,
            channels: 3,
            patch_side: 8,
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_hidden: 128,
            num_classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        let positive = [
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch_side", self.patch_side),
            ("depth", self.depth),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.image_side % self.patch_side != 0 {
            return fail(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        Ok(())
    }

    /// Patches along one side.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_side, self.image_side]
    }

    pub fn num_taps(&self) -> usize {
        3 * self.depth
    }
}
