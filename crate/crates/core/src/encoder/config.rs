use serde::{Deserialize, Serialize};

use crate::error::{Result, TctError};

/// Where the encoder weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightProfile {
    SeededRandom,
    PixelSimilarity,
    FileLoaded,
}

impl WeightProfile {
    pub fn name(self) -> &'static str {
        match self {
            WeightProfile::SeededRandom => "seeded-random",
            WeightProfile::PixelSimilarity => "pixel-similarity",
            WeightProfile::FileLoaded => "file-loaded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seeded-random" => Some(WeightProfile::SeededRandom),
            "pixel-similarity" => Some(WeightProfile::PixelSimilarity),
            "file-loaded" => Some(WeightProfile::FileLoaded),
            _ => None,
        }
    }
}

/// Normalization applied before each sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormKind {
    LayerNorm { eps: f64 },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    /// Add the position table to the search stream. The target stream never uses it.
    pub use_position_embeddings: bool,
    pub profile: WeightProfile,
    pub norm: NormKind,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TctError::input(format!("encoder config: {msg}")));
        if self.channels == 0 || self.patch_size == 0 {
            return fail("channels and patch_size must be positive".into());
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden_dim {} is not a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if let NormKind::LayerNorm { eps } = self.norm {
            if !(eps > 0.0 && eps.is_finite()) {
                return fail(format!("layer norm eps must be positive, got {eps}"));
            }
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)` for an image, which must tile exactly.
    pub fn patch_grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(TctError::shape(format!(
                "image {width}x{height} is not divisible into {p}x{p} patches"
            )));
        }
        Ok((height / p, width / p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            patch_size: 4,
            hidden_dim: 8,
            heads: 2,
            layers: 2,
            mlp_dim: 16,
            use_position_embeddings: true,
            profile: WeightProfile::SeededRandom,
            norm: NormKind::LayerNorm { eps: 1e-6 },
        }
    }

    #[test]
    fn validation() {
        assert!(base().validate().is_ok());
        assert_eq!(base().head_dim(), 4);
        assert!(EncoderConfig { heads: 3, ..base() }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..base() }.validate().is_err());
        assert!(EncoderConfig {
            norm: NormKind::LayerNorm { eps: 0.0 },
            ..base()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grid_requires_divisibility() {
        assert_eq!(base().patch_grid(8, 12).unwrap(), (2, 3));
        assert!(base().patch_grid(8, 10).is_err());
    }

    #[test]
    fn profile_names_round_trip() {
        for p in [
            WeightProfile::SeededRandom,
            WeightProfile::PixelSimilarity,
            WeightProfile::FileLoaded,
        ] {
            assert_eq!(WeightProfile::parse(p.name()), Some(p));
        }
    }
}
