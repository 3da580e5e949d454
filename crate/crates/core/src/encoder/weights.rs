use rand::Rng;

use super::config::{EncoderConfig, NormKind, WeightProfile};
use crate::error::{Result, TctError};
use crate::numerics::Matrix;
use crate::rng::{self, Domain};

/// How pixel patches become token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchEmbedding {
    /// `patch · projection + bias`, projection is `C·P² × D`.
    Linear { projection: Matrix, bias: Vec<f64> },
    /// `[√(1−b²) · normalize(patch − center), b]`, zero-padded or truncated to `D`.
    /// With `center = 0` and `b = 0` this is the plain L2-normalized patch.
    NormalizedPixels { center: f64, bias_channel: f64 },
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1_gain: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    /// `D × 3D`: the Q, K and V blocks side by side.
    pub qkv: Matrix,
    pub qkv_bias: Vec<f64>,
    pub out: Matrix,
    pub out_bias: Vec<f64>,
    pub norm2_gain: Vec<f64>,
    pub norm2_bias: Vec<f64>,
    pub mlp_in: Matrix,
    pub mlp_in_bias: Vec<f64>,
    pub mlp_out: Matrix,
    pub mlp_out_bias: Vec<f64>,
}

/// Learned position table for a fixed patch grid, row 0 for the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub grid: (usize, usize),
    pub table: Matrix,
}

/// Everything needed to assemble [`EncoderWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParts {
    pub config: EncoderConfig,
    pub embedding: PatchEmbedding,
    pub class_token: Vec<f64>,
    pub position: Option<PositionTable>,
    pub layers: Vec<LayerWeights>,
}

/// Validated, immutable encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    parts: EncoderParts,
}

/// Settings for the pixel-similarity profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSimilarityParams {
    pub channels: usize,
    pub patch_size: usize,
    pub layers: usize,
    /// Defaults to the natural embedding width `C·P²` (+1 with a bias channel).
    pub hidden_dim: Option<usize>,
    pub key_gain: f64,
    pub value_gain: f64,
    pub center: f64,
    pub bias_channel: f64,
}

impl Default for PixelSimilarityParams {
    fn default() -> Self {
        PixelSimilarityParams {
            channels: 3,
            patch_size: 8,
            layers: 12,
            hidden_dim: None,
            key_gain: 1000.0,
            value_gain: 0.1,
            center: 0.5,
            bias_channel: 0.5,
        }
    }
}

impl PixelSimilarityParams {
    /// Plain normalized pixels and stacked identities, with no centering or bias channel.
    pub fn plain(channels: usize, patch_size: usize, layers: usize) -> Self {
        PixelSimilarityParams {
            channels,
            patch_size,
            layers,
            hidden_dim: None,
            key_gain: 1.0,
            value_gain: 1.0,
            center: 0.0,
            bias_channel: 0.0,
        }
    }

    pub fn natural_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size + usize::from(self.bias_channel != 0.0)
    }
}

fn check_len(what: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(TctError::shape(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TctError::input(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_shape(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(TctError::shape(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

impl EncoderWeights {
    pub fn new(parts: EncoderParts) -> Result<Self> {
        let c = &parts.config;
        c.validate()?;
        let d = c.hidden_dim;
        match &parts.embedding {
            PatchEmbedding::Linear { projection, bias } => {
                check_shape("patch projection", projection, c.patch_len(), d)?;
                check_len("patch bias", bias, d)?;
            }
            PatchEmbedding::NormalizedPixels {
                center,
                bias_channel,
            } => {
                if !center.is_finite() || !(0.0..1.0).contains(bias_channel) {
                    return Err(TctError::input(format!(
                        "normalized-pixel embedding needs a finite center and bias channel in [0, 1), got {center} and {bias_channel}"
                    )));
                }
            }
        }
        check_len("class token", &parts.class_token, d)?;
        if let Some(pos) = &parts.position {
            let (gh, gw) = pos.grid;
            if gh == 0 || gw == 0 {
                return Err(TctError::shape("position grid has a zero dimension"));
            }
            check_shape("position table", &pos.table, gh * gw + 1, d)?;
        }
        if parts.layers.len() != c.layers {
            return Err(TctError::shape(format!(
                "{} layer weight sets for {} layers",
                parts.layers.len(),
                c.layers
            )));
        }
        let m = c.mlp_dim;
        for (i, l) in parts.layers.iter().enumerate() {
            let name = |s: &str| format!("layer {} {s}", i + 1);
            check_len(&name("norm1 gain"), &l.norm1_gain, d)?;
            check_len(&name("norm1 bias"), &l.norm1_bias, d)?;
            check_shape(&name("qkv"), &l.qkv, d, 3 * d)?;
            check_len(&name("qkv bias"), &l.qkv_bias, 3 * d)?;
            check_shape(&name("output projection"), &l.out, d, d)?;
            check_len(&name("output bias"), &l.out_bias, d)?;
            check_len(&name("norm2 gain"), &l.norm2_gain, d)?;
            check_len(&name("norm2 bias"), &l.norm2_bias, d)?;
            check_shape(&name("mlp in"), &l.mlp_in, d, m)?;
            check_len(&name("mlp in bias"), &l.mlp_in_bias, m)?;
            check_shape(&name("mlp out"), &l.mlp_out, m, d)?;
            check_len(&name("mlp out bias"), &l.mlp_out_bias, d)?;
        }
        Ok(EncoderWeights { parts })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.parts.config
    }

    pub fn embedding(&self) -> &PatchEmbedding {
        &self.parts.embedding
    }

    pub fn class_token(&self) -> &[f64] {
        &self.parts.class_token
    }

    pub fn position(&self) -> Option<&PositionTable> {
        self.parts.position.as_ref()
    }

    pub fn layer(&self, index: usize) -> &LayerWeights {
        &self.parts.layers[index]
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.parts.layers
    }

    pub fn parts(&self) -> &EncoderParts {
        &self.parts
    }

    pub fn into_parts(self) -> EncoderParts {
        self.parts
    }

    /// Deterministic pseudo-random weights. Matrices are uniform with variance
    /// `1/fan_in`, norms start at unit gain and zero bias, biases are small.
    /// A position table is drawn when `position_grid` is given.
    pub fn seeded_random(
        config: &EncoderConfig,
        seed: u64,
        position_grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut config = config.clone();
        config.profile = WeightProfile::SeededRandom;
        config.validate()?;
        let mut rng = rng::stream(seed, Domain::Weights, 0);
        let d = config.hidden_dim;
        let m = config.mlp_dim;
        let mut matrix = |rows: usize, cols: usize| -> Matrix {
            let a = (3.0 / rows.max(1) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite draws")
        };
        let projection = matrix(config.patch_len(), d);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let qkv = matrix(d, 3 * d);
            let out = matrix(d, d);
            let mlp_in = matrix(d, m);
            let mlp_out = matrix(m, d);
            layers.push((qkv, out, mlp_in, mlp_out));
        }
        let mut small = |n: usize, a: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-a..a)).collect() };
        let bias = small(d, 0.02);
        let class_token = small(d, 0.5);
        let position = position_grid.map(|(gh, gw)| PositionTable {
            grid: (gh, gw),
            table: Matrix::from_vec(gh * gw + 1, d, small((gh * gw + 1) * d, 0.5))
                .expect("finite draws"),
        });
        let layers = layers
            .into_iter()
            .map(|(qkv, out, mlp_in, mlp_out)| LayerWeights {
                norm1_gain: vec![1.0; d],
                norm1_bias: vec![0.0; d],
                qkv,
                qkv_bias: small(3 * d, 0.02),
                out,
                out_bias: small(d, 0.02),
                norm2_gain: vec![1.0; d],
                norm2_bias: vec![0.0; d],
                mlp_in,
                mlp_in_bias: small(m, 0.02),
                mlp_out,
                mlp_out_bias: small(d, 0.02),
            })
            .collect();
        EncoderWeights::new(EncoderParts {
            config,
            embedding: PatchEmbedding::Linear { projection, bias },
            class_token,
            position,
            layers,
        })
    }

    /// Hand-set weights under which query dot products are patch cosine
    /// similarities: `U_QKV = [I, key_gain·I, I]`, output projection
    /// `value_gain·I`, identity norms, no MLP, one head, no position table.
    pub fn pixel_similarity(params: &PixelSimilarityParams) -> Result<Self> {
        let d = params.hidden_dim.unwrap_or_else(|| params.natural_dim());
        if !(params.key_gain > 0.0 && params.key_gain.is_finite()) || !params.value_gain.is_finite() {
            return Err(TctError::input(format!(
                "pixel-similarity gains must be finite with key_gain > 0, got {} and {}",
                params.key_gain, params.value_gain
            )));
        }
        let config = EncoderConfig {
            channels: params.channels,
            patch_size: params.patch_size,
            hidden_dim: d,
            heads: 1,
            layers: params.layers,
            mlp_dim: 0,
            use_position_embeddings: false,
            profile: WeightProfile::PixelSimilarity,
            norm: NormKind::Identity,
        };
        config.validate()?;
        let mut qkv = Matrix::zeros(d, 3 * d);
        for i in 0..d {
            qkv.set(i, i, 1.0);
            qkv.set(i, d + i, params.key_gain);
            qkv.set(i, 2 * d + i, 1.0);
        }
        let out = Matrix::identity(d).scale(params.value_gain);
        let layer = LayerWeights {
            norm1_gain: vec![1.0; d],
            norm1_bias: vec![0.0; d],
            qkv,
            qkv_bias: vec![0.0; 3 * d],
            out,
            out_bias: vec![0.0; d],
            norm2_gain: vec![1.0; d],
            norm2_bias: vec![0.0; d],
            mlp_in: Matrix::zeros(d, 0),
            mlp_in_bias: Vec::new(),
            mlp_out: Matrix::zeros(0, d),
            mlp_out_bias: vec![0.0; d],
        };
        let mut class_token = vec![0.0; d];
        let bias_index = config.patch_len();
        if params.bias_channel != 0.0 && bias_index < d {
            class_token[bias_index] = 1.0;
        }
        EncoderWeights::new(EncoderParts {
            config,
            embedding: PatchEmbedding::NormalizedPixels {
                center: params.center,
                bias_channel: params.bias_channel,
            },
            class_token,
            position: None,
            layers: vec![layer; params.layers],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            patch_size: 2,
            hidden_dim: 8,
            heads: 2,
            layers: 3,
            mlp_dim: 12,
            use_position_embeddings: true,
            profile: WeightProfile::SeededRandom,
            norm: NormKind::LayerNorm { eps: 1e-6 },
        }
    }

    #[test]
    fn seeded_random_is_reproducible() {
        let a = EncoderWeights::seeded_random(&small_config(), 5, Some((2, 2))).unwrap();
        let b = EncoderWeights::seeded_random(&small_config(), 5, Some((2, 2))).unwrap();
        let c = EncoderWeights::seeded_random(&small_config(), 6, Some((2, 2))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.position().unwrap().table.shape(), (5, 8));
    }

    #[test]
    fn pixel_similarity_shapes() {
        let w = EncoderWeights::pixel_similarity(&PixelSimilarityParams::default()).unwrap();
        assert_eq!(w.config().hidden_dim, 193);
        assert_eq!(w.class_token()[192], 1.0);
        let plain = EncoderWeights::pixel_similarity(&PixelSimilarityParams::plain(1, 2, 2)).unwrap();
        assert_eq!(plain.config().hidden_dim, 4);
        assert!(plain.class_token().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_parts_are_rejected() {
        let mut parts = EncoderWeights::seeded_random(&small_config(), 1, None)
            .unwrap()
            .into_parts();
        parts.layers[1].out_bias.pop();
        assert!(EncoderWeights::new(parts.clone()).is_err());
        parts.layers.pop();
        assert!(EncoderWeights::new(parts).is_err());
    }
}
