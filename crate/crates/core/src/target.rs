//! Target query extraction.

use crate::encoder::{patchify, EncoderWeights};
use crate::error::{Result, TctError};
use crate::image::ImageTensor;
use crate::numerics::Matrix;

/// Per-layer, per-head target queries `N_T × D_h`, class token row dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatures {
    queries: Vec<Vec<Matrix>>,
    n_target: usize,
}

impl TargetFeatures {
    /// `queries[layer][head]`; every matrix must have the same row count.
    pub fn new(queries: Vec<Vec<Matrix>>) -> Result<Self> {
        let n_target = queries
            .first()
            .and_then(|heads| heads.first())
            .map(Matrix::rows)
            .ok_or_else(|| TctError::shape("target features need at least one layer and head"))?;
        let heads = queries[0].len();
        for layer in &queries {
            if layer.len() != heads || layer.iter().any(|q| q.rows() != n_target) {
                return Err(TctError::shape(
                    "target queries disagree on head count or patch count across layers",
                ));
            }
        }
        Ok(TargetFeatures { queries, n_target })
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn layers(&self) -> usize {
        self.queries.len()
    }

    /// Queries of a 0-based layer, one matrix per head.
    pub fn layer(&self, layer: usize) -> Result<&[Matrix]> {
        self.queries.get(layer).map(Vec::as_slice).ok_or_else(|| {
            TctError::shape(format!(
                "no target queries for layer index {layer} ({} layers extracted)",
                self.queries.len()
            ))
        })
    }
}

/// Resizes the target to `resolution × resolution`, runs the unmodulated
/// encoder without position embeddings and keeps every layer's patch queries.
pub fn extract_target_features(
    target: &ImageTensor,
    weights: &EncoderWeights,
    resolution: usize,
) -> Result<TargetFeatures> {
    let c = weights.config();
    let img = target.clone().with_channels(c.channels)?;
    let img = img.resize_bilinear(resolution, resolution)?;
    let patches = patchify(&img, c.patch_size)?;
    let n = patches.rows();
    let out = weights.forward_plain(weights.embed(&patches, false)?, true)?;
    let queries = out
        .states
        .into_iter()
        .map(|state| {
            state
                .heads
                .into_iter()
                .map(|h| h.q.row_block(1, n))
                .collect()
        })
        .collect();
    TargetFeatures::new(queries)
}
