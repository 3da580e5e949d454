use super::config::NormKind;
use super::weights::{EncoderWeights, PatchEmbedding};
use crate::error::{Result, TctError};
use crate::image::ImageTensor;
use crate::numerics::{gelu, layernorm_rows, matmul, matmul_transposed, softmax_rows, Matrix};
use crate::tcab::{
    apply_target_mask, class_attention_map, compute_target_mask, gated_residual,
    ModulationConfig, TargetModulator,
};
use crate::target::TargetFeatures;

/// Splits an image into `P × P` patches in row-major grid order. Each row is
/// the patch flattened channel-major, then by row, then by column.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Matrix> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TctError::shape(format!(
            "image {w}x{h} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = c * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * len);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                let plane = img.plane(ch);
                for py in 0..patch {
                    let start = (gy * patch + py) * w + gx * patch;
                    data.extend_from_slice(&plane[start..start + patch]);
                }
            }
        }
    }
    Matrix::from_vec(gh * gw, len, data)
}

/// Query, key and value slices for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadQkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Unmodulated self-attention, rows sum to 1.
    pub attention: Matrix,
}

/// Block input and attention internals; index 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub hidden: Matrix,
    pub heads: Vec<HeadState>,
}

/// Modulators for one block. `None` means no modulation of that kind.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockModulators<'a> {
    /// Per-head target queries `N_T × D_h`.
    pub target_queries: Option<&'a [Matrix]>,
    /// Per-patch context gain.
    pub context_gains: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub state: LayerState,
    pub target_masks: Option<Vec<TargetModulator>>,
    pub next: Matrix,
}

/// Which modulation is active where, with the inputs it needs.
#[derive(Debug, Clone, Copy)]
pub struct ModulationPlan<'a> {
    pub layers: &'a ModulationConfig,
    pub target: Option<&'a TargetFeatures>,
    pub context_gains: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean over heads of the final layer's class row, patch columns only.
    pub class_map: Vec<f64>,
    pub final_attention: Vec<Matrix>,
    pub hidden: Matrix,
    /// Per layer, the target masks applied there.
    pub target_masks: Vec<Option<Vec<TargetModulator>>>,
    /// Per-layer states, kept only when recording.
    pub states: Vec<LayerState>,
}

impl EncoderWeights {
    /// Whether the search stream adds the position table.
    pub fn search_uses_position(&self) -> bool {
        self.config().use_position_embeddings && self.position().is_some()
    }

    /// Token sequence `(N+1) × D` with the class token first.
    pub fn embed(&self, patches: &Matrix, with_position: bool) -> Result<Matrix> {
        let c = self.config();
        let d = c.hidden_dim;
        if patches.cols() != c.patch_len() {
            return Err(TctError::shape(format!(
                "patches have {} values, encoder expects {}",
                patches.cols(),
                c.patch_len()
            )));
        }
        let n = patches.rows();
        let mut out = Matrix::zeros(n + 1, d);
        out.row_mut(0).copy_from_slice(self.class_token());
        match self.embedding() {
            PatchEmbedding::Linear { projection, bias } => {
                let projected = matmul(patches, projection)?.add_row_vector(bias)?;
                for i in 0..n {
                    out.row_mut(i + 1).copy_from_slice(projected.row(i));
                }
            }
            PatchEmbedding::NormalizedPixels {
                center,
                bias_channel,
            } => {
                let b = *bias_channel;
                let scale = (1.0 - b * b).sqrt();
                let mut raw = Vec::with_capacity(patches.cols() + 1);
                for i in 0..n {
                    raw.clear();
                    raw.extend(patches.row(i).iter().map(|v| v - center));
                    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for v in &mut raw {
                            *v = *v / norm * scale;
                        }
                    }
                    if b != 0.0 {
                        raw.push(b);
                    }
                    let row = out.row_mut(i + 1);
                    let k = row.len().min(raw.len());
                    row[..k].copy_from_slice(&raw[..k]);
                }
            }
        }
        if with_position {
            let pos = self.position().ok_or_else(|| {
                TctError::input("position embeddings requested but the weights carry no table")
            })?;
            if pos.table.rows() != n + 1 {
                return Err(TctError::shape(format!(
                    "position table covers a {}x{} grid ({} tokens) but the image has {n} patches",
                    pos.grid.0,
                    pos.grid.1,
                    pos.table.rows() - 1
                )));
            }
            out = out.add(&pos.table)?;
        }
        Ok(out)
    }

    fn normalize(&self, h: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
        match self.config().norm {
            NormKind::LayerNorm { eps } => layernorm_rows(h, gain, bias, eps),
            NormKind::Identity => Ok(h.clone()),
        }
    }

    /// `x · U_QKV + b` split into per-head Q, K, V. Head `h` reads columns
    /// `h·D_h .. (h+1)·D_h` of each of the three blocks.
    pub fn project_qkv(&self, x: &Matrix, layer: usize) -> Result<Vec<HeadQkv>> {
        let c = self.config();
        if layer >= c.layers {
            return Err(TctError::input(format!(
                "layer index {layer} out of range for {} layers",
                c.layers
            )));
        }
        let w = self.layer(layer);
        let qkv = matmul(x, &w.qkv)?.add_row_vector(&w.qkv_bias)?;
        let (d, dh) = (c.hidden_dim, c.head_dim());
        Ok((0..c.heads)
            .map(|h| HeadQkv {
                q: qkv.column_block(h * dh, dh),
                k: qkv.column_block(d + h * dh, dh),
                v: qkv.column_block(2 * d + h * dh, dh),
            })
            .collect())
    }

    fn attention_heads(&self, x: &Matrix, layer: usize) -> Result<Vec<HeadState>> {
        let scale = 1.0 / (self.config().head_dim() as f64).sqrt();
        self.project_qkv(x, layer)?
            .into_iter()
            .map(|HeadQkv { q, k, v }| {
                let attention = softmax_rows(&matmul_transposed(&q, &k)?, scale);
                Ok(HeadState { q, k, v, attention })
            })
            .collect()
    }

    fn mlp_residual(&self, h: &Matrix, layer: usize) -> Result<Matrix> {
        let w = self.layer(layer);
        let x = self.normalize(h, &w.norm2_gain, &w.norm2_bias)?;
        let inner = matmul(&x, &w.mlp_in)?.add_row_vector(&w.mlp_in_bias)?.map(gelu);
        let out = matmul(&inner, &w.mlp_out)?.add_row_vector(&w.mlp_out_bias)?;
        h.add(&out)
    }

    /// One pre-norm block: norm, modulated attention with the gated residual,
    /// norm, MLP, residual.
    pub fn forward_block(
        &self,
        hidden: &Matrix,
        layer: usize,
        modulators: BlockModulators<'_>,
    ) -> Result<BlockOutput> {
        let c = self.config();
        if hidden.cols() != c.hidden_dim || hidden.rows() < 2 {
            return Err(TctError::shape(format!(
                "block input is {:?}, expected (N+1) x {} with N >= 1",
                hidden.shape(),
                c.hidden_dim
            )));
        }
        if layer >= c.layers {
            return Err(TctError::input(format!(
                "layer index {layer} out of range for {} layers",
                c.layers
            )));
        }
        let w = self.layer(layer);
        let x = self.normalize(hidden, &w.norm1_gain, &w.norm1_bias)?;
        let heads = self.attention_heads(&x, layer)?;
        let n = hidden.rows() - 1;

        let (attention, target_masks) = match modulators.target_queries {
            None => (heads.iter().map(|h| h.attention.clone()).collect::<Vec<_>>(), None),
            Some(targets) => {
                if targets.len() != heads.len() {
                    return Err(TctError::shape(format!(
                        "{} target query heads for {} attention heads",
                        targets.len(),
                        heads.len()
                    )));
                }
                let mut masked = Vec::with_capacity(heads.len());
                let mut masks = Vec::with_capacity(heads.len());
                for (head, q_t) in heads.iter().zip(targets) {
                    let mask =
                        compute_target_mask(q_t, &head.q.row_block(1, n), c.head_dim())?;
                    masked.push(apply_target_mask(&head.attention, &mask.key_mask)?);
                    masks.push(mask);
                }
                (masked, Some(masks))
            }
        };
        let values: Vec<Matrix> = heads.iter().map(|h| h.v.clone()).collect();
        let attended = gated_residual(
            hidden,
            &attention,
            &values,
            modulators.context_gains,
            &w.out,
            &w.out_bias,
        )?;
        let next = self.mlp_residual(&attended, layer)?;
        Ok(BlockOutput {
            state: LayerState {
                hidden: hidden.clone(),
                heads,
            },
            target_masks,
            next,
        })
    }

    /// Full modulated forward pass over an embedded sequence.
    pub fn forward(
        &self,
        embedded: Matrix,
        plan: ModulationPlan<'_>,
        record: bool,
    ) -> Result<ForwardOutput> {
        let c = self.config();
        plan.layers.validate(c.layers)?;
        let mut hidden = embedded;
        let mut target_masks = Vec::with_capacity(c.layers);
        let mut states = Vec::new();
        let mut final_attention = Vec::new();
        for layer in 0..c.layers {
            let number = layer + 1;
            let target_queries = if plan.layers.target_layers.contains(&number) {
                let t = plan.target.ok_or_else(|| {
                    TctError::input("target modulation configured without target features")
                })?;
                Some(t.layer(layer)?)
            } else {
                None
            };
            let context_gains = if plan.layers.context_layers.contains(&number) {
                plan.context_gains
            } else {
                None
            };
            let out = self.forward_block(
                &hidden,
                layer,
                BlockModulators {
                    target_queries,
                    context_gains,
                },
            )?;
            if layer + 1 == c.layers {
                final_attention = out.state.heads.iter().map(|h| h.attention.clone()).collect();
            }
            target_masks.push(out.target_masks);
            if record {
                states.push(out.state);
            }
            hidden = out.next;
        }
        let class_map = class_attention_map(&final_attention)?;
        if class_map.iter().any(|v| !v.is_finite()) {
            return Err(TctError::Invariant(
                "encoder produced a non-finite attention map".into(),
            ));
        }
        Ok(ForwardOutput {
            class_map,
            final_attention,
            hidden,
            target_masks,
            states,
        })
    }

    /// The unmodulated encoder, written without any modulation machinery.
    pub fn forward_plain(&self, embedded: Matrix, record: bool) -> Result<ForwardOutput> {
        let c = self.config();
        if embedded.cols() != c.hidden_dim || embedded.rows() < 2 {
            return Err(TctError::shape(format!(
                "encoder input is {:?}, expected (N+1) x {}",
                embedded.shape(),
                c.hidden_dim
            )));
        }
        let mut hidden = embedded;
        let mut states = Vec::new();
        let mut final_attention = Vec::new();
        for layer in 0..c.layers {
            let w = self.layer(layer);
            let x = self.normalize(&hidden, &w.norm1_gain, &w.norm1_bias)?;
            let heads = self.attention_heads(&x, layer)?;
            let outputs = heads
                .iter()
                .map(|h| matmul(&h.attention, &h.v))
                .collect::<Result<Vec<_>>>()?;
            let projected =
                matmul(&Matrix::hconcat(&outputs)?, &w.out)?.add_row_vector(&w.out_bias)?;
            let attended = hidden.add(&projected)?;
            let next = self.mlp_residual(&attended, layer)?;
            if layer + 1 == c.layers {
                final_attention = heads.iter().map(|h| h.attention.clone()).collect();
            }
            if record {
                states.push(LayerState { hidden, heads });
            }
            hidden = next;
        }
        let mut class_map = vec![0.0; hidden.rows() - 1];
        for sa in &final_attention {
            for (m, v) in class_map.iter_mut().zip(&sa.row(0)[1..]) {
                *m += v;
            }
        }
        let heads = final_attention.len() as f64;
        for m in &mut class_map {
            *m /= heads;
        }
        Ok(ForwardOutput {
            class_map,
            final_attention,
            hidden,
            target_masks: vec![None; c.layers],
            states,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::config::{EncoderConfig, WeightProfile};
    use crate::encoder::weights::PixelSimilarityParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::from_vec(c, h, w, data).unwrap()
    }

    fn config(heads: usize, layers: usize, mlp_dim: usize) -> EncoderConfig {
        EncoderConfig {
            channels: 3,
            patch_size: 2,
            hidden_dim: 8,
            heads,
            layers,
            mlp_dim,
            use_position_embeddings: true,
            profile: WeightProfile::SeededRandom,
            norm: NormKind::LayerNorm { eps: 1e-6 },
        }
    }

    #[test]
    fn patchify_layout() {
        let data: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
        let img = ImageTensor::from_vec(1, 4, 4, data.clone()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), (4, 4));
        let at = |y: usize, x: usize| data[y * 4 + x];
        assert_eq!(p.row(0), &[at(0, 0), at(0, 1), at(1, 0), at(1, 1)]);
        assert_eq!(p.row(1), &[at(0, 2), at(0, 3), at(1, 2), at(1, 3)]);
        assert_eq!(p.row(2), &[at(2, 0), at(2, 1), at(3, 0), at(3, 1)]);

        let single = patchify(&img, 4).unwrap();
        assert_eq!(single.shape(), (1, 16));
        assert_eq!(single.row(0), img.data());
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let (c, p) = (3, 2);
        let img = random_image(1, c, 2 * p, 4 * p);
        let patches = patchify(&img, p).unwrap();
        let gw = img.width() / p;
        let mut rebuilt = ImageTensor::filled(c, img.height(), img.width(), -1.0);
        for (idx, row) in patches.iter_rows().enumerate() {
            let (gy, gx) = (idx / gw, idx % gw);
            let mut k = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        rebuilt.set(ch, gy * p + py, gx * p + px, row[k]);
                        k += 1;
                    }
                }
            }
        }
        assert_eq!(rebuilt, img);
    }

    #[test]
    fn embed_without_position_ignores_table() {
        let w = EncoderWeights::seeded_random(&config(2, 1, 4), 3, Some((2, 2))).unwrap();
        let mut parts = w.clone().into_parts();
        parts.position.as_mut().unwrap().table = parts.position.as_ref().unwrap().table.scale(7.0);
        let w2 = EncoderWeights::new(parts).unwrap();
        let patches = patchify(&random_image(2, 3, 4, 4), 2).unwrap();
        assert_eq!(w.embed(&patches, false).unwrap(), w2.embed(&patches, false).unwrap());
        assert_ne!(w.embed(&patches, true).unwrap(), w2.embed(&patches, true).unwrap());
        assert_eq!(w.embed(&patches, false).unwrap().row(0), w.class_token());
    }

    #[test]
    fn embed_position_table_must_match_grid() {
        let w = EncoderWeights::seeded_random(&config(2, 1, 4), 3, Some((2, 2))).unwrap();
        let patches = patchify(&random_image(2, 3, 4, 6), 2).unwrap();
        assert!(w.embed(&patches, true).is_err());
        assert!(w.embed(&patches, false).is_ok());
    }

    #[test]
    fn identical_patches_embed_identically() {
        let w = EncoderWeights::seeded_random(&config(2, 1, 4), 3, None).unwrap();
        let tile = random_image(4, 3, 2, 2);
        let mut img = random_image(5, 3, 4, 4);
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    img.set(c, y, x, tile.get(c, y, x));
                    img.set(c, y + 2, x + 2, tile.get(c, y, x));
                }
            }
        }
        let e = w.embed(&patchify(&img, 2).unwrap(), false).unwrap();
        assert_eq!(e.row(1), e.row(4));
    }

    #[test]
    fn pixel_similarity_embedding_is_normalized_patch() {
        let w = EncoderWeights::pixel_similarity(&PixelSimilarityParams::plain(3, 2, 1)).unwrap();
        let patches = patchify(&random_image(6, 3, 4, 4), 2).unwrap();
        let e = w.embed(&patches, false).unwrap();
        for i in 0..4 {
            let norm = patches.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, b) in e.row(i + 1).iter().zip(patches.row(i)) {
                assert!((a - b / norm).abs() < 1e-15);
            }
        }

        let padded = EncoderWeights::pixel_similarity(&PixelSimilarityParams {
            hidden_dim: Some(16),
            ..PixelSimilarityParams::plain(3, 2, 1)
        })
        .unwrap();
        let e = padded.embed(&patches, false).unwrap();
        assert!(e.row(1)[12..].iter().all(|&v| v == 0.0));

        let truncated = EncoderWeights::pixel_similarity(&PixelSimilarityParams {
            hidden_dim: Some(5),
            ..PixelSimilarityParams::plain(3, 2, 1)
        })
        .unwrap();
        let norm = patches.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = truncated.embed(&patches, false).unwrap();
        for (a, b) in e.row(1).iter().zip(patches.row(0)) {
            assert!((a - b / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn biased_embedding_has_unit_norm() {
        let w = EncoderWeights::pixel_similarity(&PixelSimilarityParams::default()).unwrap();
        let patches = patchify(&random_image(7, 3, 8, 16), 8).unwrap();
        let e = w.embed(&patches, false).unwrap();
        for row in e.iter_rows() {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert_eq!(row[192], if row == e.row(0) { 1.0 } else { 0.5 });
        }
    }

    #[test]
    fn qkv_head_layout() {
        let cfg = EncoderConfig {
            hidden_dim: 4,
            ..config(2, 1, 0)
        };
        let w = EncoderWeights::seeded_random(&cfg, 9, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let heads = w.project_qkv(&x, 0).unwrap();
        let full = matmul(&x, &w.layer(0).qkv).unwrap().add_row_vector(&w.layer(0).qkv_bias).unwrap();
        assert_eq!(heads[0].q, full.column_block(0, 2));
        assert_eq!(heads[1].q, full.column_block(2, 2));
        assert_eq!(heads[1].k, full.column_block(6, 2));
        let rebuilt = Matrix::hconcat(&[
            heads[0].q.clone(),
            heads[1].q.clone(),
            heads[0].k.clone(),
            heads[1].k.clone(),
            heads[0].v.clone(),
            heads[1].v.clone(),
        ])
        .unwrap();
        assert_eq!(rebuilt, full);
        assert!(w.project_qkv(&x, 1).is_err());
    }

    #[test]
    fn identity_qkv_copies_input() {
        let w = EncoderWeights::pixel_similarity(&PixelSimilarityParams::plain(1, 2, 1)).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 0.0, 2.0]]).unwrap();
        let heads = w.project_qkv(&x, 0).unwrap();
        assert_eq!(heads.len(), 1);
        assert_eq!(heads[0].q, x);
        assert_eq!(heads[0].k, x);
        assert_eq!(heads[0].v, x);
    }

    #[test]
    fn noop_block_equals_plain_block() {
        let w = EncoderWeights::seeded_random(&config(2, 1, 6), 11, None).unwrap();
        let e = w.embed(&patchify(&random_image(12, 3, 4, 6), 2).unwrap(), false).unwrap();
        let block = w.forward_block(&e, 0, BlockModulators::default()).unwrap();
        let plain = w.forward_plain(e.clone(), true).unwrap();
        assert_eq!(block.next, plain.hidden);
        assert_eq!(block.state, plain.states[0]);
        let zero_gain = w
            .forward_block(
                &e,
                0,
                BlockModulators {
                    target_queries: None,
                    context_gains: Some(&[0.0; 6]),
                },
            )
            .unwrap();
        assert_eq!(zero_gain.next, block.next);
    }

    #[test]
    fn zero_mlp_leaves_attention_residual() {
        let w = EncoderWeights::seeded_random(&config(2, 1, 5), 13, None).unwrap();
        let mut parts = w.into_parts();
        let l = &mut parts.layers[0];
        l.mlp_in = Matrix::zeros(8, 5);
        l.mlp_in_bias = vec![0.0; 5];
        l.mlp_out = Matrix::zeros(5, 8);
        l.mlp_out_bias = vec![0.0; 8];
        let w = EncoderWeights::new(parts).unwrap();
        let e = w.embed(&patchify(&random_image(14, 3, 4, 4), 2).unwrap(), false).unwrap();
        let gains = [0.5, 0.0, 1.0, 0.25];
        let out = w
            .forward_block(
                &e,
                0,
                BlockModulators {
                    target_queries: None,
                    context_gains: Some(&gains),
                },
            )
            .unwrap();
        let wl = w.layer(0);
        let attention: Vec<Matrix> = out.state.heads.iter().map(|h| h.attention.clone()).collect();
        let values: Vec<Matrix> = out.state.heads.iter().map(|h| h.v.clone()).collect();
        let expected =
            gated_residual(&e, &attention, &values, Some(&gains), &wl.out, &wl.out_bias).unwrap();
        assert_eq!(out.next, expected);
    }

    #[test]
    fn forward_composes_blocks() {
        let w = EncoderWeights::seeded_random(&config(2, 2, 6), 15, Some((2, 3))).unwrap();
        let e = w.embed(&patchify(&random_image(16, 3, 4, 6), 2).unwrap(), true).unwrap();
        let gains = [0.0, 0.3, 0.0, 0.1, 0.0, 0.9];
        let target_q = vec![
            Matrix::from_rows(&[vec![0.5, -0.1, 0.2, 0.3], vec![0.0, 1.0, 0.0, -1.0]]).unwrap(),
            Matrix::from_rows(&[vec![-0.5, 0.1, 0.7, 0.0], vec![0.2, 0.2, 0.2, 0.2]]).unwrap(),
        ];
        let features = TargetFeatures::new(vec![target_q.clone(), target_q.clone()]).unwrap();
        let layers = ModulationConfig {
            target_layers: [2].into(),
            context_layers: [1].into(),
        };
        let full = w
            .forward(
                e.clone(),
                ModulationPlan {
                    layers: &layers,
                    target: Some(&features),
                    context_gains: Some(&gains),
                },
                true,
            )
            .unwrap();
        let b1 = w
            .forward_block(
                &e,
                0,
                BlockModulators {
                    target_queries: None,
                    context_gains: Some(&gains),
                },
            )
            .unwrap();
        let b2 = w
            .forward_block(
                &b1.next,
                1,
                BlockModulators {
                    target_queries: Some(&target_q),
                    context_gains: None,
                },
            )
            .unwrap();
        assert_eq!(full.hidden, b2.next);
        assert_eq!(full.states, vec![b1.state, b2.state.clone()]);
        assert_eq!(full.target_masks[1], b2.target_masks);
        let heads: Vec<Matrix> = b2.state.heads.iter().map(|h| h.attention.clone()).collect();
        assert_eq!(full.class_map, class_attention_map(&heads).unwrap());
    }

    #[test]
    fn target_layers_require_features() {
        let w = EncoderWeights::seeded_random(&config(2, 2, 6), 15, None).unwrap();
        let e = w.embed(&patchify(&random_image(16, 3, 4, 6), 2).unwrap(), false).unwrap();
        let layers = ModulationConfig {
            target_layers: [2].into(),
            context_layers: Default::default(),
        };
        let plan = ModulationPlan {
            layers: &layers,
            target: None,
            context_gains: None,
        };
        assert!(w.forward(e, plan, false).is_err());
    }

    #[test]
    fn cosine_order_matches_query_dot_products() {
        let w = EncoderWeights::pixel_similarity(&PixelSimilarityParams::plain(3, 2, 1)).unwrap();
        let patches = patchify(&random_image(17, 3, 6, 6), 2).unwrap();
        let e = w.embed(&patches, false).unwrap();
        let q = &w.project_qkv(&e, 0).unwrap()[0].q;
        let cos = |a: &[f64], b: &[f64]| {
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
        };
        for i in 0..9 {
            for j in 0..9 {
                for k in 0..9 {
                    let (ci, ck) = (cos(patches.row(i), patches.row(j)), cos(patches.row(i), patches.row(k)));
                    let (di, dk) = (
                        crate::numerics::dot(q.row(i + 1), q.row(j + 1)),
                        crate::numerics::dot(q.row(i + 1), q.row(k + 1)),
                    );
                    if (ci - ck).abs() > 1e-12 {
                        assert_eq!(ci > ck, di > dk);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn target_stream_is_permutation_equivariant(seed in any::<u64>(), shift in 1usize..6) {
            let w = EncoderWeights::seeded_random(&config(2, 2, 6), seed, None).unwrap();
            let patches = patchify(&random_image(seed ^ 1, 3, 4, 6), 2).unwrap();
            let n = patches.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| patches.row(i).to_vec()).collect();
            let permuted = Matrix::from_rows(&rows).unwrap();
            let a = w.forward_plain(w.embed(&patches, false).unwrap(), true).unwrap();
            let b = w.forward_plain(w.embed(&permuted, false).unwrap(), true).unwrap();
            for (sa, sb) in a.states.iter().zip(&b.states) {
                for (ha, hb) in sa.heads.iter().zip(&sb.heads) {
                    for (r, &src) in perm.iter().enumerate() {
                        for (x, y) in hb.q.row(r + 1).iter().zip(ha.q.row(src + 1)) {
                            prop_assert!((x - y).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}
