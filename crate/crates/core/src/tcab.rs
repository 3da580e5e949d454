//! Target- and context-aware attention block.
//!
//! Target modulation votes, for each target patch, for the single most similar
//! search patch (top-1 of the target/search query cross-attention). The votes are
//! OR-reduced into a key mask `r` over search patches, and every patch row of the
//! self-attention matrix keeps only the columns selected by `r`. The class token
//! row and column pass through untouched and nothing is renormalized.
//!
//! Context modulation multiplies the residual output of every patch row `i` by
//! `1 + g[i]`; the class row is never scaled and `g = 0` is an exact no-op.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TctError};
use crate::numerics::{keeptop_rows, matmul, matmul_transposed, softmax_rows, Matrix};

/// Per-head target votes and their OR-reduction over target patches.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModulator {
    /// `N_T × N_S` binary matrix, exactly one 1 per row.
    pub votes: Matrix,
    /// `key_mask[j]` is set iff some target patch voted for search patch `j`.
    pub key_mask: Vec<bool>,
}

impl TargetModulator {
    pub fn hot_indices(&self) -> Vec<usize> {
        self.key_mask
            .iter()
            .enumerate()
            .filter_map(|(j, &on)| on.then_some(j))
            .collect()
    }
}

/// `keeptop(softmax(Q_T · Q_Sᵀ / √head_dim))` and its key mask.
///
/// `q_search` must exclude the class token row.
pub fn compute_target_mask(
    q_target: &Matrix,
    q_search: &Matrix,
    head_dim: usize,
) -> Result<TargetModulator> {
    if q_target.cols() != head_dim || q_search.cols() != head_dim {
        return Err(TctError::shape(format!(
            "target queries {:?} and search queries {:?} must both have {head_dim} columns",
            q_target.shape(),
            q_search.shape()
        )));
    }
    if q_target.rows() == 0 || q_search.rows() == 0 {
        return Err(TctError::shape("target mask needs at least one target and one search patch"));
    }
    let scores = matmul_transposed(q_target, q_search)?;
    let votes = keeptop_rows(&softmax_rows(&scores, 1.0 / (head_dim as f64).sqrt()));
    let mut key_mask = vec![false; q_search.rows()];
    for row in votes.iter_rows() {
        for (hit, &v) in key_mask.iter_mut().zip(row) {
            *hit |= v == 1.0;
        }
    }
    Ok(TargetModulator { votes, key_mask })
}

/// Element-wise product of the self-attention matrix with the broadcast key mask.
///
/// `attention` is `(N_S+1) × (N_S+1)` with index 0 the class token. Patch-to-patch
/// entries in masked-out columns become zero; row 0 and column 0 are copied.
pub fn apply_target_mask(attention: &Matrix, key_mask: &[bool]) -> Result<Matrix> {
    let n = attention.rows();
    if attention.cols() != n || key_mask.len() + 1 != n {
        return Err(TctError::shape(format!(
            "key mask of length {} for a {:?} attention matrix",
            key_mask.len(),
            attention.shape()
        )));
    }
    let mut out = attention.clone();
    for i in 1..n {
        let row = out.row_mut(i);
        for (v, &keep) in row[1..].iter_mut().zip(key_mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Per-patch context gain `g`, entries finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModulator {
    gains: Vec<f64>,
}

impl ContextModulator {
    pub fn new(gains: Vec<f64>) -> Result<Self> {
        if let Some(bad) = gains.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(TctError::input(format!(
                "context gains must be finite and non-negative, found {bad}"
            )));
        }
        Ok(ContextModulator { gains })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn is_noop(&self) -> bool {
        self.gains.iter().all(|&g| g == 0.0)
    }

    /// The `N_S × D` modulator obtained by broadcasting `g` across hidden units.
    pub fn broadcast(&self, hidden_dim: usize) -> Matrix {
        let mut m = Matrix::zeros(self.gains.len(), hidden_dim);
        for (i, &g) in self.gains.iter().enumerate() {
            m.row_mut(i).fill(g);
        }
        m
    }
}

/// Attention sublayer output with the context gate:
/// `h' = h + concat_h(A_h · V_h) · W_o + b_o`, then patch rows scaled by `1 + g`.
pub fn gated_residual(
    hidden: &Matrix,
    attention: &[Matrix],
    values: &[Matrix],
    gains: Option<&[f64]>,
    output_projection: &Matrix,
    output_bias: &[f64],
) -> Result<Matrix> {
    if attention.len() != values.len() || attention.is_empty() {
        return Err(TctError::shape(format!(
            "{} attention heads but {} value heads",
            attention.len(),
            values.len()
        )));
    }
    let head_outputs = attention
        .iter()
        .zip(values)
        .map(|(a, v)| matmul(a, v))
        .collect::<Result<Vec<_>>>()?;
    let concat = Matrix::hconcat(&head_outputs)?;
    let projected = matmul(&concat, output_projection)?.add_row_vector(output_bias)?;
    let mut next = hidden.add(&projected)?;
    if let Some(g) = gains {
        if g.len() + 1 != next.rows() {
            return Err(TctError::shape(format!(
                "{} context gains for {} patch rows",
                g.len(),
                next.rows() - 1
            )));
        }
        for (i, &gain) in g.iter().enumerate() {
            let factor = 1.0 + gain;
            for v in next.row_mut(i + 1) {
                *v *= factor;
            }
        }
    }
    Ok(next)
}

/// Mean over heads of the class-token attention row, restricted to patch columns.
pub fn class_attention_map(final_attention: &[Matrix]) -> Result<Vec<f64>> {
    let first = final_attention
        .first()
        .ok_or_else(|| TctError::shape("class attention map needs at least one head"))?;
    let n = first.cols();
    if n < 2 {
        return Err(TctError::shape("attention matrix has no patch columns"));
    }
    let mut map = vec![0.0; n - 1];
    for head in final_attention {
        if head.shape() != first.shape() {
            return Err(TctError::shape("attention heads disagree on shape"));
        }
        for (m, &v) in map.iter_mut().zip(&head.row(0)[1..]) {
            *m += v;
        }
    }
    let heads = final_attention.len() as f64;
    for m in &mut map {
        *m /= heads;
    }
    Ok(map)
}

/// Which encoder layers (1-based) carry target and context modulation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModulationConfig {
    pub target_layers: BTreeSet<usize>,
    pub context_layers: BTreeSet<usize>,
}

impl ModulationConfig {
    /// No modulation anywhere: the plain encoder.
    pub fn none() -> Self {
        ModulationConfig::default()
    }

    /// Target modulation over the upper half `[L/2, L]`, context at `L/4`.
    /// For `L = 12` this is target `[6, 12]` and context `{3}`.
    pub fn default_for(layers: usize) -> Self {
        ModulationConfig {
            target_layers: ((layers / 2).max(1)..=layers).collect(),
            context_layers: [(layers / 4).max(1)].into(),
        }
    }

    pub fn target_only(&self) -> Self {
        ModulationConfig {
            target_layers: self.target_layers.clone(),
            context_layers: BTreeSet::new(),
        }
    }

    pub fn context_only(&self) -> Self {
        ModulationConfig {
            target_layers: BTreeSet::new(),
            context_layers: self.context_layers.clone(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.target_layers.is_empty() && self.context_layers.is_empty()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        for (name, set) in [("target", &self.target_layers), ("context", &self.context_layers)] {
            if let Some(bad) = set.iter().find(|&&l| l == 0 || l > layers) {
                return Err(TctError::input(format!(
                    "{name} layer {bad} outside 1..={layers}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax_first;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn row_stochastic(rng: &mut impl Rng, n: usize) -> Matrix {
        softmax_rows(&random_matrix(rng, n, n), 1.0)
    }

    #[test]
    fn matching_row_wins_the_vote() {
        let q_s = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let q_t = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let m = compute_target_mask(&q_t, &q_s, 3).unwrap();
        assert_eq!(m.key_mask, vec![false, true, false]);
    }

    #[test]
    fn identical_target_rows_vote_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q_s = random_matrix(&mut rng, 6, 4);
        let row = vec![0.3, -0.2, 0.9, 0.1];
        let q_t = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let m = compute_target_mask(&q_t, &q_s, 4).unwrap();
        assert_eq!(m.key_mask.iter().filter(|&&b| b).count(), 1);
        assert_eq!(m.votes.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn key_mask_matches_raw_dot_product_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q_t = random_matrix(&mut rng, 4, 8);
        let q_s = random_matrix(&mut rng, 9, 8);
        let m = compute_target_mask(&q_t, &q_s, 8).unwrap();
        let mut expected = vec![false; 9];
        for t in 0..4 {
            let scores: Vec<f64> = (0..9)
                .map(|s| (0..8).map(|k| q_t.get(t, k) * q_s.get(s, k)).sum())
                .collect();
            expected[argmax_first(&scores).unwrap()] = true;
        }
        assert_eq!(m.key_mask, expected);
    }

    #[test]
    fn target_mask_rejects_wrong_width() {
        let q_t = Matrix::zeros(2, 3);
        let q_s = Matrix::zeros(4, 4);
        assert!(compute_target_mask(&q_t, &q_s, 4).is_err());
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sa = row_stochastic(&mut rng, 5);
        assert_eq!(apply_target_mask(&sa, &[true; 4]).unwrap(), sa);
    }

    #[test]
    fn all_zeros_mask_keeps_class_entries_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sa = row_stochastic(&mut rng, 5);
        let out = apply_target_mask(&sa, &[false; 4]).unwrap();
        assert_eq!(out.row(0), sa.row(0));
        for i in 1..5 {
            assert_eq!(out.get(i, 0), sa.get(i, 0));
            assert!(out.row(i)[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_key_keeps_class_and_that_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let sa = row_stochastic(&mut rng, 6);
        let mut mask = vec![false; 5];
        mask[2] = true;
        let out = apply_target_mask(&sa, &mask).unwrap();
        for i in 1..6 {
            for j in 0..6 {
                let expected = if j == 0 || j == 3 { sa.get(i, j) } else { 0.0 };
                assert_eq!(out.get(i, j), expected);
            }
            let kept = sa.get(i, 0) + sa.get(i, 3);
            assert_eq!(out.row(i).iter().sum::<f64>(), kept);
        }
    }

    #[test]
    fn mask_length_checked() {
        let sa = Matrix::identity(4);
        assert!(apply_target_mask(&sa, &[true; 4]).is_err());
    }

    fn gate_inputs(seed: u64) -> (Matrix, Vec<Matrix>, Vec<Matrix>, Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_matrix(&mut rng, 5, 4);
        let a = vec![row_stochastic(&mut rng, 5), row_stochastic(&mut rng, 5)];
        let v = vec![random_matrix(&mut rng, 5, 2), random_matrix(&mut rng, 5, 2)];
        let w = random_matrix(&mut rng, 4, 4);
        let b = vec![0.1, -0.2, 0.0, 0.3];
        (h, a, v, w, b)
    }

    #[test]
    fn zero_gain_is_plain_residual() {
        let (h, a, v, w, b) = gate_inputs(16);
        let plain = gated_residual(&h, &a, &v, None, &w, &b).unwrap();
        let gated = gated_residual(&h, &a, &v, Some(&[0.0; 4]), &w, &b).unwrap();
        assert_eq!(plain, gated);
        let mut manual = h.clone();
        let o = Matrix::hconcat(&[matmul(&a[0], &v[0]).unwrap(), matmul(&a[1], &v[1]).unwrap()])
            .unwrap();
        let p = matmul(&o, &w).unwrap().add_row_vector(&b).unwrap();
        manual = manual.add(&p).unwrap();
        assert_eq!(plain, manual);
    }

    #[test]
    fn unit_gain_doubles_patch_rows() {
        let (h, a, v, w, b) = gate_inputs(17);
        let plain = gated_residual(&h, &a, &v, None, &w, &b).unwrap();
        let doubled = gated_residual(&h, &a, &v, Some(&[1.0; 4]), &w, &b).unwrap();
        assert_eq!(doubled.row(0), plain.row(0));
        for i in 1..5 {
            for (d, p) in doubled.row(i).iter().zip(plain.row(i)) {
                assert_eq!(*d, 2.0 * p);
            }
        }
    }

    #[test]
    fn single_gain_touches_one_row() {
        let (h, a, v, w, b) = gate_inputs(18);
        let plain = gated_residual(&h, &a, &v, None, &w, &b).unwrap();
        let gated = gated_residual(&h, &a, &v, Some(&[0.0, 0.7, 0.0, 0.0]), &w, &b).unwrap();
        for i in 0..5 {
            if i == 2 {
                assert_ne!(gated.row(i), plain.row(i));
            } else {
                assert_eq!(gated.row(i), plain.row(i));
            }
        }
    }

    #[test]
    fn class_map_examples() {
        let one = Matrix::from_rows(&[vec![0.1, 0.3, 0.6], vec![0.2, 0.2, 0.6], vec![0.5, 0.25, 0.25]])
            .unwrap();
        assert_eq!(class_attention_map(std::slice::from_ref(&one)).unwrap(), vec![0.3, 0.6]);

        let h1 = Matrix::from_rows(&[vec![0.0, 0.2, 0.8], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let h2 = Matrix::from_rows(&[vec![0.0, 0.6, 0.4], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        let map = class_attention_map(&[h1, h2]).unwrap();
        assert!((map[0] - 0.4).abs() < 1e-15 && (map[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn class_map_is_head_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let heads: Vec<Matrix> = (0..4).map(|_| row_stochastic(&mut rng, 7)).collect();
        let map = class_attention_map(&heads).unwrap();
        for (j, &v) in map.iter().enumerate() {
            let mean = heads.iter().map(|h| h.get(0, j + 1)).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-15);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn default_layers_for_twelve() {
        let m = ModulationConfig::default_for(12);
        assert_eq!(m.target_layers, (6..=12).collect());
        assert_eq!(m.context_layers, [3].into());
        assert!(m.validate(12).is_ok());
        assert!(m.validate(5).is_err());
    }

    #[test]
    fn context_modulator_rejects_negative() {
        assert!(ContextModulator::new(vec![0.0, -0.1]).is_err());
        let c = ContextModulator::new(vec![0.0, 0.5]).unwrap();
        assert!(!c.is_noop());
        let m = c.broadcast(3);
        assert_eq!(m.row(1), &[0.5, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn vote_counts(nt in 1usize..6, ns in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q_t = random_matrix(&mut rng, nt, 4);
            let q_s = random_matrix(&mut rng, ns, 4);
            let m = compute_target_mask(&q_t, &q_s, 4).unwrap();
            let hot = m.key_mask.iter().filter(|&&b| b).count();
            prop_assert!(hot >= 1 && hot <= nt.min(ns));
            prop_assert_eq!(m.votes.data().iter().sum::<f64>(), nt as f64);
        }

        #[test]
        fn softmax_does_not_change_votes(nt in 1usize..6, ns in 2usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q_t = random_matrix(&mut rng, nt, 5);
            let q_s = random_matrix(&mut rng, ns, 5);
            let m = compute_target_mask(&q_t, &q_s, 5).unwrap();
            let raw = keeptop_rows(&matmul_transposed(&q_t, &q_s).unwrap().scale(1.0 / 5f64.sqrt()));
            prop_assert_eq!(m.votes, raw);
        }
    }
}
