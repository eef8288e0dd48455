//! Low-rank parallel adapters on frozen source weights.
//!
//! A source weight is `n × m` (outputs × inputs) or, for convolutions,
//! `n × m × kh × kw`. The adapter is always a pair of channel-mixing factors
//! `down: n × r` and `up: r × m`; on a convolution their product acts as a
//! 1×1 kernel and is fused into the centre tap of the source kernel.
//!
//! The structured-pruning variant shares the source's channel masks with the
//! factors: masked rows of `down` and masked columns of `up` are held at zero,
//! so the fused weight is
//!
//! ```text
//! W_s ⊙ m_row m_colᵀ + (W_down ⊙ m_row 1ᵀ)(W_up ⊙ 1 m_colᵀ)
//! ```

use std::sync::Arc;

use crate::compute::rng::{self, Rng};
use crate::compute::tape::embed_center_data;
use crate::compute::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mask::ChannelMask;

/// Half-width of the uniform range used for `up` at initialisation.
pub const UP_INIT_RANGE: f64 = 1e-4;

fn check_source(source: &Tensor) -> Result<(usize, usize)> {
    let s = source.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        4 if s[2] % 2 == 1 && s[3] % 2 == 1 => Ok((s[0], s[1])),
        _ => Err(Error::InvalidArgument(format!(
            "adapter source must be [n, m] or [n, m, odd, odd], got {s:?}"
        ))),
    }
}

fn init_factors(n: usize, m: usize, rank: usize, up_range: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let max = n.min(m);
    if rank == 0 || rank > max {
        return Err(Error::Rank { rank, max });
    }
    let std = (2.0 / rank as f64).sqrt();
    let down = (0..n * rank).map(|_| rng::normal(rng, std)).collect();
    let up = (0..rank * m)
        .map(|_| rng::uniform(rng, -up_range, up_range))
        .collect();
    Ok((Tensor::new(&[n, rank], down)?, Tensor::new(&[rank, m], up)?))
}

/// `down · up` as an `n × m` matrix.
fn factor_product(down: &Tensor, up: &Tensor) -> Vec<f64> {
    let (n, r, m) = (down.shape()[0], down.shape()[1], up.shape()[1]);
    let mut out = vec![0.0; n * m];
    crate::compute::kernels::gemm(n, r, m, down.data(), false, up.data(), false, 0.0, &mut out);
    out
}

fn taps(source: &Tensor) -> usize {
    source.shape()[2..].iter().product()
}

fn centre_tap(source: &Tensor) -> usize {
    match source.shape() {
        [_, _, kh, kw] => (kh / 2) * kw + kw / 2,
        _ => 0,
    }
}

/// Leaf keys for the trainable factors when recording onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct FactorKeys {
    pub down: usize,
    pub up: usize,
}

/// Unmasked low-rank adapter: `W_t = W_s + W_down·W_up`.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    source: Arc<Tensor>,
    pub down: Tensor,
    pub up: Tensor,
    rank: usize,
}

impl LoraLayer {
    pub fn init(source: Arc<Tensor>, rank: usize, up_range: f64, rng: &mut Rng) -> Result<Self> {
        let (n, m) = check_source(&source)?;
        let (down, up) = init_factors(n, m, rank, up_range, rng)?;
        Ok(Self {
            source,
            down,
            up,
            rank,
        })
    }

    pub fn from_parts(source: Arc<Tensor>, down: Tensor, up: Tensor) -> Result<Self> {
        let (n, m) = check_source(&source)?;
        let rank = down.shape().get(1).copied().unwrap_or(0);
        if down.shape() != [n, rank] || up.shape() != [rank, m] {
            return Err(Error::shape(
                "adapter factors",
                format!("source {:?} with down {:?} and up {:?}", source.shape(), down.shape(), up.shape()),
            ));
        }
        Ok(Self { source, down, up, rank })
    }

    pub fn source(&self) -> &Tensor {
        &self.source
    }

    pub fn shared_source(&self) -> &Arc<Tensor> {
        &self.source
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn effective_weight(&self) -> Tensor {
        let prod = factor_product(&self.down, &self.up);
        let (t, c) = (taps(&self.source), centre_tap(&self.source));
        let mut w = self.source.data().to_vec();
        for (ij, p) in prod.iter().enumerate() {
            w[ij * t + c] += p;
        }
        Tensor::new(self.source.shape(), w).expect("source shape")
    }

    pub fn record(&self, tape: &mut Tape, keys: FactorKeys) -> Result<NodeId> {
        let src = tape.input(self.source.as_ref().clone(), false);
        let down = tape.param(keys.down, &self.down);
        let up = tape.param(keys.up, &self.up);
        let prod = tape.matmul(down, up)?;
        let prod = match self.source.shape() {
            [_, _, kh, kw] => tape.embed_center(prod, *kh, *kw)?,
            _ => prod,
        };
        tape.add(src, prod)
    }
}

/// Structured-pruning low-rank adapter over a frozen source weight.
#[derive(Debug, Clone)]
pub struct SploraLayer {
    source: Arc<Tensor>,
    down: Tensor,
    up: Tensor,
    row_mask: ChannelMask,
    col_mask: ChannelMask,
    rank: usize,
}

/// Initialises an adapter with all-ones masks from a dedicated seed.
pub fn init_splora(source: Tensor, rank: usize, seed: u64) -> Result<SploraLayer> {
    SploraLayer::init(Arc::new(source), rank, UP_INIT_RANGE, &mut rng::stream(seed, "adapter"))
}

impl SploraLayer {
    pub fn init(source: Arc<Tensor>, rank: usize, up_range: f64, rng: &mut Rng) -> Result<Self> {
        let (n, m) = check_source(&source)?;
        let (down, up) = init_factors(n, m, rank, up_range, rng)?;
        Ok(Self {
            source,
            down,
            up,
            row_mask: ChannelMask::full(n),
            col_mask: ChannelMask::full(m),
            rank,
        })
    }

    /// Reassembles a layer from stored parts; masks are applied to the factors.
    pub fn from_parts(
        source: Arc<Tensor>,
        down: Tensor,
        up: Tensor,
        row_mask: ChannelMask,
        col_mask: ChannelMask,
    ) -> Result<Self> {
        let (n, m) = check_source(&source)?;
        let rank = down.shape().get(1).copied().unwrap_or(0);
        if down.shape() != [n, rank] || up.shape() != [rank, m] {
            return Err(Error::shape(
                "adapter factors",
                format!(
                    "source {:?} with down {:?} and up {:?}",
                    source.shape(),
                    down.shape(),
                    up.shape()
                ),
            ));
        }
        let mut layer = Self {
            source,
            down,
            up,
            row_mask: ChannelMask::full(n),
            col_mask: ChannelMask::full(m),
            rank,
        };
        layer.set_masks(row_mask, col_mask)?;
        Ok(layer)
    }

    pub fn rows(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.source.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn source(&self) -> &Tensor {
        &self.source
    }

    pub fn shared_source(&self) -> &Arc<Tensor> {
        &self.source
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn row_mask(&self) -> &ChannelMask {
        &self.row_mask
    }

    pub fn col_mask(&self) -> &ChannelMask {
        &self.col_mask
    }

    /// Mutable access to the two trainable factors, `(down, up)`.
    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.down, &mut self.up)
    }

    /// Re-zeroes masked factor entries (e.g. after an optimiser step moved them).
    pub fn enforce_masks(&mut self) {
        let r = self.rank;
        for (i, row) in self.down.data_mut().chunks_mut(r).enumerate() {
            if !self.row_mask.get(i) {
                row.fill(0.0);
            }
        }
        let m = self.cols();
        for row in self.up.data_mut().chunks_mut(m) {
            for (j, v) in row.iter_mut().enumerate() {
                if !self.col_mask.get(j) {
                    *v = 0.0;
                }
            }
        }
    }

    /// Stores binary masks given as 0/1 values and zeroes the matching factor entries.
    pub fn apply_masks(&mut self, row: &[f64], col: &[f64]) -> Result<()> {
        let row = ChannelMask::from_values(row)?;
        let col = ChannelMask::from_values(col)?;
        self.set_masks(row, col)
    }

    pub fn set_masks(&mut self, row: ChannelMask, col: ChannelMask) -> Result<()> {
        row.expect_len(self.rows())?;
        col.expect_len(self.cols())?;
        self.row_mask = row;
        self.col_mask = col;
        self.enforce_masks();
        Ok(())
    }

    /// Fused target weight, evaluated term by term as written in the module docs.
    pub fn effective_weight(&self) -> Tensor {
        let (n, m, r) = (self.rows(), self.cols(), self.rank);
        let row = self.row_mask.to_values();
        let col = self.col_mask.to_values();
        let mut down = self.down.clone();
        for (i, v) in down.data_mut().iter_mut().enumerate() {
            *v *= row[i / r];
        }
        let mut up = self.up.clone();
        for (i, v) in up.data_mut().iter_mut().enumerate() {
            *v *= col[i % m];
        }
        let prod = factor_product(&down, &up);
        let (t, c) = (taps(&self.source), centre_tap(&self.source));
        let src = self.source.data();
        let mut w = vec![0.0; src.len()];
        for i in 0..n {
            for j in 0..m {
                let mask = row[i] * col[j];
                let base = (i * m + j) * t;
                for k in 0..t {
                    w[base + k] = src[base + k] * mask;
                }
                w[base + c] += prod[i * m + j];
            }
        }
        Tensor::new(self.source.shape(), w).expect("source shape")
    }

    /// Records the fused weight so gradients reach `down` and `up`.
    pub fn record(&self, tape: &mut Tape, keys: FactorKeys) -> Result<NodeId> {
        let (n, m, r) = (self.rows(), self.cols(), self.rank);
        let t = taps(&self.source);
        let row = self.row_mask.to_values();
        let col = self.col_mask.to_values();
        let full_mask: Vec<f64> = (0..n * m * t)
            .map(|idx| {
                let ij = idx / t;
                row[ij / m] * col[ij % m]
            })
            .collect();
        let src = tape.input(self.source.as_ref().clone(), false);
        let mask = tape.input(Tensor::new(self.source.shape(), full_mask)?, false);
        let src = tape.mul(src, mask)?;

        let down = tape.param(keys.down, &self.down);
        let row_mat = (0..n * r).map(|idx| row[idx / r]).collect();
        let row_mat = tape.input(Tensor::new(&[n, r], row_mat)?, false);
        let down = tape.mul(down, row_mat)?;

        let up = tape.param(keys.up, &self.up);
        let col_mat = (0..r * m).map(|idx| col[idx % m]).collect();
        let col_mat = tape.input(Tensor::new(&[r, m], col_mat)?, false);
        let up = tape.mul(up, col_mat)?;

        let prod = tape.matmul(down, up)?;
        let prod = match self.source.shape() {
            [_, _, kh, kw] => tape.embed_center(prod, *kh, *kw)?,
            _ => prod,
        };
        tape.add(src, prod)
    }

    /// Learned parameter count `r·(‖m_row‖₀ + ‖m_col‖₀)`.
    pub fn learned_params(&self) -> usize {
        self.rank * (self.row_mask.count() + self.col_mask.count())
    }

    /// Physically smaller dense layer holding only the surviving channels.
    pub fn compact(&self) -> Result<DenseLayer> {
        DenseLayer::compact(&self.effective_weight(), &self.row_mask, &self.col_mask)
    }
}

/// A plain dense weight with the channel indices it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub kept_rows: Vec<usize>,
    pub kept_cols: Vec<usize>,
}

impl DenseLayer {
    /// Deletes masked rows and columns of a (fused) weight.
    pub fn compact(weight: &Tensor, row: &ChannelMask, col: &ChannelMask) -> Result<Self> {
        let s = weight.shape();
        row.expect_len(s[0])?;
        col.expect_len(s[1])?;
        if row.count() == 0 || col.count() == 0 {
            return Err(Error::DegenerateLayer(format!(
                "{}x{} weight with {} rows and {} columns kept",
                s[0],
                s[1],
                row.count(),
                col.count()
            )));
        }
        let t: usize = s[2..].iter().product();
        let (kept_rows, kept_cols) = (row.kept(), col.kept());
        let mut data = Vec::with_capacity(kept_rows.len() * kept_cols.len() * t);
        for &i in &kept_rows {
            for &j in &kept_cols {
                let base = (i * s[1] + j) * t;
                data.extend_from_slice(&weight.data()[base..base + t]);
            }
        }
        let mut shape = vec![kept_rows.len(), kept_cols.len()];
        shape.extend_from_slice(&s[2..]);
        Ok(Self {
            weight: Tensor::new(&shape, data)?,
            kept_rows,
            kept_cols,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel()
    }
}

/// `W ⊙ m_row m_colᵀ`, elementwise.
pub fn mask_hadamard(w: &Tensor, row: &ChannelMask, col: &ChannelMask) -> Tensor {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let outer: Vec<f64> = (0..n * m).map(|idx| row.value(idx / m) * col.value(idx % m)).collect();
    let data = w.data().iter().zip(&outer).map(|(a, b)| a * b).collect();
    Tensor::new(w.shape(), data).expect("same shape")
}

/// `diag(m_row) · W · diag(m_col)` through two dense matrix products.
pub fn mask_projection(w: &Tensor, row: &ChannelMask, col: &ChannelMask) -> Tensor {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mut dr = vec![0.0; n * n];
    for i in 0..n {
        dr[i * n + i] = row.value(i);
    }
    let mut dc = vec![0.0; m * m];
    for j in 0..m {
        dc[j * m + j] = col.value(j);
    }
    let mut left = vec![0.0; n * m];
    crate::compute::kernels::gemm(n, n, m, &dr, false, w.data(), false, 0.0, &mut left);
    let mut out = vec![0.0; n * m];
    crate::compute::kernels::gemm(n, m, m, &left, false, &dc, false, 0.0, &mut out);
    Tensor::new(&[n, m], out).expect("same shape")
}

/// Centre-tap embedding of an `[n, m]` matrix into an `[n, m, kh, kw]` kernel.
pub fn embed_1x1(w: &Tensor, kh: usize, kw: usize) -> Tensor {
    let s = w.shape();
    Tensor::new(&[s[0], s[1], kh, kw], embed_center_data(w.data(), kh, kw)).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng::normal(&mut r, 1.0)).collect()).unwrap()
    }

    #[test]
    fn init_respects_up_range_and_masks() {
        let layer = init_splora(random(&[12, 9], 1), 4, 7).unwrap();
        assert!(layer.up().data().iter().all(|v| v.abs() <= 1e-4));
        assert_eq!(layer.row_mask().count(), 12);
        assert_eq!(layer.col_mask().count(), 9);
        assert_eq!(layer.down().shape(), &[12, 4]);
        assert_eq!(layer.up().shape(), &[4, 9]);
    }

    #[test]
    fn init_rejects_rank_out_of_range() {
        assert!(matches!(
            init_splora(random(&[4, 6], 1), 0, 1),
            Err(Error::Rank { rank: 0, max: 4 })
        ));
        assert!(matches!(
            init_splora(random(&[4, 6], 1), 5, 1),
            Err(Error::Rank { rank: 5, max: 4 })
        ));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_splora(random(&[8, 8], 1), 3, 42).unwrap();
        let b = init_splora(random(&[8, 8], 1), 3, 42).unwrap();
        let c = init_splora(random(&[8, 8], 1), 3, 43).unwrap();
        assert_eq!(a.down(), b.down());
        assert_eq!(a.up(), b.up());
        assert_ne!(a.up(), c.up());
    }

    #[test]
    fn near_zero_mapping_at_init() {
        let layer = init_splora(random(&[24, 16], 2), 4, 3).unwrap();
        let mut r = rng::stream(9, "x");
        let src = layer.source().clone();
        let eff = layer.effective_weight();
        for _ in 0..100 {
            let x: Vec<f64> = (0..16).map(|_| rng::normal(&mut r, 1.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut diff = 0.0;
            for i in 0..24 {
                let d: f64 = (0..16).map(|j| (eff.at2(i, j) - src.at2(i, j)) * x[j]).sum();
                diff += d * d;
            }
            assert!(diff.sqrt() <= 1e-3 * norm);
        }
    }

    #[test]
    fn effective_weight_hand_example() {
        let src = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let down = Tensor::from_rows(&[&[1.0], &[0.0]]);
        let up = Tensor::from_rows(&[&[0.0, 1.0]]);
        let full = ChannelMask::full(2);
        let mut layer =
            SploraLayer::from_parts(Arc::new(src), down, up, full.clone(), full).unwrap();
        assert_eq!(layer.effective_weight().data(), &[1.0, 1.0, 0.0, 1.0]);
        layer.apply_masks(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(layer.effective_weight().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn apply_masks_zeroes_factors_and_is_idempotent() {
        let mut layer = init_splora(random(&[6, 5], 4), 2, 1).unwrap();
        let row = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let col = [0.0, 1.0, 1.0, 0.0, 1.0];
        layer.apply_masks(&row, &col).unwrap();
        for i in [1, 4] {
            assert!(layer.down().data()[i * 2..i * 2 + 2].iter().all(|v| *v == 0.0));
        }
        for k in 0..2 {
            for j in [0, 3] {
                assert_eq!(layer.up().data()[k * 5 + j], 0.0);
            }
        }
        let once = layer.effective_weight();
        layer.apply_masks(&row, &col).unwrap();
        assert_eq!(layer.effective_weight(), once);
    }

    #[test]
    fn apply_masks_rejects_non_binary_and_wrong_length() {
        let mut layer = init_splora(random(&[3, 3], 4), 1, 1).unwrap();
        assert!(matches!(
            layer.apply_masks(&[1.0, 0.3, 1.0], &[1.0; 3]),
            Err(Error::NonBinaryMask { .. })
        ));
        assert!(matches!(
            layer.apply_masks(&[1.0; 2], &[1.0; 3]),
            Err(Error::MaskLength { .. })
        ));
    }

    #[test]
    fn masked_column_makes_output_independent_of_that_input() {
        let mut layer = init_splora(random(&[5, 4], 5), 2, 2).unwrap();
        layer.apply_masks(&[1.0; 5], &[1.0, 1.0, 0.0, 1.0]).unwrap();
        let w = layer.effective_weight();
        let out = |x: &[f64]| -> Vec<f64> {
            (0..5).map(|i| (0..4).map(|j| w.at2(i, j) * x[j]).sum()).collect()
        };
        let a = out(&[0.3, -1.0, 2.0, 0.5]);
        let b = out(&[0.3, -1.0, -75.0, 0.5]);
        assert_eq!(a, b);
    }

    #[test]
    fn all_ones_masks_leave_output_unchanged() {
        let mut layer = init_splora(random(&[4, 4], 6), 2, 2).unwrap();
        let before = layer.effective_weight();
        layer.apply_masks(&[1.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(layer.effective_weight(), before);
    }

    #[test]
    fn compact_full_masks_equals_effective_weight() {
        let layer = init_splora(random(&[4, 3], 7), 2, 2).unwrap();
        let dense = layer.compact().unwrap();
        assert_eq!(dense.weight, layer.effective_weight());
    }

    #[test]
    fn compact_rejects_empty_mask() {
        let mut layer = init_splora(random(&[2, 2], 7), 1, 2).unwrap();
        layer.apply_masks(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(layer.compact(), Err(Error::DegenerateLayer(_))));
    }

    #[test]
    fn compacted_8x8_matches_masked_outputs() {
        let mut layer = init_splora(random(&[8, 8], 8), 2, 3).unwrap();
        layer
            .apply_masks(
                &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0],
                &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0],
            )
            .unwrap();
        let dense = layer.compact().unwrap();
        assert_eq!(dense.weight.shape(), &[5, 6]);
        assert_eq!(dense.param_count(), 5 * 6);
        let w = layer.effective_weight();
        let mut r = rng::stream(1, "x");
        for _ in 0..20 {
            let x: Vec<f64> = (0..8).map(|_| rng::normal(&mut r, 1.0)).collect();
            for (ci, &i) in dense.kept_rows.iter().enumerate() {
                let full: f64 = (0..8).map(|j| w.at2(i, j) * x[j]).sum();
                let small: f64 = dense
                    .kept_cols
                    .iter()
                    .enumerate()
                    .map(|(cj, &j)| dense.weight.at2(ci, cj) * x[j])
                    .sum();
                assert!((full - small).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adapter_fuses_into_centre_tap() {
        let src = random(&[3, 2, 3, 3], 9);
        let mut layer = init_splora(src.clone(), 2, 4).unwrap();
        layer.apply_masks(&[1.0, 0.0, 1.0], &[1.0, 1.0]).unwrap();
        let w = layer.effective_weight();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..9 {
                    let idx = (i * 2 + j) * 9 + k;
                    let masked = if i == 1 { 0.0 } else { src.data()[idx] };
                    if k == 4 {
                        let p: f64 = (0..2)
                            .map(|q| layer.down().at2(i, q) * layer.up().at2(q, j))
                            .sum();
                        assert!((w.data()[idx] - (masked + p)).abs() < 1e-15);
                    } else {
                        assert_eq!(w.data()[idx], masked);
                    }
                }
            }
        }
    }

    #[test]
    fn recorded_weight_matches_direct_evaluation_and_blocks_masked_grads() {
        let mut layer = init_splora(random(&[5, 4], 10), 2, 5).unwrap();
        layer.apply_masks(&[1.0, 0.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let w = layer.record(&mut tape, FactorKeys { down: 0, up: 1 }).unwrap();
        assert!(tape.value(w).max_abs_diff(&layer.effective_weight()) < 1e-15);
        let weights = tape.input(random(&[5, 4], 11), false);
        let prod = tape.mul(w, weights).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert!(grads[&0][2..4].iter().all(|g| *g == 0.0));
        for k in 0..2 {
            assert_eq!(grads[&1][k * 4 + 2], 0.0);
        }
    }

    #[test]
    fn lora_effective_weight_is_source_plus_product() {
        let src = Arc::new(random(&[4, 3], 12));
        let layer = LoraLayer::init(src.clone(), 2, 1e-2, &mut rng::stream(1, "l")).unwrap();
        let w = layer.effective_weight();
        for i in 0..4 {
            for j in 0..3 {
                let p: f64 = (0..2).map(|k| layer.down.at2(i, k) * layer.up.at2(k, j)).sum();
                assert!((w.at2(i, j) - src.at2(i, j) - p).abs() < 1e-15);
            }
        }
    }
}
