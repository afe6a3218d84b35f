//! Forecasting backbone: grid geometry, location labels, encoder/decoder
//! parameters, losses, and the Adadelta optimizer.

mod backbone;
mod checkpoint;
mod loss;
mod optim;

pub use backbone::{Backbone, CoarseRollout, DecodeFeedback, LossNodes, ModelParams, ParamNodes};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{cls_loss, offset_targets, reg_loss, total_loss, weight_decay, LAMBDA_CLS_REG, LAMBDA_WEIGHT_DECAY};
pub use optim::Adadelta;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("location ({x}, {y}) outside image bounds {img_w}x{img_h}")]
    OutOfImage {
        x: f64,
        y: f64,
        img_w: f64,
        img_h: f64,
    },
    #[error("observation window has {got} steps, expected {expected}")]
    BadObservation { got: usize, expected: usize },
    #[error("label sequence has {got} steps, expected {expected}")]
    BadLabelLength { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Spatial discretization of the image plane into `rows x cols` cells.
///
/// Cells tile the image exactly; cell index is `row * cols + col` and the
/// center of cell `c` sits at pixel coordinates returned by [`Self::center`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub img_w: f64,
    pub img_h: f64,
}

impl GridSpec {
    pub fn new(cols: usize, rows: usize, img_w: f64, img_h: f64) -> Self {
        assert!(cols > 0 && rows > 0 && img_w > 0.0 && img_h > 0.0);
        GridSpec {
            rows,
            cols,
            img_w,
            img_h,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_w(&self) -> f64 {
        self.img_w / self.cols as f64
    }

    pub fn cell_h(&self) -> f64 {
        self.img_h / self.rows as f64
    }

    /// Pixel-coordinate center of cell `c`.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = (cell / self.cols, cell % self.cols);
        (
            (col as f64 + 0.5) * self.cell_w(),
            (row as f64 + 0.5) * self.cell_h(),
        )
    }

    /// Grid cell containing the pixel; exact-boundary ties go to the smaller
    /// cell index. Errors when the pixel lies outside the image.
    pub fn encode_location(&self, x: f64, y: f64) -> Result<usize, ModelError> {
        let col = axis_cell(x, self.img_w, self.cols);
        let row = axis_cell(y, self.img_h, self.rows);
        match (row, col) {
            (Some(r), Some(c)) => Ok(r * self.cols + c),
            _ => Err(ModelError::OutOfImage {
                x,
                y,
                img_w: self.img_w,
                img_h: self.img_h,
            }),
        }
    }

    /// Column-mirrored cell, used by horizontal flipping.
    pub fn mirror_cell(&self, cell: usize) -> usize {
        let (row, col) = (cell / self.cols, cell % self.cols);
        row * self.cols + (self.cols - 1 - col)
    }
}

fn axis_cell(v: f64, extent: f64, n: usize) -> Option<usize> {
    if !v.is_finite() || v < 0.0 || v > extent {
        return None;
    }
    let cw = extent / n as f64;
    let mut c = (v / cw).floor() as i64;
    if c as f64 * cw == v && c > 0 {
        c -= 1;
    }
    Some(c.clamp(0, n as i64 - 1) as usize)
}

/// A distribution over grid cells for one future timestep. Hard labels are
/// the one-entry special case; mixup produces two-entry labels with weights
/// `{lam, 1 - lam}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    entries: Vec<(usize, f64)>,
}

impl SoftLabel {
    pub fn hard(cell: usize) -> Self {
        SoftLabel {
            entries: vec![(cell, 1.0)],
        }
    }

    /// `lam * one-hot(a) + (1 - lam) * one-hot(b)`; collapses to one entry
    /// when both views share a cell or the weight sits at an endpoint.
    pub fn two_point(a: usize, b: usize, lam: f64) -> Self {
        if a == b || lam >= 1.0 {
            return SoftLabel::hard(a);
        }
        if lam <= 0.0 {
            return SoftLabel::hard(b);
        }
        let mut entries = vec![(a, lam), (b, 1.0 - lam)];
        entries.sort_by_key(|&(c, _)| c);
        SoftLabel { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    /// Cell with the largest weight (smallest index on ties).
    pub fn top_cell(&self) -> usize {
        let mut best = self.entries[0];
        for &(c, w) in &self.entries[1..] {
            if w > best.1 {
                best = (c, w);
            }
        }
        best.0
    }

    pub fn to_dense<T: Scalar>(&self, num_cells: usize) -> Vec<T> {
        let mut v = vec![T::ZERO; num_cells];
        for &(c, w) in &self.entries {
            v[c] += T::from_f64(w);
        }
        v
    }
}

/// Per-step soft labels for the prediction horizon `t in [h+1, T]`.
pub type SoftLabelSeq = Vec<SoftLabel>;

pub fn hard_label_seq(cells: &[usize]) -> SoftLabelSeq {
    cells.iter().map(|&c| SoftLabel::hard(c)).collect()
}

/// Hyperparameters fixing the backbone architecture and window sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid: GridSpec,
    /// Semantic classes per feature cell.
    pub num_classes: usize,
    /// Hidden size of the recurrent units.
    pub d_enc: usize,
    /// Observed steps `h`.
    pub obs_len: usize,
    /// Total trajectory length `T`.
    pub total_len: usize,
}

impl BackboneConfig {
    pub fn pred_len(&self) -> usize {
        self.total_len - self.obs_len
    }

    /// Channels of the decoder context: final hidden state plus the observed
    /// feature frames.
    pub fn context_channels(&self) -> usize {
        self.d_enc + self.obs_len * self.num_classes
    }
}

/// Argmax over a probability row; ties broken by the smallest index.
pub fn argmax_cell<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

/// Final location from coarse distribution and per-cell offsets:
/// center of the argmax cell plus that cell's predicted offset.
pub fn compose_prediction<T: Scalar>(
    probs: &[T],
    offsets: &[(T, T)],
    grid: &GridSpec,
) -> (f64, f64) {
    let g = argmax_cell(probs);
    compose_at_cell(g, offsets[g], grid)
}

pub fn compose_at_cell<T: Scalar>(cell: usize, offset: (T, T), grid: &GridSpec) -> (f64, f64) {
    let (qx, qy) = grid.center(cell);
    (qx + offset.0.to_f64(), qy + offset.1.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(12, 6, 960.0, 480.0)
    }

    #[test]
    fn encode_center_of_first_cell() {
        let g = grid();
        let (qx, qy) = g.center(0);
        assert_eq!(g.encode_location(qx, qy).unwrap(), 0);
    }

    #[test]
    fn paper_scale_grid_has_648_cells() {
        let g = GridSpec::new(36, 18, 1920.0, 1080.0);
        assert_eq!(g.num_cells(), 648);
        assert_eq!(g.encode_location(0.0, 0.0).unwrap(), 0);
        assert_eq!(
            g.encode_location(1920.0, 1080.0).unwrap(),
            g.num_cells() - 1
        );
    }

    #[test]
    fn boundary_tie_goes_to_smaller_index() {
        let g = grid();
        // x = 80 is the shared edge of columns 0 and 1
        assert_eq!(g.encode_location(80.0, 10.0).unwrap(), 0);
        assert_eq!(g.encode_location(80.1, 10.0).unwrap(), 1);
        // image corner maps to the last cell
        assert_eq!(g.encode_location(960.0, 480.0).unwrap(), g.num_cells() - 1);
    }

    #[test]
    fn out_of_image_errors() {
        let g = grid();
        assert!(g.encode_location(-0.1, 5.0).is_err());
        assert!(g.encode_location(5.0, 480.2).is_err());
    }

    #[test]
    fn encode_then_center_within_half_cell_diagonal() {
        let g = grid();
        let half_diag = 0.5 * (g.cell_w().powi(2) + g.cell_h().powi(2)).sqrt();
        let mut rng_state = 123u64;
        for _ in 0..500 {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let fx = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let fy = (rng_state >> 11) as f64 / (1u64 << 53) as f64;
            let (x, y) = (fx * 960.0, fy * 480.0);
            let c = g.encode_location(x, y).unwrap();
            let (qx, qy) = g.center(c);
            let d = ((x - qx).powi(2) + (y - qy).powi(2)).sqrt();
            assert!(d <= half_diag + 1e-9);
        }
    }

    #[test]
    fn mirror_cell_flips_column() {
        let g = grid();
        // cell at row 2, col 3 -> row 2, col 8
        let c = 2 * 12 + 3;
        assert_eq!(g.mirror_cell(c), 2 * 12 + 8);
        assert_eq!(g.mirror_cell(g.mirror_cell(c)), c);
    }

    #[test]
    fn soft_label_mass_and_merge() {
        let two = SoftLabel::two_point(4, 9, 0.3);
        assert_eq!(two.entries().len(), 2);
        assert!((two.mass() - 1.0).abs() < 1e-12);
        let merged = SoftLabel::two_point(5, 5, 0.3);
        assert_eq!(merged.entries(), &[(5, 1.0)]);
    }

    #[test]
    fn compose_prediction_is_center_plus_offset() {
        let g = GridSpec::new(10, 10, 200.0, 400.0);
        // force argmax to a known cell
        let mut probs = vec![0.0f32; 100];
        probs[17] = 1.0;
        let mut offs = vec![(0.0f32, 0.0f32); 100];
        offs[17] = (1.5, -0.5);
        let (qx, qy) = g.center(17);
        let (px, py) = compose_prediction(&probs, &offs, &g);
        assert_eq!((px, py), (qx + 1.5, qy - 0.5));
    }

    #[test]
    fn uniform_probs_tie_break_to_cell_zero() {
        let probs = vec![0.1f32; 50];
        assert_eq!(argmax_cell(&probs), 0);
    }
}
