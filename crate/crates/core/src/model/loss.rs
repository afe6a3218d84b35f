//! Training objective: soft cross-entropy over grid cells, smooth-L1 offset
//! regression against all cell centers, and L2 weight decay.

use super::{GridSpec, SoftLabelSeq};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

/// Weight of the regression term in the total loss.
pub const LAMBDA_CLS_REG: f64 = 0.5;
/// Weight of the L2 penalty on parameters.
pub const LAMBDA_WEIGHT_DECAY: f64 = 0.001;

/// Cross-entropy of per-step distributions against (possibly soft) labels,
/// normalized by the full trajectory length `T` rather than the number of
/// predicted steps.
pub fn cls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: &[NodeId],
    labels: &SoftLabelSeq,
    total_len: usize,
) -> Result<NodeId, TensorError> {
    assert_eq!(probs.len(), labels.len());
    let mut acc: Option<NodeId> = None;
    for (&p, label) in probs.iter().zip(labels) {
        let hw = tape.value(p).numel();
        let lg = tape.log(p)?;
        let dense = tape.constant(
            Tensor::from_vec(&[hw], label.to_dense::<T>(hw)).expect("label length"),
        );
        let weighted = tape.mul(lg, dense)?;
        let term = tape.sum_all(weighted)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.expect("at least one prediction step");
    tape.scale(sum, T::from_f64(-1.0 / total_len as f64))
}

/// Offset regression targets for one timestep: row `c` holds the delta from
/// cell `c`'s center to the true location.
pub fn offset_targets<T: Scalar>(grid: &GridSpec, pixel: (f64, f64)) -> Tensor<T> {
    let hw = grid.num_cells();
    let mut data = Vec::with_capacity(hw * 2);
    for c in 0..hw {
        let (qx, qy) = grid.center(c);
        data.push(T::from_f64(pixel.0 - qx));
        data.push(T::from_f64(pixel.1 - qy));
    }
    Tensor::from_vec(&[hw, 2], data).expect("target shape")
}

/// Smooth-L1 loss of per-step `[HW, 2]` offsets against the ground-truth
/// deltas, summed over cells and coordinates, normalized by `T`.
pub fn reg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    offsets: &[NodeId],
    future_pixels: &[(f64, f64)],
    grid: &GridSpec,
    total_len: usize,
) -> Result<NodeId, TensorError> {
    assert_eq!(offsets.len(), future_pixels.len());
    let mut acc: Option<NodeId> = None;
    for (&off, &pixel) in offsets.iter().zip(future_pixels) {
        let target = tape.constant(offset_targets::<T>(grid, pixel));
        let sl = tape.smooth_l1(off, target)?;
        let term = tape.sum_all(sl)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.expect("at least one prediction step");
    tape.scale(sum, T::from_f64(1.0 / total_len as f64))
}

/// `lambda_2 * sum of squared parameters` over the given nodes.
pub fn weight_decay<T: Scalar>(tape: &mut Tape<T>, params: &[NodeId]) -> Result<NodeId, TensorError> {
    let mut acc: Option<NodeId> = None;
    for &p in params {
        let sq = tape.mul(p, p)?;
        let term = tape.sum_all(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let sum = acc.expect("at least one parameter");
    tape.scale(sum, T::from_f64(LAMBDA_WEIGHT_DECAY))
}

/// `cls + 0.5 * reg + wd`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cls: NodeId,
    reg: NodeId,
    wd: NodeId,
) -> Result<NodeId, TensorError> {
    let reg_w = tape.scale(reg, T::from_f64(LAMBDA_CLS_REG))?;
    let partial = tape.add(cls, reg_w)?;
    tape.add(partial, wd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hard_label_seq, SoftLabel};

    fn probs_node(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> Vec<NodeId> {
        rows.iter()
            .map(|r| tape.constant(Tensor::from_vec(&[r.len()], r.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn perfect_one_hot_prediction_has_zero_loss() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 10];
        row[3] = 1.0;
        let probs = probs_node(&mut tape, &[row]);
        let labels = hard_label_seq(&[3]);
        let l = cls_loss(&mut tape, &probs, &labels, 20).unwrap();
        assert!(tape.value(l).item().abs() < 1e-9);
    }

    #[test]
    fn uniform_prediction_matches_analytic_value() {
        // 12 predicted steps of uniform distributions over HW cells with hard
        // labels give (T - h)/T * log(HW)
        let hw = 24usize;
        let t_total = 20usize;
        let steps = 12usize;
        let mut tape = Tape::new();
        let rows: Vec<Vec<f64>> = (0..steps).map(|_| vec![1.0 / hw as f64; hw]).collect();
        let probs = probs_node(&mut tape, &rows);
        let labels = hard_label_seq(&vec![5; steps]);
        let l = cls_loss(&mut tape, &probs, &labels, t_total).unwrap();
        let expected = steps as f64 / t_total as f64 * (hw as f64).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_labels() {
        let hw = 8usize;
        let mut rng_state = 99u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64).max(1e-3)
        };
        let raw: Vec<f64> = (0..hw).map(|_| next()).collect();
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|v| v / z).collect();

        let lam = 0.37;
        let eval = |labels: &SoftLabelSeq| {
            let mut tape = Tape::new();
            let probs = probs_node(&mut tape, &[row.clone()]);
            let l = cls_loss(&mut tape, &probs, labels, 20).unwrap();
            tape.value(l).item()
        };
        let la = eval(&hard_label_seq(&[2]));
        let lb = eval(&hard_label_seq(&[6]));
        let lmix = eval(&vec![SoftLabel::two_point(2, 6, lam)]);
        assert!((lmix - (lam * la + (1.0 - lam) * lb)).abs() < 1e-9);
    }

    #[test]
    fn reg_loss_zero_when_offsets_equal_targets() {
        let grid = GridSpec::new(4, 3, 40.0, 30.0);
        let pixel = (17.0, 22.0);
        let mut tape = Tape::new();
        let target = offset_targets::<f64>(&grid, pixel);
        let off = tape.constant(target);
        let l = reg_loss(&mut tape, &[off], &[pixel], &grid, 20).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn reg_loss_single_coordinate_contributions() {
        // one cell grid: diff 0.5 -> 0.125, diff 2.0 -> 1.5, each / T
        let grid = GridSpec::new(1, 1, 10.0, 10.0);
        let (qx, qy) = grid.center(0);
        let pixel = (qx, qy); // targets are (0, 0)
        for (diff, want) in [(0.5f64, 0.125f64), (2.0, 1.5)] {
            let mut tape = Tape::new();
            let off = tape.constant(Tensor::from_vec(&[1, 2], vec![diff, 0.0]).unwrap());
            let l = reg_loss(&mut tape, &[off], &[pixel], &grid, 20).unwrap();
            assert!((tape.value(l).item() - want / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_combines_terms() {
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::scalar(1.0f64));
        let reg = tape.constant(Tensor::scalar(2.0f64));
        let zero = tape.constant(Tensor::scalar(0.0f64));
        let t = total_loss(&mut tape, cls, reg, zero).unwrap();
        assert_eq!(tape.value(t).item(), 2.0);
    }

    #[test]
    fn weight_decay_of_single_param() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[1], vec![2.0f64]).unwrap(), true);
        let wd = weight_decay(&mut tape, &[p]).unwrap();
        assert!((tape.value(wd).item() - 0.004).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_is_sum_of_component_gradients() {
        // d/dx of (x^2 + 0.5 * 3x + 0.001 * x^2-ish) checked by assembling
        // the pieces separately and together
        let grad_total = {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&[1], vec![1.5f64]).unwrap(), true);
            let sq = tape.mul(x, x).unwrap();
            let cls = tape.sum_all(sq).unwrap();
            let tri = tape.scale(x, 3.0).unwrap();
            let reg = tape.sum_all(tri).unwrap();
            let wd = weight_decay(&mut tape, &[x]).unwrap();
            let t = total_loss(&mut tape, cls, reg, wd).unwrap();
            tape.backward(t).unwrap();
            tape.grad(x).unwrap()[0]
        };
        let grad_part = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&[1], vec![1.5f64]).unwrap(), true);
            let loss = match which {
                0 => {
                    let sq = tape.mul(x, x).unwrap();
                    tape.sum_all(sq).unwrap()
                }
                1 => {
                    let tri = tape.scale(x, 3.0).unwrap();
                    let s = tape.sum_all(tri).unwrap();
                    tape.scale(s, LAMBDA_CLS_REG).unwrap()
                }
                _ => weight_decay(&mut tape, &[x]).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap()[0]
        };
        let sum = grad_part(0) + grad_part(1) + grad_part(2);
        assert!((grad_total - sum).abs() < 1e-12);
    }
}
