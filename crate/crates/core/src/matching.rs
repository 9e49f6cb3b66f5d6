//! Similarity maps between descriptors and features, and descriptor fill of
//! the masked feature-grid cells.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;

/// `P = softmax_k(F · Dᵀ)`, `(H_F·W_F) × (K+1)`. Row-wise max subtraction
/// happens inside the softmax.
pub fn similarity_map(tape: &Tape, descriptors: Var, features: Var) -> Result<Var> {
    let (_, cd) = tape.shape(descriptors);
    let (_, cf) = tape.shape(features);
    if cd != cf {
        return Err(Error::validation(format!("descriptor dim {cd} != feature dim {cf}")));
    }
    let logits = tape.matmul_nt(features, descriptors);
    Ok(tape.softmax_rows(logits))
}

/// Filled feature map `R` plus the per-cell provenance (true = from descriptors).
#[derive(Clone, Debug)]
pub struct FilledFeatureMap {
    pub values: Var,
    pub from_descriptors: Vec<bool>,
}

/// `R = F^U` on visible cells, `Σ_k P_k D_k` on masked cells.
///
/// `visible` holds the encoder outputs in the row-major order of
/// `mask.visible_indices()`.
pub fn fill_masked(
    tape: &Tape,
    visible: Var,
    visible_positions: &[usize],
    descriptors: Var,
    similarity: Var,
    mask: &BinaryMask,
) -> Result<FilledFeatureMap> {
    let expected = mask.visible_indices();
    if visible_positions != expected.as_slice() {
        return Err(Error::validation("visible feature positions do not match the unmasked cells"));
    }
    let cells = mask.cells.len();
    let (pr, pk) = tape.shape(similarity);
    let (dk, dc) = tape.shape(descriptors);
    let (vr, vc) = tape.shape(visible);
    if pr != cells || pk != dk || vr != expected.len() || (vr > 0 && vc != dc) {
        return Err(Error::validation(format!(
            "fill shapes disagree: P {pr}x{pk}, D {dk}x{dc}, F^U {vr}x{vc}, {cells} cells"
        )));
    }
    let mixed = tape.matmul(similarity, descriptors);
    let mask_col = tape.constant(mask.as_column());
    let masked_part = tape.mul(mixed, mask_col);
    let values = if vr == 0 {
        masked_part
    } else {
        let placed = tape.scatter_rows(visible, visible_positions, cells);
        tape.add(placed, masked_part)
    };
    Ok(FilledFeatureMap { values, from_descriptors: mask.cells.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mat;

    #[test]
    fn two_descriptor_example() {
        let tape = Tape::new();
        let d = tape.constant(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let f = tape.constant(Mat::from_rows(&[vec![1.0, 0.0]]));
        let p = tape.value(similarity_map(&tape, d, f).unwrap());
        let e = std::f64::consts::E;
        assert!((p.data[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.data[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn identical_descriptors_give_uniform() {
        let tape = Tape::new();
        let d = tape.constant(Mat::filled(4, 3, 0.7));
        let f = tape.constant(Mat::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.1, 0.0]]));
        let p = tape.value(similarity_map(&tape, d, f).unwrap());
        assert!(p.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn per_pixel_logit_shift_is_invisible() {
        // adding a component along a direction orthogonal to all descriptor
        // differences shifts each pixel's logits by a constant
        let tape = Tape::new();
        let d = tape.constant(Mat::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 2.0]]));
        let f1 = tape.constant(Mat::from_rows(&[vec![0.3, 0.9, 0.0]]));
        let f2 = tape.constant(Mat::from_rows(&[vec![0.3, 0.9, 5.0]]));
        let p1 = tape.value(similarity_map(&tape, d, f1).unwrap());
        let p2 = tape.value(similarity_map(&tape, d, f2).unwrap());
        for (a, b) in p1.data.iter().zip(&p2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let tape = Tape::new();
        let d = tape.constant(Mat::zeros(2, 3));
        let f = tape.constant(Mat::zeros(5, 4));
        assert!(similarity_map(&tape, d, f).is_err());
    }

    #[test]
    fn fill_cases() {
        let tape = Tape::new();
        let dm = Mat::from_rows(&[vec![1.0, 2.0], vec![-3.0, 5.0]]);
        let d = tape.constant(dm.clone());
        let fu_m = Mat::from_rows(&[vec![9.0, 8.0], vec![7.0, 6.0], vec![5.0, 4.0], vec![3.0, 2.0]]);

        let none = BinaryMask::none(2, 2);
        let p = tape.constant(Mat::filled(4, 2, 0.5));
        let fu = tape.constant(fu_m.clone());
        let r = fill_masked(&tape, fu, &none.visible_indices(), d, p, &none).unwrap();
        assert_eq!(tape.value(r.values), fu_m);
        assert_eq!(r.from_descriptors, vec![false; 4]);

        let all = BinaryMask::from_cells(2, 2, vec![true; 4]).unwrap();
        let empty = tape.constant(Mat::zeros(0, 2));
        let onehot = tape.constant(Mat::from_rows(&vec![vec![0.0, 1.0]; 4]));
        let r = tape.value(fill_masked(&tape, empty, &[], d, onehot, &all).unwrap().values);
        for row in 0..4 {
            assert_eq!(r.row(row), dm.row(1));
        }
        let r = tape.value(fill_masked(&tape, empty, &[], d, p, &all).unwrap().values);
        for row in 0..4 {
            assert_eq!(r.row(row), &[-1.0, 3.5]);
        }

        let mixed = BinaryMask::from_cells(2, 2, vec![true, false, false, true]).unwrap();
        let fu2 = tape.constant(Mat::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]));
        assert!(fill_masked(&tape, fu2, &[0, 1], d, p, &mixed).is_err());
        let r = fill_masked(&tape, fu2, &[1, 2], d, p, &mixed).unwrap();
        assert_eq!(r.from_descriptors, mixed.cells);
        let v = tape.value(r.values);
        assert_eq!(v.row(1), &[1.0, 1.0]);
        assert_eq!(v.row(0), &[-1.0, 3.5]);
    }
}
