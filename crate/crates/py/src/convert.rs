//! Conversions between nested Python lists and tensors.

use rmgpt_core::numeric::Tensor;

/// `[B][L][M]` nested lists into `B` tensors of shape `[L, M]`.
pub fn windows_from_nested(windows: Vec<Vec<Vec<f32>>>) -> Result<Vec<Tensor<f32>>, String> {
    windows
        .into_iter()
        .enumerate()
        .map(|(b, rows)| {
            let l = rows.len();
            let m = rows.first().map_or(0, Vec::len);
            if l == 0 || m == 0 {
                return Err(format!("window {b} is empty"));
            }
            if let Some(r) = rows.iter().position(|r| r.len() != m) {
                return Err(format!("window {b}: row {r} has {} channels, expected {m}", rows[r].len()));
            }
            Tensor::new(&[l, m], rows.into_iter().flatten().collect()).map_err(|e| e.to_string())
        })
        .collect()
}

/// A rank-2 tensor as nested rows.
pub fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f32]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let w = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]];
        let t = windows_from_nested(w.clone()).unwrap();
        assert_eq!(t[0].shape(), &[3, 2]);
        assert_eq!(rows(&t[0]), w[0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let e = windows_from_nested(vec![vec![vec![1.0, 2.0], vec![3.0]]]).unwrap_err();
        assert!(e.contains("row 1"), "{e}");
        assert!(windows_from_nested(vec![vec![]]).is_err());
    }
}
