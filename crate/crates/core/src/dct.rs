//! Orthonormal DCT-II along the trailing (temporal) axis.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Precomputed `T×T` orthonormal DCT-II matrix. Row `k` holds basis
/// function `k` sampled at the `T` frames.
#[derive(Clone, Debug)]
pub struct DctBasis {
    len: usize,
    matrix: Tensor,
    matrix_t: Tensor,
}

impl DctBasis {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "DCT length must be positive");
        let n = len as f64;
        let mut m = vec![0.0; len * len];
        for k in 0..len {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..len {
                m[k * len + i] = scale * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        let matrix = Tensor::new(&[len, len], m).expect("square basis");
        let matrix_t = matrix.transpose(0, 1).expect("2-D basis");
        DctBasis { len, matrix, matrix_t }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    fn check(&self, x: &Tensor, op: &'static str) -> Result<()> {
        match x.shape().last() {
            Some(&l) if l == self.len && x.ndim() >= 2 => Ok(()),
            _ => Err(shape_err(
                op,
                format!(
                    "trailing axis of {:?} must have length {} (and at least 2 axes)",
                    x.shape(),
                    self.len
                ),
            )),
        }
    }

    /// Replaces every trailing-axis slice by its DCT-II coefficients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, "dct_forward")?;
        x.matmul(&self.matrix_t)
    }

    /// Inverse of [`DctBasis::forward`].
    pub fn inverse(&self, c: &Tensor) -> Result<Tensor> {
        self.check(c, "dct_inverse")?;
        c.matmul(&self.matrix)
    }
}
