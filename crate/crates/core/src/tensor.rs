//! Dense row-major f64 tensor used by the forward/backward passes.
//!
//! Model math runs in f64 so finite-difference checks are meaningful;
//! on-disk artifacts downcast to f32 at the serialization boundary.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot-style normal init: std = sqrt(2 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    pub fn check_shape(&self, expect: &[usize], what: &str) -> Result<()> {
        if self.shape != expect {
            return Err(Error::shape(format!(
                "{what}: expected shape {:?}, got {:?}",
                expect, self.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "mul shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// 2D matrix product with optional transposes, backed by dgemm.
    pub fn matmul(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be 2D");
        assert_eq!(other.rank(), 2, "matmul rhs must be 2D");
        let (m, k1) = if ta {
            (self.shape[1], self.shape[0])
        } else {
            (self.shape[0], self.shape[1])
        };
        let (k2, n) = if tb {
            (other.shape[1], other.shape[0])
        } else {
            (other.shape[0], other.shape[1])
        };
        assert_eq!(k1, k2, "matmul inner dims {k1} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(self, other, ta, tb, 1.0, 0.0, &mut out);
        out
    }

    /// Batched matmul over leading axis: [b, m, k] x [b, k, n] -> [b, m, n].
    pub fn bmm(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.rank(), 3, "bmm lhs must be 3D");
        assert_eq!(other.rank(), 3, "bmm rhs must be 3D");
        assert_eq!(self.shape[0], other.shape[0], "bmm batch mismatch");
        let b = self.shape[0];
        let (m, k1) = if ta {
            (self.shape[2], self.shape[1])
        } else {
            (self.shape[1], self.shape[2])
        };
        let (k2, n) = if tb {
            (other.shape[2], other.shape[1])
        } else {
            (other.shape[1], other.shape[2])
        };
        assert_eq!(k1, k2, "bmm inner dims {k1} vs {k2}");
        let mut out = Tensor::zeros(&[b, m, n]);
        let lhs_stride = self.shape[1] * self.shape[2];
        let rhs_stride = other.shape[1] * other.shape[2];
        let out_stride = m * n;
        for i in 0..b {
            gemm_slices(
                &self.data[i * lhs_stride..(i + 1) * lhs_stride],
                (self.shape[1], self.shape[2]),
                &other.data[i * rhs_stride..(i + 1) * rhs_stride],
                (other.shape[1], other.shape[2]),
                ta,
                tb,
                1.0,
                0.0,
                &mut out.data[i * out_stride..(i + 1) * out_stride],
                (m, n),
            );
        }
        out
    }
}

fn gemm_into(a: &Tensor, b: &Tensor, ta: bool, tb: bool, alpha: f64, beta: f64, out: &mut Tensor) {
    let (m, n) = (out.shape[0], out.shape[1]);
    gemm_slices(
        &a.data,
        (a.shape[0], a.shape[1]),
        &b.data,
        (b.shape[0], b.shape[1]),
        ta,
        tb,
        alpha,
        beta,
        &mut out.data,
        (m, n),
    );
}

#[allow(clippy::too_many_arguments)]
fn gemm_slices(
    a: &[f64],
    a_dims: (usize, usize),
    b: &[f64],
    b_dims: (usize, usize),
    ta: bool,
    tb: bool,
    alpha: f64,
    beta: f64,
    out: &mut [f64],
    out_dims: (usize, usize),
) {
    let (m, n) = out_dims;
    let k = if ta { a_dims.0 } else { a_dims.1 };
    // row-major strides; a transpose swaps the per-row/per-col strides
    let (rsa, csa) = if ta {
        (1isize, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b, false, false);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = Tensor::new(vec![2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        // a^T is [2,3] row-major [1,2,3;4,5,6]; b^T is [3,2] [7,8;9,10;11,12]
        let c = a.matmul(&b, true, true);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn bmm_batches_independently() {
        let a = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2, 1], vec![5.0, 6.0, 7.0, 8.0]);
        let c = a.bmm(&b, false, false);
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[17.0, 53.0]);
    }

    #[test]
    fn eye_identity() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = Tensor::eye(2);
        assert_eq!(x.matmul(&i, false, false).data(), x.data());
    }
}
