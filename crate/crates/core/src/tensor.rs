//! Dense f64 tensor with value semantics.
//!
//! Data is reference-counted and copied on write, so cloning a tensor is
//! cheap while observable behaviour stays value-like. Layout is contiguous
//! row-major. Matrix products go through `matrixmultiply::dgemm`, which is
//! deterministic for fixed inputs.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A latent (or feature/image) grid is just a tensor, conventionally shaped
/// `(channels, height, width)`.
pub type LatentGrid = Tensor;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Standard-normal samples drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn require_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data().iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Tensor {
        self.zip_map(other, |a, b| a + c * b)
    }

    /// In-place accumulate: `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "accumulate shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data().iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "dot shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Matrix product for 2-D tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape.len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        gemm(
            m,
            k,
            n,
            self.data(),
            [k as isize, 1],
            other.data(),
            [n as isize, 1],
        )
    }

    /// `self^T x other`: `[k,m]^T x [k,n] -> [m,n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul_tn inner dims");
        gemm(
            m,
            k,
            n,
            self.data(),
            [1, m as isize],
            other.data(),
            [n as isize, 1],
        )
    }

    /// `self x other^T`: `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul_nt inner dims");
        gemm(
            m,
            k,
            n,
            self.data(),
            [k as isize, 1],
            other.data(),
            [1, k as isize],
        )
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: [isize; 2],
    b: &[f64],
    b_strides: [isize; 2],
) -> Tensor {
    let mut out = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides[0],
            a_strides[1],
            b.as_ptr(),
            b_strides[0],
            b_strides[1],
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 5], &mut rng);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for l in 0..4 {
                    acc += a.data()[i * 4 + l] * b.data()[l * 5 + j];
                }
                assert!((c.data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[4, 3], &mut rng);
        let b = Tensor::randn(&[4, 5], &mut rng);
        let tn = a.matmul_tn(&b);
        // Explicit transpose for reference.
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a.data()[i * 3 + j];
            }
        }
        let at = Tensor::from_vec(&[3, 4], at);
        let reference = at.matmul(&b);
        assert!(tn.sub(&reference).max_abs() < 1e-12);

        let c = Tensor::randn(&[5, 3], &mut rng);
        let d = Tensor::randn(&[6, 3], &mut rng);
        let nt = c.matmul_nt(&d);
        let mut dt = vec![0.0; 18];
        for i in 0..6 {
            for j in 0..3 {
                dt[j * 6 + i] = d.data()[i * 3 + j];
            }
        }
        let dt = Tensor::from_vec(&[3, 6], dt);
        let reference = c.matmul(&dt);
        assert!(nt.sub(&reference).max_abs() < 1e-12);
    }

    #[test]
    fn value_semantics_on_clone() {
        let a = Tensor::zeros(&[2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 5.0);
    }
}
