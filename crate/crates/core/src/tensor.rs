//! Minimal dense 2-D tensor used by the autodiff tape.
//!
//! Everything the models compute lives in row-major (rows, cols) matrices:
//! token states are (seq, dim), CNN feature maps are (h*w, channels),
//! embedding tables are (vocab, dim), scalars are (1, 1).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;

/// Float type the numeric core is generic over. Training runs in `f32`;
/// gradient checking runs the same graph in `f64`.
pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    /// Truncated normal init (resample outside 2 standard deviations),
    /// drawn in f64 so f32/f64 models share the same sample sequence.
    pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(T::from_f64(sample_trunc_normal(std, rng)));
        }
        Self { rows, cols, data }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::one(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: T) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a = *a * c;
        }
    }

    /// C = A · B for A (m,k), B (k,n).
    pub fn matmul(&self, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.cols, b.rows, "matmul inner dim mismatch");
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (p, &a_ip) in a_row.iter().enumerate().take(k) {
                let b_row = b.row(p);
                for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a_ip * b_pj;
                }
            }
        }
        out
    }

    /// C = A · Bᵀ for A (m,k), B (n,k).
    pub fn matmul_nt(&self, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dim mismatch");
        let (m, n) = (self.rows, b.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate().take(n) {
                let b_row = b.row(j);
                let mut acc = T::zero();
                for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                    acc = acc + x * y;
                }
                *o = acc;
            }
        }
        out
    }

    /// C = Aᵀ · B for A (k,m), B (k,n).
    pub fn matmul_tn(&self, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.rows, b.rows, "matmul_tn inner dim mismatch");
        let (k, m, n) = (self.rows, self.cols, b.cols);
        let mut out = Tensor::zeros(m, n);
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = b.row(p);
            for (i, &a_pi) in a_row.iter().enumerate().take(m) {
                let out_row = out.row_mut(i);
                for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a_pi * b_pj;
                }
            }
        }
        out
    }
}

fn sample_trunc_normal(std: f64, rng: &mut impl Rng) -> f64 {
    // Box-Muller, resampled until within 2 standard deviations.
    loop {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_small_known() {
        let a = Tensor::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::trunc_normal(4, 5, 1.0, &mut rng);
        let b = Tensor::<f64>::trunc_normal(5, 3, 1.0, &mut rng);
        let c = a.matmul(&b);

        // A·B == A·(Bᵀ)ᵀ via matmul_nt with b transposed by hand.
        let mut bt = Tensor::zeros(3, 5);
        for i in 0..5 {
            for j in 0..3 {
                bt.set(j, i, b.get(i, j));
            }
        }
        let c2 = a.matmul_nt(&bt);
        for (x, y) in c.data().iter().zip(c2.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // A·B == (Aᵀ)ᵀ·B via matmul_tn with a transposed by hand.
        let mut at = Tensor::zeros(5, 4);
        for i in 0..4 {
            for j in 0..5 {
                at.set(j, i, a.get(i, j));
            }
        }
        let c3 = at.matmul_tn(&b);
        for (x, y) in c.data().iter().zip(c3.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn trunc_normal_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f32>::trunc_normal(100, 10, 0.02, &mut rng);
        for &x in t.data() {
            assert!(x.abs() <= 0.04 + 1e-6);
        }
    }
}
