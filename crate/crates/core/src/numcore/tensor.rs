use super::kernels;
use super::Real;
use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn parameter(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let g = self.grad_mut();
        for (a, &b) in g.iter_mut().zip(delta) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!("transpose expects 2-D, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Matrix product over the last two axes. Leading (batch) axes must match
    /// or be absent on one side, in which case that operand is broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let batch: Vec<usize> = if a_batch == b_batch || b_batch.is_empty() {
            a_batch.to_vec()
        } else if a_batch.is_empty() {
            b_batch.to_vec()
        } else {
            return Err(Error::shape("matmul", a, b));
        };
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let ao = if a_batch.is_empty() { 0 } else { bi * m * k };
            let bo = if b_batch.is_empty() { 0 } else { bi * k * n };
            kernels::matmul_acc(
                &self.data[ao..ao + m * k],
                &other.data[bo..bo + k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Tensor::new(&shape, out)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + t * inner];
                }
                kernels::softmax_in_place(&mut buf, None);
                for (t, b) in buf.iter().enumerate() {
                    out[base + t * inner] = *b;
                }
            }
        }
        Tensor::new(&self.shape, out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Selects rows of a 2-D tensor.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(Error::Contract(format!("row index {i} out of range {}", self.rows())));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(&[idx.len(), c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_hand_products() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().data(), &[3.0, 4.0]);
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[11.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = Tensor::new(&[5, 7], a.clone())
            .unwrap()
            .matmul(&Tensor::new(&[7, 3], b.clone()).unwrap())
            .unwrap();
        let want = naive(&a, &b, 5, 7, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_product_broadcasts_rhs() {
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(&[3], vec![0.0f64, 0.0, 0.0]).unwrap().softmax(0).unwrap();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::new(&[2], vec![1000.0f64, 1000.0]).unwrap().softmax(0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        // Reference values evaluated with 50-digit arithmetic.
        let t = Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap().softmax(0).unwrap();
        let want = [0.09003057317038046, 0.24472847105479765, 0.6652409557748219];
        for (g, w) in t.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let t = Tensor::new(&[2, 2], vec![0.0f64, 5.0, 0.0, -5.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_simplex_points(
            rows in 1usize..6,
            cols in 1usize..9,
            vals in proptest::collection::vec(-60.0f64..60.0, 54),
        ) {
            let t = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap().softmax(1).unwrap();
            for r in 0..rows {
                let row = t.row(r);
                proptest::prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
