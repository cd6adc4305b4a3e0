//! Dense row-major f64 tensors.
//!
//! Values are immutable in spirit: public operations return fresh
//! tensors, slices copy, and there are no strided views. The optimizer
//! mutates parameter storage through `data_mut` between passes.

use super::alloc;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::track_free(self.data.len() * 8);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        alloc::track_alloc(data.len() * 8);
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), vec![value; n])
    }

    /// A single-element tensor, the representation for scalars.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar payload of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_vec(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_vec(self.shape.clone(), data))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_vec(self.shape.clone(), data))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a / b).collect();
        Ok(Tensor::from_vec(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|a| a * c).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data.iter().map(|a| a.exp()).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|a| a.max(0.0)).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn softplus(&self) -> Tensor {
        let data = self.data.iter().map(|&a| softplus(a)).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let data = self.data.iter().map(|a| a.max(floor)).collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    /// x / sqrt(mean(x^2) + eps), over the whole (vector) tensor.
    pub fn rms_norm(&self, eps: f64) -> Tensor {
        let n = self.data.len() as f64;
        let ms = self.data.iter().map(|v| v * v).sum::<f64>() / n;
        let inv = 1.0 / (ms + eps).sqrt();
        self.scale(inv)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor::from_vec(vec![m, n], out))
    }

    /// Row vector times matrix: `x[k] · w[k×n] -> [n]`.
    pub fn vecmat(&self, w: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 1 || w.shape.len() != 2 || self.shape[0] != w.shape[0] {
            return Err(Error::Shape {
                op: "vecmat",
                left: self.shape.clone(),
                right: w.shape.clone(),
            });
        }
        let (k, n) = (w.shape[0], w.shape[1]);
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += self.data[p] * w.data[p * n + j];
            }
            out[j] = acc;
        }
        Ok(Tensor::from_vec(vec![n], out))
    }

    /// Matrix times column vector: `m[r×c] · v[c] -> [r]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || v.shape.len() != 1 || self.shape[1] != v.shape[0] {
            return Err(Error::Shape {
                op: "matvec",
                left: self.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                acc += self.data[i * c + j] * v.data[j];
            }
            out[i] = acc;
        }
        Ok(Tensor::from_vec(vec![r], out))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape.len() != 1 || other.shape.len() != 1 || self.shape != other.shape {
            return Err(Error::Shape {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Outer product of two vectors: `a[r] ⊗ b[c] -> [r×c]`.
    pub fn outer(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 1 || other.shape.len() != 1 {
            return Err(Error::Shape {
                op: "outer",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], other.shape[0]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = self.data[i] * other.data[j];
            }
        }
        Ok(Tensor::from_vec(vec![r, c], out))
    }

    /// Scale each row i of a matrix by `v[i]`.
    pub fn mul_rows(&self, v: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || v.shape.len() != 1 || self.shape[0] != v.shape[0] {
            return Err(Error::Shape {
                op: "mul_rows",
                left: self.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = self.data[i * c + j] * v.data[i];
            }
        }
        Ok(Tensor::from_vec(vec![r, c], out))
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_row_broadcast(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || b.shape.len() != 1 || self.shape[1] != b.shape[0] {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = self.data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += b.data[j];
            }
        }
        Ok(Tensor::from_vec(vec![r, c], out))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_vec(vec![c, r], out))
    }

    pub fn softmax_rows(&self) -> Tensor {
        let (r, c) = if self.shape.len() == 2 {
            (self.shape[0], self.shape[1])
        } else {
            (1, self.shape[0])
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        Tensor::from_vec(self.shape.clone(), out)
    }

    // ── Sequence axis ───────────────────────────────────────────────

    /// Copy rows `[start, end)` along axis 0 (elements for 1-D tensors).
    pub fn slice0(&self, start: usize, end: usize) -> Result<Tensor> {
        let len0 = self.shape[0];
        if start > end || end > len0 {
            return Err(Error::contract(format!(
                "slice0 range {start}..{end} out of bounds for axis length {len0}"
            )));
        }
        let stride: usize = self.shape[1..].iter().product::<usize>().max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * stride..end * stride].to_vec();
        Ok(Tensor::from_vec(shape, data))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || i >= self.shape[0] {
            return Err(Error::contract(format!(
                "row {i} out of bounds for shape {:?}",
                self.shape
            )));
        }
        let c = self.shape[1];
        Ok(Tensor::from_vec(vec![c], self.data[i * c..(i + 1) * c].to_vec()))
    }

    /// Concatenate along axis 0; all parts must agree on trailing dims.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat0 of zero tensors"));
        }
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape {
                    op: "concat0",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec(shape, data))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero tensors"));
        }
        let c = rows[0].shape[0];
        for r in rows {
            if r.shape.len() != 1 || r.shape[0] != c {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: rows[0].shape.clone(),
                    right: r.shape.clone(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            data.extend_from_slice(&r.data);
        }
        Ok(Tensor::from_vec(vec![rows.len(), c], data))
    }
}

/// Overflow-safe softplus: `x + ln(1 + e^-x)` for positive x.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cosine similarity with a clamped denominator:
/// `a·b / max(‖a‖‖b‖, eps)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor, eps: f64) -> Result<f64> {
    let num = a.dot(b)?;
    let na = a.dot(a)?.sqrt();
    let nb = b.dot(b)?.sqrt();
    Ok(num / (na * nb).max(eps))
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN_2: f64 = 0.693_147_180_559_945_3;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_dot_product_case() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::from_vec(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let c = a.matmul(&b).unwrap();
        // independent oracle: explicit index arithmetic, no Tensor helpers
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "error should name shapes: {err}");
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_large_input_does_not_overflow() {
        let y = softplus(50.0);
        assert!(y.is_finite());
        assert!((y - 50.0).abs() < 1e-9);
        assert!(softplus(1e6).is_finite());
    }

    #[test]
    fn softplus_matches_high_precision_oracle() {
        // ln(1 + e^-3) evaluated at 30 digits
        let want = 0.048_587_351_573_742_058_758_925_919_85;
        assert!((softplus(-3.0) - want).abs() < 1e-12);
    }

    #[test]
    fn softplus_strictly_positive() {
        for &x in &[-700.0, -50.0, -1.0, 0.0, 1.0, 700.0] {
            assert!(softplus(x) > 0.0, "softplus({x}) not positive");
        }
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::from_vec(vec![4], vec![-3.0, -0.5, -1e-9, -100.0]);
        assert!(neg.relu().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_matches_branch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec(vec![64], (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let y = x.relu();
        for (a, b) in x.data().iter().zip(y.data()) {
            let want = if *a > 0.0 { *a } else { 0.0 };
            assert_eq!(*b, want);
        }
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let a = Tensor::from_vec(vec![3], vec![1.0, 2.0, -0.5]);
        let c = cosine_similarity(&a, &a, 1e-8).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![2], vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn cosine_zero_vector_is_guarded() {
        let a = Tensor::zeros(&[4]);
        let b = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cosine_similarity(&a, &b, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::from_vec(vec![8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b = Tensor::from_vec(vec![8], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let c = cosine_similarity(&a, &b, 1e-8).unwrap();
            let c_rev = cosine_similarity(&b, &a, 1e-8).unwrap();
            assert!((c - c_rev).abs() < 1e-12);
            for lambda in [0.5, 2.0, 10.0] {
                let scaled = cosine_similarity(&a.scale(lambda), &b, 1e-8).unwrap();
                assert!((c - scaled).abs() < 1e-9);
            }
            assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = Tensor::from_vec(vec![5, 2], (0..10).map(|v| v as f64).collect());
        for split in 0..=5 {
            let lo = x.slice0(0, split).unwrap();
            let hi = x.slice0(split, 5).unwrap();
            let back = Tensor::concat0(&[&lo, &hi]).unwrap();
            assert_eq!(back, x);
        }
    }
}
