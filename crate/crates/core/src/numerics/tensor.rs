//! Dense row-major tensors and the pure kernels the tape is built on.
//!
//! Values are held as `f64`. A tensor tagged [`Precision::Single`] rounds every
//! produced value through `f32`, so single-precision runs see exactly the values
//! an `f32` implementation with wide accumulators would.

use crate::error::{dim_err, Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    /// Double wins when inputs disagree.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::Double || other == Precision::Double {
            Precision::Double
        } else {
            Precision::Single
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rounding `data` to `precision`.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            ));
        }
        if precision == Precision::Single {
            data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        Ok(Tensor {
            shape,
            data,
            precision,
        })
    }

    /// Double-precision tensor from raw values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, data, Precision::Double)
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            precision,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64, precision: Precision) -> Self {
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![precision.round(value); n],
            precision,
        }
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![precision.round(value)],
            precision,
        }
    }

    pub fn from_fn(shape: Vec<usize>, precision: Precision, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel_of(&shape);
        let data = (0..n).map(|i| precision.round(f(i))).collect();
        Tensor {
            shape,
            data,
            precision,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        if precision == Precision::Single {
            self.data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        self
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.data.len() {
            return dim_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows/cols view for rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let p = self.precision;
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| p.round(f(v))).collect(),
            precision: p,
        }
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let p = self.precision.join(other.precision);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| p.round(f(a, b)))
                .collect(),
            precision: p,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        ));
    }
    let p = a.precision.join(b.precision);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    if p == Precision::Single {
        out.iter_mut().for_each(|v| *v = p.round(*v));
    }
    Tensor::new(vec![m, n], out, p)
}

/// Accumulates `a[m,k] * b[k,n]` into `out[m,n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Accumulates `a[m,k] * b[n,k]^T` into `out[m,n]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Accumulates `a[k,m]^T * b[k,n]` into `out[m,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out, a.precision)
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return dim_err(format!("softmax axis {axis} invalid for shape {:?}", x.shape));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[idx(j)] /= denom;
            }
        }
    }
    Tensor::new(x.shape.clone(), out, x.precision)
}

/// Per-row mean and reciprocal standard deviation over the last axis.
pub(crate) fn layernorm_stats(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        mean.push(mu);
        rstd.push(1.0 / (var + LAYERNORM_EPS).sqrt());
    }
    (mean, rstd)
}

/// Layer normalisation over the last axis followed by an affine map.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let cols = *x.shape.last().ok_or_else(|| Error::Dimension("layernorm on rank-0 tensor".into()))?;
    if gain.shape != [cols] || bias.shape != [cols] {
        return dim_err(format!(
            "layernorm gain/bias {:?}/{:?} do not match last axis {cols}",
            gain.shape, bias.shape
        ));
    }
    let (mean, rstd) = layernorm_stats(&x.data, cols);
    let mut out = vec![0.0; x.numel()];
    for (r, (mu, rs)) in mean.iter().zip(&rstd).enumerate() {
        for c in 0..cols {
            let xhat = (x.data[r * cols + c] - mu) * rs;
            out[r * cols + c] = xhat * gain.data[c] + bias.data[c];
        }
    }
    let p = x.precision.join(gain.precision).join(bias.precision);
    Tensor::new(x.shape.clone(), out, p)
}

/// Log-sum-exp of a slice, stabilised by its maximum.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-probability of the target class over the rows of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if targets.len() != n {
        return dim_err(format!("{} targets for {} logit rows", targets.len(), n));
    }
    if n == 0 {
        return Err(Error::Contract("cross entropy over zero rows".into()));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Index(format!("label {t} outside {c} classes")));
        }
        let row = logits.row(r);
        total += logsumexp(row) - row[t];
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, Precision::Double, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_matmul() {
        let i2 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(vec![2, 2], vec![0.3, -1.5, 2.0, 7.25]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(vec![3, 4], &mut rng);
        let b = random(vec![4, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3], Precision::Double);
        let b = Tensor::zeros(vec![2, 3], Precision::Double);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_associative_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = Tensor::from_fn(vec![4, 4], Precision::Double, |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        for _ in 0..20 {
            let a = random(vec![4, 4], &mut rng);
            let b = random(vec![4, 4], &mut rng);
            let c = random(vec![4, 4], &mut rng);
            let left = matmul(&matmul(&matmul(&a, &id).unwrap(), &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &matmul(&id, &c).unwrap()).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap(), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let s = softmax(&Tensor::from_vec(vec![2], vec![2f64.ln(), 1f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let s = softmax(&Tensor::from_vec(vec![2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![2, 3, 4], &mut rng);
        let s = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let total: f64 = (0..3).map(|b| s.at(&[a, b, c])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(softmax(&x, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        let y = layernorm(&Tensor::from_vec(vec![1, 3], vec![4.0; 3]).unwrap(), &g, &b).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let y = layernorm(&Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap(), &g, &b).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);

        let bad = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        assert!(layernorm(&Tensor::zeros(vec![1, 2], Precision::Double), &bad, &b).is_err());
    }

    #[test]
    fn layernorm_random_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(vec![1, 7], &mut rng);
        let g = Tensor::from_vec(vec![7], vec![1.0; 7]).unwrap();
        let b = Tensor::from_vec(vec![7], vec![0.0; 7]).unwrap();
        let y = layernorm(&x, &g, &b).unwrap();
        let mut m = 0.0;
        for v in y.data() {
            m += v;
        }
        m /= 7.0;
        let mut var = 0.0;
        for v in y.data() {
            var += (v - m) * (v - m);
        }
        var /= 7.0;
        // variance of x-hat is var/(var+eps), not exactly 1
        let mut xm = 0.0;
        for v in x.data() {
            xm += v;
        }
        xm /= 7.0;
        let mut xv = 0.0;
        for v in x.data() {
            xv += (v - xm) * (v - xm);
        }
        xv /= 7.0;
        assert!(m.abs() < 1e-12);
        assert!((var - xv / (xv + LAYERNORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let c = 5;
        let uniform = Tensor::zeros(vec![3, c], Precision::Double);
        let l = cross_entropy(&uniform, &[0, 2, 4]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-12);

        let confident = Tensor::from_vec(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, &[1]).unwrap() < 1e-40);

        assert!(matches!(cross_entropy(&uniform, &[0, 1, 5]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(vec![4, 6], &mut rng);
        let targets = [5, 0, 3, 3];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let mut denom = 0.0;
            for c in 0..6 {
                denom += logits.at(&[r, c]).exp();
            }
            total += -(logits.at(&[r, t]).exp() / denom).ln();
        }
        let expected = total / 4.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn single_precision_rounds() {
        let t = Tensor::new(vec![1], vec![0.1], Precision::Single).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }
}
