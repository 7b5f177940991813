use crate::error::{Error, Result};
use crate::Scalar;

/// Dense row-major array. A scalar has shape `[]` and one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape { op: "tensor", left: shape, right: vec![] });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(x: S) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape { op, left: self.shape.clone(), right: vec![] }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!("expected one element, got shape {:?}", self.shape)))
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape { op: "reshape", left: self.shape.clone(), right: shape });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`; shapes must agree in element count.
    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            axpy_rows(&mut out[i * n..(i + 1) * n], |p| arow[p], &other.data, k, n);
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul_nt", left: self.shape.clone(), right: other.shape.clone() });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            // Four independent dot products at a time; each keeps its own sequential order.
            let mut j = 0;
            while j + 4 <= n {
                let b = &other.data[j * k..(j + 4) * k];
                let (b0, b1, b2, b3) = (&b[..k], &b[k..2 * k], &b[2 * k..3 * k], &b[3 * k..]);
                let mut acc = [S::zero(); 4];
                for ((((&a, &x0), &x1), &x2), &x3) in arow.iter().zip(b0).zip(b1).zip(b2).zip(b3) {
                    acc[0] += a * x0;
                    acc[1] += a * x1;
                    acc[2] += a * x2;
                    acc[3] += a * x3;
                }
                out.extend_from_slice(&acc);
                j += 4;
            }
            for j in j..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out.push(arow.iter().zip(brow).fold(S::zero(), |acc, (&a, &b)| acc + a * b));
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let k = self.dims2("matmul_tn")?.1;
        let n = other.dims2("matmul_tn")?.1;
        let mut out = Tensor { shape: vec![k, n], data: vec![S::zero(); k * n] };
        self.matmul_tn_into(other, &mut out)?;
        Ok(out)
    }

    /// Adds `selfᵀ · other` into `out`.
    pub(crate) fn matmul_tn_into(&self, other: &Self, out: &mut Self) -> Result<()> {
        let (m, k) = self.dims2("matmul_tn")?;
        let (m2, n) = other.dims2("matmul_tn")?;
        if m != m2 || out.shape != [k, n] {
            return Err(Error::Shape { op: "matmul_tn", left: self.shape.clone(), right: other.shape.clone() });
        }
        for p in 0..k {
            axpy_rows(&mut out.data[p * n..(p + 1) * n], |i| self.data[i * k + p], &other.data, m, n);
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.as_f64()).expect("cast")).collect(),
        }
    }
}

/// `out += Σ_p coef(p) · rows[p]` over `count` rows of width `out.len()`,
/// accumulated in increasing `p` for every entry.
fn axpy_rows<S: Scalar>(out: &mut [S], coef: impl Fn(usize) -> S, rows: &[S], count: usize, width: usize) {
    let mut p = 0;
    while p + 4 <= count {
        let (c0, c1, c2, c3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
        let r = &rows[p * width..(p + 4) * width];
        let (r0, r1, r2, r3) = (&r[..width], &r[width..2 * width], &r[2 * width..3 * width], &r[3 * width..]);
        for ((((o, &x0), &x1), &x2), &x3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            let mut t = *o;
            t += c0 * x0;
            t += c1 * x1;
            t += c2 * x2;
            t += c3 * x3;
            *o = t;
        }
        p += 4;
    }
    for p in p..count {
        let c = coef(p);
        for (o, &r) in out.iter_mut().zip(&rows[p * width..(p + 1) * width]) {
            *o += c * r;
        }
    }
}
