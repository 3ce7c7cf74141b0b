use std::fmt;

use crate::error::{shape_err, KernelError, Result};

/// Dense row-major array of `f64` values.
///
/// Every dimension is positive and the flat buffer length equals the
/// product of the dimensions. Constructors reject NaN and infinities.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return shape_err("tensor must have rank >= 1");
    }
    let mut n: usize = 1;
    for &d in dims {
        if d == 0 {
            return shape_err(format!("zero dimension in {dims:?}"));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| KernelError::Shape(format!("dims {dims:?} overflow")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} hold {n} values but {} were supplied",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("Tensor::new"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = check_dims(dims).expect("valid dims");
        assert!(value.is_finite());
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Stack equally sized tensors into a `[rows, width]` matrix.
    pub fn stack<'a>(rows: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut data = Vec::new();
        let mut width = None;
        let mut n = 0;
        for row in rows {
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return shape_err(format!("cannot stack widths {w} and {}", row.len()))
                }
                _ => {}
            }
            data.extend_from_slice(&row.data);
            n += 1;
        }
        match width {
            Some(w) => Ok(Self {
                dims: vec![n, w],
                data,
            }),
            None => shape_err("cannot stack zero tensors"),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Mutable access to the flat buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self { dims, data: self.data })
    }

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Tensor {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let w = self.dims[1];
        Tensor {
            dims: vec![w],
            data: self.data[i * w..(i + 1) * w].to_vec(),
        }
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return shape_err(format!(
                "dot of lengths {} and {}",
                self.len(),
                other.len()
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the largest value; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("shape {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
