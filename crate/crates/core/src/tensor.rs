//! Dense row-major tensors and their binary record format.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense n-dimensional array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        Self::from_vec(shape, data).expect("valid shape")
    }

    /// Entries drawn i.i.d. from `U(lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(lo + (hi - lo) * rng.uniform()))
            .collect();
        Self::from_vec(shape, data).expect("valid shape")
    }

    pub fn with_grad(mut self) -> Self {
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
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        for (a, &b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Selects columns of a matrix, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "column {bad} out of range for {c} columns"
            )));
        }
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self::from_vec(&[r, cols.len()], data)
    }

    /// Writes the record: `u32 rank`, `rank x u32 dims`, then the elements
    /// as little-endian `f64`.
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &x in &self.data {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_record<R: Read>(r: &mut R) -> Result<Self> {
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        Self::from_vec(&shape, data)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
