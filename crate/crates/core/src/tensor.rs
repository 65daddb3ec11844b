//! Dense tensors: flat row-major `f64` storage with a shape vector.
//!
//! Spatial tensors use the axis order `[height, width, channels]`, so the
//! pixel at column `x`, row `y` lives at flat offset `(y * width + x) *
//! channels`. Matrices are `[rows, cols]`.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Gradient buffer, allocated only on parameter tensors during training.
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expect} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Extents of a `[height, width, channels]` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Shape(format!("expected rank-3 tensor, got {other:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    pub fn dim1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            &[n] => Ok(n),
            other => Err(Error::Shape(format!("expected rank-1 tensor, got {other:?}"))),
        }
    }

    /// Flat offset of `(y, x, c)` in a `[h, w, c]` tensor. No bounds checks
    /// beyond debug assertions; callers validate dims up front.
    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(y < self.shape[0] && x < w && c < ch);
        self.values[(y * w + x) * ch + c]
    }

    /// One channel of a `[h, w, c]` tensor as a dense `h*w` plane.
    pub fn channel_plane(&self, c: usize) -> Result<Vec<f64>> {
        let (h, w, ch) = self.dims3()?;
        if c >= ch {
            return Err(Error::Shape(format!("channel {c} out of range 0..{ch}")));
        }
        Ok((0..h * w).map(|p| self.values[p * ch + c]).collect())
    }

    /// Mirror a `[h, w, c]` tensor along the horizontal axis.
    pub fn hflip(&self) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        let mut out = vec![0.0; self.values.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + (w - 1 - x)) * c;
                let dst = (y * w + x) * c;
                out[dst..dst + c].copy_from_slice(&self.values[src..src + c]);
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    // ── Gradient slot (used by the trainer on parameter tensors) ──────

    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
