//! Binary pixel grids and small shared raster helpers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary H×W grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitGrid {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(h: usize, w: usize) -> Self {
        BitGrid { h, w, bits: vec![false; h * w] }
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        BitGrid { h, w, bits: vec![value; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("{}x{} grid needs {} bits, got {}", h, w, h * w, bits.len())));
        }
        Ok(BitGrid { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BitGrid) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// True if every set bit of `self` is also set in `other`.
    pub fn subset_of(&self, other: &BitGrid) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// {0,1}-valued tensor of shape [H,W].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect();
        Tensor::from_vec(&[self.h, self.w], data).unwrap()
    }
}

/// Boundary handling for blurs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Zero,
    Reflect,
}

/// Normalized 1-D Gaussian taps truncated at |t| <= 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).floor() as usize;
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur of an H×W grid. The square truncation window
/// makes this exactly the convolution with the normalized 2-D kernel.
pub fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64, boundary: Boundary) -> Vec<f64> {
    assert_eq!(values.len(), h * w);
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;

    let resolve = |idx: isize, n: isize| -> Option<usize> {
        match boundary {
            Boundary::Zero => {
                if idx < 0 || idx >= n {
                    None
                } else {
                    Some(idx as usize)
                }
            }
            Boundary::Reflect => {
                // Mirror about the edge pixels (symmetric, no repeat).
                let mut i = idx;
                let period = 2 * n.max(1);
                i = i.rem_euclid(period);
                if i >= n {
                    i = period - 1 - i;
                }
                Some(i as usize)
            }
        }
    };

    // Horizontal pass.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in k.iter().enumerate() {
                let sx = x as isize + ki as isize - radius;
                if let Some(sx) = resolve(sx, w as isize) {
                    acc += kv * values[y * w + sx];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in k.iter().enumerate() {
                let sy = y as isize + ki as isize - radius;
                if let Some(sy) = resolve(sy, h as isize) {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
