//! `MaskLattice`: the H×W grid of reals that carries ground-truth masks,
//! probability maps, and diffusion-chain states.
//!
//! A lattice is just a shape plus a flat row-major buffer. Interpretation is
//! by convention: binary masks hold exactly {0, 1}, probability maps hold
//! [0, 1], Gaussian-chain states are unbounded.

/// H×W grid of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLattice {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskLattice {
    /// All-zeros lattice. Panics if either dimension is zero.
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "lattice dimensions must be positive");
        MaskLattice { height, width, data: vec![0.0; height * width] }
    }

    /// Lattice filled with a constant.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        let mut l = Self::zeros(height, width);
        l.data.fill(value);
        l
    }

    /// Wraps an existing row-major buffer. Panics on length mismatch.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "lattice dimensions must be positive");
        assert_eq!(data.len(), height * width, "buffer length does not match shape");
        MaskLattice { height, width, data }
    }

    /// Builds a lattice by evaluating `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut l = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                l.data[r * width + c] = f(r, c);
            }
        }
        l
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Elementwise map into a new lattice.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        MaskLattice {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(move |&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape lattices.
    pub fn zip_map(&self, other: &MaskLattice, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_same_shape(self, other);
        MaskLattice {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Mean over all pixels.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// True when every value is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// True when every value lies in [0, 1].
    pub fn is_probability(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Mirrors the lattice left-right.
    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }
}

/// Panics unless the two lattices share a shape.
pub fn assert_same_shape(a: &MaskLattice, b: &MaskLattice) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "lattice shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}
