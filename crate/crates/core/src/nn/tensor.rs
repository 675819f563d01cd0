//! Dense C×H×W value container used inside the network.

use crate::lattice::MaskLattice;

/// Channel-major float tensor: `data[c*h*w + y*w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { c: 1, h: 1, w: 1, data: vec![v] }
    }

    pub fn from_lattice(l: &MaskLattice) -> Self {
        Tensor { c: 1, h: l.height(), w: l.width(), data: l.as_slice().to_vec() }
    }

    /// Single-channel tensors convert back to a lattice.
    pub fn to_lattice(&self) -> MaskLattice {
        assert_eq!(self.c, 1, "lattice conversion needs a single channel");
        MaskLattice::from_vec(self.h, self.w, self.data.clone())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar tensor");
        self.data[0]
    }
}
