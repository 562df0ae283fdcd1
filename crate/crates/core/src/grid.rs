//! The normalized voxel grid shared by keypoints, flows and sampling.
//!
//! Voxel centers sit at `linspace(-1, 1, n)` on every axis. A voxel with
//! indices `(d, h, w)` has coordinate `(x, y, z) = (lin_w, lin_h, lin_d)`,
//! and flattened index `(d * H + h) * W + w`.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

/// `linspace(-1, 1, n)`; a single sample sits at 0.
pub fn linspace(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

impl VoxelGrid {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Self { depth, height, width }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn coord(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        [linspace(w, self.width), linspace(h, self.height), linspace(d, self.depth)]
    }

    /// Voxel-center coordinates as a `(V, 3)` tensor.
    pub fn coords<T: Real>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.len() * 3);
        for d in 0..self.depth {
            for h in 0..self.height {
                for w in 0..self.width {
                    data.extend(self.coord(d, h, w).map(T::from_f64_lossy));
                }
            }
        }
        Tensor::from_vec(&[self.len(), 3], data)
    }
}
