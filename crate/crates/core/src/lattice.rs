//! Rectangular pixel lattice with a 4-connected neighborhood.
//!
//! Pixels are indexed `0..height*width` in row-major order: pixel `(row, col)`
//! has index `row * width + col`. All label and abundance files rely on this
//! ordering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighborhood system shared by both label fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
}

/// The neighborhood used throughout the crate.
pub const CONNECTIVITY: Connectivity = Connectivity::Four;

const OFFSETS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    height: usize,
    width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid_param(format!(
                "lattice must be non-empty, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels `P`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        assert!(row < self.height && col < self.width, "({row}, {col}) outside lattice");
        row * self.width + col
    }

    pub fn coords(&self, p: usize) -> (usize, usize) {
        assert!(p < self.len(), "pixel {p} outside lattice of {} pixels", self.len());
        (p / self.width, p % self.width)
    }

    /// Iterate over the 4-connected neighbors of `p`, clipped at the borders.
    ///
    /// Panics if `p` is out of range.
    pub fn neighbors(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        let (row, col) = self.coords(p);
        OFFSETS.iter().filter_map(move |&(dr, dc)| {
            let r = row.checked_add_signed(dr)?;
            let c = col.checked_add_signed(dc)?;
            (r < self.height && c < self.width).then(|| r * self.width + c)
        })
    }

    /// Color of `p` in the two-coloring used for parallel label sweeps.
    pub fn color(&self, p: usize) -> usize {
        let (row, col) = self.coords(p);
        (row + col) % 2
    }

    /// Split the pixels into two sets such that no two pixels of the same set
    /// are neighbors. The first set holds pixels with even `row + col`.
    pub fn checkerboard_partition(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&p| self.color(p) == 0)
    }
}
