use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Ordered tensor extents. 4-D tensors use (batch, channels, height, width).
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                dims,
                reason: "rank must be between 1 and 4",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "every extent must be at least 1",
            });
        }
        Ok(Shape(dims))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// `(n, c, h, w)` of a rank-4 shape.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::InvalidShape {
                dims: self.0.clone(),
                reason: "expected a rank-4 (N, C, H, W) tensor",
            }),
        }
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_high_rank() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![1; 5]).is_err());
        assert!(Shape::new(Vec::new()).is_err());
    }

    #[test]
    fn numel_and_strides() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.numel(), 24);
        assert_eq!(s.strides(), vec![12, 4, 1]);
    }
}
