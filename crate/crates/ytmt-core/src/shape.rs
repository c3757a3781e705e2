use std::fmt;

use crate::error::{Error, Result};

/// Tensor extents, outermost dimension first. Most of the crate works with
/// rank-4 `(n, c, h, w)` shapes; reductions produce rank-4 shapes with
/// singleton extents so broadcasting stays rank-uniform.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape(vec![n, c, h, w])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    /// Interpret as `(n, c, h, w)`; errors on other ranks.
    pub fn as_nchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(op, format!("expected rank-4 shape, got {self}"))),
        }
    }

    /// Shape both operands broadcast to, or an error. Ranks must match and
    /// each extent pair must be equal or contain a 1 (full numpy-style
    /// rank promotion is deliberately out of scope).
    pub fn broadcast_with(&self, other: &Shape, op: &'static str) -> Result<Shape> {
        if self.rank() != other.rank() {
            return Err(Error::dim(op, format!("rank mismatch: {self} vs {other}")));
        }
        let dims = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| {
                if a == b || b == 1 {
                    Ok(a)
                } else if a == 1 {
                    Ok(b)
                } else {
                    Err(Error::dim(op, format!("incompatible shapes: {self} vs {other}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Shape(dims))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_are_row_major() {
        let s = Shape::nchw(2, 3, 4, 5);
        assert_eq!(s.strides(), vec![60, 20, 5, 1]);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn broadcast_accepts_singleton_extents() {
        let a = Shape::nchw(2, 8, 16, 16);
        let b = Shape::nchw(2, 8, 1, 1);
        assert_eq!(a.broadcast_with(&b, "mul").unwrap(), a);
        assert_eq!(b.broadcast_with(&a, "mul").unwrap(), a);
    }

    #[test]
    fn broadcast_rejects_mismatched_extents() {
        let a = Shape::nchw(2, 8, 16, 16);
        let b = Shape::nchw(2, 4, 16, 16);
        assert!(a.broadcast_with(&b, "mul").is_err());
    }
}
