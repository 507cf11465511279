//! Forward-difference derivative operators.

use serde::{Deserialize, Serialize};

use crate::conv::Boundary;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// A derivative direction; the second-order members compose the first-order ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    X,
    Y,
    XX,
    YY,
    XY,
}

impl Direction {
    pub const FIRST_ORDER: [Direction; 2] = [Direction::X, Direction::Y];
    pub const SECOND_ORDER: [Direction; 5] = [Direction::X, Direction::Y, Direction::XX, Direction::YY, Direction::XY];

    pub fn for_order(order: usize) -> &'static [Direction] {
        if order >= 2 {
            &Self::SECOND_ORDER
        } else {
            &Self::FIRST_ORDER
        }
    }

    /// First-order factors applied right to left.
    fn factors(self) -> &'static [Direction] {
        match self {
            Direction::X => &[Direction::X],
            Direction::Y => &[Direction::Y],
            Direction::XX => &[Direction::X, Direction::X],
            Direction::YY => &[Direction::Y, Direction::Y],
            Direction::XY => &[Direction::X, Direction::Y],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::X => "x",
            Direction::Y => "y",
            Direction::XX => "xx",
            Direction::YY => "yy",
            Direction::XY => "xy",
        }
    }
}

/// Derivative images keyed by direction, all with the source image's dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField<T> {
    pub members: Vec<(Direction, ImageBuffer<T>)>,
}

impl<T: Real> GradientField<T> {
    pub fn get(&self, dir: Direction) -> Option<&ImageBuffer<T>> {
        self.members.iter().find(|(d, _)| *d == dir).map(|(_, m)| m)
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.members.iter().map(|(d, _)| *d).collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.members[0].1.dims()
    }

    /// Sum of all squared entries.
    pub fn energy(&self) -> T {
        self.members.iter().flat_map(|(_, m)| m.data().iter()).map(|&v| v * v).sum()
    }
}

fn first_order<T: Real>(img: &ImageBuffer<T>, dir: Direction, boundary: Boundary) -> ImageBuffer<T> {
    let (w, h) = img.dims();
    let periodic = boundary != Boundary::Replicate;
    ImageBuffer::from_fn(w, h, |x, y| {
        let (nx, ny) = match dir {
            Direction::X => (x + 1, y),
            _ => (x, y + 1),
        };
        if nx < w && ny < h {
            img.get(nx, ny) - img.get(x, y)
        } else if periodic {
            img.get(nx % w, ny % h) - img.get(x, y)
        } else {
            T::zero()
        }
    })
}

fn first_order_adjoint<T: Real>(g: &ImageBuffer<T>, dir: Direction, boundary: Boundary) -> ImageBuffer<T> {
    let (w, h) = g.dims();
    let periodic = boundary != Boundary::Replicate;
    ImageBuffer::from_fn(w, h, |x, y| {
        let (len, pos) = match dir {
            Direction::X => (w, x),
            _ => (h, y),
        };
        let at = |p: usize| match dir {
            Direction::X => g.get(p, y),
            _ => g.get(x, p),
        };
        let mut v = T::zero();
        if pos + 1 < len || periodic {
            v = v - at(pos);
        }
        if pos >= 1 {
            v = v + at(pos - 1);
        } else if periodic {
            v = v + at(len - 1);
        }
        v
    })
}

/// Applies the derivative `dir` to `img`.
pub fn derivative<T: Real>(img: &ImageBuffer<T>, dir: Direction, boundary: Boundary) -> ImageBuffer<T> {
    let mut out = img.clone();
    for &f in dir.factors() {
        out = first_order(&out, f, boundary);
    }
    out
}

/// Adjoint of [`derivative`] under the same boundary policy.
pub fn derivative_adjoint<T: Real>(g: &ImageBuffer<T>, dir: Direction, boundary: Boundary) -> ImageBuffer<T> {
    let mut out = g.clone();
    for &f in dir.factors().iter().rev() {
        out = first_order_adjoint(&out, f, boundary);
    }
    out
}

/// Order-1 gives `{x, y}`; order-2 adds `{xx, yy, xy}`.
pub fn gradient<T: Real>(img: &ImageBuffer<T>, order: usize, boundary: Boundary) -> Result<GradientField<T>> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidConfig(format!("derivative order {order} not in 1..=2")));
    }
    let members = Direction::for_order(order).iter().map(|&d| (d, derivative(img, d, boundary))).collect();
    Ok(GradientField { members })
}
