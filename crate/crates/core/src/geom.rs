//! Pixel-coordinate rectangles and points (inclusive-exclusive bounds).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel coordinates, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Rect {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Checks the rectangle lies within an image of the given dimensions.
    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.x1 < self.x0 || self.y1 < self.y0 {
            return Err(Error::Argument(format!(
                "degenerate rectangle ({},{})-({},{})",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::Argument(format!(
                "rectangle ({},{})-({},{}) out of bounds for {}x{} image",
                self.x0, self.y0, self.x1, self.y1, width, height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub fn new(x: usize, y: usize) -> Point {
        Point { x, y }
    }
}
