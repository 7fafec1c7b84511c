//! Tile-grid geometry for the search area.
//!
//! The world frame is a local metric plane (x east, y north, meters). A
//! [`TileGrid`] partitions the rectangle `[origin, origin + (cols * spacing,
//! rows * spacing))` into square tiles. Tile edges follow a half-open
//! convention: the min edge belongs to the tile, the max edge to its
//! neighbour.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("invalid grid argument: {0}")]
    InvalidArgument(String),
    #[error("position ({x}, {y}) lies outside the tile grid")]
    OutOfBounds { x: f64, y: f64 },
}

/// A point in the local world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Position plus heading (radians, counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub row: usize,
    pub col: usize,
}

impl TileIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// In-tile displacement from the tile center plus the wrapped heading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseTriplet {
    pub dx: f64,
    pub dy: f64,
    pub psi: f64,
}

/// Wraps an angle into `[-PI, PI)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*PI for tiny negative inputs
    if wrapped >= PI {
        wrapped -= 2.0 * PI;
    }
    wrapped
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileGrid {
    origin: Point,
    spacing: f64,
    rows: usize,
    cols: usize,
}

impl TileGrid {
    pub fn new(origin: Point, spacing: f64, rows: usize, cols: usize) -> Result<Self, GridError> {
        if !origin.is_finite() {
            return Err(GridError::InvalidArgument(format!("origin {origin} is not finite")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(GridError::InvalidArgument(format!(
                "spacing must be positive and finite, got {spacing}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(GridError::InvalidArgument(format!(
                "rows and cols must be at least 1, got {rows}x{cols}"
            )));
        }
        Ok(Self { origin, spacing, rows, cols })
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.spacing
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.spacing
    }

    /// Exclusive max corner.
    pub fn max_corner(&self) -> Point {
        Point::new(self.origin.x + self.width(), self.origin.y + self.height())
    }

    pub fn center_point(&self) -> Point {
        Point::new(self.origin.x + 0.5 * self.width(), self.origin.y + 0.5 * self.height())
    }

    pub fn contains(&self, p: Point) -> bool {
        let max = self.max_corner();
        p.x >= self.origin.x && p.x < max.x && p.y >= self.origin.y && p.y < max.y
    }

    pub fn contains_tile(&self, tile: TileIndex) -> bool {
        tile.row < self.rows && tile.col < self.cols
    }

    /// Row-major linear index, row 0 col 0 first.
    pub fn linear_index(&self, tile: TileIndex) -> usize {
        tile.row * self.cols + tile.col
    }

    pub fn tile_at(&self, linear: usize) -> TileIndex {
        TileIndex::new(linear / self.cols, linear % self.cols)
    }

    pub fn tile_of(&self, p: Point) -> Result<TileIndex, GridError> {
        if !self.contains(p) {
            return Err(GridError::OutOfBounds { x: p.x, y: p.y });
        }
        // p.x < max.x can still round to cols when p.x is within an ulp of the edge
        let col = (((p.x - self.origin.x) / self.spacing).floor() as usize).min(self.cols - 1);
        let row = (((p.y - self.origin.y) / self.spacing).floor() as usize).min(self.rows - 1);
        Ok(TileIndex::new(row, col))
    }

    pub fn tile_center(&self, tile: TileIndex) -> Point {
        Point::new(
            self.origin.x + (tile.col as f64 + 0.5) * self.spacing,
            self.origin.y + (tile.row as f64 + 0.5) * self.spacing,
        )
    }

    pub fn displacement_in_tile(&self, p: Point, heading: f64) -> Result<PoseTriplet, GridError> {
        let center = self.tile_center(self.tile_of(p)?);
        Ok(PoseTriplet { dx: p.x - center.x, dy: p.y - center.y, psi: wrap_angle(heading) })
    }
}
