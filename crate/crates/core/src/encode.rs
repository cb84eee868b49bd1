//! Turning a normalized sample into an `L x K` grid of weights.
//!
//! `[0, 1]` is cut into `M = L * K` equal cells laid out along a flattened
//! index. Seq-first reads the flattened index as `pos * K + dim` (each
//! position owns a contiguous stretch of the line); Embed-first reads it as
//! `dim * L + pos`. An observation at `v` lands at `g = v * M`: cell
//! `floor(g)` keeps `1 - frac(g)` of its unit weight and the next cell in
//! flattened order receives `frac(g)`, so the pair pins `v` down exactly.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncodingScheme {
    #[default]
    SeqFirst,
    EmbedFirst,
}

impl fmt::Display for EncodingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncodingScheme::SeqFirst => "seq-first",
            EncodingScheme::EmbedFirst => "embed-first",
        })
    }
}

impl FromStr for EncodingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "seq-first" | "seqfirst" => Ok(EncodingScheme::SeqFirst),
            "embed-first" | "embedfirst" => Ok(EncodingScheme::EmbedFirst),
            other => Err(invalid(format!("unknown encoding scheme `{other}`"))),
        }
    }
}

/// `len` embeddings (L) of `dim` values each (K).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub len: usize,
    pub dim: usize,
}

impl GridShape {
    pub const PAPER_FULL: GridShape = GridShape {
        len: 1024,
        dim: 384,
    };
    pub const DESK: GridShape = GridShape { len: 64, dim: 64 };

    pub fn new(len: usize, dim: usize) -> Result<Self> {
        if len < 1 || dim < 2 {
            return Err(invalid(format!(
                "grid shape {len}x{dim} needs L >= 1 and K >= 2"
            )));
        }
        Ok(Self { len, dim })
    }

    pub fn cells(&self) -> usize {
        self.len * self.dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub pos: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellAssignment {
    pub primary: Cell,
    /// `None` only at the last cell, which keeps the whole weight.
    pub secondary: Option<Cell>,
    pub w_primary: f64,
    pub w_secondary: f64,
}

fn cell_at(flat: usize, scheme: EncodingScheme, shape: GridShape) -> Cell {
    match scheme {
        EncodingScheme::SeqFirst => Cell {
            pos: flat / shape.dim,
            dim: flat % shape.dim,
        },
        EncodingScheme::EmbedFirst => Cell {
            pos: flat % shape.len,
            dim: flat / shape.len,
        },
    }
}

fn flat_of(cell: Cell, scheme: EncodingScheme, shape: GridShape) -> usize {
    match scheme {
        EncodingScheme::SeqFirst => cell.pos * shape.dim + cell.dim,
        EncodingScheme::EmbedFirst => cell.dim * shape.len + cell.pos,
    }
}

/// Flattened cell index `floor(v * M)`, clamped to the last cell.
pub fn flat_index(v: f64, shape: GridShape) -> usize {
    let m = shape.cells();
    ((v * m as f64).floor() as usize).min(m - 1)
}

pub fn locate(v: f64, scheme: EncodingScheme, shape: GridShape) -> Result<CellAssignment> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(format!("value {v} is outside [0, 1]")));
    }
    let m = shape.cells();
    let g = v * m as f64;
    let i = flat_index(v, shape);
    let primary = cell_at(i, scheme, shape);
    if i == m - 1 {
        return Ok(CellAssignment {
            primary,
            secondary: None,
            w_primary: 1.0,
            w_secondary: 0.0,
        });
    }
    let f = g - i as f64;
    Ok(CellAssignment {
        primary,
        secondary: Some(cell_at(i + 1, scheme, shape)),
        w_primary: 1.0 - f,
        w_secondary: f,
    })
}

/// Dense row-major `[pos][dim]` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGrid {
    pub shape: GridShape,
    pub weights: Vec<f32>,
}

impl EncodedGrid {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            weights: vec![0.0; shape.cells()],
        }
    }

    pub fn get(&self, cell: Cell) -> f32 {
        self.weights[cell.pos * self.shape.dim + cell.dim]
    }

    fn add(&mut self, cell: Cell, w: f32) {
        self.weights[cell.pos * self.shape.dim + cell.dim] += w;
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    /// Occupied cells as `pos dim weight` lines in row-major order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                let _ = writeln!(out, "{} {} {:?}", i / self.shape.dim, i % self.shape.dim, w);
            }
        }
        out
    }
}

pub fn encode(values: &[f64], scheme: EncodingScheme, shape: GridShape) -> Result<EncodedGrid> {
    let mut grid = EncodedGrid::zeros(shape);
    for &v in values {
        let a = locate(v, scheme, shape)?;
        grid.add(a.primary, a.w_primary as f32);
        if let Some(cell) = a.secondary {
            if a.w_secondary > 0.0 {
                grid.add(cell, a.w_secondary as f32);
            }
        }
    }
    Ok(grid)
}

/// Recover the single value a grid encodes, from the weighted centroid of
/// its occupied cells along the flattened index.
pub fn decode_single(grid: &EncodedGrid, scheme: EncodingScheme, shape: GridShape) -> Result<f64> {
    if grid.shape != shape {
        return Err(shape_mismatch(grid.shape, shape));
    }
    let total = grid.total();
    if (total - 1.0).abs() > 1e-4 {
        return Err(invalid(format!(
            "grid holds weight {total}, expected one observation"
        )));
    }
    let mut centroid = 0.0;
    for (i, &w) in grid.weights.iter().enumerate() {
        if w != 0.0 {
            let cell = Cell {
                pos: i / shape.dim,
                dim: i % shape.dim,
            };
            centroid += w as f64 * flat_of(cell, scheme, shape) as f64;
        }
    }
    Ok((centroid / total / shape.cells() as f64).clamp(0.0, 1.0))
}

fn shape_mismatch(got: GridShape, want: GridShape) -> Error {
    shape(format!(
        "grid is {}x{}, expected {}x{}",
        got.len, got.dim, want.len, want.dim
    ))
}
