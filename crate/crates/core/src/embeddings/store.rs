//! Satellite embedding store and its binary file format.
//!
//! ```text
//! GEOEMB1 <rows> <cols> <dim>\n
//! rows * cols records, row-major (row 0 col 0 first),
//! each record = dim little-endian f32
//! ```

use std::fs;
use std::path::Path;

use super::{BaseEncoder, EmbeddingError, EmbeddingVector, ProjectionHead};
use crate::grid::{Pose, PoseTriplet, TileGrid, TileIndex};
use crate::io::atomic_write;

pub const STORE_MAGIC: &str = "GEOEMB1";

const MAX_HEADER_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    rows: usize,
    cols: usize,
    dim: usize,
    table: Vec<EmbeddingVector>,
}

impl EmbeddingStore {
    /// Builds a store with one vector per tile of `grid`, visited row-major.
    pub fn from_fn<F>(grid: &TileGrid, mut f: F) -> Result<Self, EmbeddingError>
    where
        F: FnMut(TileIndex) -> Result<EmbeddingVector, EmbeddingError>,
    {
        let mut table = Vec::with_capacity(grid.tile_count());
        for linear in 0..grid.tile_count() {
            table.push(f(grid.tile_at(linear))?);
        }
        let dim = table[0].dim();
        if let Some(bad) = table.iter().find(|v| v.dim() != dim) {
            return Err(EmbeddingError::DimensionMismatch { expected: dim, actual: bad.dim() });
        }
        Ok(Self { rows: grid.rows(), cols: grid.cols(), dim, table })
    }

    /// Store whose tile vectors are the pose-aware embeddings of an
    /// observation taken at each tile center facing +x.
    pub fn synthesize<E: BaseEncoder>(
        grid: &TileGrid,
        head: &ProjectionHead,
        encoder: &E,
    ) -> Result<Self, EmbeddingError> {
        Self::from_fn(grid, |tile| {
            let c = grid.tile_center(tile);
            let base = encoder.encode(&Pose::new(c.x, c.y, 0.0));
            head.pose_aware_embedding(&base, &PoseTriplet::default())
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, tile: TileIndex) -> &EmbeddingVector {
        &self.table[tile.row * self.cols + tile.col]
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.table
    }

    pub fn check_grid(&self, grid: &TileGrid) -> Result<(), EmbeddingError> {
        if grid.rows() != self.rows || grid.cols() != self.cols {
            return Err(EmbeddingError::GridMismatch {
                declared_rows: self.rows,
                declared_cols: self.cols,
                rows: grid.rows(),
                cols: grid.cols(),
            });
        }
        Ok(())
    }
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize), EmbeddingError> {
    let window = &bytes[..bytes.len().min(MAX_HEADER_LEN)];
    let newline = window
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| EmbeddingError::MalformedHeader("missing newline-terminated header".into()))?;
    let line = std::str::from_utf8(&window[..newline])
        .map_err(|_| EmbeddingError::MalformedHeader("header is not UTF-8".into()))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 4 || fields[0] != STORE_MAGIC {
        return Err(EmbeddingError::MalformedHeader(format!(
            "expected `{STORE_MAGIC} rows cols dim`, got `{line}`"
        )));
    }
    let num = |s: &str, name: &str| -> Result<usize, EmbeddingError> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(EmbeddingError::MalformedHeader(format!("{name} must be a positive integer, got `{s}`"))),
        }
    };
    Ok((num(fields[1], "rows")?, num(fields[2], "cols")?, num(fields[3], "dim")?, newline + 1))
}

/// Parses a store image. `expected_dim`, when given, must match the header.
pub fn decode_store(
    bytes: &[u8],
    grid: &TileGrid,
    expected_dim: Option<usize>,
) -> Result<EmbeddingStore, EmbeddingError> {
    let (rows, cols, dim, offset) = parse_header(bytes)?;
    if rows != grid.rows() || cols != grid.cols() {
        return Err(EmbeddingError::GridMismatch {
            declared_rows: rows,
            declared_cols: cols,
            rows: grid.rows(),
            cols: grid.cols(),
        });
    }
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(EmbeddingError::DimensionMismatch { expected, actual: dim });
        }
    }
    let payload = &bytes[offset..];
    let record_bytes = dim * 4;
    let expected = rows * cols;
    let actual = payload.len() / record_bytes;
    if actual != expected {
        return Err(EmbeddingError::CountMismatch { expected, actual });
    }
    if !payload.len().is_multiple_of(record_bytes) {
        return Err(EmbeddingError::TruncatedRecord(payload.len() % record_bytes));
    }
    let mut table = Vec::with_capacity(expected);
    for (record, chunk) in payload.chunks_exact(record_bytes).enumerate() {
        let mut values = Vec::with_capacity(dim);
        for (component, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(EmbeddingError::NonFinite { record, component });
            }
            values.push(v as f64);
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(EmbeddingError::ZeroVector(record));
        }
        table.push(EmbeddingVector::from_near_unit(values)?);
    }
    Ok(EmbeddingStore { rows, cols, dim, table })
}

pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let header = format!("{STORE_MAGIC} {} {} {}\n", store.rows, store.cols, store.dim);
    let mut out = Vec::with_capacity(header.len() + store.len() * store.dim * 4);
    out.extend_from_slice(header.as_bytes());
    for v in &store.table {
        for &x in v.values() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_store(path: &Path, grid: &TileGrid, expected_dim: Option<usize>) -> Result<EmbeddingStore, EmbeddingError> {
    let bytes = fs::read(path).map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    decode_store(&bytes, grid, expected_dim)
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<(), EmbeddingError> {
    atomic_write(path, &encode_store(store))
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })
}
