//! Matrix-level FP8 quantization at several scale granularities.
//!
//! The attention pipeline uses three of them: one scale per 3D tile for Q and
//! K, one per channel for V and a fixed `1/448` for the softmax output P.
//! Per-token and per-group exist for comparison runs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{self, Fp8Code, Fp8Format, Fp8Kind, ScaleFactor};
use crate::grid::TileMap;
use crate::matrix::Matrix;

/// Tolerance on softmax outputs slightly outside `[0, 1]`.
pub const PROBABILITY_TOLERANCE: f32 = 1e-6;

/// Fixed scale of the softmax output P, mapping 1.0 onto the E4M3 maximum.
pub const P_SCALE: f32 = 1.0 / 448.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[serde(rename = "per_tile_3d")]
    PerTile3d,
    PerChannel,
    PerTensor,
    PerToken,
    PerGroup(usize),
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::PerTile3d => f.write_str("per_tile_3d"),
            Granularity::PerChannel => f.write_str("per_channel"),
            Granularity::PerTensor => f.write_str("per_tensor"),
            Granularity::PerToken => f.write_str("per_token"),
            Granularity::PerGroup(g) => write!(f, "per_group({g})"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    /// Accepts the [`Display`](fmt::Display) spellings, e.g. `per_group(16)`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "per_tile_3d" => Granularity::PerTile3d,
            "per_channel" => Granularity::PerChannel,
            "per_tensor" => Granularity::PerTensor,
            "per_token" => Granularity::PerToken,
            _ => {
                let group = s
                    .strip_prefix("per_group(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|g| g.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown granularity {s:?}")))?;
                Granularity::PerGroup(group)
            }
        })
    }
}

/// Which scale block an element belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockLayout {
    /// `rows_per_block` consecutive rows share a scale (tiles, tokens).
    RowBlocks { rows_per_block: usize },
    Columns,
    Single,
    /// Contiguous runs of `group` channels within each row.
    RowGroups { group: usize, groups_per_row: usize },
}

impl BlockLayout {
    fn block_of(&self, row: usize, col: usize) -> usize {
        match *self {
            BlockLayout::RowBlocks { rows_per_block } => row / rows_per_block,
            BlockLayout::Columns => col,
            BlockLayout::Single => 0,
            BlockLayout::RowGroups {
                group,
                groups_per_row,
            } => row * groups_per_row + col / group,
        }
    }

    fn blocks(&self, rows: usize, cols: usize) -> usize {
        match *self {
            BlockLayout::RowBlocks { rows_per_block } => rows / rows_per_block,
            BlockLayout::Columns => cols,
            BlockLayout::Single => 1,
            BlockLayout::RowGroups { groups_per_row, .. } => rows * groups_per_row,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Vec<Fp8Code>,
    scales: Vec<ScaleFactor>,
    granularity: Granularity,
    format: Fp8Format,
    layout: BlockLayout,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[Fp8Code] {
        &self.codes
    }

    pub fn code(&self, row: usize, col: usize) -> Fp8Code {
        self.codes[row * self.cols + col]
    }

    pub fn scales(&self) -> &[ScaleFactor] {
        &self.scales
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn format(&self) -> Fp8Format {
        self.format
    }

    pub fn block_of(&self, row: usize, col: usize) -> usize {
        self.layout.block_of(row, col)
    }

    pub fn scale_at(&self, row: usize, col: usize) -> ScaleFactor {
        self.scales[self.block_of(row, col)]
    }

    /// Decoded codes without the scale applied, row-major.
    pub fn decoded_codes(&self) -> Vec<f32> {
        let table = self.format.decode_table();
        self.codes.iter().map(|c| table[c.0 as usize]).collect()
    }

    /// Per-element worst-case absolute error bound, `s · half_top_quantum`.
    pub fn error_bound(&self, row: usize, col: usize) -> f32 {
        element_error_bound(self.scale_at(row, col), &self.format)
    }
}

/// Worst-case absolute rounding error of any in-range element quantized with
/// `scale`. Monotone in the scale, so finer blocks never loosen it.
pub fn element_error_bound(scale: ScaleFactor, format: &Fp8Format) -> f32 {
    scale.value() * format.half_top_quantum()
}

fn quantize_with_layout(
    matrix: &Matrix,
    granularity: Granularity,
    layout: BlockLayout,
    format: &Fp8Format,
) -> Result<QuantizedTensor> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("matrix"));
    }
    matrix.check_finite("quantize")?;
    let data = matrix.as_slice();

    // max is exact and order-independent, so a plain scan is deterministic.
    let mut amax = vec![0.0f32; layout.blocks(rows, cols)];
    for r in 0..rows {
        for c in 0..cols {
            let b = layout.block_of(r, c);
            amax[b] = amax[b].max(data[r * cols + c].abs());
        }
    }
    let scales: Vec<ScaleFactor> = amax
        .iter()
        .map(|&a| fp8::scale_from_amax(a, format))
        .collect();

    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = scales[layout.block_of(r, c)].value();
            codes.push(Fp8Code(fp8::encode_unchecked(data[r * cols + c] / s, format)));
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales,
        granularity,
        format: *format,
        layout,
    })
}

/// One scale per tile over all of the tile's rows and channels. Rows must
/// already be in tile-contiguous order.
pub fn quantize_qk_tilewise(
    matrix: &Matrix,
    map: &TileMap,
    format: &Fp8Format,
) -> Result<QuantizedTensor> {
    if matrix.rows() != map.tokens() {
        return Err(Error::ShapeMismatch {
            context: "tile-wise quantization",
            expected: (map.tokens(), matrix.cols()),
            found: matrix.shape(),
        });
    }
    quantize_with_layout(
        matrix,
        Granularity::PerTile3d,
        BlockLayout::RowBlocks {
            rows_per_block: map.tile_volume,
        },
        format,
    )
}

pub fn quantize_v_channelwise(matrix: &Matrix, format: &Fp8Format) -> Result<QuantizedTensor> {
    quantize_with_layout(matrix, Granularity::PerChannel, BlockLayout::Columns, format)
}

/// Softmax output quantized with the fixed scale `1/448`: codes are
/// `encode(p · 448)`.
pub fn quantize_p_tensorwise(p: &Matrix, format: &Fp8Format) -> Result<QuantizedTensor> {
    if format.kind != Fp8Kind::E4M3 {
        return Err(Error::UnsupportedFormat("fixed 1/448 P scale"));
    }
    let (rows, cols) = p.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("matrix"));
    }
    let mut codes = Vec::with_capacity(rows * cols);
    for &v in p.as_slice() {
        if !(-PROBABILITY_TOLERANCE..=1.0 + PROBABILITY_TOLERANCE).contains(&v) {
            return Err(Error::ProbabilityOutOfRange { value: v });
        }
        codes.push(Fp8Code(fp8::encode_unchecked(v * format.max_value, format)));
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales: vec![ScaleFactor::new(P_SCALE)?],
        granularity: Granularity::PerTensor,
        format: *format,
        layout: BlockLayout::Single,
    })
}

/// Quantizes at any row/column granularity. Per-tile needs a tile map; use
/// [`quantize_qk_tilewise`].
pub fn quantize_generic(
    matrix: &Matrix,
    granularity: Granularity,
    format: &Fp8Format,
) -> Result<QuantizedTensor> {
    let layout = match granularity {
        Granularity::PerTile3d => return Err(Error::UnsupportedGranularity("per_tile_3d")),
        Granularity::PerChannel => BlockLayout::Columns,
        Granularity::PerTensor => BlockLayout::Single,
        Granularity::PerToken => BlockLayout::RowBlocks { rows_per_block: 1 },
        Granularity::PerGroup(group) => {
            if group == 0 || !matrix.cols().is_multiple_of(group) {
                return Err(Error::IndivisibleGroup {
                    group,
                    cols: matrix.cols(),
                });
            }
            BlockLayout::RowGroups {
                group,
                groups_per_row: matrix.cols() / group,
            }
        }
    };
    quantize_with_layout(matrix, granularity, layout, format)
}

/// Elementwise `decode(code) · scale(block)`.
pub fn dequantize_tensor(q: &QuantizedTensor) -> Matrix {
    let table = q.format.decode_table();
    let mut data = Vec::with_capacity(q.codes.len());
    for r in 0..q.rows {
        for c in 0..q.cols {
            let code = q.codes[r * q.cols + c];
            data.push(table[code.0 as usize] * q.scale_at(r, c).value());
        }
    }
    Matrix::from_vec(q.rows, q.cols, data).expect("shape preserved")
}
