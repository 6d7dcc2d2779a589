//! Single-head attention forward passes.
//!
//! Three entry points share one kernel:
//!
//! - [`dense_reference`]: full softmax attention in `f32`.
//! - [`sparse_reference`]: the same with keys restricted to a [`BlockMask`].
//! - [`fps_forward`]: tile-wise FP8 Q/K, channel-wise FP8 V, fixed-scale FP8
//!   P, restricted to the sliding-tile mask.
//!
//! Quantized operands enter the kernel as decoded codes with their scales
//! applied afterwards: a logit is `dot(q̂, k̂) · (s_q · s_k) · softmax_scale`
//! and an output channel is `Σ p̂·v̂ · (s_p · s_v)`. With every scale equal to
//! one the arithmetic is exactly that of the references, which is what makes
//! passthrough bitwise identical to [`sparse_reference`].
//!
//! Determinism: each dot product uses a fixed eight-lane reduction, keys are
//! visited in ascending row order within ascending allowed tiles, and work is
//! split across threads only by query row. Results do not depend on the
//! number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fp8::{self, Fp8Format};
use crate::grid::TileMap;
use crate::matrix::Matrix;
use crate::quantize::{self, Granularity, QuantizedTensor, P_SCALE};
use crate::sparsity::{build_block_mask, BlockMask, WindowSpec};

/// Q, K and V for one head with rows in tile-contiguous order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    map: TileMap,
}

impl AttentionInputs {
    /// Rows must already follow [`TileMap::tile_contiguous_order`].
    pub fn new(q: Matrix, k: Matrix, v: Matrix, map: TileMap) -> Result<Self> {
        let expected = (map.tokens(), map.grid.d_model);
        for (m, context) in [(&q, "q"), (&k, "k"), (&v, "v")] {
            if m.shape() != expected {
                return Err(Error::ShapeMismatch {
                    context,
                    expected,
                    found: m.shape(),
                });
            }
            m.check_finite(context)?;
        }
        Ok(Self { q, k, v, map })
    }

    /// Takes rows in row-major grid order and reorders them tile-contiguously.
    pub fn from_grid_order(q: &Matrix, k: &Matrix, v: &Matrix, map: TileMap) -> Result<Self> {
        let order = map.tile_contiguous_order();
        Self::new(
            q.gather_rows(&order)?,
            k.gather_rows(&order)?,
            v.gather_rows(&order)?,
            map,
        )
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn map(&self) -> &TileMap {
        &self.map
    }

    pub fn tokens(&self) -> usize {
        self.q.rows()
    }

    pub fn d_model(&self) -> usize {
        self.q.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpsConfig {
    /// Format for Q, K and V. P always uses E4M3 with the fixed 1/448 scale.
    pub format: Fp8Format,
    pub window: WindowSpec,
    pub softmax_scale: f32,
    /// Skip all quantization.
    pub passthrough: bool,
    /// Scale granularity of Q and K: per-tile normally; per-token or
    /// per-tensor for comparison runs.
    pub qk_granularity: Granularity,
}

impl FpsConfig {
    /// Per-tile Q/K and `softmax_scale = 1/√d`.
    pub fn new(format: Fp8Format, window: WindowSpec, d_model: usize) -> Self {
        Self {
            format,
            window,
            softmax_scale: default_softmax_scale(d_model),
            passthrough: false,
            qk_granularity: Granularity::PerTile3d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        check_softmax_scale(self.softmax_scale)?;
        match self.qk_granularity {
            Granularity::PerTile3d | Granularity::PerToken | Granularity::PerTensor => Ok(()),
            Granularity::PerChannel => Err(Error::UnsupportedGranularity("per_channel Q/K")),
            Granularity::PerGroup(_) => Err(Error::UnsupportedGranularity("per_group Q/K")),
        }
    }
}

pub fn default_softmax_scale(d_model: usize) -> f32 {
    1.0 / (d_model as f32).sqrt()
}

fn check_softmax_scale(s: f32) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSoftmaxScale(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// L×d output, rows in the same (tile-contiguous) order as the inputs.
    pub output: Matrix,
    /// Largest `|Σ_k p_k − 1|` over query rows, measured on the softmax
    /// weights before P is quantized.
    pub max_row_sum_error: f64,
}

/// Operands and scales for one kernel launch.
struct Kernel<'a> {
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    d: usize,
    /// Per query row.
    q_scale: &'a [f32],
    /// Per key row.
    k_scale: &'a [f32],
    /// Per value channel.
    v_scale: &'a [f32],
    softmax_scale: f32,
    quantize_p: bool,
}

enum Keys<'a> {
    Dense,
    Masked { mask: &'a BlockMask, tile_volume: usize },
}

/// Query rows that share each loaded key or value row.
const ROW_GROUP: usize = 4;
/// Keys per cache block.
const KEY_BLOCK: usize = 64;
/// Upper bound on query rows per task.
const MAX_CHUNK_ROWS: usize = 64;

/// Eight-lane dot products of `R` query rows against one key. Each product
/// uses the same fixed combination order as [`dot`].
#[inline(always)]
fn dot_rows<const R: usize>(qs: &[&[f32]; R], k: &[f32]) -> [f32; R] {
    let (kc, kr) = k.as_chunks::<8>();
    let qc: [&[[f32; 8]]; R] = std::array::from_fn(|g| qs[g].as_chunks::<8>().0);
    let mut acc = [[0.0f32; 8]; R];
    for (ci, kc) in kc.iter().enumerate() {
        for g in 0..R {
            let q = &qc[g][ci];
            for l in 0..8 {
                acc[g][l] += q[l] * kc[l];
            }
        }
    }
    let tail = kc.len() * 8;
    for (l, &kv) in kr.iter().enumerate() {
        for g in 0..R {
            acc[g][l] += qs[g][tail + l] * kv;
        }
    }
    acc.map(|a| ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])))
}

/// Eight-lane dot product with a fixed combination order.
#[cfg(test)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    dot_rows(&[a], b)[0]
}

#[inline(always)]
fn reduce_lanes(a: [f64; 8]) -> f64 {
    ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]))
}

/// A run of consecutive key rows and where their weights start in a row of
/// the weight buffer.
#[derive(Clone, Copy)]
struct KeyBlock {
    start: usize,
    end: usize,
    offset: usize,
}

fn key_blocks(segments: &[(usize, usize)]) -> (Vec<KeyBlock>, usize) {
    let mut blocks = Vec::new();
    let mut offset = 0;
    for &(s, e) in segments {
        let mut start = s;
        while start < e {
            let end = (start + KEY_BLOCK).min(e);
            blocks.push(KeyBlock { start, end, offset });
            offset += end - start;
            start = end;
        }
    }
    (blocks, offset)
}

impl Kernel<'_> {
    fn tokens(&self) -> usize {
        self.q.len() / self.d
    }

    #[inline(always)]
    fn logits_group<const R: usize>(&self, first: usize, local: usize, b: KeyBlock, n: usize, weights: &mut [f32]) {
        let d = self.d;
        let len = b.end - b.start;
        let qs: [&[f32]; R] = std::array::from_fn(|g| &self.q[(first + g) * d..(first + g + 1) * d]);
        let sq: [f32; R] = std::array::from_fn(|g| self.q_scale[first + g]);
        let mut rows = weights[local * n..(local + R) * n].chunks_exact_mut(n);
        let w: [&mut [f32]; R] = std::array::from_fn(|_| &mut rows.next().unwrap()[b.offset..b.offset + len]);
        let keys = self.k[b.start * d..b.end * d].chunks_exact(d);
        for (j, (k, &sk)) in keys.zip(&self.k_scale[b.start..b.end]).enumerate() {
            let raw = dot_rows(&qs, k);
            for g in 0..R {
                w[g][j] = raw[g] * (sq[g] * sk) * self.softmax_scale;
            }
        }
    }

    /// Adds `Σ_j p_j · v_j` over one key block into `R` output rows, keeping
    /// the ascending key order of every sum.
    #[inline(always)]
    fn accumulate_group<const R: usize>(&self, local: usize, b: KeyBlock, n: usize, weights: &[f32], out: &mut [f32]) {
        let d = self.d;
        let len = b.end - b.start;
        let values = &self.v[b.start * d..b.end * d];
        let p: [&[f32]; R] = std::array::from_fn(|g| &weights[(local + g) * n + b.offset..][..len]);
        let mut rows = out[local * d..(local + R) * d].chunks_exact_mut(d);
        let o: [&mut [f32]; R] = std::array::from_fn(|_| rows.next().unwrap());
        for ci in 0..d / 8 {
            let mut acc: [[f32; 8]; R] = std::array::from_fn(|g| o[g].as_chunks::<8>().0[ci]);
            for (j, v) in values.chunks_exact(d).enumerate() {
                let vc = &v.as_chunks::<8>().0[ci];
                for g in 0..R {
                    let pj = p[g][j];
                    for l in 0..8 {
                        acc[g][l] += pj * vc[l];
                    }
                }
            }
            for g in 0..R {
                o[g].as_chunks_mut::<8>().0[ci] = acc[g];
            }
        }
        for c in d / 8 * 8..d {
            for g in 0..R {
                let mut a = o[g][c];
                for (j, v) in values.chunks_exact(d).enumerate() {
                    a += p[g][j] * v[c];
                }
                o[g][c] = a;
            }
        }
    }

    /// Softmax (and optional P quantization) of one weight row in place.
    /// Returns `|Σ p − 1|` before quantization.
    #[inline(always)]
    fn softmax_row(&self, i: usize, w: &mut [f32]) -> Result<f64> {
        if w.is_empty() {
            return Err(Error::EmptyRow(i));
        }
        if let Some(&bad) = w.iter().find(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                value: bad,
                context: "attention logits",
            });
        }
        let max = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        // Eight f64 lanes keep the denominator accurate over tens of
        // thousands of keys, in a fixed order.
        let mut lanes = [0.0f64; 8];
        for chunk in w.chunks_mut(8) {
            for (x, lane) in chunk.iter_mut().zip(lanes.iter_mut()) {
                let e = libm::expf(*x - max);
                *x = e;
                *lane += e as f64;
            }
        }
        let inv = 1.0 / reduce_lanes(lanes) as f32;

        let mut lanes = [0.0f64; 8];
        for chunk in w.chunks_mut(8) {
            for (x, lane) in chunk.iter_mut().zip(lanes.iter_mut()) {
                *x *= inv;
                *lane += *x as f64;
            }
        }
        let check = reduce_lanes(lanes);
        if self.quantize_p {
            for x in w.iter_mut() {
                *x = fp8::round_e4m3_nonneg(*x * 448.0);
            }
        }
        Ok((check - 1.0).abs())
    }

    /// Output rows `first..first + out.len() / d`, all attending to the
    /// same ascending key `segments`.
    fn chunk(&self, first: usize, segments: &[(usize, usize)], out: &mut [f32]) -> Result<f64> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            return unsafe { self.chunk_avx2(first, segments, out) };
        }
        self.chunk_portable(first, segments, out)
    }

    /// The same code compiled for wider vectors. No FMA is enabled and Rust
    /// never contracts `a * b + c`, so results equal the portable build.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn chunk_avx2(&self, first: usize, segments: &[(usize, usize)], out: &mut [f32]) -> Result<f64> {
        self.chunk_portable(first, segments, out)
    }

    #[inline(always)]
    fn chunk_portable(&self, first: usize, segments: &[(usize, usize)], out: &mut [f32]) -> Result<f64> {
        let d = self.d;
        let m = out.len() / d;
        let (blocks, n) = key_blocks(segments);
        let mut weights = vec![0.0f32; m * n];
        let grouped = m / ROW_GROUP * ROW_GROUP;

        for &b in &blocks {
            for r in (0..grouped).step_by(ROW_GROUP) {
                self.logits_group::<ROW_GROUP>(first + r, r, b, n, &mut weights);
            }
            for r in grouped..m {
                self.logits_group::<1>(first + r, r, b, n, &mut weights);
            }
        }

        let mut worst = 0.0f64;
        for r in 0..m {
            worst = worst.max(self.softmax_row(first + r, &mut weights[r * n..(r + 1) * n])?);
        }

        out.fill(0.0);
        for &b in &blocks {
            for r in (0..grouped).step_by(ROW_GROUP) {
                self.accumulate_group::<ROW_GROUP>(r, b, n, &weights, out);
            }
            for r in grouped..m {
                self.accumulate_group::<1>(r, b, n, &weights, out);
            }
        }

        let p_scale = if self.quantize_p { P_SCALE } else { 1.0 };
        for row in out.chunks_mut(d) {
            for (o, &sv) in row.iter_mut().zip(self.v_scale) {
                *o = *o * p_scale * sv;
            }
        }
        Ok(worst)
    }

    fn run(&self, keys: Keys<'_>) -> Result<AttentionOutput> {
        let l = self.tokens();
        let d = self.d;
        let mut output = vec![0.0f32; l * d];
        // Masked chunks must not straddle tiles.
        let chunk_rows = match keys {
            Keys::Dense => MAX_CHUNK_ROWS,
            Keys::Masked { tile_volume, .. } => (1..=MAX_CHUNK_ROWS.min(tile_volume))
                .rev()
                .find(|s| tile_volume % s == 0)
                .unwrap_or(1),
        };
        let errors: Vec<f64> = output
            .par_chunks_mut(chunk_rows * d)
            .enumerate()
            .map(|(chunk, out)| {
                let first = chunk * chunk_rows;
                let segments: Vec<(usize, usize)> = match keys {
                    Keys::Dense => vec![(0, l)],
                    Keys::Masked { mask, tile_volume } => mask
                        .allowed(first / tile_volume)
                        .iter()
                        .map(|&v| (v * tile_volume, (v + 1) * tile_volume))
                        .collect(),
                };
                self.chunk(first, &segments, out)
            })
            .collect::<Result<_>>()?;
        Ok(AttentionOutput {
            output: Matrix::from_vec(l, d, output)?,
            max_row_sum_error: errors.into_iter().fold(0.0, f64::max),
        })
    }
}

fn check_mask(mask: &BlockMask, map: &TileMap) -> Result<()> {
    if mask.tile_grid_dims() != map.tile_grid_dims {
        return Err(Error::MaskMismatch {
            mask: mask.tile_grid_dims(),
            map: map.tile_grid_dims,
        });
    }
    Ok(())
}

fn unit_kernel<'a>(inputs: &'a AttentionInputs, ones: &'a [f32], softmax_scale: f32) -> Kernel<'a> {
    let l = inputs.tokens();
    Kernel {
        q: inputs.q.as_slice(),
        k: inputs.k.as_slice(),
        v: inputs.v.as_slice(),
        d: inputs.d_model(),
        q_scale: &ones[..l],
        k_scale: &ones[..l],
        v_scale: &ones[..inputs.d_model()],
        softmax_scale,
        quantize_p: false,
    }
}

pub fn dense_reference_detailed(
    inputs: &AttentionInputs,
    softmax_scale: f32,
) -> Result<AttentionOutput> {
    check_softmax_scale(softmax_scale)?;
    let ones = vec![1.0f32; inputs.tokens().max(inputs.d_model())];
    unit_kernel(inputs, &ones, softmax_scale).run(Keys::Dense)
}

/// Row-wise `softmax(q·kᵀ·softmax_scale)·v` over all keys.
pub fn dense_reference(inputs: &AttentionInputs, softmax_scale: f32) -> Result<Matrix> {
    Ok(dense_reference_detailed(inputs, softmax_scale)?.output)
}

pub fn sparse_reference_detailed(
    inputs: &AttentionInputs,
    mask: &BlockMask,
    softmax_scale: f32,
) -> Result<AttentionOutput> {
    check_softmax_scale(softmax_scale)?;
    check_mask(mask, &inputs.map)?;
    let ones = vec![1.0f32; inputs.tokens().max(inputs.d_model())];
    unit_kernel(inputs, &ones, softmax_scale).run(Keys::Masked {
        mask,
        tile_volume: inputs.map.tile_volume,
    })
}

/// Dense attention with logits outside the mask excluded; rows renormalise
/// over admissible keys only.
pub fn sparse_reference(
    inputs: &AttentionInputs,
    mask: &BlockMask,
    softmax_scale: f32,
) -> Result<Matrix> {
    Ok(sparse_reference_detailed(inputs, mask, softmax_scale)?.output)
}

/// Decoded codes plus one scale per row.
fn row_scaled(q: &QuantizedTensor) -> (Vec<f32>, Vec<f32>) {
    let rows = q.shape().0;
    let scales = (0..rows).map(|r| q.scale_at(r, 0).value()).collect();
    (q.decoded_codes(), scales)
}

fn quantize_qk(
    m: &Matrix,
    map: &TileMap,
    granularity: Granularity,
    format: &Fp8Format,
) -> Result<QuantizedTensor> {
    match granularity {
        Granularity::PerTile3d => quantize::quantize_qk_tilewise(m, map, format),
        g => quantize::quantize_generic(m, g, format),
    }
}

pub fn fps_forward_detailed(inputs: &AttentionInputs, config: &FpsConfig) -> Result<AttentionOutput> {
    config.validate()?;
    let mask = build_block_mask(config.window, inputs.map.tile_grid_dims)?;
    fps_forward_masked(inputs, &mask, config)
}

/// Quantized sparse forward pass with an explicit mask; `config.window` is
/// ignored.
pub fn fps_forward_masked(
    inputs: &AttentionInputs,
    mask: &BlockMask,
    config: &FpsConfig,
) -> Result<AttentionOutput> {
    config.validate()?;
    check_mask(mask, &inputs.map)?;
    let keys = Keys::Masked {
        mask,
        tile_volume: inputs.map.tile_volume,
    };
    if config.passthrough {
        let ones = vec![1.0f32; inputs.tokens().max(inputs.d_model())];
        return unit_kernel(inputs, &ones, config.softmax_scale).run(keys);
    }

    let format = &config.format;
    let (q, q_scale) = row_scaled(&quantize_qk(&inputs.q, &inputs.map, config.qk_granularity, format)?);
    let (k, k_scale) = row_scaled(&quantize_qk(&inputs.k, &inputs.map, config.qk_granularity, format)?);
    let vq = quantize::quantize_v_channelwise(&inputs.v, format)?;
    let v = vq.decoded_codes();
    let v_scale: Vec<f32> = vq.scales().iter().map(|s| s.value()).collect();

    Kernel {
        q: &q,
        k: &k,
        v: &v,
        d: inputs.d_model(),
        q_scale: &q_scale,
        k_scale: &k_scale,
        v_scale: &v_scale,
        softmax_scale: config.softmax_scale,
        quantize_p: true,
    }
    .run(keys)
}

/// Joint tile-wise FP8 quantization and sliding-tile sparse attention.
pub fn fps_forward(inputs: &AttentionInputs, config: &FpsConfig) -> Result<Matrix> {
    Ok(fps_forward_detailed(inputs, config)?.output)
}

/// Per-row worst-case absolute element errors of quantized Q and K.
pub fn qk_element_bounds(
    inputs: &AttentionInputs,
    granularity: Granularity,
    format: &Fp8Format,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let bounds = |m: &Matrix| -> Result<Vec<f32>> {
        let q = quantize_qk(m, &inputs.map, granularity, format)?;
        Ok((0..m.rows()).map(|r| q.error_bound(r, 0)).collect())
    };
    Ok((bounds(&inputs.q)?, bounds(&inputs.k)?))
}

/// Worst-case logit error for one (query, key) pair given element error
/// bounds `eq`, `ek`: `scale · Σ_j (|q_j|·ek + |k_j|·eq + eq·ek)`.
pub fn logit_error_bound(q: &[f32], k: &[f32], eq: f32, ek: f32, softmax_scale: f32) -> f32 {
    let s: f32 = q
        .iter()
        .zip(k)
        .map(|(a, b)| a.abs() * ek + b.abs() * eq + eq * ek)
        .sum();
    s * softmax_scale
}
