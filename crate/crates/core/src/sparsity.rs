//! Sliding-tile neighbourhoods and block masks.
//!
//! A window of extent `W` on an axis admits tile offsets
//! `-⌊(W-1)/2⌋ ..= ⌊W/2⌋` around the query tile, clipped to the tile grid.
//! Extents are in tile units. Even extents lean forward by one tile.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{TileCoord, TileMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub win_t: usize,
    pub win_h: usize,
    pub win_w: usize,
}

impl WindowSpec {
    pub fn new(win_t: usize, win_h: usize, win_w: usize) -> Result<Self> {
        let w = Self {
            win_t,
            win_h,
            win_w,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.win_t, "win_t"),
            (self.win_h, "win_h"),
            (self.win_w, "win_w"),
        ] {
            if v == 0 {
                return Err(Error::ZeroDimension { what });
            }
        }
        Ok(())
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.win_t, self.win_h, self.win_w]
    }

    pub fn volume(&self) -> usize {
        self.win_t * self.win_h * self.win_w
    }

    /// Smallest window admitting every tile from every query tile.
    pub fn covering(dims: [usize; 3]) -> Self {
        let [t, h, w] = dims.map(|d| 2 * d - 1);
        Self {
            win_t: t,
            win_h: h,
            win_w: w,
        }
    }

    /// True if every extent is at least the corresponding extent of `other`.
    pub fn contains(&self, other: &WindowSpec) -> bool {
        self.extents()
            .iter()
            .zip(other.extents())
            .all(|(&a, b)| a >= b)
    }
}

impl From<[usize; 3]> for WindowSpec {
    fn from([win_t, win_h, win_w]: [usize; 3]) -> Self {
        Self {
            win_t,
            win_h,
            win_w,
        }
    }
}

/// Admissible index range `lo..=hi` along one axis.
fn axis_range(center: usize, extent: usize, dim: usize) -> (usize, usize) {
    let left = (extent - 1) / 2;
    let right = extent / 2;
    (center.saturating_sub(left), (center + right).min(dim - 1))
}

/// Key tiles admissible for query tile `u`, in row-major order.
pub fn neighborhood(u: TileCoord, window: WindowSpec, dims: [usize; 3]) -> Result<Vec<TileCoord>> {
    window.validate()?;
    if u.t >= dims[0] || u.h >= dims[1] || u.w >= dims[2] {
        return Err(Error::TileOutOfRange {
            t: u.t,
            h: u.h,
            w: u.w,
            dims,
        });
    }
    let (t0, t1) = axis_range(u.t, window.win_t, dims[0]);
    let (h0, h1) = axis_range(u.h, window.win_h, dims[1]);
    let (w0, w1) = axis_range(u.w, window.win_w, dims[2]);
    let mut out = Vec::with_capacity((t1 - t0 + 1) * (h1 - h0 + 1) * (w1 - w0 + 1));
    for t in t0..=t1 {
        for h in h0..=h1 {
            for w in w0..=w1 {
                out.push(TileCoord::new(t, h, w));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    tile_grid_dims: [usize; 3],
    /// Sorted flat key-tile indices per flat query tile.
    allowed: Vec<Vec<usize>>,
}

impl BlockMask {
    pub fn tile_grid_dims(&self) -> [usize; 3] {
        self.tile_grid_dims
    }

    pub fn tiles_total(&self) -> usize {
        self.allowed.len()
    }

    /// Admissible key tiles of query tile `u` (flat, ascending).
    pub fn allowed(&self, u: usize) -> &[usize] {
        &self.allowed[u]
    }

    pub fn allowed_coords(&self, u: usize) -> Vec<TileCoord> {
        self.allowed[u].iter().map(|&v| self.coord(v)).collect()
    }

    pub fn is_allowed(&self, u: usize, v: usize) -> bool {
        self.allowed[u].binary_search(&v).is_ok()
    }

    /// Number of admissible (query tile, key tile) pairs.
    pub fn admitted_pairs(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }

    fn flat(&self, c: TileCoord) -> usize {
        let [_, gh, gw] = self.tile_grid_dims;
        (c.t * gh + c.h) * gw + c.w
    }

    fn coord(&self, flat: usize) -> TileCoord {
        let [_, gh, gw] = self.tile_grid_dims;
        TileCoord::new(flat / (gh * gw), (flat / gw) % gh, flat % gw)
    }

    /// Text dump, one line per query tile: `u_t,u_h,u_w : v1 v2 ...` with
    /// flat row-major key-tile indices.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (u, keys) in self.allowed.iter().enumerate() {
            let c = self.coord(u);
            let _ = write!(out, "{},{},{} :", c.t, c.h, c.w);
            for v in keys {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn build_block_mask(window: WindowSpec, dims: [usize; 3]) -> Result<BlockMask> {
    window.validate()?;
    if dims.contains(&0) {
        return Err(Error::ZeroDimension {
            what: "tile grid dimension",
        });
    }
    let mut mask = BlockMask {
        tile_grid_dims: dims,
        allowed: Vec::with_capacity(dims.iter().product()),
    };
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let keys = neighborhood(TileCoord::new(t, h, w), window, dims)?
                    .into_iter()
                    .map(|c| mask.flat(c))
                    .collect();
                mask.allowed.push(keys);
            }
        }
    }
    Ok(mask)
}

/// Fraction of admissible tile pairs, `Σ|W(u)| / M²`.
pub fn density(mask: &BlockMask) -> f64 {
    let m = mask.tiles_total() as f64;
    mask.admitted_pairs() as f64 / (m * m)
}

/// Token-level L×L mask, row-major, over the grid's row-major token indices.
pub fn expand_token_mask(mask: &BlockMask, map: &TileMap) -> Result<Vec<bool>> {
    if mask.tile_grid_dims != map.tile_grid_dims {
        return Err(Error::MaskMismatch {
            mask: mask.tile_grid_dims,
            map: map.tile_grid_dims,
        });
    }
    let l = map.tokens();
    let tiles: Vec<usize> = (0..l)
        .map(|i| map.tile_of_token(i).map(|c| map.flat_tile(c)))
        .collect::<Result<_>>()?;
    let mut out = vec![false; l * l];
    for q in 0..l {
        for k in 0..l {
            out[q * l + k] = mask.is_allowed(tiles[q], tiles[k]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::grid::{build_tile_map, GridShape, TileScheme};

    /// Direct evaluation of the offset predicate over every tile of the grid.
    fn brute_force(u: TileCoord, window: WindowSpec, dims: [usize; 3]) -> Vec<TileCoord> {
        let admits = |c: usize, v: usize, w: usize| {
            let off = v as i64 - c as i64;
            -((w as i64 - 1) / 2) <= off && off <= w as i64 / 2
        };
        let mut out = Vec::new();
        for t in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    if admits(u.t, t, window.win_t)
                        && admits(u.h, h, window.win_h)
                        && admits(u.w, w, window.win_w)
                    {
                        out.push(TileCoord::new(t, h, w));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn neighborhood_examples() {
        let w3 = WindowSpec::new(3, 3, 3).unwrap();
        let n = neighborhood(TileCoord::new(1, 1, 1), w3, [4, 4, 4]).unwrap();
        assert_eq!(n.len(), 27);
        assert_eq!(n, brute_force(TileCoord::new(1, 1, 1), w3, [4, 4, 4]));
        let n = neighborhood(TileCoord::new(0, 0, 0), w3, [4, 4, 4]).unwrap();
        assert_eq!(n.len(), 8);
        assert_eq!(n, brute_force(TileCoord::new(0, 0, 0), w3, [4, 4, 4]));

        let unit = WindowSpec::new(1, 1, 1).unwrap();
        let u = TileCoord::new(2, 0, 1);
        assert_eq!(neighborhood(u, unit, [3, 2, 2]).unwrap(), vec![u]);

        let even = WindowSpec::new(6, 1, 1).unwrap();
        let n = neighborhood(TileCoord::new(3, 0, 0), even, [8, 1, 1]).unwrap();
        let ts: Vec<usize> = n.iter().map(|c| c.t).collect();
        assert_eq!(ts, [1, 2, 3, 4, 5, 6]);
        assert_eq!(n, brute_force(TileCoord::new(3, 0, 0), even, [8, 1, 1]));
    }

    #[test]
    fn neighborhood_errors() {
        let w = WindowSpec::from([1, 1, 1]);
        assert!(matches!(
            neighborhood(TileCoord::new(4, 0, 0), w, [4, 4, 4]),
            Err(Error::TileOutOfRange { .. })
        ));
        assert!(neighborhood(TileCoord::new(0, 0, 0), WindowSpec::from([0, 1, 1]), [1, 1, 1]).is_err());
    }

    #[test]
    fn mask_examples() {
        let dense = build_block_mask(WindowSpec::from([3, 3, 3]), [2, 2, 2]).unwrap();
        assert!((0..8).all(|u| dense.allowed(u) == [0, 1, 2, 3, 4, 5, 6, 7]));
        assert_eq!(density(&dense), 1.0);

        let line = build_block_mask(WindowSpec::from([3, 1, 1]), [4, 1, 1]).unwrap();
        let sizes: Vec<usize> = (0..4).map(|u| line.allowed(u).len()).collect();
        assert_eq!(sizes, [2, 3, 3, 2]);
        assert_eq!(density(&line), 0.625);

        let single = build_block_mask(WindowSpec::from([5, 2, 7]), [1, 1, 1]).unwrap();
        assert_eq!(single.allowed(0), [0]);
        assert_eq!(density(&single), 1.0);
    }

    #[test]
    fn dump_format() {
        let line = build_block_mask(WindowSpec::from([3, 1, 1]), [4, 1, 1]).unwrap();
        assert_eq!(
            line.dump(),
            "0,0,0 : 0 1\n1,0,0 : 0 1 2\n2,0,0 : 1 2 3\n3,0,0 : 2 3\n"
        );
    }

    fn map(grid: [usize; 3], tile: [usize; 3]) -> TileMap {
        build_tile_map(
            GridShape::new(grid[0], grid[1], grid[2], 1).unwrap(),
            TileScheme::from(tile),
        )
        .unwrap()
    }

    #[test]
    fn token_mask_examples() {
        let single = map([1, 2, 2], [1, 2, 2]);
        let m = build_block_mask(WindowSpec::from([1, 1, 1]), single.tile_grid_dims).unwrap();
        assert!(expand_token_mask(&m, &single).unwrap().iter().all(|&b| b));

        let two = map([2, 1, 2], [1, 1, 2]);
        let m = build_block_mask(WindowSpec::from([1, 1, 1]), two.tile_grid_dims).unwrap();
        let t = expand_token_mask(&m, &two).unwrap();
        #[rustfmt::skip]
        let expected = [
            true, true, false, false,
            true, true, false, false,
            false, false, true, true,
            false, false, true, true,
        ];
        assert_eq!(t, expected);

        let dense = build_block_mask(WindowSpec::covering(two.tile_grid_dims), two.tile_grid_dims).unwrap();
        assert!(expand_token_mask(&dense, &two).unwrap().iter().all(|&b| b));

        let other = build_block_mask(WindowSpec::from([1, 1, 1]), [1, 1, 1]).unwrap();
        assert!(matches!(
            expand_token_mask(&other, &two),
            Err(Error::MaskMismatch { .. })
        ));
    }

    fn dims_and_window() -> impl Strategy<Value = ([usize; 3], WindowSpec)> {
        (1usize..5, 1usize..5, 1usize..5, 1usize..8, 1usize..8, 1usize..8)
            .prop_map(|(a, b, c, x, y, z)| ([a, b, c], WindowSpec::from([x, y, z])))
    }

    proptest! {
        #[test]
        fn mask_matches_brute_force((dims, window) in dims_and_window()) {
            let mask = build_block_mask(window, dims).unwrap();
            for u in 0..mask.tiles_total() {
                let c = mask.coord(u);
                prop_assert_eq!(mask.allowed_coords(u), brute_force(c, window, dims));
                prop_assert!(mask.is_allowed(u, u));
            }
        }

        #[test]
        fn enlarging_a_window_only_adds_tiles((dims, window) in dims_and_window(), axis in 0usize..3) {
            let mut ext = window.extents();
            ext[axis] += 1;
            let bigger = WindowSpec::from(ext);
            let a = build_block_mask(window, dims).unwrap();
            let b = build_block_mask(bigger, dims).unwrap();
            for u in 0..a.tiles_total() {
                prop_assert!(a.allowed(u).iter().all(|v| b.is_allowed(u, *v)));
            }
            prop_assert!(density(&a) <= density(&b));
        }

        #[test]
        fn covering_window_is_dense(dims in (1usize..5, 1usize..5, 1usize..5)) {
            let dims = [dims.0, dims.1, dims.2];
            let mask = build_block_mask(WindowSpec::covering(dims), dims).unwrap();
            prop_assert_eq!(density(&mask), 1.0);
        }

        #[test]
        fn interior_tiles_see_full_window(w in (1usize..4, 1usize..4, 1usize..4)) {
            let window = WindowSpec::from([w.0, w.1, w.2]);
            let dims = [w.0 + 2, w.1 + 2, w.2 + 2];
            let u = TileCoord::new((w.0 - 1) / 2, (w.1 - 1) / 2, (w.2 - 1) / 2);
            let n = neighborhood(u, window, dims).unwrap();
            prop_assert_eq!(n.len(), window.volume());
        }

        #[test]
        fn token_mask_is_block_constant(
            tiles in (1usize..3, 1usize..3, 1usize..3),
            tile in (1usize..3, 1usize..3, 1usize..3),
            window in (1usize..4, 1usize..4, 1usize..4),
        ) {
            let m = map(
                [tiles.0 * tile.0, tiles.1 * tile.1, tiles.2 * tile.2],
                [tile.0, tile.1, tile.2],
            );
            let mask = build_block_mask(WindowSpec::from([window.0, window.1, window.2]), m.tile_grid_dims).unwrap();
            let tm = expand_token_mask(&mask, &m).unwrap();
            let l = m.tokens();
            for q in 0..l {
                for k in 0..l {
                    let tq = m.flat_tile(m.tile_of_token(q).unwrap());
                    let tk = m.flat_tile(m.tile_of_token(k).unwrap());
                    prop_assert_eq!(tm[q * l + k], mask.is_allowed(tq, tk));
                }
            }
        }
    }
}
