//! Token grids and their partition into non-overlapping 3D tiles.
//!
//! Tokens are laid out row-major over `(t, h, w)` with `w` fastest, and each
//! token carries `d_model` channels. Tile extents must divide the grid exactly;
//! ragged tiles are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub t_frames: usize,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
}

impl GridShape {
    pub fn new(t_frames: usize, height: usize, width: usize, d_model: usize) -> Result<Self> {
        let g = Self {
            t_frames,
            height,
            width,
            d_model,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.t_frames, "t_frames"),
            (self.height, "height"),
            (self.width, "width"),
            (self.d_model, "d_model"),
        ] {
            if v == 0 {
                return Err(Error::ZeroDimension { what });
            }
        }
        Ok(())
    }

    /// Number of tokens `L = T·H·W`.
    pub fn tokens(&self) -> usize {
        self.t_frames * self.height * self.width
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.t_frames, self.height, self.width]
    }

    pub fn coords_of(&self, index: usize) -> Result<[usize; 3]> {
        if index >= self.tokens() {
            return Err(Error::TokenOutOfRange {
                index,
                len: self.tokens(),
            });
        }
        let w = index % self.width;
        let h = (index / self.width) % self.height;
        let t = index / (self.width * self.height);
        Ok([t, h, w])
    }

    pub fn index_of(&self, [t, h, w]: [usize; 3]) -> usize {
        (t * self.height + h) * self.width + w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileScheme {
    pub tile_t: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl TileScheme {
    pub fn new(tile_t: usize, tile_h: usize, tile_w: usize) -> Result<Self> {
        let s = Self {
            tile_t,
            tile_h,
            tile_w,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.tile_t, "tile_t"),
            (self.tile_h, "tile_h"),
            (self.tile_w, "tile_w"),
        ] {
            if v == 0 {
                return Err(Error::ZeroDimension { what });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.tile_t, self.tile_h, self.tile_w]
    }

    pub fn volume(&self) -> usize {
        self.tile_t * self.tile_h * self.tile_w
    }
}

impl From<[usize; 3]> for TileScheme {
    fn from([tile_t, tile_h, tile_w]: [usize; 3]) -> Self {
        Self {
            tile_t,
            tile_h,
            tile_w,
        }
    }
}

/// 3D index of a tile within the tile grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TileCoord {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

impl From<[usize; 3]> for TileCoord {
    fn from([t, h, w]: [usize; 3]) -> Self {
        Self { t, h, w }
    }
}

/// A grid paired with a tile scheme that divides it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileMap {
    pub grid: GridShape,
    pub scheme: TileScheme,
    pub tile_grid_dims: [usize; 3],
    pub tiles_total: usize,
    pub tile_volume: usize,
}

impl TileMap {
    pub fn new(grid: GridShape, scheme: TileScheme) -> Result<Self> {
        build_tile_map(grid, scheme)
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    /// Row-major flat index of a tile.
    pub fn flat_tile(&self, tile: TileCoord) -> usize {
        let [_, gh, gw] = self.tile_grid_dims;
        (tile.t * gh + tile.h) * gw + tile.w
    }

    pub fn tile_coord(&self, flat: usize) -> TileCoord {
        let [_, gh, gw] = self.tile_grid_dims;
        TileCoord::new(flat / (gh * gw), (flat / gw) % gh, flat % gw)
    }

    /// Tile containing a token given by its row-major grid index.
    pub fn tile_of_token(&self, token_index: usize) -> Result<TileCoord> {
        let [t, h, w] = self.grid.coords_of(token_index)?;
        Ok(TileCoord::new(
            t / self.scheme.tile_t,
            h / self.scheme.tile_h,
            w / self.scheme.tile_w,
        ))
    }

    /// Permutation `order` such that `order[i]` is the row-major grid index of
    /// the `i`-th token in tile-contiguous order. Tiles are visited row-major
    /// over the tile grid; tokens inside a tile row-major over local coordinates.
    pub fn tile_contiguous_order(&self) -> Vec<usize> {
        let [st, sh, sw] = self.scheme.dims();
        let mut order = Vec::with_capacity(self.tokens());
        for flat in 0..self.tiles_total {
            let tile = self.tile_coord(flat);
            for lt in 0..st {
                for lh in 0..sh {
                    for lw in 0..sw {
                        order.push(self.grid.index_of([
                            tile.t * st + lt,
                            tile.h * sh + lh,
                            tile.w * sw + lw,
                        ]));
                    }
                }
            }
        }
        order
    }

    /// Flat tile index of the token at `row` of a tile-contiguous matrix.
    pub fn tile_of_row(&self, row: usize) -> usize {
        row / self.tile_volume
    }
}

pub fn build_tile_map(grid: GridShape, scheme: TileScheme) -> Result<TileMap> {
    grid.validate()?;
    scheme.validate()?;
    let mut tile_grid_dims = [0; 3];
    for (i, ((g, s), axis)) in grid
        .spatial()
        .into_iter()
        .zip(scheme.dims())
        .zip(['t', 'h', 'w'])
        .enumerate()
    {
        if g % s != 0 {
            return Err(Error::IndivisibleGrid {
                axis,
                grid: g,
                tile: s,
            });
        }
        tile_grid_dims[i] = g / s;
    }
    Ok(TileMap {
        grid,
        scheme,
        tile_grid_dims,
        tiles_total: tile_grid_dims.iter().product(),
        tile_volume: scheme.volume(),
    })
}

pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &p) in order.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn map(grid: [usize; 3], tile: [usize; 3]) -> TileMap {
        build_tile_map(
            GridShape::new(grid[0], grid[1], grid[2], 1).unwrap(),
            TileScheme::from(tile),
        )
        .unwrap()
    }

    #[test]
    fn tile_map_counts() {
        let m = build_tile_map(
            GridShape::new(24, 32, 32, 64).unwrap(),
            TileScheme::new(6, 8, 8).unwrap(),
        )
        .unwrap();
        assert_eq!(m.tile_grid_dims, [4, 4, 4]);
        assert_eq!(m.tiles_total, 64);
        assert_eq!(m.tile_volume, 384);

        let m = build_tile_map(
            GridShape::new(3, 4, 4, 8).unwrap(),
            TileScheme::new(3, 4, 4).unwrap(),
        )
        .unwrap();
        assert_eq!(m.tiles_total, 1);
        assert_eq!(m.tile_volume, 48);
    }

    #[test]
    fn indivisible_axis_is_named() {
        let err = build_tile_map(
            GridShape::new(24, 32, 32, 64).unwrap(),
            TileScheme::new(5, 8, 8).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::IndivisibleGrid { axis: 't', .. }));
        assert!(err.to_string().contains("indivisible grid"));
    }

    #[test]
    fn zero_extents_rejected() {
        assert!(GridShape::new(0, 1, 1, 1).is_err());
        assert!(GridShape::new(1, 1, 1, 0).is_err());
        assert!(TileScheme::new(1, 0, 1).is_err());
    }

    #[test]
    fn tile_of_token_examples() {
        let m = map([4, 4, 4], [2, 2, 2]);
        assert_eq!(m.tile_of_token(0).unwrap(), TileCoord::new(0, 0, 0));
        assert_eq!(m.tile_of_token(63).unwrap(), TileCoord::new(1, 1, 1));
        assert_eq!(m.tile_of_token(24).unwrap(), TileCoord::new(0, 1, 0));
        assert!(matches!(
            m.tile_of_token(64),
            Err(Error::TokenOutOfRange { index: 64, len: 64 })
        ));
    }

    #[test]
    fn tile_of_token_matches_enumeration() {
        // Enumerate coordinates directly and test the membership predicate.
        let m = map([4, 4, 4], [2, 2, 2]);
        let mut index = 0;
        for t in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    let tile = m.tile_of_token(index).unwrap();
                    assert!(tile.t * 2 <= t && t < tile.t * 2 + 2);
                    assert!(tile.h * 2 <= h && h < tile.h * 2 + 2);
                    assert!(tile.w * 2 <= w && w < tile.w * 2 + 2);
                    index += 1;
                }
            }
        }
    }

    #[test]
    fn contiguous_order_examples() {
        assert_eq!(map([1, 1, 4], [1, 1, 2]).tile_contiguous_order(), [0, 1, 2, 3]);
        assert_eq!(map([1, 2, 2], [1, 1, 2]).tile_contiguous_order(), [0, 1, 2, 3]);
        assert_eq!(map([1, 2, 2], [1, 2, 1]).tile_contiguous_order(), [0, 2, 1, 3]);
    }

    fn divisible_map() -> impl Strategy<Value = TileMap> {
        (1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_map(
            |(a, b, c, x, y, z)| map([a * x, b * y, c * z], [x, y, z]),
        )
    }

    proptest! {
        #[test]
        fn order_is_a_permutation_and_inverts(m in divisible_map()) {
            let order = m.tile_contiguous_order();
            let inv = invert_permutation(&order);
            let mut seen = vec![false; m.tokens()];
            for (i, &p) in order.iter().enumerate() {
                prop_assert!(!seen[p]);
                seen[p] = true;
                prop_assert_eq!(inv[p], i);
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn contiguous_rows_share_their_tile(m in divisible_map()) {
            let order = m.tile_contiguous_order();
            let mut counts = vec![0usize; m.tiles_total];
            for (row, &token) in order.iter().enumerate() {
                let tile = m.flat_tile(m.tile_of_token(token).unwrap());
                prop_assert_eq!(tile, m.tile_of_row(row));
                counts[tile] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == m.tile_volume));
            prop_assert_eq!(counts.iter().sum::<usize>(), m.tokens());
        }
    }
}
