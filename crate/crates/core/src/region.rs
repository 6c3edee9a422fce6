//! Multi-scale square region grid over a feature map.
//!
//! At scale `s` the window side is `2 * min(W, H) / (s + 1)` cells and
//! consecutive windows are offset by 60% of the side. Origins are spread
//! evenly between `0` and `extent - side` on each axis, rounded to the
//! nearest cell, with the first and last windows pinned to the borders.

use crate::error::{Error, Result};
use crate::tensor_io::FeatureMap;

/// Window stride as a fraction of the window side, as the ratio `NUM / DEN`.
const STRIDE_NUM: usize = 3;
const STRIDE_DEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionSpec {
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub scale: usize,
}

impl RegionSpec {
    pub fn full(map: &FeatureMap) -> Self {
        assert_eq!(
            map.width(),
            map.height(),
            "full-map region needs a square map"
        );
        Self {
            x: 0,
            y: 0,
            side: map.width(),
            scale: 1,
        }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.side >= 1 && self.x + self.side <= width && self.y + self.side <= height
    }
}

/// Integer window side at scale `s`, clamped to at least one cell.
pub fn window_side(min_extent: usize, s: usize) -> usize {
    (2 * min_extent / (s + 1)).max(1)
}

/// Number of windows along an axis of length `extent` at scale `s`.
///
/// The count is derived from the unrounded side `2m/(s+1)`: with the floored
/// side, small grids such as 10x10 would get `s + 1` windows per axis at some
/// scales instead of `s`.
fn window_count(extent: usize, min_extent: usize, s: usize) -> usize {
    let m = min_extent;
    let (num, den) = if 2 * m < s + 1 {
        // real side below one cell: clamped to exactly 1
        (STRIDE_DEN * (extent - 1), STRIDE_NUM)
    } else {
        // (extent - 2m/(s+1)) / (0.6 * 2m/(s+1))
        (STRIDE_DEN * (extent * (s + 1) - 2 * m), STRIDE_NUM * 2 * m)
    };
    num.div_ceil(den) + 1
}

fn axis_origins(extent: usize, side: usize, count: usize) -> Vec<usize> {
    let range = extent - side;
    if count <= 1 || range == 0 {
        return vec![0];
    }
    let gaps = count - 1;
    let mut origins: Vec<usize> = (0..count)
        .map(|i| (2 * i * range + gaps) / (2 * gaps))
        .collect();
    origins.dedup();
    origins
}

/// Regions for scales `1..=scales`, scale-major then row-major.
pub fn region_grid(width: usize, height: usize, scales: usize) -> Vec<RegionSpec> {
    assert!(width >= 1 && height >= 1, "grid needs a non-empty map");
    let m = width.min(height);
    let mut out = Vec::new();
    for s in 1..=scales {
        let side = window_side(m, s);
        let xs = axis_origins(width, side, window_count(width, m, s));
        let ys = axis_origins(height, side, window_count(height, m, s));
        for &y in &ys {
            for &x in &xs {
                out.push(RegionSpec {
                    x,
                    y,
                    side,
                    scale: s,
                });
            }
        }
    }
    out
}

/// Copy the `C x side x side` window out of `map`.
pub fn crop(map: &FeatureMap, r: &RegionSpec) -> Result<FeatureMap> {
    if !r.fits(map.width(), map.height()) {
        return Err(Error::Contract(format!(
            "region {r:?} outside {}x{} map",
            map.width(),
            map.height()
        )));
    }
    let mut data = Vec::with_capacity(map.channels() * r.side * r.side);
    for c in 0..map.channels() {
        let plane = map.plane(c);
        for y in r.y..r.y + r.side {
            let row = y * map.width();
            data.extend_from_slice(&plane[row + r.x..row + r.x + r.side]);
        }
    }
    FeatureMap::new(map.channels(), r.side, r.side, data)
}
