//! Per-region reduction of activations to a vector.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::region::RegionSpec;
use crate::tensor_io::{normalize_in_place, FeatureMap, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    /// Per-channel spatial maximum.
    Mac,
    /// Per-channel spatial sum.
    Sum,
    /// Unit-norm MAC followed by unit-norm SUM; twice the channel count.
    Smac,
}

impl PoolingMode {
    pub fn output_dim(self, channels: usize) -> usize {
        match self {
            PoolingMode::Mac | PoolingMode::Sum => channels,
            PoolingMode::Smac => 2 * channels,
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Mac => "mac",
            PoolingMode::Sum => "sum",
            PoolingMode::Smac => "smac",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mac" => Ok(PoolingMode::Mac),
            "sum" => Ok(PoolingMode::Sum),
            "smac" => Ok(PoolingMode::Smac),
            other => Err(Error::Config(format!(
                "unknown pooling mode `{other}` (expected mac, sum or smac)"
            ))),
        }
    }
}

/// Pool a whole map (typically an already cropped region).
pub fn pool(map: &FeatureMap, mode: PoolingMode) -> Result<Vector> {
    pool_window(map, 0, 0, map.width(), map.height(), mode)
}

/// Pool the window `r` of `map` without copying it out.
pub fn pool_region(map: &FeatureMap, r: &RegionSpec, mode: PoolingMode) -> Result<Vector> {
    if !r.fits(map.width(), map.height()) {
        return Err(Error::Contract(format!(
            "region {r:?} outside {}x{} map",
            map.width(),
            map.height()
        )));
    }
    pool_window(map, r.x, r.y, r.side, r.side, mode)
}

fn pool_window(
    map: &FeatureMap,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    mode: PoolingMode,
) -> Result<Vector> {
    let c = map.channels();
    let want_max = mode != PoolingMode::Sum;
    let want_sum = mode != PoolingMode::Mac;
    let mut maxes = Vec::with_capacity(if want_max { c } else { 0 });
    let mut sums = Vec::with_capacity(if want_sum { c } else { 0 });
    for ch in 0..c {
        let plane = map.plane(ch);
        let mut mx = f32::NEG_INFINITY;
        let mut sm = 0.0f64;
        for y in y0..y0 + h {
            let row = &plane[y * map.width() + x0..y * map.width() + x0 + w];
            if want_max {
                mx = row.iter().copied().fold(mx, f32::max);
            }
            if want_sum {
                sm += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        if want_max {
            maxes.push(mx);
        }
        if want_sum {
            sums.push(sm as f32);
        }
    }
    let out = match mode {
        PoolingMode::Mac => maxes,
        PoolingMode::Sum => sums,
        PoolingMode::Smac => {
            normalize_in_place(&mut maxes);
            normalize_in_place(&mut sums);
            maxes.extend_from_slice(&sums);
            maxes
        }
    };
    Vector::new(out)
}
