use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmac_core::region::{crop, region_grid, RegionSpec};
use rmac_core::tensor_io::FeatureMap;

/// Brute-force enumeration in floating point: for each scale, the smallest
/// window count per axis whose even spacing keeps the step within 60% of the
/// unrounded window side, origins rounded half-up and deduplicated.
fn oracle(w: usize, h: usize, scales: usize) -> Vec<(usize, usize, usize, usize)> {
    let m = w.min(h) as f64;
    let mut out = Vec::new();
    for s in 1..=scales {
        let exact = 2.0 * m / (s as f64 + 1.0);
        let side = (exact.floor() as usize).max(1);
        let reach = exact.max(1.0);
        let axis = |extent: usize| -> Vec<usize> {
            let span = extent as f64 - reach;
            let mut n = 1usize;
            while span > 0.0 && span / (n as f64) > 0.6 * reach + 1e-9 {
                n += 1;
            }
            let n = if span > 0.0 { n + 1 } else { 1 };
            let range = (extent - side) as f64;
            let mut v: Vec<usize> = (0..n)
                .map(|i| {
                    if n == 1 {
                        0
                    } else {
                        (i as f64 * range / (n - 1) as f64 + 0.5).floor() as usize
                    }
                })
                .collect();
            v.dedup();
            v
        };
        let (xs, ys) = (axis(w), axis(h));
        for &y in &ys {
            for &x in &xs {
                out.push((x, y, side, s));
            }
        }
    }
    out
}

fn as_tuples(r: &[RegionSpec]) -> Vec<(usize, usize, usize, usize)> {
    r.iter().map(|r| (r.x, r.y, r.side, r.scale)).collect()
}

#[test]
fn matches_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (w, h, s) = (
            rng.random_range(1..=64),
            rng.random_range(1..=64),
            rng.random_range(1..=6),
        );
        assert_eq!(
            as_tuples(&region_grid(w, h, s)),
            oracle(w, h, s),
            "W={w} H={h} S={s}"
        );
    }
}

#[test]
fn matches_oracle_exhaustively_small() {
    for w in 1..=24 {
        for h in 1..=24 {
            for s in 1..=6 {
                assert_eq!(
                    as_tuples(&region_grid(w, h, s)),
                    oracle(w, h, s),
                    "W={w} H={h} S={s}"
                );
            }
        }
    }
}

#[test]
fn square_counts_are_sum_of_squares() {
    for s_max in 1..=6 {
        for m in (2 * s_max)..=64 {
            let grid = region_grid(m, m, s_max);
            for s in 1..=s_max {
                assert_eq!(
                    grid.iter().filter(|r| r.scale == s).count(),
                    s * s,
                    "m={m} s={s}"
                );
            }
        }
    }
    for m in [10, 14, 20] {
        assert_eq!(region_grid(m, m, 4).len(), 30);
    }
}

#[test]
fn bounds_uniqueness_and_coverage() {
    for w in 1..=64 {
        for h in 1..=64 {
            let grid = region_grid(w, h, 4);
            let unique: HashSet<_> = grid.iter().collect();
            assert_eq!(unique.len(), grid.len());
            let mut covered = vec![false; w * h];
            for r in &grid {
                assert!(r.fits(w, h), "{r:?} outside {w}x{h}");
                if r.scale == 1 {
                    for y in r.y..r.y + r.side {
                        for x in r.x..r.x + r.side {
                            covered[y * w + x] = true;
                        }
                    }
                }
            }
            assert!(
                covered.iter().all(|&c| c),
                "scale 1 leaves cells uncovered on {w}x{h}"
            );
        }
    }
}

#[test]
fn crop_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (c, w, h) = (
            rng.random_range(1..5),
            rng.random_range(1..20),
            rng.random_range(1..20),
        );
        let data: Vec<f32> = (0..c * w * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let map = FeatureMap::new(c, w, h, data).unwrap();
        let side = rng.random_range(1..=w.min(h));
        let r = RegionSpec {
            x: rng.random_range(0..=w - side),
            y: rng.random_range(0..=h - side),
            side,
            scale: 1,
        };
        let sub = crop(&map, &r).unwrap();
        for ch in 0..c {
            for y in 0..side {
                for x in 0..side {
                    assert_eq!(sub.at(ch, y, x), map.at(ch, r.y + y, r.x + x));
                }
            }
        }
    }
}
