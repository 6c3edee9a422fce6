use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmac_core::tensor_io::Vector;
use rmac_core::whitening::WhiteningModel;

/// Box-Muller standard normal.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Cyclic Jacobi eigensolver; returns eigenvalues descending with
/// eigenvectors as rows.
#[allow(clippy::needless_range_loop)]
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    (values, vectors)
}

fn unit(v: &[f32]) -> Vec<f64> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|&x| x as f64 / n).collect()
}

fn anisotropic(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..dim).map(|i| 2.0 / (1.0 + i as f64)).collect();
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim)
                .map(|i| (3.0 + scales[i] * gaussian(&mut rng) + 0.1 * rng.random::<f64>()) as f32)
                .collect();
            Vector::new(v).unwrap()
        })
        .collect()
}

#[test]
fn basis_matches_jacobi_oracle() {
    let dim = 6;
    let samples = anisotropic(4000, dim, 1);
    let model = WhiteningModel::fit(&samples, dim).unwrap();

    let xs: Vec<Vec<f64>> = samples.iter().map(|s| unit(s.as_slice())).collect();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let cov: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    xs.iter()
                        .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                        .sum::<f64>()
                        / n
                })
                .collect()
        })
        .collect();
    let (values, vectors) = jacobi(cov);

    for (m, o) in model.mean().iter().zip(&mean) {
        assert!((*m as f64 - o).abs() < 1e-6);
    }
    for k in 0..dim {
        let lam = model.eigenvalues()[k] as f64;
        assert!(
            (lam - values[k]).abs() <= 1e-6 * values[0],
            "eigenvalue {k}: {lam} vs {}",
            values[k]
        );
        let scale = (values[k] + model.eps() as f64).sqrt();
        let row: Vec<f64> = model.basis()[k * dim..(k + 1) * dim]
            .iter()
            .map(|&b| b as f64 * scale)
            .collect();
        let dot: f64 = row.iter().zip(&vectors[k]).map(|(a, b)| a * b).sum();
        assert!(
            (dot.abs() - 1.0).abs() < 1e-3,
            "direction {k} disagrees (|cos| = {})",
            dot.abs()
        );
    }
}

#[test]
fn apply_matches_naive_matvec() {
    let dim = 8;
    let samples = anisotropic(500, dim, 2);
    let model = WhiteningModel::fit(&samples, 4).unwrap();
    for s in samples.iter().take(50) {
        let x = unit(s.as_slice());
        let y: Vec<f64> = (0..4)
            .map(|k| {
                (0..dim)
                    .map(|j| model.basis()[k * dim + j] as f64 * (x[j] - model.mean()[j] as f64))
                    .sum()
            })
            .collect();
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = model.apply(s.as_slice()).unwrap();
        for (g, want) in got.as_slice().iter().zip(&y) {
            assert!((*g as f64 - want / n).abs() < 1e-5);
        }
    }
}

#[test]
fn whitened_variance_is_unit_on_top_coordinates() {
    let dim = 16;
    let samples = anisotropic(10_000, dim, 3);
    let d = 8;
    let model = WhiteningModel::fit(&samples, d).unwrap();
    let proj: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| model.project(s.as_slice()).unwrap())
        .collect();
    for k in 0..d {
        let mean = proj.iter().map(|p| p[k] as f64).sum::<f64>() / proj.len() as f64;
        let var = proj
            .iter()
            .map(|p| (p[k] as f64 - mean).powi(2))
            .sum::<f64>()
            / proj.len() as f64;
        assert!((var - 1.0).abs() <= 0.05, "coordinate {k} variance {var}");
        assert!(mean.abs() < 1e-3);
    }
}

#[test]
fn model_files_are_bit_identical_across_fits() {
    let samples = anisotropic(2000, 12, 4);
    let mut a = Vec::new();
    let mut b = Vec::new();
    WhiteningModel::fit(&samples, 6)
        .unwrap()
        .encode(&mut a)
        .unwrap();
    WhiteningModel::fit(&samples, 6)
        .unwrap()
        .encode(&mut b)
        .unwrap();
    assert_eq!(a, b);
}
