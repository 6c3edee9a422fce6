//! Descriptor post-processing: l2-normalize, center, project onto the
//! leading principal directions scaled to unit variance, l2-normalize again.
//!
//! Model file layout (`RMPW`, version 1, all little-endian):
//!
//! ```text
//! magic "RMPW" | version u32 | D u32 | d u32 | eps f32
//! mean f32 x D | eigenvalues f32 x d | basis f32 x (d * D), row-major
//! ```
//!
//! Basis rows are the principal directions already multiplied by
//! `1 / sqrt(eigenvalue + eps)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result, ResultExt};
use crate::tensor_io::{normalize_in_place, write_f32s, Vector};

pub const MODEL_MAGIC: &[u8; 4] = b"RMPW";
pub const DEFAULT_EPS: f32 = 1e-6;
pub const DEFAULT_OUTPUT_DIM: usize = 256;

/// Rows per rank-B covariance update.
const ACC_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    input_dim: usize,
    output_dim: usize,
    eps: f32,
    mean: Vec<f32>,
    eigenvalues: Vec<f32>,
    basis: Vec<f32>,
}

/// Streaming second-moment accumulator over l2-normalized samples.
///
/// Samples are buffered into fixed blocks and folded in with a matrix
/// product, so the result depends only on the sample order.
pub struct CovarianceAccumulator {
    dim: usize,
    count: usize,
    sum: Vec<f64>,
    second: DMatrix<f64>,
    block: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            second: DMatrix::zeros(dim, dim),
            block: Vec::with_capacity(ACC_BLOCK * dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, sample: &[f32]) -> Result<()> {
        if sample.len() != self.dim {
            return Err(Error::Fit(format!(
                "sample dim {} != accumulator dim {}",
                sample.len(),
                self.dim
            )));
        }
        let mut x = sample.to_vec();
        normalize_in_place(&mut x);
        for (s, &v) in self.sum.iter_mut().zip(&x) {
            *s += v as f64;
        }
        self.block.extend(x.iter().map(|&v| v as f64));
        self.count += 1;
        if self.block.len() == ACC_BLOCK * self.dim {
            self.flush();
        }
        Ok(())
    }

    fn flush(&mut self) {
        if self.block.is_empty() {
            return;
        }
        let rows = self.block.len() / self.dim;
        // row-major block == column-major D x rows
        let xt = DMatrix::from_column_slice(self.dim, rows, &self.block);
        self.second.gemm(1.0, &xt, &xt.transpose(), 1.0);
        self.block.clear();
    }

    /// Eigendecompose the covariance and keep the top `output_dim` directions.
    pub fn finish(mut self, output_dim: usize, eps: f32) -> Result<WhiteningModel> {
        self.flush();
        let d_in = self.dim;
        if output_dim == 0 || output_dim > d_in {
            return Err(Error::Fit(format!(
                "output dim {output_dim} must be in 1..={d_in} (pooled input dim)"
            )));
        }
        if self.count <= output_dim {
            return Err(Error::Fit(format!(
                "need more than {output_dim} samples to fit a {output_dim}-d whitening, got {}",
                self.count
            )));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = self.second / n;
        for i in 0..d_in {
            for j in 0..d_in {
                cov[(i, j)] -= mean[i] * mean[j];
            }
        }
        // symmetrize away accumulated rounding
        let cov = (&cov + cov.transpose()) * 0.5;
        let (eigenvalues, vectors) = sorted_eigen(cov);

        let mut basis = Vec::with_capacity(output_dim * d_in);
        let mut kept = Vec::with_capacity(output_dim);
        for k in 0..output_dim {
            let lambda = eigenvalues[k].max(0.0);
            let scale = 1.0 / (lambda + eps as f64).sqrt();
            basis.extend(vectors[k].iter().map(|&v| (v * scale) as f32));
            kept.push(lambda as f32);
        }
        Ok(WhiteningModel {
            input_dim: d_in,
            output_dim,
            eps,
            mean: mean.iter().map(|&m| m as f32).collect(),
            eigenvalues: kept,
            basis,
        })
    }
}

/// Eigenpairs sorted by descending eigenvalue. Each eigenvector's sign is
/// fixed so that its largest-magnitude component is positive.
fn sorted_eigen(cov: DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (j, &v)| {
                    if v.abs() > best.1.abs() {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            if col[pivot] < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();
    (values, vectors)
}

impl WhiteningModel {
    /// Fit on an in-memory sample set.
    pub fn fit(samples: &[Vector], output_dim: usize) -> Result<Self> {
        Self::fit_with_eps(samples, output_dim, DEFAULT_EPS)
    }

    pub fn fit_with_eps(samples: &[Vector], output_dim: usize, eps: f32) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Fit("no samples to fit whitening".into()))?;
        let mut acc = CovarianceAccumulator::new(first.dim());
        for s in samples {
            acc.add(s.as_slice())?;
        }
        acc.finish(output_dim, eps)
    }

    /// Build a model from explicit parts; `basis` rows must already be scaled.
    pub fn from_parts(
        mean: Vec<f32>,
        eigenvalues: Vec<f32>,
        basis: Vec<f32>,
        eps: f32,
    ) -> Result<Self> {
        let input_dim = mean.len();
        let output_dim = eigenvalues.len();
        if input_dim == 0 || output_dim == 0 || output_dim > input_dim {
            return Err(Error::Contract(format!(
                "whitening dims invalid (D={input_dim}, d={output_dim})"
            )));
        }
        if basis.len() != input_dim * output_dim {
            return Err(Error::Contract(format!(
                "basis holds {} values, expected {output_dim} x {input_dim}",
                basis.len()
            )));
        }
        Ok(Self {
            input_dim,
            output_dim,
            eps,
            mean,
            eigenvalues,
            basis,
        })
    }

    /// Zero mean and identity basis; `apply` reduces to double normalization.
    pub fn identity(dim: usize) -> Self {
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            basis[i * dim + i] = 1.0;
        }
        Self {
            input_dim: dim,
            output_dim: dim,
            eps: 0.0,
            mean: vec![0.0; dim],
            eigenvalues: vec![1.0; dim],
            basis,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn eps(&self) -> f32 {
        self.eps
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f32] {
        &self.eigenvalues
    }

    /// Scaled basis, `d x D` row-major.
    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    /// `basis * (normalize(v) - mean)` without the final normalization.
    pub fn project(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.input_dim {
            return Err(Error::Contract(format!(
                "whitening input dim {} != model dim {}",
                v.len(),
                self.input_dim
            )));
        }
        let mut x = v.to_vec();
        normalize_in_place(&mut x);
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(&a, &m)| a as f64 - m as f64)
            .collect();
        Ok(self
            .basis
            .chunks_exact(self.input_dim)
            .map(|row| {
                row.iter()
                    .zip(&centered)
                    .map(|(&b, &c)| b as f64 * c)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// The full post-processing step; output has unit norm or is zero.
    pub fn apply(&self, v: &[f32]) -> Result<Vector> {
        let mut out = self.project(v)?;
        normalize_in_place(&mut out);
        Vector::new(out)
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.output_dim as u32).to_le_bytes())?;
        w.write_all(&self.eps.to_le_bytes())?;
        write_f32s(w, &self.mean)?;
        write_f32s(w, &self.eigenvalues)?;
        write_f32s(w, &self.basis)
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format(0, format!("read failed: {e}")))?;
        let mut p = Parser {
            bytes: &bytes,
            at: 0,
        };
        if p.take(4)? != MODEL_MAGIC {
            return Err(Error::format(0, "bad magic, expected RMPW"));
        }
        let version = p.u32()?;
        if version != 1 {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let input_dim = p.u32()? as usize;
        let output_dim = p.u32()? as usize;
        let eps = p.f32()?;
        let mean = p.f32s(input_dim)?;
        let eigenvalues = p.f32s(output_dim)?;
        let basis = p.f32s(output_dim * input_dim)?;
        if p.at != bytes.len() {
            return Err(Error::format(p.at as u64, "trailing bytes after basis"));
        }
        Self::from_parts(mean, eigenvalues, basis, eps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.encode(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
    }
}

pub(crate) struct Parser<'a> {
    pub bytes: &'a [u8],
    pub at: usize,
}

impl<'a> Parser<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.at as u64, "truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let at = self.at;
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at as u64, "non-finite value"));
        }
        Ok(v)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        if (self.bytes.len() - self.at) / 4 < n {
            return Err(Error::format(self.at as u64, "truncated"));
        }
        (0..n).map(|_| self.f32()).collect()
    }
}
