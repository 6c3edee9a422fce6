//! Unsupervised regional attention.
//!
//! Post-processed regional descriptors are quantized against a k-means
//! vocabulary learned on the gallery. Each image is a document made of the
//! words its regions fall into, and a region's attention weight is the
//! inverse document frequency of its word, `ln((1 + n_docs) / (1 + df))`.
//!
//! Dictionary file layout (`RMDC`, version 1, little-endian):
//!
//! ```text
//! magic "RMDC" | version u32 | k u32 | d u32 | n_docs u64
//! centroids f32 x (k * d) | df u64 x k | idf f32 x k
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result, ResultExt};
use crate::tensor_io::write_f32s;
use crate::whitening::Parser;

pub const DICT_MAGIC: &[u8; 4] = b"RMDC";
pub const DEFAULT_WORDS: usize = 1024;
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Lloyd iterations stop once the relative inertia change drops below this.
pub const INERTIA_TOL: f64 = 1e-4;

/// Points per rayon task during assignment. Fixed so results do not depend
/// on the thread count.
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_WORDS,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    /// Inertia after each assignment step, in order.
    pub inertia: Vec<f64>,
}

impl KMeansFit {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = x as f64 - c as f64;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (w, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (w, d);
        }
    }
    best
}

fn assign(points: &[f32], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points
        .par_chunks(ASSIGN_CHUNK * dim)
        .flat_map_iter(|block| {
            block
                .chunks_exact(dim)
                .map(|p| nearest(p, centroids, dim))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// k-means++ seeding with a seeded generator.
fn seed_centroids(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend(row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can leave `target` just past the last candidate
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&v| v as f64));
        let c = &centroids[start..];
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd's k-means with k-means++ seeding over `points` (`n x dim`, row-major).
///
/// Empty clusters are moved onto the points farthest from their current
/// centroid. Inertia is recorded after each assignment and never increases.
pub fn fit_dictionary(points: &[f32], dim: usize, params: KMeansParams) -> Result<KMeansFit> {
    let KMeansParams { k, seed, max_iters } = params;
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Fit(format!(
            "sample buffer of {} floats is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Fit(format!(
            "k-means needs at least k = {k} samples, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, dim, k, &mut rng);
    let mut inertia = Vec::new();
    let mut labels = assign(points, &centroids, dim);

    for iter in 0..=max_iters {
        let current: f64 = labels.iter().map(|l| l.1).sum();
        if let Some(&prev) = inertia.last() {
            debug_assert!(
                current <= prev * (1.0 + 1e-12) + 1e-300,
                "inertia rose from {prev} to {current}"
            );
        }
        inertia.push(current);
        let converged = match inertia.len() {
            0 | 1 => false,
            len => {
                let prev = inertia[len - 2];
                prev <= 0.0 || (prev - current).abs() / prev < INERTIA_TOL
            }
        };
        if converged || current == 0.0 || iter == max_iters {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &(w, _)) in points.chunks_exact(dim).zip(&labels) {
            counts[w] += 1;
            for (s, &v) in sums[w * dim..(w + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&w| counts[w] == 0).collect();
        for w in 0..k {
            if counts[w] > 0 {
                let inv = 1.0 / counts[w] as f64;
                for (c, s) in centroids[w * dim..(w + 1) * dim]
                    .iter_mut()
                    .zip(&sums[w * dim..(w + 1) * dim])
                {
                    *c = s * inv;
                }
            }
        }
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| labels[b].1.total_cmp(&labels[a].1).then(a.cmp(&b)));
            for (&w, &p) in empty.iter().zip(&far) {
                for (c, &v) in centroids[w * dim..(w + 1) * dim]
                    .iter_mut()
                    .zip(&points[p * dim..(p + 1) * dim])
                {
                    *c = v as f64;
                }
            }
        }
        labels = assign(points, &centroids, dim);
    }

    Ok(KMeansFit {
        dim,
        centroids: centroids.iter().map(|&c| c as f32).collect(),
        inertia,
    })
}

/// Document-frequency counter over a stream of images.
#[derive(Debug, Clone)]
pub struct DfCounter {
    df: Vec<u64>,
    n_docs: u64,
    seen: Vec<u64>,
}

impl DfCounter {
    pub fn new(k: usize) -> Self {
        Self {
            df: vec![0; k],
            n_docs: 0,
            seen: vec![u64::MAX; k],
        }
    }

    /// Count one document given the words its regions quantize to.
    pub fn add_document(&mut self, words: impl IntoIterator<Item = usize>) {
        let doc = self.n_docs;
        for w in words {
            if self.seen[w] != doc {
                self.seen[w] = doc;
                self.df[w] += 1;
            }
        }
        self.n_docs += 1;
    }

    /// Merge counts gathered by another worker.
    pub fn merge(&mut self, other: &DfCounter) {
        for (a, b) in self.df.iter_mut().zip(&other.df) {
            *a += b;
        }
        self.n_docs += other.n_docs;
    }

    pub fn df(&self) -> &[u64] {
        &self.df
    }

    pub fn n_docs(&self) -> u64 {
        self.n_docs
    }
}

pub fn idf_value(n_docs: u64, df: u64) -> f32 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDictionary {
    dim: usize,
    centroids: Vec<f32>,
    df: Vec<u64>,
    idf: Vec<f32>,
    n_docs: u64,
}

impl AttentionDictionary {
    /// Dictionary with centroids only; every word has weight zero until
    /// document frequencies are attached.
    pub fn from_centroids(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Contract(format!(
                "{} centroid values do not form rows of dim {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite centroid".into()));
        }
        let k = centroids.len() / dim;
        Ok(Self {
            dim,
            centroids,
            df: vec![0; k],
            idf: vec![0.0; k],
            n_docs: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.df.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, w: usize) -> &[f32] {
        &self.centroids[w * self.dim..(w + 1) * self.dim]
    }

    pub fn df(&self) -> &[u64] {
        &self.df
    }

    pub fn idf(&self) -> &[f32] {
        &self.idf
    }

    pub fn n_docs(&self) -> u64 {
        self.n_docs
    }

    /// Nearest centroid by Euclidean distance, lowest id on ties.
    pub fn quantize(&self, v: &[f32]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::Contract(format!(
                "quantize input dim {} != dictionary dim {}",
                v.len(),
                self.dim
            )));
        }
        let mut best = (0, f64::INFINITY);
        for (w, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist_f32(v, c);
            if d < best.1 {
                best = (w, d);
            }
        }
        Ok(best.0)
    }

    /// Attention weight of a regional descriptor: the IDF of its word.
    pub fn attend(&self, v: &[f32]) -> Result<f32> {
        Ok(self.idf[self.quantize(v)?])
    }

    pub fn set_document_frequencies(&mut self, counter: &DfCounter) -> Result<()> {
        if counter.df.len() != self.k() {
            return Err(Error::Contract(format!(
                "df table has {} words, dictionary has {}",
                counter.df.len(),
                self.k()
            )));
        }
        if counter.n_docs == 0 {
            return Err(Error::Fit(
                "cannot compute IDF over an empty gallery".into(),
            ));
        }
        self.n_docs = counter.n_docs;
        self.df = counter.df.clone();
        self.idf = self
            .df
            .iter()
            .map(|&df| idf_value(self.n_docs, df))
            .collect();
        Ok(())
    }

    /// Document frequencies and IDF from images given as their regional
    /// descriptors.
    pub fn compute_idf<'a, I, D>(&mut self, documents: I) -> Result<()>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a [f32]>,
    {
        let mut counter = DfCounter::new(self.k());
        for doc in documents {
            let words = doc
                .into_iter()
                .map(|v| self.quantize(v))
                .collect::<Result<Vec<_>>>()?;
            counter.add_document(words);
        }
        self.set_document_frequencies(&counter)
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DICT_MAGIC)?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.n_docs.to_le_bytes())?;
        write_f32s(w, &self.centroids)?;
        for df in &self.df {
            w.write_all(&df.to_le_bytes())?;
        }
        write_f32s(w, &self.idf)
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format(0, format!("read failed: {e}")))?;
        let mut p = Parser {
            bytes: &bytes,
            at: 0,
        };
        if p.take(4)? != DICT_MAGIC {
            return Err(Error::format(0, "bad magic, expected RMDC"));
        }
        let version = p.u32()?;
        if version != 1 {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let k = p.u32()? as usize;
        let dim = p.u32()? as usize;
        let n_docs = p.u64()?;
        if k == 0 || dim == 0 {
            return Err(Error::format(
                8,
                format!("invalid dictionary shape k={k}, d={dim}"),
            ));
        }
        let centroids = p.f32s(k * dim)?;
        let df = (0..k).map(|_| p.u64()).collect::<Result<Vec<_>>>()?;
        let idf_at = p.at;
        let idf = p.f32s(k)?;
        if p.at != bytes.len() {
            return Err(Error::format(p.at as u64, "trailing bytes after idf table"));
        }
        if let Some(w) = idf.iter().position(|&v| v < 0.0) {
            return Err(Error::format(
                (idf_at + 4 * w) as u64,
                "negative idf weight",
            ));
        }
        Ok(Self {
            dim,
            centroids,
            df,
            idf,
            n_docs,
        })
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
