//! Model fitting over a gallery and the ablation runner that compares
//! pipeline variants on a labelled gallery.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregate::{
    describe_batch, pooled_regions, regional_descriptors, thread_pool, PipelineConfig,
    SINGLE_RESOLUTION,
};
use crate::attention::{
    fit_dictionary, AttentionDictionary, DfCounter, KMeansParams, DEFAULT_MAX_ITERS, DEFAULT_WORDS,
};
use crate::backbone::{tensor_path, Backbone, ResolutionSet};
use crate::error::{Error, Result};
use crate::pooling::PoolingMode;
use crate::retrieval::{build_index, evaluate, EvalOptions, Evaluation, GroundTruth};
use crate::tensor_io::{normalize_in_place, write_tensor, DescriptorSet, FeatureMap};
use crate::whitening::{CovarianceAccumulator, WhiteningModel, DEFAULT_EPS, DEFAULT_OUTPUT_DIM};

pub const DEFAULT_SAMPLE: usize = 30_000;
/// Images handed to the worker pool at a time while streaming a gallery.
const STREAM_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct FitParams {
    pub pooling: PoolingMode,
    pub resolutions: ResolutionSet,
    pub scales: usize,
    pub output_dim: usize,
    /// Dictionary size; 0 skips the attention dictionary.
    pub words: usize,
    /// Number of gallery images sampled for whitening and k-means.
    pub sample: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Optional cap on regional descriptors fed to k-means.
    pub kmeans_max_points: Option<usize>,
    pub eps: f32,
    pub parallelism: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            pooling: PoolingMode::Smac,
            resolutions: ResolutionSet::default(),
            scales: crate::aggregate::DEFAULT_SCALES,
            output_dim: DEFAULT_OUTPUT_DIM,
            words: DEFAULT_WORDS,
            sample: DEFAULT_SAMPLE,
            seed: 0,
            kmeans_iters: DEFAULT_MAX_ITERS,
            kmeans_max_points: None,
            eps: DEFAULT_EPS,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModels {
    pub whitening: WhiteningModel,
    pub dictionary: Option<AttentionDictionary>,
    /// Gallery ids the models were fit on, in gallery order.
    pub sampled: Vec<String>,
    /// Whether the requested sample exceeded the gallery.
    pub clamped: bool,
    /// Images that failed extraction and were skipped.
    pub skipped: Vec<(String, String)>,
    /// k-means inertia per iteration (empty without a dictionary).
    pub inertia: Vec<f64>,
}

/// Seeded uniform sample of `k` ids, returned in their original order.
pub fn sample_ids(ids: &[String], k: usize, seed: u64) -> (Vec<String>, bool) {
    if k >= ids.len() {
        return (ids.to_vec(), k > ids.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample_indices(&mut rng, ids.len(), k).into_vec();
    picked.sort_unstable();
    (picked.into_iter().map(|i| ids[i].clone()).collect(), false)
}

/// Map `f` over `ids` in fixed-size chunks on `pool`, feeding results to
/// `sink` in input order. Failed images go to `skipped`.
fn stream<T: Send, F, S>(
    pool: &rayon::ThreadPool,
    ids: &[String],
    f: F,
    mut sink: S,
    skipped: &mut Vec<(String, String)>,
) -> Result<()>
where
    F: Fn(&str) -> Result<T> + Sync,
    S: FnMut(&str, T) -> Result<()>,
{
    for chunk in ids.chunks(STREAM_CHUNK) {
        let out: Vec<Result<T>> = pool.install(|| chunk.par_iter().map(|id| f(id)).collect());
        for (id, r) in chunk.iter().zip(out) {
            match r {
                Ok(v) => sink(id, v)?,
                Err(e) => {
                    log::warn!("skipping `{id}`: {e}");
                    skipped.push((id.clone(), e.to_string()));
                }
            }
        }
    }
    Ok(())
}

/// Fit whitening (and, when `params.words > 0`, the attention dictionary)
/// for one pipeline variant.
///
/// Whitening and k-means use a seeded sample of the gallery; document
/// frequencies are counted over every id in `gallery`.
pub fn fit_models<B: Backbone + ?Sized>(
    backbone: &B,
    gallery: &[String],
    params: &FitParams,
) -> Result<FittedModels> {
    if gallery.is_empty() {
        return Err(Error::Fit("empty gallery".into()));
    }
    let pool = thread_pool(params.parallelism)?;
    let (sampled, clamped) = sample_ids(gallery, params.sample, params.seed);
    if clamped {
        log::warn!(
            "sample size {} exceeds gallery size {}; using the whole gallery",
            params.sample,
            gallery.len()
        );
    }
    let extract = |id: &str| backbone.extract(id, &params.resolutions);
    let mut skipped = Vec::new();

    let mut acc: Option<CovarianceAccumulator> = None;
    stream(
        &pool,
        &sampled,
        |id| pooled_regions(&extract(id)?, params.pooling, params.scales),
        |_, regions| {
            for r in regions {
                acc.get_or_insert_with(|| CovarianceAccumulator::new(r.len()))
                    .add(&r)?;
            }
            Ok(())
        },
        &mut skipped,
    )?;
    let acc = acc.ok_or_else(|| Error::Fit("no sampled image could be pooled".into()))?;
    let whitening = acc.finish(params.output_dim, params.eps)?;

    if params.words == 0 {
        return Ok(FittedModels {
            whitening,
            dictionary: None,
            sampled,
            clamped,
            skipped,
            inertia: Vec::new(),
        });
    }

    let d = whitening.output_dim();
    let mut points: Vec<f32> = Vec::new();
    let mut ok_sampled = Vec::with_capacity(sampled.len());
    let mut second_skips = Vec::new();
    stream(
        &pool,
        &sampled,
        |id| regional_descriptors(&extract(id)?, params.pooling, params.scales, &whitening),
        |id, regions| {
            ok_sampled.push(id.to_owned());
            for r in regions {
                points.extend_from_slice(&r);
            }
            Ok(())
        },
        &mut second_skips,
    )?;
    if let Some(cap) = params.kmeans_max_points {
        let n = points.len() / d;
        if n > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x6b6d_6561_6e73);
            let mut keep = sample_indices(&mut rng, n, cap).into_vec();
            keep.sort_unstable();
            let mut sub = Vec::with_capacity(cap * d);
            for i in keep {
                sub.extend_from_slice(&points[i * d..(i + 1) * d]);
            }
            points = sub;
        }
    }
    let fit = pool.install(|| {
        fit_dictionary(
            &points,
            d,
            KMeansParams {
                k: params.words,
                seed: params.seed,
                max_iters: params.kmeans_iters,
            },
        )
    })?;
    drop(points);
    let mut dictionary = AttentionDictionary::from_centroids(fit.centroids, d)?;

    let mut counter = DfCounter::new(dictionary.k());
    let dict_ref = &dictionary;
    stream(
        &pool,
        gallery,
        |id| {
            regional_descriptors(&extract(id)?, params.pooling, params.scales, &whitening)?
                .iter()
                .map(|v| dict_ref.quantize(v))
                .collect::<Result<Vec<_>>>()
        },
        |_, words| {
            counter.add_document(words);
            Ok(())
        },
        &mut skipped,
    )?;
    dictionary.set_document_frequencies(&counter)?;
    Ok(FittedModels {
        whitening,
        dictionary: Some(dictionary),
        sampled,
        clamped,
        skipped,
        inertia: fit.inertia,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExtractReport {
    pub written: Vec<String>,
    /// Ids whose tensors were all present already.
    pub existing: Vec<String>,
    pub failures: Vec<(String, String)>,
}

impl ExtractReport {
    /// `id<TAB>status` lines in input order. Images whose tensors were
    /// already present count as `ok`, so a rerun reproduces the manifest.
    pub fn manifest(&self, ids: &[String]) -> String {
        let failed: HashMap<&str, &str> = self
            .failures
            .iter()
            .map(|(i, e)| (i.as_str(), e.as_str()))
            .collect();
        let mut out = String::new();
        for id in ids {
            match failed.get(id.as_str()) {
                Some(e) => {
                    out.push_str(&format!("{id}\tfailed: {}\n", e.replace(['\n', '\t'], " ")))
                }
                None => out.push_str(&format!("{id}\tok\n")),
            }
        }
        out
    }
}

/// Extract feature maps for `ids` and store them as `<root>/<id>/<size>.rmtf`.
/// Images whose tensors all exist are skipped unless `force` is set.
pub fn write_tensors<B: Backbone + ?Sized>(
    backbone: &B,
    ids: &[String],
    resolutions: &ResolutionSet,
    root: &std::path::Path,
    force: bool,
    parallelism: usize,
) -> Result<ExtractReport> {
    let pool = thread_pool(parallelism)?;
    let mut report = ExtractReport::default();
    let todo: Vec<String> = ids
        .iter()
        .filter(|id| {
            let done = !force
                && resolutions
                    .sizes()
                    .iter()
                    .all(|&s| tensor_path(root, id, s).is_file());
            if done {
                report.existing.push((*id).clone());
            }
            !done
        })
        .cloned()
        .collect();
    let mut failures = Vec::new();
    stream(
        &pool,
        &todo,
        |id| {
            let maps = backbone.extract(id, resolutions)?;
            for (&s, map) in resolutions.sizes().iter().zip(&maps) {
                let path = tensor_path(root, id, s);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                write_tensor(&path, map)?;
            }
            Ok(())
        },
        |id, ()| {
            report.written.push(id.to_owned());
            Ok(())
        },
        &mut failures,
    )?;
    report.failures = failures;
    Ok(report)
}

/// Feature maps held in memory, keyed by image id and input size.
#[derive(Debug, Default)]
pub struct FeatureCache {
    maps: HashMap<String, Vec<(usize, FeatureMap)>>,
}

impl FeatureCache {
    /// Extract every id at every size in `resolutions` once.
    /// Images that fail are left out and reported.
    pub fn fill<B: Backbone + ?Sized>(
        backbone: &B,
        ids: &[String],
        resolutions: &ResolutionSet,
        parallelism: usize,
    ) -> Result<(Self, Vec<(String, String)>)> {
        let pool = thread_pool(parallelism)?;
        let mut cache = Self::default();
        let mut failed = Vec::new();
        stream(
            &pool,
            ids,
            |id| backbone.extract(id, resolutions),
            |id, maps| {
                let sized = resolutions.sizes().iter().copied().zip(maps).collect();
                cache.maps.insert(id.to_owned(), sized);
                Ok(())
            },
            &mut failed,
        )?;
        Ok((cache, failed))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

impl Backbone for FeatureCache {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>> {
        let maps = self.maps.get(id).ok_or_else(|| Error::Input {
            id: id.into(),
            msg: "not in feature cache".into(),
        })?;
        resolutions
            .sizes()
            .iter()
            .map(|s| {
                maps.iter()
                    .find(|(size, _)| size == s)
                    .map(|(_, m)| m.clone())
                    .ok_or_else(|| {
                        Error::Config(format!("image `{id}` has no cached map at {s}px"))
                    })
            })
            .collect()
    }
}

/// Which of the three modifications a pipeline variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub multi_resolution: bool,
    pub smac: bool,
    pub attention: bool,
}

impl Variant {
    pub const fn new(multi_resolution: bool, smac: bool, attention: bool) -> Self {
        Self {
            multi_resolution,
            smac,
            attention,
        }
    }

    /// The six rows of the published ablation, in table order.
    pub const TABLE: [Variant; 6] = [
        Variant::new(false, false, false),
        Variant::new(false, true, false),
        Variant::new(true, false, false),
        Variant::new(false, false, true),
        Variant::new(true, false, true),
        Variant::new(true, true, true),
    ];

    pub fn pooling(&self) -> PoolingMode {
        if self.smac {
            PoolingMode::Smac
        } else {
            PoolingMode::Mac
        }
    }

    pub fn resolutions(&self, multi: &ResolutionSet) -> Result<ResolutionSet> {
        if self.multi_resolution {
            Ok(multi.clone())
        } else {
            ResolutionSet::single(SINGLE_RESOLUTION)
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.multi_resolution {
            f.write_str("MR-")?;
        }
        f.write_str(if self.smac { "R-SMAC" } else { "R-MAC" })?;
        if self.attention {
            f.write_str(" w/URA")?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts table labels (`MR-R-SMAC w/URA`) or toggle lists
    /// (`mr+smac+ura`, `none`).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t.is_empty() {
            return Err(Error::Config("empty method name".into()));
        }
        if t.starts_with("mr-r-") || t.starts_with("r-") {
            let (mr, rest) = match t.strip_prefix("mr-") {
                Some(rest) => (true, rest),
                None => (false, t.as_str()),
            };
            let (base, ura) = match rest.split_once(" w/") {
                Some((b, "ura")) => (b, true),
                Some(_) => return Err(Error::Config(format!("unknown method `{s}`"))),
                None => (rest, false),
            };
            let smac = match base {
                "r-mac" => false,
                "r-smac" => true,
                _ => return Err(Error::Config(format!("unknown method `{s}`"))),
            };
            return Ok(Variant::new(mr, smac, ura));
        }
        let mut v = Variant::new(false, false, false);
        if t == "none" || t == "rmac" {
            return Ok(v);
        }
        for tok in t.split('+') {
            match tok.trim() {
                "mr" => v.multi_resolution = true,
                "smac" => v.smac = true,
                "ura" => v.attention = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown toggle `{other}` in `{s}` (expected mr, smac, ura)"
                    )))
                }
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone)]
pub struct AblationParams {
    pub resolutions: ResolutionSet,
    pub scales: usize,
    pub output_dim: usize,
    pub words: usize,
    pub sample: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub kmeans_max_points: Option<usize>,
    pub topk: usize,
    pub exclude_self: bool,
    pub parallelism: usize,
    /// Add a row of seeded random descriptors as a chance baseline.
    pub random_baseline: bool,
}

impl Default for AblationParams {
    fn default() -> Self {
        Self {
            resolutions: ResolutionSet::default(),
            scales: crate::aggregate::DEFAULT_SCALES,
            output_dim: DEFAULT_OUTPUT_DIM,
            words: DEFAULT_WORDS,
            sample: DEFAULT_SAMPLE,
            seed: 0,
            kmeans_iters: DEFAULT_MAX_ITERS,
            kmeans_max_points: None,
            topk: crate::retrieval::DEFAULT_TOPK,
            exclude_self: true,
            parallelism: 1,
            random_baseline: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub variant: Option<Variant>,
    pub dim: usize,
    pub nar: f64,
    pub map: f64,
    pub descriptors: DescriptorSet,
    pub evaluation: Evaluation,
}

/// Seeded random unit vectors, one per id.
pub fn random_descriptors(ids: &[String], dim: usize, seed: u64) -> Result<DescriptorSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = DescriptorSet::with_capacity(dim, ids.len());
    let mut v = vec![0.0f32; dim];
    for id in ids {
        for x in v.iter_mut() {
            *x = rng.random_range(-1.0f32..1.0);
        }
        normalize_in_place(&mut v);
        set.push(id.clone(), &v)?;
    }
    Ok(set)
}

/// Describe and evaluate `gallery` under each variant. Feature maps are
/// extracted once and shared across variants.
pub fn run_ablation<B: Backbone + ?Sized>(
    backbone: &B,
    gallery: &[String],
    gt: &GroundTruth,
    variants: &[Variant],
    params: &AblationParams,
) -> Result<Vec<AblationRow>> {
    let needs_single = variants.iter().any(|v| !v.multi_resolution);
    let mut sizes: Vec<usize> = params.resolutions.sizes().to_vec();
    if needs_single && !sizes.contains(&SINGLE_RESOLUTION) {
        sizes.push(SINGLE_RESOLUTION);
        sizes.sort_unstable();
    }
    let all = ResolutionSet::new(sizes)?;
    let (cache, failed) = FeatureCache::fill(backbone, gallery, &all, params.parallelism)?;
    if cache.is_empty() {
        return Err(Error::Fit("no gallery image could be extracted".into()));
    }
    let ids: Vec<String> = gallery
        .iter()
        .filter(|id| !failed.iter().any(|(f, _)| f == *id))
        .cloned()
        .collect();
    let opts = EvalOptions {
        topk: params.topk,
        exclude_self: params.exclude_self,
    };

    let mut rows = Vec::new();
    for &variant in variants {
        let fit_params = FitParams {
            pooling: variant.pooling(),
            resolutions: variant.resolutions(&params.resolutions)?,
            scales: params.scales,
            output_dim: params.output_dim,
            words: if variant.attention { params.words } else { 0 },
            sample: params.sample,
            seed: params.seed,
            kmeans_iters: params.kmeans_iters,
            kmeans_max_points: params.kmeans_max_points,
            eps: DEFAULT_EPS,
            parallelism: params.parallelism,
        };
        let models = fit_models(&cache, &ids, &fit_params)?;
        let mut config = PipelineConfig::new(
            fit_params.pooling,
            fit_params.resolutions.clone(),
            models.whitening,
        )
        .with_scales(params.scales);
        if let Some(dict) = models.dictionary {
            config = config.with_dictionary(dict);
        }
        let batch = describe_batch(&ids, &cache, &config, params.parallelism)?;
        let descriptors = batch.descriptors;
        let index = build_index(descriptors.clone())?;
        let evaluation = evaluate(&index, None, gt, opts)?;
        log::info!(
            "{variant}: NAR {:.4}, MAP@{} {:.4}",
            evaluation.nar,
            params.topk,
            evaluation.map
        );
        rows.push(AblationRow {
            method: variant.to_string(),
            variant: Some(variant),
            dim: config.output_dim(),
            nar: evaluation.nar,
            map: evaluation.map,
            descriptors,
            evaluation,
        });
    }
    if params.random_baseline {
        let descriptors = random_descriptors(&ids, params.output_dim, params.seed)?;
        let index = build_index(descriptors.clone())?;
        let evaluation = evaluate(&index, None, gt, opts)?;
        rows.push(AblationRow {
            method: "random".into(),
            variant: None,
            dim: params.output_dim,
            nar: evaluation.nar,
            map: evaluation.map,
            descriptors,
            evaluation,
        });
    }
    Ok(rows)
}

/// Tab-separated table with columns Method, DIM, NAR, MAP@K (MAP in percent).
pub fn ablation_table(rows: &[AblationRow], topk: usize) -> String {
    let mut out = format!("Method\tDIM\tNAR\tMAP@{topk}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.3}\t{:.1}\n",
            r.method,
            r.dim,
            r.nar,
            100.0 * r.map
        ));
    }
    out
}
