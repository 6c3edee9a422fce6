//! Full image descriptor: every region of every resolution is pooled,
//! post-processed, weighted by its attention and summed, then the sum is
//! l2-normalized.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::attention::AttentionDictionary;
use crate::backbone::{Backbone, ResolutionSet};
use crate::error::{Error, Result, ResultExt};
use crate::pooling::{pool_region, PoolingMode};
use crate::region::{region_grid, RegionSpec};
use crate::tensor_io::{normalize_in_place, DescriptorSet, FeatureMap};
use crate::whitening::WhiteningModel;

pub const DEFAULT_SCALES: usize = 4;
/// Input size used when multi-resolution is off.
pub const SINGLE_RESOLUTION: usize = 224;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub pooling: PoolingMode,
    pub resolutions: ResolutionSet,
    pub scales: usize,
    pub whitening: Arc<WhiteningModel>,
    /// Regional attention is on when a dictionary is present.
    pub dictionary: Option<Arc<AttentionDictionary>>,
}

impl PipelineConfig {
    pub fn new(
        pooling: PoolingMode,
        resolutions: ResolutionSet,
        whitening: WhiteningModel,
    ) -> Self {
        Self {
            pooling,
            resolutions,
            scales: DEFAULT_SCALES,
            whitening: Arc::new(whitening),
            dictionary: None,
        }
    }

    pub fn with_scales(mut self, scales: usize) -> Self {
        self.scales = scales;
        self
    }

    pub fn with_dictionary(mut self, dictionary: AttentionDictionary) -> Self {
        self.dictionary = Some(Arc::new(dictionary));
        self
    }

    pub fn output_dim(&self) -> usize {
        self.whitening.output_dim()
    }

    /// Check that the referenced models fit together for `channels`-channel maps.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("scale count must be >= 1".into()));
        }
        let pooled = self.pooling.output_dim(channels);
        if self.whitening.input_dim() != pooled {
            return Err(Error::Config(format!(
                "whitening expects {}-d input but {} pooling of {channels} channels gives {pooled}",
                self.whitening.input_dim(),
                self.pooling
            )));
        }
        if let Some(dict) = &self.dictionary {
            if dict.dim() != self.whitening.output_dim() {
                return Err(Error::Config(format!(
                    "dictionary dim {} != whitening output dim {}",
                    dict.dim(),
                    self.whitening.output_dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptor {
    pub id: String,
    pub vector: Vec<f32>,
}

fn check_maps(maps: &[FeatureMap]) -> Result<usize> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("no feature maps to describe".into()))?;
    if maps.iter().any(|m| m.channels() != first.channels()) {
        return Err(Error::Contract(
            "feature maps differ in channel count".into(),
        ));
    }
    Ok(first.channels())
}

/// Pooled (not yet post-processed) vectors of every region of every map,
/// resolution-major then region-major.
pub fn pooled_regions(
    maps: &[FeatureMap],
    pooling: PoolingMode,
    scales: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for map in maps {
        for r in region_grid(map.width(), map.height(), scales) {
            out.push(pool_region(map, &r, pooling)?.into_inner());
        }
    }
    Ok(out)
}

/// Post-processed regional descriptors, in the same order as [`pooled_regions`].
pub fn regional_descriptors(
    maps: &[FeatureMap],
    pooling: PoolingMode,
    scales: usize,
    whitening: &WhiteningModel,
) -> Result<Vec<Vec<f32>>> {
    pooled_regions(maps, pooling, scales)?
        .iter()
        .map(|v| whitening.apply(v).map(|w| w.into_inner()))
        .collect()
}

fn region_context(id: &str, map: &FeatureMap, r: &RegionSpec) -> String {
    format!(
        "image `{id}`, {}x{} map, region (x={}, y={}, side={}, scale={})",
        map.width(),
        map.height(),
        r.x,
        r.y,
        r.side,
        r.scale
    )
}

/// Descriptor of one image from its per-resolution feature maps.
pub fn describe(id: &str, maps: &[FeatureMap], config: &PipelineConfig) -> Result<ImageDescriptor> {
    let channels = check_maps(maps)?;
    config.validate(channels)?;
    let dim = config.output_dim();
    let mut acc = vec![0.0f64; dim];
    for map in maps {
        for r in region_grid(map.width(), map.height(), config.scales) {
            let term = pool_region(map, &r, config.pooling)
                .and_then(|v| config.whitening.apply(v.as_slice()))
                .with_context(|| region_context(id, map, &r))?;
            let weight = match &config.dictionary {
                Some(dict) => dict.attend(term.as_slice())? as f64,
                None => 1.0,
            };
            if weight == 0.0 {
                continue;
            }
            for (a, &t) in acc.iter_mut().zip(term.as_slice()) {
                *a += weight * t as f64;
            }
        }
    }
    let mut vector: Vec<f32> = acc.iter().map(|&a| a as f32).collect();
    normalize_in_place(&mut vector);
    Ok(ImageDescriptor {
        id: id.to_owned(),
        vector,
    })
}

/// Extract and describe one image through a backbone.
pub fn describe_image<B: Backbone + ?Sized>(
    id: &str,
    backbone: &B,
    config: &PipelineConfig,
) -> Result<ImageDescriptor> {
    let maps = backbone.extract(id, &config.resolutions)?;
    describe(id, &maps, config)
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub descriptors: DescriptorSet,
    /// `(id, error message)` for every image that could not be described.
    pub failures: Vec<(String, String)>,
    /// Every input id in order with `None` on success.
    statuses: Vec<(String, Option<String>)>,
}

impl BatchOutput {
    /// Line-oriented `id<TAB>status` manifest, one line per input id.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (id, err) in &self.statuses {
            match err {
                None => out.push_str(&format!("{id}\tok\n")),
                Some(e) => {
                    out.push_str(&format!("{id}\tfailed: {}\n", e.replace(['\n', '\t'], " ")))
                }
            }
        }
        out
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.manifest().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Describe many images with `parallelism` workers. Output order follows
/// `ids`; per-image failures are collected, and only a batch where every
/// image fails is an error.
pub fn describe_batch<B: Backbone + ?Sized>(
    ids: &[String],
    backbone: &B,
    config: &PipelineConfig,
    parallelism: usize,
) -> Result<BatchOutput> {
    let pool = thread_pool(parallelism)?;
    let results: Vec<Result<ImageDescriptor>> = pool.install(|| {
        ids.par_iter()
            .map(|id| describe_image(id, backbone, config))
            .collect()
    });
    let mut descriptors = DescriptorSet::with_capacity(config.output_dim(), ids.len());
    let mut failures = Vec::new();
    let mut statuses = Vec::with_capacity(ids.len());
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(d) => {
                descriptors.push(d.id, &d.vector)?;
                statuses.push((id.clone(), None));
            }
            Err(e) => {
                log::warn!("failed to describe `{id}`: {e}");
                failures.push((id.clone(), e.to_string()));
                statuses.push((id.clone(), Some(e.to_string())));
            }
        }
    }
    if !ids.is_empty() && descriptors.is_empty() {
        return Err(Error::Input {
            id: ids[0].clone(),
            msg: format!(
                "all {} images failed; first error: {}",
                ids.len(),
                failures[0].1
            ),
        });
    }
    Ok(BatchOutput {
        descriptors,
        failures,
        statuses,
    })
}
