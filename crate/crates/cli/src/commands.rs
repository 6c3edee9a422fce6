//! One function per subcommand. Each reads a resolved [`RunConfig`] and
//! returns how many inputs failed, so callers can tell partial success from
//! full success.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rmac_core::aggregate::{describe_batch, PipelineConfig};
use rmac_core::attention::AttentionDictionary;
use rmac_core::backbone::{
    Backbone, ImageBackbone, ImageDir, ImageSource, ResolutionSet, StubNetwork, TensorDir,
};
use rmac_core::pipeline::{
    ablation_table, fit_models, run_ablation, write_tensors, AblationParams, FitParams, Variant,
};
use rmac_core::pooling::PoolingMode;
use rmac_core::retrieval::{
    build_index, evaluate, parse_rankings, write_rankings, EvalOptions, GroundTruth, RankingResult,
};
use rmac_core::synthetic::SyntheticGallery;
use rmac_core::tensor_io::{read_descriptors, write_descriptors};
use rmac_core::whitening::WhiteningModel;

use crate::config::RunConfig;
use crate::html::contact_sheet;

pub const WHITENING_FILE: &str = "whitening.rmpw";
pub const DICTIONARY_FILE: &str = "dictionary.rmdc";
pub const FIT_CONFIG_FILE: &str = "fit.conf";
/// Keys that must agree between `fit` and `embed`.
const MODEL_KEYS: &[&str] = &["pooling", "resolutions", "scales", "dim", "attention"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    /// Inputs that could not be processed.
    pub failures: usize,
}

impl Outcome {
    fn partial(failures: usize) -> Self {
        Self { failures }
    }
}

/// Gallery ids and a backbone over either stored tensors or an image directory.
pub fn open_backbone(cfg: &RunConfig) -> Result<(Box<dyn Backbone>, Vec<String>)> {
    if let Some(dir) = cfg.get("tensors") {
        let source = TensorDir::new(dir);
        let ids = source
            .ids()
            .with_context(|| format!("cannot list tensors in {dir}"))?;
        return Ok((Box::new(source), ids));
    }
    let dir = cfg
        .get("images")
        .context("need --tensors or --images to locate the gallery")?;
    let source =
        ImageDir::open(dir).with_context(|| format!("cannot open image directory {dir}"))?;
    let ids = source.ids();
    if let Some(model) = cfg.get("model") {
        return onnx_backbone(source, model, cfg).map(|b| (b, ids));
    }
    let channels: usize = cfg.parse("stub_channels")?;
    log::info!("no --model given; using the {channels}-channel stub network");
    let network = StubNetwork::new(channels, cfg.parse("stub_seed")?)?;
    Ok((Box::new(ImageBackbone::new(source, network)), ids))
}

#[cfg(feature = "onnx")]
fn onnx_backbone(source: ImageDir, model: &str, cfg: &RunConfig) -> Result<Box<dyn Backbone>> {
    let network =
        rmac_core::backbone::OnnxNetwork::new(model, cfg.parse("channels")?, cfg.parse("stride")?)?;
    Ok(Box::new(ImageBackbone::new(source, network)))
}

#[cfg(not(feature = "onnx"))]
fn onnx_backbone(_: ImageDir, model: &str, _: &RunConfig) -> Result<Box<dyn Backbone>> {
    bail!("cannot load `{model}`: this build has no ONNX support (rebuild with --features onnx)")
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.path("out")?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Refuse to replace an existing file unless `force` is set.
fn check_overwrite(cfg: &RunConfig, path: &Path) -> Result<()> {
    if path.exists() && !cfg.flag("force")? {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn extract(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.get("tensors").is_some() {
        bail!("extract reads --images; --tensors is an input for the other commands");
    }
    let (backbone, ids) = open_backbone(cfg)?;
    let root = out_dir(cfg)?;
    let resolutions: ResolutionSet = cfg.parse("resolutions")?;
    let report = write_tensors(
        &backbone,
        &ids,
        &resolutions,
        &root,
        cfg.flag("force")?,
        cfg.jobs()?,
    )?;
    write(&root.join("extract.manifest.tsv"), &report.manifest(&ids))?;
    cfg.write_snapshot(&root.join("extract.conf"), "extract")?;
    println!(
        "extracted {} images, {} already present, {} failed",
        report.written.len(),
        report.existing.len(),
        report.failures.len()
    );
    Ok(Outcome::partial(report.failures.len()))
}

fn fit_params(cfg: &RunConfig) -> Result<FitParams> {
    let cap: usize = cfg.parse("kmeans_max_points")?;
    Ok(FitParams {
        pooling: cfg.parse("pooling")?,
        resolutions: cfg.parse("resolutions")?,
        scales: cfg.parse("scales")?,
        output_dim: cfg.parse("dim")?,
        words: if cfg.flag("attention")? {
            cfg.parse("k")?
        } else {
            0
        },
        sample: cfg.parse("sample")?,
        seed: cfg.parse("seed")?,
        kmeans_iters: cfg.parse("kmeans_iters")?,
        kmeans_max_points: (cap > 0).then_some(cap),
        parallelism: cfg.jobs()?,
        ..FitParams::default()
    })
}

pub fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let (backbone, ids) = open_backbone(cfg)?;
    let dir = out_dir(cfg)?;
    check_overwrite(cfg, &dir.join(WHITENING_FILE))?;
    let params = fit_params(cfg)?;
    let models = fit_models(&backbone, &ids, &params)?;
    models.whitening.save(dir.join(WHITENING_FILE))?;
    if let Some(dict) = &models.dictionary {
        dict.save(dir.join(DICTIONARY_FILE))?;
        let inertia: String = models
            .inertia
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{i}\t{v:.9e}\n"))
            .collect();
        write(&dir.join("inertia.tsv"), &inertia)?;
    } else if dir.join(DICTIONARY_FILE).exists() {
        fs::remove_file(dir.join(DICTIONARY_FILE)).context("cannot remove stale dictionary")?;
    }
    write(&dir.join("sample.txt"), &(models.sampled.join("\n") + "\n"))?;
    cfg.write_snapshot(&dir.join(FIT_CONFIG_FILE), "fit")?;
    println!(
        "fit on {} of {} images: whitening {} -> {}{}",
        models.sampled.len(),
        ids.len(),
        models.whitening.input_dim(),
        models.whitening.output_dim(),
        models
            .dictionary
            .as_ref()
            .map(|d| format!(", dictionary of {} words", d.k()))
            .unwrap_or_default()
    );
    Ok(Outcome::partial(models.skipped.len()))
}

/// Load fitted models and check they were fit with the settings in `cfg`.
pub fn load_pipeline(cfg: &RunConfig) -> Result<PipelineConfig> {
    let dir = cfg.path("models")?;
    let fit_conf = dir.join(FIT_CONFIG_FILE);
    if let Ok(text) = fs::read_to_string(&fit_conf) {
        let fitted = crate::config::parse_config_file(
            &text
                .lines()
                .filter(|l| !l.starts_with("config_hash"))
                .collect::<Vec<_>>()
                .join("\n"),
        )?;
        for (k, v) in fitted {
            if MODEL_KEYS.contains(&k.as_str()) && cfg.get(&k) != Some(v.as_str()) {
                bail!(
                    "models in {} were fit with {k} = {v}, but this run uses {k} = {}",
                    dir.display(),
                    cfg.get(&k).unwrap_or("")
                );
            }
        }
    }
    let whitening = WhiteningModel::load(dir.join(WHITENING_FILE))?;
    let pooling: PoolingMode = cfg.parse("pooling")?;
    let mut pipeline = PipelineConfig::new(pooling, cfg.parse("resolutions")?, whitening)
        .with_scales(cfg.parse("scales")?);
    if cfg.flag("attention")? {
        let path = dir.join(DICTIONARY_FILE);
        let dict = AttentionDictionary::load(&path)
            .with_context(|| format!("attention is on but {} cannot be loaded", path.display()))?;
        pipeline = pipeline.with_dictionary(dict);
    }
    Ok(pipeline)
}

pub fn embed(cfg: &RunConfig) -> Result<Outcome> {
    let (backbone, ids) = open_backbone(cfg)?;
    let pipeline = load_pipeline(cfg)?;
    let out = cfg.path("out")?;
    check_overwrite(cfg, &out)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let batch = describe_batch(&ids, &backbone, &pipeline, cfg.jobs()?)?;
    write_descriptors(&out, &batch.descriptors)?;
    batch.write_manifest(sidecar(&out, ".manifest.tsv"))?;
    cfg.write_snapshot(&sidecar(&out, ".conf"), "embed")?;
    println!(
        "described {} of {} images ({}-d) into {}",
        batch.descriptors.len(),
        ids.len(),
        batch.descriptors.dim(),
        out.display()
    );
    Ok(Outcome::partial(batch.failures.len()))
}

pub fn search(cfg: &RunConfig) -> Result<Outcome> {
    let gallery = read_descriptors(cfg.path("index")?)?;
    let queries = match cfg.get("queries") {
        Some(q) => Some(read_descriptors(q)?),
        None => None,
    };
    let index = build_index(gallery)?;
    let topk: usize = cfg.parse("topk")?;
    let exclude_self = cfg.flag("exclude_self")?;
    let mut results = Vec::new();
    match &queries {
        Some(set) => {
            let batch: Vec<(&[f32], Option<usize>)> = set
                .iter()
                .map(|(id, v)| {
                    (
                        v,
                        if exclude_self {
                            index.position(id)
                        } else {
                            None
                        },
                    )
                })
                .collect();
            for ((id, _), hits) in set.iter().zip(index.search_batch(&batch, topk)?) {
                results.push(RankingResult {
                    query_id: id.to_owned(),
                    hits,
                });
            }
        }
        None => {
            let batch: Vec<(&[f32], Option<usize>)> = (0..index.len())
                .map(|i| (index.vector(i), exclude_self.then_some(i)))
                .collect();
            for (id, hits) in index.ids().iter().zip(index.search_batch(&batch, topk)?) {
                results.push(RankingResult {
                    query_id: id.clone(),
                    hits,
                });
            }
        }
    }
    match cfg.get("out") {
        Some(path) => {
            let path = Path::new(path);
            check_overwrite(cfg, path)?;
            let mut f = fs::File::create(path)
                .with_context(|| format!("cannot create {}", path.display()))?;
            write_rankings(&mut f, &results)?;
            log::info!(
                "wrote rankings for {} queries to {}",
                results.len(),
                path.display()
            );
        }
        None => write_rankings(&mut std::io::stdout().lock(), &results)?,
    }
    Ok(Outcome::default())
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let index = build_index(read_descriptors(cfg.path("index")?)?)?;
    let queries = match cfg.get("queries") {
        Some(q) => Some(read_descriptors(q)?),
        None => None,
    };
    let gt = GroundTruth::load(cfg.path("gt")?)?;
    let opts = EvalOptions {
        topk: cfg.parse("topk")?,
        exclude_self: cfg.flag("exclude_self")?,
    };
    let eval = evaluate(&index, queries.as_ref(), &gt, opts)?;
    let report = eval.report();
    print!("{report}");
    if cfg.get("out").is_some() {
        let dir = out_dir(cfg)?;
        write(&dir.join("metrics.tsv"), &report)?;
        let mut per_query = format!("query\trelevant\tNAR\tAP@{}\n", opts.topk);
        for q in &eval.per_query {
            per_query.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                q.query_id, q.relevant, q.nar, q.ap
            ));
        }
        write(&dir.join("per_query.tsv"), &per_query)?;
        let mut rankings = Vec::new();
        eval.write_rankings(&mut rankings)?;
        fs::write(dir.join("rankings.tsv"), rankings).context("cannot write rankings")?;
        cfg.write_snapshot(&dir.join("evaluate.conf"), "evaluate")?;
    }
    Ok(Outcome::default())
}

/// Parse `methods`: `all` for the six published rows, or a comma list.
pub fn parse_methods(spec: &str) -> Result<Vec<Variant>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(Variant::TABLE.to_vec());
    }
    let methods = spec
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<Variant>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!("no methods given");
    }
    Ok(methods)
}

pub fn ablation_params(cfg: &RunConfig) -> Result<AblationParams> {
    let cap: usize = cfg.parse("kmeans_max_points")?;
    Ok(AblationParams {
        resolutions: cfg.parse("resolutions")?,
        scales: cfg.parse("scales")?,
        output_dim: cfg.parse("dim")?,
        words: cfg.parse("k")?,
        sample: cfg.parse("sample")?,
        seed: cfg.parse("seed")?,
        kmeans_iters: cfg.parse("kmeans_iters")?,
        kmeans_max_points: (cap > 0).then_some(cap),
        topk: cfg.parse("topk")?,
        exclude_self: cfg.flag("exclude_self")?,
        parallelism: cfg.jobs()?,
        random_baseline: true,
    })
}

pub fn ablate(cfg: &RunConfig) -> Result<Outcome> {
    let (backbone, ids) = open_backbone(cfg)?;
    let gt = GroundTruth::load(cfg.path("gt")?)?;
    let methods = parse_methods(cfg.require("methods")?)?;
    let params = ablation_params(cfg)?;
    let rows = run_ablation(&backbone, &ids, &gt, &methods, &params)?;
    let table = ablation_table(&rows, params.topk);
    print!("{table}");
    if cfg.get("out").is_some() {
        let dir = out_dir(cfg)?;
        write(&dir.join("ablation.tsv"), &table)?;
        cfg.write_snapshot(&dir.join("ablate.conf"), "ablate")?;
    }
    Ok(Outcome::default())
}

pub fn contact_sheet_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let rankings = parse_rankings(
        &fs::read_to_string(cfg.path("rankings")?).context("cannot read rankings")?,
    )?;
    let images = ImageDir::open(cfg.require("images")?)?;
    let gt = match cfg.get("gt") {
        Some(p) => Some(GroundTruth::load(p)?),
        None => None,
    };
    let out = cfg.path("out")?;
    check_overwrite(cfg, &out)?;
    let html = contact_sheet(
        &rankings,
        &images,
        gt.as_ref(),
        cfg.parse("limit")?,
        10,
        out.parent(),
    );
    let mut f =
        fs::File::create(&out).with_context(|| format!("cannot create {}", out.display()))?;
    f.write_all(html.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(Outcome::default())
}

pub fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let gallery = SyntheticGallery::generate(
        cfg.parse("groups")?,
        cfg.parse("per_group")?,
        cfg.parse("size")?,
        cfg.parse("seed")?,
    );
    gallery.save_pngs(&dir.join("images"))?;
    write(&dir.join("gt.csv"), &gallery.ground_truth().to_csv())?;
    println!(
        "wrote {} images in {} groups to {}",
        gallery.images.len(),
        gallery.groups.len(),
        dir.display()
    );
    Ok(Outcome::default())
}
