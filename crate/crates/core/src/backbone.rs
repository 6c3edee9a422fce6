//! Convolutional feature maps at several input resolutions.
//!
//! Two sources are supported: a tensor directory laid out as
//! `<dir>/<image-id>/<size>.rmtf`, and raw images run through a network.
//! The network is either an ONNX model (cargo feature `onnx`) or the
//! deterministic [`StubNetwork`], which needs no weights.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops::FilterType, DynamicImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, ResultExt};
use crate::tensor_io::{read_tensor, FeatureMap};

pub const DEFAULT_RESOLUTIONS: [usize; 3] = [160, 224, 320];
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff"];

/// Square input sizes in pixels, strictly increasing, each at least 32.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResolutionSet(Vec<usize>);

impl ResolutionSet {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("resolution set is empty".into()));
        }
        if let Some(s) = sizes.iter().find(|&&s| s < 32) {
            return Err(Error::Config(format!("resolution {s} is below 32 px")));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "resolutions must be strictly increasing, got {sizes:?}"
            )));
        }
        Ok(Self(sizes))
    }

    pub fn single(size: usize) -> Result<Self> {
        Self::new(vec![size])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for ResolutionSet {
    fn default() -> Self {
        Self(DEFAULT_RESOLUTIONS.to_vec())
    }
}

impl FromStr for ResolutionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad resolution `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

impl std::fmt::Display for ResolutionSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Resize to `size x size` (bilinear, aspect ratio ignored) and normalize
/// each channel as `(pixel / 255 - mean) / std`.
///
/// Grayscale inputs are replicated to three channels; transparent pixels
/// are composited over white.
pub fn preprocess(image: &DynamicImage, size: usize, norm: &Normalization) -> Result<FeatureMap> {
    if norm.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!(
            "invalid normalization std {:?}",
            norm.std
        )));
    }
    let rgb = flatten_alpha(image);
    let resized = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
        }
    }
    FeatureMap::new(3, size, size, data)
}

fn flatten_alpha(image: &DynamicImage) -> RgbImage {
    if !image.color().has_alpha() {
        return image.to_rgb8();
    }
    let rgba = image.to_rgba8();
    let mut out = RgbImage::new(rgba.width(), rgba.height());
    for (dst, src) in out.pixels_mut().zip(rgba.pixels()) {
        let a = src[3] as f32 / 255.0;
        let blend = |v: u8| (v as f32 * a + 255.0 * (1.0 - a)).round() as u8;
        *dst = Rgb([blend(src[0]), blend(src[1]), blend(src[2])]);
    }
    out
}

/// A network mapping a normalized `3 x s x s` input to a `C x h x w` map.
pub trait Network: Send + Sync {
    fn channels(&self) -> usize;
    /// Spatial downsampling factor of the tapped layer.
    fn stride(&self) -> usize;
    fn run(&self, input: &FeatureMap) -> Result<FeatureMap>;
}

/// Deterministic stand-in for a CNN: a seeded random projection of
/// non-overlapping 4x4 RGB patches, ReLU, then 4x4 average pooling
/// (total stride 16).
#[derive(Debug, Clone)]
pub struct StubNetwork {
    channels: usize,
    /// `channels x PATCH_LEN`
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl StubNetwork {
    const PATCH: usize = 4;
    const POOL: usize = 4;
    const PATCH_LEN: usize = 3 * Self::PATCH * Self::PATCH;

    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(
                "stub network needs at least one channel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (Self::PATCH_LEN as f32).sqrt();
        let weights = (0..channels * Self::PATCH_LEN)
            .map(|_| rng.random_range(-1.0f32..1.0) * scale)
            .collect();
        let bias = (0..channels)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect();
        Ok(Self {
            channels,
            weights,
            bias,
        })
    }
}

impl Network for StubNetwork {
    fn channels(&self) -> usize {
        self.channels
    }

    fn stride(&self) -> usize {
        Self::PATCH * Self::POOL
    }

    fn run(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.channels() != 3 {
            return Err(Error::Contract(format!(
                "stub network expects 3 input channels, got {}",
                input.channels()
            )));
        }
        let (p, q) = (Self::PATCH, Self::POOL);
        let pw = input.width() / p;
        let ph = input.height() / p;
        let (ow, oh) = (pw / q, ph / q);
        if ow == 0 || oh == 0 {
            return Err(Error::Contract(format!(
                "input {}x{} smaller than stride {}",
                input.width(),
                input.height(),
                p * q
            )));
        }
        let c_out = self.channels;
        let mut patch = [0.0f32; Self::PATCH_LEN];
        let mut out = vec![0.0f32; c_out * ow * oh];
        let norm = 1.0 / (q * q) as f32;
        for py in 0..oh * q {
            for px in 0..ow * q {
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            patch[k] = input.at(c, py * p + dy, px * p + dx);
                            k += 1;
                        }
                    }
                }
                let cell = (py / q) * ow + px / q;
                for (o, (w, b)) in self
                    .weights
                    .chunks_exact(Self::PATCH_LEN)
                    .zip(&self.bias)
                    .enumerate()
                {
                    let a: f32 = w.iter().zip(&patch).map(|(x, y)| x * y).sum::<f32>() + b;
                    out[o * ow * oh + cell] += a.max(0.0) * norm;
                }
            }
        }
        FeatureMap::new(c_out, ow, oh, out)
    }
}

#[cfg(feature = "onnx")]
pub use onnx::OnnxNetwork;

#[cfg(feature = "onnx")]
mod onnx {
    use super::*;
    use std::sync::Mutex;
    use tract_onnx::prelude::*;

    type Plan = TypedRunnableModel;

    /// ONNX model taking `1 x 3 x s x s` and returning `1 x C x h x w`.
    /// One optimized plan is built per input size on first use.
    pub struct OnnxNetwork {
        path: PathBuf,
        channels: usize,
        stride: usize,
        plans: Mutex<HashMap<usize, Arc<Plan>>>,
    }

    impl OnnxNetwork {
        pub fn new(path: impl Into<PathBuf>, channels: usize, stride: usize) -> Result<Self> {
            let path = path.into();
            if !path.is_file() {
                return Err(Error::Config(format!("model {} not found", path.display())));
            }
            Ok(Self {
                path,
                channels,
                stride,
                plans: Mutex::new(HashMap::new()),
            })
        }

        fn plan(&self, size: usize) -> Result<Arc<Plan>> {
            let mut plans = self.plans.lock().unwrap();
            if let Some(p) = plans.get(&size) {
                return Ok(p.clone());
            }
            let cfg =
                |e: TractError| Error::Config(format!("loading {}: {e}", self.path.display()));
            let plan = tract_onnx::onnx()
                .model_for_path(&self.path)
                .map_err(cfg)?
                .with_input_fact(0, f32::fact([1, 3, size, size]).into())
                .map_err(cfg)?
                .into_optimized()
                .map_err(cfg)?
                .into_runnable()
                .map_err(cfg)?;
            let plan = Arc::new(plan);
            plans.insert(size, plan.clone());
            Ok(plan)
        }
    }

    impl Network for OnnxNetwork {
        fn channels(&self) -> usize {
            self.channels
        }

        fn stride(&self) -> usize {
            self.stride
        }

        fn run(&self, input: &FeatureMap) -> Result<FeatureMap> {
            let size = input.width();
            let plan = self.plan(size)?;
            let t =
                tract_ndarray::Array4::from_shape_vec((1, 3, size, size), input.data().to_vec())
                    .map_err(|e| Error::Contract(e.to_string()))?;
            let out = plan
                .run(tvec!(Tensor::from(t).into()))
                .map_err(|e| Error::Numeric(format!("inference failed: {e}")))?;
            let view = out[0]
                .to_array_view::<f32>()
                .map_err(|e| Error::Numeric(e.to_string()))?;
            let shape = view.shape().to_vec();
            let (c, h, w) = match shape.as_slice() {
                [1, c, h, w] | [c, h, w] => (*c, *h, *w),
                _ => return Err(Error::Config(format!("unexpected output shape {shape:?}"))),
            };
            FeatureMap::new(c, w, h, view.iter().copied().collect())
        }
    }
}

/// Where raw images come from.
pub trait ImageSource: Send + Sync {
    fn load(&self, id: &str) -> Result<DynamicImage>;
    fn ids(&self) -> Vec<String>;
}

/// Images named `<id>.<ext>` in one directory.
#[derive(Debug, Clone)]
pub struct ImageDir {
    files: HashMap<String, PathBuf>,
}

impl ImageDir {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files = HashMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_owned(), path);
            }
        }
        Ok(Self { files })
    }

    pub fn path(&self, id: &str) -> Option<&Path> {
        self.files.get(id).map(PathBuf::as_path)
    }
}

impl ImageSource for ImageDir {
    fn load(&self, id: &str) -> Result<DynamicImage> {
        let path = self.files.get(id).ok_or_else(|| Error::Input {
            id: id.into(),
            msg: "no image file with this id".into(),
        })?;
        image::open(path).map_err(|e| Error::Input {
            id: id.into(),
            msg: format!("cannot decode {}: {e}", path.display()),
        })
    }

    fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.files.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Images held in memory, for tests and synthetic runs.
#[derive(Debug, Clone, Default)]
pub struct MemoryImages {
    images: HashMap<String, DynamicImage>,
}

impl MemoryImages {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: DynamicImage) {
        self.images.insert(id.into(), image);
    }
}

impl ImageSource for MemoryImages {
    fn load(&self, id: &str) -> Result<DynamicImage> {
        self.images.get(id).cloned().ok_or_else(|| Error::Input {
            id: id.into(),
            msg: "unknown image id".into(),
        })
    }

    fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.images.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Anything that can produce one feature map per resolution for an image id.
pub trait Backbone: Send + Sync {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>>;
}

/// Pre-extracted maps at `<dir>/<id>/<size>.rmtf`.
#[derive(Debug, Clone)]
pub struct TensorDir {
    root: PathBuf,
    channels: Option<usize>,
    stride: Option<usize>,
}

impl TensorDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            channels: None,
            stride: None,
        }
    }

    /// Require every map to have `channels` channels.
    pub fn expect_channels(mut self, channels: usize) -> Self {
        self.channels = Some(channels);
        self
    }

    /// Require spatial dims `floor(size / stride)` for each resolution.
    pub fn expect_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tensor_path(&self, id: &str, size: usize) -> PathBuf {
        tensor_path(&self.root, id, size)
    }

    /// Image ids (subdirectory names), sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if entry.path().is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub fn tensor_path(root: &Path, id: &str, size: usize) -> PathBuf {
    root.join(id).join(format!("{size}.rmtf"))
}

fn check_map(
    map: &FeatureMap,
    id: &str,
    size: usize,
    channels: Option<usize>,
    stride: Option<usize>,
) -> Result<()> {
    if let Some(c) = channels {
        if map.channels() != c {
            return Err(Error::Config(format!(
                "image `{id}` at {size}px has {} channels, expected {c}",
                map.channels()
            )));
        }
    }
    if let Some(s) = stride {
        let want = size / s;
        if map.width() != want || map.height() != want {
            return Err(Error::Config(format!(
                "image `{id}` at {size}px has a {}x{} map, expected {want}x{want} for stride {s}",
                map.width(),
                map.height()
            )));
        }
    }
    Ok(())
}

impl Backbone for TensorDir {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>> {
        let mut maps: Vec<FeatureMap> = Vec::with_capacity(resolutions.len());
        for &size in resolutions.sizes() {
            let path = self.tensor_path(id, size);
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "missing tensor for image `{id}` at resolution {size} ({})",
                    path.display()
                )));
            }
            let map = read_tensor(&path)?;
            check_map(&map, id, size, self.channels, self.stride)?;
            if let Some(first) = maps.first() {
                if first.channels() != map.channels() {
                    return Err(Error::Config(format!(
                        "image `{id}`: channel count differs across resolutions ({} vs {})",
                        first.channels(),
                        map.channels()
                    )));
                }
            }
            maps.push(map);
        }
        Ok(maps)
    }
}

/// Raw images run through a [`Network`].
pub struct ImageBackbone<S, N> {
    pub source: S,
    pub network: N,
    pub normalization: Normalization,
}

impl<S: ImageSource, N: Network> ImageBackbone<S, N> {
    pub fn new(source: S, network: N) -> Self {
        Self {
            source,
            network,
            normalization: Normalization::default(),
        }
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.normalization = norm;
        self
    }
}

impl<S: ImageSource, N: Network> Backbone for ImageBackbone<S, N> {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>> {
        let image = self.source.load(id)?;
        resolutions
            .sizes()
            .iter()
            .map(|&size| {
                let input = preprocess(&image, size, &self.normalization)?;
                let map = self
                    .network
                    .run(&input)
                    .with_context(|| format!("image `{id}` at {size}px"))?;
                check_map(
                    &map,
                    id,
                    size,
                    Some(self.network.channels()),
                    Some(self.network.stride()),
                )?;
                Ok(map)
            })
            .collect()
    }
}

impl<B: Backbone + ?Sized> Backbone for &B {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>> {
        (**self).extract(id, resolutions)
    }
}

impl<B: Backbone + ?Sized> Backbone for Box<B> {
    fn extract(&self, id: &str, resolutions: &ResolutionSet) -> Result<Vec<FeatureMap>> {
        (**self).extract(id, resolutions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::write_tensor;
    use image::{GrayImage, Luma};

    #[test]
    fn resolution_set_rules() {
        assert_eq!(ResolutionSet::default().sizes(), &[160, 224, 320]);
        assert!(ResolutionSet::new(vec![224, 160]).is_err());
        assert!(ResolutionSet::new(vec![16]).is_err());
        assert!(ResolutionSet::new(vec![]).is_err());
        let r: ResolutionSet = "160, 224,320".parse().unwrap();
        assert_eq!(r, ResolutionSet::default());
        assert_eq!(r.to_string(), "160,224,320");
    }

    #[test]
    fn mid_gray_centers_to_zero() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(7, 5, Rgb([128, 128, 128])));
        let norm = Normalization {
            mean: [128.0 / 255.0; 3],
            std: [1.0; 3],
        };
        let t = preprocess(&img, 32, &norm).unwrap();
        assert_eq!((t.channels(), t.width(), t.height()), (3, 32, 32));
        assert!(t.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn single_red_pixel_upscaled_is_constant_per_channel() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(1, 1, Rgb([255, 0, 0])));
        let t = preprocess(&img, 160, &Normalization::default()).unwrap();
        for c in 0..3 {
            let plane = t.plane(c);
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
        assert!((t.at(0, 0, 0) - (1.0 - 0.485) / 0.229).abs() < 1e-5);
        assert!((t.at(1, 5, 9) - (0.0 - 0.456) / 0.224).abs() < 1e-5);
    }

    #[test]
    fn grayscale_replicated() {
        let mut g = GrayImage::new(9, 9);
        for (x, y, p) in g.enumerate_pixels_mut() {
            *p = Luma([(x * 20 + y * 7) as u8]);
        }
        let norm = Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let t = preprocess(&DynamicImage::ImageLuma8(g), 32, &norm).unwrap();
        assert_eq!(t.plane(0), t.plane(1));
        assert_eq!(t.plane(1), t.plane(2));
    }

    #[test]
    fn stub_on_constant_image_is_constant() {
        let net = StubNetwork::new(8, 3).unwrap();
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(50, 30, Rgb([10, 200, 90])));
        let input = preprocess(&img, 160, &Normalization::default()).unwrap();
        let out = net.run(&input).unwrap();
        assert_eq!((out.channels(), out.width(), out.height()), (8, 10, 10));
        for c in 0..8 {
            let plane = out.plane(c);
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-6));
        }
    }

    #[test]
    fn stub_spatial_dims_follow_stride() {
        let net = StubNetwork::new(4, 0).unwrap();
        let mut src = MemoryImages::new();
        src.insert(
            "a",
            DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]))),
        );
        let bb = ImageBackbone::new(src, net);
        let maps = bb.extract("a", &ResolutionSet::default()).unwrap();
        let dims: Vec<usize> = maps.iter().map(|m| m.width()).collect();
        assert_eq!(dims, vec![10, 14, 20]);
        assert!(maps.iter().all(|m| m.channels() == 4));
        assert!(matches!(
            bb.extract("zz", &ResolutionSet::default()),
            Err(Error::Input { .. })
        ));
    }

    #[test]
    fn stub_is_seeded() {
        assert_eq!(
            StubNetwork::new(4, 1).unwrap().weights,
            StubNetwork::new(4, 1).unwrap().weights
        );
        assert_ne!(
            StubNetwork::new(4, 1).unwrap().weights,
            StubNetwork::new(4, 2).unwrap().weights
        );
    }

    #[test]
    fn tensor_dir_reads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let td = TensorDir::new(dir.path())
            .expect_channels(2)
            .expect_stride(16);
        for (size, side) in [(160, 10), (224, 14), (320, 20)] {
            let m = FeatureMap::new(2, side, side, vec![size as f32; 2 * side * side]).unwrap();
            write_tensor(td.tensor_path("q1", size), &m).unwrap();
        }
        let maps = td.extract("q1", &ResolutionSet::default()).unwrap();
        assert_eq!(
            maps.iter().map(|m| m.width()).collect::<Vec<_>>(),
            vec![10, 14, 20]
        );
        assert_eq!(maps[1].at(0, 0, 0), 224.0);
        assert_eq!(td.ids().unwrap(), vec!["q1".to_string()]);

        std::fs::remove_file(td.tensor_path("q1", 224)).unwrap();
        let err = td
            .extract("q1", &ResolutionSet::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("q1") && err.contains("224"), "{err}");

        let wrong = TensorDir::new(dir.path()).expect_channels(3);
        assert!(matches!(
            wrong.extract("q1", &ResolutionSet::single(160).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn undecodable_image_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        let src = ImageDir::open(dir.path()).unwrap();
        assert_eq!(src.ids(), vec!["bad".to_string()]);
        match src.load("bad") {
            Err(Error::Input { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
