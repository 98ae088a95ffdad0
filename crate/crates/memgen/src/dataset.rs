//! Dataset ingestion: image/VMS manifests, per-observer annotation masks,
//! recognition-response tables, and a synthetic oracle dataset used by the
//! end-to-end experiments.
//!
//! On-disk conventions:
//! * images are 8-bit PNG, mapped linearly 0..255 -> [-1, 1];
//! * a VMS map is stored as two 8-bit grayscale PNGs, one per channel, with
//!   `.true` / `.false` inserted before the extension (0..255 -> [0, 1]);
//! * annotations live under `<root>/<image_id>/<channel>/<observer>.png` as
//!   binary masks;
//! * responses are a CSV with columns
//!   `image_id,hits,misses,false_alarms,correct_rejections`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H x W x 3 image with values in [-1, 1].
pub type ImageArray = Array3<f64>;

/// The eight scene categories used by the annotation datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Isolated,
    Populated,
    PublicEntertainment,
    WorkHome,
    Kitchen,
    LivingRoom,
    Small,
    Big,
}

pub const CATEGORIES: [Category; 8] = [
    Category::Isolated,
    Category::Populated,
    Category::PublicEntertainment,
    Category::WorkHome,
    Category::Kitchen,
    Category::LivingRoom,
    Category::Small,
    Category::Big,
];

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Isolated => "Isolated",
            Category::Populated => "Populated",
            Category::PublicEntertainment => "PublicEntertainment",
            Category::WorkHome => "WorkHome",
            Category::Kitchen => "Kitchen",
            Category::LivingRoom => "LivingRoom",
            Category::Small => "Small",
            Category::Big => "Big",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Isolated" => Category::Isolated,
            "Populated" => Category::Populated,
            "PublicEntertainment" => Category::PublicEntertainment,
            "WorkHome" => Category::WorkHome,
            "Kitchen" => Category::Kitchen,
            "LivingRoom" => Category::LivingRoom,
            "Small" => Category::Small,
            "Big" => Category::Big,
            other => return Err(Error::Data(format!("unknown category `{other}`"))),
        })
    }
}

/// Two-channel visual memory schema map with all cells in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VmsMap {
    true_schema: Array2<f64>,
    false_schema: Array2<f64>,
}

impl VmsMap {
    pub fn new(true_schema: Array2<f64>, false_schema: Array2<f64>) -> Result<Self> {
        if true_schema.dim() != false_schema.dim() {
            return Err(Error::Shape(format!(
                "VMS channels differ: {:?} vs {:?}",
                true_schema.dim(),
                false_schema.dim()
            )));
        }
        for ch in [&true_schema, &false_schema] {
            if ch.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Data("VMS cell outside [0, 1]".into()));
            }
        }
        Ok(VmsMap { true_schema, false_schema })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        VmsMap {
            true_schema: Array2::zeros((height, width)),
            false_schema: Array2::zeros((height, width)),
        }
    }

    pub fn true_schema(&self) -> &Array2<f64> {
        &self.true_schema
    }

    pub fn false_schema(&self) -> &Array2<f64> {
        &self.false_schema
    }

    pub fn height(&self) -> usize {
        self.true_schema.nrows()
    }

    pub fn width(&self) -> usize {
        self.true_schema.ncols()
    }
}

/// Recognition-test outcome counts for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_rejections: u64,
}

/// Which VMS channel a set of observer masks belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelTag {
    True,
    False,
}

impl ChannelTag {
    pub fn dir_name(self) -> &'static str {
        match self {
            ChannelTag::True => "true",
            ChannelTag::False => "false",
        }
    }
}

/// Per-observer binary region masks for one image and one channel.
#[derive(Clone, Debug)]
pub struct AnnotationSet {
    masks: Vec<Array2<f64>>,
    channel: ChannelTag,
}

impl AnnotationSet {
    pub fn new(masks: Vec<Array2<f64>>, channel: ChannelTag) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Data("annotation set has no observers".into()));
        }
        let dim = masks[0].dim();
        for (i, m) in masks.iter().enumerate() {
            if m.dim() != dim {
                return Err(Error::Shape(format!(
                    "observer {i} mask is {:?}, expected {:?}",
                    m.dim(),
                    dim
                )));
            }
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("observer {i} mask is not binary")));
            }
        }
        Ok(AnnotationSet { masks, channel })
    }

    pub fn observers(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Array2<f64>] {
        &self.masks
    }

    pub fn channel(&self) -> ChannelTag {
        self.channel
    }

    pub fn subset(&self, indices: &[usize]) -> Result<AnnotationSet> {
        let masks = indices.iter().map(|&i| self.masks[i].clone()).collect();
        AnnotationSet::new(masks, self.channel)
    }
}

/// One image with optional VMS map and response counts.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub image: ImageArray,
    pub vms: Option<VmsMap>,
    pub category: Category,
    pub responses: Option<ResponseCounts>,
}

/// One manifest entry; paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: PathBuf,
    /// Base path of the VMS pair; `.true`/`.false` are inserted before the
    /// extension to address the channel files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vms: Option<PathBuf>,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<ResponseCounts>,
}

/// Validated dataset description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub name: String,
    pub image_resolution: usize,
    pub vms_resolution: usize,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FORMAT: u32 = 1;

impl DatasetManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Load and validate one record's files.
    pub fn load_record(&self, index: usize) -> Result<ImageRecord> {
        let rec = self.records.get(index).ok_or_else(|| Error::Record {
            index,
            message: "no such record".into(),
        })?;
        let image = preprocess(&self.resolve(&rec.image), self.image_resolution)
            .map_err(|e| Error::Record { index, message: e.to_string() })?;
        let vms = match &rec.vms {
            Some(base) => Some(
                load_vms(&self.resolve(base), self.vms_resolution)
                    .map_err(|e| Error::Record { index, message: e.to_string() })?,
            ),
            None => None,
        };
        Ok(ImageRecord { image, vms, category: rec.category, responses: rec.responses })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parse and validate a manifest file; every referenced file must exist and
/// decode to the declared resolutions.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Manifest(format!("{path:?}: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Manifest(format!(
            "unsupported manifest format {} (expected {MANIFEST_FORMAT})",
            manifest.format
        )));
    }
    manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    for index in 0..manifest.records.len() {
        validate_record(&manifest, index)?;
    }
    Ok(manifest)
}

fn validate_record(manifest: &DatasetManifest, index: usize) -> Result<()> {
    let rec = &manifest.records[index];
    let img_path = manifest.resolve(&rec.image);
    let (w, h) = image_dimensions(&img_path)
        .map_err(|e| Error::Record { index, message: e.to_string() })?;
    if w != manifest.image_resolution || h != manifest.image_resolution {
        return Err(Error::Record {
            index,
            message: format!(
                "image {img_path:?} is {w}x{h}, manifest declares {0}x{0}",
                manifest.image_resolution
            ),
        });
    }
    if let Some(base) = &rec.vms {
        for p in vms_channel_paths(&manifest.resolve(base)) {
            let (w, h) = image_dimensions(&p)
                .map_err(|e| Error::Record { index, message: e.to_string() })?;
            if w != manifest.vms_resolution || h != manifest.vms_resolution {
                return Err(Error::Record {
                    index,
                    message: format!(
                        "VMS {p:?} is {w}x{h}, manifest declares {0}x{0}",
                        manifest.vms_resolution
                    ),
                });
            }
        }
    }
    Ok(())
}

fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((w as usize, h as usize))
}

/// The `.true`/`.false` channel files for a VMS base path.
pub fn vms_channel_paths(base: &Path) -> [PathBuf; 2] {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = base.extension().map(|s| s.to_string_lossy().into_owned());
    let dir = base.parent().unwrap_or(Path::new(""));
    let with = |tag: &str| match &ext {
        Some(e) => dir.join(format!("{stem}.{tag}.{e}")),
        None => dir.join(format!("{stem}.{tag}")),
    };
    [with("true"), with("false")]
}

/// Aggregate observer masks into a VMS map: each cell is the fraction of
/// observers that marked it, routed to the set's channel.
pub fn build_vms(annotations: &AnnotationSet) -> Result<VmsMap> {
    let n = annotations.observers() as f64;
    let dim = annotations.masks()[0].dim();
    let mut counts = Array2::<f64>::zeros(dim);
    for mask in annotations.masks() {
        counts += mask;
    }
    let channel = counts.mapv(|c| c / n);
    let zeros = Array2::zeros(dim);
    match annotations.channel() {
        ChannelTag::True => VmsMap::new(channel, zeros),
        ChannelTag::False => VmsMap::new(zeros, channel),
    }
}

/// Seed-deterministic partition of observer indices into two halves.
/// Odd counts put the extra observer in the first half.
pub fn split_observer_indices(
    n_observers: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_observers).collect();
    order.shuffle(rng);
    let first_len = n_observers.div_ceil(2);
    let second = order.split_off(first_len);
    (order, second)
}

/// Split observers into two equal halves (sizes differ by at most one) and
/// render each half with [`build_vms`].
pub fn split_annotations(
    annotations: &AnnotationSet,
    rng: &mut ChaCha8Rng,
) -> Result<(VmsMap, VmsMap)> {
    if annotations.observers() < 2 {
        return Err(Error::Data(format!(
            "split requires at least 2 observers, got {}",
            annotations.observers()
        )));
    }
    let (a, b) = split_observer_indices(annotations.observers(), rng);
    let first = build_vms(&annotations.subset(&a)?)?;
    let second = build_vms(&annotations.subset(&b)?)?;
    Ok((first, second))
}

/// Analytic memorability oracle for the synthetic dataset: mean intensity
/// (mapped to [0, 1]) over a fixed central window covering 25% of the image.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub resolution: usize,
}

impl SyntheticOracle {
    pub fn new(resolution: usize) -> Self {
        SyntheticOracle { resolution }
    }

    /// Window start offset and side length (side = resolution/2, centered).
    pub fn window(&self) -> (usize, usize) {
        let side = self.resolution / 2;
        let start = (self.resolution - side) / 2;
        (start, side)
    }

    pub fn score(&self, image: &ImageArray) -> f64 {
        let (start, side) = self.window();
        assert_eq!(image.dim().0, self.resolution, "oracle resolution mismatch");
        let mut sum = 0.0;
        for y in start..start + side {
            for x in start..start + side {
                for c in 0..3 {
                    sum += (image[[y, x, c]] + 1.0) / 2.0;
                }
            }
        }
        (sum / (side * side * 3) as f64).clamp(0.0, 1.0)
    }
}

/// Generate `n` synthetic records: a dark background with one bright square
/// patch (side = resolution/2) at a random position and intensity. The VMS
/// true channel is the patch indicator scaled by the oracle score.
pub fn make_synthetic_dataset(
    n: usize,
    resolution: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ImageRecord>, SyntheticOracle)> {
    if n == 0 {
        return Err(Error::Data("synthetic dataset needs n > 0".into()));
    }
    if resolution < 4 || resolution % 4 != 0 {
        return Err(Error::Data(format!(
            "synthetic resolution must be a positive multiple of 4, got {resolution}"
        )));
    }
    let oracle = SyntheticOracle::new(resolution);
    let patch = resolution / 2;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let intensity: f64 = rng.gen_range(0.0..=1.0);
        let oy = rng.gen_range(0..=resolution - patch);
        let ox = rng.gen_range(0..=resolution - patch);
        let mut image = Array3::<f64>::from_elem((resolution, resolution, 3), -1.0);
        let mut indicator = Array2::<f64>::zeros((resolution, resolution));
        for y in oy..oy + patch {
            for x in ox..ox + patch {
                for c in 0..3 {
                    image[[y, x, c]] = 2.0 * intensity - 1.0;
                }
                indicator[[y, x]] = 1.0;
            }
        }
        let score = oracle.score(&image);
        let true_schema = indicator.mapv(|v| v * score);
        let vms = VmsMap::new(true_schema, Array2::zeros((resolution, resolution)))?;
        records.push(ImageRecord {
            image,
            vms: Some(vms),
            category: CATEGORIES[i % CATEGORIES.len()],
            responses: None,
        });
    }
    Ok((records, oracle))
}

/// Decode an image file, resize to `resolution`, and map 0..255 -> [-1, 1].
pub fn preprocess(path: &Path, resolution: usize) -> Result<ImageArray> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let rgb = if rgb.width() as usize != resolution || rgb.height() as usize != resolution {
        image::imageops::resize(
            &rgb,
            resolution as u32,
            resolution as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        rgb
    };
    let mut out = Array3::<f64>::zeros((resolution, resolution, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Load a VMS pair from its base path.
pub fn load_vms(base: &Path, resolution: usize) -> Result<VmsMap> {
    let [tp, fp] = vms_channel_paths(base);
    let t = load_gray_unit(&tp, resolution)?;
    let f = load_gray_unit(&fp, resolution)?;
    VmsMap::new(t, f)
}

fn load_gray_unit(path: &Path, resolution: usize) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    if gray.width() as usize != resolution || gray.height() as usize != resolution {
        return Err(Error::Shape(format!(
            "{path:?} is {}x{}, expected {resolution}x{resolution}",
            gray.width(),
            gray.height()
        )));
    }
    let mut out = Array2::<f64>::zeros((resolution, resolution));
    for (x, y, px) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Load one annotation set from `<root>/<image_id>/<channel>/*.png`.
/// Observers are ordered by filename.
pub fn load_annotation_set(
    root: &Path,
    image_id: &str,
    channel: ChannelTag,
) -> Result<AnnotationSet> {
    let dir = root.join(image_id).join(channel.dir_name());
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    let mut masks = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f).map_err(|e| Error::ImageDecode {
            path: f.clone(),
            message: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let mask = Array2::from_shape_fn(
            (gray.height() as usize, gray.width() as usize),
            |(y, x)| {
                if gray.get_pixel(x as u32, y as u32).0[0] > 127 {
                    1.0
                } else {
                    0.0
                }
            },
        );
        masks.push(mask);
    }
    AnnotationSet::new(masks, channel)
}

/// Parse a responses CSV into an id-keyed map.
pub fn load_responses(path: &Path) -> Result<BTreeMap<String, ResponseCounts>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, row) in reader.deserialize::<ResponsesRow>().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("responses row {i}: {e}")))?;
        out.insert(
            row.image_id,
            ResponseCounts {
                hits: row.hits,
                misses: row.misses,
                false_alarms: row.false_alarms,
                correct_rejections: row.correct_rejections,
            },
        );
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ResponsesRow {
    image_id: String,
    hits: u64,
    misses: u64,
    false_alarms: u64,
    correct_rejections: u64,
}

// ---- image <-> PNG helpers ----

pub fn save_image_png(path: &Path, image: &ImageArray) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                signed_to_u8(image[[y, x, 0]]),
                signed_to_u8(image[[y, x, 1]]),
                signed_to_u8(image[[y, x, 2]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_vms_pngs(base: &Path, vms: &VmsMap) -> Result<()> {
    let [tp, fp] = vms_channel_paths(base);
    save_gray_png(&tp, vms.true_schema())?;
    save_gray_png(&fp, vms.false_schema())
}

pub fn signed_to_u8(v: f64) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// Write synthetic records plus a manifest under `dir`; returns the manifest.
pub fn write_synthetic_dataset(
    dir: &Path,
    n: usize,
    resolution: usize,
    rng: &mut ChaCha8Rng,
    name: &str,
) -> Result<DatasetManifest> {
    let (records, _) = make_synthetic_dataset(n, resolution, rng)?;
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("vms")).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, rec) in records.iter().enumerate() {
        let image_rel = PathBuf::from(format!("images/{i:05}.png"));
        let vms_rel = PathBuf::from(format!("vms/{i:05}.png"));
        save_image_png(&dir.join(&image_rel), &rec.image)?;
        save_vms_pngs(&dir.join(&vms_rel), rec.vms.as_ref().unwrap())?;
        entries.push(ManifestRecord {
            image: image_rel,
            vms: Some(vms_rel),
            category: rec.category,
            responses: None,
        });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT,
        name: name.to_string(),
        image_resolution: resolution,
        vms_resolution: resolution,
        records: entries,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

/// Stack records' images into a [N, H, W, 3] batch tensor.
pub fn image_batch(records: &[&ImageRecord]) -> crate::graph::Tensor {
    let views: Vec<_> = records.iter().map(|r| r.image.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).unwrap().into_dyn()
}

/// Stack records' VMS maps into a [N, H, W, 2] batch tensor.
pub fn vms_batch(records: &[&ImageRecord]) -> Result<crate::graph::Tensor> {
    let mut parts = Vec::with_capacity(records.len());
    for r in records {
        let vms = r
            .vms
            .as_ref()
            .ok_or_else(|| Error::Data("record lacks a VMS map".into()))?;
        let (h, w) = vms.true_schema().dim();
        let mut t = Array3::<f64>::zeros((h, w, 2));
        t.index_axis_mut(Axis(2), 0).assign(vms.true_schema());
        t.index_axis_mut(Axis(2), 1).assign(vms.false_schema());
        parts.push(t.insert_axis(Axis(0)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).unwrap().into_dyn())
}
