//! Pose manifests, image loading, crop preprocessing and domain triplets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::pose::{canonicalize, quat_norm, PoseLabel};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: line {line}: quaternion norm {norm} is more than 1e-3 from 1")]
    NonUnitQuaternion { path: String, line: usize, norm: f64 },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("image {path} is {h}x{w}, smaller than the {min} pixel short side")]
    ImageTooSmall { path: String, h: usize, w: usize, min: usize },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("batch size {0} is too small (need at least 2 for batch statistics)")]
    BatchTooSmall(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    /// Image path relative to the dataset root, first component naming the style.
    pub path: String,
    pub pose: PoseLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub split: String,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<PoseRecord>,
}

const QUAT_TOLERANCE: f64 = 1e-3;

/// `path tx ty tz qw qx qy qz` with 17 significant digits.
pub fn format_record(rec: &PoseRecord) -> String {
    let mut s = rec.path.clone();
    for v in rec.pose.to_array() {
        let _ = write!(s, " {v:.16e}");
    }
    s
}

impl SplitManifest {
    pub fn new(split: impl Into<String>, root: impl Into<PathBuf>, records: Vec<PoseRecord>) -> Self {
        Self {
            split: split.into(),
            root: root.into(),
            records,
        }
    }

    /// Reads `<root>/<split>.manifest`; the split name is the file stem.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &split, root, &path.display().to_string())
    }

    pub fn parse(text: &str, split: &str, root: PathBuf, source: &str) -> Result<Self, DatasetError> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fail = |reason: String| DatasetError::Parse {
                path: source.to_string(),
                line,
                reason,
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(fail(format!("expected 8 fields (path tx ty tz qw qx qy qz), got {}", fields.len())));
            }
            let mut v = [0.0; 7];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse::<f64>().map_err(|e| fail(format!("{f:?}: {e}")))?;
                if !slot.is_finite() {
                    return Err(fail(format!("non-finite value {f:?}")));
                }
            }
            let q = [v[3], v[4], v[5], v[6]];
            let norm = quat_norm(&q);
            if (norm - 1.0).abs() > QUAT_TOLERANCE {
                return Err(DatasetError::NonUnitQuaternion {
                    path: source.to_string(),
                    line,
                    norm,
                });
            }
            // Already-unit values are kept verbatim so text round trips are exact.
            let q = if (norm - 1.0).abs() > 1e-12 { q.map(|c| c / norm) } else { q };
            records.push(PoseRecord {
                path: fields[0].to_string(),
                pose: PoseLabel::new([v[0], v[1], v[2]], canonicalize(q)),
            });
        }
        Ok(Self::new(split, root, records))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# split {}: path tx ty tz qw qx qy qz\n", self.split);
        for r in &self.records {
            s.push_str(&format_record(r));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn poses(&self) -> Vec<PoseLabel> {
        self.records.iter().map(|r| r.pose).collect()
    }

    /// Path of a record's image in another style: the leading style
    /// directory of the record path is swapped for `style`.
    pub fn style_path(&self, rec: &PoseRecord, style: &str) -> PathBuf {
        let rel = Path::new(&rec.path);
        let mut parts = rel.components().filter(|c| matches!(c, Component::Normal(_)));
        let first = parts.next();
        let rest: PathBuf = parts.collect();
        if rest.as_os_str().is_empty() {
            // Bare file name: styles live in sibling directories.
            return self.root.join(style).join(first.map(|c| c.as_os_str()).unwrap_or_default());
        }
        self.root.join(style).join(rest)
    }

    /// Fails on the first record whose image is absent in any of `styles`.
    pub fn check_files(&self, styles: &[&str]) -> Result<(), DatasetError> {
        for r in &self.records {
            for s in styles {
                let p = self.style_path(r, s);
                if !p.is_file() {
                    return Err(DatasetError::MissingImage(p));
                }
            }
        }
        Ok(())
    }
}

/// 8-bit RGB image in row-major interleaved order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// Quantises a `[3,H,W]` tensor in `[0,1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                data.push((t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Self { height: h, width: w, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            f64::from(self.data[p * 3 + c]) / 255.0
        })
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DatasetError::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    Ok(RgbImage {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

/// Lossless PNG.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ColorType::Rgb8).map_err(|e| {
        DatasetError::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Train,
    Eval,
}

/// Top-left corner of a square crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
}

/// Resize-then-crop pipeline: shorter side to `short_side`, then a square
/// `crop` window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub short_side: usize,
    pub crop: usize,
}

impl Preprocess {
    pub const DESK: Self = Self { short_side: 72, crop: 64 };
    pub const FULL: Self = Self { short_side: 256, crop: 224 };

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.crop == 0 || self.crop > self.short_side {
            return Err(DatasetError::Invalid(format!(
                "crop {} must be in 1..={}",
                self.crop, self.short_side
            )));
        }
        Ok(())
    }

    /// Resized extent `(h, w)` for an input of `(h, w)`.
    pub fn resized_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.short_side;
        if h <= w {
            (s, ((w as f64) * s as f64 / h as f64).round() as usize)
        } else {
            (((h as f64) * s as f64 / w as f64).round() as usize, s)
        }
    }

    pub fn window(&self, h: usize, w: usize, mode: CropMode, rng: &mut impl Rng) -> CropWindow {
        let (rh, rw) = (h - self.crop, w - self.crop);
        match mode {
            CropMode::Eval => CropWindow { top: rh / 2, left: rw / 2 },
            CropMode::Train => CropWindow {
                top: rng.gen_range(0..=rh),
                left: rng.gen_range(0..=rw),
            },
        }
    }

    /// Rescales to the short side, failing for images that would need upsampling.
    pub fn resize(&self, img: &RgbImage, source: &str) -> Result<Tensor, DatasetError> {
        if img.height.min(img.width) < self.short_side {
            return Err(DatasetError::ImageTooSmall {
                path: source.to_string(),
                h: img.height,
                w: img.width,
                min: self.short_side,
            });
        }
        let (nh, nw) = self.resized_extent(img.height, img.width);
        Ok(bilinear_resize(&img.to_tensor(), nh, nw))
    }

    pub fn crop_tensor(&self, img: &Tensor, win: CropWindow) -> Tensor {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let c = self.crop;
        debug_assert!(win.top + c <= h && win.left + c <= w);
        Tensor::from_fn(&[3, c, c], |i| {
            let (ch, y, x) = (i / (c * c), (i / c) % c, i % c);
            img.data()[(ch * h + win.top + y) * w + win.left + x]
        })
    }

    pub fn apply(&self, img: &RgbImage, mode: CropMode, rng: &mut impl Rng, source: &str) -> Result<(Tensor, CropWindow), DatasetError> {
        let resized = self.resize(img, source)?;
        let win = self.window(resized.shape()[1], resized.shape()[2], mode, rng);
        Ok((self.crop_tensor(&resized, win), win))
    }
}

/// Half-pixel-centre bilinear interpolation; identity when sizes match.
pub fn bilinear_resize(img: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (nh, nw) {
        return img.clone();
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(nh, h), axis(nw, w));
    let d = img.data();
    Tensor::from_fn(&[c, nh, nw], |i| {
        let (ch, y, x) = (i / (nh * nw), (i / nw) % nh, i % nw);
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub const TRIPLET_STYLES: [&str; 3] = ["real", "fog", "night"];

#[derive(Clone, Debug, PartialEq)]
pub struct DomainTriplet {
    pub real: Tensor,
    pub fog: Tensor,
    pub night: Tensor,
    pub label: PoseLabel,
    pub window: CropWindow,
}

/// Loads the real, fog and night files of `manifest.records[index]` and
/// crops all three with one window.
pub fn make_triplet(
    manifest: &SplitManifest,
    index: usize,
    preprocess: &Preprocess,
    mode: CropMode,
    rng: &mut impl Rng,
) -> Result<DomainTriplet, DatasetError> {
    let rec = manifest
        .records
        .get(index)
        .ok_or_else(|| DatasetError::Invalid(format!("record {index} out of range")))?;
    let mut resized = Vec::with_capacity(3);
    for style in TRIPLET_STYLES {
        let p = manifest.style_path(rec, style);
        resized.push(preprocess.resize(&load_image(&p)?, &p.display().to_string())?);
    }
    let (h, w) = (resized[0].shape()[1], resized[0].shape()[2]);
    if resized.iter().any(|t| t.shape()[1] != h || t.shape()[2] != w) {
        return Err(DatasetError::Invalid(format!("style variants of {} differ in size", rec.path)));
    }
    let window = preprocess.window(h, w, mode, rng);
    let mut crops = resized.iter().map(|t| preprocess.crop_tensor(t, window));
    Ok(DomainTriplet {
        real: crops.next().expect("three styles"),
        fog: crops.next().expect("three styles"),
        night: crops.next().expect("three styles"),
        label: rec.pose,
        window,
    })
}

/// Decoded images of every record in a set of styles, kept in memory.
#[derive(Clone, Debug)]
pub struct ImageStore {
    pub styles: Vec<String>,
    /// `images[style][record]`, already resized to the short side.
    images: Vec<Vec<Tensor>>,
    pub labels: Vec<PoseLabel>,
    pub preprocess: Preprocess,
}

impl ImageStore {
    pub fn load(manifest: &SplitManifest, styles: &[&str], preprocess: Preprocess) -> Result<Self, DatasetError> {
        use rayon::prelude::*;
        preprocess.validate()?;
        manifest.check_files(styles)?;
        let images = styles
            .iter()
            .map(|s| {
                manifest
                    .records
                    .par_iter()
                    .map(|r| {
                        let p = manifest.style_path(r, s);
                        preprocess.resize(&load_image(&p)?, &p.display().to_string())
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            styles: styles.iter().map(|s| s.to_string()).collect(),
            images,
            labels: manifest.poses(),
            preprocess,
        })
    }

    /// Builds a store from in-memory images, `images[style][record]`.
    pub fn from_tensors(styles: &[&str], images: Vec<Vec<Tensor>>, labels: Vec<PoseLabel>, preprocess: Preprocess) -> Result<Self, DatasetError> {
        if images.len() != styles.len() || images.iter().any(|v| v.len() != labels.len()) {
            return Err(DatasetError::Invalid("image and label counts differ".into()));
        }
        let images = images
            .into_iter()
            .map(|v| {
                v.into_iter()
                    .map(|t| {
                        let (h, w) = (t.shape()[1], t.shape()[2]);
                        let (nh, nw) = preprocess.resized_extent(h, w);
                        bilinear_resize(&t, nh, nw)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            styles: styles.iter().map(|s| s.to_string()).collect(),
            images,
            labels,
            preprocess,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn style_index(&self, style: &str) -> Result<usize, DatasetError> {
        self.styles
            .iter()
            .position(|s| s == style)
            .ok_or_else(|| DatasetError::Invalid(format!("style {style} not loaded")))
    }

    pub fn resized(&self, style: &str, index: usize) -> Result<&Tensor, DatasetError> {
        Ok(&self.images[self.style_index(style)?][index])
    }

    /// One cropped image.
    pub fn crop(&self, style: &str, index: usize, win: CropWindow) -> Result<Tensor, DatasetError> {
        Ok(self.preprocess.crop_tensor(self.resized(style, index)?, win))
    }

    pub fn window(&self, index: usize, mode: CropMode, rng: &mut impl Rng) -> CropWindow {
        let img = &self.images[0][index];
        self.preprocess.window(img.shape()[1], img.shape()[2], mode, rng)
    }

    /// Real, fog and night views of one record under one shared crop.
    pub fn make_triplet(&self, index: usize, mode: CropMode, rng: &mut impl Rng) -> Result<DomainTriplet, DatasetError> {
        let win = self.window(index, mode, rng);
        Ok(DomainTriplet {
            real: self.crop("real", index, win)?,
            fog: self.crop("fog", index, win)?,
            night: self.crop("night", index, win)?,
            label: self.labels[index],
            window: win,
        })
    }

    /// `[N,3,h,h]` stack of `style` crops for `indices` with per-record windows.
    pub fn stack(&self, style: &str, indices: &[usize], windows: &[CropWindow]) -> Result<Tensor, DatasetError> {
        let mut data = Vec::new();
        for (&i, &w) in indices.iter().zip(windows) {
            data.extend_from_slice(self.crop(style, i, w)?.data());
        }
        let c = self.preprocess.crop;
        Tensor::new(vec![indices.len(), 3, c, c], data).map_err(|e| DatasetError::Invalid(e.to_string()))
    }
}

/// Index batches for one epoch: shuffled by `shuffle_seed` if given,
/// otherwise in order; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::BatchTooSmall(0));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A batch of aligned triplets ready for the network.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub indices: Vec<usize>,
    pub windows: Vec<CropWindow>,
    /// `[N,3,h,h]` each.
    pub real: Tensor,
    pub fog: Tensor,
    pub night: Tensor,
    pub labels: Vec<PoseLabel>,
}

/// Epoch iterator over triplet batches.
pub struct BatchIter<'a> {
    store: &'a ImageStore,
    batches: std::vec::IntoIter<Vec<usize>>,
    mode: CropMode,
    rng: ChaCha8Rng,
    with_augmented: bool,
}

impl<'a> BatchIter<'a> {
    /// Shuffles in train mode; `seed` also drives the crop offsets.
    /// `with_augmented` loads fog and night views and needs batches of 2+,
    /// so a trailing single-record batch is folded into the one before it.
    pub fn new(store: &'a ImageStore, batch_size: usize, seed: u64, mode: CropMode, with_augmented: bool) -> Result<Self, DatasetError> {
        if with_augmented && batch_size < 2 {
            return Err(DatasetError::BatchTooSmall(batch_size));
        }
        let shuffle = (mode == CropMode::Train).then_some(seed);
        let mut batches = batch_indices(store.len(), batch_size, shuffle)?;
        if with_augmented && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        if with_augmented && batches.iter().any(|b| b.len() < 2) {
            return Err(DatasetError::BatchTooSmall(store.len()));
        }
        Ok(Self {
            store,
            batches: batches.into_iter(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de),
            with_augmented,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<TripletBatch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.batches.next()?;
        let windows: Vec<CropWindow> = indices.iter().map(|&i| self.store.window(i, self.mode, &mut self.rng)).collect();
        let build = || -> Result<TripletBatch, DatasetError> {
            let real = self.store.stack("real", &indices, &windows)?;
            let (fog, night) = if self.with_augmented {
                (self.store.stack("fog", &indices, &windows)?, self.store.stack("night", &indices, &windows)?)
            } else {
                (real.clone(), real.clone())
            };
            Ok(TripletBatch {
                labels: indices.iter().map(|&i| self.store.labels[i]).collect(),
                indices: indices.clone(),
                windows: windows.clone(),
                real,
                fog,
                night,
            })
        };
        Some(build())
    }
}
