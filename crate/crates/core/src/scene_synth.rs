//! Synthetic landmark scenes, a Gaussian-splat renderer, analytic domain
//! stylisers and camera trajectories.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset_io::{save_image, DatasetError, PoseRecord, RgbImage, SplitManifest};
use crate::pose::{canonicalize, from_unit_quaternion, look_at, PoseLabel};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown style {0:?} (expected real, fog, night, mosaic-like, udnie-like or starry-like)")]
    UnknownStyle(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("trajectory needs at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("the test split must contain at least one pose")]
    EmptyTestSplit,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub landmarks: Vec<Landmark>,
    /// Axis-aligned bounds `(min, max)` in metres.
    pub extent: ([f64; 3], [f64; 3]),
    /// Radius of the nominal camera orbit around the centroid.
    pub orbit_radius: f64,
}

pub const MIN_LANDMARKS: usize = 16;

impl SceneSpec {
    /// Landmarks scattered in a 2.4 x 2.4 x 1.2 m box (z up) with
    /// saturated random colours.
    pub fn generate(seed: u64, n_landmarks: usize) -> Result<Self, SceneError> {
        if n_landmarks < MIN_LANDMARKS {
            return Err(SceneError::InvalidScene(format!(
                "{n_landmarks} landmarks, need at least {MIN_LANDMARKS}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = ([-1.2, -1.2, -0.6], [1.2, 1.2, 0.6]);
        let landmarks = (0..n_landmarks)
            .map(|_| {
                let radius = rng.gen_range(0.08..0.2);
                let position = [0, 1, 2].map(|k| rng.gen_range(lo[k] + radius..hi[k] - radius));
                let hue: f64 = rng.gen_range(0.0..6.0);
                let value = rng.gen_range(0.55..1.0);
                let x = 1.0 - (hue % 2.0 - 1.0).abs();
                let rgb = match hue as usize {
                    0 => [1.0, x, 0.0],
                    1 => [x, 1.0, 0.0],
                    2 => [0.0, 1.0, x],
                    3 => [0.0, x, 1.0],
                    4 => [x, 0.0, 1.0],
                    _ => [1.0, 0.0, x],
                };
                let dark = rng.gen_bool(0.3);
                Landmark {
                    position,
                    color: rgb.map(|c| if dark { c * value * 0.35 } else { c * value }),
                    radius,
                }
            })
            .collect();
        let scene = Self {
            seed,
            landmarks,
            extent: (lo, hi),
            orbit_radius: 2.6,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.landmarks.len() < MIN_LANDMARKS {
            return Err(SceneError::InvalidScene(format!(
                "{} landmarks, need at least {MIN_LANDMARKS}",
                self.landmarks.len()
            )));
        }
        let (lo, hi) = self.extent;
        for (i, l) in self.landmarks.iter().enumerate() {
            if (0..3).any(|k| l.position[k] < lo[k] || l.position[k] > hi[k]) {
                return Err(SceneError::InvalidScene(format!("landmark {i} lies outside the extent")));
            }
            if !(l.radius > 0.0) {
                return Err(SceneError::InvalidScene(format!("landmark {i} has radius {}", l.radius)));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.landmarks.len() as f64;
        self.landmarks
            .iter()
            .fold(Vector3::zeros(), |acc, l| acc + Vector3::from(l.position))
            / n
    }

    /// Bounding-box diagonal of the landmark extent together with the
    /// nominal camera orbit.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.extent;
        let c = self.centroid();
        let r = self.orbit_radius * (1.0 + ORBIT_JITTER);
        let reach = [r, r, 0.0];
        let offset = [0.0, 0.0, ORBIT_HEIGHT];
        let slack = [0.0, 0.0, HEIGHT_JITTER];
        (0..3)
            .map(|k| {
                let a = lo[k].min(c[k] + offset[k] - reach[k] - slack[k]);
                let b = hi[k].max(c[k] + offset[k] + reach[k] + slack[k]);
                (b - a).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    /// `(cx, cy)` in pixels; pixel `(u, v)` covers `[u, u+1) x [v, v+1)`.
    pub principal: [f64; 2],
    /// `(height, width)`
    pub size: [usize; 2],
}

impl CameraIntrinsics {
    /// Square image with the given horizontal field of view in degrees.
    pub fn square(size: usize, fov_deg: f64) -> Self {
        let s = size as f64;
        Self {
            focal: s / 2.0 / (fov_deg.to_radians() / 2.0).tan(),
            principal: [s / 2.0, s / 2.0],
            size: [size, size],
        }
    }

    /// 72 x 72 at 60 degrees.
    pub fn desk() -> Self {
        Self::square(72, 60.0)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let [h, w] = self.size;
        if !(self.focal > 0.0) {
            return Err(SceneError::InvalidIntrinsics(format!("focal {}", self.focal)));
        }
        let [cx, cy] = self.principal;
        if h == 0 || w == 0 || !(0.0..=w as f64).contains(&cx) || !(0.0..=h as f64).contains(&cy) {
            return Err(SceneError::InvalidIntrinsics("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        (p.z > NEAR).then(|| (self.principal[0] + self.focal * p.x / p.z, self.principal[1] + self.focal * p.y / p.z, p.z))
    }
}

const NEAR: f64 = 0.05;
const BACKGROUND: f64 = 0.5;
const OPACITY: f64 = 0.95;
/// Splat support in standard deviations.
const SUPPORT: f64 = 3.5;

/// Renders `[3,H,W]` with each landmark a Gaussian splat of standard
/// deviation `f * radius / depth`, composited far to near over grey.
pub fn render(scene: &SceneSpec, pose: &PoseLabel, intr: &CameraIntrinsics) -> Tensor {
    let [h, w] = intr.size;
    let mut splats: Vec<(f64, f64, f64, f64, [f64; 3])> = scene
        .landmarks
        .iter()
        .filter_map(|l| {
            let pc = pose.world_to_camera(&Vector3::from(l.position));
            let (u, v, z) = intr.project(&pc)?;
            let sigma = intr.focal * l.radius / z;
            let reach = SUPPORT * sigma;
            let visible = u + reach >= 0.0 && u - reach <= w as f64 && v + reach >= 0.0 && v - reach <= h as f64;
            visible.then_some((z, u, v, sigma, l.color))
        })
        .collect();
    // Farthest first; ties keep landmark order.
    splats.sort_by(|a, b| b.0.total_cmp(&a.0));
    let plane = h * w;
    let mut img = vec![BACKGROUND; 3 * plane];
    for (_, u, v, sigma, color) in splats {
        let reach = SUPPORT * sigma;
        let x0 = ((u - reach).floor().max(0.0)) as usize;
        let x1 = ((u + reach).ceil().min(w as f64)) as usize;
        let y0 = ((v - reach).floor().max(0.0)) as usize;
        let y1 = ((v + reach).ceil().min(h as f64)) as usize;
        let inv = 1.0 / (2.0 * sigma * sigma);
        // Tapered so the alpha reaches zero exactly at the support edge.
        let cut = (-SUPPORT * SUPPORT / 2.0).exp();
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - v;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - u;
                let g = (-(dx * dx + dy * dy) * inv).exp();
                if g <= cut {
                    continue;
                }
                let a = OPACITY * (g - cut) / (1.0 - cut);
                let p = y * w + x;
                for c in 0..3 {
                    let px = &mut img[c * plane + p];
                    *px = a * color[c] + (1.0 - a) * *px;
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], img).expect("rendered buffer matches its shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DomainStyle {
    Real,
    /// `(1 - beta) I + beta A`
    Fog { beta: f64, airlight: f64 },
    /// `gain * I^gamma`, blue scaled by `blue`
    Night { gain: f64, gamma: f64, blue: f64 },
    /// Sliding block average then posterisation
    Mosaic { block: usize, levels: usize },
    /// `(R,G,B) -> (G,B,R)` then contrast about 0.5
    Udnie { contrast: f64 },
    /// Luma inverted, chroma kept
    Starry,
}

impl DomainStyle {
    pub const TAGS: [&'static str; 6] = ["real", "fog", "night", "mosaic-like", "udnie-like", "starry-like"];

    pub fn tag(&self) -> &'static str {
        match self {
            DomainStyle::Real => "real",
            DomainStyle::Fog { .. } => "fog",
            DomainStyle::Night { .. } => "night",
            DomainStyle::Mosaic { .. } => "mosaic-like",
            DomainStyle::Udnie { .. } => "udnie-like",
            DomainStyle::Starry => "starry-like",
        }
    }

    pub fn all() -> Vec<DomainStyle> {
        Self::TAGS.iter().map(|t| t.parse().expect("known tag")).collect()
    }
}

impl fmt::Display for DomainStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for DomainStyle {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "real" => DomainStyle::Real,
            "fog" => DomainStyle::Fog { beta: 0.5, airlight: 0.78 },
            "night" => DomainStyle::Night { gain: 0.25, gamma: 2.2, blue: 1.4 },
            "mosaic-like" => DomainStyle::Mosaic { block: 4, levels: 8 },
            "udnie-like" => DomainStyle::Udnie { contrast: 1.5 },
            "starry-like" => DomainStyle::Starry,
            other => return Err(SceneError::UnknownStyle(other.to_string())),
        })
    }
}

/// Applies a photometric style to a `[3,H,W]` image in `[0,1]`.
pub fn apply_domain(img: &Tensor, style: &DomainStyle) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    match *style {
        DomainStyle::Real => img.clone(),
        DomainStyle::Fog { beta, airlight } => img.map(|v| ((1.0 - beta) * v + beta * airlight).clamp(0.0, 1.0)),
        DomainStyle::Night { gain, gamma, blue } => Tensor::from_fn(img.shape(), |i| {
            let v = gain * d[i].max(0.0).powf(gamma);
            let v = if i / plane == 2 { v * blue } else { v };
            v.clamp(0.0, 1.0)
        }),
        DomainStyle::Mosaic { block, levels } => {
            // Box average over a block x block window around each pixel,
            // then posterise.
            let block = block.max(1);
            let top = (levels.max(2) - 1) as f64;
            let lo = block / 2;
            let hi = block - lo;
            Tensor::from_fn(img.shape(), |i| {
                let (c, p) = (i / plane, i % plane);
                let (y, x) = (p / w, p % w);
                let (y0, y1) = (y.saturating_sub(lo), (y + hi).min(h));
                let (x0, x1) = (x.saturating_sub(lo), (x + hi).min(w));
                let mut sum = 0.0;
                for yy in y0..y1 {
                    let row = c * plane + yy * w;
                    sum += d[row + x0..row + x1].iter().sum::<f64>();
                }
                let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
                (mean.clamp(0.0, 1.0) * top).round() / top
            })
        }
        DomainStyle::Udnie { contrast } => Tensor::from_fn(img.shape(), |i| {
            let (c, p) = (i / plane, i % plane);
            let src = d[((c + 1) % 3) * plane + p];
            (0.5 + contrast * (src - 0.5)).clamp(0.0, 1.0)
        }),
        DomainStyle::Starry => Tensor::from_fn(img.shape(), |i| {
            let p = i % plane;
            let luma = 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p];
            (d[i] + (1.0 - 2.0 * luma)).clamp(0.0, 1.0)
        }),
    }
}

const WAYPOINTS: usize = 10;
const ORBIT_JITTER: f64 = 0.08;
const ORBIT_HEIGHT: f64 = 0.4;
const HEIGHT_JITTER: f64 = 0.25;
const MAX_ROLL_DEG: f64 = 10.0;

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3)
}

/// Closed loop around the scene centroid: a periodic Catmull-Rom spline
/// through jittered circle waypoints, looking at the centroid with a
/// bounded roll.
pub fn sample_trajectory(scene: &SceneSpec, n: usize, seed: u64) -> Result<Vec<PoseLabel>, SceneError> {
    if n < 2 {
        return Err(SceneError::TooFewPoses(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    // Waypoint channels: radius, height, angle offset, roll.
    let way: Vec<[f64; 4]> = (0..WAYPOINTS)
        .map(|_| {
            [
                scene.orbit_radius * (1.0 + rng.gen_range(-ORBIT_JITTER..ORBIT_JITTER)),
                ORBIT_HEIGHT + rng.gen_range(-HEIGHT_JITTER..HEIGHT_JITTER),
                rng.gen_range(-0.15..0.15) * std::f64::consts::TAU / WAYPOINTS as f64,
                rng.gen_range(-MAX_ROLL_DEG..MAX_ROLL_DEG).to_radians(),
            ]
        })
        .collect();
    let centroid = scene.centroid();
    let down = Vector3::new(0.0, 0.0, -1.0);
    let poses = (0..n)
        .map(|i| {
            let s = i as f64 / n as f64 * WAYPOINTS as f64;
            let k = s.floor() as usize;
            let t = s - k as f64;
            let at = |j: isize| way[(k as isize + j).rem_euclid(WAYPOINTS as isize) as usize];
            let ch = |c: usize| catmull_rom(at(-1)[c], at(0)[c], at(1)[c], at(2)[c], t);
            let angle = phase + s / WAYPOINTS as f64 * std::f64::consts::TAU + ch(2);
            let (r, z) = (ch(0), ch(1));
            // The spline may overshoot the waypoint range slightly.
            let roll = ch(3).clamp(-MAX_ROLL_DEG.to_radians(), MAX_ROLL_DEG.to_radians());
            let eye = centroid + Vector3::new(r * angle.cos(), r * angle.sin(), z);
            let rot = look_at(&eye, &centroid, &down, roll);
            PoseLabel::new(eye.into(), canonicalize(from_unit_quaternion(&rot)))
        })
        .collect();
    Ok(poses)
}

/// Seed of the test trajectory given the dataset seed.
pub fn test_trajectory_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    pub root: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Renders train and test trajectories in every requested style under
/// `<out>/<style>/<split>/img_<i>.png` and writes `<out>/<split>.manifest`
/// plus `scene.json`.
pub fn build_dataset(
    scene: &SceneSpec,
    intr: &CameraIntrinsics,
    n_train: usize,
    n_test: usize,
    styles: &[DomainStyle],
    out_dir: &Path,
    seed: u64,
) -> Result<BuiltDataset, SceneError> {
    if n_test == 0 {
        return Err(SceneError::EmptyTestSplit);
    }
    scene.validate()?;
    intr.validate()?;
    std::fs::create_dir_all(out_dir).map_err(write_err(out_dir))?;
    let primary = styles.first().map(DomainStyle::tag).unwrap_or("real");
    let primary = if styles.iter().any(|s| *s == DomainStyle::Real) { "real" } else { primary };
    let mut manifests = Vec::new();
    for (split, n, tseed) in [("train", n_train, seed), ("test", n_test, test_trajectory_seed(seed))] {
        let poses = sample_trajectory(scene, n, tseed)?;
        poses
            .par_iter()
            .enumerate()
            .try_for_each(|(i, pose)| -> Result<(), SceneError> {
                let base = render(scene, pose, intr);
                for style in styles {
                    let img = apply_domain(&base, style);
                    let path = out_dir.join(style.tag()).join(split).join(format!("img_{i}.png"));
                    save_image(&path, &RgbImage::from_tensor(&img))?;
                }
                Ok(())
            })?;
        let records = poses
            .iter()
            .enumerate()
            .map(|(i, p)| PoseRecord {
                path: format!("{primary}/{split}/img_{i}.png"),
                pose: *p,
            })
            .collect();
        let manifest = SplitManifest::new(split, out_dir, records);
        let path = out_dir.join(format!("{split}.manifest"));
        manifest.save(&path)?;
        manifests.push(path);
    }
    let meta = serde_json::json!({ "scene": scene, "intrinsics": intr, "seed": seed });
    let meta_path = out_dir.join("scene.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serialisable"))
        .map_err(write_err(&meta_path))?;
    Ok(BuiltDataset {
        root: out_dir.to_path_buf(),
        train_manifest: manifests[0].clone(),
        test_manifest: manifests[1].clone(),
    })
}

/// Adds style variants of the existing real images of a split.
pub fn augment_split(manifest: &SplitManifest, styles: &[DomainStyle]) -> Result<usize, SceneError> {
    let written: Vec<usize> = manifest
        .records
        .par_iter()
        .map(|r| -> Result<usize, SceneError> {
            let src = manifest.style_path(r, "real");
            let base = crate::dataset_io::load_image(&src)?.to_tensor();
            let mut count = 0;
            for style in styles.iter().filter(|s| **s != DomainStyle::Real) {
                let img = apply_domain(&base, style);
                save_image(&manifest.style_path(r, style.tag()), &RgbImage::from_tensor(&img))?;
                count += 1;
            }
            Ok(count)
        })
        .collect::<Result<_, _>>()?;
    Ok(written.iter().sum())
}

/// Scene and intrinsics stored next to a built dataset.
pub fn load_scene_meta(root: &Path) -> Result<(SceneSpec, CameraIntrinsics), SceneError> {
    #[derive(Deserialize)]
    struct Meta {
        scene: SceneSpec,
        intrinsics: CameraIntrinsics,
    }
    let path = root.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(write_err(&path))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| SceneError::InvalidScene(format!("{}: {e}", path.display())))?;
    Ok((meta.scene, meta.intrinsics))
}
