//! Median pose errors, cross-domain reports, trajectory and embedding exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset_io::{CropMode, DatasetError, ImageStore, Preprocess, SplitManifest};
use crate::model::{Checkpoint, Inference, ModelError, ModelParams, Network};
use crate::pose::{quat_norm, PoseLabel};
use crate::trainer::Preset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{predictions} predictions for {truths} ground-truth poses")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("quaternion norm {norm} is not unit")]
    NonUnitQuaternion { norm: f64 },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("domain directory {0} does not exist")]
    MissingDomain(PathBuf),
    #[error("cannot infer preprocessing for input size {0:?}")]
    UnknownPreprocess([usize; 2]),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DatasetError),
}

const UNIT_TOL: f64 = 1e-6;

/// Geodesic angle between two unit quaternions in degrees, blind to sign.
pub fn rotation_angle_deg(q_pred: &[f64; 4], q_gt: &[f64; 4]) -> Result<f64, EvalError> {
    for q in [q_pred, q_gt] {
        let norm = quat_norm(q);
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(EvalError::NonUnitQuaternion { norm });
        }
    }
    // Equals 2 acos |<a, b>| for unit inputs but stays exact near 0.
    let dot: f64 = q_pred.iter().zip(q_gt).map(|(a, b)| a * b).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    let diff = q_pred.iter().zip(q_gt).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt();
    let sum = q_pred.iter().zip(q_gt).map(|(a, b)| (a + s * b).powi(2)).sum::<f64>().sqrt();
    Ok((4.0 * diff.atan2(sum)).to_degrees().min(180.0))
}

pub fn translation_error(pred: &PoseLabel, gt: &PoseLabel) -> f64 {
    (pred.translation() - gt.translation()).norm()
}

/// Per-image `(T metres, R degrees)` errors.
pub fn pose_errors(predictions: &[PoseLabel], truths: &[PoseLabel]) -> Result<Vec<(f64, f64)>, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    predictions
        .iter()
        .zip(truths)
        .map(|(p, g)| Ok((translation_error(p, g), rotation_angle_deg(&p.q, &g.q)?)))
        .collect()
}

/// Lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// `(median T error, median R error)`.
pub fn median_errors(predictions: &[PoseLabel], truths: &[PoseLabel]) -> Result<(f64, f64), EvalError> {
    let errs = pose_errors(predictions, truths)?;
    let t: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let r: Vec<f64> = errs.iter().map(|e| e.1).collect();
    Ok((lower_median(&t)?, lower_median(&r)?))
}

/// Anything that maps a loaded image split to poses and latents.
pub trait PoseEstimator: Sync {
    fn preprocess(&self) -> Preprocess;
    fn infer_store(&self, store: &ImageStore, style: &str) -> Result<Inference, EvalError>;
}

const EVAL_BATCH: usize = 64;

/// Single-branch inference with checkpoint weights.
pub struct CheckpointModel {
    pub net: Network,
    pub params: ModelParams,
    preprocess: Preprocess,
}

impl CheckpointModel {
    pub fn new(ckpt: &Checkpoint) -> Result<Self, EvalError> {
        let net = Network::new(ckpt.config.clone())?;
        ckpt.params.validate(net.plan())?;
        let from_meta = ckpt.meta.get("preset").and_then(|p| p.parse::<Preset>().ok()).map(Preset::preprocess);
        let preprocess = match from_meta {
            Some(p) => p,
            None => [Preprocess::DESK, Preprocess::FULL]
                .into_iter()
                .find(|p| ckpt.config.input_size == [p.crop, p.crop])
                .ok_or(EvalError::UnknownPreprocess(ckpt.config.input_size))?,
        };
        Ok(Self {
            net,
            params: ckpt.params.clone(),
            preprocess,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Self::new(&Checkpoint::load(path)?)
    }
}

impl PoseEstimator for CheckpointModel {
    fn preprocess(&self) -> Preprocess {
        self.preprocess
    }

    fn infer_store(&self, store: &ImageStore, style: &str) -> Result<Inference, EvalError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut out = Inference::default();
        let all: Vec<usize> = (0..store.len()).collect();
        for idx in all.chunks(EVAL_BATCH) {
            let windows: Vec<_> = idx.iter().map(|&i| store.window(i, CropMode::Eval, &mut rng)).collect();
            let x: Tensor = store.stack(style, idx, &windows)?;
            let inf = self.net.infer(&self.params, &x)?;
            out.poses.extend(inf.poses);
            out.latent_t.extend(inf.latent_t);
            out.latent_r.extend(inf.latent_r);
        }
        Ok(out)
    }
}

/// One scene's test split.
#[derive(Clone, Debug)]
pub struct SceneSplit {
    pub scene: String,
    pub manifest: SplitManifest,
}

impl SceneSplit {
    /// Test split of a generated dataset root, named after the directory.
    pub fn from_root(root: &Path) -> Result<Self, EvalError> {
        let manifest = SplitManifest::load(&root.join("test.manifest"))?;
        let scene = root
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "scene".to_string());
        Ok(Self { scene, manifest })
    }

    fn load_domain(&self, domain: &str, preprocess: Preprocess) -> Result<ImageStore, EvalError> {
        let dir = self.manifest.root.join(domain);
        if !dir.is_dir() {
            return Err(EvalError::MissingDomain(dir));
        }
        Ok(ImageStore::load(&self.manifest, &[domain], preprocess)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub domain: String,
    pub count: usize,
    pub median_t: f64,
    pub median_r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub domains: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn row(&self, scene: &str, domain: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.scene == scene && r.domain == domain)
    }

    fn scenes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.scene.as_str()) {
                out.push(&r.scene);
            }
        }
        out
    }

    /// Mean of the medians over every row whose domain is in `domains`.
    pub fn average_over(&self, domains: &[&str]) -> Option<(f64, f64)> {
        let sel: Vec<&MetricsRow> = self.rows.iter().filter(|r| domains.contains(&r.domain.as_str())).collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some((sel.iter().map(|r| r.median_t).sum::<f64>() / n, sel.iter().map(|r| r.median_r).sum::<f64>() / n))
    }

    pub fn domain_average(&self, domain: &str) -> Option<(f64, f64)> {
        self.average_over(&[domain])
    }

    pub fn overall_average(&self) -> Option<(f64, f64)> {
        let d: Vec<&str> = self.domains.iter().map(String::as_str).collect();
        self.average_over(&d)
    }

    /// Scenes down, domains across, an average row at the bottom.
    pub fn to_table(&self) -> String {
        let mut head = vec!["scene".to_string()];
        for d in &self.domains {
            head.push(format!("{d} T(m)"));
            head.push(format!("{d} R(deg)"));
        }
        let mut lines = vec![head];
        let cell = |v: Option<(f64, f64)>| match v {
            Some((t, r)) => [format!("{t:.3}"), format!("{r:.2}")],
            None => ["-".to_string(), "-".to_string()],
        };
        for s in self.scenes() {
            let mut line = vec![s.to_string()];
            for d in &self.domains {
                line.extend(cell(self.row(s, d).map(|r| (r.median_t, r.median_r))));
            }
            lines.push(line);
        }
        let mut avg = vec!["average".to_string()];
        for d in &self.domains {
            avg.extend(cell(self.domain_average(d)));
        }
        lines.push(avg);
        align(&lines)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene,domain,count,median_t_m,median_r_deg\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.scene, r.domain, r.count, r.median_t, r.median_r);
        }
        for d in &self.domains {
            if let Some((t, r)) = self.domain_average(d) {
                let n: usize = self.rows.iter().filter(|x| &x.domain == d).map(|x| x.count).sum();
                let _ = writeln!(out, "average,{d},{n},{t},{r}");
            }
        }
        if let Some((t, r)) = self.overall_average() {
            let n: usize = self.rows.iter().map(|x| x.count).sum();
            let _ = writeln!(out, "average,all,{n},{t},{r}");
        }
        out
    }
}

pub(crate) fn align(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Evaluates `model` on every scene's test split in each domain.
pub fn cross_domain_report(model: &impl PoseEstimator, scenes: &[SceneSplit], domains: &[&str]) -> Result<MetricsReport, EvalError> {
    let mut rows = Vec::new();
    for s in scenes {
        for d in domains {
            let store = s.load_domain(d, model.preprocess())?;
            let inf = model.infer_store(&store, d)?;
            let (median_t, median_r) = median_errors(&inf.poses, &store.labels)?;
            rows.push(MetricsRow {
                scene: s.scene.clone(),
                domain: d.to_string(),
                count: store.len(),
                median_t,
                median_r,
            });
        }
    }
    Ok(MetricsReport {
        domains: domains.iter().map(|d| d.to_string()).collect(),
        rows,
    })
}

pub const TRAJECTORY_HEADER: &str = "idx,gx,gy,gz,gw,gqx,gqy,gqz,px,py,pz,pw,pqx,pqy,pqz,et,er";

/// Trajectory CSV text for ground truth and predictions in sequence order.
pub fn trajectory_csv(predictions: &[PoseLabel], truths: &[PoseLabel]) -> Result<String, EvalError> {
    let errs = pose_errors(predictions, truths)?;
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for (i, ((p, g), (et, er))) in predictions.iter().zip(truths).zip(errs).enumerate() {
        let _ = write!(out, "{i}");
        for v in g.t.iter().chain(&g.q).chain(&p.t).chain(&p.q) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{et},{er}");
    }
    Ok(out)
}

/// Writes the trajectory of `split` rendered in `domain` to `out_path`.
/// Returns the number of rows.
pub fn export_trajectory(model: &impl PoseEstimator, split: &SceneSplit, domain: &str, out_path: &Path) -> Result<usize, EvalError> {
    let store = split.load_domain(domain, model.preprocess())?;
    let inf = model.infer_store(&store, domain)?;
    let text = trajectory_csv(&inf.poses, &store.labels)?;
    write_file(out_path, &text)?;
    Ok(inf.poses.len())
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}

/// Two-component principal component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first. A direction is
    /// all zeros when the data has fewer dimensions.
    pub components: [Vec<f64>; 2],
    /// Sample variances along the components.
    pub variances: [f64; 2],
    /// All covariance eigenvalues, descending.
    pub spectrum: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = points.len();
        if n < 2 {
            return Err(EvalError::TooFewSamples(n));
        }
        let d = points[0].len();
        let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
        let mean: DVector<f64> = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let spectrum: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let pick = |slot: usize| -> (Vec<f64>, f64) {
            let Some(&k) = order.get(slot) else {
                return (vec![0.0; d], 0.0);
            };
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // Sign fixed by the largest-magnitude entry.
            let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
            (v, spectrum[slot])
        };
        let (c0, v0) = pick(0);
        let (c1, v1) = pick(1);
        Ok(Self {
            mean: mean.iter().copied().collect(),
            components: [c0, c1],
            variances: [v0, v1],
            spectrum,
        })
    }

    pub fn project(&self, p: &[f64]) -> [f64; 2] {
        self.components.each_ref().map(|c| c.iter().zip(p).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
    }

    pub fn reconstruct(&self, z: [f64; 2]) -> Vec<f64> {
        (0..self.mean.len())
            .map(|j| self.mean[j] + z[0] * self.components[0][j] + z[1] * self.components[1][j])
            .collect()
    }
}

/// Latents of every test image per domain, and their PCA projections.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `(domain, index within domain)` per row.
    pub keys: Vec<(String, usize)>,
    pub latent_t: Vec<Vec<f64>>,
    pub latent_r: Vec<Vec<f64>>,
    pub pca_t: Vec<[f64; 2]>,
    pub pca_r: Vec<[f64; 2]>,
}

impl EmbeddingSet {
    /// Fits one PCA on the pooled translation latents and one on the pooled
    /// rotation latents.
    pub fn new(keys: Vec<(String, usize)>, latent_t: Vec<Vec<f64>>, latent_r: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let pt = Pca::fit(&latent_t)?;
        let pr = Pca::fit(&latent_r)?;
        let pca_t = latent_t.iter().map(|v| pt.project(v)).collect();
        let pca_r = latent_r.iter().map(|v| pr.project(v)).collect();
        Ok(Self {
            keys,
            latent_t,
            latent_r,
            pca_t,
            pca_r,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,index,pca_T_x,pca_T_y,pca_R_x,pca_R_y\n");
        for ((k, t), r) in self.keys.iter().zip(&self.pca_t).zip(&self.pca_r) {
            let _ = writeln!(out, "{},{},{},{},{},{}", k.0, k.1, t[0], t[1], r[0], r[1]);
        }
        out
    }

    fn centroids(&self, rows: &[Vec<f64>], domains: &[&str]) -> Vec<Vec<f64>> {
        domains
            .iter()
            .map(|d| {
                let sel: Vec<&Vec<f64>> = self.keys.iter().zip(rows).filter(|(k, _)| k.0 == *d).map(|(_, v)| v).collect();
                let mut c = vec![0.0; sel.first().map_or(0, |v| v.len())];
                for v in &sel {
                    c.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
                }
                c.iter_mut().for_each(|a| *a /= sel.len() as f64);
                c
            })
            .collect()
    }

    /// Mean pairwise Euclidean distance between per-domain centroids of the
    /// raw rotation latents.
    pub fn latent_r_centroid_spread(&self, domains: &[&str]) -> f64 {
        mean_pairwise(&self.centroids(&self.latent_r, domains))
    }

    /// Same, in the rotation PCA plane.
    pub fn pca_r_centroid_spread(&self, domains: &[&str]) -> f64 {
        let rows: Vec<Vec<f64>> = self.pca_r.iter().map(|p| p.to_vec()).collect();
        mean_pairwise(&self.centroids(&rows, domains))
    }
}

fn mean_pairwise(points: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            sum += points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Latents of `split` in each domain with pooled PCA projections.
pub fn collect_embeddings(model: &impl PoseEstimator, split: &SceneSplit, domains: &[&str]) -> Result<EmbeddingSet, EvalError> {
    let mut keys = Vec::new();
    let mut lt = Vec::new();
    let mut lr = Vec::new();
    for d in domains {
        let store = split.load_domain(d, model.preprocess())?;
        let inf = model.infer_store(&store, d)?;
        keys.extend((0..inf.latent_t.len()).map(|i| (d.to_string(), i)));
        lt.extend(inf.latent_t);
        lr.extend(inf.latent_r);
    }
    EmbeddingSet::new(keys, lt, lr)
}

pub fn export_embeddings(model: &impl PoseEstimator, split: &SceneSplit, domains: &[&str], out_path: &Path) -> Result<EmbeddingSet, EvalError> {
    let set = collect_embeddings(model, split, domains)?;
    write_file(out_path, &set.to_csv())?;
    Ok(set)
}
