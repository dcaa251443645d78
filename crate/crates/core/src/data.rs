//! Synthetic datasets, the view-augmentation family and minibatch iteration.
//!
//! Cluster data lives in a latent space and is pushed through a fixed random
//! `tanh` layer, so classes are separable but not linearly so in input space.
//! The latent means and the nonlinearity are a pure function of the world
//! seed; individual splits are drawn from the same world with their own seeds.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

/// SplitMix64 mixing of a base seed with a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    Train,
    Test,
    Ood,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        })
    }
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Split::Pretrain),
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "ood" => Some(Split::Ood),
            _ => None,
        }
    }
}

/// Parameters of the cluster world shared by all splits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::Config(format!(
                "cluster_std must be nonnegative, got {}",
                self.cluster_std
            )));
        }
        Ok(())
    }
}

/// Latent class means plus the fixed random nonlinearity `x = tanh(Wz + b)`.
#[derive(Debug, Clone)]
pub struct ClusterWorld {
    spec: ClusterSpec,
    means: Vec<Vec<f64>>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl ClusterWorld {
    pub fn new(spec: ClusterSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let means = (0..spec.classes)
            .map(|_| {
                random_direction(&mut rng, d)
                    .into_iter()
                    .map(|v| v * spec.separation)
                    .collect()
            })
            .collect();
        let scale = 1.0 / (d as f64).sqrt();
        let weight = (0..d * d)
            .map(|_| normal(&mut rng) * scale)
            .collect::<Vec<f64>>();
        let bias = (0..d)
            .map(|_| 0.1 * normal(&mut rng))
            .collect::<Vec<f64>>();
        Ok(Self {
            spec,
            means,
            weight,
            bias,
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    /// Latent class means.
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Latent means of the shifted-means OOD family: radius 4·separation,
    /// hence at least 3·separation from every class mean.
    pub fn ood_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x00d));
        (0..self.spec.classes)
            .map(|_| {
                random_direction(&mut rng, self.spec.input_dim)
                    .into_iter()
                    .map(|v| v * 4.0 * self.spec.separation)
                    .collect()
            })
            .collect()
    }

    fn warp(&self, z: &[f64], out: &mut Vec<f64>) {
        let d = self.spec.input_dim;
        for j in 0..d {
            let pre: f64 = (0..d).map(|i| z[i] * self.weight[i * d + j]).sum::<f64>() + self.bias[j];
            out.push(pre.tanh());
        }
    }

    fn draw_around<R: Rng>(&self, centers: &[Vec<f64>], std: f64, per_center: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
        let d = self.spec.input_dim;
        let mut x = Vec::with_capacity(centers.len() * per_center * d);
        let mut y = Vec::with_capacity(centers.len() * per_center);
        let mut z = vec![0.0; d];
        for (c, mean) in centers.iter().enumerate() {
            for _ in 0..per_center {
                for (zi, m) in z.iter_mut().zip(mean) {
                    *zi = m + std * normal(rng);
                }
                self.warp(&z, &mut x);
                y.push(c);
            }
        }
        (x, y)
    }

    /// `per_class` labeled samples per class, grouped by class.
    pub fn sample(&self, per_class: usize, seed: u64, split: Split) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = self.draw_around(&self.means, self.spec.cluster_std, per_class, &mut rng);
        let rows = y.len();
        let mut meta = self.meta();
        meta.push(("per_class".into(), per_class.to_string()));
        meta.push(("sample_seed".into(), seed.to_string()));
        Ok(Dataset {
            x: Tensor::matrix(rows, self.spec.input_dim, x)?,
            y: Some(y),
            split,
            meta,
        })
    }

    fn meta(&self) -> Vec<(String, String)> {
        let s = &self.spec;
        vec![
            ("generator".into(), "clusters".into()),
            ("classes".into(), s.classes.to_string()),
            ("separation".into(), s.separation.to_string()),
            ("cluster_std".into(), s.cluster_std.to_string()),
            ("world_seed".into(), s.seed.to_string()),
        ]
    }
}

/// Rows of inputs with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub split: Split,
    /// Generator parameters, kept so a run can be replayed without the data.
    pub meta: Vec<(String, String)>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::Data(format!("{} split carries no labels", self.split)))
    }

    pub fn class_count(&self) -> usize {
        self.y
            .as_ref()
            .and_then(|y| y.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: self.y.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            split: self.split,
            meta: self.meta.clone(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Convenience wrapper: one labeled split from a fresh world.
pub fn make_clusters(spec: &ClusterSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    ClusterWorld::new(spec.clone())?.sample(per_class, seed, Split::Train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodMode {
    ShiftedMeans,
    ScaledVariance,
    UniformBox,
}

impl OodMode {
    pub fn name(self) -> &'static str {
        match self {
            OodMode::ShiftedMeans => "shifted_means",
            OodMode::ScaledVariance => "scaled_variance",
            OodMode::UniformBox => "uniform_box",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shifted_means" => Ok(OodMode::ShiftedMeans),
            "scaled_variance" => Ok(OodMode::ScaledVariance),
            "uniform_box" => Ok(OodMode::UniformBox),
            other => Err(Error::Config(format!("unknown OOD mode {other:?}"))),
        }
    }
}

/// Unlabeled out-of-distribution rows for `world`, `rows` in total.
///
/// `reference` supplies the bounding box for [`OodMode::UniformBox`]; the box
/// is the reference bounding box scaled ×2 about its center.
pub fn make_ood(world: &ClusterWorld, reference: &Dataset, mode: OodMode, rows: usize, seed: u64) -> Result<Dataset> {
    let d = world.spec.input_dim;
    if reference.input_dim() != d {
        return Err(Error::Data(format!(
            "reference has width {}, world has {d}",
            reference.input_dim()
        )));
    }
    if rows == 0 {
        return Err(Error::Config("OOD set needs at least one row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_center = rows.div_ceil(world.spec.classes);
    let x = match mode {
        OodMode::ShiftedMeans => {
            let centers = world.ood_means(seed);
            world.draw_around(&centers, world.spec.cluster_std, per_center, &mut rng).0
        }
        OodMode::ScaledVariance => {
            world
                .draw_around(&world.means, 3.0 * world.spec.cluster_std, per_center, &mut rng)
                .0
        }
        OodMode::UniformBox => {
            let (lo, hi) = bounding_box(reference);
            let mut x = Vec::with_capacity(rows * d);
            for _ in 0..rows {
                for j in 0..d {
                    let (c, half) = ((lo[j] + hi[j]) / 2.0, (hi[j] - lo[j]).max(1e-12));
                    x.push(rng.gen_range(c - half..=c + half));
                }
            }
            x
        }
    };
    let mut x = x;
    x.truncate(rows * d);
    let mut meta = world.meta();
    meta.push(("ood_mode".into(), mode.name().into()));
    meta.push(("sample_seed".into(), seed.to_string()));
    Ok(Dataset {
        x: Tensor::matrix(rows, d, x)?,
        y: None,
        split: Split::Ood,
        meta,
    })
}

/// Per-coordinate `(min, max)` over the rows.
pub fn bounding_box(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = data.input_dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..data.rows() {
        for (j, v) in data.x.row(i).iter().enumerate() {
            lo[j] = lo[j].min(*v);
            hi[j] = hi[j].max(*v);
        }
    }
    (lo, hi)
}

/// The augmentation family 𝒯 on vectors: multiplicative jitter, additive
/// Gaussian noise, then coordinate masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_prob: 0.1,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.scale_range;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::Config(format!("scale range must satisfy 0 < a <= b, got [{a}, {b}]")));
        }
        Ok(())
    }

    fn view<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Tensor {
        let (a, b) = self.scale_range;
        let cols = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let s = if a < b { rng.gen_range(a..=b) } else { a };
            for v in row {
                let mut t = s * v;
                if self.noise_std > 0.0 {
                    t += self.noise_std * normal(rng);
                }
                if self.mask_prob > 0.0 && rng.gen::<f64>() < self.mask_prob {
                    t = 0.0;
                }
                out.push(t);
            }
        }
        Tensor::from_raw(x.shape().to_vec(), out)
    }
}

/// Two independent draws t(X), t′(X) applied to the same rows.
pub fn augment_pair<R: Rng>(x: &Tensor, cfg: &AugmentationConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::Contract("augment_pair needs a non-empty batch".into()));
    }
    cfg.validate()?;
    Ok((cfg.view(x, rng), cfg.view(x, rng)))
}

/// Row-index batches for one epoch: a permutation seeded by `(seed, epoch)`
/// cut into chunks of `batch`; the final short batch is kept.
pub fn minibatches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

const DATASET_MAGIC: &str = "bayes-ssl-dataset";
const DATASET_VERSION: u32 = 1;

fn header_path(stem: &Path) -> PathBuf {
    stem.with_extension("hdr")
}

fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes `<stem>.hdr` (text) and `<stem>.bin` (little-endian f64 rows, then
/// u32 labels when present).
pub fn save_dataset(data: &Dataset, stem: &Path) -> Result<()> {
    let mut hdr = format!("{DATASET_MAGIC} {DATASET_VERSION}\n");
    hdr += &format!("rows = {}\ninput_dim = {}\n", data.rows(), data.input_dim());
    hdr += &format!("labeled = {}\nsplit = {}\n", data.y.is_some(), data.split);
    for (k, v) in &data.meta {
        hdr += &format!("meta.{k} = {v}\n");
    }
    let mut bin = Vec::with_capacity(data.x.len() * 8 + data.rows() * 4);
    for v in data.x.data() {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(y) = &data.y {
        for &l in y {
            bin.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    let hp = header_path(stem);
    fs::write(&hp, hdr).map_err(|e| Error::io(&hp, e))?;
    let bp = payload_path(stem);
    fs::write(&bp, bin).map_err(|e| Error::io(&bp, e))
}

pub fn load_dataset(stem: &Path) -> Result<Dataset> {
    let hp = header_path(stem);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let bad = |m: String| Error::Format {
        path: hp.clone(),
        source: FormatError::Malformed(m),
    };
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    let mut parts = first.split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(Error::Format {
            path: hp.clone(),
            source: FormatError::BadMagic,
        });
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version".into()))?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            path: hp.clone(),
            source: FormatError::Version {
                found: version,
                expected: DATASET_VERSION,
            },
        });
    }
    let (mut rows, mut dim, mut labeled, mut split) = (None, None, None, None);
    let mut meta = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
        match k {
            "rows" => rows = v.parse::<usize>().ok(),
            "input_dim" => dim = v.parse::<usize>().ok(),
            "labeled" => labeled = v.parse::<bool>().ok(),
            "split" => split = Split::parse(v),
            _ => match k.strip_prefix("meta.") {
                Some(mk) => meta.push((mk.to_string(), v.to_string())),
                None => return Err(bad(format!("unknown header key {k}"))),
            },
        }
    }
    let (rows, dim, labeled, split) = match (rows, dim, labeled, split) {
        (Some(r), Some(d), Some(l), Some(s)) => (r, d, l, s),
        _ => return Err(bad("incomplete header".into())),
    };
    let bp = payload_path(stem);
    let bin = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let needed = rows * dim * 8 + if labeled { rows * 4 } else { 0 };
    if bin.len() < needed {
        return Err(Error::Format {
            path: bp,
            source: FormatError::Truncated {
                needed,
                available: bin.len(),
            },
        });
    }
    let x: Vec<f64> = bin[..rows * dim * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let y = labeled.then(|| {
        bin[rows * dim * 8..needed]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect()
    });
    let x = Tensor::matrix(rows, dim, x).map_err(|e| Error::Data(format!("{}: {e}", bp.display())))?;
    Ok(Dataset { x, y, split, meta })
}
