//! Sectioned `key = value` run configuration.
//!
//! ```text
//! # comment
//! [sampler]
//! kind = csghmc
//! lr0 = 0.2
//! ```
//!
//! Unknown sections and keys are rejected. Missing keys take defaults, but
//! every section must be present. [`RunConfig::to_text`] writes every key, and
//! parsing that text gives back an equal config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::byol::TwinArch;
use crate::data::{AugmentationConfig, ClusterSpec, OodMode};
use crate::downstream::FineTuneConfig;
use crate::error::{Error, Result};
use crate::metrics::OodScore;
use crate::params::Activation;
use crate::sampler::{SamplerConfig, SamplerKind, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Synthetic clusters; per-class row counts for each split.
    Clusters {
        spec: ClusterSpec,
        pretrain_per_class: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// Dataset file stems (`<stem>.hdr` + `<stem>.bin`).
    Files {
        pretrain: PathBuf,
        train: PathBuf,
        test: PathBuf,
        ood: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub sampler: SamplerConfig,
    pub batch: usize,
    /// Keep only the most recent snapshots; 0 keeps all.
    pub keep_last: usize,
    /// Independent restarts splitting the step budget evenly; the snapshots of
    /// all restarts form one ensemble.
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub bins: usize,
    pub ood_mode: OodMode,
    pub ood_rows: usize,
    pub ood_score: OodScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagConfig {
    pub kind: SamplerKind,
    pub lr: f64,
    pub beta: f64,
    pub temperature: f64,
    pub dim: usize,
    pub steps: usize,
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Label used in output tables, e.g. `bbyol`.
    pub method: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub augment: AugmentationConfig,
    pub arch: TwinArch,
    pub tau: f64,
    pub pretrain: PretrainConfig,
    pub finetune: FineTuneConfig,
    pub label_fractions: Vec<f64>,
    pub eval: EvalConfig,
    pub diag: DiagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut sampler = SamplerConfig::new(SamplerKind::Csghmc);
        // the drift carries a factor n = 2000, so ℓ₀ is small
        sampler.lr0 = 5e-5;
        sampler.cycle_len = 500;
        sampler.total_steps = 2000;
        Self {
            method: "bbyol".into(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("out"),
            data: DataSource::Clusters {
                spec: ClusterSpec {
                    classes: 4,
                    input_dim: 16,
                    separation: 3.0,
                    cluster_std: 1.0,
                    seed: 0,
                },
                pretrain_per_class: 500,
                train_per_class: 100,
                test_per_class: 250,
            },
            augment: AugmentationConfig::default(),
            arch: TwinArch::default(),
            tau: 0.99,
            pretrain: PretrainConfig {
                sampler,
                batch: 100,
                keep_last: 0,
                restarts: 1,
            },
            finetune: FineTuneConfig::default(),
            label_fractions: vec![1.0, 0.25, 0.1],
            eval: EvalConfig {
                bins: 20,
                ood_mode: OodMode::UniformBox,
                ood_rows: 1000,
                ood_score: OodScore::Entropy,
            },
            diag: DiagConfig {
                kind: SamplerKind::Sghmc,
                lr: 0.01,
                beta: 0.9,
                temperature: 1.0,
                dim: 1,
                steps: 200_000,
                burn_in: 10_000,
            },
        }
    }
}

const SECTIONS: [&str; 9] = [
    "run", "data", "augment", "model", "sampler", "pretrain", "finetune", "eval", "diag",
];

/// Keys of one section, drained as they are read.
struct Section {
    name: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((raw, line)) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: bad value {raw:?} for {}.{key}", self.name))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<()> {
        if let Some((raw, line)) = self.entries.remove(key) {
            *slot = parse(&raw).ok_or_else(|| {
                Error::Config(format!("line {line}: bad value {raw:?} for {}.{key}", self.name))
            })?;
        }
        Ok(())
    }

    fn set_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        self.set_with(key, slot, |raw| {
            raw.split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().ok())
                .collect()
        })
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "line {line}: unknown key {key} in [{}]",
                self.name
            ))),
        }
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
            }
            if sections.contains_key(&name) {
                return Err(Error::Config(format!("line {line_no}: duplicate section [{name}]")));
            }
            sections.insert(
                name.clone(),
                Section {
                    name: name.clone(),
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {line_no}: key outside any section")))?;
        let entries = &mut sections.get_mut(section).unwrap().entries;
        let key = key.trim().to_string();
        if entries.contains_key(&key) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
        }
        entries.insert(key, (value.trim().to_string(), line_no));
    }
    Ok(sections)
}

fn fmt_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

/// Baseline methods expressed as config variants of the default run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Constant-lr SGD, last snapshot.
    Byol,
    /// Cyclic-lr SGD without noise.
    SnapByol,
    /// Cyclic SGHMC.
    Bbyol,
    /// Constant-lr SGD from independent restarts sharing the step budget.
    EnsembleByol,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Byol, Method::SnapByol, Method::Bbyol, Method::EnsembleByol];

    pub fn name(self) -> &'static str {
        match self {
            Method::Byol => "byol",
            Method::SnapByol => "snap_byol",
            Method::Bbyol => "bbyol",
            Method::EnsembleByol => "ensemble_byol",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Applies this method's sampler settings to `base`. Constant-lr methods
    /// run at ℓ₀/2, the mean of the cosine schedule.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.method = self.name().into();
        let kind = match self {
            Method::Byol | Method::EnsembleByol => SamplerKind::MapSgd,
            Method::SnapByol => SamplerKind::SnapSgd,
            Method::Bbyol => SamplerKind::Csghmc,
        };
        let s = &mut cfg.pretrain.sampler;
        if kind == SamplerKind::MapSgd && s.kind != SamplerKind::MapSgd {
            s.lr0 /= 2.0;
        }
        s.kind = kind;
        s.schedule = kind.default_schedule();
        cfg.pretrain.restarts = if self == Method::EnsembleByol { 4 } else { 1 };
        if self == Method::EnsembleByol {
            s.cycle_len = s.total_steps / 4;
        }
        cfg
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = split_sections(text)?;
        let mut section = |name: &str| {
            sections
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing section [{name}]")))
        };
        let mut cfg = RunConfig::default();

        let mut s = section("run")?;
        s.set("method", &mut cfg.method)?;
        s.set_list("seeds", &mut cfg.seeds)?;
        s.set("output_dir", &mut cfg.output_dir)?;
        s.finish()?;

        let mut s = section("data")?;
        let mut source = String::from("clusters");
        s.set("source", &mut source)?;
        cfg.data = match source.as_str() {
            "clusters" => {
                let DataSource::Clusters {
                    mut spec,
                    mut pretrain_per_class,
                    mut train_per_class,
                    mut test_per_class,
                } = cfg.data
                else {
                    unreachable!("default data source is clusters")
                };
                s.set("classes", &mut spec.classes)?;
                s.set("input_dim", &mut spec.input_dim)?;
                s.set("separation", &mut spec.separation)?;
                s.set("cluster_std", &mut spec.cluster_std)?;
                s.set("seed", &mut spec.seed)?;
                s.set("pretrain_per_class", &mut pretrain_per_class)?;
                s.set("train_per_class", &mut train_per_class)?;
                s.set("test_per_class", &mut test_per_class)?;
                DataSource::Clusters {
                    spec,
                    pretrain_per_class,
                    train_per_class,
                    test_per_class,
                }
            }
            "files" => {
                let mut path = |key: &str| -> Result<PathBuf> {
                    s.take(key)?
                        .ok_or_else(|| Error::Config(format!("data.{key} is required for file sources")))
                };
                DataSource::Files {
                    pretrain: path("pretrain")?,
                    train: path("train")?,
                    test: path("test")?,
                    ood: path("ood")?,
                }
            }
            other => return Err(Error::Config(format!("unknown data source {other:?}"))),
        };
        s.finish()?;

        let mut s = section("augment")?;
        s.set("noise_std", &mut cfg.augment.noise_std)?;
        s.set("mask_prob", &mut cfg.augment.mask_prob)?;
        s.set("scale_min", &mut cfg.augment.scale_range.0)?;
        s.set("scale_max", &mut cfg.augment.scale_range.1)?;
        s.finish()?;

        let mut s = section("model")?;
        let a = &mut cfg.arch;
        match (&cfg.data, s.take("input_dim")?) {
            (_, Some(d)) => a.input_dim = d,
            (DataSource::Clusters { spec, .. }, None) => a.input_dim = spec.input_dim,
            (DataSource::Files { .. }, None) => {
                return Err(Error::Config("model.input_dim is required for file sources".into()))
            }
        }
        s.set_list("encoder_hidden", &mut a.encoder_hidden)?;
        s.set("embed_dim", &mut a.embed_dim)?;
        s.set("projector_hidden", &mut a.projector_hidden)?;
        s.set("proj_dim", &mut a.proj_dim)?;
        s.set("predictor_hidden", &mut a.predictor_hidden)?;
        s.set_with("activation", &mut a.activation, Activation::parse)?;
        s.set("tau", &mut cfg.tau)?;
        s.finish()?;

        let mut s = section("sampler")?;
        let sc = &mut cfg.pretrain.sampler;
        s.set_with("kind", &mut sc.kind, SamplerKind::parse)?;
        sc.schedule = sc.kind.default_schedule();
        s.set_with("schedule", &mut sc.schedule, Schedule::parse)?;
        s.set("lr0", &mut sc.lr0)?;
        s.set("beta", &mut sc.beta)?;
        s.set("temperature", &mut sc.temperature)?;
        s.set("cycle_len", &mut sc.cycle_len)?;
        s.set("total_steps", &mut sc.total_steps)?;
        s.set("noise_start_frac", &mut sc.noise_start_frac)?;
        s.set("prior_std", &mut sc.prior_std)?;
        s.set("temper_drift", &mut sc.temper_drift)?;
        s.finish()?;

        let mut s = section("pretrain")?;
        s.set("batch", &mut cfg.pretrain.batch)?;
        s.set("keep_last", &mut cfg.pretrain.keep_last)?;
        s.set("restarts", &mut cfg.pretrain.restarts)?;
        s.finish()?;

        let mut s = section("finetune")?;
        let f = &mut cfg.finetune;
        s.set("lr", &mut f.lr)?;
        s.set("momentum", &mut f.momentum)?;
        s.set("batch", &mut f.batch)?;
        s.set("epochs", &mut f.epochs)?;
        s.set("freeze_encoder", &mut f.freeze_encoder)?;
        s.set_list("label_fractions", &mut cfg.label_fractions)?;
        s.finish()?;

        let mut s = section("eval")?;
        s.set("bins", &mut cfg.eval.bins)?;
        s.set_with("ood_mode", &mut cfg.eval.ood_mode, |v| OodMode::parse(v).ok())?;
        s.set("ood_rows", &mut cfg.eval.ood_rows)?;
        s.set_with("ood_score", &mut cfg.eval.ood_score, OodScore::parse)?;
        s.finish()?;

        // diagnostics settings are optional
        if let Ok(mut s) = section("diag") {
            let d = &mut cfg.diag;
            s.set_with("kind", &mut d.kind, SamplerKind::parse)?;
            s.set("lr", &mut d.lr)?;
            s.set("beta", &mut d.beta)?;
            s.set("temperature", &mut d.temperature)?;
            s.set("dim", &mut d.dim)?;
            s.set("steps", &mut d.steps)?;
            s.set("burn_in", &mut d.burn_in)?;
            s.finish()?;
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.method.is_empty() || self.method.contains(char::is_whitespace) {
            return Err(Error::Config(format!("method label {:?} must be one word", self.method)));
        }
        match &self.data {
            DataSource::Clusters {
                spec,
                pretrain_per_class,
                train_per_class,
                test_per_class,
            } => {
                spec.validate()?;
                if spec.input_dim != self.arch.input_dim {
                    return Err(Error::Config(format!(
                        "data.input_dim {} differs from the encoder input {}",
                        spec.input_dim, self.arch.input_dim
                    )));
                }
                if [pretrain_per_class, train_per_class, test_per_class].contains(&&0) {
                    return Err(Error::Config("per-class row counts must be positive".into()));
                }
            }
            DataSource::Files { .. } => {}
        }
        self.augment.validate()?;
        self.arch.validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        let p = &self.pretrain;
        p.sampler.validate()?;
        if p.batch == 0 || p.restarts == 0 {
            return Err(Error::Config("pretrain batch and restarts must be positive".into()));
        }
        if p.sampler.total_steps % p.restarts != 0 {
            return Err(Error::Config(format!(
                "total_steps {} does not split evenly over {} restarts",
                p.sampler.total_steps, p.restarts
            )));
        }
        self.finetune.validate()?;
        if self.label_fractions.is_empty() {
            return Err(Error::Config("at least one label fraction is required".into()));
        }
        for &f in &self.label_fractions {
            FineTuneConfig {
                label_fraction: f,
                ..self.finetune.clone()
            }
            .validate()?;
        }
        if self.eval.bins == 0 || self.eval.ood_rows == 0 {
            return Err(Error::Config("eval bins and ood_rows must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form with every key spelled out.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let w = &mut o;
        writeln!(w, "[run]\nmethod = {}\nseeds = {}", self.method, fmt_list(&self.seeds)).unwrap();
        writeln!(w, "output_dir = {}\n", self.output_dir.display()).unwrap();
        writeln!(w, "[data]").unwrap();
        match &self.data {
            DataSource::Clusters {
                spec,
                pretrain_per_class,
                train_per_class,
                test_per_class,
            } => {
                writeln!(w, "source = clusters\nclasses = {}\ninput_dim = {}", spec.classes, spec.input_dim).unwrap();
                writeln!(w, "separation = {}\ncluster_std = {}\nseed = {}", spec.separation, spec.cluster_std, spec.seed).unwrap();
                writeln!(w, "pretrain_per_class = {pretrain_per_class}\ntrain_per_class = {train_per_class}").unwrap();
                writeln!(w, "test_per_class = {test_per_class}\n").unwrap();
            }
            DataSource::Files {
                pretrain,
                train,
                test,
                ood,
            } => {
                writeln!(w, "source = files\npretrain = {}\ntrain = {}", pretrain.display(), train.display()).unwrap();
                writeln!(w, "test = {}\nood = {}\n", test.display(), ood.display()).unwrap();
            }
        }
        let g = &self.augment;
        writeln!(w, "[augment]\nnoise_std = {}\nmask_prob = {}", g.noise_std, g.mask_prob).unwrap();
        writeln!(w, "scale_min = {}\nscale_max = {}\n", g.scale_range.0, g.scale_range.1).unwrap();
        let a = &self.arch;
        writeln!(w, "[model]\ninput_dim = {}", a.input_dim).unwrap();
        writeln!(w, "encoder_hidden = {}\nembed_dim = {}", fmt_list(&a.encoder_hidden), a.embed_dim).unwrap();
        writeln!(w, "projector_hidden = {}\nproj_dim = {}", a.projector_hidden, a.proj_dim).unwrap();
        writeln!(w, "predictor_hidden = {}\nactivation = {}", a.predictor_hidden, a.activation.name()).unwrap();
        writeln!(w, "tau = {}\n", self.tau).unwrap();
        let s = &self.pretrain.sampler;
        writeln!(w, "[sampler]\nkind = {}\nschedule = {}", s.kind.name(), s.schedule.name()).unwrap();
        writeln!(w, "lr0 = {}\nbeta = {}\ntemperature = {}", s.lr0, s.beta, s.temperature).unwrap();
        writeln!(w, "cycle_len = {}\ntotal_steps = {}", s.cycle_len, s.total_steps).unwrap();
        writeln!(w, "noise_start_frac = {}\nprior_std = {}", s.noise_start_frac, s.prior_std).unwrap();
        writeln!(w, "temper_drift = {}\n", s.temper_drift).unwrap();
        let p = &self.pretrain;
        writeln!(w, "[pretrain]\nbatch = {}\nkeep_last = {}\nrestarts = {}\n", p.batch, p.keep_last, p.restarts).unwrap();
        let f = &self.finetune;
        writeln!(w, "[finetune]\nlr = {}\nmomentum = {}\nbatch = {}", f.lr, f.momentum, f.batch).unwrap();
        writeln!(w, "epochs = {}\nfreeze_encoder = {}", f.epochs, f.freeze_encoder).unwrap();
        writeln!(w, "label_fractions = {}\n", fmt_list(&self.label_fractions)).unwrap();
        let e = &self.eval;
        writeln!(w, "[eval]\nbins = {}\nood_mode = {}", e.bins, e.ood_mode.name()).unwrap();
        writeln!(w, "ood_rows = {}\nood_score = {}\n", e.ood_rows, e.ood_score.name()).unwrap();
        let d = &self.diag;
        writeln!(w, "[diag]\nkind = {}\nlr = {}\nbeta = {}", d.kind.name(), d.lr, d.beta).unwrap();
        writeln!(w, "temperature = {}\ndim = {}\nsteps = {}\nburn_in = {}", d.temperature, d.dim, d.steps, d.burn_in).unwrap();
        o
    }

    /// First 16 hex digits of SHA-256 over the canonical text.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_text().as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.data {
            DataSource::Clusters { spec, .. } => Some(spec.classes),
            DataSource::Files { .. } => None,
        }
    }
}
