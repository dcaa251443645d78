//! Posterior snapshots of the encoder, their persistence, and model averaging
//! of the fine-tuned members' predictive distributions.

use std::path::Path;

use crate::byol::TwinModel;
use crate::checkpoint::Archive;
use crate::downstream::{predict_proba, FineTuned};
use crate::error::{Error, FormatError, Result};
use crate::params::{Activation, MlpSpec, ParamVector};
use crate::sampler::SamplerKind;
use crate::tensor::Tensor;

/// Encoder parameters captured at the end of a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub encoder: ParamVector,
    pub step: usize,
    pub cycle: usize,
    pub pretrain_loss: f64,
    pub kind: SamplerKind,
}

/// Snapshots in capture order, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    encoder_spec: MlpSpec,
    snapshots: Vec<Snapshot>,
    pub seed: u64,
    pub config_digest: String,
}

impl PosteriorEnsemble {
    pub fn new(encoder_spec: MlpSpec, seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            encoder_spec,
            snapshots: Vec::new(),
            seed,
            config_digest: config_digest.into(),
        }
    }

    pub fn encoder_spec(&self) -> &MlpSpec {
        &self.encoder_spec
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Appends a deep copy of the online encoder.
    pub fn collect(&mut self, model: &TwinModel, step: usize, cycle: usize, loss: f64, kind: SamplerKind) -> Result<()> {
        if model.arch().encoder_spec() != self.encoder_spec {
            return Err(Error::Contract("model encoder does not match the ensemble".into()));
        }
        self.push(Snapshot {
            encoder: model.online.encoder.clone(),
            step,
            cycle,
            pretrain_loss: loss,
            kind,
        })
    }

    pub fn push(&mut self, snapshot: Snapshot) -> Result<()> {
        self.encoder_spec.check(&snapshot.encoder).map_err(|e| {
            Error::Contract(format!("snapshot does not fit the ensemble encoder: {e}"))
        })?;
        self.snapshots.push(snapshot);
        Ok(())
    }

    /// Keeps the snapshots at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.encoder_spec.clone(), self.seed, self.config_digest.clone());
        for &i in indices {
            let s = self.snapshots.get(i).ok_or_else(|| {
                Error::Contract(format!("snapshot {i} out of range for {} snapshots", self.len()))
            })?;
            out.snapshots.push(s.clone());
        }
        Ok(out)
    }

    /// Concatenates ensembles with the same encoder, e.g. one per restart.
    pub fn extend(&mut self, other: PosteriorEnsemble) -> Result<()> {
        if other.encoder_spec != self.encoder_spec {
            return Err(Error::Contract("cannot merge ensembles with different encoders".into()));
        }
        self.snapshots.extend(other.snapshots);
        Ok(())
    }
}

/// Model average `(1/s) Σ softmax(head(φ(x)))` over the last `prefix` members.
///
/// `prefix = 1` is the most recent member alone, which is the single-snapshot
/// prediction.
pub fn bma_predict(ensemble: &PosteriorEnsemble, members: &[FineTuned], x: &Tensor, prefix: usize) -> Result<Tensor> {
    if ensemble.is_empty() {
        return Err(Error::Contract("prediction needs at least one snapshot".into()));
    }
    if members.len() != ensemble.len() {
        return Err(Error::Contract(format!(
            "{} fine-tuned members for {} snapshots",
            members.len(),
            ensemble.len()
        )));
    }
    if prefix == 0 || prefix > members.len() {
        return Err(Error::Contract(format!(
            "ensemble prefix {prefix} outside 1..={}",
            members.len()
        )));
    }
    average_members(ensemble.encoder_spec(), &members[members.len() - prefix..], x)
}

/// Mean of the members' softmax outputs, summed in member order.
pub fn average_members(spec: &MlpSpec, members: &[FineTuned], x: &Tensor) -> Result<Tensor> {
    let Some(first) = members.first() else {
        return Err(Error::Contract("prediction needs at least one member".into()));
    };
    let mut acc = predict_proba(spec, first, x)?.into_data();
    for m in &members[1..] {
        let p = predict_proba(spec, m, x)?;
        if p.len() != acc.len() {
            return Err(Error::Contract("members disagree on the class count".into()));
        }
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let s = members.len() as f64;
    let classes = first.head.class_count();
    for a in &mut acc {
        *a /= s;
    }
    Ok(Tensor::matrix(x.rows(), classes, acc)?)
}

/// `H = −Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("not a probability vector: {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {total}")));
    }
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Per-row [`predictive_entropy`].
pub fn entropies(probs: &Tensor) -> Result<Vec<f64>> {
    let (_, c) = probs
        .as_rows()
        .ok_or_else(|| Error::Contract("entropies expects a (rows, C) tensor".into()))?;
    probs.data().chunks(c).map(predictive_entropy).collect()
}

pub(crate) fn spec_to_meta(prefix: &str, spec: &MlpSpec, meta: &mut Vec<(String, String)>) {
    let widths = spec.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    meta.push((format!("{prefix}.widths"), widths));
    meta.push((format!("{prefix}.activation"), spec.activation.name().into()));
    meta.push((format!("{prefix}.activate_output"), spec.activate_output.to_string()));
}

pub(crate) fn spec_from_meta(prefix: &str, archive: &Archive) -> std::result::Result<MlpSpec, FormatError> {
    let widths = archive
        .require(&format!("{prefix}.widths"))?
        .split(',')
        .map(|w| w.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| FormatError::Malformed(format!("bad {prefix}.widths")))?;
    let act = archive.require(&format!("{prefix}.activation"))?;
    let activation = Activation::parse(act)
        .ok_or_else(|| FormatError::Malformed(format!("unknown activation {act}")))?;
    let activate_output = archive.parse_meta(&format!("{prefix}.activate_output"))?;
    let spec = MlpSpec::new(widths, activation, activate_output);
    spec.validate().map_err(FormatError::Malformed)?;
    Ok(spec)
}

/// Splits segments named `"{group}/{name}"` back into per-group vectors, in
/// order of first appearance.
pub(crate) fn split_groups(params: &ParamVector) -> std::result::Result<Vec<(String, ParamVector)>, FormatError> {
    let mut groups: Vec<(String, ParamVector)> = Vec::new();
    for (i, seg) in params.segments().iter().enumerate() {
        let (group, name) = seg
            .name
            .split_once('/')
            .ok_or_else(|| FormatError::Malformed(format!("segment {} has no group", seg.name)))?;
        if groups.last().map(|g| g.0.as_str()) != Some(group) {
            groups.push((group.to_string(), ParamVector::new()));
        }
        groups
            .last_mut()
            .unwrap()
            .1
            .push(name, params.tensor(i))
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    Ok(groups)
}

pub(crate) fn add_group(into: &mut ParamVector, group: &str, params: &ParamVector) {
    for (i, seg) in params.segments().iter().enumerate() {
        into.push(format!("{group}/{}", seg.name), params.tensor(i))
            .expect("group prefixes keep names unique");
    }
}

pub fn ensemble_to_archive(ensemble: &PosteriorEnsemble) -> Archive {
    let mut meta = vec![
        ("format".to_string(), "ensemble".to_string()),
        ("seed".into(), ensemble.seed.to_string()),
        ("config_digest".into(), ensemble.config_digest.clone()),
        ("snapshots".into(), ensemble.len().to_string()),
    ];
    spec_to_meta("encoder", &ensemble.encoder_spec, &mut meta);
    let mut params = ParamVector::new();
    for (i, s) in ensemble.snapshots.iter().enumerate() {
        meta.push((format!("snapshot.{i}.step"), s.step.to_string()));
        meta.push((format!("snapshot.{i}.cycle"), s.cycle.to_string()));
        meta.push((format!("snapshot.{i}.loss"), s.pretrain_loss.to_string()));
        meta.push((format!("snapshot.{i}.kind"), s.kind.name().into()));
        add_group(&mut params, &format!("snapshot.{i}"), &s.encoder);
    }
    Archive { meta, params }
}

pub fn ensemble_from_archive(archive: &Archive) -> std::result::Result<PosteriorEnsemble, FormatError> {
    if archive.require("format")? != "ensemble" {
        return Err(FormatError::Malformed("not an ensemble archive".into()));
    }
    let spec = spec_from_meta("encoder", archive)?;
    let mut ens = PosteriorEnsemble::new(spec, archive.parse_meta("seed")?, archive.require("config_digest")?);
    let count: usize = archive.parse_meta("snapshots")?;
    let groups = split_groups(&archive.params)?;
    if groups.len() != count {
        return Err(FormatError::Malformed(format!(
            "header lists {count} snapshots, payload has {}",
            groups.len()
        )));
    }
    for (i, (group, encoder)) in groups.into_iter().enumerate() {
        if group != format!("snapshot.{i}") {
            return Err(FormatError::Malformed(format!("unexpected segment group {group}")));
        }
        let kind = archive.require(&format!("snapshot.{i}.kind"))?;
        let snapshot = Snapshot {
            encoder,
            step: archive.parse_meta(&format!("snapshot.{i}.step"))?,
            cycle: archive.parse_meta(&format!("snapshot.{i}.cycle"))?,
            pretrain_loss: archive.parse_meta(&format!("snapshot.{i}.loss"))?,
            kind: SamplerKind::parse(kind)
                .ok_or_else(|| FormatError::Malformed(format!("unknown sampler kind {kind}")))?,
        };
        ens.push(snapshot)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    Ok(ens)
}

pub fn save_ensemble(ensemble: &PosteriorEnsemble, path: &Path) -> Result<()> {
    ensemble_to_archive(ensemble).save(path)
}

pub fn load_ensemble(path: &Path) -> Result<PosteriorEnsemble> {
    ensemble_from_archive(&Archive::load(path)?).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
