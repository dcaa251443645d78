//! Supervised fine-tuning of encoder snapshots on labeled subsets.
//!
//! The projector and predictor are dropped; each snapshot gets its own copy of
//! the encoder plus a linear softmax head, trained with Nesterov SGD on mean
//! cross-entropy and no augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::Archive;
use crate::data::{derive_seed, minibatches, Dataset};
use crate::error::{Error, FormatError, Result, TensorError};
use crate::params::{MlpSpec, ParamVector};
use crate::posterior::{add_group, spec_from_meta, spec_to_meta, split_groups, Snapshot};
use crate::tensor::{bias_add_kernel, matmul_kernel, softmax_rows, Tensor};

/// Linear map from embeddings to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weight: Tensor,
    bias: Tensor,
}

impl ClassifierHead {
    /// `weight` is `(embed_dim, C)`, `bias` is `(C)`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, c], [b]) if c == b && *c >= 1 => Ok(Self { weight, bias }),
            (w, b) => Err(TensorError::shape("classifier_head", format!("weight {w:?}, bias {b:?}")).into()),
        }
    }

    /// Weights uniform in `±1/√embed_dim`, zero bias.
    pub fn init<R: Rng>(embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let w = (0..embed_dim * classes).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_raw(vec![embed_dim, classes], w),
            bias: Tensor::zeros(vec![classes]),
        }
    }

    pub fn zeros(embed_dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![embed_dim, classes]),
            bias: Tensor::zeros(vec![classes]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (rows, d) = embeddings
            .as_rows()
            .ok_or_else(|| TensorError::shape("head", format!("input {:?}", embeddings.shape())))?;
        if d != self.embed_dim() {
            return Err(TensorError::shape("head", format!("embedding width {d}, head expects {}", self.embed_dim())).into());
        }
        let c = self.class_count();
        let z = matmul_kernel(embeddings.data(), self.weight.data(), rows, d, c);
        Ok(Tensor::from_raw(vec![rows, c], bias_add_kernel(&z, self.bias.data())))
    }
}

/// One fine-tuned member: an encoder copy and its head.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuned {
    pub encoder: ParamVector,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub label_fraction: f64,
    pub freeze_encoder: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            batch: 80,
            epochs: 50,
            label_fraction: 1.0,
            freeze_encoder: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("fine-tune lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::Config("fine-tune batch must be at least 1".into()));
        }
        check_fraction(self.label_fraction)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("label fraction must lie in (0, 1], got {f}")))
    }
}

/// Per-epoch record of a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneLog {
    pub labeled: usize,
    /// Mean cross-entropy on the labeled subset before training and after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Stratified subset: `max(1, round_half_up(n_c · fraction))` rows per class,
/// returned in original order. `fraction = 1` is the whole dataset.
pub fn subset_labels(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    check_fraction(fraction)?;
    let labels = data.labels()?;
    if labels.is_empty() {
        return Err(Error::Contract("cannot subset an empty dataset".into()));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..data.class_count() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let want = ((members.len() as f64 * fraction + 0.5).floor() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..want]);
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}

/// `head(φ(x))`.
pub fn predict_logits(spec: &MlpSpec, encoder: &ParamVector, head: &ClassifierHead, x: &Tensor) -> Result<Tensor> {
    head.logits(&spec.forward(encoder, x)?)
}

/// Row-wise softmax of [`predict_logits`].
pub fn predict_proba(spec: &MlpSpec, member: &FineTuned, x: &Tensor) -> Result<Tensor> {
    let z = predict_logits(spec, &member.encoder, &member.head, x)?;
    let c = z.cols();
    Ok(Tensor::from_raw(z.shape().to_vec(), softmax_rows(z.data(), c)))
}

fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[l]
        })
        .sum();
    total / labels.len() as f64
}

/// Nesterov SGD: `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
fn nesterov(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        *t -= lr * (g + mu * *v);
    }
}

/// Fine-tunes a copy of `snapshot.encoder` plus a fresh head on a stratified
/// `cfg.label_fraction` subset of `data`. The snapshot itself is untouched.
pub fn finetune(
    spec: &MlpSpec,
    snapshot: &Snapshot,
    data: &Dataset,
    classes: usize,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<(FineTuned, FineTuneLog)> {
    cfg.validate()?;
    spec.check(&snapshot.encoder)?;
    if let Some(&bad) = data.labels()?.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let subset = subset_labels(data, cfg.label_fraction, derive_seed(seed, 1))?;
    let labels = subset.labels()?.to_vec();
    let n = labels.len();
    let mut encoder = snapshot.encoder.clone();
    let mut head = ClassifierHead::init(spec.output_dim(), classes, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0)));
    let frozen_embeddings = if cfg.freeze_encoder {
        Some(spec.forward(&encoder, &subset.x)?)
    } else {
        None
    };
    let train_loss = |encoder: &ParamVector, head: &ClassifierHead| -> Result<f64> {
        let logits = match &frozen_embeddings {
            Some(e) => head.logits(e)?,
            None => predict_logits(spec, encoder, head, &subset.x)?,
        };
        Ok(mean_cross_entropy(&logits, &labels))
    };

    let enc_dim = if cfg.freeze_encoder { 0 } else { encoder.total_dim() };
    let head_dim = head.weight.len() + head.bias.len();
    let mut velocity = vec![0.0; enc_dim + head_dim];
    let mut theta = vec![0.0; enc_dim + head_dim];
    let mut log = FineTuneLog {
        labeled: n,
        epoch_loss: vec![train_loss(&encoder, &head)?],
    };
    let batch_seed = derive_seed(seed, 2);
    for epoch in 0..cfg.epochs {
        for idx in minibatches(n, cfg.batch, batch_seed, epoch as u64) {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (features, enc_leaves): (NodeId, Vec<NodeId>) = match &frozen_embeddings {
                Some(e) => (tape.constant(e.select_rows(&idx)), Vec::new()),
                None => {
                    let leaves = spec.register(&mut tape, &encoder, true);
                    let x = tape.constant(subset.x.select_rows(&idx));
                    (spec.forward_tape(&mut tape, &leaves, x)?, leaves)
                }
            };
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let z = tape.matmul(features, w)?;
            let z = tape.bias_add(z, b)?;
            let loss = tape.softmax_cross_entropy(z, &batch_labels)?;
            let grads = tape.backward(loss)?;

            let mut grad = Vec::with_capacity(theta.len());
            for &leaf in enc_leaves.iter().chain([&w, &b]) {
                match grads.get(leaf) {
                    Some(g) => grad.extend_from_slice(g.data()),
                    None => grad.extend(std::iter::repeat(0.0).take(tape.value(leaf).len())),
                }
            }
            theta.clear();
            if !cfg.freeze_encoder {
                theta.extend_from_slice(encoder.values());
            }
            theta.extend_from_slice(head.weight.data());
            theta.extend_from_slice(head.bias.data());
            nesterov(&mut theta, &mut velocity, &grad, cfg.lr, cfg.momentum);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite("finetune update").into());
            }
            encoder.values_mut()[..enc_dim].copy_from_slice(&theta[..enc_dim]);
            let wl = head.weight.len();
            head.weight = Tensor::from_raw(head.weight.shape().to_vec(), theta[enc_dim..enc_dim + wl].to_vec());
            head.bias = Tensor::from_raw(head.bias.shape().to_vec(), theta[enc_dim + wl..].to_vec());
        }
        log.epoch_loss.push(train_loss(&encoder, &head)?);
    }
    Ok((FineTuned { encoder, head }, log))
}

pub fn member_to_archive(spec: &MlpSpec, member: &FineTuned, meta: &[(String, String)]) -> Archive {
    let mut m = vec![("format".to_string(), "member".to_string())];
    m.extend_from_slice(meta);
    spec_to_meta("encoder", spec, &mut m);
    let mut params = ParamVector::new();
    add_group(&mut params, "encoder", &member.encoder);
    let mut head = ParamVector::new();
    head.push("weight", member.head.weight.clone()).expect("unique");
    head.push("bias", member.head.bias.clone()).expect("unique");
    add_group(&mut params, "head", &head);
    Archive { meta: m, params }
}

pub fn member_from_archive(archive: &Archive) -> std::result::Result<(MlpSpec, FineTuned), FormatError> {
    if archive.require("format")? != "member" {
        return Err(FormatError::Malformed("not a fine-tuned member archive".into()));
    }
    let spec = spec_from_meta("encoder", archive)?;
    let groups = split_groups(&archive.params)?;
    let (encoder, head) = match groups.as_slice() {
        [(e, enc), (h, head)] if e == "encoder" && h == "head" && head.segments().len() == 2 => (enc.clone(), head),
        _ => return Err(FormatError::Malformed("expected encoder and head groups".into())),
    };
    spec.check(&encoder).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let head = ClassifierHead::new(head.tensor(0), head.tensor(1))
        .map_err(|e| FormatError::Malformed(e.to_string()))?;
    if head.embed_dim() != spec.output_dim() {
        return Err(FormatError::Malformed("head width does not match the encoder".into()));
    }
    Ok((spec, FineTuned { encoder, head }))
}

pub fn save_member(spec: &MlpSpec, member: &FineTuned, meta: &[(String, String)], path: &Path) -> Result<()> {
    member_to_archive(spec, member, meta).save(path)
}

pub fn load_member(path: &Path) -> Result<(MlpSpec, FineTuned)> {
    member_from_archive(&Archive::load(path)?).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
