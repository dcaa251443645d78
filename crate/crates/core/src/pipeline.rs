//! End-to-end runs: pretrain → fine-tune → evaluate → OOD, plus sampler
//! diagnostics. Every stage reads its inputs from and writes its outputs to an
//! output directory:
//!
//! ```text
//! out/config.txt
//! out/seed-<s>/ensemble.ckpt
//! out/seed-<s>/loss_log.tsv
//! out/seed-<s>/frac-<f>/member-<i>.ckpt
//! out/seed-<s>/frac-<f>/finetune_log.tsv
//! out/seed-<s>/hist-<method>-<size>-<in|ood>.tsv
//! out/eval.tsv, out/ood.tsv, out/diag.tsv
//! ```
//!
//! All randomness is derived from the run seed, so repeated runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::byol::TwinModel;
use crate::config::{DataSource, RunConfig};
use crate::data::{augment_pair, derive_seed, load_dataset, make_ood, minibatches, ClusterWorld, Dataset, Split};
use crate::diagnostics::{run_chain, QuadraticTarget, DIVERGENCE_BOUND};
use crate::downstream::{finetune, load_member, save_member, subset_labels, FineTuneConfig, FineTuned};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, entropy_histogram, nll, EvalReport, OodScore};
use crate::posterior::{bma_predict, entropies, load_ensemble, save_ensemble, PosteriorEnsemble};
use crate::sampler::{posterior_grad, should_yield, Sampler, SamplerConfig, Schedule};
use crate::tensor::Tensor;

/// All splits a run touches.
#[derive(Debug, Clone)]
pub struct Splits {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
    pub classes: usize,
}

/// Builds or loads the data named by the config. Generated splits depend only
/// on the data section, never on the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let splits = match &cfg.data {
        DataSource::Clusters {
            spec,
            pretrain_per_class,
            train_per_class,
            test_per_class,
        } => {
            let world = ClusterWorld::new(spec.clone())?;
            let mut pretrain = world.sample(*pretrain_per_class, derive_seed(spec.seed, 1), Split::Pretrain)?;
            pretrain.y = None;
            let train = world.sample(*train_per_class, derive_seed(spec.seed, 2), Split::Train)?;
            let test = world.sample(*test_per_class, derive_seed(spec.seed, 3), Split::Test)?;
            let ood = make_ood(&world, &train, cfg.eval.ood_mode, cfg.eval.ood_rows, derive_seed(spec.seed, 4))?;
            Splits {
                pretrain,
                train,
                test,
                ood,
                classes: spec.classes,
            }
        }
        DataSource::Files {
            pretrain,
            train,
            test,
            ood,
        } => {
            let train = load_dataset(train)?;
            let test = load_dataset(test)?;
            let classes = train.class_count().max(test.class_count());
            Splits {
                pretrain: load_dataset(pretrain)?,
                train,
                test,
                ood: load_dataset(ood)?,
                classes,
            }
        }
    };
    let width = cfg.arch.input_dim;
    for d in [&splits.pretrain, &splits.train, &splits.test, &splits.ood] {
        if d.input_dim() != width {
            return Err(Error::Data(format!(
                "{} split has width {}, the encoder expects {width}",
                d.split,
                d.input_dim()
            )));
        }
        if d.rows() == 0 {
            return Err(Error::Data(format!("{} split is empty", d.split)));
        }
    }
    splits.train.labels()?;
    splits.test.labels()?;
    if splits.classes < 2 {
        return Err(Error::Data("labeled splits need at least two classes".into()));
    }
    Ok(splits)
}

/// One row of the pretraining loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub noise_active: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub ensemble: PosteriorEnsemble,
    pub log: Vec<LossRecord>,
}

/// The training loop: minibatch, two augmented views, `∇Ũ`, one sampler
/// step on the online weights, EMA of the target, and a snapshot at each
/// cycle end. With `restarts > 1` the step budget is split across
/// independently initialized chains.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<PretrainOutput> {
    cfg.validate()?;
    let restarts = cfg.pretrain.restarts;
    let mut scfg: SamplerConfig = cfg.pretrain.sampler.clone();
    scfg.total_steps /= restarts;
    scfg.n_dataset = data.rows();
    scfg.validate()?;
    let mut ensemble = PosteriorEnsemble::new(cfg.arch.encoder_spec(), seed, cfg.digest());
    let mut log = Vec::with_capacity(cfg.pretrain.sampler.total_steps);

    for r in 0..restarts as u64 {
        let mut model = TwinModel::init(cfg.arch.clone(), cfg.tau, derive_seed(seed, 100 + r))?;
        let mut sampler = Sampler::new(scfg.clone(), model.online_dim(), derive_seed(seed, 200 + r))?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 300 + r));
        let batch_seed = derive_seed(seed, 400 + r);
        let mut theta = model.online_flat();
        let mut k = 0;
        let mut epoch = 0;
        while k < scfg.total_steps {
            for idx in minibatches(data.rows(), cfg.pretrain.batch, batch_seed, epoch) {
                if k == scfg.total_steps {
                    break;
                }
                let global = r as usize * scfg.total_steps + k;
                let x = data.x.select_rows(&idx);
                let (a, b) = augment_pair(&x, &cfg.augment, &mut aug_rng)?;
                let (loss, grad) = posterior_grad(&model, &a, &b, &scfg)
                    .map_err(|e| diverged(e, global))?;
                let info = sampler.step(&mut theta, &grad)?;
                if theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                    return Err(Error::Divergence { step: global });
                }
                model.set_online_flat(&theta)?;
                model.ema_update();
                log.push(LossRecord {
                    step: global,
                    lr: info.lr,
                    loss,
                    noise_active: info.noise_active,
                });
                if should_yield(&scfg, k) {
                    ensemble.collect(&model, global, global / scfg.cycle_len, loss, scfg.kind)?;
                }
                k += 1;
            }
            epoch += 1;
        }
    }
    let keep = cfg.pretrain.keep_last;
    if keep > 0 && ensemble.len() > keep {
        let n = ensemble.len();
        ensemble = ensemble.select(&(n - keep..n).collect::<Vec<_>>())?;
    }
    Ok(PretrainOutput { ensemble, log })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(crate::error::TensorError::NonFinite(_)) => Error::Divergence { step },
        other => other,
    }
}

/// Fine-tunes every snapshot on one shared stratified subset.
pub fn finetune_ensemble(
    cfg: &RunConfig,
    ensemble: &PosteriorEnsemble,
    train: &Dataset,
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(FineTuned, Vec<f64>)>> {
    let subset = subset_labels(train, fraction, derive_seed(seed, 500))?;
    let ft = FineTuneConfig {
        label_fraction: 1.0,
        ..cfg.finetune.clone()
    };
    ensemble
        .snapshots()
        .iter()
        .enumerate()
        .map(|(i, snap)| {
            let (m, log) = finetune(
                ensemble.encoder_spec(),
                snap,
                &subset,
                classes,
                &ft,
                derive_seed(seed, 600 + i as u64),
            )?;
            Ok((m, log.epoch_loss))
        })
        .collect()
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn frac_dir(out: &Path, seed: u64, fraction: f64) -> PathBuf {
    seed_dir(out, seed).join(format!("frac-{fraction}"))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(cfg)?;
    mkdir(out)?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed);
        mkdir(&dir)?;
        let run = pretrain(cfg, &splits.pretrain, seed)?;
        save_ensemble(&run.ensemble, &dir.join("ensemble.ckpt"))?;
        let mut text = format!("# config_digest\t{}\nstep\tlr\tloss\tnoise_active\n", cfg.digest());
        for r in &run.log {
            writeln!(text, "{}\t{:e}\t{:.9}\t{}", r.step, r.lr, r.loss, u8::from(r.noise_active)).unwrap();
        }
        write(&dir.join("loss_log.tsv"), &text)?;
    }
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = load_splits(cfg)?;
    for &seed in &cfg.seeds {
        let ensemble = load_ensemble(&seed_dir(out, seed).join("ensemble.ckpt"))?;
        for &fraction in &cfg.label_fractions {
            let dir = frac_dir(out, seed, fraction);
            mkdir(&dir)?;
            let members = finetune_ensemble(cfg, &ensemble, &splits.train, splits.classes, fraction, seed)?;
            let mut text = format!("# config_digest\t{}\nsnapshot\tepoch\tloss\n", cfg.digest());
            for (i, (member, losses)) in members.iter().enumerate() {
                let meta = [
                    ("config_digest".to_string(), cfg.digest()),
                    ("seed".into(), seed.to_string()),
                    ("snapshot".into(), i.to_string()),
                    ("label_fraction".into(), fraction.to_string()),
                ];
                save_member(ensemble.encoder_spec(), member, &meta, &dir.join(format!("member-{i}.ckpt")))?;
                for (e, l) in losses.iter().enumerate() {
                    writeln!(text, "{i}\t{e}\t{l:.9}").unwrap();
                }
            }
            write(&dir.join("finetune_log.tsv"), &text)?;
        }
    }
    Ok(())
}

fn load_members(out: &Path, seed: u64, fraction: f64) -> Result<(PosteriorEnsemble, Vec<FineTuned>)> {
    let ensemble = load_ensemble(&seed_dir(out, seed).join("ensemble.ckpt"))?;
    let dir = frac_dir(out, seed, fraction);
    let mut members = Vec::with_capacity(ensemble.len());
    for i in 0..ensemble.len() {
        let (spec, m) = load_member(&dir.join(format!("member-{i}.ckpt")))?;
        if &spec != ensemble.encoder_spec() {
            return Err(Error::Contract(format!("member {i} does not match the ensemble encoder")));
        }
        members.push(m);
    }
    Ok((ensemble, members))
}

fn ensemble_sizes(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let mut size = None;
    for &seed in &cfg.seeds {
        let n = load_ensemble(&seed_dir(out, seed).join("ensemble.ckpt"))?.len();
        if n == 0 {
            return Err(Error::Data(format!("seed {seed} collected no snapshots")));
        }
        if size.is_some_and(|s| s != n) {
            return Err(Error::Data("seeds collected different numbers of snapshots".into()));
        }
        size = Some(n);
    }
    Ok(size.expect("config has at least one seed"))
}

/// Accuracy and NLL on the test split, single-snapshot and BMA over every
/// ensemble prefix, one row per (method, fraction, size, metric).
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let splits = load_splits(cfg)?;
    let labels = splits.test.labels()?;
    let size = ensemble_sizes(cfg, out)?;
    let mut report = EvalReport::new(cfg.digest());
    let ens_method = format!("{}_ens", cfg.method);
    for &fraction in &cfg.label_fractions {
        // per_seed[s][metric]: single row then BMA prefixes 1..=S
        let mut acc = vec![Vec::new(); size + 1];
        let mut nl = vec![Vec::new(); size + 1];
        for &seed in &cfg.seeds {
            let (ens, members) = load_members(out, seed, fraction)?;
            let single = bma_predict(&ens.select(&[ens.len() - 1])?, &members[ens.len() - 1..], &splits.test.x, 1)?;
            acc[0].push(accuracy(&single, labels)?);
            nl[0].push(nll(&single, labels)?);
            for s in 1..=size {
                let p = bma_predict(&ens, &members, &splits.test.x, s)?;
                acc[s].push(accuracy(&p, labels)?);
                nl[s].push(nll(&p, labels)?);
            }
        }
        for s in 0..=size {
            let (method, n) = if s == 0 { (cfg.method.as_str(), 1) } else { (ens_method.as_str(), s) };
            report.push(method, fraction, n, "accuracy", acc[s].clone())?;
            report.push(method, fraction, n, "nll", nl[s].clone())?;
        }
    }
    write(&out.join("eval.tsv"), &report.to_tsv())?;
    Ok(report)
}

fn ood_scores(p: &Tensor, score: OodScore) -> Result<Vec<f64>> {
    match score {
        OodScore::Entropy => entropies(p),
        OodScore::MaxSoftmax => {
            let c = p.cols();
            Ok(p.data()
                .chunks(c)
                .map(|row| 1.0 - row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect())
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// OOD detection with OOD as the positive class, using the members fine-tuned
/// on the largest label fraction. Writes entropy histograms per seed.
pub fn cmd_ood(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let splits = load_splits(cfg)?;
    let labels = splits.test.labels()?;
    let size = ensemble_sizes(cfg, out)?;
    let fraction = cfg.label_fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (0.0, (splits.classes as f64).ln());
    let ens_method = format!("{}_ens", cfg.method);
    let mut report = EvalReport::new(cfg.digest());
    let metrics = ["nll", "auroc", "entropy_in", "entropy_ood"];
    let mut values = vec![vec![Vec::new(); metrics.len()]; size + 1];
    for &seed in &cfg.seeds {
        let (ens, members) = load_members(out, seed, fraction)?;
        let dir = seed_dir(out, seed);
        for s in 0..=size {
            let (p_in, p_ood) = if s == 0 {
                let last = ens.select(&[ens.len() - 1])?;
                let m = &members[ens.len() - 1..];
                (bma_predict(&last, m, &splits.test.x, 1)?, bma_predict(&last, m, &splits.ood.x, 1)?)
            } else {
                (bma_predict(&ens, &members, &splits.test.x, s)?, bma_predict(&ens, &members, &splits.ood.x, s)?)
            };
            let (h_in, h_ood) = (entropies(&p_in)?, entropies(&p_ood)?);
            let score_in = ood_scores(&p_in, cfg.eval.ood_score)?;
            let score_ood = ood_scores(&p_ood, cfg.eval.ood_score)?;
            let row = [nll(&p_in, labels)?, auroc(&score_ood, &score_in)?, mean(&h_in), mean(&h_ood)];
            for (slot, v) in values[s].iter_mut().zip(row) {
                slot.push(v);
            }
            let (method, n) = if s == 0 { (cfg.method.as_str(), 1) } else { (ens_method.as_str(), s) };
            for (tag, h) in [("in", &h_in), ("ood", &h_ood)] {
                let hist = entropy_histogram(h, cfg.eval.bins, range)?;
                let text = format!("# config_digest\t{}\n{}", cfg.digest(), hist.to_tsv());
                write(&dir.join(format!("hist-{method}-{n}-{tag}.tsv")), &text)?;
            }
        }
    }
    for (s, per_metric) in values.into_iter().enumerate() {
        let (method, n) = if s == 0 { (cfg.method.as_str(), 1) } else { (ens_method.as_str(), s) };
        for (metric, v) in metrics.iter().zip(per_metric) {
            report.push(method, fraction, n, metric, v)?;
        }
    }
    write(&out.join("ood.tsv"), &report.to_tsv())?;
    Ok(report)
}

/// Runs the configured diagnostic chain once per seed on the isotropic
/// quadratic and tabulates moments against the analytic variance `T`.
pub fn cmd_sample_diag(cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = &cfg.diag;
    let mut scfg = SamplerConfig::new(d.kind);
    scfg.lr0 = d.lr;
    scfg.beta = d.beta;
    scfg.schedule = Schedule::Constant;
    scfg.noise_start_frac = 0.0;
    let target = QuadraticTarget::isotropic(d.dim, d.temperature);
    let mut text = format!(
        "# config_digest\t{}\nseed\tcoord\tsamples\tmean\tvariance\ttarget_variance\tlag1_autocorr\n",
        cfg.digest()
    );
    for &seed in &cfg.seeds {
        let stats = run_chain(&scfg, &target, d.steps, d.burn_in, seed)?;
        for c in 0..d.dim {
            writeln!(
                text,
                "{seed}\t{c}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
                stats.sample_count, stats.mean[c], stats.variance[c], d.temperature, stats.lag1_autocorr[c]
            )
            .unwrap();
        }
    }
    mkdir(out)?;
    write(&out.join("diag.tsv"), &text)?;
    Ok(text)
}
