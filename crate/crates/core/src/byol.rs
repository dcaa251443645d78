//! Twin-network BYOL model.
//!
//! The online network is encoder → projector → predictor; the target network
//! is an encoder → projector pair that trails the online weights through an
//! exponential moving average and never receives gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result, TensorError};
use crate::params::{Activation, MlpSpec, ParamVector};
use crate::tensor::Tensor;

/// Layer widths of the three MLP components.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinArch {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub proj_dim: usize,
    pub predictor_hidden: usize,
    pub activation: Activation,
}

impl Default for TwinArch {
    fn default() -> Self {
        Self {
            input_dim: 16,
            encoder_hidden: vec![64, 64],
            embed_dim: 16,
            projector_hidden: 32,
            proj_dim: 8,
            predictor_hidden: 32,
            activation: Activation::Tanh,
        }
    }
}

impl TwinArch {
    pub fn encoder_spec(&self) -> MlpSpec {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.embed_dim);
        MlpSpec::new(widths, self.activation, true)
    }

    pub fn projector_spec(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.embed_dim, self.projector_hidden, self.proj_dim],
            self.activation,
            false,
        )
    }

    pub fn predictor_spec(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.proj_dim, self.predictor_hidden, self.proj_dim],
            self.activation,
            false,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for spec in [self.encoder_spec(), self.projector_spec(), self.predictor_spec()] {
            spec.validate().map_err(Error::Config)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNet {
    pub encoder: ParamVector,
    pub projector: ParamVector,
    pub predictor: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetNet {
    pub encoder: ParamVector,
    pub projector: ParamVector,
}

/// Online parameters θ, target parameters ξ and the EMA rate τ.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    arch: TwinArch,
    pub online: OnlineNet,
    pub target: TargetNet,
    tau: f64,
}

/// Leaves and loss node of one recorded BYOL loss.
#[derive(Debug)]
pub struct LossGraph {
    pub loss: NodeId,
    pub online: Vec<NodeId>,
    pub target: Vec<NodeId>,
}

struct Leaves {
    encoder: Vec<NodeId>,
    projector: Vec<NodeId>,
    predictor: Vec<NodeId>,
    target_encoder: Vec<NodeId>,
    target_projector: Vec<NodeId>,
}

impl TwinModel {
    /// Seeded initialization; the target starts as an exact copy of the online
    /// encoder and projector.
    pub fn init(arch: TwinArch, tau: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = arch.encoder_spec().init("encoder", &mut rng);
        let projector = arch.projector_spec().init("projector", &mut rng);
        let predictor = arch.predictor_spec().init("predictor", &mut rng);
        let target = TargetNet {
            encoder: encoder.clone(),
            projector: projector.clone(),
        };
        Ok(Self {
            arch,
            online: OnlineNet {
                encoder,
                projector,
                predictor,
            },
            target,
            tau,
        })
    }

    pub fn arch(&self) -> &TwinArch {
        &self.arch
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn encoder_dim(&self) -> usize {
        self.online.encoder.total_dim()
    }

    pub fn online_dim(&self) -> usize {
        self.online.encoder.total_dim()
            + self.online.projector.total_dim()
            + self.online.predictor.total_dim()
    }

    /// θ as one flat vector laid out encoder | projector | predictor.
    pub fn online_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.online_dim());
        flat.extend_from_slice(self.online.encoder.values());
        flat.extend_from_slice(self.online.projector.values());
        flat.extend_from_slice(self.online.predictor.values());
        flat
    }

    pub fn set_online_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.online_dim() {
            return Err(TensorError::shape(
                "set_online_flat",
                format!("expected {} values, got {}", self.online_dim(), flat.len()),
            )
            .into());
        }
        let (e, rest) = flat.split_at(self.online.encoder.total_dim());
        let (p, q) = rest.split_at(self.online.projector.total_dim());
        self.online.encoder.values_mut().copy_from_slice(e);
        self.online.projector.values_mut().copy_from_slice(p);
        self.online.predictor.values_mut().copy_from_slice(q);
        Ok(())
    }

    fn check_views(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        let ok = |t: &Tensor| matches!(t.shape(), [n, d] if *n >= 1 && *d == self.arch.input_dim);
        if !ok(a) || !ok(b) || a.shape() != b.shape() {
            return Err(TensorError::shape(
                "byol_loss",
                format!(
                    "views {:?} and {:?} for input width {}",
                    a.shape(),
                    b.shape(),
                    self.arch.input_dim
                ),
            )
            .into());
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> Leaves {
        let a = &self.arch;
        Leaves {
            encoder: a.encoder_spec().register(tape, &self.online.encoder, true),
            projector: a.projector_spec().register(tape, &self.online.projector, true),
            predictor: a.predictor_spec().register(tape, &self.online.predictor, true),
            target_encoder: a.encoder_spec().register(tape, &self.target.encoder, false),
            target_projector: a.projector_spec().register(tape, &self.target.projector, false),
        }
    }

    /// `mean_i ‖q̄ᵢ − ȳᵢ‖²` with q from the online branch on `online_view` and y
    /// from the target branch on `target_view`.
    fn direction(
        &self,
        tape: &mut Tape,
        leaves: &Leaves,
        online_view: NodeId,
        target_view: NodeId,
    ) -> Result<NodeId, TensorError> {
        let a = &self.arch;
        let z = a.encoder_spec().forward_tape(tape, &leaves.encoder, online_view)?;
        let y = a.projector_spec().forward_tape(tape, &leaves.projector, z)?;
        let q = a.predictor_spec().forward_tape(tape, &leaves.predictor, y)?;
        let zt = a.encoder_spec().forward_tape(tape, &leaves.target_encoder, target_view)?;
        let yt = a.projector_spec().forward_tape(tape, &leaves.target_projector, zt)?;
        let qn = tape.l2_normalize(q)?;
        let ytn = tape.l2_normalize(yt)?;
        tape.mse(qn, ytn)
    }

    /// Records the BYOL loss on `tape`. With `symmetrized`, the swapped-view
    /// term is added to the one-directional loss.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        view_a: &Tensor,
        view_b: &Tensor,
        symmetrized: bool,
    ) -> Result<LossGraph> {
        self.check_views(view_a, view_b)?;
        let leaves = self.register(tape);
        let a = tape.constant(view_a.clone());
        let b = tape.constant(view_b.clone());
        let mut loss = self.direction(tape, &leaves, a, b)?;
        if symmetrized {
            let swapped = self.direction(tape, &leaves, b, a)?;
            loss = tape.add(loss, swapped)?;
        }
        let mut online = leaves.encoder;
        online.extend(leaves.projector);
        online.extend(leaves.predictor);
        let mut target = leaves.target_encoder;
        target.extend(leaves.target_projector);
        Ok(LossGraph {
            loss,
            online,
            target,
        })
    }

    pub fn loss_one_direction(&self, view_a: &Tensor, view_b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let g = self.record_loss(&mut tape, view_a, view_b, false)?;
        Ok(tape.value(g.loss).data()[0])
    }

    pub fn loss_symmetrized(&self, view_a: &Tensor, view_b: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let g = self.record_loss(&mut tape, view_a, view_b, true)?;
        Ok(tape.value(g.loss).data()[0])
    }

    /// Symmetrized loss and its gradient with respect to θ, flattened like
    /// [`TwinModel::online_flat`].
    pub fn loss_and_grad(&self, view_a: &Tensor, view_b: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let graph = self.record_loss(&mut tape, view_a, view_b, true)?;
        let grads = tape.backward(graph.loss)?;
        let mut flat = Vec::with_capacity(self.online_dim());
        for id in &graph.online {
            match grads.get(*id) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(*id).len())),
            }
        }
        Ok((tape.value(graph.loss).data()[0], flat))
    }

    /// `ξ ← τξ + (1−τ)θ` on the encoder and projector.
    pub fn ema_update(&mut self) {
        let tau = self.tau;
        let pairs = [
            (&mut self.target.encoder, &self.online.encoder),
            (&mut self.target.projector, &self.online.projector),
        ];
        for (target, online) in pairs {
            for (xi, theta) in target.values_mut().iter_mut().zip(online.values()) {
                *xi = tau * *xi + (1.0 - tau) * theta;
            }
        }
    }

    /// Encoder output φ_θ(x) for a `(N, input_dim)` batch.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.arch.encoder_spec().forward(&self.online.encoder, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    fn small_arch() -> TwinArch {
        TwinArch {
            input_dim: 3,
            encoder_hidden: vec![5],
            embed_dim: 4,
            projector_hidden: 5,
            proj_dim: 3,
            predictor_hidden: 4,
            activation: Activation::Tanh,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Independent per-row evaluation of 2 − 2·cos(q, y).
    fn cosine_form(model: &TwinModel, a: &Tensor, b: &Tensor) -> f64 {
        let arch = model.arch();
        let q = arch.predictor_spec().forward(
            &model.online.predictor,
            &arch
                .projector_spec()
                .forward(&model.online.projector, &model.embed(a).unwrap())
                .unwrap(),
        )
        .unwrap();
        let zt = arch.encoder_spec().forward(&model.target.encoder, b).unwrap();
        let y = arch.projector_spec().forward(&model.target.projector, &zt).unwrap();
        let mut total = 0.0;
        for i in 0..a.rows() {
            let (qi, yi) = (q.row(i), y.row(i));
            let dot: f64 = qi.iter().zip(yi).map(|(x, y)| x * y).sum();
            let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = yi.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += 2.0 - 2.0 * dot / (nq * ny);
        }
        total / a.rows() as f64
    }

    #[test]
    fn init_copies_online_into_target() {
        let m = TwinModel::init(TwinArch::default(), 0.99, 4).unwrap();
        assert_eq!(m.target.encoder, m.online.encoder);
        assert_eq!(m.target.projector, m.online.projector);
        assert_eq!(m.tau(), 0.99);
        let again = TwinModel::init(TwinArch::default(), 0.99, 4).unwrap();
        assert_eq!(m, again);
        let other = TwinModel::init(TwinArch::default(), 0.99, 5).unwrap();
        assert_ne!(m.online_flat(), other.online_flat());
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut arch = TwinArch::default();
        arch.proj_dim = 0;
        assert!(matches!(TwinModel::init(arch, 0.9, 0), Err(Error::Config(_))));
        assert!(TwinModel::init(TwinArch::default(), 1.5, 0).is_err());
    }

    #[test]
    fn mse_form_matches_cosine_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..50 {
            let mut m = TwinModel::init(small_arch(), 0.9, seed).unwrap();
            // decouple target from online so the loss is not trivially small
            let other = TwinModel::init(small_arch(), 0.9, seed + 1000).unwrap();
            m.target = other.target;
            let (a, b) = (batch(&mut rng, 6, 3), batch(&mut rng, 6, 3));
            let mse = m.loss_one_direction(&a, &b).unwrap();
            assert!((mse - cosine_form(&m, &a, &b)).abs() < 1e-9);
            assert!((0.0..=4.0).contains(&mse));
        }
    }

    #[test]
    fn symmetrized_is_sum_of_both_directions_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = TwinModel::init(small_arch(), 0.9, 1).unwrap();
        m.target = TwinModel::init(small_arch(), 0.9, 2).unwrap().target;
        let (a, b) = (batch(&mut rng, 5, 3), batch(&mut rng, 5, 3));
        let sym = m.loss_symmetrized(&a, &b).unwrap();
        let parts = m.loss_one_direction(&a, &b).unwrap() + m.loss_one_direction(&b, &a).unwrap();
        assert!((sym - parts).abs() < 1e-12);
        assert!((sym - m.loss_symmetrized(&b, &a).unwrap()).abs() < 1e-12);
        assert!((0.0..=8.0).contains(&sym));
    }

    fn normalized_mse(q: Vec<f64>, y: Vec<f64>) -> f64 {
        let mut tape = Tape::new();
        let d = q.len();
        let q = tape.constant(Tensor::matrix(1, d, q).unwrap());
        let y = tape.constant(Tensor::matrix(1, d, y).unwrap());
        let (qn, yn) = (tape.l2_normalize(q).unwrap(), tape.l2_normalize(y).unwrap());
        let l = tape.mse(qn, yn).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn per_sample_loss_anchors() {
        assert_eq!(normalized_mse(vec![2.0, 0.0], vec![5.0, 0.0]), 0.0);
        assert_eq!(normalized_mse(vec![1.0, 0.0], vec![0.0, 3.0]), 2.0);
        assert_eq!(normalized_mse(vec![0.0, 2.0], vec![0.0, -1.0]), 4.0);
    }

    #[test]
    fn identical_views_with_target_equal_online_and_identity_predictor() {
        // With a linear identity predictor and ξ = θ, q = y on equal views.
        let arch = TwinArch {
            activation: Activation::Relu,
            ..small_arch()
        };
        let mut m = TwinModel::init(arch, 0.9, 3).unwrap();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let mut pred = ParamVector::new();
        for l in 0..2 {
            pred.push(format!("predictor.{l}.weight"), Tensor::matrix(3, 3, eye.clone()).unwrap())
                .unwrap();
            pred.push(format!("predictor.{l}.bias"), Tensor::zeros(vec![3])).unwrap();
        }
        m.arch.predictor_hidden = 3;
        m.online.predictor = pred;
        // relu between predictor layers is the identity on nonnegative projector outputs
        let abs: Vec<f64> = m.online.projector.values().iter().map(|v| v.abs()).collect();
        m.online.projector = m.online.projector.unflatten(&abs).unwrap();
        m.target.projector = m.online.projector.clone();
        let x = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.9, 1.0, 0.5, -0.7]).unwrap();
        let loss = m.loss_symmetrized(&x, &x).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn gradients_flow_only_into_online_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = TwinModel::init(small_arch(), 0.9, 7).unwrap();
        let (a, b) = (batch(&mut rng, 4, 3), batch(&mut rng, 4, 3));
        let mut tape = Tape::new();
        let g = m.record_loss(&mut tape, &a, &b, true).unwrap();
        let grads = tape.backward(g.loss).unwrap();
        assert!(g.target.iter().all(|id| grads.get(*id).is_none()));
        assert!(g.online.iter().any(|id| grads.get(*id).is_some()));
    }

    #[test]
    fn symmetrized_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = TwinModel::init(small_arch(), 0.9, 8).unwrap();
        m.target = TwinModel::init(small_arch(), 0.9, 9).unwrap().target;
        let (a, b) = (batch(&mut rng, 4, 3), batch(&mut rng, 4, 3));
        let theta = m.online_flat();
        let err = grad_check(
            |p: &[f64]| {
                let mut probe = m.clone();
                probe.set_online_flat(p)?;
                probe.loss_and_grad(&a, &b)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batch_size_mismatch_is_a_dimension_error() {
        let m = TwinModel::init(small_arch(), 0.9, 0).unwrap();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(
            m.loss_symmetrized(&a, &b),
            Err(Error::Tensor(TensorError::Shape { .. }))
        ));
    }

    #[test]
    fn ema_endpoints_and_arithmetic() {
        let mut m = TwinModel::init(small_arch(), 1.0, 0).unwrap();
        m.target = TwinModel::init(small_arch(), 1.0, 1).unwrap().target;
        let before = m.target.clone();
        m.ema_update();
        assert_eq!(m.target, before);

        m.tau = 0.0;
        m.ema_update();
        assert_eq!(m.target.encoder, m.online.encoder);
        assert_eq!(m.target.projector, m.online.projector);

        m.tau = 0.99;
        m.target.encoder.values_mut()[0] = 1.0;
        m.online.encoder.values_mut()[0] = 0.0;
        m.ema_update();
        assert_eq!(m.target.encoder.values()[0], 0.99);
    }

    #[test]
    fn ema_is_a_convex_combination() {
        let mut m = TwinModel::init(small_arch(), 0.7, 0).unwrap();
        m.target = TwinModel::init(small_arch(), 0.7, 1).unwrap().target;
        let before = m.target.clone();
        m.ema_update();
        let check = |new: &ParamVector, old: &ParamVector, online: &ParamVector| {
            for ((n, o), t) in new.values().iter().zip(old.values()).zip(online.values()) {
                assert!(*n >= o.min(*t) && *n <= o.max(*t));
            }
        };
        check(&m.target.encoder, &before.encoder, &m.online.encoder);
        check(&m.target.projector, &before.projector, &m.online.projector);
    }

    #[test]
    fn embedding_properties() {
        let m = TwinModel::init(TwinArch::default(), 0.99, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = batch(&mut rng, 8, 16);
        let z = m.embed(&x).unwrap();
        assert_eq!(z.shape(), &[8, 16]);
        let single = m.embed(&x.select_rows(&[5])).unwrap();
        assert_eq!(single.row(0), z.row(5));

        let mut zero = m.clone();
        zero.online.encoder.values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(zero.embed(&x).unwrap().data().iter().all(|v| *v == 0.0));

        for seed in 0..10 {
            let arch = TwinArch {
                input_dim: 1 + rng.gen_range(0..6),
                encoder_hidden: vec![1 + rng.gen_range(0..6)],
                embed_dim: 1 + rng.gen_range(0..6),
                ..small_arch()
            };
            let m = TwinModel::init(arch.clone(), 0.9, seed).unwrap();
            let x = batch(&mut rng, 3, arch.input_dim);
            assert_eq!(m.embed(&x).unwrap().shape(), &[3, arch.embed_dim]);
        }
        assert!(m.embed(&batch(&mut rng, 2, 5)).is_err());
    }
}
