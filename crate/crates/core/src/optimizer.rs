//! Residual MSE loss, step-decay learning rate, gradient clipping and
//! momentum SGD, plus the epoch loop tying them together.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{Gradients, Network};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between tenfold learning-rate decays.
    pub step: usize,
    pub momentum_rho: f64,
    pub clip_theta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            step: 10,
            momentum_rho: 0.9,
            clip_theta: 0.1,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(
                "train.lr0",
                format!("must be positive, got {}", self.lr0),
            ));
        }
        if self.step == 0 {
            return Err(Error::config("train.step", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum_rho) {
            return Err(Error::config(
                "train.momentum_rho",
                format!("must lie in [0, 1), got {}", self.momentum_rho),
            ));
        }
        if !(self.clip_theta > 0.0 && self.clip_theta.is_finite()) {
            return Err(Error::config(
                "train.clip_theta",
                format!("must be positive, got {}", self.clip_theta),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Sum of squared differences of one sample and its gradient scaled by
/// `2 · norm`.
fn sse_and_grad<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    norm: f64,
) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {} vs target {}",
            pred.shape(),
            target.shape()
        )));
    }
    let scale = T::of(2.0 * norm);
    let mut sse = 0f64;
    let mut grad = Tensor4::zeros(pred.shape());
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let diff = p - t;
        let d = diff.to_f64_lossless();
        sse += d * d;
        *g = scale * diff;
    }
    Ok((sse, grad))
}

/// Mean squared error over every voxel of every sample in the batch:
/// `loss = Σ (pred − target)² / (n·V)` and `∂loss/∂pred = 2(pred − target)/(n·V)`.
pub fn mse_residual_loss<T: Real>(
    pred: &[Tensor4<T>],
    target: &[Tensor4<T>],
) -> Result<(f64, Vec<Tensor4<T>>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let voxels = pred[0].shape().len();
    let norm = 1.0 / (pred.len() * voxels) as f64;
    let mut loss = 0f64;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        if p.shape().len() != voxels {
            return Err(Error::ShapeMismatch("batch samples differ in size".into()));
        }
        let (sse, g) = sse_and_grad(p, t, norm)?;
        loss += sse;
        grads.push(g);
    }
    Ok((loss * norm, grads))
}

/// Staircase decay `lr0 · 0.1^⌊epoch / step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = (epoch / cfg.step.max(1)) as i32;
    cfg.lr0 * 0.1f64.powi(decays)
}

/// Clamp every component of `values` into `[-theta, theta]`.
pub fn clip_values<T: Real>(values: &mut [T], theta: T) {
    for v in values {
        *v = v.max(-theta).min(theta);
    }
}

pub fn clip_gradients<T: Real>(grads: &mut Gradients<T>, theta: f64) {
    let theta = T::of(theta);
    for s in grads.slices_mut() {
        clip_values(s, theta);
    }
}

/// Per-parameter velocity for momentum SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
    pub epoch: usize,
    pub iteration: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        OptimizerState {
            velocity: net.params().map(|p| vec![T::zero(); p.len()]).collect(),
            epoch: 0,
            iteration: 0,
        }
    }
}

/// One momentum step on a flat parameter grid: `v ← ρv + g; θ ← θ − lr·v`.
pub fn momentum_update<T: Real>(params: &mut [T], grad: &[T], velocity: &mut [T], lr: T, rho: T) {
    for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = rho * *v + g;
        *p = *p - lr * *v;
    }
}

pub fn sgd_momentum_step<T: Real>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    rho: f64,
) {
    let (lr, rho) = (T::of(lr), T::of(rho));
    for ((p, g), v) in net
        .params_mut()
        .zip(grads.slices())
        .zip(state.velocity.iter_mut())
    {
        debug_assert_eq!(p.len(), v.len());
        momentum_update(p, g, v, lr, rho);
    }
    state.iteration += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Largest gradient magnitude after clipping.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterationRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// CSV with header `epoch,loss,lr,seconds`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for rec in &self.epochs {
            w.serialize(rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

/// Loss and parameter gradients of one batch. Residual networks regress
/// `f(x)` on the stored residual; plain networks regress `f(x)` on `x + r`.
pub fn batch_loss_and_grads(
    net: &Network<f32>,
    batch: &[&crate::dataset::SamplePair],
) -> Result<(f64, Gradients<f32>)> {
    let voxels = batch[0].input.shape().len();
    let norm = 1.0 / (batch.len() * voxels) as f64;
    let residual = net.config().residual;
    let per_sample: Vec<Result<(f64, Gradients<f32>)>> = batch
        .par_iter()
        .map(|pair| {
            let (_, cache) = net.forward(&pair.input)?;
            let target = if residual {
                pair.residual.clone()
            } else {
                let mut t = pair.input.clone();
                for (v, &r) in t.data_mut().iter_mut().zip(pair.residual.data()) {
                    *v += r;
                }
                t
            };
            let (sse, d_head) = sse_and_grad(&cache.head, &target, norm)?;
            let grads = net.parameter_gradients(&cache, &d_head)?;
            Ok((sse, grads))
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut sse = 0f64;
    for r in per_sample {
        let (s, g) = r?;
        sse += s;
        total.accumulate(&g);
    }
    Ok((sse * norm, total))
}

pub fn train(net: &mut Network<f32>, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    let mut state = OptimizerState::new(net);
    train_with(net, ds, cfg, &mut state, |_| {})
}

/// Run `cfg.epochs` epochs of clipped momentum SGD, calling `observe` after
/// every parameter update.
pub fn train_with(
    net: &mut Network<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState<f32>,
    mut observe: impl FnMut(&IterationRecord),
) -> Result<TrainHistory> {
    if ds.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    let mut history = TrainHistory::default();
    for _ in 0..cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_at(epoch, cfg);
        let start = Instant::now();
        let order = ds.epoch_order(epoch);
        let mut loss_sum = 0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &ds.pairs[i]).collect();
            let (loss, mut grads) = batch_loss_and_grads(net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: state.iteration,
                    loss,
                });
            }
            clip_gradients(&mut grads, cfg.clip_theta);
            let max_abs_grad = f64::from(grads.max_abs());
            debug_assert!(max_abs_grad <= cfg.clip_theta as f32 as f64);
            sgd_momentum_step(net, &grads, state, lr, cfg.momentum_rho);
            let record = IterationRecord {
                epoch,
                iteration: state.iteration,
                loss,
                lr,
                max_abs_grad,
            };
            observe(&record);
            history.iterations.push(record);
            loss_sum += loss;
            batches += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.6e} lr {lr:e}",
            loss_sum / batches as f64
        );
        state.epoch += 1;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_training_set, CropSpec, SamplePair};
    use crate::network::NetworkConfig;
    use crate::synthetic::textured_volume;
    use crate::tensor::{Dims, Shape4};
    use crate::volume::{DType, Volume};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_vec(
            shape,
            (0..shape.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn loss_of_equal_and_offset_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape4::new(1, Dims::new(2, 3, 4));
        let a: Vec<_> = (0..3).map(|_| random(shape, &mut rng)).collect();
        let (loss, grads) = mse_residual_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.max_abs() == 0.0));

        let b: Vec<_> = a.iter().map(|t| t.map(|v| v - 2.0)).collect();
        let (loss, grads) = mse_residual_loss(&a, &b).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
        let expected = 4.0 / (3 * shape.len()) as f64;
        assert!(grads
            .iter()
            .flat_map(|g| g.data())
            .all(|&g| (g - expected).abs() < 1e-15));
    }

    #[test]
    fn loss_rejects_mismatched_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(Shape4::new(1, Dims::cube(2)), &mut rng);
        let b = random(Shape4::new(1, Dims::cube(3)), &mut rng);
        assert!(mse_residual_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).is_err());
        assert!(mse_residual_loss(&[a.clone(), a.clone()], std::slice::from_ref(&a)).is_err());
        assert!(mse_residual_loss::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape4::new(1, Dims::new(3, 4, 5));
        let pred: Vec<_> = (0..2).map(|_| random(shape, &mut rng)).collect();
        let target: Vec<_> = (0..2).map(|_| random(shape, &mut rng)).collect();
        let (_, grads) = mse_residual_loss(&pred, &target).unwrap();
        // the loss is quadratic in each entry, so the central difference has
        // no truncation error and a wide step only reduces rounding
        let eps = 1e-3;
        for _ in 0..50 {
            let s = rng.random_range(0..2);
            let i = rng.random_range(0..shape.len());
            let mut p = pred.clone();
            p[s].data_mut()[i] += eps;
            let (plus, _) = mse_residual_loss(&p, &target).unwrap();
            p[s].data_mut()[i] -= 2.0 * eps;
            let (minus, _) = mse_residual_loss(&p, &target).unwrap();
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[s].data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
            assert!(rel <= 1e-8, "entry {s}/{i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn staircase_learning_rate() {
        let c = cfg();
        for (epoch, lr) in [
            (0, 0.1),
            (9, 0.1),
            (10, 0.01),
            (19, 0.01),
            (20, 0.001),
            (25, 0.001),
        ] {
            let got = lr_at(epoch, &c);
            assert!((got - lr).abs() <= 1e-15 * lr, "epoch {epoch}: {got}");
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = [0.5f64, -0.2, 0.05, -0.1, 0.1];
        clip_values(&mut g, 0.1);
        assert_eq!(g, [0.1, -0.1, 0.05, -0.1, 0.1]);
    }

    #[test]
    fn momentum_hand_trace() {
        let (mut p, mut v) = ([0.0f64], [0.0f64]);
        momentum_update(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert_eq!(v[0], 1.0);
        assert_eq!(p[0], -0.1);
        momentum_update(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert_eq!(v[0], 1.9);
        assert_eq!(p[0], -0.1 - 0.1 * 1.9);
        // −0.29 is not a sum of these two doubles; the two-step result is
        // the nearest neighbour of it
        assert!((p[0] - -0.29).abs() <= f64::EPSILON * 0.29);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let (mut p, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
        for _ in 0..3 {
            let before = p;
            momentum_update(&mut p, &[0.5, -0.25], &mut v, 0.1, 0.0);
            assert_eq!(p, [before[0] - 0.1 * 0.5, before[1] - 0.1 * -0.25]);
        }
    }

    #[test]
    fn zero_gradient_decays_velocity_geometrically() {
        let (lr, rho, v0) = (0.1f64, 0.9f64, 2.0f64);
        let (mut p, mut v) = ([3.0f64], [v0]);
        let mut series = 0.0;
        for k in 1..=8 {
            momentum_update(&mut p, &[0.0], &mut v, lr, rho);
            series += rho.powi(k);
            let expected = 3.0 - lr * v0 * series;
            assert!(
                (p[0] - expected).abs() < 1e-14,
                "step {k}: {} vs {expected}",
                p[0]
            );
        }
    }

    #[test]
    fn velocity_mirrors_parameters() {
        let cfg = NetworkConfig {
            depth: 3,
            channels: 2,
            kernel: 3,
            residual: true,
        };
        let net = Network::<f32>::zeros(cfg).unwrap();
        let state = OptimizerState::new(&net);
        let shapes: Vec<usize> = net.params().map(<[f32]>::len).collect();
        assert_eq!(
            state.velocity.iter().map(Vec::len).collect::<Vec<_>>(),
            shapes
        );
        assert!(state.velocity.iter().flatten().all(|&v| v == 0.0));
    }

    fn tiny_dataset() -> crate::dataset::Dataset {
        let vol = textured_volume(Dims::cube(16), 5);
        build_training_set(
            &[vol],
            &[2],
            &CropSpec {
                i_sub: 8,
                stride: 8,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_network_untouched() {
        let ds = tiny_dataset();
        let cfg_net = NetworkConfig {
            depth: 2,
            channels: 2,
            kernel: 3,
            residual: true,
        };
        let mut net = crate::network::init_network(cfg_net, 1).unwrap();
        let before = net.clone();
        let history = train(&mut net, &ds, &TrainConfig { epochs: 0, ..cfg() }).unwrap();
        assert_eq!(net, before);
        assert!(history.epochs.is_empty() && history.iterations.is_empty());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let ds = crate::dataset::Dataset {
            pairs: vec![],
            seed: 0,
            i_sub: 8,
        };
        let mut net = crate::network::init_network(NetworkConfig::default(), 1).unwrap();
        assert!(matches!(train(&mut net, &ds, &cfg()), Err(Error::Empty(_))));
    }

    #[test]
    fn non_finite_loss_names_epoch_and_iteration() {
        let ds = tiny_dataset();
        let cfg_net = NetworkConfig {
            depth: 2,
            channels: 1,
            kernel: 1,
            residual: true,
        };
        let mut net = crate::network::init_network(cfg_net, 1).unwrap();
        net.layers_mut()[1].bias[0] = f32::NAN;
        match train(&mut net, &ds, &TrainConfig { epochs: 1, ..cfg() }) {
            Err(Error::NonFiniteLoss {
                epoch, iteration, ..
            }) => assert_eq!((epoch, iteration), (0, 0)),
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn training_loss_equals_volume_mse_of_reconstruction() {
        let ds = tiny_dataset();
        let cfg_net = NetworkConfig {
            depth: 3,
            channels: 4,
            kernel: 3,
            residual: true,
        };
        let net = Network::<f32>::init_gaussian(cfg_net, 2, 0.05).unwrap();
        let pair: &SamplePair = &ds.pairs[0];
        let (loss, _) = batch_loss_and_grads(&net, &[pair]).unwrap();

        let (y, _) = net.forward(&pair.input).unwrap();
        let dims = pair.input.spatial();
        let truth: Vec<f32> = pair
            .input
            .data()
            .iter()
            .zip(pair.residual.data())
            .map(|(x, r)| x + r)
            .collect();
        let recon = Volume::new(dims, DType::F32, 1.0, y.into_vec()).unwrap();
        let truth = Volume::new(dims, DType::F32, 1.0, truth).unwrap();
        let mse = crate::metrics::mse3d(&recon, &truth).unwrap();
        assert!((loss - mse).abs() <= 1e-6 * mse, "{loss} vs {mse}");
    }

    #[test]
    fn clipping_holds_every_iteration() {
        let ds = tiny_dataset();
        let cfg_net = NetworkConfig {
            depth: 3,
            channels: 4,
            kernel: 3,
            residual: true,
        };
        let mut net = Network::<f32>::init_gaussian(cfg_net, 2, 0.3).unwrap();
        let c = TrainConfig {
            epochs: 2,
            batch_size: 2,
            clip_theta: 1e-3,
            ..cfg()
        };
        let mut state = OptimizerState::new(&net);
        let mut seen = 0;
        train_with(&mut net, &ds, &c, &mut state, |rec| {
            seen += 1;
            assert!(rec.max_abs_grad <= f64::from(1e-3_f32));
        })
        .unwrap();
        assert_eq!(seen, 2 * ds.batches_per_epoch(2));
        assert_eq!(state.iteration, seen);
        assert_eq!(state.epoch, 2);
    }

    #[test]
    fn config_validation_names_keys() {
        let err = |c: TrainConfig| c.validate().unwrap_err().to_string();
        assert!(err(TrainConfig { lr0: 0.0, ..cfg() }).contains("train.lr0"));
        assert!(err(TrainConfig { step: 0, ..cfg() }).contains("train.step"));
        assert!(err(TrainConfig {
            momentum_rho: 1.0,
            ..cfg()
        })
        .contains("train.momentum_rho"));
        assert!(err(TrainConfig {
            clip_theta: -1.0,
            ..cfg()
        })
        .contains("train.clip_theta"));
        assert!(err(TrainConfig {
            batch_size: 0,
            ..cfg()
        })
        .contains("train.batch_size"));
        assert!(cfg().validate().is_ok());
    }

    proptest! {
        #[test]
        fn clipped_values_are_bounded(values in prop::collection::vec(-10.0f64..10.0, 0..100), theta in 1e-6f64..5.0) {
            let mut v = values.clone();
            clip_values(&mut v, theta);
            for (c, o) in v.iter().zip(&values) {
                prop_assert!(c.abs() <= theta);
                if o.abs() <= theta {
                    prop_assert_eq!(c, o);
                }
            }
        }

        #[test]
        fn learning_rate_is_a_nonincreasing_staircase(step in 1usize..20, epoch in 0usize..200) {
            let c = TrainConfig { step, ..TrainConfig::default() };
            prop_assert!(lr_at(epoch + 1, &c) <= lr_at(epoch, &c));
            prop_assert_eq!(lr_at(epoch, &c), lr_at(epoch - epoch % step, &c));
        }
    }
}
