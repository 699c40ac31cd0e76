//! Finite-difference verification of [`Network::backward`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackwardFault, ForwardCache, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::optimizer::mse_residual_loss;
use crate::tensor::{Dims, Shape4, Tensor4};

const MIN_SAMPLED_PARAMS: usize = 200;
const MAX_SPATIAL_VOXELS: usize = 8 * 8 * 8;

/// Weight distribution for the checked network. The training init of 0.001
/// leaves deep activations numerically zero, so checks redraw the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckInit {
    /// Every layer `N(0, std²)`.
    Std(f64),
    /// Layer drawn with std `√(gain / (c_in·k³))`.
    FanIn(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub init: CheckInit,
    /// Try steps `ε·10^w, ..., ε·10, ε` and keep the widest one that leaves
    /// every ReLU mask unchanged. With the mask fixed the loss is exactly
    /// quadratic in a single parameter, so any such step gives the exact
    /// derivative and a wider one only divides rounding noise by more.
    pub widenings: u32,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            init: CheckInit::FanIn(2.0),
            widenings: 2,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub config: NetworkConfig,
    pub max_rel_error: f64,
    /// Parameters compared against finite differences.
    pub checked: usize,
    /// Parameters skipped because even a step of `ε` flipped a ReLU.
    pub excluded: usize,
    /// Checked parameters whose difference used a step wider than `ε`.
    pub widened: usize,
    /// `(layer, is_bias, index)` of the worst parameter.
    pub worst: Option<(usize, bool, usize)>,
}

/// Compare analytic parameter gradients of the MSE loss with central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε` on a random 64-bit network.
pub fn gradient_check(
    cfg: NetworkConfig,
    spatial: Dims,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    gradient_check_with(cfg, spatial, seed, eps, &GradCheckOptions::default())
}

pub fn gradient_check_with(
    cfg: NetworkConfig,
    spatial: Dims,
    seed: u64,
    eps: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if spatial.is_empty() || spatial.len() > MAX_SPATIAL_VOXELS {
        return Err(Error::ShapeMismatch(format!(
            "gradient check volume {spatial} must hold 1..={MAX_SPATIAL_VOXELS} voxels"
        )));
    }
    let mut net = match opts.init {
        CheckInit::Std(std) => Network::<f64>::init_gaussian(cfg, seed, std)?,
        CheckInit::FanIn(gain) => {
            let mut net = Network::<f64>::init_gaussian(cfg, seed, 1.0)?;
            for layer in net.layers_mut() {
                let std = (gain / (layer.c_in * layer.k.pow(3)) as f64).sqrt();
                for w in &mut layer.weights {
                    *w *= std;
                }
            }
            net
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Non-zero biases keep ReLU boundaries away from exact ties.
    for layer in net.layers_mut() {
        for b in &mut layer.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let shape = Shape4::new(1, spatial);
    let x = Tensor4::from_vec(
        shape,
        (0..spatial.len()).map(|_| rng.random::<f64>()).collect(),
    )?;
    let target = Tensor4::from_vec(
        shape,
        (0..spatial.len()).map(|_| rng.random::<f64>()).collect(),
    )?;

    let (y, cache) = net.forward(&x)?;
    let (_, d_y) = mse_residual_loss(std::slice::from_ref(&y), std::slice::from_ref(&target))?;
    let grads = match opts.fault {
        None => net.backward(&cache, &d_y[0])?,
        Some(f) => net.backward_with_fault(&cache, &d_y[0], f)?,
    };
    let base_mask = relu_mask(&cache);

    let loss_at = |net: &Network<f64>| -> Result<(f64, Vec<bool>)> {
        let (y, cache) = net.forward(&x)?;
        let (loss, _) = mse_residual_loss(std::slice::from_ref(&y), std::slice::from_ref(&target))?;
        Ok((loss, relu_mask(&cache)))
    };

    let sizes: Vec<usize> = net.layers().iter().map(|l| l.weights.len()).collect();
    let mut picks = Vec::new();
    for (l, (&quota, layer)) in weight_quotas(&sizes, MIN_SAMPLED_PARAMS)
        .iter()
        .zip(net.layers())
        .enumerate()
    {
        for idx in sample(&mut rng, layer.weights.len(), quota).into_iter() {
            picks.push((l, false, idx));
        }
        for idx in 0..layer.bias.len() {
            picks.push((l, true, idx));
        }
    }

    let mut report = GradCheckReport {
        config: cfg,
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        widened: 0,
        worst: None,
    };
    for (l, is_bias, idx) in picks {
        let analytic = if is_bias {
            grads.layers[l].bias[idx]
        } else {
            grads.layers[l].weights[idx]
        };
        let original = *param(&mut net, l, is_bias, idx);
        let mut numeric = None;
        for w in (0..=opts.widenings).rev() {
            let step = eps * 10f64.powi(w as i32);
            *param(&mut net, l, is_bias, idx) = original + step;
            let (plus, mask_plus) = loss_at(&net)?;
            *param(&mut net, l, is_bias, idx) = original - step;
            let (minus, mask_minus) = loss_at(&net)?;
            *param(&mut net, l, is_bias, idx) = original;
            if mask_plus == base_mask && mask_minus == base_mask {
                numeric = Some(((plus - minus) / (2.0 * step), w > 0));
                break;
            }
        }
        let Some((numeric, widened)) = numeric else {
            report.excluded += 1;
            continue;
        };
        report.widened += usize::from(widened);
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((l, is_bias, idx));
        }
    }
    Ok(report)
}

/// Spread `total` sampled weights evenly over layers; layers with fewer
/// weights than their share contribute all of them and the remainder moves
/// to the others.
fn weight_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let mut quotas = vec![0usize; sizes.len()];
    let mut open: Vec<usize> = (0..sizes.len()).collect();
    let mut left = total.min(sizes.iter().sum());
    while left > 0 && !open.is_empty() {
        let share = left.div_ceil(open.len());
        let mut still_open = Vec::new();
        for &l in &open {
            let take = share.min(sizes[l] - quotas[l]).min(left);
            quotas[l] += take;
            left -= take;
            if quotas[l] < sizes[l] {
                still_open.push(l);
            }
        }
        open = still_open;
    }
    quotas
}

fn param(net: &mut Network<f64>, l: usize, is_bias: bool, idx: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[l];
    if is_bias {
        &mut layer.bias[idx]
    } else {
        &mut layer.weights[idx]
    }
}

fn relu_mask(cache: &ForwardCache<f64>) -> Vec<bool> {
    cache
        .pre_activations
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
        .collect()
}
