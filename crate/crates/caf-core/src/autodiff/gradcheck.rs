//! Finite-difference verification of tape gradients.
//!
//! For a scalar function built on a tape, compare every sampled parameter
//! coordinate's analytic gradient against a central difference
//! `(f(p+eps) - f(p-eps)) / (2 eps)` in f64. The forward and backward
//! one-sided differences are also compared: at a non-smooth coordinate
//! (ReLU kink, |x| corner) they disagree by the slope jump, and such
//! coordinates are excluded instead of producing a spurious failure.

use super::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor4;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (small tensors are checked
    /// exhaustively).
    pub samples_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// Relative disagreement between the forward and backward one-sided
    /// differences above which a coordinate is treated as sitting on a kink.
    pub kink_threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            samples_per_param: 200,
            seed: 0x5eed,
            kink_threshold: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates excluded as non-smooth.
    pub skipped: usize,
    /// `(parameter index, flat coordinate)` of the worst error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.checked > 0
    }
}

fn eval<F>(params: &[Tensor4<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(CoreError::NonScalarLoss { shape: v.shape() });
    }
    let lv = v.data()[0];
    if !lv.is_finite() {
        return Err(CoreError::NonFinite {
            op: "grad_check",
            detail: format!("function value {lv}"),
        });
    }
    Ok(lv)
}

/// Check the tape gradient of `build` (a scalar function of `params`)
/// against central differences on a random subsample of coordinates.
pub fn grad_check<F>(
    params: &[Tensor4<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    for p in params {
        if !p.is_finite() {
            return Err(CoreError::NonFinite {
                op: "grad_check",
                detail: "parameter contains a non-finite value".into(),
            });
        }
    }

    // analytic gradients from one recorded backward pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(CoreError::NonScalarLoss {
            shape: tape.value(loss).shape(),
        });
    }
    if !tape.value(loss).data()[0].is_finite() {
        return Err(CoreError::NonFinite {
            op: "grad_check",
            detail: "loss is non-finite at the base point".into(),
        });
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Option<Tensor4<f64>>> = ids.iter().map(|&id| grads.take(id)).collect();

    let f0 = eval(params, &build)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor4<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };

    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let coords: Vec<usize> = if numel <= cfg.samples_per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.samples_per_param).into_vec()
        };
        for coord in coords {
            let base = p.data()[coord];
            let mut probe = |delta: f64| -> Result<f64> {
                work[pi].data_mut()[coord] = base + delta;
                let v = eval(&work, &build);
                work[pi].data_mut()[coord] = base;
                v
            };
            let f_p = probe(cfg.eps)?;
            let f_m = probe(-cfg.eps)?;
            let central = (f_p - f_m) / (2.0 * cfg.eps);
            let fwd = (f_p - f0) / cfg.eps;
            let bwd = (f0 - f_m) / cfg.eps;
            if (fwd - bwd).abs() / f64::max(1e-8, fwd.abs() + bwd.abs()) > cfg.kink_threshold {
                report.skipped += 1;
                continue;
            }
            let a = analytic[pi].as_ref().map_or(0.0, |t| t.data()[coord]);
            let rel = (a - central).abs() / f64::max(1e-8, a.abs() + central.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, coord));
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] with the default configuration.
pub fn grad_check_default<F>(params: &[Tensor4<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check(params, build, &GradCheckConfig::default())
}
