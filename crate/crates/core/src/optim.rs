//! Batch gradient descent with momentum: the training loop, per-epoch beta
//! adjustment, trace recording, the independent gradient checker, and the
//! five-parameter denoiser fit used by the first experiment.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{adjust_beta, cost_and_grad, CostBreakdown, LayerWeights};
use crate::data::{standard_normal_matrix, Dataset, Prng};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{init_params, LadderSpec, ParamStore};

/// Full-batch or shuffled minibatches of a fixed size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Batch {
    Full(FullTag),
    Size(usize),
}

/// Serde helper so `"full"` parses as [`Batch::Full`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullTag {
    Full,
}

impl Batch {
    pub const FULL: Batch = Batch::Full(FullTag::Full);
}

impl Default for Batch {
    fn default() -> Self {
        Batch::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default)]
    pub batch: Batch,
    pub seed: u64,
    /// Optional cap on the update norm: the applied step never exceeds
    /// learning_rate * grad_clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Parameter blocks whose gradient is zeroed (held at their initial
    /// value), e.g. `dec0.lat` to ablate the lateral shortcut.
    #[serde(default)]
    pub frozen: Vec<String>,
}

fn default_momentum() -> f64 {
    0.9
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::arg(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Batch::Size(0) = self.batch {
            return Err(Error::arg("batch size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::arg(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One completed epoch in the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub breakdown: CostBreakdown,
    pub lambda_min: Vec<f64>,
    pub beta: Vec<f64>,
    /// Wall-clock seconds for the epoch. Excluded from serialization so that
    /// emitted traces are byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
}

impl TrainTrace {
    /// One JSON object per epoch, newline separated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<TrainTrace> {
        let mut entries = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line)?);
        }
        Ok(TrainTrace { entries })
    }
}

fn check_finite(eval_breakdown: &CostBreakdown, grad: &[f64], epoch: usize) -> Result<()> {
    let mut offending = None;
    if !eval_breakdown.c0.is_finite() {
        offending = Some("c0".to_string());
    }
    for (l, v) in eval_breakdown.c_layer.iter().enumerate() {
        if !v.is_finite() {
            offending = Some(format!("c_layer[{}]", l + 1));
        }
    }
    for (l, (v, b)) in eval_breakdown
        .c_sigma
        .iter()
        .zip(&eval_breakdown.beta)
        .enumerate()
    {
        if b > &0.0 && !v.is_finite() {
            offending = Some(format!("c_sigma[{}]", l + 1));
        }
    }
    for (l, v) in eval_breakdown.c_mu.iter().enumerate() {
        if !v.is_finite() {
            offending = Some(format!("c_mu[{}]", l + 1));
        }
    }
    if !eval_breakdown.total.is_finite() {
        offending = Some("total".to_string());
    }
    if offending.is_none() && grad.iter().any(|g| !g.is_finite()) {
        offending = Some("gradient".to_string());
    }
    match offending {
        Some(component) => Err(Error::Numeric(format!(
            "non-finite {component} at epoch {epoch}; aborting"
        ))),
        None => Ok(()),
    }
}

/// Train a ladder network on the dataset's observations.
///
/// Each epoch draws fresh corruption noise, takes one momentum step per batch
/// and then lets the beta controller react to the epoch's clean covariances.
/// Deterministic for a fixed (spec, dataset, config).
pub fn train(spec: &LadderSpec, dataset: &Dataset, cfg: &OptimConfig) -> Result<(ParamStore, TrainTrace)> {
    spec.validate()?;
    cfg.validate()?;
    let x = &dataset.x;
    if x.rows() != spec.input_dim() {
        return Err(Error::dim(format!(
            "dataset has {} rows, spec expects {}",
            x.rows(),
            spec.input_dim()
        )));
    }
    let t = x.cols();
    let mut rng = crate::data::rng_from_seed(cfg.seed);
    let mut params = init_params(spec, &mut rng)?;
    let mut weights = LayerWeights::from_spec(spec);
    let mut velocity = vec![0.0; params.len()];
    let mut trace = TrainTrace::default();

    // Resolve frozen block names once; unknown names are spec errors.
    let frozen: Vec<(usize, usize)> = cfg
        .frozen
        .iter()
        .map(|name| {
            params
                .index
                .block(name)
                .map(|b| (b.offset, b.offset + b.len()))
        })
        .collect::<Result<_>>()?;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches: Vec<Vec<usize>> = match cfg.batch {
            Batch::Full(_) => vec![(0..t).collect()],
            Batch::Size(b) => {
                let mut idx: Vec<usize> = (0..t).collect();
                // Fisher-Yates with the training RNG keeps runs reproducible.
                for i in (1..t).rev() {
                    let j = rng.random_range(0..=i);
                    idx.swap(i, j);
                }
                idx.chunks(b).map(|c| c.to_vec()).collect()
            }
        };
        let mut last_eval = None;
        for batch in &batches {
            let xb = if batch.len() == t {
                x.clone()
            } else {
                x.select_cols(batch)
            };
            let noise = standard_normal_matrix(xb.rows(), xb.cols(), &mut rng);
            let eval = cost_and_grad(&params, spec, &weights, &xb, &noise)?;
            check_finite(&eval.breakdown, &eval.grad, epoch)?;

            let mut step = eval.grad.clone();
            for &(lo, hi) in &frozen {
                for g in &mut step[lo..hi] {
                    *g = 0.0;
                }
            }
            for (v, g) in velocity.iter_mut().zip(&step) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cap = cfg.learning_rate * clip;
                if norm > cap {
                    let scale = cap / norm;
                    for v in &mut velocity {
                        *v *= scale;
                    }
                }
            }
            for (p, v) in params.flat_mut().iter_mut().zip(&velocity) {
                *p += v;
            }
            last_eval = Some(eval);
        }
        let eval = last_eval.expect("at least one batch");
        let (beta, gamma) = adjust_beta(&eval.sigmas, &weights.beta, &weights.gamma, spec.eig_floor)?;
        weights.beta = beta.clone();
        weights.gamma = gamma;
        trace.entries.push(TraceEntry {
            epoch,
            breakdown: eval.breakdown,
            lambda_min: eval.lambda_min,
            beta: weights.beta.clone(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, trace))
}

/// Result of a finite-difference check of the analytic gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_coords: usize,
    pub step: f64,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Steps outside [1e-7, 1e-3] are dominated by truncation or round-off
    /// error and flagged as unreliable.
    pub step_unreliable: bool,
    /// Block holding the worst coordinate.
    pub worst_block: Option<String>,
}

/// Central finite differences on randomly chosen coordinates against the
/// analytic gradient of [`cost_and_grad`]. The relative error of a coordinate
/// is |fd - analytic| / max(1, |fd|, |analytic|).
pub fn grad_check(
    params: &ParamStore,
    spec: &LadderSpec,
    x: &DenseMatrix,
    noise: &DenseMatrix,
    n_coords: usize,
    step: f64,
    rng: &mut Prng,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::arg(format!("step must be positive, got {step}")));
    }
    let weights = LayerWeights::from_spec(spec);
    let eval = cost_and_grad(params, spec, &weights, x, noise)?;
    let total_coords = params.len();
    let n = n_coords.min(total_coords);
    let mut coords: Vec<usize> = (0..total_coords).collect();
    for i in (1..total_coords).rev() {
        let j = rng.random_range(0..=i);
        coords.swap(i, j);
    }
    coords.truncate(n);

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst_coord = None;
    let mut work = params.clone();
    for &coord in &coords {
        let orig = work.flat()[coord];
        work.flat_mut()[coord] = orig + step;
        let fp = cost_and_grad(&work, spec, &weights, x, noise)?.breakdown.total;
        work.flat_mut()[coord] = orig - step;
        let fm = cost_and_grad(&work, spec, &weights, x, noise)?.breakdown.total;
        work.flat_mut()[coord] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let an = eval.grad[coord];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst_coord = Some(coord);
        }
    }
    Ok(GradCheckReport {
        n_coords: n,
        step,
        max_rel_err: max_rel,
        mean_rel_err: if n > 0 { sum_rel / n as f64 } else { 0.0 },
        step_unreliable: !(1e-7..=1e-3).contains(&step),
        worst_block: worst_coord
            .and_then(|c| params.index.block_of_coord(c))
            .map(|b| b.name.clone()),
    })
}

/// Result of fitting the five-parameter scalar denoiser.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserFit {
    pub xi: [f64; 5],
    /// C^(0) after each epoch.
    pub c0_per_epoch: Vec<f64>,
}

/// Mean squared reconstruction error of the scalar denoiser on a fixed
/// corrupted sample, with its analytic gradient in the five parameters.
pub fn denoiser_cost_and_grad(
    x: &[f64],
    x_tilde: &[f64],
    xi: &[f64; 5],
) -> Result<(f64, [f64; 5])> {
    if x.len() != x_tilde.len() || x.is_empty() {
        return Err(Error::dim("denoiser_cost_and_grad: sample size mismatch"));
    }
    let t = x.len() as f64;
    let mut grad = [0.0f64; 5];
    let mut c0 = 0.0;
    for (&xv, &xt) in x.iter().zip(x_tilde) {
        let th = (xi[2] * xt + xi[3]).tanh();
        let xhat = xi[0] * xt + xi[1] * th + xi[4];
        let r = xhat - xv;
        c0 += r * r;
        let sech2 = 1.0 - th * th;
        grad[0] += 2.0 * r * xt;
        grad[1] += 2.0 * r * th;
        grad[2] += 2.0 * r * xi[1] * sech2 * xt;
        grad[3] += 2.0 * r * xi[1] * sech2;
        grad[4] += 2.0 * r;
    }
    c0 /= t;
    for g in &mut grad {
        *g /= t;
    }
    Ok((c0, grad))
}

/// Fit `xhat = xi1 xt + xi2 tanh(xi3 xt + xi4) + xi5` to denoise
/// `xt = x + sigma n` by gradient descent on the mean squared reconstruction
/// error, resampling the corruption noise every epoch.
pub fn fit_scalar_denoiser(
    x: &[f64],
    sigma: f64,
    xi0: [f64; 5],
    cfg: &OptimConfig,
) -> Result<DenoiserFit> {
    if sigma < 0.0 {
        return Err(Error::arg(format!("negative corruption std {sigma}")));
    }
    if x.is_empty() {
        return Err(Error::dim("fit_scalar_denoiser: empty sample"));
    }
    cfg.validate()?;
    let mut rng = crate::data::rng_from_seed(cfg.seed);
    let mut xi = xi0;
    let mut velocity = [0.0f64; 5];
    let mut c0_per_epoch = Vec::with_capacity(cfg.epochs);
    let mut x_tilde = vec![0.0f64; x.len()];
    for epoch in 0..cfg.epochs {
        for (xt, &xv) in x_tilde.iter_mut().zip(x) {
            *xt = xv + sigma * crate::data::standard_normal(&mut rng);
        }
        let (c0, grad) = denoiser_cost_and_grad(x, &x_tilde, &xi)?;
        if !c0.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite denoiser cost or gradient at epoch {epoch}"
            )));
        }
        for i in 0..5 {
            velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * grad[i];
            xi[i] += velocity[i];
        }
        c0_per_epoch.push(c0);
    }
    Ok(DenoiserFit { xi, c0_per_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_from_seed;
    use crate::model::{CorruptSigma, DecoderKind, EncoderKind};

    fn small_spec() -> LadderSpec {
        LadderSpec {
            layer_dims: vec![4, 3],
            encoders: vec![EncoderKind::Linear],
            decoders: vec![DecoderKind::LinearLateral, DecoderKind::ScalarGain],
            alpha: vec![0.0],
            beta0: 0.0,
            gamma0: 0.0,
            sigma_corrupt: CorruptSigma::Scalar(0.0),
            eig_floor: 0.7,
        }
    }

    fn small_dataset(seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        Dataset {
            x: standard_normal_matrix(4, 200, &mut rng),
            sources: None,
            mixing: None,
            groups: None,
            whitening: None,
        }
    }

    fn cfg(epochs: usize) -> OptimConfig {
        OptimConfig {
            learning_rate: 0.05,
            momentum: 0.0,
            epochs,
            batch: Batch::FULL,
            seed: 7,
            grad_clip: None,
            frozen: vec![],
        }
    }

    #[test]
    fn zero_epochs_leaves_params_at_init() {
        let spec = small_spec();
        let ds = small_dataset(1);
        let (params, trace) = train(&spec, &ds, &cfg(0)).unwrap();
        let fresh = init_params(&spec, &mut rng_from_seed(7)).unwrap();
        assert_eq!(params.flat(), fresh.flat());
        assert!(trace.entries.is_empty());
    }

    #[test]
    fn quadratic_problem_descends_monotonically() {
        // Plain least squares: no noise, no extra costs; C0 must fall every
        // epoch at a small learning rate (convexity).
        let spec = small_spec();
        let ds = small_dataset(2);
        let mut config = cfg(40);
        config.learning_rate = 0.02;
        let (_, trace) = train(&spec, &ds, &config).unwrap();
        for w in trace.entries.windows(2) {
            assert!(
                w[1].breakdown.c0 < w[0].breakdown.c0,
                "C0 not decreasing: {} -> {}",
                w[0].breakdown.c0,
                w[1].breakdown.c0
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = small_spec();
        let ds = small_dataset(3);
        let (p1, t1) = train(&spec, &ds, &cfg(5)).unwrap();
        let (p2, t2) = train(&spec, &ds, &cfg(5)).unwrap();
        assert_eq!(p1.flat(), p2.flat());
        assert_eq!(t1.to_jsonl().unwrap(), t2.to_jsonl().unwrap());
    }

    #[test]
    fn minibatch_training_runs_and_is_deterministic() {
        let spec = small_spec();
        let ds = small_dataset(8);
        let mut config = cfg(3);
        config.batch = Batch::Size(64);
        let (p1, _) = train(&spec, &ds, &config).unwrap();
        let (p2, _) = train(&spec, &ds, &config).unwrap();
        assert_eq!(p1.flat(), p2.flat());
    }

    #[test]
    fn frozen_blocks_stay_put() {
        let spec = small_spec();
        let ds = small_dataset(4);
        let mut config = cfg(10);
        config.frozen = vec!["dec0.lat".into()];
        let (params, _) = train(&spec, &ds, &config).unwrap();
        assert!(params
            .slice("dec0.lat")
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // Unknown block name is rejected.
        config.frozen = vec!["nope".into()];
        assert!(matches!(train(&spec, &ds, &config), Err(Error::Spec(_))));
    }

    #[test]
    fn update_norm_respects_clip() {
        let spec = small_spec();
        let ds = small_dataset(5);
        let mut config = cfg(1);
        config.grad_clip = Some(0.01);
        config.learning_rate = 1.0;
        let (params, _) = train(&spec, &ds, &config).unwrap();
        let init = init_params(&spec, &mut rng_from_seed(config.seed)).unwrap();
        let step_norm: f64 = params
            .flat()
            .iter()
            .zip(init.flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            step_norm <= config.learning_rate * 0.01 + 1e-12,
            "step norm {step_norm}"
        );
    }

    #[test]
    fn trace_jsonl_roundtrip_without_wallclock() {
        let spec = small_spec();
        let ds = small_dataset(6);
        let (_, trace) = train(&spec, &ds, &cfg(3)).unwrap();
        let text = trace.to_jsonl().unwrap();
        assert!(!text.contains("wall_clock"));
        let back = TrainTrace::from_jsonl(&text).unwrap();
        assert_eq!(back.entries.len(), 3);
        for (a, b) in back.entries.iter().zip(&trace.entries) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.breakdown, b.breakdown);
        }
    }

    #[test]
    fn grad_check_linear_model_is_tight() {
        let spec = small_spec();
        let mut rng = rng_from_seed(9);
        let params = init_params(&spec, &mut rng).unwrap();
        let x = standard_normal_matrix(4, 50, &mut rng);
        let noise = standard_normal_matrix(4, 50, &mut rng);
        let report = grad_check(&params, &spec, &x, &noise, 1000, 1e-5, &mut rng).unwrap();
        assert!(!report.step_unreliable);
        assert!(
            report.max_rel_err < 1e-6,
            "linear grad check {}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_check_flags_coarse_step() {
        let spec = small_spec();
        let mut rng = rng_from_seed(10);
        let params = init_params(&spec, &mut rng).unwrap();
        let x = standard_normal_matrix(4, 20, &mut rng);
        let noise = standard_normal_matrix(4, 20, &mut rng);
        let report = grad_check(&params, &spec, &x, &noise, 10, 1e-1, &mut rng).unwrap();
        assert!(report.step_unreliable);
    }

    #[test]
    fn denoiser_fit_gaussian_approaches_half_gain() {
        let mut rng = rng_from_seed(11);
        let x: Vec<f64> = (0..20_000)
            .map(|_| crate::data::standard_normal(&mut rng))
            .collect();
        let config = OptimConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            batch: Batch::FULL,
            seed: 12,
            grad_clip: None,
            frozen: vec![],
        };
        let fit = fit_scalar_denoiser(&x, 1.0, [0.5, 0.1, 1.0, 0.0, 0.0], &config).unwrap();
        // Effective slope at moderate inputs approaches 1/2.
        for v in [-2.0, -1.0, 1.0, 2.0] {
            let out = crate::model::scalar_denoiser(&fit.xi, &[v])[0];
            assert!(
                (out - v / 2.0).abs() < 0.06,
                "denoiser({v}) = {out}, want about {}",
                v / 2.0
            );
        }
        // Cost should have improved over the first epoch.
        assert!(fit.c0_per_epoch.last().unwrap() < &fit.c0_per_epoch[0]);
    }
}
