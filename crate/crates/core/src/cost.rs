//! The composite ladder cost and its exact gradient.
//!
//! Per layer l >= 1 the cost adds a reconstruction term C^(l) between the
//! clean activation and its reconstruction, a decorrelation term
//! C_Sigma^(l) = tr(Sigma - log Sigma - I) on the clean covariance, and a
//! zero-mean term C_mu^(l); the input layer contributes C^(0) with weight one.
//! Gradients flow through both the clean encoder path (from C^(l), C_Sigma,
//! C_mu) and the corrupted encoder/decoder path (from C^(l), C^(0));
//! decorrelation and mean terms touch only clean activations.

use serde::{Deserialize, Serialize};

use crate::data::corrupt_with;
use crate::error::{Error, Result};
use crate::linalg::{covariance, sym_eig, DenseMatrix, SPD_EIG_FLOOR};
use crate::model::{
    decode_trace, decoder_layer_backward, encode_trace, encoder_layer_backward, LadderSpec,
    ParamStore,
};

/// Bounds of the decorrelation weight kept by the controller.
pub const BETA_MIN: f64 = 1e-4;
pub const BETA_MAX: f64 = 1e3;

/// Per-layer cost weights in use during an epoch. Alpha is fixed from the
/// spec; beta and gamma start at the spec's initial values and are then
/// adjusted by the eigenvalue controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl LayerWeights {
    pub fn from_spec(spec: &LadderSpec) -> Self {
        let l = spec.num_layers();
        LayerWeights {
            alpha: spec.alpha.clone(),
            beta: vec![spec.beta0; l],
            gamma: vec![spec.gamma0; l],
        }
    }

    fn validate(&self, spec: &LadderSpec) -> Result<()> {
        let l = spec.num_layers();
        if self.alpha.len() != l || self.beta.len() != l || self.gamma.len() != l {
            return Err(Error::Spec(format!(
                "layer weights sized {}/{}/{} for {l} layers",
                self.alpha.len(),
                self.beta.len(),
                self.gamma.len()
            )));
        }
        Ok(())
    }
}

/// All cost components of one evaluation, with the weights that combined
/// them. `total` always equals the weighted recomposition of the parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c0: f64,
    pub c_layer: Vec<f64>,
    pub c_sigma: Vec<f64>,
    pub c_mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub total: f64,
}

impl CostBreakdown {
    /// Recompute the weighted total from the parts (zero weights suppress
    /// their component, so an unweighted infinite C_Sigma stays out).
    pub fn recompose(&self) -> f64 {
        let mut total = self.c0;
        for l in 0..self.c_layer.len() {
            if self.alpha[l] > 0.0 {
                total += self.alpha[l] * self.c_layer[l];
            }
            if self.beta[l] > 0.0 {
                total += self.beta[l] * self.c_sigma[l];
            }
            if self.gamma[l] > 0.0 {
                total += self.gamma[l] * self.c_mu[l];
            }
        }
        total
    }
}

/// Mean over samples of the squared reconstruction distance.
pub fn c_layer(h: &DenseMatrix, h_hat: &DenseMatrix) -> Result<f64> {
    if h.rows() != h_hat.rows() || h.cols() != h_hat.cols() {
        return Err(Error::dim(format!(
            "c_layer: {}x{} vs {}x{}",
            h.rows(),
            h.cols(),
            h_hat.rows(),
            h_hat.cols()
        )));
    }
    let t = h.cols() as f64;
    let d2: f64 = h
        .data()
        .iter()
        .zip(h_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(d2 / t)
}

fn spd_values(sigma: &DenseMatrix, context: &str) -> Result<Vec<f64>> {
    let eig = sym_eig(sigma)?;
    let bad: Vec<f64> = eig
        .values
        .iter()
        .copied()
        .filter(|&l| l <= SPD_EIG_FLOOR)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Singular {
            context: context.to_string(),
            eigenvalues: bad,
        });
    }
    Ok(eig.values)
}

/// Decorrelation cost tr(Sigma - log Sigma - I) = sum(lambda - ln lambda - 1):
/// zero exactly at unit covariance, infinite at collapse.
pub fn c_sigma(sigma: &DenseMatrix) -> Result<f64> {
    let values = spd_values(sigma, "c_sigma")?;
    Ok(values.iter().map(|&l| l - l.ln() - 1.0).sum())
}

/// Gradient of [`c_sigma`] with respect to Sigma: I - Sigma^{-1}.
pub fn c_sigma_grad(sigma: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = sym_eig(sigma)?;
    let bad: Vec<f64> = eig
        .values
        .iter()
        .copied()
        .filter(|&l| l <= SPD_EIG_FLOOR)
        .collect();
    if !bad.is_empty() {
        return Err(Error::Singular {
            context: "c_sigma_grad".to_string(),
            eigenvalues: bad,
        });
    }
    Ok(eig.apply(|l| 1.0 - 1.0 / l))
}

/// The sum-of-squares alternative penalty |Sigma - I|_F^2 = sum (lambda-1)^2.
/// Symmetric about lambda = 1, so it cannot tell collapse from inflation.
pub fn c_sigma_sos(sigma: &DenseMatrix) -> Result<f64> {
    if !sigma.is_square() {
        return Err(Error::dim("c_sigma_sos needs a square matrix"));
    }
    let n = sigma.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let d = sigma.get(i, j) - delta;
            sum += d * d;
        }
    }
    Ok(sum)
}

/// Squared norm of the per-dimension sample mean.
pub fn c_mu(h: &DenseMatrix) -> Result<f64> {
    if h.cols() == 0 {
        return Err(Error::dim("c_mu needs at least one sample"));
    }
    Ok(h.row_means().iter().map(|m| m * m).sum())
}

/// Everything one optimizer step needs from a cost evaluation.
#[derive(Debug, Clone)]
pub struct CostEval {
    pub breakdown: CostBreakdown,
    /// Gradient of the weighted total with respect to every parameter, in
    /// flat-vector order.
    pub grad: Vec<f64>,
    /// Clean-path covariance per layer 1..=L (for the beta controller).
    pub sigmas: Vec<DenseMatrix>,
    /// Smallest covariance eigenvalue per layer 1..=L.
    pub lambda_min: Vec<f64>,
}

/// Evaluate the full ladder cost and its exact reverse-mode gradient for one
/// fixed noise draw. `noise` holds standard normal values shaped like `x`;
/// freezing it makes the whole map differentiable and checkable by finite
/// differences.
pub fn cost_and_grad(
    params: &ParamStore,
    spec: &LadderSpec,
    weights: &LayerWeights,
    x: &DenseMatrix,
    noise: &DenseMatrix,
) -> Result<CostEval> {
    spec.validate()?;
    weights.validate(spec)?;
    let layers = spec.num_layers();
    let t = x.cols() as f64;
    let sigma_noise = spec.sigma_vec()?;
    let x_tilde = corrupt_with(x, &sigma_noise, noise)?;

    let clean = encode_trace(params, spec, x)?;
    let corr = encode_trace(params, spec, &x_tilde)?;
    let dec = decode_trace(params, spec, &corr.h)?;

    let c0 = c_layer(&clean.h[0], &dec.h_hat[0])?;
    let mut c_layer_v = Vec::with_capacity(layers);
    for l in 1..=layers {
        c_layer_v.push(c_layer(&clean.h[l], &dec.h_hat[l])?);
    }

    let mut sigmas = Vec::with_capacity(layers);
    let mut eigs = Vec::with_capacity(layers);
    let mut lambda_min = Vec::with_capacity(layers);
    let mut c_sigma_v = Vec::with_capacity(layers);
    let mut c_mu_v = Vec::with_capacity(layers);
    for l in 1..=layers {
        let sig = covariance(&clean.h[l], false)?;
        let eig = sym_eig(&sig)?;
        lambda_min.push(eig.values[0]);
        let collapsed = eig.values[0] <= SPD_EIG_FLOOR;
        if collapsed && weights.beta[l - 1] > 0.0 {
            return Err(Error::Singular {
                context: format!("C_sigma at layer {l}"),
                eigenvalues: eig.values.iter().copied().filter(|&v| v <= SPD_EIG_FLOOR).collect(),
            });
        }
        let cs = if collapsed {
            f64::INFINITY
        } else {
            eig.values.iter().map(|&v| v - v.ln() - 1.0).sum()
        };
        c_sigma_v.push(cs);
        c_mu_v.push(c_mu(&clean.h[l])?);
        sigmas.push(sig);
        eigs.push(eig);
    }

    let breakdown = {
        let mut b = CostBreakdown {
            c0,
            c_layer: c_layer_v,
            c_sigma: c_sigma_v,
            c_mu: c_mu_v,
            alpha: weights.alpha.clone(),
            beta: weights.beta.clone(),
            gamma: weights.gamma.clone(),
            total: 0.0,
        };
        b.total = b.recompose();
        b
    };

    // ----- reverse pass -----
    let mut grad = ParamStore::zeros(params.index.clone());

    // Reconstruction-side seeds: d C / d h_hat[l].
    let mut d_hhat: Vec<DenseMatrix> = Vec::with_capacity(layers + 1);
    for l in 0..=layers {
        let w = if l == 0 { 1.0 } else { weights.alpha[l - 1] };
        let mut d = dec.h_hat[l].sub(&clean.h[l])?;
        d.scale(2.0 * w / t);
        d_hhat.push(d);
    }

    // Decoder backward, bottom to top, feeding top-down gradients upward and
    // collecting lateral gradients for the corrupted encoder path.
    let mut d_htilde: Vec<Option<DenseMatrix>> = (0..=layers).map(|_| None).collect();
    for l in 0..layers {
        let (d_lat, d_top) = decoder_layer_backward(
            l,
            params,
            spec,
            &corr.h[l],
            Some(&dec.h_hat[l + 1]),
            &dec.caches[l],
            &d_hhat[l],
            &mut grad,
            l >= 1,
        )?;
        if let Some(dl) = d_lat {
            d_htilde[l] = Some(dl);
        }
        let d_top = d_top.ok_or_else(|| Error::Spec("missing top-down gradient".into()))?;
        d_hhat[l + 1].axpy(1.0, &d_top)?;
    }
    let (d_lat_top, _) = decoder_layer_backward(
        layers,
        params,
        spec,
        &corr.h[layers],
        None,
        &dec.caches[layers],
        &d_hhat[layers],
        &mut grad,
        true,
    )?;
    d_htilde[layers] = d_lat_top;

    // Corrupted encoder backward.
    let mut d_cur = d_htilde[layers]
        .take()
        .unwrap_or_else(|| DenseMatrix::zeros(corr.h[layers].rows(), corr.h[layers].cols()));
    for layer in (1..=layers).rev() {
        let d_in = encoder_layer_backward(
            layer,
            params,
            spec,
            &corr.h[layer - 1],
            &corr.caches[layer - 1],
            &d_cur,
            &mut grad,
            layer > 1,
        )?;
        if layer > 1 {
            let mut next = d_in.ok_or_else(|| Error::Spec("missing input gradient".into()))?;
            if let Some(extra) = d_htilde[layer - 1].take() {
                next.axpy(1.0, &extra)?;
            }
            d_cur = next;
        }
    }

    // Clean encoder backward: seeds from C^(l), C_Sigma^(l) and C_mu^(l).
    let any_clean = (0..layers).any(|i| {
        weights.alpha[i] > 0.0 || weights.beta[i] > 0.0 || weights.gamma[i] > 0.0
    });
    if any_clean {
        let mut d_clean: Vec<DenseMatrix> = Vec::with_capacity(layers);
        for l in 1..=layers {
            let alpha = weights.alpha[l - 1];
            let beta = weights.beta[l - 1];
            let gamma = weights.gamma[l - 1];
            let mut d = clean.h[l].sub(&dec.h_hat[l])?;
            d.scale(2.0 * alpha / t);
            if beta > 0.0 {
                // dC_Sigma/dh(t) = (2/T) (I - Sigma^{-1}) h(t).
                let g = eigs[l - 1].apply(|v| 1.0 - 1.0 / v);
                let term = g.matmul(&clean.h[l])?;
                d.axpy(2.0 * beta / t, &term)?;
            }
            if gamma > 0.0 {
                let mu = clean.h[l].row_means();
                for i in 0..d.rows() {
                    let add = 2.0 * gamma / t * mu[i];
                    for v in d.row_mut(i) {
                        *v += add;
                    }
                }
            }
            d_clean.push(d);
        }
        let mut d_cur = d_clean.pop().expect("layers >= 1");
        for layer in (1..=layers).rev() {
            let d_in = encoder_layer_backward(
                layer,
                params,
                spec,
                &clean.h[layer - 1],
                &clean.caches[layer - 1],
                &d_cur,
                &mut grad,
                layer > 1,
            )?;
            if layer > 1 {
                let mut next = d_in.ok_or_else(|| Error::Spec("missing input gradient".into()))?;
                next.axpy(1.0, &d_clean.pop().expect("one per layer"))?;
                d_cur = next;
            }
        }
    }

    Ok(CostEval {
        breakdown,
        grad: grad.flat().to_vec(),
        sigmas,
        lambda_min,
    })
}

/// Hysteresis controller for the decorrelation weights: double beta while the
/// smallest covariance eigenvalue sits below the floor, relax it by 1.5 once
/// the eigenvalue clears floor + 0.2, and keep gamma tied to beta.
pub fn adjust_beta(
    sigmas: &[DenseMatrix],
    beta: &[f64],
    gamma: &[f64],
    eig_floor: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigmas.len() != beta.len() || gamma.len() != beta.len() {
        return Err(Error::dim(format!(
            "adjust_beta: {} covariances, {} betas, {} gammas",
            sigmas.len(),
            beta.len(),
            gamma.len()
        )));
    }
    let mut beta_out = Vec::with_capacity(beta.len());
    for (sig, &b) in sigmas.iter().zip(beta) {
        let lambda_min = sym_eig(sig)?.values[0];
        let next = if lambda_min < eig_floor {
            (2.0 * b).clamp(BETA_MIN, BETA_MAX)
        } else if lambda_min > eig_floor + 0.2 {
            (b / 1.5).clamp(BETA_MIN, BETA_MAX)
        } else {
            b
        };
        beta_out.push(next);
    }
    let gamma_out = beta_out.clone();
    Ok((beta_out, gamma_out))
}
