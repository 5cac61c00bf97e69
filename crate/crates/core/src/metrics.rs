//! Evaluation quantities for the synthetic experiments: normalized loading
//! matrices and dominant-loading angles, principal-subspace leakage,
//! independent-subspace block scores, and sigmoid-gate response curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance, sym_eig, DenseMatrix};
use crate::model::{
    decoder_layer_forward, encoder_layer_forward, DecoderKind, LadderSpec, ParamStore,
};

/// Row-normalized loading matrix with its per-unit dominant loadings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadingReport {
    /// Unit-norm rows of W * A_orig: one row per hidden unit.
    pub normalized: DenseMatrix,
    /// Largest absolute normalized loading per unit, in [0, 1].
    pub dominant: Vec<f64>,
    pub mean_dominant: f64,
    /// arccos of the dominant loading, in degrees.
    pub angles_deg: Vec<f64>,
}

impl LoadingReport {
    /// Mean of the k largest dominant loadings (sorted descending).
    pub fn mean_top_k(&self, k: usize) -> f64 {
        let mut d = self.dominant.clone();
        d.sort_by(|a, b| b.partial_cmp(a).expect("dominants are finite"));
        let k = k.min(d.len()).max(1);
        d[..k].iter().sum::<f64>() / k as f64
    }
}

/// How much each original source contributes to each learned hidden unit:
/// rows of `w * a_orig` scaled to unit norm.
pub fn loading_report(w: &DenseMatrix, a_orig: &DenseMatrix) -> Result<LoadingReport> {
    let mut loadings = w.matmul(a_orig)?;
    let mut degenerate = Vec::new();
    for i in 0..loadings.rows() {
        let norm: f64 = loadings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            degenerate.push(i);
            continue;
        }
        for v in loadings.row_mut(i) {
            *v /= norm;
        }
    }
    if !degenerate.is_empty() {
        return Err(Error::arg(format!(
            "loading_report: zero loading rows {degenerate:?}"
        )));
    }
    let dominant: Vec<f64> = (0..loadings.rows())
        .map(|i| {
            loadings
                .row(i)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .min(1.0)
        })
        .collect();
    let mean_dominant = dominant.iter().sum::<f64>() / dominant.len() as f64;
    let angles_deg = dominant
        .iter()
        .map(|&c| dominant_loading_to_angle(c))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LoadingReport {
        normalized: loadings,
        dominant,
        mean_dominant,
        angles_deg,
    })
}

/// Angle (degrees) between a unit and its best-matched source, from the
/// dominant loading: arccos(c).
pub fn dominant_loading_to_angle(c: f64) -> Result<f64> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::arg(format!(
            "dominant loading {c} outside (0, 1]"
        )));
    }
    Ok(c.acos().to_degrees())
}

/// Energy fraction of the row space of `w` outside the span of the
/// `k_principal` largest eigenvectors of cov(x): 1 - |W P|_F^2 / |W|_F^2.
pub fn subspace_leakage(w: &DenseMatrix, x: &DenseMatrix, k_principal: usize) -> Result<f64> {
    let d = x.rows();
    if k_principal > d {
        return Err(Error::arg(format!(
            "k_principal {k_principal} exceeds data dimension {d}"
        )));
    }
    if w.cols() != d {
        return Err(Error::dim(format!(
            "subspace_leakage: W has {} columns for {d}-dimensional data",
            w.cols()
        )));
    }
    let cov = covariance(x, true)?;
    let eig = sym_eig(&cov)?;
    // Eigenvalues ascend, so the top-k eigenvectors are the last k columns.
    let mut basis = DenseMatrix::zeros(d, k_principal);
    for j in 0..k_principal {
        let src = d - k_principal + j;
        for i in 0..d {
            basis.set(i, j, eig.vectors.get(i, src));
        }
    }
    let w_norm2: f64 = w.data().iter().map(|v| v * v).sum();
    if w_norm2 == 0.0 {
        return Err(Error::arg("subspace_leakage: zero W"));
    }
    // |W P|_F^2 = |W U|_F^2 for an orthonormal basis U of the subspace.
    let wu = w.matmul(&basis)?;
    let proj_norm2: f64 = wu.data().iter().map(|v| v * v).sum();
    Ok((1.0 - proj_norm2 / w_norm2).clamp(0.0, 1.0))
}

/// Monte-Carlo baseline for dominant loadings: random orthonormal maps
/// scored exactly like a trained model. `source_cols` restricts the loading
/// columns to the sources under study (rows are renormalized over the
/// restriction); scoring only the recoverable sources is what makes the
/// baseline comparable to a trained model's ten best units.
pub fn random_loading_baseline(
    a_orig: &DenseMatrix,
    n_units: usize,
    source_cols: &[usize],
    top_k: usize,
    trials: usize,
    rng: &mut crate::data::Prng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::arg("random_loading_baseline: zero trials"));
    }
    let a_sub = a_orig.select_cols(source_cols);
    let d = a_orig.rows();
    let mut sum = 0.0;
    for _ in 0..trials {
        let g = crate::data::standard_normal_matrix(d, n_units, rng);
        let w = crate::linalg::orthonormal_columns(&g)?.transpose();
        sum += loading_report(&w, &a_sub)?.mean_top_k(top_k);
    }
    Ok(sum / trials as f64)
}

/// Per-unit subspace assignment from a loading report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockScore {
    /// Index of the group with the largest squared-loading mass, per unit.
    pub assignment: Vec<usize>,
    /// That mass, in [0, 1], per unit.
    pub mass: Vec<f64>,
    pub mean_mass: f64,
    /// Unit indices reordered by (group, descending mass) for display.
    pub display_order: Vec<usize>,
}

/// Squared-loading mass of each hidden unit inside each source group; the
/// group with the most mass wins the unit.
pub fn block_score(report: &LoadingReport, groups: &[Vec<usize>]) -> Result<BlockScore> {
    let n_src = report.normalized.cols();
    let mut seen = vec![false; n_src];
    for g in groups {
        for &i in g {
            if i >= n_src || seen[i] {
                return Err(Error::arg(format!(
                    "block_score: groups do not partition 0..{n_src}"
                )));
            }
            seen[i] = true;
        }
    }
    if !seen.iter().all(|&b| b) {
        return Err(Error::arg(format!(
            "block_score: groups do not cover 0..{n_src}"
        )));
    }

    let n_units = report.normalized.rows();
    let mut assignment = Vec::with_capacity(n_units);
    let mut mass = Vec::with_capacity(n_units);
    for u in 0..n_units {
        let row = report.normalized.row(u);
        let (mut best_g, mut best_m) = (0usize, -1.0f64);
        for (g, members) in groups.iter().enumerate() {
            let m: f64 = members.iter().map(|&i| row[i] * row[i]).sum();
            if m > best_m {
                best_m = m;
                best_g = g;
            }
        }
        assignment.push(best_g);
        mass.push(best_m.min(1.0));
    }
    let mean_mass = mass.iter().sum::<f64>() / n_units as f64;
    let mut display_order: Vec<usize> = (0..n_units).collect();
    display_order.sort_by(|&a, &b| {
        assignment[a]
            .cmp(&assignment[b])
            .then(mass[b].partial_cmp(&mass[a]).expect("finite mass"))
    });
    Ok(BlockScore {
        assignment,
        mass,
        mean_mass,
        display_order,
    })
}

/// A sweep of the sigmoid gate of one unit along one lower-layer dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub unit: usize,
    pub sweep_dim: usize,
    pub grid: Vec<f64>,
    /// sigmoid(gate_w hhat_above + gate_b) for the unit at each grid value.
    pub values: Vec<f64>,
}

/// Evaluate the gate of `unit` while the activation of the gate's layer is
/// zero except for `sweep_dim`, which walks the grid. The activation is
/// pushed through the encoder layers above and back down through the decoder
/// to the gate input.
pub fn sigmoid_response_curve(
    params: &ParamStore,
    spec: &LadderSpec,
    unit: usize,
    sweep_dim: usize,
    grid: &[f64],
) -> Result<ResponseCurve> {
    spec.validate()?;
    let layers = spec.num_layers();
    let gate_layer = (0..layers)
        .find(|&l| spec.decoders[l] == DecoderKind::SigmoidGate)
        .ok_or_else(|| Error::Spec("model has no sigmoid gate layer".into()))?;
    let d = spec.layer_dims[gate_layer];
    if unit >= d || sweep_dim >= d {
        return Err(Error::arg(format!(
            "unit {unit} / sweep_dim {sweep_dim} outside layer of size {d}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::arg("empty sweep grid"));
    }
    // One column per grid point, zero except the swept dimension.
    let mut h = DenseMatrix::zeros(d, grid.len());
    h.row_mut(sweep_dim).copy_from_slice(grid);

    // Up the encoder from the gate layer...
    let mut acts = vec![h];
    for layer in gate_layer + 1..=layers {
        let (next, _) = encoder_layer_forward(layer, params, spec, acts.last().expect("nonempty"))?;
        acts.push(next);
    }
    // ...and back down the decoder to the reconstruction above the gate.
    let top = acts.last().expect("nonempty");
    let (mut hhat, _) = decoder_layer_forward(layers, params, spec, top, None)?;
    for layer in (gate_layer + 1..layers).rev() {
        let lateral = &acts[layer - gate_layer];
        let (next, _) = decoder_layer_forward(layer, params, spec, lateral, Some(&hhat))?;
        hhat = next;
    }

    let gw = params.matrix(&format!("dec{gate_layer}.gate_w"))?;
    let gb = params.slice(&format!("dec{gate_layer}.gate_b"))?.to_vec();
    let z = gw.matmul(&hhat)?;
    let values = z
        .row(unit)
        .iter()
        .map(|&v| {
            let a = v + gb[unit];
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Ok(ResponseCurve {
        unit,
        sweep_dim,
        grid: grid.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rng_from_seed, standard_normal_matrix};
    use crate::linalg::orthonormal_columns;
    use crate::model::{init_params, CorruptSigma, EncoderKind};

    #[test]
    fn perfect_unmixing_scores_one() {
        let mut rng = rng_from_seed(1);
        let a = standard_normal_matrix(6, 6, &mut rng);
        let w = crate::linalg::mat_inv_spd(&{
            // Build W = A^{-1} through the SPD inverse of A A^T: W = A^T (A A^T)^{-1}.
            let mut aat = a.matmul(&a.transpose()).unwrap();
            aat.symmetrize();
            aat
        })
        .unwrap();
        let w = a.matmul_transa(&w).unwrap(); // A^T (A A^T)^{-1} = A^{-1}
        let report = loading_report(&w, &a).unwrap();
        assert!(report.mean_dominant > 1.0 - 1e-8);
        for &ang in &report.angles_deg {
            assert!(ang < 1e-3, "angle {ang}");
        }
        for i in 0..6 {
            let norm: f64 = report.normalized.row(i).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn loading_report_scale_invariant() {
        let mut rng = rng_from_seed(2);
        let a = standard_normal_matrix(5, 5, &mut rng);
        let w = standard_normal_matrix(4, 5, &mut rng);
        let mut w_scaled = w.clone();
        for v in w_scaled.row_mut(2) {
            *v *= 7.5;
        }
        let r1 = loading_report(&w, &a).unwrap();
        let r2 = loading_report(&w_scaled, &a).unwrap();
        for (a, b) in r1.dominant.iter().zip(&r2.dominant) {
            assert!((a - b).abs() < 1e-12);
        }
        // Sign flip leaves dominants unchanged too.
        let mut w_flipped = w.clone();
        for v in w_flipped.row_mut(1) {
            *v = -*v;
        }
        let r3 = loading_report(&w_flipped, &a).unwrap();
        for (a, b) in r1.dominant.iter().zip(&r3.dominant) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loading_report_rejects_zero_row() {
        let a = DenseMatrix::identity(3);
        let w = DenseMatrix::zeros(2, 3);
        assert!(matches!(loading_report(&w, &a), Err(Error::Argument(_))));
    }

    #[test]
    fn random_orthonormal_baseline_matches_reported_value() {
        // Monte-Carlo oracle for the random-loading baseline: random
        // orthonormal 11x15 maps against the ICA mixing, scored over the ten
        // non-Gaussian sources; the mean of the ten best dominant loadings
        // sits near 0.613.
        let mut rng = rng_from_seed(3);
        let a = {
            let mut ds_rng = rng_from_seed(1000);
            crate::data::make_ica_dataset(&mut ds_rng)
                .unwrap()
                .mixing
                .unwrap()
        };
        let cols: Vec<usize> = (0..10).collect();
        let mean = random_loading_baseline(&a, 11, &cols, 10, 100, &mut rng).unwrap();
        assert!(
            (mean - 0.613).abs() < 0.03,
            "random baseline mean {mean}, expected about 0.613"
        );
    }

    #[test]
    fn angle_conversion() {
        assert_eq!(dominant_loading_to_angle(1.0).unwrap(), 0.0);
        let ten = dominant_loading_to_angle(0.985).unwrap();
        assert!((ten - 9.94).abs() < 0.05, "angle {ten}");
        let sixty = dominant_loading_to_angle(0.5).unwrap();
        assert!((sixty - 60.0).abs() < 1e-10);
        assert!(dominant_loading_to_angle(0.0).is_err());
        assert!(dominant_loading_to_angle(1.5).is_err());
    }

    #[test]
    fn leakage_extremes() {
        // Data whose sample covariance is exactly diagonal with descending
        // variances: columns +-s_i e_i, so the principal axes are exact.
        let d = 6;
        let mut x = DenseMatrix::zeros(d, 2 * d);
        for i in 0..d {
            let s = (d - i) as f64;
            x.set(i, 2 * i, s);
            x.set(i, 2 * i + 1, -s);
        }
        // Rows inside the top-3 principal span -> zero leakage.
        let mut inside = DenseMatrix::zeros(2, 6);
        inside.set(0, 0, 1.0);
        inside.set(1, 1, 1.0);
        let leak = subspace_leakage(&inside, &x, 3).unwrap();
        assert!(leak < 1e-12, "inside leakage {leak}");
        // Rows orthogonal to it -> full leakage.
        let mut outside = DenseMatrix::zeros(2, 6);
        outside.set(0, 4, 1.0);
        outside.set(1, 5, 1.0);
        let leak = subspace_leakage(&outside, &x, 3).unwrap();
        assert!(leak > 1.0 - 1e-12, "outside leakage {leak}");
        // k = d means no leakage for any W.
        let mut rng = rng_from_seed(4);
        let w = standard_normal_matrix(3, 6, &mut rng);
        assert!(subspace_leakage(&w, &x, 6).unwrap() < 1e-12);
    }

    #[test]
    fn leakage_of_random_rows_matches_isotropy() {
        // Random directions in d = 15 against an isotropic cloud leak about
        // (d - k)/d = 4/15 of their energy on average.
        let mut rng = rng_from_seed(5);
        let x = standard_normal_matrix(15, 4000, &mut rng);
        let mut total = 0.0;
        let trials = 40;
        for _ in 0..trials {
            let w = standard_normal_matrix(11, 15, &mut rng);
            total += subspace_leakage(&w, &x, 11).unwrap();
        }
        let mean = total / trials as f64;
        assert!(
            (mean - 4.0 / 15.0).abs() < 0.03,
            "isotropic leakage {mean}, expected about {}",
            4.0 / 15.0
        );
    }

    #[test]
    fn block_score_cases() {
        let groups: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3]];
        // Exact block permutation: unit mass.
        let loadings = DenseMatrix::new(
            2,
            4,
            vec![
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        )
        .unwrap();
        let report = LoadingReport {
            normalized: loadings,
            dominant: vec![1.0, 1.0],
            mean_dominant: 1.0,
            angles_deg: vec![0.0, 0.0],
        };
        let score = block_score(&report, &groups).unwrap();
        assert_eq!(score.assignment, vec![0, 1]);
        assert!(score.mass.iter().all(|&m| (m - 1.0).abs() < 1e-12));

        // Uniform loadings over four sources in two groups: mass 1/2 per
        // group (the two members each hold 1/4).
        let uniform = DenseMatrix::new(1, 4, vec![0.5; 4]).unwrap();
        let report = LoadingReport {
            normalized: uniform,
            dominant: vec![0.5],
            mean_dominant: 0.5,
            angles_deg: vec![60.0],
        };
        let score = block_score(&report, &groups).unwrap();
        assert!((score.mass[0] - 0.5).abs() < 1e-12);

        // Non-partition groups are rejected.
        assert!(block_score(&report, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(block_score(&report, &[vec![0, 1]]).is_err());
    }

    #[test]
    fn block_score_uniform_sixteen() {
        // Uniform loadings over 16 sources in four groups score 0.25.
        let groups: Vec<Vec<usize>> = (0..4).map(|g| (4 * g..4 * g + 4).collect()).collect();
        let uniform = DenseMatrix::new(1, 16, vec![0.25; 16]).unwrap();
        let report = LoadingReport {
            normalized: uniform,
            dominant: vec![0.25],
            mean_dominant: 0.25,
            angles_deg: vec![75.5],
        };
        let score = block_score(&report, &groups).unwrap();
        assert!((score.mass[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn random_rows_block_mass_near_quarter() {
        // Monte-Carlo oracle: random unit rows over 16 sources in 4 groups
        // have mean within-group mass near 0.25 + spread, well below 0.5.
        let groups: Vec<Vec<usize>> = (0..4).map(|g| (4 * g..4 * g + 4).collect()).collect();
        let mut rng = rng_from_seed(6);
        let mut means = Vec::new();
        for _ in 0..20 {
            let w = standard_normal_matrix(16, 16, &mut rng);
            let report = loading_report(&w, &DenseMatrix::identity(16)).unwrap();
            let score = block_score(&report, &groups).unwrap();
            means.push(score.mean_mass);
        }
        let overall = means.iter().sum::<f64>() / means.len() as f64;
        assert!(overall > 0.25 && overall < 0.5, "random block mass {overall}");
    }

    #[test]
    fn block_score_invariances() {
        let groups: Vec<Vec<usize>> = vec![vec![0, 1], vec![2, 3]];
        let mut rng = rng_from_seed(7);
        let w = standard_normal_matrix(5, 4, &mut rng);
        let a = DenseMatrix::identity(4);
        let base = block_score(&loading_report(&w, &a).unwrap(), &groups).unwrap();
        // Permuting hidden units permutes per-unit values, not the mean.
        let perm: Vec<usize> = vec![4, 2, 0, 1, 3];
        let mut wp = DenseMatrix::zeros(5, 4);
        for (dst, &src) in perm.iter().enumerate() {
            wp.row_mut(dst).copy_from_slice(w.row(src));
        }
        let permuted = block_score(&loading_report(&wp, &a).unwrap(), &groups).unwrap();
        assert!((permuted.mean_mass - base.mean_mass).abs() < 1e-12);
        // Permuting sources inside a group changes nothing at all.
        let mut aswap = DenseMatrix::identity(4);
        // Swap sources 2 and 3 (same group).
        aswap.set(2, 2, 0.0);
        aswap.set(3, 3, 0.0);
        aswap.set(2, 3, 1.0);
        aswap.set(3, 2, 1.0);
        let swapped = block_score(&loading_report(&w, &aswap).unwrap(), &groups).unwrap();
        assert!((swapped.mean_mass - base.mean_mass).abs() < 1e-12);
        assert_eq!(swapped.assignment, base.assignment);
    }

    fn variance_like_spec() -> LadderSpec {
        LadderSpec {
            layer_dims: vec![6, 6, 4],
            encoders: vec![EncoderKind::Linear, EncoderKind::SoftplusMlp { hidden: 9 }],
            decoders: vec![
                DecoderKind::LinearLateral,
                DecoderKind::SigmoidGate,
                DecoderKind::ScalarGain,
            ],
            alpha: vec![1.0, 1.0],
            beta0: 1.0,
            gamma0: 1.0,
            sigma_corrupt: CorruptSigma::Scalar(0.5),
            eig_floor: 0.7,
        }
    }

    #[test]
    fn gate_sweep_flat_at_zero_weights() {
        let spec = variance_like_spec();
        let mut rng = rng_from_seed(8);
        let params = init_params(&spec, &mut rng).unwrap();
        // Zero-initialized second layer output and gate weights: sigma(0) = 1/2
        // across the whole grid.
        let grid: Vec<f64> = (0..17).map(|i| -4.0 + 0.5 * i as f64).collect();
        let curve = sigmoid_response_curve(&params, &spec, 0, 3, &grid).unwrap();
        assert!(curve.values.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn gate_sweep_rejects_gateless_model() {
        let spec = LadderSpec {
            layer_dims: vec![4, 3],
            encoders: vec![EncoderKind::Linear],
            decoders: vec![DecoderKind::LinearLateral, DecoderKind::TanhGain],
            alpha: vec![0.0],
            beta0: 1.0,
            gamma0: 1.0,
            sigma_corrupt: CorruptSigma::Scalar(0.5),
            eig_floor: 0.7,
        };
        let params = init_params(&spec, &mut rng_from_seed(9)).unwrap();
        assert!(matches!(
            sigmoid_response_curve(&params, &spec, 0, 0, &[0.0]),
            Err(Error::Spec(_))
        ));
    }
}
