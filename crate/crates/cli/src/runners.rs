//! Experiment runners. Each writes its merged config, trace, checkpoint and
//! metrics into the run directory; reruns with the emitted config reproduce
//! every output byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ladderlab::csvio;
use ladderlab::data::{
    make_ica_dataset, make_isa_dataset, rng_from_seed, sample_source, standard_normal_matrix,
    Dataset, Prng, SourceKind,
};
use ladderlab::linalg::DenseMatrix;
use ladderlab::metrics::{
    block_score, loading_report, random_loading_baseline, sigmoid_response_curve, subspace_leakage,
    BlockScore, ResponseCurve,
};
use ladderlab::model::{
    gauss_optimal_denoiser, init_params, scalar_denoiser, Checkpoint, CorruptSigma, DecoderKind,
    EncoderKind, LadderSpec, ParamStore,
};
use ladderlab::optim::{
    denoiser_cost_and_grad, fit_scalar_denoiser, grad_check, train, GradCheckReport,
    TrainTrace,
};

use crate::config::{config_echo, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Guard against clobbering a previous run: a directory that already holds a
/// `config.json` is only reused under `--force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.join("config.json").exists() && !force {
        return Err(CliError::Config(format!(
            "{} already contains a run; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_config_echo(cfg: &ExperimentConfig, dir: &Path) -> CliResult<()> {
    std::fs::write(dir.join("config.json"), config_echo(cfg)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &TrainTrace) -> CliResult<()> {
    std::fs::write(path, trace.to_jsonl().map_err(CliError::Runtime)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// denoise1d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseKindResult {
    pub kind: String,
    pub xi: [f64; 5],
    pub final_c0: f64,
    /// max |xhat(v) + xhat(-v)| over the grid: zero for an odd denoiser.
    pub oddness: f64,
    /// max |xhat(v) - v/2| over |v| <= 2 (only meaningful for the Gaussian
    /// source, whose optimum is the half gain).
    pub max_dev_from_half_gain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseArtifacts {
    pub gaussian: DenoiseKindResult,
    pub laplace: DenoiseKindResult,
    pub sinusoid: DenoiseKindResult,
    /// min over v in [0.5, 2] of (v/2 - xhat_laplace(v)); positive means the
    /// Laplace curve stays strictly below the Gaussian line there.
    pub laplace_below_gaussian_margin: f64,
}

impl DenoiseArtifacts {
    pub fn assert_failures(&self) -> Vec<String> {
        let mut fails = Vec::new();
        if !(self.gaussian.max_dev_from_half_gain < 0.05) {
            fails.push(format!(
                "gaussian denoiser deviates from the half gain by {:.4} (>= 0.05)",
                self.gaussian.max_dev_from_half_gain
            ));
        }
        for r in [&self.laplace, &self.sinusoid] {
            if !(r.oddness < 0.02) {
                fails.push(format!("{} denoiser oddness {:.4} (>= 0.02)", r.kind, r.oddness));
            }
        }
        if !(self.laplace_below_gaussian_margin > 0.0) {
            fails.push(format!(
                "laplace curve not below the gaussian line (margin {:.4})",
                self.laplace_below_gaussian_margin
            ));
        }
        fails
    }
}

fn denoise_grid(section: &crate::config::DenoiseSection) -> CliResult<Vec<f64>> {
    if section.grid_min + section.grid_max != 0.0 || section.grid_step <= 0.0 {
        return Err(CliError::Config(
            "denoise grid must be symmetric about zero with a positive step".into(),
        ));
    }
    let half = (section.grid_max / section.grid_step).round() as i64;
    Ok((-half..=half).map(|i| i as f64 * section.grid_step).collect())
}

pub fn run_denoise1d(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> CliResult<DenoiseArtifacts> {
    let section = cfg
        .denoise
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `denoise` section".into()))?;
    let optim = cfg.optim()?.clone();
    prepare_out_dir(out_dir, force)?;
    write_config_echo(cfg, out_dir)?;
    let grid = denoise_grid(section)?;

    let kinds = [
        ("gaussian", SourceKind::Gaussian),
        ("laplace", SourceKind::LaplaceUnit),
        ("sinusoid", SourceKind::SinusoidUnit),
    ];
    let mut results = Vec::new();
    for (i, (name, kind)) in kinds.iter().enumerate() {
        let mut data_rng = rng_from_seed(cfg.seed.wrapping_add(i as u64));
        let x = sample_source(*kind, section.samples, &mut data_rng)?;
        let mut fit_cfg = optim.clone();
        fit_cfg.seed = optim.seed.wrapping_add(i as u64);
        let fit = fit_scalar_denoiser(&x, section.sigma, section.xi0, &fit_cfg)?;
        let curve = scalar_denoiser(&fit.xi, &grid);

        let n = grid.len();
        let oddness = (0..n)
            .map(|k| (curve[k] + curve[n - 1 - k]).abs())
            .fold(0.0f64, f64::max);
        let max_dev = grid
            .iter()
            .zip(&curve)
            .filter(|(v, _)| v.abs() <= 2.0)
            .map(|(v, y)| (y - v / 2.0).abs())
            .fold(0.0f64, f64::max);

        // Curve CSV; the Gaussian run also carries the analytic optimum.
        let path = out_dir.join(format!("denoise_{name}.csv"));
        if *name == "gaussian" {
            let oracle = gauss_optimal_denoiser(1.0, section.sigma.max(1e-300), &grid)
                .map_err(CliError::Runtime)?;
            let mut m = DenseMatrix::zeros(n, 3);
            for k in 0..n {
                m.set(k, 0, grid[k]);
                m.set(k, 1, curve[k]);
                m.set(k, 2, oracle[k]);
            }
            csvio::write_matrix(
                &path,
                &["x_tilde".into(), "x_hat".into(), "x_hat_oracle".into()],
                &m,
            )
            .map_err(CliError::Runtime)?;
        } else {
            let mut m = DenseMatrix::zeros(n, 2);
            for k in 0..n {
                m.set(k, 0, grid[k]);
                m.set(k, 1, curve[k]);
            }
            csvio::write_matrix(&path, &["x_tilde".into(), "x_hat".into()], &m)
                .map_err(CliError::Runtime)?;
        }

        results.push(DenoiseKindResult {
            kind: name.to_string(),
            xi: fit.xi,
            final_c0: *fit.c0_per_epoch.last().unwrap_or(&f64::NAN),
            oddness,
            max_dev_from_half_gain: max_dev,
        });
    }

    let laplace_curve = scalar_denoiser(&results[1].xi, &grid);
    let margin = grid
        .iter()
        .zip(&laplace_curve)
        .filter(|(v, _)| (0.5..=2.0).contains(*v))
        .map(|(v, y)| v / 2.0 - y)
        .fold(f64::INFINITY, f64::min);

    let artifacts = DenoiseArtifacts {
        gaussian: results[0].clone(),
        laplace: results[1].clone(),
        sinusoid: results[2].clone(),
        laplace_below_gaussian_margin: margin,
    };
    write_json(&out_dir.join("denoise1d_metrics.json"), &artifacts)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// ica
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcaRunMetrics {
    pub top10_mean: f64,
    pub mean_dominant: f64,
    pub dominant: Vec<f64>,
    pub angles_deg: Vec<f64>,
    /// Energy fraction of the encoder rows outside the top-11 principal
    /// subspace of the observations.
    pub leakage: f64,
    pub final_c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcaArtifacts {
    pub with_b: IcaRunMetrics,
    pub no_b: IcaRunMetrics,
    /// Monte-Carlo mean of the ten best dominant loadings of random
    /// orthonormal maps, scored over the ten non-Gaussian sources.
    pub random_baseline_top10: f64,
}

impl IcaArtifacts {
    pub fn assert_failures(&self) -> Vec<String> {
        let mut fails = Vec::new();
        if !(self.with_b.top10_mean >= 0.95) {
            fails.push(format!(
                "with-B mean of ten best dominant loadings {:.4} (< 0.95)",
                self.with_b.top10_mean
            ));
        }
        if !(self.with_b.top10_mean - self.no_b.top10_mean >= 0.10) {
            fails.push(format!(
                "lateral ablation gap {:.4} (< 0.10)",
                self.with_b.top10_mean - self.no_b.top10_mean
            ));
        }
        if !(self.with_b.leakage > self.no_b.leakage) {
            fails.push(format!(
                "with-B leakage {:.4} not above no-B leakage {:.4}",
                self.with_b.leakage, self.no_b.leakage
            ));
        }
        fails
    }
}

fn ica_run_metrics(
    params: &ParamStore,
    dataset: &Dataset,
    trace: &TrainTrace,
    k_principal: usize,
) -> CliResult<(IcaRunMetrics, DenseMatrix)> {
    let w = params.matrix("enc1.w").map_err(CliError::Runtime)?;
    let a_orig = dataset
        .mixing
        .as_ref()
        .ok_or_else(|| CliError::Config("dataset has no mixing matrix".into()))?;
    let report = loading_report(&w, a_orig).map_err(CliError::Runtime)?;
    let leakage = subspace_leakage(&w, &dataset.x, k_principal).map_err(CliError::Runtime)?;
    let final_c0 = trace
        .entries
        .last()
        .map(|e| e.breakdown.c0)
        .unwrap_or(f64::NAN);
    Ok((
        IcaRunMetrics {
            top10_mean: report.mean_top_k(10),
            mean_dominant: report.mean_dominant,
            dominant: report.dominant.clone(),
            angles_deg: report.angles_deg.clone(),
            leakage,
            final_c0,
        },
        report.normalized,
    ))
}

pub fn run_ica(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> CliResult<IcaArtifacts> {
    let spec_raw = cfg.ladder()?.clone();
    let optim = cfg.optim()?.clone();
    prepare_out_dir(out_dir, force)?;
    write_config_echo(cfg, out_dir)?;

    let mut data_rng = rng_from_seed(cfg.seed);
    let dataset = make_ica_dataset(&mut data_rng).map_err(CliError::Runtime)?;
    let spec = spec_raw
        .with_resolved_sigma(&dataset.x)
        .map_err(CliError::Runtime)?;
    let n_units = spec.layer_dims[1];

    let mut runs = Vec::new();
    for (label, frozen) in [("with_b", vec![]), ("no_b", vec!["dec0.lat".to_string()])] {
        let mut run_cfg = optim.clone();
        run_cfg.frozen = frozen;
        let (params, trace) = train(&spec, &dataset, &run_cfg).map_err(CliError::Runtime)?;
        let subdir = out_dir.join(label);
        std::fs::create_dir_all(&subdir)?;
        write_trace(&subdir.join("trace.jsonl"), &trace)?;
        Checkpoint::new(&spec, run_cfg.seed, &params)
            .save(&subdir.join("checkpoint.json"))
            .map_err(CliError::Runtime)?;
        let (metrics, normalized) = ica_run_metrics(&params, &dataset, &trace, n_units)?;
        csvio::write_matrix(
            &out_dir.join(format!("loadings_{label}.csv")),
            &csvio::indexed_header("src", normalized.cols()),
            &normalized,
        )
        .map_err(CliError::Runtime)?;
        runs.push(metrics);
    }

    // Random baseline over the ten non-Gaussian sources (the first ten rows
    // of the source matrix by construction).
    let mut baseline_rng = rng_from_seed(cfg.seed.wrapping_add(900_000));
    let non_gaussian: Vec<usize> = (0..10).collect();
    let baseline = random_loading_baseline(
        dataset.mixing.as_ref().expect("generator supplies mixing"),
        n_units,
        &non_gaussian,
        10,
        100,
        &mut baseline_rng,
    )
    .map_err(CliError::Runtime)?;

    let no_b = runs.pop().expect("two runs");
    let with_b = runs.pop().expect("two runs");
    let artifacts = IcaArtifacts {
        with_b,
        no_b,
        random_baseline_top10: baseline,
    };
    write_json(&out_dir.join("ica_metrics.json"), &artifacts)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// variance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateCurveStats {
    pub unit: usize,
    pub in_group_dims: Vec<usize>,
    pub out_group_dims: Vec<usize>,
    pub in_group_min_range: f64,
    /// Largest move against the expected direction on a half-axis among
    /// in-group sweeps (0 for perfectly monotone curves).
    pub in_group_monotone_violation: f64,
    pub out_group_max_range: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub seed: u64,
    /// C^(0) of the full-cost run at the two comparison epochs.
    pub full_c0: [f64; 2],
    /// C^(0) of the C^(0)-only baseline at the two comparison epochs.
    pub baseline_c0: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupSummary {
    pub eval_epochs: [usize; 2],
    pub rows: Vec<SpeedupRow>,
    /// Seeds where the full cost at the first epoch already beats the
    /// baseline at the second.
    pub wins: usize,
    pub majority: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceArtifacts {
    pub block_mean_mass: f64,
    pub block_assignment: Vec<usize>,
    pub block_mass: Vec<f64>,
    /// Monte-Carlo mean within-group mass of random orthonormal encoders.
    pub random_baseline_mass: f64,
    pub gate: GateCurveStats,
    pub speedup: SpeedupSummary,
    pub final_c0: f64,
}

impl VarianceArtifacts {
    pub fn assert_failures(&self) -> Vec<String> {
        let mut fails = Vec::new();
        if !(self.block_mean_mass >= 0.85) {
            fails.push(format!(
                "mean within-group mass {:.4} (< 0.85)",
                self.block_mean_mass
            ));
        }
        if !(self.gate.in_group_min_range > 0.3) {
            fails.push(format!(
                "in-group gate range {:.4} (<= 0.3)",
                self.gate.in_group_min_range
            ));
        }
        if !(self.gate.in_group_monotone_violation <= 0.02) {
            fails.push(format!(
                "in-group gate monotonicity violated by {:.4} (> 0.02)",
                self.gate.in_group_monotone_violation
            ));
        }
        if !(self.gate.out_group_max_range < 0.1) {
            fails.push(format!(
                "out-group gate range {:.4} (>= 0.1)",
                self.gate.out_group_max_range
            ));
        }
        if !self.speedup.majority {
            fails.push(format!(
                "speedup holds on only {}/{} seeds",
                self.speedup.wins,
                self.speedup.rows.len()
            ));
        }
        fails
    }
}

fn gate_curve_stats(score: &BlockScore, unit: usize, curves: &[ResponseCurve]) -> GateCurveStats {
    let own_group = score.assignment[unit];
    let mut in_group_dims = Vec::new();
    let mut out_group_dims = Vec::new();
    for (dim, &g) in score.assignment.iter().enumerate() {
        if g == own_group {
            in_group_dims.push(dim);
        } else {
            out_group_dims.push(dim);
        }
    }
    let range = |c: &ResponseCurve| {
        let max = c.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let min = c.values.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        max - min
    };
    // Expected shape on an in-group sweep: the gate closes as |v| grows, so
    // values rise toward v = 0 on the left half-axis and fall after it.
    let monotone_violation = |c: &ResponseCurve| {
        let mut worst = 0.0f64;
        for k in 1..c.grid.len() {
            let dv = c.values[k] - c.values[k - 1];
            if c.grid[k] <= 0.0 {
                worst = worst.max(-dv);
            }
            if c.grid[k - 1] >= 0.0 {
                worst = worst.max(dv);
            }
        }
        worst
    };
    let mut in_min_range = f64::INFINITY;
    let mut in_violation = 0.0f64;
    let mut out_max_range = 0.0f64;
    for c in curves {
        if in_group_dims.contains(&c.sweep_dim) {
            in_min_range = in_min_range.min(range(c));
            in_violation = in_violation.max(monotone_violation(c));
        } else {
            out_max_range = out_max_range.max(range(c));
        }
    }
    GateCurveStats {
        unit,
        in_group_dims,
        out_group_dims,
        in_group_min_range: in_min_range,
        in_group_monotone_violation: in_violation,
        out_group_max_range: out_max_range,
    }
}

fn c0_at(trace: &TrainTrace, epoch: usize) -> f64 {
    trace
        .entries
        .get(epoch.saturating_sub(1))
        .map(|e| e.breakdown.c0)
        .unwrap_or(f64::NAN)
}

pub fn run_variance(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> CliResult<VarianceArtifacts> {
    let spec_raw = cfg.ladder()?.clone();
    let optim = cfg.optim()?.clone();
    let speedup_cfg = cfg
        .speedup
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `speedup` section".into()))?;
    prepare_out_dir(out_dir, force)?;
    write_config_echo(cfg, out_dir)?;

    let mut data_rng = rng_from_seed(cfg.seed);
    let dataset = make_isa_dataset(&mut data_rng).map_err(CliError::Runtime)?;
    let spec = spec_raw
        .with_resolved_sigma(&dataset.x)
        .map_err(CliError::Runtime)?;

    let (params, trace) = train(&spec, &dataset, &optim).map_err(CliError::Runtime)?;
    write_trace(&out_dir.join("trace.jsonl"), &trace)?;
    Checkpoint::new(&spec, optim.seed, &params)
        .save(&out_dir.join("checkpoint.json"))
        .map_err(CliError::Runtime)?;

    // Loadings measured through the stored whitening: h1 = W (M (x - mean)),
    // so the map from sources to units is W M A_orig.
    let whitening = dataset
        .whitening
        .as_ref()
        .expect("isa dataset is whitened");
    let a_orig = dataset.mixing.as_ref().expect("generator supplies mixing");
    let groups = dataset.groups.as_ref().expect("isa dataset has groups");
    let w1 = params.matrix("enc1.w").map_err(CliError::Runtime)?;
    let w_eff = w1.matmul(&whitening.matrix).map_err(CliError::Runtime)?;
    let report = loading_report(&w_eff, a_orig).map_err(CliError::Runtime)?;
    let score = block_score(&report, groups).map_err(CliError::Runtime)?;

    // Block-ordered squared-loading matrix.
    {
        let n_src = report.normalized.cols();
        let mut m = DenseMatrix::zeros(score.display_order.len(), n_src + 2);
        for (row, &unit) in score.display_order.iter().enumerate() {
            m.set(row, 0, unit as f64);
            m.set(row, 1, score.assignment[unit] as f64);
            for j in 0..n_src {
                let v = report.normalized.get(unit, j);
                m.set(row, 2 + j, v * v);
            }
        }
        let mut header = vec!["unit".to_string(), "group".to_string()];
        header.extend(csvio::indexed_header("src", n_src));
        csvio::write_matrix(&out_dir.join("loadings_blocks.csv"), &header, &m)
            .map_err(CliError::Runtime)?;
    }

    // Random-encoder baseline for the within-group mass.
    let random_baseline_mass = {
        let a_eff = whitening
            .matrix
            .matmul(a_orig)
            .map_err(CliError::Runtime)?;
        let mut rng = rng_from_seed(cfg.seed.wrapping_add(900_000));
        let trials = 50;
        let d = a_eff.rows();
        let mut sum = 0.0;
        for _ in 0..trials {
            let g = standard_normal_matrix(d, d, &mut rng);
            let w = ladderlab::linalg::orthonormal_columns(&g)
                .map_err(CliError::Runtime)?
                .transpose();
            let rep = loading_report(&w.matmul(&a_eff).map_err(CliError::Runtime)?, &DenseMatrix::identity(a_eff.cols()))
                .map_err(CliError::Runtime)?;
            sum += block_score(&rep, groups).map_err(CliError::Runtime)?.mean_mass;
        }
        sum / trials as f64
    };

    // Gate response curves of the first hidden unit along every sweep dim.
    let unit = 0;
    let grid: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1).collect();
    let mut curves = Vec::new();
    for dim in 0..spec.layer_dims[1] {
        curves.push(
            sigmoid_response_curve(&params, &spec, unit, dim, &grid).map_err(CliError::Runtime)?,
        );
    }
    {
        let rows = curves.len() * grid.len();
        let mut m = DenseMatrix::zeros(rows, 3);
        let mut r = 0;
        for c in &curves {
            for (v, s) in c.grid.iter().zip(&c.values) {
                m.set(r, 0, c.sweep_dim as f64);
                m.set(r, 1, *v);
                m.set(r, 2, *s);
                r += 1;
            }
        }
        csvio::write_matrix(
            &out_dir.join("gate_curves.csv"),
            &["sweep_dim".into(), "v".into(), "sigma".into()],
            &m,
        )
        .map_err(CliError::Runtime)?;
    }
    let gate = gate_curve_stats(&score, unit, &curves);

    // Learning-speed study: full cost vs plain denoising autoencoder
    // (all per-layer weights zero), same seeds, same noise sequences.
    let mut baseline_spec = spec_raw.clone();
    baseline_spec.alpha = vec![0.0; baseline_spec.num_layers()];
    baseline_spec.beta0 = 0.0;
    baseline_spec.gamma0 = 0.0;
    let mut rows = Vec::new();
    let mut wins = 0;
    for i in 0..speedup_cfg.seeds {
        let data_seed = cfg.seed.wrapping_add(1000 + i as u64);
        let mut rng = rng_from_seed(data_seed);
        let ds = make_isa_dataset(&mut rng).map_err(CliError::Runtime)?;
        let full_spec = spec_raw.with_resolved_sigma(&ds.x).map_err(CliError::Runtime)?;
        let base_spec = baseline_spec
            .with_resolved_sigma(&ds.x)
            .map_err(CliError::Runtime)?;
        let mut run_cfg = optim.clone();
        run_cfg.epochs = speedup_cfg.epochs;
        run_cfg.seed = data_seed.wrapping_add(1);
        let (_, full_trace) = train(&full_spec, &ds, &run_cfg).map_err(CliError::Runtime)?;
        let (_, base_trace) = train(&base_spec, &ds, &run_cfg).map_err(CliError::Runtime)?;
        let [e1, e2] = speedup_cfg.eval_epochs;
        let row = SpeedupRow {
            seed: data_seed,
            full_c0: [c0_at(&full_trace, e1), c0_at(&full_trace, e2)],
            baseline_c0: [c0_at(&base_trace, e1), c0_at(&base_trace, e2)],
        };
        if row.full_c0[0] <= row.baseline_c0[1] {
            wins += 1;
        }
        rows.push(row);
    }
    let majority = 2 * wins > rows.len();
    let speedup = SpeedupSummary {
        eval_epochs: speedup_cfg.eval_epochs,
        rows,
        wins,
        majority,
    };
    write_json(&out_dir.join("speedup.json"), &speedup)?;

    let artifacts = VarianceArtifacts {
        block_mean_mass: score.mean_mass,
        block_assignment: score.assignment.clone(),
        block_mass: score.mass.clone(),
        random_baseline_mass,
        gate,
        speedup,
        final_c0: trace
            .entries
            .last()
            .map(|e| e.breakdown.c0)
            .unwrap_or(f64::NAN),
    };
    write_json(&out_dir.join("block_score.json"), &artifacts)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeCheck {
    pub shape: String,
    pub report: GradCheckReport,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserCheck {
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArtifacts {
    pub denoiser: DenoiserCheck,
    pub shapes: Vec<ShapeCheck>,
}

impl GradcheckArtifacts {
    pub fn assert_failures(&self) -> Vec<String> {
        let mut fails = Vec::new();
        if !self.denoiser.pass {
            fails.push(format!(
                "denoiser gradient check {:.3e} (>= {:.0e})",
                self.denoiser.max_rel_err, self.denoiser.threshold
            ));
        }
        for s in &self.shapes {
            if !s.pass {
                fails.push(format!(
                    "{} gradient check {:.3e} (>= {:.0e})",
                    s.shape, s.report.max_rel_err, s.threshold
                ));
            }
        }
        fails
    }
}

fn perturbed_params(spec: &LadderSpec, rng: &mut Prng) -> CliResult<ParamStore> {
    let mut params = init_params(spec, rng).map_err(CliError::Runtime)?;
    for v in params.flat_mut() {
        *v += 0.3 * ladderlab::data::standard_normal(rng);
    }
    Ok(params)
}

fn check_shape(
    shape: &str,
    spec: &LadderSpec,
    x: &DenseMatrix,
    n_coords: usize,
    step: f64,
    threshold: f64,
    seed: u64,
) -> CliResult<ShapeCheck> {
    let mut rng = rng_from_seed(seed);
    let params = perturbed_params(spec, &mut rng)?;
    let noise = standard_normal_matrix(x.rows(), x.cols(), &mut rng);
    let report =
        grad_check(&params, spec, x, &noise, n_coords, step, &mut rng).map_err(CliError::Runtime)?;
    Ok(ShapeCheck {
        shape: shape.to_string(),
        pass: report.max_rel_err < threshold,
        report,
        threshold,
    })
}

pub fn run_gradcheck(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> CliResult<GradcheckArtifacts> {
    let section = cfg
        .gradcheck
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no `gradcheck` section".into()))?;
    prepare_out_dir(out_dir, force)?;
    write_config_echo(cfg, out_dir)?;
    let samples = section.samples;
    let (n_coords, step) = (section.n_coords, section.step);

    // Scalar denoiser: analytic gradient against central differences.
    let denoiser = {
        let mut rng = rng_from_seed(cfg.seed);
        let x = sample_source(SourceKind::Gaussian, samples, &mut rng).map_err(CliError::Runtime)?;
        let noise: Vec<f64> = (0..samples)
            .map(|_| ladderlab::data::standard_normal(&mut rng))
            .collect();
        let x_tilde: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + n).collect();
        let xi = [0.45, 0.2, 1.1, 0.05, -0.02];
        let (_, analytic) = denoiser_cost_and_grad(&x, &x_tilde, &xi).map_err(CliError::Runtime)?;
        let mut max_rel = 0.0f64;
        for coord in 0..5 {
            let mut plus = xi;
            plus[coord] += step;
            let (fp, _) = denoiser_cost_and_grad(&x, &x_tilde, &plus).map_err(CliError::Runtime)?;
            let mut minus = xi;
            minus[coord] -= step;
            let (fm, _) = denoiser_cost_and_grad(&x, &x_tilde, &minus).map_err(CliError::Runtime)?;
            let fd = (fp - fm) / (2.0 * step);
            let rel = (fd - analytic[coord]).abs() / fd.abs().max(analytic[coord].abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        DenoiserCheck {
            max_rel_err: max_rel,
            threshold: 1e-6,
            pass: max_rel < 1e-6,
        }
    };

    // A fully linear ladder for the tight bound, then the two experiment
    // shapes with their nonlinearities.
    let linear_spec = LadderSpec {
        layer_dims: vec![15, 11],
        encoders: vec![EncoderKind::Linear],
        decoders: vec![DecoderKind::LinearLateral, DecoderKind::ScalarGain],
        alpha: vec![0.5],
        beta0: 0.8,
        gamma0: 0.3,
        sigma_corrupt: CorruptSigma::Scalar(0.5),
        eig_floor: 0.7,
    };
    let ica_spec = LadderSpec {
        decoders: vec![DecoderKind::LinearLateral, DecoderKind::TanhGain],
        ..linear_spec.clone()
    };
    let variance_spec = LadderSpec {
        layer_dims: vec![16, 16, 10],
        encoders: vec![EncoderKind::Linear, EncoderKind::SoftplusMlp { hidden: 50 }],
        decoders: vec![
            DecoderKind::LinearLateral,
            DecoderKind::SigmoidGate,
            DecoderKind::ScalarGain,
        ],
        alpha: vec![0.5, 0.5],
        beta0: 0.8,
        gamma0: 0.3,
        sigma_corrupt: CorruptSigma::Scalar(0.5),
        eig_floor: 0.7,
    };

    let mut rng = rng_from_seed(cfg.seed.wrapping_add(1));
    let ica_data = make_ica_dataset(&mut rng).map_err(CliError::Runtime)?;
    let ica_x = ica_data.x.select_cols(&(0..samples.min(ica_data.x.cols())).collect::<Vec<_>>());
    let isa_data = make_isa_dataset(&mut rng).map_err(CliError::Runtime)?;
    let isa_x = isa_data.x.select_cols(&(0..samples.min(isa_data.x.cols())).collect::<Vec<_>>());

    let shapes = vec![
        check_shape("linear", &linear_spec, &ica_x, n_coords, step, 1e-6, cfg.seed.wrapping_add(2))?,
        check_shape("ica", &ica_spec, &ica_x, n_coords, step, 1e-4, cfg.seed.wrapping_add(3))?,
        check_shape("variance", &variance_spec, &isa_x, n_coords, step, 1e-4, cfg.seed.wrapping_add(4))?,
    ];

    let artifacts = GradcheckArtifacts { denoiser, shapes };
    write_json(&out_dir.join("gradcheck.json"), &artifacts)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// show-trace
// ---------------------------------------------------------------------------

/// Render a stored trace as an aligned table.
pub fn show_trace(path: &Path, every: usize) -> CliResult<String> {
    let text = std::fs::read_to_string(path)?;
    let trace = TrainTrace::from_jsonl(&text).map_err(CliError::Runtime)?;
    let every = every.max(1);
    let mut out = String::from("epoch\ttotal\tc0\tlambda_min\tbeta\n");
    let n = trace.entries.len();
    for (i, e) in trace.entries.iter().enumerate() {
        if i % every != 0 && i != n - 1 {
            continue;
        }
        let lmin = e
            .lambda_min
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",");
        let beta = e
            .beta
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\n",
            e.epoch, e.breakdown.total, e.breakdown.c0, lmin, beta
        ));
    }
    Ok(out)
}

/// Resolve the output directory: explicit config value, else
/// `$LADDERLAB_OUT/<experiment>`, else `runs/<experiment>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &cfg.out {
        return out.clone();
    }
    let root = std::env::var("LADDERLAB_OUT").unwrap_or_else(|_| "runs".to_string());
    Path::new(&root).join(cfg.experiment.name())
}

/// Used by tests and the speedup study to confirm determinism claims hold at
/// the artifact level.
pub fn dir_digest(dir: &Path) -> CliResult<Vec<(String, u64, u32)>> {
    fn walk(dir: &Path, base: &Path, acc: &mut Vec<(String, u64, u32)>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(&path, base, acc)?;
            } else {
                let bytes = std::fs::read(&path)?;
                let mut hash: u32 = 2166136261;
                for b in &bytes {
                    hash ^= *b as u32;
                    hash = hash.wrapping_mul(16777619);
                }
                let rel = path.strip_prefix(base).unwrap_or(&path);
                acc.push((rel.display().to_string(), bytes.len() as u64, hash));
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc)?;
    Ok(acc)
}

