//! Seeded generation of the synthetic datasets: the scalar source families,
//! the 15-source linear ICA mixture and the 16-source independent-subspace
//! (variance-modulated) dataset, plus input corruption and dataset
//! import/export.
//!
//! All randomness flows through an explicitly seeded ChaCha8 generator
//! ([`Prng`]); there is no global RNG and every generator is reproducible
//! bit-for-bit from its seed.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::linalg::{det, pca_whiten, DenseMatrix, DenseVector, WhiteningTransform};

/// The one RNG used everywhere: ChaCha8, a counter-based stream cipher
/// generator with a portable, documented output stream.
pub type Prng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Number of samples in both synthetic experiment datasets.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Marginal source families. All produce zero-mean, unit-variance samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Standard normal.
    Gaussian,
    /// Laplace with scale 1/sqrt(2), so the variance is one.
    LaplaceUnit,
    /// sqrt(2) * sin(U[0, 2pi)): the unit-variance arcsine (sub-Gaussian) law.
    SinusoidUnit,
    /// Gaussian scale mixture e^{v/2} z with v, z standard normal, rescaled by
    /// e^{-1/4} to unit variance. The payload names the variance group the
    /// source belongs to in the joint ISA dataset, where the modulation is
    /// shared within a group and left unscaled.
    VarianceModulated(usize),
}

/// One generated dataset: observations plus whatever ground truth the
/// generator knows.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Observations, one column per sample (d x T).
    pub x: DenseMatrix,
    /// Original sources (n x T) when known.
    pub sources: Option<DenseMatrix>,
    /// Original mixing matrix (d x n) when known.
    pub mixing: Option<DenseMatrix>,
    /// Disjoint source index groups covering 0..n, when the model has
    /// subspace structure.
    pub groups: Option<Vec<Vec<usize>>>,
    /// Whitening applied to the observations after mixing, when any.
    pub whitening: Option<WhiteningTransform>,
}

/// Generator metadata stored in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: u64,
}

pub fn standard_normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

/// d x T matrix of standard normal draws, filled row by row.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut Prng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    DenseMatrix::new(rows, cols, data).expect("sized by construction")
}

fn sample_one(kind: SourceKind, rng: &mut Prng) -> f64 {
    match kind {
        SourceKind::Gaussian => standard_normal(rng),
        SourceKind::LaplaceUnit => {
            // Exponential with scale 1/sqrt(2), random sign.
            let b = 1.0 / std::f64::consts::SQRT_2;
            let u: f64 = rng.random();
            let e = -b * (1.0 - u).ln();
            if rng.random::<bool>() {
                e
            } else {
                -e
            }
        }
        SourceKind::SinusoidUnit => {
            let u: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            std::f64::consts::SQRT_2 * u.sin()
        }
        SourceKind::VarianceModulated(_) => {
            let v = standard_normal(rng);
            let z = standard_normal(rng);
            (0.5 * v).exp() * z * (-0.25f64).exp()
        }
    }
}

/// Draw `n` samples of the given marginal family.
pub fn sample_source(kind: SourceKind, n: usize, rng: &mut Prng) -> Result<DenseVector> {
    if n == 0 {
        return Err(Error::arg("sample_source: n must be >= 1"));
    }
    Ok((0..n).map(|_| sample_one(kind, rng)).collect())
}

/// Gaussian mixing matrix, resampled until it is comfortably nonsingular:
/// |det A| must exceed 1e-6 times the product of its column norms.
fn conditioned_mixing(d: usize, n: usize, rng: &mut Prng) -> Result<DenseMatrix> {
    loop {
        let a = standard_normal_matrix(d, n, rng);
        if d != n {
            return Ok(a);
        }
        let col_norm_product: f64 = (0..n)
            .map(|j| (0..d).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
            .product();
        if det(&a)?.abs() > 1e-6 * col_norm_product {
            return Ok(a);
        }
    }
}

/// The linear ICA dataset: 15 sources (5 Laplace, 5 sinusoid, 5 Gaussian),
/// 10,000 samples, Gaussian mixing, observations left unwhitened.
pub fn make_ica_dataset(rng: &mut Prng) -> Result<Dataset> {
    let n = 15;
    let t = DEFAULT_SAMPLES;
    let kinds: Vec<SourceKind> = (0..n)
        .map(|i| match i / 5 {
            0 => SourceKind::LaplaceUnit,
            1 => SourceKind::SinusoidUnit,
            _ => SourceKind::Gaussian,
        })
        .collect();
    let mut s = DenseMatrix::zeros(n, t);
    for (i, &kind) in kinds.iter().enumerate() {
        let row = sample_source(kind, t, rng)?;
        s.row_mut(i).copy_from_slice(&row);
    }
    let a = conditioned_mixing(n, n, rng)?;
    let x = a.matmul(&s)?;
    x.validate_finite("make_ica_dataset")?;
    Ok(Dataset {
        x,
        sources: Some(s),
        mixing: Some(a),
        groups: None,
        whitening: None,
    })
}

/// The independent-subspace dataset: four variance sources, each driving a
/// group of four Gaussian sources through sigma^2 = e^v, mixed by a Gaussian
/// matrix and then PCA-whitened.
pub fn make_isa_dataset(rng: &mut Prng) -> Result<Dataset> {
    let n_groups = 4;
    let group_size = 4;
    let n = n_groups * group_size;
    let t = DEFAULT_SAMPLES;

    // Variance sources first (one row per group), then the modulated sources.
    let v = standard_normal_matrix(n_groups, t, rng);
    let z = standard_normal_matrix(n, t, rng);
    let mut s = DenseMatrix::zeros(n, t);
    for i in 0..n {
        let g = i / group_size;
        let vrow = v.row(g);
        let zrow = z.row(i);
        let srow = s.row_mut(i);
        for j in 0..t {
            srow[j] = (0.5 * vrow[j]).exp() * zrow[j];
        }
    }
    let groups: Vec<Vec<usize>> = (0..n_groups)
        .map(|g| (g * group_size..(g + 1) * group_size).collect())
        .collect();

    let a = conditioned_mixing(n, n, rng)?;
    let mixed = a.matmul(&s)?;
    let (x, whitening) = pca_whiten(&mixed)?;
    Ok(Dataset {
        x,
        sources: Some(s),
        mixing: Some(a),
        groups: Some(groups),
        whitening: Some(whitening),
    })
}

/// Add `sigma[i] * noise[i][t]` to every entry, with `noise` already drawn.
pub fn corrupt_with(x: &DenseMatrix, sigma: &[f64], noise: &DenseMatrix) -> Result<DenseMatrix> {
    if sigma.len() != x.rows() {
        return Err(Error::dim(format!(
            "corrupt: {} sigmas for {} rows",
            sigma.len(),
            x.rows()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::arg(format!("corrupt: negative noise std {s}")));
    }
    if noise.rows() != x.rows() || noise.cols() != x.cols() {
        return Err(Error::dim("corrupt: noise shape mismatch"));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let s = sigma[i];
        if s == 0.0 {
            continue;
        }
        let nrow = noise.row(i);
        for (o, &nv) in out.row_mut(i).iter_mut().zip(nrow) {
            *o += s * nv;
        }
    }
    Ok(out)
}

/// Additive Gaussian corruption with fresh draws from `rng`.
pub fn corrupt(x: &DenseMatrix, sigma: &[f64], rng: &mut Prng) -> Result<DenseMatrix> {
    let noise = standard_normal_matrix(x.rows(), x.cols(), rng);
    corrupt_with(x, sigma, &noise)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    seed: u64,
    dims: Dims,
    groups: Option<Vec<Vec<usize>>>,
    whitening: Option<WhiteningTransform>,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    d: usize,
    t: usize,
    n_sources: Option<usize>,
}

impl Dataset {
    /// Write the dataset as a directory of CSV files plus a JSON manifest.
    /// CSV files hold one sample per row; see the README for the layout.
    pub fn save(&self, meta: &DatasetMeta, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let xt = self.x.transpose();
        csvio::write_matrix(
            &dir.join("X.csv"),
            &csvio::indexed_header("x", xt.cols()),
            &xt,
        )?;
        if let Some(s) = &self.sources {
            let st = s.transpose();
            csvio::write_matrix(
                &dir.join("S.csv"),
                &csvio::indexed_header("s", st.cols()),
                &st,
            )?;
        }
        if let Some(a) = &self.mixing {
            csvio::write_matrix(
                &dir.join("A.csv"),
                &csvio::indexed_header("a", a.cols()),
                a,
            )?;
        }
        if let Some(groups) = &self.groups {
            let mut text = String::from("group,source\n");
            for (g, members) in groups.iter().enumerate() {
                for &i in members {
                    text.push_str(&format!("{g},{i}\n"));
                }
            }
            fs::write(dir.join("groups.csv"), text)?;
        }
        let manifest = Manifest {
            version: 1,
            kind: meta.kind.clone(),
            seed: meta.seed,
            dims: Dims {
                d: self.x.rows(),
                t: self.x.cols(),
                n_sources: self.sources.as_ref().map(|s| s.rows()),
            },
            groups: self.groups.clone(),
            whitening: self.whitening.clone(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != 1 {
            return Err(Error::Parse(format!(
                "unsupported dataset manifest version {}",
                manifest.version
            )));
        }
        let (_, xt) = csvio::read_matrix(&dir.join("X.csv"))?;
        let x = xt.transpose();
        if x.rows() != manifest.dims.d || x.cols() != manifest.dims.t {
            return Err(Error::Parse("X.csv shape disagrees with manifest".into()));
        }
        let sources = if dir.join("S.csv").exists() {
            Some(csvio::read_matrix(&dir.join("S.csv"))?.1.transpose())
        } else {
            None
        };
        let mixing = if dir.join("A.csv").exists() {
            Some(csvio::read_matrix(&dir.join("A.csv"))?.1)
        } else {
            None
        };
        let dataset = Dataset {
            x,
            sources,
            mixing,
            groups: manifest.groups,
            whitening: manifest.whitening,
        };
        Ok((
            dataset,
            DatasetMeta {
                kind: manifest.kind,
                seed: manifest.seed,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn variance(v: &[f64]) -> f64 {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    fn excess_kurtosis(v: &[f64]) -> f64 {
        let m = mean(v);
        let var = variance(v);
        let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
        m4 / (var * var) - 3.0
    }

    #[test]
    fn source_moments() {
        // Moment checks at n = 1e5 for 10 distinct seeds.
        for seed in 0..10u64 {
            let mut rng = rng_from_seed(seed);
            let n = 100_000;

            let g = sample_source(SourceKind::Gaussian, n, &mut rng).unwrap();
            assert!(mean(&g).abs() < 0.02, "gaussian mean, seed {seed}");
            assert!((variance(&g) - 1.0).abs() < 0.05, "gaussian var, seed {seed}");

            let l = sample_source(SourceKind::LaplaceUnit, n, &mut rng).unwrap();
            assert!(mean(&l).abs() < 0.02, "laplace mean, seed {seed}");
            assert!((variance(&l) - 1.0).abs() < 0.05, "laplace var, seed {seed}");
            // Laplace excess kurtosis is 3; the estimator is heavy-tailed.
            assert!(
                (excess_kurtosis(&l) - 3.0).abs() < 0.6,
                "laplace kurtosis {} at seed {seed}",
                excess_kurtosis(&l)
            );

            let s = sample_source(SourceKind::SinusoidUnit, n, &mut rng).unwrap();
            assert!(mean(&s).abs() < 0.02, "sinusoid mean, seed {seed}");
            assert!((variance(&s) - 1.0).abs() < 0.05, "sinusoid var, seed {seed}");
            // E[x^4] = 4 E[sin^4] = 1.5, so excess kurtosis is -1.5.
            assert!(
                (excess_kurtosis(&s) + 1.5).abs() < 0.1,
                "sinusoid kurtosis {} at seed {seed}",
                excess_kurtosis(&s)
            );

            let vm = sample_source(SourceKind::VarianceModulated(0), n, &mut rng).unwrap();
            assert!(mean(&vm).abs() < 0.03, "scale-mixture mean, seed {seed}");
            assert!(
                (variance(&vm) - 1.0).abs() < 0.05,
                "scale-mixture var {} at seed {seed}",
                variance(&vm)
            );
        }
    }

    #[test]
    fn sample_source_rejects_zero_n() {
        let mut rng = rng_from_seed(0);
        assert!(sample_source(SourceKind::Gaussian, 0, &mut rng).is_err());
    }

    #[test]
    fn ica_dataset_shape_and_reconstruction() {
        let mut rng = rng_from_seed(11);
        let ds = make_ica_dataset(&mut rng).unwrap();
        assert_eq!((ds.x.rows(), ds.x.cols()), (15, 10_000));
        let s = ds.sources.as_ref().unwrap();
        assert_eq!((s.rows(), s.cols()), (15, 10_000));
        assert!(ds.groups.is_none());
        assert!(ds.whitening.is_none());
        // X = A S exactly (same floating-point product).
        let recon = ds.mixing.as_ref().unwrap().matmul(s).unwrap();
        assert_eq!(recon.data(), ds.x.data());
    }

    #[test]
    fn ica_dataset_is_not_white() {
        let mut rng = rng_from_seed(12);
        let ds = make_ica_dataset(&mut rng).unwrap();
        let cov = crate::linalg::covariance(&ds.x, true).unwrap();
        let dev = cov
            .sub(&DenseMatrix::identity(15))
            .unwrap()
            .frob_norm();
        assert!(dev > 1.0, "mixture unexpectedly white: {dev}");
    }

    #[test]
    fn isa_dataset_structure() {
        let mut rng = rng_from_seed(13);
        let ds = make_isa_dataset(&mut rng).unwrap();
        assert_eq!((ds.x.rows(), ds.x.cols()), (16, 10_000));
        let cov = crate::linalg::covariance(&ds.x, true).unwrap();
        let dev = cov.sub(&DenseMatrix::identity(16)).unwrap().frob_norm();
        assert!(dev < 1e-8, "whitened covariance off identity by {dev}");

        let groups = ds.groups.as_ref().unwrap();
        assert_eq!(groups.len(), 4);
        let mut seen = vec![false; 16];
        for g in groups {
            assert_eq!(g.len(), 4);
            for &i in g {
                assert!(!seen[i], "groups overlap at {i}");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b), "groups do not cover 0..16");

        // Every source marginal is super-Gaussian. Oracle: the kurtosis of a
        // Gaussian scale mixture e^{v/2} z is 3 e, i.e. excess about 5.15.
        let s = ds.sources.as_ref().unwrap();
        for i in 0..16 {
            let k = excess_kurtosis(s.row(i));
            assert!(k > 0.5, "source {i} excess kurtosis {k} not super-Gaussian");
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let a = make_isa_dataset(&mut rng_from_seed(42)).unwrap();
        let b = make_isa_dataset(&mut rng_from_seed(42)).unwrap();
        assert_eq!(a.x.data(), b.x.data());
        assert_eq!(
            a.sources.as_ref().unwrap().data(),
            b.sources.as_ref().unwrap().data()
        );
        let c = make_ica_dataset(&mut rng_from_seed(42)).unwrap();
        let d = make_ica_dataset(&mut rng_from_seed(42)).unwrap();
        assert_eq!(c.x.data(), d.x.data());
    }

    #[test]
    fn corrupt_zero_sigma_is_identity() {
        let mut rng = rng_from_seed(1);
        let x = standard_normal_matrix(3, 100, &mut rng);
        let noisy = corrupt(&x, &[0.0; 3], &mut rng).unwrap();
        assert_eq!(noisy.data(), x.data());
    }

    #[test]
    fn corrupt_pure_noise_variance() {
        let mut rng = rng_from_seed(2);
        let x = DenseMatrix::zeros(1, 100_000);
        let noisy = corrupt(&x, &[1.0], &mut rng).unwrap();
        let var = noisy.row(0).iter().map(|v| v * v).sum::<f64>() / 100_000.0;
        assert!((var - 1.0).abs() < 0.05, "noise variance {var}");
    }

    #[test]
    fn corrupt_adds_variance() {
        let mut rng = rng_from_seed(3);
        let x = standard_normal_matrix(1, 100_000, &mut rng);
        let noisy = corrupt(&x, &[1.0], &mut rng).unwrap();
        let var = noisy.row(0).iter().map(|v| v * v).sum::<f64>() / 100_000.0;
        assert!((var - 2.0).abs() < 0.1, "corrupted variance {var}");
    }

    #[test]
    fn corrupt_rejects_negative_sigma() {
        let mut rng = rng_from_seed(4);
        let x = DenseMatrix::zeros(1, 10);
        assert!(matches!(
            corrupt(&x, &[-0.5], &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn dataset_roundtrip() {
        let mut rng = rng_from_seed(21);
        let ds = make_isa_dataset(&mut rng).unwrap();
        let meta = DatasetMeta {
            kind: "variance".into(),
            seed: 21,
        };
        let dir = std::env::temp_dir().join("ladderlab_dataset_roundtrip");
        std::fs::remove_dir_all(&dir).ok();
        ds.save(&meta, &dir).unwrap();
        let (back, meta2) = Dataset::load(&dir).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.x.data(), ds.x.data());
        assert_eq!(
            back.sources.as_ref().unwrap().data(),
            ds.sources.as_ref().unwrap().data()
        );
        assert_eq!(
            back.mixing.as_ref().unwrap().data(),
            ds.mixing.as_ref().unwrap().data()
        );
        assert_eq!(back.groups, ds.groups);
        assert_eq!(back.whitening, ds.whitening);
        std::fs::remove_dir_all(&dir).ok();
    }
}
