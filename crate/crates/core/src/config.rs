//! Experiment configuration: JSON schema, resolution of defaults, content
//! hashing and random instance generation.
//!
//! Matrices are stored row-major with explicit `n` and `d`; nothing is
//! inferred from array lengths.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::AlgoConfig;
use crate::control::{self, SystemSpec, DEFAULT_DARE_MAX_ITERS, DEFAULT_DARE_TOL};
use crate::error::{invalid, Result};
use crate::linalg;
use crate::sysid::DEFAULT_RANK_TOL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub algo: AlgoSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub sigma_eps: f64,
    /// Defaults to the origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    #[serde(rename = "K0")]
    pub k0: Vec<f64>,
    #[serde(rename = "C_x")]
    pub c_x: f64,
    #[serde(rename = "C_K")]
    pub c_k: f64,
    pub sigma_eta: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_dare_tol")]
    pub dare_tol: f64,
    #[serde(default = "default_dare_max_iters")]
    pub dare_max_iters: usize,
}

/// Replicate ids, either `0..count` or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    Count(u64),
    List(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "T_grid", default = "default_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: SeedSpec,
    /// Master seed shared by every replicate of the sweep.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub coupled: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_grid: default_grid(),
            seeds: default_seeds(),
            seed: 0,
            coupled: true,
        }
    }
}

fn default_output_dir() -> String {
    "results".to_string()
}
fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}
fn default_dare_tol() -> f64 {
    DEFAULT_DARE_TOL
}
fn default_dare_max_iters() -> usize {
    DEFAULT_DARE_MAX_ITERS
}
fn default_grid() -> Vec<usize> {
    (10..=17).map(|e| 1usize << e).collect()
}
fn default_seeds() -> SeedSpec {
    SeedSpec::Count(50)
}
fn default_true() -> bool {
    true
}

impl SeedSpec {
    pub fn replicate_ids(&self) -> Vec<u64> {
        match self {
            SeedSpec::Count(n) => (0..*n).collect(),
            SeedSpec::List(ids) => ids.clone(),
        }
    }
}

impl ExperimentConfig {
    /// Parses, validates and resolves defaults.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.resolved()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses and checks shapes only; `K0` is not required to stabilize.
    /// Enough for commands that only look at the true system.
    pub fn from_json_str_unchecked(s: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.fill_defaults();
        cfg.validate_shapes()?;
        Ok(cfg)
    }

    fn fill_defaults(&mut self) {
        if self.system.x0.is_none() {
            self.system.x0 = Some(vec![0.0; self.system.n]);
        }
    }

    /// Fills optional fields and validates every invariant.
    pub fn resolved(mut self) -> Result<Self> {
        self.fill_defaults();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        let spec = self.system_spec()?;
        let algo = self.algo_config()?;
        if !control::check_stabilizing(&spec.a, &spec.b, &algo.k0, 0.0)? {
            return Err(invalid("K0 does not stabilize (A, B)"));
        }
        Ok(())
    }

    fn validate_shapes(&self) -> Result<()> {
        let s = &self.system;
        let (n, d) = (s.n, s.d);
        if n == 0 || d == 0 {
            return Err(invalid("n and d must be positive"));
        }
        let expect = |name: &str, len: usize, want: usize| {
            if len == want {
                Ok(())
            } else {
                Err(invalid(format!("{name} has {len} entries, expected {want}")))
            }
        };
        expect("A", s.a.len(), n * n)?;
        expect("B", s.b.len(), n * d)?;
        expect("Q", s.q.len(), n * n)?;
        expect("R", s.r.len(), d * d)?;
        if let Some(x0) = &s.x0 {
            expect("x0", x0.len(), n)?;
        }
        expect("K0", self.algo.k0.len(), d * n)?;
        let grid = &self.sweep.t_grid;
        if grid.is_empty() || grid.iter().any(|&t| t < 2) || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("T_grid must be non-empty, strictly increasing and >= 2"));
        }
        if self.sweep.seeds.replicate_ids().is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        Ok(())
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let s = &self.system;
        let x0 = match &s.x0 {
            Some(v) => DVector::from_row_slice(v),
            None => DVector::zeros(s.n),
        };
        SystemSpec::new(
            linalg::from_row_major(s.n, s.n, &s.a)?,
            linalg::from_row_major(s.n, s.d, &s.b)?,
            linalg::from_row_major(s.n, s.n, &s.q)?,
            linalg::from_row_major(s.d, s.d, &s.r)?,
            s.sigma_eps,
            x0,
        )
    }

    pub fn algo_config(&self) -> Result<AlgoConfig> {
        let a = &self.algo;
        let cfg = AlgoConfig {
            k0: linalg::from_row_major(self.system.d, self.system.n, &a.k0)?,
            c_x: a.c_x,
            c_k: a.c_k,
            sigma_eta: a.sigma_eta,
            rank_tol: a.rank_tol,
            dare_tol: a.dare_tol,
            dare_max_iters: a.dare_max_iters,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the compact JSON of the resolved config, hex encoded.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// The scalar benchmark: `a = 0.5`, `b = q = r = 1`, unit noise, `K0 = 0`.
    pub fn scalar_benchmark() -> Self {
        ExperimentConfig {
            system: SystemConfig {
                n: 1,
                d: 1,
                a: vec![0.5],
                b: vec![1.0],
                q: vec![1.0],
                r: vec![1.0],
                sigma_eps: 1.0,
                x0: Some(vec![0.0]),
            },
            algo: AlgoSection {
                k0: vec![0.0],
                c_x: 20.0,
                c_k: 5.0,
                sigma_eta: 1.0,
                rank_tol: DEFAULT_RANK_TOL,
                dare_tol: DEFAULT_DARE_TOL,
                dare_max_iters: DEFAULT_DARE_MAX_ITERS,
            },
            sweep: SweepConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// Random instance with Gaussian `A`, `B`, `A` rescaled to spectral radius
/// `radius`, identity costs and `K0 = 0`.
pub fn generate_system(n: usize, d: usize, radius: f64, seed: u64) -> Result<ExperimentConfig> {
    if n == 0 || d == 0 {
        return Err(invalid("n and d must be positive"));
    }
    if !(radius > 0.0 && radius < 1.0) {
        return Err(invalid("spectral radius must lie in (0, 1) so that K0 = 0 stabilizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize| {
        DMatrix::from_fn(rows, cols, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    };
    let mut a = gaussian(n, n);
    let mut rho = control::spectral_radius(&a)?;
    while rho < 1e-8 {
        a = gaussian(n, n);
        rho = control::spectral_radius(&a)?;
    }
    a *= radius / rho;
    let b = gaussian(n, d);
    let q = DMatrix::identity(n, n);
    let r = DMatrix::identity(d, d);
    let k0 = DMatrix::zeros(d, n);
    if !control::check_stabilizing(&a, &b, &k0, 0.0)? {
        return Err(invalid("generated system is not stabilized by K0 = 0"));
    }
    let k = control::solve_dare(&a, &b, &q, &r, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITERS)?.k;
    let c_k = (2.0 * linalg::spectral_norm(&k)).max(5.0);
    let cfg = ExperimentConfig {
        system: SystemConfig {
            n,
            d,
            a: linalg::to_row_major(&a),
            b: linalg::to_row_major(&b),
            q: linalg::to_row_major(&q),
            r: linalg::to_row_major(&r),
            sigma_eps: 1.0,
            x0: Some(vec![0.0; n]),
        },
        algo: AlgoSection {
            k0: linalg::to_row_major(&k0),
            c_x: 20.0,
            c_k,
            sigma_eta: 1.0,
            rank_tol: DEFAULT_RANK_TOL,
            dare_tol: DEFAULT_DARE_TOL,
            dare_max_iters: DEFAULT_DARE_MAX_ITERS,
        },
        sweep: SweepConfig::default(),
        output_dir: default_output_dir(),
    };
    cfg.resolved()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "system": {"n": 1, "d": 1, "A": [0.5], "B": [1.0], "Q": [1.0], "R": [1.0], "sigma_eps": 1.0},
        "algo": {"K0": [0.0], "C_x": 20.0, "C_K": 5.0, "sigma_eta": 1.0}
    }"#;

    #[test]
    fn defaults_are_resolved() {
        let cfg = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        assert_eq!(cfg.system.x0, Some(vec![0.0]));
        assert_eq!(cfg.sweep.t_grid.first(), Some(&1024));
        assert_eq!(cfg.sweep.t_grid.last(), Some(&131_072));
        assert_eq!(cfg.sweep.seeds, SeedSpec::Count(50));
        assert!(cfg.sweep.coupled);
        assert_eq!(cfg.algo.dare_tol, 1e-12);
        assert_eq!(cfg, ExperimentConfig::scalar_benchmark());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let bad = MINIMAL.replace("\"A\": [0.5]", "\"A\": [0.5, 0.1]");
        assert!(ExperimentConfig::from_json_str(&bad).is_err());
        let bad = MINIMAL.replace("\"K0\": [0.0]", "\"K0\": []");
        assert!(ExperimentConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn unknown_fields_and_bad_grids_are_rejected() {
        let bad = MINIMAL.replace("\"sigma_eps\"", "\"sigma_epsilon\"");
        assert!(ExperimentConfig::from_json_str(&bad).is_err());
        let mut cfg = ExperimentConfig::scalar_benchmark();
        cfg.sweep.t_grid = vec![8, 8];
        assert!(cfg.clone().resolved().is_err());
        cfg.sweep.t_grid = vec![1, 8];
        assert!(cfg.resolved().is_err());
    }

    #[test]
    fn destabilizing_k0_is_rejected() {
        let bad = MINIMAL.replace("\"A\": [0.5]", "\"A\": [1.5]");
        assert!(ExperimentConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn seed_list_or_count() {
        let cfg = MINIMAL.replace(
            "\"algo\"",
            "\"sweep\": {\"T_grid\": [4, 8], \"seeds\": [3, 9]}, \"algo\"",
        );
        let cfg = ExperimentConfig::from_json_str(&cfg).unwrap();
        assert_eq!(cfg.sweep.seeds.replicate_ids(), vec![3, 9]);
        assert_eq!(SeedSpec::Count(3).replicate_ids(), vec![0, 1, 2]);
    }

    #[test]
    fn hash_tracks_resolved_fields() {
        let base = ExperimentConfig::scalar_benchmark();
        let mut other = base.clone();
        assert_eq!(base.config_hash(), other.config_hash());
        other.algo.c_x = 21.0;
        assert_ne!(base.config_hash(), other.config_hash());
        // an omitted x0 and an explicit zero x0 resolve to the same config
        let explicit = MINIMAL.replace("\"sigma_eps\": 1.0", "\"sigma_eps\": 1.0, \"x0\": [0.0]");
        assert_eq!(
            ExperimentConfig::from_json_str(&explicit).unwrap().config_hash(),
            base.config_hash()
        );
    }

    #[test]
    fn generated_scalar_system_has_requested_radius() {
        let cfg = generate_system(1, 1, 0.5, 17).unwrap();
        assert!((cfg.system.a[0].abs() - 0.5).abs() < 1e-12);
        assert_eq!(cfg.algo.k0, vec![0.0]);
        assert_eq!(generate_system(1, 1, 0.5, 17).unwrap(), cfg);
        assert!(generate_system(1, 1, 1.0, 17).is_err());
        assert!(generate_system(0, 1, 0.5, 17).is_err());
    }
}
