//! Experiment configuration: JSON schema, validation, and builders that
//! turn config fragments into core model objects.
//!
//! The schema is documented field by field in the repository README; every
//! example config under `configs/` parses with this module.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use blockbp_core::linalg::SquareMatrix;
use blockbp_core::model;
use blockbp_core::{ModelSpec, NoiseMatrix, Spectrum, TransitionSpec};

/// Which driver a config feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CheckModel,
    TreeMoments,
    TreeRecon,
    Contraction,
    SbmRecon,
}

impl ExperimentKind {
    /// The tag used in reports, seed derivation, and the CLI subcommand.
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::CheckModel => "check-model",
            ExperimentKind::TreeMoments => "tree-moments",
            ExperimentKind::TreeRecon => "tree-recon",
            ExperimentKind::Contraction => "contraction",
            ExperimentKind::SbmRecon => "sbm-recon",
        }
    }
}

/// Model parameters in any of the three supported shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelConfig {
    /// Uniform prior, rate `a` within a community and `b` across.
    Symmetric { q: usize, a: f64, b: f64, n: usize },
    /// Arbitrary prior and symmetric rate matrix (rows of length `q`).
    Explicit { q: usize, pi: Vec<f64>, q_scaled: Vec<Vec<f64>>, n: usize },
    /// Rank-one transition plus `scale * m`, rates reconstructed from the
    /// target mean degree `d`.
    Perturbation { pi: Vec<f64>, m: Vec<Vec<f64>>, scale: f64, d: f64, n: usize },
}

impl ModelConfig {
    pub fn n(&self) -> usize {
        match *self {
            ModelConfig::Symmetric { n, .. } => n,
            ModelConfig::Explicit { n, .. } => n,
            ModelConfig::Perturbation { n, .. } => n,
        }
    }
}

/// Observation noise in any of the three supported shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NoiseConfig {
    Identity,
    /// `keep` on the diagonal plus `(1 - keep) / q` everywhere.
    UniformFlip { keep: f64 },
    Explicit { rows: Vec<Vec<f64>> },
}

/// Inclusive depth (or level index) range.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: usize,
    pub max: usize,
}

impl DepthRange {
    pub fn iter(self) -> impl Iterator<Item = usize> {
        self.min..=self.max
    }
}

/// A pre-sampled graph on disk instead of in-process sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphFiles {
    pub edges: PathBuf,
    pub labels: PathBuf,
}

/// Report destinations named by the config itself (the `--out` flag adds
/// a directory on top).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OutputPaths {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
}

/// Root-label estimators the tree-reconstruction sweep can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Majority,
    Iterated,
    Bp,
    BpNoisy,
}

impl MethodName {
    pub fn tag(self) -> &'static str {
        match self {
            MethodName::Majority => "majority",
            MethodName::Iterated => "iterated",
            MethodName::Bp => "bp",
            MethodName::BpNoisy => "bp-noisy",
        }
    }
}

/// One experiment, fully specified. The master seed plus this struct
/// determine every byte of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelConfig,
    /// Master seed; per-experiment and per-trial streams are derived by
    /// hashing, so unrelated rows never share randomness.
    pub seed: u64,
    #[serde(default)]
    pub trials: Option<u64>,
    #[serde(default)]
    pub depths: Option<DepthRange>,
    /// Meeting-depth offset for leaf-pair path rows.
    #[serde(default)]
    pub ell: Option<usize>,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    /// Explicit neighborhood radius; derived from the model when absent.
    #[serde(default)]
    pub radius: Option<usize>,
    /// Independent graph samples for the reconstruction experiment.
    #[serde(default)]
    pub graph_seeds: Option<u64>,
    /// Reuse one global partition per graph instead of re-partitioning
    /// around every vertex.
    #[serde(default)]
    pub approx_blackbox: bool,
    #[serde(default)]
    pub methods: Option<Vec<MethodName>>,
    #[serde(default)]
    pub graph: Option<GraphFiles>,
    #[serde(default)]
    pub output: Option<OutputPaths>,
}

impl ExperimentConfig {
    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Structural checks that do not need the model built.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.trials {
            if t < 1 {
                bail!("trials must be at least 1");
            }
        }
        if let Some(d) = self.depths {
            if d.min > d.max {
                bail!("depth range is empty ({} > {})", d.min, d.max);
            }
        }
        if let Some(e) = self.ell {
            if e < 1 {
                bail!("ell must be at least 1");
            }
        }
        if let Some(g) = &self.graph {
            for p in [&g.edges, &g.labels] {
                if !p.exists() {
                    bail!("referenced file {} does not exist", p.display());
                }
            }
        }
        match self.experiment {
            ExperimentKind::Contraction => {
                if self.noise.is_none() {
                    bail!("contraction requires a noise matrix");
                }
                if self.effective_trials() < 1000 {
                    bail!("contraction needs at least 1000 trials");
                }
            }
            ExperimentKind::TreeRecon => {
                if self.effective_trials() < 100 {
                    bail!("tree reconstruction needs at least 100 trials");
                }
                if let Some(methods) = &self.methods {
                    if methods.contains(&MethodName::BpNoisy) && self.noise.is_none() {
                        bail!("the bp-noisy method requires a noise matrix");
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Trial count with the per-experiment default applied.
    pub fn effective_trials(&self) -> u64 {
        self.trials.unwrap_or(match self.experiment {
            ExperimentKind::CheckModel => 1,
            ExperimentKind::TreeMoments => 20_000,
            ExperimentKind::TreeRecon => 2_000,
            ExperimentKind::Contraction => 20_000,
            ExperimentKind::SbmRecon => 2_000,
        })
    }

    /// Depth range with the per-experiment default applied.
    pub fn effective_depths(&self) -> DepthRange {
        self.depths.unwrap_or(match self.experiment {
            ExperimentKind::TreeRecon => DepthRange { min: 0, max: 4 },
            ExperimentKind::Contraction => DepthRange { min: 1, max: 4 },
            _ => DepthRange { min: 1, max: 3 },
        })
    }

    /// Canonical serialization used for the provenance hash. Field order
    /// is declaration order, so the bytes are stable across runs.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Builds the model triple shared by every driver.
    pub fn build_model(&self) -> Result<(ModelSpec, TransitionSpec, Spectrum)> {
        let spec = match &self.model {
            ModelConfig::Symmetric { q, a, b, n } => {
                ModelSpec::symmetric(*q, *a, *b, *n).map_err(|e| anyhow!("invalid model: {e}"))?
            }
            ModelConfig::Explicit { q, pi, q_scaled, n } => {
                let m = square_from_rows(*q, q_scaled, "q_scaled")?;
                ModelSpec::new(*q, pi.clone(), m, *n)
                    .map_err(|e| anyhow!("invalid model: {e}"))?
            }
            ModelConfig::Perturbation { pi, m, scale, d, n } => {
                let q = pi.len();
                let mat = square_from_rows(q, m, "m")?;
                let (spec, _) = model::perturbation_family(pi, &mat, *scale, *d, *n)
                    .map_err(|e| anyhow!("invalid perturbation model: {e}"))?;
                spec
            }
        };
        let t = model::derive_transition(&spec).map_err(|e| anyhow!("invalid model: {e}"))?;
        let s = model::eigendecompose(&t, spec.pi())
            .map_err(|e| anyhow!("invalid model: {e}"))?;
        Ok((spec, t, s))
    }

    /// Builds the configured noise matrix, if any.
    pub fn build_noise(&self, q: usize) -> Result<Option<NoiseMatrix>> {
        let Some(cfg) = &self.noise else { return Ok(None) };
        let delta = match cfg {
            NoiseConfig::Identity => NoiseMatrix::identity(q),
            NoiseConfig::UniformFlip { keep } => NoiseMatrix::uniform_flip(q, *keep)
                .map_err(|e| anyhow!("invalid noise: {e}"))?,
            NoiseConfig::Explicit { rows } => {
                let m = square_from_rows(q, rows, "noise rows")?;
                NoiseMatrix::new(m).map_err(|e| anyhow!("invalid noise: {e}"))?
            }
        };
        Ok(Some(delta))
    }
}

fn square_from_rows(q: usize, rows: &[Vec<f64>], what: &str) -> Result<SquareMatrix> {
    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
        bail!("{what} must be a {q}x{q} matrix");
    }
    Ok(SquareMatrix::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(experiment: &str, model: &str) -> String {
        format!(r#"{{"experiment": "{experiment}", "model": {model}, "seed": 7}}"#)
    }

    #[test]
    fn parses_each_model_shape() {
        let sym = minimal(
            "check-model",
            r#"{"type": "symmetric", "q": 2, "a": 16.0, "b": 4.0, "n": 4000}"#,
        );
        let cfg: ExperimentConfig = serde_json::from_str(&sym).unwrap();
        let (spec, t, s) = cfg.build_model().unwrap();
        assert_eq!(spec.q(), 2);
        assert!((t.d - 10.0).abs() < 1e-12);
        assert!((s.ks_quantity - 3.6).abs() < 1e-9);

        let exp = minimal(
            "check-model",
            r#"{"type": "explicit", "q": 2, "pi": [0.5, 0.5],
                "q_scaled": [[16.0, 4.0], [4.0, 16.0]], "n": 4000}"#,
        );
        let cfg: ExperimentConfig = serde_json::from_str(&exp).unwrap();
        let (spec2, _, s2) = cfg.build_model().unwrap();
        assert_eq!(spec2.q(), 2);
        assert!((s2.ks_quantity - 3.6).abs() < 1e-9);

        let pert = minimal(
            "check-model",
            r#"{"type": "perturbation", "pi": [0.5, 0.5],
                "m": [[0.25, -0.25], [-0.25, 0.25]], "scale": 0.4, "d": 10.0, "n": 4000}"#,
        );
        let cfg: ExperimentConfig = serde_json::from_str(&pert).unwrap();
        let (spec3, t3, _) = cfg.build_model().unwrap();
        assert_eq!(spec3.q(), 2);
        assert!((t3.d - 10.0).abs() < 1e-9);
    }

    #[test]
    fn parses_noise_shapes_and_options() {
        let text = r#"{
            "experiment": "contraction",
            "model": {"type": "symmetric", "q": 2, "a": 14.4, "b": 1.6, "n": 100},
            "seed": 3,
            "trials": 50000,
            "depths": {"min": 1, "max": 6},
            "noise": {"type": "explicit", "rows": [[0.85, 0.15], [0.15, 0.85]]},
            "output": {"csv": "out/contraction.csv"}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        let delta = cfg.build_noise(2).unwrap().unwrap();
        assert!((delta.get(0, 0) - 0.85).abs() < 1e-15);
        assert_eq!(cfg.effective_depths().max, 6);

        let flip: NoiseConfig =
            serde_json::from_str(r#"{"type": "uniform-flip", "keep": 0.9}"#).unwrap();
        match flip {
            NoiseConfig::UniformFlip { keep } => assert_eq!(keep, 0.9),
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&minimal(
            "tree-moments",
            r#"{"type": "symmetric", "q": 2, "a": 3.0, "b": 1.0, "n": 100}"#,
        ))
        .unwrap();
        cfg.trials = Some(0);
        assert!(cfg.validate().is_err());
        cfg.trials = Some(100);
        cfg.depths = Some(DepthRange { min: 3, max: 1 });
        assert!(cfg.validate().is_err());
        cfg.depths = None;
        cfg.graph = Some(GraphFiles {
            edges: PathBuf::from("/nonexistent/edges.txt"),
            labels: PathBuf::from("/nonexistent/labels.txt"),
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn contraction_requires_noise_and_enough_trials() {
        let cfg: ExperimentConfig = serde_json::from_str(&minimal(
            "contraction",
            r#"{"type": "symmetric", "q": 2, "a": 14.4, "b": 1.6, "n": 100}"#,
        ))
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{
            "experiment": "check-model",
            "model": {"type": "symmetric", "q": 2, "a": 4.0, "b": 1.0, "n": 100},
            "seed": 1,
            "surprise": true
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn canonical_json_is_stable() {
        let cfg: ExperimentConfig = serde_json::from_str(&minimal(
            "check-model",
            r#"{"type": "symmetric", "q": 2, "a": 4.0, "b": 1.0, "n": 100}"#,
        ))
        .unwrap();
        assert_eq!(cfg.canonical_json(), cfg.canonical_json());
        let reparsed: ExperimentConfig =
            serde_json::from_str(&cfg.canonical_json()).unwrap();
        assert_eq!(reparsed.canonical_json(), cfg.canonical_json());
    }
}
