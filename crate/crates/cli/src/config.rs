//! Run configuration: presets, JSON overrides, `--seed`/`--scale`, and the
//! resolved-config hash stamped on every output.

use std::path::Path;

use qphase_core::gem::GemConfig;
use qphase_core::shadows::MomConfig;
use qphase_nn::{ClassifierConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperTrain,
    PaperEval,
    PaperAnnni,
}

/// Parameter sweep for `ground` and `phase-diagram`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundSweep {
    pub g_min: f64,
    pub g_max: f64,
    pub g_step: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub kappa_step: f64,
    pub l: usize,
    pub n_s: usize,
    pub lanczos_tol: f64,
    pub lanczos_max_iter: usize,
}

impl Default for GroundSweep {
    fn default() -> Self {
        Self {
            g_min: 0.05,
            g_max: 2.0,
            g_step: 0.05,
            kappa_min: 0.0,
            kappa_max: 0.0,
            kappa_step: 0.05,
            l: 8,
            n_s: 10_000,
            lanczos_tol: 1e-10,
            lanczos_max_iter: 500,
        }
    }
}

/// Inclusive grid `min, min + step, ...` up to `max` (within half a step).
pub fn grid(min: f64, max: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || max < min {
        return vec![min];
    }
    let n = ((max - min) / step + 0.5).floor() as usize;
    // rounded to 1e-9 so that 0.1 + 0.05 prints as 0.15
    (0..=n).map(|i| ((min + i as f64 * step) * 1e9).round() / 1e9).collect()
}

impl GroundSweep {
    pub fn g_values(&self) -> Vec<f64> {
        grid(self.g_min, self.g_max, self.g_step)
    }

    pub fn kappa_values(&self) -> Vec<f64> {
        grid(self.kappa_min, self.kappa_max, self.kappa_step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Mi,
    Gem,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// File-name stem for generated datasets.
    pub split: String,
    pub n_chain: usize,
    pub t: usize,
    pub ls: Vec<usize>,
    pub n_s: usize,
    pub n_b: usize,
    /// Shadow counts for `heatmap` and `baseline`.
    pub n_s_grid: Vec<usize>,
    pub baseline: BaselineMethod,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub mom: MomConfig,
    pub gem: GemConfig,
    pub ground: GroundSweep,
    /// Multiplier already applied to the shadow and state counts.
    pub scale: f64,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            seed: 0,
            split: "train".into(),
            n_chain: 16,
            t: 1,
            ls: vec![6, 8, 10, 12],
            n_s: 10_000,
            n_b: 2000,
            n_s_grid: vec![100, 200, 500, 1000, 2000, 5000, 10_000],
            baseline: BaselineMethod::Both,
            classifier: ClassifierConfig::birnn(),
            train: TrainConfig::default(),
            mom: MomConfig::default(),
            gem: GemConfig::default(),
            ground: GroundSweep::default(),
            scale: 1.0,
        };
        match p {
            Preset::PaperTrain => base,
            Preset::PaperEval => Self {
                seed: 1,
                split: "test".into(),
                ..base
            },
            Preset::PaperAnnni => Self {
                seed: 2,
                split: "ground".into(),
                ground: GroundSweep {
                    kappa_max: 1.5,
                    ..GroundSweep::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.ls.is_empty() {
            return bad("ls must list at least one patch length".into());
        }
        if self.t > 2 {
            return bad(format!("circuit depth t = {} unsupported, use 0, 1 or 2", self.t));
        }
        for &l in &self.ls {
            if l == 0 || l + 4 * self.t > self.n_chain {
                return bad(format!(
                    "patch length {l} is invalid: need 1 <= l <= N - 4t = {}",
                    self.n_chain as i64 - 4 * self.t as i64
                ));
            }
        }
        if self.n_s < 2 || self.n_b == 0 {
            return bad(format!("n_s = {} and n_b = {} too small", self.n_s, self.n_b));
        }
        if self.n_s_grid.contains(&0) {
            return bad("n_s_grid entries must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.train.val_fraction));
        }
        let g = &self.ground;
        if g.l == 0 || g.l > self.n_chain || g.n_s == 0 {
            return bad(format!("ground sweep patch l = {} / n_s = {} invalid", g.l, g.n_s));
        }
        if g.g_min < 0.0 || g.kappa_min < 0.0 || g.g_step <= 0.0 || g.kappa_step <= 0.0 {
            return bad("ground sweep needs non-negative bounds and positive steps".into());
        }
        self.classifier.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.gem.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(2)
}

/// Preset, then the JSON file, then `--seed`, then `--scale`.
pub fn resolve(preset: Preset, file: Option<&Path>, seed: Option<u64>, scale: Option<f64>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::preset(preset)).expect("preset serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        }
        // switching architecture starts from that architecture's defaults
        if let Some(arch) = over.pointer("/classifier/arch") {
            let base: qphase_nn::Arch = serde_json::from_value(arch.clone()).map_err(|e| CliError::Config(format!("classifier.arch: {e}")))?;
            let defaults = match base {
                qphase_nn::Arch::Birnn => ClassifierConfig::birnn(),
                qphase_nn::Arch::Cnn => ClassifierConfig::cnn(),
            };
            value["classifier"] = serde_json::to_value(defaults).expect("config serializes");
        }
        merge(&mut value, over);
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Config(format!("--scale must be positive, got {s}")));
        }
        cfg.n_s = scaled(cfg.n_s, s);
        cfg.n_b = ((cfg.n_b as f64 * s).round() as usize).max(1);
        cfg.ground.n_s = scaled(cfg.ground.n_s, s);
        cfg.n_s_grid = cfg.n_s_grid.iter().map(|&n| scaled(n, s)).collect();
        cfg.n_s_grid.dedup();
        cfg.scale *= s;
    }
    cfg.train.seed = cfg.seed;
    cfg.gem.seed = cfg.seed;
    cfg.mom.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_tenth_of_paper_train() {
        let c = resolve(Preset::PaperTrain, None, None, Some(0.1)).unwrap();
        assert_eq!((c.n_s, c.n_b), (1000, 200));
        assert_eq!(c.ls, vec![6, 8, 10, 12]);
        assert_eq!(c.n_s_grid, vec![10, 20, 50, 100, 200, 500, 1000]);
    }

    #[test]
    fn file_overrides_are_deep_merged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"ls": [6], "train": {"max_epochs": 3}}"#).unwrap();
        let c = resolve(Preset::PaperTrain, Some(&p), Some(9), None).unwrap();
        assert_eq!(c.ls, vec![6]);
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!((c.seed, c.train.seed), (9, 9));

        std::fs::write(&p, r#"{"classifier": {"arch": "cnn", "cnn": {"dropout": 0.2}}}"#).unwrap();
        let c = resolve(Preset::PaperTrain, Some(&p), None, None).unwrap();
        assert_eq!(c.classifier.final_dims, ClassifierConfig::cnn().final_dims);
        assert_eq!(c.classifier.cnn.dropout, 0.2);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for body in [r#"{"ls": [14]}"#, r#"{"typo": 1}"#, r#"[1]"#, r#"{"t": 3}"#, "not json"] {
            let p = dir.path().join("c.json");
            std::fs::write(&p, body).unwrap();
            let e = resolve(Preset::PaperTrain, Some(&p), None, None).unwrap_err();
            assert!(matches!(e, CliError::Config(_)), "{body}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
        assert!(resolve(Preset::PaperTrain, None, None, Some(-1.0)).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::preset(Preset::PaperTrain);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn grids_include_both_ends() {
        let g = grid(0.05, 2.0, 0.05);
        assert_eq!(g.len(), 40);
        assert_eq!(g[0], 0.05);
        assert_eq!(*g.last().unwrap(), 2.0);
        assert_eq!(grid(0.0, 1.5, 0.05).len(), 31);
        assert_eq!(grid(0.0, 0.0, 0.05), vec![0.0]);
    }
}
