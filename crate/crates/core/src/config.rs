//! Run configuration: profile defaults, TOML overrides, validation and a
//! stable content hash.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PhantomOptions, PreprocessParams, SplitName};
use crate::diffusion::{DenoiserConfig, DiffusionTrainConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::residual::ResidualSource;
use crate::segmentation::{SegConfig, SegTrainConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CONFIG_HASH: &str = "config.sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Quick,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Profile::Quick),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidConfig(format!("unknown profile {s:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Quick => "quick",
            Profile::Paper => "paper",
        })
    }
}

/// Residual calibration fitted per subject (all its slices) or per slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationScope {
    Subject,
    Slice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub subjects: usize,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    pub options: PhantomOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw subject directories; `<out>/raw` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_dir: Option<PathBuf>,
    pub phantom: PhantomConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation, test.
    pub ratios: [f64; 3],
    /// Falls back to the global seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: DiffusionTrainConfig,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    pub low_pct: f64,
    pub high_pct: f64,
    pub scope: CalibrationScope,
    pub source: ResidualSource,
    /// Evaluate without the real T1ce: the residual channel is zero.
    pub no_real_t1ce: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationSection {
    pub model: SegConfig,
    pub train: SegTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub taus: Vec<f64>,
    pub split: SplitName,
    /// Restrict evaluation to tumor-bearing slices.
    pub filter_slices: bool,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessParams,
    pub diffusion: DiffusionConfig,
    pub residual: ResidualConfig,
    pub segmentation: SegmentationSection,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let base = RunConfig {
            profile: p,
            seed: 7,
            data: DataConfig {
                raw_dir: None,
                phantom: PhantomConfig {
                    subjects: 20,
                    shape: [40, 64, 64],
                    options: PhantomOptions::default(),
                },
            },
            split: SplitConfig { ratios: [0.7, 0.15, 0.15], seed: None },
            preprocess: PreprocessParams {
                discard_top: 6,
                discard_bottom: 6,
                height: 32,
                width: 32,
                ..PreprocessParams::default()
            },
            diffusion: DiffusionConfig {
                model: DenoiserConfig { base_width: 16, ..DenoiserConfig::default() },
                schedule: ScheduleConfig { timesteps: 200, ..ScheduleConfig::default() },
                train: DiffusionTrainConfig { epochs: 10, ..DiffusionTrainConfig::default() },
                sampling: SamplingConfig { steps: 25, batch_size: 32 },
            },
            residual: ResidualConfig {
                low_pct: 1.0,
                high_pct: 99.0,
                scope: CalibrationScope::Subject,
                source: ResidualSource::Dynamic,
                no_real_t1ce: false,
            },
            segmentation: SegmentationSection {
                model: SegConfig { base_width: 16, ..SegConfig::default() },
                train: SegTrainConfig { epochs: 30, ..SegTrainConfig::default() },
            },
            evaluation: EvaluationConfig {
                taus: vec![0.3, 0.4, 0.5],
                split: SplitName::Test,
                filter_slices: false,
                batch_size: 32,
            },
        };
        match p {
            Profile::Quick => base,
            Profile::Paper => RunConfig {
                data: DataConfig {
                    raw_dir: None,
                    phantom: PhantomConfig { shape: [155, 240, 240], ..base.data.phantom },
                },
                preprocess: PreprocessParams::default(),
                diffusion: DiffusionConfig {
                    model: DenoiserConfig::default(),
                    schedule: ScheduleConfig::default(),
                    train: DiffusionTrainConfig::default(),
                    sampling: SamplingConfig { steps: 1000, batch_size: 16 },
                },
                segmentation: SegmentationSection {
                    model: SegConfig::default(),
                    train: SegTrainConfig::default(),
                },
                ..base
            },
        }
    }

    /// Profile defaults, then `file` (a partial TOML document) merged on top.
    /// Unknown keys anywhere are rejected.
    pub fn resolve(profile: Profile, file: Option<&str>) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::profile(profile))?;
        if let Some(text) = file {
            let over: toml::Table = toml::from_str(text)?;
            if let Some(p) = over.get("profile") {
                let name = p
                    .as_str()
                    .ok_or_else(|| Error::InvalidConfig("profile must be a string".into()))?;
                value = toml::Value::try_from(RunConfig::profile(name.parse()?))?;
            }
            merge(&mut value, toml::Value::Table(over));
        }
        let cfg: RunConfig = value.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.to_path_buf()));
                }
                Self::resolve(profile, Some(&std::fs::read_to_string(p)?))
            }
            None => Self::resolve(profile, None),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn raw_dir(&self, out: &Path) -> PathBuf {
        self.data.raw_dir.clone().unwrap_or_else(|| out.join("raw"))
    }

    /// Writes the resolved config and its hash into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir)?;
        let hash = self.hash()?;
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml()?)?;
        std::fs::write(dir.join(CONFIG_HASH), format!("{hash}\n"))?;
        Ok(hash)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let ph = &self.data.phantom;
        if ph.subjects == 0 {
            return bad("data.phantom.subjects must be at least 1".into());
        }
        if ph.shape.iter().any(|&d| d < 16) {
            return bad(format!("data.phantom.shape {:?} must be at least 16 per axis", ph.shape));
        }
        let o = &ph.options;
        if !(o.tumor_scale >= 0.0
            && o.min_radius_frac > 0.0
            && o.min_radius_frac <= o.max_radius_frac
            && o.max_radius_frac < 0.5
            && o.noise >= 0.0)
        {
            return bad("data.phantom.options radii, scale or noise out of range".into());
        }
        let r = self.split.ratios;
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split.ratios {r:?} must lie in [0, 1] and sum to 1"));
        }
        let p = &self.preprocess;
        if !(0.0 <= p.low_pct && p.low_pct < p.high_pct && p.high_pct <= 100.0) {
            return bad("preprocess percentiles must satisfy 0 <= low < high <= 100".into());
        }
        if p.height == 0 || p.width == 0 {
            return bad("preprocess target size must be positive".into());
        }
        let down = 1usize << (self.segmentation.model.levels.max(1) - 1);
        if p.height % down != 0 || p.width % down != 0 {
            return bad(format!(
                "preprocess size {}x{} must be divisible by {down} for the segmentation network",
                p.height, p.width
            ));
        }
        let d = &self.diffusion;
        d.model.validate()?;
        let sched = d.schedule.build()?;
        d.train.validate()?;
        let ddown = 1usize << (d.model.levels.max(1) - 1);
        if p.height % ddown != 0 || p.width % ddown != 0 {
            return bad(format!("preprocess size must be divisible by {ddown} for the denoiser"));
        }
        if d.sampling.steps == 0 || d.sampling.steps > sched.timesteps() {
            return Err(Error::InvalidSteps { steps: d.sampling.steps, max: sched.timesteps() });
        }
        if d.sampling.batch_size == 0 {
            return bad("diffusion.sampling.batch_size must be positive".into());
        }
        let res = &self.residual;
        if !(0.0 <= res.low_pct && res.low_pct <= res.high_pct && res.high_pct <= 100.0) {
            return bad("residual percentiles must satisfy 0 <= low <= high <= 100".into());
        }
        let s = &self.segmentation;
        if s.model.base_width == 0 || s.model.levels == 0 || s.model.groups == 0 {
            return bad("segmentation model sizes must be positive".into());
        }
        if (0..s.model.levels).any(|i| (s.model.base_width << i) % s.model.groups != 0) {
            return bad("segmentation channel widths must be divisible by groups".into());
        }
        s.train.validate()?;
        let e = &self.evaluation;
        if e.taus.is_empty() {
            return bad("evaluation.taus must not be empty".into());
        }
        for (i, &t) in e.taus.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidThreshold(t));
            }
            if e.taus[..i].contains(&t) {
                return bad(format!("evaluation.taus lists {t} twice"));
            }
        }
        if e.batch_size == 0 {
            return bad("evaluation.batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Recursive table merge; `over` wins on leaves.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::profile(Profile::Quick).validate().unwrap();
        RunConfig::profile(Profile::Paper).validate().unwrap();
        let p = RunConfig::profile(Profile::Paper);
        assert_eq!(p.diffusion.schedule.timesteps, 1000);
        assert_eq!((p.preprocess.height, p.preprocess.width), (120, 120));
        assert_eq!(p.diffusion.train.lr, 3e-4);
        assert_eq!(p.diffusion.train.min_lr, 1.5e-4);
    }

    #[test]
    fn hash_stable_across_round_trip() {
        for p in [Profile::Quick, Profile::Paper] {
            let a = RunConfig::profile(p);
            let text = a.to_toml().unwrap();
            let b = RunConfig::resolve(Profile::Quick, Some(&text)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.hash().unwrap(), b.hash().unwrap());
            assert_eq!(b.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn partial_file_overrides_profile() {
        let c = RunConfig::resolve(Profile::Quick, Some("seed = 11\n[diffusion.schedule]\ntimesteps = 300\n")).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.diffusion.schedule.timesteps, 300);
        assert_eq!(c.diffusion.schedule.beta_max, 0.02);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(Profile::Quick, Some("sede = 3\n")).is_err());
        assert!(RunConfig::resolve(Profile::Quick, Some("[diffusion.train]\nlearning_rate = 0.1\n")).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let cases = [
            "[evaluation]\ntaus = [0.3, 1.0]\n",
            "[split]\nratios = [0.5, 0.5, 0.5]\n",
            "[data.phantom]\nsubjects = 0\n",
            "[diffusion.sampling]\nsteps = 500\n",
            "[segmentation.train]\nlambda1 = 0.0\nlambda2 = 0.0\n",
        ];
        for c in cases {
            assert!(RunConfig::resolve(Profile::Quick, Some(c)).is_err(), "{c}");
        }
    }
}
