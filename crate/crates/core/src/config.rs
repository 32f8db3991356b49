//! Layered pipeline configuration.
//!
//! Defaults are overridden by a `key = value` file, which command-line flags
//! override in turn. Scenario keys (`room_dims`, `rt60`, ...) may appear in
//! the same file and are kept aside for the simulator.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::beamform::BeamformConfig;
use crate::cgmm::CgmmConfig;
use crate::error::{Error, Result};
use crate::keyvalue::{Entry, KeyValues};
use crate::room::{Scenario, SCENARIO_KEYS};
use crate::signal::StftParams;

/// Single-channel complex mask, single-channel real Wiener gain, or multi-channel filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Crm,
    Sc,
    #[default]
    Mc,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "crm" => Ok(Mode::Crm),
            "sc" | "sc-wiener" => Ok(Mode::Sc),
            "mc" => Ok(Mode::Mc),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected crm, sc or mc)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Crm => "crm",
            Mode::Sc => "sc",
            Mode::Mc => "mc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftSettings {
    pub fft_size: usize,
    pub window_ms: f64,
    pub hop_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformSettings {
    pub reference_channel: usize,
    pub gain_floor: f64,
    pub band_split_hz: f64,
    pub subarray: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub masks: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub dump_mask: Option<PathBuf>,
    /// Per-iteration EM log-likelihood CSV.
    pub loglik: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub trials: usize,
    pub snr_db: Vec<f64>,
    pub seed: u64,
    /// Standard deviation of the logit-domain noise added to oracle masks.
    pub corruption: f64,
    pub duration_s: f64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stft: StftSettings,
    pub em: CgmmConfig,
    pub beamform: BeamformSettings,
    pub mode: Mode,
    pub refine: bool,
    pub paths: Paths,
    pub experiment: ExperimentSettings,
    /// Scenario keys found in the config file, unparsed.
    pub scenario: KeyValues,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftSettings {
                fft_size: 512,
                window_ms: 32.0,
                hop_fraction: 0.5,
            },
            em: CgmmConfig::default(),
            beamform: BeamformSettings {
                reference_channel: 0,
                gain_floor: 0.0,
                band_split_hz: 1000.0,
                subarray: true,
            },
            mode: Mode::Mc,
            refine: true,
            paths: Paths::default(),
            experiment: ExperimentSettings {
                trials: 20,
                snr_db: vec![-5.0, 0.0, 5.0, 10.0],
                seed: 0,
                corruption: 1.0,
                duration_s: 2.0,
                parallel: true,
            },
            scenario: KeyValues::default(),
        }
    }
}

fn paths_of(e: &Entry) -> Vec<PathBuf> {
    e.value.split(',').map(|p| PathBuf::from(p.trim())).filter(|p| !p.as_os_str().is_empty()).collect()
}

impl PipelineConfig {
    /// Defaults overridden by the entries of `kv`.
    pub fn from_keyvalues(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_keyvalues(&KeyValues::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for e in kv.entries() {
            self.apply_entry(e)?;
        }
        self.validate()
    }

    fn apply_entry(&mut self, e: &Entry) -> Result<()> {
        let uint = |e: &Entry| e.parse::<usize>("a non-negative integer");
        match e.key.as_str() {
            "stft.fft_size" => self.stft.fft_size = uint(e)?,
            "stft.window_ms" => self.stft.window_ms = e.float()?,
            "stft.hop_fraction" => self.stft.hop_fraction = e.float()?,
            "em.iterations" => self.em.iterations = uint(e)?,
            "em.rank1" => self.em.rank1 = e.boolean()?,
            "em.loading" => self.em.loading = e.float()?,
            "beamform.reference_channel" => self.beamform.reference_channel = uint(e)?,
            "beamform.gain_floor" => self.beamform.gain_floor = e.float()?,
            "beamform.band_split_hz" => self.beamform.band_split_hz = e.float()?,
            "beamform.subarray" => self.beamform.subarray = e.boolean()?,
            "enhance.mode" => self.mode = e.value.parse()?,
            "enhance.refine" => self.refine = e.boolean()?,
            "paths.input" => self.paths.input = Some(PathBuf::from(&e.value)),
            "paths.masks" => self.paths.masks = paths_of(e),
            "paths.output" => self.paths.output = Some(PathBuf::from(&e.value)),
            "paths.report_dir" => self.paths.report_dir = Some(PathBuf::from(&e.value)),
            "paths.dump_mask" => self.paths.dump_mask = Some(PathBuf::from(&e.value)),
            "paths.loglik" => self.paths.loglik = Some(PathBuf::from(&e.value)),
            "experiment.trials" => self.experiment.trials = uint(e)?,
            "experiment.snr_db" => self.experiment.snr_db = e.float_list()?,
            "experiment.seed" => self.experiment.seed = e.parse("an unsigned integer")?,
            "experiment.corruption" => self.experiment.corruption = e.float()?,
            "experiment.duration_s" => self.experiment.duration_s = e.float()?,
            "experiment.parallel" => self.experiment.parallel = e.boolean()?,
            k if SCENARIO_KEYS.contains(&k) => self.scenario.set(k, &e.value),
            k => return Err(Error::Config(format!("line {}: unknown key `{k}`", e.line))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stft.fft_size < 2 {
            return bad(format!("stft.fft_size {} too small", self.stft.fft_size));
        }
        if !(self.stft.window_ms > 0.0) {
            return bad("stft.window_ms must be positive".into());
        }
        if self.stft.hop_fraction != 0.5 {
            return bad(format!("stft.hop_fraction {} unsupported; synthesis needs 0.5", self.stft.hop_fraction));
        }
        if !(self.em.loading >= 0.0) {
            return bad("em.loading must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.beamform.gain_floor) {
            return bad("beamform.gain_floor must lie in [0, 1]".into());
        }
        if !(self.beamform.band_split_hz >= 0.0) {
            return bad("beamform.band_split_hz must be non-negative".into());
        }
        if self.experiment.trials == 0 {
            return bad("experiment.trials must be at least 1".into());
        }
        if self.experiment.snr_db.is_empty() {
            return bad("experiment.snr_db is empty".into());
        }
        if !(self.experiment.corruption >= 0.0) {
            return bad("experiment.corruption must be non-negative".into());
        }
        if !(self.experiment.duration_s > 0.0) {
            return bad("experiment.duration_s must be positive".into());
        }
        Ok(())
    }

    /// Analysis parameters at `sample_rate`.
    pub fn stft_params(&self, sample_rate: u32) -> Result<StftParams> {
        StftParams::from_millis(self.stft.fft_size, self.stft.window_ms, sample_rate)
    }

    pub fn beamform_config(&self) -> BeamformConfig {
        BeamformConfig {
            reference: self.beamform.reference_channel,
            gain_floor: self.beamform.gain_floor,
            ..BeamformConfig::default()
        }
    }

    /// The scenario given in the config file, if any.
    pub fn scenario(&self) -> Result<Option<Scenario>> {
        if self.scenario.is_empty() {
            Ok(None)
        } else {
            Scenario::from_keyvalues(&self.scenario).map(Some)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        let p = c.stft_params(16000).unwrap();
        assert_eq!((p.fft_size, p.window_length, p.hop), (512, 512, 256));
        assert_eq!(c.em.iterations, 20);
        assert_eq!(c.beamform.band_split_hz, 1000.0);
        assert_eq!(c.experiment.snr_db, vec![-5.0, 0.0, 5.0, 10.0]);
        assert!(c.em.rank1 && c.refine && c.beamform.subarray);
    }

    #[test]
    fn file_overrides_defaults() {
        let c = PipelineConfig::parse("em.iterations = 5\nexperiment.snr_db = [0, 10]\nenhance.mode = sc-wiener\nrt60 = 0.4\n").unwrap();
        assert_eq!(c.em.iterations, 5);
        assert_eq!(c.experiment.snr_db, vec![0.0, 10.0]);
        assert_eq!(c.mode, Mode::Sc);
        assert_eq!(c.scenario.get("rt60").unwrap().value, "0.4");
        assert!(c.scenario().is_err(), "partial scenario must not parse");
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(PipelineConfig::parse("em.iters = 3").unwrap_err(), Error::Config(_)));
        assert!(PipelineConfig::parse("stft.hop_fraction = 0.25").is_err());
        assert!(PipelineConfig::parse("experiment.trials = 0").is_err());
        assert!(PipelineConfig::parse("beamform.gain_floor = 2").is_err());
        assert!(PipelineConfig::parse("enhance.mode = fancy").is_err());
    }
}
