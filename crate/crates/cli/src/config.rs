//! The TOML run description and `--set` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use recsep::estimators::{LeakyOracle, OracleRsan, ToyEstimator, UpitOracle, DEFAULT_ACTIVITY_THRESHOLD};
use recsep::rsan::RecursionOptions;
use recsep::simulator::{substream, SessionSpec};
use recsep::wav::WavFormat;
use recsep::{BlockOrder, Separator, StftConfig, StopPolicy, SubtractionPolicy, WindowConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every session seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Sessions processed at once. 0 uses every core.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub wav_format: WavFormatConfig,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub window: WindowSection,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub stop: StopSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sessions: Vec<SessionSpec>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormatConfig {
    Pcm16,
    #[default]
    Float32,
}

impl From<WavFormatConfig> for WavFormat {
    fn from(f: WavFormatConfig) -> Self {
        match f {
            WavFormatConfig::Pcm16 => WavFormat::Pcm16,
            WavFormatConfig::Float32 => WavFormat::Float32,
        }
    }
}

/// A duration in seconds, written either as a number or as `"4.8s"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SecondsRepr", into = "f64")]
pub struct Seconds(pub f64);

#[derive(Deserialize)]
#[serde(untagged)]
enum SecondsRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<SecondsRepr> for Seconds {
    type Error = String;

    fn try_from(r: SecondsRepr) -> std::result::Result<Self, String> {
        match r {
            SecondsRepr::Number(v) => Ok(Seconds(v)),
            SecondsRepr::Text(s) => s
                .trim()
                .trim_end_matches('s')
                .trim()
                .parse()
                .map(Seconds)
                .map_err(|_| format!("`{s}` is not a duration in seconds")),
        }
    }
}

impl From<Seconds> for f64 {
    fn from(s: Seconds) -> f64 {
        s.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderConfig {
    #[default]
    Sequential,
    Shuffled,
    Parallel,
}

/// Block geometry, either in seconds (`block`, `hop`) or in frames
/// (`n_p`, `n_c`, `n_f`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub block: Option<Seconds>,
    pub hop: Option<Seconds>,
    pub n_p: Option<usize>,
    pub n_c: Option<usize>,
    pub n_f: Option<usize>,
    pub channels: usize,
    pub dependency: bool,
    pub order: OrderConfig,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            block: None,
            hop: None,
            n_p: None,
            n_c: None,
            n_f: None,
            channels: 2,
            dependency: false,
            order: OrderConfig::Sequential,
        }
    }
}

impl WindowSection {
    pub fn resolve(&self, stft: &StftConfig) -> Result<WindowConfig> {
        let frames = [self.n_p, self.n_c, self.n_f];
        let seconds = [self.block, self.hop];
        let cfg = match (frames.iter().any(Option::is_some), seconds.iter().any(Option::is_some)) {
            (true, true) => {
                return Err(CliError::config(
                    "window: give either block/hop or n_p/n_c/n_f, not both",
                ))
            }
            (true, false) => match frames {
                [Some(n_p), Some(n_c), Some(n_f)] => WindowConfig::new(n_p, n_c, n_f, self.channels, self.dependency)?,
                _ => return Err(CliError::config("window: n_p, n_c and n_f must all be set")),
            },
            (false, _) => {
                let block = self.block.map_or(2.4, f64::from);
                let hop = self.hop.map_or(0.8, f64::from);
                WindowConfig::from_seconds(block, hop, self.channels, self.dependency, stft)?
            }
        };
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorConfig {
    Oracle {
        #[serde(default = "activity")]
        activity_threshold: f64,
    },
    Leaky {
        lambda: f64,
        #[serde(default = "activity")]
        activity_threshold: f64,
    },
    Upit,
    /// The toy network, trained on a synthetic dataset before separating.
    Toy {
        #[serde(default = "toy_steps")]
        steps: usize,
        #[serde(default = "toy_lr")]
        lr: f64,
        #[serde(default = "toy_alpha")]
        alpha: f64,
    },
}

fn activity() -> f64 {
    DEFAULT_ACTIVITY_THRESHOLD
}

fn toy_steps() -> usize {
    200
}

fn toy_lr() -> f64 {
    0.05
}

fn toy_alpha() -> f64 {
    0.05
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig::Oracle {
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
        }
    }
}

impl EstimatorConfig {
    /// Threshold used to decide which sources count as present in a block.
    pub fn activity_threshold(&self) -> f64 {
        match *self {
            EstimatorConfig::Oracle { activity_threshold } | EstimatorConfig::Leaky { activity_threshold, .. } => {
                activity_threshold
            }
            _ => DEFAULT_ACTIVITY_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopSection {
    pub thresholds: Vec<f64>,
    pub max_iterations: usize,
    pub subtraction: SubtractionPolicy,
}

impl Default for StopSection {
    fn default() -> Self {
        let p = StopPolicy::default();
        Self {
            thresholds: p.thresholds().to_vec(),
            max_iterations: p.max_iterations(),
            subtraction: SubtractionPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Samples trimmed from each end of a single-speaker region before
    /// measuring leakage.
    pub leakage_guard: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { leakage_guard: 512 }
    }
}

impl RunConfig {
    /// Reads the file, applies `key=value` overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::from_table(Self::load_table(path, overrides)?)?;
        // relative output paths are taken from the config file's directory
        if cfg.out_dir.is_relative() {
            cfg.out_dir = config_dir(path).join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// The raw document after overrides, before validation.
    pub fn load_table(path: &Path, overrides: &[String]) -> Result<toml::Table> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Ok(doc)
    }

    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.window.resolve(&self.stft)?;
        self.stop_policy()?;
        self.separator()?;
        let mut names = BTreeSet::new();
        for s in &self.sessions {
            s.validate()
                .map_err(|e| CliError::config(format!("session `{}`: {e}", s.name)))?;
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return Err(CliError::config(format!(
                    "session name `{}` is not a plain file name",
                    s.name
                )));
            }
            if !names.insert(&s.name) {
                return Err(CliError::config(format!("duplicate session name `{}`", s.name)));
            }
            if s.sample_rate != self.stft.sample_rate {
                return Err(CliError::config(format!(
                    "session `{}`: sample_rate {} differs from stft.sample_rate {}",
                    s.name, s.sample_rate, self.stft.sample_rate
                )));
            }
        }
        if self.window.dependency && self.window.order != OrderConfig::Sequential {
            return Err(CliError::config("window: dependency requires order = \"sequential\""));
        }
        if self.window.dependency && self.estimator == EstimatorConfig::Upit {
            return Err(CliError::config("window: dependency requires a recursive estimator"));
        }
        Ok(())
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        self.window.resolve(&self.stft)
    }

    pub fn block_order(&self) -> BlockOrder {
        match self.window.order {
            OrderConfig::Sequential => BlockOrder::Sequential,
            OrderConfig::Shuffled => BlockOrder::Shuffled(substream(self.seed, "block-order").next_u64()),
            OrderConfig::Parallel => BlockOrder::Parallel,
        }
    }

    pub fn stop_policy(&self) -> Result<StopPolicy> {
        Ok(StopPolicy::new(self.stop.thresholds.clone(), self.stop.max_iterations)?)
    }

    /// The session spec with its seed derived from the root seed. The
    /// session's own `seed` picks a variant under that root.
    pub fn resolved_session(&self, spec: &SessionSpec) -> SessionSpec {
        let mut s = spec.clone();
        s.seed = substream(self.seed, &format!("session/{}/{}", spec.name, spec.seed)).next_u64();
        s
    }

    /// Builds a fresh separator. The toy estimator is trained here.
    pub fn separator(&self) -> Result<Separator> {
        let options = RecursionOptions {
            subtraction: self.stop.subtraction,
            record_residuals: false,
        };
        let estimator: Box<dyn recsep::MaskEstimator> = match self.estimator {
            EstimatorConfig::Oracle { activity_threshold } => Box::new(OracleRsan::new(activity_threshold)?),
            EstimatorConfig::Leaky {
                lambda,
                activity_threshold,
            } => Box::new(LeakyOracle::new(lambda, activity_threshold)?),
            EstimatorConfig::Upit => {
                return Ok(Separator::FixedChannel(UpitOracle::new(self.window.channels)?));
            }
            EstimatorConfig::Toy { steps, lr, alpha } => Box::new(self.train_toy(steps, lr, alpha)?),
        };
        Ok(Separator::Recursive {
            estimator,
            stop: self.stop_policy()?,
            options,
        })
    }

    fn train_toy(&self, steps: usize, lr: f64, alpha: f64) -> Result<ToyEstimator> {
        let seed = substream(self.seed, "toy-dataset").next_u64();
        let data = recsep::estimators::toy_dataset(seed, 8, 2, 32, self.stft.num_bins());
        let (est, report) = recsep::estimators::toy_train(&data, steps, lr, alpha)?;
        log::info!(
            "toy estimator: loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        Ok(est)
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.out_dir.join("sessions")
    }

    pub fn separated_dir(&self) -> PathBuf {
        self.out_dir.join("separated")
    }
}

pub fn config_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Sets the dotted key `a.b.c` to `value`, parsed as a TOML value when
/// possible and as a string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    set_path(doc, key.trim(), value)
}

pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_table(text.parse().unwrap())
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse("out_dir = \"run\"\n[[sessions]]\nname = \"a\"\n").unwrap();
        let w = cfg.window_config().unwrap();
        assert_eq!((w.n_p, w.n_c, w.n_f, w.channels), (50, 50, 50, 2));
        assert_eq!(cfg.stop_policy().unwrap(), StopPolicy::default());
        assert_eq!(cfg.workers, 1);
    }

    #[test]
    fn threshold_list_becomes_a_stop_policy() {
        let cfg = parse("out_dir = \"r\"\n[stop]\nthresholds = [0.6, 0.1]\n").unwrap();
        let p = cfg.stop_policy().unwrap();
        assert_eq!(p.threshold(0), 0.6);
        assert_eq!(p.threshold(1), 0.1);
        assert_eq!(p.threshold(5), 0.1);
    }

    #[test]
    fn block_seconds_accept_a_suffix() {
        let cfg = parse("out_dir = \"r\"\n[window]\nblock = \"4.8s\"\nhop = 0.8\n").unwrap();
        let w = cfg.window_config().unwrap();
        assert_eq!((w.block_len(), w.n_c), (300, 50));
    }

    #[test]
    fn mixed_window_styles_are_rejected() {
        let err = parse("out_dir = \"r\"\n[window]\nblock = 2.4\nn_c = 50\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(parse("out_dir = \"r\"\nbogus = 1\n").is_err());
        assert!(parse("out_dir = \"r\"\n[estimator]\nkind = \"oracle\"\nlambda = 0.1\n").is_err());
        assert!(parse("out_dir = \"r\"\n[estimator]\nkind = \"magic\"\n").is_err());
    }

    #[test]
    fn infeasible_overlap_names_the_field() {
        let err =
            parse("out_dir = \"r\"\n[[sessions]]\nname = \"a\"\nnum_speakers = 1\noverlap_ratio = 0.3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn duplicate_and_unsafe_names_are_rejected() {
        assert!(parse("out_dir = \"r\"\n[[sessions]]\nname = \"a\"\n[[sessions]]\nname = \"a\"\n").is_err());
        assert!(parse("out_dir = \"r\"\n[[sessions]]\nname = \"../a\"\n").is_err());
    }

    #[test]
    fn dependency_needs_sequential_recursion() {
        assert!(parse("out_dir = \"r\"\n[window]\ndependency = true\norder = \"parallel\"\n").is_err());
        assert!(parse("out_dir = \"r\"\n[window]\ndependency = true\n[estimator]\nkind = \"upit\"\n").is_err());
        assert!(parse("out_dir = \"r\"\n[window]\ndependency = true\n").is_ok());
    }

    #[test]
    fn overrides_parse_values_and_create_tables() {
        let mut doc: toml::Table = "out_dir = \"r\"".parse().unwrap();
        apply_override(&mut doc, "window.dependency=true").unwrap();
        apply_override(&mut doc, "stop.thresholds=[0.6, 0.1]").unwrap();
        apply_override(&mut doc, "window.block=4.8s").unwrap();
        apply_override(&mut doc, "seed = 3").unwrap();
        let cfg = RunConfig::from_table(doc).unwrap();
        assert!(cfg.window.dependency);
        assert_eq!(cfg.stop.thresholds, vec![0.6, 0.1]);
        assert_eq!(cfg.window.block, Some(Seconds(4.8)));
        assert_eq!(cfg.seed, 3);
        let mut doc: toml::Table = "out_dir = \"r\"".parse().unwrap();
        assert!(apply_override(&mut doc, "no_equals").is_err());
        assert!(apply_override(&mut doc, "out_dir.x=1").is_err());
    }

    #[test]
    fn session_seeds_follow_the_root_seed() {
        let a = parse("out_dir = \"r\"\nseed = 1\n[[sessions]]\nname = \"a\"\n[[sessions]]\nname = \"b\"\n").unwrap();
        let b = parse("out_dir = \"r\"\nseed = 2\n[[sessions]]\nname = \"a\"\n").unwrap();
        let sa = a.resolved_session(&a.sessions[0]);
        assert_eq!(sa, a.resolved_session(&a.sessions[0]));
        assert_ne!(sa.seed, a.resolved_session(&a.sessions[1]).seed);
        assert_ne!(sa.seed, b.resolved_session(&b.sessions[0]).seed);
    }
}
