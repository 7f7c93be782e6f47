//! generate, separate, evaluate and sweep.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use recsep::css::{segment, BlockLog};
use recsep::metrics::{evaluate_session, ConditionSummary, EvalReport, SessionReport};
use recsep::simulator::{mix_session, SessionSpec, SessionSpectra, SessionTruth, TruthSummary};
use recsep::wav::{read_wav, write_wav};
use recsep::{run_css, CssConfig};
use serde::Serialize;

use crate::config::{parse_value, set_path, RunConfig};
use crate::error::{CliError, Result};

/// Runs `f` over the sessions on a pool of `cfg.workers` threads, keeping
/// the session order in the result.
fn for_each_session<T: Send>(cfg: &RunConfig, f: impl Fn(&SessionSpec) -> Result<T> + Sync) -> Result<Vec<T>> {
    if cfg.sessions.is_empty() {
        return Err(CliError::config("no sessions"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    pool.install(|| cfg.sessions.par_iter().map(&f).collect())
}

pub fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = cfg.sessions_dir();
    for_each_session(cfg, |spec| {
        let truth = mix_session(&cfg.resolved_session(spec))?;
        let dir = root.join(&spec.name);
        truth.write_artifacts(&dir, cfg.wav_format.into())?;
        log::info!(
            "{}: {:.1} s, overlap {:.3}, snr {:.1} dB",
            spec.name,
            truth.mixture.len() as f64 / spec.sample_rate as f64,
            truth.realized_overlap,
            truth.snr_db
        );
        Ok(dir)
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(format!("missing {what}: {}", path.display())))
    }
}

/// Reads a generated session back from disk.
pub fn load_session(cfg: &RunConfig, spec: &SessionSpec) -> Result<SessionTruth> {
    let dir = cfg.sessions_dir().join(&spec.name);
    let sr = cfg.stft.sample_rate;
    let read = |name: &str| -> Result<Vec<f64>> {
        let path = dir.join(name);
        require(&path, "session artifact (run `generate` first)")?;
        Ok(read_wav(&path, sr)?)
    };
    let truth_path = dir.join("truth.json");
    require(&truth_path, "session artifact (run `generate` first)")?;
    let summary: TruthSummary = serde_json::from_reader(BufReader::new(File::open(&truth_path)?))
        .map_err(|e| CliError::input(format!("{}: {e}", truth_path.display())))?;
    let mixture = read("mixture.wav")?;
    let references = (0..summary.num_speakers)
        .map(|k| read(&format!("ref_{k}.wav")))
        .collect::<Result<Vec<_>>>()?;
    let noise = read("noise.wav")?;
    if summary.num_speakers != spec.num_speakers || mixture.len() != summary.samples {
        return Err(CliError::input(format!(
            "{}: artifacts do not match the session spec; re-run `generate`",
            dir.display()
        )));
    }
    Ok(SessionTruth {
        spec: cfg.resolved_session(spec),
        mixture,
        references,
        noise,
        utterances: summary.utterances,
        activity: summary.activity,
        realized_overlap: summary.realized_overlap,
        snr_db: summary.snr_db,
    })
}

/// Separates every session into `out/<name>/ch_<k>.wav` plus `blocks.jsonl`.
pub fn separate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let css = CssConfig {
        stft: cfg.stft,
        window: cfg.window_config()?,
        order: cfg.block_order(),
    };
    let format = cfg.wav_format.into();
    for_each_session(cfg, |spec| {
        let truth = load_session(cfg, spec)?;
        let spectra = SessionSpectra::new(&truth, &cfg.stft, cfg.estimator.activity_threshold())?;
        let mut separator = cfg.separator()?;
        let result = run_css(&truth.mixture, &mut separator, &spectra, &css)?;
        let dir = out.join(&spec.name);
        fs::create_dir_all(&dir)?;
        for (k, ch) in result.channels.iter().enumerate() {
            write_wav(dir.join(format!("ch_{k}.wav")), ch, cfg.stft.sample_rate, format)?;
        }
        let mut log = BufWriter::new(File::create(dir.join("blocks.jsonl"))?);
        result.write_block_log(&mut log)?;
        log.flush()?;
        log::info!(
            "{}: {} blocks, {} overflow, {} channel switches, dependency {}",
            spec.name,
            result.blocks.len(),
            result.overflow_events,
            result.channel_switches(),
            if css.window.dependency { "on" } else { "off" }
        );
        Ok(())
    })?;
    Ok(())
}

fn read_block_log(path: &Path) -> Result<Vec<BlockLog>> {
    require(path, "block log (run `separate` first)")?;
    let mut blocks = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        blocks.push(
            serde_json::from_str(&line).map_err(|e| CliError::input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(blocks)
}

/// Scores the separated channels under `separated` against the session truth.
pub fn evaluate(cfg: &RunConfig, separated: &Path) -> Result<EvalReport> {
    let window = cfg.window_config()?;
    let rows = for_each_session(cfg, |spec| -> Result<SessionReport> {
        let truth = load_session(cfg, spec)?;
        let dir = separated.join(&spec.name);
        let channels = (0..window.channels)
            .map(|k| {
                let path = dir.join(format!("ch_{k}.wav"));
                require(&path, "separated channel (run `separate` first)")?;
                Ok(read_wav(&path, cfg.stft.sample_rate)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = read_block_log(&dir.join("blocks.jsonl"))?;
        let spectra = SessionSpectra::new(&truth, &cfg.stft, cfg.estimator.activity_threshold())?;
        let counts: Vec<usize> = segment(spectra.num_frames(), &window)
            .iter()
            .map(|b| spectra.active_count(b))
            .collect();
        if counts.len() != blocks.len() {
            return Err(CliError::input(format!(
                "{}: block log has {} blocks, the window config gives {}",
                dir.display(),
                blocks.len(),
                counts.len()
            )));
        }
        Ok(evaluate_session(
            &truth,
            &channels,
            &blocks,
            &counts,
            cfg.eval.leakage_guard,
        )?)
    })?;
    Ok(EvalReport::new(rows))
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = BufWriter::new(File::create(dir.join("report.csv"))?);
    report.write_csv(&mut csv)?;
    csv.flush()?;
    let mut json = BufWriter::new(File::create(dir.join("report.json"))?);
    report.write_json(&mut json)?;
    json.flush()?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("report.json");
    require(&path, "report (run `evaluate` first)")?;
    serde_json::from_reader(BufReader::new(File::open(&path)?))
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub condition: String,
    pub si_snr_base: f64,
    pub si_snr_new: f64,
    pub si_snr_delta: f64,
    pub si_snri_delta: f64,
    pub si_snr_utterance_delta: Option<f64>,
    pub leakage_delta: Option<f64>,
    pub counting_delta: Option<f64>,
    pub overflow_delta: i64,
}

fn delta_row(condition: &str, base: &ConditionSummary, new: &ConditionSummary) -> DeltaRow {
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
    DeltaRow {
        condition: condition.to_string(),
        si_snr_base: base.si_snr,
        si_snr_new: new.si_snr,
        si_snr_delta: new.si_snr - base.si_snr,
        si_snri_delta: new.si_snri - base.si_snri,
        si_snr_utterance_delta: diff(base.si_snr_utterance, new.si_snr_utterance),
        leakage_delta: diff(base.leakage_db, new.leakage_db),
        counting_delta: diff(base.counting_accuracy, new.counting_accuracy),
        overflow_delta: new.overflow_events as i64 - base.overflow_events as i64,
    }
}

/// Per-condition differences `new - base` over the conditions both share,
/// followed by the overall row.
pub fn compare(base: &EvalReport, new: &EvalReport) -> Vec<DeltaRow> {
    let mut rows: Vec<DeltaRow> = new
        .conditions
        .iter()
        .filter_map(|(c, n)| base.conditions.get(c).map(|b| delta_row(c, b, n)))
        .collect();
    rows.push(delta_row("overall", &base.overall, &new.overall));
    rows
}

pub fn write_csv_rows<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Sweepable parameters and the config keys they set.
pub const SWEEP_PARAMS: [(&str, &str); 5] = [
    ("stop_threshold", "stop.thresholds"),
    ("dependency", "window.dependency"),
    ("block", "window.block"),
    ("lambda", "estimator.lambda"),
    ("channels", "window.channels"),
];

fn sweep_value(param: &str, raw: &str) -> toml::Value {
    match (param, raw.trim()) {
        ("dependency", "on") => toml::Value::Boolean(true),
        ("dependency", "off") => toml::Value::Boolean(false),
        ("stop_threshold", v) => match parse_value(v) {
            toml::Value::Array(a) => toml::Value::Array(a),
            other => toml::Value::Array(vec![other]),
        },
        (_, v) => parse_value(v),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub condition: String,
    pub sessions: usize,
    pub si_snr: f64,
    pub si_snri: f64,
    pub si_snr_utterance: Option<f64>,
    pub leakage_db: Option<f64>,
    pub counting_accuracy: Option<f64>,
    pub overflow_events: usize,
}

fn dir_name(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Re-runs separate and evaluate once per value and writes
/// `sweep_<param>.csv` into the run's output directory. Sessions must
/// already be generated.
pub fn sweep(base: &toml::Table, config_dir: &Path, param: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    let key = SWEEP_PARAMS
        .iter()
        .find(|(p, _)| *p == param)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let known: Vec<&str> = SWEEP_PARAMS.iter().map(|(p, _)| *p).collect();
            CliError::config(format!(
                "unknown sweep parameter `{param}` (known: {})",
                known.join(", ")
            ))
        })?;
    if values.is_empty() {
        return Err(CliError::config("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut out_dir = None;
    for value in values {
        let mut doc = base.clone();
        set_path(&mut doc, key, sweep_value(param, value))?;
        let mut cfg = RunConfig::from_table(doc)?;
        if cfg.out_dir.is_relative() {
            cfg.out_dir = config_dir.join(&cfg.out_dir);
        }
        let run = cfg.out_dir.join("sweep").join(param).join(dir_name(value));
        log::info!("sweep {param} = {value}");
        separate(&cfg, &run.join("separated"))?;
        let report = evaluate(&cfg, &run.join("separated"))?;
        write_report(&report, &run)?;
        let row = |condition: &str, s: &ConditionSummary| SweepRow {
            parameter: param.to_string(),
            value: value.clone(),
            condition: condition.to_string(),
            sessions: s.sessions,
            si_snr: s.si_snr,
            si_snri: s.si_snri,
            si_snr_utterance: s.si_snr_utterance,
            leakage_db: s.leakage_db,
            counting_accuracy: s.counting_accuracy,
            overflow_events: s.overflow_events,
        };
        rows.extend(report.conditions.iter().map(|(c, s)| row(c, s)));
        rows.push(row("overall", &report.overall));
        out_dir = Some(cfg.out_dir);
    }
    let out = out_dir.expect("at least one value");
    write_csv_rows(
        &rows,
        BufWriter::new(File::create(out.join(format!("sweep_{param}.csv")))?),
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_are_coerced() {
        assert_eq!(sweep_value("dependency", "on"), toml::Value::Boolean(true));
        assert_eq!(
            sweep_value("stop_threshold", "0.4"),
            toml::Value::Array(vec![toml::Value::Float(0.4)])
        );
        assert_eq!(
            sweep_value("stop_threshold", "[0.6, 0.1]"),
            toml::Value::Array(vec![toml::Value::Float(0.6), toml::Value::Float(0.1)])
        );
        assert_eq!(sweep_value("block", "4.8s"), toml::Value::String("4.8s".into()));
    }

    #[test]
    fn unknown_sweep_parameter_is_a_config_error() {
        let doc: toml::Table = "out_dir = \"r\"".parse().unwrap();
        let err = sweep(&doc, Path::new("."), "alpha", &["1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn compare_reports_differences() {
        let row = |name: &str, snr: f64| SessionReport {
            session: name.into(),
            condition: "30".into(),
            si_snr: snr,
            si_snr_mixture: 0.0,
            si_snri: snr,
            si_snr_utterance: Some(snr),
            leakage_db: Some(-30.0),
            counting_accuracy: Some(0.5),
            overflow_events: 1,
            channel_switches: 0,
        };
        let base = EvalReport::new(vec![row("a", 8.0)]);
        let new = EvalReport::new(vec![row("a", 10.0)]);
        let d = compare(&base, &new);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].condition, "30");
        assert_eq!(d[0].si_snr_delta, 2.0);
        assert_eq!(d[1].leakage_delta, Some(0.0));
        assert_eq!(d[1].overflow_delta, 0);
    }
}
