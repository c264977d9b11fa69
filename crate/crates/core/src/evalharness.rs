//! Repeated-inference evaluation of a checkpoint and report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::policy::{sample_response, PolicyParams, SampleOptions};
use crate::rng::{self, tag};
use crate::synthworld::oracles::{Oracle, SpeakerEmbedding, QUALITY_MIN};
use crate::synthworld::{Prompt, PromptSet};
use crate::trainers::LogRecord;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_runs: usize,
    pub temperature: f64,
    #[serde(default)]
    pub greedy: bool,
    /// Also evaluate with guidance, as a separate row per language.
    pub with_cfg: bool,
    pub cfg_scale: f64,
    /// Embedding for the similarity judge used at evaluation time.
    #[serde(default)]
    pub embedding: SpeakerEmbedding,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_runs: 5,
            temperature: 0.7,
            greedy: false,
            with_cfg: true,
            cfg_scale: 2.5,
            embedding: SpeakerEmbedding::Unigram,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("evaluation needs n_runs >= 1".into()));
        }
        if !(self.temperature > 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("invalid evaluation decoding settings {self:?}")));
        }
        Ok(())
    }

    fn options(&self, cfg: bool) -> SampleOptions {
        let base = if self.greedy {
            SampleOptions::greedy()
        } else {
            SampleOptions::sampled(self.temperature)
        };
        base.with_cfg(cfg.then_some(self.cfg_scale))
    }
}

/// Mean over runs with a 95% half-width; the half-width is `None` for a
/// single run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci: Option<f64>,
}

impl Stat {
    /// Half-width `1.96 * s / sqrt(n)` with the sample standard deviation.
    pub fn from_runs(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Z95 * var.sqrt() / n.sqrt()
        });
        Stat { mean, ci }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Language id, or `None` for all languages pooled.
    pub language: Option<u32>,
    pub cfg: bool,
    pub n_prompts: usize,
    pub cer: Stat,
    pub ssim: Stat,
    pub quality: Stat,
}

impl ReportRow {
    pub fn language_label(&self) -> String {
        self.language.map_or_else(|| "all".to_string(), |l| l.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    /// Content hash or label of the evaluated checkpoint.
    pub checkpoint: String,
    pub settings: EvalSettings,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn row(&self, language: Option<u32>, cfg: bool) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.language == language && r.cfg == cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: MetricsReport = io::read_json(path)?;
        if r.version != REPORT_FORMAT_VERSION {
            return Err(Error::Config(format!("{}: unsupported report version {}", path.display(), r.version)));
        }
        Ok(r)
    }
}

/// Seed key of a prompt, from its content, so that a prompt sees the same
/// noise wherever it sits in the set.
fn prompt_key(prompt: &Prompt) -> u64 {
    let digest = io::sha256_hex(serde_json::to_string(prompt).expect("prompt serializes").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

struct Scored {
    key: u64,
    language: u32,
    cer: f64,
    ssim: f64,
    quality: f64,
}

fn score_run(params: &PolicyParams, prompts: &PromptSet, oracle: &dyn Oracle, opts: &SampleOptions, run_seed: u64) -> Result<Vec<Scored>> {
    let mut scored: Vec<Scored> = prompts
        .prompts
        .par_iter()
        .map(|prompt| {
            let key = prompt_key(prompt);
            let mut r = rng::rng_for(run_seed, &[key]);
            let sample = sample_response(params, prompt, opts, &mut r)?;
            let (cer, ssim, quality) = match oracle.score(prompt, &sample.response) {
                Ok(raw) => (raw.cer, raw.ssim, raw.pesq),
                Err(e) => {
                    warn!("evaluation judge failed, scoring worst: {e}");
                    (1.0, 0.0, QUALITY_MIN)
                }
            };
            Ok(Scored {
                key,
                language: prompt.language_id,
                cer,
                ssim,
                quality,
            })
        })
        .collect::<Result<_>>()?;
    // Fixed summation order regardless of prompt order or thread count.
    scored.sort_by(|a, b| (a.language, a.key).cmp(&(b.language, b.key)).then(a.cer.total_cmp(&b.cer)));
    Ok(scored)
}

fn means(items: &[&Scored]) -> [f64; 3] {
    let n = items.len() as f64;
    let mut acc = [0.0; 3];
    for s in items {
        acc[0] += s.cer;
        acc[1] += s.ssim;
        acc[2] += s.quality;
    }
    acc.map(|a| a / n)
}

/// Generate one response per prompt in each of `n_runs` runs, average the
/// judge scores per run, and report the mean and 95% half-width across runs,
/// per language and pooled. With `with_cfg` every row is repeated under
/// guidance.
pub fn evaluate(
    params: &PolicyParams,
    checkpoint: &str,
    prompts: &PromptSet,
    oracle: &dyn Oracle,
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricsReport> {
    settings.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidInput("evaluation prompt set is empty".into()));
    }
    let mut languages: Vec<u32> = prompts.prompts.iter().map(|p| p.language_id).collect();
    languages.sort_unstable();
    languages.dedup();

    let cfg_modes: &[bool] = if settings.with_cfg { &[false, true] } else { &[false] };
    let mut rows = Vec::new();
    for &cfg in cfg_modes {
        let opts = settings.options(cfg);
        // per_run[run][group] = [cer, ssim, quality]; group 0 is pooled.
        let mut per_run: Vec<Vec<[f64; 3]>> = Vec::with_capacity(settings.n_runs);
        for run in 0..settings.n_runs {
            let run_seed = rng::derive_seed(seed, &[tag("eval"), run as u64, cfg as u64]);
            let scored = score_run(params, prompts, oracle, &opts, run_seed)?;
            let mut groups = vec![means(&scored.iter().collect::<Vec<_>>())];
            for &l in &languages {
                groups.push(means(&scored.iter().filter(|s| s.language == l).collect::<Vec<_>>()));
            }
            per_run.push(groups);
        }
        let column = |g: usize, m: usize| -> Vec<f64> { per_run.iter().map(|r| r[g][m]).collect() };
        for (g, language) in std::iter::once(None).chain(languages.iter().map(|&l| Some(l))).enumerate() {
            let n_prompts = match language {
                None => prompts.len(),
                Some(l) => prompts.prompts.iter().filter(|p| p.language_id == l).count(),
            };
            rows.push(ReportRow {
                language,
                cfg,
                n_prompts,
                cer: Stat::from_runs(&column(g, 0)),
                ssim: Stat::from_runs(&column(g, 1)),
                quality: Stat::from_runs(&column(g, 2)),
            });
        }
    }
    Ok(MetricsReport {
        version: REPORT_FORMAT_VERSION,
        checkpoint: checkpoint.to_string(),
        settings: *settings,
        seed,
        rows,
    })
}

pub const CSV_HEADER: [&str; 9] = [
    "language",
    "cfg",
    "cer_mean",
    "cer_ci",
    "ssim_mean",
    "ssim_ci",
    "quality_mean",
    "quality_ci",
    "n_runs",
];

fn csv_bytes(report: &MetricsReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidInput(format!("csv encoding: {e}"));
    w.write_record(CSV_HEADER).map_err(fail)?;
    let ci = |s: &Stat| s.ci.map(|c| c.to_string()).unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.language_label(),
            if r.cfg { "on" } else { "off" }.to_string(),
            r.cer.mean.to_string(),
            ci(&r.cer),
            r.ssim.mean.to_string(),
            ci(&r.ssim),
            r.quality.mean.to_string(),
            ci(&r.quality),
            report.settings.n_runs.to_string(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("csv encoding: {e}")))
}

/// Validation R_cer and mean training reward against iteration.
pub fn curves_svg(log: &[LogRecord]) -> Option<String> {
    let mut val = Vec::new();
    let mut reward = Vec::new();
    for rec in log {
        match rec {
            LogRecord::Validation { iteration, summary } => val.push((*iteration as f64, summary.r_cer)),
            LogRecord::Train { iteration, mean_reward, .. } => reward.push((*iteration as f64, *mean_reward)),
            _ => {}
        }
    }
    if val.is_empty() && reward.is_empty() {
        return None;
    }
    let x_max = val.iter().chain(&reward).map(|p| p.0).fold(1.0, f64::max);
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for (y, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{label}</text>"#, pad - 4.0, sy(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">iteration {x_max}</text>"#, w - pad, h - pad + 16.0);
    for (series, colour, name, y) in [(&reward, "#999999", "mean reward", 16.0), (&val, "#1f5fbf", "validation R_cer", 30.0)] {
        if series.is_empty() {
            continue;
        }
        let pts: Vec<String> = series.iter().map(|&(x, v)| format!("{:.1},{:.1}", sx(x), sy(v))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{y}" font-size="12" fill="{colour}">{name}</text>"#, pad + 8.0);
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Write `report.json`, `report.csv` and, when the log has training or
/// validation records, `curves.svg` into `dir`. Returns the written paths.
pub fn emit_report(report: &MetricsReport, log: &[LogRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let json = dir.join("report.json");
    io::write_json(&json, report)?;
    written.push(json);
    let csv_path = dir.join("report.csv");
    io::write_atomic(&csv_path, &csv_bytes(report)?)?;
    written.push(csv_path);
    let svg = dir.join("curves.svg");
    match curves_svg(log) {
        Some(text) => {
            io::write_atomic(&svg, text.as_bytes())?;
            written.push(svg);
        }
        None => info!("training log has no curves; skipping {}", svg.display()),
    }
    Ok(written)
}

/// Read a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Format {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}
