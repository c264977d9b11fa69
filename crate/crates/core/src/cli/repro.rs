//! The two end-to-end experiments: baseline / fine-tuning / alignment on
//! held-out languages, and online GRPO against offline DPO.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::{self, AlignPaths, PromptSpec, StageRun, Workspace};
use crate::error::{Error, Result};
use crate::evalharness::{MetricsReport, Stat};
use crate::io;
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Row {
    /// `baseline`, `SFT-small`, `SFT-256`, `SFT-large`, each optionally
    /// followed by `+GRPO`.
    pub model: String,
    pub sft_examples: Option<usize>,
    pub grpo: bool,
    pub language: u32,
    pub cer: Stat,
    pub ssim: Stat,
    pub quality: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Summary {
    pub held_out_languages: Vec<u32>,
    pub rows: Vec<Fig3Row>,
    /// Sum of the wall times of every stage, as recorded when each ran.
    pub runtime_seconds: f64,
}

impl Fig3Summary {
    pub fn get(&self, sft_examples: Option<usize>, grpo: bool, language: u32) -> Option<&Fig3Row> {
        self.rows
            .iter()
            .find(|r| r.sft_examples == sft_examples && r.grpo == grpo && r.language == language)
    }
}

fn sft_label(n: usize, sizes: &[usize]) -> String {
    let smallest = sizes.iter().min() == Some(&n);
    let largest = sizes.iter().max() == Some(&n);
    match (smallest, largest) {
        (true, false) => "SFT-small".into(),
        (false, true) => "SFT-large".into(),
        _ => format!("SFT-{n}"),
    }
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let fail = |e: csv::Error| Error::InvalidInput(format!("csv encoding: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("csv encoding: {e}")))
}

fn fmt_stat(s: &Stat, scale: f64, digits: usize) -> String {
    match s.ci {
        Some(c) => format!("{:.*} ± {:.*}", digits, s.mean * scale, digits, c * scale),
        None => format!("{:.*}", digits, s.mean * scale),
    }
}

struct Tally {
    seconds: f64,
}

impl Tally {
    fn add(&mut self, r: StageRun) {
        self.seconds += r.seconds;
    }
}

/// Baseline, fine-tuning at each size, and GRPO from each of those, all
/// evaluated on the held-out languages.
pub fn fig3(ws: &Workspace) -> Result<(Fig3Summary, String)> {
    let cfg = &ws.cfg;
    let held = cfg.data.held_out_languages.clone();
    let mut tally = Tally { seconds: 0.0 };
    tally.add(stages::world_gen(ws)?);

    let baseline = ws.path("checkpoints/baseline.json");
    tally.add(stages::pretrain(ws, "pretrain", &baseline, &ws.path("logs/pretrain.jsonl"), cfg.pretrain.max_steps)?);

    let mut sizes = cfg.fig3.sft_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut starts: Vec<(String, Option<usize>, PathBuf)> = vec![("baseline".into(), None, baseline.clone())];
    for &n in &sizes {
        let name = format!("sft_{n}");
        let out = ws.path(&format!("checkpoints/{name}.json"));
        tally.add(stages::finetune(ws, &format!("finetune-{n}"), &baseline, &out, &ws.path(&format!("logs/{name}.jsonl")), n)?);
        starts.push((name, Some(n), out));
    }

    let prompts = PromptSpec {
        languages: cfg.all_languages(),
        n_per_language: cfg.data.prompts_per_language,
        seed: ws.seed("prompts"),
    };
    let validation = PromptSpec {
        languages: held.clone(),
        n_per_language: cfg.data.validation_prompts_per_language,
        seed: ws.seed("validation-prompts"),
    };
    let eval_prompts = PromptSpec {
        languages: held.clone(),
        n_per_language: cfg.fig3.eval_prompts_per_language,
        seed: ws.seed("eval-prompts"),
    };
    let eval_seed = ws.seed("eval");

    let mut rows = Vec::new();
    for (name, sft_examples, start) in &starts {
        let anchors = ws.path(&format!("anchors/{name}.json"));
        tally.add(stages::anchors(ws, &format!("anchors-{name}"), start, &anchors, &prompts, &cfg.grpo.sampling, ws.seed("anchors"))?);
        let aligned = ws.path(&format!("checkpoints/{name}_grpo.json"));
        let paths = AlignPaths {
            start,
            anchors: &anchors,
            out: &aligned,
            log: &ws.path(&format!("logs/{name}_grpo.jsonl")),
        };
        tally.add(stages::grpo(ws, &format!("grpo-{name}"), &paths, &cfg.grpo, &prompts, &validation, ws.seed("grpo"))?);

        for (grpo, ck) in [(false, start.as_path()), (true, aligned.as_path())] {
            let tag_name = if grpo { format!("{name}_grpo") } else { name.clone() };
            let out = ws.path(&format!("eval/fig3/{tag_name}.json"));
            tally.add(stages::eval(ws, &format!("eval-fig3-{tag_name}"), ck, &out, &cfg.fig3.eval, &eval_prompts, eval_seed)?);
            let report = MetricsReport::load(&out)?;
            let base_label = sft_examples.map_or_else(|| "baseline".to_string(), |n| sft_label(n, &sizes));
            for &l in &held {
                let row = report.row(Some(l), false).ok_or_else(|| Error::InvalidInput(format!("report {} lacks language {l}", out.display())))?;
                rows.push(Fig3Row {
                    model: if grpo { format!("{base_label}+GRPO") } else { base_label.clone() },
                    sft_examples: *sft_examples,
                    grpo,
                    language: l,
                    cer: row.cer,
                    ssim: row.ssim,
                    quality: row.quality,
                });
            }
        }
    }
    rows.sort_by_key(|r| (r.language, r.sft_examples.map_or(0, |n| n + 1), r.grpo));

    let summary = Fig3Summary {
        held_out_languages: held,
        rows,
        runtime_seconds: tally.seconds,
    };
    io::write_json(&ws.path("fig3/summary.json"), &summary)?;
    let table: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.language.to_string(),
                r.model.clone(),
                r.sft_examples.map(|n| n.to_string()).unwrap_or_default(),
                r.cer.mean.to_string(),
                r.cer.ci.map(|c| c.to_string()).unwrap_or_default(),
                r.ssim.mean.to_string(),
                r.ssim.ci.map(|c| c.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_atomic(
        &ws.path("fig3/table.csv"),
        &csv_table(&["language", "model", "sft_examples", "cer_mean", "cer_ci", "ssim_mean", "ssim_ci"], &table)?,
    )?;

    let mut text = String::new();
    let _ = writeln!(text, "{:<9} {:<16} {:>16} {:>18}", "language", "model", "CER %", "SSIM");
    for r in &summary.rows {
        let _ = writeln!(
            text,
            "{:<9} {:<16} {:>16} {:>18}",
            r.language,
            r.model,
            fmt_stat(&r.cer, 100.0, 2),
            fmt_stat(&r.ssim, 1.0, 4)
        );
    }
    let _ = writeln!(text, "total stage time {:.0}s", summary.runtime_seconds);
    io::write_atomic(&ws.path("fig3/table.txt"), text.as_bytes())?;
    Ok((summary, text))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Cell {
    pub cer: f64,
    pub ssim: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Rep {
    pub repetition: usize,
    /// Indexed by guidance off / on.
    pub base: [Table1Cell; 2],
    pub dpo: [Table1Cell; 2],
    pub grpo: [Table1Cell; 2],
}

impl Table1Rep {
    /// GRPO's CER is no higher and its SSIM no lower than DPO's, with and
    /// without guidance.
    pub fn grpo_wins(&self) -> bool {
        (0..2).all(|c| self.grpo[c].cer <= self.dpo[c].cer && self.grpo[c].ssim >= self.dpo[c].ssim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Summary {
    pub repetitions: Vec<Table1Rep>,
    pub grpo_wins: usize,
    pub runtime_seconds: f64,
}

fn cells(report: &MetricsReport) -> Result<[Table1Cell; 2]> {
    let get = |cfg: bool| {
        report
            .row(None, cfg)
            .map(|r| Table1Cell {
                cer: r.cer.mean,
                ssim: r.ssim.mean,
                quality: r.quality.mean,
            })
            .ok_or_else(|| Error::InvalidInput("table1 evaluation needs rows with and without guidance".into()))
    };
    Ok([get(false)?, get(true)?])
}

/// Base, base+DPO and base+GRPO on the seen languages, repeated with
/// different prompt sets and seeds.
pub fn table1(ws: &Workspace) -> Result<(Table1Summary, String)> {
    let cfg = &ws.cfg;
    let t = &cfg.table1;
    if !t.eval.with_cfg {
        return Err(Error::Config("table1.eval.with_cfg must be true".into()));
    }
    let mut tally = Tally { seconds: 0.0 };
    tally.add(stages::world_gen(ws)?);
    let base = ws.path("checkpoints/table1_base.json");
    tally.add(stages::pretrain(ws, "table1/pretrain", &base, &ws.path("logs/table1_base.jsonl"), t.pretrain_steps)?);

    let seen = cfg.data.seen_languages.clone();
    let eval_prompts = PromptSpec {
        languages: seen.clone(),
        n_per_language: t.eval_prompts_per_language,
        seed: ws.seed("table1-eval-prompts"),
    };
    let validation = PromptSpec {
        languages: seen.clone(),
        n_per_language: t.validation_prompts_per_language,
        seed: ws.seed("table1-validation"),
    };

    let mut reps = Vec::new();
    for r in 0..t.repetitions {
        let rs = derive_seed(cfg.seed, &[tag("table1"), r as u64]);
        let dir = format!("table1/rep{r}");
        let prompts = PromptSpec {
            languages: seen.clone(),
            n_per_language: t.prompts_per_language,
            seed: derive_seed(rs, &[tag("prompts")]),
        };
        let anchors = ws.path(&format!("{dir}/anchors.json"));
        tally.add(stages::anchors(ws, &format!("{dir}/anchors"), &base, &anchors, &prompts, &t.grpo.sampling, derive_seed(rs, &[tag("anchors")]))?);

        let grpo_out = ws.path(&format!("{dir}/grpo.json"));
        let grpo_paths = AlignPaths {
            start: &base,
            anchors: &anchors,
            out: &grpo_out,
            log: &ws.path(&format!("{dir}/grpo.jsonl")),
        };
        tally.add(stages::grpo(ws, &format!("{dir}/grpo"), &grpo_paths, &t.grpo, &prompts, &validation, rs)?);
        let dpo_out = ws.path(&format!("{dir}/dpo.json"));
        let dpo_paths = AlignPaths {
            start: &base,
            anchors: &anchors,
            out: &dpo_out,
            log: &ws.path(&format!("{dir}/dpo.jsonl")),
        };
        tally.add(stages::dpo(ws, &format!("{dir}/dpo"), &dpo_paths, &t.dpo, &t.grpo, &prompts, &validation, rs)?);

        // Common evaluation noise for the three models of a repetition.
        let eval_seed = derive_seed(cfg.seed, &[tag("table1-eval"), r as u64]);
        let mut out = Vec::new();
        for (label, ck) in [("base", &base), ("dpo", &dpo_out), ("grpo", &grpo_out)] {
            let path = ws.path(&format!("{dir}/eval_{label}.json"));
            tally.add(stages::eval(ws, &format!("{dir}/eval-{label}"), ck, &path, &t.eval, &eval_prompts, eval_seed)?);
            out.push(cells(&MetricsReport::load(&path)?)?);
        }
        reps.push(Table1Rep {
            repetition: r,
            base: out[0],
            dpo: out[1],
            grpo: out[2],
        });
    }
    let grpo_wins = reps.iter().filter(|r| r.grpo_wins()).count();
    let summary = Table1Summary {
        repetitions: reps,
        grpo_wins,
        runtime_seconds: tally.seconds,
    };
    io::write_json(&ws.path("table1/summary.json"), &summary)?;

    let mut table = Vec::new();
    for rep in &summary.repetitions {
        for (label, c) in [("base", &rep.base), ("base+DPO", &rep.dpo), ("base+GRPO", &rep.grpo)] {
            for (g, name) in [(0, "off"), (1, "on")] {
                table.push(vec![
                    rep.repetition.to_string(),
                    label.to_string(),
                    name.to_string(),
                    c[g].cer.to_string(),
                    c[g].ssim.to_string(),
                    c[g].quality.to_string(),
                ]);
            }
        }
    }
    io::write_atomic(
        &ws.path("table1/table.csv"),
        &csv_table(&["repetition", "model", "cfg", "cer", "ssim", "quality"], &table)?,
    )?;

    let n = summary.repetitions.len() as f64;
    let mut text = String::new();
    let _ = writeln!(text, "{:<10} {:>12} {:>10} {:>12} {:>10}", "model", "CER % (off)", "SSIM", "CER % (on)", "SSIM");
    type Pick = fn(&Table1Rep) -> &[Table1Cell; 2];
    let picks: [(&str, Pick); 3] = [("base", |r| &r.base), ("base+DPO", |r| &r.dpo), ("base+GRPO", |r| &r.grpo)];
    for (label, pick) in picks {
        let mean = |g: usize, f: fn(&Table1Cell) -> f64| summary.repetitions.iter().map(|r| f(&pick(r)[g])).sum::<f64>() / n;
        let _ = writeln!(
            text,
            "{:<10} {:>12.2} {:>10.4} {:>12.2} {:>10.4}",
            label,
            100.0 * mean(0, |c| c.cer),
            mean(0, |c| c.ssim),
            100.0 * mean(1, |c| c.cer),
            mean(1, |c| c.ssim)
        );
    }
    let _ = writeln!(
        text,
        "GRPO at least as good as DPO on all four metrics in {}/{} repetitions",
        summary.grpo_wins,
        summary.repetitions.len()
    );
    let _ = writeln!(text, "total stage time {:.0}s", summary.runtime_seconds);
    io::write_atomic(&ws.path("table1/table.txt"), text.as_bytes())?;
    Ok((summary, text))
}

pub fn load_fig3(dir: &Path) -> Result<Fig3Summary> {
    io::read_json(&dir.join("fig3/summary.json"))
}

pub fn load_table1(dir: &Path) -> Result<Table1Summary> {
    io::read_json(&dir.join("table1/summary.json"))
}
