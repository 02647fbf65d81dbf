//! Markdown report over whatever artifacts a run directory holds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use saclog_core::review::Technique;
use saclog_core::scheduler::{LogEntry, Phase};

use crate::error::Result;
use crate::formats::{self, ProvenanceLine, ScoreLine};
use crate::pipeline::{median, metrics_by_mode, Metrics, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceCount {
    /// Sidecar path relative to the run directory.
    pub path: String,
    pub lines: usize,
    /// Dialogs in the augmented file next to the sidecar.
    pub dialogs: usize,
    pub techniques: BTreeMap<Technique, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: Vec<Metrics>,
    pub medians: BTreeMap<TrainMode, f64>,
    pub provenance: Vec<ProvenanceCount>,
    pub plots: Vec<String>,
    pub missing: Vec<String>,
    pub text: String,
}

/// Files under `root`, depth first in name order.
fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(root) else {
        return out;
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn in_train_dir(root: &Path, p: &Path) -> bool {
    p.strip_prefix(root)
        .map(|r| r.components().any(|c| c.as_os_str() == "train"))
        .unwrap_or(false)
}

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n{body}</svg>\n",
        y0 = H - PAD,
        x1 = W - PAD,
    )
}

pub fn histogram_svg(counts: &[usize]) -> String {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (W - 2.0 * PAD) / counts.len().max(1) as f64;
    let mut body = String::new();
    for (i, &c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * c as f64 / max;
        let x = PAD + i as f64 * bw;
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"/>",
            H - PAD - h,
            bw - 2.0
        );
        let _ = writeln!(body, "<text x=\"{x:.1}\" y=\"{:.1}\">{:.1}</text>", H - PAD + 14.0, i as f64 / counts.len() as f64);
    }
    svg_frame("hybrid score distribution", &body)
}

/// Per-epoch mean loss in log order; stage boundaries as dashed lines.
pub fn loss_svg(title: &str, entries: &[LogEntry]) -> String {
    let ys: Vec<f64> = entries.iter().map(|e| e.mean_loss).collect();
    let max = ys.iter().copied().filter(|y| y.is_finite()).fold(0.0f64, f64::max).max(1e-12);
    let n = ys.len().max(2) as f64 - 1.0;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / max).clamp(0.0, 1.0);
    let mut body = String::new();
    let points: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
    let _ = writeln!(body, "<polyline fill=\"none\" stroke=\"firebrick\" points=\"{}\"/>", points.join(" "));
    for (i, e) in entries.iter().enumerate() {
        let starts_stage = i == 0 || (e.phase, e.stage) != (entries[i - 1].phase, entries[i - 1].stage);
        if starts_stage && i > 0 {
            let _ = writeln!(
                body,
                "<line x1=\"{0:.1}\" y1=\"{PAD}\" x2=\"{0:.1}\" y2=\"{1}\" stroke=\"gray\" stroke-dasharray=\"3,3\"/>",
                x(i),
                H - PAD
            );
        }
        let color = match e.phase {
            Phase::Warmup => "orange",
            Phase::Stage => "firebrick",
            Phase::Post => "seagreen",
            Phase::Baseline => "steelblue",
        };
        let _ = writeln!(body, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>", x(i), y(e.mean_loss));
    }
    let _ = writeln!(body, "<text x=\"4\" y=\"{PAD}\">{max:.3}</text>");
    svg_frame(title, &body)
}

fn fmt_pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Reads every artifact under `root` and writes `report.md` and `plots/`.
/// Missing artifacts are listed in the report rather than failing.
pub fn write_report(root: &Path) -> Result<Report> {
    let files = walk(root);
    let mut text = String::from("# Run report\n\n");
    let mut missing = Vec::new();
    let mut plots = Vec::new();

    text.push_str("## Difficulty scores\n\n");
    let scores_path = root.join("scores.jsonl");
    match formats::read_jsonl::<ScoreLine>(&scores_path) {
        Ok(lines) => {
            let mut hist = vec![0usize; 10];
            for (_, s) in &lines {
                hist[saclog_core::scheduler::bucket_index(s.hybrid.clamp(0.0, 1.0), 10)] += 1;
            }
            let _ = writeln!(text, "{} scored examples.\n\n| bin | count |\n|---|---|", lines.len());
            for (i, c) in hist.iter().enumerate() {
                let _ = writeln!(text, "| [{:.1}, {:.1}{} | {c} |", i as f64 / 10.0, (i + 1) as f64 / 10.0, if i == 9 { "]" } else { ")" });
            }
            formats::write_bytes(&root.join("plots/scores.svg"), histogram_svg(&hist).as_bytes())?;
            plots.push(String::from("plots/scores.svg"));
            text.push_str("\n![scores](plots/scores.svg)\n\n");
        }
        Err(_) => {
            missing.push(String::from("scores.jsonl"));
            text.push_str("No artifacts: scores.jsonl not found.\n\n");
        }
    }

    text.push_str("## Training loss curves\n\n");
    let logs: Vec<&PathBuf> = files
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "log.jsonl") && in_train_dir(root, p))
        .collect();
    if logs.is_empty() {
        missing.push(String::from("train/*/log.jsonl"));
        text.push_str("No artifacts: no training logs found.\n\n");
    }
    for p in logs {
        let name = rel(root, p.parent().unwrap_or(root)).replace(std::path::MAIN_SEPARATOR, "-");
        match formats::read_jsonl::<LogEntry>(p) {
            Ok(lines) => {
                let entries: Vec<LogEntry> = lines.into_iter().map(|(_, e)| e).collect();
                let plot = format!("plots/loss-{name}.svg");
                formats::write_bytes(&root.join(&plot), loss_svg(&name, &entries).as_bytes())?;
                let stages = entries.iter().filter_map(|e| e.stage).collect::<std::collections::BTreeSet<_>>().len();
                let _ = writeln!(text, "- `{}`: {} epochs, {stages} stages. ![{name}]({plot})", rel(root, p), entries.len());
                plots.push(plot);
            }
            Err(e) => {
                let _ = writeln!(text, "- `{}`: unreadable ({e})", rel(root, p));
            }
        }
    }
    text.push('\n');

    text.push_str("## Joint goal accuracy\n\n");
    let mut metrics: Vec<Metrics> = files
        .iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "metrics.json") && in_train_dir(root, p))
        .filter_map(|p| formats::read_json::<Metrics>(p).ok())
        .collect();
    metrics.sort_by(|a, b| (a.mode, a.seed).cmp(&(b.mode, b.seed)).then(a.jga.total_cmp(&b.jga)));
    let mut medians = BTreeMap::new();
    if metrics.is_empty() {
        missing.push(String::from("train/*/metrics.json"));
        text.push_str("No artifacts: no training metrics found.\n\n");
    } else {
        text.push_str("| mode | seed | JGA | epochs | augmented | preview |\n|---|---|---|---|---|---|\n");
        for m in &metrics {
            let _ = writeln!(
                text,
                "| {} | {} | {} | {} | {} | {} |",
                m.mode,
                m.seed,
                fmt_pct(m.jga),
                m.epochs_total,
                m.augmented,
                m.preview
            );
        }
        text.push_str("\n| mode | runs | median JGA |\n|---|---|---|\n");
        for (mode, ms) in metrics_by_mode(&metrics) {
            let jgas: Vec<f64> = ms.iter().map(|m| m.jga).collect();
            let med = median(&jgas).expect("non-empty group");
            medians.insert(mode, med);
            let _ = writeln!(text, "| {mode} | {} | {} |", ms.len(), fmt_pct(med));
        }
        if let (Some(c), Some(b)) = (medians.get(&TrainMode::Curriculum), medians.get(&TrainMode::Baseline)) {
            let _ = writeln!(
                text,
                "\nMedian JGA: curriculum {} vs baseline {} ({:+.2} points).",
                fmt_pct(*c),
                fmt_pct(*b),
                100.0 * (c - b)
            );
        }
        text.push('\n');
    }

    text.push_str("## Augmentation provenance\n\n");
    let mut provenance = Vec::new();
    for p in files.iter().filter(|p| p.file_name().is_some_and(|n| n == "provenance.jsonl")) {
        let lines = match formats::read_jsonl::<ProvenanceLine>(p) {
            Ok(l) => l,
            Err(e) => {
                let _ = writeln!(text, "- `{}`: unreadable ({e})", rel(root, p));
                continue;
            }
        };
        let mut techniques: BTreeMap<Technique, usize> = Technique::ALL.iter().map(|&t| (t, 0)).collect();
        for (_, l) in &lines {
            *techniques.entry(l.technique).or_default() += 1;
        }
        let augmented = p.with_file_name("augmented.jsonl");
        let dialogs = formats::read_text(&augmented).map_or(0, |t| t.lines().filter(|l| !l.trim().is_empty()).count());
        provenance.push(ProvenanceCount {
            path: rel(root, p),
            lines: lines.len(),
            dialogs,
            techniques,
        });
    }
    if provenance.is_empty() {
        missing.push(String::from("provenance.jsonl"));
        text.push_str("No artifacts: no provenance sidecars found.\n\n");
    } else {
        text.push_str("| sidecar | slot substitution | value replacement | recombination | lines | dialogs |\n|---|---|---|---|---|---|\n");
        for c in &provenance {
            let t = |k| c.techniques.get(&k).copied().unwrap_or(0);
            let _ = writeln!(
                text,
                "| `{}` | {} | {} | {} | {} | {} |",
                c.path,
                t(Technique::SlotSubstitution),
                t(Technique::ValueReplacement),
                t(Technique::DialogRecombination),
                c.lines,
                c.dialogs
            );
        }
        text.push('\n');
    }

    if !missing.is_empty() {
        text.push_str("## Missing artifacts\n\n");
        for m in &missing {
            let _ = writeln!(text, "- {m}");
        }
    }
    formats::write_bytes(&root.join("report.md"), text.as_bytes())?;
    Ok(Report {
        metrics,
        medians,
        provenance,
        plots,
        missing,
        text,
    })
}
