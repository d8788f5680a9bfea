use std::fmt::Write as _;

use super::Metrics;
use crate::error::{Error, Result};
use crate::network::{EpochStats, RunConfig};

/// Everything recorded about one training + evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub config: RunConfig,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: Vec<EpochStats>,
    pub metrics: Metrics,
    pub class_names: Option<Vec<String>>,
    /// Named wall-clock durations in seconds.
    pub timings: Vec<(String, f64)>,
    pub checkpoint: Option<String>,
}

const BEGIN: &str = "psreport v1";
const END: &str = "end psreport";

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(line, format!("bad number {s:?}")))
}

impl RunReport {
    pub fn class_label(&self, c: usize) -> String {
        self.class_names
            .as_ref()
            .and_then(|n| n.get(c).cloned())
            .unwrap_or_else(|| format!("class{c}"))
    }

    /// Plain text. Sections hold exact values (floats in shortest
    /// round-trip form); the `[summary]` section is derived from the
    /// confusion matrix, printed to four decimals, and ignored by `parse`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{BEGIN}");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "param_count = {}", self.param_count);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.as_deref().unwrap_or("-"));
        if let Some(names) = &self.class_names {
            let _ = writeln!(s, "classes = {}", names.join(" "));
        }
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config.to_text());
        let _ = writeln!(s, "[epochs]");
        let _ = writeln!(s, "# epoch loss accuracy learning_rate seconds");
        for e in &self.epochs {
            let _ = writeln!(s, "{} {:?} {:?} {:?} {:?}", e.epoch, e.loss, e.accuracy, e.learning_rate, e.seconds);
        }
        let _ = writeln!(s, "[timings]");
        for (k, v) in &self.timings {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "[confusion]");
        let _ = writeln!(s, "# rows: ground truth, columns: prediction");
        let l = self.metrics.num_classes;
        for g in 0..l {
            let row: Vec<String> = (0..l).map(|p| self.metrics.count(g, p).to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "[summary]");
        let _ = writeln!(s, "# derived from the confusion matrix; multiply by 100 for percentages");
        let _ = writeln!(s, "points = {}", self.metrics.total());
        let _ = writeln!(s, "overall_accuracy = {:.4}", self.metrics.overall_accuracy());
        let _ = writeln!(s, "mean_iou = {:.4}", self.metrics.mean_iou());
        for (c, iou) in self.metrics.per_class_iou().iter().enumerate() {
            let v = iou.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "iou.{} = {v}", self.class_label(c));
        }
        let _ = writeln!(s, "{END}");
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
        let reports = parse_many(&lines)?;
        match <[RunReport; 1]>::try_from(reports) {
            Ok([r]) => Ok(r),
            Err(v) => Err(parse_err(1, format!("expected one report, found {}", v.len()))),
        }
    }
}

/// Parses every report found in `text`, skipping anything between them.
pub fn parse_reports(text: &str) -> Result<Vec<RunReport>> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    parse_many(&lines)
}

fn parse_many(lines: &[(usize, &str)]) -> Result<Vec<RunReport>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].1.trim() == BEGIN {
            let start = i;
            while i < lines.len() && lines[i].1.trim() != END {
                i += 1;
            }
            if i == lines.len() {
                return Err(parse_err(lines[start].0, "report is not terminated"));
            }
            out.push(parse_one(&lines[start + 1..i])?);
        }
        i += 1;
    }
    Ok(out)
}

fn parse_one(lines: &[(usize, &str)]) -> Result<RunReport> {
    let mut section = "";
    let mut header: Vec<(usize, String, String)> = Vec::new();
    let mut config = String::new();
    let mut epochs = Vec::new();
    let mut timings = Vec::new();
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for &(line, raw) in lines {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t.starts_with('[') && t.ends_with(']') {
            section = match &t[1..t.len() - 1] {
                s @ ("config" | "epochs" | "timings" | "confusion" | "summary") => s,
                other => return Err(parse_err(line, format!("unknown section {other}"))),
            };
            continue;
        }
        match section {
            "" => {
                let (k, v) = t.split_once('=').ok_or_else(|| parse_err(line, "expected key = value"))?;
                header.push((line, k.trim().to_string(), v.trim().to_string()));
            }
            "config" => {
                config.push_str(t);
                config.push('\n');
            }
            "epochs" => {
                let f: Vec<&str> = t.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(parse_err(line, "epoch rows have five columns"));
                }
                epochs.push(EpochStats {
                    epoch: num(line, f[0])?,
                    loss: num(line, f[1])?,
                    accuracy: num(line, f[2])?,
                    learning_rate: num(line, f[3])?,
                    seconds: num(line, f[4])?,
                });
            }
            "timings" => {
                let (k, v) = t.split_once('=').ok_or_else(|| parse_err(line, "expected name = seconds"))?;
                timings.push((k.trim().to_string(), num(line, v.trim())?));
            }
            "confusion" => rows.push(t.split_whitespace().map(|v| num(line, v)).collect::<Result<_>>()?),
            _ => {}
        }
    }
    let l = rows.len();
    if rows.iter().any(|r| r.len() != l) {
        return Err(Error::data("confusion matrix is not square"));
    }
    let get = |key: &str| {
        header
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(line, _, v)| (*line, v.as_str()))
            .ok_or_else(|| Error::data(format!("report lacks {key}")))
    };
    let (_, name) = get("name")?;
    let (seed_line, seed) = get("seed")?;
    let (pc_line, pc) = get("param_count")?;
    let (_, ckpt) = get("checkpoint")?;
    Ok(RunReport {
        name: name.to_string(),
        config: RunConfig::parse(&config)?,
        seed: num(seed_line, seed)?,
        param_count: num(pc_line, pc)?,
        epochs,
        metrics: Metrics {
            num_classes: l,
            confusion: rows.concat(),
        },
        class_names: get("classes").ok().map(|(_, v)| v.split_whitespace().map(String::from).collect()),
        timings,
        checkpoint: (ckpt != "-").then(|| ckpt.to_string()),
    })
}

/// Aligned text table with a header row.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(header.to_vec());
    s.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        let mut metrics = Metrics::new(3);
        metrics.accumulate(&[0, 1, 1, 2, 2], &[0, 1, 2, 2, 2]).unwrap();
        RunReport {
            name: "full".into(),
            config: RunConfig::default(),
            seed: 42,
            param_count: 1234,
            epochs: vec![
                EpochStats {
                    epoch: 1,
                    loss: 1.0 / 3.0,
                    accuracy: 0.1,
                    learning_rate: 0.001,
                    seconds: 2.5,
                },
                EpochStats {
                    epoch: 2,
                    loss: 0.2,
                    accuracy: 0.7000000000000001,
                    learning_rate: 0.001,
                    seconds: 1e-3,
                },
            ],
            metrics,
            class_names: Some(vec!["floor".into(), "wall".into(), "table".into()]),
            timings: vec![("train".into(), 12.25), ("eval".into(), 0.1)],
            checkpoint: Some("run.ckpt".into()),
        }
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let r = report();
        let text = r.to_text();
        assert!(text.contains("mean_iou = 0.7222"), "{text}");
        assert_eq!(RunReport::parse(&text).unwrap(), r);
    }

    #[test]
    fn several_reports_in_one_file() {
        let mut b = report();
        b.name = "other".into();
        b.checkpoint = None;
        b.class_names = None;
        let text = format!("table\n{}\n{}", report().to_text(), b.to_text());
        assert_eq!(parse_reports(&text).unwrap(), vec![report(), b]);
    }

    #[test]
    fn table_is_aligned() {
        let t = format_table(&["variant", "mIoU"], &[vec!["a".into(), "0.5".into()], vec!["longer".into(), "1".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "variant  mIoU");
        assert_eq!(lines[3], "longer      1");
    }
}
