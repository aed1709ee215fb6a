//! Per-round client measurements and their CSV form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "round,client_id,test_acc,train_loss,selected,mean_score,rho,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub client_id: usize,
    pub test_acc: f64,
    pub train_loss: f64,
    /// Selected peers, ascending.
    pub selected: Vec<usize>,
    /// Mean composite score of the selected peers, when scores exist.
    pub mean_score: Option<f64>,
    /// Selection skew, when defined.
    pub rho: Option<f64>,
    pub wall_ms: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let selected: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.client_id,
            r.test_acc,
            r.train_loss,
            selected.join(";"),
            opt(r.mean_score),
            opt(r.rho),
            r.wall_ms
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let err = |line: usize, message: String| Error::Parse {
        path: "metrics".into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(err(1, "missing metrics header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(n, format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("bad integer {s:?}")));
        let optional = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(RoundMetrics {
            round: int(f[0])?,
            client_id: int(f[1])?,
            test_acc: num(f[2])?,
            train_loss: num(f[3])?,
            selected: if f[4].is_empty() {
                Vec::new()
            } else {
                f[4].split(';').map(int).collect::<Result<_>>()?
            },
            mean_score: optional(f[5])?,
            rho: optional(f[6])?,
            wall_ms: f[7].parse().map_err(|_| err(n, format!("bad wall_ms {:?}", f[7])))?,
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv(rows: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Mean test accuracy over the rows of each round.
pub fn mean_accuracy_by_round(rows: &[RoundMetrics]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.round).or_default();
        e.0 += r.test_acc;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// First round whose mean client accuracy reaches `target`, or `None` when
/// no round does.
pub fn rounds_to_target(rows: &[RoundMetrics], target: f64) -> Option<usize> {
    mean_accuracy_by_round(rows)
        .into_iter()
        .find(|&(_, acc)| acc >= target)
        .map(|(round, _)| round)
}

/// Mean accuracy of the last recorded round.
pub fn final_mean_accuracy(rows: &[RoundMetrics]) -> Option<f64> {
    mean_accuracy_by_round(rows).into_iter().next_back().map(|(_, a)| a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, client: usize, acc: f64) -> RoundMetrics {
        RoundMetrics {
            round,
            client_id: client,
            test_acc: acc,
            train_loss: 0.5,
            selected: vec![],
            mean_score: None,
            rho: None,
            wall_ms: 0,
        }
    }

    fn series() -> Vec<RoundMetrics> {
        (1..=10)
            .flat_map(|r| [row(r, 0, r as f64 * 0.1), row(r, 1, r as f64 * 0.1 - 0.05)])
            .collect()
    }

    #[test]
    fn target_examples() {
        let s = series();
        assert_eq!(rounds_to_target(&s, 0.0), Some(1));
        assert_eq!(rounds_to_target(&s, 1.01), None);
        // round 7 mean = 0.675
        assert_eq!(rounds_to_target(&s, 0.67), Some(7));
        assert_eq!(rounds_to_target(&s, 0.676), Some(8));
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = series();
        rows[3].selected = vec![2, 5, 11];
        rows[3].mean_score = Some(0.123456789);
        rows[3].rho = Some(-1.5e-7);
        rows[4].wall_ms = 17;
        let text = format_metrics_csv(&rows);
        assert!(text.starts_with(METRICS_HEADER));
        assert!(text.contains(",2;5;11,0.123456789,"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
    }

    #[test]
    fn undefined_rho_is_empty_field() {
        let text = format_metrics_csv(&[row(1, 3, 0.5)]);
        assert_eq!(text.lines().nth(1).unwrap(), "1,3,0.5,0.5,,,,0");
    }
}
