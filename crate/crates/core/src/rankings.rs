//! Competition ranking and the "one-in" analysis of how a method's standing
//! changes when only it is evaluated under a different protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("protocol {0:?} is not in the score table")]
    MissingProtocol(String),
    #[error("protocol {protocol:?} has {found} scores for {expected} methods")]
    Coverage {
        protocol: String,
        expected: usize,
        found: usize,
    },
    #[error("score table has no methods")]
    Empty,
    #[error("score for {method:?} under {protocol:?} is not a number")]
    NotANumber { method: String, protocol: String },
    #[error("malformed score table: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::HigherBetter => a > b,
            Direction::LowerBetter => a < b,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higher" | "higher_better" => Ok(Direction::HigherBetter),
            "lower" | "lower_better" => Ok(Direction::LowerBetter),
            other => Err(RankError::Malformed(format!("unknown direction {other:?}"))),
        }
    }
}

/// Competition ("1224") ranking: one plus the number of strictly better
/// scores.
pub fn rank(scores: &[f64], direction: Direction) -> Vec<usize> {
    scores
        .iter()
        .map(|&s| 1 + scores.iter().filter(|&&o| direction.better(o, s)).count())
        .collect()
}

/// Rank of `own` among `others` plus itself.
pub fn one_in_rank(own: f64, others: &[f64], direction: Direction) -> usize {
    1 + others.iter().filter(|&&o| direction.better(o, own)).count()
}

/// Scores of several methods under several protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub direction: Option<Direction>,
    pub methods: Vec<String>,
    /// Protocol id → one score per method, in `methods` order.
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<(), RankError> {
        if self.methods.is_empty() {
            return Err(RankError::Empty);
        }
        for (p, col) in &self.scores {
            if col.len() != self.methods.len() {
                return Err(RankError::Coverage {
                    protocol: p.clone(),
                    expected: self.methods.len(),
                    found: col.len(),
                });
            }
            if let Some(i) = col.iter().position(|v| v.is_nan()) {
                return Err(RankError::NotANumber {
                    method: self.methods[i].clone(),
                    protocol: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn column(&self, protocol: &str) -> Result<&[f64], RankError> {
        self.scores
            .get(protocol)
            .map(Vec::as_slice)
            .ok_or_else(|| RankError::MissingProtocol(protocol.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ScoreTable, RankError> {
        let t: ScoreTable =
            serde_json::from_str(text).map_err(|e| RankError::Malformed(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    /// Parses `method,<protocol>,<protocol>...` CSV with a header row.
    /// Fields may be double-quoted; blank lines and `#` comments are skipped.
    pub fn from_csv(text: &str) -> Result<ScoreTable, RankError> {
        let mut rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(split_csv_line);
        let header = rows.next().ok_or(RankError::Empty)?;
        if header.len() < 2 {
            return Err(RankError::Malformed("header needs a method column and at least one protocol".into()));
        }
        let protocols = &header[1..];
        let mut methods = Vec::new();
        let mut scores: BTreeMap<String, Vec<f64>> =
            protocols.iter().map(|p| (p.clone(), Vec::new())).collect();
        for (n, row) in rows.enumerate() {
            if row.len() != header.len() {
                return Err(RankError::Malformed(format!(
                    "row {} has {} fields, header has {}",
                    n + 2,
                    row.len(),
                    header.len()
                )));
            }
            methods.push(row[0].clone());
            for (p, field) in protocols.iter().zip(&row[1..]) {
                let v: f64 = field.parse().map_err(|_| RankError::NotANumber {
                    method: row[0].clone(),
                    protocol: p.clone(),
                })?;
                scores.get_mut(p).unwrap().push(v);
            }
        }
        let t = ScoreTable {
            metric: None,
            direction: None,
            methods,
            scores,
        };
        t.validate()?;
        Ok(t)
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    out.push(cur.trim().to_string());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    #[serde(with = "crate::canonical::float")]
    pub score_a: f64,
    pub rank_a: usize,
    #[serde(with = "crate::canonical::float")]
    pub score_b: f64,
    pub rank_b: usize,
    /// Rank of the method's `pb` score among everyone else's `pa` scores.
    pub one_in_b: usize,
    /// Rank of the method's `pa` score among everyone else's `pb` scores.
    pub one_in_a: usize,
    pub rank_changed: bool,
    pub one_in_changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pa: String,
    pub pb: String,
    pub direction: Direction,
    pub rows: Vec<ComparisonRow>,
}

pub fn protocol_comparison(
    table: &ScoreTable,
    pa: &str,
    pb: &str,
    direction: Direction,
) -> Result<ComparisonReport, RankError> {
    table.validate()?;
    let a = table.column(pa)?;
    let b = table.column(pb)?;
    let (ra, rb) = (rank(a, direction), rank(b, direction));
    let others = |col: &[f64], i: usize| -> Vec<f64> {
        col.iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .collect()
    };
    let rows = table
        .methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let one_in_b = one_in_rank(b[i], &others(a, i), direction);
            let one_in_a = one_in_rank(a[i], &others(b, i), direction);
            ComparisonRow {
                method: m.clone(),
                score_a: a[i],
                rank_a: ra[i],
                score_b: b[i],
                rank_b: rb[i],
                one_in_b,
                one_in_a,
                rank_changed: ra[i] != rb[i],
                one_in_changed: one_in_b != ra[i] || one_in_a != rb[i],
            }
        })
        .collect();
    Ok(ComparisonReport {
        pa: pa.to_string(),
        pb: pb.to_string(),
        direction,
        rows,
    })
}

impl ComparisonReport {
    pub fn to_canonical_json(&self) -> String {
        crate::canonical::to_canonical_json(self).expect("report serializes")
    }

    /// Aligned text table. Changed ranks are marked with `*`.
    pub fn to_text(&self) -> String {
        let headers = [
            "method".to_string(),
            self.pa.clone(),
            "rank".into(),
            self.pb.clone(),
            format!("{} rank", self.pb),
            format!("{} one-in", self.pb),
            format!("{} one-in", self.pa),
        ];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                let mark = |v: usize, changed: bool| format!("{v}{}", if changed { "*" } else { "" });
                [
                    r.method.clone(),
                    format!("{}", r.score_a),
                    r.rank_a.to_string(),
                    format!("{}", r.score_b),
                    mark(r.rank_b, r.rank_changed),
                    mark(r.one_in_b, r.one_in_b != r.rank_a),
                    mark(r.one_in_a, r.one_in_a != r.rank_b),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &headers);
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}

/// Expected integer columns for one method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenRow {
    pub method: String,
    pub rank_a: usize,
    pub rank_b: usize,
    pub one_in_b: usize,
    pub one_in_a: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldenRanks {
    pub rows: Vec<GoldenRow>,
}

/// One cell where a computed rank disagrees with the expected one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMismatch {
    pub method: String,
    pub column: String,
    pub expected: usize,
    pub computed: usize,
}

impl std::fmt::Display for RankMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} expected {}, computed {}",
            self.method, self.column, self.expected, self.computed
        )
    }
}

/// Every cell (or missing method) where the report disagrees with `golden`.
pub fn compare_golden(report: &ComparisonReport, golden: &GoldenRanks) -> Vec<RankMismatch> {
    let mut out = Vec::new();
    for g in &golden.rows {
        let Some(r) = report.rows.iter().find(|r| r.method == g.method) else {
            out.push(RankMismatch {
                method: g.method.clone(),
                column: "presence".into(),
                expected: 1,
                computed: 0,
            });
            continue;
        };
        let cols = [
            ("rank_a", g.rank_a, r.rank_a),
            ("rank_b", g.rank_b, r.rank_b),
            ("one_in_b", g.one_in_b, r.one_in_b),
            ("one_in_a", g.one_in_a, r.one_in_a),
        ];
        for (name, expected, computed) in cols {
            if expected != computed {
                out.push(RankMismatch {
                    method: g.method.clone(),
                    column: name.into(),
                    expected,
                    computed,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::*;

    #[test]
    fn competition_ranking_ties() {
        assert_eq!(rank(&[33.45, 33.76, 33.76, 33.48, 32.70, 33.85], HigherBetter), vec![5, 2, 2, 4, 6, 1]);
        assert_eq!(rank(&[0.969, 0.969, 0.969, 0.966, 0.959], HigherBetter), vec![1, 1, 1, 4, 5]);
        assert_eq!(rank(&[0.2, 0.1, 0.1], LowerBetter), vec![3, 1, 1]);
    }

    #[test]
    fn one_in_examples() {
        let p1 = [28.55, 27.71, 27.49, 27.42, 27.41, 26.81, 26.39, 25.51];
        assert_eq!(one_in_rank(27.68, &p1, HigherBetter), 3);
        let p2 = [28.84, 28.01, 27.78, 27.71, 27.68, 27.11, 26.57, 25.75];
        assert_eq!(one_in_rank(27.43, &p2, HigherBetter), 6);
        assert_eq!(one_in_rank(1.0, &[], LowerBetter), 1);
    }

    #[test]
    fn same_protocol_reduces_to_rank() {
        let t = ScoreTable {
            metric: None,
            direction: None,
            methods: vec!["a".into(), "b".into(), "c".into()],
            scores: BTreeMap::from([("p".into(), vec![1.0, 3.0, 3.0])]),
        };
        let r = protocol_comparison(&t, "p", "p", HigherBetter).unwrap();
        for row in &r.rows {
            assert_eq!(row.one_in_a, row.rank_a);
            assert_eq!(row.one_in_b, row.rank_b);
            assert!(!row.rank_changed && !row.one_in_changed);
        }
        assert_eq!(
            protocol_comparison(&t, "p", "q", HigherBetter).unwrap_err(),
            RankError::MissingProtocol("q".into())
        );
    }

    #[test]
    fn csv_parsing() {
        let t = ScoreTable::from_csv("method,P1,P2\n\"Zip, NeRF\",28.55,28.84\n# note\nB,1,2\n").unwrap();
        assert_eq!(t.methods, vec!["Zip, NeRF", "B"]);
        assert_eq!(t.column("P2").unwrap(), &[28.84, 2.0]);
        assert!(matches!(
            ScoreTable::from_csv("method,P1\nA,x\n"),
            Err(RankError::NotANumber { .. })
        ));
    }

    #[test]
    fn text_report_marks_changes() {
        let t = ScoreTable {
            metric: None,
            direction: None,
            methods: vec!["a".into(), "b".into()],
            scores: BTreeMap::from([("P1".into(), vec![2.0, 1.0]), ("P2".into(), vec![1.0, 2.0])]),
        };
        let text = protocol_comparison(&t, "P1", "P2", HigherBetter).unwrap().to_text();
        assert!(text.lines().nth(2).unwrap().contains("2*"));
    }
}
