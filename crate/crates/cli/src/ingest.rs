//! Claims and policy-count ingestion onto a daily calendar.

use std::io::Read;

use chrono::NaiveDate;

use crate::failure::{fail, Category};

/// Daily claim counts per margin and the number of rows outside the window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DailyClaims {
    pub counts: Vec<Vec<u64>>,
    pub accepted: u64,
    pub rejected: u64,
}

fn parse_date(s: &str, line: u64) -> anyhow::Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| fail(Category::Input, format!("line {line}: bad date {s:?}")))
}

fn margin_index(margins: &[String], id: &str, line: u64) -> anyhow::Result<usize> {
    margins.iter().position(|m| m == id.trim()).ok_or_else(|| fail(Category::Input, format!("line {line}: unknown margin {id:?}")))
}

fn day_index(date: NaiveDate, start: NaiveDate, days: usize) -> Option<usize> {
    let d = (date - start).num_days();
    (0..days as i64).contains(&d).then_some(d as usize)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads `date,margin` rows; rows outside the window are counted and dropped.
pub fn read_claims<R: Read>(input: R, start: NaiveDate, days: usize, margins: &[String]) -> anyhow::Result<DailyClaims> {
    let mut counts = vec![vec![0u64; days]; margins.len()];
    let (mut accepted, mut rejected) = (0, 0);
    for rec in reader(input).records() {
        let rec = rec.map_err(|e| fail(Category::Input, format!("claims: {e}")))?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(fail(Category::Input, format!("claims line {line}: expected 2 fields, got {}", rec.len())));
        }
        let date = parse_date(&rec[0], line)?;
        let g = margin_index(margins, &rec[1], line)?;
        match day_index(date, start, days) {
            Some(d) => {
                counts[g][d] += 1;
                accepted += 1;
            }
            None => rejected += 1,
        }
    }
    if rejected > 0 {
        log::warn!("{rejected} claims outside the observation window were rejected");
    }
    Ok(DailyClaims { counts, accepted, rejected })
}

/// Reads `date,margin,policy_count` rows; every window day needs exactly one
/// positive count per margin.
pub fn read_policies<R: Read>(input: R, start: NaiveDate, days: usize, margins: &[String]) -> anyhow::Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Option<u64>>> = vec![vec![None; days]; margins.len()];
    for rec in reader(input).records() {
        let rec = rec.map_err(|e| fail(Category::Input, format!("exposure: {e}")))?;
        let line = line_of(&rec);
        if rec.len() != 3 {
            return Err(fail(Category::Input, format!("exposure line {line}: expected 3 fields, got {}", rec.len())));
        }
        let date = parse_date(&rec[0], line)?;
        let g = margin_index(margins, &rec[1], line)?;
        let n: u64 = rec[2]
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| fail(Category::Input, format!("exposure line {line}: policy count {:?} is not a positive integer", &rec[2])))?;
        if let Some(d) = day_index(date, start, days) {
            if out[g][d].replace(n).is_some() {
                return Err(fail(Category::Input, format!("exposure line {line}: duplicate row for {date} / {}", margins[g])));
            }
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(g, row)| {
            row.into_iter()
                .enumerate()
                .map(|(d, v)| {
                    v.map(|n| n as f64).ok_or_else(|| {
                        fail(Category::Input, format!("exposure missing for {} / {}", start + chrono::Duration::days(d as i64), margins[g]))
                    })
                })
                .collect()
        })
        .collect()
}

/// Sums daily counts into periods of `period_days`.
pub fn aggregate(daily: &[Vec<u64>], period_days: usize) -> Vec<Vec<u64>> {
    daily.iter().map(|row| row.chunks(period_days).map(|c| c.iter().sum()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn margins() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
    }

    #[test]
    fn counts_claims_and_rejects_outside() {
        let text = "date,margin\n2020-01-02,A\n2020-01-02,A\n2020-01-02,A\n2020-01-03,B\n2019-12-31,A\n";
        let c = read_claims(text.as_bytes(), start(), 3, &margins()).unwrap();
        assert_eq!(c.counts, vec![vec![0, 3, 0], vec![0, 0, 1]]);
        assert_eq!((c.accepted, c.rejected), (4, 1));
        let empty = read_claims("date,margin\n".as_bytes(), start(), 3, &margins()).unwrap();
        assert!(empty.counts.iter().flatten().all(|&n| n == 0));
    }

    #[test]
    fn malformed_rows_report_lines() {
        let err = read_claims("date,margin\n2020-01-01,A\n2020-13-01,A\n".as_bytes(), start(), 3, &margins()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = read_claims("date,margin\n2020-01-01,C\n".as_bytes(), start(), 3, &margins()).unwrap_err();
        assert!(err.to_string().contains("unknown margin"));
    }

    #[test]
    fn policies_need_every_day() {
        let full = "date,margin,policy_count\n2020-01-01,A,5\n2020-01-02,A,6\n2020-01-01,B,7\n2020-01-02,B,8\n";
        assert_eq!(read_policies(full.as_bytes(), start(), 2, &margins()).unwrap(), vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let gap = "date,margin,policy_count\n2020-01-01,A,5\n2020-01-01,B,7\n2020-01-02,B,8\n";
        assert!(read_policies(gap.as_bytes(), start(), 2, &margins()).unwrap_err().to_string().contains("missing"));
        let zero = "date,margin,policy_count\n2020-01-01,A,0\n";
        assert!(read_policies(zero.as_bytes(), start(), 1, &margins()).is_err());
    }

    #[test]
    fn aggregates_periods() {
        assert_eq!(aggregate(&[vec![1, 2, 3, 4]], 2), vec![vec![3, 7]]);
    }
}
