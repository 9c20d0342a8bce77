//! Rendering metrics as accuracy tables, optionally with deltas against a
//! baseline in the "40.1% (+4.6)" cell style.

use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsRow, MetricsTable, Stratum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Country,
    Region,
    City,
    Unknown,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Country, Metric::Region, Metric::City, Metric::Unknown];

    pub fn title(self) -> &'static str {
        match self {
            Metric::Country => "Country",
            Metric::Region => "State/Region",
            Metric::City => "City",
            Metric::Unknown => "Unknown",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Country => "country",
            Metric::Region => "region",
            Metric::City => "city",
            Metric::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        match key.as_str() {
            "state" => Ok(Metric::Region),
            _ => Metric::ALL
                .into_iter()
                .find(|m| m.as_str() == key)
                .ok_or_else(|| format!("unknown metric {s:?}; expected country, region, city or unknown")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// `hits ÷ count` in tenths of a percent, rounded half up.
pub fn percent_tenths(hits: u64, count: u64) -> u64 {
    assert!(count > 0, "percentage of an empty stratum");
    (hits * 2000 + count) / (2 * count)
}

fn fmt_tenths(t: i64) -> String {
    format!("{}.{}", t / 10, t % 10)
}

fn fmt_delta(d: i64) -> String {
    let sign = if d < 0 { '-' } else { '+' };
    format!("{sign}{}", fmt_tenths(d.abs()))
}

fn tenths(row: &MetricsRow, metric: Metric) -> i64 {
    percent_tenths(row.hits(metric), row.count) as i64
}

fn cell(row: &MetricsRow, base: Option<&MetricsRow>, metric: Metric) -> String {
    let t = tenths(row, metric);
    match base {
        Some(b) => format!("{}% ({})", fmt_tenths(t), fmt_delta(t - tenths(b, metric))),
        None => format!("{}%", fmt_tenths(t)),
    }
}

fn row_label(stratum: Stratum, row: &MetricsRow) -> String {
    format!("{} ({})", stratum.title(), row.count)
}

fn check_structure(a: &MetricsTable, b: &MetricsTable) -> Result<(), EvalError> {
    let (sa, sb) = (a.strata(), b.strata());
    if sa == sb {
        return Ok(());
    }
    let names = |s: &[Stratum]| s.iter().map(|x| x.title()).collect::<Vec<_>>().join(", ");
    Err(EvalError::StructureMismatch(format!(
        "[{}] vs [{}]",
        names(&sa),
        names(&sb)
    )))
}

fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
    let mut out = line(header);
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv of UTF-8 cells")
}

/// One row per stratum with accuracy at each level and the unknown rate.
/// With a baseline, markdown cells carry the difference in percentage
/// points; CSV output carries it in separate `*_delta` columns.
pub fn emit_report(
    table: &MetricsTable,
    baseline: Option<&MetricsTable>,
    format: ReportFormat,
) -> Result<String, EvalError> {
    if let Some(b) = baseline {
        check_structure(table, b)?;
    }
    let base_row = |s: &Stratum| baseline.map(|b| &b.rows[s]);
    Ok(match format {
        ReportFormat::Markdown => {
            let mut header = vec!["Difficulty".to_string()];
            header.extend(Metric::ALL.iter().map(|m| m.title().to_string()));
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|(s, r)| {
                    let mut cells = vec![row_label(*s, r)];
                    cells.extend(Metric::ALL.iter().map(|m| cell(r, base_row(s), *m)));
                    cells
                })
                .collect();
            markdown(&header, &rows)
        }
        ReportFormat::Csv => {
            let mut header = vec!["stratum".to_string(), "count".to_string()];
            for m in Metric::ALL {
                header.push(format!("{}_pct", m.as_str()));
                if baseline.is_some() {
                    header.push(format!("{}_delta", m.as_str()));
                }
            }
            let rows: Vec<Vec<String>> = table
                .rows
                .iter()
                .map(|(s, r)| {
                    let mut cells = vec![s.title().to_string(), r.count.to_string()];
                    for m in Metric::ALL {
                        let t = tenths(r, m);
                        cells.push(fmt_tenths(t));
                        if let Some(b) = base_row(s) {
                            cells.push(fmt_delta(t - tenths(b, m)));
                        }
                    }
                    cells
                })
                .collect();
            csv_text(&header, &rows)
        }
    })
}

/// A method-comparison table for one metric: rows are strata, columns are
/// the named tables. The first column is the baseline; every other cell
/// shows its difference from it.
pub fn emit_comparison(
    columns: &[(String, &MetricsTable)],
    metric: Metric,
    format: ReportFormat,
) -> Result<String, EvalError> {
    let Some((_, first)) = columns.first() else {
        return Err(EvalError::EmptyInput);
    };
    for (_, t) in &columns[1..] {
        check_structure(first, t)?;
    }
    let mut header = vec![format!("Difficulty ({})", metric.title())];
    header.extend(columns.iter().map(|(name, _)| name.clone()));
    let rows: Vec<Vec<String>> = first
        .rows
        .iter()
        .map(|(s, base)| {
            let mut cells = vec![row_label(*s, base)];
            for (i, (_, t)) in columns.iter().enumerate() {
                let r = &t.rows[s];
                cells.push(match format {
                    ReportFormat::Markdown => cell(r, (i > 0).then_some(base), metric),
                    ReportFormat::Csv => fmt_tenths(tenths(r, metric)),
                });
            }
            cells
        })
        .collect();
    Ok(match format {
        ReportFormat::Markdown => markdown(&header, &rows),
        ReportFormat::Csv => csv_text(&header, &rows),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::difficulty::DifficultyLevel;

    fn table(rows: &[(Stratum, u64, u64)]) -> MetricsTable {
        let rows: BTreeMap<_, _> = rows
            .iter()
            .map(|&(s, count, country)| {
                (
                    s,
                    MetricsRow {
                        count,
                        country,
                        ..Default::default()
                    },
                )
            })
            .collect();
        MetricsTable { rows }
    }

    const DIFFICULT: Stratum = Stratum::Level(DifficultyLevel::Difficult);

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(percent_tenths(1, 8), 125);
        assert_eq!(percent_tenths(1, 2000), 1);
        assert_eq!(percent_tenths(1, 3), 333);
        assert_eq!(percent_tenths(2, 3), 667);
        assert_eq!(percent_tenths(124, 349), 355);
        assert_eq!(percent_tenths(140, 349), 401);
    }

    #[test]
    fn delta_cell() {
        let base = table(&[(DIFFICULT, 349, 124), (Stratum::Overall, 349, 124)]);
        let ours = table(&[(DIFFICULT, 349, 140), (Stratum::Overall, 349, 140)]);
        let md = emit_report(&ours, Some(&base), ReportFormat::Markdown).unwrap();
        assert!(md.contains("| Difficult (349) | 40.1% (+4.6) |"), "{md}");
        let md = emit_report(&base, Some(&ours), ReportFormat::Markdown).unwrap();
        assert!(md.contains("35.5% (-4.6)"), "{md}");
        assert!(md.contains("0.0% (+0.0)"), "{md}");
    }

    #[test]
    fn plain_cells_without_baseline() {
        let t = table(&[(DIFFICULT, 349, 124), (Stratum::Overall, 349, 124)]);
        let md = emit_report(&t, None, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| Difficult (349) | 35.5% | 0.0% | 0.0% | 0.0% |"), "{md}");
        let csv = emit_report(&t, None, ReportFormat::Csv).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "stratum,count,country_pct,region_pct,city_pct,unknown_pct"
        );
        assert!(csv.contains("Difficult,349,35.5,0.0,0.0,0.0"));
    }

    #[test]
    fn mismatched_strata() {
        let a = table(&[(DIFFICULT, 1, 1), (Stratum::Overall, 1, 1)]);
        let b = table(&[(Stratum::Level(DifficultyLevel::Easy), 1, 1), (Stratum::Overall, 1, 1)]);
        assert!(matches!(
            emit_report(&a, Some(&b), ReportFormat::Markdown),
            Err(EvalError::StructureMismatch(_))
        ));
        assert!(matches!(
            emit_comparison(
                &[("A".into(), &a), ("B".into(), &b)],
                Metric::Country,
                ReportFormat::Csv
            ),
            Err(EvalError::StructureMismatch(_))
        ));
    }

    #[test]
    fn comparison_matrix() {
        let base = table(&[(DIFFICULT, 349, 124), (Stratum::Overall, 349, 124)]);
        let ours = table(&[(DIFFICULT, 349, 140), (Stratum::Overall, 349, 140)]);
        let md = emit_comparison(
            &[("Baseline".into(), &base), ("EAP".into(), &ours)],
            Metric::Country,
            ReportFormat::Markdown,
        )
        .unwrap();
        assert!(md.starts_with("| Difficulty (Country) | Baseline | EAP |"));
        assert!(md.contains("| Difficult (349) | 35.5% | 40.1% (+4.6) |"), "{md}");
    }
}
