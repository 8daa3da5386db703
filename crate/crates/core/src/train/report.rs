//! Per-subject experiment records and their mean ± sd tables.

use std::path::{Path, PathBuf};

use crate::error::{Result, TabsError};
use crate::fsio;
use crate::metrics::{Metric, MetricsRecord, Tissue, CSV_COLUMNS};

/// One subject (or scan pair) scored by one method.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    /// Row block of the table, e.g. a site or "siteA → siteC".
    pub group: String,
    /// Column block, e.g. a variant name.
    pub method: String,
    pub subject: String,
    pub record: MetricsRecord,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Summary { mean, sd, n })
    }

    pub fn cell(&self) -> String {
        match self.sd {
            Some(sd) => format!("{:.3} ± {:.3}", self.mean, sd),
            None => format!("{:.3} ± n/a", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Heading of the group column ("Project", "Test").
    pub group_heading: String,
    /// Mark each metric row with ↑ or ↓.
    pub arrows: bool,
    pub groups: Vec<String>,
    pub methods: Vec<String>,
    pub records: Vec<SubjectRecord>,
}

impl Report {
    pub fn new(group_heading: &str, arrows: bool) -> Self {
        Report {
            group_heading: group_heading.to_string(),
            arrows,
            groups: Vec::new(),
            methods: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: SubjectRecord) {
        if !self.groups.contains(&r.group) {
            self.groups.push(r.group.clone());
        }
        if !self.methods.contains(&r.method) {
            self.methods.push(r.method.clone());
        }
        self.records.push(r);
    }

    pub fn values(&self, group: &str, method: &str, tissue: Tissue, metric: Metric) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.group == group && r.method == method)
            .filter_map(|r| r.record.get(tissue, metric))
            .collect()
    }

    pub fn summary(&self, group: &str, method: &str, tissue: Tissue, metric: Metric) -> Option<Summary> {
        Summary::of(&self.values(group, method, tissue, metric))
    }

    /// One row per subject, method and tissue.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group", "method", "subject"];
        header.extend(CSV_COLUMNS);
        w.write_record(&header)?;
        for r in &self.records {
            for row in r.record.csv_rows() {
                let mut full = vec![r.group.clone(), r.method.clone(), r.subject.clone()];
                full.extend(row);
                w.write_record(&full)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| TabsError::data(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Cells of the text table, header rows first.
    pub fn cells(&self) -> Vec<Vec<String>> {
        let lead = if self.arrows { 3 } else { 2 };
        let mut head1 = vec![self.group_heading.clone(), "Metrics".to_string()];
        let mut head2 = vec![String::new(); lead];
        head1.resize(lead, String::new());
        for m in &self.methods {
            head1.push(m.clone());
            head1.extend([String::new(), String::new()]);
            head2.extend(Tissue::ALL.iter().map(|t| t.display_name().to_string()));
        }
        let mut rows = vec![head1, head2];
        for g in &self.groups {
            for (k, metric) in Metric::ALL.iter().enumerate() {
                let mut row = vec![
                    if k == 0 { g.clone() } else { String::new() },
                    metric.display_name().to_string(),
                ];
                if self.arrows {
                    row.push(if metric.higher_is_better() { "↑" } else { "↓" }.to_string());
                }
                for m in &self.methods {
                    for t in Tissue::ALL {
                        row.push(
                            self.summary(g, m, t, *metric)
                                .map_or_else(|| "n/a".to_string(), |s| s.cell()),
                        );
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    /// Space-aligned table in the layout of the published result tables.
    pub fn render_text(&self) -> String {
        let rows = self.cells();
        let width = |s: &str| s.chars().count();
        let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..ncol)
            .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| width(s)).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let mut line = String::new();
            for (c, cell) in r.iter().enumerate() {
                if c > 0 {
                    line.push_str("  ");
                }
                line.push_str(cell);
                line.extend(std::iter::repeat_n(' ', widths[c] - width(cell)));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".csv"), with(".txt"))
    }

    /// Writes `<prefix>.csv` and `<prefix>.txt`.
    pub fn write(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        let (csv_path, txt_path) = Self::paths(prefix);
        let csv = self.to_csv()?;
        let txt = self.render_text();
        fsio::write_atomic_str(&csv_path, &csv)?;
        fsio::write_atomic_str(&txt_path, &txt)?;
        Ok((csv_path, txt_path))
    }
}
