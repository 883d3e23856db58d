//! Reports rendered as aligned text tables and as comma-delimited text.

use std::fmt::Write as _;

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ReportFormat {
    /// Aligned columns for reading.
    Table,
    /// Comma-separated values with a header row per table.
    Csv,
    /// Table followed by the CSV form.
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, headers: &[&str]) -> Self {
        Self { title: title.to_string(), headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.headers.len());
        self.rows.push(cells);
    }

    /// Header and rows padded to column width; numeric-looking cells are
    /// right-aligned.
    pub fn render_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| self.rows.iter().map(|r| r[c].len()).chain([self.headers[c].len()]).max().unwrap_or(0))
            .collect();
        let numeric = |s: &str| s.parse::<f64>().is_ok();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                if numeric(cell) {
                    let _ = write!(s, "{cell:>w$}");
                } else {
                    let _ = write!(s, "{cell:<w$}");
                }
            }
            s.trim_end().to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.headers));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Report {
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        if matches!(format, ReportFormat::Table | ReportFormat::Both) {
            for t in &self.tables {
                out.push_str(&t.render_text());
                out.push('\n');
            }
            for n in &self.notes {
                out.push_str(&format!("note: {n}\n"));
            }
        }
        if format == ReportFormat::Both {
            out.push('\n');
        }
        if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
            for t in &self.tables {
                out.push_str(&format!("# {}\n", t.title));
                out.push_str(&t.render_csv());
            }
        }
        out
    }
}

/// Fixed-point with `digits` decimals.
pub fn fixed(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

/// Scientific notation with six significant digits.
pub fn sci(v: f64) -> String {
    format!("{v:.5e}")
}
