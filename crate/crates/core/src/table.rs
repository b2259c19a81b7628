//! Numeric CSV tables: header row, comma separated, 17 significant digits.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Format with 17 significant digits, enough to round-trip any f64.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| format_f64(*x)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    /// Parse a table; every data cell must be a float and every row as wide as the header.
    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse("missing header row".into()));
        }
        let mut rows = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, header has {}",
                    line + 1,
                    record.len(),
                    header.len()
                )));
            }
            let row = record
                .iter()
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: not a number: {cell:?}", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Check that the header is `first, prefix_1, ..., prefix_n` and return n.
    pub(crate) fn expect_indexed_header(&self, first: &str, prefix: &str) -> Result<usize> {
        if self.header.first().map(String::as_str) != Some(first) {
            return Err(Error::Parse(format!("first column must be {first:?}")));
        }
        for (i, name) in self.header.iter().enumerate().skip(1) {
            if *name != format!("{prefix}{i}") {
                return Err(Error::Parse(format!("column {i} must be {prefix}{i}, found {name:?}")));
            }
        }
        Ok(self.header.len() - 1)
    }
}
