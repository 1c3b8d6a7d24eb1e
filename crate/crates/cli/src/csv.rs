//! Minimal CSV assembly. Floats print in Rust's shortest round-trip form,
//! so a repeated run writes byte-identical files; absent values print as
//! `nan`.

use std::path::Path;

use hopsim::error::Result;
use hopsim::Real;

pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        let mut text = String::with_capacity(4096);
        text.push_str(header);
        text.push('\n');
        Csv { text }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    /// Writes the table, creating parent directories as needed.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.text)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn real(x: Real) -> String {
    format!("{x}")
}

pub fn opt(x: Option<Real>) -> String {
    match x {
        Some(v) => real(v),
        None => "nan".to_string(),
    }
}

pub fn count(x: usize) -> String {
    x.to_string()
}
