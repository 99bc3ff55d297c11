//! Plain-text artifacts: CSV tables with 17 significant digits and a JSON
//! summary. Nothing here touches the file system until `Artifacts::write`.

use std::path::Path;

use crate::error::Result;

/// Formats a float with 17 significant digits; non-finite values become
/// `nan`, `inf` or `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// One CSV cell.
pub enum Field {
    F(f64),
    I(i64),
    U(usize),
    B(bool),
    S(String),
    Empty,
}

impl From<f64> for Field {
    fn from(x: f64) -> Self {
        Field::F(x)
    }
}
impl From<usize> for Field {
    fn from(x: usize) -> Self {
        Field::U(x)
    }
}
impl From<i64> for Field {
    fn from(x: i64) -> Self {
        Field::I(x)
    }
}
impl From<bool> for Field {
    fn from(x: bool) -> Self {
        Field::B(x)
    }
}
impl From<&str> for Field {
    fn from(x: &str) -> Self {
        Field::S(x.to_string())
    }
}
impl From<String> for Field {
    fn from(x: String) -> Self {
        Field::S(x)
    }
}
impl From<Option<f64>> for Field {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Field::Empty, Field::F)
    }
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::F(x) => fmt_f64(*x),
            Field::I(x) => x.to_string(),
            Field::U(x) => x.to_string(),
            Field::B(x) => x.to_string(),
            Field::S(s) => s.clone(),
            Field::Empty => String::new(),
        }
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => {
        vec![$($crate::report::Field::from($x)),*]
    };
}

pub struct Csv {
    columns: usize,
    writer: csv::Writer<Vec<u8>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        writer.write_record(header).expect("in-memory CSV write");
        Csv {
            columns: header.len(),
            writer,
        }
    }

    pub fn push(&mut self, row: Vec<Field>) {
        assert_eq!(row.len(), self.columns, "CSV row width");
        self.writer
            .write_record(row.iter().map(Field::render))
            .expect("in-memory CSV write");
    }

    pub fn finish(self) -> String {
        let bytes = self.writer.into_inner().expect("in-memory CSV flush");
        String::from_utf8(bytes).expect("CSV fields are UTF-8")
    }
}

/// Named files produced by one run, kept in memory until the run succeeds.
#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// Writes every file into `dir`; on an I/O error the files already
    /// written by this call are removed again.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, content) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, content) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e.into());
            }
            written.push(path);
        }
        Ok(())
    }
}
