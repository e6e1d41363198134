//! Locating series files and giving each a stable id and output file name.

use std::path::{Path, PathBuf};

use tsvae::ingest::{list_series_files, load_labeled, series_id, Format, LabelSet, TimeSeries};
use tsvae::{Error, Result};

#[derive(Debug, Clone)]
pub struct Entry {
    pub id: String,
    pub path: PathBuf,
    pub format: Format,
}

impl Entry {
    pub fn load(&self, labels: Option<&LabelSet>) -> Result<TimeSeries> {
        let mut s = load_labeled(&self.path, self.format, None)?;
        s.id = self.id.clone();
        match labels {
            Some(l) => l.attach(s),
            None => Ok(s),
        }
    }
}

/// File-system safe stem for per-series outputs.
pub fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

/// Series in `path`: the file itself, or the csv files in the directory and
/// in its immediate subdirectories (ids then carry the subdirectory name).
pub fn discover(path: &Path, format: Format) -> Result<Vec<Entry>> {
    if path.is_file() {
        return Ok(vec![Entry { id: series_id(path, format), path: path.to_path_buf(), format }]);
    }
    if !path.is_dir() {
        return Err(Error::InvalidInput(format!("data path {} does not exist", path.display())));
    }
    let mut out: Vec<Entry> = list_series_files(path)?
        .into_iter()
        .map(|p| Entry { id: series_id(&p, format), path: p, format })
        .collect();
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Io { path: path.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        let sub = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for p in list_series_files(&d)? {
            let id = match format {
                Format::Nab => series_id(&p, format),
                _ => format!("{sub}/{}", series_id(&p, format)),
            };
            out.push(Entry { id, path: p, format });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no series files under {}", path.display())));
    }
    Ok(out)
}
