//! CSV manifest: `patient_id,image_path,label,centroids[,split]`, with
//! centroids as `r;c` pairs joined by `|`. The header row and the split
//! column are optional; rows without a split belong to `train`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::{DataError, PatchRecord, Sample, Split};

pub const HEADER: [&str; 5] = ["patient_id", "image_path", "label", "centroids", "split"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<PatchRecord>,
}

pub fn parse_centroids(s: &str) -> Result<Vec<(f64, f64)>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|')
        .map(|pair| {
            let (r, c) = pair.split_once(';').ok_or_else(|| format!("centroid {pair:?} is not of the form r;c"))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x >= 0.0)
                    .ok_or_else(|| format!("bad centroid coordinate {v:?}"))
            };
            Ok((num(r)?, num(c)?))
        })
        .collect()
}

pub fn format_centroids(centroids: &[(f64, f64)]) -> String {
    centroids.iter().map(|(r, c)| format!("{r};{c}")).collect::<Vec<_>>().join("|")
}

fn record_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<PatchRecord>) -> Result<Self, DataError> {
        let m = Self { root: root.into(), records };
        m.check_patient_splits()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, &path.display().to_string())
    }

    /// Parses manifest text; `origin` names the source in error messages.
    pub fn parse(text: &str, root: PathBuf, origin: &str) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut records = Vec::new();
        let mut first_line = true;
        for row in reader.records() {
            let row = row.map_err(|e| DataError::Parse {
                path: origin.into(),
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let parse_err = |message: String| DataError::Parse { path: origin.into(), line, message };
            if std::mem::take(&mut first_line) && row.get(0) == Some(HEADER[0]) {
                continue;
            }
            if row.len() == 1 && row[0].trim().is_empty() {
                continue;
            }
            if !(4..=5).contains(&row.len()) {
                return Err(parse_err(format!("expected 4 or 5 fields, found {}", row.len())));
            }
            let label = match row[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("label must be 0 or 1, found {other:?}"))),
            };
            let centroids = parse_centroids(&row[3]).map_err(parse_err)?;
            let split = match row.get(4).map(str::trim) {
                None | Some("") => Split::Train,
                Some(s) => s.parse().map_err(parse_err)?,
            };
            if label != !centroids.is_empty() {
                return Err(DataError::Validation {
                    path: origin.into(),
                    line,
                    message: format!("label {} with {} centroids", label as u8, centroids.len()),
                });
            }
            let image_path = PathBuf::from(row[1].trim());
            records.push(PatchRecord {
                id: record_id(&image_path),
                patient_id: row[0].trim().to_string(),
                image_path,
                label,
                centroids,
                split,
            });
        }
        Self::new(root, records)
    }

    fn check_patient_splits(&self) -> Result<(), DataError> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            match seen.get(r.patient_id.as_str()) {
                Some(&s) if s != r.split => {
                    return Err(DataError::SplitLeak { patient: r.patient_id.clone(), first: s, second: r.split })
                }
                _ => {
                    seen.insert(&r.patient_id, r.split);
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.patient_id.as_str(),
                &r.image_path.to_string_lossy(),
                if r.label { "1" } else { "0" },
                &format_centroids(&r.centroids),
                &r.split.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv()).map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, record: &PatchRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn load_image(&self, record: &PatchRecord) -> Result<RgbImage, DataError> {
        let path = self.resolve(record);
        let img = image::open(&path)
            .map_err(|e| DataError::Image { path: path.display().to_string(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = (img.width() as f64, img.height() as f64);
        if let Some(&(r, c)) = record.centroids.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(DataError::Image {
                path: path.display().to_string(),
                message: format!("centroid ({r}, {c}) lies outside the {}x{} image", img.height(), img.width()),
            });
        }
        Ok(img)
    }

    /// Decodes every record of `split`, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.split(split).map(|r| Ok(Sample { record: r.clone(), image: self.load_image(r)? })).collect()
    }
}
