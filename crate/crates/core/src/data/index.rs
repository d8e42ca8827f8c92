use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::labels::{read_labels, Annotation};
use crate::error::{Error, Result};

pub const INDEX_HEADER: [&str; 4] = ["image_path", "patient_id", "gender", "label_path"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    F,
    M,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F" => Some(Gender::F),
            "M" => Some(Gender::M),
            "unknown" | "" => Some(Gender::Unknown),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// As written in the index (relative to the index file's directory
    /// unless absolute).
    pub image_path: String,
    pub patient_id: String,
    pub gender: Gender,
    pub label_path: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<ImageRecord>,
    pub class_counts: Vec<usize>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetIndex {
    pub fn from_records(records: Vec<ImageRecord>, num_classes: usize, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut class_counts = vec![0; num_classes];
        for (row, r) in records.iter().enumerate() {
            if !seen.insert(r.image_path.as_str()) {
                return Err(Error::Index {
                    row: row + 1,
                    msg: format!("duplicate image_path '{}'", r.image_path),
                });
            }
            for a in &r.annotations {
                *class_counts
                    .get_mut(a.class_id)
                    .ok_or(Error::UnknownClass(a.class_id))? += 1;
            }
        }
        Ok(DatasetIndex {
            records,
            class_counts,
            base_dir,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_annotations(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(INDEX_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.image_path.as_str(),
                r.patient_id.as_str(),
                &r.gender.to_string(),
                r.label_path.as_str(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Parses index rows without touching label files.
pub fn parse_index_rows(csv_text: &str) -> Result<Vec<(String, String, Gender, String)>> {
    if csv_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_reader(csv_text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Index {
        row: 0,
        msg: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != INDEX_HEADER {
        return Err(Error::Index {
            row: 0,
            msg: format!("header must be '{}'", INDEX_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Index {
            row,
            msg: e.to_string(),
        })?;
        let field = |n: usize| rec.get(n).unwrap_or("").trim().to_string();
        let gender = Gender::parse(&field(2)).ok_or_else(|| Error::Index {
            row,
            msg: format!("gender must be F, M or unknown, got '{}'", field(2)),
        })?;
        if field(0).is_empty() || field(3).is_empty() {
            return Err(Error::Index {
                row,
                msg: "image_path and label_path are required".into(),
            });
        }
        rows.push((field(0), field(1), gender, field(3)));
    }
    Ok(rows)
}

/// Loads an index CSV; label paths are resolved against `base_dir`.
pub fn load_index(csv_text: &str, base_dir: &Path, num_classes: usize) -> Result<DatasetIndex> {
    let mut records = Vec::new();
    for (image_path, patient_id, gender, label_path) in parse_index_rows(csv_text)? {
        let full = base_dir.join(&label_path);
        let text = std::fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
        let annotations = read_labels(&text, num_classes).map_err(|e| match e {
            Error::Label { line, msg } => Error::Label {
                line,
                msg: format!("{}: {msg}", full.display()),
            },
            other => other,
        })?;
        records.push(ImageRecord {
            image_path,
            patient_id,
            gender,
            label_path,
            annotations,
        });
    }
    DatasetIndex::from_records(records, num_classes, base_dir.to_path_buf())
}

pub fn load_index_file(path: &Path, num_classes: usize) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_index(&text, base, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels::write_labels;
    use crate::geometry::NormBox;

    fn write_label_file(dir: &Path, name: &str, class_id: usize, n: usize) {
        let a = Annotation {
            class_id,
            bbox: NormBox::new(0.5, 0.5, 0.2, 0.2).unwrap(),
        };
        std::fs::write(dir.join(name), write_labels(&vec![a; n])).unwrap();
    }

    #[test]
    fn tallies_reference_class_counts() {
        // Per-class totals of the reference dataset: 8,634 annotated joints.
        let dir = tempfile::tempdir().unwrap();
        let counts = [3608, 1256, 2121, 1649];
        let mut csv = String::from("image_path,patient_id,gender,label_path\n");
        for (c, &n) in counts.iter().enumerate() {
            write_label_file(dir.path(), &format!("l{c}.txt"), c, n);
            csv.push_str(&format!("img{c}.pgm,p{c},F,l{c}.txt\n"));
        }
        let idx = load_index(&csv, dir.path(), 4).unwrap();
        assert_eq!(idx.class_counts, counts.to_vec());
        assert_eq!(idx.total_annotations(), 8634);
    }

    #[test]
    fn empty_duplicate_missing_malformed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_index("", dir.path(), 4).unwrap().is_empty());
        assert!(load_index("image_path,patient_id,gender,label_path\n", dir.path(), 4)
            .unwrap()
            .is_empty());

        write_label_file(dir.path(), "a.txt", 0, 1);
        let dup = "image_path,patient_id,gender,label_path\nx.pgm,p,F,a.txt\nx.pgm,q,M,a.txt\n";
        assert!(matches!(
            load_index(dup, dir.path(), 4),
            Err(Error::Index { row: 2, .. })
        ));

        let missing = "image_path,patient_id,gender,label_path\nx.pgm,p,F,nope.txt\n";
        assert!(matches!(load_index(missing, dir.path(), 4), Err(Error::Io { .. })));

        let bad_gender = "image_path,patient_id,gender,label_path\nx.pgm,p,X,a.txt\n";
        assert!(matches!(
            load_index(bad_gender, dir.path(), 4),
            Err(Error::Index { row: 1, .. })
        ));
        let short = "image_path,patient_id,gender,label_path\nx.pgm,p\n";
        assert!(load_index(short, dir.path(), 4).is_err());
        let wrong_header = "image,patient,gender,label\nx.pgm,p,F,a.txt\n";
        assert!(matches!(
            load_index(wrong_header, dir.path(), 4),
            Err(Error::Index { row: 0, .. })
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_label_file(dir.path(), "a.txt", 2, 2);
        let csv = "image_path,patient_id,gender,label_path\nx.pgm,p1,unknown,a.txt\ny.pgm,p2,M,a.txt\n";
        let idx = load_index(csv, dir.path(), 4).unwrap();
        assert_eq!(idx.to_csv(), csv);
        assert_eq!(idx.records[0].gender, Gender::Unknown);
        assert_eq!(idx.class_counts, vec![0, 0, 4, 0]);
    }
}
