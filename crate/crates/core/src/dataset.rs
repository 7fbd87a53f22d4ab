//! Patient records, labels, splits and the CSV manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{load_png, ImageBuffer};
use crate::rng;

/// Letters of improvement that count as a clinically significant gain.
pub const GAIN_THRESHOLD: i32 = 15;

pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.69, 0.17, 0.14];

pub const FEATURE_NAMES: [&str; 5] = ["age", "mh_duration", "elevated_edge", "pseudophakic", "baseline_va"];

pub const MANIFEST_HEADER: [&str; 10] = [
    "patient_id",
    "oct_h_path",
    "oct_v_path",
    "age",
    "mh_duration",
    "elevated_edge",
    "pseudophakic",
    "baseline_va",
    "va_6mo",
    "split",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFeatures {
    /// Years.
    pub age: f64,
    /// Weeks since symptom onset.
    pub mh_duration: f64,
    pub elevated_edge: bool,
    pub pseudophakic: bool,
    /// ETDRS letters.
    pub baseline_va: i32,
}

impl ClinicalFeatures {
    pub fn validate(&self) -> Result<()> {
        if !(self.age.is_finite() && self.age > 0.0) {
            return Err(Error::Dataset(format!("age {} must be positive", self.age)));
        }
        if !(self.mh_duration.is_finite() && self.mh_duration >= 0.0) {
            return Err(Error::Dataset(format!("mh_duration {} must be >= 0", self.mh_duration)));
        }
        if !(0..=100).contains(&self.baseline_va) {
            return Err(Error::Dataset(format!("baseline_va {} outside 0..=100", self.baseline_va)));
        }
        Ok(())
    }

    /// Features in [`FEATURE_NAMES`] order, booleans as 0/1.
    pub fn to_vec(&self) -> [f64; 5] {
        [
            self.age,
            self.mh_duration,
            self.elevated_edge as u8 as f64,
            self.pseudophakic as u8 as f64,
            self.baseline_va as f64,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Manifest(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Horizontal cut, relative to the manifest directory.
    pub oct_h: PathBuf,
    /// Vertical cut, relative to the manifest directory.
    pub oct_v: PathBuf,
    pub clinical: ClinicalFeatures,
    pub va_6mo: i32,
    pub split: Split,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        self.clinical
            .validate()
            .map_err(|e| Error::Dataset(format!("patient {}: {e}", self.patient_id)))?;
        if !(0..=100).contains(&self.va_6mo) {
            return Err(Error::Dataset(format!(
                "patient {}: va_6mo {} outside 0..=100",
                self.patient_id, self.va_6mo
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> bool {
        derive_label(self)
    }
}

/// True when visual acuity improved by at least 15 letters.
pub fn derive_label(record: &PatientRecord) -> bool {
    gain_is_significant(record.clinical.baseline_va, record.va_6mo)
}

pub fn gain_is_significant(baseline_va: i32, va_6mo: i32) -> bool {
    va_6mo - baseline_va >= GAIN_THRESHOLD
}

/// Split sizes `(train, val, test)`: validation and test get `round(n * f)`,
/// training gets the rest.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<(usize, usize, usize)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let val = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    if val + test > n {
        return Err(Error::Config(format!("split fractions {fractions:?} leave no room for training")));
    }
    Ok((n - val - test, val, test))
}

/// Random unstratified split: a seeded permutation assigned contiguously
/// to train, val and test.
pub fn split_dataset(mut records: Vec<PatientRecord>, fractions: [f64; 3], seed: u64) -> Result<Vec<PatientRecord>> {
    let n = records.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 records to split, got {n}")));
    }
    let (train, val, _) = split_sizes(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, &[rng::SPLIT]));
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Horizontal,
    Vertical,
}

/// One training image: a record and which of its two cuts to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingSample {
    pub record: usize,
    pub view: View,
    pub label: bool,
}

/// Two samples per record, one per cut, both carrying the record's label.
/// `indices` select records from `records`.
pub fn duplicate_per_oct(records: &[PatientRecord], indices: &[usize]) -> Vec<TrainingSample> {
    indices
        .iter()
        .flat_map(|&i| {
            let label = records[i].label();
            [View::Horizontal, View::Vertical].map(|view| TrainingSample { record: i, view, label })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetProvenance {
    Synthetic { config_sha256: String },
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PatientRecord>,
    pub provenance: DatasetProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    patient_id: String,
    oct_h_path: String,
    oct_v_path: String,
    age: f64,
    mh_duration: f64,
    elevated_edge: u8,
    pseudophakic: u8,
    baseline_va: i32,
    va_6mo: i32,
    split: String,
}

fn flag(v: u8, name: &str, id: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Manifest(format!("patient {id}: {name} must be 0 or 1, got {v}"))),
    }
}

fn path_str(p: &Path) -> Result<String> {
    p.to_str()
        .map(|s| s.replace('\\', "/"))
        .ok_or_else(|| Error::Manifest(format!("non UTF-8 path {}", p.display())))
}

/// Sidecar naming the provenance, next to the manifest.
pub fn provenance_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.patient_id.is_empty() {
                return Err(Error::Manifest("empty patient_id".into()));
            }
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate patient_id {}", r.patient_id)));
            }
            r.validate()?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.records {
            w.serialize(Row {
                patient_id: r.patient_id.clone(),
                oct_h_path: path_str(&r.oct_h)?,
                oct_v_path: path_str(&r.oct_v)?,
                age: r.clinical.age,
                mh_duration: r.clinical.mh_duration,
                elevated_edge: r.clinical.elevated_edge as u8,
                pseudophakic: r.clinical.pseudophakic as u8,
                baseline_va: r.clinical.baseline_va,
                va_6mo: r.va_6mo,
                split: r.split.to_string(),
            })?;
        }
        w.into_inner().map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_csv(bytes: &[u8], provenance: DatasetProvenance) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest(format!(
                "header {header:?} does not match expected {MANIFEST_HEADER:?}"
            )));
        }
        let mut records = Vec::new();
        for row in rd.deserialize::<Row>() {
            let row = row?;
            records.push(PatientRecord {
                clinical: ClinicalFeatures {
                    age: row.age,
                    mh_duration: row.mh_duration,
                    elevated_edge: flag(row.elevated_edge, "elevated_edge", &row.patient_id)?,
                    pseudophakic: flag(row.pseudophakic, "pseudophakic", &row.patient_id)?,
                    baseline_va: row.baseline_va,
                },
                oct_h: PathBuf::from(row.oct_h_path),
                oct_v: PathBuf::from(row.oct_v_path),
                va_6mo: row.va_6mo,
                split: row.split.parse()?,
                patient_id: row.patient_id,
            });
        }
        let m = Self { records, provenance };
        m.validate()?;
        Ok(m)
    }

    /// Writes the CSV and its provenance sidecar, each atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &self.to_csv()?)?;
        crate::fsutil::write_json(&provenance_path(path), &self.provenance)
    }

    /// Reads a manifest; without a sidecar the provenance is external.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let side = provenance_path(path);
        let provenance = if side.exists() {
            crate::fsutil::read_json(&side)?
        } else {
            DatasetProvenance::External
        };
        Self::from_csv(&bytes, provenance).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }
}

/// Both cuts of one patient, decoded.
#[derive(Clone, Debug)]
pub struct PatientImages {
    pub horizontal: ImageBuffer,
    pub vertical: ImageBuffer,
}

impl PatientImages {
    pub fn view(&self, v: View) -> &ImageBuffer {
        match v {
            View::Horizontal => &self.horizontal,
            View::Vertical => &self.vertical,
        }
    }
}

/// A manifest with every image decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<PatientImages>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let images = octmh_tensor::par::map_indexed(manifest.records.len(), |i| {
            let r = &manifest.records[i];
            Ok(PatientImages {
                horizontal: load_png(&root.join(&r.oct_h))?,
                vertical: load_png(&root.join(&r.oct_v))?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.manifest.records
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<bool> {
        indices.iter().map(|&i| self.manifest.records[i].label()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, baseline: i32, va6: i32) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            oct_h: format!("images/{id}_h.png").into(),
            oct_v: format!("images/{id}_v.png").into(),
            clinical: ClinicalFeatures {
                age: 66.5,
                mh_duration: 11.25,
                elevated_edge: true,
                pseudophakic: false,
                baseline_va: baseline,
            },
            va_6mo: va6,
            split: Split::Train,
        }
    }

    #[test]
    fn label_threshold_is_inclusive() {
        assert!(derive_label(&record("a", 50, 65)));
        assert!(!derive_label(&record("a", 50, 64)));
        // training-set means: 50.43 -> 66.01 is a 15.58 letter gain
        assert!(66.01 - 50.43 >= GAIN_THRESHOLD as f64);
    }

    #[test]
    fn split_size_rule() {
        assert_eq!(split_sizes(121, DEFAULT_SPLIT_FRACTIONS).unwrap(), (83, 21, 17));
        assert_eq!(split_sizes(10, DEFAULT_SPLIT_FRACTIONS).unwrap(), (7, 2, 1));
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn tiny_dataset_rejected() {
        let r = vec![record("a", 1, 2), record("b", 1, 2)];
        assert!(split_dataset(r, DEFAULT_SPLIT_FRACTIONS, 0).is_err());
    }

    #[test]
    fn duplication_doubles() {
        let recs: Vec<_> = (0..83).map(|i| record(&i.to_string(), 40, 40 + (i % 30))).collect();
        let idx: Vec<usize> = (0..83).collect();
        let s = duplicate_per_oct(&recs, &idx);
        assert_eq!(s.len(), 166);
        assert!(s.iter().all(|x| x.label == recs[x.record].label()));
        assert!(duplicate_per_oct(&recs, &[]).is_empty());
    }

    #[test]
    fn manifest_rejects_bad_header_and_flags() {
        let bad = b"id,x\n1,2\n";
        assert!(DatasetManifest::from_csv(bad, DatasetProvenance::External).is_err());
        let m = DatasetManifest {
            records: vec![record("p1", 50, 70)],
            provenance: DatasetProvenance::External,
        };
        let csv = String::from_utf8(m.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("patient_id,oct_h_path,oct_v_path,age,mh_duration,elevated_edge,pseudophakic,baseline_va,va_6mo,split\n"));
        let broken = csv.replace(",1,0,50,", ",2,0,50,");
        assert!(DatasetManifest::from_csv(broken.as_bytes(), DatasetProvenance::External).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest {
            records: vec![record("p1", 50, 70), record("p1", 50, 70)],
            provenance: DatasetProvenance::External,
        };
        assert!(m.validate().is_err());
    }
}
