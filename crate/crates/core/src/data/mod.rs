//! Datasets on disk: manifest, image/label files and checkpoints.

pub mod checkpoint;
pub mod pnm;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::IGNORE_INDEX;
use crate::error::{Error, FormatError, Result};
use crate::scenario::{ClassSet, DatasetIndex, SampleInfo};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

/// One image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H × W × 3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class ids, `IGNORE_INDEX` for unlabelled pixels.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Samples held in memory together with the class names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn index(&self) -> Result<DatasetIndex> {
        let samples = self
            .samples
            .iter()
            .map(|s| SampleInfo::from_labels(s.id.clone(), &s.labels, self.num_classes()))
            .collect::<Result<_>>()?;
        Ok(DatasetIndex { class_names: self.class_names.clone(), samples })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: String,
    pub label: String,
    pub classes: ClassSet,
}

/// Parses `<id>\t<image>\t<label>\t<hex-bitmask>` lines. Ids must be unique.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, FormatError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, label, mask] = fields[..] else {
            return Err(FormatError::Malformed(format!(
                "line {}: expected 4 tab-separated fields, found {}",
                n + 1,
                fields.len()
            )));
        };
        if id.is_empty() || image.is_empty() || label.is_empty() {
            return Err(FormatError::Malformed(format!("line {}: empty field", n + 1)));
        }
        if !seen.insert(id) {
            return Err(FormatError::Malformed(format!("line {}: duplicate id {id:?}", n + 1)));
        }
        let classes = ClassSet::from_hex(mask)
            .map_err(|_| FormatError::Malformed(format!("line {}: bad bitmask {mask:?}", n + 1)))?;
        out.push(ManifestRecord { id: id.into(), image: image.into(), label: label.into(), classes });
    }
    Ok(out)
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    records.iter().map(|r| format!("{}\t{}\t{}\t{}\n", r.id, r.image, r.label, r.classes.to_hex())).collect()
}

/// One class name per line; names must be non-empty and unique.
pub fn parse_class_names(text: &str) -> Result<Vec<String>, FormatError> {
    let names: Vec<String> = text.lines().map(str::to_string).collect();
    let unique: HashSet<&String> = names.iter().collect();
    if names.is_empty() || names.iter().any(|n| n.is_empty()) || unique.len() != names.len() {
        return Err(FormatError::Malformed("class list must be non-empty and unique".into()));
    }
    if names.len() > IGNORE_INDEX as usize {
        return Err(FormatError::Malformed(format!("{} classes, at most 255", names.len())));
    }
    Ok(names)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| Error::CorruptFile {
        path: path.into(),
        source: FormatError::Malformed("not UTF-8".into()),
    })
}

impl DatasetManifest {
    /// Reads `manifest.tsv` and `classes.txt` from `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let corrupt = |path: PathBuf| move |source| Error::CorruptFile { path, source };
        let classes_path = root.join(CLASSES_FILE);
        let class_names = parse_class_names(&read_text(&classes_path)?).map_err(corrupt(classes_path))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let records = parse_manifest(&read_text(&manifest_path)?).map_err(corrupt(manifest_path))?;
        Ok(DatasetManifest { root: root.into(), class_names, records })
    }

    pub fn save(&self) -> Result<()> {
        let classes: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        let path = self.root.join(CLASSES_FILE);
        fs::write(&path, classes).map_err(|e| Error::io(&path, e))?;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, format_manifest(&self.records)).map_err(|e| Error::io(&path, e))
    }

    pub fn record(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn read_record(&self, r: &ManifestRecord) -> Result<Sample> {
        let corrupt = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::CorruptFile { path, source }
        };
        let img_path = self.root.join(&r.image);
        let img = pnm::decode_ppm(&fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?)
            .map_err(corrupt(&img_path))?;
        let lbl_path = self.root.join(&r.label);
        let lbl = pnm::decode_pgm(&fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?)
            .map_err(corrupt(&lbl_path))?;
        if (img.width, img.height) != (lbl.width, lbl.height) {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but labels are {}x{}",
                r.id, img.width, img.height, lbl.width, lbl.height
            )));
        }
        let c = self.class_names.len();
        if let Some(&bad) = lbl.data.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= c) {
            return Err(Error::CorruptFile {
                path: lbl_path,
                source: FormatError::Malformed(format!("label {bad} with {c} classes")),
            });
        }
        let image = image_from_bytes(img.height, img.width, &img.data, img.maxval)?;
        Ok(Sample { id: r.id.clone(), image, labels: lbl.data })
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let r = self.record(id).ok_or_else(|| Error::Data(format!("no sample with id {id:?}")))?;
        self.read_record(r)
    }

    /// Loads every record. In strict mode each bitmask must equal the class
    /// set found in its label file.
    pub fn load_all(&self, strict: bool) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let s = self.read_record(r)?;
            if strict {
                let found = ClassSet::from_labels(&s.labels);
                if found != r.classes {
                    return Err(Error::Data(format!(
                        "{}: manifest bitmask {} but labels contain {}",
                        r.id,
                        r.classes.to_hex(),
                        found.to_hex()
                    )));
                }
            }
            samples.push(s);
        }
        Ok(Dataset { class_names: self.class_names.clone(), samples })
    }
}

/// Encodes a dataset into `(relative path, bytes)` pairs: one PPM and one
/// PGM per sample, then the class list and the manifest.
pub fn encode_dataset(dataset: &Dataset) -> (DatasetManifest, Vec<(String, Vec<u8>)>) {
    let mut files = Vec::with_capacity(2 * dataset.samples.len() + 2);
    let mut records = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let (h, w) = (s.height(), s.width());
        let rgb = s.image.data().iter().map(|&v| quantize(v)).collect();
        let image = format!("images/{}.ppm", s.id);
        let label = format!("labels/{}.pgm", s.id);
        files.push((image.clone(), pnm::encode(&pnm::Raster::rgb(w, h, rgb))));
        files.push((label.clone(), pnm::encode(&pnm::Raster::gray(w, h, s.labels.clone()))));
        records.push(ManifestRecord {
            id: s.id.clone(),
            image,
            label,
            classes: ClassSet::from_labels(&s.labels),
        });
    }
    let classes: String = dataset.class_names.iter().map(|n| format!("{n}\n")).collect();
    files.push((CLASSES_FILE.to_string(), classes.into_bytes()));
    files.push((MANIFEST_FILE.to_string(), format_manifest(&records).into_bytes()));
    let manifest =
        DatasetManifest { root: PathBuf::new(), class_names: dataset.class_names.clone(), records };
    (manifest, files)
}

/// Writes a dataset as PPM/PGM files plus manifest under `root`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let (mut manifest, files) = encode_dataset(dataset);
    for (rel, bytes) in files {
        let path = root.join(rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    manifest.root = root.into();
    Ok(manifest)
}

/// Checks that the files under `root` are byte-identical to what
/// [`write_dataset`] would produce. Returns the relative paths that differ
/// or are missing.
pub fn diff_dataset(dataset: &Dataset, root: &Path) -> Vec<String> {
    encode_dataset(dataset)
        .1
        .into_iter()
        .filter(|(rel, bytes)| fs::read(root.join(rel)).map_or(true, |found| &found != bytes))
        .map(|(rel, _)| rel)
        .collect()
}

/// Normalises interleaved 8-bit RGB to `[0, 1]`.
pub fn image_from_bytes(height: usize, width: usize, rgb: &[u8], maxval: u8) -> Result<Tensor<f32>> {
    let max = maxval as f32;
    Tensor::new(vec![height, width, 3], rgb.iter().map(|&v| v as f32 / max).collect())
}

/// Maps `[0, 1]` to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
