//! Corpus ingestion and the on-disk formats for manifests, fold
//! assignments and balanced training sets.
//!
//! Corpus layout: one subdirectory per class abbreviation under a data
//! root, holding `.jpg`/`.jpeg`/`.png` files (nested folders allowed). An
//! optional `metadata.csv` at the root adds per-image fields:
//!
//! ```text
//! filename,site,latitude,longitude,date
//! WAT/img_0001.jpg,Exmoor 12,51.10,-3.61,2021-06-14
//! ```
//!
//! `filename` is the path relative to the root; a bare file name is also
//! accepted when it is unique in the corpus.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use habitat_core::balance::{BalancedRecord, BalancedSet};
use habitat_core::folds::FoldAssignment;
use habitat_core::record::{CaptureDate, GeoPoint, ImageRecord, Manifest};
use habitat_core::ClassTaxonomy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HabitatError, IoContext, Result};
use crate::imaging;

pub const METADATA_FILE: &str = "metadata.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

/// A manifest together with the directory its record paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub data_root: PathBuf,
}

impl Corpus {
    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.data_root.join(&record.path)
    }
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub corpus: Corpus,
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Deserialize)]
struct MetadataRow {
    filename: String,
    #[serde(default)]
    site: Option<String>,
    #[serde(default)]
    latitude: Option<f64>,
    #[serde(default)]
    longitude: Option<f64>,
    #[serde(default)]
    date: Option<String>,
}

fn relative_unix(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .at(dir)?
        .collect::<std::io::Result<Vec<_>>>()
        .at(dir)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        rows.push(row.map_err(|e| HabitatError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

fn apply_metadata(records: &mut [ImageRecord], rows: Vec<MetadataRow>, path: &Path) -> Result<()> {
    let mut by_rel: HashMap<String, usize> = HashMap::new();
    let mut by_name: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_rel.insert(r.path.clone(), i);
        let name = r.path.rsplit('/').next().unwrap_or(&r.path).to_string();
        by_name.entry(name).or_default().push(i);
    }
    for (line, row) in rows.into_iter().enumerate() {
        let parse_err = |message: String| HabitatError::Parse {
            path: path.to_path_buf(),
            line: line + 2,
            message,
        };
        let idx = match by_rel.get(&row.filename) {
            Some(i) => *i,
            None => match by_name.get(&row.filename).map(Vec::as_slice) {
                Some([i]) => *i,
                Some(_) => {
                    return Err(parse_err(format!(
                        "file name `{}` is ambiguous; use the path relative to the data root",
                        row.filename
                    )))
                }
                // Metadata for skipped or absent files is ignored.
                None => continue,
            },
        };
        let rec = &mut records[idx];
        rec.site = row.site.filter(|s| !s.is_empty());
        rec.location = match (row.latitude, row.longitude) {
            (Some(lat), Some(lon)) => {
                Some(GeoPoint::new(lat, lon).map_err(|e| parse_err(e.to_string()))?)
            }
            (None, None) => None,
            _ => return Err(parse_err("latitude and longitude must be given together".into())),
        };
        rec.capture_date = match row.date.as_deref().filter(|d| !d.is_empty()) {
            Some(d) => Some(d.parse::<CaptureDate>().map_err(|e| parse_err(e.to_string()))?),
            None => None,
        };
    }
    Ok(())
}

/// Scans a directory-per-class corpus, decoding every image to confirm it is
/// readable. Files that fail to decode or have an unsupported extension go
/// to the skip report. Records are sorted by id, so re-ingesting an
/// unchanged directory gives an identical manifest.
pub fn ingest_directory(root: &Path, taxonomy: &ClassTaxonomy) -> Result<IngestOutcome> {
    let mut class_dirs = Vec::new();
    let mut unknown = Vec::new();
    for entry in std::fs::read_dir(root).at(root)? {
        let entry = entry.at(root)?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if taxonomy.index_of(&name).is_some() {
            class_dirs.push((name, entry.path()));
        } else {
            unknown.push(name);
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        return Err(HabitatError::UnknownClassDirectories(unknown));
    }
    class_dirs.sort();

    let mut candidates = Vec::new();
    for (label, dir) in &class_dirs {
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        candidates.extend(files.into_iter().map(|f| (label.clone(), f)));
    }

    let checked: Vec<std::result::Result<ImageRecord, SkippedFile>> = candidates
        .par_iter()
        .map(|(label, file)| {
            let rel = relative_unix(file, root);
            let skip = |reason: String| SkippedFile {
                path: rel.clone(),
                reason,
            };
            if !imaging::has_supported_extension(&rel) {
                return Err(skip("unsupported file extension".into()));
            }
            match imaging::read_image(file) {
                Ok(_) => Ok(ImageRecord::original(rel.clone(), rel.clone(), label.as_str())),
                Err(e) => Err(skip(e.to_string())),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for c in checked {
        match c {
            Ok(r) => records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    if records.is_empty() {
        return Err(HabitatError::NoImages(root.to_path_buf()));
    }
    let meta_path = root.join(METADATA_FILE);
    if meta_path.is_file() {
        apply_metadata(&mut records, read_metadata(&meta_path)?, &meta_path)?;
    }
    let manifest = Manifest::new(records, taxonomy)?.sorted();
    Ok(IngestOutcome {
        corpus: Corpus {
            manifest,
            data_root: root.to_path_buf(),
        },
        skipped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    taxonomy_version: String,
    data_root: PathBuf,
    record_count: usize,
    per_class_counts: BTreeMap<String, usize>,
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    Ok(BufWriter::new(File::create(path).at(path)?))
}

pub(crate) fn write_jsonl<T: Serialize>(
    path: &Path,
    header: Option<&impl Serialize>,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = create(path)?;
    if let Some(h) = header {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n").at(path)?;
    }
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

/// Parses a line-delimited JSON file, skipping blank lines. Errors cite the
/// 1-based line number.
pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| HabitatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Writes the manifest as JSON lines: a header object followed by one
/// record per line.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let m = &corpus.manifest;
    let header = ManifestHeader {
        taxonomy_version: m.taxonomy_version().to_string(),
        data_root: corpus.data_root.clone(),
        record_count: m.len(),
        per_class_counts: m.per_class_counts().clone(),
    };
    write_jsonl(path, Some(&header), m.records())
}

pub fn read_manifest(path: &Path, taxonomy: &ClassTaxonomy) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .transpose()
        .at(path)?
        .ok_or_else(|| HabitatError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "empty manifest".into(),
        })?;
    let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| HabitatError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    let mut records = Vec::with_capacity(header.record_count);
    for (i, line) in lines.enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| HabitatError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    if records.len() != header.record_count {
        return Err(HabitatError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "header announces {} records, file has {}",
                header.record_count,
                records.len()
            ),
        });
    }
    let manifest = Manifest::from_parts(
        records,
        &header.taxonomy_version,
        header.per_class_counts,
        taxonomy,
    )?;
    let data_root = if header.data_root.is_relative() {
        path.parent().unwrap_or(Path::new(".")).join(&header.data_root)
    } else {
        header.data_root
    };
    Ok(Corpus {
        manifest,
        data_root,
    })
}

pub fn write_skip_report(skipped: &[SkippedFile], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, skipped)?;
    w.write_all(b"\n").at(path)?;
    w.flush().at(path)
}

/// Fold files are pretty JSON with sorted keys, so the same assignment
/// always serialises to the same bytes.
pub fn write_folds(folds: &FoldAssignment, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, folds)?;
    w.write_all(b"\n").at(path)?;
    w.flush().at(path)
}

pub fn read_folds(path: &Path) -> Result<FoldAssignment> {
    let file = File::open(path).at(path)?;
    let raw: FoldAssignment = serde_json::from_reader(BufReader::new(file))?;
    Ok(FoldAssignment::from_parts(
        raw.n_folds(),
        raw.seed(),
        raw.assignment().clone(),
    )?)
}

pub fn write_balanced_set(set: &BalancedSet, path: &Path) -> Result<()> {
    write_jsonl(path, None::<&()>, set.entries())
}

pub fn read_balanced_set(path: &Path) -> Result<Vec<BalancedRecord>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use habitat_core::folds::stratified_kfold_split;
    use habitat_core::raster::Raster;

    fn write_png(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let r = Raster::filled(8, 8, [10, 20, 30]).unwrap();
        std::fs::write(path, imaging::encode_png(&r)).unwrap();
    }

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("WAT/a.png"));
        write_png(&dir.path().join("WAT/b.png"));
        write_png(&dir.path().join("BS/c.png"));
        let out = ingest_directory(dir.path(), &ClassTaxonomy::living_england()).unwrap();
        let counts = out.corpus.manifest.per_class_counts();
        assert_eq!(counts["WAT"], 2);
        assert_eq!(counts["BS"], 1);
        assert_eq!(out.corpus.manifest.len(), 3);
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn unknown_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("XYZ/a.png"));
        write_png(&dir.path().join("WAT/a.png"));
        match ingest_directory(dir.path(), &ClassTaxonomy::living_england()) {
            Err(HabitatError::UnknownClassDirectories(names)) => assert_eq!(names, ["XYZ"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("WAT")).unwrap();
        assert!(matches!(
            ingest_directory(dir.path(), &ClassTaxonomy::living_england()),
            Err(HabitatError::NoImages(_))
        ));
    }

    #[test]
    fn metadata_sidecar_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("WAT/a.png"));
        write_png(&dir.path().join("BOG/b.png"));
        std::fs::write(
            dir.path().join(METADATA_FILE),
            "filename,site,latitude,longitude,date\nWAT/a.png,Exmoor,51.1,-3.6,2021-06-14\nb.png,,,,\n",
        )
        .unwrap();
        let out = ingest_directory(dir.path(), &ClassTaxonomy::living_england()).unwrap();
        let a = out.corpus.manifest.get("WAT/a.png").unwrap();
        assert_eq!(a.site.as_deref(), Some("Exmoor"));
        assert_eq!(a.capture_date.unwrap().to_string(), "2021-06-14");
        assert_eq!(a.location.unwrap().latitude, 51.1);
        assert!(out.corpus.manifest.get("BOG/b.png").unwrap().site.is_none());
    }

    #[test]
    fn manifest_and_folds_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            write_png(&dir.path().join(format!("WAT/{i}.png")));
        }
        let tax = ClassTaxonomy::living_england();
        let out = ingest_directory(dir.path(), &tax).unwrap();
        let mpath = dir.path().join("out/manifest.jsonl");
        write_manifest(&out.corpus, &mpath).unwrap();
        assert_eq!(read_manifest(&mpath, &tax).unwrap(), out.corpus);

        let folds = stratified_kfold_split(&out.corpus.manifest, 3, 42).unwrap();
        let fpath = dir.path().join("out/folds.json");
        write_folds(&folds, &fpath).unwrap();
        let first = std::fs::read(&fpath).unwrap();
        assert_eq!(read_folds(&fpath).unwrap(), folds);
        write_folds(&stratified_kfold_split(&out.corpus.manifest, 3, 42).unwrap(), &fpath).unwrap();
        assert_eq!(std::fs::read(&fpath).unwrap(), first);
    }

    #[test]
    fn corrupt_manifest_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("WAT/a.png"));
        let tax = ClassTaxonomy::living_england();
        let out = ingest_directory(dir.path(), &tax).unwrap();
        let mpath = dir.path().join("m.jsonl");
        write_manifest(&out.corpus, &mpath).unwrap();
        let mut text = std::fs::read_to_string(&mpath).unwrap();
        text.push_str("{\"id\": \n");
        std::fs::write(&mpath, text).unwrap();
        match read_manifest(&mpath, &tax) {
            Err(HabitatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
