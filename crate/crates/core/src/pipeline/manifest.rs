//! Dataset manifests: `path,label,split` records plus the class table.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::io::load_gray;
use crate::imageproc::MaskImage;
use crate::training::fit::stream;
use crate::training::{Dataset, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
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
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split '{other}' (train, validation, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative paths resolve against the manifest's root.
    pub path: String,
    pub label: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub split: Option<Split>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Split>, D::Error> {
    let s = Option::<String>::deserialize(d)?;
    match s.as_deref() {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = Manifest { root: root.into(), records };
        m.validate()?;
        Ok(m)
    }

    /// Sorted distinct labels.
    pub fn class_names(&self) -> Vec<String> {
        self.records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.label.is_empty() {
                return Err(Error::config(format!("record '{}' has an empty label", r.path)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::config(format!("path '{}' appears more than once", r.path)));
            }
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "label", "split"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([r.path.as_str(), r.label.as_str(), r.split.map_or("", Split::as_str)]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::config(format!("manifest header must be path,label,split, got {}", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let records = r.deserialize().collect::<std::result::Result<Vec<Record>, _>>().map_err(csv_err)?;
        Manifest::new(root, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Reads a manifest; relative record paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_csv(&text, root)
    }

    /// Loads the images of one split. Labels index the full class table, so
    /// every split of a manifest shares label ids. Masks are attached when
    /// [`mask_path`] exists for a record.
    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let classes = self.class_names();
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut samples = Vec::new();
        for r in self.records_in(split) {
            let full = self.resolve(&r.path);
            let image = load_gray(&full)?;
            let mp = mask_path(&full);
            let mask = match mp {
                Some(p) if p.exists() => Some(MaskImage::from_gray(&load_gray(&p)?)),
                _ => None,
            };
            samples.push(Sample { id: r.path.clone(), image, label: index[r.label.as_str()], mask });
        }
        Dataset::new(classes, samples)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::config(format!("manifest CSV: {e}"))
}

/// Ground-truth mask location for an image under an `images/` directory:
/// the same relative path under a sibling `masks/` directory.
pub fn mask_path(image: &Path) -> Option<PathBuf> {
    let comps: Vec<_> = image.components().collect();
    let pos = comps.iter().rposition(|c| c.as_os_str() == "images")?;
    let mut out = PathBuf::new();
    for (i, c) in comps.iter().enumerate() {
        out.push(if i == pos { std::ffi::OsStr::new("masks") } else { c.as_os_str() });
    }
    Some(out)
}

/// A file that could not be ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadFile {
    pub path: String,
    pub reason: String,
}

/// Builds a manifest from `root/<class>/<image>`. Records are ordered by
/// path; splits are left unassigned. Undecodable files abort the ingest
/// unless `skip_bad`, in which case they are reported and left out.
pub fn ingest(root: &Path, skip_bad: bool) -> Result<(Manifest, Vec<BadFile>)> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::config(format!("no class directories under {}", root.display())));
    }
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for dir in class_dirs {
        let label = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::config("class directory name is not UTF-8"))?.to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("class '{label}' has no images")));
        }
        let mut good = 0;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            match load_gray(&f) {
                Ok(_) => {
                    good += 1;
                    records.push(Record { path: rel, label: label.clone(), split: None });
                }
                Err(e) => bad.push(BadFile { path: rel, reason: e.to_string() }),
            }
        }
        if good == 0 && skip_bad {
            return Err(Error::config(format!("class '{label}' has no readable images")));
        }
    }
    if !bad.is_empty() && !skip_bad {
        let list: Vec<String> = bad.iter().map(|b| format!("{} ({})", b.path, b.reason)).collect();
        return Err(Error::invalid(format!("{} unreadable file(s): {}", bad.len(), list.join("; "))));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((Manifest::new(root, records)?, bad))
}

/// Per-split counts for `n` items: floors of `n * ratio`, with the
/// remainder handed out by largest fractional part (earlier split first on
/// ties).
pub fn split_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        // Snap values a rounding error away from an integer.
        let e = exact[i];
        counts[i] = if (e - e.round()).abs() < 1e-9 { e.round() as usize } else { e.floor() as usize };
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut k = 0;
    while left > 0 && !order.is_empty() {
        counts[order[k % order.len()]] += 1;
        left -= 1;
        k += 1;
    }
    counts
}

/// Stratified split: each class is shuffled with a seeded generator and cut
/// into train / validation / test by [`split_counts`].
pub fn split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let classes = manifest.class_names();
    let mut out = manifest.clone();
    for (ci, class) in classes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..manifest.records.len()).filter(|&i| &manifest.records[i].label == class).collect();
        let counts = split_counts(idx.len(), ratios);
        for (s, (&c, &r)) in counts.iter().zip(&ratios).enumerate() {
            if r > 0.0 && c == 0 {
                return Err(Error::config(format!(
                    "class '{class}' has {} image(s), too few for a non-empty {} split",
                    idx.len(),
                    Split::ALL[s]
                )));
            }
        }
        idx.shuffle(&mut stream(seed, 0x5350_4c54, ci as u64, 0));
        let mut it = idx.into_iter();
        for (s, &c) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(c) {
                out.records[i].split = Some(*s);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_counts() {
        assert_eq!(split_counts(100, [0.8, 0.1, 0.1]), [80, 10, 10]);
        assert_eq!(split_counts(7, [1.0, 0.0, 0.0]), [7, 0, 0]);
        assert_eq!(split_counts(10, [0.7, 0.2, 0.1]), [7, 2, 1]);
        assert_eq!(split_counts(5, [0.5, 0.25, 0.25]).iter().sum::<usize>(), 5);
    }

    #[test]
    fn mask_path_mirrors_images_dir() {
        assert_eq!(mask_path(Path::new("/d/images/train/a/1.png")), Some(PathBuf::from("/d/masks/train/a/1.png")));
        assert_eq!(mask_path(Path::new("x/1.png")), None);
    }

    #[test]
    fn csv_round_trip() {
        let m = Manifest::new(
            "/r",
            vec![
                Record { path: "a,b.png".into(), label: "x".into(), split: Some(Split::Test) },
                Record { path: "c.png".into(), label: "y".into(), split: None },
            ],
        )
        .unwrap();
        let back = Manifest::from_csv(&m.to_csv().unwrap(), "/r").unwrap();
        assert_eq!(back, m);
    }
}
