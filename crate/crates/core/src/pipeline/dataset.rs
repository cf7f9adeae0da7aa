use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

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
            "val" | "validate" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split fractions {parts:?}")));
        }
        if ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions {parts:?} do not sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for a class of `n` items. Every split
    /// with a positive fraction gets at least one item when `n` allows.
    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let want = |f: f64| {
            if f > 0.0 {
                ((n as f64 * f).round() as usize).max(1)
            } else {
                0
            }
        };
        let mut val = want(self.val);
        let mut test = want(self.test);
        while val + test >= n && (val > 0 || test > 0) {
            if test >= val && test > 0 {
                test -= 1;
            } else {
                val -= 1;
            }
        }
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub fractions: SplitFractions,
    pub seed: u64,
    /// Read each image header and skip files that cannot be decoded.
    pub verify_images: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            fractions: SplitFractions::default(),
            seed: 0,
            verify_images: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// Sorted by path.
    pub entries: Vec<DatasetEntry>,
    /// Files left out, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn per_class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.split(split) {
            counts[e.class_id] += 1;
        }
        counts
    }

    pub fn full_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Manifest text reproducing this index.
    pub fn to_manifest(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", path_key(&e.path), self.classes[e.class_id], e.split))
            .collect()
    }

    fn check_populated_splits(&self) -> Result<()> {
        for split in Split::ALL {
            let counts = self.per_class_counts(split);
            if counts.iter().all(|&c| c == 0) {
                continue;
            }
            if let Some(c) = counts.iter().position(|&c| c == 0) {
                return Err(Error::Dataset(format!(
                    "class {:?} has no {split} images",
                    self.classes[c]
                )));
            }
        }
        Ok(())
    }
}

/// Forward-slash form of a relative path, used for ordering and ids.
pub fn path_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

fn readable(path: &Path) -> std::result::Result<(), String> {
    image::image_dimensions(path).map(|_| ()).map_err(|e| e.to_string())
}

/// Index a dataset. With a manifest (`path<TAB>class<TAB>split` lines,
/// paths relative to `root`) the splits come from it; otherwise `root`
/// holds one directory per class and splits are drawn per class with a
/// seeded shuffle.
pub fn ingest(root: &Path, manifest: Option<&Path>, opts: &IngestOptions) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut index = match manifest {
        Some(m) => {
            let text = std::fs::read_to_string(m)
                .map_err(|e| Error::Dataset(format!("cannot read manifest {}: {e}", m.display())))?;
            index_from_manifest(root, &text)?
        }
        None => index_from_dirs(root, opts)?,
    };
    if opts.verify_images {
        let mut kept = Vec::with_capacity(index.entries.len());
        for e in index.entries.drain(..) {
            match readable(&root.join(&e.path)) {
                Ok(()) => kept.push(e),
                Err(why) => {
                    log::warn!("skipping unreadable image {}: {why}", e.path.display());
                    index.skipped.push((e.path.clone(), why));
                }
            }
        }
        index.entries = kept;
    }
    index.check_populated_splits()?;
    Ok(index)
}

fn index_from_manifest(root: &Path, text: &str) -> Result<DatasetIndex> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, class, split] = fields[..] else {
            return Err(Error::Dataset(format!(
                "manifest line {}: expected 3 tab-separated fields",
                n + 1
            )));
        };
        rows.push((PathBuf::from(path), class.to_string(), split.parse::<Split>()?));
    }
    let classes: Vec<String> = rows
        .iter()
        .map(|r| r.1.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return Err(Error::Dataset("manifest lists no images".into()));
    }
    let ids: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut entries: Vec<DatasetEntry> = rows
        .iter()
        .map(|(path, class, split)| DatasetEntry {
            path: path.clone(),
            class_id: ids[class.as_str()],
            split: *split,
        })
        .collect();
    entries.sort_by_key(|e| path_key(&e.path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        entries,
        skipped: Vec::new(),
    })
}

fn index_from_dirs(root: &Path, opts: &IngestOptions) -> Result<DatasetIndex> {
    opts.fractions.validate()?;
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_dir(dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {name:?} contains no images")));
        }
        let mut order: Vec<usize> = (0..files.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(class_id as u64);
        order.shuffle(&mut rng);
        let (n_train, n_val, _) = opts.fractions.counts(files.len());
        for (rank, &i) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(DatasetEntry {
                path: files[i].clone(),
                class_id,
                split,
            });
        }
        classes.push(name);
    }
    entries.sort_by_key(|e| path_key(&e.path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        entries,
        skipped: Vec::new(),
    })
}

/// Build a manifest from a MINC-2500 style `labels/` directory: files
/// `train{n}.txt`, `validate{n}.txt` and `test{n}.txt` listing paths such as
/// `images/brick/brick_000001.jpg`; the class is the directory name.
pub fn minc_manifest(root: &Path, split_number: u32) -> Result<String> {
    let mut out = String::new();
    for (file, split) in [("train", Split::Train), ("validate", Split::Val), ("test", Split::Test)] {
        let p = root.join("labels").join(format!("{file}{split_number}.txt"));
        let text =
            std::fs::read_to_string(&p).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", p.display())))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let class = Path::new(line)
                .parent()
                .and_then(|d| d.file_name())
                .ok_or_else(|| Error::Dataset(format!("cannot infer the class of {line:?}")))?;
            out.push_str(&format!("{line}\t{}\t{split}\n", class.to_string_lossy()));
        }
    }
    Ok(out)
}
