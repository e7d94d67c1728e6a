//! Paired image-report datasets.
//!
//! On-disk layout, all paths relative to the dataset directory:
//!
//! ```text
//! manifest.txt     key-value header (schema, categories, counts)
//! records.jsonl    one record per sample
//! corpus.tsv       category descriptions (written by the generator)
//! features/*.bin   per-sample patch-feature tensors
//! ```
//!
//! The synthetic generator plants a recoverable class signature in
//! both modalities: a patch-feature template per class on the image
//! side, a token motif per class on the text side. Motif words are
//! chosen so their hashed token ids collide neither with each other
//! nor with the fixed grammar and prompt words, so the signal survives
//! the hashing tokenizer intact.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::Corpus;
use crate::linalg::Matrix;
use crate::tensorio::{read_tensors, write_tensors, StorageDtype};
use crate::tokenizer::HashTokenizer;

/// Environment variable naming the directory relative dataset paths
/// resolve against.
pub const DATA_DIR_ENV: &str = "ANCORA_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
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

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split '{other}'"))),
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    PatchFeatures,
    Raw,
}

impl ImageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageMode::PatchFeatures => "patch_features",
            ImageMode::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch_features" => Ok(ImageMode::PatchFeatures),
            "raw" => Ok(ImageMode::Raw),
            other => Err(Error::data(format!("unknown image mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub sample_id: String,
    /// patch_count x patch_dim feature grid.
    pub patches: Matrix,
    pub report: String,
    /// Multi-hot over the manifest's categories.
    pub labels: Vec<u8>,
    pub split: Split,
}

impl PairedSample {
    /// Index of the first positive label; None for all-negative rows.
    pub fn primary_class(&self) -> Option<usize> {
        self.labels.iter().position(|&l| l != 0)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub name: String,
    pub category_names: Vec<String>,
    pub image_mode: ImageMode,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub counts: BTreeMap<Split, usize>,
    pub source_note: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<PairedSample>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    sample_id: String,
    features_path: String,
    report: String,
    labels: Vec<u8>,
    split: String,
}

/// Relative paths resolve against `ANCORA_DATA_DIR` when it is set.
pub fn resolve_dataset_dir(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var(DATA_DIR_ENV) {
        Ok(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        Dataset::load_with(dir, None)
    }

    /// `report_filter` lets callers select report sections (the raw
    /// record keeps the full text on disk).
    pub fn load_with(
        dir: &Path,
        report_filter: Option<&dyn Fn(&str) -> String>,
    ) -> Result<Dataset> {
        let manifest = read_manifest(dir)?;
        if manifest.image_mode == ImageMode::Raw {
            return Err(Error::data(
                "image_mode 'raw' is declared but this loader only reads patch_features",
            ));
        }
        let records_path = dir.join("records.jsonl");
        let text =
            std::fs::read_to_string(&records_path).map_err(|e| Error::io(&records_path, e))?;
        let n_cat = manifest.category_names.len();

        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = |msg: String| Error::data(format!("records.jsonl:{}: {msg}", lineno + 1));
            let rec: RecordJson = serde_json::from_str(line)
                .map_err(|e| at(format!("corrupt record: {e}")))?;
            if !seen.insert(rec.sample_id.clone()) {
                return Err(at(format!("duplicate sample id '{}'", rec.sample_id)));
            }
            if rec.labels.len() != n_cat {
                return Err(at(format!(
                    "sample '{}': {} labels, expected {n_cat}",
                    rec.sample_id,
                    rec.labels.len()
                )));
            }
            if rec.labels.iter().any(|&l| l > 1) {
                return Err(at(format!(
                    "sample '{}': labels must be 0 or 1",
                    rec.sample_id
                )));
            }
            let split = Split::parse(&rec.split)
                .map_err(|e| at(format!("sample '{}': {e}", rec.sample_id)))?;
            let mut report = rec.report;
            if let Some(f) = report_filter {
                report = f(&report);
            }
            if split == Split::Train && report.trim().is_empty() {
                return Err(at(format!(
                    "sample '{}': train reports must be nonempty",
                    rec.sample_id
                )));
            }
            let fpath = dir.join(&rec.features_path);
            let (_dtype, tensors) = read_tensors(&fpath)?;
            let patches = tensors
                .into_iter()
                .find(|(n, _)| n == "patches")
                .map(|(_, m)| m)
                .ok_or_else(|| {
                    at(format!(
                        "sample '{}': {} has no 'patches' tensor",
                        rec.sample_id,
                        rec.features_path
                    ))
                })?;
            if patches.shape() != (manifest.patch_count, manifest.patch_dim) {
                return Err(at(format!(
                    "sample '{}': patches are {:?}, manifest says {}x{}",
                    rec.sample_id,
                    patches.shape(),
                    manifest.patch_count,
                    manifest.patch_dim
                )));
            }
            samples.push(PairedSample {
                sample_id: rec.sample_id,
                patches,
                report,
                labels: rec.labels,
                split,
            });
        }
        if samples.is_empty() {
            return Err(Error::data("dataset has no records"));
        }
        for split in Split::ALL {
            let actual = samples.iter().filter(|s| s.split == split).count();
            let declared = manifest.counts.get(&split).copied().unwrap_or(0);
            if actual != declared {
                return Err(Error::data(format!(
                    "manifest declares {declared} {} samples but records hold {actual}",
                    split.as_str()
                )));
            }
        }
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.category_names.len()
    }

    /// Indices of a split in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Deterministic shuffle of a split's indices.
    pub fn shuffled_split_indices(&self, split: Split, seed: u64) -> Vec<usize> {
        let mut idx = self.split_indices(split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    /// Multi-hot label rows for the given samples.
    pub fn labels_matrix(&self, indices: &[usize]) -> Matrix {
        let n = self.num_classes();
        let mut m = Matrix::zeros(indices.len(), n);
        for (r, &i) in indices.iter().enumerate() {
            for (c, &l) in self.samples[i].labels.iter().enumerate() {
                if l != 0 {
                    m.set(r, c, 1.0);
                }
            }
        }
        m
    }
}

/// Training starts only when dataset categories and corpus rows agree
/// exactly, including order.
pub fn ensure_category_match(dataset: &Dataset, corpus: &Corpus) -> Result<()> {
    let ds = &dataset.manifest.category_names;
    let cp: Vec<&str> = corpus.names().collect();
    if ds.len() != cp.len() || ds.iter().zip(&cp).any(|(a, b)| a != b) {
        return Err(Error::config(format!(
            "dataset categories {ds:?} do not match corpus categories {cp:?} (order matters)"
        )));
    }
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let kv = crate::kv::KvFile::load(&dir.join("manifest.txt"))?;
    let name = kv.require("name")?.to_string();
    let num_classes = kv.require_usize("num_classes")?;
    let category_names: Vec<String> = kv
        .require("categories")?
        .split('\t')
        .map(str::to_string)
        .collect();
    if category_names.len() != num_classes {
        return Err(Error::data(format!(
            "manifest lists {num_classes} classes but {} category names",
            category_names.len()
        )));
    }
    let image_mode = ImageMode::parse(kv.require("image_mode")?)?;
    let patch_count = kv.require_usize("patch_count")?;
    let patch_dim = kv.require_usize("patch_dim")?;
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        counts.insert(
            split,
            kv.require_usize(&format!("counts.{}", split.as_str()))?,
        );
    }
    let source_note = kv.get("source_note").unwrap_or("").to_string();
    Ok(DatasetManifest {
        name,
        category_names,
        image_mode,
        patch_count,
        patch_dim,
        counts,
        source_note,
    })
}

fn write_manifest(dir: &Path, m: &DatasetManifest, extra: &[(String, String)]) -> Result<()> {
    let mut kv = crate::kv::KvFile::new();
    kv.set("schema", 1);
    kv.set("kind", "dataset");
    kv.set("name", &m.name);
    kv.set("num_classes", m.category_names.len());
    kv.set("categories", m.category_names.join("\t"));
    kv.set("image_mode", m.image_mode.as_str());
    kv.set("patch_count", m.patch_count);
    kv.set("patch_dim", m.patch_dim);
    for split in Split::ALL {
        kv.set(
            format!("counts.{}", split.as_str()),
            m.counts.get(&split).copied().unwrap_or(0),
        );
    }
    kv.set("source_note", &m.source_note);
    for (k, v) in extra {
        kv.set(k, v);
    }
    kv.save(&dir.join("manifest.txt"))
}

/// Parameters of the planted-structure generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub name: String,
    /// C >= 2 planted classes.
    pub num_classes: usize,
    /// Samples per class, >= 1.
    pub per_class: usize,
    /// Gaussian noise added to the class patch template.
    pub sigma: f64,
    pub seed: u64,
    /// Two planted classes per sample instead of one.
    pub multi_label: bool,
    pub patch_count: usize,
    pub patch_dim: usize,
    /// Tokenizer vocabulary the motif words must stay collision-free
    /// in.
    pub vocab_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".to_string(),
            num_classes: 4,
            per_class: 50,
            sigma: 0.1,
            seed: 7,
            multi_label: false,
            patch_count: 16,
            patch_dim: 8,
            vocab_size: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.per_class == 0 {
            return Err(Error::config("per_class must be at least 1"));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.multi_label && self.num_classes < 3 {
            return Err(Error::config(
                "multi-label planting needs at least 3 classes to vary partners",
            ));
        }
        if self.patch_count == 0 || self.patch_dim == 0 {
            return Err(Error::config("patch grid must be non-degenerate"));
        }
        Ok(())
    }
}

/// Words every generated report or description may contain besides the
/// planted motifs. Their token ids are reserved so motif ids never
/// collide with them.
const GRAMMAR_WORDS: &[&str] = &[
    "findings", "suggesting", "with", "and", "marks", "patients", "show", "patterns", "on",
    "scans", "the", "view", "is", "of", "in", "no", "evidence", "what", "disease", "indicated",
    "by", "chest", "x", "ray", "described", "this", "text", "describe", "typical", "imaging",
];

const FILLER_COUNT: usize = 12;

fn syllable(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let c = C[rng.gen_range(0..C.len())] as char;
    let v = V[rng.gen_range(0..V.len())] as char;
    format!("{c}{v}")
}

/// Draw a pronounceable word whose token id is new to `used`.
fn fresh_word(rng: &mut ChaCha8Rng, tok: &HashTokenizer, used: &mut HashSet<u32>) -> Result<String> {
    for _ in 0..10_000 {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables).map(|_| syllable(rng)).collect();
        let id = tok.word_id(&w);
        if used.insert(id) {
            return Ok(w);
        }
    }
    Err(Error::config(
        "vocabulary too small to plant collision-free motifs",
    ))
}

struct ClassSignature {
    name: String,
    motif: [String; 3],
    template: Matrix,
}

/// Generate a planted-structure dataset on disk and load it back.
pub fn make_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    std::fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;

    let tok = HashTokenizer::new(spec.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used: HashSet<u32> = GRAMMAR_WORDS.iter().map(|w| tok.word_id(w)).collect();

    let fillers: Vec<String> = (0..FILLER_COUNT)
        .map(|_| fresh_word(&mut rng, &tok, &mut used))
        .collect::<Result<_>>()?;

    let mut classes = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let motif = [
            fresh_word(&mut rng, &tok, &mut used)?,
            fresh_word(&mut rng, &tok, &mut used)?,
            fresh_word(&mut rng, &tok, &mut used)?,
        ];
        let template = Matrix::randn_from(&mut rng, spec.patch_count, spec.patch_dim, 1.0);
        classes.push(ClassSignature {
            name: format!("{} {}", motif[0], motif[1]),
            motif,
            template,
        });
    }

    // corpus descriptions carry the full motif
    let corpus_tsv: String = classes
        .iter()
        .map(|c| {
            format!(
                "{}\tpatients with {} {} show {} patterns on scans\n",
                c.name, c.motif[0], c.motif[1], c.motif[2]
            )
        })
        .collect();
    std::fs::write(dir.join("corpus.tsv"), &corpus_tsv)
        .map_err(|e| Error::io(dir.join("corpus.tsv"), e))?;

    let mut records: Vec<(RecordJson, Matrix)> = Vec::new();
    for c in 0..spec.num_classes {
        for i in 0..spec.per_class {
            let sample_id = format!("c{c:02}_s{i:03}");
            let mut labels = vec![0u8; spec.num_classes];
            labels[c] = 1;

            let mut patches = classes[c].template.clone();
            // partner class cycles through the others deterministically
            let partner = (c + 1 + i % (spec.num_classes - 1)) % spec.num_classes;
            if spec.multi_label {
                labels[partner] = 1;
                patches = patches.add(&classes[partner].template).scale(0.5);
            }
            if spec.sigma > 0.0 {
                let noise =
                    Matrix::randn_from(&mut rng, spec.patch_count, spec.patch_dim, spec.sigma);
                patches = patches.add(&noise);
            } else {
                // keep the rng stream aligned across sigma settings
                let _ = Matrix::randn_from(&mut rng, spec.patch_count, spec.patch_dim, 1.0);
            }

            // reports rule conditions out as well as in, and impressions range
            // from verbose to a bare sentence; cycle through the shapes so the
            // text branch sees short positive and negation-only texts too
            let absent: Vec<usize> = (0..spec.num_classes)
                .filter(|&k| labels[k] == 0)
                .collect();
            let neg_name = classes[absent[i % absent.len()]].name.clone();
            let report = match i % 5 {
                3 => {
                    let mut r = format!("findings suggesting {}", classes[c].name);
                    if spec.multi_label {
                        r.push_str(&format!(" and {}", classes[partner].name));
                    }
                    r.push_str(" .");
                    r
                }
                4 => format!("no evidence of {neg_name} ."),
                _ => {
                    let mut r = format!(
                        "findings suggesting {} with {} marks",
                        classes[c].name, classes[c].motif[2]
                    );
                    if spec.multi_label {
                        r.push_str(&format!(
                            " and {} with {} marks",
                            classes[partner].name, classes[partner].motif[2]
                        ));
                    }
                    r.push_str(" .");
                    let tail = 3 + i % 3;
                    for _ in 0..tail {
                        let f = &fillers[rng.gen_range(0..fillers.len())];
                        r.push(' ');
                        r.push_str(f);
                    }
                    r.push_str(&format!(" no evidence of {neg_name} ."));
                    r
                }
            };
            records.push((
                RecordJson {
                    sample_id,
                    features_path: String::new(), // filled below
                    report,
                    labels,
                    split: String::new(), // filled below
                },
                patches,
            ));
        }
    }

    // stratified split by generation class: ~70/10/20
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for c in 0..spec.num_classes {
        let base = c * spec.per_class;
        let mut order: Vec<usize> = (0..spec.per_class).map(|i| base + i).collect();
        order.shuffle(&mut rng);
        let n = spec.per_class;
        let n_train = ((0.7 * n as f64).round() as usize).clamp(1, n);
        let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
        for (rank, &idx) in order.iter().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            records[idx].0.split = split.as_str().to_string();
            *counts.entry(split).or_insert(0) += 1;
        }
    }
    for split in Split::ALL {
        counts.entry(split).or_insert(0);
    }

    let mut jsonl = String::new();
    for (rec, patches) in records.iter_mut() {
        rec.features_path = format!("features/{}.bin", rec.sample_id);
        write_tensors(
            &dir.join(&rec.features_path),
            &[("patches".to_string(), &*patches)],
            StorageDtype::F64,
        )?;
        jsonl.push_str(&serde_json::to_string(rec).expect("record serializes"));
        jsonl.push('\n');
    }
    std::fs::write(dir.join("records.jsonl"), jsonl)
        .map_err(|e| Error::io(dir.join("records.jsonl"), e))?;

    let manifest = DatasetManifest {
        name: spec.name.clone(),
        category_names: classes.iter().map(|c| c.name.clone()).collect(),
        image_mode: ImageMode::PatchFeatures,
        patch_count: spec.patch_count,
        patch_dim: spec.patch_dim,
        counts,
        source_note: "planted-structure synthetic data".to_string(),
    };
    let extra = vec![
        ("generator.seed".to_string(), spec.seed.to_string()),
        ("generator.sigma".to_string(), format!("{}", spec.sigma)),
        ("generator.per_class".to_string(), spec.per_class.to_string()),
        (
            "generator.multi_label".to_string(),
            spec.multi_label.to_string(),
        ),
    ];
    write_manifest(dir, &manifest, &extra)?;
    Dataset::load(dir)
}

/// Class-stratified subset of the train split. Deterministic per
/// seed; rounds per-class counts to the nearest integer.
pub fn split_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let train = dataset.split_indices(Split::Train);
    if fraction == 1.0 {
        return Ok(train);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train {
        let c = dataset.samples[i].primary_class().ok_or_else(|| {
            Error::data(format!(
                "sample '{}' has no positive label; cannot stratify",
                dataset.samples[i].sample_id
            ))
        })?;
        by_class.entry(c).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subset = Vec::new();
    for (c, mut members) in by_class {
        let want = (fraction * members.len() as f64).round() as usize;
        if want == 0 {
            return Err(Error::config(format!(
                "fraction {fraction} leaves class '{}' with zero samples",
                dataset.manifest.category_names[c]
            )));
        }
        members.shuffle(&mut rng);
        subset.extend(members.into_iter().take(want));
    }
    subset.sort_unstable();
    Ok(subset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            name: "t".into(),
            num_classes: 3,
            per_class: 10,
            sigma: 0.05,
            seed: 11,
            multi_label: false,
            patch_count: 4,
            patch_dim: 5,
            vocab_size: 256,
        }
    }

    /// Classify by nearest class template in Frobenius distance.
    fn nearest_template_accuracy(ds: &Dataset, templates: &[Matrix]) -> f64 {
        let mut hits = 0;
        for s in &ds.samples {
            let mut best = (f64::INFINITY, usize::MAX);
            for (c, t) in templates.iter().enumerate() {
                let d = s.patches.sub(t).frobenius_norm();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if s.labels[best.1] == 1 {
                hits += 1;
            }
        }
        hits as f64 / ds.samples.len() as f64
    }

    /// Recover the planted templates by averaging a noiseless sibling
    /// dataset (sigma = 0 reproduces the raw templates).
    fn templates_of(spec: &SyntheticSpec, dir: &Path) -> Vec<Matrix> {
        let mut clean = spec.clone();
        clean.sigma = 0.0;
        clean.multi_label = false;
        let ds = make_synthetic(&clean, dir).unwrap();
        (0..clean.num_classes)
            .map(|c| {
                let s = ds
                    .samples
                    .iter()
                    .find(|s| s.labels[c] == 1)
                    .expect("class has samples");
                s.patches.clone()
            })
            .collect()
    }

    #[test]
    fn noiseless_planting_is_perfectly_recoverable() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.sigma = 0.0;
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();
        let templates = templates_of(&spec, &tmp.path().join("clean"));
        assert_eq!(nearest_template_accuracy(&ds, &templates), 1.0);
    }

    #[test]
    fn low_noise_planting_stays_recoverable() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_classes: 4,
            per_class: 50,
            sigma: 0.1,
            ..tiny_spec()
        };
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();
        let templates = templates_of(&spec, &tmp.path().join("clean"));
        assert!(nearest_template_accuracy(&ds, &templates) >= 0.99);
    }

    #[test]
    fn same_seed_regenerates_byte_identical_files() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        make_synthetic(&spec, &tmp.path().join("a")).unwrap();
        make_synthetic(&spec, &tmp.path().join("b")).unwrap();
        for name in ["manifest.txt", "records.jsonl", "corpus.tsv"] {
            let a = std::fs::read(tmp.path().join("a").join(name)).unwrap();
            let b = std::fs::read(tmp.path().join("b").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical-seed runs");
        }
        // every feature blob too
        let a_dir = tmp.path().join("a/features");
        for entry in std::fs::read_dir(&a_dir).unwrap() {
            let p = entry.unwrap().path();
            let fname = p.file_name().unwrap();
            let a = std::fs::read(&p).unwrap();
            let b = std::fs::read(tmp.path().join("b/features").join(fname)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let mut other = tiny_spec();
        other.seed = 12;
        make_synthetic(&spec, &tmp.path().join("a")).unwrap();
        make_synthetic(&other, &tmp.path().join("b")).unwrap();
        let a = std::fs::read(tmp.path().join("a/records.jsonl")).unwrap();
        let b = std::fs::read(tmp.path().join("b/records.jsonl")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = make_synthetic(&tiny_spec(), &tmp.path().join("d")).unwrap();
        let back = Dataset::load(&tmp.path().join("d")).unwrap();
        assert_eq!(ds.samples.len(), back.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.report, b.report);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.split, b.split);
            assert_eq!(a.patches.as_slice(), b.patches.as_slice());
        }
        assert_eq!(
            ds.manifest.category_names,
            back.manifest.category_names
        );
    }

    #[test]
    fn motif_token_ids_are_collision_free() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();
        let tok = HashTokenizer::new(spec.vocab_size);
        let mut ids = HashSet::new();
        for w in GRAMMAR_WORDS {
            ids.insert(tok.word_id(w));
        }
        for name in &ds.manifest.category_names {
            for w in name.split(' ') {
                assert!(
                    ids.insert(tok.word_id(w)),
                    "motif word '{w}' collides with an existing token id"
                );
            }
        }
    }

    #[test]
    fn corpus_order_matches_dataset_order() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = make_synthetic(&tiny_spec(), &tmp.path().join("d")).unwrap();
        let corpus = Corpus::load(
            crate::knowledge::CorpusId::Custom,
            &tmp.path().join("d/corpus.tsv"),
        )
        .unwrap();
        ensure_category_match(&ds, &corpus).unwrap();

        // a reordered corpus must be rejected
        let mut rev = corpus.clone();
        rev.entries.reverse();
        assert!(ensure_category_match(&ds, &rev).is_err());
    }

    #[test]
    fn multi_label_samples_carry_two_positives() {
        let tmp = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.multi_label = true;
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();
        for s in &ds.samples {
            assert_eq!(
                s.labels.iter().filter(|&&l| l == 1).count(),
                2,
                "sample {} should have exactly two positives",
                s.sample_id
            );
        }
        // every positive-finding report names both classes; the rest are
        // negation-only impressions
        for s in &ds.samples {
            if s.report.contains("findings suggesting") {
                assert!(s.report.contains(" and "), "report {:?}", s.report);
            } else {
                assert!(s.report.starts_with("no evidence of"), "report {:?}", s.report);
            }
        }
        let negation_only = ds
            .samples
            .iter()
            .filter(|s| s.report.starts_with("no evidence of"))
            .count();
        assert!(negation_only > 0);
        assert!(negation_only < ds.samples.len());
    }

    #[test]
    fn splits_are_stratified() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            per_class: 20,
            ..tiny_spec()
        };
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();
        for c in 0..spec.num_classes {
            let train = ds
                .samples
                .iter()
                .filter(|s| s.split == Split::Train && s.labels[c] == 1)
                .count();
            assert_eq!(train, 14, "70% of 20 per class");
        }
    }

    #[test]
    fn fraction_subsets_are_stratified_and_seed_dependent() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            per_class: 20,
            ..tiny_spec()
        };
        let ds = make_synthetic(&spec, &tmp.path().join("d")).unwrap();

        let all = split_fraction(&ds, 1.0, 0).unwrap();
        assert_eq!(all, ds.split_indices(Split::Train));

        let half = split_fraction(&ds, 0.5, 1).unwrap();
        assert_eq!(half.len(), 21, "3 classes x 7 of 14 train samples");
        for c in 0..spec.num_classes {
            let k = half
                .iter()
                .filter(|&&i| ds.samples[i].labels[c] == 1)
                .count();
            assert_eq!(k, 7);
        }
        let again = split_fraction(&ds, 0.5, 1).unwrap();
        assert_eq!(half, again);
        let other = split_fraction(&ds, 0.5, 2).unwrap();
        assert_ne!(half, other);

        // 1/14 per class rounds to zero members
        let err = split_fraction(&ds, 0.01, 1).unwrap_err();
        assert!(err.to_string().contains("zero samples"));
    }

    #[test]
    fn loader_reports_corrupt_records_with_line_numbers() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        make_synthetic(&tiny_spec(), &dir).unwrap();

        let path = dir.join("records.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, &text).unwrap();
        let err = Dataset::load(&dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("records.jsonl:31"), "got: {msg}");
        assert!(msg.contains("corrupt record"));
    }

    #[test]
    fn loader_rejects_label_length_mismatch_by_name() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        make_synthetic(&tiny_spec(), &dir).unwrap();

        let path = dir.join("records.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        let patched = text.replacen("[1,0,0]", "[1,0]", 1);
        assert_ne!(text, patched);
        std::fs::write(&path, patched).unwrap();
        let err = Dataset::load(&dir).unwrap_err().to_string();
        assert!(err.contains("2 labels, expected 3"), "got: {err}");
        assert!(err.contains("c00_s000"), "got: {err}");
    }

    #[test]
    fn report_filter_hook_applies() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        make_synthetic(&tiny_spec(), &dir).unwrap();
        let upper = |s: &str| s.to_ascii_uppercase();
        let ds = Dataset::load_with(&dir, Some(&upper)).unwrap();
        assert!(ds.samples[0].report.chars().all(|c| !c.is_ascii_lowercase()));
    }

    #[test]
    fn env_root_resolves_relative_paths() {
        // no env in tests: relative nonexistent path passes through
        let p = resolve_dataset_dir(Path::new("does_not_exist_xyz"));
        assert_eq!(p, PathBuf::from("does_not_exist_xyz"));
    }
}
