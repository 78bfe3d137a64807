use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::emb1::{read_embedding_file, write_embedding_file};
use super::FeatureSet;
use crate::error::{Error, Result};
use crate::numerics::{normalized, Mat};
use crate::prompt::{DescriptionFile, DescriptionManifest};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub class: String,
    /// Embedding file, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub shots: usize,
    pub seed: u64,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("manifest lists no classes".into()));
        }
        let classes: HashSet<&str> = self.classes.iter().map(String::as_str).collect();
        if classes.len() != self.classes.len() {
            return Err(Error::InvalidArgument("manifest lists a class twice".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !classes.contains(s.class.as_str()) {
                return Err(Error::UnknownClass(s.class.clone()));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut m: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&SampleEntry> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn sample(&self, id: &str) -> Result<&SampleEntry> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no sample {id:?} in manifest")))
    }

    /// `shots` samples per class from `split`, chosen by a seeded shuffle.
    /// Output is grouped by class in manifest order.
    pub fn few_shot(&self, split: Split, shots: usize, seed: u64) -> Result<Vec<&SampleEntry>> {
        let mut out = Vec::with_capacity(shots * self.classes.len());
        for class in &self.classes {
            let mut pool: Vec<&SampleEntry> =
                self.samples.iter().filter(|s| s.split == split && &s.class == class).collect();
            if pool.len() < shots {
                return Err(Error::InvalidArgument(format!(
                    "class {class:?} has {} {} samples, fewer than {shots} shots",
                    pool.len(),
                    split.name()
                )));
            }
            pool.shuffle(&mut rng::stream(seed, &format!("shots/{class}")));
            out.extend(pool.into_iter().take(shots));
        }
        Ok(out)
    }

    pub fn resolve(&self, entry: &SampleEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_sample(&self, entry: &SampleEntry) -> Result<FeatureSet> {
        let features = read_embedding_file(self.resolve(entry))?;
        FeatureSet::new(features, Some(entry.class.clone()), entry.id.clone())
    }
}

/// Names given to synthetic classes, in order; later classes are numbered.
pub const SYNTH_CLASS_NAMES: [&str; 12] = [
    "tabby cat",
    "golden retriever",
    "barn owl",
    "red fox",
    "sea turtle",
    "honey bee",
    "fire truck",
    "sunflower",
    "lighthouse",
    "violin",
    "pine tree",
    "teapot",
];

const SCENES: [&str; 4] = [
    "resting on a sunlit wooden floor near a window",
    "seen up close against a soft green background",
    "standing in an open field under a pale sky",
    "photographed at dusk with warm orange light",
];

const TRAITS: [&str; 4] = [
    "with clear outlines and fine texture",
    "showing distinctive colors and markings",
    "with a recognizable shape from the side",
    "surrounded by small details that hint at scale",
];

fn synth_class_name(i: usize) -> String {
    SYNTH_CLASS_NAMES.get(i).map_or_else(|| format!("object {i}"), |s| s.to_string())
}

fn synth_descriptions(name: &str) -> Vec<String> {
    (0..4).map(|k| format!("A {name} {} {}", SCENES[k], TRAITS[(k + 1) % 4])).collect()
}

/// Parameters of [`synth_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Samples per class across all splits; every fourth goes to val and test
    /// each, the rest to train.
    pub per_class: usize,
    /// Local embeddings per sample.
    pub tokens: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub shots: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_classes: 3, per_class: 40, tokens: 8, dim: 32, separation: 10.0, seed: 0, shots: 4 }
    }
}

fn split_of(index: usize) -> Split {
    match index % 4 {
        2 => Split::Val,
        3 => Split::Test,
        _ => Split::Train,
    }
}

/// Lowercase file-name form of a class name: non-alphanumerics become `_`.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

fn anchors(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut r = rng::stream(spec.seed, "anchors");
    (0..spec.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut r)).collect();
            if let Some(u) = normalized(&v) {
                break u;
            }
        })
        .collect()
}

fn synth_sample(anchor: &[f64], spec: &SynthSpec, id: &str) -> Mat {
    let mut r = rng::stream(spec.seed, &format!("sample/{id}"));
    let mut m = Mat::from_fn(spec.tokens, spec.dim, |_, j| {
        let noise: f64 = StandardNormal.sample(&mut r);
        spec.separation * anchor[j] + noise
    });
    // A zero row has probability zero; renormalization below keeps rows unit.
    crate::numerics::normalize_rows(&mut m).expect("gaussian rows are nonzero");
    m
}

/// Writes a synthetic dataset under `out`: `samples/*.emb`, `manifest.json`,
/// `descriptions/*.json` and `descriptions.json`.
pub fn synth_dataset(spec: &SynthSpec, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.tokens == 0 || spec.dim == 0 {
        return Err(Error::InvalidArgument("synthetic dataset counts must be at least 1".into()));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::InvalidArgument("separation must be nonnegative".into()));
    }
    let out = out.as_ref();
    fs::create_dir_all(out.join("samples"))?;
    fs::create_dir_all(out.join("descriptions"))?;

    let anchors = anchors(spec);
    let classes: Vec<String> = (0..spec.num_classes).map(synth_class_name).collect();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut description_files = Vec::with_capacity(classes.len());
    for (class, anchor) in classes.iter().zip(&anchors) {
        for j in 0..spec.per_class {
            let id = format!("{}-{j:04}", slug(class));
            let path = format!("samples/{id}.emb");
            write_embedding_file(out.join(&path), &synth_sample(anchor, spec, &id))?;
            samples.push(SampleEntry { id, class: class.clone(), path, split: split_of(j) });
        }
        let file = DescriptionFile { class_name: class.clone(), descriptions: synth_descriptions(class) };
        let rel = format!("descriptions/{}.json", slug(class));
        fs::write(out.join(&rel), file.to_json())?;
        description_files.push(rel);
    }
    fs::write(
        out.join("descriptions.json"),
        serde_json::to_string_pretty(&DescriptionManifest { description_files })? + "\n",
    )?;

    let manifest = DatasetManifest { classes, samples, shots: spec.shots, seed: spec.seed, root: out.to_path_buf() };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}
