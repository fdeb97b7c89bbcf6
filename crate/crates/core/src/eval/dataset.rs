//! Benchmark datasets: a JSON manifest pointing at a JSON-lines record file.
//!
//! ```json
//! { "name": "winoground-slice", "kind": "quadruplet", "records": "records.jsonl",
//!   "sample": { "count": 100, "seed": 7 } }
//! ```
//!
//! Quadruplet records carry `id`, `image_0`, `image_1`, `caption_0`,
//! `caption_1` and optional `tags`; pair records carry `id`, `image`,
//! `caption_pos`, `caption_neg` and `category`. Image references resolve
//! relative to the manifest's directory. Malformed records are skipped with
//! a warning.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Quadruplet,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupletSample {
    pub id: String,
    pub image_0: ImageRef,
    pub image_1: ImageRef,
    pub caption_0: String,
    pub caption_1: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl QuadrupletSample {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Dataset("sample id must be non-empty".into()));
        }
        if self.caption_0.trim().is_empty() || self.caption_1.trim().is_empty() {
            return Err(Error::Dataset(format!("sample `{}` has an empty caption", self.id)));
        }
        if self.caption_0 == self.caption_1 {
            return Err(Error::Dataset(format!("sample `{}` repeats its caption", self.id)));
        }
        Ok(())
    }

    pub fn images(&self) -> [&ImageRef; 2] {
        [&self.image_0, &self.image_1]
    }

    pub fn captions(&self) -> [&str; 2] {
        [&self.caption_0, &self.caption_1]
    }

    /// The same sample with (image_0, caption_0) and (image_1, caption_1) swapped.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            image_0: self.image_1.clone(),
            image_1: self.image_0.clone(),
            caption_0: self.caption_1.clone(),
            caption_1: self.caption_0.clone(),
            tags: self.tags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub id: String,
    pub image: ImageRef,
    pub caption_pos: String,
    pub caption_neg: String,
    #[serde(default)]
    pub category: String,
}

impl PairSample {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Dataset("sample id must be non-empty".into()));
        }
        if self.caption_pos.trim().is_empty() || self.caption_neg.trim().is_empty() {
            return Err(Error::Dataset(format!("sample `{}` has an empty caption", self.id)));
        }
        if self.caption_pos == self.caption_neg {
            return Err(Error::Dataset(format!("sample `{}` repeats its caption", self.id)));
        }
        Ok(())
    }

    pub fn tags(&self) -> Vec<String> {
        if self.category.is_empty() {
            Vec::new()
        } else {
            vec![self.category.clone()]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Quadruplet(Vec<QuadrupletSample>),
    Pair(Vec<PairSample>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Quadruplet(v) => v.len(),
            Samples::Pair(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DatasetKind {
        match self {
            Samples::Quadruplet(_) => DatasetKind::Quadruplet,
            Samples::Pair(_) => DatasetKind::Pair,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsample {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub kind: DatasetKind,
    pub records: PathBuf,
    #[serde(default)]
    pub sample: Option<Subsample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Samples,
    /// One line per skipped record.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn quadruplets(name: impl Into<String>, samples: Vec<QuadrupletSample>) -> Self {
        Self {
            name: name.into(),
            samples: Samples::Quadruplet(samples),
            warnings: Vec::new(),
        }
    }

    pub fn pairs(name: impl Into<String>, samples: Vec<PairSample>) -> Self {
        Self {
            name: name.into(),
            samples: Samples::Pair(samples),
            warnings: Vec::new(),
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.samples.kind()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads a manifest. `seed_override` replaces the manifest's sampling
    /// seed when both are present.
    pub fn load(manifest_path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| {
            Error::Dataset(format!("cannot read manifest {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("manifest {}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let records_path = base.join(&manifest.records);
        let records = std::fs::read_to_string(&records_path).map_err(|e| {
            Error::Dataset(format!("cannot read records {}: {e}", records_path.display()))
        })?;
        let mut dataset = Self::parse_records(&manifest.name, manifest.kind, &records, base)?;
        if let Some(mut sub) = manifest.sample {
            if let Some(seed) = seed_override {
                sub.seed = seed;
            }
            dataset = dataset.subsample(sub.count, sub.seed);
        }
        Ok(dataset)
    }

    /// Parses JSON lines; malformed or duplicate records become warnings.
    pub fn parse_records(name: &str, kind: DatasetKind, text: &str, base: &Path) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut seen = HashSet::new();
        let mut quads = Vec::new();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = match kind {
                DatasetKind::Quadruplet => parse_quadruplet(line, base).map(|s| {
                    let id = s.id.clone();
                    quads.push(s);
                    id
                }),
                DatasetKind::Pair => parse_pair(line, base).map(|s| {
                    let id = s.id.clone();
                    pairs.push(s);
                    id
                }),
            };
            match parsed {
                Ok(id) if !seen.insert(id.clone()) => {
                    match kind {
                        DatasetKind::Quadruplet => drop(quads.pop()),
                        DatasetKind::Pair => drop(pairs.pop()),
                    }
                    warnings.push(format!("line {}: duplicate id `{id}`", lineno + 1));
                }
                Ok(_) => {}
                Err(e) => warnings.push(format!("line {}: {e}", lineno + 1)),
            }
        }
        for w in &warnings {
            log::warn!("{name}: skipping record, {w}");
        }
        let samples = match kind {
            DatasetKind::Quadruplet => Samples::Quadruplet(quads),
            DatasetKind::Pair => Samples::Pair(pairs),
        };
        if samples.is_empty() {
            return Err(Error::Dataset(format!("dataset `{name}` has no valid records")));
        }
        Ok(Self {
            name: name.to_owned(),
            samples,
            warnings,
        })
    }

    /// Keeps `count` samples chosen by a seeded generator, in file order.
    pub fn subsample(self, count: usize, seed: u64) -> Self {
        let n = self.len();
        if count >= n {
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample_indices(&mut rng, n, count).into_vec();
        picked.sort_unstable();
        let samples = match self.samples {
            Samples::Quadruplet(v) => Samples::Quadruplet(picked.iter().map(|&i| v[i].clone()).collect()),
            Samples::Pair(v) => Samples::Pair(picked.iter().map(|&i| v[i].clone()).collect()),
        };
        Self { samples, ..self }
    }
}

#[derive(Deserialize)]
struct RawQuadruplet {
    id: String,
    image_0: String,
    image_1: String,
    caption_0: String,
    caption_1: String,
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Deserialize)]
struct RawPair {
    id: String,
    image: String,
    caption_pos: String,
    caption_neg: String,
    #[serde(default)]
    category: String,
}

fn parse_quadruplet(line: &str, base: &Path) -> Result<QuadrupletSample> {
    let raw: RawQuadruplet = serde_json::from_str(line).map_err(|e| Error::Dataset(e.to_string()))?;
    let s = QuadrupletSample {
        image_0: ImageRef::resolve(&raw.image_0, Some(base))?,
        image_1: ImageRef::resolve(&raw.image_1, Some(base))?,
        id: raw.id,
        caption_0: raw.caption_0,
        caption_1: raw.caption_1,
        tags: raw.tags,
    };
    s.validate()?;
    Ok(s)
}

fn parse_pair(line: &str, base: &Path) -> Result<PairSample> {
    let raw: RawPair = serde_json::from_str(line).map_err(|e| Error::Dataset(e.to_string()))?;
    let s = PairSample {
        image: ImageRef::resolve(&raw.image, Some(base))?,
        id: raw.id,
        caption_pos: raw.caption_pos,
        caption_neg: raw.caption_neg,
        category: raw.category,
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUADS: &str = r#"{"id":"a","image_0":"i0.png","image_1":"i1.png","caption_0":"x eats y","caption_1":"y eats x","tags":["Relation"]}
{"id":"b","image_0":"i2.png","image_1":"i3.png","caption_0":"p","caption_1":"q"}
this is not json
{"id":"c","image_0":"i4.png","image_1":"i5.png","caption_0":"same","caption_1":"same"}
{"id":"a","image_0":"i0.png","image_1":"i1.png","caption_0":"m","caption_1":"n"}
"#;

    #[test]
    fn corrupt_and_duplicate_lines_are_skipped() {
        let d = Dataset::parse_records("t", DatasetKind::Quadruplet, QUADS, Path::new("/data")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.warnings.len(), 3);
        let Samples::Quadruplet(v) = &d.samples else { panic!() };
        assert_eq!(v[0].tags, ["Relation"]);
        assert_eq!(
            v[0].image_0.location(),
            &crate::image::ImageLocation::File("/data/i0.png".into())
        );
    }

    #[test]
    fn pairs_parse() {
        let text = r#"{"id":"p1","image":"https://x.test/a.png","caption_pos":"a red car","caption_neg":"a car red","category":"swap-att"}"#;
        let d = Dataset::parse_records("s", DatasetKind::Pair, text, Path::new(".")).unwrap();
        assert_eq!(d.kind(), DatasetKind::Pair);
        let Samples::Pair(v) = &d.samples else { panic!() };
        assert_eq!(v[0].tags(), ["swap-att"]);
    }

    #[test]
    fn duplicate_pair_ids_are_skipped() {
        let text = "{\"id\":\"p\",\"image\":\"a\",\"caption_pos\":\"x\",\"caption_neg\":\"y\"}\n{\"id\":\"p\",\"image\":\"b\",\"caption_pos\":\"x\",\"caption_neg\":\"z\"}";
        let d = Dataset::parse_records("s", DatasetKind::Pair, text, Path::new(".")).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            Dataset::parse_records("e", DatasetKind::Pair, "\n\n", Path::new(".")),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let lines: String = (0..50)
            .map(|i| format!("{{\"id\":\"s{i:02}\",\"image\":\"i{i}\",\"caption_pos\":\"a{i}\",\"caption_neg\":\"b{i}\"}}\n"))
            .collect();
        let d = Dataset::parse_records("s", DatasetKind::Pair, &lines, Path::new(".")).unwrap();
        let a = d.clone().subsample(10, 3);
        let b = d.clone().subsample(10, 3);
        let c = d.clone().subsample(10, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let Samples::Pair(v) = &a.samples else { panic!() };
        assert!(v.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(d.clone().subsample(100, 1), d);
    }

    #[test]
    fn manifest_loads_relative_records() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.jsonl"), QUADS).unwrap();
        std::fs::write(
            dir.path().join("m.json"),
            r#"{"name":"mini","kind":"quadruplet","records":"r.jsonl","sample":{"count":1,"seed":0}}"#,
        )
        .unwrap();
        let d = Dataset::load(&dir.path().join("m.json"), None).unwrap();
        assert_eq!(d.name, "mini");
        assert_eq!(d.len(), 1);
        assert!(matches!(
            Dataset::load(&dir.path().join("missing.json"), None),
            Err(Error::Dataset(_))
        ));
    }
}
