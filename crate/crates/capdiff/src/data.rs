//! Dataset ingestion, feature files, and the synthetic scene generator.
//!
//! Captions arrive as JSONL, one record per conditioned image:
//! `{"id": ..., "feature_index": ..., "captions": [...]}` (exactly those
//! keys). Feature vectors live in a flat binary file:
//!
//! ```text
//! "DCFV" | count: u32 | dim: u32 | data: f32 x (count * dim)   (little-endian)
//! ```
//!
//! The synthetic generator emits scenes of two colored shapes in a spatial
//! relation. Each scene's condition vector concatenates one-hot blocks for
//! (color, shape, relation, color2, shape2) — 32 dims — plus Gaussian
//! jitter, and carries three templated captions. An answer-key JSON maps
//! scene ids back to their ground-truth attributes.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "hexagon", "ring"];
pub const RELATIONS: [&str; 4] = ["above", "below", "left of", "right of"];
pub const COND_DIM: usize = COLORS.len() + SHAPES.len() + RELATIONS.len() + COLORS.len() + SHAPES.len();
pub const JITTER_SIGMA: f64 = 0.05;

const FEATURE_MAGIC: &[u8; 4] = b"DCFV";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRecord {
    pub id: String,
    pub feature_index: usize,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DataRecord>,
}

impl Dataset {
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DataRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("bad dataset record on line {}: {e}", lineno + 1))
            })?;
            if rec.captions.is_empty() {
                return Err(Error::Data(format!(
                    "record '{}' has no captions",
                    rec.id
                )));
            }
            records.push(rec);
        }
        let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        ids.sort();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Data(format!("duplicate record id '{}'", w[0])));
            }
        }
        Ok(Dataset { records })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Every `feature_index` must address a row of `features`.
    pub fn validate_against(&self, features: &FeatureFile) -> Result<()> {
        for rec in &self.records {
            if rec.feature_index >= features.count() {
                return Err(Error::Data(format!(
                    "record '{}' wants feature row {} but the file has {}",
                    rec.id,
                    rec.feature_index,
                    features.count()
                )));
            }
        }
        Ok(())
    }
}

/// Load a caption file and its feature file together, checking that every
/// record's `feature_index` lands inside the feature matrix.
pub fn load_dataset(jsonl: &Path, features: &Path) -> Result<(Dataset, FeatureFile)> {
    let dataset = Dataset::load_jsonl(jsonl)?;
    let feats = FeatureFile::read(features)?;
    dataset.validate_against(&feats)?;
    Ok((dataset, feats))
}

/// Flat matrix of conditioning vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureFile {
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Data(format!(
                "feature data of {} floats does not tile into rows of {}",
                data.len(),
                dim
            )));
        }
        Ok(FeatureFile { dim, data })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> Result<&[f32]> {
        if i >= self.count() {
            return Err(Error::Data(format!(
                "feature row {} out of {}",
                i,
                self.count()
            )));
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Data("bad feature-file magic".into()));
        }
        let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let dim = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let want = 12 + 4 * count * dim;
        if bytes.len() != want {
            return Err(Error::Data(format!(
                "feature file is {} bytes, want {} for {count} x {dim}",
                bytes.len(),
                want
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureFile::from_rows(dim.max(1), data).and_then(|f| {
            if dim == 0 && count > 0 {
                Err(Error::Data("feature file declares zero dim".into()))
            } else {
                Ok(f)
            }
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Ground-truth attributes of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneKey {
    pub id: String,
    pub color: String,
    pub shape: String,
    pub relation: String,
    pub color2: String,
    pub shape2: String,
}

/// Answer key for a generated synthetic set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GrammarKey {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub relations: Vec<String>,
    pub jitter_sigma: f64,
    pub scenes: Vec<SceneKey>,
}

impl GrammarKey {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| Error::Data(format!("bad grammar key: {e}")))
    }
}

/// Deterministically generate `num_scenes` *distinct* scenes with jittered
/// one-hot condition vectors and three templated captions each.
pub fn gen_synthetic(num_scenes: usize, seed: u64) -> Result<(Dataset, FeatureFile, GrammarKey)> {
    let total = COLORS.len() * SHAPES.len() * RELATIONS.len() * COLORS.len() * SHAPES.len();
    if num_scenes == 0 {
        return Err(Error::Config("num_scenes must be positive".into()));
    }
    if num_scenes > total {
        return Err(Error::Config(format!(
            "num_scenes {num_scenes} exceeds the {total} distinct scenes"
        )));
    }

    // Enumerate every combination, then shuffle; distinctness is structural.
    let mut combos: Vec<(usize, usize, usize, usize, usize)> = Vec::with_capacity(total);
    for c1 in 0..COLORS.len() {
        for s1 in 0..SHAPES.len() {
            for r in 0..RELATIONS.len() {
                for c2 in 0..COLORS.len() {
                    for s2 in 0..SHAPES.len() {
                        combos.push((c1, s1, r, c2, s2));
                    }
                }
            }
        }
    }
    let mut rng = rng::stream(seed, rng::STREAM_SYNTH);
    // Fisher-Yates with explicit draws, so the permutation only depends on
    // the seed.
    for i in (1..combos.len()).rev() {
        let j = (rand::Rng::random_range(&mut rng, 0..(i + 1) as u64)) as usize;
        combos.swap(i, j);
    }
    combos.truncate(num_scenes);

    let mut records = Vec::with_capacity(num_scenes);
    let mut features = Vec::with_capacity(num_scenes * COND_DIM);
    let mut scenes = Vec::with_capacity(num_scenes);
    for (i, &(c1, s1, r, c2, s2)) in combos.iter().enumerate() {
        let id = format!("scene-{i:04}");
        let (color, shape) = (COLORS[c1], SHAPES[s1]);
        let (color2, shape2) = (COLORS[c2], SHAPES[s2]);
        let relation = RELATIONS[r];
        let captions = vec![
            format!("a {color} {shape} {relation} a {color2} {shape2}"),
            format!("there is a {color} {shape} {relation} a {color2} {shape2}"),
            format!("the {color} {shape} is {relation} a {color2} {shape2}"),
        ];
        let mut vec = vec![0.0f32; COND_DIM];
        let offsets = [0, COLORS.len(), COLORS.len() + SHAPES.len(),
            COLORS.len() + SHAPES.len() + RELATIONS.len(),
            COLORS.len() + SHAPES.len() + RELATIONS.len() + COLORS.len()];
        for (block, idx) in [(0, c1), (1, s1), (2, r), (3, c2), (4, s2)] {
            vec[offsets[block] + idx] = 1.0;
        }
        for v in vec.iter_mut() {
            let noise: f32 = StandardNormal.sample(&mut rng);
            *v += noise * JITTER_SIGMA as f32;
        }
        features.extend_from_slice(&vec);
        records.push(DataRecord {
            id: id.clone(),
            feature_index: i,
            captions,
        });
        scenes.push(SceneKey {
            id,
            color: color.to_string(),
            shape: shape.to_string(),
            relation: relation.to_string(),
            color2: color2.to_string(),
            shape2: shape2.to_string(),
        });
    }

    let grammar = GrammarKey {
        colors: COLORS.iter().map(|s| s.to_string()).collect(),
        shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
        relations: RELATIONS.iter().map(|s| s.to_string()).collect(),
        jitter_sigma: JITTER_SIGMA,
        scenes,
    };
    Ok((
        Dataset { records },
        FeatureFile::from_rows(COND_DIM, features)?,
        grammar,
    ))
}

/// Recover scene attribute indices from a condition vector by per-block
/// argmax: `(color, shape, relation, color2, shape2)`.
pub fn decode_condition(v: &[f32]) -> Result<(usize, usize, usize, usize, usize)> {
    if v.len() != COND_DIM {
        return Err(Error::Shape(format!(
            "condition has {} dims, want {COND_DIM}",
            v.len()
        )));
    }
    let mut offset = 0;
    let mut pick = |len: usize| {
        let block = &v[offset..offset + len];
        offset += len;
        block
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0
    };
    let c1 = pick(COLORS.len());
    let s1 = pick(SHAPES.len());
    let r = pick(RELATIONS.len());
    let c2 = pick(COLORS.len());
    let s2 = pick(SHAPES.len());
    Ok((c1, s1, r, c2, s2))
}
