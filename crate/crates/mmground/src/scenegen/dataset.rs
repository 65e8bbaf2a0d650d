//! Dataset container and on-disk format.
//!
//! A dataset directory holds:
//! - `manifest.json` — spec, counts, format version, content checksum
//! - `scenes.jsonl` — one scene metadata record per line (objects re-rasterize
//!   deterministically from shape/center/size, so masks are not stored)
//! - `scenes/<id>.bin` — the image tensor as a raw MMGT blob (f32, `[3,S,S]`)
//! - `queries.jsonl` — one `QueryInstance` per line, UTF-8

use super::{generate_scene, make_queries, shapes, QueryInstance, Scene, SceneObject, SceneSpec};
use crate::blob;
use crate::error::{Error, Result};
use crate::grounder::BBox;
use ndarray::Ix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub scenes: Vec<Scene>,
    pub queries: Vec<QueryInstance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub n_scenes: usize,
    pub n_queries: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectRecord {
    shape: String,
    color: String,
    center: (usize, usize),
    size: usize,
    bbox: BBox,
}

/// Deterministic train/holdout split by shuffled scene index.
#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Dataset {
    /// Generates `n_scenes` scenes plus their queries from `spec.seed`.
    pub fn generate(spec: &SceneSpec, n_scenes: usize, neg_ratio: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut scenes = Vec::with_capacity(n_scenes);
        let mut queries = Vec::new();
        for _ in 0..n_scenes {
            let scene = generate_scene(spec, &mut rng)?;
            queries.extend(make_queries(&scene, &spec.shape_vocab, neg_ratio, &mut rng)?);
            scenes.push(scene);
        }
        Ok(Self { spec: spec.clone(), scenes, queries })
    }

    pub fn scene_by_id(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn scene_index(&self, id: &str) -> Option<usize> {
        self.scenes.iter().position(|s| s.id == id)
    }

    /// Splits scene indices into train/holdout with a seeded shuffle.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> SplitIndices {
        let mut order: Vec<usize> = (0..self.scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_holdout = ((self.scenes.len() as f64) * holdout_fraction).round() as usize;
        SplitIndices {
            holdout: order[..n_holdout].to_vec(),
            train: order[n_holdout..].to_vec(),
        }
    }

    /// Queries whose scene index is in `indices`.
    pub fn queries_for(&self, indices: &[usize]) -> Vec<usize> {
        let ids: std::collections::BTreeSet<&str> =
            indices.iter().map(|&i| self.scenes[i].id.as_str()).collect();
        (0..self.queries.len())
            .filter(|&q| ids.contains(self.queries[q].scene_id.as_str()))
            .collect()
    }
}

/// FNV-1a, enough to detect corruption and verify reproducibility.
#[derive(Clone)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf29ce484222325)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> String {
        format!("{:016x}", self.0)
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("scenes"))?;
    let mut checksum = Fnv64::default();

    let mut scenes_jsonl = BufWriter::new(std::fs::File::create(dir.join("scenes.jsonl"))?);
    for scene in &dataset.scenes {
        let record = SceneRecord {
            id: scene.id.clone(),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: o.shape.clone(),
                    color: o.color.clone(),
                    center: o.center,
                    size: o.size,
                    bbox: o.bbox,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record)?;
        checksum.update(line.as_bytes());
        writeln!(scenes_jsonl, "{line}")?;

        let mut blob_bytes = Vec::new();
        blob::write_tensor(&mut blob_bytes, &scene.image.clone().into_dyn())?;
        checksum.update(&blob_bytes);
        std::fs::write(dir.join("scenes").join(format!("{}.bin", scene.id)), blob_bytes)?;
    }
    scenes_jsonl.flush()?;

    let mut queries_jsonl = BufWriter::new(std::fs::File::create(dir.join("queries.jsonl"))?);
    for q in &dataset.queries {
        let line = serde_json::to_string(q)?;
        checksum.update(line.as_bytes());
        writeln!(queries_jsonl, "{line}")?;
    }
    queries_jsonl.flush()?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        n_scenes: dataset.scenes.len(),
        n_queries: dataset.queries.len(),
        checksum: checksum.finish(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| {
            Error::DatasetFormat { index: 0, message: format!("manifest.json: {e}") }
        })?)
        .map_err(|e| Error::DatasetFormat { index: 0, message: format!("manifest.json: {e}") })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::DatasetFormat {
            index: 0,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let mut checksum = Fnv64::default();
    let image_size = manifest.spec.image_size;

    let scenes_file = std::fs::File::open(dir.join("scenes.jsonl"))?;
    let mut scenes = Vec::with_capacity(manifest.n_scenes);
    for (index, line) in std::io::BufReader::new(scenes_file).lines().enumerate() {
        let line = line?;
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| {
            Error::DatasetFormat { index, message: format!("scenes.jsonl: {e}") }
        })?;
        checksum.update(line.as_bytes());

        let blob_path = dir.join("scenes").join(format!("{}.bin", record.id));
        let blob_bytes = std::fs::read(&blob_path).map_err(|e| Error::DatasetFormat {
            index,
            message: format!("{}: {e}", blob_path.display()),
        })?;
        checksum.update(&blob_bytes);
        let image = blob::read_tensor::<f32, _>(std::io::Cursor::new(blob_bytes))
            .map_err(|e| Error::DatasetFormat { index, message: format!("{}: {e}", record.id) })?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::DatasetFormat { index, message: format!("image rank: {e}") })?;

        let objects = record
            .objects
            .into_iter()
            .map(|o| {
                let mask = shapes::rasterize_mask(&o.shape, o.center, o.size, image_size);
                SceneObject {
                    shape: o.shape,
                    color: o.color,
                    center: o.center,
                    size: o.size,
                    bbox: o.bbox,
                    mask,
                }
            })
            .collect();
        scenes.push(Scene { id: record.id, image, objects });
    }
    if scenes.len() != manifest.n_scenes {
        return Err(Error::DatasetFormat {
            index: scenes.len(),
            message: format!("expected {} scenes, found {}", manifest.n_scenes, scenes.len()),
        });
    }

    let queries_file = std::fs::File::open(dir.join("queries.jsonl"))?;
    let mut queries = Vec::with_capacity(manifest.n_queries);
    for (index, line) in std::io::BufReader::new(queries_file).lines().enumerate() {
        let line = line?;
        let q: QueryInstance = serde_json::from_str(&line).map_err(|e| {
            Error::DatasetFormat { index, message: format!("queries.jsonl: {e}") }
        })?;
        checksum.update(line.as_bytes());
        queries.push(q);
    }
    if queries.len() != manifest.n_queries {
        return Err(Error::DatasetFormat {
            index: queries.len(),
            message: format!("expected {} queries, found {}", manifest.n_queries, queries.len()),
        });
    }

    let got = checksum.finish();
    if got != manifest.checksum {
        return Err(Error::DatasetFormat {
            index: 0,
            message: format!("checksum mismatch: manifest {} vs content {got}", manifest.checksum),
        });
    }

    Ok(Dataset { spec: manifest.spec, scenes, queries })
}
