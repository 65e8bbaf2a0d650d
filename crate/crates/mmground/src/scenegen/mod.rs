//! Procedural scene generation with exact ground truth.
//!
//! Scenes are solid-color shapes on a light background, rasterized without
//! anti-aliasing so masks are exactly binary and boxes are exact pixel
//! boundaries. Co-occurrence bias rules inject the spurious correlations the
//! diagnostic probes study.

mod dataset;
mod queries;
mod pope;
mod shapes;

pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, Fnv64, SplitIndices};
pub use pope::{make_pope_probes, DatasetStats, PopeMode};
pub use queries::{make_queries, QueryClass, QueryInstance};
pub use shapes::rasterize_mask;

use crate::error::{Error, Result};
use crate::grounder::BBox;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// One co-occurrence rule: whenever `when_present` is in a scene, `add` is
/// also placed with the given probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceBias {
    pub when_present: String,
    pub add: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub object_count_range: (usize, usize),
    pub shape_vocab: Vec<String>,
    pub color_vocab: Vec<String>,
    pub cooccurrence_bias: Vec<CooccurrenceBias>,
    pub min_object_separation: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object_count_range: (1, 3),
            shape_vocab: ["circle", "square", "triangle", "diamond", "cross"]
                .map(String::from)
                .to_vec(),
            color_vocab: ["red", "green", "blue", "yellow", "purple"]
                .map(String::from)
                .to_vec(),
            cooccurrence_bias: vec![CooccurrenceBias {
                when_present: "circle".into(),
                add: "square".into(),
                probability: 0.85,
            }],
            min_object_separation: 2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        let (lo, hi) = self.object_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!(
                "object_count_range ({lo},{hi}) must satisfy 1 <= min <= max"
            )));
        }
        for (name, vocab) in [("shape_vocab", &self.shape_vocab), ("color_vocab", &self.color_vocab)]
        {
            if vocab.is_empty() {
                return Err(Error::Config(format!("{name} must be non-empty")));
            }
            let unique: BTreeSet<&String> = vocab.iter().collect();
            if unique.len() != vocab.len() {
                return Err(Error::Config(format!("{name} contains duplicates")));
            }
        }
        for s in &self.shape_vocab {
            if !shapes::is_known_shape(s) {
                return Err(Error::Config(format!("unknown shape {s:?}")));
            }
        }
        for c in &self.color_vocab {
            if shapes::color_rgb(c).is_none() {
                return Err(Error::Config(format!("unknown color {c:?}")));
            }
        }
        let targets: BTreeSet<&String> =
            self.cooccurrence_bias.iter().map(|b| &b.add).collect();
        for b in &self.cooccurrence_bias {
            if !(0.0..=1.0).contains(&b.probability) {
                return Err(Error::Config(format!(
                    "cooccurrence_bias probability {} for ({}, {}) outside [0,1]",
                    b.probability, b.when_present, b.add
                )));
            }
            for s in [&b.when_present, &b.add] {
                if !self.shape_vocab.contains(s) {
                    return Err(Error::Config(format!(
                        "bias references shape {s:?} not in shape_vocab"
                    )));
                }
            }
            if targets.contains(&b.when_present) {
                return Err(Error::Config(format!(
                    "shape {:?} is both a bias source and a bias target",
                    b.when_present
                )));
            }
        }
        Ok(())
    }

    fn size_range(&self) -> (usize, usize) {
        let lo = (self.image_size / 13).max(4);
        let hi = (self.image_size / 6).max(lo + 1);
        (lo, hi)
    }
}

/// One rendered object with its exact mask and tight normalized box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub center: (usize, usize),
    /// Half-extent in pixels.
    pub size: usize,
    pub bbox: BBox,
    #[serde(skip)]
    pub mask: Array2<u8>,
}

impl SceneObject {
    pub fn pixel_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    /// Channels-first image, values in [0,1].
    pub image: Array3<f32>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn image_size(&self) -> usize {
        self.image.dim().1
    }

    pub fn shape_set(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.shape.as_str()).collect()
    }

    pub fn contains_shape(&self, shape: &str) -> bool {
        self.objects.iter().any(|o| o.shape == shape)
    }

    /// Objects whose shape occurs exactly once; unambiguous referents.
    pub fn unique_shape_objects(&self) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| {
                self.objects
                    .iter()
                    .filter(|o| o.shape == self.objects[i].shape)
                    .count()
                    == 1
            })
            .collect()
    }
}

const BACKGROUND: [f32; 3] = [0.92, 0.92, 0.92];
const PLACEMENT_RETRIES: usize = 40;

/// Generates one scene. Deterministic given `(spec, rng state)`; placement
/// failures reduce the object count rather than retrying forever.
pub fn generate_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    spec.validate()?;
    let id = format!("scene-{:016x}", rng.random::<u64>());
    let shapes_wanted = select_shapes(spec, rng);

    let s = spec.image_size;
    let mut image = Array3::<f32>::zeros((3, s, s));
    for c in 0..3 {
        image.index_axis_mut(ndarray::Axis(0), c).fill(BACKGROUND[c]);
    }

    let (size_lo, size_hi) = spec.size_range();
    let mut objects: Vec<SceneObject> = Vec::new();
    for shape in shapes_wanted {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.random_range(size_lo..=size_hi);
            if 2 * size + 2 >= s {
                continue;
            }
            let cx = rng.random_range(size + 1..s - size - 1);
            let cy = rng.random_range(size + 1..s - size - 1);
            let sep = spec.min_object_separation;
            let candidate = (
                cx.saturating_sub(size + sep),
                cy.saturating_sub(size + sep),
                cx + size + sep,
                cy + size + sep,
            );
            let clash = objects.iter().any(|o| {
                let other = (
                    o.center.0.saturating_sub(o.size),
                    o.center.1.saturating_sub(o.size),
                    o.center.0 + o.size,
                    o.center.1 + o.size,
                );
                boxes_intersect(candidate, other)
            });
            if clash {
                continue;
            }
            let color = spec.color_vocab[rng.random_range(0..spec.color_vocab.len())].clone();
            let mask = shapes::rasterize_mask(&shape, (cx, cy), size, s);
            let bbox = match tight_bbox(&mask, s) {
                Some(b) => b,
                None => continue,
            };
            let rgb = shapes::color_rgb(&color).expect("validated color");
            for y in 0..s {
                for x in 0..s {
                    if mask[(y, x)] != 0 {
                        for c in 0..3 {
                            image[(c, y, x)] = rgb[c];
                        }
                    }
                }
            }
            objects.push(SceneObject {
                shape: shape.clone(),
                color,
                center: (cx, cy),
                size,
                bbox,
                mask,
            });
            placed = true;
            break;
        }
        let _ = placed; // dropped objects simply reduce the count
    }

    Ok(Scene { id, image, objects })
}

/// Chooses the multiset of shapes for one scene, honoring bias rules.
///
/// Bias targets never enter the uniform base pool, so the empirical
/// conditional frequency P(add | when_present) matches the configured
/// probability. When companions push the count over the range maximum,
/// base objects are dropped from the end — skipping sources whose rule
/// fired, so conditioning stays intact.
fn select_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (lo, hi) = spec.object_count_range;
    let n_base = rng.random_range(lo..=hi);
    let bias_targets: BTreeSet<&String> =
        spec.cooccurrence_bias.iter().map(|b| &b.add).collect();
    let pool: Vec<&String> = spec
        .shape_vocab
        .iter()
        .filter(|s| !bias_targets.contains(s))
        .collect();
    let pool = if pool.is_empty() {
        spec.shape_vocab.iter().collect()
    } else {
        pool
    };

    let mut base: Vec<String> = (0..n_base)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect();

    let mut companions: Vec<String> = Vec::new();
    let mut fired_sources: BTreeSet<String> = BTreeSet::new();
    for rule in &spec.cooccurrence_bias {
        let present = base.contains(&rule.when_present)
            || companions.contains(&rule.when_present);
        if !present || companions.contains(&rule.add) || base.contains(&rule.add) {
            continue;
        }
        if rng.random::<f64>() < rule.probability {
            companions.push(rule.add.clone());
            fired_sources.insert(rule.when_present.clone());
        }
    }

    // Make room for companions within the configured maximum. Never drop the
    // last instance of a source whose rule fired, or the conditioning the
    // convergence property measures would skew.
    while base.len() + companions.len() > hi && !base.is_empty() {
        let mut drop_at = None;
        for i in (0..base.len()).rev() {
            let is_fired_source = fired_sources.contains(&base[i]);
            let last_instance = base.iter().filter(|s| **s == base[i]).count() == 1;
            if !(is_fired_source && last_instance) {
                drop_at = Some(i);
                break;
            }
        }
        match drop_at {
            Some(i) => {
                base.remove(i);
            }
            None => break,
        }
    }
    let mut all = base;
    all.extend(companions);
    all.truncate(hi);
    all
}

fn boxes_intersect(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

/// Tight normalized box of a binary mask; pixel `[min..=max]` maps to
/// `[min/S, (max+1)/S]`.
pub fn tight_bbox(mask: &Array2<u8>, image_size: usize) -> Option<BBox> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for ((y, x), &m) in mask.indexed_iter() {
        if m != 0 {
            any = true;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !any {
        return None;
    }
    let s = image_size as f64;
    Some(BBox::new(
        min_x as f64 / s,
        min_y as f64 / s,
        (max_x + 1) as f64 / s,
        (max_y + 1) as f64 / s,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn forced_single_object() {
        let spec = SceneSpec {
            object_count_range: (1, 1),
            cooccurrence_bias: vec![],
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, &mut rng(7)).unwrap();
        assert_eq!(scene.objects.len(), 1);
        assert!(scene.objects[0].pixel_area() > 0);
    }

    #[test]
    fn certain_bias_always_cooccurs() {
        let spec = SceneSpec {
            object_count_range: (1, 3),
            cooccurrence_bias: vec![CooccurrenceBias {
                when_present: "circle".into(),
                add: "square".into(),
                probability: 1.0,
            }],
            ..SceneSpec::default()
        };
        let mut r = rng(11);
        let mut with_circle = 0;
        for _ in 0..200 {
            let scene = generate_scene(&spec, &mut r).unwrap();
            if scene.contains_shape("circle") {
                with_circle += 1;
                assert!(
                    scene.contains_shape("square"),
                    "bias 1.0 violated in scene {}",
                    scene.id
                );
            }
        }
        assert!(with_circle > 20, "corpus should contain circles");
    }

    #[test]
    fn determinism_same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, &mut rng(99)).unwrap();
        let b = generate_scene(&spec, &mut rng(99)).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects.len(), b.objects.len());
        for (oa, ob) in a.objects.iter().zip(b.objects.iter()) {
            assert_eq!(oa.mask, ob.mask);
            assert_eq!(oa.bbox, ob.bbox);
        }
    }

    #[test]
    fn masks_are_disjoint_and_boxes_tight() {
        let spec = SceneSpec {
            object_count_range: (2, 4),
            ..SceneSpec::default()
        };
        let mut r = rng(3);
        for _ in 0..50 {
            let scene = generate_scene(&spec, &mut r).unwrap();
            let s = spec.image_size;
            let mut union = Array2::<u32>::zeros((s, s));
            let mut total = 0usize;
            for o in &scene.objects {
                total += o.pixel_area();
                for ((y, x), &m) in o.mask.indexed_iter() {
                    if m != 0 {
                        union[(y, x)] += 1;
                    }
                }
                assert_eq!(tight_bbox(&o.mask, s).unwrap(), o.bbox);
            }
            let union_count = union.iter().filter(|&&c| c > 0).count();
            assert_eq!(total, union_count, "overlapping masks in {}", scene.id);
            assert!(union.iter().all(|&c| c <= 1));
        }
    }

    #[test]
    fn object_count_within_range() {
        let spec = SceneSpec {
            object_count_range: (2, 3),
            ..SceneSpec::default()
        };
        let mut r = rng(5);
        for _ in 0..100 {
            let scene = generate_scene(&spec, &mut r).unwrap();
            assert!(scene.objects.len() <= 3);
            // placement failure may reduce below min, but never to zero here
            assert!(!scene.objects.is_empty());
        }
    }

    #[test]
    fn bias_probability_converges() {
        let p = 0.7;
        let spec = SceneSpec {
            object_count_range: (1, 4),
            cooccurrence_bias: vec![CooccurrenceBias {
                when_present: "circle".into(),
                add: "square".into(),
                probability: p,
            }],
            ..SceneSpec::default()
        };
        let mut r = rng(42);
        let (mut with_a, mut with_both) = (0usize, 0usize);
        for _ in 0..2500 {
            let scene = generate_scene(&spec, &mut r).unwrap();
            if scene.contains_shape("circle") {
                with_a += 1;
                if scene.contains_shape("square") {
                    with_both += 1;
                }
            }
        }
        let freq = with_both as f64 / with_a as f64;
        assert!(
            (freq - p).abs() <= 0.05,
            "P(square|circle) = {freq:.3}, configured {p}"
        );
    }

    #[test]
    fn invalid_bias_probability_rejected() {
        let spec = SceneSpec {
            cooccurrence_bias: vec![CooccurrenceBias {
                when_present: "circle".into(),
                add: "square".into(),
                probability: 1.5,
            }],
            ..SceneSpec::default()
        };
        let err = spec.validate().unwrap_err();
        assert!(format!("{err}").contains("probability"));
    }
}
