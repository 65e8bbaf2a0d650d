//! Query templates with exact labels: simple attribute/existence/location
//! queries, complex counting/comparison/relation queries with generated
//! rationales, and negatives about absent referents.

use super::{Scene, SceneObject};
use crate::error::{Error, Result};
use crate::grounder::BBox;
use crate::protocol::{self, Marker};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Template class; also determines the evaluation difficulty tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryClass {
    Attribute,
    Existence,
    Location,
    SpatialRelation,
    Counting,
    Comparison,
    NegativeAttribute,
    NegativeExistence,
}

impl QueryClass {
    pub fn is_complex(self) -> bool {
        matches!(
            self,
            QueryClass::SpatialRelation | QueryClass::Counting | QueryClass::Comparison
        )
    }

    /// easy = single attribute, medium = two-object relation,
    /// hard = counting/comparison with rationale.
    pub fn difficulty(self) -> Option<&'static str> {
        match self {
            QueryClass::Attribute | QueryClass::Existence | QueryClass::Location => Some("easy"),
            QueryClass::SpatialRelation => Some("medium"),
            QueryClass::Counting | QueryClass::Comparison => Some("hard"),
            _ => None,
        }
    }
}

/// One query with its gold labels. Masks are not stored; they derive from
/// the target object so serialized datasets stay compact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub scene_id: String,
    pub query_index: usize,
    pub query_text: String,
    pub class: QueryClass,
    pub complexity: Marker,
    pub rejected: bool,
    pub target: Option<usize>,
    pub gt_bbox: Option<BBox>,
    pub rationale_text: Option<String>,
    pub answer_text: String,
    pub target_sequence: String,
}

impl QueryInstance {
    pub fn id(&self) -> String {
        format!("{}-q{}", self.scene_id, self.query_index)
    }

    pub fn is_complex(&self) -> bool {
        self.complexity == Marker::Complex
    }

    /// Ground-truth mask of the target object, if any.
    pub fn gt_mask<'s>(&self, scene: &'s Scene) -> Option<&'s Array2<u8>> {
        self.target.map(|i| &scene.objects[i].mask)
    }

    pub fn validate(&self) -> Result<()> {
        let has_target = self.target.is_some();
        if self.rejected == has_target || self.rejected == self.gt_bbox.is_some() {
            return Err(Error::Config(format!(
                "query {}: rejected flag inconsistent with target/bbox",
                self.id()
            )));
        }
        if (self.complexity == Marker::Complex) != self.rationale_text.is_some() {
            return Err(Error::Config(format!(
                "query {}: complexity inconsistent with rationale",
                self.id()
            )));
        }
        Ok(())
    }
}

struct Builder<'s> {
    scene: &'s Scene,
    next_index: usize,
    out: Vec<QueryInstance>,
}

impl<'s> Builder<'s> {
    fn push(
        &mut self,
        class: QueryClass,
        query_text: String,
        target: Option<usize>,
        rationale: Option<String>,
        answer: String,
    ) {
        let rejected = target.is_none();
        let complexity = if class.is_complex() { Marker::Complex } else { Marker::Simple };
        let gt_bbox = target.map(|i| self.scene.objects[i].bbox);
        let target_sequence = protocol::compose_target_text(
            rejected,
            complexity == Marker::Complex,
            rationale.as_deref(),
            &answer,
        );
        self.out.push(QueryInstance {
            scene_id: self.scene.id.clone(),
            query_index: self.next_index,
            query_text,
            class,
            complexity,
            rejected,
            target,
            gt_bbox,
            rationale_text: rationale,
            answer_text: answer,
            target_sequence,
        });
        self.next_index += 1;
    }
}

fn quadrant(obj: &SceneObject, image_size: usize) -> (&'static str, &'static str) {
    let half = image_size / 2;
    let v = if obj.center.1 < half { "top" } else { "bottom" };
    let h = if obj.center.0 < half { "left" } else { "right" };
    (v, h)
}

fn plural(shape: &str) -> String {
    if shape.ends_with('s') || shape.ends_with('x') {
        format!("{shape}es")
    } else {
        format!("{shape}s")
    }
}

/// Generates the per-scene query set: every applicable positive template
/// plus `neg_ratio` negatives about absent shapes.
pub fn make_queries(
    scene: &Scene,
    shape_vocab: &[String],
    neg_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QueryInstance>> {
    if !(0.0..=1.0).contains(&neg_ratio) {
        return Err(Error::Config(format!("neg_ratio {neg_ratio} outside [0,1]")));
    }
    if scene.objects.is_empty() {
        return Err(Error::Config(format!("scene {} has no objects", scene.id)));
    }
    let image_size = scene.image_size();
    let mut b = Builder { scene, next_index: 0, out: Vec::new() };
    let unique = scene.unique_shape_objects();

    // existence (always possible)
    let pick = rng.random_range(0..scene.objects.len());
    let shape = scene.objects[pick].shape.clone();
    let target = scene.objects.iter().position(|o| o.shape == shape).unwrap();
    b.push(
        QueryClass::Existence,
        format!("Is there a {shape} in this image ?"),
        Some(target),
        None,
        "Yes .".to_string(),
    );

    if !unique.is_empty() {
        // attribute
        let i = unique[rng.random_range(0..unique.len())];
        let o = &scene.objects[i];
        b.push(
            QueryClass::Attribute,
            format!("what color is the {} ?", o.shape),
            Some(i),
            None,
            format!("The {} is {} .", o.shape, o.color),
        );
        // location
        let i = unique[rng.random_range(0..unique.len())];
        let o = &scene.objects[i];
        let (v, h) = quadrant(o, image_size);
        b.push(
            QueryClass::Location,
            format!("where is the {} ?", o.shape),
            Some(i),
            None,
            format!("The {} is at the {} {} .", o.shape, v, h),
        );
    }

    // counting
    {
        let pick = rng.random_range(0..scene.objects.len());
        let shape = scene.objects[pick].shape.clone();
        let n = scene.objects.iter().filter(|o| o.shape == shape).count();
        let target = scene.objects.iter().position(|o| o.shape == shape).unwrap();
        b.push(
            QueryClass::Counting,
            format!("how many {} are in this image ?", plural(&shape)),
            Some(target),
            Some(format!("I count each {shape} . It appears {n} times .")),
            format!("There are {n} ."),
        );
    }

    // comparison and spatial relation need two unambiguous distinct shapes
    if unique.len() >= 2 {
        let mut order: Vec<usize> = unique.clone();
        // deterministic shuffle
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (a, bb) = (order[0], order[1]);
        let (oa, ob) = (&scene.objects[a], &scene.objects[bb]);
        if oa.pixel_area() != ob.pixel_area() {
            let (big, small) = if oa.pixel_area() > ob.pixel_area() { (a, bb) } else { (bb, a) };
            let (bs, ss) = (&scene.objects[big].shape, &scene.objects[small].shape);
            b.push(
                QueryClass::Comparison,
                format!("which is larger , the {} or the {} ?", oa.shape, ob.shape),
                Some(big),
                Some(format!("The {bs} covers more pixels than the {ss} .")),
                format!("The {bs} is larger ."),
            );
        }
        let (va, ha) = quadrant(oa, image_size);
        let (vb, hb) = quadrant(ob, image_size);
        let yes = oa.center.0 < ob.center.0;
        b.push(
            QueryClass::SpatialRelation,
            format!("Is the {} left of the {} ?", oa.shape, ob.shape),
            Some(a),
            Some(format!(
                "The {} is at the {} {} and the {} is at the {} {} .",
                oa.shape, va, ha, ob.shape, vb, hb
            )),
            if yes { "Yes .".to_string() } else { "No .".to_string() },
        );
    }

    // negatives about absent shapes, sampled uniformly
    let present = scene.shape_set();
    let absent: Vec<&String> = shape_vocab.iter().filter(|s| !present.contains(s.as_str())).collect();
    if !absent.is_empty() && neg_ratio > 0.0 {
        let p = b.out.len() as f64;
        let n_neg = ((p * neg_ratio / (1.0 - neg_ratio)).round() as usize)
            .min(2 * absent.len())
            .max(1);
        for k in 0..n_neg {
            let shape = absent[rng.random_range(0..absent.len())].clone();
            if k % 2 == 0 {
                b.push(
                    QueryClass::NegativeAttribute,
                    format!("what color is the {shape} ?"),
                    None,
                    None,
                    format!("There is no {shape} in the image ."),
                );
            } else {
                b.push(
                    QueryClass::NegativeExistence,
                    format!("Is there a {shape} in this image ?"),
                    None,
                    None,
                    "No .".to_string(),
                );
            }
        }
    }

    for q in &b.out {
        q.validate()?;
    }
    Ok(b.out)
}
