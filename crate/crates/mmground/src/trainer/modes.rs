//! Instance-level transforms: reasoning-mode target rewrites, box-as-text
//! baselines, and tokenized training samples.

use super::{BaselineMode, ReasoningMode, TrainConfig};
use crate::error::Result;
use crate::grounder::BBox;
use crate::protocol::{self, Vocab, BOS_ID, COMPLEX_ID, EOS, LOC_ID, REJ_ID, SIMPLE_ID};
use crate::scenegen::{QueryInstance, Scene};

/// One tokenized teacher-forcing sample with loss wiring resolved.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene_index: usize,
    pub prompt_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Offset of the grounding token within `target_ids`.
    pub grounding_pos: Option<usize>,
    /// Offset of the complexity marker within `target_ids`.
    pub marker_pos: Option<usize>,
    pub rejected: bool,
    pub complex_label: bool,
    pub apply_seg: bool,
    pub apply_det: bool,
    pub apply_rej: bool,
    pub gt_bbox: Option<BBox>,
    pub target_object: Option<usize>,
}

/// `<b>` tokens for the four corners, 100 uniform bins each.
pub fn quantize_box_tokens(bbox: &BBox) -> String {
    let bin = |c: f64| ((c * 100.0).floor() as i64).clamp(0, 99);
    format!(
        "<{}> <{}> <{}> <{}>",
        bin(bbox.x1),
        bin(bbox.y1),
        bin(bbox.x2),
        bin(bbox.y2)
    )
}

fn shape_in_text<'v>(text: &str, shapes: &'v [String]) -> Option<&'v str> {
    text.split_whitespace()
        .find_map(|w| shapes.iter().find(|s| s.as_str() == w).map(|s| s.as_str()))
}

/// Rationale for instances that lack one, used when a mode forces rationale
/// generation onto every target.
fn synthesize_rationale(scene: &Scene, q: &QueryInstance, shapes: &[String]) -> String {
    if let Some(r) = &q.rationale_text {
        return r.clone();
    }
    if let Some(i) = q.target {
        let o = &scene.objects[i];
        let half = scene.image_size() / 2;
        let v = if o.center.1 < half { "top" } else { "bottom" };
        let h = if o.center.0 < half { "left" } else { "right" };
        format!("The {} is at the {} {} .", o.shape, v, h)
    } else {
        let shape = shape_in_text(&q.query_text, shapes).unwrap_or("shape");
        format!("There is no {shape} in the image .")
    }
}

/// Applies the configured baseline mode to one instance. Returns the
/// (possibly rewritten) instance and the concrete BTL variant that fired,
/// if any. `parity` alternates generation/caption under `BtlBoth`;
/// instances without a box pass through untouched.
pub fn apply_baseline_mode(
    config: &TrainConfig,
    instance: &QueryInstance,
    scene: &Scene,
    parity: usize,
) -> (QueryInstance, Option<BaselineMode>) {
    let mode = match config.baseline_mode {
        BaselineMode::None => return (instance.clone(), None),
        BaselineMode::BtlGeneration => BaselineMode::BtlGeneration,
        BaselineMode::BtlCaption => BaselineMode::BtlCaption,
        BaselineMode::BtlBoth => {
            if parity % 2 == 0 {
                BaselineMode::BtlGeneration
            } else {
                BaselineMode::BtlCaption
            }
        }
    };
    let (Some(bbox), Some(ti)) = (instance.gt_bbox, instance.target) else {
        return (instance.clone(), None);
    };
    let mut out = instance.clone();
    let bins = quantize_box_tokens(&bbox);
    match mode {
        BaselineMode::BtlGeneration => {
            // referring query in, coordinates out
            out.target_sequence = format!("{bins} {EOS}");
        }
        BaselineMode::BtlCaption => {
            let o = &scene.objects[ti];
            out.query_text = "what is in this image ?".to_string();
            out.target_sequence = protocol::compose_marker_only_text(
                false,
                None,
                &format!("There is a {} {} at {bins} .", o.color, o.shape),
            );
        }
        _ => unreachable!(),
    }
    (out, Some(mode))
}

fn prompt_text(config: &TrainConfig, query_text: &str, context: Option<&str>) -> String {
    let mut parts: Vec<&str> = Vec::new();
    if config.include_reflection_prompt {
        parts.push(protocol::self_reflection_prompt());
    }
    parts.push(query_text);
    if let Some(ctx) = context {
        parts.push(ctx);
    }
    format!("USER : <IMAGE> {} ASSISTANT :", parts.join(" "))
}

/// Builds the tokenized training sample for `instance` under `config`.
/// `stream_k` disambiguates alternating variants (BtlBoth parity and the
/// pre-reasoning context-consuming pass).
pub fn prepare_sample(
    config: &TrainConfig,
    vocab: &Vocab,
    scene: &Scene,
    scene_index: usize,
    instance: &QueryInstance,
    stream_k: usize,
    shapes: &[String],
) -> Result<TrainSample> {
    let (instance, btl) = apply_baseline_mode(config, instance, scene, stream_k);
    let any_grounding =
        config.baseline_mode == BaselineMode::None && config.ablation.any_grounding();

    let mut context: Option<String> = None;
    let (target_text, complex_label) = if btl.is_some() {
        // baseline-transformed grounded instance: target already composed
        (instance.target_sequence.clone(), false)
    } else {
        let (body_rationale, marker_complex) = match config.reasoning_mode {
            ReasoningMode::None => (None, false),
            ReasoningMode::Selective => (instance.rationale_text.clone(), instance.is_complex()),
            ReasoningMode::Inter => (Some(synthesize_rationale(scene, &instance, shapes)), true),
            ReasoningMode::Pre => {
                if stream_k % 2 == 0 {
                    // rationale-producing pass, trained like inter
                    (Some(synthesize_rationale(scene, &instance, shapes)), true)
                } else {
                    // context-consuming pass: rationale moves into the prompt
                    context = Some(synthesize_rationale(scene, &instance, shapes));
                    (None, false)
                }
            }
        };
        let text = if any_grounding {
            protocol::compose_target_text(
                instance.rejected && config.ablation.use_rej,
                marker_complex,
                body_rationale.as_deref(),
                &instance.answer_text,
            )
        } else {
            protocol::compose_marker_only_text(
                marker_complex,
                body_rationale.as_deref(),
                &instance.answer_text,
            )
        };
        (text, marker_complex)
    };

    let mut prompt_ids = vec![BOS_ID];
    prompt_ids
        .extend(vocab.encode(&prompt_text(config, &instance.query_text, context.as_deref()))?);
    let target_ids = vocab.encode(&target_text)?;

    let grounding_pos = target_ids.iter().position(|&t| t == LOC_ID || t == REJ_ID);
    let marker_pos = target_ids.iter().position(|&t| t == SIMPLE_ID || t == COMPLEX_ID);

    let positive = !instance.rejected;
    Ok(TrainSample {
        scene_index,
        prompt_ids,
        target_ids,
        grounding_pos,
        marker_pos,
        rejected: instance.rejected,
        complex_label,
        apply_seg: config.grounding_losses_active()
            && config.ablation.use_seg
            && positive
            && grounding_pos.is_some(),
        apply_det: config.grounding_losses_active()
            && config.ablation.use_det
            && positive
            && grounding_pos.is_some(),
        apply_rej: config.rejection_loss_active() && grounding_pos.is_some(),
        gt_bbox: instance.gt_bbox,
        target_object: instance.target,
    })
}

/// Does this composed target carry a rationale span?
pub fn target_has_rationale(vocab: &Vocab, target_ids: &[usize]) -> bool {
    matches!(
        protocol::parse_output(vocab, target_ids),
        Ok(protocol::StructuredOutput { rationale: Some(_), .. })
    )
}
