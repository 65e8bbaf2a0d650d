//! The optimization loop: teacher-forced joint training of model and
//! grounder, gradient accumulation, checkpointing, and the step log.

use super::modes::{prepare_sample, TrainSample};
use super::optim::{clip_global_norm, warmup_decay_lr, AdamW};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::grounder::{init_grounder, Grounder};
use crate::losses::{LossBreakdown, PROB_EPS};
use crate::model::{init_model, Model, ParamId};
use crate::protocol::{Vocab, COMPLEX_ID, LOC_ID, REJ_ID, SIMPLE_ID};
use crate::scalar::{to_f64, Scalar};
use crate::scenegen::Dataset;
use crate::tensor::{Tape, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Model + grounder + optimizer state; what a checkpoint holds.
pub struct Trainer<F: Scalar> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model<F>,
    pub grounder: Grounder<F>,
    pub opt: AdamW<F>,
    pub step: usize,
}

pub struct TrainOutcome<F: Scalar> {
    pub trainer: Trainer<F>,
    pub log: Vec<LogRecord>,
}

/// Loaded checkpoint alias; identical to a live trainer.
pub type Checkpoint<F> = Trainer<F>;

impl<F: Scalar> Trainer<F> {
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::standard(&dataset.spec.shape_vocab, &dataset.spec.color_vocab);
        let mut model_cfg = config.model.clone();
        if model_cfg.vocab_size == 0 {
            model_cfg.vocab_size = vocab.len();
        } else if model_cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary {}",
                model_cfg.vocab_size,
                vocab.len()
            )));
        }
        model_cfg.seed = config.seed;
        let mut grounder_cfg = config.grounder.clone();
        grounder_cfg.seed = config.seed;
        let model = init_model::<F>(&model_cfg)?;
        let grounder = init_grounder::<F>(&grounder_cfg)?;
        let shapes: Vec<&ArrayD<F>> = (0..model.params.len())
            .map(|i| model.params.value(ParamId(i)))
            .chain((0..grounder.params.len()).map(|i| grounder.params.value(ParamId(i))))
            .collect();
        let opt = AdamW::new(&shapes);
        let mut config = config.clone();
        config.model = model_cfg;
        config.grounder = grounder_cfg;
        Ok(Self { config, vocab, model, grounder, opt, step: 0 })
    }

    fn n_model_params(&self) -> usize {
        self.model.params.len()
    }

    fn n_all_params(&self) -> usize {
        self.model.params.len() + self.grounder.params.len()
    }

    /// Training stream is stateless in (seed, k): per-epoch Fisher-Yates
    /// permutations let a resumed run continue bit-identically.
    fn stream_sample_index(&self, n: usize, k: usize) -> usize {
        let epoch = k / n;
        let offset = k % n;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        perm[offset]
    }

    /// One sample's forward pass, losses and backward; returns per-term
    /// values and adds scaled gradients into `grad_acc`.
    fn sample_pass(
        &self,
        dataset: &Dataset,
        sample: &TrainSample,
        grad_scale: f64,
        grad_acc: &mut [Option<ArrayD<F>>],
    ) -> Result<SampleTerms> {
        let scene = &dataset.scenes[sample.scene_index];
        let mut tape = Tape::<F>::new();
        let model_leaves = self.model.bind(&mut tape);
        let grounder_leaves = self.grounder.bind(&mut tape);

        let full: Vec<usize> = sample
            .prompt_ids
            .iter()
            .chain(sample.target_ids.iter())
            .copied()
            .collect();
        let input = &full[..full.len() - 1];
        let targets = &full[1..];
        let prompt_len = sample.prompt_ids.len();
        let supervised: Vec<bool> = (0..input.len()).map(|i| i + 1 >= prompt_len).collect();

        let out = self.model.forward_bound(
            &mut tape,
            &model_leaves,
            Some(&scene.image),
            input,
            false,
        )?;
        let text = tape.lm_cross_entropy(out.logits, targets, &supervised);
        let mut terms: Vec<(Var, f64)> = vec![(text, 1.0)];

        let mut rej_val = None;
        if sample.apply_rej {
            let row = prompt_len + sample.grounding_pos.unwrap() - 1;
            let pair = tape.gather_pair(out.logits, row, REJ_ID, LOC_ID);
            let y = if sample.rejected { 1.0 } else { 0.0 };
            let rej = tape.bce_sigmoid_diff(pair, y, PROB_EPS);
            terms.push((rej, self.config.weights.lambda_rej));
            rej_val = Some(to_f64(tape.scalar_value(rej)));
        }

        let mut rea_val = None;
        if let Some(mpos) = sample.marker_pos {
            let row = prompt_len + mpos - 1;
            let pair = tape.gather_pair(out.logits, row, COMPLEX_ID, SIMPLE_ID);
            let y = if sample.complex_label { 1.0 } else { 0.0 };
            let rea = tape.bce_sigmoid_diff(pair, y, PROB_EPS);
            terms.push((rea, self.config.weights.lambda_reason));
            rea_val = Some(to_f64(tape.scalar_value(rea)));
        }

        let mut seg_val = None;
        let mut det_val = None;
        if sample.apply_seg || sample.apply_det {
            let loc_row = out.n_vis + prompt_len + sample.grounding_pos.unwrap();
            let loc_emb = tape.slice_rows(out.hidden, loc_row, 1);
            let prompt = self
                .grounder
                .project_prompt_bound(&mut tape, &grounder_leaves, loc_emb);
            let features =
                self.grounder
                    .encode_image_dense_bound(&mut tape, &grounder_leaves, &scene.image)?;
            if sample.apply_seg {
                let obj = sample.target_object.expect("positive sample has target");
                let gt = scene.objects[obj]
                    .mask
                    .mapv(|m| if m != 0 { F::one() } else { F::zero() });
                let gt = Arc::new(gt.into_dyn());
                let mask =
                    self.grounder
                        .decode_mask_bound(&mut tape, &grounder_leaves, features, prompt);
                let bce = tape.bce_with_logits_mean(mask, Arc::clone(&gt));
                let dice = tape.dice_loss(mask, gt, crate::losses::DICE_EPS);
                terms.push((bce, 1.0));
                terms.push((dice, 1.0));
                seg_val = Some(to_f64(tape.scalar_value(bce)) + to_f64(tape.scalar_value(dice)));
            }
            if sample.apply_det {
                let bbox = self
                    .grounder
                    .decode_bbox_bound(&mut tape, &grounder_leaves, features, prompt);
                let det = tape.detection_loss(bbox, sample.gt_bbox.unwrap().as_array());
                terms.push((det, 1.0));
                det_val = Some(to_f64(tape.scalar_value(det)));
            }
        }

        let total = tape.affine_combination(&terms);
        let mut store = tape.backward(total);
        for (slot, leaf) in grad_acc
            .iter_mut()
            .zip(model_leaves.iter().chain(grounder_leaves.iter()))
        {
            if let Some(g) = store.take(*leaf) {
                let scaled = g.mapv(|x| x * crate::scalar::fl::<F>(grad_scale));
                match slot {
                    Some(acc) => *acc += &scaled,
                    s @ None => *s = Some(scaled),
                }
            }
        }

        Ok(SampleTerms {
            text: to_f64(tape.scalar_value(text)),
            rej: rej_val,
            rea: rea_val,
            seg: seg_val,
            det: det_val,
            total: to_f64(tape.scalar_value(total)),
        })
    }

    /// Runs optimizer steps until `until_step`; logs one record per step.
    pub fn run(&mut self, dataset: &Dataset, until_step: usize, log: &mut Vec<LogRecord>) -> Result<()> {
        let split = dataset.split(self.config.holdout_fraction, self.config.seed);
        let query_indices = dataset.queries_for(&split.train);
        if query_indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let samples: Vec<TrainSample> = query_indices
            .iter()
            .enumerate()
            .map(|(k, &qi)| {
                let q = &dataset.queries[qi];
                let si = dataset
                    .scene_index(&q.scene_id)
                    .ok_or_else(|| Error::Config(format!("query {} orphaned", q.id())))?;
                prepare_sample(
                    &self.config,
                    &self.vocab,
                    &dataset.scenes[si],
                    si,
                    q,
                    k,
                    &dataset.spec.shape_vocab,
                )
            })
            .collect::<Result<_>>()?;

        let per_step = self.config.batch_size * self.config.grad_accum;
        let n_params = self.n_all_params();
        while self.step < until_step {
            let mut grad_acc: Vec<Option<ArrayD<F>>> = vec![None; n_params];
            let mut acc = TermAccumulator::default();
            let base_k = self.step * per_step;
            for j in 0..per_step {
                let idx = self.stream_sample_index(samples.len(), base_k + j);
                let terms = self.sample_pass(
                    dataset,
                    &samples[idx],
                    1.0 / per_step as f64,
                    &mut grad_acc,
                )?;
                acc.add(&terms);
            }
            let step_now = self.step + 1;
            let breakdown = acc.breakdown(per_step, &self.config);
            if let Some(term) = breakdown.all_finite() {
                return Err(Error::NonFiniteLoss { term: term.to_string(), step: step_now });
            }

            let mut grads: Vec<ArrayD<F>> = Vec::with_capacity(n_params);
            for (i, slot) in grad_acc.into_iter().enumerate() {
                let shape = if i < self.n_model_params() {
                    self.model.params.value(ParamId(i)).raw_dim()
                } else {
                    self.grounder
                        .params
                        .value(ParamId(i - self.n_model_params()))
                        .raw_dim()
                };
                grads.push(slot.unwrap_or_else(|| ArrayD::zeros(shape)));
            }
            if let Some(max_norm) = self.config.max_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = warmup_decay_lr(step_now, &self.config);
            let params = self
                .model
                .params
                .values_mut()
                .chain(self.grounder.params.values_mut());
            self.opt.step(params, &grads, lr);
            self.step = step_now;
            log.push(LogRecord { step: step_now, lr, loss: breakdown });
        }
        Ok(())
    }
}

#[derive(Default)]
struct SampleTerms {
    text: f64,
    rej: Option<f64>,
    rea: Option<f64>,
    seg: Option<f64>,
    det: Option<f64>,
    total: f64,
}

#[derive(Default)]
struct TermAccumulator {
    text: f64,
    rej: f64,
    rea: f64,
    seg: f64,
    det: f64,
    total: f64,
}

impl TermAccumulator {
    fn add(&mut self, t: &SampleTerms) {
        self.text += t.text;
        self.rej += t.rej.unwrap_or(0.0);
        self.rea += t.rea.unwrap_or(0.0);
        self.seg += t.seg.unwrap_or(0.0);
        self.det += t.det.unwrap_or(0.0);
        self.total += t.total;
    }

    fn breakdown(&self, n: usize, config: &TrainConfig) -> LossBreakdown {
        let n = n as f64;
        let rej = self.rej / n;
        let reason = self.rea / n;
        let det = self.det / n;
        let seg = self.seg / n;
        let text = self.text / n;
        LossBreakdown {
            rej,
            reason,
            det,
            seg,
            text,
            total: config.weights.lambda_rej * rej
                + config.weights.lambda_reason * reason
                + det
                + seg
                + text,
        }
    }
}

/// Full training from scratch per `config`; the spec-level entry point.
pub fn train<F: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome<F>> {
    let mut trainer = Trainer::new(config, dataset)?;
    let mut log = Vec::with_capacity(config.total_steps);
    let total = config.total_steps;
    trainer.run(dataset, total, &mut log)?;
    Ok(TrainOutcome { trainer, log })
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    step: usize,
    opt_t: usize,
    config: TrainConfig,
    model_checksum: String,
    grounder_checksum: String,
    last_loss: Option<LossBreakdown>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Atomic checkpoint write: stage into a sibling temp dir, then rename.
pub fn save_checkpoint<F: Scalar>(
    trainer: &Trainer<F>,
    dir: &Path,
    last_loss: Option<LossBreakdown>,
) -> Result<()> {
    let staging = dir.with_extension("tmp");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    trainer.model.params.save_dir(&staging.join("model"))?;
    trainer.grounder.params.save_dir(&staging.join("grounder"))?;
    let optim_dir = staging.join("optim");
    std::fs::create_dir_all(&optim_dir)?;
    for (i, m) in trainer.opt.m.iter().enumerate() {
        crate::blob::save_tensor(&optim_dir.join(format!("m_{i:04}.bin")), m)?;
    }
    for (i, v) in trainer.opt.v.iter().enumerate() {
        crate::blob::save_tensor(&optim_dir.join(format!("v_{i:04}.bin")), v)?;
    }
    trainer.vocab.save(&staging.join("vocab.json"))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step: trainer.step,
        opt_t: trainer.opt.t,
        config: trainer.config.clone(),
        model_checksum: trainer.model.params.checksum(),
        grounder_checksum: trainer.grounder.params.checksum(),
        last_loss,
    };
    std::fs::write(
        staging.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<Trainer<F>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint(dir.display().to_string()));
    }
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    let mut model = init_model::<F>(&manifest.config.model)?;
    model.params.load_dir(&dir.join("model"))?;
    let mut grounder = init_grounder::<F>(&manifest.config.grounder)?;
    grounder.params.load_dir(&dir.join("grounder"))?;
    if model.params.checksum() != manifest.model_checksum
        || grounder.params.checksum() != manifest.grounder_checksum
    {
        return Err(Error::Config("checkpoint checksum mismatch".into()));
    }
    let shapes: Vec<&ArrayD<F>> = (0..model.params.len())
        .map(|i| model.params.value(ParamId(i)))
        .chain((0..grounder.params.len()).map(|i| grounder.params.value(ParamId(i))))
        .collect();
    let mut opt = AdamW::new(&shapes);
    opt.t = manifest.opt_t;
    let optim_dir = dir.join("optim");
    for i in 0..opt.m.len() {
        opt.m[i] = crate::blob::load_tensor(&optim_dir.join(format!("m_{i:04}.bin")))?;
        opt.v[i] = crate::blob::load_tensor(&optim_dir.join(format!("v_{i:04}.bin")))?;
    }
    Ok(Trainer { config: manifest.config, vocab, model, grounder, opt, step: manifest.step })
}

