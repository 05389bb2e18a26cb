//! Optimization loops: source pretraining and two-phase single-subject
//! test-time adaptation with Adam over the batchnorm affine parameters only.
//!
//! Adaptation phase A minimizes entropy + class-ratio KL (entropy only for
//! the Tent ablation); phase B adds the shape band penalty for the RC/RD
//! modes. Moment priors are re-estimated from hard argmax masks after each
//! epoch, starting with the estimate that seeds phase B. One epoch runs the
//! subject's slices in contiguous windows of at most `batch_cap` slices,
//! window order shuffled per epoch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_affine, derive_seed, SubjectVolume};
use crate::error::{Error, Result};
use crate::losses::{self, AdaptMode, LossWeights};
use crate::moments::CoordinateGrids;
use crate::priors::{compute_class_weights, DescriptorPrior};
use crate::segnet::{self, ForwardMode, GradScope, NetworkConfig, ParameterStore, BN_MOMENTUM};
use crate::tensor::{Tape, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam first/second-moment accumulators for a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    slots: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, names: &[String]) -> Self {
        let slots = names
            .iter()
            .map(|n| {
                let numel = store.get(n).expect("optimizer over known params").numel();
                (n.clone(), AdamSlot { m: vec![0.0; numel], v: vec![0.0; numel] })
            })
            .collect();
        OptimizerState { step: 0, slots }
    }

    /// One Adam update. Weight decay is added to the gradient (L2 style) for
    /// every parameter in this optimizer's set.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, slot) in self.slots.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let current = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))?
                .values()
                .to_vec();
            let mut updated = current.clone();
            for i in 0..grad.len() {
                let g = grad[i] + weight_decay * current[i];
                slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                updated[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            store.set_values(name, &updated)?;
        }
        Ok(())
    }
}

/// Learning-rate and epoch-count settings shared by pretraining and
/// adaptation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    pub pretrain_epochs: usize,
    pub tta_init_epochs: usize,
    pub tta_shape_epochs: usize,
    /// Adaptation learning rate.
    pub lr: f64,
    /// Pretraining learning rate (the scaled-down net trains with a hotter
    /// rate than adaptation uses).
    pub pretrain_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub batch_cap: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            pretrain_epochs: 150,
            tta_init_epochs: 150,
            tta_shape_epochs: 200,
            lr: 5e-4,
            pretrain_lr: 2e-3,
            lr_decay: 0.9,
            lr_decay_every: 20,
            weight_decay: 1e-4,
            batch_cap: 22,
        }
    }
}

impl TrainingSchedule {
    /// Adaptation lr(epoch) = lr * decay^floor(epoch / period). The epoch
    /// counter runs continuously across adaptation phases A and B.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    fn pretrain_lr_at(&self, epoch: usize) -> f64 {
        self.pretrain_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Per-epoch loss terms written to the trace CSV.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub epoch: usize,
    pub entropy: f64,
    pub kl: f64,
    pub penalty: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,entropy_term,kl_term,penalty_term,total,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.epoch, r.entropy, r.kl, r.penalty, r.total, r.lr
        ));
    }
    out
}

/// Gather selected slices of a normalized subject into a B×1×H×W batch.
fn batch_tensor(images: &[f64], slice_ids: &[usize], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut xs = Vec::with_capacity(slice_ids.len() * plane);
    for s in slice_ids {
        xs.extend_from_slice(&images[s * plane..(s + 1) * plane]);
    }
    Tensor::new(vec![slice_ids.len(), 1, h, w], xs).expect("batch shape")
}

fn collect_grads(tape: &Tape, pass: &segnet::ForwardPass, names: &[String]) -> BTreeMap<String, Vec<f64>> {
    let mut grads = BTreeMap::new();
    for name in names {
        if let Some(g) = tape.grad(pass.params[name]) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    grads
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Copy)]
pub struct PretrainTraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn pretrain_trace_csv(rows: &[PretrainTraceRow]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9}\n", r.epoch, r.loss, r.lr));
    }
    out
}

/// Supervised source training: cross-entropy over all parameters, affine
/// augmentation re-sampled per epoch, batchnorm running statistics tracked
/// for the unadapted baseline.
pub fn pretrain(
    subjects: &[SubjectVolume],
    net_config: &NetworkConfig,
    schedule: &TrainingSchedule,
    seed: u64,
) -> Result<(ParameterStore, Vec<PretrainTraceRow>)> {
    if subjects.is_empty() {
        return Err(Error::EmptyDataset("pretraining needs at least one labeled source subject".into()));
    }
    for s in subjects {
        if s.labels.is_none() {
            return Err(Error::EmptyDataset(format!("subject {} has no labels", s.header.subject_id)));
        }
    }
    let (h, w) = (subjects[0].header.height, subjects[0].header.width);
    let k = net_config.num_classes;
    let mut store = segnet::build(net_config)?;
    let all_names: Vec<String> = store.param_names().map(|s| s.to_string()).collect();
    let mut optimizer = OptimizerState::new(&store, &all_names);
    let mut trace = Vec::with_capacity(schedule.pretrain_epochs);

    for epoch in 0..schedule.pretrain_epochs {
        let lr = schedule.pretrain_lr_at(epoch);
        // fresh augmentation of every subject, then a global slice pool
        let augmented: Vec<SubjectVolume> = subjects
            .iter()
            .enumerate()
            .map(|(i, s)| augment_affine(s, derive_seed(seed, &format!("augment/{}/{}", epoch, i))))
            .collect();
        let normalized: Vec<Vec<f64>> = augmented.iter().map(|s| s.normalized_intensities()).collect();

        let mut pool: Vec<(usize, usize)> = (0..augmented.len())
            .flat_map(|si| (0..augmented[si].header.slices).map(move |sl| (si, sl)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{}", epoch)));
        pool.shuffle(&mut rng);

        let batch = schedule.batch_cap.min(pool.len()).max(1);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in pool.chunks(batch) {
            let plane = h * w;
            let b = chunk.len();
            let mut xs = Vec::with_capacity(b * plane);
            let mut ys = vec![0.0f64; b * k * plane];
            for (bi, (si, sl)) in chunk.iter().enumerate() {
                xs.extend_from_slice(&normalized[*si][sl * plane..(sl + 1) * plane]);
                let lab = augmented[*si].labels.as_ref().expect("validated above");
                for p in 0..plane {
                    let cls = lab[sl * plane + p] as usize;
                    ys[(bi * k + cls) * plane + p] = 1.0;
                }
            }
            let x = Tensor::new(vec![b, 1, h, w], xs)?;
            let y = Tensor::new(vec![b, k, h, w], ys)?;

            let mut tape = Tape::new();
            let pass = segnet::forward(&mut tape, &store, &x, ForwardMode::Train, GradScope::All)?;
            let yv = tape.leaf(&y, false);
            let loss = losses::cross_entropy(&mut tape, yv, pass.softmax)?;
            let loss_value = tape.scalar(loss);
            tape.backward(loss)?;

            let grads = collect_grads(&tape, &pass, &all_names);
            store.update_running_stats(&pass.bn_batch_stats, BN_MOMENTUM);
            optimizer.step(&mut store, &grads, lr, schedule.weight_decay)?;

            epoch_loss += loss_value;
            batches += 1;
        }
        trace.push(PretrainTraceRow { epoch, loss: epoch_loss / batches as f64, lr });
    }
    Ok((store, trace))
}

/// Full-subject prediction: one batch of every slice, argmax labels.
pub fn predict(store: &ParameterStore, subject: &SubjectVolume, mode: ForwardMode) -> Result<Vec<u8>> {
    let (n, h, w) = (subject.header.slices, subject.header.height, subject.header.width);
    let images = subject.normalized_intensities();
    let x = Tensor::new(vec![n, 1, h, w], images)?;
    let mut tape = Tape::new();
    let pass = segnet::forward(&mut tape, store, &x, mode, GradScope::None)?;
    let k = store.config().num_classes;
    Ok(segnet::argmax_channels(tape.values(pass.softmax), n, k, h * w))
}

/// Everything a single-subject adaptation run produces.
#[derive(Debug)]
pub struct AdaptOutcome {
    pub store: ParameterStore,
    pub predictions: Vec<u8>,
    pub trace: Vec<TraceRow>,
}

/// Loss configuration for adaptation (class weights are derived from the
/// prior inside `adapt_subject`).
#[derive(Debug, Clone)]
pub struct AdaptOptions {
    pub lambda: f64,
    pub kl_weight: f64,
    pub band_delta: f64,
    pub band_form: losses::BandForm,
    pub seed: u64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            lambda: 1e-4,
            kl_weight: 1.0,
            band_delta: 0.1,
            band_form: losses::BandForm::Corrected,
            seed: 0,
        }
    }
}

/// Adapt the batchnorm scale/bias of a pretrained network to one unlabeled
/// subject and return the adapted parameters, argmax predictions, and the
/// per-epoch loss trace. Labels on the subject, if any, are discarded at
/// entry and never consulted.
pub fn adapt_subject(
    checkpoint: &ParameterStore,
    subject: &SubjectVolume,
    mode: AdaptMode,
    prior: &DescriptorPrior,
    schedule: &TrainingSchedule,
    options: &AdaptOptions,
) -> Result<AdaptOutcome> {
    let subject = subject.without_labels();
    let (n, h, w) = (subject.header.slices, subject.header.height, subject.header.width);
    let k = checkpoint.config().num_classes;
    if prior.num_classes() != k {
        return Err(Error::PriorClassMismatch { prior_classes: prior.num_classes(), num_classes: k });
    }
    let images = subject.normalized_intensities();
    let grids = CoordinateGrids::new(h, w);

    let excluded: Vec<bool> = (0..k)
        .map(|class| {
            prior
                .tags
                .as_ref()
                .map(|t| t.absent_everywhere(class, n))
                .unwrap_or(false)
        })
        .collect();
    let nu = compute_class_weights(&prior.ratio, Some(&excluded));
    let weights = LossWeights {
        class_weights: nu,
        lambda: options.lambda,
        kl_weight: options.kl_weight,
        band_delta: options.band_delta,
        band_form: options.band_form,
    };

    let mut store = checkpoint.clone();
    let mut prior = prior.clone();
    let adaptable = store.adaptable_names();
    let mut optimizer = OptimizerState::new(&store, &adaptable);

    let total_epochs = schedule.tta_init_epochs
        + if mode.has_shape_phase() { schedule.tta_shape_epochs } else { 0 };
    let mut trace = Vec::with_capacity(total_epochs);
    let mut moment_priors_seeded = false;

    for epoch in 0..total_epochs {
        let lr = schedule.lr_at(epoch);
        let in_shape_phase = mode.has_shape_phase() && epoch >= schedule.tta_init_epochs;
        let effective_mode = if in_shape_phase {
            mode
        } else if mode == AdaptMode::Tent {
            AdaptMode::Tent
        } else {
            AdaptMode::RatioOnly
        };
        if in_shape_phase && !moment_priors_seeded {
            // covers tta_init_epochs == 0, where no phase-A epoch seeded them
            let predictions = predict(&store, &subject, ForwardMode::Adapt)?;
            prior.reestimate_moments(&predictions, n, h, w);
            moment_priors_seeded = true;
        }

        // contiguous slice windows, order shuffled per epoch
        let window = schedule.batch_cap.min(n).max(1);
        let mut windows: Vec<Vec<usize>> =
            (0..n).collect::<Vec<usize>>().chunks(window).map(|c| c.to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, &format!("windows/{}", epoch)));
        windows.shuffle(&mut rng);

        let mut row = TraceRow { epoch, entropy: 0.0, kl: 0.0, penalty: 0.0, total: 0.0, lr };
        let mut epoch_masks = vec![0u8; n * h * w];
        for slice_ids in &windows {
            let x = batch_tensor(&images, slice_ids, h, w);
            let mut tape = Tape::new();
            let pass = segnet::forward(&mut tape, &store, &x, ForwardMode::Adapt, GradScope::BnAffine)?;
            let breakdown =
                losses::ttas_objective(&mut tape, pass.softmax, slice_ids, &prior, &weights, effective_mode, &grids)?;
            // hard masks for the end-of-epoch prior estimate come from this
            // epoch's forwards
            let batch_masks = segnet::argmax_channels(tape.values(pass.softmax), slice_ids.len(), k, h * w);
            for (bi, s) in slice_ids.iter().enumerate() {
                epoch_masks[s * h * w..(s + 1) * h * w]
                    .copy_from_slice(&batch_masks[bi * h * w..(bi + 1) * h * w]);
            }
            tape.backward(breakdown.total_var)?;
            let grads = collect_grads(&tape, &pass, &adaptable);
            optimizer.step(&mut store, &grads, lr, schedule.weight_decay)?;

            row.entropy += breakdown.entropy_term;
            row.kl += breakdown.kl_term;
            row.penalty += breakdown.penalty_term;
            row.total += breakdown.total;
        }
        trace.push(row);

        // moment priors follow the prediction masks produced during the
        // epoch; phase A leaves them unused, so estimation starts with the
        // epoch whose estimate seeds phase B
        if mode.has_shape_phase() && epoch + 1 >= schedule.tta_init_epochs {
            prior.reestimate_moments(&epoch_masks, n, h, w);
            moment_priors_seeded = true;
            if trace.len() == schedule.tta_init_epochs
                && prior.centroid[1..].iter().all(|c| c.is_none())
                && prior.spread[1..].iter().all(|c| c.is_none())
            {
                eprintln!(
                    "warning: every foreground class absent in predictions of {}; shape penalty is inert",
                    subject.header.subject_id
                );
            }
        }
    }

    // final inference: batch statistics over the whole subject in one pass
    let predictions = predict(&store, &subject, ForwardMode::Adapt)?;
    Ok(AdaptOutcome { store, predictions, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Domain, PhantomSpec};

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec { slices: 3, ..PhantomSpec::default() }
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig { in_channels: 1, num_classes: 4, base_width: 4, depth: 2, seed: 5 }
    }

    fn tiny_schedule() -> TrainingSchedule {
        TrainingSchedule {
            pretrain_epochs: 2,
            tta_init_epochs: 2,
            tta_shape_epochs: 2,
            ..TrainingSchedule::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at(0), 5e-4);
        assert_eq!(s.lr_at(19), 5e-4);
        assert!((s.lr_at(20) - 4.5e-4).abs() < 1e-18);
        assert!((s.lr_at(40) - 5e-4 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let err = pretrain(&[], &tiny_net(), &tiny_schedule(), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn pretrain_is_deterministic() {
        let subjects = generate(&tiny_spec(), 2, Domain::Source, 3).unwrap();
        let (a, ta) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        let (b, tb) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        assert_eq!(ta.last().unwrap().loss, tb.last().unwrap().loss);
        for name in a.param_names() {
            assert_eq!(a.get(name).unwrap().values(), b.get(name).unwrap().values(), "{}", name);
        }
    }

    #[test]
    fn adam_moves_parameters_toward_lower_loss() {
        // sanity: minimize (theta - 3)^2 via the Adam path
        let mut store = segnet::build(&tiny_net()).unwrap();
        let name = "stem.bn1.gamma".to_string();
        let mut optimizer = OptimizerState::new(&store, std::slice::from_ref(&name));
        for _ in 0..400 {
            let theta = store.get(&name).unwrap().values().to_vec();
            let grads: BTreeMap<String, Vec<f64>> =
                [(name.clone(), theta.iter().map(|t| 2.0 * (t - 3.0)).collect())].into();
            optimizer.step(&mut store, &grads, 0.05, 0.0).unwrap();
        }
        for t in store.get(&name).unwrap().values() {
            assert!((t - 3.0).abs() < 0.05, "{}", t);
        }
    }

    #[test]
    fn zero_lr_tent_epoch_changes_nothing() {
        let subjects = generate(&tiny_spec(), 1, Domain::Source, 3).unwrap();
        let (store, _) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        let target = &generate(&tiny_spec(), 1, Domain::Target, 4).unwrap()[0];
        let prior = DescriptorPrior::from_coarse_ratios(&tiny_spec().nominal_class_ratios()).unwrap();
        let schedule = TrainingSchedule {
            tta_init_epochs: 1,
            tta_shape_epochs: 0,
            lr: 0.0,
            ..tiny_schedule()
        };
        let outcome =
            adapt_subject(&store, target, AdaptMode::Tent, &prior, &schedule, &AdaptOptions::default()).unwrap();
        for name in store.param_names() {
            assert_eq!(
                outcome.store.get(name).unwrap().values(),
                store.get(name).unwrap().values(),
                "{}",
                name
            );
        }
        let noadap = predict(&store, &target.without_labels(), ForwardMode::Adapt).unwrap();
        assert_eq!(outcome.predictions, noadap);
    }

    #[test]
    fn frozen_parameters_are_bit_identical_after_adaptation() {
        let subjects = generate(&tiny_spec(), 1, Domain::Source, 3).unwrap();
        let (store, _) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        let target = &generate(&tiny_spec(), 1, Domain::Target, 8).unwrap()[0];
        let prior = DescriptorPrior::from_coarse_ratios(&tiny_spec().nominal_class_ratios()).unwrap();
        let outcome = adapt_subject(
            &store,
            target,
            AdaptMode::RatioCentroid,
            &prior,
            &tiny_schedule(),
            &AdaptOptions::default(),
        )
        .unwrap();
        for name in store.frozen_names() {
            let before = store.get(&name).unwrap().values();
            let after = outcome.store.get(&name).unwrap().values();
            assert_eq!(
                before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                after.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{}",
                name
            );
        }
        // and at least one adaptable parameter moved
        let moved = store.adaptable_names().iter().any(|n| {
            store.get(n).unwrap().values() != outcome.store.get(n).unwrap().values()
        });
        assert!(moved);
    }

    #[test]
    fn epoch_count_contract() {
        let subjects = generate(&tiny_spec(), 1, Domain::Source, 3).unwrap();
        let (store, _) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        let target = &generate(&tiny_spec(), 1, Domain::Target, 8).unwrap()[0];
        let prior = DescriptorPrior::from_coarse_ratios(&tiny_spec().nominal_class_ratios()).unwrap();
        let schedule = tiny_schedule();
        for (mode, want) in [
            (AdaptMode::Tent, 2),
            (AdaptMode::RatioOnly, 2),
            (AdaptMode::RatioCentroid, 4),
            (AdaptMode::RatioDist, 4),
        ] {
            let outcome =
                adapt_subject(&store, target, mode, &prior, &schedule, &AdaptOptions::default()).unwrap();
            assert_eq!(outcome.trace.len(), want, "{:?}", mode);
            if mode == AdaptMode::Tent {
                assert!(outcome.trace.iter().all(|r| r.kl == 0.0 && r.penalty == 0.0));
            }
            if mode == AdaptMode::RatioOnly {
                assert!(outcome.trace.iter().all(|r| r.penalty == 0.0));
            }
            if mode.has_shape_phase() {
                assert!(outcome.trace[..2].iter().all(|r| r.penalty == 0.0), "phase A has no penalty");
            }
        }
    }

    #[test]
    fn adaptation_is_label_blind() {
        let subjects = generate(&tiny_spec(), 1, Domain::Source, 3).unwrap();
        let (store, _) = pretrain(&subjects, &tiny_net(), &tiny_schedule(), 9).unwrap();
        let target = &generate(&tiny_spec(), 1, Domain::Target, 8).unwrap()[0];
        let prior = DescriptorPrior::from_coarse_ratios(&tiny_spec().nominal_class_ratios()).unwrap();
        let with_labels = adapt_subject(
            &store,
            target,
            AdaptMode::RatioCentroid,
            &prior,
            &tiny_schedule(),
            &AdaptOptions::default(),
        )
        .unwrap();
        let without = adapt_subject(
            &store,
            &target.without_labels(),
            AdaptMode::RatioCentroid,
            &prior,
            &tiny_schedule(),
            &AdaptOptions::default(),
        )
        .unwrap();
        assert_eq!(with_labels.predictions, without.predictions);
        for name in store.param_names() {
            assert_eq!(
                with_labels.store.get(name).unwrap().values(),
                without.store.get(name).unwrap().values()
            );
        }
    }

    #[test]
    fn trace_csv_has_the_documented_columns() {
        let rows = vec![TraceRow { epoch: 0, entropy: 1.0, kl: 0.5, penalty: 0.1, total: 1.6, lr: 5e-4 }];
        let csv = trace_csv(&rows);
        assert!(csv.starts_with("epoch,entropy_term,kl_term,penalty_term,total,lr\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
