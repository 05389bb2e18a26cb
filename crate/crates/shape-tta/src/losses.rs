//! Adaptation and pretraining objectives: pixel-wise cross-entropy, weighted
//! Shannon entropy, class-ratio KL matching, and the quadratic band penalty
//! on shape descriptors, assembled per adaptation mode.

use crate::error::{Error, Result};
use crate::moments::{self, CoordinateGrids};
use crate::priors::{DescriptorPrior, MomentDescriptor, EPS_LOG};
use crate::tensor::{Tape, Var};

/// Which terms the adaptation objective carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Entropy only (ablation of both shape terms).
    Tent,
    /// Entropy + class-ratio KL.
    RatioOnly,
    /// Entropy + KL + centroid band penalty.
    RatioCentroid,
    /// Entropy + KL + distance-to-centroid band penalty.
    RatioDist,
}

impl AdaptMode {
    pub fn moment_descriptor(&self) -> Option<MomentDescriptor> {
        match self {
            AdaptMode::RatioCentroid => Some(MomentDescriptor::Centroid),
            AdaptMode::RatioDist => Some(MomentDescriptor::DistToCentroid),
            _ => None,
        }
    }

    /// Modes with a second, shape-constrained adaptation phase.
    pub fn has_shape_phase(&self) -> bool {
        self.moment_descriptor().is_some()
    }

    pub fn label(&self) -> &'static str {
        match self {
            AdaptMode::Tent => "Tent",
            AdaptMode::RatioOnly => "TTAS_R",
            AdaptMode::RatioCentroid => "TTAS_RC",
            AdaptMode::RatioDist => "TTAS_RD",
        }
    }
}

/// Shape of the quadratic penalty relaxing the band constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandForm {
    /// Zero inside [(1-delta)m, (1+delta)m]: the two-sided band relaxation.
    #[default]
    Corrected,
    /// Hinge arguments as literally printed with the band edges swapped;
    /// non-zero even at m = prior. Kept for comparison only.
    Printed,
}

/// Per-class weights and term coefficients of the adaptation objective.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Simplex class weights for the entropy term.
    pub class_weights: Vec<f64>,
    /// Penalty coefficient lambda.
    pub lambda: f64,
    /// KL term coefficient.
    pub kl_weight: f64,
    /// Relative half-width delta of the penalty band.
    pub band_delta: f64,
    pub band_form: BandForm,
}

impl LossWeights {
    pub fn new(class_weights: Vec<f64>) -> Self {
        LossWeights {
            class_weights,
            lambda: 1e-4,
            kl_weight: 1.0,
            band_delta: 0.1,
            band_form: BandForm::Corrected,
        }
    }
}

/// Scalar terms of one objective evaluation; `total_var` is the node to
/// differentiate.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub entropy_term: f64,
    pub kl_term: f64,
    pub penalty_term: f64,
    pub total: f64,
    pub total_var: Var,
}

/// Mean pixel-wise cross-entropy -sum_k y_k log s_k over a one-hot target
/// and a softmax prediction of identical B×K×H×W shape.
pub fn cross_entropy(tape: &mut Tape, one_hot: Var, softmax: Var) -> Result<Var> {
    if tape.shape(one_hot) != tape.shape(softmax) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{:?} vs {:?}", tape.shape(one_hot), tape.shape(softmax)),
        });
    }
    let shape = tape.shape(softmax).to_vec();
    let pixels = (shape[0] * shape[2] * shape[3]) as f64;
    let clamped = tape.clamp_min(softmax, EPS_LOG);
    let logs = tape.log(clamped);
    let picked = tape.mul(one_hot, logs)?;
    let sum = tape.sum_all(picked);
    Ok(tape.mul_scalar(sum, -1.0 / pixels))
}

/// Weighted Shannon entropy -sum_k nu_k s_k log s_k, averaged over pixels and
/// summed over the slices of the batch.
pub fn weighted_entropy(tape: &mut Tape, softmax: Var, class_weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(softmax).to_vec();
    if shape.len() != 4 || shape[1] != class_weights.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_entropy",
            detail: format!("softmax {:?} vs {} class weights", shape, class_weights.len()),
        });
    }
    let area = (shape[2] * shape[3]) as f64;
    let clamped = tape.clamp_min(softmax, EPS_LOG);
    let logs = tape.log(clamped);
    let plogp = tape.mul(softmax, logs)?;
    let weighted = tape.scale_channels(plogp, class_weights)?;
    let sum = tape.sum_all(weighted);
    Ok(tape.mul_scalar(sum, -1.0 / area))
}

/// KL(R || Rbar) between a predicted ratio vector (scalar vars) and a fixed
/// prior, both over the full K-simplex. Zero prior entries are clamped at the
/// log floor, which is what drives tagged-out classes toward zero mass.
pub fn ratio_kl(tape: &mut Tape, ratios: &[Var], prior: &[f64]) -> Result<Var> {
    if ratios.len() != prior.len() {
        return Err(Error::PriorClassMismatch {
            prior_classes: prior.len(),
            num_classes: ratios.len(),
        });
    }
    let mut acc: Option<Var> = None;
    for (r, pbar) in ratios.iter().zip(prior.iter()) {
        let clamped = tape.clamp_min(*r, EPS_LOG);
        let log_r = tape.log(clamped);
        let log_ratio = tape.add_scalar(log_r, -pbar.max(EPS_LOG).ln());
        let term = tape.mul(*r, log_ratio)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("ratio vector is non-empty"))
}

/// Quadratic band penalty F(m, mbar): zero while m stays inside the band
/// around the prior, growing quadratically outside. C1-continuous.
pub fn band_penalty(tape: &mut Tape, m: Var, prior: f64, delta: f64, form: BandForm) -> Var {
    let (lo, hi) = match form {
        BandForm::Corrected => ((1.0 - delta) * prior, (1.0 + delta) * prior),
        // hinges as printed: [m - (1-delta)mbar]+^2 + [(1+delta)mbar - m]+^2
        BandForm::Printed => ((1.0 + delta) * prior, (1.0 - delta) * prior),
    };
    let over = tape.add_scalar(m, -hi);
    let over = tape.relu(over);
    let neg_m = tape.mul_scalar(m, -1.0);
    let under = tape.add_scalar(neg_m, lo);
    let under = tape.relu(under);
    let over2 = tape.mul(over, over).expect("same shape");
    let under2 = tape.mul(under, under).expect("same shape");
    tape.add(over2, under2).expect("same shape")
}

/// Assemble the adaptation objective for a batch of slices.
///
/// `softmax` is B×K×H×W; `slice_ids[b]` is the global slice index of batch
/// row b (for per-slice tags). Entropy is averaged per pixel and summed over
/// slices; KL and penalty are per-slice sums. The penalty covers foreground
/// classes only, applied per spatial component, and is skipped for a
/// (slice, class) whose predicted mass is below eps^k, whose tag marks it
/// absent, or whose moment prior is not yet available.
pub fn ttas_objective(
    tape: &mut Tape,
    softmax: Var,
    slice_ids: &[usize],
    prior: &DescriptorPrior,
    weights: &LossWeights,
    mode: AdaptMode,
    grids: &CoordinateGrids,
) -> Result<LossBreakdown> {
    let shape = tape.shape(softmax).to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "ttas_objective",
            detail: format!("expected B×K×H×W softmax, got {:?}", shape),
        });
    }
    let (batch, k) = (shape[0], shape[1]);
    if batch != slice_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "ttas_objective",
            detail: format!("{} batch rows but {} slice ids", batch, slice_ids.len()),
        });
    }
    if prior.num_classes() != k {
        return Err(Error::PriorClassMismatch { prior_classes: prior.num_classes(), num_classes: k });
    }

    let entropy = weighted_entropy(tape, softmax, &weights.class_weights)?;
    if mode == AdaptMode::Tent {
        // Ablation of both shape terms: the objective is the entropy node itself.
        return Ok(LossBreakdown {
            entropy_term: tape.scalar(entropy),
            kl_term: 0.0,
            penalty_term: 0.0,
            total: tape.scalar(entropy),
            total_var: entropy,
        });
    }

    // Class-ratio KL, per slice against its effective prior.
    let mut ratios_per_slice = Vec::with_capacity(batch);
    let mut kl_sum: Option<Var> = None;
    for (b, slice_id) in slice_ids.iter().enumerate() {
        let ratios = moments::class_ratio(tape, softmax, b)?;
        let eff = prior.effective_ratio(*slice_id);
        let kl = ratio_kl(tape, &ratios, &eff)?;
        kl_sum = Some(match kl_sum {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
        ratios_per_slice.push(ratios);
    }
    let kl_sum = kl_sum.expect("non-empty batch");

    // Shape band penalty for RC/RD in the shape phase.
    let mut penalty_sum: Option<Var> = None;
    if let Some(descriptor) = mode.moment_descriptor() {
        if weights.lambda != 0.0 {
            for (b, slice_id) in slice_ids.iter().enumerate() {
                for class in 1..k {
                    if !prior.is_tagged_present(*slice_id, class) {
                        continue;
                    }
                    let Some(target) = prior.moment(descriptor, class) else {
                        continue;
                    };
                    // Skip slices where the class has effectively vanished;
                    // its descriptor would be noise.
                    if tape.scalar(ratios_per_slice[b][class]) < prior.epsilon[class] {
                        continue;
                    }
                    let map = tape.select_map(softmax, b, class)?;
                    let values = match descriptor {
                        MomentDescriptor::Centroid => moments::centroid(tape, map, grids)?,
                        MomentDescriptor::DistToCentroid => moments::dist_to_centroid(tape, map, grids)?,
                    };
                    for (component, m) in values.into_iter().enumerate() {
                        let f = band_penalty(tape, m, target[component], weights.band_delta, weights.band_form);
                        penalty_sum = Some(match penalty_sum {
                            Some(a) => tape.add(a, f)?,
                            None => f,
                        });
                    }
                }
            }
        }
    }

    let kl_term = tape.scalar(kl_sum);
    let penalty_term = penalty_sum.map(|p| tape.scalar(p)).unwrap_or(0.0);

    let mut total = entropy;
    if weights.kl_weight != 0.0 {
        let scaled = tape.mul_scalar(kl_sum, weights.kl_weight);
        total = tape.add(total, scaled)?;
    }
    if let Some(p) = penalty_sum {
        let scaled = tape.mul_scalar(p, weights.lambda);
        total = tape.add(total, scaled)?;
    }

    Ok(LossBreakdown {
        entropy_term: tape.scalar(entropy),
        kl_term,
        penalty_term,
        total: tape.scalar(total),
        total_var: total,
    })
}
