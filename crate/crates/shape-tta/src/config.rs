//! Run configuration: a single JSON document covering the network, schedule,
//! loss weights, prior block, data generation, seeds, and mode list. Unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PhantomSpec;
use crate::engine::TrainingSchedule;
use crate::error::{Error, Result};
use crate::losses::{AdaptMode, BandForm};
use crate::priors::{DescriptorPrior, SliceTags};
use crate::segnet::NetworkConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_network")]
    pub network: NetworkConfig,
    #[serde(default)]
    pub schedule: TrainingSchedule,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_modes")]
    pub modes: Vec<ModeName>,
}

fn default_network() -> NetworkConfig {
    NetworkConfig { in_channels: 1, num_classes: 4, base_width: 8, depth: 3, seed: 17 }
}

fn default_seed() -> u64 {
    7
}

fn default_modes() -> Vec<ModeName> {
    vec![ModeName::Tent, ModeName::R, ModeName::Rc, ModeName::Rd]
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: default_network(),
            schedule: TrainingSchedule::default(),
            loss: LossConfig::default(),
            prior: PriorConfig::default(),
            data: DataConfig::default(),
            seed: default_seed(),
            precision: Precision::default(),
            modes: default_modes(),
        }
    }
}

/// Compute precision. Payload formats are f32 regardless; compute is f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub kl_weight: f64,
    pub band_delta: f64,
    pub band_form: BandForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1e-4, kl_weight: 1.0, band_delta: 0.1, band_form: BandForm::Corrected }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Per-class coarse area ratios. `None` derives them from the phantom's
    /// nominal geometry, perturbed by ±`ratio_perturb`.
    pub class_ratios: Option<Vec<f64>>,
    /// Relative perturbation applied to derived nominal ratios, keeping the
    /// prior deliberately coarse.
    pub ratio_perturb: Option<f64>,
    /// Optional weak-tag file: subject id -> slice index -> present classes.
    pub tag_file: Option<PathBuf>,
}

impl PriorConfig {
    pub fn perturb(&self) -> f64 {
        self.ratio_perturb.unwrap_or(0.2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub source_subjects: usize,
    pub target_subjects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { phantom: PhantomSpec::default(), source_subjects: 10, target_subjects: 6 }
    }
}

/// Adaptation mode names as they appear in configs and CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Tent,
    R,
    Rc,
    Rd,
}

impl ModeName {
    pub fn to_mode(self) -> AdaptMode {
        match self {
            ModeName::Tent => AdaptMode::Tent,
            ModeName::R => AdaptMode::RatioOnly,
            ModeName::Rc => AdaptMode::RatioCentroid,
            ModeName::Rd => AdaptMode::RatioDist,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.phantom.validate()?;
        if self.network.num_classes != self.data.phantom.num_classes() {
            return Err(Error::Config(format!(
                "network has {} classes but the phantom family produces {}",
                self.network.num_classes,
                self.data.phantom.num_classes()
            )));
        }
        if let Some(ratios) = &self.prior.class_ratios {
            if ratios.len() != self.network.num_classes {
                return Err(Error::Config(format!(
                    "prior.class_ratios has {} entries for {} classes",
                    ratios.len(),
                    self.network.num_classes
                )));
            }
        }
        if !(0.0..1.0).contains(&self.loss.band_delta) || self.loss.band_delta == 0.0 {
            return Err(Error::Config("loss.band_delta must lie in (0, 1)".into()));
        }
        if self.loss.lambda < 0.0 || self.loss.kl_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Canonical JSON used for the manifest's config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.canonical_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{:016x}", h)
    }

    /// The coarse class-ratio prior: explicit ratios when configured, else
    /// the phantom's nominal areas perturbed by ±`ratio_perturb` (seeded).
    pub fn ratio_prior(&self) -> Result<Vec<f64>> {
        if let Some(r) = &self.prior.class_ratios {
            return Ok(r.clone());
        }
        let nominal = self.data.phantom.nominal_class_ratios();
        let perturb = self.prior.perturb();
        let mut state = crate::data::derive_seed(self.seed, "ratio-prior");
        let mut coarse = Vec::with_capacity(nominal.len());
        for r in &nominal {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let unit = (state >> 33) as f64 / (1u64 << 31) as f64 * 2.0 - 1.0;
            coarse.push(r * (1.0 + perturb * unit));
        }
        Ok(coarse)
    }

    /// Build the descriptor prior for one subject, loading tags if configured.
    pub fn descriptor_prior(&self, subject_id: &str) -> Result<DescriptorPrior> {
        let mut prior = DescriptorPrior::from_coarse_ratios(&self.ratio_prior()?)?;
        if let Some(tag_path) = &self.prior.tag_file {
            let tags = load_tag_file(tag_path, subject_id, self.network.num_classes)?;
            prior.tags = tags;
        }
        Ok(prior)
    }
}

/// Tag file schema: `{ "<subject>": { "<slice>": [present class ids] } }`.
/// Slices not listed keep every class present.
pub fn load_tag_file(path: &Path, subject_id: &str, num_classes: usize) -> Result<Option<SliceTags>> {
    let text = std::fs::read_to_string(path)?;
    let table: BTreeMap<String, BTreeMap<String, Vec<usize>>> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("tag file {}: {}", path.display(), e)))?;
    let Some(per_slice) = table.get(subject_id) else {
        return Ok(None);
    };
    let max_slice = per_slice
        .keys()
        .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad slice index `{}`", s))))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let mut present = vec![vec![true; num_classes]; max_slice + 1];
    for (slice, classes) in per_slice {
        let idx: usize = slice.parse().expect("validated above");
        let row = &mut present[idx];
        for (k, p) in row.iter_mut().enumerate() {
            *p = k == 0 || classes.contains(&k);
        }
    }
    Ok(Some(SliceTags::new(present)))
}
