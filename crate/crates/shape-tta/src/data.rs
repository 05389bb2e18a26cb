//! Synthetic multi-class phantom subjects with a controllable source-to-target
//! intensity shift, affine augmentation, per-subject normalization, and the
//! volume file format.
//!
//! The cardiac-like family renders three foreground structures per slice: a
//! central disk, an annulus around it, and a smaller off-center disk. The
//! target domain shares the exact geometry (and therefore labels) of the
//! matching source seed; only intensities change: one structure's contrast is
//! inverted, a gamma curve is applied, and stronger noise is added.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const VOLUME_MAGIC: &[u8; 8] = b"SHTTAVOL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Phantom geometry family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhantomFamily {
    /// Background, central disk, annulus, off-center disk (K = 4).
    #[default]
    Cardiac,
    /// Background and one elliptical blob (K = 2).
    Blob,
}

/// Generator parameters. Defaults give 64×64×16 subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub family: PhantomFamily,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Per-class rendering intensities, background first.
    pub palette: Vec<f64>,
    /// Class whose contrast is inverted (v -> 1 - v) in the target domain.
    pub invert_class: usize,
    /// Gamma applied to target intensities.
    pub gamma: f64,
    pub noise_source: f64,
    pub noise_target: f64,
    /// Center jitter in pixels around the nominal layout.
    pub center_jitter: f64,
    /// Relative radius jitter.
    pub radius_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            family: PhantomFamily::Cardiac,
            slices: 16,
            height: 64,
            width: 64,
            palette: vec![0.30, 0.90, 0.60, 0.78],
            invert_class: 3,
            gamma: 0.5,
            noise_source: 0.02,
            noise_target: 0.05,
            center_jitter: 3.0,
            radius_jitter: 0.10,
        }
    }
}

impl PhantomSpec {
    pub fn blob() -> Self {
        PhantomSpec {
            family: PhantomFamily::Blob,
            palette: vec![0.25, 0.75],
            invert_class: 1,
            ..PhantomSpec::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.family {
            PhantomFamily::Cardiac => 4,
            PhantomFamily::Blob => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.len() != self.num_classes() {
            return Err(Error::Config(format!(
                "palette has {} entries for {} classes",
                self.palette.len(),
                self.num_classes()
            )));
        }
        if self.invert_class >= self.num_classes() {
            return Err(Error::Config("invert_class out of range".into()));
        }
        if self.slices == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::Config("phantom volume too small".into()));
        }
        // Nominal cardiac layout: central disk + annulus must stay clear of
        // the off-center disk even under maximal jitter. The off-center disk
        // is placed relative to the central one, so only its own extra jitter
        // shrinks the center distance.
        if self.family == PhantomFamily::Cardiac {
            let outer = self.lv_radius() * (1.0 + self.radius_jitter) + self.ring_thickness();
            let aa = self.aa_radius() * (1.0 + self.radius_jitter);
            let min_dist = self.aa_offset() - 0.5 * self.center_jitter * std::f64::consts::SQRT_2;
            if outer + aa + 1.0 > min_dist {
                return Err(Error::Geometry(format!(
                    "structures can overlap: ring {:.1} + disk {:.1} + 1 > min center distance {:.1}",
                    outer, aa, min_dist
                )));
            }
        }
        Ok(())
    }

    fn lv_radius(&self) -> f64 {
        self.height.min(self.width) as f64 * 0.155
    }

    fn ring_thickness(&self) -> f64 {
        self.height.min(self.width) as f64 * 0.062
    }

    fn aa_radius(&self) -> f64 {
        self.height.min(self.width) as f64 * 0.078
    }

    fn aa_offset(&self) -> f64 {
        self.height.min(self.width) as f64 * 0.38
    }

    /// Depth profile: structures shrink toward the first and last slices.
    fn slice_scale(&self, slice: usize) -> f64 {
        if self.slices == 1 {
            return 1.0;
        }
        let c = (self.slices - 1) as f64 / 2.0;
        let z = (slice as f64 - c) / (c + 1.0);
        0.75 + 0.25 * (1.0 - z * z).max(0.0).sqrt()
    }

    /// Expected class-area fractions per slice from the nominal layout
    /// (mid-jitter radii, averaged over the slice profile).
    pub fn nominal_class_ratios(&self) -> Vec<f64> {
        let area = (self.height * self.width) as f64;
        let mean_scale2 = (0..self.slices)
            .map(|s| self.slice_scale(s).powi(2))
            .sum::<f64>()
            / self.slices as f64;
        let pi = std::f64::consts::PI;
        match self.family {
            PhantomFamily::Cardiac => {
                let r_lv = self.lv_radius();
                let r_out = r_lv + self.ring_thickness();
                let r_aa = self.aa_radius();
                let lv = pi * r_lv * r_lv * mean_scale2 / area;
                let myo = pi * (r_out * r_out - r_lv * r_lv) * mean_scale2 / area;
                let aa = pi * r_aa * r_aa * mean_scale2 / area;
                vec![1.0 - lv - myo - aa, lv, myo, aa]
            }
            PhantomFamily::Blob => {
                let rx = self.height.min(self.width) as f64 * 0.19;
                let ry = rx * 0.75;
                let blob = pi * rx * ry * mean_scale2 / area;
                vec![1.0 - blob, blob]
            }
        }
    }
}

/// One subject: an intensity volume with optional labels and a header.
#[derive(Debug, Clone)]
pub struct SubjectVolume {
    pub header: VolumeHeader,
    /// N*H*W intensities, slice-major; empty when `header.has_image` is false.
    pub intensities: Vec<f32>,
    /// N*H*W class indices, present when `header.has_labels`.
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub subject_id: String,
    pub domain: Domain,
    pub seed: u64,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Voxel spacing, unit pixels.
    pub spacing: [f64; 3],
    pub has_image: bool,
    pub has_labels: bool,
}

impl SubjectVolume {
    pub fn plane(&self) -> usize {
        self.header.height * self.header.width
    }

    pub fn voxels(&self) -> usize {
        self.header.slices * self.plane()
    }

    /// Intensities normalized to zero mean and unit variance over the subject,
    /// as f64 ready for the network.
    pub fn normalized_intensities(&self) -> Vec<f64> {
        let n = self.intensities.len() as f64;
        let mean = self.intensities.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = self
            .intensities
            .iter()
            .map(|v| {
                let d = *v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-12);
        self.intensities.iter().map(|v| (*v as f64 - mean) / std).collect()
    }

    /// Copy with the label volume removed (what adaptation must behave like).
    pub fn without_labels(&self) -> SubjectVolume {
        let mut header = self.header.clone();
        header.has_labels = false;
        SubjectVolume { header, intensities: self.intensities.clone(), labels: None }
    }
}

fn disk(labels: &mut [u8], h: usize, w: usize, cu: f64, cv: f64, r: f64, class: u8) {
    for u in 0..h {
        for v in 0..w {
            let du = u as f64 - cu;
            let dv = v as f64 - cv;
            if du * du + dv * dv <= r * r {
                labels[u * w + v] = class;
            }
        }
    }
}

fn annulus(labels: &mut [u8], h: usize, w: usize, cu: f64, cv: f64, r_in: f64, r_out: f64, class: u8) {
    for u in 0..h {
        for v in 0..w {
            let du = u as f64 - cu;
            let dv = v as f64 - cv;
            let d2 = du * du + dv * dv;
            if d2 > r_in * r_in && d2 <= r_out * r_out {
                labels[u * w + v] = class;
            }
        }
    }
}

fn ellipse(labels: &mut [u8], h: usize, w: usize, cu: f64, cv: f64, ru: f64, rv: f64, rot: f64, class: u8) {
    let (sin, cos) = rot.sin_cos();
    for u in 0..h {
        for v in 0..w {
            let du = u as f64 - cu;
            let dv = v as f64 - cv;
            let a = cos * du + sin * dv;
            let b = -sin * du + cos * dv;
            if (a / ru).powi(2) + (b / rv).powi(2) <= 1.0 {
                labels[u * w + v] = class;
            }
        }
    }
}

/// Deterministic per-purpose sub-seed.
pub fn derive_seed(base: u64, salt: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x100000001b3);
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generate `n_subjects` subjects of one domain. A (spec, seed, index) triple
/// fixes the geometry, so source and target volumes with the same seed share
/// labels exactly.
pub fn generate(spec: &PhantomSpec, n_subjects: usize, domain: Domain, seed: u64) -> Result<Vec<SubjectVolume>> {
    spec.validate()?;
    (0..n_subjects).map(|i| generate_subject(spec, i, domain, seed)).collect()
}

fn generate_subject(spec: &PhantomSpec, index: usize, domain: Domain, seed: u64) -> Result<SubjectVolume> {
    let (h, w, n) = (spec.height, spec.width, spec.slices);
    let plane = h * w;
    // Geometry depends only on (seed, index): identical across domains.
    let geo_seed = derive_seed(seed, &format!("geometry/{}", index));
    let mut geo = ChaCha8Rng::seed_from_u64(geo_seed);
    let jitter = |rng: &mut ChaCha8Rng, amp: f64| (rng.random::<f64>() * 2.0 - 1.0) * amp;

    let mut labels = vec![0u8; n * plane];
    match spec.family {
        PhantomFamily::Cardiac => {
            let cu = h as f64 / 2.0 + jitter(&mut geo, spec.center_jitter);
            let cv = w as f64 / 2.0 + jitter(&mut geo, spec.center_jitter);
            let r_lv = spec.lv_radius() * (1.0 + jitter(&mut geo, spec.radius_jitter));
            let ring = spec.ring_thickness();
            let dir = std::f64::consts::FRAC_PI_4 + jitter(&mut geo, 0.3);
            let au = cu - spec.aa_offset() * dir.sin() + jitter(&mut geo, spec.center_jitter * 0.5);
            let av = cv + spec.aa_offset() * dir.cos() + jitter(&mut geo, spec.center_jitter * 0.5);
            let r_aa = spec.aa_radius() * (1.0 + jitter(&mut geo, spec.radius_jitter));
            for slice in 0..n {
                let sc = spec.slice_scale(slice);
                let lab = &mut labels[slice * plane..(slice + 1) * plane];
                annulus(lab, h, w, cu, cv, r_lv * sc, (r_lv + ring) * sc, 2);
                disk(lab, h, w, cu, cv, r_lv * sc, 1);
                disk(lab, h, w, au, av, r_aa * sc, 3);
            }
        }
        PhantomFamily::Blob => {
            let cu = h as f64 / 2.0 + jitter(&mut geo, spec.center_jitter * 1.3);
            let cv = w as f64 / 2.0 + jitter(&mut geo, spec.center_jitter * 1.3);
            let ru = h.min(w) as f64 * 0.19 * (1.0 + jitter(&mut geo, spec.radius_jitter * 1.5));
            let rv = ru * (0.75 + jitter(&mut geo, 0.1));
            let rot = jitter(&mut geo, std::f64::consts::FRAC_PI_3);
            for slice in 0..n {
                let sc = spec.slice_scale(slice);
                let lab = &mut labels[slice * plane..(slice + 1) * plane];
                ellipse(lab, h, w, cu, cv, ru * sc, rv * sc, rot, 1);
            }
        }
    }

    // Intensities: palette + noise; the target additionally inverts one
    // structure's contrast and bends the curve with gamma.
    let mut palette = spec.palette.clone();
    if domain == Domain::Target {
        palette[spec.invert_class] = 1.0 - palette[spec.invert_class];
    }
    let noise_amp = match domain {
        Domain::Source => spec.noise_source,
        Domain::Target => spec.noise_target,
    };
    let noise_seed = derive_seed(seed, &format!("noise/{}/{}", domain, index));
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut intensities = Vec::with_capacity(n * plane);
    for lab in &labels {
        let mut v = palette[*lab as usize];
        if domain == Domain::Target {
            v = v.clamp(0.0, 1.0).powf(spec.gamma);
        }
        v += noise_amp * gaussian(&mut noise);
        intensities.push(v as f32);
    }

    let header = VolumeHeader {
        subject_id: format!("{}_{:02}", domain, index),
        domain,
        seed: geo_seed,
        slices: n,
        height: h,
        width: w,
        spacing: [1.0, 1.0, 1.0],
        has_image: true,
        has_labels: true,
    };
    Ok(SubjectVolume { header, intensities, labels: Some(labels) })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random affine parameters used by source-domain augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation: f64,
    pub scale: f64,
    pub translate_u: f64,
    pub translate_v: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams =
        AffineParams { rotation: 0.0, scale: 1.0, translate_u: 0.0, translate_v: 0.0 };

    /// Rotation ±10°, scale 0.9–1.1, translation ±4 px.
    pub fn sample(seed: u64) -> AffineParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| rng.random::<f64>() * 2.0 - 1.0;
        AffineParams {
            rotation: unit(&mut rng) * 10.0f64.to_radians(),
            scale: 1.0 + unit(&mut rng) * 0.1,
            translate_u: unit(&mut rng) * 4.0,
            translate_v: unit(&mut rng) * 4.0,
        }
    }
}

/// Apply one affine transform to every slice of the subject, image and labels
/// alike: bilinear sampling for intensities, nearest-neighbor for labels,
/// clamp-to-edge at the borders. The transform is about the slice center.
pub fn augment_affine(volume: &SubjectVolume, seed: u64) -> SubjectVolume {
    let params = AffineParams::sample(seed);
    apply_affine(volume, &params)
}

pub fn apply_affine(volume: &SubjectVolume, params: &AffineParams) -> SubjectVolume {
    if *params == AffineParams::IDENTITY {
        return volume.clone();
    }
    let (n, h, w) = (volume.header.slices, volume.header.height, volume.header.width);
    let plane = h * w;
    let (cu, cv) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Inverse map: for each output pixel, sample the input at A^-1 * p.
    let (sin, cos) = params.rotation.sin_cos();
    let inv_scale = 1.0 / params.scale;

    let mut intensities = vec![0.0f32; volume.intensities.len()];
    let mut labels = volume.labels.as_ref().map(|l| vec![0u8; l.len()]);

    for slice in 0..n {
        let img = &volume.intensities[slice * plane..(slice + 1) * plane];
        let lab = volume.labels.as_ref().map(|l| &l[slice * plane..(slice + 1) * plane]);
        for u in 0..h {
            for v in 0..w {
                let du = u as f64 - cu - params.translate_u;
                let dv = v as f64 - cv - params.translate_v;
                let su = (cos * du + sin * dv) * inv_scale + cu;
                let sv = (-sin * du + cos * dv) * inv_scale + cv;

                // bilinear with clamp-to-edge
                let u0 = su.floor().clamp(0.0, (h - 1) as f64);
                let v0 = sv.floor().clamp(0.0, (w - 1) as f64);
                let u1 = (u0 + 1.0).min((h - 1) as f64);
                let v1 = (v0 + 1.0).min((w - 1) as f64);
                let fu = (su - u0).clamp(0.0, 1.0);
                let fv = (sv - v0).clamp(0.0, 1.0);
                let at = |uu: f64, vv: f64| img[uu as usize * w + vv as usize] as f64;
                let val = (1.0 - fu) * ((1.0 - fv) * at(u0, v0) + fv * at(u0, v1))
                    + fu * ((1.0 - fv) * at(u1, v0) + fv * at(u1, v1));
                intensities[slice * plane + u * w + v] = val as f32;

                if let (Some(src), Some(dst)) = (lab, labels.as_mut()) {
                    let nu = su.round().clamp(0.0, (h - 1) as f64) as usize;
                    let nv = sv.round().clamp(0.0, (w - 1) as f64) as usize;
                    dst[slice * plane + u * w + v] = src[nu * w + nv];
                }
            }
        }
    }
    SubjectVolume { header: volume.header.clone(), intensities, labels }
}

// ----- volume file I/O -----

impl SubjectVolume {
    /// Write as: 8-byte magic, u64 LE header length, JSON header, f32 LE
    /// image payload (if any), u8 label payload (if any).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header_bytes = serde_json::to_vec(&self.header)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(VOLUME_MAGIC)?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        if self.header.has_image {
            if self.intensities.len() != self.voxels() {
                return Err(Error::VolumeFormat(format!(
                    "image payload has {} voxels, header says {}",
                    self.intensities.len(),
                    self.voxels()
                )));
            }
            for v in &self.intensities {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        if self.header.has_labels {
            let labels = self
                .labels
                .as_ref()
                .ok_or_else(|| Error::VolumeFormat("header claims labels but none present".into()))?;
            if labels.len() != self.voxels() {
                return Err(Error::VolumeFormat("label payload length mismatch".into()));
            }
            file.write_all(labels)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SubjectVolume> {
        let mut file = std::fs::File::open(path)?;
        let header = read_header(&mut file)?;
        let voxels = header.slices * header.height * header.width;
        let mut intensities = Vec::new();
        if header.has_image {
            let mut buf = vec![0u8; voxels * 4];
            file.read_exact(&mut buf)
                .map_err(|_| Error::VolumeFormat("truncated image payload".into()))?;
            intensities = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
        }
        let labels = if header.has_labels {
            let mut buf = vec![0u8; voxels];
            file.read_exact(&mut buf)
                .map_err(|_| Error::VolumeFormat("truncated label payload".into()))?;
            Some(buf)
        } else {
            None
        };
        let mut rest = Vec::new();
        file.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::VolumeFormat(format!("{} trailing bytes after payload", rest.len())));
        }
        Ok(SubjectVolume { header, intensities, labels })
    }

    /// Read only the header, skipping payloads.
    pub fn inspect(path: &Path) -> Result<VolumeHeader> {
        let mut file = std::fs::File::open(path)?;
        read_header(&mut file)
    }
}

fn read_header(file: &mut std::fs::File) -> Result<VolumeHeader> {
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::VolumeFormat("file too short for magic".into()))?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::VolumeFormat("bad magic; not a volume file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::VolumeFormat("file too short for header length".into()))?;
    let len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::VolumeFormat("truncated header".into()))?;
    Ok(serde_json::from_slice(&header_bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate(&spec, 2, Domain::Source, 7).unwrap();
        let b = generate(&spec, 2, Domain::Source, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.intensities, y.intensities);
            assert_eq!(x.labels, y.labels);
        }
        let c = generate(&spec, 1, Domain::Source, 8).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn same_seed_domains_share_labels_but_not_intensities() {
        let spec = PhantomSpec::default();
        let src = generate(&spec, 3, Domain::Source, 42).unwrap();
        let tgt = generate(&spec, 3, Domain::Target, 42).unwrap();
        for (s, t) in src.iter().zip(&tgt) {
            assert_eq!(s.labels, t.labels);
            let mad: f64 = s
                .intensities
                .iter()
                .zip(&t.intensities)
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / s.intensities.len() as f64;
            assert!(mad > 0.05, "domain shift too weak: MAD {}", mad);
        }
    }

    #[test]
    fn generated_ratios_sit_near_the_nominal_bands() {
        let spec = PhantomSpec::default();
        let subjects = generate(&spec, 6, Domain::Source, 3).unwrap();
        let nominal = spec.nominal_class_ratios();
        let mut counts = vec![0usize; spec.num_classes()];
        let mut total = 0usize;
        for s in &subjects {
            for l in s.labels.as_ref().unwrap() {
                counts[*l as usize] += 1;
                total += 1;
            }
        }
        for k in 0..spec.num_classes() {
            let measured = counts[k] as f64 / total as f64;
            let rel = (measured - nominal[k]).abs() / nominal[k];
            assert!(rel < 0.30, "class {}: measured {:.4} vs nominal {:.4}", k, measured, nominal[k]);
        }
        // all foreground classes actually appear
        assert!(counts[1..].iter().all(|c| *c > 0));
    }

    #[test]
    fn blob_family_has_two_classes() {
        let spec = PhantomSpec::blob();
        let subjects = generate(&spec, 1, Domain::Target, 5).unwrap();
        let labels = subjects[0].labels.as_ref().unwrap();
        assert!(labels.iter().all(|l| *l < 2));
        assert!(labels.iter().any(|l| *l == 1));
    }

    #[test]
    fn overlapping_spec_is_rejected() {
        let spec = PhantomSpec { center_jitter: 30.0, ..PhantomSpec::default() };
        assert!(matches!(generate(&spec, 1, Domain::Source, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn normalization_is_zero_mean_unit_variance() {
        let spec = PhantomSpec::default();
        for domain in [Domain::Source, Domain::Target] {
            let s = &generate(&spec, 1, domain, 9).unwrap()[0];
            let norm = s.normalized_intensities();
            let n = norm.len() as f64;
            let mean = norm.iter().sum::<f64>() / n;
            let var = norm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn identity_affine_is_a_no_op() {
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Source, 1).unwrap()[0];
        let t = apply_affine(s, &AffineParams::IDENTITY);
        assert_eq!(s.intensities, t.intensities);
        assert_eq!(s.labels, t.labels);
    }

    #[test]
    fn augmentation_preserves_the_label_set() {
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Source, 2).unwrap()[0];
        let t = augment_affine(s, 77);
        let classes: std::collections::BTreeSet<u8> = t.labels.as_ref().unwrap().iter().copied().collect();
        for c in &classes {
            assert!(*c < spec.num_classes() as u8);
        }
        assert_ne!(s.intensities, t.intensities);
    }

    fn mask_centroid(labels: &[u8], h: usize, w: usize, class: u8) -> [f64; 2] {
        let mut m00 = 0.0;
        let mut m10 = 0.0;
        let mut m01 = 0.0;
        for u in 0..h {
            for v in 0..w {
                if labels[u * w + v] == class {
                    m00 += 1.0;
                    m10 += u as f64;
                    m01 += v as f64;
                }
            }
        }
        [m10 / m00, m01 / m00]
    }

    #[test]
    fn image_and_labels_move_with_the_same_matrix() {
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Source, 4).unwrap()[0];
        let (h, w) = (spec.height, spec.width);

        // translation-only: label centroid must shift exactly
        let shift = AffineParams { rotation: 0.0, scale: 1.0, translate_u: 3.0, translate_v: -2.0 };
        let t = apply_affine(s, &shift);
        let c0 = mask_centroid(&s.labels.as_ref().unwrap()[..h * w], h, w, 1);
        let c1 = mask_centroid(&t.labels.as_ref().unwrap()[..h * w], h, w, 1);
        assert!((c1[0] - c0[0] - 3.0).abs() < 1e-9);
        assert!((c1[1] - c0[1] + 2.0).abs() < 1e-9);

        // rotation: label centroid must follow the predicted rotated position
        let rot = AffineParams { rotation: 0.15, scale: 1.0, translate_u: 0.0, translate_v: 0.0 };
        let r = apply_affine(s, &rot);
        let cr = mask_centroid(&r.labels.as_ref().unwrap()[..h * w], h, w, 3);
        let c3 = mask_centroid(&s.labels.as_ref().unwrap()[..h * w], h, w, 3);
        let (cu, cv) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = 0.15f64.sin_cos();
        // forward map of the input centroid (inverse of the sampling map)
        let du = c3[0] - cu;
        let dv = c3[1] - cv;
        let want = [cu + cos * du - sin * dv, cv + sin * du + cos * dv];
        assert!((cr[0] - want[0]).abs() < 0.5, "{} vs {}", cr[0], want[0]);
        assert!((cr[1] - want[1]).abs() < 0.5, "{} vs {}", cr[1], want[1]);
    }

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Target, 6).unwrap()[0];
        let path = dir.path().join("subject.vol");
        s.save(&path).unwrap();
        let loaded = SubjectVolume::load(&path).unwrap();
        assert_eq!(loaded.header, s.header);
        assert_eq!(loaded.intensities.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   s.intensities.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(loaded.labels, s.labels);
    }

    #[test]
    fn truncated_volume_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Source, 6).unwrap()[0];
        let path = dir.path().join("subject.vol");
        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(SubjectVolume::load(&path), Err(Error::VolumeFormat(_))));
    }

    #[test]
    fn header_inspection_skips_payload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let s = &generate(&spec, 1, Domain::Source, 6).unwrap()[0];
        let path = dir.path().join("subject.vol");
        s.save(&path).unwrap();
        // header must be readable even when the payload is truncated
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let header = SubjectVolume::inspect(&path).unwrap();
        assert_eq!(header, s.header);
        assert_eq!(header.slices, 16);
    }
}
