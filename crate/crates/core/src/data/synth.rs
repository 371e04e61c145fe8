//! Seeded synthetic visible/infrared re-identification data.
//!
//! Every identity owns a latent vector. All channels of an image render it
//! through a shared structure projection. Visible channels add their own
//! color projection, built so that the luminance mix of the three cancels.
//! Infrared images instead add a thermal projection, partly shared with the
//! red color projection, and replicate the result over all three channels.
//! Per-image latent jitter, camera and entity affine shifts, a per-camera
//! spatial pattern, pixel noise and optional occlusions are then applied
//! before clipping to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::augment::LUMA;
use super::{Dataset, Modality, SampleRecord};
use crate::error::{Error, Result};

/// Which modalities a camera records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    VisibleOnly,
    InfraredOnly,
    /// Records both modalities; see [`SyntheticSpec::paired_mixed_views`].
    Mixed,
}

impl CameraKind {
    fn has_infrared(self) -> bool {
        self != CameraKind::VisibleOnly
    }

    fn has_visible(self) -> bool {
        self != CameraKind::InfraredOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Identities per entity; entities never share identities.
    pub identities: usize,
    pub entities: usize,
    pub cameras_per_entity: usize,
    pub images_per_identity_per_camera: usize,
    pub height: usize,
    pub width: usize,
    /// One kind per camera of an entity; length must equal `cameras_per_entity`.
    pub modality_plan: Vec<CameraKind>,
    /// Scales every camera and entity shift; 0 disables them.
    pub domain_shift_scale: f64,
    pub seed: u64,
    pub latent_dim: usize,
    /// Amplitude of the per-channel color signal relative to the shared structure.
    pub color_strength: f64,
    /// Amplitude of the infrared-only signal relative to the shared structure.
    pub infrared_strength: f64,
    /// Weight of the red color projection inside the infrared signal.
    pub infrared_red_affinity: f64,
    /// Standard deviation of per-image latent jitter.
    pub intra_class_std: f64,
    pub pixel_noise: f64,
    /// Pixel amplitude of the rendered latent signal around mid-gray.
    pub contrast: f64,
    /// Probability that an identity appears in a given camera.
    pub identity_presence: f64,
    /// Probability that an image is occluded by a noise block.
    pub occlusion_rate: f64,
    /// Reject plans that cannot produce an infrared-query, visible-gallery split.
    pub require_cross_modal: bool,
    /// When set, a mixed camera alternates modalities image by image, so each
    /// identity appears in both. Otherwise each identity appears in a single
    /// modality per mixed camera, alternating with identity and camera.
    pub paired_mixed_views: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 40,
            entities: 1,
            cameras_per_entity: 4,
            images_per_identity_per_camera: 8,
            height: 8,
            width: 4,
            modality_plan: vec![
                CameraKind::VisibleOnly,
                CameraKind::InfraredOnly,
                CameraKind::Mixed,
                CameraKind::Mixed,
            ],
            domain_shift_scale: 1.0,
            seed: 0,
            latent_dim: 16,
            color_strength: 0.5,
            infrared_strength: 1.0,
            infrared_red_affinity: 1.0,
            intra_class_std: 0.35,
            pixel_noise: 0.02,
            contrast: 0.15,
            identity_presence: 1.0,
            occlusion_rate: 0.0,
            require_cross_modal: true,
            paired_mixed_views: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("identities", self.identities),
            ("entities", self.entities),
            ("cameras_per_entity", self.cameras_per_entity),
            ("images_per_identity_per_camera", self.images_per_identity_per_camera),
            ("height", self.height),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.modality_plan.len() != self.cameras_per_entity {
            return Err(Error::Config(format!(
                "modality_plan has {} entries for {} cameras",
                self.modality_plan.len(),
                self.cameras_per_entity
            )));
        }
        if self.require_cross_modal
            && (!self.modality_plan.iter().any(|k| k.has_infrared())
                || !self.modality_plan.iter().any(|k| k.has_visible()))
        {
            return Err(Error::Config(
                "modality_plan needs at least one infrared-capable and one visible-capable camera".into(),
            ));
        }
        let unit = [
            ("infrared_red_affinity", self.infrared_red_affinity),
            ("identity_presence", self.identity_presence),
            ("occlusion_rate", self.occlusion_rate),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
        }
        let non_negative = [
            ("domain_shift_scale", self.domain_shift_scale),
            ("intra_class_std", self.intra_class_std),
            ("pixel_noise", self.pixel_noise),
            ("contrast", self.contrast),
            ("color_strength", self.color_strength),
            ("infrared_strength", self.infrared_strength),
        ];
        if let Some((name, v)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Per-channel affine shift plus an additive spatial pattern.
struct Shift {
    gain: [f64; 3],
    bias: [f64; 3],
    pattern: Vec<f64>,
}

impl Shift {
    fn sample(rng: &mut ChaCha8Rng, scale: f64, gain_std: f64, bias_std: f64, pattern_std: f64, plane: usize) -> Self {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let gain = [0; 3].map(|_| 1.0 + scale * gain_std * normal());
        let bias = [0; 3].map(|_| scale * bias_std * normal());
        let pattern = (0..plane).map(|_| scale * pattern_std * normal()).collect();
        Self { gain, bias, pattern }
    }

    /// Applies the shift to channel `c`, or the channel average when `c` is `None`.
    fn apply(&self, v: f64, c: Option<usize>, pixel: usize) -> f64 {
        let (g, b) = match c {
            Some(c) => (self.gain[c], self.bias[c]),
            None => (self.gain.iter().sum::<f64>() / 3.0, self.bias.iter().sum::<f64>() / 3.0),
        };
        0.5 + g * (v - 0.5) + b + self.pattern[pixel]
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn project(matrix: &[f64], latent: &[f64]) -> Vec<f64> {
    matrix
        .chunks_exact(latent.len())
        .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates a dataset. Identity labels are `entity · identities + k`;
/// camera ids are `entity · cameras_per_entity + c`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plane = spec.height * spec.width;
    let d = spec.latent_dim;

    let structure = gaussian_matrix(&mut rng, plane, d);
    let raw: Vec<Vec<f64>> = (0..3).map(|_| gaussian_matrix(&mut rng, plane, d)).collect();
    // chroma only: the luma-weighted sum of the color projections vanishes
    let luma: Vec<f64> = (0..plane * d)
        .map(|i| (0..3).map(|c| LUMA[c] * raw[c][i]).sum())
        .collect();
    let color: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().zip(&luma).map(|(v, l)| v - l).collect())
        .collect();
    let thermal = gaussian_matrix(&mut rng, plane, d);
    let a = spec.infrared_red_affinity;
    let b = (1.0 - a * a).sqrt();
    let visible_proj: Vec<Vec<f64>> = color
        .iter()
        .map(|c| structure.iter().zip(c).map(|(s, c)| s + spec.color_strength * c).collect())
        .collect();
    let infrared_proj: Vec<f64> = structure
        .iter()
        .zip(color[0].iter().zip(&thermal))
        .map(|(s, (r, t))| s + spec.infrared_strength * (a * r + b * t))
        .collect();

    let s = spec.domain_shift_scale;
    let mut records = Vec::new();
    for entity in 0..spec.entities {
        let entity_shift = Shift::sample(&mut rng, s, 0.2, 0.08, 0.0, plane);
        let camera_shifts: Vec<Shift> = (0..spec.cameras_per_entity)
            .map(|_| Shift::sample(&mut rng, s, 0.3, 0.1, 0.1, plane))
            .collect();
        let latents: Vec<Vec<f64>> = (0..spec.identities)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        // presence[k][c]; every identity keeps at least one camera
        let presence: Vec<Vec<bool>> = (0..spec.identities)
            .map(|k| {
                let mut row: Vec<bool> = (0..spec.cameras_per_entity)
                    .map(|_| rng.random::<f64>() < spec.identity_presence)
                    .collect();
                if !row.iter().any(|&p| p) {
                    row[k % spec.cameras_per_entity] = true;
                }
                row
            })
            .collect();

        for (cam, kind) in spec.modality_plan.iter().enumerate() {
            let camera_id = entity * spec.cameras_per_entity + cam;
            for (k, latent) in latents.iter().enumerate() {
                if !presence[k][cam] {
                    continue;
                }
                for j in 0..spec.images_per_identity_per_camera {
                    let modality = match kind {
                        CameraKind::VisibleOnly => Modality::Visible,
                        CameraKind::InfraredOnly => Modality::Infrared,
                        CameraKind::Mixed => {
                            let phase = if spec.paired_mixed_views { k + j } else { k + cam };
                            if phase % 2 == 0 {
                                Modality::Visible
                            } else {
                                Modality::Infrared
                            }
                        }
                    };
                    let jittered: Vec<f64> = latent
                        .iter()
                        .map(|v| v + spec.intra_class_std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let pixels = render(
                        spec,
                        &mut rng,
                        &jittered,
                        modality,
                        &visible_proj,
                        &infrared_proj,
                        &camera_shifts[cam],
                        &entity_shift,
                    );
                    records.push(SampleRecord {
                        pixels,
                        height: spec.height,
                        width: spec.width,
                        identity: entity * spec.identities + k,
                        modality,
                        camera_id,
                        entity_id: entity,
                    });
                }
            }
        }
    }
    Dataset::new("synthetic", records, spec.identities * spec.entities)
}

#[allow(clippy::too_many_arguments)]
fn render(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    latent: &[f64],
    modality: Modality,
    visible_proj: &[Vec<f64>],
    infrared_proj: &[f64],
    camera: &Shift,
    entity: &Shift,
) -> Vec<f32> {
    let plane = spec.height * spec.width;
    let occlusion = (rng.random::<f64>() < spec.occlusion_rate).then(|| {
        let rows = (spec.height / 2).max(1);
        let start = rng.random_range(0..=spec.height - rows);
        (start * spec.width, (start + rows) * spec.width)
    });
    let finish = |v: f64, noise: f64| ((v + noise).clamp(0.0, 1.0) as f32).clamp(0.0, 1.0);
    let mut pixels = Vec::with_capacity(3 * plane);
    match modality {
        Modality::Visible => {
            for (c, proj) in visible_proj.iter().enumerate() {
                let signal = project(proj, latent);
                for (p, v) in signal.iter().enumerate() {
                    let base = 0.5 + spec.contrast * v;
                    let shifted = entity.apply(camera.apply(base, Some(c), p), Some(c), p);
                    let noise = spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                    pixels.push(finish(shifted, noise));
                }
            }
        }
        Modality::Infrared => {
            let signal = project(infrared_proj, latent);
            for (p, v) in signal.iter().enumerate() {
                let base = 0.5 + spec.contrast * v;
                let shifted = entity.apply(camera.apply(base, None, p), None, p);
                let noise = spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                pixels.push(finish(shifted, noise));
            }
            let single = pixels.clone();
            pixels.extend_from_slice(&single);
            pixels.extend_from_slice(&single);
        }
    }
    if let Some((from, to)) = occlusion {
        let fill: Vec<f32> = (from..to).map(|_| rng.random::<f32>()).collect();
        for c in 0..3 {
            pixels[c * plane + from..c * plane + to].copy_from_slice(&fill);
        }
    }
    pixels
}
