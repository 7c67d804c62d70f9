//! Synthetic multi-view dataset generator with known ground truth and a
//! controllable drone-satellite domain gap.
//!
//! Each class has one latent unit vector; drone and satellite rows push it
//! through independent random affine view maps scaled by `gap_strength`, so
//! same-class cross-view distances can exceed different-class same-view
//! distances. APV rows sit halfway between the two view maps, modeling the
//! partial bridging that color transfer provides.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apv::RasterImage;
use crate::store::{l2_normalize, EmbeddingSet, Manifest, ManifestEntry, ViewTag};
use crate::util::seeded_rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub drones_per_class: usize,
    pub sats_per_class: usize,
    pub dim: usize,
    pub gap_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub emit_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 40,
            drones_per_class: 8,
            sats_per_class: 1,
            dim: 64,
            gap_strength: 2.0,
            noise_sigma: 0.05,
            seed: 0,
            emit_images: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.drones_per_class == 0 || self.sats_per_class == 0 {
            return Err(Error::Param("class and per-class counts must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::Param("dim must be positive".into()));
        }
        if self.gap_strength < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Param("gap_strength and noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generated dataset: normalized feature sets, a manifest with class ids, and
/// optional procedural images for drone and satellite entries.
pub struct SynthDataset {
    pub drone: EmbeddingSet,
    pub satellite: EmbeddingSet,
    pub apv: EmbeddingSet,
    pub manifest: Manifest,
    pub images: Vec<(String, RasterImage)>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and portable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gauss_vec(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| gauss(rng) * scale).collect()
}

struct ViewMap {
    matrix: Vec<f64>, // dim x dim
    bias: Vec<f64>,
}

impl ViewMap {
    fn sample(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        ViewMap {
            matrix: gauss_vec(dim * dim, scale, rng),
            bias: gauss_vec(dim, scale, rng),
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let dim = z.len();
        let mut out = self.bias.clone();
        for r in 0..dim {
            let row = &self.matrix[r * dim..(r + 1) * dim];
            out[r] += row.iter().zip(z).map(|(m, v)| m * v).sum::<f64>();
        }
        out
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let dim = config.dim;

    let latents: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| {
            let v = gauss_vec(dim, 1.0, &mut rng);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let map_d = ViewMap::sample(dim, &mut rng);
    let map_s = ViewMap::sample(dim, &mut rng);

    let mut drone_rows = Vec::new();
    let mut drone_ids = Vec::new();
    let mut sat_rows = Vec::new();
    let mut sat_ids = Vec::new();
    let mut apv_rows = Vec::new();
    let mut apv_ids = Vec::new();
    let mut entries = Vec::new();
    let mut images = Vec::new();

    for (c, z) in latents.iter().enumerate() {
        let push_d = map_d.apply(z);
        let push_s = map_s.apply(z);
        let bridge: Vec<f64> = push_d
            .iter()
            .zip(&push_s)
            .map(|(d, s)| 0.5 * d + 0.5 * s)
            .collect();

        for i in 0..config.drones_per_class {
            let eps = gauss_vec(dim, config.noise_sigma, &mut rng);
            let row: Vec<f64> = (0..dim)
                .map(|d| z[d] + config.gap_strength * push_d[d] + eps[d])
                .collect();
            // APV shares the drone instance's noise draw: each APV is
            // generated from exactly one drone image.
            let apv_row: Vec<f64> = (0..dim)
                .map(|d| z[d] + config.gap_strength * bridge[d] + eps[d])
                .collect();
            let id = format!("d{c:03}_{i:02}");
            drone_rows.extend(row);
            apv_rows.extend(apv_row);
            apv_ids.push(format!("{id}#apv"));
            drone_ids.push(id);
        }
        for j in 0..config.sats_per_class {
            let eps = gauss_vec(dim, config.noise_sigma, &mut rng);
            let row: Vec<f64> = (0..dim)
                .map(|d| z[d] + config.gap_strength * push_s[d] + eps[d])
                .collect();
            sat_rows.extend(row);
            sat_ids.push(format!("s{c:03}_{j:02}"));
        }
    }

    let mut add_entries = |ids: &[String], view: ViewTag, per_class: usize, with_image: bool| {
        for (i, id) in ids.iter().enumerate() {
            let class = (i / per_class) as u32;
            let image_path = (config.emit_images && with_image).then(|| {
                let path = format!("images/{id}.ppm");
                images.push((path.clone(), procedural_image(class, view)));
                path
            });
            entries.push(ManifestEntry {
                id: id.clone(),
                view,
                image_path,
                class_id: Some(class),
            });
        }
    };
    add_entries(&drone_ids, ViewTag::Drone, config.drones_per_class, true);
    add_entries(&sat_ids, ViewTag::Satellite, config.sats_per_class, true);
    add_entries(&apv_ids, ViewTag::Apv, config.drones_per_class, false);

    let drone = l2_normalize(&EmbeddingSet::new(dim, drone_rows, drone_ids, ViewTag::Drone)?)?;
    let satellite = l2_normalize(&EmbeddingSet::new(dim, sat_rows, sat_ids, ViewTag::Satellite)?)?;
    let apv = l2_normalize(&EmbeddingSet::new(dim, apv_rows, apv_ids, ViewTag::Apv)?)?;

    Ok(SynthDataset {
        drone,
        satellite,
        apv,
        manifest: Manifest { entries },
        images,
    })
}

fn mix(mut h: u64) -> u64 {
    // splitmix64 finalizer
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// 32x32 image with a class-keyed 4x4 block pattern plus a view-keyed global
/// color cast. Pure function of (class, view), so re-generation is identical.
fn procedural_image(class: u32, view: ViewTag) -> RasterImage {
    let size = 32usize;
    let mut pixels = Vec::with_capacity(size * size * 3);
    let (cast_r, cast_g, cast_b): (i32, i32, i32) = match view {
        ViewTag::Drone => (45, 20, -30),
        ViewTag::Satellite => (-30, 5, 45),
        ViewTag::Apv => (10, 10, 10),
    };
    for y in 0..size {
        for x in 0..size {
            let h = mix(((class as u64) << 32) ^ ((x as u64 / 4) << 8) ^ (y as u64 / 4));
            let base = 60 + (h % 140) as i32;
            pixels.push((base + cast_r).clamp(0, 255) as u8);
            pixels.push((base + cast_g).clamp(0, 255) as u8);
            pixels.push((base + cast_b).clamp(0, 255) as u8);
        }
    }
    RasterImage::new(size, size, pixels).expect("fixed-size image")
}

/// Mean same-class cross-view cosine distance minus mean same-view
/// different-class cosine distance. Positive values reproduce the pathology
/// where views are further apart than unrelated scenes.
pub fn gap_metric(
    drone: &EmbeddingSet,
    satellite: &EmbeddingSet,
    drone_classes: &[u32],
    sat_classes: &[u32],
) -> Result<f64> {
    if drone_classes.len() != drone.count() || sat_classes.len() != satellite.count() {
        return Err(Error::Argument("class ids do not cover both sets".into()));
    }
    if drone_classes.is_empty() || sat_classes.is_empty() {
        return Err(Error::Argument("gap_metric needs non-empty sets".into()));
    }
    let dist = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut cross_sum = 0.0;
    let mut cross_n = 0usize;
    for i in 0..drone.count() {
        for j in 0..satellite.count() {
            if drone_classes[i] == sat_classes[j] {
                cross_sum += dist(drone.row(i), satellite.row(j));
                cross_n += 1;
            }
        }
    }
    let mut within_sum = 0.0;
    let mut within_n = 0usize;
    let mut same_view = |set: &EmbeddingSet, classes: &[u32]| {
        for i in 0..set.count() {
            for j in (i + 1)..set.count() {
                if classes[i] != classes[j] {
                    within_sum += dist(set.row(i), set.row(j));
                    within_n += 1;
                }
            }
        }
    };
    same_view(drone, drone_classes);
    same_view(satellite, sat_classes);
    if cross_n == 0 || within_n == 0 {
        return Err(Error::Argument(
            "gap_metric needs same-class cross-view and different-class same-view pairs".into(),
        ));
    }
    Ok(cross_sum / cross_n as f64 - within_sum / within_n as f64)
}
