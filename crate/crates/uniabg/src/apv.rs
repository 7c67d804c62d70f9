//! Auxiliary pseudo view generation: global color transfer in the
//! decorrelated l-alpha-beta (log-LMS) space.
//!
//! A drone image is recolored so its per-channel mean and standard deviation
//! match global statistics pooled over the satellite set, which preserves
//! structure while adopting satellite color and illumination.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// 8-bit RGB pixel buffer, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} pixel bytes for {}x{} RGB image",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Per-channel l-alpha-beta mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

// RGB -> LMS matrix from the log-LMS color transfer pipeline; the inverse is
// computed exactly from this forward matrix rather than taken from rounded
// published values, keeping the round trip within float precision.
const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT6: f64 = 2.449_489_742_783_178;
const SQRT2: f64 = 1.414_213_562_373_095_1;

// LMS floor applied before log10 so black pixels stay finite.
const LMS_FLOOR: f64 = 1e-6;

fn invert_3x3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    inv
}

/// Converts an 8-bit RGB image to the l-alpha-beta space: RGB scaled to
/// [0,1], mapped through the fixed RGB->LMS matrix, floored and log10'd, then
/// rotated into the decorrelated opponent axes.
pub fn rgb_to_lab(image: &RasterImage) -> Vec<f64> {
    let mut lab = Vec::with_capacity(image.pixels.len());
    for px in image.pixels.chunks_exact(3) {
        let rgb = [
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ];
        let mut log_lms = [0.0f64; 3];
        for (c, row) in RGB_TO_LMS.iter().enumerate() {
            let v: f64 = row.iter().zip(&rgb).map(|(m, x)| m * x).sum();
            log_lms[c] = v.max(LMS_FLOOR).log10();
        }
        let [l, m, s] = log_lms;
        lab.push((l + m + s) / SQRT3);
        lab.push((l + m - 2.0 * s) / SQRT6);
        lab.push((l - m) / SQRT2);
    }
    lab
}

/// Exact inverse of [`rgb_to_lab`]'s linear and log steps, then clipping to
/// [0,255] and rounding to 8 bits.
pub fn lab_to_rgb(lab: &[f64], width: usize, height: usize) -> Result<RasterImage> {
    if lab.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} lab values for {width}x{height} image",
            lab.len()
        )));
    }
    if let Some(bad) = lab.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite lab value {bad}")));
    }
    let lms_to_rgb = invert_3x3(&RGB_TO_LMS);
    let mut pixels = Vec::with_capacity(lab.len());
    for p in lab.chunks_exact(3) {
        let (l, a, b) = (p[0], p[1], p[2]);
        let log_lms = [
            l / SQRT3 + a / SQRT6 + b / SQRT2,
            l / SQRT3 + a / SQRT6 - b / SQRT2,
            l / SQRT3 - 2.0 * a / SQRT6,
        ];
        let lms = [
            10f64.powf(log_lms[0]),
            10f64.powf(log_lms[1]),
            10f64.powf(log_lms[2]),
        ];
        for row in &lms_to_rgb {
            let v: f64 = row.iter().zip(&lms).map(|(m, x)| m * x).sum();
            pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(width, height, pixels)
}

/// Per-channel statistics of one lab buffer (population std, divisor N).
pub fn lab_stats(lab: &[f64]) -> ChannelStats {
    stats_over(std::iter::once(lab))
}

/// Mean and population std per channel pooled over every pixel of every
/// image. Two deterministic passes: sums, then squared deviations.
pub fn global_stats(images: &[RasterImage]) -> Result<ChannelStats> {
    if images.is_empty() {
        return Err(Error::Argument("global_stats over an empty image set".into()));
    }
    let labs: Vec<Vec<f64>> = images.iter().map(rgb_to_lab).collect();
    Ok(stats_over(labs.iter().map(|l| l.as_slice())))
}

fn stats_over<'a>(buffers: impl Iterator<Item = &'a [f64]> + Clone) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for lab in buffers.clone() {
        for p in lab.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += p[c];
            }
        }
        count += lab.len() / 3;
    }
    let mean = [
        sum[0] / count as f64,
        sum[1] / count as f64,
        sum[2] / count as f64,
    ];
    let mut sq = [0.0f64; 3];
    for lab in buffers {
        for p in lab.chunks_exact(3) {
            for c in 0..3 {
                let d = p[c] - mean[c];
                sq[c] += d * d;
            }
        }
    }
    let std = [
        (sq[0] / count as f64).sqrt(),
        (sq[1] / count as f64).sqrt(),
        (sq[2] / count as f64).sqrt(),
    ];
    ChannelStats { mean, std }
}

// Standard deviations below this are treated as zero; the affine ratio is
// singular and the channel is set to the target mean.
const STD_FLOOR: f64 = 1e-6;

/// Affine channel remap in lab space from the buffer's own statistics to the
/// target statistics. Exposed separately so tests can inspect pre-clip stats.
pub fn transfer_lab(lab: &[f64], own: &ChannelStats, target: &ChannelStats) -> Vec<f64> {
    let mut out = Vec::with_capacity(lab.len());
    for p in lab.chunks_exact(3) {
        for c in 0..3 {
            if own.std[c] < STD_FLOOR {
                out.push(target.mean[c]);
            } else {
                out.push((target.std[c] / own.std[c]) * (p[c] - own.mean[c]) + target.mean[c]);
            }
        }
    }
    out
}

/// Recolors a drone image so its lab statistics match the target global
/// satellite statistics.
pub fn color_transfer(drone: &RasterImage, target: &ChannelStats) -> Result<RasterImage> {
    let lab = rgb_to_lab(drone);
    let own = lab_stats(&lab);
    let transferred = transfer_lab(&lab, &own, target);
    lab_to_rgb(&transferred, drone.width, drone.height)
}

/// Reads a binary PPM (P6, maxval 255).
pub fn read_ppm(path: &Path) -> Result<RasterImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);

    fn next_token(r: &mut impl BufRead) -> Result<String> {
        let mut tok = String::new();
        let mut in_comment = false;
        loop {
            let mut byte = [0u8; 1];
            match r.read_exact(&mut byte) {
                Ok(()) => {}
                Err(_) if !tok.is_empty() => return Ok(tok),
                Err(_) => return Err(Error::Format("truncated PPM header".into())),
            }
            let c = byte[0] as char;
            if in_comment {
                if c == '\n' {
                    in_comment = false;
                }
                continue;
            }
            if c == '#' {
                in_comment = true;
                continue;
            }
            if c.is_ascii_whitespace() {
                if tok.is_empty() {
                    continue;
                }
                return Ok(tok);
            }
            tok.push(c);
        }
    }

    let magic = next_token(&mut reader)?;
    if magic != "P6" {
        return Err(Error::Format(format!(
            "{}: expected P6, got `{magic}`",
            path.display()
        )));
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse()
            .map_err(|_| Error::Format(format!("bad PPM header token `{tok}`")))
    };
    let width = parse(next_token(&mut reader)?)?;
    let height = parse(next_token(&mut reader)?)?;
    let maxval = parse(next_token(&mut reader)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    let mut pixels = vec![0u8; width * height * 3];
    reader
        .read_exact(&mut pixels)
        .map_err(|_| Error::Format(format!("{}: truncated PPM payload", path.display())))?;
    RasterImage::new(width, height, pixels)
}

/// Writes a binary PPM (P6, maxval 255).
pub fn write_ppm(image: &RasterImage, path: &Path) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&image.pixels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
