//! Synthetic "tumor phantom" slices and region statistics.
//!
//! Each slice is a smooth low-frequency background with Gaussian noise; with
//! probability `p_present` a brighter filled rotated ellipse is stamped and
//! marked in the mask. Region statistics are always measured on the realized
//! mask, never taken from the nominal ellipse parameters.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Laterality {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Upper,
    Lower,
    None,
}

impl Laterality {
    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
            Laterality::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Self::Left),
            "right" => Some(Self::Right),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Upper => "upper",
            Location::Lower => "lower",
            Location::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "upper" => Some(Self::Upper),
            "lower" => Some(Self::Lower),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub present: bool,
    pub area: usize,
    pub eccentricity: f64,
    pub laterality: Laterality,
    pub location: Location,
    /// User-supplied categorical outcomes, keyed by column name.
    pub extra: BTreeMap<String, String>,
}

impl RegionStats {
    pub fn absent() -> Self {
        Self {
            present: false,
            area: 0,
            eccentricity: 0.0,
            laterality: Laterality::None,
            location: Location::None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: String,
    pub slice_index: u32,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Row-major, 0 or 1.
    pub mask: Vec<u8>,
    pub stats: RegionStats,
}

impl SegmentationSample {
    /// `{sample_id}_{slice}`, the stem shared by the sample's files.
    pub fn key(&self) -> String {
        format!("{}_{}", self.sample_id, self.slice_index)
    }
}

/// Area, centroid-based position and moment eccentricity of a binary mask.
///
/// Pixels are treated as unit squares, so each second moment carries the
/// `1/12` self-variance of a pixel; this keeps eccentricity below 1 even for
/// one-pixel-wide regions.
pub fn region_stats(mask: &[u8], height: usize, width: usize) -> RegionStats {
    debug_assert_eq!(mask.len(), height * width);
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0, 0.0);
    for (k, &m) in mask.iter().enumerate() {
        if m != 0 {
            n += 1;
            sr += (k / width) as f64;
            sc += (k % width) as f64;
        }
    }
    if n == 0 {
        return RegionStats::absent();
    }
    let (cr, cc) = (sr / n as f64, sc / n as f64);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (k, &m) in mask.iter().enumerate() {
        if m != 0 {
            let dr = (k / width) as f64 - cr;
            let dc = (k % width) as f64 - cc;
            m20 += dc * dc;
            m02 += dr * dr;
            m11 += dr * dc;
        }
    }
    let nf = n as f64;
    let (a, b, c) = (m20 / nf + 1.0 / 12.0, m02 / nf + 1.0 / 12.0, m11 / nf);
    let half_trace = (a + b) / 2.0;
    let disc = (((a - b) / 2.0).powi(2) + c * c).sqrt();
    let (lmax, lmin) = (half_trace + disc, (half_trace - disc).max(0.0));
    let eccentricity = (1.0 - lmin / lmax).max(0.0).sqrt();
    // Pixel centres sit at index + 0.5; the midlines at width/2 and height/2.
    let laterality = if cc + 0.5 < width as f64 / 2.0 {
        Laterality::Left
    } else {
        Laterality::Right
    };
    let location = if cr + 0.5 < height as f64 / 2.0 {
        Location::Upper
    } else {
        Location::Lower
    };
    RegionStats {
        present: true,
        area: n,
        eccentricity,
        laterality,
        location,
        extra: BTreeMap::new(),
    }
}

/// Filled ellipse with centre `(cy, cx)` (pixel-index coordinates),
/// semi-axes `a >= b` and rotation `theta` of the major axis from the
/// column direction.
pub fn rasterize_ellipse(height: usize, width: usize, cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> Vec<u8> {
    let (s, c) = theta.sin_cos();
    let mut mask = vec![0u8; height * width];
    for i in 0..height {
        for j in 0..width {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask[i * width + j] = 1;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSpec {
    pub n: usize,
    pub p_present: f64,
    /// Nominal ellipse area range in pixels.
    pub area_range: [f64; 2],
    pub ecc_range: [f64; 2],
    pub noise_sigma: f64,
    pub image_size: usize,
    /// Brightness added inside the ellipse is drawn from this range.
    pub contrast_range: [f64; 2],
    pub slices_per_subject: usize,
    /// Adds a `grade` column correlated with area quartiles.
    pub synthetic_extra: bool,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            n: 250,
            p_present: 0.7,
            area_range: [20.0, 150.0],
            ecc_range: [0.0, 0.9],
            noise_sigma: 0.05,
            image_size: 32,
            contrast_range: [0.3, 0.45],
            slices_per_subject: 10,
            synthetic_extra: false,
        }
    }
}

fn semi_axes(area: f64, ecc: f64) -> (f64, f64) {
    let ratio = (1.0 - ecc * ecc).sqrt();
    let a = (area / (PI * ratio)).sqrt();
    (a, a * ratio)
}

impl GenerateSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p_present) {
            return bad(format!("p_present {} outside [0, 1]", self.p_present));
        }
        let [alo, ahi] = self.area_range;
        if !(alo > 0.0 && alo <= ahi) {
            return bad(format!("invalid area_range {:?}", self.area_range));
        }
        let [elo, ehi] = self.ecc_range;
        if !(0.0 <= elo && elo <= ehi && ehi < 1.0) {
            return bad(format!("invalid ecc_range {:?}", self.ecc_range));
        }
        let [clo, chi] = self.contrast_range;
        if !(clo <= chi) {
            return bad(format!("invalid contrast_range {:?}", self.contrast_range));
        }
        if !(self.noise_sigma >= 0.0) || self.image_size == 0 || self.slices_per_subject == 0 {
            return bad("noise_sigma, image_size and slices_per_subject must be valid".into());
        }
        let (a, _) = semi_axes(ahi, ehi);
        if 2.0 * a + 2.0 > self.image_size as f64 {
            return bad(format!(
                "ellipse with area {ahi} and eccentricity {ehi} (semi-major {a:.2}) cannot fit in {0}x{0}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// `n` phantom slices, reproducible from `seed`. Sample `i` draws from its
/// own ChaCha stream, so samples are independent of generation order.
pub fn generate(spec: &GenerateSpec, seed: u64) -> Result<Vec<SegmentationSample>> {
    spec.validate()?;
    (0..spec.n).map(|i| generate_one(spec, seed, i)).collect()
}

fn generate_one(spec: &GenerateSpec, seed: u64, index: usize) -> Result<SegmentationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let size = spec.image_size;
    let sf = size as f64;

    let base = rng.random_range(0.2..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut image: Vec<f64> = (0..size * size)
        .map(|k| {
            let (y, x) = ((k / size) as f64 / sf, (k % size) as f64 / sf);
            base + waves
                .iter()
                .map(|&(amp, fy, fx, ph)| amp * (2.0 * PI * (fy * y + fx * x) + ph).sin())
                .sum::<f64>()
        })
        .collect();

    let mut mask = vec![0u8; size * size];
    let mut nominal_area = None;
    if rng.random_bool(spec.p_present) {
        let [alo, ahi] = spec.area_range;
        let [elo, ehi] = spec.ecc_range;
        let area = if ahi > alo { rng.random_range(alo..=ahi) } else { alo };
        let ecc = if ehi > elo { rng.random_range(elo..=ehi) } else { elo };
        let (a, b) = semi_axes(area, ecc);
        let margin = a + 1.0;
        let cy = rng.random_range(margin..=sf - 1.0 - margin);
        let cx = rng.random_range(margin..=sf - 1.0 - margin);
        let theta = rng.random_range(0.0..PI);
        let [clo, chi] = spec.contrast_range;
        let contrast = if chi > clo { rng.random_range(clo..=chi) } else { clo };
        mask = rasterize_ellipse(size, size, cy, cx, a, b, theta);
        for (v, &m) in image.iter_mut().zip(&mask) {
            if m != 0 {
                *v += contrast;
            }
        }
        nominal_area = Some(area);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in image.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let mut stats = region_stats(&mask, size, size);
    if spec.synthetic_extra {
        let level = match (stats.present, nominal_area) {
            (true, Some(area)) => {
                let [alo, ahi] = spec.area_range;
                let span = (ahi - alo).max(f64::MIN_POSITIVE);
                let mut q = ((4.0 * (area - alo) / span) as usize).min(3);
                if rng.random_bool(0.2) {
                    q = rng.random_range(0..4);
                }
                format!("g{q}")
            }
            _ => "none".to_owned(),
        };
        stats.extra.insert("grade".into(), level);
    }
    Ok(SegmentationSample {
        sample_id: format!("P{:03}", index / spec.slices_per_subject),
        slice_index: (index % spec.slices_per_subject) as u32,
        height: size,
        width: size,
        image,
        mask,
        stats,
    })
}
