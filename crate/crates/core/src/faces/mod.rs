//! Procedural portraits with controllable identity and age, their dataset
//! partitions, and analytic estimators of age and identity.

mod dataset;
mod io;
mod oracle;

pub use dataset::{
    sample_dataset, sample_identity, sample_seed, AgeCluster, Dataset, DatasetConfig, DatasetPartition, Split,
    SyntheticSample,
};
pub use io::{read_ppm, write_manifest, write_ppm, MANIFEST_HEADER};
pub use oracle::{
    confidence, identity_signature, luminance, oracle_age, oracle_identity_distance, AgeReading, IdentitySignature,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MIN_AGE: f64 = 16.0;
pub const MAX_AGE: f64 = 60.0;
pub const MIN_RENDER_SIZE: usize = 32;
/// Wrinkle slots per cheek; the count formula tops out at 11 lines.
pub const WRINKLE_SLOTS: usize = 6;

/// Cheek columns, as fractions of the face half-width, that carry wrinkles.
pub(crate) const CHEEK_INNER: f64 = 0.30;
pub(crate) const CHEEK_OUTER: f64 = 0.72;
/// Chromaticity tolerance of the skin test shared by the renderer and oracles.
pub(crate) const CHROMA_TOL: f64 = 0.05;

const BACKGROUND_TOP: [f64; 3] = [0.62, 0.70, 0.88];
const BACKGROUND_BOTTOM: [f64; 3] = [0.38, 0.46, 0.72];
const EYE_COLOR: [f64; 3] = [0.06, 0.05, 0.05];
const MOUTH_COLOR: [f64; 3] = [0.55, 0.16, 0.18];
const EYE_RADIUS: f64 = 0.04;
const HAIR_EXPAND_X: f64 = 1.12;
const HAIR_EXPAND_Y: f64 = 1.08;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("age {0} outside [16, 60]")]
    AgeOutOfRange(f64),
    #[error("image size {0} is below the minimum of 32")]
    SizeTooSmall(usize),
    #[error("invalid identity: {0}")]
    InvalidIdentity(String),
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = FaceError> = std::result::Result<T, E>;

/// Appearance factors that stay fixed across a person's ages. Positions and
/// lengths are fractions of the image side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub face_cx: f64,
    pub face_cy: f64,
    pub face_ax: f64,
    pub face_ay: f64,
    pub skin_tone: [f64; 3],
    /// Horizontal eye offset from the face center, fraction of `face_ax`.
    pub eye_spacing: f64,
    /// Eye height above the face center, fraction of `face_ay`.
    pub eye_height: f64,
    /// Mouth half-width, fraction of `face_ax`.
    pub mouth_width: f64,
    /// Hairline depth below the top of the face, fraction of `2·face_ay`.
    pub hair_height: f64,
    pub hair_tone: [f64; 3],
}

impl IdentitySpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("face_cx", self.face_cx),
            ("face_cy", self.face_cy),
            ("face_ax", self.face_ax),
            ("face_ay", self.face_ay),
            ("eye_spacing", self.eye_spacing),
            ("eye_height", self.eye_height),
            ("mouth_width", self.mouth_width),
            ("hair_height", self.hair_height),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(FaceError::InvalidIdentity(format!("{name} = {v} outside (0,1)")));
            }
        }
        if self.face_cx - self.face_ax < 0.0
            || self.face_cx + self.face_ax > 1.0
            || self.face_cy - self.face_ay < 0.0
            || self.face_cy + self.face_ay > 1.0
        {
            return Err(FaceError::InvalidIdentity("face ellipse leaves the image".into()));
        }
        if self.skin_tone.iter().any(|c| !(0.2..=0.9).contains(c)) {
            return Err(FaceError::InvalidIdentity(format!("skin tone {:?} outside [0.2,0.9]", self.skin_tone)));
        }
        if self.hair_tone.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(FaceError::InvalidIdentity(format!("hair tone {:?} outside [0,1]", self.hair_tone)));
        }
        Ok(())
    }
}

/// Age-dependent rendering factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeParams {
    pub age_years: f64,
    pub wrinkle_count: usize,
    pub wrinkle_contrast: f64,
    pub hair_lightness_shift: f64,
}

impl AgeParams {
    pub fn new(age_years: f64) -> Result<Self> {
        if !(MIN_AGE..=MAX_AGE).contains(&age_years) {
            return Err(FaceError::AgeOutOfRange(age_years));
        }
        Ok(AgeParams {
            age_years,
            wrinkle_count: ((age_years - 16.0) / 4.0).round() as usize,
            wrinkle_contrast: 0.1 + 0.5 * (age_years - 16.0) / 44.0,
            hair_lightness_shift: 0.6 * (age_years - 40.0).max(0.0) / 20.0,
        })
    }

    /// Darkening of the under-eye arcs; zero up to 40.
    pub fn arc_darkening(&self) -> f64 {
        0.35 * (self.age_years - 40.0).max(0.0) / 20.0
    }
}

/// Vertical pitch between wrinkle rows on one cheek, in pixels.
pub fn wrinkle_pitch(size: usize) -> usize {
    (size / 24).max(2)
}

pub(crate) fn lum(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

pub(crate) fn chroma_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (sa, sb) = (a.iter().sum::<f64>().max(1e-9), b.iter().sum::<f64>().max(1e-9));
    (0..3).map(|i| (a[i] / sa - b[i] / sb).powi(2)).sum::<f64>().sqrt()
}

/// Whether colour `c` belongs to the skin family of `skin`: same chromaticity
/// within `tol`, luminance between 0.3 and 1.3 of the skin's.
pub(crate) fn skin_like(c: [f64; 3], skin: [f64; 3], tol: f64) -> bool {
    let (l, ls) = (lum(c), lum(skin));
    chroma_distance(c, skin) < tol && l >= 0.3 * ls && l <= 1.3 * ls
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Face geometry in pixel units.
struct Layout {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    hairline: f64,
    eye_r: f64,
    eyes: [(f64, f64); 2],
    mouth_y: f64,
    mouth_hw: f64,
    band_top: f64,
    pitch: f64,
}

impl Layout {
    fn new(id: &IdentitySpec, size: usize) -> Self {
        let s = size as f64;
        let (cx, cy, ax, ay) = (id.face_cx * s, id.face_cy * s, id.face_ax * s, id.face_ay * s);
        let ey = cy - id.eye_height * ay;
        let dx = id.eye_spacing * ax;
        let pitch = wrinkle_pitch(size) as f64;
        Layout {
            cx,
            cy,
            ax,
            ay,
            hairline: cy - ay + id.hair_height * 2.0 * ay,
            eye_r: EYE_RADIUS * s,
            eyes: [(cx - dx, ey), (cx + dx, ey)],
            mouth_y: cy + 0.72 * ay,
            mouth_hw: id.mouth_width * ax,
            band_top: cy.floor() + 1.0,
            pitch,
        }
    }

    fn in_ellipse(&self, x: f64, y: f64, kx: f64, ky: f64) -> bool {
        let u = (x - self.cx) / (self.ax * kx);
        let v = (y - self.cy) / (self.ay * ky);
        u * u + v * v <= 1.0
    }

    /// Colour of the scene at continuous pixel coordinates.
    fn shade(&self, id: &IdentitySpec, age: &AgeParams, size: usize, x: f64, y: f64) -> [f64; 3] {
        let t = y / size as f64;
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = BACKGROUND_TOP[i] + (BACKGROUND_BOTTOM[i] - BACKGROUND_TOP[i]) * t;
        }
        if y < self.hairline && self.in_ellipse(x, y, HAIR_EXPAND_X, HAIR_EXPAND_Y) {
            let h = id.hair_tone;
            let s = age.hair_lightness_shift;
            return [h[0] + s * (1.0 - h[0]), h[1] + s * (1.0 - h[1]), h[2] + s * (1.0 - h[2])];
        }
        if y < self.hairline || !self.in_ellipse(x, y, 1.0, 1.0) {
            return c;
        }
        c = id.skin_tone;
        for &(ex, ey) in &self.eyes {
            let d = ((x - ex).powi(2) + (y - ey).powi(2)).sqrt();
            if d <= self.eye_r {
                return EYE_COLOR;
            }
            let arc_in = 1.3 * self.eye_r;
            if age.arc_darkening() > 0.0 && y > ey + 0.5 * self.eye_r && d >= arc_in && d < arc_in + 1.0 {
                c = scale(id.skin_tone, 1.0 - age.arc_darkening());
            }
        }
        if (y - self.mouth_y).abs() <= 0.5 * self.pitch && (x - self.cx).abs() <= self.mouth_hw {
            return MOUTH_COLOR;
        }
        let off = (x - self.cx).abs() / self.ax;
        if (CHEEK_INNER..=CHEEK_OUTER).contains(&off) {
            let side = usize::from(x > self.cx);
            let thickness = (self.pitch / 2.0).floor();
            for j in (side..age.wrinkle_count).step_by(2) {
                let row = self.band_top + (j / 2) as f64 * self.pitch;
                if y >= row && y < row + thickness {
                    c = scale(id.skin_tone, 1.0 - age.wrinkle_contrast);
                }
            }
        }
        c
    }
}

/// Quantizes a `[0,1]` intensity to the 8-bit grid and maps it to `[-1,1]`.
pub fn quantize_unit(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round();
    (q / 127.5 - 1.0) as f32
}

/// Rasterizes one portrait as a `[3,S,S]` tensor in `[-1,1]`, sampled at 2x2
/// points per pixel and quantized to 8 bits per channel.
pub fn render_face(id: &IdentitySpec, age_years: f64, size: usize) -> Result<Tensor> {
    if size < MIN_RENDER_SIZE {
        return Err(FaceError::SizeTooSmall(size));
    }
    id.validate()?;
    let age = AgeParams::new(age_years)?;
    let layout = Layout::new(id, size);
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    let rows: Vec<Vec<[f64; 3]>> = (0..size)
        .map(|py| {
            (0..size)
                .map(|px| {
                    let mut acc = [0.0; 3];
                    for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                        let c = layout.shade(id, &age, size, px as f64 + ox, py as f64 + oy);
                        for i in 0..3 {
                            acc[i] += 0.25 * c[i];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    for (py, row) in rows.iter().enumerate() {
        for (px, c) in row.iter().enumerate() {
            for ch in 0..3 {
                data[ch * plane + py * size + px] = quantize_unit(c[ch]);
            }
        }
    }
    Ok(Tensor::new(&[3, size, size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ident(seed: u64) -> IdentitySpec {
        sample_identity(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn age_params_follow_formulas() {
        let a = AgeParams::new(16.0).unwrap();
        assert_eq!(a.wrinkle_count, 0);
        assert!((a.wrinkle_contrast - 0.1).abs() < 1e-12);
        assert_eq!(a.hair_lightness_shift, 0.0);
        let b = AgeParams::new(60.0).unwrap();
        assert_eq!(b.wrinkle_count, 11);
        assert!((b.wrinkle_contrast - 0.6).abs() < 1e-12);
        assert!((b.hair_lightness_shift - 0.6).abs() < 1e-12);
        assert!(AgeParams::new(15.9).is_err());
        assert!(AgeParams::new(60.1).is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let id = ident(1);
        let a = render_face(&id, 37.0, 48).unwrap();
        let b = render_face(&id, 37.0, 48).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(render_face(&id, 37.0, 24).is_err());
        assert!(render_face(&id, 70.0, 48).is_err());
    }

    #[test]
    fn aging_only_touches_age_regions() {
        let id = ident(2);
        let size = 48;
        let young = render_face(&id, 20.0, size).unwrap();
        let old = render_face(&id, 55.0, size).unwrap();
        let l = Layout::new(&id, size);
        let plane = size * size;
        for py in 0..size {
            for px in 0..size {
                let changed = (0..3).any(|c| young.data()[c * plane + py * size + px] != old.data()[c * plane + py * size + px]);
                if !changed {
                    continue;
                }
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let in_hair = y < l.hairline + 1.0;
                let off = (x - l.cx).abs() / l.ax;
                let in_cheeks = y >= l.band_top - 1.0
                    && y <= l.band_top + 6.0 * l.pitch
                    && off >= CHEEK_INNER - 0.1
                    && off <= CHEEK_OUTER + 0.1;
                let near_eye = l.eyes.iter().any(|&(ex, ey)| {
                    ((x - ex).powi(2) + (y - ey).powi(2)).sqrt() <= 1.3 * l.eye_r + 2.0
                });
                assert!(in_hair || in_cheeks || near_eye, "pixel ({px},{py}) changed outside age regions");
            }
        }
    }
}
