use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::rng::Stream;

use super::SynthError;

/// Parameters of one generated case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseSpec {
    pub seed: u64,
    pub size: usize,
    /// 2 (background, lesion) or 3 (background, lesion, core).
    pub classes: usize,
    /// Half-width in pixels of the band in which rater boundaries wander.
    pub ambiguity: f64,
    pub raters: usize,
    /// Probability that a faint satellite blob is present; each rater then
    /// includes it with probability one half. With zero ambiguity every
    /// rater includes it.
    pub satellite_rate: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for CaseSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 32,
            classes: 2,
            ambiguity: 1.5,
            raters: 4,
            satellite_rate: 0.5,
            noise: 0.3,
        }
    }
}

impl CaseSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.size < 16 || self.size % 4 != 0 {
            return Err(SynthError::Spec(format!("image size {} must be a multiple of 4, at least 16", self.size)));
        }
        if !(2..=3).contains(&self.classes) {
            return Err(SynthError::Spec(format!("class count {} must be 2 or 3", self.classes)));
        }
        if self.raters == 0 {
            return Err(SynthError::Spec("at least one rater is required".into()));
        }
        if !(self.ambiguity >= 0.0 && self.ambiguity.is_finite()) {
            return Err(SynthError::Spec("ambiguity width must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.satellite_rate) {
            return Err(SynthError::Spec("satellite rate must lie in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::Spec("noise level must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One image with its rater label maps, all row-major `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub image: Vec<f32>,
    /// `raters[r][pixel]` is a class index.
    pub raters: Vec<Vec<u8>>,
}

/// Sum of three random plane waves scaled into `[-amp, amp]`.
struct SmoothField {
    waves: [(f64, f64, f64, f64); 3],
    norm: f64,
    amp: f64,
}

impl SmoothField {
    fn new(s: &mut Stream, amp: f64, min_freq: f64, max_freq: f64) -> Self {
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
        let mut norm = 0.0;
        for w in &mut waves {
            let weight = 0.5 + s.uniform();
            let freq = min_freq + (max_freq - min_freq) * s.uniform();
            let dir = 2.0 * PI * s.uniform();
            let phase = 2.0 * PI * s.uniform();
            *w = (weight, freq * dir.cos(), freq * dir.sin(), phase);
            norm += weight;
        }
        Self { waves, norm, amp }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let v: f64 = self.waves.iter().map(|&(a, kx, ky, ph)| a * (kx * x + ky * y + ph).cos()).sum();
        self.amp * v / self.norm
    }
}

/// Lesion geometry: a rotated ellipse with a wobbly rim.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(s: &mut Stream, size: f64) -> Self {
        let a = 6.0 + 4.0 * s.uniform() * size / 32.0;
        let b = a * (0.65 + 0.35 * s.uniform());
        let margin = a + 3.0;
        let span = (size - 2.0 * margin).max(0.0);
        let cx = margin + span * s.uniform();
        let cy = margin + span * s.uniform();
        let angle = PI * s.uniform();
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (0.06 * s.uniform(), 2.0 * PI * s.uniform());
        }
        Self {
            cx,
            cy,
            a,
            b,
            angle,
            harmonics,
        }
    }

    fn inside(&self, x: f64, y: f64, scale: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / (self.a * scale);
        let v = (-s * dx + c * dy) / (self.b * scale);
        let theta = v.atan2(u);
        let rim: f64 = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, &(amp, ph))| amp * ((k as f64 + 2.0) * theta + ph).cos())
                .sum::<f64>();
        (u * u + v * v).sqrt() < rim
    }
}

/// Signed distance in pixels from each pixel centre to the boundary of
/// `mask`: negative inside, positive outside, `+-0.5` on the rim. Brute force;
/// fields are at most a few thousand pixels.
pub(crate) fn signed_distance(mask: &[bool], size: usize) -> Vec<f64> {
    let coords: Vec<(f64, f64)> = (0..size * size).map(|i| ((i % size) as f64, (i / size) as f64)).collect();
    let mut out = vec![f64::INFINITY; size * size];
    if mask.iter().all(|&m| m) {
        out.iter_mut().for_each(|d| *d = -f64::INFINITY);
        return out;
    }
    for (i, d) in out.iter_mut().enumerate() {
        let (x, y) = coords[i];
        let mut best = f64::INFINITY;
        for (j, &(u, v)) in coords.iter().enumerate() {
            if mask[j] != mask[i] {
                best = best.min((x - u).powi(2) + (y - v).powi(2));
            }
        }
        let dist = best.sqrt() - 0.5;
        *d = if mask[i] { -dist } else { dist };
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Geometry shared by the image renderer and the raters.
struct Scene {
    lesion: Vec<f64>,
    core: Option<Vec<f64>>,
    satellite: Option<Vec<f64>>,
}

fn render(scene: &Scene, size: usize, noise: f64, s: &mut Stream) -> Vec<f32> {
    let bg = SmoothField::new(&mut s.derive("background"), 0.25, 0.05, 0.2);
    let mut pixel_noise = s.derive("pixel-noise");
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let mut v = bg.at(x, y) + sigmoid(-scene.lesion[i] / 0.7);
            if let Some(core) = &scene.core {
                v += 0.8 * sigmoid(-core[i] / 0.7);
            }
            if let Some(sat) = &scene.satellite {
                v += 0.55 * sigmoid(-sat[i] / 0.7);
            }
            (v + noise * pixel_noise.normal()) as f32
        })
        .collect()
}

/// Rater label map: each structure's rim is shifted by the rater's smooth
/// offset field, bounded by the ambiguity width.
fn rate(scene: &Scene, size: usize, ambiguity: f64, include_satellite: bool, s: &mut Stream) -> Vec<u8> {
    let offset = SmoothField::new(s, ambiguity, 0.15, 0.45);
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let delta = offset.at(x, y);
            let lesion = scene.lesion[i] < delta;
            let sat = include_satellite && scene.satellite.as_ref().is_some_and(|d| d[i] < delta);
            let core = scene.core.as_ref().is_some_and(|d| d[i] < 0.5 * delta);
            if core && lesion {
                2
            } else if lesion || sat {
                1
            } else {
                0
            }
        })
        .collect()
}

fn satellite_disk(size: usize, blob: &Blob, s: &mut Stream) -> Vec<f64> {
    let radius = 2.5 + s.uniform();
    let reach = blob.a.max(blob.b) + radius + 2.5;
    let size_f = size as f64;
    // Prefer a direction that keeps the disk inside the frame.
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for k in 0..8 {
        let dir = 2.0 * PI * (s.uniform() + k as f64) / 8.0;
        let (x, y) = (blob.cx + reach * dir.cos(), blob.cy + reach * dir.sin());
        let room = x.min(y).min(size_f - 1.0 - x).min(size_f - 1.0 - y) - radius;
        if room > best.0 {
            best = (room, x, y);
        }
    }
    let (_, sx, sy) = best;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            ((x - sx).powi(2) + (y - sy).powi(2)).sqrt() - radius
        })
        .collect()
}

/// Generate one case. Depends only on `spec`.
pub fn generate_case(spec: &CaseSpec) -> Result<Case, SynthError> {
    spec.validate()?;
    let size = spec.size;
    let root = Stream::new(spec.seed, "case");
    let mut geo = root.derive("geometry");
    let blob = Blob::random(&mut geo, size as f64);
    let grid = |f: &dyn Fn(f64, f64) -> bool| -> Vec<bool> {
        (0..size * size).map(|i| f((i % size) as f64, (i / size) as f64)).collect()
    };
    let lesion = signed_distance(&grid(&|x, y| blob.inside(x, y, 1.0)), size);
    let core = (spec.classes == 3).then(|| signed_distance(&grid(&|x, y| blob.inside(x, y, 0.5)), size));
    let has_satellite = geo.uniform() < spec.satellite_rate;
    let satellite = has_satellite.then(|| satellite_disk(size, &blob, &mut geo));
    let scene = Scene { lesion, core, satellite };
    let image = render(&scene, size, spec.noise, &mut root.derive("image"));
    let raters = (0..spec.raters as u64)
        .map(|r| {
            let mut s = root.derive_index("rater", r);
            let include = spec.ambiguity == 0.0 || s.uniform() < 0.5;
            rate(&scene, size, spec.ambiguity, include, &mut s)
        })
        .collect();
    Ok(Case { image, raters })
}

/// A case whose raters split evenly between two masks that differ only by
/// a satellite blob.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoModeFixture {
    pub case: Case,
    /// Pixels of the satellite; the mode of a mask is whether most of these
    /// are foreground.
    pub satellite: Vec<bool>,
}

impl TwoModeFixture {
    /// `true` when `mask` claims the satellite.
    pub fn includes_satellite(&self, mask: &[u8]) -> bool {
        let (hit, total) = self
            .satellite
            .iter()
            .zip(mask)
            .filter(|(s, _)| **s)
            .fold((0, 0), |(h, t), (_, &m)| (h + usize::from(m != 0), t + 1));
        2 * hit > total
    }
}

/// Fixed 32x32 two-class case with eight raters: four include the
/// satellite, four do not, and all agree elsewhere.
pub fn two_mode_fixture() -> TwoModeFixture {
    let size = 32;
    let blob = Blob {
        cx: 12.0,
        cy: 15.0,
        a: 8.0,
        b: 6.5,
        angle: 0.3,
        harmonics: [(0.03, 0.4), (0.02, 1.9), (0.01, 4.0)],
    };
    let mask: Vec<bool> = (0..size * size).map(|i| blob.inside((i % size) as f64, (i / size) as f64, 1.0)).collect();
    let lesion = signed_distance(&mask, size);
    let (sx, sy, r) = (25.5, 16.0, 3.0);
    let satellite: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            ((x - sx).powi(2) + (y - sy).powi(2)).sqrt() - r
        })
        .collect();
    let scene = Scene {
        lesion,
        core: None,
        satellite: Some(satellite.clone()),
    };
    let root = Stream::new(0x2D0E, "two-mode");
    let image = render(&scene, size, 0.3, &mut root.derive("image"));
    let raters = (0..8)
        .map(|r| rate(&scene, size, 0.0, r % 2 == 0, &mut root.derive_index("rater", r)))
        .collect();
    TwoModeFixture {
        case: Case { image, raters },
        satellite: satellite.iter().map(|&d| d < 0.0).collect(),
    }
}
