//! Deterministic synthetic faces.
//!
//! Every sample is a pure function of `(seed, index)`. Each attribute owns a
//! fixed pixel region, so flipping one attribute bit only changes pixels in
//! that attribute's region map:
//!
//! | attribute  | region                                   |
//! |------------|------------------------------------------|
//! | blond-hair | hair cap above the hairline              |
//! | black-hair | hair cap above the hairline              |
//! | glasses    | eye band rectangle                       |
//! | smile      | mouth stamp rectangle                    |
//! | pale-skin  | face ellipse (skin shows through blends) |
//!
//! Exactly one of the two hair colours is active per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainLabel, ImageTensor};
use crate::error::{config, Result};

pub const ATTRIBUTE_NAMES: [&str; 5] = ["blond-hair", "black-hair", "glasses", "smile", "pale-skin"];

const BLOND: usize = 0;
const BLACK: usize = 1;
const GLASSES: usize = 2;
const SMILE: usize = 3;
const PALE: usize = 4;

pub const MASK_FACE: f32 = 1.0;
pub const MASK_BACKGROUND: f32 = 0.01;

/// Stamp radius of a landmark: each keypoint lights a 3×3 window.
const STAMP_RADIUS: i64 = 1;
const STAMP_SIGMA: f64 = 0.6;

/// Colour table used by the renderer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub blond: [f32; 3],
    pub black: [f32; 3],
    pub skin: [f32; 3],
    pub pale_skin: [f32; 3],
    pub lens: [f32; 3],
    pub frame: [f32; 3],
    pub eye: [f32; 3],
    pub lip: [f32; 3],
}

pub const PALETTE: Palette = Palette {
    blond: [0.95, 0.82, 0.35],
    black: [0.08, 0.07, 0.07],
    skin: [0.80, 0.58, 0.44],
    pale_skin: [0.97, 0.89, 0.83],
    lens: [0.30, 0.42, 0.55],
    frame: [0.10, 0.10, 0.14],
    eye: [0.12, 0.10, 0.10],
    lip: [0.72, 0.22, 0.28],
};

fn default_attributes() -> Vec<String> {
    ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFaceSpec {
    pub seed: u64,
    #[serde(default = "SynthFaceSpec::default_resolution")]
    pub resolution: usize,
    /// Attribute names carried in the labels, in label order.
    #[serde(default = "default_attributes")]
    pub attributes: Vec<String>,
    #[serde(default = "SynthFaceSpec::default_landmarks")]
    pub landmark_points: usize,
}

impl Default for SynthFaceSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: Self::default_resolution(),
            attributes: default_attributes(),
            landmark_points: Self::default_landmarks(),
        }
    }
}

impl SynthFaceSpec {
    fn default_resolution() -> usize {
        32
    }

    fn default_landmarks() -> usize {
        8
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Positions of the spec's attributes within [`ATTRIBUTE_NAMES`].
    pub fn attribute_indices(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.attributes.len());
        for name in &self.attributes {
            let idx = ATTRIBUTE_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| config(format!("unknown attribute {name:?}")))?;
            if out.contains(&idx) {
                return Err(config(format!("attribute {name:?} listed twice")));
            }
            out.push(idx);
        }
        if out.is_empty() {
            return Err(config("at least one attribute is required"));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(config(format!("resolution {} is below 8", self.resolution)));
        }
        if self.landmark_points == 0 || self.landmark_points > 8 {
            return Err(config(format!(
                "landmark_points must be in 1..=8, got {}",
                self.landmark_points
            )));
        }
        self.attribute_indices().map(|_| ())
    }

    fn scale(&self) -> f64 {
        self.resolution as f64 / 32.0
    }

    /// Largest mouth curvature magnitude, in pixels.
    pub fn max_curvature(&self) -> f64 {
        3.0 * self.scale()
    }

    /// Largest per-frame curvature change of a speaker sequence.
    pub fn curvature_step(&self) -> f64 {
        0.6 * self.scale()
    }

    fn lip_thickness(&self) -> f64 {
        1.1 * self.scale()
    }

    /// Upper bound on the mean L1 distance between consecutive speaker
    /// frames. Only mouth-stamp pixels move, each by at most
    /// `|Δk|·max|∂yc/∂k| / thickness` of a unit colour swing, with
    /// `max|∂yc/∂k| = 1/2`.
    pub fn motion_bound(&self) -> f64 {
        let r = self.resolution;
        let stamp = RegionMaps::mouth_stamp_extent(self);
        let frac = stamp as f64 / (r * r) as f64;
        frac * 0.5 * self.curvature_step() / self.lip_thickness()
    }
}

/// Identity-level rendering parameters. Attribute bits are kept separately
/// so they can be flipped without disturbing anything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub background: [f32; 3],
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub skin_jitter: [f32; 3],
    /// Strength of the mouth expression in `[0.6, 1]`.
    pub mouth_amount: f64,
    /// All five internal attribute bits, in [`ATTRIBUTE_NAMES`] order.
    pub bits: [u8; 5],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

/// Per-attribute pixel masks (row-major `H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaps {
    pub hair: Vec<bool>,
    pub glasses: Vec<bool>,
    pub mouth: Vec<bool>,
    pub skin: Vec<bool>,
}

impl RegionMaps {
    /// Map for an attribute index in [`ATTRIBUTE_NAMES`] order.
    pub fn for_attribute(&self, attr: usize) -> &[bool] {
        match attr {
            BLOND | BLACK => &self.hair,
            GLASSES => &self.glasses,
            SMILE => &self.mouth,
            _ => &self.skin,
        }
    }

    fn mouth_stamp_extent(spec: &SynthFaceSpec) -> usize {
        // Width and height of the stamp rectangle are fixed by the geometry
        // bounds; this is a conservative pixel count.
        let s = spec.scale();
        let half_w = 0.42 * 10.3 * s + 1.0;
        let half_h = spec.max_curvature() / 2.0 + spec.lip_thickness() + 1.0;
        ((2.0 * half_w + 2.0) * (2.0 * half_h + 2.0)).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub index: usize,
    pub image: ImageTensor,
    pub label: DomainLabel,
    /// One-channel keypoint stamps; the guidance input `z`.
    pub landmark_map: ImageTensor,
    /// Face region 1.0, background 0.01.
    pub mask: ImageTensor,
    pub keypoints: Vec<Keypoint>,
    pub params: FaceParams,
    pub curvature: f64,
}

fn sample_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ salt;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

impl FaceParams {
    fn draw(spec: &SynthFaceSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.scale();
        let r = spec.resolution as f64;
        let mut background = [0f32; 3];
        for c in &mut background {
            *c = rng.gen_range(0.2..0.8);
        }
        let cx = r / 2.0 + rng.gen_range(-1.0..1.0) * s;
        let cy = r / 2.0 + (1.0 + rng.gen_range(-1.0..1.0)) * s;
        let rx = (9.5 + rng.gen_range(-0.8..0.8)) * s;
        let ry = (11.5 + rng.gen_range(-0.8..0.8)) * s;
        let mut skin_jitter = [0f32; 3];
        for c in &mut skin_jitter {
            *c = rng.gen_range(-0.04..0.04);
        }
        let mouth_amount = rng.gen_range(0.6..1.0);
        let mut bits = [0u8; 5];
        if rng.gen_bool(0.5) {
            bits[BLOND] = 1;
        } else {
            bits[BLACK] = 1;
        }
        bits[GLASSES] = rng.gen_bool(0.35) as u8;
        bits[SMILE] = rng.gen_bool(0.5) as u8;
        bits[PALE] = rng.gen_bool(0.3) as u8;
        Self {
            background,
            cx,
            cy,
            rx,
            ry,
            skin_jitter,
            mouth_amount,
            bits,
        }
    }

    /// Mouth curvature implied by the smile bit.
    pub fn curvature(&self, spec: &SynthFaceSpec) -> f64 {
        let k = self.mouth_amount * spec.max_curvature();
        if self.bits[SMILE] == 1 {
            k
        } else {
            -0.25 * k
        }
    }

    fn eye_line(&self) -> f64 {
        self.cy - 0.18 * self.ry
    }

    fn hairline(&self) -> f64 {
        self.cy - 0.45 * self.ry
    }

    fn mouth_center(&self) -> f64 {
        self.cy + 0.48 * self.ry
    }

    fn mouth_half_width(&self) -> f64 {
        0.42 * self.rx
    }

    /// Integer eye-band rectangle `[x0, x1) × [y0, y1)`.
    fn eye_band(&self, spec: &SynthFaceSpec) -> (i64, i64, i64, i64) {
        let s = spec.scale();
        let ey = self.eye_line();
        (
            (self.cx - 0.78 * self.rx).floor() as i64,
            (self.cx + 0.78 * self.rx).ceil() as i64,
            (ey - 1.5 * s).floor() as i64,
            (ey + 1.5 * s).ceil() as i64,
        )
    }

    fn mouth_stamp(&self, spec: &SynthFaceSpec) -> (i64, i64, i64, i64) {
        let my = self.mouth_center();
        let hw = self.mouth_half_width() + 1.0;
        let hh = spec.max_curvature() / 2.0 + spec.lip_thickness() + 1.0;
        (
            (self.cx - hw).floor() as i64,
            (self.cx + hw).ceil() as i64 + 1,
            (my - hh).floor() as i64,
            (my + hh).ceil() as i64 + 1,
        )
    }

    fn face_radius(&self, px: f64, py: f64) -> f64 {
        (((px - self.cx) / self.rx).powi(2) + ((py - self.cy) / self.ry).powi(2)).sqrt()
    }

    fn face_alpha(&self, px: f64, py: f64) -> f64 {
        let rho = self.face_radius(px, py);
        (0.5 + (1.0 - rho) * 0.5 * (self.rx + self.ry)).clamp(0.0, 1.0)
    }

    fn hair_alpha(&self, px: f64, py: f64) -> f64 {
        let rho = (((px - self.cx) / (1.12 * self.rx)).powi(2)
            + ((py - self.cy) / (1.12 * self.ry)).powi(2))
        .sqrt();
        let inside = (0.5 + (1.0 - rho) * 0.56 * (self.rx + self.ry)).clamp(0.0, 1.0);
        let above = (0.5 + (self.hairline() - py)).clamp(0.0, 1.0);
        inside * above
    }

    fn skin(&self) -> [f32; 3] {
        let base = if self.bits[PALE] == 1 {
            PALETTE.pale_skin
        } else {
            PALETTE.skin
        };
        [0, 1, 2].map(|c| (base[c] + self.skin_jitter[c]).clamp(0.0, 1.0))
    }

    pub fn region_maps(&self, spec: &SynthFaceSpec) -> RegionMaps {
        let r = spec.resolution;
        let mut maps = RegionMaps {
            hair: vec![false; r * r],
            glasses: vec![false; r * r],
            mouth: vec![false; r * r],
            skin: vec![false; r * r],
        };
        let (ex0, ex1, ey0, ey1) = self.eye_band(spec);
        let (mx0, mx1, my0, my1) = self.mouth_stamp(spec);
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * r + x;
                let (xi, yi) = (x as i64, y as i64);
                maps.hair[i] = self.hair_alpha(px, py) > 0.0;
                maps.glasses[i] = xi >= ex0 && xi < ex1 && yi >= ey0 && yi < ey1;
                maps.mouth[i] = xi >= mx0 && xi < mx1 && yi >= my0 && yi < my1;
                maps.skin[i] = self.face_alpha(px, py) > 0.0;
            }
        }
        maps
    }

    /// Keypoints ordered mouth-first so truncated landmark sets keep the
    /// expression-bearing points.
    pub fn keypoints(&self, curvature: f64) -> [Keypoint; 8] {
        let my = self.mouth_center();
        let mw = self.mouth_half_width();
        let corner_y = my + curvature * (0.5 - 1.0);
        let ey = self.eye_line();
        [
            Keypoint { x: self.cx, y: my + 0.5 * curvature },
            Keypoint { x: self.cx - mw, y: corner_y },
            Keypoint { x: self.cx + mw, y: corner_y },
            Keypoint { x: self.cx - 0.38 * self.rx, y: ey },
            Keypoint { x: self.cx + 0.38 * self.rx, y: ey },
            Keypoint { x: self.cx, y: self.cy + 0.12 * self.ry },
            Keypoint { x: self.cx, y: self.cy + 0.92 * self.ry },
            Keypoint { x: self.cx, y: self.hairline() },
        ]
    }

    /// Render the RGB image for the given mouth curvature.
    pub fn render(&self, spec: &SynthFaceSpec, curvature: f64) -> ImageTensor {
        let r = spec.resolution;
        let s = spec.scale();
        let skin = self.skin();
        let hair = if self.bits[BLOND] == 1 {
            PALETTE.blond
        } else {
            PALETTE.black
        };
        let (ex0, ex1, ey0, ey1) = self.eye_band(spec);
        let (mx0, mx1, my0, my1) = self.mouth_stamp(spec);
        let ey = self.eye_line();
        let my = self.mouth_center();
        let mw = self.mouth_half_width();
        let thick = spec.lip_thickness();
        let eye_r = 1.0 * s;
        let lerp = |a: [f64; 3], b: [f32; 3], t: f64| -> [f64; 3] {
            [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] as f64 * t)
        };
        let mut data = Vec::with_capacity(r * r * 3);
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (xi, yi) = (x as i64, y as i64);
                let mut p = self.background.map(|v| v as f64);
                p = lerp(p, skin, self.face_alpha(px, py));
                p = lerp(p, hair, self.hair_alpha(px, py));
                if xi >= ex0 && xi < ex1 && yi >= ey0 && yi < ey1 {
                    for eye_x in [self.cx - 0.38 * self.rx, self.cx + 0.38 * self.rx] {
                        let d = ((px - eye_x).powi(2) + (py - ey).powi(2)).sqrt();
                        p = lerp(p, PALETTE.eye, (eye_r + 0.5 - d).clamp(0.0, 1.0));
                    }
                    if self.bits[GLASSES] == 1 {
                        let border = xi == ex0 || xi == ex1 - 1 || yi == ey0 || yi == ey1 - 1
                            || (px - self.cx).abs() < 0.75 * s;
                        p = if border {
                            PALETTE.frame.map(|v| v as f64)
                        } else {
                            lerp(p, PALETTE.lens, 0.75)
                        };
                    }
                }
                if xi >= mx0 && xi < mx1 && yi >= my0 && yi < my1 {
                    let u = (px - self.cx) / mw;
                    if u.abs() <= 1.0 {
                        let yc = my + curvature * (0.5 - u * u);
                        let fade = ((1.0 - u.abs()) * mw).clamp(0.0, 1.0);
                        let w = (1.0 - (py - yc).abs() / thick).clamp(0.0, 1.0) * fade;
                        p = lerp(p, PALETTE.lip, w);
                    }
                }
                data.extend(p.map(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
        ImageTensor::new(r, r, 3, data).expect("renderer produces valid images")
    }

    /// Face region 1.0, everything else 0.01.
    pub fn mask(&self, spec: &SynthFaceSpec) -> ImageTensor {
        let r = spec.resolution;
        let data = (0..r * r)
            .map(|i| {
                let (px, py) = ((i % r) as f64 + 0.5, (i / r) as f64 + 0.5);
                if self.face_radius(px, py) <= 1.0 {
                    MASK_FACE
                } else {
                    MASK_BACKGROUND
                }
            })
            .collect();
        ImageTensor::new(r, r, 1, data).expect("mask is valid")
    }
}

/// Rasterize keypoints as Gaussian-weighted 3×3 stamps (max over points).
pub fn render_landmark_map(resolution: usize, keypoints: &[Keypoint]) -> ImageTensor {
    let r = resolution as i64;
    let mut data = vec![0f32; resolution * resolution];
    for kp in keypoints {
        let (kx, ky) = (kp.x.floor() as i64, kp.y.floor() as i64);
        for dy in -STAMP_RADIUS..=STAMP_RADIUS {
            for dx in -STAMP_RADIUS..=STAMP_RADIUS {
                let (x, y) = (kx + dx, ky + dy);
                if x < 0 || y < 0 || x >= r || y >= r {
                    continue;
                }
                let d2 = (x as f64 + 0.5 - kp.x).powi(2) + (y as f64 + 0.5 - kp.y).powi(2);
                let v = (-d2 / (2.0 * STAMP_SIGMA * STAMP_SIGMA)).exp() as f32;
                let cell = &mut data[(y * r + x) as usize];
                *cell = cell.max(v);
            }
        }
    }
    ImageTensor::new(resolution, resolution, 1, data).expect("landmark map is valid")
}

fn assemble(
    spec: &SynthFaceSpec,
    index: usize,
    params: FaceParams,
    curvature: f64,
    attr_idx: &[usize],
) -> FaceSample {
    let keypoints: Vec<Keypoint> = params.keypoints(curvature)[..spec.landmark_points].to_vec();
    let label = DomainLabel {
        bits: attr_idx.iter().map(|&i| params.bits[i]).collect(),
    };
    FaceSample {
        index,
        image: params.render(spec, curvature),
        label,
        landmark_map: render_landmark_map(spec.resolution, &keypoints),
        mask: params.mask(spec),
        keypoints,
        params,
        curvature,
    }
}

/// Sample `index` of the dataset defined by `spec`.
pub fn generate_sample(spec: &SynthFaceSpec, index: usize) -> Result<FaceSample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index as u64, 0);
    let params = FaceParams::draw(spec, &mut rng);
    let k = params.curvature(spec);
    Ok(assemble(spec, index, params, k, &spec.attribute_indices()?))
}

/// Re-render a sample with replaced attribute bits, keeping its identity.
pub fn rerender_with_bits(spec: &SynthFaceSpec, sample: &FaceSample, bits: [u8; 5]) -> FaceSample {
    let mut params = sample.params.clone();
    params.bits = bits;
    let k = params.curvature(spec);
    let idx = spec.attribute_indices().expect("validated spec");
    assemble(spec, sample.index, params, k, &idx)
}

pub fn generate_dataset(spec: &SynthFaceSpec, count: usize) -> Result<Vec<FaceSample>> {
    if count == 0 {
        return Err(config("dataset count must be at least 1"));
    }
    spec.validate()?;
    (0..count).map(|i| generate_sample(spec, i)).collect()
}

/// One identity with a smoothly wandering mouth curvature.
pub fn generate_speaker_sequence(spec: &SynthFaceSpec, frames: usize) -> Result<Vec<FaceSample>> {
    if frames < 2 {
        return Err(config("a speaker sequence needs at least 2 frames"));
    }
    spec.validate()?;
    let attr_idx = spec.attribute_indices()?;
    let mut rng = sample_rng(spec.seed, 0, 0x5EED_5EC0);
    let identity = FaceParams::draw(spec, &mut rng);
    let kmax = spec.max_curvature();
    let step = spec.curvature_step();
    let mut k = rng.gen_range(-0.5..0.5) * kmax;
    let mut velocity = 0.0f64;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            velocity = 0.85 * velocity + 0.15 * step * rng.gen_range(-1.0..1.0);
            k = (k + velocity).clamp(-kmax, kmax);
        }
        let mut params = identity.clone();
        params.bits[SMILE] = (k > 0.0) as u8;
        out.push(assemble(spec, t, params, k, &attr_idx));
    }
    Ok(out)
}
