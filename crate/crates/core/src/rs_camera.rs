//! Rolling-shutter CMOS image synthesis.
//!
//! Row `v` of a frame starting at `t_start` integrates light over
//! `[t_start + v * t_row, t_start + v * t_row + t_exp]`, so a lamp that
//! blinks faster than the frame rate shows up as horizontal stripes.
//! Pixel `(u, v)` has its centre at integer coordinates.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::occ_link::{frame_chips, FRAME_CHIPS};
use crate::scene::{AgentState, LedLamp, Pose, Scenario, Vec3};

/// Boundary samples used to outline each lamp.
pub const OUTLINE_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row readout interval, seconds.
    pub t_row: f64,
    /// Per-row exposure, seconds.
    pub t_exp: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal_px: 800.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            t_row: 50e-6,
            t_exp: 50e-6,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.focal_px > 0.0) {
            return Err("focal_px must be positive".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image must have nonzero size".into());
        }
        if !(self.t_row > 0.0 && self.t_exp > 0.0) {
            return Err("t_row and t_exp must be positive".into());
        }
        if self.t_exp > self.height as f64 * self.t_row {
            return Err("t_exp longer than the whole readout".into());
        }
        Ok(())
    }

    pub fn timing(&self, t_start: f64) -> RowTiming {
        RowTiming {
            t_start,
            t_row: self.t_row,
            t_exp: self.t_exp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTiming {
    pub t_start: f64,
    pub t_row: f64,
    pub t_exp: f64,
}

impl RowTiming {
    pub fn window(&self, row: usize) -> (f64, f64) {
        let a = self.t_start + row as f64 * self.t_row;
        (a, a + self.t_exp)
    }

    /// Mid-exposure time of a row.
    pub fn row_center(&self, row: f64) -> f64 {
        self.t_start + row * self.t_row + 0.5 * self.t_exp
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("point is behind the camera")]
pub struct Behind;

/// Pinhole projection; the camera looks along its own +z axis.
pub fn project_point(pose: &Pose, k: &CameraIntrinsics, p_world: &Vec3) -> Result<(f64, f64), Behind> {
    let pc = pose.to_camera(p_world);
    project_camera_point(k, &pc)
}

pub fn project_camera_point(k: &CameraIntrinsics, pc: &Vec3) -> Result<(f64, f64), Behind> {
    if pc.z <= 0.0 {
        return Err(Behind);
    }
    Ok((k.cx + k.focal_px * pc.x / pc.z, k.cy + k.focal_px * pc.y / pc.z))
}

/// Exact fraction of a row's exposure window during which the lamp is on.
pub fn row_exposure_fraction(lamp: &LedLamp, row: usize, timing: &RowTiming) -> f64 {
    if !lamp.modulated {
        return 1.0;
    }
    let (a, b) = timing.window(row);
    on_time(&frame_chips(lamp.uid), lamp.chip_rate, a, b) / timing.t_exp
}

/// Integral of the chip waveform over `[a, b]`, summed chip by chip.
fn on_time(frame: &[bool; FRAME_CHIPS], chip_rate: f64, a: f64, b: f64) -> f64 {
    let chip = 1.0 / chip_rate;
    let mut k = (a * chip_rate).floor() as i64;
    let mut total = 0.0;
    loop {
        let lo = k as f64 * chip;
        if lo >= b {
            break;
        }
        let hi = lo + chip;
        if frame[k.rem_euclid(FRAME_CHIPS as i64) as usize] {
            let overlap = hi.min(b) - lo.max(a);
            if overlap > 0.0 {
                total += overlap;
            }
        }
        k += 1;
    }
    total
}

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: f32) {
        self.data[v * self.width + u] = x;
    }

    pub fn row(&self, v: usize) -> &[f32] {
        &self.data[v * self.width..(v + 1) * self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsFrame {
    pub image: GrayImage,
    /// Exposure start of row 0, seconds.
    pub t_start: f64,
    pub camera_pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl RsFrame {
    pub fn timing(&self) -> RowTiming {
        self.intrinsics.timing(self.t_start)
    }
}

/// Horizontal extent of a convex polygon on scanline `v`.
fn scanline_span(poly: &[(f64, f64)], v: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..poly.len() {
        let (u0, v0) = poly[i];
        let (u1, v1) = poly[(i + 1) % poly.len()];
        if (v0 <= v && v < v1) || (v1 <= v && v < v0) {
            let u = u0 + (v - v0) * (u1 - u0) / (v1 - v0);
            lo = lo.min(u);
            hi = hi.max(u);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Projected outline of a lamp, or `None` if any outline point is behind
/// the camera.
pub fn lamp_polygon(lamp: &LedLamp, pose: &Pose, k: &CameraIntrinsics) -> Option<Vec<(f64, f64)>> {
    lamp.shape
        .outline(OUTLINE_SAMPLES)
        .into_iter()
        .map(|(dx, dy)| project_point(pose, k, &(lamp.center + Vec3::new(dx, dy, 0.0))).ok())
        .collect()
}

fn mix_seed(seed: u64, row: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ row.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders the agent's camera view at `t_start`.
///
/// One `u64` is drawn from `rng`; noise for each row then comes from its
/// own stream keyed by that value and the row index, so rows can be
/// rendered in parallel with bit-identical output.
pub fn render_frame<R: Rng + ?Sized>(scenario: &Scenario, agent: &AgentState, t_start: f64, rng: &mut R) -> RsFrame {
    render_view(scenario, &agent.pose, &agent.camera, t_start, rng)
}

pub fn render_view<R: Rng + ?Sized>(
    scenario: &Scenario,
    pose: &Pose,
    k: &CameraIntrinsics,
    t_start: f64,
    rng: &mut R,
) -> RsFrame {
    let noise_seed: u64 = rng.gen();
    let timing = k.timing(t_start);
    let (w, h) = (k.width, k.height);

    struct Visible<'a> {
        lamp: &'a LedLamp,
        poly: Vec<(f64, f64)>,
        v_lo: usize,
        v_hi: usize,
    }
    let visible: Vec<Visible> = scenario
        .lamps
        .iter()
        .filter_map(|lamp| {
            let poly = lamp_polygon(lamp, pose, k)?;
            let (mut umin, mut umax, mut vmin, mut vmax) =
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(u, v) in &poly {
                umin = umin.min(u);
                umax = umax.max(u);
                vmin = vmin.min(v);
                vmax = vmax.max(v);
            }
            if umax < 0.0 || vmax < 0.0 || umin > (w - 1) as f64 || vmin > (h - 1) as f64 {
                return None;
            }
            let v_lo = vmin.ceil().max(0.0) as usize;
            let v_hi = vmax.floor().min((h - 1) as f64) as usize;
            Some(Visible { lamp, poly, v_lo, v_hi })
        })
        .collect();

    let ambient = scenario.ambient_level as f32;
    let sigma = scenario.pixel_noise_sigma;
    let mut data = vec![ambient; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for vis in &visible {
            if v < vis.v_lo || v > vis.v_hi {
                continue;
            }
            let Some((ulo, uhi)) = scanline_span(&vis.poly, v as f64) else {
                continue;
            };
            let c0 = ulo.ceil().max(0.0);
            let c1 = uhi.floor().min((w - 1) as f64);
            if c0 > c1 {
                continue;
            }
            let level = (vis.lamp.radiance * row_exposure_fraction(vis.lamp, v, &timing)) as f32;
            for px in &mut row[c0 as usize..=c1 as usize] {
                *px += level;
            }
        }
        if sigma > 0.0 {
            let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(noise_seed, v as u64));
            for px in row.iter_mut() {
                let n: f64 = noise.sample(StandardNormal);
                *px += (n * sigma) as f32;
            }
        }
        for px in row.iter_mut() {
            *px = px.clamp(0.0, 1.0);
        }
    });

    RsFrame {
        image: GrayImage { width: w, height: h, data },
        t_start,
        camera_pose: *pose,
        intrinsics: *k,
    }
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)

#[derive(Debug, Error)]
pub enum PgmError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a binary PGM: {0}")]
    Format(String),
}

pub fn write_pgm<W: Write>(img: &GrayImage, mut out: W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

pub fn read_pgm<R: Read>(mut input: R) -> Result<GrayImage, PgmError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut token = || -> Result<String, PgmError> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::Format("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(PgmError::Format("magic is not P5".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| PgmError::Format(format!("bad number {s:?}")));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::Format(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = width * height;
    if buf.len() < start + n {
        return Err(PgmError::Format("raster shorter than header claims".into()));
    }
    let data = buf[start..start + n]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Ok(GrayImage { width, height, data })
}
