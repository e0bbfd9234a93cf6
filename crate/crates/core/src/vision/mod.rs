//! Receiver-side image processing: LED blob detection, stripe profiles and
//! UID recovery.

mod fusion;
mod tracker;

pub use fusion::{decode_fused, FusedDecode, TimedProfile};
pub use tracker::{LampTracker, TrackedRoi, TrackerConfig};

use std::collections::VecDeque;
use std::f64::consts::PI;

use thiserror::Error;

use crate::occ_link::{
    decode_chips, estimate_chip_rows, DecodeError, DecodeResult, FRAME_CHIPS, MIN_DECODE_CHIPS,
};
use crate::rs_camera::GrayImage;

/// Lit area undercounts a striped disk by the frame's fixed duty cycle.
pub const DUTY_COMPENSATION: f64 = FRAME_CHIPS as f64 / 11.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionConfig {
    /// Binarisation level as a fraction of (max - ambient) above ambient.
    pub threshold_fraction: f64,
    /// Length of the vertical closing element, rows. Gaps of up to
    /// `closing_rows - 1` dark rows inside a column are bridged.
    pub closing_rows: usize,
    pub min_pixels: usize,
    /// Half-width of the column band averaged into a stripe profile.
    pub band_half_width: usize,
    /// Threshold never sits closer to ambient than this many noise sigmas.
    pub noise_floor_sigmas: f64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.25,
            // longest dark run is 3 chips; 20 rows/chip covers 1 kHz at 50 us rows
            closing_rows: 61,
            min_pixels: 100,
            band_half_width: 2,
            noise_floor_sigmas: 5.0,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum VisionError {
    #[error("ROI spans only {0} rows, need at least 4")]
    TooSmall(usize),
}

/// One detected LED blob.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiDetection {
    /// Inclusive `(u_min, v_min, u_max, v_max)`.
    pub bbox: (usize, usize, usize, usize),
    /// Sub-pixel centre of the lamp outline.
    pub centroid: (f64, f64),
    /// Component boundary: left edges top to bottom, then right edges back up.
    pub contour: Vec<(usize, usize)>,
    pub equiv_diameter: f64,
    /// Pixels in the closed component.
    pub pixel_count: usize,
    /// Pixels above threshold before closing.
    pub lit_area: usize,
    /// Dark stripes were bridged inside the blob.
    pub modulated: bool,
    pub touches_border: bool,
    mask: Vec<bool>,
}

impl RoiDetection {
    pub fn width(&self) -> usize {
        self.bbox.2 - self.bbox.0 + 1
    }

    pub fn height(&self) -> usize {
        self.bbox.3 - self.bbox.1 + 1
    }

    /// Whether pixel `(u, v)` belongs to the closed component.
    pub fn contains(&self, u: usize, v: usize) -> bool {
        let (u0, v0, u1, v1) = self.bbox;
        if u < u0 || u > u1 || v < v0 || v > v1 {
            return false;
        }
        self.mask[(v - v0) * self.width() + (u - u0)]
    }
}

/// Per-row mean intensity down the middle of a blob.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeProfile {
    pub samples: Vec<f64>,
    /// Inclusive image rows covered by `samples`.
    pub row_range: (usize, usize),
}

impl StripeProfile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn select_median(values: &mut [f32]) -> f32 {
    let mid = values.len() / 2;
    *values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Background level and noise sigma from the 20th and 35th percentiles,
/// read as quantiles of a Gaussian. Stays valid while lamps cover up to
/// 65% of the frame and while noise clipped at zero stays below the 20th
/// percentile.
fn background_stats(img: &GrayImage) -> (f32, f32) {
    const Z20: f32 = -0.841_621_2;
    const Z35: f32 = -0.385_320_5;
    let mut scratch = img.data.clone();
    let n = scratch.len();
    let i35 = (n * 35) / 100;
    let (low, q35, _) = scratch.select_nth_unstable_by(i35, |a, b| a.total_cmp(b));
    let q35 = *q35;
    let i20 = (n * 20) / 100;
    let q20 = if i20 < low.len() {
        *low.select_nth_unstable_by(i20, |a, b| a.total_cmp(b)).1
    } else {
        q35
    };
    let sigma = ((q35 - q20) / (Z35 - Z20)).max(0.0);
    (q35 - Z35 * sigma, sigma)
}

/// Fills vertical gaps of up to `closing_rows - 1` rows between lit pixels
/// of the same column (1-D closing along columns).
fn close_columns(mask: &mut [bool], width: usize, height: usize, closing_rows: usize) {
    let max_gap = closing_rows.saturating_sub(1);
    for u in 0..width {
        let mut last: Option<usize> = None;
        for v in 0..height {
            if !mask[v * width + u] {
                continue;
            }
            if let Some(l) = last {
                let gap = v - l - 1;
                if gap > 0 && gap <= max_gap {
                    for g in l + 1..v {
                        mask[g * width + u] = true;
                    }
                }
            }
            last = Some(v);
        }
    }
}

/// 8-connected components of `mask`, each as a list of pixel indices.
fn label_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (u, v) = ((p % width) as isize, (p / width) as isize);
            for dv in -1..=1isize {
                for du in -1..=1isize {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= width as isize || nv >= height as isize {
                        continue;
                    }
                    let q = nv as usize * width + nu as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(pixels);
    }
    comps
}

/// Centre and area of an ellipse fitted to horizontal chords.
///
/// For any ellipse the squared half-chord is quadratic in the row and the
/// chord midpoints lie on a line; both meet at the centre. Returns
/// `(u0, v0, area)`.
fn fit_chord_ellipse(chords: &[(f64, f64, f64)]) -> Option<(f64, f64, f64)> {
    if chords.len() < 5 {
        return None;
    }
    let n = chords.len() as f64;
    let v_mean = chords.iter().map(|c| c.0).sum::<f64>() / n;
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    let (mut sy, mut syy, mut sm, mut sym) = (0.0, 0.0, 0.0, 0.0);
    for &(v, mid, half) in chords {
        let y = v - v_mean;
        let row = nalgebra::Vector3::new(1.0, y, y * y);
        ata += row * row.transpose();
        atb += row * (half * half);
        sy += y;
        syy += y * y;
        sm += mid;
        sym += y * mid;
    }
    let coef = ata.lu().solve(&atb)?;
    let (a, b, c) = (coef[0], coef[1], coef[2]);
    if !(c < 0.0) {
        return None;
    }
    let y0 = -b / (2.0 * c);
    let h0_sq = a - b * b / (4.0 * c);
    if !(h0_sq > 0.0) {
        return None;
    }
    let semi_v = (h0_sq / -c).sqrt();
    // the fitted rows must cover a fair share of the outline
    let (lo, hi) = chords
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.0), hi.max(c.0)));
    if hi - lo < 0.4 * semi_v {
        return None;
    }
    let rms = (chords
        .iter()
        .map(|&(v, _, half)| {
            let y = v - v_mean;
            (a + b * y + c * y * y - half * half).powi(2)
        })
        .sum::<f64>()
        / n)
        .sqrt();
    if rms > 0.1 * h0_sq {
        return None;
    }
    let denom = n * syy - sy * sy;
    let slope = if denom.abs() > 1e-12 { (n * sym - sy * sm) / denom } else { 0.0 };
    let icept = (sm - slope * sy) / n;

    // Rows on one side of the centre only (lamp dark for the other half of
    // the readout): the free quadratic is poorly conditioned there, so fall
    // back to a circle, h^2 + y^2 = a + b y, which is linear and stable.
    let (lo, hi) = (lo - v_mean, hi - v_mean);
    if y0 - lo < 0.3 * semi_v || hi - y0 < 0.3 * semi_v {
        let mut m = nalgebra::Matrix2::<f64>::zeros();
        let mut r = nalgebra::Vector2::<f64>::zeros();
        for &(v, _, half) in chords {
            let y = v - v_mean;
            let row = nalgebra::Vector2::new(1.0, y);
            m += row * row.transpose();
            r += row * (half * half + y * y);
        }
        let sol = m.lu().solve(&r)?;
        let yc = sol[1] / 2.0;
        let r_sq = sol[0] + yc * yc;
        if !(r_sq > 0.0) {
            return None;
        }
        return Some((icept + slope * yc, v_mean + yc, PI * r_sq));
    }
    Some((icept + slope * y0, v_mean + y0, PI * h0_sq.sqrt() * semi_v))
}

/// Finds LED blobs.
///
/// Threshold at `ambient + f * (max - ambient)` with ambient the median
/// pixel, close vertically to merge stripes, label 8-connected components
/// and keep those of at least `min_pixels`. The centre and size come from
/// an ellipse fitted to fully lit rows when the fit is sound; otherwise the
/// intensity-weighted centroid and the duty-compensated lit area are used.
pub fn detect_rois(img: &GrayImage, cfg: &VisionConfig) -> Vec<RoiDetection> {
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let (ambient, sigma) = background_stats(img);
    let max = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (max - ambient) as f64;
    let floor = cfg.noise_floor_sigmas * sigma as f64;
    if span <= floor.max(1e-3) {
        return Vec::new();
    }
    let threshold = (ambient as f64 + (cfg.threshold_fraction * span).max(floor)) as f32;
    let lit: Vec<bool> = img.data.iter().map(|&x| x > threshold).collect();
    let mut closed = lit.clone();
    close_columns(&mut closed, w, h, cfg.closing_rows);

    let mut rois = Vec::new();
    for pixels in label_components(&closed, w, h) {
        if pixels.len() < cfg.min_pixels {
            continue;
        }
        let (mut u0, mut v0, mut u1, mut v1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &pixels {
            let (u, v) = (p % w, p / w);
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
        let bw = u1 - u0 + 1;
        let bh = v1 - v0 + 1;
        let mut mask = vec![false; bw * bh];
        let (mut sw, mut su, mut sv) = (0.0f64, 0.0f64, 0.0f64);
        let mut lit_area = 0;
        for &p in &pixels {
            let (u, v) = (p % w, p / w);
            mask[(v - v0) * bw + (u - u0)] = true;
            if lit[p] {
                lit_area += 1;
            }
            let wt = (img.data[p] - ambient).max(0.0) as f64;
            sw += wt;
            su += wt * u as f64;
            sv += wt * v as f64;
        }

        let mut contour_left = Vec::with_capacity(bh);
        let mut contour_right = Vec::with_capacity(bh);
        let mut chords = Vec::new();
        for v in v0..=v1 {
            let row_mask = &mask[(v - v0) * bw..(v - v0 + 1) * bw];
            let Some(first) = row_mask.iter().position(|&m| m) else { continue };
            let last = row_mask.iter().rposition(|&m| m).unwrap();
            contour_left.push((u0 + first, v));
            contour_right.push((u0 + last, v));
            let in_row = row_mask.iter().filter(|&&m| m).count();
            let lit_cols: Vec<usize> = (first..=last)
                .filter(|&i| row_mask[i] && lit[v * w + u0 + i])
                .collect();
            if lit_cols.len() >= 2 && lit_cols.len() as f64 >= 0.9 * in_row as f64 {
                let l = lit_cols[0] as f64;
                let r = *lit_cols.last().unwrap() as f64;
                chords.push((v as f64, u0 as f64 + (l + r) / 2.0, (r - l + 1.0) / 2.0));
            }
        }
        contour_right.reverse();
        contour_left.extend(contour_right);

        let modulated = pixels.len() as f64 > 1.02 * lit_area as f64;
        let weighted = if sw > 0.0 {
            (su / sw, sv / sw)
        } else {
            ((u0 + u1) as f64 / 2.0, (v0 + v1) as f64 / 2.0)
        };
        // A lamp lit over only part of its rows has its centre outside the
        // lit rows, so the vertical window is widened by one semi-axis.
        let fitted = fit_chord_ellipse(&chords).filter(|&(cu, cv, area)| {
            let semi = (area / PI).sqrt();
            cu >= u0 as f64 - 0.5 && cu <= u1 as f64 + 0.5 && cv >= v0 as f64 - semi && cv <= v1 as f64 + semi
        });
        let (centroid, area) = match fitted {
            Some((cu, cv, area)) => ((cu, cv), area),
            None => {
                let factor = if modulated { DUTY_COMPENSATION } else { 1.0 };
                (weighted, lit_area as f64 * factor)
            }
        };

        rois.push(RoiDetection {
            bbox: (u0, v0, u1, v1),
            centroid,
            contour: contour_left,
            equiv_diameter: 2.0 * (area / PI).sqrt(),
            pixel_count: pixels.len(),
            lit_area,
            modulated,
            touches_border: u0 == 0 || v0 == 0 || u1 == w - 1 || v1 == h - 1,
            mask,
        });
    }
    rois
}

/// Mean intensity per row over a narrow column band through the centroid,
/// using only pixels inside the component.
pub fn extract_profile(img: &GrayImage, roi: &RoiDetection, cfg: &VisionConfig) -> Result<StripeProfile, VisionError> {
    let (u0, v0, u1, v1) = roi.bbox;
    let rows = v1 - v0 + 1;
    if rows < 4 {
        return Err(VisionError::TooSmall(rows));
    }
    let cu = roi.centroid.0.round().clamp(u0 as f64, u1 as f64) as usize;
    let band_lo = cu.saturating_sub(cfg.band_half_width).max(u0);
    let band_hi = (cu + cfg.band_half_width).min(u1);
    let mut samples: Vec<Option<f64>> = (v0..=v1)
        .map(|v| {
            let (mut s, mut n) = (0.0, 0usize);
            for u in band_lo..=band_hi {
                if roi.contains(u, v) {
                    s += img.get(u, v) as f64;
                    n += 1;
                }
            }
            (n > 0).then(|| s / n as f64)
        })
        .collect();
    // rows where the band misses the component borrow the nearest sample
    if samples.iter().all(Option::is_none) {
        return Err(VisionError::TooSmall(0));
    }
    let mut last = None;
    for s in samples.iter_mut() {
        match s {
            Some(x) => last = Some(*x),
            None => *s = last,
        }
    }
    let mut next = None;
    for s in samples.iter_mut().rev() {
        match s {
            Some(x) => next = Some(*x),
            None => *s = next,
        }
    }
    Ok(StripeProfile {
        samples: samples.into_iter().map(|s| s.unwrap()).collect(),
        row_range: (v0, v1),
    })
}

/// Robust sigma of a profile from first differences.
fn profile_noise(samples: &[f64]) -> f64 {
    if samples.len() < 3 {
        return 0.0;
    }
    let mut d: Vec<f32> = samples.windows(2).map(|w| (w[1] - w[0]).abs() as f32).collect();
    select_median(&mut d) as f64 / 0.954
}

/// Minimum on/off contrast for a profile to count as modulated.
fn min_contrast(noise: f64) -> f64 {
    (8.0 * noise).max(0.05)
}

/// Binarised runs `(level, start index, length)`.
fn runs_of(samples: &[f64], mid: f64) -> Vec<(bool, usize, usize)> {
    let mut runs: Vec<(bool, usize, usize)> = Vec::new();
    for (i, &s) in samples.iter().enumerate() {
        let b = s > mid;
        match runs.last_mut() {
            Some(r) if r.0 == b => r.2 += 1,
            _ => runs.push((b, i, 1)),
        }
    }
    runs
}

/// Rows per chip from runs, preferring interior runs (edge runs are cut by
/// the blob outline), then refined as total rows over total chips.
fn chip_rows_from_runs(runs: &[(bool, usize, usize)]) -> Result<f64, DecodeError> {
    let lens: Vec<usize> = runs.iter().map(|r| r.2).collect();
    let basis: &[usize] = if lens.len() >= 6 { &lens[1..lens.len() - 1] } else { &lens };
    let w = estimate_chip_rows(basis)?;
    let (rows, chips) = basis
        .iter()
        .filter(|&&r| r >= 2)
        .fold((0.0, 0.0), |(r, c), &l| (r + l as f64, c + (l as f64 / w).round().max(1.0)));
    Ok(if chips > 0.0 { rows / chips } else { w })
}

/// Decodes the UID from one frame's stripe profile.
pub fn decode_roi(profile: &StripeProfile) -> Result<DecodeResult, DecodeError> {
    let s = &profile.samples;
    let (lo, hi) = s
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if s.len() < 4 || hi - lo < min_contrast(profile_noise(s)) {
        return Err(DecodeError::DegenerateProfile);
    }
    let runs = runs_of(s, (lo + hi) / 2.0);
    if runs.len() < 4 {
        return Err(DecodeError::DegenerateProfile);
    }
    let w = chip_rows_from_runs(&runs)?;
    let mut chips = Vec::new();
    for &(level, _, len) in &runs {
        let n = (len as f64 / w).round() as usize;
        chips.extend(std::iter::repeat(level).take(n));
    }
    if chips.len() < MIN_DECODE_CHIPS {
        return Err(DecodeError::NeedMoreRows(chips.len()));
    }
    decode_chips(&chips)
}

pub(crate) fn bounded_push<T>(q: &mut VecDeque<T>, item: T, cap: usize) {
    q.push_back(item);
    while q.len() > cap {
        q.pop_front();
    }
}
