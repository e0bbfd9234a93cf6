//! Multi-frame decoding for blobs too small to hold two whole frames.
//!
//! Each profile row is a sample of the lamp's periodic waveform at a known
//! time (frame start plus row offset). Once the chip period is known to a
//! small fraction of a chip over the whole capture span, all samples fold
//! onto one 21-chip cycle. The period is found in three steps: a coarse
//! estimate from run lengths, a phase-coherence scan of the stripe edge
//! times around it, and a fold-consistency check that rejects the aliases
//! the scan cannot tell apart.

use std::f64::consts::PI;

use crate::occ_link::{decode_chips, estimate_chip_rows, DecodeError, DecodeResult, FRAME_CHIPS};
use crate::rs_camera::RowTiming;

use super::{min_contrast, profile_noise, runs_of, StripeProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct TimedProfile {
    pub profile: StripeProfile,
    pub timing: RowTiming,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedDecode {
    pub result: DecodeResult,
    /// Recovered chip duration, seconds.
    pub chip_period: f64,
    pub frames: usize,
    /// Fraction of folded samples agreeing with their chip's majority.
    pub consistency: f64,
}

const SEARCH_SPAN: f64 = 0.15;
const MAX_CANDIDATES: usize = 16;
const MIN_CONSISTENCY: f64 = 0.95;
/// Chips that must be seen in at least two different cycles, so the fold
/// is checked against itself and not just filled in.
const MIN_REVISITED: usize = 7;

struct Fold {
    chips: [bool; FRAME_CHIPS],
    coverage: usize,
    revisited: usize,
    consistency: f64,
}

fn coherence(edges: &[f64], period: f64) -> (f64, f64) {
    let (mut c, mut s) = (0.0, 0.0);
    for &t in edges {
        let th = 2.0 * PI * t / period;
        c += th.cos();
        s += th.sin();
    }
    let n = edges.len() as f64;
    ((c * c + s * s).sqrt() / n, s.atan2(c) / (2.0 * PI))
}

fn fold(samples: &[(f64, bool)], period: f64, phase: f64, margin: f64) -> Fold {
    let mut ones = [0usize; FRAME_CHIPS];
    let mut zeros = [0usize; FRAME_CHIPS];
    let mut first_cycle = [None::<i64>; FRAME_CHIPS];
    let mut repeat = [false; FRAME_CHIPS];
    for &(t, level) in samples {
        let x = t / period - phase;
        let k = x.floor();
        let frac = x - k;
        if frac < margin || frac > 1.0 - margin {
            continue;
        }
        let bin = (k as i64).rem_euclid(FRAME_CHIPS as i64) as usize;
        let cycle = (k as i64).div_euclid(FRAME_CHIPS as i64);
        match first_cycle[bin] {
            None => first_cycle[bin] = Some(cycle),
            Some(c) if c != cycle => repeat[bin] = true,
            _ => {}
        }
        if level {
            ones[bin] += 1;
        } else {
            zeros[bin] += 1;
        }
    }
    let mut chips = [false; FRAME_CHIPS];
    let (mut agree, mut total, mut coverage) = (0, 0, 0);
    for b in 0..FRAME_CHIPS {
        let n = ones[b] + zeros[b];
        if n > 0 {
            coverage += 1;
        }
        chips[b] = ones[b] > zeros[b];
        agree += ones[b].max(zeros[b]);
        total += n;
    }
    Fold {
        chips,
        coverage,
        revisited: repeat.iter().filter(|&&r| r).count(),
        consistency: if total > 0 { agree as f64 / total as f64 } else { 0.0 },
    }
}

/// Decodes a UID from stripe profiles of the same lamp captured in several
/// frames. Only the receiver's own row timing is used; the chip rate is
/// recovered from the data.
pub fn decode_fused(segments: &[TimedProfile]) -> Result<FusedDecode, DecodeError> {
    let all: Vec<f64> = segments.iter().flat_map(|s| s.profile.samples.iter().copied()).collect();
    if all.len() < 4 {
        return Err(DecodeError::DegenerateProfile);
    }
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let mut noise: Vec<f64> = segments.iter().map(|s| profile_noise(&s.profile.samples)).collect();
    noise.sort_by(f64::total_cmp);
    if hi - lo < min_contrast(noise[noise.len() / 2]) {
        return Err(DecodeError::DegenerateProfile);
    }
    let mid = (lo + hi) / 2.0;

    let t_ref = segments[0].timing.t_start;
    let mut edges = Vec::new();
    let mut interior_lens = Vec::new();
    let mut interior_durations = Vec::new();
    let mut samples = Vec::with_capacity(all.len());
    let mut visible_rows = 0usize;
    for seg in segments {
        let s = &seg.profile.samples;
        let row0 = seg.profile.row_range.0 as f64;
        visible_rows += s.len();
        for (i, &x) in s.iter().enumerate() {
            samples.push((seg.timing.row_center(row0 + i as f64) - t_ref, x > mid));
        }
        let runs = runs_of(s, mid);
        let mut seg_edges = Vec::new();
        for pair in runs.windows(2) {
            let i = pair[0].1 + pair[0].2 - 1;
            let (a, b) = (s[i], s[i + 1]);
            let x = i as f64 + ((mid - a) / (b - a)).clamp(0.0, 1.0);
            seg_edges.push(seg.timing.row_center(row0 + x) - t_ref);
        }
        if runs.len() > 2 {
            interior_lens.extend(runs[1..runs.len() - 1].iter().map(|r| r.2));
            interior_durations.extend(seg_edges.windows(2).map(|w| w[1] - w[0]));
        }
        edges.extend(seg_edges);
    }
    if interior_lens.len() < 4 {
        return Err(DecodeError::NeedMoreRows(interior_lens.len()));
    }
    let t_row = segments[0].timing.t_row;
    let t_exp = segments[0].timing.t_exp;
    let coarse = estimate_chip_rows(&interior_lens)? * t_row;
    let (dsum, csum) = interior_durations
        .iter()
        .fold((0.0, 0.0), |(d, c), &x| (d + x, c + (x / coarse).round().max(1.0)));
    let period0 = if csum > 0.0 { dsum / csum } else { coarse };

    let span = edges.iter().copied().fold(0.0f64, |m, t| m.max(t.abs())).max(period0);
    let step = (0.03 * period0 / span).min(2e-4);

    // Scan around the estimate and its half: a run-length estimate taken
    // from 2-chip runs only lands on twice the true period.
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for base in [period0, period0 / 2.0] {
        let lo_c = base * (1.0 - SEARCH_SPAN);
        let n = ((1.0 + SEARCH_SPAN) / (1.0 - SEARCH_SPAN)).ln() / step;
        let grid: Vec<(f64, f64)> = (0..=n.ceil() as usize)
            .map(|i| {
                let c = lo_c * (step * i as f64).exp();
                (c, coherence(&edges, c).0)
            })
            .collect();
        for i in 1..grid.len().saturating_sub(1) {
            if grid[i].1 >= grid[i - 1].1 && grid[i].1 >= grid[i + 1].1 && grid[i].1 > 0.5 {
                candidates.push(grid[i]);
            }
        }
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(MAX_CANDIDATES);

    // Every alias that folds cleanly must name the same lamp.
    let mut best: Option<(f64, f64, f64, DecodeResult)> = None;
    let mut max_coverage = 0;
    let mut ambiguous = false;
    let mut last_err = None;
    for &(period, r) in &candidates {
        let (_, phase) = coherence(&edges, period);
        let margin = (0.5 * t_exp / period + 0.1).min(0.45);
        let f = fold(&samples, period, phase, margin);
        max_coverage = max_coverage.max(f.coverage);
        if f.coverage < FRAME_CHIPS || f.revisited < MIN_REVISITED || f.consistency < MIN_CONSISTENCY {
            continue;
        }
        let stream: Vec<bool> = f.chips.iter().chain(f.chips.iter()).copied().collect();
        let result = match decode_chips(&stream) {
            Ok(r) => r,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match &best {
            Some((_, _, _, b)) if b.uid != result.uid => ambiguous = true,
            Some((_, br, bc, _)) if (f.consistency, r) <= (*bc, *br) => {}
            _ => best = Some((period, r, f.consistency, result)),
        }
    }
    let chips_seen = if max_coverage > 0 {
        max_coverage
    } else {
        (visible_rows as f64 * t_row / period0).round() as usize
    };
    if ambiguous {
        return Err(DecodeError::NeedMoreRows(chips_seen));
    }
    let Some((period, _, consistency, result)) = best else {
        return Err(last_err.unwrap_or(DecodeError::NeedMoreRows(chips_seen)));
    };
    Ok(FusedDecode {
        result,
        chip_period: period,
        frames: segments.len(),
        consistency,
    })
}
