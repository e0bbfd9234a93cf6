//! Optical link layer: UID framing, OOK/Manchester chips, the transmitted
//! waveform and chip-stream decoding.
//!
//! A frame is 21 chips: the preamble `11100` followed by the 8 UID bits,
//! MSB first, each Manchester coded (`1 -> 10`, `0 -> 01`). Frames repeat
//! back to back. Manchester pairs never produce three equal chips in a row,
//! so `11100` can only match at a true frame start.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::scene::LedLamp;

pub const FRAME_CHIPS: usize = 21;
pub const PREAMBLE: [bool; 5] = [true, true, true, false, false];
pub const PAYLOAD_CHIPS: usize = 16;
/// Chips a decoder must see to be sure a whole frame is inside the window.
pub const MIN_DECODE_CHIPS: usize = 2 * FRAME_CHIPS;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum DecodeError {
    #[error("no preamble found in chip stream")]
    NoSync,
    #[error("invalid Manchester pair(s), confidence {confidence:.3}")]
    InvalidManchester { confidence: f64 },
    #[error("stripe profile too short or unmodulated")]
    DegenerateProfile,
    #[error("only {0} chips visible, need {MIN_DECODE_CHIPS}")]
    NeedMoreRows(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChipSequence {
    pub chips: Vec<bool>,
    pub chip_rate: Option<f64>,
}

impl ChipSequence {
    pub fn new(chips: Vec<bool>) -> Self {
        Self { chips, chip_rate: None }
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    /// Number of on chips.
    pub fn ones(&self) -> usize {
        self.chips.iter().filter(|&&c| c).count()
    }
}

impl fmt::Display for ChipSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &c in &self.chips {
            f.write_str(if c { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("chip strings may only contain '0' and '1' (found {0:?})")]
pub struct ChipParseError(pub char);

impl FromStr for ChipSequence {
    type Err = ChipParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(ChipParseError(other)),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ChipSequence::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeResult {
    pub uid: u8,
    /// Index of the first preamble chip in the input stream.
    pub sync_offset: usize,
    /// Chips up to and including the end of the decoded frame.
    pub chips_consumed: usize,
    /// Fraction of valid Manchester pairs.
    pub confidence: f64,
}

/// The 21 chips of one frame.
pub fn frame_chips(uid: u8) -> [bool; FRAME_CHIPS] {
    let mut out = [false; FRAME_CHIPS];
    out[..5].copy_from_slice(&PREAMBLE);
    for bit in 0..8 {
        let one = (uid >> (7 - bit)) & 1 == 1;
        out[5 + 2 * bit] = one;
        out[6 + 2 * bit] = !one;
    }
    out
}

pub fn encode_uid(uid: u8) -> ChipSequence {
    ChipSequence::new(frame_chips(uid).to_vec())
}

/// Chip index for time `t` at `chip_rate`. The small bias keeps exact
/// multiples of the chip period on the chip they start.
pub fn chip_index(t: f64, chip_rate: f64) -> i64 {
    (t * chip_rate + 1e-9).floor() as i64
}

/// LED state at time `t`. Unmodulated lamps are always on.
pub fn waveform(lamp: &LedLamp, t: f64) -> bool {
    if !lamp.modulated {
        return true;
    }
    let frame = frame_chips(lamp.uid);
    frame[chip_index(t, lamp.chip_rate).rem_euclid(FRAME_CHIPS as i64) as usize]
}

fn manchester_payload(chips: &[bool]) -> (u8, usize) {
    let mut uid = 0u8;
    let mut valid = 0;
    for pair in chips.chunks_exact(2).take(8) {
        uid <<= 1;
        match (pair[0], pair[1]) {
            (true, false) => {
                uid |= 1;
                valid += 1;
            }
            (false, true) => valid += 1,
            _ => {}
        }
    }
    (uid, valid)
}

/// Finds the preamble in a raw chip stream and decodes the following payload.
///
/// Every preamble position with a full payload behind it is tried in order;
/// the first clean one wins. If none is clean the first candidate's error
/// is returned.
pub fn decode_chips(chips: &[bool]) -> Result<DecodeResult, DecodeError> {
    let mut first_err = None;
    if chips.len() >= FRAME_CHIPS {
        for off in 0..=chips.len() - FRAME_CHIPS {
            if chips[off..off + 5] != PREAMBLE {
                continue;
            }
            let (uid, valid) = manchester_payload(&chips[off + 5..off + FRAME_CHIPS]);
            if valid == 8 {
                return Ok(DecodeResult {
                    uid,
                    sync_offset: off,
                    chips_consumed: off + FRAME_CHIPS,
                    confidence: 1.0,
                });
            }
            first_err.get_or_insert(DecodeError::InvalidManchester {
                confidence: valid as f64 / 8.0,
            });
        }
    }
    Err(first_err.unwrap_or(DecodeError::NoSync))
}

/// Rows per chip from stripe run lengths, without knowing the chip rate.
///
/// Runs shorter than 2 rows are treated as noise. With `m` the shortest
/// surviving run, each run contributes `run / round(run / m)`.
pub fn estimate_chip_rows(run_lengths: &[usize]) -> Result<f64, DecodeError> {
    if run_lengths.len() < 4 {
        return Err(DecodeError::DegenerateProfile);
    }
    let runs: Vec<f64> = run_lengths
        .iter()
        .filter(|&&r| r >= 2)
        .map(|&r| r as f64)
        .collect();
    let m = runs.iter().copied().fold(f64::INFINITY, f64::min);
    if runs.is_empty() || !m.is_finite() {
        return Err(DecodeError::DegenerateProfile);
    }
    let sum: f64 = runs.iter().map(|&r| r / (r / m).round().max(1.0)).sum();
    Ok(sum / runs.len() as f64)
}
