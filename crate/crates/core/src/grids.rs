//! Base-format tables, per-group absmax scales and low-precision rounding.

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::Codebook;
use crate::tensor::WeightMatrix;

/// Every finite signed E2M1 value (negative zero folded into zero).
const NVFP4_TABLE: [f32; 15] = [
    -6.0, -4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0,
];

pub const E4M3_MAX: f32 = 448.0;
/// Smallest positive E4M3 value (subnormal, `2^-9`).
pub const E4M3_MIN_POSITIVE: f32 = 1.0 / 512.0;
/// Smallest positive normal E4M3 value (`2^-6`).
pub const E4M3_MIN_NORMAL: f32 = 1.0 / 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseFormat {
    Nvfp4,
    Int4,
}

impl BaseFormat {
    /// Entries in the base table, which is also the size of each learned table.
    pub fn table_len(self) -> usize {
        match self {
            BaseFormat::Nvfp4 => 15,
            BaseFormat::Int4 => 16,
        }
    }

    pub fn default_group_size(self) -> usize {
        match self {
            BaseFormat::Nvfp4 => 16,
            BaseFormat::Int4 => 128,
        }
    }

    /// Largest table magnitude; absmax scaling maps a group's absmax onto it.
    pub fn max_abs(self) -> f32 {
        match self {
            BaseFormat::Nvfp4 => 6.0,
            BaseFormat::Int4 => 8.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            BaseFormat::Nvfp4 => 0,
            BaseFormat::Int4 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BaseFormat::Nvfp4),
            1 => Some(BaseFormat::Int4),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseFormat::Nvfp4 => "nvfp4",
            BaseFormat::Int4 => "int4",
        }
    }
}

impl std::str::FromStr for BaseFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nvfp4" | "fp4" | "e2m1" => Ok(BaseFormat::Nvfp4),
            "int4" => Ok(BaseFormat::Int4),
            other => Err(Error::validation(format!(
                "unknown format `{other}` (expected nvfp4 or int4)"
            ))),
        }
    }
}

/// How scales are represented before storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Absmax scale kept as is; quantizers round it to BF16 for storage.
    #[default]
    ExactBf16,
    /// Absmax scale rounded to the nearest positive FP8 E4M3 value.
    EmulateE4m3,
}

impl ScaleMode {
    /// Scale given to an all-zero group.
    pub fn zero_group_scale(self) -> f32 {
        match self {
            ScaleMode::ExactBf16 => f32::MIN_POSITIVE,
            ScaleMode::EmulateE4m3 => E4M3_MIN_NORMAL,
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact-bf16" | "bf16" => Ok(ScaleMode::ExactBf16),
            "emulate-e4m3" | "e4m3" => Ok(ScaleMode::EmulateE4m3),
            other => Err(Error::validation(format!(
                "unknown scale mode `{other}` (expected exact-bf16 or emulate-e4m3)"
            ))),
        }
    }
}

/// One strictly positive scale per group of `group_size` contiguous in-row weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector {
    rows: usize,
    groups_per_row: usize,
    group_size: usize,
    values: Vec<f32>,
}

impl ScaleVector {
    pub fn new(
        rows: usize,
        groups_per_row: usize,
        group_size: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != rows * groups_per_row {
            return Err(Error::validation(format!(
                "scale vector has {} entries, expected {rows}x{groups_per_row}",
                values.len()
            )));
        }
        if group_size == 0 {
            return Err(Error::validation("scale group size must be >= 1"));
        }
        if let Some(i) = values.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::validation(format!(
                "scale {i} is not strictly positive and finite: {}",
                values[i]
            )));
        }
        Ok(Self {
            rows,
            groups_per_row,
            group_size,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups_per_row(&self) -> usize {
        self.groups_per_row
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, group: usize) -> f32 {
        self.values[row * self.groups_per_row + group]
    }

    /// Scale governing column `col` of `row`.
    pub fn for_element(&self, row: usize, col: usize) -> f32 {
        self.get(row, col / self.group_size)
    }

    /// Rounds every scale to BF16, keeping it strictly positive.
    pub fn to_bf16(&self) -> ScaleVector {
        let values = self
            .values
            .iter()
            .map(|&s| {
                let r = round_bf16(s);
                if r > 0.0 && r.is_finite() {
                    r
                } else if r == 0.0 {
                    f32::MIN_POSITIVE
                } else {
                    bf16::MAX.to_f32()
                }
            })
            .collect();
        ScaleVector { values, ..*self }
    }
}

/// Sorted base table of `format`.
pub fn base_table(format: BaseFormat) -> Codebook {
    let entries = match format {
        BaseFormat::Nvfp4 => NVFP4_TABLE.to_vec(),
        BaseFormat::Int4 => (-8..=7).map(|v| v as f32).collect(),
    };
    Codebook::new(entries).expect("base tables are valid codebooks")
}

/// Absmax scale per group of `g` contiguous in-row weights: `max|w| / max|table|`.
///
/// All-zero groups get [`ScaleMode::zero_group_scale`]. Under
/// [`ScaleMode::EmulateE4m3`] each scale is rounded to E4M3 and clamped to its
/// positive range.
pub fn compute_scales(
    w: &WeightMatrix,
    format: BaseFormat,
    g: usize,
    mode: ScaleMode,
) -> Result<ScaleVector> {
    check_group_layout(w.cols(), g, "scale group size g")?;
    let groups_per_row = w.cols() / g;
    let grid_max = format.max_abs();
    let mut values = Vec::with_capacity(w.rows() * groups_per_row);
    for r in 0..w.rows() {
        for group in w.row(r).chunks_exact(g) {
            let absmax = group.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let s = if absmax == 0.0 {
                mode.zero_group_scale()
            } else {
                let raw = absmax / grid_max;
                match mode {
                    ScaleMode::ExactBf16 => raw.max(f32::MIN_POSITIVE),
                    ScaleMode::EmulateE4m3 => round_e4m3(raw).clamp(E4M3_MIN_POSITIVE, E4M3_MAX),
                }
            };
            values.push(s);
        }
    }
    ScaleVector::new(w.rows(), groups_per_row, g, values)
}

pub(crate) fn check_group_layout(cols: usize, size: usize, what: &str) -> Result<()> {
    if size == 0 {
        return Err(Error::layout(format!("{what} must be >= 1")));
    }
    if !cols.is_multiple_of(size) {
        return Err(Error::layout(format!(
            "K={cols} is not divisible by {what}={size}"
        )));
    }
    Ok(())
}

/// Nearest BF16 value, ties to even.
pub fn round_bf16(x: f32) -> f32 {
    bf16::from_f32(x).to_f32()
}

/// Nearest FP8 E4M3 value for `x > 0`, ties to even, saturating at 448.
///
/// Inputs below half the smallest subnormal round to zero.
pub fn round_e4m3(x: f32) -> f32 {
    debug_assert!(x >= 0.0, "round_e4m3 expects a non-negative input");
    if x >= E4M3_MAX {
        return E4M3_MAX;
    }
    if x == 0.0 {
        return 0.0;
    }
    let xd = x as f64;
    let unbiased = ((xd.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    // 3 mantissa bits; subnormals share the quantum of the smallest normal binade
    let quantum = 2f64.powi(unbiased.max(-6) - 3);
    let q = (xd / quantum).round_ties_even() * quantum;
    (q as f32).min(E4M3_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every non-negative finite E4M3 value, by decoding all bit patterns.
    fn e4m3_values() -> Vec<f64> {
        let mut out = Vec::new();
        for exp in 0..16u32 {
            for man in 0..8u32 {
                if exp == 15 && man == 7 {
                    continue; // NaN
                }
                let v = if exp == 0 {
                    man as f64 / 8.0 * 2f64.powi(-6)
                } else {
                    (1.0 + man as f64 / 8.0) * 2f64.powi(exp as i32 - 7)
                };
                out.push(v);
            }
        }
        out
    }

    /// All signed E2M1 values by decoding the 16 bit patterns (bias 1).
    fn e2m1_values() -> Vec<f32> {
        let mut v: Vec<f32> = (0..16u32)
            .map(|bits| {
                let sign = if bits & 0b1000 != 0 { -1.0 } else { 1.0 };
                let exp = (bits >> 1) & 0b11;
                let man = bits & 1;
                let mag = if exp == 0 {
                    man as f32 * 0.5
                } else {
                    (1.0 + man as f32 * 0.5) * 2f32.powi(exp as i32 - 1)
                };
                sign * mag
            })
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    #[test]
    fn nvfp4_table_is_the_e2m1_set() {
        let t = base_table(BaseFormat::Nvfp4);
        assert_eq!(t.entries(), &e2m1_values()[..]);
        assert_eq!(t.len(), 15);
        assert_eq!(t.entries()[0], -6.0);
        assert_eq!(t.entries()[14], 6.0);
    }

    #[test]
    fn int4_table_is_consecutive() {
        let t = base_table(BaseFormat::Int4);
        let want: Vec<f32> = (-8..=7).map(|v| v as f32).collect();
        assert_eq!(t.entries(), &want[..]);
        for fmt in [BaseFormat::Nvfp4, BaseFormat::Int4] {
            assert!(base_table(fmt).entries().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn absmax_scales() {
        let mut row = vec![0.0f32; 16];
        row[..3].copy_from_slice(&[0.5, -3.0, 1.0]);
        let w = WeightMatrix::new(1, 16, row).unwrap();
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16).unwrap();
        assert_eq!(s.values(), &[0.5]);

        let mut row = vec![0.0f32; 128];
        row[5] = -3.1;
        let w = WeightMatrix::new(1, 128, row).unwrap();
        let s = compute_scales(&w, BaseFormat::Int4, 128, ScaleMode::ExactBf16).unwrap();
        assert_eq!(s.values(), &[3.1f32 / 8.0]);
        assert!((s.values()[0] - 0.3875).abs() < 1e-7);
    }

    #[test]
    fn zero_groups_get_min_normal_scale() {
        let w = WeightMatrix::new(2, 32, vec![0.0; 64]).unwrap();
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16).unwrap();
        assert!(s.values().iter().all(|&v| v == f32::MIN_POSITIVE));
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::EmulateE4m3).unwrap();
        assert!(s.values().iter().all(|&v| v == E4M3_MIN_NORMAL));
        assert_eq!(round_bf16(f32::MIN_POSITIVE), f32::MIN_POSITIVE);
    }

    #[test]
    fn indivisible_group_is_a_layout_error() {
        let w = WeightMatrix::new(1, 24, vec![1.0; 24]).unwrap();
        assert!(matches!(
            compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::ExactBf16),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn e4m3_scale_emulation() {
        let mut row = vec![0.0f32; 16];
        row[0] = 1.8; // 1.8 / 6 = 0.3 -> 0.3125
        let w = WeightMatrix::new(1, 16, row).unwrap();
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::EmulateE4m3).unwrap();
        assert_eq!(s.values(), &[0.3125]);
        let w = WeightMatrix::new(1, 16, vec![1e4; 16]).unwrap();
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::EmulateE4m3).unwrap();
        assert_eq!(s.values(), &[448.0]);
        let w = WeightMatrix::new(1, 16, vec![1e-9; 16]).unwrap();
        let s = compute_scales(&w, BaseFormat::Nvfp4, 16, ScaleMode::EmulateE4m3).unwrap();
        assert_eq!(s.values(), &[E4M3_MIN_POSITIVE]);
    }

    #[test]
    #[allow(clippy::excessive_precision)] // the exact BF16 value is the point
    fn bf16_rounding_examples() {
        assert_eq!(round_bf16(1.0), 1.0);
        // brute force: the two BF16 neighbours of 0.1 and the nearer one
        let x = 0.1f32;
        let lo = f32::from_bits(x.to_bits() & 0xffff_0000);
        let hi = f32::from_bits((x.to_bits() & 0xffff_0000) + 0x1_0000);
        let nearer = if (x - lo).abs() <= (hi - x).abs() {
            lo
        } else {
            hi
        };
        assert_eq!(nearer, 0.10009765625);
        assert_eq!(round_bf16(x), 0.10009765625);
    }

    #[test]
    fn bf16_matches_neighbour_oracle_and_is_idempotent() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000_000 {
            let x = f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)
                * if rng.random() { 1.0 } else { -1.0 };
            if !x.is_finite() {
                continue;
            }
            let r = round_bf16(x);
            assert_eq!(round_bf16(r), r);
            let lo = f32::from_bits(x.to_bits() & 0xffff_0000);
            let hi_bits = (x.to_bits() & 0xffff_0000) + 0x1_0000;
            let hi = f32::from_bits(hi_bits);
            // past the largest finite value the upper neighbour is 2^128, i.e. infinity
            let hi_val = if hi.is_infinite() {
                hi.signum() as f64 * 2f64.powi(128)
            } else {
                hi as f64
            };
            let (dl, dh) = ((x as f64 - lo as f64).abs(), (hi_val - x as f64).abs());
            let want = if dl < dh {
                lo
            } else if dh < dl {
                hi
            } else if (lo.to_bits() >> 16) & 1 == 0 {
                lo
            } else {
                hi
            };
            assert_eq!(r.to_bits(), want.to_bits(), "x = {x:e}");
        }
    }

    #[test]
    fn e4m3_examples() {
        assert_eq!(round_e4m3(448.0), 448.0);
        assert_eq!(round_e4m3(1000.0), 448.0);
        assert_eq!(round_e4m3(0.3), 0.3125);
        // exact midpoints go to the even mantissa
        assert_eq!(round_e4m3(1.0625), 1.0);
        assert_eq!(round_e4m3(1.1875), 1.25);
        assert_eq!(round_e4m3(456.0), 448.0);
        let grid = e4m3_values();
        let below = grid
            .iter()
            .cloned()
            .filter(|v| *v <= 0.3)
            .fold(0.0, f64::max);
        let above = grid
            .iter()
            .cloned()
            .filter(|v| *v >= 0.3)
            .fold(f64::MAX, f64::min);
        assert_eq!((below, above), (0.28125, 0.3125));
    }

    #[test]
    fn e4m3_matches_enumeration() {
        use rand::{RngExt, SeedableRng};
        let grid = e4m3_values();
        assert_eq!(*grid.last().unwrap(), 448.0);
        for v in &grid {
            assert_eq!(round_e4m3(*v as f32) as f64, *v);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100_000 {
            let x = 2f64.powf(rng.random_range(-12.0..10.0)) as f32;
            let xd = x as f64;
            let mut best = grid[0];
            for &g in &grid {
                let (db, dg) = ((xd - best).abs(), (xd - g).abs());
                if dg < db {
                    best = g;
                }
            }
            let got = round_e4m3(x) as f64;
            if (xd - got).abs() != (xd - best).abs() {
                panic!("x={x} got={got} want={best}");
            }
            if x < 448.0 {
                // exact ties go to the even mantissa; distance must still be minimal
                assert!((xd - got).abs() <= (xd - best).abs());
            }
        }
    }
}
