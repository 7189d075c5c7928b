//! Quantization mappings: the sorted list of representable normalized values
//! for a bit width, plus nearest and stochastic encoding.
//!
//! Two families are provided. `Linear` is a uniform grid on (0, 1] (mirrored
//! through zero in the signed case, never containing zero). `DynamicExponent`
//! is a floating-point-like code: the number of leading zero bits in a code
//! word selects a base-10 exponent, an indicator one-bit terminates the
//! exponent, and the remaining bits hold a linear fraction spaced evenly in
//! (0.1, 1). The dynamic-exponent map can represent values far below the
//! linear grid's minimum, and optionally contains an exact zero; dropping
//! that zero ("DE-0") trades one code point for never reconstructing a
//! positive value as zero.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Linear,
    DynamicExponent,
}

/// Identifier stored in checkpoint headers.
pub const MAP_ID_LINEAR: u8 = 0;
pub const MAP_ID_DE: u8 = 1;
pub const MAP_ID_DE0: u8 = 2;

/// A strictly increasing list of representable normalized values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMap {
    values: Vec<f64>,
    bitwidth: u8,
    signed: bool,
    includes_zero: bool,
    kind: MapKind,
}

impl QuantMap {
    fn new_checked(
        values: Vec<f64>,
        bitwidth: u8,
        signed: bool,
        kind: MapKind,
    ) -> Result<QuantMap> {
        if values.is_empty() || values.len() > (1usize << bitwidth) {
            return Err(Error::Range(format!(
                "{} values do not fit {bitwidth} bits",
                values.len()
            )));
        }
        debug_assert!(values.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let includes_zero = values.iter().any(|&v| v == 0.0);
        Ok(QuantMap {
            values,
            bitwidth,
            signed,
            includes_zero,
            kind,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bitwidth(&self) -> u8 {
        self.bitwidth
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn includes_zero(&self) -> bool {
        self.includes_zero
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    /// Header identifier: 0 = linear, 1 = dynamic exponent, 2 = dynamic
    /// exponent with the zero point removed.
    pub fn map_id(&self) -> u8 {
        match (self.kind, self.includes_zero) {
            (MapKind::Linear, _) => MAP_ID_LINEAR,
            (MapKind::DynamicExponent, true) => MAP_ID_DE,
            (MapKind::DynamicExponent, false) => MAP_ID_DE0,
        }
    }

    /// Smallest strictly positive representable value.
    pub fn min_positive(&self) -> Option<f64> {
        self.values.iter().copied().find(|&v| v > 0.0)
    }

    /// Largest gap between adjacent representable values.
    pub fn max_adjacent_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Smallest gap between adjacent representable values; the map's
    /// resolution, used as the quantization step in underflow analysis.
    pub fn min_adjacent_gap(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Rebuild a map from its header identifier.
pub fn map_from_id(id: u8, bitwidth: u8, signed: bool) -> Result<QuantMap> {
    match id {
        MAP_ID_LINEAR => build_linear_map(bitwidth, signed),
        MAP_ID_DE => build_de_map(bitwidth, signed, true),
        MAP_ID_DE0 => build_de_map(bitwidth, signed, false),
        other => Err(Error::Range(format!("unknown map id {other}"))),
    }
}

fn check_bitwidth(b: u8) -> Result<()> {
    if (1..=8).contains(&b) {
        Ok(())
    } else {
        Err(Error::Range(format!("bitwidth {b} not in 1..=8")))
    }
}

/// Mirror an unsigned value list through zero, optionally keeping a single 0.
fn mirror_signed(unsigned: &[f64], include_zero: bool) -> Vec<f64> {
    let positives: Vec<f64> = unsigned.iter().copied().filter(|&v| v > 0.0).collect();
    let mut values: Vec<f64> = positives.iter().rev().map(|&v| -v).collect();
    if include_zero {
        values.push(0.0);
    }
    values.extend(&positives);
    values
}

/// Uniform grid map: (i + 1) / 2^b for unsigned inputs, the sign-symmetric
/// mirror of the (b-1)-bit grid for signed inputs. Never contains zero.
pub fn build_linear_map(bitwidth: u8, signed: bool) -> Result<QuantMap> {
    check_bitwidth(bitwidth)?;
    if signed {
        let n = 1usize << (bitwidth - 1);
        let grid: Vec<f64> = (0..n).map(|i| (i + 1) as f64 / n as f64).collect();
        QuantMap::new_checked(mirror_signed(&grid, false), bitwidth, true, MapKind::Linear)
    } else {
        let n = 1usize << bitwidth;
        let grid: Vec<f64> = (0..n).map(|i| (i + 1) as f64 / n as f64).collect();
        QuantMap::new_checked(grid, bitwidth, false, MapKind::Linear)
    }
}

/// Enumerate every unsigned dynamic-exponent code word of `bits` bits.
///
/// A word with `e` leading zeros, an indicator one and `f = bits - 1 - e`
/// fraction bits valued `k` decodes to `10^-e * fraction(k)`, where the
/// fractions are the midpoints of a uniform partition of [0.1, 1]. Two corner
/// words bypass the formula: the all-zero word is 0 and the word 0..01 is 1,
/// so the map always spans [0, 1] exactly.
fn enumerate_de_unsigned(bits: u8) -> Vec<f64> {
    let mut values = vec![0.0, 1.0];
    for e in 0..bits.saturating_sub(1) {
        let f = bits - 1 - e;
        let cells = 1u32 << f;
        let scale = 10f64.powi(-i32::from(e));
        for k in 0..cells {
            let fraction = 0.1 + 0.9 * (f64::from(k) + 0.5) / f64::from(cells);
            values.push(scale * fraction);
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values
}

/// Dynamic-exponent map. The signed variant spends one bit on the sign and
/// mirrors the (b-1)-bit unsigned list through zero.
pub fn build_de_map(bitwidth: u8, signed: bool, include_zero: bool) -> Result<QuantMap> {
    check_bitwidth(bitwidth)?;
    let values = if signed {
        if bitwidth < 2 {
            return Err(Error::Range(
                "signed dynamic-exponent map needs at least 2 bits".into(),
            ));
        }
        mirror_signed(&enumerate_de_unsigned(bitwidth - 1), include_zero)
    } else {
        let mut v = enumerate_de_unsigned(bitwidth);
        if !include_zero {
            v.retain(|&x| x != 0.0);
        }
        v
    };
    QuantMap::new_checked(values, bitwidth, signed, MapKind::DynamicExponent)
}

fn clamp_to_map(map: &QuantMap, n: f64) -> f64 {
    n.clamp(map.values[0], map.values[map.values.len() - 1])
}

/// Index of the map value nearest to `n`. Out-of-range inputs are clamped to
/// the map's span first; ties break toward the smaller index.
pub fn encode_nearest(map: &QuantMap, n: f64) -> usize {
    let n = clamp_to_map(map, n);
    let idx = map.values.partition_point(|&v| v < n);
    if idx == 0 {
        return 0;
    }
    if idx == map.values.len() {
        return idx - 1;
    }
    let below = n - map.values[idx - 1];
    let above = map.values[idx] - n;
    if below <= above {
        idx - 1
    } else {
        idx
    }
}

/// Stochastic encode driven by a single uniform sample in [0, 1).
///
/// After clamping, a value strictly between two adjacent map entries rounds
/// up with probability proportional to its distance from the lower entry, so
/// the decoded expectation equals the input.
pub fn encode_stochastic_with(map: &QuantMap, n: f64, u: f64) -> usize {
    let n = clamp_to_map(map, n);
    let idx = map.values.partition_point(|&v| v < n);
    if idx == 0 {
        return 0;
    }
    if idx < map.values.len() && map.values[idx] == n {
        return idx;
    }
    if idx == map.values.len() {
        return idx - 1;
    }
    let lo = map.values[idx - 1];
    let hi = map.values[idx];
    let p_up = (n - lo) / (hi - lo);
    if u < p_up {
        idx
    } else {
        idx - 1
    }
}

/// Stochastic encode using an explicit random source.
pub fn encode_stochastic<R: Rng + ?Sized>(map: &QuantMap, n: f64, rng: &mut R) -> usize {
    encode_stochastic_with(map, n, rng.random::<f64>())
}

/// Representable value for a code.
pub fn decode(map: &QuantMap, code: usize) -> Result<f64> {
    map.values
        .get(code)
        .copied()
        .ok_or_else(|| Error::Range(format!("code {code} out of range for map of {} values", map.len())))
}
