//! Fixed-point formats `<IL,FL>` and quantization of native floats into them.
//!
//! `IL` counts integer bits including the sign bit, `FL` counts fractional
//! bits. Values are stored as `f64` multiples of `2^-FL` in the two's
//! complement range `[-2^(IL-1), 2^(IL-1) - 2^-FL]`. Out-of-range values
//! saturate to the nearest bound.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DivergenceSite, Error, Result};
use crate::quant_stats::QuantStats;
use crate::tensor::Tensor;

/// Widest total bit-width a format may have.
pub const MAX_TOTAL_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct FixedPointFormat {
    il: u32,
    fl: u32,
}

impl FixedPointFormat {
    pub fn new(il: u32, fl: u32) -> Result<Self> {
        if il < 1 {
            return Err(Error::InvalidFormat {
                il: il as i32,
                fl: fl as i32,
                reason: "IL must include the sign bit",
            });
        }
        if il + fl > MAX_TOTAL_BITS {
            return Err(Error::InvalidFormat {
                il: il as i32,
                fl: fl as i32,
                reason: "total width exceeds 32 bits",
            });
        }
        Ok(FixedPointFormat { il, fl })
    }

    pub fn il(self) -> u32 {
        self.il
    }

    pub fn fl(self) -> u32 {
        self.fl
    }

    pub fn total_bits(self) -> u32 {
        self.il + self.fl
    }

    /// Gap between adjacent representable values, `2^-FL`.
    pub fn step_size(self) -> f64 {
        pow2(-(self.fl as i32))
    }

    /// Closed range `(min, max)` of representable values.
    pub fn representable_range(self) -> (f64, f64) {
        let half = pow2(self.il as i32 - 1);
        (-half, half - self.step_size())
    }

    /// Whether `x` lies on the grid and inside the range.
    pub fn is_representable(self, x: f64) -> bool {
        let (min, max) = self.representable_range();
        if !(min..=max).contains(&x) {
            return false;
        }
        let scaled = x * pow2(self.fl as i32);
        scaled == scaled.trunc()
    }

    /// Every representable value in ascending order. Only sensible for small
    /// formats.
    pub fn grid(self) -> impl Iterator<Item = f64> {
        let step = self.step_size();
        let (min, _) = self.representable_range();
        let count = 1u64 << self.total_bits();
        (0..count).map(move |k| min + k as f64 * step)
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.il, self.fl)
    }
}

impl TryFrom<(u32, u32)> for FixedPointFormat {
    type Error = Error;

    fn try_from((il, fl): (u32, u32)) -> Result<Self> {
        FixedPointFormat::new(il, fl)
    }
}

impl From<FixedPointFormat> for (u32, u32) {
    fn from(f: FixedPointFormat) -> Self {
        (f.il, f.fl)
    }
}

fn pow2(exp: i32) -> f64 {
    2f64.powi(exp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    Stochastic,
    Nearest,
}

/// Outcome of quantizing one value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantEvent {
    pub input: f64,
    pub output: f64,
    pub overflowed: bool,
    /// Per-value relative error in percent; `None` for an exactly zero input.
    pub error_pct: Option<f64>,
}

/// Per-value percentage quantization error, `|out - in| / |in| * 100`.
#[inline]
pub fn error_pct(input: f64, output: f64) -> Option<f64> {
    if input == 0.0 {
        None
    } else {
        Some((output - input).abs() / input.abs() * 100.0)
    }
}

/// Precomputed constants for repeated quantization into one format.
#[derive(Debug, Clone, Copy)]
pub struct Quantizer {
    format: FixedPointFormat,
    scale: f64,
    step: f64,
    min: f64,
    max: f64,
}

impl Quantizer {
    pub fn new(format: FixedPointFormat) -> Self {
        let (min, max) = format.representable_range();
        Quantizer {
            format,
            scale: pow2(format.fl as i32),
            step: format.step_size(),
            min,
            max,
        }
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    /// Stochastic rounding given a uniform draw `u` in `[0, 1)`. Returns the
    /// saturated value and whether saturation occurred.
    #[inline]
    pub fn stochastic_with(&self, x: f64, u: f64) -> (f64, bool) {
        if x >= self.max + self.step {
            return (self.max, true);
        }
        if x <= self.min - self.step {
            return (self.min, true);
        }
        let scaled = x * self.scale;
        let lower = scaled.floor();
        // Round up with probability equal to the fractional distance. For
        // scaled in (-1, 0), `scaled - lower` is inexact, so compare on the
        // other side instead.
        let up = if lower == -1.0 {
            u - 1.0 < scaled
        } else {
            u < scaled - lower
        };
        let q = if up { lower + 1.0 } else { lower };
        self.saturate(q * self.step)
    }

    #[inline]
    pub fn nearest(&self, x: f64) -> (f64, bool) {
        if x >= self.max + self.step {
            return (self.max, true);
        }
        if x <= self.min - self.step {
            return (self.min, true);
        }
        // f64::round breaks ties away from zero.
        let q = (x * self.scale).round();
        self.saturate(q * self.step)
    }

    #[inline]
    fn saturate(&self, v: f64) -> (f64, bool) {
        if v > self.max {
            (self.max, true)
        } else if v < self.min {
            (self.min, true)
        } else {
            (v, false)
        }
    }

    pub fn quantize<R: Rng + ?Sized>(
        &self,
        x: f64,
        mode: RoundingMode,
        rng: &mut R,
    ) -> Result<QuantEvent> {
        if !x.is_finite() {
            return Err(Error::NonFinite { value: x });
        }
        let (output, overflowed) = match mode {
            RoundingMode::Stochastic => self.stochastic_with(x, rng.random::<f64>()),
            RoundingMode::Nearest => self.nearest(x),
        };
        Ok(QuantEvent {
            input: x,
            output,
            overflowed,
            error_pct: error_pct(x, output),
        })
    }
}

pub fn quantize_stochastic<R: Rng + ?Sized>(
    x: f64,
    format: FixedPointFormat,
    rng: &mut R,
) -> Result<QuantEvent> {
    Quantizer::new(format).quantize(x, RoundingMode::Stochastic, rng)
}

pub fn quantize_nearest(x: f64, format: FixedPointFormat) -> Result<QuantEvent> {
    if !x.is_finite() {
        return Err(Error::NonFinite { value: x });
    }
    let (output, overflowed) = Quantizer::new(format).nearest(x);
    Ok(QuantEvent {
        input: x,
        output,
        overflowed,
        error_pct: error_pct(x, output),
    })
}

/// Element-wise quantization of `t`, recording every event into `stats`.
///
/// A non-finite element yields [`Error::Divergence`] carrying its index; the
/// caller attaches the tensor role and iteration.
pub fn quantize_tensor<R: Rng + ?Sized>(
    t: &Tensor,
    format: FixedPointFormat,
    mode: RoundingMode,
    rng: &mut R,
    stats: &mut QuantStats,
) -> Result<Tensor> {
    let q = Quantizer::new(format);
    let mut out = Vec::with_capacity(t.len());
    let mut overflows = 0u64;
    let mut err_sum = 0.0;
    let mut err_count = 0u64;
    for (i, &x) in t.data().iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Divergence(DivergenceSite {
                index: Some(i),
                ..Default::default()
            }));
        }
        let (v, overflowed) = match mode {
            RoundingMode::Stochastic => q.stochastic_with(x, rng.random::<f64>()),
            RoundingMode::Nearest => q.nearest(x),
        };
        overflows += overflowed as u64;
        if let Some(e) = error_pct(x, v) {
            err_sum += e;
            err_count += 1;
        }
        out.push(v);
    }
    stats.add_counts(t.len() as u64, overflows, err_sum, err_count);
    Tensor::new(t.shape().to_vec(), out)
}
