//! Dynamic precision scaling controller.
//!
//! Once per iteration, per attribute: grow IL by one if the overflow rate
//! exceeds `r_max`, otherwise shrink it by one; grow FL by one if the average
//! quantization error exceeds `e_max`, otherwise shrink it by one. Results are
//! clamped to the configured bounds and total-width cap.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed_point::{FixedPointFormat, MAX_TOTAL_BITS};
use crate::quant_stats::QuantStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    /// Weights and biases.
    Weights,
    Activations,
    Gradients,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Weights, Attribute::Activations, Attribute::Gradients];

    pub fn index(self) -> usize {
        match self {
            Attribute::Weights => 0,
            Attribute::Activations => 1,
            Attribute::Gradients => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Weights => "weights",
            Attribute::Activations => "activations",
            Attribute::Gradients => "gradients",
        }
    }

    /// One-letter prefix used in metrics columns.
    pub fn prefix(self) -> &'static str {
        match self {
            Attribute::Weights => "w",
            Attribute::Activations => "a",
            Attribute::Gradients => "g",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerAttribute<T> {
    pub weights: T,
    pub activations: T,
    pub gradients: T,
}

impl<T> PerAttribute<T> {
    pub fn from_fn(mut f: impl FnMut(Attribute) -> T) -> Self {
        PerAttribute {
            weights: f(Attribute::Weights),
            activations: f(Attribute::Activations),
            gradients: f(Attribute::Gradients),
        }
    }

    pub fn splat(value: T) -> Self
    where
        T: Clone,
    {
        PerAttribute {
            weights: value.clone(),
            activations: value.clone(),
            gradients: value,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Attribute, &T) -> U) -> PerAttribute<U> {
        PerAttribute::from_fn(|a| f(a, &self[a]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Attribute, &T)> {
        Attribute::ALL.into_iter().map(move |a| (a, &self[a]))
    }
}

impl<T> Index<Attribute> for PerAttribute<T> {
    type Output = T;

    fn index(&self, a: Attribute) -> &T {
        match a {
            Attribute::Weights => &self.weights,
            Attribute::Activations => &self.activations,
            Attribute::Gradients => &self.gradients,
        }
    }
}

impl<T> IndexMut<Attribute> for PerAttribute<T> {
    fn index_mut(&mut self, a: Attribute) -> &mut T {
        match a {
            Attribute::Weights => &mut self.weights,
            Attribute::Activations => &mut self.activations,
            Attribute::Gradients => &mut self.gradients,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Overflow-rate threshold, percent.
    pub r_max: f64,
    /// Average-error threshold, percent.
    pub e_max: f64,
    /// Inclusive `(min, max)` for IL.
    pub il_bounds: (u32, u32),
    /// Inclusive `(min, max)` for FL.
    pub fl_bounds: (u32, u32),
    pub total_width_max: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            r_max: 0.01,
            e_max: 0.01,
            il_bounds: (1, 16),
            fl_bounds: (0, 31),
            total_width_max: 32,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("controller: {msg}")));
        // Negative or infinite thresholds are accepted: they force one branch.
        if self.r_max.is_nan() || self.e_max.is_nan() {
            return bad("thresholds must not be NaN");
        }
        if self.il_bounds.0 < 1 {
            return bad("IL lower bound must be at least 1");
        }
        if self.il_bounds.0 > self.il_bounds.1 || self.fl_bounds.0 > self.fl_bounds.1 {
            return bad("bounds must be nonempty");
        }
        if self.total_width_max > MAX_TOTAL_BITS {
            return bad("total width cap exceeds 32");
        }
        if self.il_bounds.0 + self.fl_bounds.0 > self.total_width_max {
            return bad("lower bounds exceed the total width cap");
        }
        Ok(())
    }

    /// Whether `f` satisfies the bounds and width cap.
    pub fn admits(&self, f: FixedPointFormat) -> bool {
        (self.il_bounds.0..=self.il_bounds.1).contains(&f.il())
            && (self.fl_bounds.0..=self.fl_bounds.1).contains(&f.fl())
            && f.total_bits() <= self.total_width_max
    }
}

/// How far a statistic exceeds its threshold, relative to the threshold.
fn violation_strength(value: f64, threshold: f64) -> f64 {
    if threshold == 0.0 {
        f64::INFINITY
    } else {
        (value - threshold) / threshold.abs()
    }
}

/// One controller step for a single attribute.
///
/// When both components grow past the width cap, the weaker violation gives
/// up bits first; on equal strength IL keeps its increment.
pub fn update_attribute(
    format: FixedPointFormat,
    overflow_rate: f64,
    avg_error: f64,
    config: &ControllerConfig,
) -> FixedPointFormat {
    let il_up = overflow_rate > config.r_max;
    let fl_up = avg_error > config.e_max;
    let step = |v: u32, up: bool| if up { v as i64 + 1 } else { v as i64 - 1 };

    let (il_lo, il_hi) = (config.il_bounds.0 as i64, config.il_bounds.1 as i64);
    let (fl_lo, fl_hi) = (config.fl_bounds.0 as i64, config.fl_bounds.1 as i64);
    let mut il = step(format.il(), il_up).clamp(il_lo, il_hi);
    let mut fl = step(format.fl(), fl_up).clamp(fl_lo, fl_hi);
    let cap = config.total_width_max as i64;

    #[derive(Clone, Copy)]
    enum Part {
        Il,
        Fl,
    }
    let order: &[Part] = match (il_up, fl_up) {
        (true, true) => {
            let il_s = violation_strength(overflow_rate, config.r_max);
            let fl_s = violation_strength(avg_error, config.e_max);
            if fl_s > il_s {
                &[Part::Il, Part::Fl]
            } else {
                &[Part::Fl, Part::Il]
            }
        }
        (true, false) => &[Part::Il, Part::Fl],
        (false, true) => &[Part::Fl, Part::Il],
        (false, false) => &[Part::Fl, Part::Il],
    };
    for part in order {
        while il + fl > cap {
            match part {
                Part::Il if il > il_lo => il -= 1,
                Part::Fl if fl > fl_lo => fl -= 1,
                _ => break,
            }
        }
    }

    FixedPointFormat::new(il as u32, fl as u32).expect("validated bounds yield a legal format")
}

/// Current per-attribute formats plus the controller configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionState {
    formats: PerAttribute<FixedPointFormat>,
    config: ControllerConfig,
}

impl PrecisionState {
    pub fn new(formats: PerAttribute<FixedPointFormat>, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        for (a, f) in formats.iter() {
            if !config.admits(*f) {
                return Err(Error::Config(format!(
                    "initial {a} format {f} violates the controller bounds"
                )));
            }
        }
        Ok(PrecisionState { formats, config })
    }

    pub fn format(&self, a: Attribute) -> FixedPointFormat {
        self.formats[a]
    }

    pub fn formats(&self) -> &PerAttribute<FixedPointFormat> {
        &self.formats
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Applies one controller step to every attribute with a nonempty window.
    /// Attributes whose window is empty keep their format.
    pub fn update_all(&self, stats: &PerAttribute<QuantStats>) -> PrecisionState {
        let formats = self.formats.map(|a, &f| {
            let s = &stats[a];
            match (s.overflow_rate(), s.avg_error_pct()) {
                (Ok(r), Ok(e)) => update_attribute(f, r, e, &self.config),
                _ => f,
            }
        });
        PrecisionState { formats, config: self.config }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmt(il: u32, fl: u32) -> FixedPointFormat {
        FixedPointFormat::new(il, fl).unwrap()
    }

    #[test]
    fn truth_table() {
        let c = ControllerConfig::default();
        assert_eq!(update_attribute(fmt(4, 10), 0.02, 0.005, &c), fmt(5, 9));
        assert_eq!(update_attribute(fmt(4, 10), 0.005, 0.02, &c), fmt(3, 11));
        assert_eq!(update_attribute(fmt(4, 10), 0.02, 0.02, &c), fmt(5, 11));
        assert_eq!(update_attribute(fmt(4, 10), 0.005, 0.005, &c), fmt(3, 9));
    }

    #[test]
    fn equality_takes_the_decrement_branch() {
        let c = ControllerConfig::default();
        assert_eq!(update_attribute(fmt(4, 10), 0.01, 0.01, &c), fmt(3, 9));
    }

    #[test]
    fn clamps_at_lower_bounds() {
        let c = ControllerConfig::default();
        assert_eq!(update_attribute(fmt(1, 0), 0.0, 0.0, &c), fmt(1, 0));
    }

    #[test]
    fn width_cap_keeps_the_stronger_increment() {
        let c = ControllerConfig::default();
        // Both exceed; error violation is 10x stronger than overflow.
        assert_eq!(update_attribute(fmt(16, 16), 0.02, 0.2, &c), fmt(15, 17));
        assert_eq!(update_attribute(fmt(16, 16), 0.2, 0.02, &c), fmt(16, 16));
        // Equal strength: IL keeps its increment.
        let c2 = ControllerConfig { il_bounds: (1, 20), ..c };
        assert_eq!(update_attribute(fmt(16, 16), 0.02, 0.02, &c2), fmt(17, 15));
        assert_eq!(update_attribute(fmt(15, 16), 0.02, 0.02, &c2), fmt(16, 16));
    }

    #[test]
    fn width_cap_with_blocked_decrement() {
        let c = ControllerConfig { il_bounds: (1, 8), fl_bounds: (4, 31), total_width_max: 11, ..Default::default() };
        // FL sits at its floor; IL growth must be undone to respect the cap.
        assert_eq!(update_attribute(fmt(7, 4), 1.0, 0.0, &c), fmt(7, 4));
        assert_eq!(update_attribute(fmt(6, 4), 1.0, 0.0, &c), fmt(7, 4));
    }

    #[test]
    fn update_all_shrinks_and_isolates() {
        let state = PrecisionState::new(PerAttribute::splat(fmt(2, 14)), ControllerConfig::default()).unwrap();
        let quiet = QuantStats { total_count: 100, ..Default::default() };
        let next = state.update_all(&PerAttribute::splat(quiet));
        assert!(next.formats().iter().all(|(_, &f)| f == fmt(1, 13)));

        let mut stats = PerAttribute::splat(quiet);
        stats.gradients.overflow_count = 50;
        let next = state.update_all(&stats);
        assert_eq!(next.format(Attribute::Gradients), fmt(3, 13));
        assert_eq!(next.format(Attribute::Weights), fmt(1, 13));

        // empty window leaves the format alone
        let mut stats = PerAttribute::splat(quiet);
        stats.activations = QuantStats::default();
        let next = state.update_all(&stats);
        assert_eq!(next.format(Attribute::Activations), fmt(2, 14));
        assert_eq!(state.format(Attribute::Activations), fmt(2, 14));
    }

    #[test]
    fn constant_quiet_stats_converge_to_lower_bounds() {
        let config = ControllerConfig { il_bounds: (2, 16), fl_bounds: (3, 31), ..Default::default() };
        let mut state = PrecisionState::new(PerAttribute::splat(fmt(9, 20)), config).unwrap();
        let quiet = PerAttribute::splat(QuantStats { total_count: 10, ..Default::default() });
        let mut prev = state;
        for _ in 0..100 {
            prev = state;
            state = state.update_all(&quiet);
        }
        assert_eq!(state, prev);
        assert!(state.formats().iter().all(|(_, &f)| f == fmt(2, 3)));
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        assert!(ControllerConfig { il_bounds: (0, 4), ..Default::default() }.validate().is_err());
        assert!(ControllerConfig { fl_bounds: (5, 4), ..Default::default() }.validate().is_err());
        assert!(ControllerConfig { total_width_max: 40, ..Default::default() }.validate().is_err());
        assert!(ControllerConfig { r_max: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(ControllerConfig { e_max: -1.0, r_max: f64::INFINITY, ..Default::default() }.validate().is_ok());
    }

    fn arb_config() -> impl Strategy<Value = ControllerConfig> {
        (1u32..6, 0u32..6, 0u32..12, 0u32..12, 8u32..=32, 0.0f64..1.0, 0.0f64..1.0).prop_map(
            |(il_lo, fl_lo, il_span, fl_span, cap, r_max, e_max)| ControllerConfig {
                r_max,
                e_max,
                il_bounds: (il_lo, (il_lo + il_span).min(16)),
                fl_bounds: (fl_lo, fl_lo + fl_span),
                total_width_max: cap.max(il_lo + fl_lo),
            },
        )
    }

    proptest! {
        #[test]
        fn bounded_unit_steps(config in arb_config(), steps in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 1..60)) {
            let f0 = fmt(config.il_bounds.0, config.fl_bounds.0);
            let mut f = f0;
            for (r, e) in steps {
                let next = update_attribute(f, r, e, &config);
                prop_assert!(config.admits(next));
                prop_assert!((next.il() as i64 - f.il() as i64).abs() <= 1);
                prop_assert!((next.fl() as i64 - f.fl() as i64).abs() <= 1);
                prop_assert_eq!(next, update_attribute(f, r, e, &config));
                f = next;
            }
        }

        #[test]
        fn monotone_response(config in arb_config(), e in 0.0f64..2.0, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let f = fmt(config.il_bounds.0, config.fl_bounds.0);
            let low = update_attribute(f, config.r_max * lo, e, &config);
            let high = update_attribute(f, config.r_max + hi + 1e-9, e, &config);
            prop_assert!(high.il() >= low.il());
            let low = update_attribute(f, e, config.e_max * lo, &config);
            let high = update_attribute(f, e, config.e_max + hi + 1e-9, &config);
            prop_assert!(high.fl() >= low.fl());
        }
    }
}
