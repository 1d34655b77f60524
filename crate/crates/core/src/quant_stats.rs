//! Window statistics over round operations: overflow rate `R` and average
//! percentage quantization error `E`.

use crate::error::{Error, Result};
use crate::fixed_point::QuantEvent;

/// Running counters for one attribute over one window.
///
/// Exactly-zero inputs count toward `total_count` (and therefore the overflow
/// rate) but contribute nothing to the error average.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantStats {
    pub total_count: u64,
    pub overflow_count: u64,
    pub error_pct_sum: f64,
    pub error_count: u64,
}

impl QuantStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, event: &QuantEvent) {
        self.total_count += 1;
        if event.overflowed {
            self.overflow_count += 1;
        }
        if let Some(e) = event.error_pct {
            self.error_pct_sum += e;
            self.error_count += 1;
        }
    }

    /// Bulk update used by the tensor quantizer.
    pub(crate) fn add_counts(&mut self, total: u64, overflows: u64, err_sum: f64, err_count: u64) {
        self.total_count += total;
        self.overflow_count += overflows;
        self.error_pct_sum += err_sum;
        self.error_count += err_count;
    }

    pub fn is_empty(&self) -> bool {
        self.total_count == 0
    }

    /// Percentage of operations that saturated.
    pub fn overflow_rate(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyWindow);
        }
        Ok(self.overflow_count as f64 / self.total_count as f64 * 100.0)
    }

    /// Mean per-value percentage error over operations with a nonzero input;
    /// zero when every input was exactly zero.
    pub fn avg_error_pct(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if self.error_count == 0 {
            return Ok(0.0);
        }
        Ok(self.error_pct_sum / self.error_count as f64)
    }

    pub fn merge(&self, other: &QuantStats) -> QuantStats {
        QuantStats {
            total_count: self.total_count + other.total_count,
            overflow_count: self.overflow_count + other.overflow_count,
            error_pct_sum: self.error_pct_sum + other.error_pct_sum,
            error_count: self.error_count + other.error_count,
        }
    }

    pub fn reset(&mut self) {
        *self = QuantStats::default();
    }
}

impl<'a> Extend<&'a QuantEvent> for QuantStats {
    fn extend<I: IntoIterator<Item = &'a QuantEvent>>(&mut self, iter: I) {
        for ev in iter {
            self.record(ev);
        }
    }
}

impl<'a> FromIterator<&'a QuantEvent> for QuantStats {
    fn from_iter<I: IntoIterator<Item = &'a QuantEvent>>(iter: I) -> Self {
        let mut s = QuantStats::default();
        s.extend(iter);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(overflowed: bool, error_pct: Option<f64>) -> QuantEvent {
        QuantEvent {
            input: 1.0,
            output: 1.0,
            overflowed,
            error_pct,
        }
    }

    #[test]
    fn record_examples() {
        let mut s = QuantStats::new();
        s.record(&event(false, Some(1.0)));
        assert_eq!(
            s,
            QuantStats { total_count: 1, overflow_count: 0, error_pct_sum: 1.0, error_count: 1 }
        );

        let mut s = QuantStats::new();
        s.record(&event(true, Some(79.45)));
        assert_eq!((s.total_count, s.overflow_count, s.error_pct_sum), (1, 1, 79.45));

        let mut s = QuantStats::new();
        s.record(&event(false, None));
        assert_eq!((s.total_count, s.overflow_count, s.error_count), (1, 0, 0));
    }

    #[test]
    fn overflow_rate_examples() {
        let s = |total, overflow| QuantStats { total_count: total, overflow_count: overflow, ..Default::default() };
        assert_eq!(s(10_000, 1).overflow_rate().unwrap(), 0.01);
        assert_eq!(s(64, 0).overflow_rate().unwrap(), 0.0);
        assert_eq!(s(200, 3).overflow_rate().unwrap(), 1.5);
        assert!(matches!(QuantStats::new().overflow_rate(), Err(Error::EmptyWindow)));
    }

    #[test]
    fn avg_error_examples() {
        let s = QuantStats { total_count: 4, error_pct_sum: 2.0, error_count: 4, ..Default::default() };
        assert_eq!(s.avg_error_pct().unwrap(), 0.5);
        let s = QuantStats { total_count: 5, ..Default::default() };
        assert_eq!(s.avg_error_pct().unwrap(), 0.0);
        assert!(matches!(QuantStats::new().avg_error_pct(), Err(Error::EmptyWindow)));

        // 1.0 -> 0.99 is 1%, 2.0 -> 2.0 is 0%
        let events = [
            QuantEvent { input: 1.0, output: 0.99, overflowed: false, error_pct: Some(1.0) },
            QuantEvent { input: 2.0, output: 2.0, overflowed: false, error_pct: Some(0.0) },
        ];
        let s: QuantStats = events.iter().collect();
        assert_eq!(s.avg_error_pct().unwrap(), 0.5);
    }

    #[test]
    fn reset_examples() {
        let mut s = QuantStats { total_count: 9, overflow_count: 3, error_pct_sum: 1.0, error_count: 2 };
        s.reset();
        assert_eq!(s, QuantStats::new());
        s.reset();
        assert_eq!(s, QuantStats::new());
        s.record(&event(false, Some(0.1)));
        assert_eq!(s.overflow_rate().unwrap(), 0.0);
    }

    fn arb_event() -> impl Strategy<Value = QuantEvent> {
        (any::<bool>(), proptest::option::of(0.0f64..500.0)).prop_map(|(o, e)| event(o, e))
    }

    proptest! {
        #[test]
        fn fold_equals_merge_of_chunks(events in prop::collection::vec(arb_event(), 0..200), split in 0usize..200) {
            let split = split.min(events.len());
            let whole: QuantStats = events.iter().collect();
            let left: QuantStats = events[..split].iter().collect();
            let right: QuantStats = events[split..].iter().collect();
            let merged = left.merge(&right);
            prop_assert_eq!(whole.total_count, merged.total_count);
            prop_assert_eq!(whole.overflow_count, merged.overflow_count);
            prop_assert_eq!(whole.error_count, merged.error_count);
            prop_assert!((whole.error_pct_sum - merged.error_pct_sum).abs() <= 1e-9 * whole.error_pct_sum.max(1.0));
            prop_assert!(whole.overflow_count <= whole.total_count);
            prop_assert!(whole.error_count <= whole.total_count);
        }

        #[test]
        fn merge_identity_and_commutativity(a in prop::collection::vec(arb_event(), 0..50), b in prop::collection::vec(arb_event(), 0..50)) {
            let sa: QuantStats = a.iter().collect();
            let sb: QuantStats = b.iter().collect();
            prop_assert_eq!(sa.merge(&QuantStats::new()), sa);
            prop_assert_eq!(sa.merge(&sb), sb.merge(&sa));
        }

        #[test]
        fn rate_bounded_and_error_order_invariant(mut events in prop::collection::vec(arb_event(), 1..100)) {
            let s: QuantStats = events.iter().collect();
            let r = s.overflow_rate().unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
            events.reverse();
            let t: QuantStats = events.iter().collect();
            let (e1, e2) = (s.avg_error_pct().unwrap(), t.avg_error_pct().unwrap());
            prop_assert!((e1 - e2).abs() <= 1e-9 * e1.max(1.0));
        }
    }
}
