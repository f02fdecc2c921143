//! Per-thread accumulators and the folding rule.

use crate::codegen::{GATE_OFFSET, SLOT_STRIDE};
use crate::site::SiteId;

/// One ledger slot. The generated entry code updates `count` and `gate`
/// directly, so the layout is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(C)]
pub struct SiteSlot {
    pub count: u64,
    pub timed_count: u64,
    pub raw_cycles: u64,
    pub attributed_cycles: u64,
    /// Timing-gate countdown; the entry times a call when it drops below 0.
    pub gate: i32,
    pub _pad: u32,
}

const _: () = assert!(std::mem::size_of::<SiteSlot>() == SLOT_STRIDE as usize);
const _: () = assert!(std::mem::offset_of!(SiteSlot, gate) == GATE_OFFSET as usize);

/// `round_half_up(value / divisor)` in integers.
pub fn divide_round(value: u64, divisor: u64) -> u64 {
    let d = divisor.max(1);
    value / d + u64::from(value % d >= d - d / 2)
}

impl SiteSlot {
    /// Record a timed invocation. Counting happens separately (the entry code
    /// does it), so `count` is untouched here.
    /// Returns true when a counter saturated.
    #[inline]
    pub fn add_duration(&mut self, duration: u64, active_threads: u64, scale: u64) -> bool {
        let (scaled, o1) = duration.overflowing_mul(scale.max(1));
        let scaled = if o1 { u64::MAX } else { scaled };
        let share = divide_round(scaled, active_threads);
        let (raw, o2) = self.raw_cycles.overflowing_add(scaled);
        let (attr, o3) = self.attributed_cycles.overflowing_add(share);
        self.timed_count = self.timed_count.saturating_add(1);
        self.raw_cycles = if o2 { u64::MAX } else { raw };
        self.attributed_cycles = if o3 { u64::MAX } else { attr };
        o1 || o2 || o3
    }

    /// Full fold of one invocation: count, plus the duration when timed.
    pub fn fold(&mut self, duration: Option<u64>, active_threads: u64, scale: u64) -> bool {
        self.count = self.count.saturating_add(1);
        match duration {
            Some(d) => self.add_duration(d, active_threads, scale),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThreadMeta {
    pub ordinal: u32,
    pub group: u64,
    pub total_cycles: u64,
}

/// Heap-backed ledger used by tests and offline tools. The agent keeps its
/// slots in preallocated memory and shares [`SiteSlot`] with this type.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThreadLedger {
    pub meta: ThreadMeta,
    slots: Vec<SiteSlot>,
}

impl ThreadLedger {
    pub fn new(meta: ThreadMeta) -> Self {
        Self { meta, slots: Vec::new() }
    }

    pub fn slot(&self, site: SiteId) -> Option<&SiteSlot> {
        self.slots.get(site as usize)
    }

    fn slot_mut(&mut self, site: SiteId) -> &mut SiteSlot {
        let i = site as usize;
        if i >= self.slots.len() {
            self.slots.resize(i + 1, SiteSlot::default());
        }
        &mut self.slots[i]
    }

    pub fn fold(&mut self, site: SiteId, duration: Option<u64>, active_threads: u64, scale: u64) {
        self.slot_mut(site).fold(duration, active_threads, scale);
    }

    /// (site, slot) for every touched site, in site order.
    pub fn touched(&self) -> impl Iterator<Item = (SiteId, &SiteSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count > 0)
            .map(|(i, s)| (i as SiteId, s))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fold_examples() {
        let mut s = SiteSlot::default();
        s.fold(Some(1000), 1, 1);
        assert_eq!((s.count, s.timed_count, s.raw_cycles, s.attributed_cycles), (1, 1, 1000, 1000));
        s.fold(Some(1000), 4, 1);
        assert_eq!((s.raw_cycles, s.attributed_cycles), (2000, 1250));
        s.fold(None, 4, 1);
        assert_eq!((s.count, s.timed_count), (3, 2));
        let mut g = SiteSlot::default();
        g.fold(Some(500), 1, 8);
        assert_eq!((g.count, g.timed_count, g.raw_cycles), (1, 1, 4000));
    }

    #[test]
    fn rounding() {
        assert_eq!(divide_round(10, 4), 3); // 2.5 -> 3
        assert_eq!(divide_round(9, 4), 2); // 2.25
        assert_eq!(divide_round(11, 4), 3); // 2.75
        assert_eq!(divide_round(7, 2), 4);
        assert_eq!(divide_round(7, 3), 2);
        assert_eq!(divide_round(8, 3), 3);
        assert_eq!(divide_round(5, 0), 5);
        assert_eq!(divide_round(u64::MAX, 1), u64::MAX);
    }

    #[test]
    fn saturates() {
        let mut s = SiteSlot { raw_cycles: u64::MAX - 1, ..Default::default() };
        assert!(s.add_duration(10, 1, 1));
        assert_eq!(s.raw_cycles, u64::MAX);
        let mut s = SiteSlot::default();
        assert!(s.add_duration(u64::MAX, 1, 2));
        assert_eq!(s.raw_cycles, u64::MAX);
    }

    #[test]
    fn ledger_touched() {
        let mut l = ThreadLedger::new(ThreadMeta::default());
        l.fold(5, None, 1, 1);
        l.fold(2, Some(3), 1, 1);
        let sites: Vec<_> = l.touched().map(|(s, _)| s).collect();
        assert_eq!(sites, [2, 5]);
        assert_eq!(l.len(), 6);
    }

    proptest! {
        #[test]
        fn invariants(events in proptest::collection::vec((any::<Option<u32>>(), 1u64..64, 1u64..32), 0..200)) {
            let mut s = SiteSlot::default();
            for (d, active, scale) in events {
                s.fold(d.map(u64::from), active, scale);
                prop_assert!(s.count >= s.timed_count);
                prop_assert!(s.attributed_cycles <= s.raw_cycles);
            }
        }

        #[test]
        fn serial_is_exact(ds in proptest::collection::vec(0u64..1_000_000, 0..100)) {
            let mut s = SiteSlot::default();
            for &d in &ds {
                s.fold(Some(d), 1, 1);
            }
            prop_assert_eq!(s.attributed_cycles, s.raw_cycles);
            prop_assert_eq!(s.raw_cycles, ds.iter().sum::<u64>());
        }
    }
}
