//! Per-thread multiply-accumulate counters, keyed by op label.
//!
//! Every forward kernel reports the exact number of multiply-accumulates it
//! performs. Counting is structural: it depends on shapes only.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, u64>> = const { RefCell::new(BTreeMap::new()) };
}

pub fn add(label: &'static str, macs: u64) {
    COUNTS.with(|c| *c.borrow_mut().entry(label).or_insert(0) += macs);
}

pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

pub fn get(label: &str) -> u64 {
    COUNTS.with(|c| c.borrow().get(label).copied().unwrap_or(0))
}

pub fn total() -> u64 {
    COUNTS.with(|c| c.borrow().values().sum())
}

pub fn snapshot() -> BTreeMap<&'static str, u64> {
    COUNTS.with(|c| c.borrow().clone())
}

/// Runs `f` and returns its result with the counters it accumulated.
/// Counters outside the call are left untouched.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, BTreeMap<&'static str, u64>) {
    let saved = COUNTS.with(|c| std::mem::take(&mut *c.borrow_mut()));
    let out = f();
    let measured = COUNTS.with(|c| std::mem::replace(&mut *c.borrow_mut(), saved.clone()));
    COUNTS.with(|c| {
        let mut c = c.borrow_mut();
        for (k, v) in &measured {
            *c.entry(k).or_insert(0) += v;
        }
    });
    (out, measured)
}
