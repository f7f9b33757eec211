//! Instrumented multiply-accumulate counting for matrix products.
//!
//! Counting is off unless a [`count_macs`] scope is active on the current
//! thread. Forward matmuls report `batch * m * k * n` MACs under the
//! category currently selected with [`with_category`].

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MacCategory {
    Projection,
    Score,
    Weighted,
    Output,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub projection: u64,
    pub score: u64,
    pub weighted: u64,
    pub output: u64,
    pub other: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.projection + self.score + self.weighted + self.output + self.other
    }

    fn add(&mut self, cat: MacCategory, n: u64) {
        match cat {
            MacCategory::Projection => self.projection += n,
            MacCategory::Score => self.score += n,
            MacCategory::Weighted => self.weighted += n,
            MacCategory::Output => self.output += n,
            MacCategory::Other => self.other += n,
        }
    }
}

struct State {
    counts: Option<MacCounts>,
    category: MacCategory,
}

thread_local! {
    static STATE: RefCell<State> = const {
        RefCell::new(State { counts: None, category: MacCategory::Other })
    };
}

/// Runs `f` with counting enabled and returns its result with the tally.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let previous = STATE.with(|s| s.borrow_mut().counts.replace(MacCounts::default()));
    let out = f();
    let counts = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let counts = s.counts.take().unwrap_or_default();
        s.counts = previous;
        counts
    });
    (out, counts)
}

/// Attributes matmuls issued inside `f` to `category`.
pub fn with_category<R>(category: MacCategory, f: impl FnOnce() -> R) -> R {
    let previous = STATE.with(|s| std::mem::replace(&mut s.borrow_mut().category, category));
    let out = f();
    STATE.with(|s| s.borrow_mut().category = previous);
    out
}

pub(crate) fn record(n: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let cat = s.category;
        if let Some(c) = s.counts.as_mut() {
            c.add(cat, n);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_is_scoped() {
        record(5);
        let ((), c) = count_macs(|| {
            record(3);
            with_category(MacCategory::Score, || record(7));
        });
        assert_eq!(c.other, 3);
        assert_eq!(c.score, 7);
        assert_eq!(c.total(), 10);
    }
}
