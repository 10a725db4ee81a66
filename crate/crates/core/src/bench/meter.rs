//! Payload-byte accounting for tensors.
//!
//! Every [`Tensor`](crate::Tensor) reports its payload to the meter that is
//! current on the allocating thread and remembers that meter, so the release
//! is credited back to the same meter even when the tensor is dropped on a
//! different thread. A process-wide meter is current by default; a private
//! meter can be installed for the calling thread with [`MemoryMeter::enter`].

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};

/// Live and peak payload byte counters.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    live: AtomicU64,
    peak: AtomicU64,
    allocations: AtomicU64,
    // u64::MAX means "no budget"
    budget: AtomicU64,
    exceeded: AtomicBool,
}

/// Point-in-time view of a meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterSnapshot {
    pub live: u64,
    pub peak: u64,
    pub allocations: u64,
}

static GLOBAL: OnceLock<Arc<MemoryMeter>> = OnceLock::new();

thread_local! {
    static CURRENT: RefCell<Vec<Arc<MemoryMeter>>> = const { RefCell::new(Vec::new()) };
}

/// The process-wide meter.
pub fn global() -> Arc<MemoryMeter> {
    GLOBAL.get_or_init(|| Arc::new(MemoryMeter::new())).clone()
}

/// The meter that allocations on this thread are charged to.
pub fn current() -> Arc<MemoryMeter> {
    CURRENT
        .with(|stack| stack.borrow().last().cloned())
        .unwrap_or_else(global)
}

/// Fails with [`Error::OutOfBudget`] if the current meter's budget has been
/// crossed since it was last reset.
pub fn check_budget() -> Result<()> {
    current().check()
}

/// Restores the previously current meter when dropped.
#[must_use = "the meter is only current while the guard is alive"]
pub struct MeterGuard {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Drop for MeterGuard {
    fn drop(&mut self) {
        CURRENT.with(|stack| {
            stack.borrow_mut().pop();
        });
    }
}

impl MemoryMeter {
    pub fn new() -> Self {
        MemoryMeter {
            budget: AtomicU64::new(u64::MAX),
            ..Default::default()
        }
    }

    /// Makes `meter` current for this thread until the guard drops.
    pub fn enter(meter: &Arc<MemoryMeter>) -> MeterGuard {
        CURRENT.with(|stack| stack.borrow_mut().push(meter.clone()));
        MeterGuard {
            _not_send: std::marker::PhantomData,
        }
    }

    pub(crate) fn record_alloc(&self, bytes: u64) {
        let live = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(live, Ordering::SeqCst);
        self.allocations.fetch_add(1, Ordering::SeqCst);
        if live > self.budget.load(Ordering::SeqCst) {
            self.exceeded.store(true, Ordering::SeqCst);
        }
    }

    pub(crate) fn record_release(&self, bytes: u64) {
        let prev = self.live.fetch_sub(bytes, Ordering::SeqCst);
        debug_assert!(prev >= bytes, "meter released more than it holds");
    }

    pub fn live(&self) -> u64 {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn allocations(&self) -> u64 {
        self.allocations.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        MeterSnapshot {
            live: self.live(),
            peak: self.peak(),
            allocations: self.allocations(),
        }
    }

    /// Sets peak to the current live value and clears the budget flag.
    pub fn reset(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
        self.exceeded.store(false, Ordering::SeqCst);
    }

    /// Caps live bytes; crossing the cap is reported by [`MemoryMeter::check`].
    pub fn set_budget(&self, bytes: Option<u64>) {
        self.budget.store(bytes.unwrap_or(u64::MAX), Ordering::SeqCst);
        if self.live() > bytes.unwrap_or(u64::MAX) {
            self.exceeded.store(true, Ordering::SeqCst);
        }
    }

    pub fn budget(&self) -> Option<u64> {
        match self.budget.load(Ordering::SeqCst) {
            u64::MAX => None,
            b => Some(b),
        }
    }

    pub fn budget_exceeded(&self) -> bool {
        self.exceeded.load(Ordering::SeqCst)
    }

    pub fn check(&self) -> Result<()> {
        if self.budget_exceeded() {
            Err(Error::OutOfBudget {
                budget: self.budget().unwrap_or(u64::MAX),
            })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let m = MemoryMeter::new();
        m.record_alloc(100);
        m.record_alloc(50);
        m.record_release(100);
        assert_eq!(m.live(), 50);
        assert_eq!(m.peak(), 150);
        m.reset();
        assert_eq!(m.peak(), 50);
        assert_eq!(m.allocations(), 2);
        m.record_release(50);
        assert_eq!(m.live(), 0);
    }

    #[test]
    fn budget_flag_trips_and_resets() {
        let m = MemoryMeter::new();
        m.set_budget(Some(10));
        m.record_alloc(8);
        assert!(m.check().is_ok());
        m.record_alloc(8);
        assert!(matches!(m.check(), Err(Error::OutOfBudget { budget: 10 })));
        m.record_release(16);
        m.reset();
        assert!(m.check().is_ok());
    }

    #[test]
    fn zero_budget_is_exceeded_by_any_allocation() {
        let m = MemoryMeter::new();
        m.set_budget(Some(0));
        m.record_alloc(1);
        assert!(m.budget_exceeded());
        m.record_release(1);
    }

    #[test]
    fn scoped_meter_nests() {
        let a = Arc::new(MemoryMeter::new());
        let b = Arc::new(MemoryMeter::new());
        let _ga = MemoryMeter::enter(&a);
        assert!(Arc::ptr_eq(&current(), &a));
        {
            let _gb = MemoryMeter::enter(&b);
            assert!(Arc::ptr_eq(&current(), &b));
        }
        assert!(Arc::ptr_eq(&current(), &a));
    }

    #[test]
    fn concurrent_reports_balance() {
        let m = Arc::new(MemoryMeter::new());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let m = m.clone();
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        m.record_alloc(16);
                        m.record_release(16);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(m.live(), 0);
        assert_eq!(m.allocations(), 4000);
        assert!(m.peak() >= 16 && m.peak() <= 64);
    }
}
