//! Time source abstraction so stage timing works with or without `std`.

/// A monotonic nanosecond clock.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Clock that always reads zero. Used where timing is irrelevant.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_ns(&self) -> u64 {
        (**self).now_ns()
    }
}
