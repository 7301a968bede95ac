use std::sync::atomic::{AtomicUsize, Ordering};

/// Live and peak byte counts of the engine's auxiliary buffers.
#[derive(Debug, Default)]
pub struct MemCounter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    pub fn free(&self, bytes: usize) {
        self.current.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    #[cfg(test)]
    pub fn current(&self) -> usize {
        self.current.load(Ordering::Relaxed)
    }
}

/// A zero-initialized buffer whose size is charged to a [`MemCounter`] for
/// as long as it lives.
pub struct Tracked<'c, T> {
    pub buf: Vec<T>,
    counter: &'c MemCounter,
    bytes: usize,
}

impl<'c, T: Clone> Tracked<'c, T> {
    pub fn new(counter: &'c MemCounter, len: usize, fill: T) -> Self {
        let bytes = len * std::mem::size_of::<T>();
        counter.alloc(bytes);
        Self {
            buf: vec![fill; len],
            counter,
            bytes,
        }
    }
}

impl<T> Drop for Tracked<'_, T> {
    fn drop(&mut self) {
        self.counter.free(self.bytes);
    }
}

/// A byte count charged to a [`MemCounter`] until dropped, for memory that is
/// not a single flat buffer.
pub struct Charge<'c> {
    counter: &'c MemCounter,
    bytes: usize,
}

impl<'c> Charge<'c> {
    pub fn new(counter: &'c MemCounter, bytes: usize) -> Self {
        counter.alloc(bytes);
        Self { counter, bytes }
    }
}

impl Drop for Charge<'_> {
    fn drop(&mut self) {
        self.counter.free(self.bytes);
    }
}
