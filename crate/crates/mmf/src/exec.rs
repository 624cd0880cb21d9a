use std::num::NonZeroUsize;
use std::thread;

use mmf_core::metatrain::Executor;

/// Splits the input into contiguous chunks, one per worker, and concatenates
/// the results in input order. Output does not depend on the worker count.
#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    workers: NonZeroUsize,
}

impl Threaded {
    pub fn new(workers: usize) -> Self {
        Self { workers: NonZeroUsize::new(workers).unwrap_or(NonZeroUsize::MIN) }
    }

    /// One worker per available core.
    pub fn available() -> Self {
        Self::new(thread::available_parallelism().map_or(1, NonZeroUsize::get))
    }

    pub fn workers(&self) -> usize {
        self.workers.get()
    }
}

impl Executor for Threaded {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let workers = self.workers.get().min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let chunk = items.len().div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> =
                items.chunks(chunk).map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<u64> = (0..37).collect();
        let expected: Vec<u64> = items.iter().map(|x| x * x).collect();
        for w in [0, 1, 2, 3, 8, 64] {
            assert_eq!(Threaded::new(w).map(&items, |x| x * x), expected, "workers={w}");
        }
        assert!(Threaded::new(4).map(&[] as &[u64], |x| *x).is_empty());
    }
}
