//! Ordered data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so any reduction over them is
//! independent of the thread count.

/// How [`map_ordered`] schedules work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    /// Use the rayon pool when the `parallel` feature is compiled in.
    #[default]
    Auto,
    Sequential,
}

impl Parallelism {
    /// Whether work will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Auto
    }
}

pub fn map_ordered<I, O, F>(mode: Parallelism, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    let _ = mode;
    items.into_iter().map(f).collect()
}

/// Number of worker threads `map_ordered` may use.
pub fn threads(mode: Parallelism) -> usize {
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return rayon::current_num_threads();
    }
    let _ = mode;
    1
}
