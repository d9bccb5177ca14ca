//! Fan-out of independent runs. Uses rayon with the `parallel` feature,
//! otherwise runs in order on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every item, possibly in parallel. Output order matches input order.
pub fn map_runs<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_runs_sequential(items, f)
    }
}

pub fn map_runs_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
