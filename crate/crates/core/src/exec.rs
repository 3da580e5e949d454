//! Sequential or data-parallel evaluation of independent work items.
//!
//! Results always come back in input order, so reports are identical whichever
//! path ran them.

/// How independent trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the ambient rayon pool when the `parallel` feature is enabled,
    /// otherwise runs sequentially.
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            Execution::Parallel => parallel_map(items, f),
        }
    }

    /// `map` over fallible work, returning the first error in input order.
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
