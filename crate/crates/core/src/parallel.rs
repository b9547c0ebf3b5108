//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) independent work items such as
//! videos in a batch, seeds in a sweep or classes in an evaluation are fanned
//! out over the rayon pool. Results always come back in input order, so
//! reductions performed by the caller stay bitwise reproducible.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon when compiled with the `parallel` feature, sequential otherwise.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Number of worker threads that [`Execution::Parallel`] will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree_and_keep_order() {
        let items: Vec<u64> = (0..257).collect();
        let seq = map(Execution::Sequential, &items, |x| x * x + 1);
        let par = map(Execution::Parallel, &items, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(map_range(Execution::Parallel, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
