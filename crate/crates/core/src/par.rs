//! Data-parallel helpers.
//!
//! Every data-parallel loop in the crate goes through [`Execution`], so the
//! same call site can run on the rayon pool or on the current thread. Without
//! the `parallel` feature, [`Execution::Parallel`] silently degrades to the
//! sequential path.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `true` if this mode will actually use the thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Applies `f` to consecutive `chunk`-sized pieces of `data`, passing the
/// chunk index.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let a = map_range(Execution::Sequential, 100, |i| i * i);
        let b = map_range(Execution::Parallel, 100, |i| i * i);
        assert_eq!(a, b);

        let mut x = vec![0usize; 37];
        let mut y = vec![0usize; 37];
        for_each_chunk_mut(Execution::Sequential, &mut x, 5, |c, s| {
            s.iter_mut().for_each(|v| *v = c)
        });
        for_each_chunk_mut(Execution::Parallel, &mut y, 5, |c, s| {
            s.iter_mut().for_each(|v| *v = c)
        });
        assert_eq!(x, y);
        assert_eq!(x[36], 7);
    }
}
