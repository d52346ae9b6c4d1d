//! Data-parallel helpers. With the `parallel` feature the work is spread
//! over the rayon pool; without it, or under [`Execution::Sequential`],
//! items are processed in order on the calling thread. Results are always
//! returned in input order.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// `f(0), .., f(n - 1)` in order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(exec, items.len(), |i| f(&items[i]))
}

/// Like [`map_range`] but fails if any item fails.
pub fn try_map_range<R, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    try_map_range(exec, items.len(), |i| f(&items[i]))
}

/// Runs `f` with at most `threads` workers. `0` keeps the global pool.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let a = map_range(Execution::Sequential, 100, |i| i * i);
        let b = with_threads(2, || map_range(Execution::Parallel, 100, |i| i * i));
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn first_error_is_reported() {
        let r: Result<Vec<usize>, String> =
            try_map_range(Execution::Parallel, 10, |i| if i == 3 { Err("three".into()) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), "three");
    }
}
