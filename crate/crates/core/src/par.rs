//! Order-preserving parallel map on a sized worker pool.

use rayon::prelude::*;

/// Applies `f` to every item on up to `threads` workers.
///
/// Results come back in input order whatever the scheduling, so output is
/// independent of the thread count as long as `f` is a pure function of its
/// argument. The first error (in input order) wins.
pub fn par_map<I, O, E, F>(items: &[I], threads: usize, f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(&I) -> Result<O, E> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("worker pool starts");
    let out: Vec<Result<O, E>> = pool.install(|| items.par_iter().map(&f).collect());
    out.into_iter().collect()
}
