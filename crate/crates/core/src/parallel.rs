//! Order-preserving chunked parallel map.

use rayon::prelude::*;
pub use rayon::ThreadPool;

/// Items processed per parallel batch, per worker thread.
const ITEMS_PER_WORKER: usize = 64;

/// Applies `work` to every item on `pool` and feeds results to `sink` in input
/// order. Items are pulled in bounded batches so memory stays proportional to
/// the batch, not the input.
pub fn for_each_ordered<I, T, R, W, S, E>(items: I, pool: &rayon::ThreadPool, work: W, mut sink: S) -> Result<(), E>
where
    I: Iterator<Item = T>,
    T: Send,
    R: Send,
    W: Fn(usize, T) -> R + Sync,
    S: FnMut(R) -> Result<(), E>,
{
    let batch = ITEMS_PER_WORKER * pool.current_num_threads().max(1);
    let mut items = items.enumerate();
    loop {
        let chunk: Vec<(usize, T)> = items.by_ref().take(batch).collect();
        if chunk.is_empty() {
            return Ok(());
        }
        let results: Vec<R> = pool.install(|| chunk.into_par_iter().map(|(i, t)| work(i, t)).collect());
        for result in results {
            sink(result)?;
        }
    }
}

/// A pool with `workers` threads, or one per logical CPU when `workers` is 0.
pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool, rayon::ThreadPoolBuildError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build()
}
