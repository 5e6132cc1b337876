//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! the identical chunking runs on the calling thread. Chunk boundaries never
//! depend on the thread count, so both builds produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if data.len() > chunk {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluate `f(i)` for `i in 0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Whether the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Number of worker threads the data-parallel kernels will use.
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
    fn chunks_visit_every_element_once() {
        let mut v = vec![0usize; 10_001];
        for_each_chunk_mut(&mut v, 100, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 100 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(257, |i| i * 2);
        assert_eq!(v.len(), 257);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
