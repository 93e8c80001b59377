//! Data-parallel fan-out with a sequential fallback.
//!
//! Results are always collected in input order and reduced sequentially, so
//! both modes produce bit-identical outputs.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    /// Rayon work-stealing when the `parallel` feature is on; otherwise
    /// sequential.
    #[default]
    Rayon,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Rayon
    }
}

/// Maps `f` over `items` in chunks of `chunk`, preserving order.
pub fn map_chunks<I, O, F>(mode: Parallelism, items: &[I], chunk: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> O + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = mode;
    items.chunks(chunk).map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<O, F>(mode: Parallelism, n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_preserve_order() {
        let items: Vec<u64> = (0..103).collect();
        let a = map_chunks(Parallelism::Sequential, &items, 10, |c| c.iter().sum::<u64>());
        let b = map_chunks(Parallelism::Rayon, &items, 10, |c| c.iter().sum::<u64>());
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        assert_eq!(map_range(Parallelism::Rayon, 5, |i| i * 2), vec![0, 2, 4, 6, 8]);
    }
}
