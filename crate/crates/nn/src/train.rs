use crate::error::Result;
use crate::parallel::{map_chunks, Parallelism};
use crate::real::Real;

/// Sums per-chunk gradients of a mini-batch.
///
/// `f(chunk, grad)` returns the summed loss of the chunk and accumulates the
/// gradient of that sum into `grad`. Chunks may run in parallel; the
/// reduction is in chunk order, so the result depends only on `chunk`.
pub fn batch_gradient<T, F>(
    mode: Parallelism,
    batch: &[usize],
    chunk: usize,
    num_params: usize,
    f: F,
) -> Result<(f64, Vec<T>)>
where
    T: Real,
    F: Fn(&[usize], &mut [T]) -> Result<f64> + Sync + Send,
{
    let parts = map_chunks(mode, batch, chunk, |c| {
        let mut g = vec![T::zero(); num_params];
        f(c, &mut g).map(|loss| (loss, g))
    });
    let mut total = 0.0;
    let mut grad: Option<Vec<T>> = None;
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        match grad.as_mut() {
            None => grad = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        }
    }
    Ok((total, grad.unwrap_or_else(|| vec![T::zero(); num_params])))
}
