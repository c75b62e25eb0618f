//! Data-parallel helpers. With the `parallel` feature these run on rayon,
//! otherwise on a plain iterator. Results are ordered by index either way,
//! and reductions sum fixed-size chunks in index order, so the output is
//! bit-identical across thread counts and across the two backends.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length for deterministic reductions.
pub const REDUCE_CHUNK: usize = 64;

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// `f(i)` for every index, with a scratch value built once per chunk of
/// [`REDUCE_CHUNK`] indices.
pub fn try_map_with<T, E, S, M, F>(n: usize, make: M, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    M: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut S) -> Result<T, E> + Sync + Send,
{
    let chunks = try_map_indexed(n.div_ceil(REDUCE_CHUNK), |c| {
        let mut scratch = make();
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        (c * REDUCE_CHUNK..end)
            .map(|i| f(i, &mut scratch))
            .collect::<Result<Vec<T>, E>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Sum of `f(i)` vectors (each of length `len`) over `0..n`.
///
/// Each chunk of [`REDUCE_CHUNK`] indices is accumulated sequentially, then
/// chunk partials are added in chunk order.
pub fn sum_vectors<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    sum_vectors_with(n, len, || (), |i, _, acc| f(i, acc))
}

/// [`sum_vectors`] with a scratch value built once per chunk.
pub fn sum_vectors_with<S, M, F>(n: usize, len: usize, make: M, f: F) -> Vec<f64>
where
    M: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut S, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = vec![0.0; len];
        let mut scratch = make();
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            f(i, &mut scratch, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Deterministic scalar sum of `f(i)` over `0..n`.
pub fn sum_scalars<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    sum_vectors(n, 1, |i, acc| acc[0] += f(i))[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        assert_eq!(map_indexed(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn chunked_sum_matches_reference_order() {
        let n: usize = 1000;
        let v: Vec<f64> = (0..n)
            .map(|i| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (i + 1) as f64)
            .collect();
        let mut expected = 0.0;
        for c in 0..n.div_ceil(REDUCE_CHUNK) {
            let mut a = 0.0;
            for x in &v[c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n)] {
                a += x;
            }
            expected += a;
        }
        assert_eq!(sum_scalars(n, |i| v[i]).to_bits(), expected.to_bits());
    }

    #[test]
    fn try_map_propagates_error() {
        let r: Result<Vec<usize>, usize> = try_map_indexed(10, |i| if i == 7 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(7));
    }
}
