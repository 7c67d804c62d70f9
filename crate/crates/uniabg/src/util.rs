//! Small shared helpers: deterministic parallel row maps and RNG plumbing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worker-count cap read from `UNIABG_THREADS`; defaults to the machine's
/// available parallelism, clamped to at least 1.
pub fn num_threads() -> usize {
    if let Ok(v) = std::env::var("UNIABG_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Fills `out` (n_rows * row_len, row-major) by evaluating `f(row, out_row)`
/// for every row. Rows are split into contiguous chunks across workers, and
/// each row is written independently, so the result is bitwise identical for
/// any worker count.
pub fn par_fill_rows<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    let n_rows = out.len() / row_len;
    let workers = num_threads().min(n_rows.max(1));
    if workers <= 1 || n_rows < 2 {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
        return;
    }
    let rows_per = n_rows.div_ceil(workers);
    std::thread::scope(|scope| {
        for (chunk_idx, chunk) in out.chunks_mut(rows_per * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let base = chunk_idx * rows_per;
                for (i, row) in chunk.chunks_mut(row_len).enumerate() {
                    f(base + i, row);
                }
            });
        }
    });
}

/// Seeded RNG used everywhere reproducibility matters.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic Fisher-Yates shuffle of `0..n` under the given RNG.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
