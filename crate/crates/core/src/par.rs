//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) independent chunks run on the rayon
//! pool; without it, or inside [`sequential`], everything runs on the calling
//! thread. Results are always assembled in index order, and no helper
//! reduces across chunks, so output is identical either way.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with parallel helpers disabled on this thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            FORCE_SEQ.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FORCE_SEQ.with(|c| c.replace(true)));
    f()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQ.with(Cell::get)
}

/// `f` applied to each `chunk`-sized piece of `data`, results in order.
pub fn map_chunks<T, R, F>(data: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return data
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    data.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// `f(i)` for `i` in `0..n`, results in order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_scope_restores_flag() {
        let outer = is_parallel();
        sequential(|| {
            assert!(!is_parallel());
            sequential(|| assert!(!is_parallel()));
            assert!(!is_parallel());
        });
        assert_eq!(is_parallel(), outer);
    }

    #[test]
    fn helpers_agree_across_modes() {
        let data: Vec<u32> = (0..1000).collect();
        let par = map_chunks(&data, 7, |i, c| (i, c.iter().sum::<u32>()));
        let seq = sequential(|| map_chunks(&data, 7, |i, c| (i, c.iter().sum::<u32>())));
        assert_eq!(par, seq);
        assert_eq!(map_indices(10, |i| i * i), sequential(|| map_indices(10, |i| i * i)));
        let mut a = data.clone();
        for_each_chunk_mut(&mut a, 16, |i, c| c.iter_mut().for_each(|v| *v += i as u32));
        assert_eq!(a[16], 17);
    }
}
