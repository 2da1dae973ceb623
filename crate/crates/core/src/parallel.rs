//! Deterministic in-process worker pool.
//!
//! A [`TaskPlan`] partitions an index set into contiguous chunks. The plan
//! depends only on the problem size and chunk size, so results gathered in
//! plan order are identical for every worker count.

use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Frame indices `0..T`.
    Frames(usize),
    /// Upper-triangle pairs `(i, j)`, `i < j < m`, in row-major order.
    Pairs(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPlan {
    pub domain: Domain,
    /// Contiguous ranges over the linear index set, in order.
    pub chunks: Vec<Range<usize>>,
}

impl TaskPlan {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Size of the index set the plan covers.
    pub fn total(&self) -> usize {
        match self.domain {
            Domain::Frames(t) => t,
            Domain::Pairs(m) => pair_count(m),
        }
    }

    /// The `(i, j)` pairs of one tile of a pair plan.
    pub fn pairs(&self, chunk: usize) -> Vec<(usize, usize)> {
        match self.domain {
            Domain::Pairs(m) => {
                let r = &self.chunks[chunk];
                PairIter::starting_at(m, r.start).take(r.len()).collect()
            }
            Domain::Frames(_) => panic!("pairs() called on a frame plan"),
        }
    }
}

pub fn pair_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Row-major walk over `(i, j)` with `i < j < m`.
#[derive(Debug, Clone)]
pub struct PairIter {
    m: usize,
    i: usize,
    j: usize,
}

impl PairIter {
    pub fn new(m: usize) -> Self {
        PairIter { m, i: 0, j: 1 }
    }

    /// Starts at the pair with linear index `k`.
    pub fn starting_at(m: usize, mut k: usize) -> Self {
        let mut i = 0;
        while i + 1 < m && k >= m - i - 1 {
            k -= m - i - 1;
            i += 1;
        }
        PairIter { m, i, j: i + 1 + k }
    }
}

impl Iterator for PairIter {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.i + 1 >= self.m {
            return None;
        }
        let out = (self.i, self.j);
        self.j += 1;
        if self.j >= self.m {
            self.i += 1;
            self.j = self.i + 1;
        }
        Some(out)
    }
}

fn contiguous(total: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..total.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(total))
        .collect()
}

/// Contiguous frame ranges of `chunk_size` frames (the last may be shorter).
pub fn plan_frames(frames: usize, chunk_size: usize) -> TaskPlan {
    TaskPlan {
        domain: Domain::Frames(frames),
        chunks: contiguous(frames, chunk_size),
    }
}

/// Upper-triangle pairs of `m` items grouped into tiles of at most `tile` pairs.
pub fn plan_pairs(m: usize, tile: usize) -> TaskPlan {
    TaskPlan {
        domain: Domain::Pairs(m),
        chunks: contiguous(pair_count(m), tile),
    }
}

/// Resolves a worker request; `0` means one per available core.
pub fn resolve_workers(workers: usize) -> usize {
    if workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        workers
    }
}

/// Runs `task` on every chunk of `plan` and returns results in plan order.
///
/// Workers pull chunk indices from a shared counter. After the first failure
/// no new chunks are started; the error of the lowest failing chunk is
/// returned and partial results are dropped.
pub fn run<T, F>(plan: &TaskPlan, task: F, workers: usize) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, Range<usize>) -> Result<T> + Sync,
{
    let n = plan.chunks.len();
    let workers = resolve_workers(workers).min(n.max(1));
    if workers <= 1 {
        return plan
            .chunks
            .iter()
            .enumerate()
            .map(|(c, r)| {
                task(c, r.clone()).map_err(|e| Error::Task {
                    chunk: c,
                    source: Box::new(e),
                })
            })
            .collect();
    }

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::Acquire) {
                    break;
                }
                let c = next.fetch_add(1, Ordering::AcqRel);
                if c >= n {
                    break;
                }
                let out = task(c, plan.chunks[c].clone());
                if out.is_err() {
                    failed.store(true, Ordering::Release);
                }
                *slots[c].lock().unwrap() = Some(out);
            });
        }
    });

    let mut results = Vec::with_capacity(n);
    let mut first_error = None;
    for (c, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().unwrap() {
            Some(Ok(v)) => results.push(v),
            Some(Err(e)) => {
                first_error = Some(Error::Task {
                    chunk: c,
                    source: Box::new(e),
                });
                break;
            }
            None => {}
        }
    }
    match first_error {
        Some(e) => Err(e),
        None if results.len() == n => Ok(results),
        None => unreachable!("chunks skipped without a recorded failure"),
    }
}

/// Convenience: map `f` over `0..len` in chunks of `chunk` items.
pub fn map_indices<T, F>(len: usize, chunk: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let plan = plan_frames(len, chunk);
    let nested = run(&plan, |_, r| r.map(&f).collect::<Result<Vec<T>>>(), workers)?;
    Ok(nested.into_iter().flatten().collect())
}
