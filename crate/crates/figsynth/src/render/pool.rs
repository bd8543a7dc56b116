//! Bounded worker pool for render jobs.
//!
//! Jobs are independent; results come back in submission order regardless
//! of completion order. The pool instruments its own concurrency so tests
//! can assert the bound.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{RenderError, RenderJob, RenderOutcome, Renderer};

#[derive(Debug, Default)]
pub struct PoolStats {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl PoolStats {
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Render all jobs with at most `width` running at once. Returns outcomes
/// in job order plus the observed concurrency stats.
pub fn render_all(
    renderer: &Renderer,
    jobs: Vec<RenderJob>,
    width: usize,
) -> (Vec<Result<RenderOutcome, RenderError>>, Arc<PoolStats>) {
    let width = width.max(1);
    let stats = Arc::new(PoolStats::default());
    let total = jobs.len();
    let mut slots: Vec<Option<Result<RenderOutcome, RenderError>>> = Vec::new();
    slots.resize_with(total, || None);
    if total == 0 {
        return (Vec::new(), stats);
    }

    let (job_tx, job_rx) = crossbeam_channel::unbounded::<(usize, RenderJob)>();
    let (result_tx, result_rx) =
        crossbeam_channel::unbounded::<(usize, Result<RenderOutcome, RenderError>)>();
    for item in jobs.into_iter().enumerate() {
        job_tx.send(item).expect("queue open");
    }
    drop(job_tx);

    std::thread::scope(|scope| {
        for _ in 0..width.min(total) {
            let job_rx = job_rx.clone();
            let result_tx = result_tx.clone();
            let stats = Arc::clone(&stats);
            scope.spawn(move || {
                while let Ok((idx, job)) = job_rx.recv() {
                    let now = stats.current.fetch_add(1, Ordering::SeqCst) + 1;
                    stats.peak.fetch_max(now, Ordering::SeqCst);
                    let result = renderer.render(&job);
                    stats.current.fetch_sub(1, Ordering::SeqCst);
                    if result_tx.send((idx, result)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(result_tx);
        for (idx, result) in result_rx {
            slots[idx] = Some(result);
        }
    });

    (
        slots
            .into_iter()
            .map(|s| s.expect("every job produced a result"))
            .collect(),
        stats,
    )
}
