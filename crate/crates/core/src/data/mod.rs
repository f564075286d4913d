//! Data plumbing: CSV ingestion, cleaning, windowing, synthetic generators,
//! dataset manifests and forecast evaluation.

pub mod clean;
pub mod eval;
pub mod ingest;
pub mod manifest;
pub mod synth;
pub mod windows;

pub use clean::{clean, CleanReport, Cleaned};
pub use eval::{evaluate, EvalReport, EvalRow, Forecaster};
pub use ingest::{ingest_csv, ingest_reader, Ingested, RawSeries};
pub use manifest::{split_bounds, DatasetManifest, ManifestEntry};
pub use synth::{synth_generate, SynthKind, SynthParams};
pub use windows::{make_windows, Window, WindowSet};

/// Worker threads for parallel loops: `FINCAST_THREADS` if set, else the
/// machine's parallelism.
pub fn worker_count() -> usize {
    let max = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FINCAST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n,
        _ => max,
    }
}
