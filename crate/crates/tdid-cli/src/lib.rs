//! Implementation of the `tdid` binary's subcommands, split from `main.rs`
//! so integration tests can call the pieces directly.

pub mod ablate;
pub mod bundle;
pub mod detect_cmd;
pub mod draw;
pub mod eval_cmd;
pub mod gen_data;
pub mod schema;
pub mod selfcheck;
pub mod train_cmd;

/// Worker count for scene-parallel evaluation, capped by the `TDID_THREADS`
/// environment variable. Unset, empty, or unparsable values mean 1.
pub fn worker_threads() -> usize {
    std::env::var("TDID_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
