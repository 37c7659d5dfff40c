//! External flow worker: loads a flow checkpoint, then answers
//! length-prefixed frame-pair batches on stdin with flow tensors on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let mut args = std::env::args_os().skip(1);
    let ckpt: PathBuf = match args.next() {
        Some(p) => p.into(),
        None => {
            eprintln!("usage: tsad-flow-worker <flow-checkpoint>");
            return ExitCode::from(1);
        }
    };
    match tsad::bench::worker_main(&ckpt) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flow worker failed: {e}");
            ExitCode::from(2)
        }
    }
}
