//! Loading command lists and kernel traces from disk, and writing generated
//! workloads back out.

use std::fs;
use std::path::{Path, PathBuf};

use streamsim_core::gen::GeneratedWorkload;
use streamsim_core::trace::{parse_commandlist, parse_kernel_trace, render_commandlist};
use streamsim_core::{Command, TraceError, Workload};
use thiserror::Error;

/// File name of the command list inside a generated workload directory.
pub const COMMANDLIST_NAME: &str = "kernelslist.g";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: TraceError },
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a command list and every kernel trace it names. Trace paths are
/// resolved against the command list's directory.
pub fn load_workload(commandlist: &Path) -> Result<Workload, LoadError> {
    let text = read(commandlist)?;
    let commands = parse_commandlist(&text).map_err(|source| LoadError::Parse {
        path: commandlist.to_owned(),
        source,
    })?;
    let dir = commandlist.parent().unwrap_or(Path::new("."));
    let mut kernels = Vec::new();
    for c in &commands {
        if let Command::KernelLaunch { trace_path } = c {
            let path = dir.join(trace_path);
            let k = parse_kernel_trace(&read(&path)?)
                .map_err(|source| LoadError::Parse { path, source })?;
            kernels.push(k);
        }
    }
    Ok(Workload { commands, kernels })
}

/// Writes the command list and kernel traces into `dir`, creating it if
/// needed. Returns the command list path.
pub fn write_generated(dir: &Path, g: &GeneratedWorkload) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    for (k, name) in g.workload.kernels.iter().zip(&g.trace_files) {
        fs::write(dir.join(name), k.to_string())?;
    }
    let list = dir.join(COMMANDLIST_NAME);
    fs::write(&list, render_commandlist(&g.workload.commands))?;
    Ok(list)
}
