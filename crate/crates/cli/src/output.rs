//! Argument parsers and artifact writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use ssilab_core::Error;

/// Parses `0,3,6-11` into a sorted, deduplicated layer list.
pub fn parse_layers(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| format!("bad layer range {part:?}"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad layer range {part:?}"))?;
                if a > b {
                    return Err(format!("descending layer range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("bad layer {part:?}"))?),
        }
    }
    if out.is_empty() {
        return Err("no layers given".into());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn parse_profile(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((fam, path)) if !fam.is_empty() && !path.is_empty() => Ok((fam.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected family=path, got {s:?}")),
    }
}

pub fn parse_group(s: &str) -> Result<(String, String), String> {
    match s.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(format!("expected FAMILY:FAMILY, got {s:?}")),
    }
}

/// Names the missing input when a core error is a missing file.
pub fn input(role: &str, path: &Path, e: Error) -> anyhow::Error {
    match e {
        Error::NotFound { path } => anyhow!("{role} not found: {}", path.display()),
        other => anyhow::Error::new(other).context(format!("{role} {}", path.display())),
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!(".{name}.partial"))
}

/// Runs `write` against a temporary sibling of `out` and renames it into
/// place only when it succeeds.
pub fn atomic<F>(out: &Path, write: F) -> anyhow::Result<()>
where
    F: FnOnce(&Path) -> anyhow::Result<()>,
{
    if out.as_os_str().is_empty() {
        bail!("output path is empty");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = partial_path(out);
    match write(&tmp) {
        Ok(()) => fs::rename(&tmp, out).with_context(|| format!("writing {}", out.display())),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_json<T: Serialize>(out: &Path, value: &T) -> anyhow::Result<()> {
    write_bytes(out, serde_json::to_vec_pretty(value)?)
}

/// Single-line JSON, for files mostly made of coordinate lists.
pub fn write_json_compact<T: Serialize>(out: &Path, value: &T) -> anyhow::Result<()> {
    write_bytes(out, serde_json::to_vec(value)?)
}

fn write_bytes(out: &Path, mut bytes: Vec<u8>) -> anyhow::Result<()> {
    atomic(out, |tmp| {
        bytes.push(b'\n');
        fs::File::create(tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .with_context(|| format!("writing {}", tmp.display()))
    })
}

pub fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}
