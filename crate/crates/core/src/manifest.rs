//! Run manifests: what was run, with which configuration and seeds, and the
//! SHA-256 of every artifact it wrote.
//!
//! The text form is one `key value` pair per line. `config` lines carry the
//! configuration snapshot verbatim, one line each.
//!
//! Output digests of CSV files skip the contents of any `wallclock_s`
//! column, so timings do not break replay comparisons. Every other byte
//! counts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    /// Arguments after the program name, for replay.
    pub args: Vec<String>,
    pub seed: u64,
    pub config: String,
    /// Files read by the run, as given on the command line.
    pub inputs: Vec<Artifact>,
    pub wallclock: Vec<(String, f64)>,
    pub outputs: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Column whose values are excluded from output digests.
pub const TIMING_COLUMN: &str = "wallclock_s";

/// Digest of an output file: plain SHA-256, except that CSV files with a
/// [`TIMING_COLUMN`] have that column emptied first.
pub fn output_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            let col = text
                .lines()
                .next()
                .and_then(|h| h.split(',').position(|c| c == TIMING_COLUMN));
            if let Some(col) = col {
                let mut masked = String::with_capacity(text.len());
                for (i, line) in text.lines().enumerate() {
                    let mut fields: Vec<&str> = line.split(',').collect();
                    if i > 0 && col < fields.len() {
                        fields[col] = "";
                    }
                    masked.push_str(&fields.join(","));
                    masked.push('\n');
                }
                return Ok(sha256_hex(masked.as_bytes()));
            }
        }
    }
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    /// Starts a manifest; the run id hashes the command, arguments and config.
    pub fn new(command: &str, args: &[String], seed: u64, config: &str) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        for a in args {
            h.update([0]);
            h.update(a.as_bytes());
        }
        h.update([0]);
        h.update(config.as_bytes());
        let digest = hex::encode(h.finalize());
        Self {
            run_id: format!("{command}-{seed}-{}", &digest[..12]),
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            config: config.to_string(),
            ..Default::default()
        }
    }

    /// Hashes input files; directories contribute every file below them.
    pub fn record_inputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            let mut files = Vec::new();
            collect_files(p, &mut files)?;
            for f in files {
                self.inputs.push(Artifact {
                    path: f.to_string_lossy().into_owned(),
                    sha256: sha256_file(&f)?,
                });
            }
        }
        Ok(())
    }

    /// Inputs whose current checksum differs from the record.
    pub fn input_mismatches(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|a| sha256_file(&a.path).map_or(true, |h| h != a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }

    pub fn stage(&mut self, name: &str, seconds: f64) {
        self.wallclock.push((name.to_string(), seconds));
    }

    /// Hashes `files`, which must live under `out_dir`.
    pub fn record_outputs(&mut self, out_dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let rel = f
                .strip_prefix(out_dir)
                .map_err(|_| Error::invalid("manifest", format!("{} is outside {}", f.display(), out_dir.display())))?;
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            self.outputs.push(Artifact {
                path: rel,
                sha256: output_digest(f)?,
            });
        }
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.dedup_by(|a, b| a.path == b.path);
        Ok(())
    }

    /// Paths under `out_dir` whose current checksum differs from the record,
    /// including missing files.
    pub fn mismatches(&self, out_dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|a| output_digest(out_dir.join(&a.path)).map_or(true, |h| h != a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# run manifest\n");
        let _ = writeln!(out, "run_id {}", self.run_id);
        let _ = writeln!(out, "command {}", self.command);
        for a in &self.args {
            let _ = writeln!(out, "arg {a}");
        }
        let _ = writeln!(out, "seed {}", self.seed);
        for s in Stream::ALL {
            let _ = writeln!(out, "stream {} {}", s.name(), s.id());
        }
        for a in &self.inputs {
            let _ = writeln!(out, "input {} {}", a.sha256, a.path);
        }
        for (name, secs) in &self.wallclock {
            let _ = writeln!(out, "wallclock {name} {secs:.3}");
        }
        for a in &self.outputs {
            let _ = writeln!(out, "sha256 {} {}", a.sha256, a.path);
        }
        for line in self.config.lines() {
            let _ = writeln!(out, "config {line}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad manifest line `{line}`"));
        let mut m = Self::default();
        let mut config = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "run_id" => m.run_id = rest.to_string(),
                "command" => m.command = rest.to_string(),
                "arg" => m.args.push(rest.to_string()),
                "seed" => m.seed = rest.parse().map_err(|_| bad(line))?,
                "stream" => {}
                "input" => m.inputs.push(artifact(rest).ok_or_else(|| bad(line))?),
                "wallclock" => {
                    let (name, secs) = rest.rsplit_once(' ').ok_or_else(|| bad(line))?;
                    m.wallclock.push((name.to_string(), secs.parse().map_err(|_| bad(line))?));
                }
                "sha256" => m.outputs.push(artifact(rest).ok_or_else(|| bad(line))?),
                "config" => config.push(rest),
                _ => return Err(bad(line)),
            }
        }
        m.config = config.iter().map(|l| format!("{l}\n")).collect();
        if m.command.is_empty() {
            return Err(Error::Format("manifest without command".into()));
        }
        Ok(m)
    }

    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let p = out_dir.join(MANIFEST_FILE);
        std::fs::write(&p, self.to_text())?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn artifact(rest: &str) -> Option<Artifact> {
    let (hash, path) = rest.split_once(' ')?;
    Some(Artifact {
        path: path.to_string(),
        sha256: hash.to_string(),
    })
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}
