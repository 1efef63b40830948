//! The `dior` command line: extraction, baselines, evaluation, sweeps and
//! plots over manifest-described image sets.

mod args;
mod commands;
mod label_service;
mod plot;

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use dior::manifest::load_manifest;
use dior::{BackendRegistry, DatasetManifest, MetricSpec, VisionLanguageBackend};
use serde::Serialize;

pub use args::Cli;
pub use label_service::{HttpLabelClient, LABEL_ENDPOINT_ENV};

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 for runtime
/// failures.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Loads a dataset manifest, resolving relative image paths against the
/// manifest's directory.
pub(crate) fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let mut manifest = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for item in &mut manifest.items {
        item.image.path = resolve(base, &item.image.path);
    }
    Ok(manifest)
}

pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

/// Comma-separated condition names, or every manifest condition.
pub(crate) fn condition_list(arg: Option<&str>, manifest: &DatasetManifest) -> Result<Vec<String>> {
    let names: Vec<String> = match arg {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        None => manifest.condition_names(),
    };
    if names.is_empty() {
        bail!("no conditions given");
    }
    for name in &names {
        if manifest.condition(name).is_none() {
            bail!("condition `{name}` is not declared in manifest `{}`", manifest.dataset);
        }
    }
    Ok(names)
}

pub(crate) fn metric_spec(name: &str, k: Option<usize>) -> Result<MetricSpec> {
    Ok(match k {
        Some(k) => MetricSpec::parse(name, Some(k))?,
        None => name.parse()?,
    })
}

pub(crate) fn make_backend(args: &args::BackendArgs, seed: u64) -> Result<Box<dyn VisionLanguageBackend>> {
    let backend = BackendRegistry::with_builtin().create(&args.backend, &args.options(seed))?;
    if let Some(expected) = &args.model_id {
        let actual = &backend.info().model_id;
        if expected != actual {
            return Err(dior::DiorError::Consistency(format!(
                "backend reports model id `{actual}`, expected `{expected}`"
            ))
            .into());
        }
    }
    Ok(backend)
}

/// Opens an output file, refusing to replace an existing one unless asked.
pub(crate) fn create_output(path: &Path, overwrite: bool) -> Result<File> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if overwrite {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    opts.open(path).map_err(|e| {
        if e.kind() == io::ErrorKind::AlreadyExists {
            anyhow::Error::from(dior::DiorError::Refused(path.to_path_buf()))
        } else {
            anyhow::Error::from(e).context(format!("creating {}", path.display()))
        }
    })
}

/// JSON-lines sink writing to a file or standard output.
pub(crate) struct JsonLines {
    out: Box<dyn Write>,
}

impl JsonLines {
    pub fn open(out: &args::OutputArgs) -> Result<Self> {
        let out: Box<dyn Write> = match &out.out {
            Some(path) => Box::new(BufWriter::new(create_output(path, out.overwrite)?)),
            None => Box::new(io::stdout().lock()),
        };
        Ok(Self { out })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
