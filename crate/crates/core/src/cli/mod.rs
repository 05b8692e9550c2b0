//! `tryflow` command line: subcommand, optional `--config file.json`, then
//! `--dot.path value` overrides applied in order.

mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use config::RunConfig;
use config::{from_value, hex, parse_value, set_path};

use crate::error::{Error, Result};

/// Version string recorded in manifests; `TRYFLOW_DESCRIBE` at build time
/// (for example the output of `git describe`) takes precedence.
pub const VERSION: &str = match option_env!("TRYFLOW_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Parser, Debug)]
#[command(name = "tryflow", version, about = "Garment try-on / try-off flow transformer on synthetic pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(clap::Args, Debug, Clone)]
struct Flags {
    /// `--config FILE`, `--out DIR`, `--seed N`, `--strategy S`, `--task T`,
    /// `--init CKPT`, `--checkpoint CKPT`, `--data-dir DIR`, `--before CKPT`,
    /// `--after CKPT`, `--temp-scale`, or any `--dot.path VALUE` into the
    /// run config.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "FLAGS")]
    flags: Vec<String>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Write the synthetic pair set described by `data.spec`.
    GenData(Flags),
    /// Train and write a checkpoint plus loss curve.
    Train(Flags),
    /// Try-on: regenerate the agnostic region of the person.
    Sample(Flags),
    /// Try-off: reconstruct the garment shot from the person.
    Tryoff(Flags),
    /// Try-on with self-corrective sampling.
    SelfCorrect(Flags),
    /// Attention heatmaps for query tokens.
    AttnMap(Flags),
    /// Masked-region fidelity and attention localization on a dataset.
    Eval(Flags),
    /// Per-label normalized weight change between two checkpoints.
    LayerReport(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Tryoff(_) => "tryoff",
            Command::SelfCorrect(_) => "self-correct",
            Command::AttnMap(_) => "attn-map",
            Command::Eval(_) => "eval",
            Command::LayerReport(_) => "layer-report",
        }
    }

    fn flags(&self) -> &[String] {
        match self {
            Command::GenData(f)
            | Command::Train(f)
            | Command::Sample(f)
            | Command::Tryoff(f)
            | Command::SelfCorrect(f)
            | Command::AttnMap(f)
            | Command::Eval(f)
            | Command::LayerReport(f) => &f.flags,
        }
    }

    /// Config key that `--seed` sets for this subcommand.
    fn seed_key(&self) -> &'static str {
        match self {
            Command::GenData(_) => "data.spec.seed",
            Command::Train(_) => "seeds.train",
            _ => "seeds.sample",
        }
    }
}

/// Builds the run config from `--config` and the overrides.
fn resolve(command: &Command) -> Result<RunConfig> {
    let flags = command.flags();
    let mut pairs: Vec<(String, Value)> = Vec::new();
    let mut file: Option<PathBuf> = None;
    let mut i = 0;
    while i < flags.len() {
        let Some(key) = flags[i].strip_prefix("--") else {
            return Err(Error::Usage(format!("expected a `--key`, got `{}`", flags[i])));
        };
        if key == "temp-scale" {
            pairs.push(("temperature.enabled".into(), Value::Bool(true)));
            i += 1;
            continue;
        }
        let raw = flags.get(i + 1).ok_or_else(|| Error::Usage(format!("`--{key}` needs a value")))?;
        let path = |s: &str| Value::String(s.to_string());
        match key {
            "config" => file = Some(PathBuf::from(raw)),
            "out" => pairs.push(("output".into(), path(raw))),
            "seed" => pairs.push((command.seed_key().into(), parse_value(raw))),
            "strategy" => pairs.push(("train.strategy".into(), path(raw))),
            "task" => pairs.push(("train.task".into(), path(raw))),
            "init" => pairs.push(("train.init".into(), path(raw))),
            "checkpoint" => pairs.push(("checkpoint".into(), path(raw))),
            "data-dir" => pairs.push(("data.dir".into(), path(raw))),
            "before" => pairs.push(("layer_report.before".into(), path(raw))),
            "after" => pairs.push(("layer_report.after".into(), path(raw))),
            _ => pairs.push((key.to_string(), parse_value(raw))),
        }
        i += 2;
    }
    let mut doc = match &file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig { path: p.display().to_string(), message: e.to_string() })?
        }
        None => Value::Object(Default::default()),
    };
    for (k, v) in pairs {
        set_path(&mut doc, &k, v)?;
    }
    let cfg = from_value(doc)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Files written by a run, for the manifest.
pub(crate) struct Artifacts {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub(crate) fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records a file already written under the output directory.
    pub(crate) fn record(&mut self, name: &str) -> Result<()> {
        let p = self.path(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.files.push((name.to_string(), hex(&Sha256::digest(&bytes))));
        Ok(())
    }

    pub(crate) fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.record(name)
    }

    pub(crate) fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    path: &'a str,
    sha256: &'a str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_sha256: String,
    seeds: &'a config::Seeds,
    data_seed: u64,
    config: &'a RunConfig,
    artifacts: Vec<ManifestFile<'a>>,
}

fn write_manifest(command: &Command, cfg: &RunConfig, mut artifacts: Artifacts) -> Result<()> {
    artifacts.files.sort();
    let manifest = Manifest {
        tool: "tryflow",
        version: VERSION,
        subcommand: command.name(),
        config_sha256: cfg.digest(),
        seeds: &cfg.seeds,
        data_seed: cfg.data.spec.seed,
        config: cfg,
        artifacts: artifacts.files.iter().map(|(p, h)| ManifestFile { path: p, sha256: h }).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    let p = artifacts.path("manifest.json");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Written next to the artifacts when a run dies on a NaN/Inf.
#[derive(Serialize)]
struct Diagnostics<'a> {
    subcommand: &'a str,
    error: String,
    code: i32,
    context: Value,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match resolve(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code();
        }
    };
    let mut context = Value::Null;
    let result = Artifacts::new(&cfg.output).and_then(|mut artifacts| {
        commands::run(cli.command.name(), &cfg, &mut artifacts, &mut context)?;
        write_manifest(&cli.command, &cfg, artifacts)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::NumericDomain(_)) {
                let d = Diagnostics { subcommand: cli.command.name(), error: e.to_string(), code: e.code(), context };
                let p = cfg.output.join("diagnostics.json");
                match serde_json::to_string_pretty(&d) {
                    Ok(text) => {
                        if let Err(io) = std::fs::write(&p, text + "\n") {
                            eprintln!("error: could not write {}: {io}", p.display());
                        } else {
                            eprintln!("diagnostics written to {}", p.display());
                        }
                    }
                    Err(se) => eprintln!("error: {se}"),
                }
            }
            e.code()
        }
    }
}
