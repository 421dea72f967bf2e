//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O, format or numerical failure, 2 usage or
//! configuration error, 3 training diverged (the last good checkpoint is
//! written before exiting).

mod bench;
mod data;
mod model;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qckit::cache::MapCache;
use qckit::mesh::{nonuniform_mesh, uniform_grid, Density, Mesh};
use qckit::Error;

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    error: Error,
    /// Extra context printed after the error itself.
    note: Option<String>,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self.error {
            Error::Training(_) => EXIT_DIVERGED,
            Error::Config(_) | Error::UnsupportedMesh(_) => EXIT_USAGE,
            _ => EXIT_IO,
        }
    }

    fn with_note(error: Error, note: String) -> Self {
        CliError { error, note: Some(note) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)?;
        if let Some(n) = &self.note {
            write!(f, "\n{n}")?;
        }
        Ok(())
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError { error, note: None }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    Error::Config(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "qckit", version, about = "Quadrature convolutions and autoencoders on point-cloud meshes")]
pub struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Debug-level logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: DIR/mesh.qcmesh and DIR/series.qcser.
    GenData(data::GenDataArgs),
    /// Build (or load) the index map between two meshes.
    BuildCache(data::BuildCacheArgs),
    /// Train an autoencoder.
    Train(model::TrainArgs),
    /// Report reconstruction errors of a checkpoint on a dataset.
    Eval(model::EvalArgs),
    /// Encode a series into latent codes.
    Compress(model::CodecArgs),
    /// Decode latent codes into a series.
    Decompress(model::CodecArgs),
    /// 1-D low-pass filter comparison on uniform or non-uniform samples.
    LowpassDemo(data::LowpassArgs),
    /// Operation counts and timings of a QuadConv layer over a radius sweep.
    Bench(bench::BenchArgs),
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => data::gen_data(a),
        Command::BuildCache(a) => data::build_cache(a),
        Command::Train(a) => model::train(a),
        Command::Eval(a) => model::eval(a),
        Command::Compress(a) => model::compress(a),
        Command::Decompress(a) => model::decompress(a),
        Command::LowpassDemo(a) => data::lowpass(a),
        Command::Bench(a) => bench::bench(a),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DensityArg {
    Uniform,
    Bump,
}

/// One of: a mesh file, a square grid, or random points.
#[derive(Debug, Clone, Args)]
pub struct MeshArgs {
    /// Existing mesh file.
    #[arg(long, conflicts_with_all = ["grid", "points"])]
    pub mesh: Option<PathBuf>,
    /// Side of a uniform 2-D grid on the unit square.
    #[arg(long, conflicts_with = "points")]
    pub grid: Option<usize>,
    /// Number of random points on the unit square.
    #[arg(long)]
    pub points: Option<usize>,
    /// Point density for --points.
    #[arg(long, value_enum, default_value = "uniform")]
    pub density: DensityArg,
    /// Seed for --points.
    #[arg(long, default_value_t = 0)]
    pub mesh_seed: u64,
}

impl MeshArgs {
    pub fn is_given(&self) -> bool {
        self.mesh.is_some() || self.grid.is_some() || self.points.is_some()
    }

    pub fn resolve(&self) -> CliResult<Mesh> {
        if let Some(p) = &self.mesh {
            return Ok(Mesh::load(p)?);
        }
        if let Some(side) = self.grid {
            return Ok(uniform_grid(2, side, 1.0)?);
        }
        if let Some(n) = self.points {
            let density = match self.density {
                DensityArg::Uniform => Density::Uniform,
                DensityArg::Bump => Density::GaussianBump {
                    center: [0.5, 0.5],
                    width: 0.25,
                    peak: 3.0,
                },
            };
            return Ok(nonuniform_mesh(n, density, self.mesh_seed)?);
        }
        Err(usage("give one of --mesh, --grid or --points"))
    }

    pub fn describe(&self) -> String {
        if let Some(p) = &self.mesh {
            format!("file {}", p.display())
        } else if let Some(s) = self.grid {
            format!("grid {s}x{s}")
        } else if let Some(n) = self.points {
            format!("{n} points, density {:?}, seed {}", self.density, self.mesh_seed).to_lowercase()
        } else {
            "none".into()
        }
    }
}

/// `QCKIT_CACHE_DIR` wins over the given directory.
pub fn cache_from(dir: Option<&str>) -> Option<MapCache> {
    MapCache::from_env().or_else(|| dir.map(MapCache::new))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::with_note(Error::Io(e), format!("while writing {}", path.display())))
}
