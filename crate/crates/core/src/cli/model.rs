use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use log::info;
use qckit::cache::MapCache;
use qckit::compression::{
    max_error, relative_error, split_dataset, Autoencoder, AutoencoderConfig, Checkpoint, LatentSeries, PodBasis,
    StopReason, Trainer,
};
use qckit::config::RunConfig;
use qckit::data::FieldSeries;
use qckit::mesh::Mesh;
use qckit::Error;

use super::{cache_from, ensure_dir, usage, write_text, CliError, CliResult};

fn load_dataset(dir: &Path) -> CliResult<(Mesh, FieldSeries)> {
    let mesh = Mesh::load(dir.join("mesh.qcmesh"))?;
    let series = FieldSeries::load(dir.join("series.qcser"))?;
    series.check_mesh(&mesh)?;
    Ok((mesh, series))
}

fn parse_overrides(sets: &[String]) -> CliResult<RunConfig> {
    let mut r = RunConfig::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got {s:?}")))?;
        r.set(k.trim(), v.trim())?;
    }
    Ok(r)
}

fn cache_for(run: &RunConfig) -> Option<MapCache> {
    cache_from(run.get("mesh.cache_dir"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding mesh.qcmesh and series.qcser.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Continue from a checkpoint; its configuration is used, with --set applied on top.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let (mesh, series) = load_dataset(&a.data)?;
    let overrides = parse_overrides(&a.sets)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let base = match (&resume, &a.config) {
        (Some(c), _) => RunConfig::parse(&c.config_text)?,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::new(),
    };
    let run = base.merged(&overrides);
    let cfg = AutoencoderConfig::from_run(&run, &mesh)?;
    let cache = cache_for(&run);
    let mesh = Arc::new(mesh);
    let mut model = Autoencoder::build(&cfg, mesh.clone(), series.channels(), cache.as_ref())?;
    let mut trainer = match resume {
        Some(c) => {
            if c.mesh != *mesh || c.channels != series.channels() {
                return Err(Error::Contract("checkpoint was trained on a different mesh or channel count".into()).into());
            }
            model.set_param_vectors(&c.params)?;
            match c.optimizer {
                Some(mut opt) => {
                    opt.lr = cfg.lr;
                    Trainer::resume(model, opt, c.step as usize, series.samples())?
                }
                None => Trainer::new(model, series.samples())?,
            }
        }
        None => Trainer::new(model, series.samples())?,
    };
    ensure_dir(&a.out)?;
    let mut resolved = cfg.to_run();
    if let Some(c) = &cache {
        resolved.set("mesh.cache_dir", c.dir().display())?;
    }
    write_text(&a.out.join("config.txt"), &resolved.to_text())?;
    info!(
        "model: {} parameters, latent {}, compression ratio {:.2}",
        trainer.model().param_count(),
        cfg.latent_dim,
        trainer.model().compression_ratio()
    );
    let ckpt_path = a.out.join("checkpoint.qcckpt");
    let mut log = BufWriter::new(File::create(a.out.join("metrics.csv"))?);
    let result = trainer.run(&series, Some(&mut log));
    drop(log);
    let ckpt = Checkpoint::from_model(trainer.model(), Some(trainer.optimizer()), trainer.step_count() as u64);
    ckpt.save(&ckpt_path)?;
    match result {
        Ok(o) => {
            let e = &o.final_eval;
            println!(
                "stopped after {} steps ({}) in {:.1} s",
                o.steps,
                match o.stop {
                    StopReason::MaxSteps => "step budget",
                    StopReason::TargetReached => "targets reached",
                },
                o.seconds
            );
            println!("relative_error = {:.6}", e.all.rel_err);
            println!("max_error = {:.6}", e.all.max_err);
            println!("test relative_error = {:.6}", e.test.rel_err);
            println!("wrote {}", ckpt_path.display());
            Ok(())
        }
        Err(e @ Error::Training(_)) => Err(CliError::with_note(
            e,
            format!(
                "last good state (step {}) saved to {}",
                trainer.step_count(),
                ckpt_path.display()
            ),
        )),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding mesh.qcmesh and series.qcser.
    #[arg(long)]
    pub data: PathBuf,
    /// Also report a POD baseline of rank L fitted on the training split.
    #[arg(long)]
    pub pod: bool,
}

fn load_model(path: &Path) -> CliResult<Autoencoder> {
    let ckpt = Checkpoint::load(path)?;
    let run = RunConfig::parse(&ckpt.config_text)?;
    Ok(ckpt.to_model(cache_for(&run).as_ref())?)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let (_, series) = load_dataset(&a.data)?;
    let recon = model.reconstruct_series(&series)?;
    println!("relative_error = {:.6}", relative_error(&recon, &series)?);
    println!("max_error = {:.6}", max_error(&recon, &series)?);
    println!("compression_ratio = {}", model.compression_ratio());
    if a.pod {
        let cfg = model.config();
        let (train, _) = split_dataset(series.samples(), cfg.split, cfg.split_seed)?;
        let pod = PodBasis::fit(&series, &train, cfg.latent_dim)?;
        let proj = pod.project_series(&series)?;
        println!("pod_rank = {}", pod.rank());
        println!("pod_relative_error = {:.6}", relative_error(&proj, &series)?);
        println!("pod_max_error = {:.6}", max_error(&proj, &series)?);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn compress(a: CodecArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let series = FieldSeries::load(&a.input)?;
    let codes = model.encode_series(&series)?;
    let latent = LatentSeries::new(model.latent_dim(), series.dt(), codes)?;
    latent.save(&a.out)?;
    println!(
        "encoded {} samples to L = {} (ratio {})",
        latent.len(),
        latent.dim(),
        model.compression_ratio()
    );
    Ok(())
}

pub fn decompress(a: CodecArgs) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let latent = LatentSeries::load(&a.input)?;
    if latent.dim() != model.latent_dim() {
        return Err(Error::Shape(format!(
            "codes have L = {}, checkpoint expects {}",
            latent.dim(),
            model.latent_dim()
        ))
        .into());
    }
    let series = model.decode_series(latent.codes(), latent.dt())?;
    series.save(&a.out)?;
    println!(
        "decoded T = {}, C = {}, N = {}",
        series.samples(),
        series.channels(),
        series.points()
    );
    Ok(())
}
