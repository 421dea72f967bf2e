use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use qckit::data::{gen_lowpass_signals, gen_pulse2d, gen_wake2d, lowpass_demo, FieldSeries, PulseParams, Sampling, WakeParams};
use qckit::index_map::{build_index_map_bucketed, choose_alpha, OpCounter};
use qckit::mesh::Mesh;

use super::{cache_from, ensure_dir, usage, write_text, CliResult, MeshArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Pulse2d,
    Wake2d,
    Lowpass,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplingArg {
    Uniform,
    Nonuniform,
}

impl SamplingArg {
    fn resolve(self, seed: u64) -> Sampling {
        match self {
            SamplingArg::Uniform => Sampling::Uniform,
            SamplingArg::Nonuniform => Sampling::Nonuniform { seed },
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Number of time samples.
    #[arg(long = "T", default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pulse ramp-up time (pulse2d).
    #[arg(long)]
    pub onset: Option<f64>,
    /// Pulse width (pulse2d).
    #[arg(long)]
    pub width: Option<f64>,
    /// Travelling-wave modes (wake2d).
    #[arg(long)]
    pub modes: Option<usize>,
    /// Sample count (lowpass).
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "nonuniform")]
    pub sampling: SamplingArg,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut resolved = vec![
        format!("kind = {:?}", a.kind).to_lowercase(),
        format!("seed = {}", a.seed),
    ];
    let (mesh, series) = match a.kind {
        Kind::Lowpass => {
            let sig = gen_lowpass_signals(a.n, a.sampling.resolve(a.seed))?;
            resolved.push(format!("n = {}", a.n));
            resolved.push(format!("sampling = {:?}", a.sampling).to_lowercase());
            let mesh = Mesh::from_points(1, sig.x)?;
            let series = FieldSeries::new(1, 1, mesh.len(), 1.0, sig.f)?;
            (mesh, series)
        }
        Kind::Pulse2d | Kind::Wake2d => {
            if !a.mesh.is_given() {
                return Err(usage("pulse2d and wake2d need --mesh, --grid or --points"));
            }
            let mesh = a.mesh.resolve()?;
            resolved.push(format!("mesh = {}", a.mesh.describe()));
            resolved.push(format!("T = {}", a.samples));
            let series = if a.kind == Kind::Pulse2d {
                let mut p = PulseParams::default();
                if let Some(o) = a.onset {
                    p.onset = o;
                }
                if let Some(w) = a.width {
                    p.width = w;
                }
                resolved.push(format!("onset = {}", p.onset));
                resolved.push(format!("width = {}", p.width));
                gen_pulse2d(&mesh, a.samples, &p, a.seed)?
            } else {
                let mut p = WakeParams::default();
                if let Some(m) = a.modes {
                    p.modes = m;
                }
                resolved.push(format!("modes = {}", p.modes));
                gen_wake2d(&mesh, a.samples, &p, a.seed)?
            };
            (mesh, series)
        }
    };
    ensure_dir(&a.out)?;
    mesh.save(a.out.join("mesh.qcmesh"))?;
    series.save(a.out.join("series.qcser"))?;
    write_text(&a.out.join("gen.txt"), &(resolved.join("\n") + "\n"))?;
    let (lo, hi) = series.value_range();
    println!(
        "T = {}, C = {}, N = {}, dt = {}, values in [{lo:.6}, {hi:.6}]",
        series.samples(),
        series.channels(),
        series.points(),
        series.dt()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildCacheArgs {
    #[arg(long)]
    pub mesh_in: PathBuf,
    /// Defaults to the input mesh.
    #[arg(long)]
    pub mesh_out: Option<PathBuf>,
    #[arg(long, conflicts_with = "target_s", required_unless_present = "target_s")]
    pub alpha: Option<f64>,
    /// Pick the radius for this mean support size.
    #[arg(long)]
    pub target_s: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Map cache directory (QCKIT_CACHE_DIR takes precedence).
    #[arg(long)]
    pub cache_dir: Option<String>,
}

pub fn build_cache(a: BuildCacheArgs) -> CliResult<()> {
    let input = Mesh::load(&a.mesh_in)?;
    let output = match &a.mesh_out {
        Some(p) => Mesh::load(p)?,
        None => input.clone(),
    };
    let alpha = match (a.alpha, a.target_s) {
        (Some(al), _) => al,
        (None, Some(s)) => choose_alpha(&input, &output, s)?,
        (None, None) => return Err(usage("give --alpha or --target-s")),
    };
    let counter = OpCounter::new();
    let start = Instant::now();
    let (map, hit) = match cache_from(a.cache_dir.as_deref()) {
        Some(c) => c.get_or_build(&input, &output, alpha, &counter)?,
        None => (build_index_map_bucketed(&input, &output, alpha, &counter)?, false),
    };
    let secs = if hit { 0.0 } else { start.elapsed().as_secs_f64() };
    map.save(&a.out)?;
    let st = map.stats();
    println!("alpha = {alpha:.6}");
    println!(
        "pairs = {}, mean S = {:.3}, max S = {}, empty rows = {}",
        st.total, st.mean, st.max, st.empty
    );
    println!("distance_evals = {}", counter.distance_evals());
    println!("build time = {secs:.3} s{}", if hit { " (cache hit)" } else { "" });
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct LowpassArgs {
    #[arg(long, default_value_t = 128)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "nonuniform")]
    pub sampling: SamplingArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output points.
    #[arg(long, default_value_t = 101)]
    pub n_out: usize,
    /// Outputs span [-window, window].
    #[arg(long, default_value_t = 0.5)]
    pub window: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn lowpass(a: LowpassArgs) -> CliResult<()> {
    let demo = lowpass_demo(a.n, a.sampling.resolve(a.seed), a.n_out, a.window)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&a.out, &demo.to_csv())?;
    let [naive, ck, quad] = demo.max_errors();
    println!("max abs error vs analytic:");
    println!("  naive_discrete    {naive:.6e}");
    println!("  continuous_kernel {ck:.6e}");
    println!("  quadconv          {quad:.6e}");
    Ok(())
}
