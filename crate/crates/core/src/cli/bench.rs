use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use qckit::autodiff::Tensor;
use qckit::index_map::{build_index_map_bucketed, OpCounter};
use qckit::kernel::{Activation, BumpParams, KernelMlp};
use qckit::quadconv::{FilterKernel, KernelScaling, QuadConvLayer};
use qckit::quadrature::{init_learned_weights, newton_cotes_weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cache_from, usage, write_text, CliResult, MeshArgs};

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Comma-separated support radii; by default 1.5, 2, 3, 4 and 6 mean spacings.
    #[arg(long, value_delimiter = ',')]
    pub alpha_sweep: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub in_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub out_channels: usize,
    /// Forward passes timed per radius.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Map cache directory (QCKIT_CACHE_DIR takes precedence).
    #[arg(long)]
    pub cache_dir: Option<String>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    if a.repeats == 0 {
        return Err(usage("--repeats must be >= 1"));
    }
    let mesh = Arc::new(a.mesh.resolve()?);
    let spacing = (mesh.bounds().1.iter().zip(&mesh.bounds().0).map(|(h, l)| h - l).product::<f64>()
        / mesh.len() as f64)
        .powf(1.0 / mesh.dim() as f64);
    let alphas = if a.alpha_sweep.is_empty() {
        [1.5, 2.0, 3.0, 4.0, 6.0].iter().map(|k| k * spacing).collect()
    } else {
        a.alpha_sweep.clone()
    };
    let cache = cache_from(a.cache_dir.as_deref());
    let weights = if mesh.is_grid() {
        newton_cotes_weights(&mesh)?
    } else {
        init_learned_weights(&mesh, 1.0)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let features = Tensor::new(
        &[a.in_channels, mesh.len()],
        (0..a.in_channels * mesh.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut csv = String::from("alpha,mean_s,pairs,kernel_evals,distance_evals,map_build_s,forward_s,cache_hit,check\n");
    println!("N = {}, D = {}, C = {} -> {}", mesh.len(), mesh.dim(), a.in_channels, a.out_channels);
    println!(
        "{:>10} {:>8} {:>10} {:>12} {:>14} {:>11} {:>10} {:>5}",
        "alpha", "mean S", "pairs", "kernel_evals", "distance_evals", "map_build_s", "forward_s", "check"
    );
    let mut all_ok = true;
    for &alpha in &alphas {
        let build_counter = OpCounter::new();
        let start = Instant::now();
        let (map, hit) = match &cache {
            Some(c) => c.get_or_build(&mesh, &mesh, alpha, &build_counter)?,
            None => (build_index_map_bucketed(&mesh, &mesh, alpha, &build_counter)?, false),
        };
        let build_s = if hit { 0.0 } else { start.elapsed().as_secs_f64() };
        let net = KernelMlp::init(mesh.dim(), &[16, 16], Activation::Tanh, a.out_channels, a.in_channels, 1)?;
        let layer = QuadConvLayer::new(
            mesh.clone(),
            mesh.clone(),
            a.in_channels,
            a.out_channels,
            BumpParams::new(alpha)?,
            FilterKernel::Mlp(net),
            weights.clone(),
            Arc::new(map),
        )?
        .with_scaling(KernelScaling::normalized(alpha, mesh.dim()));
        let counter = OpCounter::new();
        let start = Instant::now();
        let mut ok = true;
        for _ in 0..a.repeats {
            counter.reset();
            layer.forward(&features, &counter)?;
            ok &= counter.kernel_evals() == layer.map().nnz() as u64;
        }
        let fwd_s = start.elapsed().as_secs_f64() / a.repeats as f64;
        all_ok &= ok;
        let st = layer.map().stats();
        let check = if ok { "ok" } else { "FAIL" };
        println!(
            "{alpha:>10.5} {:>8.2} {:>10} {:>12} {:>14} {build_s:>11.4} {fwd_s:>10.4} {check:>5}",
            st.mean,
            st.total,
            counter.kernel_evals(),
            build_counter.distance_evals(),
        );
        let _ = writeln!(
            csv,
            "{alpha},{},{},{},{},{build_s},{fwd_s},{hit},{check}",
            st.mean,
            st.total,
            counter.kernel_evals(),
            build_counter.distance_evals()
        );
    }
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    if !all_ok {
        return Err(qckit::Error::Contract("kernel_evals differs from the number of support pairs".into()).into());
    }
    Ok(())
}
