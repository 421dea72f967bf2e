use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FieldSeries;
use crate::error::{ensure, Result};

fn check_pair(recon: &FieldSeries, truth: &FieldSeries) -> Result<()> {
    ensure!(
        recon.samples() == truth.samples()
            && recon.channels() == truth.channels()
            && recon.points() == truth.points(),
        Shape,
        "series shapes differ: {}x{}x{} vs {}x{}x{}",
        recon.samples(),
        recon.channels(),
        recon.points(),
        truth.samples(),
        truth.channels(),
        truth.points()
    );
    ensure!(truth.samples() >= 1, Metric, "metrics need at least one sample");
    Ok(())
}

/// `|recon - truth|_HS / |truth|_HS` for one flat sample.
pub fn sample_relative_error(recon: &[f64], truth: &[f64]) -> Result<f64> {
    ensure!(recon.len() == truth.len(), Shape, "sample sizes differ");
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(norm > 0.0, Metric, "relative error undefined for a zero-norm sample");
    let diff = recon.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// Per-sample relative Hilbert-Schmidt errors.
pub fn per_sample_errors(recon: &FieldSeries, truth: &FieldSeries) -> Result<Vec<f64>> {
    check_pair(recon, truth)?;
    (0..truth.samples())
        .map(|t| sample_relative_error(recon.sample(t), truth.sample(t)))
        .collect()
}

/// Time-averaged relative Hilbert-Schmidt error.
pub fn relative_error(recon: &FieldSeries, truth: &FieldSeries) -> Result<f64> {
    let e = per_sample_errors(recon, truth)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Largest per-sample relative error.
pub fn max_error(recon: &FieldSeries, truth: &FieldSeries) -> Result<f64> {
    let e = per_sample_errors(recon, truth)?;
    Ok(e.into_iter().fold(0.0, f64::max))
}

/// Seeded random split of `0..samples` into `ceil(fraction T)` training and the
/// remaining test indices, each sorted.
pub fn split_dataset(samples: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(samples >= 5, Contract, "a train/test split needs at least 5 samples, got {samples}");
    ensure!(
        fraction > 0.0 && fraction < 1.0,
        Config,
        "split fraction {fraction} not in (0, 1)"
    );
    // The small offset keeps products like 0.8 * 15 = 12.000000000000002 from rounding up.
    let n_train = ((fraction * samples as f64 - 1e-9).ceil() as usize).clamp(1, samples - 1);
    let mut idx: Vec<usize> = (0..samples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
