use std::sync::Arc;

use nalgebra::DMatrix;
use qckit::compression::*;
use qckit::config::RunConfig;
use qckit::data::{gen_pulse2d, FieldSeries, PulseParams};
use qckit::mesh::{nonuniform_mesh, uniform_grid, Density, Mesh};
use qckit::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mesh: &Mesh, pairs: &[(&str, &str)]) -> AutoencoderConfig {
    let mut run = RunConfig::new();
    for (k, v) in pairs {
        run.set(k, v).unwrap();
    }
    AutoencoderConfig::from_run(&run, mesh).unwrap()
}

fn pulse(mesh: &Mesh, t: usize) -> FieldSeries {
    let p = PulseParams {
        onset: 0.0,
        ..PulseParams::default()
    };
    gen_pulse2d(mesh, t, &p, 3).unwrap()
}

#[test]
fn compression_ratios() {
    let g = uniform_grid(2, 10, 1.0).unwrap();
    let cfg = config(&g, &[("model.channels", "4"), ("model.latent_dim", "10")]);
    let m = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    assert_eq!(m.compression_ratio(), 10.0);

    let g = uniform_grid(2, 50, 1.0).unwrap();
    let cfg = config(&g, &[("model.channels", "2"), ("model.latent_dim", "50")]);
    let m = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    assert_eq!(m.compression_ratio(), 50.0);
}

#[test]
fn no_bottleneck_is_accepted() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let cfg = config(&g, &[("model.channels", "2"), ("model.latent_dim", "64")]);
    let m = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    assert_eq!(m.compression_ratio(), 1.0);
    let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
    assert_eq!(m.reconstruct(&x).unwrap().len(), 64);
}

#[test]
fn downsample_stages_chain() {
    let mesh = nonuniform_mesh(320, Density::Uniform, 2).unwrap();
    let cfg = config(
        &mesh,
        &[("model.style", "downsample"), ("model.channels", "3,5"), ("model.target_s", "8")],
    );
    assert_eq!(cfg.stage_points, vec![80, 20]);
    let m = Autoencoder::build(&cfg, Arc::new(mesh), 2, None).unwrap();
    let layers = m.conv_layers();
    let sizes: Vec<(usize, usize)> = layers.iter().map(|l| (l.input_mesh().len(), l.output_mesh().len())).collect();
    assert_eq!(sizes, vec![(320, 80), (80, 20), (20, 80), (80, 320)]);
    let chans: Vec<(usize, usize)> = layers.iter().map(|l| (l.in_channels(), l.out_channels())).collect();
    assert_eq!(chans, vec![(2, 3), (3, 5), (5, 3), (3, 2)]);
    assert_eq!(m.bottleneck(), (5, 20));
}

#[test]
fn pool_style_on_scattered_mesh_resamples_through_a_grid() {
    let mesh = nonuniform_mesh(300, Density::Uniform, 5).unwrap();
    let cfg = config(
        &mesh,
        &[("model.channels", "3"), ("model.grid_side", "8"), ("model.target_s", "10")],
    );
    let m = Autoencoder::build(&cfg, Arc::new(mesh), 1, None).unwrap();
    let layers = m.conv_layers();
    assert_eq!(layers[0].input_mesh().len(), 300);
    assert_eq!(layers[0].output_mesh().len(), 64);
    assert_eq!(layers.last().unwrap().output_mesh().len(), 300);
    assert_eq!(m.bottleneck(), (3, 16));
}

#[test]
fn encode_is_deterministic_and_checks_shapes() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let cfg = config(&g, &[("model.channels", "3"), ("model.latent_dim", "5")]);
    let m = Autoencoder::build(&cfg, Arc::new(g.clone()), 2, None).unwrap();
    let s = pulse(&g, 6);
    let x: Vec<f64> = s.sample(2).iter().chain(s.sample(3)).copied().collect();
    let a = m.encode(&x).unwrap();
    assert_eq!(a, m.encode(&x).unwrap());
    assert_eq!(a.len(), 5);
    assert_eq!(m.decode(&a).unwrap().len(), 128);
    assert!(matches!(m.encode(&x[..64]), Err(Error::Shape(_))));
    assert!(matches!(m.decode(&a[..4]), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_reproduces_outputs_bitwise() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let s = pulse(&g, 10);
    let cfg = config(
        &g,
        &[("model.channels", "3"), ("model.latent_dim", "4"), ("train.max_steps", "5"), ("train.lr", "0.01")],
    );
    let model = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let mut tr = Trainer::new(model, 10).unwrap();
    tr.run(&s, None).unwrap();
    let ck = Checkpoint::from_model(tr.model(), Some(tr.optimizer()), tr.step_count() as u64);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let reloaded = back.to_model(None).unwrap();
    let a = tr.model().reconstruct_series(&s).unwrap();
    let b = reloaded.reconstruct_series(&s).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.optimizer.as_ref().unwrap().step_count(), 5);
}

#[test]
fn checkpoint_sections() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let cfg = config(&g, &[("model.channels", "2"), ("model.latent_dim", "3")]);
    let m = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let ck = Checkpoint::from_model(&m, None, 0);
    let mut bytes = ck.to_bytes();
    // An unknown trailing section is skipped.
    bytes.extend(99u32.to_le_bytes());
    bytes.extend(3u64.to_le_bytes());
    bytes.extend([1, 2, 3]);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    // Truncation and a wrong magic are format errors.
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    // Header only: every required section is missing.
    assert!(matches!(Checkpoint::from_bytes(&bytes[..12]), Err(Error::Format(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let s = pulse(&g, 10);
    let cfg = config(
        &g,
        &[("model.channels", "2"), ("model.latent_dim", "3"), ("train.lr", "0"), ("train.max_steps", "4"), ("train.eval_every", "1")],
    );
    let model = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let before = model.param_vectors();
    let mut tr = Trainer::new(model, 10).unwrap();
    let out = tr.run(&s, None).unwrap();
    assert_eq!(tr.model().param_vectors(), before);
    let losses: Vec<f64> = out.evaluations.iter().map(|e| e.train.loss).collect();
    assert!(losses.iter().all(|&l| l == losses[0]));
}

#[test]
fn training_is_deterministic_and_logs_csv() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let s = pulse(&g, 10);
    let cfg = config(
        &g,
        &[("model.channels", "2"), ("model.latent_dim", "3"), ("train.max_steps", "6"), ("train.batch_size", "3"), ("train.lr", "0.01")],
    );
    let run = || {
        let model = Autoencoder::build(&cfg, Arc::new(g.clone()), 1, None).unwrap();
        let mut tr = Trainer::new(model, 10).unwrap();
        let mut log = Vec::new();
        tr.run(&s, Some(&mut log)).unwrap();
        (tr.model().param_vectors(), String::from_utf8(log).unwrap())
    };
    let (p1, log1) = run();
    let (p2, log2) = run();
    assert_eq!(p1, p2);
    assert_eq!(log1, log2);
    let lines: Vec<&str> = log1.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    // Evaluations at step 0 and after each epoch of ceil(8 / 3) = 3 steps.
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines[1].starts_with("0,train,"));
    assert!(lines[9].starts_with("6,all,"));
}

#[test]
fn non_finite_loss_keeps_last_good_state() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let s = pulse(&g, 10);
    let cfg = config(&g, &[("model.channels", "2"), ("model.latent_dim", "3")]);
    let mut model = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let mut params = model.param_vectors();
    let n = params.len();
    // Decoder head weights so large that the reconstruction overflows.
    params[n - 2 * cfg.channels.len() - 2].iter_mut().for_each(|w| *w = 1e300);
    model.set_param_vectors(&params).unwrap();
    let mut tr = Trainer::new(model, 10).unwrap();
    let err = tr.step(&s).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
    assert_eq!(tr.step_count(), 0);
    assert_eq!(tr.optimizer().step_count(), 0);
    assert_eq!(tr.model().param_vectors(), params);
}

#[test]
fn training_loss_moving_average_decreases() {
    let g = uniform_grid(2, 16, 1.0).unwrap();
    let s = pulse(&g, 20);
    let cfg = config(
        &g,
        &[
            ("model.channels", "4"),
            ("model.latent_dim", "4"),
            ("train.batch_size", "16"),
            ("train.max_steps", "60"),
            ("train.lr", "0.002"),
        ],
    );
    let model = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let mut tr = Trainer::new(model, 20).unwrap();
    let out = tr.run(&s, None).unwrap();
    let avg: Vec<f64> = out.batch_losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] <= w[0], "moving average rose: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn overfits_one_sample_without_bottleneck() {
    let g = uniform_grid(2, 8, 1.0).unwrap();
    let one = pulse(&g, 12).sample(5).to_vec();
    let s = FieldSeries::from_samples(1, 64, 0.1, vec![one; 5]).unwrap();
    let cfg = config(
        &g,
        &[
            ("model.channels", "4"),
            ("model.latent_dim", "64"),
            ("model.grid_alpha", "2.5"),
            ("model.kernel_hidden", "32,32"),
            ("train.lambda", "0"),
            ("train.batch_size", "1"),
            ("train.lr", "0.0002"),
            ("train.max_steps", "40000"),
            ("train.eval_every", "500"),
            ("train.target_rel", "0.001"),
        ],
    );
    let model = Autoencoder::build(&cfg, Arc::new(g), 1, None).unwrap();
    let mut tr = Trainer::new(model, 5).unwrap();
    let out = tr.run(&s, None).unwrap();
    println!("overfit: {} steps, rel {:.3e}", out.steps, out.final_eval.all.rel_err);
    assert!(out.final_eval.all.rel_err < 1e-3);
}

#[test]
fn sobolev_term_matches_hand_computed_slopes() {
    let g = uniform_grid(2, 9, 1.0).unwrap();
    let (a, b) = (0.7, -1.3);
    let truth = vec![2.0; g.len()];
    let recon: Vec<f64> = g.iter().map(|p| 2.0 + a * p[0] + b * p[1]).collect();
    // Independent evaluation: a linear ramp has exact slopes (a, b) under any
    // consistent difference stencil, so the mean over both components is (a^2 + b^2) / 2.
    let expected_r = (a * a + b * b) / 2.0;
    let hs: f64 = recon.iter().zip(&truth).map(|(r, t)| (r - t) * (r - t)).sum();
    let spec = LossSpec::new(&g, 1.0).unwrap();
    let total = spec.value(&recon, &truth).unwrap();
    assert!((sobolev_penalty(&g, &recon, &truth).unwrap() - expected_r).abs() < 1e-12);
    assert!((total - hs - expected_r).abs() < 1e-12);
    assert_eq!(LossSpec::new(&g, 0.0).unwrap().value(&recon, &truth).unwrap(), hs);
}

#[test]
fn pod_tail_energy_and_full_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let (m, n) = (rng.gen_range(5..30), rng.gen_range(3..12));
        let x = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let r = rng.gen_range(1..=m.min(n));
        let pod = PodBasis::from_snapshots(x.clone(), r).unwrap();
        let res = pod.residual_sq(&x);
        let tail = pod.tail_energy();
        assert!((res - tail).abs() <= 1e-10 * tail.max(1e-300) || (res - tail).abs() < 1e-24);
    }
    let low: Vec<Vec<f64>> = (0..8)
        .map(|t| (0..40).map(|i| ((i as f64) * 0.2).sin() * t as f64 + ((i as f64) * 0.05).cos() * (t as f64).sqrt() + 0.1).collect())
        .collect();
    let s = FieldSeries::from_samples(1, 40, 1.0, low).unwrap();
    let pod = PodBasis::fit(&s, &(0..8).collect::<Vec<_>>(), 3).unwrap();
    assert!(pod.error(&s).unwrap() <= 1e-8);
}
