use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ArchStyle, AutoencoderConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::cache::MapCache;
use crate::data::FieldSeries;
use crate::error::{ensure, Result};
use crate::index_map::{build_index_map_bucketed, choose_alpha, OpCounter};
use crate::kernel::{BumpParams, KernelMlp};
use crate::mesh::{random_downsample, uniform_grid, Mesh};
use crate::quadconv::{FilterKernel, KernelScaling, LayerVars, QuadConvLayer};
use crate::quadrature::{init_learned_weights, newton_cotes_weights};

/// Affine map `x W + b` on row vectors, `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            fan_in,
            fan_out,
            weight: (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv { layer: QuadConvLayer, act: bool },
    Pool { side: usize, window: usize },
    Unpool { coarse_side: usize, window: usize },
}

/// Parameters of a model placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    conv: Vec<(LayerVars, Var)>,
    dense: Vec<(Var, Var)>,
    /// Every parameter leaf, in [`Autoencoder::param_vectors`] order.
    pub params: Vec<Var>,
}

/// QuadConv autoencoder: encoder stages, a flattening affine head to the
/// latent space, and a mirrored decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    mesh: Arc<Mesh>,
    channels: usize,
    encoder: Vec<Block>,
    enc_head: Vec<Dense>,
    dec_head: Vec<Dense>,
    decoder: Vec<Block>,
    bottleneck: (usize, usize),
    counter: Arc<OpCounter>,
}

struct Builder<'a> {
    config: &'a AutoencoderConfig,
    cache: Option<&'a MapCache>,
    counter: &'a OpCounter,
    next_seed: u64,
}

impl Builder<'_> {
    fn seed(&mut self) -> u64 {
        self.next_seed = self.next_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        self.next_seed
    }

    fn conv(
        &mut self,
        input: &Arc<Mesh>,
        output: &Arc<Mesh>,
        cin: usize,
        cout: usize,
        alpha: f64,
    ) -> Result<QuadConvLayer> {
        let dim = input.dim();
        let seed = self.seed();
        let net = KernelMlp::init(
            dim,
            &self.config.kernel_hidden,
            self.config.kernel_activation,
            cout,
            cin,
            seed,
        )?;
        let weights = if input.is_grid() {
            newton_cotes_weights(input)?
        } else {
            let (lo, hi) = input.bounds();
            let vol: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
            init_learned_weights(input, vol)?
        };
        let map = match self.cache {
            Some(c) => c.get_or_build(input, output, alpha, self.counter)?.0,
            None => build_index_map_bucketed(input, output, alpha, self.counter)?,
        };
        let stats = map.stats();
        debug!(
            "quadconv {}->{} points, {cin}->{cout} channels, alpha {alpha:.4}, mean support {:.1}",
            input.len(),
            output.len(),
            stats.mean
        );
        Ok(QuadConvLayer::new(
            input.clone(),
            output.clone(),
            cin,
            cout,
            BumpParams::new(alpha)?,
            FilterKernel::Mlp(net),
            weights,
            Arc::new(map),
        )?
        .with_scaling(KernelScaling::normalized(alpha, dim))
        .with_bias())
    }

    fn head(&mut self, widths: &[usize]) -> Vec<Dense> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        widths.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect()
    }
}

impl Autoencoder {
    /// Builds the network for `channels`-channel fields on `mesh`. Index maps
    /// come from `cache` when one is given.
    pub fn build(config: &AutoencoderConfig, mesh: Arc<Mesh>, channels: usize, cache: Option<&MapCache>) -> Result<Self> {
        config.validate(&mesh)?;
        ensure!(channels >= 1, Config, "fields need at least one channel");
        let counter = Arc::new(OpCounter::new());
        let mut b = Builder {
            config,
            cache,
            counter: &counter,
            next_seed: config.init_seed,
        };
        let k = config.channels.len();
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let bottleneck;
        match config.style {
            ArchStyle::Pool => {
                let w = config.pool_window;
                let extent = match mesh.grid_shape() {
                    Some((side, h)) => h * (side - 1) as f64,
                    None => {
                        let (lo, hi) = mesh.bounds();
                        ensure!(
                            lo.iter().all(|&v| v >= 0.0),
                            Config,
                            "pool style resamples onto [0, e]^2 and needs non-negative coordinates"
                        );
                        hi.iter().cloned().fold(0.0, f64::max)
                    }
                };
                let sides: Vec<usize> = (0..=k).map(|s| config.grid_side / w.pow(s as u32)).collect();
                let grids: Vec<Arc<Mesh>> = sides
                    .iter()
                    .map(|&s| uniform_grid(2, s, extent).map(Arc::new))
                    .collect::<Result<_>>()?;
                let grid_alpha = |s: usize| config.grid_alpha * extent / (sides[s] - 1) as f64;
                // Resampling layers between the mesh and the first grid use a
                // radius picked for the requested support size.
                let (alpha_in, alpha_out) = if mesh.is_grid() {
                    (grid_alpha(0), grid_alpha(0))
                } else {
                    (
                        choose_alpha(&mesh, &grids[0], config.target_s)?,
                        choose_alpha(&grids[0], &mesh, config.target_s)?,
                    )
                };
                let mut cin = channels;
                for s in 0..k {
                    let (input, alpha) = if s == 0 { (&mesh, alpha_in) } else { (&grids[s], grid_alpha(s)) };
                    let layer = b.conv(input, &grids[s], cin, config.channels[s], alpha)?;
                    encoder.push(Block::Conv { layer, act: true });
                    encoder.push(Block::Pool { side: sides[s], window: w });
                    cin = config.channels[s];
                }
                bottleneck = (config.channels[k - 1], grids[k].len());
                for s in (0..k).rev() {
                    decoder.push(Block::Unpool {
                        coarse_side: sides[s + 1],
                        window: w,
                    });
                    let (output, cout, alpha, act) = if s == 0 {
                        (&mesh, channels, alpha_out, false)
                    } else {
                        (&grids[s], config.channels[s - 1], grid_alpha(s), true)
                    };
                    let layer = b.conv(&grids[s], output, config.channels[s], cout, alpha)?;
                    decoder.push(Block::Conv { layer, act });
                }
            }
            ArchStyle::Downsample => {
                let mut meshes = vec![mesh.clone()];
                for (s, &n) in config.stage_points.iter().enumerate() {
                    let m = random_downsample(&meshes[s], n, config.init_seed.wrapping_add(s as u64 + 1))?;
                    meshes.push(Arc::new(m));
                }
                let mut cin = channels;
                for s in 0..k {
                    let alpha = choose_alpha(&meshes[s], &meshes[s + 1], config.target_s)?;
                    let layer = b.conv(&meshes[s], &meshes[s + 1], cin, config.channels[s], alpha)?;
                    encoder.push(Block::Conv { layer, act: true });
                    cin = config.channels[s];
                }
                bottleneck = (config.channels[k - 1], meshes[k].len());
                for s in (0..k).rev() {
                    let (cout, act) = if s == 0 { (channels, false) } else { (config.channels[s - 1], true) };
                    let alpha = choose_alpha(&meshes[s + 1], &meshes[s], config.target_s)?;
                    let layer = b.conv(&meshes[s + 1], &meshes[s], config.channels[s], cout, alpha)?;
                    decoder.push(Block::Conv { layer, act });
                }
            }
        }
        let flat = bottleneck.0 * bottleneck.1;
        let mut widths = vec![flat];
        widths.extend_from_slice(&config.head_hidden);
        widths.push(config.latent_dim);
        let enc_head = b.head(&widths);
        widths.reverse();
        let dec_head = b.head(&widths);
        Ok(Autoencoder {
            config: config.clone(),
            mesh,
            channels,
            encoder,
            enc_head,
            dec_head,
            decoder,
            bottleneck,
            counter,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// `(C * N) / L`.
    pub fn compression_ratio(&self) -> f64 {
        (self.channels * self.mesh.len()) as f64 / self.config.latent_dim as f64
    }

    /// Channels and points at the bottleneck, before the latent head.
    pub fn bottleneck(&self) -> (usize, usize) {
        self.bottleneck
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    fn convs(&self) -> impl Iterator<Item = &QuadConvLayer> {
        self.encoder.iter().chain(&self.decoder).filter_map(|b| match b {
            Block::Conv { layer, .. } => Some(layer),
            _ => None,
        })
    }

    /// QuadConv layers in execution order.
    pub fn conv_layers(&self) -> Vec<&QuadConvLayer> {
        self.convs().collect()
    }

    pub fn param_vectors(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for layer in self.convs() {
            out.extend(layer.param_vectors().into_iter().map(|v| v.to_vec()));
        }
        for d in self.enc_head.iter().chain(&self.dec_head) {
            out.push(d.weight.clone());
            out.push(d.bias.clone());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_vectors().iter().map(Vec::len).sum()
    }

    pub fn set_param_vectors(&mut self, params: &[Vec<f64>]) -> Result<()> {
        let expected: Vec<usize> = self.param_vectors().iter().map(Vec::len).collect();
        ensure!(
            params.len() == expected.len() && params.iter().zip(&expected).all(|(p, &n)| p.len() == n),
            Shape,
            "parameter layout does not match the model ({} vectors expected, got {})",
            expected.len(),
            params.len()
        );
        let mut it = params.iter();
        for block in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            if let Block::Conv { layer, .. } = block {
                let n = layer.param_vectors().len();
                let chunk: Vec<Vec<f64>> = it.by_ref().take(n).cloned().collect();
                layer.set_param_vectors(&chunk)?;
            }
        }
        for d in self.enc_head.iter_mut().chain(self.dec_head.iter_mut()) {
            d.weight.clone_from(it.next().unwrap());
            d.bias.clone_from(it.next().unwrap());
        }
        Ok(())
    }

    /// Places every parameter on `tape` and records the filter matrices once,
    /// so that all samples recorded afterwards share them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let mut conv = Vec::new();
        let mut params = Vec::new();
        for layer in self.convs() {
            let vars = layer.bind(tape, trainable)?;
            params.extend([vars.theta, vars.raw, vars.bias].into_iter().flatten());
            let filters = layer.record_filters(tape, &vars, &self.counter)?;
            conv.push((vars, filters));
        }
        let mut dense = Vec::new();
        for d in self.enc_head.iter().chain(&self.dec_head) {
            let w = tape.leaf(Tensor::new(&[d.fan_in, d.fan_out], d.weight.clone())?, trainable);
            let b = tape.leaf(Tensor::new(&[d.fan_out], d.bias.clone())?, trainable);
            params.extend([w, b]);
            dense.push((w, b));
        }
        Ok(BoundModel { conv, dense, params })
    }

    fn run_blocks(&self, tape: &mut Tape, bound: &BoundModel, blocks: &[Block], conv_offset: usize, mut x: Var) -> Result<Var> {
        let mut ci = conv_offset;
        for block in blocks {
            x = match block {
                Block::Conv { layer, act } => {
                    let (vars, filters) = &bound.conv[ci];
                    ci += 1;
                    let y = layer.record_apply(tape, vars, *filters, x, &self.counter)?;
                    if *act {
                        tape.tanh(y)?
                    } else {
                        y
                    }
                }
                Block::Pool { side, window } => tape.maxpool_grid(x, 2, *side, *window)?,
                Block::Unpool { coarse_side, window } => tape.unpool_grid(x, 2, *coarse_side, *window)?,
            };
        }
        Ok(x)
    }

    fn run_head(tape: &mut Tape, layers: &[(Var, Var)], mut x: Var) -> Result<Var> {
        for (i, (w, b)) in layers.iter().enumerate() {
            x = tape.matmul(x, *w)?;
            x = tape.add_bias(x, *b)?;
            if i + 1 < layers.len() {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    fn n_enc_convs(&self) -> usize {
        self.encoder.iter().filter(|b| matches!(b, Block::Conv { .. })).count()
    }

    /// Records the encoder on a `C x N` input, giving a `1 x L` code.
    pub fn record_encode(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        ensure!(
            shape == [self.channels, self.mesh.len()],
            Shape,
            "input of shape {shape:?}, model expects [{}, {}]",
            self.channels,
            self.mesh.len()
        );
        let y = self.run_blocks(tape, bound, &self.encoder, 0, x)?;
        let flat = tape.reshape(y, &[1, self.bottleneck.0 * self.bottleneck.1])?;
        Self::run_head(tape, &bound.dense[..self.enc_head.len()], flat)
    }

    /// Records the decoder on a `1 x L` code, giving a `C x N` field.
    pub fn record_decode(&self, tape: &mut Tape, bound: &BoundModel, z: Var) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        ensure!(
            shape == [1, self.config.latent_dim],
            Shape,
            "code of shape {shape:?}, model expects [1, {}]",
            self.config.latent_dim
        );
        let h = Self::run_head(tape, &bound.dense[self.enc_head.len()..], z)?;
        let x = tape.reshape(h, &[self.bottleneck.0, self.bottleneck.1])?;
        self.run_blocks(tape, bound, &self.decoder, self.n_enc_convs(), x)
    }

    fn tape(&self) -> Tape {
        Tape::with_precision(self.config.precision)
    }

    fn check_sample(&self, sample: &[f64]) -> Result<()> {
        ensure!(
            sample.len() == self.channels * self.mesh.len(),
            Shape,
            "sample has {} values, model expects {} x {}",
            sample.len(),
            self.channels,
            self.mesh.len()
        );
        Ok(())
    }

    pub fn encode(&self, sample: &[f64]) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let mut tape = self.tape();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::new(&[self.channels, self.mesh.len()], sample.to_vec())?);
        let z = self.record_encode(&mut tape, &bound, x)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn decode(&self, code: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            code.len() == self.config.latent_dim,
            Shape,
            "code has {} values, model expects {}",
            code.len(),
            self.config.latent_dim
        );
        ensure!(code.iter().all(|v| v.is_finite()), Contract, "latent code is not finite");
        let mut tape = self.tape();
        let bound = self.bind(&mut tape, false)?;
        let z = tape.constant(Tensor::new(&[1, code.len()], code.to_vec())?);
        let y = self.record_decode(&mut tape, &bound, z)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn reconstruct(&self, sample: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(sample)?)
    }

    /// Codes of every sample, encoded in parallel.
    pub fn encode_series(&self, series: &FieldSeries) -> Result<Vec<Vec<f64>>> {
        self.check_series(series)?;
        self.par_chunks(series.samples(), |tape, bound, t| {
            let x = tape.constant(Tensor::new(&[self.channels, self.mesh.len()], series.sample(t).to_vec())?);
            let z = self.record_encode(tape, bound, x)?;
            Ok(tape.value(z).data().to_vec())
        })
    }

    pub fn decode_series(&self, codes: &[Vec<f64>], dt: f64) -> Result<FieldSeries> {
        let out = self.par_chunks(codes.len(), |tape, bound, t| {
            ensure!(
                codes[t].len() == self.config.latent_dim,
                Shape,
                "code {t} has {} values, model expects {}",
                codes[t].len(),
                self.config.latent_dim
            );
            let z = tape.constant(Tensor::new(&[1, codes[t].len()], codes[t].clone())?);
            let y = self.record_decode(tape, bound, z)?;
            Ok(tape.value(y).data().to_vec())
        })?;
        FieldSeries::from_samples(self.channels, self.mesh.len(), dt, out)
    }

    /// Encodes and decodes every sample.
    pub fn reconstruct_series(&self, series: &FieldSeries) -> Result<FieldSeries> {
        let out = self.reconstruct_samples(series)?;
        FieldSeries::from_samples(self.channels, self.mesh.len(), series.dt(), out)
    }

    /// Reconstructions as flat vectors, without the finiteness check a
    /// [`FieldSeries`] applies.
    pub fn reconstruct_samples(&self, series: &FieldSeries) -> Result<Vec<Vec<f64>>> {
        self.check_series(series)?;
        self.par_chunks(series.samples(), |tape, bound, t| {
            let x = tape.constant(Tensor::new(&[self.channels, self.mesh.len()], series.sample(t).to_vec())?);
            let z = self.record_encode(tape, bound, x)?;
            let y = self.record_decode(tape, bound, z)?;
            Ok(tape.value(y).data().to_vec())
        })
    }

    fn check_series(&self, series: &FieldSeries) -> Result<()> {
        series.check_mesh(&self.mesh)?;
        ensure!(
            series.channels() == self.channels,
            Shape,
            "series has {} channels, model expects {}",
            series.channels(),
            self.channels
        );
        Ok(())
    }

    /// Runs `f` for items `0..n`, several items per tape, chunks in parallel.
    /// Results come back in item order.
    fn par_chunks<T: Send>(
        &self,
        n: usize,
        f: impl Fn(&mut Tape, &BoundModel, usize) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        const CHUNK: usize = 8;
        let chunks: Vec<Vec<T>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut tape = self.tape();
                let bound = self.bind(&mut tape, false)?;
                (c * CHUNK..((c + 1) * CHUNK).min(n))
                    .map(|t| f(&mut tape, &bound, t))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}
