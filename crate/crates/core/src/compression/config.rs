use crate::autodiff::Precision;
use crate::config::{join_list, RunConfig};
use crate::error::{ensure, Error, Result};
use crate::kernel::Activation;
use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchStyle {
    /// QuadConv + max-pool stages on uniform grids; scattered inputs are
    /// resampled onto a grid by the first layer and back by the last.
    Pool,
    /// QuadConv stages that map onto successively smaller random subsets of
    /// the input points.
    Downsample,
}

impl ArchStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(ArchStyle::Pool),
            "downsample" => Ok(ArchStyle::Downsample),
            _ => Err(Error::Config(format!("unknown model style {s:?} (pool | downsample)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchStyle::Pool => "pool",
            ArchStyle::Downsample => "downsample",
        }
    }
}

/// Fully resolved autoencoder and training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub style: ArchStyle,
    /// Output channels of each QuadConv stage, outermost first.
    pub channels: Vec<usize>,
    pub pool_window: usize,
    pub grid_side: usize,
    pub stage_points: Vec<usize>,
    pub target_s: usize,
    /// Support radius on grids in units of the grid spacing.
    pub grid_alpha: f64,
    pub latent_dim: usize,
    pub head_hidden: Vec<usize>,
    pub kernel_hidden: Vec<usize>,
    pub kernel_activation: Activation,
    pub precision: Precision,
    pub init_seed: u64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub target_rel: Option<f64>,
    pub target_max: Option<f64>,
    pub split: f64,
    pub split_seed: u64,
}

impl AutoencoderConfig {
    /// Reads the `model.*`, `train.*` and `data.*` keys of `run`, filling in
    /// defaults that depend on `mesh` and validating that the stages chain.
    pub fn from_run(run: &RunConfig, mesh: &Mesh) -> Result<Self> {
        let style = match run.get("model.style") {
            Some(s) => ArchStyle::parse(s)?,
            None => ArchStyle::Pool,
        };
        let channels = run.get_list("model.channels")?.unwrap_or_else(|| vec![8, 16]);
        let pool_window = run.get_parsed("model.pool_window")?.unwrap_or(2);
        let grid_side = match run.get_parsed("model.grid_side")? {
            Some(s) => s,
            None => match mesh.grid_shape() {
                Some((side, _)) if mesh.dim() == 2 => side,
                _ => 32,
            },
        };
        let stage_points = match run.get_list("model.stage_points")? {
            Some(p) => p,
            None => {
                let mut n = mesh.len();
                channels
                    .iter()
                    .map(|_| {
                        n = (n / 4).max(1);
                        n
                    })
                    .collect()
            }
        };
        let scattered_output = !mesh.is_grid() || style == ArchStyle::Downsample;
        let lambda = match run.get_parsed::<f64>("train.lambda")? {
            Some(l) => l,
            None if scattered_output => 0.0,
            None => 0.1,
        };
        let cfg = AutoencoderConfig {
            style,
            channels,
            pool_window,
            grid_side,
            stage_points,
            target_s: run.get_parsed("model.target_s")?.unwrap_or(16),
            grid_alpha: run.get_parsed("model.grid_alpha")?.unwrap_or(1.5),
            latent_dim: run.get_parsed("model.latent_dim")?.unwrap_or(16),
            head_hidden: run.get_list("model.head_hidden")?.unwrap_or_default(),
            kernel_hidden: run.get_list("model.kernel_hidden")?.unwrap_or_else(|| vec![16, 16]),
            kernel_activation: match run.get("model.kernel_activation") {
                Some(a) => Activation::parse(a)?,
                None => Activation::Tanh,
            },
            precision: match run.get("model.precision") {
                Some(p) => Precision::parse(p)?,
                None => Precision::Double,
            },
            init_seed: run.get_parsed("model.seed")?.unwrap_or(0),
            lambda,
            lr: run.get_parsed("train.lr")?.unwrap_or(1e-3),
            batch_size: run.get_parsed("train.batch_size")?.unwrap_or(8),
            max_steps: run.get_parsed("train.max_steps")?.unwrap_or(1000),
            seed: run.get_parsed("train.seed")?.unwrap_or(0),
            eval_every: run.get_parsed("train.eval_every")?.unwrap_or(0),
            target_rel: run.get_parsed("train.target_rel")?,
            target_max: run.get_parsed("train.target_max")?,
            split: run.get_parsed("data.split")?.unwrap_or(0.8),
            split_seed: run.get_parsed("data.split_seed")?.unwrap_or(0),
        };
        cfg.validate(mesh)?;
        Ok(cfg)
    }

    /// Defaults for `mesh` with the given style and latent size.
    pub fn default_for(mesh: &Mesh, style: ArchStyle, latent_dim: usize) -> Result<Self> {
        let mut run = RunConfig::new();
        run.set("model.style", style.name())?;
        run.set("model.latent_dim", latent_dim)?;
        Self::from_run(&run, mesh)
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<()> {
        ensure!(self.latent_dim >= 1, Config, "latent_dim must be >= 1");
        ensure!(!self.channels.is_empty(), Config, "need at least one QuadConv stage");
        ensure!(self.channels.iter().all(|&c| c >= 1), Config, "stage channels must be >= 1");
        ensure!(
            self.head_hidden.iter().all(|&c| c >= 1) && self.kernel_hidden.iter().all(|&c| c >= 1),
            Config,
            "hidden widths must be >= 1"
        );
        ensure!(self.lambda >= 0.0 && self.lambda.is_finite(), Config, "lambda must be >= 0");
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), Config, "learning rate must be >= 0");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(
            self.split > 0.0 && self.split < 1.0,
            Config,
            "split fraction must lie in (0, 1)"
        );
        ensure!(self.grid_alpha > 0.0, Config, "grid_alpha must be positive");
        ensure!(self.target_s >= 1, Config, "target_s must be >= 1");
        match self.style {
            ArchStyle::Pool => {
                ensure!(
                    mesh.dim() == 2,
                    Config,
                    "pool style needs a 2-D mesh, got {}-D",
                    mesh.dim()
                );
                ensure!(self.pool_window >= 2, Config, "pool window must be >= 2");
                let shrink = self.pool_window.pow(self.channels.len() as u32);
                ensure!(
                    self.grid_side.is_multiple_of(shrink) && self.grid_side / shrink >= 2,
                    Config,
                    "grid side {} cannot be pooled {} times by {} down to a grid of side >= 2",
                    self.grid_side,
                    self.channels.len(),
                    self.pool_window
                );
                if let Some((side, _)) = mesh.grid_shape() {
                    ensure!(
                        side == self.grid_side,
                        Config,
                        "input is a {side}^2 grid but grid_side is {}",
                        self.grid_side
                    );
                }
            }
            ArchStyle::Downsample => {
                ensure!(
                    self.stage_points.len() == self.channels.len(),
                    Config,
                    "{} stage point counts for {} stages",
                    self.stage_points.len(),
                    self.channels.len()
                );
                let mut prev = mesh.len();
                for &p in &self.stage_points {
                    ensure!(
                        p >= 1 && p <= prev,
                        Config,
                        "stage point counts must be non-increasing from N={}: {:?}",
                        mesh.len(),
                        self.stage_points
                    );
                    prev = p;
                }
            }
        }
        if !mesh.is_grid() || self.style == ArchStyle::Downsample {
            ensure!(
                self.lambda == 0.0,
                Config,
                "the Sobolev term needs a uniform grid; set train.lambda = 0 for scattered meshes"
            );
        }
        Ok(())
    }

    /// Canonical key-value form holding every resolved setting.
    pub fn to_run(&self) -> RunConfig {
        let mut r = RunConfig::new();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("model.style", self.style.name().into()),
            ("model.channels", join_list(&self.channels)),
            ("model.pool_window", self.pool_window.to_string()),
            ("model.grid_side", self.grid_side.to_string()),
            ("model.stage_points", join_list(&self.stage_points)),
            ("model.target_s", self.target_s.to_string()),
            ("model.grid_alpha", self.grid_alpha.to_string()),
            ("model.latent_dim", self.latent_dim.to_string()),
            ("model.head_hidden", join_list(&self.head_hidden)),
            ("model.kernel_hidden", join_list(&self.kernel_hidden)),
            ("model.kernel_activation", self.kernel_activation.name().into()),
            ("model.precision", self.precision.name().into()),
            ("model.seed", self.init_seed.to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.max_steps", self.max_steps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("train.target_rel", opt(self.target_rel)),
            ("train.target_max", opt(self.target_max)),
            ("data.split", self.split.to_string()),
            ("data.split_seed", self.split_seed.to_string()),
        ];
        for (k, v) in pairs {
            r.set(k, v).expect("known key");
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{nonuniform_mesh, uniform_grid, Density};

    #[test]
    fn grid_defaults() {
        let g = uniform_grid(2, 32, 1.0).unwrap();
        let c = AutoencoderConfig::default_for(&g, ArchStyle::Pool, 16).unwrap();
        assert_eq!(c.grid_side, 32);
        assert_eq!(c.lambda, 0.1);
        let text = c.to_run().to_text();
        let back = AutoencoderConfig::from_run(&RunConfig::parse(&text).unwrap(), &g).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn scattered_defaults_and_lambda_rule() {
        let m = nonuniform_mesh(400, Density::Uniform, 1).unwrap();
        let c = AutoencoderConfig::default_for(&m, ArchStyle::Downsample, 8).unwrap();
        assert_eq!(c.stage_points, vec![100, 25]);
        assert_eq!(c.lambda, 0.0);
        let mut run = c.to_run();
        run.set("train.lambda", 0.5).unwrap();
        assert!(matches!(AutoencoderConfig::from_run(&run, &m), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_chaining_rejected() {
        let g = uniform_grid(2, 20, 1.0).unwrap();
        let mut run = RunConfig::new();
        run.set("model.channels", "4,4,4").unwrap();
        assert!(matches!(AutoencoderConfig::from_run(&run, &g), Err(Error::Config(_))));
        let m = nonuniform_mesh(100, Density::Uniform, 1).unwrap();
        let mut run = RunConfig::new();
        run.set("model.style", "downsample").unwrap();
        run.set("model.stage_points", "10,50").unwrap();
        assert!(matches!(AutoencoderConfig::from_run(&run, &m), Err(Error::Config(_))));
        let mut run = RunConfig::new();
        run.set("model.latent_dim", 0).unwrap();
        assert!(AutoencoderConfig::from_run(&run, &g).is_err());
    }
}
