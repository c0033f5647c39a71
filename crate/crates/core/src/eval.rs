//! Exact GRBM evaluation (partition function, log-likelihood), the Fisher
//! test loss, the posterior Fisher divergence, and 2-D density grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{logsumexp, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{params_to_vars, EnergyModel, GrbmParams};
use crate::objectives::{sm_loss, ssm_loss, BiLevelSetup, IterationNoise, LatentMode, LogDensity, ObjectiveNoise, ScoreObjective};
use crate::posteriors::Posterior;
use crate::rng::Rng;

/// Largest latent dimension enumerated for the partition function.
pub const PARTITION_LATENT_LIMIT: usize = 20;

/// Largest visible dimension for the exact Hessian trace in the Fisher test loss.
pub const EXACT_FISHER_DIM_LIMIT: usize = 8;

/// Latent draws per point in [`posterior_fisher_eval`].
pub const POSTERIOR_FISHER_DRAWS: usize = 16;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log Z` by enumerating the latent states; each `v | h` integral is Gaussian.
pub fn grbm_log_partition(params: &GrbmParams) -> Result<f64> {
    let d_h = params.model().d_h;
    if d_h > PARTITION_LATENT_LIMIT {
        return Err(Error::size("latent dimension for the partition function", d_h, PARTITION_LATENT_LIMIT));
    }
    let d_v = params.model().d_v as f64;
    let ln_sigma = params.sigma().ln();
    Ok(logsumexp(&params.latent_log_weights()) + d_v * (HALF_LN_2PI + ln_sigma))
}

/// Mean exact log-likelihood of the rows of `data`.
pub fn test_log_likelihood(data: &Tensor, params: &GrbmParams) -> Result<f64> {
    crate::models::check_rows("evaluation data", data.shape(), params.model().d_v)?;
    let log_z = grbm_log_partition(params)?;
    let total: f64 = (0..data.rows()).map(|i| -params.free_energy_value(data.row(i))).sum();
    Ok(total / data.rows() as f64 - log_z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    /// Exact Hessian trace; requires `d ≤ EXACT_FISHER_DIM_LIMIT`.
    Exact,
    /// Hutchinson trace with this many Rademacher directions per point.
    Sliced(usize),
}

/// Mean of `½||∇ log p̃||² + tr ∇² log p̃` over `data`, which equals the
/// Fisher divergence to the data density up to a data-only constant.
pub fn test_fisher_loss(log_density: &LogDensity<'_>, data: &Tensor, mode: FisherMode, rng: &mut Rng) -> Result<f64> {
    match mode {
        FisherMode::Exact => {
            if data.cols() > EXACT_FISHER_DIM_LIMIT {
                return Err(Error::size("dimension for the exact Fisher loss", data.cols(), EXACT_FISHER_DIM_LIMIT));
            }
            Ok(sm_loss(log_density, data)?.item())
        }
        FisherMode::Sliced(dirs) => Ok(ssm_loss(log_density, data, dirs, rng)?.item()),
    }
}

/// [`test_fisher_loss`] with `log p̃ = -F`; exact when `d_v ≤ 8`, otherwise sliced.
pub fn grbm_test_fisher(params: &GrbmParams, data: &Tensor, rng: &mut Rng) -> Result<f64> {
    crate::models::check_rows("evaluation data", data.shape(), params.model().d_v)?;
    let theta = params_to_vars(&params.to_tensors(), false);
    let log_p = |v: &Var| crate::models::GrbmVars::new(&theta).free_energy(v).neg();
    let mode = if data.cols() <= EXACT_FISHER_DIM_LIMIT {
        FisherMode::Exact
    } else {
        FisherMode::Sliced(1)
    };
    test_fisher_loss(&log_p, data, mode, rng)
}

/// Monte Carlo `E_v E_q ½||∇_h log q(h|v) - ∇_h log p(h|v)||²` with `draws`
/// latent samples per point, evaluated in chunks.
pub fn posterior_fisher_eval(
    model: &dyn EnergyModel,
    theta: &[Tensor],
    posterior: &dyn Posterior,
    phi: &[Tensor],
    data: &Tensor,
    draws: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if posterior.is_discrete() {
        return Err(Error::Unsupported(
            "the posterior Fisher divergence needs continuous latents".into(),
        ));
    }
    if draws == 0 {
        return Err(Error::Config("posterior Fisher evaluation needs at least one draw".into()));
    }
    crate::models::check_rows("evaluation data", data.shape(), model.visible_dim())?;
    let theta = params_to_vars(theta, false);
    let phi = params_to_vars(phi, false);
    let objective = ScoreObjective::Sm;
    let setup = BiLevelSetup {
        model,
        posterior,
        objective: &objective,
        mode: LatentMode::Sample,
    };
    const CHUNK: usize = 256;
    let mut total = 0.0;
    let mut start = 0;
    while start < data.rows() {
        let len = CHUNK.min(data.rows() - start);
        let batch = data.slice(0, start, len).repeat_rows(draws);
        let noise = IterationNoise {
            objective: ObjectiveNoise::None,
            latent: posterior.draw_noise(batch.rows(), rng),
        };
        total += setup.lower_fisher_loss(&theta, &phi, &batch, &noise)?.item() * batch.rows() as f64;
        start += len;
    }
    Ok(total / (data.rows() * draws) as f64)
}

/// Bounds and resolution of a 2-D grid; values sit at cell centres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.xmin < self.xmax && self.ymin < self.ymax && self.nx > 0 && self.ny > 0;
        if !ok || ![self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn cell_area(&self) -> f64 {
        (self.xmax - self.xmin) / self.nx as f64 * (self.ymax - self.ymin) / self.ny as f64
    }

    /// Cell centres `[nx·ny, 2]`, `y` index outer.
    pub fn points(&self) -> Tensor {
        let dx = (self.xmax - self.xmin) / self.nx as f64;
        let dy = (self.ymax - self.ymin) / self.ny as f64;
        let mut data = Vec::with_capacity(2 * self.nx * self.ny);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                data.push(self.xmin + (ix as f64 + 0.5) * dx);
                data.push(self.ymin + (iy as f64 + 0.5) * dy);
            }
        }
        Tensor::from_vec(&[self.nx * self.ny, 2], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Unnormalized log density, row-major with `y` outer.
    pub log_density: Vec<f64>,
    /// Cell probabilities when the normalizer is known.
    pub probs: Option<Vec<f64>>,
}

impl DensityGrid {
    pub fn evaluate(spec: GridSpec, log_density: &dyn Fn(&Tensor) -> Result<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let values = log_density(&spec.points())?;
        if values.len() != spec.nx * spec.ny {
            return Err(Error::shape(format!(
                "grid log density returned {} values for {} cells",
                values.len(),
                spec.nx * spec.ny
            )));
        }
        Ok(DensityGrid {
            spec,
            log_density: values,
            probs: None,
        })
    }

    pub fn with_log_normalizer(mut self, log_z: f64) -> Self {
        let area = self.spec.cell_area();
        self.probs = Some(self.log_density.iter().map(|l| (l - log_z).exp() * area).collect());
        self
    }

    /// Index of the largest log-density cell as `(ix, iy)`.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .log_density
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > self.log_density[best] { k } else { best });
        (k % self.spec.nx, k / self.spec.nx)
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.log_density[iy * self.spec.nx + ix]
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "# density_grid v1 {:e} {:e} {:e} {:e} {} {}\n",
            s.xmin, s.xmax, s.ymin, s.ymax, s.nx, s.ny
        );
        for row in self.log_density.chunks(s.nx) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" ")).expect("writing to a String");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty grid file".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 9 || fields[..3] != ["#", "density_grid", "v1"] {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected '# density_grid v1 xmin xmax ymin ymax nx ny', got '{header}'"),
            });
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad bound '{s}': {e}"),
            })
        };
        let count = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad resolution '{s}': {e}"),
            })
        };
        let spec = GridSpec {
            xmin: num(fields[3])?,
            xmax: num(fields[4])?,
            ymin: num(fields[5])?,
            ymax: num(fields[6])?,
            nx: count(fields[7])?,
            ny: count(fields[8])?,
        };
        spec.validate().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let mut values = Vec::with_capacity(spec.nx * spec.ny);
        for (k, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: k + 2,
                    msg: format!("bad value '{tok}': {e}"),
                })?);
            }
        }
        if values.len() != spec.nx * spec.ny {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header promises {} values, found {}", spec.nx * spec.ny, values.len()),
            });
        }
        Ok(DensityGrid {
            spec,
            log_density: values,
            probs: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `-F` on the grid, normalized with the exact partition function.
pub fn density_grid(params: &GrbmParams, spec: GridSpec) -> Result<DensityGrid> {
    if params.model().d_v != 2 {
        return Err(Error::Unsupported(format!(
            "density grids need a 2-D visible space, model has {}",
            params.model().d_v
        )));
    }
    let log_z = grbm_log_partition(params)?;
    let grid = DensityGrid::evaluate(spec, &|pts: &Tensor| {
        Ok((0..pts.rows()).map(|i| -params.free_energy_value(pts.row(i))).collect())
    })?;
    Ok(grid.with_log_normalizer(log_z))
}
