//! Synthetic datasets, deterministic minibatching and plain-text persistence.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::models::GrbmParams;
use crate::objectives::ENUMERATE_LATENT_LIMIT;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, d]`
    pub points: Tensor,
    pub name: String,
    pub generator: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(points: Tensor, name: &str, generator: &str, seed: u64) -> Result<Self> {
        if points.rank() != 2 || points.rows() == 0 {
            return Err(Error::shape(format!(
                "dataset needs at least one row of a [n, d] matrix, got {:?}",
                points.shape()
            )));
        }
        if !points.is_finite() {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            points,
            name: name.to_string(),
            generator: generator.to_string(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Writes `# dataset v1 <n> <d>`, optional metadata comments, then one
    /// point per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("# dataset v1 {} {}\n", self.len(), self.dim());
        let _ = writeln!(out, "# name {}", self.name);
        let _ = writeln!(out, "# generator {} seed {}", self.generator, self.seed);
        for r in 0..self.len() {
            let line: Vec<String> = self.points.row(r).iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (n, d) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => return Err(parse_err(1, "empty file")),
        };
        let mut name = String::from("unnamed");
        let mut generator = String::from("file");
        let mut seed = 0;
        let mut data = Vec::with_capacity(n * d);
        let mut rows = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(meta) = t.strip_prefix('#') {
                let parts: Vec<&str> = meta.split_whitespace().collect();
                match parts.as_slice() {
                    ["name", rest @ ..] => name = rest.join(" "),
                    ["generator", g, "seed", s] => {
                        generator = g.to_string();
                        seed = s
                            .parse()
                            .map_err(|_| parse_err(lineno, "invalid generator seed"))?;
                    }
                    _ => {}
                }
                continue;
            }
            let before = data.len();
            for tok in t.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|_| parse_err(lineno, &format!("invalid number `{tok}`")))?;
                data.push(x);
            }
            if data.len() - before != d {
                return Err(parse_err(
                    lineno,
                    &format!("expected {d} values, found {}", data.len() - before),
                ));
            }
            rows += 1;
        }
        if rows != n {
            return Err(parse_err(1, &format!("header declares {n} rows, file has {rows}")));
        }
        Dataset::new(Tensor::matrix(n, d, data), &name, &generator, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["#", "dataset", "v1", n, d] => {
            let n: usize = n.parse().map_err(|_| parse_err(1, "invalid row count"))?;
            let d: usize = d.parse().map_err(|_| parse_err(1, "invalid dimension"))?;
            if n == 0 || d == 0 {
                return Err(parse_err(1, "dataset must be nonempty"));
            }
            Ok((n, d))
        }
        _ => Err(parse_err(1, "expected header `# dataset v1 <n> <d>`")),
    }
}

/// Whether a point of `[0, 4)²` lies on a filled checkerboard cell.
pub fn on_filled_cell(x: f64, y: f64) -> bool {
    (x.floor() as i64 + y.floor() as i64) % 2 == 0
}

/// `n` points uniform on the 8 filled cells of a centered 4×4 checkerboard
/// over `[-2, 2)²`, by rejection from the full board.
pub fn checkerboard(n: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    while data.len() < 2 * n {
        let x = 4.0 * rng::uniform(rng);
        let y = 4.0 * rng::uniform(rng);
        if on_filled_cell(x, y) {
            data.push(x - 2.0);
            data.push(y - 2.0);
        }
    }
    Tensor::matrix(n, 2, data)
}

pub fn checkerboard_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let points = checkerboard(n, &mut rng::seeded(seed));
    Dataset::new(points, "checkerboard", "checkerboard", seed)
}

/// Exact samples from a GRBM: `h` from its enumerated marginal, then `v | h`.
pub fn grbm_synthetic(params: &GrbmParams, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let m = params.model();
    if m.d_h > ENUMERATE_LATENT_LIMIT {
        return Err(Error::size("GRBM latent dimension for exact sampling", m.d_h, ENUMERATE_LATENT_LIMIT));
    }
    let logw = params.latent_log_weights();
    let lz = logsumexp(&logw);
    let probs: Vec<f64> = logw.iter().map(|l| (l - lz).exp()).collect();
    let states = crate::models::binary_states(m.d_h);
    let picks: Vec<usize> = (0..n).map(|_| rng::categorical(&probs, rng)).collect();
    let h = states.select_rows(&picks);
    params.conditionals().sample_visible(&h, rng)
}

/// Isotropic Gaussian mixture with component `means: [k, d]` and shared `std`.
pub fn gaussian_mixture(
    means: &Tensor,
    weights: &[f64],
    std: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if means.rank() != 2 || means.rows() != weights.len() || weights.is_empty() {
        return Err(Error::shape("mixture needs [k, d] means and k weights"));
    }
    if !(std > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Domain("mixture std and weights must be positive".into()));
    }
    let d = means.cols();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let k = rng::categorical(weights, rng);
        for j in 0..d {
            data.push(means.get2(k, j) + std * rng::normal(rng));
        }
    }
    Ok(Tensor::matrix(n, d, data))
}

/// Epoch-wise shuffled minibatches; the last short batch of an epoch is dropped.
///
/// Each epoch's permutation comes from its own RNG stream, so an iterator can
/// be positioned at any batch index without replaying earlier epochs.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    points: &'a Tensor,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(points: &'a Tensor, batch_size: usize, seed: u64) -> Result<Self> {
        Self::starting_at(points, batch_size, seed, 0)
    }

    /// Iterator positioned so that the next batch is batch number `index`.
    pub fn starting_at(points: &'a Tensor, batch_size: usize, seed: u64, index: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > points.rows() {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={}",
                points.rows()
            )));
        }
        let per_epoch = (points.rows() / batch_size) as u64;
        let epoch = index / per_epoch;
        let mut it = BatchIterator {
            points,
            batch_size,
            seed,
            epoch,
            cursor: (index % per_epoch) as usize * batch_size,
            order: Vec::new(),
        };
        it.order = it.permutation(epoch);
        Ok(it)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        rng::permutation(self.points.rows(), &mut rng::stream(self.seed, epoch))
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Tensor {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.order = self.permutation(self.epoch);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        self.points.select_rows(idx)
    }
}
