//! Finite-sum objectives sharded across workers.
//!
//! Worker `m` holds samples `xi` and the local loss is the sample mean
//! `F_m(x) = mean_xi f(x, xi)`; the global loss is `F(x) = mean_m F_m(x)`.
//! Because every loss is an empirical mean, full local gradients are exact
//! and minibatch gradients are unbiased estimates of them.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dist_sq, dot, norm_sq, scale};
use crate::rng::{Purpose, Seed, Stream};

/// Regularization used by [`make_logreg`].
pub const LOGREG_L2: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Loss {
    /// `f(x, (a, b)) = (a.x - b)^2 / 2`
    LeastSquares,
    /// `f(x, (a, y)) = ln(1 + exp(-y a.x)) + l2/2 |x|^2` with `y` in {-1, +1}.
    Logistic { l2: f64 },
}

/// Samples held by one worker, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, i: usize, dim: usize) -> &[f64] {
        &self.features[i * dim..(i + 1) * dim]
    }
}

/// Minibatch policy for stochastic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    /// Every local sample, in order. The gradient is exact.
    Full,
    /// `n` samples drawn uniformly with replacement.
    Minibatch(usize),
}

impl Default for Batch {
    fn default() -> Self {
        Batch::Minibatch(16)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSuite {
    dim: usize,
    loss: Loss,
    shards: Vec<Shard>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    /// Lipschitz constant of the global gradient.
    pub lipschitz: f64,
    /// Largest per-worker variance of the stochastic gradient.
    pub sigma2: f64,
    /// Largest mean squared divergence of local gradients from the global one.
    pub kappa2: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gaussian_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl ObjectiveSuite {
    pub fn new(dim: usize, loss: Loss, shards: Vec<Shard>) -> Result<Self, ObjectiveError> {
        if dim == 0 || shards.is_empty() {
            return Err(ObjectiveError::Invalid("need at least one worker and one dimension"));
        }
        for s in &shards {
            if s.is_empty() || s.features.len() != s.len() * dim {
                return Err(ObjectiveError::Invalid("every shard needs samples of the suite dimension"));
            }
        }
        if let Loss::Logistic { .. } = loss {
            if shards.iter().flat_map(|s| &s.targets).any(|&y| y != 1.0 && y != -1.0) {
                return Err(ObjectiveError::Invalid("logistic labels must be +1 or -1"));
            }
        }
        Ok(ObjectiveSuite { dim, loss, shards })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn shard(&self, m: usize) -> &Shard {
        &self.shards[m]
    }

    fn l2(&self) -> f64 {
        match self.loss {
            Loss::LeastSquares => 0.0,
            Loss::Logistic { l2 } => l2,
        }
    }

    pub fn sample_loss(&self, m: usize, i: usize, x: &[f64]) -> f64 {
        let shard = &self.shards[m];
        let z = dot(shard.row(i, self.dim), x);
        let t = shard.targets[i];
        match self.loss {
            Loss::LeastSquares => 0.5 * (z - t) * (z - t),
            Loss::Logistic { l2 } => softplus(-t * z) + 0.5 * l2 * norm_sq(x),
        }
    }

    /// Adds `weight * grad f(x, xi_i)` to `out`.
    fn add_sample_grad(&self, m: usize, i: usize, x: &[f64], weight: f64, out: &mut [f64]) {
        let shard = &self.shards[m];
        let a = shard.row(i, self.dim);
        let z = dot(a, x);
        let t = shard.targets[i];
        match self.loss {
            Loss::LeastSquares => axpy(weight * (z - t), a, out),
            Loss::Logistic { l2 } => {
                axpy(-weight * t * sigmoid(-t * z), a, out);
                axpy(weight * l2, x, out);
            }
        }
    }

    pub fn sample_grad(&self, m: usize, i: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.add_sample_grad(m, i, x, 1.0, &mut g);
        g
    }

    pub fn local_loss(&self, m: usize, x: &[f64]) -> f64 {
        let n = self.shards[m].len();
        (0..n).map(|i| self.sample_loss(m, i, x)).sum::<f64>() / n as f64
    }

    pub fn local_grad(&self, m: usize, x: &[f64]) -> Vec<f64> {
        let n = self.shards[m].len();
        self.batch_grad(m, x, 0..n, n)
    }

    fn batch_grad(&self, m: usize, x: &[f64], idx: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        let w = 1.0 / count as f64;
        for i in idx {
            self.add_sample_grad(m, i, x, w, &mut g);
        }
        g
    }

    /// Minibatch gradient of `F_m` at `x`.
    pub fn stochastic_grad(&self, m: usize, x: &[f64], batch: Batch, rng: &mut Stream) -> Vec<f64> {
        let n = self.shards[m].len();
        match batch {
            Batch::Full => self.local_grad(m, x),
            Batch::Minibatch(b) => {
                let b = b.max(1);
                let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
                self.batch_grad(m, x, idx.into_iter(), b)
            }
        }
    }

    pub fn global_loss(&self, x: &[f64]) -> f64 {
        (0..self.workers()).map(|m| self.local_loss(m, x)).sum::<f64>() / self.workers() as f64
    }

    pub fn global_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for m in 0..self.workers() {
            axpy(1.0, &self.local_grad(m, x), &mut g);
        }
        scale(1.0 / self.workers() as f64, &mut g);
        g
    }

    /// Hessian of `F` for least squares (constant in `x`).
    fn ls_hessian(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::<f64>::zeros(d, d);
        for shard in &self.shards {
            let a = DMatrix::from_row_slice(shard.len(), d, &shard.features);
            h += a.transpose() * &a / (shard.len() as f64 * self.workers() as f64);
        }
        h
    }

    fn logistic_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::<f64>::identity(d, d) * self.l2();
        for shard in &self.shards {
            let w = 1.0 / (shard.len() as f64 * self.workers() as f64);
            for i in 0..shard.len() {
                let a = DVector::from_column_slice(shard.row(i, d));
                let z = dot(shard.row(i, d), x);
                let sg = sigmoid(z);
                h += (&a * a.transpose()) * (w * sg * (1.0 - sg));
            }
        }
        h
    }

    /// Global minimizer: closed form for least squares, Newton's method for
    /// the (strongly convex) logistic loss.
    pub fn optimum(&self) -> Optimum {
        let d = self.dim;
        let x = match self.loss {
            Loss::LeastSquares => {
                let h = self.ls_hessian();
                let mut c = DVector::<f64>::zeros(d);
                for shard in &self.shards {
                    let a = DMatrix::from_row_slice(shard.len(), d, &shard.features);
                    let b = DVector::from_column_slice(&shard.targets);
                    c += a.transpose() * b / (shard.len() as f64 * self.workers() as f64);
                }
                let svd = h.svd(true, true);
                let x = svd.solve(&c, 1e-13).expect("svd computed with vectors");
                // One refinement step against the residual.
                let r = &c - self.ls_hessian() * &x;
                let dx = self.ls_hessian().svd(true, true).solve(&r, 1e-13).expect("svd");
                (x + dx).as_slice().to_vec()
            }
            Loss::Logistic { .. } => {
                let mut x = vec![0.0; d];
                for _ in 0..100 {
                    let g = self.global_grad(&x);
                    if norm_sq(&g) < 1e-30 {
                        break;
                    }
                    let h = self.logistic_hessian(&x);
                    let step = h.cholesky().expect("regularized Hessian is positive definite").solve(&DVector::from_column_slice(&g));
                    let f0 = self.global_loss(&x);
                    let mut t = 1.0;
                    loop {
                        let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi - t * si).collect();
                        if self.global_loss(&cand) <= f0 - 0.25 * t * dot(&g, step.as_slice()) || t < 1e-10 {
                            x = cand;
                            break;
                        }
                        t *= 0.5;
                    }
                }
                x
            }
        };
        let value = self.global_loss(&x);
        Optimum { x, value }
    }

    /// Exact Lipschitz constant of the global gradient for least squares.
    pub fn exact_lipschitz(&self) -> Option<f64> {
        match self.loss {
            Loss::LeastSquares => Some(max_eigenvalue(self.ls_hessian())),
            Loss::Logistic { .. } => None,
        }
    }

    /// `l2 + max_m lambda_max(X_m^T X_m / n_m) / 4`, an upper bound on the
    /// logistic Lipschitz constant.
    pub fn logistic_lipschitz_bound(&self) -> Option<f64> {
        let Loss::Logistic { l2 } = self.loss else { return None };
        let worst = self
            .shards
            .iter()
            .map(|s| {
                let a = DMatrix::from_row_slice(s.len(), self.dim, &s.features);
                max_eigenvalue(a.transpose() * &a / s.len() as f64)
            })
            .fold(0.0, f64::max);
        Some(l2 + 0.25 * worst)
    }

    /// Per-worker variance of the batch gradient at `x`.
    pub fn gradient_variance(&self, m: usize, x: &[f64], batch: Batch) -> f64 {
        let n = self.shards[m].len();
        let b = match batch {
            Batch::Full => return 0.0,
            Batch::Minibatch(b) => b.max(1),
        };
        let full = self.local_grad(m, x);
        let per_sample = (0..n).map(|i| dist_sq(&self.sample_grad(m, i, x), &full)).sum::<f64>() / n as f64;
        per_sample / b as f64
    }

    /// `(1/M) sum_m |grad F(x) - grad F_m(x)|^2`
    pub fn gradient_divergence(&self, x: &[f64]) -> f64 {
        let g = self.global_grad(x);
        (0..self.workers()).map(|m| dist_sq(&g, &self.local_grad(m, x))).sum::<f64>() / self.workers() as f64
    }

    /// Write one sample per row: `worker,target,a0,a1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), ObjectiveError> {
        write!(out, "worker,target")?;
        for j in 0..self.dim {
            write!(out, ",a{j}")?;
        }
        writeln!(out)?;
        for (m, shard) in self.shards.iter().enumerate() {
            for i in 0..shard.len() {
                write!(out, "{m},{:?}", shard.targets[i])?;
                for v in shard.row(i, self.dim) {
                    write!(out, ",{v:?}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, loss: Loss) -> Result<Self, ObjectiveError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(ObjectiveError::Invalid("empty dataset"))??;
        let dim = header.split(',').count().checked_sub(2).filter(|&d| d > 0).ok_or(ObjectiveError::Parse {
            line: 1,
            msg: "header needs worker,target and at least one feature".into(),
        })?;
        let mut shards: Vec<Shard> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| ObjectiveError::Parse { line: n + 2, msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(err(format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let m: usize = fields[0].parse().map_err(|e| err(format!("worker: {e}")))?;
            if m > shards.len() {
                return Err(err("workers must appear in order".into()));
            }
            if m == shards.len() {
                shards.push(Shard { features: Vec::new(), targets: Vec::new() });
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            shards[m].targets.push(parse(fields[1])?);
            for f in &fields[2..] {
                shards[m].features.push(parse(f)?);
            }
        }
        ObjectiveSuite::new(dim, loss, shards)
    }
}

fn max_eigenvalue(h: DMatrix<f64>) -> f64 {
    h.symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Noise level on least-squares targets.
const LS_NOISE: f64 = 0.5;

/// Least-squares suite. Worker `m` draws rows `a ~ N(0, I)` and targets
/// `b = a.(x_true + heterogeneity * shift_m) + noise`, so the local optima
/// move apart as `heterogeneity` grows.
pub fn make_quadratic(workers: usize, dim: usize, heterogeneity: f64, samples: usize, seed: Seed) -> ObjectiveSuite {
    assert!(workers >= 1 && dim >= 1 && samples >= 1);
    let mut rng = seed.stream(Purpose::Data, &[0]);
    let x_true = gaussian_vec(&mut rng, dim);
    let shards = (0..workers)
        .map(|m| {
            let mut rng = seed.stream(Purpose::Data, &[1, m as u64]);
            let shift = gaussian_vec(&mut rng, dim);
            let center: Vec<f64> = x_true.iter().zip(&shift).map(|(x, s)| x + heterogeneity * s).collect();
            let features = gaussian_vec(&mut rng, samples * dim);
            let targets = (0..samples)
                .map(|i| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    dot(&features[i * dim..(i + 1) * dim], &center) + LS_NOISE * noise
                })
                .collect();
            Shard { features, targets }
        })
        .collect();
    ObjectiveSuite::new(dim, Loss::LeastSquares, shards).expect("generated shards are well formed")
}

/// Logistic regression on two Gaussian blobs `y * separation/2 * u + N(0, I)`
/// for a random unit direction `u`, with balanced labels on every worker.
pub fn make_logreg(workers: usize, dim: usize, per_worker: usize, separation: f64, seed: Seed) -> ObjectiveSuite {
    make_logreg_skewed(workers, dim, per_worker, separation, 0.0, seed)
}

/// As [`make_logreg`], but worker `m`'s positive-label rate moves linearly
/// from `(1 - skew)/2` on the first worker to `(1 + skew)/2` on the last.
pub fn make_logreg_skewed(
    workers: usize,
    dim: usize,
    per_worker: usize,
    separation: f64,
    skew: f64,
    seed: Seed,
) -> ObjectiveSuite {
    assert!(workers >= 1 && dim >= 1 && per_worker >= 1);
    assert!((0.0..1.0).contains(&skew));
    let mut rng = seed.stream(Purpose::Data, &[0]);
    let mut dir = gaussian_vec(&mut rng, dim);
    let n = norm_sq(&dir).sqrt();
    scale(1.0 / n, &mut dir);
    let shards = (0..workers)
        .map(|m| {
            let mut rng = seed.stream(Purpose::Data, &[1, m as u64]);
            let pos = if workers == 1 { 0.5 } else { 0.5 + skew * (m as f64 / (workers - 1) as f64 - 0.5) };
            let mut features = Vec::with_capacity(per_worker * dim);
            let mut targets = Vec::with_capacity(per_worker);
            for _ in 0..per_worker {
                let y = if rng.random::<f64>() < pos { 1.0 } else { -1.0 };
                for &u in &dir {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(y * 0.5 * separation * u + z);
                }
                targets.push(y);
            }
            Shard { features, targets }
        })
        .collect();
    ObjectiveSuite::new(dim, Loss::Logistic { l2: LOGREG_L2 }, shards).expect("generated shards are well formed")
}

/// Estimate `L`, `sigma^2`, `kappa^2` from probe points around the optimum.
///
/// `L` is exact for least squares; otherwise the largest gradient difference
/// quotient over consecutive probe pairs. `sigma^2` and `kappa^2` are maxima
/// over the probes, so they are estimates of the suprema, not bounds.
pub fn estimate_profile(obj: &ObjectiveSuite, probes: usize, batch: Batch, seed: Seed) -> Result<SmoothnessProfile, ObjectiveError> {
    if probes < 10 {
        return Err(ObjectiveError::Invalid("need at least 10 probe points"));
    }
    let center = obj.optimum().x;
    let mut rng = seed.stream(Purpose::Probe, &[]);
    let points: Vec<Vec<f64>> = (0..probes)
        .map(|_| {
            let z = gaussian_vec(&mut rng, obj.dim());
            center.iter().zip(&z).map(|(c, z)| c + z).collect()
        })
        .collect();

    let lipschitz = match obj.exact_lipschitz() {
        Some(l) => l,
        None => {
            let grads: Vec<Vec<f64>> = points.iter().map(|p| obj.global_grad(p)).collect();
            let mut best: f64 = 0.0;
            for i in 0..probes {
                let j = (i + 1) % probes;
                let dx = dist_sq(&points[i], &points[j]);
                if dx == 0.0 {
                    continue;
                }
                best = best.max((dist_sq(&grads[i], &grads[j]) / dx).sqrt());
            }
            best
        }
    };

    let mut sigma2: f64 = 0.0;
    let mut kappa2: f64 = 0.0;
    for p in &points {
        for m in 0..obj.workers() {
            sigma2 = sigma2.max(obj.gradient_variance(m, p, batch));
        }
        kappa2 = kappa2.max(obj.gradient_divergence(p));
    }
    Ok(SmoothnessProfile { lipschitz, sigma2, kappa2 })
}
