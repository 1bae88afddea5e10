//! Stochastic minimax problems.
//!
//! A problem exposes per-agent loss gradients on individual samples, the exact
//! local and global gradients those samples average to, and optionally the
//! Hessian-vector products needed by the Hessian-corrected estimator.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Grad = (DVector<f64>, DVector<f64>);

pub trait MinimaxProblem {
    type Sample;

    /// `(d1, d2)`: dimensions of the minimizing and maximizing variables.
    fn dims(&self) -> (usize, usize);

    fn agent_count(&self) -> usize;

    /// `Some(N_k)` for a finite local dataset, `None` for a streaming agent.
    fn local_size(&self, k: usize) -> Option<usize>;

    /// Sample `s` of agent `k`'s dataset. Only meaningful when
    /// `local_size(k)` is `Some`.
    fn stored_sample(&self, k: usize, s: usize) -> Self::Sample;

    /// One i.i.d. draw: a uniform index (with replacement) for a dataset, a
    /// fresh sample for a stream.
    fn draw_sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Self::Sample;

    /// Gradients of the sampled loss `Q_k(x, y; sample)`.
    fn grad_loss(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, sample: &Self::Sample) -> Grad;

    /// Exact local gradients of `J_k`.
    fn local_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>) -> Grad;

    /// Exact gradients of `J = mean_k J_k`.
    fn global_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> Grad {
        let (d1, d2) = self.dims();
        let mut gx = DVector::zeros(d1);
        let mut gy = DVector::zeros(d2);
        for k in 0..self.agent_count() {
            let (lx, ly) = self.local_grad(k, x, y);
            gx += lx;
            gy += ly;
        }
        let inv = 1.0 / self.agent_count() as f64;
        (gx * inv, gy * inv)
    }

    fn has_hessian(&self) -> bool {
        false
    }

    /// `[H_xx H_xy; H_yx H_yy] [dx; dy]` of the sampled loss at `(x, y)`.
    fn hessian_product(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        _sample: &Self::Sample,
        _dx: &DVector<f64>,
        _dy: &DVector<f64>,
    ) -> Option<Grad> {
        None
    }
}

fn check_point<P: MinimaxProblem + ?Sized>(p: &P, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    let (d1, d2) = p.dims();
    if x.len() != d1 || y.len() != d2 {
        return Err(Error::ShapeMismatch(format!(
            "point has dims ({}, {}), problem expects ({d1}, {d2})",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Shape-checked [`MinimaxProblem::grad_loss`].
pub fn grad_loss<P: MinimaxProblem>(
    p: &P,
    k: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    sample: &P::Sample,
) -> Result<Grad> {
    check_point(p, x, y)?;
    if k >= p.agent_count() {
        return Err(Error::ShapeMismatch(format!("agent {k} of {}", p.agent_count())));
    }
    Ok(p.grad_loss(k, x, y, sample))
}

/// Squared norms of the exact global gradients at `(x, y)`.
pub fn saddle_residual<P: MinimaxProblem + ?Sized>(p: &P, x: &DVector<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    check_point(p, x, y)?;
    let (gx, gy) = p.global_grad(x, y);
    Ok((gx.norm_squared(), gy.norm_squared()))
}

/// Whether the Normal scale parameters are variances or standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spread {
    #[default]
    Variance,
    StdDev,
}

impl Spread {
    fn std(self, scale: f64) -> f64 {
        match self {
            Spread::Variance => scale.sqrt(),
            Spread::StdDev => scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConfig {
    pub agents: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    /// `Some(N)` for a finite dataset per agent, `None` for streaming samples.
    pub samples_per_agent: Option<usize>,
    pub nu: f64,
    /// Agent `k` (1-based) draws sample entries around `data_mean + hetero_shift * k`.
    pub hetero_shift: f64,
    pub data_mean: f64,
    pub data_scale: f64,
    pub noise_scale: f64,
    pub coupling_scale: f64,
    pub spread: Spread,
    pub seed: u64,
}

impl QuadraticConfig {
    /// Sizes and distributions of the synthetic experiment with 20 agents.
    pub fn paper_scale(seed: u64) -> Self {
        Self {
            agents: 20,
            dim_x: 100,
            dim_y: 100,
            samples_per_agent: Some(2000),
            nu: 10.0,
            hetero_shift: 0.01,
            data_mean: 1.0,
            data_scale: 10.0,
            noise_scale: 10.0,
            coupling_scale: 0.001,
            spread: Spread::Variance,
            seed,
        }
    }

    /// Reduced sizes that run in seconds.
    pub fn desk_scale(seed: u64) -> Self {
        Self { agents: 8, dim_x: 16, dim_y: 16, samples_per_agent: Some(200), ..Self::paper_scale(seed) }
    }
}

#[derive(Debug, Clone)]
pub enum QuadSample {
    Stored(usize),
    Fresh { a: DVector<f64>, e: DVector<f64> },
}

#[derive(Debug, Clone)]
struct QuadAgent {
    /// `N x d1` rows `a^T` (empty when streaming).
    a: DMatrix<f64>,
    /// `N x d2` rows `e^T` (empty when streaming).
    e: DMatrix<f64>,
    coupling: DMatrix<f64>,
    /// `E[a a^T]`.
    second_moment: DMatrix<f64>,
    mean_noise: DVector<f64>,
    mean_a: f64,
}

/// `J_k(x,y) = E[ (a^T x)^2 / 2 + y^T (B_k x + e) - nu/2 |y|^2 ]`.
#[derive(Debug, Clone)]
pub struct QuadraticMinimax {
    agents: Vec<QuadAgent>,
    dim_x: usize,
    dim_y: usize,
    nu: f64,
    online: bool,
    data_std: f64,
    noise_std: f64,
}

pub fn make_quadratic(cfg: &QuadraticConfig) -> Result<QuadraticMinimax> {
    if cfg.agents == 0 || cfg.dim_x == 0 || cfg.dim_y == 0 || cfg.samples_per_agent == Some(0) {
        return Err(Error::InvalidParameter(format!("all dimensions must be positive: {cfg:?}")));
    }
    if !(cfg.nu > 0.0) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {}", cfg.nu)));
    }
    for (name, v) in [("data", cfg.data_scale), ("noise", cfg.noise_scale), ("coupling", cfg.coupling_scale)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} scale must be finite and >= 0")));
        }
    }
    let data_std = cfg.spread.std(cfg.data_scale);
    let noise_std = cfg.spread.std(cfg.noise_scale);
    let coupling = Normal::new(0.0, cfg.spread.std(cfg.coupling_scale)).expect("finite std");
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut agents = Vec::with_capacity(cfg.agents);
    for k in 0..cfg.agents {
        let mean_a = cfg.data_mean + cfg.hetero_shift * (k + 1) as f64;
        let data = Normal::new(mean_a, data_std).expect("finite std");
        let coupling_k = DMatrix::from_fn(cfg.dim_y, cfg.dim_x, |_, _| coupling.sample(&mut rng));
        let agent = match cfg.samples_per_agent {
            Some(n) => {
                let a = DMatrix::from_fn(n, cfg.dim_x, |_, _| data.sample(&mut rng));
                let e = DMatrix::from_fn(n, cfg.dim_y, |_, _| noise.sample(&mut rng));
                QuadAgent::from_data(a, e, coupling_k, mean_a)
            }
            None => {
                let m = DVector::from_element(cfg.dim_x, mean_a);
                let second_moment = &m * m.transpose()
                    + DMatrix::identity(cfg.dim_x, cfg.dim_x) * (data_std * data_std);
                QuadAgent {
                    a: DMatrix::zeros(0, cfg.dim_x),
                    e: DMatrix::zeros(0, cfg.dim_y),
                    coupling: coupling_k,
                    second_moment,
                    mean_noise: DVector::zeros(cfg.dim_y),
                    mean_a,
                }
            }
        };
        agents.push(agent);
    }
    Ok(QuadraticMinimax {
        agents,
        dim_x: cfg.dim_x,
        dim_y: cfg.dim_y,
        nu: cfg.nu,
        online: cfg.samples_per_agent.is_none(),
        data_std,
        noise_std,
    })
}

impl QuadAgent {
    fn from_data(a: DMatrix<f64>, e: DMatrix<f64>, coupling: DMatrix<f64>, mean_a: f64) -> Self {
        let n = a.nrows() as f64;
        let second_moment = a.transpose() * &a / n;
        let mean_noise = e.row_mean().transpose();
        Self { a, e, coupling, second_moment, mean_noise, mean_a }
    }
}

impl QuadraticMinimax {
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn coupling(&self, k: usize) -> &DMatrix<f64> {
        &self.agents[k].coupling
    }

    /// Hessian of `J` in `y`; constant `-nu I`.
    pub fn hessian_yy(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim_y, self.dim_y) * -self.nu
    }

    /// Stationary point of `J`, from the linear system
    /// `[H B^T; B -nu I] [x; y] = [0; -e_mean]`.
    pub fn saddle_point(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let (d1, d2) = (self.dim_x, self.dim_y);
        let kk = self.agents.len() as f64;
        let mut h = DMatrix::zeros(d1, d1);
        let mut b = DMatrix::zeros(d2, d1);
        let mut e = DVector::zeros(d2);
        for ag in &self.agents {
            h += &ag.second_moment;
            b += &ag.coupling;
            e += &ag.mean_noise;
        }
        h /= kk;
        b /= kk;
        e /= kk;
        let mut sys = DMatrix::zeros(d1 + d2, d1 + d2);
        sys.view_mut((0, 0), (d1, d1)).copy_from(&h);
        sys.view_mut((0, d1), (d1, d2)).copy_from(&b.transpose());
        sys.view_mut((d1, 0), (d2, d1)).copy_from(&b);
        sys.view_mut((d1, d1), (d2, d2)).copy_from(&(DMatrix::identity(d2, d2) * -self.nu));
        let mut rhs = DVector::zeros(d1 + d2);
        rhs.rows_mut(d1, d2).copy_from(&(-e));
        let sol = sys
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("stationarity system is singular".into()))?;
        Ok((sol.rows(0, d1).into_owned(), sol.rows(d1, d2).into_owned()))
    }

    fn sample_parts<'a>(&'a self, k: usize, sample: &'a QuadSample) -> (DVector<f64>, DVector<f64>) {
        match sample {
            QuadSample::Stored(s) => {
                let ag = &self.agents[k];
                (ag.a.row(*s).transpose(), ag.e.row(*s).transpose())
            }
            QuadSample::Fresh { a, e } => (a.clone(), e.clone()),
        }
    }

    /// Writes `samples.csv` (`agent,index,a_*,e_*`) and `coupling.csv`
    /// (`agent,row,b_*`) into `dir`.
    pub fn save_csv(&self, dir: &Path) -> Result<()> {
        if self.online {
            return Err(Error::InvalidParameter("streaming problems have no dataset to dump".into()));
        }
        let mut w = csv::Writer::from_writer(File::create(dir.join("samples.csv"))?);
        let mut header = vec!["agent".to_string(), "index".to_string()];
        header.extend((0..self.dim_x).map(|i| format!("a_{i}")));
        header.extend((0..self.dim_y).map(|i| format!("e_{i}")));
        w.write_record(&header)?;
        for (k, ag) in self.agents.iter().enumerate() {
            for s in 0..ag.a.nrows() {
                let mut rec = vec![k.to_string(), s.to_string()];
                rec.extend(ag.a.row(s).iter().map(|v| format!("{v:e}")));
                rec.extend(ag.e.row(s).iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(File::create(dir.join("coupling.csv"))?);
        let mut header = vec!["agent".to_string(), "row".to_string()];
        header.extend((0..self.dim_x).map(|i| format!("b_{i}")));
        w.write_record(&header)?;
        for (k, ag) in self.agents.iter().enumerate() {
            for r in 0..self.dim_y {
                let mut rec = vec![k.to_string(), r.to_string()];
                rec.extend(ag.coupling.row(r).iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`QuadraticMinimax::save_csv`].
    pub fn load_csv(dir: &Path, nu: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(dir.join("samples.csv"))?;
        let headers = r.headers()?.clone();
        let dim_x = headers.iter().filter(|h| h.starts_with("a_")).count();
        let dim_y = headers.iter().filter(|h| h.starts_with("e_")).count();
        let mut rows: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let k: usize = parse_field(&rec, 0)?;
            let vals: Vec<f64> = (2..2 + dim_x + dim_y).map(|i| parse_field(&rec, i)).collect::<Result<_>>()?;
            if rows.len() <= k {
                rows.resize_with(k + 1, Vec::new);
            }
            rows[k].push((vals[..dim_x].to_vec(), vals[dim_x..].to_vec()));
        }

        let mut r = csv::Reader::from_path(dir.join("coupling.csv"))?;
        let mut couplings = vec![DMatrix::zeros(dim_y, dim_x); rows.len()];
        for rec in r.records() {
            let rec = rec?;
            let k: usize = parse_field(&rec, 0)?;
            let row: usize = parse_field(&rec, 1)?;
            if k >= couplings.len() || row >= dim_y {
                return Err(Error::ShapeMismatch(format!("coupling row ({k}, {row}) out of range")));
            }
            for c in 0..dim_x {
                couplings[k][(row, c)] = parse_field(&rec, 2 + c)?;
            }
        }

        let mut agents = Vec::with_capacity(rows.len());
        for (samples, coupling) in rows.into_iter().zip(couplings) {
            let n = samples.len();
            if n == 0 {
                return Err(Error::InvalidParameter("agent with no samples".into()));
            }
            let a = DMatrix::from_fn(n, dim_x, |i, j| samples[i].0[j]);
            let e = DMatrix::from_fn(n, dim_y, |i, j| samples[i].1[j]);
            let mean_a = a.mean();
            agents.push(QuadAgent::from_data(a, e, coupling, mean_a));
        }
        Ok(Self { agents, dim_x, dim_y, nu, online: false, data_std: 0.0, noise_std: 0.0 })
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::InvalidParameter(format!("bad csv field {i} in {rec:?}")))
}

impl MinimaxProblem for QuadraticMinimax {
    type Sample = QuadSample;

    fn dims(&self) -> (usize, usize) {
        (self.dim_x, self.dim_y)
    }

    fn agent_count(&self) -> usize {
        self.agents.len()
    }

    fn local_size(&self, k: usize) -> Option<usize> {
        (!self.online).then(|| self.agents[k].a.nrows())
    }

    fn stored_sample(&self, _k: usize, s: usize) -> QuadSample {
        QuadSample::Stored(s)
    }

    fn draw_sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> QuadSample {
        let ag = &self.agents[k];
        if self.online {
            let data = Normal::new(ag.mean_a, self.data_std).expect("finite std");
            let noise = Normal::new(0.0, self.noise_std).expect("finite std");
            let a = DVector::from_fn(self.dim_x, |_, _| data.sample(rng));
            let e = DVector::from_fn(self.dim_y, |_, _| noise.sample(rng));
            QuadSample::Fresh { a, e }
        } else {
            QuadSample::Stored(rng.random_range(0..ag.a.nrows()))
        }
    }

    fn grad_loss(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, sample: &QuadSample) -> Grad {
        let ag = &self.agents[k];
        let (a, e) = self.sample_parts(k, sample);
        let gx = &a * a.dot(x) + ag.coupling.tr_mul(y);
        let gy = &ag.coupling * x + e - y * self.nu;
        (gx, gy)
    }

    fn local_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>) -> Grad {
        let ag = &self.agents[k];
        let gx = &ag.second_moment * x + ag.coupling.tr_mul(y);
        let gy = &ag.coupling * x + &ag.mean_noise - y * self.nu;
        (gx, gy)
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_product(
        &self,
        k: usize,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        sample: &QuadSample,
        dx: &DVector<f64>,
        dy: &DVector<f64>,
    ) -> Option<Grad> {
        let ag = &self.agents[k];
        let (a, _) = self.sample_parts(k, sample);
        let hx = &a * a.dot(dx) + ag.coupling.tr_mul(dy);
        let hy = &ag.coupling * dx - dy * self.nu;
        Some((hx, hy))
    }
}

/// `Q_k = |x|^2/2 + x^T M_k y - nu/2 |y|^2 + u^T x + v^T y` over a finite set of
/// `(u, v)` samples per agent. Its saddle has a closed form.
#[derive(Debug, Clone)]
pub struct BilinearSaddle {
    coupling: Vec<DMatrix<f64>>,
    u: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    nu: f64,
}

impl BilinearSaddle {
    pub fn random(agents: usize, dim_x: usize, dim_y: usize, samples: usize, nu: f64, seed: u64) -> Result<Self> {
        if agents == 0 || dim_x == 0 || dim_y == 0 || samples == 0 || !(nu > 0.0) {
            return Err(Error::InvalidParameter("bilinear problem needs positive sizes and nu".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut coupling = Vec::new();
        let mut u = Vec::new();
        let mut v = Vec::new();
        for k in 0..agents {
            let shift = k as f64 / agents as f64;
            coupling.push(DMatrix::from_fn(dim_x, dim_y, |_, _| 0.5 * std.sample(&mut rng)));
            u.push(DMatrix::from_fn(samples, dim_x, |_, _| shift + std.sample(&mut rng)));
            v.push(DMatrix::from_fn(samples, dim_y, |_, _| -shift + std.sample(&mut rng)));
        }
        Ok(Self { coupling, u, v, nu })
    }

    fn means(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let kk = self.coupling.len() as f64;
        let (d1, d2) = self.dims();
        let mut m = DMatrix::zeros(d1, d2);
        let mut u = DVector::zeros(d1);
        let mut v = DVector::zeros(d2);
        for k in 0..self.coupling.len() {
            m += &self.coupling[k];
            u += self.u[k].row_mean().transpose();
            v += self.v[k].row_mean().transpose();
        }
        (m / kk, u / kk, v / kk)
    }

    /// `y* = (M^T M + nu I)^{-1} (v - M^T u)`, `x* = -M y* - u` with averaged data.
    pub fn saddle_point(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let (m, u, v) = self.means();
        let d2 = m.ncols();
        let lhs = m.tr_mul(&m) + DMatrix::identity(d2, d2) * self.nu;
        let y = lhs
            .cholesky()
            .ok_or_else(|| Error::Numeric("bilinear saddle system not positive definite".into()))?
            .solve(&(v - m.tr_mul(&u)));
        let x = -(&m * &y) - u;
        Ok((x, y))
    }
}

impl MinimaxProblem for BilinearSaddle {
    type Sample = usize;

    fn dims(&self) -> (usize, usize) {
        (self.coupling[0].nrows(), self.coupling[0].ncols())
    }

    fn agent_count(&self) -> usize {
        self.coupling.len()
    }

    fn local_size(&self, k: usize) -> Option<usize> {
        Some(self.u[k].nrows())
    }

    fn stored_sample(&self, _k: usize, s: usize) -> usize {
        s
    }

    fn draw_sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> usize {
        rng.random_range(0..self.u[k].nrows())
    }

    fn grad_loss(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, s: &usize) -> Grad {
        let m = &self.coupling[k];
        let gx = x + m * y + self.u[k].row(*s).transpose();
        let gy = m.tr_mul(x) - y * self.nu + self.v[k].row(*s).transpose();
        (gx, gy)
    }

    fn local_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>) -> Grad {
        let m = &self.coupling[k];
        let gx = x + m * y + self.u[k].row_mean().transpose();
        let gy = m.tr_mul(x) - y * self.nu + self.v[k].row_mean().transpose();
        (gx, gy)
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_product(
        &self,
        k: usize,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        _s: &usize,
        dx: &DVector<f64>,
        dy: &DVector<f64>,
    ) -> Option<Grad> {
        let m = &self.coupling[k];
        Some((dx + m * dy, m.tr_mul(dx) - dy * self.nu))
    }
}

/// Hides the Hessian-vector products of the wrapped problem.
#[derive(Debug, Clone)]
pub struct WithoutHessian<P>(pub P);

impl<P: MinimaxProblem> MinimaxProblem for WithoutHessian<P> {
    type Sample = P::Sample;

    fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
    fn agent_count(&self) -> usize {
        self.0.agent_count()
    }
    fn local_size(&self, k: usize) -> Option<usize> {
        self.0.local_size(k)
    }
    fn stored_sample(&self, k: usize, s: usize) -> P::Sample {
        self.0.stored_sample(k, s)
    }
    fn draw_sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> P::Sample {
        self.0.draw_sample(k, rng)
    }
    fn grad_loss(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, s: &P::Sample) -> Grad {
        self.0.grad_loss(k, x, y, s)
    }
    fn local_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>) -> Grad {
        self.0.local_grad(k, x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> QuadraticMinimax {
        make_quadratic(&QuadraticConfig::desk_scale(11)).unwrap()
    }

    fn sampled_loss(p: &QuadraticMinimax, k: usize, x: &DVector<f64>, y: &DVector<f64>, s: usize) -> f64 {
        let a = p.agents[k].a.row(s).transpose();
        let e = p.agents[k].e.row(s).transpose();
        let ax = a.dot(x);
        0.5 * ax * ax + y.dot(&(&p.agents[k].coupling * x + e)) - 0.5 * p.nu * y.norm_squared()
    }

    #[test]
    fn gradient_at_origin_is_noise() {
        let p = desk();
        let x = DVector::zeros(16);
        let y = DVector::zeros(16);
        let (gx, gy) = p.grad_loss(2, &x, &y, &QuadSample::Stored(5));
        assert_eq!(gx.amax(), 0.0);
        assert_eq!(gy, p.agents[2].e.row(5).transpose());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let h = 1e-5;
        for trial in 0..20 {
            let k = trial % p.agent_count();
            let s = trial * 7 % 200;
            let x = DVector::from_fn(16, |_, _| unit.sample(&mut rng));
            let y = DVector::from_fn(16, |_, _| unit.sample(&mut rng));
            let (gx, gy) = p.grad_loss(k, &x, &y, &QuadSample::Stored(s));
            let mut fd_x = DVector::zeros(16);
            for i in 0..16 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                fd_x[i] = (sampled_loss(&p, k, &xp, &y, s) - sampled_loss(&p, k, &xm, &y, s)) / (2.0 * h);
            }
            let mut fd_y = DVector::zeros(16);
            for i in 0..16 {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[i] += h;
                ym[i] -= h;
                fd_y[i] = (sampled_loss(&p, k, &x, &yp, s) - sampled_loss(&p, k, &x, &ym, s)) / (2.0 * h);
            }
            assert!((&fd_x - &gx).norm() / gx.norm() <= 1e-5);
            assert!((&fd_y - &gy).norm() / gy.norm() <= 1e-5);
        }
    }

    #[test]
    fn full_batch_average_is_local_gradient() {
        let p = desk();
        let x = DVector::from_fn(16, |i, _| (i as f64).sin());
        let y = DVector::from_fn(16, |i, _| (i as f64).cos());
        for k in 0..p.agent_count() {
            let n = p.local_size(k).unwrap();
            let mut sx = DVector::zeros(16);
            let mut sy = DVector::zeros(16);
            for s in 0..n {
                let (gx, gy) = p.grad_loss(k, &x, &y, &p.stored_sample(k, s));
                sx += gx;
                sy += gy;
            }
            let (lx, ly) = p.local_grad(k, &x, &y);
            assert!((sx / n as f64 - lx).amax() <= 1e-10);
            assert!((sy / n as f64 - ly).amax() <= 1e-10);
        }
    }

    #[test]
    fn single_sample_dataset() {
        let cfg = QuadraticConfig { samples_per_agent: Some(1), ..QuadraticConfig::desk_scale(2) };
        let p = make_quadratic(&cfg).unwrap();
        let x = DVector::from_element(16, 0.3);
        let y = DVector::from_element(16, -0.2);
        let (gx, gy) = p.grad_loss(1, &x, &y, &QuadSample::Stored(0));
        let (lx, ly) = p.local_grad(1, &x, &y);
        assert!((gx - lx).amax() < 1e-12);
        assert!((gy - ly).amax() < 1e-12);
    }

    #[test]
    fn nu_enters_linearly() {
        let p = desk();
        let mut p2 = p.clone();
        p2.nu = 2.0 * p.nu;
        let x = DVector::from_element(16, 0.1);
        let y = DVector::from_fn(16, |i, _| i as f64 / 10.0);
        let (_, gy1) = p.grad_loss(0, &x, &y, &QuadSample::Stored(0));
        let (_, gy2) = p2.grad_loss(0, &x, &y, &QuadSample::Stored(0));
        assert!((gy1 - gy2 - &y * p.nu).amax() < 1e-12);
    }

    #[test]
    fn saddle_point_is_stationary() {
        let p = desk();
        let (x, y) = p.saddle_point().unwrap();
        let (rx, ry) = saddle_residual(&p, &x, &y).unwrap();
        assert!(rx <= 1e-8 && ry <= 1e-8, "{rx} {ry}");
    }

    #[test]
    fn residual_at_origin_is_mean_noise() {
        let p = desk();
        let zero = DVector::zeros(16);
        let (rx, ry) = saddle_residual(&p, &zero, &zero).unwrap();
        let mut mean_e = DVector::zeros(16);
        for ag in &p.agents {
            mean_e += ag.e.row_mean().transpose();
        }
        mean_e /= p.agent_count() as f64;
        assert_eq!(rx, 0.0);
        assert!((ry - mean_e.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn y_hessian_is_minus_nu() {
        let p = desk();
        let h = p.hessian_yy();
        let eig = h.symmetric_eigenvalues();
        assert!(eig.iter().all(|v| (v + p.nu()).abs() < 1e-14));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = desk();
        let bad = DVector::zeros(3);
        let y = DVector::zeros(16);
        assert!(matches!(grad_loss(&p, 0, &bad, &y, &QuadSample::Stored(0)), Err(Error::ShapeMismatch(_))));
        assert!(saddle_residual(&p, &bad, &y).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = QuadraticConfig { nu: 0.0, ..QuadraticConfig::desk_scale(0) };
        assert!(make_quadratic(&cfg).is_err());
        let cfg = QuadraticConfig { dim_x: 0, ..QuadraticConfig::desk_scale(0) };
        assert!(make_quadratic(&cfg).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = desk();
        let b = desk();
        assert_eq!(a.agents[3].a, b.agents[3].a);
        assert_eq!(a.agents[3].coupling, b.agents[3].coupling);
    }

    #[test]
    fn bilinear_closed_form_saddle() {
        let p = BilinearSaddle::random(4, 3, 2, 10, 2.0, 9).unwrap();
        let (x, y) = p.saddle_point().unwrap();
        let (rx, ry) = saddle_residual(&p, &x, &y).unwrap();
        assert!(rx < 1e-20 && ry < 1e-20);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = QuadraticConfig { agents: 3, dim_x: 2, dim_y: 3, samples_per_agent: Some(5), ..QuadraticConfig::desk_scale(1) };
        let p = make_quadratic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save_csv(dir.path()).unwrap();
        let q = QuadraticMinimax::load_csv(dir.path(), p.nu()).unwrap();
        let x = DVector::from_element(2, 0.7);
        let y = DVector::from_element(3, -0.4);
        for k in 0..3 {
            let (a, b) = p.local_grad(k, &x, &y);
            let (c, d) = q.local_grad(k, &x, &y);
            assert!((a - c).amax() < 1e-12 && (b - d).amax() < 1e-12);
        }
    }

    #[test]
    fn without_hessian_hides_products() {
        let p = WithoutHessian(desk());
        assert!(!p.has_hessian());
        let z = DVector::zeros(16);
        assert!(p.hessian_product(0, &z, &z, &QuadSample::Stored(0), &z, &z).is_none());
    }
}
