//! Symmetric finitely-supported random walks on `Z^d`.
//!
//! A [`StepLaw`] carries its covariance `Q`, the covariance norm
//! `||x|| = sqrt(x^T Q^-1 x / d)` and the scale `D = det(Q)^(1/2d)`. Exact
//! n-step pmfs are obtained by iterated sparse convolution; bridges are
//! sampled step by step from those exact pmfs.

use std::fmt;
use std::io::Write;
use std::ops::{Add, Neg, Sub};

use nalgebra::DMatrix;
use rand::Rng;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::stats::Moments;

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 8;

const SYMMETRY_TOL: f64 = 1e-12;
/// Relative slack used when comparing squared norms against integer bounds,
/// so that exact lattice boundaries are inclusive despite rounding in `Q^-1`.
pub const NORM_BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkError {
    #[error("invalid step law: {0}")]
    InvalidLaw(String),
    #[error("step law is not symmetric at {0}")]
    Asymmetric(String),
    #[error("support does not generate Z^{0}")]
    NotGenerating(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("pmf grid exceeds the cap of {0} points")]
    SizeCap(usize),
    #[error("endpoint {0} is unreachable in {1} steps")]
    Unreachable(String, usize),
    #[error("bridge horizon {horizon} exceeded by n = {n}")]
    HorizonExceeded { n: usize, horizon: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, WalkError>;

/// A point of `Z^d`, `d <= MAX_DIM`; unused coordinates are zero.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(pub [i32; MAX_DIM]);

impl Site {
    pub const ORIGIN: Site = Site([0; MAX_DIM]);

    pub fn from_slice(coords: &[i32]) -> Result<Site> {
        if coords.len() > MAX_DIM {
            return Err(WalkError::DimensionMismatch { expected: MAX_DIM, got: coords.len() });
        }
        let mut s = [0; MAX_DIM];
        s[..coords.len()].copy_from_slice(coords);
        Ok(Site(s))
    }

    /// `v` times the `i`-th unit vector.
    pub fn axis(i: usize, v: i32) -> Site {
        let mut s = Site::ORIGIN;
        s.0[i] = v;
        s
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }

    pub fn l1(&self) -> i64 {
        self.0.iter().map(|c| (*c as i64).abs()).sum()
    }
}

impl Add for Site {
    type Output = Site;
    #[inline]
    fn add(self, o: Site) -> Site {
        let mut s = self.0;
        for (a, b) in s.iter_mut().zip(o.0) {
            *a += b;
        }
        Site(s)
    }
}

impl Sub for Site {
    type Output = Site;
    #[inline]
    fn sub(self, o: Site) -> Site {
        self + (-o)
    }
}

impl Neg for Site {
    type Output = Site;
    #[inline]
    fn neg(self) -> Site {
        Site(self.0.map(|c| -c))
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.0.iter().rposition(|c| *c != 0).map_or(1, |i| i + 1);
        write!(f, "(")?;
        for (i, c) in self.0[..last].iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// One-step transition law of a symmetric walk on `Z^d`.
#[derive(Debug, Clone)]
pub struct StepLaw {
    dim: usize,
    steps: Vec<Site>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    q: DMatrix<f64>,
    q_inv: Vec<f64>,
    scale: f64,
    parity: Option<[i32; MAX_DIM]>,
    max_step_norm: f64,
    srw: bool,
}

impl StepLaw {
    /// Validates total mass, symmetry, that the support generates `Z^d`,
    /// and that `Q` is positive definite. Duplicate points are merged and
    /// zero-probability points dropped.
    pub fn new(dim: usize, support: &[(Vec<i32>, f64)]) -> Result<StepLaw> {
        if dim == 0 || dim > MAX_DIM {
            return Err(WalkError::InvalidLaw(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        let mut merged: Vec<(Site, f64)> = Vec::new();
        for (x, p) in support {
            if x.len() != dim {
                return Err(WalkError::DimensionMismatch { expected: dim, got: x.len() });
            }
            if !p.is_finite() || *p < 0.0 {
                return Err(WalkError::InvalidLaw(format!("probability {p} at {x:?}")));
            }
            if *p == 0.0 {
                continue;
            }
            let s = Site::from_slice(x)?;
            match merged.iter_mut().find(|(t, _)| *t == s) {
                Some(entry) => entry.1 += p,
                None => merged.push((s, *p)),
            }
        }
        merged.sort_by(|a, b| a.0.cmp(&b.0));
        let total: f64 = merged.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(WalkError::InvalidLaw(format!("total mass {total} != 1")));
        }
        for (s, p) in &merged {
            let mirror = merged.iter().find(|(t, _)| *t == -*s).map_or(0.0, |(_, q)| *q);
            if (p - mirror).abs() > SYMMETRY_TOL {
                return Err(WalkError::Asymmetric(format!("x = {s}: p(x) = {p} but p(-x) = {mirror}")));
            }
        }
        if !generates_lattice(dim, merged.iter().map(|(s, _)| s)) {
            return Err(WalkError::NotGenerating(dim));
        }
        let mut q = DMatrix::<f64>::zeros(dim, dim);
        for (s, p) in &merged {
            for i in 0..dim {
                for j in 0..dim {
                    q[(i, j)] += p * s.0[i] as f64 * s.0[j] as f64;
                }
            }
        }
        let chol = q
            .clone()
            .cholesky()
            .ok_or_else(|| WalkError::InvalidLaw("covariance is not positive definite".into()))?;
        let inv = chol.inverse();
        let det = q.determinant();
        let q_inv = (0..dim * dim).map(|k| inv[(k / dim, k % dim)]).collect();
        let steps: Vec<Site> = merged.iter().map(|(s, _)| *s).collect();
        let probs: Vec<f64> = merged.iter().map(|(_, p)| *p).collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let parity = period_two_character(dim, &steps);
        let srw = steps.len() == 2 * dim
            && steps.iter().all(|s| s.l1() == 1)
            && probs.iter().all(|p| (p - 0.5 / dim as f64).abs() < 1e-15);
        let mut law = StepLaw {
            dim,
            steps,
            probs,
            cdf,
            q,
            q_inv,
            scale: det.powf(1.0 / (2.0 * dim as f64)),
            parity,
            max_step_norm: 0.0,
            srw,
        };
        law.max_step_norm = law.steps.iter().map(|s| law.norm(*s)).fold(0.0, f64::max);
        Ok(law)
    }

    /// Simple random walk: `+-e_i` with probability `1/(2d)` each.
    pub fn srw(dim: usize) -> Result<StepLaw> {
        let w = 0.5 / dim as f64;
        let support: Vec<(Vec<i32>, f64)> = (0..dim)
            .flat_map(|i| {
                [1, -1].into_iter().map(move |sgn| {
                    let mut x = vec![0; dim];
                    x[i] = sgn;
                    (x, w)
                })
            })
            .collect();
        StepLaw::new(dim, &support)
    }

    /// Simple random walk that stays put with probability 1/2.
    pub fn lazy_srw(dim: usize) -> Result<StepLaw> {
        let w = 0.25 / dim as f64;
        let mut support = vec![(vec![0; dim], 0.5)];
        for i in 0..dim {
            for sgn in [1, -1] {
                let mut x = vec![0; dim];
                x[i] = sgn;
                support.push((x, w));
            }
        }
        StepLaw::new(dim, &support)
    }

    /// `srw_d1` .. `srw_d8` and `lazy_srw_d1` .. `lazy_srw_d8`.
    pub fn from_preset(name: &str) -> Result<StepLaw> {
        let parse = |rest: &str| -> Result<usize> {
            rest.parse::<usize>()
                .map_err(|_| WalkError::InvalidLaw(format!("unknown step preset '{name}'")))
        };
        if let Some(rest) = name.strip_prefix("lazy_srw_d") {
            StepLaw::lazy_srw(parse(rest)?)
        } else if let Some(rest) = name.strip_prefix("srw_d") {
            StepLaw::srw(parse(rest)?)
        } else {
            Err(WalkError::InvalidLaw(format!("unknown step preset '{name}'")))
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.steps.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `D = det(Q)^(1/2d)`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// True for the period-2 walks, whose time-`n` pmf lives on one parity class.
    pub fn is_periodic(&self) -> bool {
        self.parity.is_some()
    }

    pub fn is_srw(&self) -> bool {
        self.srw
    }

    pub fn max_step_norm(&self) -> f64 {
        self.max_step_norm
    }

    /// Whether `y` lies in the parity class reachable at time `n`.
    pub fn parity_compatible(&self, n: usize, y: Site) -> bool {
        match self.parity {
            None => true,
            Some(a) => {
                let chi: i64 = (0..self.dim).map(|i| a[i] as i64 * y.0[i] as i64).sum();
                chi.rem_euclid(2) == (n % 2) as i64
            }
        }
    }

    /// `x^T Q^-1 x / d`.
    #[inline]
    pub fn norm_sq(&self, x: Site) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            let xi = x.0[i] as f64;
            if xi == 0.0 {
                continue;
            }
            let row = &self.q_inv[i * d..(i + 1) * d];
            let mut s = 0.0;
            for j in 0..d {
                s += row[j] * x.0[j] as f64;
            }
            acc += xi * s;
        }
        (acc / d as f64).max(0.0)
    }

    #[inline]
    pub fn norm(&self, x: Site) -> f64 {
        self.norm_sq(x).sqrt()
    }

    /// `||x|| <= sqrt(bound)`, inclusive up to [`NORM_BOUNDARY_TOL`].
    #[inline]
    pub fn norm_sq_within(&self, x: Site, bound: f64) -> bool {
        self.norm_sq(x) <= bound * (1.0 + NORM_BOUNDARY_TOL) + NORM_BOUNDARY_TOL
    }

    /// Covariance norm of a coordinate vector, checking its dimension.
    pub fn covariance_norm(&self, x: &[i32]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(WalkError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.norm(Site::from_slice(x)?))
    }

    /// Step for a uniform variate `u` in `[0, 1)`.
    #[inline]
    pub fn step_from_uniform(&self, u: f64) -> Site {
        let k = self.cdf.partition_point(|c| *c <= u).min(self.steps.len() - 1);
        self.steps[k]
    }

    #[inline]
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> Site {
        self.step_from_uniform(rng.gen())
    }

    pub fn prob(&self, z: Site) -> f64 {
        self.steps.iter().position(|s| *s == z).map_or(0.0, |k| self.probs[k])
    }
}

/// Integer row reduction: the support generates `Z^d` iff the echelon form
/// has full rank with unit pivots.
fn generates_lattice<'a>(dim: usize, steps: impl Iterator<Item = &'a Site>) -> bool {
    let mut rows: Vec<Vec<i64>> = steps.map(|s| s.0[..dim].iter().map(|c| *c as i64).collect()).collect();
    let mut pivot_row = 0;
    let mut index: i64 = 1;
    for col in 0..dim {
        loop {
            let nonzero: Vec<usize> = (pivot_row..rows.len()).filter(|&r| rows[r][col] != 0).collect();
            if nonzero.len() <= 1 {
                break;
            }
            let best = *nonzero.iter().min_by_key(|&&r| rows[r][col].abs()).unwrap();
            let pivot = rows[best].clone();
            for &r in &nonzero {
                if r != best {
                    let f = rows[r][col] / pivot[col];
                    for (a, b) in rows[r].iter_mut().zip(&pivot) {
                        *a -= f * b;
                    }
                }
            }
        }
        match (pivot_row..rows.len()).find(|&r| rows[r][col] != 0) {
            Some(r) => {
                rows.swap(pivot_row, r);
                index *= rows[pivot_row][col].abs();
                pivot_row += 1;
            }
            None => return false,
        }
    }
    index == 1
}

/// The parity character `a` with `a . x` odd for every step, if one exists.
fn period_two_character(dim: usize, steps: &[Site]) -> Option<[i32; MAX_DIM]> {
    (1u32..(1 << dim)).find_map(|mask| {
        let mut a = [0; MAX_DIM];
        for (i, ai) in a.iter_mut().enumerate().take(dim) {
            *ai = ((mask >> i) & 1) as i32;
        }
        let odd = steps.iter().all(|s| {
            let chi: i64 = (0..dim).map(|i| a[i] as i64 * s.0[i] as i64).sum();
            chi.rem_euclid(2) == 1
        });
        odd.then_some(a)
    })
}

/// Pruning and size limits for pmf grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmfOptions {
    /// Entries below this mass are dropped after each convolution; the
    /// dropped mass is accumulated in [`PmfGrid::deficit`].
    pub prune_below: f64,
    pub max_points: usize,
}

impl Default for PmfOptions {
    fn default() -> Self {
        Self { prune_below: 0.0, max_points: 20_000_000 }
    }
}

/// Sparse pmf of `S(n)` started at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfGrid {
    time: usize,
    probs: FxHashMap<Site, f64>,
    deficit: f64,
}

impl PmfGrid {
    pub fn point_mass() -> PmfGrid {
        let mut probs = FxHashMap::default();
        probs.insert(Site::ORIGIN, 1.0);
        PmfGrid { time: 0, probs, deficit: 0.0 }
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn get(&self, x: Site) -> f64 {
        self.probs.get(&x).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Mass removed by pruning.
    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn total_mass(&self) -> f64 {
        self.sorted().iter().map(|(_, p)| p).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &f64)> {
        self.probs.iter()
    }

    /// Entries sorted by site, for reproducible output.
    pub fn sorted(&self) -> Vec<(Site, f64)> {
        let mut v: Vec<(Site, f64)> = self.probs.iter().map(|(s, p)| (*s, *p)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// One more step of the walk.
    pub fn step(&self, law: &StepLaw, opts: &PmfOptions) -> Result<PmfGrid> {
        let mut next: FxHashMap<Site, f64> = FxHashMap::default();
        next.reserve(self.probs.len() * 2);
        for (x, p) in self.sorted() {
            for (z, w) in law.support() {
                *next.entry(x + z).or_insert(0.0) += p * w;
            }
        }
        PmfGrid { time: self.time + 1, probs: next, deficit: self.deficit }.pruned(opts)
    }

    /// Law of the sum of independent walks distributed as `self` and `other`.
    pub fn convolve(&self, other: &PmfGrid, opts: &PmfOptions) -> Result<PmfGrid> {
        let mut out: FxHashMap<Site, f64> = FxHashMap::default();
        let b = other.sorted();
        for (x, p) in self.sorted() {
            for (y, q) in &b {
                *out.entry(x + *y).or_insert(0.0) += p * q;
            }
        }
        PmfGrid { time: self.time + other.time, probs: out, deficit: self.deficit + other.deficit }.pruned(opts)
    }

    fn pruned(mut self, opts: &PmfOptions) -> Result<PmfGrid> {
        if opts.prune_below > 0.0 {
            let mut dropped: Vec<(Site, f64)> =
                self.probs.iter().filter(|(_, p)| **p < opts.prune_below).map(|(s, p)| (*s, *p)).collect();
            dropped.sort_by(|a, b| a.0.cmp(&b.0));
            for (s, p) in dropped {
                self.probs.remove(&s);
                self.deficit += p;
            }
        }
        if self.probs.len() > opts.max_points {
            return Err(WalkError::SizeCap(opts.max_points));
        }
        Ok(self)
    }

    /// CSV export: one `x_1,...,x_d,probability` row per point.
    pub fn write_csv<W: Write>(&self, dim: usize, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        writeln!(out, "{},probability", header.join(","))?;
        for (s, p) in self.sorted() {
            let coords: Vec<String> = s.coords(dim).iter().map(|c| c.to_string()).collect();
            writeln!(out, "{},{:e}", coords.join(","), p)?;
        }
        Ok(())
    }
}

/// Exact pmf of `S(n)` by `n` sparse convolutions.
pub fn n_step_pmf(law: &StepLaw, n: usize, opts: &PmfOptions) -> Result<PmfGrid> {
    let mut grid = PmfGrid::point_mass();
    for _ in 0..n {
        grid = grid.step(law, opts)?;
    }
    Ok(grid)
}

/// Exact transition probability against its Gaussian approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcltComparison {
    pub exact: f64,
    pub gaussian: f64,
    /// `exact / gaussian`; `None` when `y` is in the wrong parity class.
    pub ratio: Option<f64>,
    pub parity_ok: bool,
}

/// Gaussian reference `(2 pi n)^(-d/2) D^-d exp(-d ||y||^2 / 2n)`, doubled for
/// period-2 walks on the reachable parity class.
pub fn lclt_gaussian(law: &StepLaw, n: usize, y: Site) -> f64 {
    let d = law.dim() as f64;
    let nf = n as f64;
    let density =
        (2.0 * std::f64::consts::PI * nf).powf(-d / 2.0) * law.scale().powf(-d) * (-d * law.norm_sq(y) / (2.0 * nf)).exp();
    if law.is_periodic() {
        2.0 * density
    } else {
        density
    }
}

pub fn lclt_compare_with(law: &StepLaw, grid: &PmfGrid, y: Site) -> Result<LcltComparison> {
    let n = grid.time();
    if n == 0 {
        return Err(WalkError::InvalidArgument("n must be >= 1".into()));
    }
    let parity_ok = law.parity_compatible(n, y);
    let gaussian = lclt_gaussian(law, n, y);
    if !parity_ok {
        return Ok(LcltComparison { exact: 0.0, gaussian, ratio: None, parity_ok });
    }
    let exact = if law.norm(y) > n as f64 * law.max_step_norm() * (1.0 + 1e-12) { 0.0 } else { grid.get(y) };
    Ok(LcltComparison { exact, gaussian, ratio: Some(exact / gaussian), parity_ok })
}

pub fn lclt_compare(law: &StepLaw, n: usize, y: Site) -> Result<LcltComparison> {
    let grid = n_step_pmf(law, n, &PmfOptions::default())?;
    lclt_compare_with(law, &grid, y)
}

/// Truncated Green function `sum_{t <= horizon} p^t(o, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenEstimate {
    pub value: f64,
    pub horizon: usize,
    /// `G(x) D^d ||x||^(d-2)`; only for `d >= 3` and `x != o`.
    pub decay_ratio: Option<f64>,
}

/// Simple random walks use an exact coordinate-splitting recursion; other
/// laws are summed over iterated pmf grids.
pub fn green_function(law: &StepLaw, x: Site, horizon: usize, opts: &PmfOptions) -> Result<GreenEstimate> {
    let value = if law.is_srw() {
        srw_green_partial(law.dim(), x, horizon)
    } else {
        green_by_convolution(law, x, horizon, opts)?
    };
    let d = law.dim();
    let decay_ratio =
        (d >= 3 && x != Site::ORIGIN).then(|| value * law.scale().powi(d as i32) * law.norm(x).powi(d as i32 - 2));
    Ok(GreenEstimate { value, horizon, decay_ratio })
}

pub fn green_by_convolution(law: &StepLaw, x: Site, horizon: usize, opts: &PmfOptions) -> Result<f64> {
    let mut grid = PmfGrid::point_mass();
    let mut total = grid.get(x);
    for _ in 0..horizon {
        grid = grid.step(law, opts)?;
        total += grid.get(x);
    }
    Ok(total)
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    lf
}

/// `sum_{t <= horizon} P(S(t) = x)` for simple random walk in `dim`
/// dimensions. A step picks a coordinate uniformly, so the walk on the first
/// `r + 1` coordinates splits binomially into its walk on the last `r`
/// coordinates and a one-dimensional walk.
pub fn srw_green_partial(dim: usize, x: Site, horizon: usize) -> f64 {
    let lf = log_factorials(horizon);
    let one_dim = |k: usize, xi: i32| -> f64 {
        let a = xi.unsigned_abs() as usize;
        if a > k || (k - a) % 2 != 0 {
            0.0
        } else {
            (lf[k] - lf[(k + a) / 2] - lf[(k - a) / 2] - k as f64 * std::f64::consts::LN_2).exp()
        }
    };
    let mut walk: Vec<f64> = (0..=horizon).map(|t| one_dim(t, x.0[dim - 1])).collect();
    for (r, coord) in (1..dim).zip((0..dim - 1).rev()) {
        let s = 1.0 / (r + 1) as f64;
        let (ls, lr) = (s.ln(), (1.0 - s).ln());
        let line: Vec<f64> = (0..=horizon).map(|k| one_dim(k, x.0[coord])).collect();
        let mut next = vec![0.0; horizon + 1];
        for (t, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..=t {
                if line[k] == 0.0 || walk[t - k] == 0.0 {
                    continue;
                }
                let binom = (lf[t] - lf[k] - lf[t - k] + k as f64 * ls + (t - k) as f64 * lr).exp();
                acc += binom * line[k] * walk[t - k];
            }
            *out = acc;
        }
        walk = next;
    }
    walk.iter().sum()
}

/// Number of lattice points with `||x|| <= radius` (Fincke–Pohst enumeration).
pub fn lattice_points_within(law: &StepLaw, radius: f64) -> u64 {
    let d = law.dim();
    let mut a: Vec<Vec<f64>> =
        (0..d).map(|i| (0..d).map(|j| law.q_inv[i * d + j] / d as f64).collect()).collect();
    for i in 0..d {
        for j in i + 1..d {
            a[j][i] = a[i][j];
            a[i][j] /= a[i][i];
        }
        for k in i + 1..d {
            for l in k..d {
                a[k][l] -= a[k][i] * a[i][l];
            }
        }
    }
    let bound = radius * radius * (1.0 + NORM_BOUNDARY_TOL) + NORM_BOUNDARY_TOL;
    let mut x = vec![0i64; d];
    count_points(&a, d, d - 1, bound, &mut x)
}

fn count_points(a: &[Vec<f64>], d: usize, i: usize, budget: f64, x: &mut [i64]) -> u64 {
    let center: f64 = -(i + 1..d).map(|j| a[i][j] * x[j] as f64).sum::<f64>();
    let half = (budget.max(0.0) / a[i][i]).sqrt();
    let lo = (center - half).ceil() as i64;
    let hi = (center + half).floor() as i64;
    if hi < lo {
        return 0;
    }
    if i == 0 {
        return (hi - lo + 1) as u64;
    }
    let mut total = 0;
    for v in lo..=hi {
        x[i] = v;
        let used = a[i][i] * (v as f64 - center).powi(2);
        total += count_points(a, d, i - 1, budget - used, x);
    }
    x[i] = 0;
    total
}

/// Horizon and pmf limits for [`BridgeSampler`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeOptions {
    pub horizon: usize,
    pub pmf: PmfOptions,
}

impl BridgeOptions {
    /// 2000 steps for `d <= 2`, 256 otherwise, with pruning below `1e-16`.
    pub fn for_dim(dim: usize) -> Self {
        let horizon = if dim <= 2 { 2000 } else { 256 };
        Self { horizon, pmf: PmfOptions { prune_below: 1e-16, max_points: 20_000_000 } }
    }
}

/// Exact bridge sampler backed by cached pmf grids `p^0 .. p^n_max`.
#[derive(Debug, Clone)]
pub struct BridgeSampler {
    law: StepLaw,
    grids: Vec<PmfGrid>,
}

impl BridgeSampler {
    pub fn new(law: &StepLaw, n_max: usize) -> Result<BridgeSampler> {
        Self::with_options(law, n_max, BridgeOptions::for_dim(law.dim()))
    }

    pub fn with_options(law: &StepLaw, n_max: usize, opts: BridgeOptions) -> Result<BridgeSampler> {
        if n_max > opts.horizon {
            return Err(WalkError::HorizonExceeded { n: n_max, horizon: opts.horizon });
        }
        let mut grids = vec![PmfGrid::point_mass()];
        let mut points = 1usize;
        for t in 0..n_max {
            let next = grids[t].step(law, &opts.pmf)?;
            points += next.len();
            if points > opts.pmf.max_points {
                return Err(WalkError::SizeCap(opts.pmf.max_points));
            }
            grids.push(next);
        }
        Ok(BridgeSampler { law: law.clone(), grids })
    }

    pub fn law(&self) -> &StepLaw {
        &self.law
    }

    pub fn n_max(&self) -> usize {
        self.grids.len() - 1
    }

    /// `p^t(o, x)` from the cache.
    pub fn transition(&self, t: usize, x: Site) -> f64 {
        self.grids[t].get(x)
    }

    /// Path `S(0) = o, ..., S(n) = x` drawn from the exact bridge law: from
    /// `s` at time `t` the step `z` has weight `p(z) p^(n-t-1)(s + z, x)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, x: Site, rng: &mut R) -> Result<Vec<Site>> {
        if n > self.n_max() {
            return Err(WalkError::HorizonExceeded { n, horizon: self.n_max() });
        }
        if self.transition(n, x) <= 0.0 {
            return Err(WalkError::Unreachable(x.to_string(), n));
        }
        let mut path = Vec::with_capacity(n + 1);
        path.push(Site::ORIGIN);
        let mut weights = vec![0.0; self.law.steps.len()];
        for t in 0..n {
            let s = path[t];
            let remaining = n - t - 1;
            let mut total = 0.0;
            for (w, (z, p)) in weights.iter_mut().zip(self.law.support()) {
                *w = p * self.transition(remaining, x - (s + z));
                total += *w;
            }
            if total <= 0.0 {
                return Err(WalkError::Unreachable(x.to_string(), n));
            }
            let mut u = rng.gen::<f64>() * total;
            let mut pick = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
            for (k, w) in weights.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    pick = k;
                    break;
                }
                u -= w;
            }
            path.push(s + self.law.steps[pick]);
        }
        Ok(path)
    }
}

/// One-shot bridge sample.
pub fn sample_bridge<R: Rng + ?Sized>(law: &StepLaw, n: usize, x: Site, rng: &mut R) -> Result<Vec<Site>> {
    BridgeSampler::new(law, n)?.sample(n, x, rng)
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl From<Moments> for Estimate {
    fn from(m: Moments) -> Self {
        Estimate { mean: m.mean(), std_error: m.std_error(), samples: m.count() }
    }
}

/// Estimate of `E[ ||S(k)||^2 | S(n) = x ]` from exact bridges.
pub fn conditional_second_moment<R: Rng + ?Sized>(
    sampler: &BridgeSampler,
    k: usize,
    n: usize,
    x: Site,
    replicates: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if k > n {
        return Err(WalkError::InvalidArgument(format!("k = {k} exceeds n = {n}")));
    }
    let law = sampler.law();
    if k == n {
        if sampler.transition(n, x) <= 0.0 {
            return Err(WalkError::Unreachable(x.to_string(), n));
        }
        return Ok(Estimate { mean: law.norm_sq(x), std_error: 0.0, samples: replicates as u64 });
    }
    let mut m = Moments::new();
    for _ in 0..replicates {
        let path = sampler.sample(n, x, rng)?;
        m.push(law.norm_sq(path[k]));
    }
    Ok(m.into())
}

/// Estimate of `E ||S(n)||^2` (which equals `n`) by forward sampling.
pub fn second_moment<R: Rng + ?Sized>(law: &StepLaw, n: usize, replicates: usize, rng: &mut R) -> Estimate {
    let mut m = Moments::new();
    for _ in 0..replicates {
        let mut s = Site::ORIGIN;
        for _ in 0..n {
            s = s + law.sample_step(rng);
        }
        m.push(law.norm_sq(s));
    }
    m.into()
}
