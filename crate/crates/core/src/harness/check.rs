//! The analytic check suite and the subtree-dominance experiment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{ExperimentConfig, HarnessError, Model, Result};
use crate::branching::{extinction_probs, oracle::extinct_within, ProgenyLaw, TnmSampler};
use crate::resistance::{
    check_parallel_law, check_triangle, effective_resistance, measure_level, oracle::dense_effective_resistance,
    Multigraph, SolverOptions,
};
use crate::rng;
use crate::trace::embed;
use crate::walk::{lclt_gaussian, n_step_pmf, second_moment, PmfOptions, Site, StepLaw};

/// One line of the check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(check: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { check: check.into(), passed: value <= threshold, value, threshold, detail }
    }

    fn failed(check: &str, detail: String) -> Self {
        Self { check: check.into(), passed: false, value: f64::NAN, threshold: f64::NAN, detail }
    }
}

/// A connected multigraph: a random recursive spanning tree plus
/// `extra_edges` edges, each of which repeats an existing edge with
/// probability `parallel_fraction`.
pub fn random_multigraph<R: Rng + ?Sized>(
    rng: &mut R,
    nodes: usize,
    extra_edges: usize,
    parallel_fraction: f64,
) -> Multigraph {
    let mut g = Multigraph::new(nodes);
    for v in 1..nodes {
        g.add_edge(rng.gen_range(0..v) as u32, v as u32);
    }
    for _ in 0..extra_edges {
        if g.num_edges() > 0 && rng.gen_bool(parallel_fraction) {
            let (a, b) = g.edges()[rng.gen_range(0..g.num_edges())];
            g.add_edge(a, b);
        } else if nodes >= 2 {
            let a = rng.gen_range(0..nodes);
            let b = (a + rng.gen_range(1..nodes)) % nodes;
            g.add_edge(a as u32, b as u32);
        }
    }
    g
}

fn distinct<R: Rng + ?Sized>(rng: &mut R, nodes: usize, k: usize) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(k);
    while out.len() < k {
        let v = rng.gen_range(0..nodes) as u32;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn check_stream(seed: u64, name: &str) -> ChaCha8Rng {
    rng::stream(seed, rng::tag(&format!("check/{name}")), 0)
}

fn solver_oracle(seed: u64, opts: &SolverOptions, cases: usize) -> CheckResult {
    let mut rng = check_stream(seed, "solver_oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let nodes = rng.gen_range(10..=80);
        let g = random_multigraph(&mut rng, nodes, 2 * nodes, 0.15);
        let ab = distinct(&mut rng, nodes, 2);
        let exact = dense_effective_resistance(&g, ab[0], ab[1]).expect("connected");
        match effective_resistance(&g, ab[0], ab[1], opts) {
            Ok(r) => worst = worst.max((r.value - exact).abs() / exact),
            Err(e) => return CheckResult::failed("solver_oracle", e.to_string()),
        }
    }
    CheckResult::at_most("solver_oracle", worst, 1e-8, format!("max relative error over {cases} random multigraphs"))
}

fn resistance_laws(seed: u64, opts: &SolverOptions, cases: usize) -> Vec<CheckResult> {
    let mut rng = check_stream(seed, "resistance_laws");
    let (mut parallel_bad, mut triangle_bad) = (0usize, 0usize);
    for _ in 0..cases {
        let nodes = rng.gen_range(4..=40);
        let g1 = random_multigraph(&mut rng, nodes, nodes, 0.2);
        let extra = rng.gen_range(0..nodes);
        let g2 = random_multigraph(&mut rng, nodes, extra, 0.2);
        let t = distinct(&mut rng, nodes, 3);
        match check_parallel_law(&g1, &g2, t[0], t[1], opts) {
            Ok(c) if c.holds => {}
            _ => parallel_bad += 1,
        }
        match check_triangle(&g1, t[0], t[1], t[2], opts) {
            Ok(c) if c.holds => {}
            _ => triangle_bad += 1,
        }
    }
    vec![
        CheckResult::at_most("parallel_law", parallel_bad as f64, 0.0, format!("violations over {cases} cases")),
        CheckResult::at_most("triangle", triangle_bad as f64, 0.0, format!("violations over {cases} cases")),
    ]
}

fn extinction(seed: u64, p: &ProgenyLaw) -> Vec<CheckResult> {
    let q2 = extinction_probs(&ProgenyLaw::binary(), 2).get(2);
    let mut out = vec![CheckResult::at_most(
        "extinction_recursion",
        (q2 - 0.625).abs(),
        0.0,
        format!("binary q[2] = {q2}"),
    )];
    let t = 4;
    let q = extinction_probs(p, t).get(t);
    let reps = 20_000;
    let mut rng = check_stream(seed, "extinction_mc");
    let hits = (0..reps).filter(|_| extinct_within(p, t, &mut rng)).count() as f64;
    let freq = hits / reps as f64;
    let se = (q * (1.0 - q) / reps as f64).sqrt();
    let z = match (se > 0.0, freq == q) {
        (true, _) => (freq - q).abs() / se,
        (false, true) => 0.0,
        (false, false) => f64::INFINITY,
    };
    out.push(CheckResult::at_most(
        "extinction_monte_carlo",
        z,
        4.0,
        format!("|freq - q[{t}]| / se with q = {q}, freq = {freq}"),
    ));
    out
}

fn walk_checks(seed: u64, law: &StepLaw) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let n = 10;
    let mut rng = check_stream(seed, "second_moment");
    let est = second_moment(law, n, 20_000, &mut rng);
    out.push(CheckResult::at_most(
        "second_moment",
        (est.mean - n as f64).abs() / est.std_error,
        4.0,
        format!("E||S({n})||^2 = {} +- {}", est.mean, est.std_error),
    ));

    let opts = PmfOptions::default();
    let ck = (|| -> crate::walk::Result<f64> {
        let a = n_step_pmf(law, 2, &opts)?;
        let b = n_step_pmf(law, 3, &opts)?;
        let ab = a.convolve(&b, &opts)?;
        let direct = n_step_pmf(law, 5, &opts)?;
        let mut worst: f64 = 0.0;
        for x in direct.iter().chain(ab.iter()).map(|(x, _)| *x) {
            worst = worst.max((ab.get(x) - direct.get(x)).abs());
        }
        Ok(worst)
    })();
    out.push(match ck {
        Ok(w) => CheckResult::at_most("chapman_kolmogorov", w, 1e-10, "max |p^2 * p^3 - p^5|".into()),
        Err(e) => CheckResult::failed("chapman_kolmogorov", e.to_string()),
    });

    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (d, n) in [(1usize, 400usize), (2, 400)] {
        let srw = StepLaw::srw(d).expect("srw");
        match lclt_max_deviation(&srw, n) {
            Ok(dev) => {
                worst = worst.max(dev);
                detail.push(format!("d={d} n={n}: {dev:.4}"));
            }
            Err(e) => return vec![CheckResult::failed("lclt_ratio", e.to_string())],
        }
    }
    out.push(CheckResult::at_most(
        "lclt_ratio",
        worst,
        0.15,
        format!("max |ratio - 1| over ||y|| <= sqrt(n); {}", detail.join(", ")),
    ));

    let n = match law.dim() {
        1 | 2 => 64,
        3 | 4 => 16,
        _ => 8,
    };
    out.push(match n_step_pmf(law, n, &opts) {
        Ok(grid) => {
            let c = (2.0 * std::f64::consts::PI).powf(-(law.dim() as f64) / 2.0);
            let scale = law.scale().powi(law.dim() as i32) * (n as f64).powf(law.dim() as f64 / 2.0) / c;
            let peak = grid.iter().map(|(_, p)| *p).fold(0.0, f64::max);
            CheckResult::at_most(
                "lclt_upper_bound",
                peak * scale,
                2.0,
                format!("max_y p^{n}(y) D^d n^(d/2) / C against the factor 2"),
            )
        }
        Err(e) => CheckResult::failed("lclt_upper_bound", e.to_string()),
    });
    out
}

/// Largest `|p^n(y) / gaussian - 1|` over reachable `y` with `||y|| <= sqrt(n)`.
pub(crate) fn lclt_max_deviation(law: &StepLaw, n: usize) -> crate::walk::Result<f64> {
    let grid = n_step_pmf(law, n, &PmfOptions::default())?;
    let mut worst: f64 = 0.0;
    for (y, p) in grid.iter() {
        if law.norm_sq_within(*y, n as f64) && law.parity_compatible(n, *y) {
            worst = worst.max((p / lclt_gaussian(law, n, *y) - 1.0).abs());
        }
    }
    Ok(worst)
}

fn trace_invariants(config: &ExperimentConfig, model: &Model) -> CheckResult {
    let n = 32;
    let traces = 40;
    let sampler = match TnmSampler::for_law(&model.progeny, n, config.m_for(n)) {
        Ok(s) => s,
        Err(e) => return CheckResult::failed("trace_invariants", e.to_string()),
    };
    let opts = config.solver.options();
    let mut violations = 0usize;
    for r in 0..traces {
        let mut stream = rng::stream(config.seed, rng::tag("check/trace_invariants"), r);
        let outcome = (|| -> Result<bool> {
            let tree = sampler.sample(&mut stream)?;
            let emb = embed(&tree, &model.step, Site::ORIGIN, &mut stream);
            let mut prev = 0.0;
            let mut ok = true;
            for k in 1..=n {
                let row = measure_level(&emb.trace, k, &opts)?;
                let tol = 1e-9 * row.r.max(1.0);
                ok &= row.r <= k as f64 + tol && row.nw_bound <= row.r + tol && row.r + tol >= prev;
                prev = row.r;
            }
            ok &= prev >= 1.0 - 1e-9;
            Ok(ok)
        })();
        if !matches!(outcome, Ok(true)) {
            violations += 1;
        }
    }
    CheckResult::at_most(
        "trace_invariants",
        violations as f64,
        0.0,
        format!("traces (n = {n}) violating 1 <= R(n), R(k) <= k, NW <= R(k) or monotonicity in k"),
    )
}

/// Parameters of the subtree-dominance experiment: the side tree at `V_j`
/// of `T(n, 2n)` with `n = (i + 2) delta_n`, with and without conditioning
/// on reaching level `(i + 2) delta_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominanceParams {
    pub delta_n: usize,
    pub i: usize,
    pub j: usize,
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub conditioned: Vec<usize>,
    pub unconditioned: Vec<usize>,
    /// `sup_s F_cond(s) - F_uncond(s)`, where `F` are the empirical CDFs of
    /// the subtree sizes.
    pub max_excess: f64,
    /// Sum of the two one-sided DKW half-widths.
    pub band: f64,
    /// Fraction of draws accepted by the rejection sampler.
    pub acceptance_rate: f64,
}

impl DominanceReport {
    pub fn holds(&self) -> bool {
        self.max_excess <= self.band
    }
}

const MAX_REJECTIONS: usize = 10_000_000;

/// The conditioned side tree should be stochastically larger: its size CDF
/// may exceed the unconditioned one by no more than the DKW band.
pub fn dominance_experiment(p: &ProgenyLaw, params: &DominanceParams) -> Result<DominanceReport> {
    let n = (params.i + 2) * params.delta_n;
    if params.j > n || params.replicates == 0 || !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(HarnessError::Config(format!("invalid dominance parameters {params:?}")));
    }
    let sampler = TnmSampler::for_law(p, n, 2 * n)?;
    let target = n as u32;
    let cond_tag = rng::tag("dominance/conditioned");
    let free_tag = rng::tag("dominance/unconditioned");
    let conditioned: Vec<Result<(usize, usize)>> = (0..params.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::stream(params.seed, cond_tag, r);
            for tries in 1..=MAX_REJECTIONS {
                let t = sampler.sample_side_tree(params.j, &mut stream)?;
                if t.max_height() >= target {
                    return Ok((t.len(), tries));
                }
            }
            Err(HarnessError::Config(format!("level {target} unreachable from V_{}", params.j)))
        })
        .collect();
    let unconditioned: Vec<Result<usize>> = (0..params.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::stream(params.seed, free_tag, r);
            Ok(sampler.sample_side_tree(params.j, &mut stream)?.len())
        })
        .collect();
    let mut tries = 0usize;
    let mut cond = Vec::with_capacity(params.replicates);
    for c in conditioned {
        let (size, t) = c?;
        cond.push(size);
        tries += t;
    }
    let free = unconditioned.into_iter().collect::<Result<Vec<usize>>>()?;
    let max_excess = cdf_excess(&cond, &free);
    let eps = |m: usize| ((1.0 / params.alpha).ln() / (2.0 * m as f64)).sqrt();
    Ok(DominanceReport {
        band: eps(cond.len()) + eps(free.len()),
        acceptance_rate: cond.len() as f64 / tries as f64,
        conditioned: cond,
        unconditioned: free,
        max_excess,
    })
}

/// `sup_s F_a(s) - F_b(s)` for empirical CDFs.
fn cdf_excess(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut best) = (0usize, 0usize, 0.0f64);
    while i < a.len() || j < b.len() {
        let s = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < a.len() && a[i] == s {
            i += 1;
        }
        while j < b.len() && b[j] == s {
            j += 1;
        }
        best = best.max(i as f64 / a.len() as f64 - j as f64 / b.len() as f64);
    }
    best
}

/// Runs every check. Law failures are reported as failed checks, and the
/// checks that need the failing law are skipped.
pub fn check_suite(config: &ExperimentConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let progeny = config.progeny_law();
    out.push(match &progeny {
        Ok(p) => CheckResult::at_most("progeny_law", (p.mean() - 1.0).abs(), 1e-9, "critical progeny law".into()),
        Err(e) => CheckResult::failed("progeny_law", e.to_string()),
    });
    let step = config.step_law();
    out.push(match &step {
        Ok(law) => CheckResult::at_most("step_law", 0.0, 0.0, format!("symmetric generating law in d = {}", law.dim())),
        Err(e) => CheckResult::failed("step_law", e.to_string()),
    });
    let opts = config.solver.options();
    out.push(solver_oracle(config.seed, &opts, 40));
    out.extend(resistance_laws(config.seed, &opts, 200));
    if let Ok(p) = &progeny {
        out.extend(extinction(config.seed, p));
    }
    if let Ok(law) = &step {
        out.extend(walk_checks(config.seed, law));
    }
    if let Ok(p) = &progeny {
        let params = DominanceParams { delta_n: 24, i: 0, j: 12, replicates: 2000, alpha: 1e-3, seed: config.seed };
        out.push(match dominance_experiment(p, &params) {
            Ok(rep) => CheckResult::at_most(
                "subtree_size_dominance",
                rep.max_excess,
                rep.band,
                format!("sup (F_cond - F_uncond) of side-tree sizes, acceptance rate {:.4}", rep.acceptance_rate),
            ),
            Err(e) => CheckResult::failed("subtree_size_dominance", e.to_string()),
        });
    }
    if let (Ok(progeny), Ok(step)) = (progeny, step) {
        out.push(trace_invariants(config, &Model { progeny, step }));
    }
    out
}
