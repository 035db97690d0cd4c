//! Effective resistance on unit-conductance multigraphs.
//!
//! Solves go through three stages: dead-end peeling, series and parallel
//! reduction (both exact), and Jacobi-preconditioned conjugate gradients on
//! the grounded Laplacian of whatever remains. On traces the first two
//! stages usually remove almost everything.

use std::fmt;

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::trace::{TraceError, TraceGraph};

#[derive(Debug, Error)]
pub enum ResistanceError {
    #[error("node {0} out of range")]
    NodeOutOfRange(u32),
    #[error("terminals are disconnected")]
    Disconnected,
    #[error("conjugate gradients did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("level {0} of the trace is empty")]
    EmptyLevel(usize),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T> = std::result::Result<T, ResistanceError>;

/// Undirected multigraph on nodes `0..num_nodes`; parallel edges are kept and
/// each edge has unit conductance. Self-loops are allowed and ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Multigraph {
    num_nodes: usize,
    edges: Vec<(u32, u32)>,
}

impl Multigraph {
    pub fn new(num_nodes: usize) -> Self {
        Self { num_nodes, edges: Vec::new() }
    }

    pub fn from_edges(num_nodes: usize, edges: Vec<(u32, u32)>) -> Self {
        let mut g = Self::new(num_nodes);
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn from_trace(trace: &TraceGraph) -> Self {
        Self {
            num_nodes: trace.num_points(),
            edges: trace.edges().iter().map(|e| (e.tail, e.head)).collect(),
        }
    }

    pub fn add_edge(&mut self, a: u32, b: u32) {
        let hi = a.max(b) as usize + 1;
        if hi > self.num_nodes {
            self.num_nodes = hi;
        }
        self.edges.push((a, b));
    }

    pub fn remove_edge(&mut self, index: usize) -> (u32, u32) {
        self.edges.swap_remove(index)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    fn check(&self, v: u32) -> Result<()> {
        if (v as usize) < self.num_nodes {
            Ok(())
        } else {
            Err(ResistanceError::NodeOutOfRange(v))
        }
    }

    /// Incidence lists in CSR form: for each node, `(neighbour, edge index)`.
    fn incidence(&self) -> (Vec<u32>, Vec<(u32, u32)>) {
        let n = self.num_nodes;
        let mut start = vec![0u32; n + 1];
        for &(a, b) in &self.edges {
            if a != b {
                start[a as usize + 1] += 1;
                start[b as usize + 1] += 1;
            }
        }
        for i in 0..n {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut list = vec![(0u32, 0u32); start[n] as usize];
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a != b {
                list[fill[a as usize] as usize] = (b, k as u32);
                fill[a as usize] += 1;
                list[fill[b as usize] as usize] = (a, k as u32);
                fill[b as usize] += 1;
            }
        }
        (start, list)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual tolerance for conjugate gradients.
    pub rel_tol: f64,
    /// Iteration cap as a multiple of the component size.
    pub max_iter_factor: usize,
    /// Return an infinite resistance instead of an error for disconnected
    /// terminals.
    pub allow_disconnected: bool,
    /// Apply the exact dead-end, series and parallel reductions before CG.
    pub reduce: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-10, max_iter_factor: 20, allow_disconnected: false, reduce: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResistanceResult {
    /// Ohms; `f64::INFINITY` for disconnected terminals when allowed.
    pub value: f64,
    pub iterations: usize,
    /// Final relative residual of the CG solve (0 when no solve was needed).
    pub residual: f64,
    /// Size of the linear system actually solved.
    pub solved_nodes: usize,
}

impl ResistanceResult {
    fn exact(value: f64) -> Self {
        Self { value, iterations: 0, residual: 0.0, solved_nodes: 0 }
    }

    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

/// `R_eff(a <-> b)`.
pub fn effective_resistance(g: &Multigraph, a: u32, b: u32, opts: &SolverOptions) -> Result<ResistanceResult> {
    g.check(a)?;
    g.check(b)?;
    if a == b {
        return Ok(ResistanceResult::exact(0.0));
    }
    let (start, inc) = g.incidence();
    let n = g.num_nodes();

    let mut in_comp = vec![false; n];
    let mut queue = vec![a];
    in_comp[a as usize] = true;
    let mut comp_size = 0usize;
    while let Some(v) = queue.pop() {
        comp_size += 1;
        for &(u, _) in &inc[start[v as usize] as usize..start[v as usize + 1] as usize] {
            if !in_comp[u as usize] {
                in_comp[u as usize] = true;
                queue.push(u);
            }
        }
    }
    if !in_comp[b as usize] {
        return if opts.allow_disconnected {
            Ok(ResistanceResult::exact(f64::INFINITY))
        } else {
            Err(ResistanceError::Disconnected)
        };
    }

    let mut edge_alive: Vec<bool> = g.edges.iter().map(|&(x, y)| x != y && in_comp[x as usize]).collect();
    if opts.reduce {
        peel_dead_ends(&start, &inc, &mut edge_alive, a, b);
    }
    let mut adj: FxHashMap<u32, FxHashMap<u32, f64>> = FxHashMap::default();
    for (k, &(x, y)) in g.edges.iter().enumerate() {
        if edge_alive[k] {
            add_resistor(&mut adj, x, y, 1.0);
        }
    }
    if opts.reduce {
        series_reduce(&mut adj, a, b);
    }
    let cap = opts.max_iter_factor.saturating_mul(comp_size).max(1);
    solve_grounded(&adj, a, b, opts.rel_tol, cap)
}

/// Removes, repeatedly, every non-terminal node with a single incident edge.
fn peel_dead_ends(start: &[u32], inc: &[(u32, u32)], edge_alive: &mut [bool], a: u32, b: u32) {
    let n = start.len() - 1;
    let mut degree = vec![0u32; n];
    for v in 0..n {
        degree[v] = inc[start[v] as usize..start[v + 1] as usize].iter().filter(|(_, k)| edge_alive[*k as usize]).count()
            as u32;
    }
    let mut stack: Vec<u32> = (0..n as u32).filter(|&v| degree[v as usize] == 1 && v != a && v != b).collect();
    while let Some(v) = stack.pop() {
        if degree[v as usize] != 1 {
            continue;
        }
        let (u, k) = *inc[start[v as usize] as usize..start[v as usize + 1] as usize]
            .iter()
            .find(|(_, k)| edge_alive[*k as usize])
            .expect("degree-one node has a live edge");
        edge_alive[k as usize] = false;
        degree[v as usize] = 0;
        degree[u as usize] -= 1;
        if degree[u as usize] == 1 && u != a && u != b {
            stack.push(u);
        }
    }
}

fn add_resistor(adj: &mut FxHashMap<u32, FxHashMap<u32, f64>>, x: u32, y: u32, r: f64) {
    for (p, q) in [(x, y), (y, x)] {
        adj.entry(p)
            .or_default()
            .entry(q)
            .and_modify(|old| *old = *old * r / (*old + r))
            .or_insert(r);
    }
}

/// Eliminates non-terminal nodes with at most two neighbours; parallel
/// resistors are merged as they arise.
fn series_reduce(adj: &mut FxHashMap<u32, FxHashMap<u32, f64>>, a: u32, b: u32) {
    let mut stack: Vec<u32> = adj.keys().copied().collect();
    stack.sort_unstable();
    while let Some(v) = stack.pop() {
        if v == a || v == b {
            continue;
        }
        let Some(nbrs) = adj.get(&v) else { continue };
        match nbrs.len() {
            0 => {
                adj.remove(&v);
            }
            1 => {
                let u = *nbrs.keys().next().unwrap();
                adj.remove(&v);
                adj.get_mut(&u).unwrap().remove(&v);
                stack.push(u);
            }
            2 => {
                let mut it = nbrs.iter().map(|(k, r)| (*k, *r));
                let (mut u, mut ru) = it.next().unwrap();
                let (mut w, mut rw) = it.next().unwrap();
                if w < u {
                    std::mem::swap(&mut u, &mut w);
                    std::mem::swap(&mut ru, &mut rw);
                }
                adj.remove(&v);
                adj.get_mut(&u).unwrap().remove(&v);
                adj.get_mut(&w).unwrap().remove(&v);
                add_resistor(adj, u, w, ru + rw);
                stack.push(u);
                stack.push(w);
            }
            _ => {}
        }
    }
}

/// Solves `L x = e_a` with `x_b = 0` and returns `x_a`.
fn solve_grounded(
    adj: &FxHashMap<u32, FxHashMap<u32, f64>>,
    a: u32,
    b: u32,
    rel_tol: f64,
    max_iter: usize,
) -> Result<ResistanceResult> {
    if let Some(r) = adj.get(&a).and_then(|m| (m.len() == 1).then(|| m.get(&b).copied()).flatten()) {
        if adj.get(&b).is_some_and(|m| m.len() == 1) {
            return Ok(ResistanceResult::exact(r));
        }
    }
    let mut nodes: Vec<u32> = adj.keys().copied().filter(|&v| v != b).collect();
    nodes.sort_unstable();
    let index: FxHashMap<u32, usize> = nodes.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let m = nodes.len();
    let mut row_start = vec![0usize; m + 1];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut diag = vec![0.0; m];
    for (i, v) in nodes.iter().enumerate() {
        let mut nb: Vec<(u32, f64)> = adj[v].iter().map(|(u, r)| (*u, 1.0 / r)).collect();
        nb.sort_unstable_by_key(|(u, _)| *u);
        for (u, c) in nb {
            diag[i] += c;
            if let Some(&j) = index.get(&u) {
                cols.push(j);
                vals.push(c);
            }
        }
        row_start[i + 1] = cols.len();
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for i in 0..m {
            let mut s = diag[i] * x[i];
            for k in row_start[i]..row_start[i + 1] {
                s -= vals[k] * x[cols[k]];
            }
            y[i] = s;
        }
    };
    let ia = index[&a];
    let mut x = vec![0.0; m];
    let mut r = vec![0.0; m];
    r[ia] = 1.0;
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(u, v)| u * v).sum();
    let mut ap = vec![0.0; m];
    let mut residual = 1.0;
    let mut iterations = 0;
    while residual > rel_tol {
        if iterations >= max_iter {
            return Err(ResistanceError::NotConverged { iterations, residual });
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(u, v)| u * v).sum();
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        residual = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..m {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(u, v)| u * v).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..m {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    Ok(ResistanceResult { value: x[ia], iterations, residual, solved_nodes: m })
}

/// The trace restricted to levels `0..=n` with level `n` shorted into one
/// node. Points above level `n` and their edges are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelNetwork {
    pub graph: Multigraph,
    pub source: u32,
    pub sink: u32,
}

pub fn level_network(trace: &TraceGraph, n: usize) -> Result<LevelNetwork> {
    if trace.level_set(n).map_or(true, |l| l.is_empty()) {
        return Err(ResistanceError::EmptyLevel(n));
    }
    const DROPPED: u32 = u32::MAX;
    let mut remap = vec![DROPPED; trace.num_points()];
    let mut next = 1u32;
    for (id, (_, t)) in trace.points().iter().enumerate() {
        let t = *t as usize;
        if t < n {
            remap[id] = next;
            next += 1;
        } else if t == n {
            remap[id] = 0;
        }
    }
    let mut graph = Multigraph::new(next as usize);
    for e in trace.edges() {
        let (x, y) = (remap[e.tail as usize], remap[e.head as usize]);
        if x != DROPPED && y != DROPPED {
            graph.edges.push((x, y));
        }
    }
    let source = remap[trace.root() as usize];
    Ok(LevelNetwork { graph, source, sink: 0 })
}

/// `R(n)`: resistance between the root and level `n` shorted together.
pub fn resistance_to_level(trace: &TraceGraph, n: usize, opts: &SolverOptions) -> Result<ResistanceResult> {
    let net = level_network(trace, n)?;
    effective_resistance(&net.graph, net.source, net.sink, opts)
}

/// `sum_{k < n} 1 / |E_k|`, with `E_k` the edges from level `k` to `k + 1`.
/// Infinite when some `E_k` is empty.
pub fn nash_williams_lower(trace: &TraceGraph, n: usize) -> f64 {
    let counts = trace.edges_per_level();
    (0..n).map(|k| counts.get(k).map_or(f64::INFINITY, |&c| 1.0 / c as f64)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallelLawCheck {
    pub r: f64,
    pub r1: f64,
    pub r2: f64,
    /// `(1/R1 + 1/R2)^-1`.
    pub harmonic: f64,
    /// `(R1 + R2) / 4`.
    pub arithmetic: f64,
    pub holds: bool,
}

/// Checks `R(G1 + G2) <= (1/R1 + 1/R2)^-1 <= (R1 + R2)/4` between `a` and `b`.
/// A part in which the terminals are disconnected contributes zero
/// conductance.
pub fn check_parallel_law(g1: &Multigraph, g2: &Multigraph, a: u32, b: u32, opts: &SolverOptions) -> Result<ParallelLawCheck> {
    let opts = SolverOptions { allow_disconnected: true, ..*opts };
    let mut union = Multigraph::new(g1.num_nodes().max(g2.num_nodes()).max(a.max(b) as usize + 1));
    for &(x, y) in g1.edges().iter().chain(g2.edges()) {
        union.add_edge(x, y);
    }
    let sized = |g: &Multigraph| {
        let mut h = g.clone();
        h.num_nodes = union.num_nodes;
        effective_resistance(&h, a, b, &opts).map(|r| r.value)
    };
    let r1 = sized(g1)?;
    let r2 = sized(g2)?;
    let r = effective_resistance(&union, a, b, &opts)?.value;
    let harmonic = 1.0 / (1.0 / r1 + 1.0 / r2);
    let arithmetic = (r1 + r2) / 4.0;
    let le = |x: f64, y: f64| x <= y || (x - y) <= 1e-9 * y.abs().max(1.0) || (x.is_infinite() && y.is_infinite());
    Ok(ParallelLawCheck { r, r1, r2, harmonic, arithmetic, holds: le(r, harmonic) && le(harmonic, arithmetic) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleCheck {
    pub r_xz: f64,
    pub r_xy: f64,
    pub r_yz: f64,
    pub holds: bool,
}

/// Checks `R(x <-> z) <= R(x <-> y) + R(y <-> z)`.
pub fn check_triangle(g: &Multigraph, x: u32, y: u32, z: u32, opts: &SolverOptions) -> Result<TriangleCheck> {
    let r_xz = effective_resistance(g, x, z, opts)?.value;
    let r_xy = effective_resistance(g, x, y, opts)?.value;
    let r_yz = effective_resistance(g, y, z, opts)?.value;
    let holds = r_xz <= r_xy + r_yz + 1e-9;
    Ok(TriangleCheck { r_xz, r_xy, r_yz, holds })
}

/// One per-sample output row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResistanceRow {
    pub n: usize,
    pub r: f64,
    pub nw_bound: f64,
    pub nodes: usize,
    pub edges: usize,
    pub iterations: usize,
}

impl ResistanceRow {
    pub const CSV_HEADER: &'static str = "n,R,NW_bound,nodes,edges,iterations";
}

impl fmt::Display for ResistanceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{},{}", self.n, self.r, self.nw_bound, self.nodes, self.edges, self.iterations)
    }
}

/// `R(n)` and the Nash-Williams bound for one trace. `nodes` and `edges`
/// describe the shorted level network.
pub fn measure_level(trace: &TraceGraph, n: usize, opts: &SolverOptions) -> Result<ResistanceRow> {
    let net = level_network(trace, n)?;
    let res = effective_resistance(&net.graph, net.source, net.sink, opts)?;
    Ok(ResistanceRow {
        n,
        r: res.value,
        nw_bound: nash_williams_lower(trace, n),
        nodes: net.graph.num_nodes(),
        edges: net.graph.num_edges(),
        iterations: res.iterations,
    })
}

/// Dense reference implementation.
pub mod oracle {
    use super::Multigraph;
    use nalgebra::{DMatrix, DVector};

    /// `(e_a - e_b)^T L^+ (e_a - e_b)` with `L^+` the Moore-Penrose inverse of
    /// the Laplacian.
    pub fn dense_effective_resistance(g: &Multigraph, a: u32, b: u32) -> Option<f64> {
        let n = g.num_nodes();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for &(x, y) in g.edges() {
            let (x, y) = (x as usize, y as usize);
            if x != y {
                l[(x, x)] += 1.0;
                l[(y, y)] += 1.0;
                l[(x, y)] -= 1.0;
                l[(y, x)] -= 1.0;
            }
        }
        let pinv = l.pseudo_inverse(1e-9).ok()?;
        let mut e = DVector::<f64>::zeros(n);
        e[a as usize] += 1.0;
        e[b as usize] -= 1.0;
        Some(e.dot(&(&pinv * &e)))
    }
}
