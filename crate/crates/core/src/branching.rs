//! Progeny laws, extinction tables and deadline-conditioned Galton–Watson
//! trees, including the finite backbone surrogate `T(n, m)`.
//!
//! Conditioning on extinction by a deadline is done exactly with a Doob
//! transform: a vertex with `t` generations of budget left draws its offspring
//! from `p_t(k) = p(k) q[t-1]^k / q[t]`, where `q[t]` is the probability that an
//! unconditioned tree is extinct within `t` generations. A tree sampled with
//! budget `t` therefore never has a vertex at depth `t` or more.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::rng;

/// Tolerance on total mass and on the criticality condition.
pub const PROB_TOL: f64 = 1e-12;

/// Default cap on the number of vertices in a single sampled tree.
pub const DEFAULT_MAX_VERTICES: usize = 100_000_000;

const NO_PARENT: u32 = u32::MAX;
const SIDE_TREE_TAG: u64 = 0x5349_4445_5452_4545;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BranchingError {
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("progeny law is not critical (mean {0})")]
    NotCritical(f64),
    #[error("progeny law has zero variance")]
    Degenerate,
    #[error("no non-degenerate critical law supported on 0..={0} is obtained by folding")]
    InfeasibleTruncation(usize),
    #[error("conditioning impossible: zero probability of extinction within budget {0}")]
    ImpossibleConditioning(usize),
    #[error("tree exceeded the vertex limit of {0}")]
    VertexLimit(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("backbone index {index} out of range 0..={n}")]
    OutOfRange { index: usize, n: usize },
}

pub type Result<T> = std::result::Result<T, BranchingError>;

/// A probability law on the non-negative integers with finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgenyLaw {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl ProgenyLaw {
    /// Validates non-negativity and total mass; trailing zeros are dropped.
    pub fn new(mut pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(BranchingError::InvalidPmf("empty pmf".into()));
        }
        if let Some(k) = pmf.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(BranchingError::InvalidPmf(format!("p({k}) = {} is not a probability", pmf[k])));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(BranchingError::InvalidPmf(format!("total mass {total} != 1")));
        }
        while pmf.len() > 1 && pmf[pmf.len() - 1] == 0.0 {
            pmf.pop();
        }
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { pmf, cdf })
    }

    /// Like [`ProgenyLaw::new`], additionally requiring mean one.
    pub fn critical(pmf: Vec<f64>) -> Result<Self> {
        let law = Self::new(pmf)?;
        law.ensure_critical()?;
        Ok(law)
    }

    /// `p(0) = p(2) = 1/2`.
    pub fn binary() -> Self {
        Self::critical(vec![0.5, 0.0, 0.5]).expect("binary law is valid")
    }

    /// `p(k) = 2^-(k+1)`, stored up to `k = 63` (tail mass `2^-64`).
    pub fn geometric() -> Self {
        let pmf = (0..64).map(|k| 0.5f64.powi(k + 1)).collect();
        Self::critical(pmf).expect("geometric law is valid")
    }

    /// Poisson with mean one, stored up to `k = 40`.
    pub fn poisson1() -> Self {
        let mut pmf = Vec::with_capacity(41);
        let mut term = (-1.0f64).exp();
        for k in 0..=40 {
            if k > 0 {
                term /= k as f64;
            }
            pmf.push(term);
        }
        Self::critical(pmf).expect("poisson law is valid")
    }

    pub fn point_mass(k: usize) -> Self {
        let mut pmf = vec![0.0; k + 1];
        pmf[k] = 1.0;
        Self::new(pmf).expect("point mass is valid")
    }

    /// Named presets: `binary`, `geometric`, `poisson1`, and `path`
    /// (the degenerate law `p(1) = 1`).
    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "binary" => Ok(Self::binary()),
            "geometric" => Ok(Self::geometric()),
            "poisson1" | "poisson" => Ok(Self::poisson1()),
            "path" | "point1" => Ok(Self::point_mass(1)),
            other => Err(BranchingError::InvalidPmf(format!("unknown progeny preset '{other}'"))),
        }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    pub fn max_offspring(&self) -> usize {
        self.pmf.len() - 1
    }

    fn moment(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.pmf.iter().enumerate().map(|(k, p)| f(k as f64) * p).sum()
    }

    pub fn mean(&self) -> f64 {
        self.moment(|k| k)
    }

    /// `sum k (k - 1) p(k)`; equals the variance for a critical law.
    pub fn sigma_sq(&self) -> f64 {
        self.moment(|k| k * (k - 1.0))
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.moment(|k| k * k) - mean * mean
    }

    pub fn third_moment(&self) -> f64 {
        self.moment(|k| k * k * k)
    }

    /// Probability generating function `sum p(k) s^k`.
    pub fn pgf(&self, s: f64) -> f64 {
        self.pmf.iter().rev().fold(0.0, |acc, p| acc * s + p)
    }

    pub fn is_critical(&self) -> bool {
        (self.mean() - 1.0).abs() <= PROB_TOL
    }

    pub fn ensure_critical(&self) -> Result<()> {
        if self.is_critical() {
            Ok(())
        } else {
            Err(BranchingError::NotCritical(self.mean()))
        }
    }

    /// Inverse-CDF sample.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let k = self.cdf.partition_point(|c| *c <= u);
        k.min(self.pmf.len() - 1)
    }
}

/// Size-biased law `p~(k) = (k + 1) p(k + 1)`. Its mean is `sigma_sq(p)`.
pub fn size_bias(p: &ProgenyLaw) -> Result<ProgenyLaw> {
    p.ensure_critical()?;
    if p.max_offspring() == 0 {
        return Err(BranchingError::Degenerate);
    }
    let pmf = (0..p.max_offspring()).map(|k| (k + 1) as f64 * p.prob(k + 1)).collect();
    ProgenyLaw::new(pmf)
}

/// Bounded approximation `p_M` of a critical law.
///
/// Mass above `M` is folded onto `M`; the resulting mean deficit `1 - mean` is
/// then moved from `p(0)` to `p(1)`, which restores mean one without touching
/// the rest of the law. Folding never raises the third moment. The fold fails
/// only when the result is the degenerate law `p(1) = 1` (possible for `M = 1`).
pub fn truncate(p: &ProgenyLaw, max_offspring: usize) -> Result<ProgenyLaw> {
    if max_offspring < 1 {
        return Err(BranchingError::InvalidParams("truncation level M must be >= 1".into()));
    }
    p.ensure_critical()?;
    if p.max_offspring() <= max_offspring {
        return Ok(p.clone());
    }
    let mut pmf: Vec<f64> = p.pmf()[..=max_offspring].to_vec();
    pmf[max_offspring] += p.pmf()[max_offspring + 1..].iter().sum::<f64>();
    let folded_mean: f64 = pmf.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
    let deficit = 1.0 - folded_mean;
    if pmf[0] < deficit - PROB_TOL {
        return Err(BranchingError::InfeasibleTruncation(max_offspring));
    }
    pmf[0] = (pmf[0] - deficit).max(0.0);
    pmf[1] += deficit;
    let law = ProgenyLaw::new(pmf)?;
    if law.sigma_sq() <= PROB_TOL && p.sigma_sq() > PROB_TOL {
        return Err(BranchingError::InfeasibleTruncation(max_offspring));
    }
    Ok(law)
}

/// `q[t]` = probability that a GW(p) tree is extinct within `t` generations
/// (no vertex at generation `t`). `q[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionTable {
    q: Vec<f64>,
}

impl ExtinctionTable {
    pub fn get(&self, t: usize) -> f64 {
        self.q[t]
    }

    /// Largest `t` in the table.
    pub fn horizon(&self) -> usize {
        self.q.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }
}

/// Iterates `q[t + 1] = f(q[t])` with `f` the pgf of `p`.
pub fn extinction_probs(p: &ProgenyLaw, m: usize) -> ExtinctionTable {
    let mut q = Vec::with_capacity(m + 1);
    q.push(0.0);
    for t in 0..m {
        q.push(p.pgf(q[t]));
    }
    ExtinctionTable { q }
}

fn reweight(law: &ProgenyLaw, s: f64) -> (Vec<f64>, f64) {
    let mut power = 1.0;
    let weights: Vec<f64> = law
        .pmf()
        .iter()
        .map(|p| {
            let w = p * power;
            power *= s;
            w
        })
        .collect();
    let total = weights.iter().sum();
    (weights, total)
}

fn normalized(weights: Vec<f64>, total: f64) -> Result<ProgenyLaw> {
    ProgenyLaw::new(weights.into_iter().map(|w| w / total).collect())
}

/// Offspring law of a vertex with `t` generations of budget left:
/// `p_t(k) = p(k) q[t-1]^k / q[t]`.
pub fn conditioned_offspring(p: &ProgenyLaw, q: &ExtinctionTable, t: usize) -> Result<ProgenyLaw> {
    if t == 0 || t > q.horizon() {
        return Err(BranchingError::InvalidParams(format!(
            "budget t = {t} outside 1..={}",
            q.horizon()
        )));
    }
    if q.get(t) <= 0.0 {
        return Err(BranchingError::ImpossibleConditioning(t));
    }
    let (weights, total) = reweight(p, q.get(t - 1));
    if total <= 0.0 {
        return Err(BranchingError::ImpossibleConditioning(t));
    }
    normalized(weights, total)
}

/// First-generation law reweighted by `q[t-1]^k`, or `None` when every
/// admissible offspring count makes extinction within `t` impossible.
fn conditioned_first_generation(first: &ProgenyLaw, q: &ExtinctionTable, t: usize) -> Option<ProgenyLaw> {
    let (weights, total) = reweight(first, q.get(t - 1));
    if total > 0.0 {
        normalized(weights, total).ok()
    } else {
        None
    }
}

/// Rooted tree stored as parent links with `parent(v) < v`, plus a child
/// index and per-vertex reach (largest height among the descendants).
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    parent: Vec<u32>,
    height: Vec<u32>,
    edge_key: Vec<u64>,
    child_start: Vec<u32>,
    child_list: Vec<u32>,
    reach: Vec<u32>,
}

impl Tree {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> u32 {
        0
    }

    pub fn parent(&self, v: u32) -> Option<u32> {
        let p = self.parent[v as usize];
        (p != NO_PARENT).then_some(p)
    }

    pub fn height(&self, v: u32) -> u32 {
        self.height[v as usize]
    }

    /// Stable identifier of the edge from `parent(v)` to `v`.
    pub fn edge_key(&self, v: u32) -> u64 {
        self.edge_key[v as usize]
    }

    pub fn children(&self, v: u32) -> &[u32] {
        let (a, b) = (self.child_start[v as usize], self.child_start[v as usize + 1]);
        &self.child_list[a as usize..b as usize]
    }

    /// Largest height of any descendant of `v` (including `v`).
    pub fn reach(&self, v: u32) -> u32 {
        self.reach[v as usize]
    }

    pub fn max_height(&self) -> u32 {
        self.reach.first().copied().unwrap_or(0)
    }

    pub fn num_edges(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Whether `u` is an ancestor of `w` or equal to it.
    pub fn is_ancestor_or_self(&self, u: u32, w: u32) -> bool {
        self.ancestor_at_height(w, self.height(u)) == Some(u)
    }

    /// The ancestor of `w` (or `w` itself) at height `h`.
    pub fn ancestor_at_height(&self, mut w: u32, h: u32) -> Option<u32> {
        if h > self.height(w) {
            return None;
        }
        while self.height(w) > h {
            w = self.parent(w)?;
        }
        Some(w)
    }

    /// All descendants of `v` including `v`, in breadth-first order.
    pub fn descendants(&self, v: u32) -> Vec<u32> {
        let mut out = vec![v];
        let mut i = 0;
        while i < out.len() {
            let u = out[i];
            out.extend_from_slice(self.children(u));
            i += 1;
        }
        out
    }

    /// Number of vertices at each height `0..=max_height`.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.max_height() as usize + 1];
        for &h in &self.height {
            counts[h as usize] += 1;
        }
        counts
    }

    /// Plane-tree encoding of the subtree at `v`: `(` children `)`.
    pub fn shape_code(&self, v: u32) -> String {
        let mut out = String::new();
        self.write_shape(v, &mut out);
        out
    }

    fn write_shape(&self, v: u32, out: &mut String) {
        out.push('(');
        for &c in self.children(v) {
            self.write_shape(c, out);
        }
        out.push(')');
    }

    /// Builds a tree from a parent list with `parents[0] = None` and
    /// `parents[v] < v` otherwise.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Tree> {
        let mut b = TreeBuilder::new();
        for (v, p) in parents.iter().enumerate() {
            match (v, p) {
                (0, None) => {
                    b.add_root(0);
                }
                (0, Some(_)) => return Err(BranchingError::InvalidParams("vertex 0 must be the root".into())),
                (_, Some(p)) if *p < v => {
                    b.add_child(*p as u32);
                }
                _ => return Err(BranchingError::InvalidParams(format!("vertex {v} has an invalid parent"))),
            }
        }
        Ok(b.finish())
    }
}

/// Incremental tree construction; children must be added after their parent.
#[derive(Debug, Default, Clone)]
pub struct TreeBuilder {
    parent: Vec<u32>,
    height: Vec<u32>,
    edge_key: Vec<u64>,
}

impl TreeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// Adds the root at the given height. Only valid on an empty builder.
    pub fn add_root(&mut self, height: u32) -> u32 {
        assert!(self.parent.is_empty(), "root must be the first vertex");
        self.push(NO_PARENT, height, 0)
    }

    /// Adds a child of `parent`; its edge key defaults to its index.
    pub fn add_child(&mut self, parent: u32) -> u32 {
        let key = self.parent.len() as u64;
        self.add_child_keyed(parent, key)
    }

    pub fn add_child_keyed(&mut self, parent: u32, key: u64) -> u32 {
        let h = self.height[parent as usize] + 1;
        self.push(parent, h, key)
    }

    /// Appends a path of `len` vertices below `from` and returns its end.
    pub fn add_path(&mut self, from: u32, len: usize) -> u32 {
        (0..len).fold(from, |v, _| self.add_child(v))
    }

    fn push(&mut self, parent: u32, height: u32, key: u64) -> u32 {
        let v = self.parent.len() as u32;
        self.parent.push(parent);
        self.height.push(height);
        self.edge_key.push(key);
        v
    }

    fn height(&self, v: usize) -> u32 {
        self.height[v]
    }

    pub fn finish(self) -> Tree {
        let n = self.parent.len();
        let mut child_start = vec![0u32; n + 1];
        for &p in &self.parent {
            if p != NO_PARENT {
                child_start[p as usize + 1] += 1;
            }
        }
        for i in 0..n {
            child_start[i + 1] += child_start[i];
        }
        let mut fill = child_start.clone();
        let mut child_list = vec![0u32; n.saturating_sub(1)];
        for (v, &p) in self.parent.iter().enumerate() {
            if p != NO_PARENT {
                child_list[fill[p as usize] as usize] = v as u32;
                fill[p as usize] += 1;
            }
        }
        let mut reach = self.height.clone();
        for v in (0..n).rev() {
            let p = self.parent[v];
            if p != NO_PARENT && reach[v] > reach[p as usize] {
                reach[p as usize] = reach[v];
            }
        }
        Tree {
            parent: self.parent,
            height: self.height,
            edge_key: self.edge_key,
            child_start,
            child_list,
            reach,
        }
    }
}

/// Offspring laws for every remaining budget `1..=horizon`.
#[derive(Debug, Clone)]
struct DeadlineLaws {
    first: Vec<Option<ProgenyLaw>>,
    body: Vec<Option<ProgenyLaw>>,
}

impl DeadlineLaws {
    fn new(first: &ProgenyLaw, body: &ProgenyLaw, horizon: usize) -> Result<Self> {
        let q = extinction_probs(body, horizon);
        let mut first_laws = vec![None];
        let mut body_laws = vec![None];
        for t in 1..=horizon {
            first_laws.push(conditioned_first_generation(first, &q, t));
            body_laws.push(conditioned_offspring(body, &q, t).ok());
        }
        Ok(Self { first: first_laws, body: body_laws })
    }
}

/// Grows the conditioned tree hanging from `root` breadth-first. Vertices at
/// `height_cap` or above get no children; because the growth order is by
/// height, a capped tree is an exact prefix of the uncapped one.
#[allow(clippy::too_many_arguments)]
fn grow<R: Rng + ?Sized>(
    builder: &mut TreeBuilder,
    root: u32,
    budget: usize,
    laws: &DeadlineLaws,
    height_cap: Option<u32>,
    key_prefix: u64,
    max_vertices: usize,
    rng: &mut R,
) -> Result<()> {
    let root_height = builder.height(root as usize);
    let first = laws.first[budget]
        .as_ref()
        .ok_or(BranchingError::ImpossibleConditioning(budget))?;
    if height_cap.is_some_and(|cap| root_height >= cap) {
        return Ok(());
    }
    let mut local = 0u64;
    let start = builder.len();
    for _ in 0..first.sample(rng) {
        local += 1;
        builder.add_child_keyed(root, key_prefix | local);
    }
    let mut v = start;
    while v < builder.len() {
        let h = builder.height(v);
        if height_cap.is_some_and(|cap| h >= cap) {
            break;
        }
        let remaining = budget - (h - root_height) as usize;
        let law = laws.body[remaining]
            .as_ref()
            .ok_or(BranchingError::ImpossibleConditioning(remaining))?;
        for _ in 0..law.sample(rng) {
            local += 1;
            builder.add_child_keyed(v as u32, key_prefix | local);
        }
        if builder.len() > max_vertices {
            return Err(BranchingError::VertexLimit(max_vertices));
        }
        v += 1;
    }
    Ok(())
}

/// Samples a tree whose root draws from `first_gen` and whose other vertices
/// draw from `body`, conditioned to be extinct within `t` generations.
pub fn sample_conditioned_gw<R: Rng + ?Sized>(
    first_gen: &ProgenyLaw,
    body: &ProgenyLaw,
    t: usize,
    rng: &mut R,
) -> Result<Tree> {
    if t == 0 {
        return Err(BranchingError::InvalidParams("deadline t must be >= 1".into()));
    }
    let laws = DeadlineLaws::new(first_gen, body, t)?;
    let mut builder = TreeBuilder::new();
    builder.add_root(0);
    grow(&mut builder, 0, t, &laws, None, 0, DEFAULT_MAX_VERTICES, rng)?;
    Ok(builder.finish())
}

/// Sampling options for `T(n, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TnmOptions {
    pub max_vertices: usize,
    /// Vertices at this height get no children. Statistics that only look at
    /// heights `<= cap` are unaffected.
    pub height_cap: Option<u32>,
    /// Only attach side trees at backbone indices in this inclusive range.
    pub side_range: Option<(usize, usize)>,
}

impl Default for TnmOptions {
    fn default() -> Self {
        Self { max_vertices: DEFAULT_MAX_VERTICES, height_cap: None, side_range: None }
    }
}

/// A sampled `T(n, m)`: backbone `V_0..V_n` (vertex `i` is `V_i`) with a
/// side tree at each `V_i` conditioned to die out within `m - i` generations.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTree {
    tree: Tree,
    n: usize,
    m: usize,
    complete: bool,
}

impl CondTree {
    /// Wraps a hand-built tree whose vertices `0..=n` form the backbone path.
    pub fn from_tree(tree: Tree, n: usize, m: usize) -> Result<Self> {
        if tree.len() <= n {
            return Err(BranchingError::InvalidParams("tree shorter than its backbone".into()));
        }
        for i in 1..=n {
            if tree.parent(i as u32) != Some(i as u32 - 1) {
                return Err(BranchingError::InvalidParams(format!("vertex {i} is not V_{i}")));
            }
        }
        Ok(Self { tree, n, m, complete: true })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// False when sampled with a height cap or a restricted side range.
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn backbone(&self) -> impl Iterator<Item = u32> + '_ {
        0..=self.n as u32
    }

    pub fn backbone_vertex(&self, i: usize) -> u32 {
        debug_assert!(i <= self.n);
        i as u32
    }

    pub fn is_backbone(&self, v: u32) -> bool {
        (v as usize) <= self.n
    }

    /// Children of `V_l` that are not `V_(l+1)`.
    pub fn side_children(&self, l: usize) -> impl Iterator<Item = u32> + '_ {
        let next = (l + 1) as u32;
        let on_backbone = l < self.n;
        self.tree
            .children(l as u32)
            .iter()
            .copied()
            .filter(move |&c| !(on_backbone && c == next))
    }

    /// Largest height reached by `T(n, m)(l)`.
    pub fn reach_off_backbone(&self, l: usize) -> u32 {
        self.side_children(l).map(|c| self.tree.reach(c)).max().unwrap_or(l as u32)
    }

    /// Vertex set of `T(n, m)(l)`: `V_l` together with everything hanging
    /// off the backbone at `V_l`. `V_l` comes first.
    pub fn subtree_off_backbone(&self, l: usize) -> Result<Vec<u32>> {
        if l > self.n {
            return Err(BranchingError::OutOfRange { index: l, n: self.n });
        }
        let mut out = vec![l as u32];
        for c in self.side_children(l) {
            out.extend(self.tree.descendants(c));
        }
        Ok(out)
    }
}

/// Reusable sampler for `T(n, m)` with precomputed conditioned laws.
#[derive(Debug, Clone)]
pub struct TnmSampler {
    n: usize,
    m: usize,
    laws: DeadlineLaws,
    options: TnmOptions,
}

impl TnmSampler {
    pub fn new(p: &ProgenyLaw, n: usize, m: usize) -> Result<Self> {
        if n < 1 {
            return Err(BranchingError::InvalidParams("n must be >= 1".into()));
        }
        if m < 2 * n {
            return Err(BranchingError::InvalidParams(format!("m = {m} must be >= 2n = {}", 2 * n)));
        }
        p.ensure_critical()?;
        if p.sigma_sq() <= PROB_TOL {
            return Err(BranchingError::Degenerate);
        }
        Self::with_first_generation(&size_bias(p)?, p, n, m)
    }

    /// Sampler for the degenerate law `p(1) = 1` and similar cases where the
    /// side trees are empty; no variance requirement.
    pub fn with_first_generation(first: &ProgenyLaw, body: &ProgenyLaw, n: usize, m: usize) -> Result<Self> {
        if m < 2 * n || n < 1 {
            return Err(BranchingError::InvalidParams(format!("need n >= 1 and m >= 2n (n = {n}, m = {m})")));
        }
        let laws = DeadlineLaws::new(first, body, m)?;
        Ok(Self { n, m, laws, options: TnmOptions::default() })
    }

    /// Sampler for `T(n, m)` under a progeny law that may be degenerate. A
    /// law with `p~(0) = 1` (such as `p(1) = 1`) yields a bare backbone.
    pub fn for_law(p: &ProgenyLaw, n: usize, m: usize) -> Result<Self> {
        p.ensure_critical()?;
        Self::with_first_generation(&size_bias(p)?, p, n, m)
    }

    pub fn with_options(mut self, options: TnmOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> &TnmOptions {
        &self.options
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    fn side_seed_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
        rng::stream(seed, SIDE_TREE_TAG, i as u64)
    }

    /// Draws one tree. The side tree at `V_i` uses its own stream derived from
    /// a seed drawn from `rng` and the index `i`.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<CondTree> {
        let seed = rng.next_u64();
        self.sample_seeded(seed)
    }

    pub fn sample_seeded(&self, seed: u64) -> Result<CondTree> {
        let mut builder = TreeBuilder::new();
        builder.add_root(0);
        for i in 1..=self.n {
            builder.add_child_keyed(i as u32 - 1, i as u64);
        }
        let (lo, hi) = self.options.side_range.unwrap_or((0, self.n));
        for i in lo..=hi.min(self.n) {
            let mut side_rng = Self::side_seed_rng(seed, i);
            grow(
                &mut builder,
                i as u32,
                self.m - i,
                &self.laws,
                self.options.height_cap,
                (i as u64 + 1) << 32,
                self.options.max_vertices,
                &mut side_rng,
            )?;
        }
        let complete = self.options.height_cap.is_none() && self.options.side_range.is_none();
        Ok(CondTree { tree: builder.finish(), n: self.n, m: self.m, complete })
    }

    /// The tree `T(n, m)(i)` alone, rooted at `V_i` (height `i`).
    pub fn sample_side_tree<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<Tree> {
        if i > self.n {
            return Err(BranchingError::OutOfRange { index: i, n: self.n });
        }
        let mut builder = TreeBuilder::new();
        builder.add_root(i as u32);
        grow(
            &mut builder,
            0,
            self.m - i,
            &self.laws,
            self.options.height_cap,
            (i as u64 + 1) << 32,
            self.options.max_vertices,
            rng,
        )?;
        Ok(builder.finish())
    }
}

/// One-shot `T(n, m)` sample.
pub fn sample_t_nm<R: RngCore + ?Sized>(p: &ProgenyLaw, n: usize, m: usize, rng: &mut R) -> Result<CondTree> {
    TnmSampler::new(p, n, m)?.sample(rng)
}

/// Independent reference implementations used by the tests and the check
/// suite: exhaustive enumeration, rejection sampling and forward simulation.
pub mod oracle {
    use super::*;

    /// Exact conditional law of the plane-tree shape of a tree whose root
    /// draws from `first` and other vertices from `body`, given extinction
    /// within `t` generations. Computed from unconditioned product weights.
    pub fn conditioned_shape_law(first: &ProgenyLaw, body: &ProgenyLaw, t: usize) -> Vec<(String, f64)> {
        let all = shapes(first, body, t);
        let total: f64 = all.iter().map(|(_, w)| w).sum();
        all.into_iter().map(|(s, w)| (s, w / total)).filter(|(_, w)| *w > 0.0).collect()
    }

    fn shapes(law: &ProgenyLaw, body: &ProgenyLaw, depth: usize) -> Vec<(String, f64)> {
        if depth == 1 {
            return vec![("()".to_string(), law.prob(0))];
        }
        let sub = shapes(body, body, depth - 1);
        let mut out = Vec::new();
        for (k, &pk) in law.pmf().iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            let mut partial: Vec<(String, f64)> = vec![(String::new(), pk)];
            for _ in 0..k {
                partial = partial
                    .iter()
                    .flat_map(|(s, w)| sub.iter().map(move |(c, cw)| (format!("{s}{c}"), w * cw)))
                    .collect();
            }
            out.extend(partial.into_iter().map(|(s, w)| (format!("({s})"), w)));
        }
        out
    }

    /// Unconditioned tree with `first` at the root and `body` below, grown
    /// until generation `t`; `None` if a vertex exists at generation `t`.
    pub fn sample_gw_rejection<R: Rng + ?Sized>(
        first: &ProgenyLaw,
        body: &ProgenyLaw,
        t: usize,
        max_tries: usize,
        rng: &mut R,
    ) -> Option<Tree> {
        'outer: for _ in 0..max_tries {
            let mut b = TreeBuilder::new();
            b.add_root(0);
            let mut v = 0;
            while v < b.len() {
                let h = b.height(v) as usize;
                let k = if v == 0 { first.sample(rng) } else { body.sample(rng) };
                if k > 0 && h + 1 >= t {
                    continue 'outer;
                }
                for _ in 0..k {
                    b.add_child(v as u32);
                }
                v += 1;
            }
            return Some(b.finish());
        }
        None
    }

    /// Forward generation-size simulation of unconditioned GW(p); true when
    /// generation `t` is empty.
    pub fn extinct_within<R: Rng + ?Sized>(p: &ProgenyLaw, t: usize, rng: &mut R) -> bool {
        let mut z: u64 = 1;
        for _ in 0..t {
            if z == 0 {
                return true;
            }
            z = (0..z).map(|_| p.sample(rng) as u64).sum();
        }
        z == 0
    }
}
