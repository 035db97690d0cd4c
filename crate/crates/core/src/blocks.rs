//! Good blocks and intersections on embedded trees.
//!
//! Heights are absolute tree heights. All block fractions are exact because
//! `delta_n` is required to be a multiple of 24.

use std::io::Write;

use rand::RngCore;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;
use thiserror::Error;

use crate::branching::{BranchingError, CondTree, ProgenyLaw, TnmOptions, TnmSampler, Tree};
use crate::trace::{embed_tree, Embedding};
use crate::walk::{Site, StepLaw};

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("invalid block parameters: {0}")]
    InvalidParams(String),
    #[error("vertex {v} at height {h} is neither a backbone vertex nor at a multiple of delta_n")]
    HeightOutOfRange { v: u32, h: u32 },
    #[error("vertex {0} is not in the tree")]
    VertexOutOfRange(u32),
    #[error("vertex {0} is not an ancestor of vertex {1}")]
    NotAncestor(u32, u32),
    #[error("block {0} does not fit in the tree")]
    BlockOutOfRange(usize),
    #[error("block {0} is not K-good")]
    NotGood(usize),
    #[error(transparent)]
    Branching(#[from] BranchingError),
}

pub type Result<T> = std::result::Result<T, BlockError>;

/// Block length `K`, coarse unit `delta_n`, tree parameters and the `B'`
/// threshold coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockParams {
    pub k: usize,
    pub delta_n: usize,
    pub n: usize,
    pub m: usize,
    pub c0: f64,
}

/// `n = N K delta_n + K' delta_n + n_tilde` with `0 <= K' < K` and
/// `delta_n <= n_tilde < 2 delta_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decomposition {
    pub big_n: usize,
    pub k_rem: usize,
    pub n_tilde: usize,
}

impl BlockParams {
    pub fn new(k: usize, delta_n: usize, n: usize, m: usize, c0: f64) -> Result<Self> {
        let bad = |s: String| Err(BlockError::InvalidParams(s));
        if k < 2 {
            return bad(format!("K = {k} must be >= 2"));
        }
        if delta_n == 0 || delta_n % 24 != 0 {
            return bad(format!("delta_n = {delta_n} must be a positive multiple of 24"));
        }
        if 2 * k * delta_n > n {
            return bad(format!("K delta = {k} * {delta_n} / {n} exceeds 1/2"));
        }
        if m < 2 * n {
            return bad(format!("m = {m} must be >= 2n"));
        }
        if !(c0 > 0.0) {
            return bad(format!("c0' = {c0} must be positive"));
        }
        Ok(Self { k, delta_n, n, m, c0 })
    }

    pub fn decomposition(&self) -> Decomposition {
        let q = self.n / self.delta_n;
        let r = self.n % self.delta_n;
        Decomposition { big_n: (q - 1) / self.k, k_rem: (q - 1) % self.k, n_tilde: self.delta_n + r }
    }

    /// `0, K, ..., (N - 1) K`.
    pub fn block_starts(&self) -> Vec<usize> {
        (0..self.decomposition().big_n).map(|j| j * self.k).collect()
    }

    /// The level `(i + num/den) delta_n`.
    pub fn level(&self, i: usize, num: usize, den: usize) -> u32 {
        (i * self.delta_n + num * self.delta_n / den) as u32
    }

    /// `c0' sigma^4 D^-d log(delta_n)`.
    pub fn b_prime_threshold(&self, sigma_sq: f64, law: &StepLaw) -> f64 {
        self.c0 * sigma_sq * sigma_sq * law.scale().powi(-(law.dim() as i32)) * (self.delta_n as f64).ln()
    }
}

/// Descendants of `v` at height `level` whose subtree reaches `target`,
/// skipping the child `skip`; `None` unless there is exactly one.
fn sole_descendant(tree: &Tree, v: u32, level: u32, target: u32, skip: Option<u32>) -> Option<u32> {
    let mut found = None;
    let mut stack: Vec<u32> = tree.children(v).iter().copied().filter(|&c| Some(c) != skip).collect();
    while let Some(w) = stack.pop() {
        if tree.reach(w) < target {
            continue;
        }
        if tree.height(w) == level {
            if found.is_some() {
                return None;
            }
            found = Some(w);
        } else {
            stack.extend_from_slice(tree.children(w));
        }
    }
    found
}

/// UDP on a plain tree: with `i = floor(h(v) / delta_n)`, exactly one
/// descendant of `v` at height `(i+1) delta_n` reaches `(i+2) delta_n`.
pub fn has_udp(tree: &Tree, v: u32, delta_n: usize) -> Result<bool> {
    if v as usize >= tree.len() {
        return Err(BlockError::VertexOutOfRange(v));
    }
    let i = tree.height(v) / delta_n as u32;
    let dn = delta_n as u32;
    Ok(sole_descendant(tree, v, (i + 1) * dn, (i + 2) * dn, None).is_some())
}

/// The unique descendant used by the block conditions. For a backbone
/// vertex `V_l` only `T(n, m)(l)` is searched; any other vertex must sit at
/// a multiple of `delta_n`.
pub fn unique_descendant(cond: &CondTree, v: u32, delta_n: usize) -> Result<Option<u32>> {
    let tree = cond.tree();
    let h = tree.height(v) as usize;
    let skip = if cond.is_backbone(v) {
        (h < cond.n()).then_some(v + 1)
    } else if h % delta_n == 0 {
        None
    } else {
        return Err(BlockError::HeightOutOfRange { v, h: h as u32 });
    };
    let i = h / delta_n;
    Ok(sole_descendant(tree, v, ((i + 1) * delta_n) as u32, ((i + 2) * delta_n) as u32, skip))
}

/// `||w - u|| <= sqrt(h(W) - h(U))` for `U` an ancestor of (or equal to) `W`.
pub fn typically_spaced(tree: &Tree, emb: &Embedding, law: &StepLaw, u: u32, w: u32) -> Result<bool> {
    if !tree.is_ancestor_or_self(u, w) {
        return Err(BlockError::NotAncestor(u, w));
    }
    Ok(ts_unchecked(tree, emb, law, u, w, 1.0))
}

/// `||w - u||^2 <= scale * (h(W) - h(U))`, boundary inclusive.
#[inline]
fn ts_unchecked(tree: &Tree, emb: &Embedding, law: &StepLaw, u: u32, w: u32, scale: f64) -> bool {
    let gap = (tree.height(w) - tree.height(u)) as f64;
    law.norm_sq_within(emb.site(w) - emb.site(u), scale * gap)
}

/// Outcome of the tree and spatial conditions for block `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub i: usize,
    /// Conditions (1)–(6); a condition whose prerequisites are undefined is false.
    pub conditions: [bool; 6],
    pub l1: Option<usize>,
    pub l2: Option<usize>,
    /// `Y_(i+1), Y_(i+2), ...` as far as defined (up to `Y_(i+K+1)`).
    pub y: Vec<u32>,
    /// `X'_(i+K)`, `X'_(i+K+1)` as far as defined.
    pub x_prime: Vec<u32>,
    pub a: bool,
    pub intersections: Option<u64>,
    pub b_prime: Option<bool>,
}

impl BlockReport {
    pub fn tree_good(&self) -> bool {
        self.conditions[..4].iter().all(|c| *c)
    }

    /// The first failing condition, numbered from 1.
    pub fn first_failure(&self) -> Option<usize> {
        self.conditions.iter().position(|c| !c).map(|k| k + 1)
    }
}

/// Backbone indices `l` in `[lo, hi)` whose off-backbone subtree reaches `target`.
fn reaching_levels(cond: &CondTree, lo: usize, hi: usize, target: u32) -> Vec<usize> {
    (lo..hi).filter(|&l| cond.reach_off_backbone(l) >= target).collect()
}

/// Conditions (1)–(4).
pub fn detect_tree_good(cond: &CondTree, i: usize, params: &BlockParams) -> Result<BlockReport> {
    let k = params.k;
    let dn = params.delta_n;
    if (i + k + 1) * dn > cond.n() {
        return Err(BlockError::BlockOutOfRange(i));
    }
    let mut r = BlockReport {
        i,
        conditions: [false; 6],
        l1: None,
        l2: None,
        y: Vec::new(),
        x_prime: Vec::new(),
        a: false,
        intersections: None,
        b_prime: None,
    };

    let c1 = reaching_levels(cond, i * dn, (i + 1) * dn, params.level(i + 2, 0, 1));
    if let [l1] = c1[..] {
        r.l1 = Some(l1);
        r.conditions[0] = params.level(i, 1, 4) as usize <= l1 && l1 <= params.level(i, 3, 4) as usize;
    }

    if let Some(l1) = r.l1 {
        let mut cur = unique_descendant(cond, l1 as u32, dn)?;
        while let Some(y) = cur {
            r.y.push(y);
            if r.y.len() == k {
                break;
            }
            cur = unique_descendant(cond, y, dn)?;
        }
        r.conditions[1] = r.y.len() == k;
    }

    let c3 = reaching_levels(cond, (i + k - 1) * dn, (i + k) * dn, params.level(i + k + 1, 0, 1));
    if let [l2] = c3[..] {
        r.l2 = Some(l2);
        r.conditions[2] =
            params.level(i + k - 1, 1, 4) as usize <= l2 && l2 <= params.level(i + k - 1, 3, 4) as usize;
    }

    if let Some(l2) = r.l2 {
        if let Some(xp) = unique_descendant(cond, l2 as u32, dn)? {
            r.x_prime.push(xp);
            if let Some(xp1) = unique_descendant(cond, xp, dn)? {
                r.x_prime.push(xp1);
            }
        }
    }
    if r.y.len() == k {
        if let Some(y_next) = unique_descendant(cond, r.y[k - 1], dn)? {
            r.y.push(y_next);
        }
    }
    r.conditions[3] = r.l2.is_some() && r.x_prime.len() == 2 && r.y.len() == k + 1;
    Ok(r)
}

/// Conditions (5) and (6), and `A(i)`.
pub fn detect_spatially_good(
    cond: &CondTree,
    emb: &Embedding,
    law: &StepLaw,
    report: &mut BlockReport,
    params: &BlockParams,
) -> Result<()> {
    let tree = cond.tree();
    let (i, k, dn) = (report.i, params.k, params.delta_n);
    let x = |j: usize| (j * dn) as u32;
    let ts = |u: u32, w: u32| typically_spaced(tree, emb, law, u, w);

    if let (Some(l1), Some(l2)) = (report.l1, report.l2) {
        let (l1, l2) = (l1 as u32, l2 as u32);
        let mut ok = ts(x(i), l1)? && ts(l1 + 1, x(i + 1))?;
        for j in i + 1..=(i + k).saturating_sub(2) {
            ok = ok && ts(x(j), x(j + 1))?;
        }
        ok = ok && ts(x(i + k - 1), l2)? && ts(l2 + 1, x(i + k))?;
        report.conditions[4] = ok;
    }

    if let (Some(l1), Some(l2)) = (report.l1, report.l2) {
        if report.y.len() >= k && !report.x_prime.is_empty() {
            let y = &report.y;
            let v1_plus = tree.ancestor_at_height(y[0], l1 as u32 + 1).expect("Y lies below V_l1");
            let v2_plus = tree.ancestor_at_height(report.x_prime[0], l2 as u32 + 1).expect("X' lies below V_l2");
            let mut ok = ts(v1_plus, y[0])?;
            for j in 0..k - 1 {
                ok = ok && ts(y[j], y[j + 1])?;
            }
            ok = ok && ts(v2_plus, report.x_prime[0])?;
            ok = ok && law.norm_sq_within(emb.site(report.x_prime[0]) - emb.site(y[k - 1]), dn as f64);
            report.conditions[5] = ok;
        }
    }
    report.a = report.conditions.iter().all(|c| *c);
    Ok(())
}

/// Which intersect-well conditions (2)–(5) are enforced. Condition 1
/// (descent from the designated roots) always is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConditionMask {
    pub height: bool,
    pub branch: bool,
    pub spacing: bool,
    pub coincide: bool,
}

impl ConditionMask {
    pub const ALL: ConditionMask = ConditionMask { height: true, branch: true, spacing: true, coincide: true };

    /// All conditions except `c` (one of 2, 3, 4, 5).
    pub fn without(c: usize) -> Option<ConditionMask> {
        let mut m = Self::ALL;
        match c {
            2 => m.height = false,
            3 => m.branch = false,
            4 => m.spacing = false,
            5 => m.coincide = false,
            _ => return None,
        }
        Some(m)
    }
}

impl Default for ConditionMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Height windows relative to `base`, in units of `dn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub base: u32,
    pub dn: u32,
}

/// Lower ends round up and upper ends round down, so that for `dn` not
/// divisible by 12 the windows keep exactly the integer heights inside the
/// real intervals.
impl Window {
    fn floor(&self, num: u32, den: u32) -> u32 {
        self.base + num * self.dn / den
    }
    fn ceil(&self, num: u32, den: u32) -> u32 {
        self.base + (num * self.dn).div_ceil(den)
    }
    pub fn u_range(&self) -> (u32, u32) {
        (self.ceil(5, 6), self.floor(1, 1))
    }
    pub fn u_max_primed(&self) -> u32 {
        self.floor(11, 12)
    }
    pub fn z_range(&self) -> (u32, u32) {
        (self.ceil(1, 2), self.floor(4, 6))
    }
    /// Height of the ancestor `W` in the extra-intersection window.
    pub fn w_height(&self) -> u32 {
        self.ceil(9, 12)
    }
}

/// One of the two designated subtrees: vertices descending from `root`,
/// with `Z` taken relative to the path from `root` to `target`.
#[derive(Debug, Clone, Copy)]
pub struct Side<'a> {
    pub tree: &'a Tree,
    pub emb: &'a Embedding,
    pub root: u32,
    pub target: u32,
}

/// A vertex satisfying all one-sided intersect-well conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub u: u32,
    pub z: u32,
    pub z_plus: Option<u32>,
    pub height: u32,
    pub site: Site,
    /// Also meets the stronger one-sided conditions of `I'`.
    pub primed: bool,
}

/// Candidates on one side, by propagating `Z` and `Z^+` down from the root.
pub fn side_candidates(side: &Side, window: Window, law: &StepLaw, mask: ConditionMask) -> Result<Vec<Candidate>> {
    let tree = side.tree;
    if !tree.is_ancestor_or_self(side.root, side.target) {
        return Err(BlockError::NotAncestor(side.root, side.target));
    }
    let mut on_path = FxHashSet::default();
    let mut w = side.target;
    loop {
        on_path.insert(w);
        if w == side.root {
            break;
        }
        w = tree.parent(w).expect("root is an ancestor of target");
    }
    let (u_lo, u_hi) = window.u_range();
    let (z_lo, z_hi) = window.z_range();
    let u_primed = window.u_max_primed();
    let mut out = Vec::new();
    let mut stack: Vec<(u32, u32, Option<u32>)> = vec![(side.root, side.root, None)];
    while let Some((v, z, z_plus)) = stack.pop() {
        let h = tree.height(v);
        let in_window = h >= u_lo && h <= u_hi;
        if in_window || !mask.height {
            let hz = tree.height(z);
            let branch_ok = !mask.branch || (z_lo <= hz && hz <= z_hi);
            let spacing_ok = !mask.spacing
                || (ts_unchecked(tree, side.emb, law, side.root, z, 1.0)
                    && z_plus.map_or(true, |zp| ts_unchecked(tree, side.emb, law, zp, v, 1.0)));
            if branch_ok && spacing_ok {
                let primed = h <= u_primed && z_plus.map_or(true, |zp| ts_unchecked(tree, side.emb, law, zp, v, 0.25));
                out.push(Candidate { u: v, z, z_plus, height: h, site: side.emb.site(v), primed });
            }
        }
        if mask.height && h >= u_hi {
            continue;
        }
        for &c in tree.children(v) {
            let next = if on_path.contains(&c) {
                (c, c, None)
            } else if z == v {
                (c, v, Some(c))
            } else {
                (c, z, z_plus)
            };
            stack.push(next);
        }
    }
    out.sort_by_key(|c| c.u);
    Ok(out)
}

fn match_key(c: &Candidate, mask: ConditionMask) -> (Site, u32) {
    match (mask.coincide, mask.height) {
        (true, _) => (c.site, c.height),
        (false, true) => (Site::ORIGIN, c.height),
        (false, false) => (Site::ORIGIN, 0),
    }
}

/// An intersect-well pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntersectionRecord {
    pub u1: u32,
    pub u2: u32,
    pub height: u32,
    pub z1: u32,
    pub z2: u32,
    pub z1_plus: Option<u32>,
    pub z2_plus: Option<u32>,
    pub site: Vec<i32>,
    /// Whether the pair is also in `I'`.
    pub primed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntersectionSet {
    /// `|I|`.
    pub count: u64,
    /// `|I'|`.
    pub primed_count: u64,
    /// Empty unless records were requested.
    pub records: Vec<IntersectionRecord>,
}

/// Pairs `(U_1, U_2)` from candidate lists that match under `mask`.
pub fn match_candidates(c1: &[Candidate], c2: &[Candidate], mask: ConditionMask, dim: usize, collect: bool) -> IntersectionSet {
    let mut by_key: FxHashMap<(Site, u32), Vec<usize>> = FxHashMap::default();
    for (k, c) in c2.iter().enumerate() {
        by_key.entry(match_key(c, mask)).or_default().push(k);
    }
    let mut out = IntersectionSet::default();
    for a in c1 {
        let Some(list) = by_key.get(&match_key(a, mask)) else { continue };
        out.count += list.len() as u64;
        if !collect && !a.primed {
            continue;
        }
        for &k in list {
            let b = &c2[k];
            let primed = a.primed && b.primed && mask.coincide;
            out.primed_count += primed as u64;
            if collect {
                out.records.push(IntersectionRecord {
                    u1: a.u,
                    u2: b.u,
                    height: a.height,
                    z1: a.z,
                    z2: b.z,
                    z1_plus: a.z_plus,
                    z2_plus: b.z_plus,
                    site: a.site.coords(dim).to_vec(),
                    primed,
                });
            }
        }
    }
    out
}

pub fn intersect_sides(
    s1: &Side,
    s2: &Side,
    window: Window,
    law: &StepLaw,
    mask: ConditionMask,
    collect: bool,
) -> Result<IntersectionSet> {
    let c1 = side_candidates(s1, window, law, mask)?;
    let c2 = side_candidates(s2, window, law, mask)?;
    Ok(match_candidates(&c1, &c2, mask, law.dim(), collect))
}

/// `I` (or `I'` when `primed`) for a K-good block, between the subtrees of
/// `X'_(i+K)` and `Y_(i+K)`. Records `|I|` and `B'` in the report.
pub fn enumerate_intersections(
    cond: &CondTree,
    emb: &Embedding,
    law: &StepLaw,
    report: &mut BlockReport,
    params: &BlockParams,
    sigma_sq: f64,
    primed: bool,
) -> Result<IntersectionSet> {
    if !report.a {
        return Err(BlockError::NotGood(report.i));
    }
    let k = params.k;
    let tree = cond.tree();
    let s1 = Side { tree, emb, root: report.x_prime[0], target: report.x_prime[1] };
    let s2 = Side { tree, emb, root: report.y[k - 1], target: report.y[k] };
    let window = Window { base: params.level(report.i + k, 0, 1), dn: params.delta_n as u32 };
    let mut set = intersect_sides(&s1, &s2, window, law, ConditionMask::ALL, true)?;
    report.intersections = Some(set.count);
    report.b_prime = Some(set.count as f64 >= params.b_prime_threshold(sigma_sq, law));
    if primed {
        set.records.retain(|r| r.primed);
        set.count = set.primed_count;
    }
    Ok(set)
}

/// Tree conditions, spatial conditions and, for good blocks, `|I|` for
/// every block start.
pub fn analyze_blocks(
    cond: &CondTree,
    emb: &Embedding,
    law: &StepLaw,
    params: &BlockParams,
    sigma_sq: f64,
) -> Result<Vec<BlockReport>> {
    params
        .block_starts()
        .into_iter()
        .map(|i| {
            let mut r = detect_tree_good(cond, i, params)?;
            detect_spatially_good(cond, emb, law, &mut r, params)?;
            if r.a {
                enumerate_intersections(cond, emb, law, &mut r, params, sigma_sq, false)?;
            }
            Ok(r)
        })
        .collect()
}

/// Two independent embedded copies of `T(delta_n, 2 delta_n)` with roots at
/// `(o, 0)` and `(x, 0)`.
#[derive(Debug, Clone)]
pub struct TwoTreeSample {
    pub delta_n: usize,
    pub x: Site,
    pub t1: CondTree,
    pub e1: Embedding,
    pub t2: CondTree,
    pub e2: Embedding,
}

impl TwoTreeSample {
    pub fn sides(&self) -> (Side<'_>, Side<'_>) {
        let target = self.delta_n as u32;
        (
            Side { tree: self.t1.tree(), emb: &self.e1, root: 0, target },
            Side { tree: self.t2.tree(), emb: &self.e2, root: 0, target },
        )
    }

    pub fn window(&self) -> Window {
        Window { base: 0, dn: self.delta_n as u32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoTreeOptions {
    /// Grow only the side trees at backbone indices `[delta_n/2, 2 delta_n/3]`
    /// and only up to height `delta_n`. Every vertex that can take part in
    /// an intersect-well pair is still sampled, with the same law.
    pub restricted: bool,
    /// The offset `n*` in the good-extra-intersection window.
    pub n_star: usize,
    pub collect_records: bool,
    pub mask: ConditionMask,
}

impl Default for TwoTreeOptions {
    fn default() -> Self {
        Self { restricted: true, n_star: 1, collect_records: false, mask: ConditionMask::ALL }
    }
}

/// Sampler for the two-tree experiment.
#[derive(Debug, Clone)]
pub struct TwoTreeSampler {
    sampler: TnmSampler,
    law: StepLaw,
    delta_n: usize,
}

impl TwoTreeSampler {
    pub fn new(p: &ProgenyLaw, law: &StepLaw, delta_n: usize, restricted: bool) -> Result<Self> {
        if delta_n < 12 {
            return Err(BlockError::InvalidParams(format!("delta_n = {delta_n} must be at least 12")));
        }
        let mut sampler = TnmSampler::new(p, delta_n, 2 * delta_n)?;
        if restricted {
            sampler = sampler.with_options(TnmOptions {
                height_cap: Some(delta_n as u32),
                side_range: Some((delta_n.div_ceil(2), 2 * delta_n / 3)),
                ..TnmOptions::default()
            });
        }
        Ok(Self { sampler, law: law.clone(), delta_n })
    }

    pub fn sample<R: RngCore + ?Sized>(&self, x: Site, rng: &mut R) -> Result<TwoTreeSample> {
        let t1 = self.sampler.sample(rng)?;
        let t2 = self.sampler.sample(rng)?;
        let e1 = embed_tree(t1.tree(), &self.law, Site::ORIGIN, rng.next_u64());
        let e2 = embed_tree(t2.tree(), &self.law, x, rng.next_u64());
        Ok(TwoTreeSample { delta_n: self.delta_n, x, t1, e1, t2, e2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTreeOutcome {
    pub i_count: u64,
    pub i_prime_count: u64,
    /// `|I-hat|` for each pair of `I'`, in record order.
    pub extra: Vec<u64>,
    pub records: Vec<IntersectionRecord>,
    /// Whether `||x|| <= sqrt(delta_n)`.
    pub separation_ok: bool,
}

/// Counts `I`, `I'` and the good extra intersections of each `I'` pair.
pub fn analyze_two_trees(s: &TwoTreeSample, law: &StepLaw, opts: &TwoTreeOptions) -> Result<TwoTreeOutcome> {
    let (s1, s2) = s.sides();
    let window = s.window();
    let c1 = side_candidates(&s1, window, law, opts.mask)?;
    let c2 = side_candidates(&s2, window, law, opts.mask)?;
    let set = match_candidates(&c1, &c2, opts.mask, law.dim(), true);
    let mut extra = Vec::new();
    if opts.mask == ConditionMask::ALL {
        for r in set.records.iter().filter(|r| r.primed) {
            extra.push(good_extra_count(s, &c1, &c2, r, opts.n_star, law.dim()));
        }
    }
    let records = if opts.collect_records { set.records } else { Vec::new() };
    Ok(TwoTreeOutcome {
        i_count: set.count,
        i_prime_count: set.primed_count,
        extra,
        records,
        separation_ok: law.norm_sq_within(s.x, s.delta_n as f64),
    })
}

/// `|I-hat|` for one pair `(U_1, U_2)` of `I'`: intersect-well pairs
/// `(Y_1, Y_2)` with `Y_j` below `W_j` (the ancestor of `U_j` at
/// `9 delta_n / 12`), not strictly below `U_j`, and `h(Y_j) >= h_u`. The
/// window `[9 delta_n/12, h_u - n*]` must be nonempty.
fn good_extra_count(
    s: &TwoTreeSample,
    c1: &[Candidate],
    c2: &[Candidate],
    pair: &IntersectionRecord,
    n_star: usize,
    dim: usize,
) -> u64 {
    let h_u = pair.height;
    let r_lo = s.window().w_height();
    if (r_lo as usize) + n_star > h_u as usize {
        return 0;
    }
    let filter = |tree: &Tree, cands: &[Candidate], u: u32| -> Vec<Candidate> {
        let w = tree.ancestor_at_height(u, r_lo).expect("U lies above W");
        cands
            .iter()
            .filter(|c| {
                c.height >= h_u
                    && tree.ancestor_at_height(c.u, r_lo) == Some(w)
                    && (c.u == u || tree.ancestor_at_height(c.u, h_u) != Some(u))
            })
            .copied()
            .collect()
    };
    let y1 = filter(s.t1.tree(), c1, pair.u1);
    let y2 = filter(s.t2.tree(), c2, pair.u2);
    match_candidates(&y1, &y2, ConditionMask::ALL, dim, false).count
}

/// One two-tree replicate.
pub fn two_tree_experiment<R: RngCore + ?Sized>(
    p: &ProgenyLaw,
    law: &StepLaw,
    delta_n: usize,
    x: Site,
    opts: &TwoTreeOptions,
    rng: &mut R,
) -> Result<TwoTreeOutcome> {
    let sample = TwoTreeSampler::new(p, law, delta_n, opts.restricted)?.sample(x, rng)?;
    analyze_two_trees(&sample, law, opts)
}

/// JSON-lines output: one object per item.
pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// All-pairs reference for intersect-well counting.
pub mod oracle {
    use super::*;

    struct Info {
        u: u32,
        height: u32,
        z: u32,
        z_plus: Option<u32>,
        site: Site,
    }

    fn ancestors(tree: &Tree, mut v: u32) -> Vec<u32> {
        let mut out = vec![v];
        while let Some(p) = tree.parent(v) {
            out.push(p);
            v = p;
        }
        out
    }

    fn side_info(side: &Side) -> Vec<Info> {
        let tree = side.tree;
        let target_anc: FxHashSet<u32> = ancestors(tree, side.target).into_iter().collect();
        (0..tree.len() as u32)
            .filter(|&u| ancestors(tree, u).contains(&side.root))
            .map(|u| {
                let up = ancestors(tree, u);
                let zi = up.iter().position(|a| target_anc.contains(a)).unwrap();
                Info {
                    u,
                    height: tree.height(u),
                    z: up[zi],
                    z_plus: (zi > 0).then(|| up[zi - 1]),
                    site: side.emb.site(u),
                }
            })
            .collect()
    }

    fn spaced(side: &Side, law: &StepLaw, a: u32, b: u32, scale: f64) -> bool {
        let gap = (side.tree.height(b) - side.tree.height(a)) as f64;
        let d = side.emb.site(b) - side.emb.site(a);
        law.norm_sq(d) <= scale * gap * (1.0 + 1e-9) + 1e-9
    }

    /// `(|I|, |I'|)` by checking every pair.
    pub fn all_pairs(s1: &Side, s2: &Side, window: Window, law: &StepLaw, mask: ConditionMask) -> (u64, u64) {
        let a = side_info(s1);
        let b = side_info(s2);
        // Heights compared as twelfths of dn, exactly.
        let twelfths = |h: u32| 12 * (h as i64 - window.base as i64);
        let dn = window.dn as i64;
        let in_u = |h: u32| 10 * dn <= twelfths(h) && twelfths(h) <= 12 * dn;
        let in_z = |h: u32| 6 * dn <= twelfths(h) && twelfths(h) <= 8 * dn;
        let below_primed = |h: u32| twelfths(h) <= 11 * dn;
        let one_sided = |side: &Side, i: &Info| -> (bool, bool) {
            let branch = !mask.branch || in_z(side.tree.height(i.z));
            let spacing = !mask.spacing
                || (spaced(side, law, side.root, i.z, 1.0) && i.z_plus.map_or(true, |zp| spaced(side, law, zp, i.u, 1.0)));
            let tight = i.z_plus.map_or(true, |zp| spaced(side, law, zp, i.u, 0.25));
            (branch && spacing, tight)
        };
        let sa: Vec<(bool, bool)> = a.iter().map(|i| one_sided(s1, i)).collect();
        let sb: Vec<(bool, bool)> = b.iter().map(|i| one_sided(s2, i)).collect();
        let (mut count, mut primed) = (0, 0);
        for (i, (ok1, t1)) in a.iter().zip(&sa) {
            for (j, (ok2, t2)) in b.iter().zip(&sb) {
                let height_ok = !mask.height || (i.height == j.height && in_u(i.height));
                let coincide = !mask.coincide || (i.site == j.site && i.height == j.height);
                if *ok1 && *ok2 && height_ok && coincide {
                    count += 1;
                    if mask.coincide && below_primed(i.height) && *t1 && *t2 {
                        primed += 1;
                    }
                }
            }
        }
        (count, primed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branching::TreeBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_validation_and_decomposition() {
        assert!(BlockParams::new(1, 24, 480, 960, 1.0).is_err());
        assert!(BlockParams::new(2, 25, 480, 960, 1.0).is_err());
        assert!(BlockParams::new(2, 24, 480, 900, 1.0).is_err());
        assert!(BlockParams::new(11, 24, 480, 960, 1.0).is_err());
        let p = BlockParams::new(3, 24, 24 * 20 + 7, 2000, 1.0).unwrap();
        let d = p.decomposition();
        assert_eq!(d, Decomposition { big_n: 6, k_rem: 1, n_tilde: 31 });
        assert_eq!(d.big_n * 3 * 24 + d.k_rem * 24 + d.n_tilde, p.n);
        assert_eq!(p.block_starts(), vec![0, 3, 6, 9, 12, 15]);
        assert_eq!(p.level(2, 3, 4), 66);
    }

    /// Backbone of length `n` only.
    fn bare(n: usize) -> CondTree {
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, n);
        CondTree::from_tree(b.finish(), n, 2 * n).unwrap()
    }

    #[test]
    fn udp_on_bare_backbone() {
        let c = bare(24 * 6);
        for l in 0..24 * 5 {
            assert!(has_udp(c.tree(), l, 24).unwrap(), "V_{l}");
            // Inside T(n, m)(l) there is nothing below V_l.
            assert_eq!(unique_descendant(&c, l, 24).unwrap(), None);
        }
        assert!(!has_udp(c.tree(), 24 * 5, 24).unwrap());
        let p = BlockParams::new(2, 24, 24 * 6, 24 * 12, 1.0).unwrap();
        let r = detect_tree_good(&c, 0, &p).unwrap();
        assert!(!r.conditions[0]);
        assert_eq!(r.first_failure(), Some(1));
    }

    #[test]
    fn udp_hand_trees() {
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, 100);
        // Two branches from V_5 reaching height 48.
        let a = b.add_path(5, 43);
        let c = b.add_path(5, 43);
        let t = b.finish();
        assert_eq!((t.height(a), t.height(c)), (48, 48));
        let ct = CondTree::from_tree(t, 100, 200).unwrap();
        assert_eq!(unique_descendant(&ct, 5, 24).unwrap(), None);
        // A leaf off the backbone at height 24 has no descendants at 48.
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, 100);
        let leaf = b.add_path(3, 21);
        let ct = CondTree::from_tree(b.finish(), 100, 200).unwrap();
        assert!(!has_udp(ct.tree(), leaf, 24).unwrap());
        assert_eq!(unique_descendant(&ct, leaf, 24).unwrap(), None);
        assert!(matches!(unique_descendant(&ct, leaf - 1, 24), Err(BlockError::HeightOutOfRange { .. })));
    }

    struct Engineered {
        cond: CondTree,
        y_end: u32,
        x_end: u32,
    }

    /// A block with `K = 2`, `delta_n = 24`, `i = 0` satisfying (1)-(4):
    /// `l1 = 12` and `l2 = 36`, each carrying one branch up to height 96.
    fn good_tree(extra: impl FnOnce(&mut TreeBuilder, u32, u32)) -> Engineered {
        let dn = 24;
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, 6 * dn);
        let y_end = b.add_path(12, 4 * dn - 12);
        let x_end = b.add_path(36, 4 * dn - 36);
        extra(&mut b, y_end, x_end);
        Engineered { cond: CondTree::from_tree(b.finish(), 6 * dn, 12 * dn).unwrap(), y_end, x_end }
    }

    fn params() -> BlockParams {
        BlockParams::new(2, 24, 6 * 24, 12 * 24, 1.0).unwrap()
    }

    #[test]
    fn engineered_tree_good() {
        let g = good_tree(|_, _, _| {});
        let t = g.cond.tree();
        let r = detect_tree_good(&g.cond, 0, &params()).unwrap();
        assert_eq!(r.conditions[..4], [true; 4]);
        assert_eq!((r.l1, r.l2), (Some(12), Some(36)));
        let ys: Vec<u32> = [24, 48, 72].iter().map(|&h| t.ancestor_at_height(g.y_end, h).unwrap()).collect();
        assert_eq!(r.y, ys);
        let xs: Vec<u32> = [48, 72].iter().map(|&h| t.ancestor_at_height(g.x_end, h).unwrap()).collect();
        assert_eq!(r.x_prime, xs);
        assert!(matches!(detect_tree_good(&g.cond, 4, &params()), Err(BlockError::BlockOutOfRange(4))));
    }

    #[test]
    fn two_side_trees_break_uniqueness() {
        let dn = 24;
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, 6 * dn);
        b.add_path(8, 2 * dn - 8);
        b.add_path(12, 2 * dn - 12);
        let c = CondTree::from_tree(b.finish(), 6 * dn, 12 * dn).unwrap();
        let r = detect_tree_good(&c, 0, &params()).unwrap();
        assert!(!r.conditions[0]);
        assert_eq!(r.l1, None);
    }

    fn site(c: i32) -> Site {
        Site::from_slice(&[c]).unwrap()
    }

    fn hand_embedding(cond: &CondTree, law: &StepLaw, at: impl Fn(u32) -> i32) -> Embedding {
        crate::trace::embed_tree_with(cond.tree(), law, Site::ORIGIN, 0, |v| Some(site(at(v))))
    }

    #[test]
    fn engineered_spatially_good_and_far_endpoints() {
        let law = StepLaw::srw(1).unwrap();
        let g = good_tree(|_, _, _| {});
        let flat = hand_embedding(&g.cond, &law, |_| 0);
        let mut r = detect_tree_good(&g.cond, 0, &params()).unwrap();
        detect_spatially_good(&g.cond, &flat, &law, &mut r, &params()).unwrap();
        assert!(r.a);

        // Shift the Y branch to 3 by height 15 and to 7 by height 28: every
        // typical-spacing condition holds but ||x'_2 - y_2|| = 7 > sqrt(24).
        let t = g.cond.tree();
        let y_branch: Vec<u32> = (13..=96).map(|h| t.ancestor_at_height(g.y_end, h).unwrap()).collect();
        let shifted = hand_embedding(&g.cond, &law, |v| match y_branch.iter().position(|&w| w == v) {
            Some(k) => {
                let h = k as i32 + 13;
                (h - 12).min(3) + (h - 24).clamp(0, 4)
            }
            None => 0,
        });
        let mut r = detect_tree_good(&g.cond, 0, &params()).unwrap();
        detect_spatially_good(&g.cond, &shifted, &law, &mut r, &params()).unwrap();
        assert_eq!(r.conditions, [true, true, true, true, true, false]);
        assert!(!r.a);
        assert!(enumerate_intersections(&g.cond, &shifted, &law, &mut r, &params(), 1.0, false).is_err());
    }

    #[test]
    fn engineered_single_intersection() {
        let mut z = (0, 0);
        let mut branches = (0, 0);
        let g = good_tree(|b, y_end, x_end| {
            // Y path vertex at height h has id y_end - (96 - h); likewise for X'.
            let z1 = x_end - (96 - 62);
            let z2 = y_end - (96 - 61);
            branches = (b.add_path(z1, 8), b.add_path(z2, 9));
            z = (z1, z2);
        });
        let law = StepLaw::srw(1).unwrap();
        let (u1_end, u2_end) = branches;
        // The X' branch sits at 1 from height 63 on; the Y branch moves to 1 at height 70.
        let emb = hand_embedding(&g.cond, &law, |v| {
            if v > u1_end - 8 && v <= u1_end {
                1
            } else if v == u2_end {
                1
            } else {
                0
            }
        });
        let mut r = detect_tree_good(&g.cond, 0, &params()).unwrap();
        detect_spatially_good(&g.cond, &emb, &law, &mut r, &params()).unwrap();
        assert!(r.a);
        let set = enumerate_intersections(&g.cond, &emb, &law, &mut r, &params(), 1.0, false).unwrap();
        assert_eq!(set.count, 1);
        let rec = &set.records[0];
        assert_eq!((rec.u1, rec.u2, rec.height), (u1_end, u2_end, 70));
        assert_eq!((rec.z1, rec.z2), z);
        assert_eq!(r.intersections, Some(1));
        // Threshold c0 sigma^4 D^-1 log 24 = log 24 > 1.
        assert_eq!(r.b_prime, Some(false));
    }

    #[test]
    fn disjoint_boxes_give_no_intersections() {
        let law = StepLaw::srw(1).unwrap();
        let g = good_tree(|_, _, _| {});
        let t = g.cond.tree();
        let x_branch: FxHashSet<u32> = (37..=96).map(|h| t.ancestor_at_height(g.x_end, h).unwrap()).collect();
        let emb = hand_embedding(&g.cond, &law, |v| if x_branch.contains(&v) { 1 } else { 0 });
        let mut r = detect_tree_good(&g.cond, 0, &params()).unwrap();
        detect_spatially_good(&g.cond, &emb, &law, &mut r, &params()).unwrap();
        assert!(r.a);
        let set = enumerate_intersections(&g.cond, &emb, &law, &mut r, &params(), 1.0, false).unwrap();
        assert_eq!(set.count, 0);
    }

    #[test]
    fn ts_examples() {
        let mut b = TreeBuilder::new();
        b.add_root(0);
        b.add_path(0, 4);
        let t = b.finish();
        let law = StepLaw::srw(1).unwrap();
        let site = |c: i32| Site::from_slice(&[c]).unwrap();
        let emb_with = |xs: [i32; 5]| {
            crate::trace::embed_tree_with(&t, &law, Site::ORIGIN, 0, |v| Some(site(xs[v as usize])))
        };
        let e = emb_with([0, 0, 1, 2, 2]);
        assert!(typically_spaced(&t, &e, &law, 0, 1).unwrap());
        let e = emb_with([0, 2, 1, 2, 2]);
        assert!(!typically_spaced(&t, &e, &law, 0, 1).unwrap());
        // Boundary ||w - u||^2 = h(W) - h(U) = 4.
        let e = emb_with([0, 1, 2, 1, 2]);
        assert!(typically_spaced(&t, &e, &law, 0, 4).unwrap());
        assert!(typically_spaced(&t, &e, &law, 2, 3).unwrap());
        assert!(matches!(typically_spaced(&t, &e, &law, 3, 1), Err(BlockError::NotAncestor(3, 1))));
    }

    #[test]
    fn fast_matches_all_pairs() {
        let law = StepLaw::srw(1).unwrap();
        let p = ProgenyLaw::binary();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut total = 0;
        for (dn, restricted) in [(24, false), (24, true), (28, false), (28, true)] {
            let sampler = TwoTreeSampler::new(&p, &law, dn, restricted).unwrap();
            for _ in 0..30 {
                let s = sampler.sample(Site::from_slice(&[2]).unwrap(), &mut rng).unwrap();
                let (s1, s2) = s.sides();
                for mask in [Some(ConditionMask::ALL), ConditionMask::without(3), ConditionMask::without(4)] {
                    let mask = mask.unwrap();
                    let fast = intersect_sides(&s1, &s2, s.window(), &law, mask, false).unwrap();
                    let slow = oracle::all_pairs(&s1, &s2, s.window(), &law, mask);
                    assert_eq!((fast.count, fast.primed_count), slow);
                    total += fast.count;
                }
            }
        }
        assert!(total > 0);
    }

    #[test]
    fn unreachable_separation_gives_nothing() {
        let law = StepLaw::srw(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let far = Site::from_slice(&[2 * 24 + 1]).unwrap();
        for _ in 0..20 {
            let o = two_tree_experiment(&ProgenyLaw::binary(), &law, 24, far, &TwoTreeOptions::default(), &mut rng)
                .unwrap();
            assert_eq!((o.i_count, o.i_prime_count), (0, 0));
            assert!(!o.separation_ok);
        }
    }

    #[test]
    fn jsonl_output() {
        let r = IntersectionRecord {
            u1: 1,
            u2: 2,
            height: 20,
            z1: 12,
            z2: 13,
            z1_plus: Some(30),
            z2_plus: None,
            site: vec![1, -1],
            primed: true,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"u1\":1,\"u2\":2,\"height\":20,\"z1\":12,\"z2\":13,\"z1_plus\":30,\"z2_plus\":null,\"site\":[1,-1],\"primed\":true}\n"
        );
    }
}
