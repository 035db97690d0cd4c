//! The random-walk embedding of a tree into `Z^d x Z_+` and its trace.
//!
//! The displacement of the edge into vertex `v` is a function of an
//! embedding key and the tree edge key of `v` only, so the image of a vertex
//! does not depend on traversal order or on which other parts of the tree
//! were sampled.

use std::io::{BufRead, Write};

use rand::{Rng, RngCore};
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::branching::{CondTree, Tree};
use crate::rng::keyed_uniform;
use crate::walk::{BridgeSampler, Site, StepLaw, WalkError, MAX_DIM};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("level {t} out of range 0..={max}")]
    LevelOutOfRange { t: usize, max: usize },
    #[error("edge from level {0} to level {1} is not oriented")]
    NotOriented(u32, u32),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("malformed edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TraceError>;

/// A space-time point `(x, t)`.
pub type Point = (Site, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEdge {
    pub tail: u32,
    pub head: u32,
    /// Key of the tree edge this trace edge comes from.
    pub key: u64,
}

/// Trace multigraph: deduplicated space-time points, one edge per tree edge.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGraph {
    dim: usize,
    points: Vec<Point>,
    index: FxHashMap<Point, u32>,
    edges: Vec<TraceEdge>,
    levels: Vec<Vec<u32>>,
}

impl TraceGraph {
    fn new(dim: usize, root: Point) -> TraceGraph {
        let mut g = TraceGraph { dim, points: Vec::new(), index: FxHashMap::default(), edges: Vec::new(), levels: Vec::new() };
        g.intern(root);
        g
    }

    fn intern(&mut self, p: Point) -> u32 {
        if let Some(&id) = self.index.get(&p) {
            return id;
        }
        let id = self.points.len() as u32;
        self.points.push(p);
        self.index.insert(p, id);
        let t = p.1 as usize;
        if self.levels.len() <= t {
            self.levels.resize(t + 1, Vec::new());
        }
        self.levels[t].push(id);
        id
    }

    fn push_edge(&mut self, tail: Point, head: Point, key: u64) -> Result<(u32, u32)> {
        if head.1 != tail.1 + 1 {
            return Err(TraceError::NotOriented(tail.1, head.1));
        }
        let a = self.intern(tail);
        let b = self.intern(head);
        self.edges.push(TraceEdge { tail: a, head: b, key });
        Ok((a, b))
    }

    /// Builds a trace from explicit edges; the first point is `root`.
    pub fn from_edges(dim: usize, root: Point, edges: &[(Point, Point, u64)]) -> Result<TraceGraph> {
        let mut g = TraceGraph::new(dim, root);
        for (tail, head, key) in edges {
            g.push_edge(*tail, *head, *key)?;
        }
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> u32 {
        0
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn point(&self, id: u32) -> Point {
        self.points[id as usize]
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn find(&self, p: Point) -> Option<u32> {
        self.index.get(&p).copied()
    }

    pub fn edges(&self) -> &[TraceEdge] {
        &self.edges
    }

    pub fn max_level(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    /// Point ids at time `t`.
    pub fn level_set(&self, t: usize) -> Result<&[u32]> {
        self.levels
            .get(t)
            .map(Vec::as_slice)
            .ok_or(TraceError::LevelOutOfRange { t, max: self.max_level() })
    }

    /// Number of edges from level `k` to level `k + 1`, for each `k`.
    pub fn edges_per_level(&self) -> Vec<usize> {
        let mut counts = vec![0; self.levels.len().saturating_sub(1)];
        for e in &self.edges {
            counts[self.points[e.tail as usize].1 as usize] += 1;
        }
        counts
    }

    /// Edge-list export. After a `# dim=<d>` line and a column header, each
    /// line is `t_tail x_tail... t_head x_head... edge_key`, space separated.
    /// The first edge line starts at the root unless the trace has no edges,
    /// in which case the root is given by a `# root t x...` line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.dim;
        writeln!(out, "# dim={d}")?;
        let (root_x, root_t) = self.points[0];
        write!(out, "# root {root_t}")?;
        for c in root_x.coords(d) {
            write!(out, " {c}")?;
        }
        writeln!(out)?;
        let xs = |p: &str| (1..=d).map(|i| format!("x{i}_{p}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "# t_tail {} t_head {} edge_key", xs("tail"), xs("head"))?;
        for e in &self.edges {
            let mut line = String::new();
            for id in [e.tail, e.head] {
                let (x, t) = self.points[id as usize];
                line.push_str(&t.to_string());
                for c in x.coords(d) {
                    line.push(' ');
                    line.push_str(&c.to_string());
                }
                line.push(' ');
            }
            line.push_str(&e.key.to_string());
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`TraceGraph::write_edge_list`].
    pub fn read_edge_list<R: BufRead>(input: R) -> Result<TraceGraph> {
        let mut dim: Option<usize> = None;
        let mut root: Option<Point> = None;
        let mut edges = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| TraceError::Parse { line: lineno + 1, msg: msg.to_string() };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(d) = rest.strip_prefix("dim=") {
                    let d: usize = d.trim().parse().map_err(|_| err("bad dimension"))?;
                    if d == 0 || d > MAX_DIM {
                        return Err(err("dimension out of range"));
                    }
                    dim = Some(d);
                } else if let Some(r) = rest.strip_prefix("root") {
                    let d = dim.ok_or_else(|| err("root before dimension"))?;
                    let nums = parse_ints(r).map_err(|m| err(&m))?;
                    if nums.len() != d + 1 {
                        return Err(err("root has the wrong number of fields"));
                    }
                    root = Some(to_point(&nums)?);
                }
                continue;
            }
            let nums = parse_ints(line).map_err(|m| err(&m))?;
            let d = match dim {
                Some(d) => d,
                None => {
                    if nums.len() < 5 || (nums.len() - 1) % 2 != 0 {
                        return Err(err("cannot infer dimension"));
                    }
                    let d = (nums.len() - 1) / 2 - 1;
                    dim = Some(d);
                    d
                }
            };
            if nums.len() != 2 * (d + 1) + 1 {
                return Err(err("wrong number of fields"));
            }
            let tail = to_point(&nums[..=d])?;
            let head = to_point(&nums[d + 1..2 * d + 2])?;
            let key = u64::try_from(nums[2 * d + 2]).map_err(|_| err("negative edge key"))?;
            edges.push((tail, head, key));
        }
        let dim = dim.ok_or(TraceError::Parse { line: 0, msg: "empty edge list".into() })?;
        let root = root
            .or_else(|| edges.first().map(|e| e.0))
            .ok_or(TraceError::Parse { line: 0, msg: "no root".into() })?;
        TraceGraph::from_edges(dim, root, &edges)
    }
}

fn parse_ints(s: &str) -> std::result::Result<Vec<i64>, String> {
    s.split_whitespace().map(|w| w.parse::<i64>().map_err(|_| format!("not an integer: '{w}'"))).collect()
}

fn to_point(nums: &[i64]) -> Result<Point> {
    let bad = |msg: &str| TraceError::Parse { line: 0, msg: msg.to_string() };
    let t = u32::try_from(nums[0]).map_err(|_| bad("negative time"))?;
    let coords: Vec<i32> = nums[1..]
        .iter()
        .map(|c| i32::try_from(*c).map_err(|_| bad("coordinate overflow")))
        .collect::<Result<_>>()?;
    Ok((Site::from_slice(&coords)?, t))
}

/// A trace together with the map from tree vertices to point ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub trace: TraceGraph,
    /// `phi[v]` is the point id of `Phi(v)`.
    pub phi: Vec<u32>,
}

impl Embedding {
    /// `Phi(v)` as a space-time point.
    #[inline]
    pub fn image(&self, v: u32) -> Point {
        self.trace.points[self.phi[v as usize] as usize]
    }

    #[inline]
    pub fn site(&self, v: u32) -> Site {
        self.image(v).0
    }

    #[inline]
    pub fn point_id(&self, v: u32) -> u32 {
        self.phi[v as usize]
    }
}

/// Displacement of the edge with tree key `edge_key` under embedding `key`.
#[inline]
pub fn edge_displacement(law: &StepLaw, key: u64, edge_key: u64) -> Site {
    law.step_from_uniform(keyed_uniform(key, edge_key))
}

/// Embeds `tree` with root image `(origin, height(root))`. Vertex images
/// for which `fixed` returns `Some` are taken from it instead of the keyed
/// displacement.
pub fn embed_tree_with<F>(tree: &Tree, law: &StepLaw, origin: Site, key: u64, mut fixed: F) -> Embedding
where
    F: FnMut(u32) -> Option<Site>,
{
    let root_t = tree.height(tree.root());
    let mut trace = TraceGraph::new(law.dim(), (origin, root_t));
    let mut phi = vec![0u32; tree.len()];
    let mut sites = vec![origin; tree.len()];
    for v in 1..tree.len() as u32 {
        let p = tree.parent(v).expect("non-root vertex has a parent");
        let x = fixed(v).unwrap_or_else(|| sites[p as usize] + edge_displacement(law, key, tree.edge_key(v)));
        sites[v as usize] = x;
        let tail = (sites[p as usize], tree.height(p));
        let (_, b) = trace.push_edge(tail, (x, tree.height(v)), tree.edge_key(v)).expect("tree heights are oriented");
        phi[v as usize] = b;
    }
    Embedding { trace, phi }
}

pub fn embed_tree(tree: &Tree, law: &StepLaw, origin: Site, key: u64) -> Embedding {
    embed_tree_with(tree, law, origin, key, |_| None)
}

/// Random-walk embedding with `Phi(root) = (origin, 0)`; the embedding key is
/// drawn from `rng`.
pub fn embed<R: RngCore + ?Sized>(tree: &CondTree, law: &StepLaw, origin: Site, rng: &mut R) -> Embedding {
    let key = rng.next_u64();
    embed_tree(tree.tree(), law, origin, key)
}

/// Embedding conditioned on `Phi(V_n) = (x, n)`: the backbone follows an
/// exact bridge, everything else the step law.
pub fn embed_bridge_with<R: Rng + ?Sized>(
    tree: &CondTree,
    sampler: &BridgeSampler,
    x: Site,
    rng: &mut R,
) -> Result<Embedding> {
    let n = tree.n();
    let path = sampler.sample(n, x, rng)?;
    let key = rng.next_u64();
    Ok(embed_tree_with(tree.tree(), sampler.law(), Site::ORIGIN, key, |v| {
        tree.is_backbone(v).then(|| path[v as usize])
    }))
}

pub fn embed_bridge<R: Rng + ?Sized>(tree: &CondTree, law: &StepLaw, x: Site, rng: &mut R) -> Result<Embedding> {
    let sampler = BridgeSampler::new(law, tree.n())?;
    embed_bridge_with(tree, &sampler, x, rng)
}
