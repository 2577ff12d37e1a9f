//! Clusters, external boundaries and dual surfaces, the φ/ψ search oracles,
//! break points, cone points, the cone-bond decomposition and slab classification.

use crate::lattice::{
    dot, forward_axis, norm, slab_index, to_f64, unit, Cone, LatticeError, LatticeSpec, Plaquette, ZEdge, GEOM_TOL,
};
use crate::rc_measure::{BondConfig, BoundaryCondition, RCParams, RcGraph};
use crate::sampler::{ChainState, SamplerError, BURN_IN};
use crate::union_find::UnionFind;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use thiserror::Error;

pub type Vertex = Vec<i64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("cluster touches the box boundary")]
    InfiniteCluster,
    #[error("endpoint {0:?} is not in the cluster")]
    NotInCluster(Vertex),
    #[error("cluster leaves the strip between the endpoints")]
    OutsideStrip,
    #[error("endpoints are out of order along t")]
    Unordered,
    #[error("search budget exceeded: {0}")]
    Budget(String),
    #[error("slab width must be at least 2, got {0}")]
    BadWidth(usize),
    #[error("only {0} slabs fit, need at least one full slab after the first")]
    TooFewSlabs(i64),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("cone openings must be increasing and in (0,1)")]
    BadOpenings,
}

/// Vertex and open-edge sets of one connected component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub vertices: BTreeSet<Vertex>,
    pub edges: BTreeSet<ZEdge>,
    /// True when no vertex lies on the analysis box boundary.
    pub finite: bool,
}

impl Cluster {
    /// Cluster spanned by the given open edges (plus `extra` vertices),
    /// finite-flagged. Used to build clusters by hand.
    pub fn from_edges(edges: impl IntoIterator<Item = ZEdge>, extra: impl IntoIterator<Item = Vertex>) -> Self {
        let edges: BTreeSet<ZEdge> = edges.into_iter().collect();
        let mut vertices: BTreeSet<Vertex> = extra.into_iter().collect();
        for e in &edges {
            vertices.insert(e.base.clone());
            vertices.insert(e.tip());
        }
        Cluster {
            vertices,
            edges,
            finite: true,
        }
    }

    /// Straight segment from `a` along `axis` with `len` edges.
    pub fn line(a: &[i64], axis: usize, len: usize) -> Self {
        let edges = (0..len).map(|k| {
            let mut b = a.to_vec();
            b[axis] += k as i64;
            ZEdge::new(b, axis)
        });
        Cluster::from_edges(edges, [a.to_vec()])
    }

    pub fn d(&self) -> usize {
        self.vertices.iter().next().map_or(0, |v| v.len())
    }

    pub fn is_connected(&self) -> bool {
        let idx: BTreeMap<&Vertex, usize> = self.vertices.iter().enumerate().map(|(i, v)| (v, i)).collect();
        let mut uf = UnionFind::new(self.vertices.len());
        for e in &self.edges {
            match (idx.get(&e.base), idx.get(&e.tip())) {
                (Some(&a), Some(&b)) => {
                    uf.union(a, b);
                }
                _ => return false,
            }
        }
        uf.components() <= 1
    }
}

/// Component labelling of a box configuration under free boundary.
pub struct Components<'a> {
    pub spec: &'a LatticeSpec,
    pub labels: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub finite: Vec<bool>,
    open: Vec<bool>,
}

pub fn components<'a>(config: &BondConfig, spec: &'a LatticeSpec) -> Components<'a> {
    let edges = spec.edges();
    assert_eq!(edges.len(), config.open.len(), "configuration does not match box");
    let mut uf = UnionFind::new(spec.n_vertices());
    for (e, &o) in edges.iter().zip(&config.open) {
        if o {
            uf.union(e.a, e.b);
        }
    }
    let labels = uf.labels();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    let mut finite = vec![true; k];
    for (v, &l) in labels.iter().enumerate() {
        members[l].push(v);
        if spec.is_boundary(v) {
            finite[l] = false;
        }
    }
    Components {
        spec,
        labels,
        members,
        finite,
        open: config.open.clone(),
    }
}

impl Components<'_> {
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn label_of(&self, x: &[i64]) -> Option<usize> {
        self.spec.index(x).map(|i| self.labels[i])
    }

    pub fn cluster(&self, label: usize) -> Cluster {
        let spec = self.spec;
        let mut vertices = BTreeSet::new();
        let mut edges = BTreeSet::new();
        let table = spec.edge_table();
        let d = spec.d();
        for &v in &self.members[label] {
            vertices.insert(spec.coords(v));
            for axis in 0..d {
                if let Some(k) = table[v * d + axis] {
                    if self.open[k] {
                        edges.insert(ZEdge::new(spec.coords(v), axis));
                    }
                }
            }
        }
        Cluster {
            vertices,
            edges,
            finite: self.finite[label],
        }
    }
}

/// Plaquettes dual to the external boundary of a cluster.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualSurface {
    pub plaquettes: BTreeSet<Plaquette>,
}

impl DualSurface {
    pub fn len(&self) -> usize {
        self.plaquettes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plaquettes.is_empty()
    }
}

/// The vertex set with all finite complement components added.
pub fn filled(vertices: &BTreeSet<Vertex>) -> BTreeSet<Vertex> {
    let Some(first) = vertices.iter().next() else {
        return BTreeSet::new();
    };
    let d = first.len();
    let mut lo = first.clone();
    let mut hi = first.clone();
    for v in vertices {
        for i in 0..d {
            lo[i] = lo[i].min(v[i] - 1);
            hi[i] = hi[i].max(v[i] + 1);
        }
    }
    let bbox = LatticeSpec::rect((0..d).map(|i| (hi[i] - lo[i] + 1) as usize).collect::<Vec<_>>())
        .expect("nonempty box")
        .with_origin(lo);
    let n = bbox.n_vertices();
    let mut inside = vec![false; n];
    for v in vertices {
        inside[bbox.index(v).unwrap()] = true;
    }
    let mut reached = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| bbox.is_boundary(i)).collect();
    for &i in &queue {
        reached[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        for axis in 0..d {
            for s in [-1, 1] {
                if let Some(j) = bbox.step(i, axis, s) {
                    if !reached[j] && !inside[j] {
                        reached[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (0..n).filter(|&i| !reached[i]).map(|i| bbox.coords(i)).collect()
}

/// Edges with exactly one endpoint in `set`.
pub fn edge_boundary(set: &BTreeSet<Vertex>) -> Vec<ZEdge> {
    let mut out = Vec::new();
    for v in set {
        for axis in 0..v.len() {
            let mut up = v.clone();
            up[axis] += 1;
            if !set.contains(&up) {
                out.push(ZEdge::new(v.clone(), axis));
            }
            let mut down = v.clone();
            down[axis] -= 1;
            if !set.contains(&down) {
                out.push(ZEdge::new(down, axis));
            }
        }
    }
    out.sort();
    out
}

/// External boundary ∂̄ of a finite cluster and the dual surface S.
pub fn external_boundary_and_surface(cluster: &Cluster) -> Result<(Vec<ZEdge>, DualSurface), GeometryError> {
    if !cluster.finite {
        return Err(GeometryError::InfiniteCluster);
    }
    let bd = edge_boundary(&filled(&cluster.vertices));
    let plaquettes = bd.iter().map(Plaquette::dual_of).collect();
    Ok((bd, DualSurface { plaquettes }))
}

/// Limits for the exhaustive lattice-animal searches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleBudget {
    pub max_vertices: usize,
    pub max_sets: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            max_vertices: 12,
            max_sets: 200_000_000,
        }
    }
}

/// Most edges spanned by n vertices of Z^d (Loomis–Whitney bound).
fn max_internal_edges(n: usize, d: usize) -> i64 {
    let nf = n as f64;
    (d as f64 * nf - d as f64 * nf.powf((d - 1) as f64 / d as f64) + 1e-9).floor() as i64
}

/// Smallest possible edge boundary of an n-vertex set.
fn min_boundary(n: usize, d: usize) -> i64 {
    2 * d as i64 * n as i64 - 2 * max_internal_edges(n, d)
}

/// Redelmeier enumeration of connected vertex sets through the origin on a
/// local grid, with pruning toward a target vertex.
struct AnimalSearch<'a> {
    d: usize,
    side: i64,
    stride: Vec<i64>,
    mark: Vec<bool>,
    in_set: Vec<bool>,
    set: Vec<usize>,
    dist: Vec<i64>,
    target: Vec<i64>,
    allowed: &'a dyn Fn(&[i64]) -> bool,
    cap: usize,
    visited: u64,
    max_sets: u64,
}

impl<'a> AnimalSearch<'a> {
    fn new(target: &[i64], budget: OracleBudget, allowed: &'a dyn Fn(&[i64]) -> bool) -> Self {
        let d = target.len();
        let side = 2 * budget.max_vertices as i64 + 3;
        let stride: Vec<i64> = (0..d).map(|i| side.pow(i as u32)).collect();
        let cells = side.pow(d as u32) as usize;
        AnimalSearch {
            d,
            side,
            stride,
            mark: vec![false; cells],
            in_set: vec![false; cells],
            set: Vec::new(),
            dist: Vec::new(),
            target: target.to_vec(),
            allowed,
            cap: budget.max_vertices,
            visited: 0,
            max_sets: budget.max_sets,
        }
    }

    fn id(&self, x: &[i64]) -> usize {
        let r = self.side / 2;
        x.iter().zip(&self.stride).map(|(c, s)| (c + r) * s).sum::<i64>() as usize
    }

    fn coords(&self, mut id: usize) -> Vec<i64> {
        let r = self.side / 2;
        (0..self.d)
            .map(|_| {
                let c = (id as i64 % self.side) - r;
                id /= self.side as usize;
                c
            })
            .collect()
    }

    fn l1_to_target(&self, id: usize) -> i64 {
        self.coords(id)
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Calls `eval(search)` on every connected set through the origin that
    /// can still reach the target within the size cap; `eval` may lower the
    /// cap through its return value.
    fn run(&mut self, eval: &mut dyn FnMut(&Self) -> Option<usize>) -> Result<(), GeometryError> {
        let origin = self.id(&vec![0; self.d]);
        self.mark[origin] = true;
        self.rec(vec![origin], eval)
    }

    fn rec(
        &mut self,
        mut untried: Vec<usize>,
        eval: &mut dyn FnMut(&Self) -> Option<usize>,
    ) -> Result<(), GeometryError> {
        while let Some(c) = untried.pop() {
            let dc = self.l1_to_target(c);
            let dmin = self.dist.last().map_or(dc, |&m| m.min(dc));
            if self.set.len() + 1 + dmin as usize > self.cap {
                continue;
            }
            self.set.push(c);
            self.in_set[c] = true;
            self.dist.push(dmin);
            self.visited += 1;
            if self.visited > self.max_sets {
                return Err(GeometryError::Budget(format!("more than {} sets", self.max_sets)));
            }
            if dmin == 0 {
                if let Some(cap) = eval(self) {
                    self.cap = self.cap.min(cap);
                }
            }
            if self.set.len() < self.cap {
                let mut next = untried.clone();
                let mut added = Vec::new();
                for axis in 0..self.d {
                    for s in [-1i64, 1] {
                        let nb = (c as i64 + s * self.stride[axis]) as usize;
                        if !self.mark[nb] && (self.allowed)(&self.coords(nb)) {
                            self.mark[nb] = true;
                            next.push(nb);
                            added.push(nb);
                        }
                    }
                }
                self.rec(next, eval)?;
                for nb in added {
                    self.mark[nb] = false;
                }
            }
            self.in_set[c] = false;
            self.set.pop();
            self.dist.pop();
        }
        Ok(())
    }

    fn vertex_set(&self) -> BTreeSet<Vertex> {
        self.set.iter().map(|&i| self.coords(i)).collect()
    }

    /// Edge boundary size of the current set without hole filling.
    fn plain_boundary(&self) -> i64 {
        let mut internal = 0;
        for &c in &self.set {
            for s in &self.stride {
                if self.in_set[c + *s as usize] {
                    internal += 1;
                }
            }
        }
        2 * self.d as i64 * self.set.len() as i64 - 2 * internal
    }

    /// A set this small cannot enclose a hole.
    fn may_have_holes(&self) -> bool {
        self.set.len() >= 4 * self.d - 1
    }
}

/// Size of the dual surface of a finite vertex set (holes filled).
pub fn surface_size(vertices: &BTreeSet<Vertex>) -> usize {
    edge_boundary(&filled(vertices)).len()
}

/// (φ(x), ψ(x)): the least dual-surface size over connected sets containing
/// 0 and x, and the least edge count of a cluster realising it. Exhaustive
/// over sets of at most `budget.max_vertices` vertices.
pub fn phi_psi_oracle(x: &[i64], budget: OracleBudget) -> Result<(usize, usize), GeometryError> {
    let d = x.len();
    if x.iter().all(|&c| c == 0) {
        return Ok((0, 0));
    }
    let l1: i64 = x.iter().map(|c| c.abs()).sum();
    if l1 as usize + 1 > budget.max_vertices {
        return Err(GeometryError::Budget(format!(
            "|x|_1 = {l1} needs more than {} vertices",
            budget.max_vertices
        )));
    }
    // a monotone path is a valid starting bound
    let path = monotone_path(x);
    let mut best = surface_size(&path) as i64;
    let mut best_edges = path.len() - 1;
    let cap_for = |b: i64| {
        (1..=budget.max_vertices)
            .filter(|&n| min_boundary(n, d) <= b)
            .max()
            .unwrap_or(1)
    };
    let allow = |_: &[i64]| true;
    let mut search = AnimalSearch::new(
        x,
        OracleBudget {
            max_vertices: cap_for(best),
            ..budget
        },
        &allow,
    );
    let mut eval = |s: &AnimalSearch| {
        let size = if s.may_have_holes() {
            surface_size(&s.vertex_set()) as i64
        } else {
            s.plain_boundary()
        };
        if size < best {
            best = size;
            best_edges = s.set.len() - 1;
        } else if size == best {
            best_edges = best_edges.min(s.set.len() - 1);
        }
        Some(cap_for(best))
    };
    search.run(&mut eval)?;
    Ok((best as usize, best_edges))
}

fn monotone_path(x: &[i64]) -> BTreeSet<Vertex> {
    let mut cur = vec![0; x.len()];
    let mut out = BTreeSet::from([cur.clone()]);
    for i in 0..x.len() {
        while cur[i] != x[i] {
            cur[i] += x[i].signum();
            out.insert(cur.clone());
        }
    }
    out
}

/// Number of boundary plaquettes of the filled set whose centre lies in the
/// closed strip between the hyperplanes through 0 and x.
pub fn strip_count(vertices: &BTreeSet<Vertex>, t_hat: &[f64], hi: f64) -> usize {
    edge_boundary(&filled(vertices))
        .iter()
        .filter(|e| {
            let s = dot(t_hat, &e.midpoint());
            s >= -GEOM_TOL && s <= hi + GEOM_TOL
        })
        .count()
}

/// φ_t(x): least number of surface plaquettes inside the strip S^t_{0,x}
/// over connected sets containing 0 and x, exhaustive within the budget.
pub fn phi_t_oracle(x: &[i64], t: &[f64], budget: OracleBudget) -> Result<usize, GeometryError> {
    let d = x.len();
    let t_hat = unit(t)?;
    let hi = dot(&t_hat, &to_f64(x));
    if hi < -GEOM_TOL {
        return Err(GeometryError::Unordered);
    }
    if x.iter().all(|&c| c == 0) {
        return Ok(0);
    }
    let l1: i64 = x.iter().map(|c| c.abs()).sum();
    if l1 as usize + 1 > budget.max_vertices {
        return Err(GeometryError::Budget(format!(
            "|x|_1 = {l1} needs more than {} vertices",
            budget.max_vertices
        )));
    }
    let path = monotone_path(x);
    let mut best = strip_count(&path, &t_hat, hi);
    // along an axis every level of the strip carries at least 2(d-1) plaquettes
    let axis = (0..d).find(|&i| (t_hat[i] - 1.0).abs() < GEOM_TOL);
    if let Some(a) = axis {
        let floor = 2 * (d - 1) * (x[a] as usize + 1);
        if best == floor {
            return Ok(best);
        }
    }
    let th = t_hat.clone();
    let allow = move |c: &[i64]| match axis {
        // outside vertices cannot cancel plaquettes inside an axis strip
        Some(a) => c[a] >= 0 && c[a] as f64 <= hi + GEOM_TOL,
        None => dot(&th, &to_f64(c)) > -2.0 && dot(&th, &to_f64(c)) < hi + 2.0,
    };
    let mut search = AnimalSearch::new(x, budget, &allow);
    let mut eval = |s: &AnimalSearch| {
        best = best.min(strip_count(&s.vertex_set(), &t_hat, hi));
        None
    };
    search.run(&mut eval)?;
    Ok(best)
}

/// Break points, t-bonds and (optionally) cone points and cone bonds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakPointData {
    pub u: usize,
    pub break_points: Vec<Vertex>,
    pub t_bonds: Vec<(Vertex, Vertex)>,
    pub eps: Option<f64>,
    pub cone_points: Vec<Vertex>,
    pub cone_bonds: Vec<(Vertex, Vertex)>,
}

fn plus_axis(v: &[i64], axis: usize, s: i64) -> Vertex {
    let mut w = v.to_vec();
    w[axis] += s;
    w
}

fn check_strip(cluster: &Cluster, t: &[f64], x: &[i64], y: &[i64]) -> Result<(), GeometryError> {
    for e in [x, y] {
        if !cluster.vertices.contains(e) {
            return Err(GeometryError::NotInCluster(e.to_vec()));
        }
    }
    let (sx, sy) = (dot(t, &to_f64(x)), dot(t, &to_f64(y)));
    if sx > sy + GEOM_TOL {
        return Err(GeometryError::Unordered);
    }
    if cluster.vertices.iter().any(|v| {
        let s = dot(t, &to_f64(v));
        s < sx - GEOM_TOL || s > sy + GEOM_TOL
    }) {
        return Err(GeometryError::OutsideStrip);
    }
    Ok(())
}

/// Break points of a cluster lying in the strip between x and y, ordered by <t,.>.
pub fn break_points(cluster: &Cluster, t: &[f64], x: &[i64], y: &[i64]) -> Result<BreakPointData, GeometryError> {
    check_strip(cluster, t, x, y)?;
    let u = forward_axis(t)?;
    let tu = t[u];
    let mut levels: Vec<(f64, &Vertex)> = cluster.vertices.iter().map(|v| (dot(t, &to_f64(v)), v)).collect();
    levels.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    let lo = dot(t, &to_f64(x)) + tu;
    let hi = dot(t, &to_f64(y)) - tu;
    let mut bps = Vec::new();
    for &(s, b) in &levels {
        if s < lo - GEOM_TOL || s > hi + GEOM_TOL {
            continue;
        }
        let from = levels.partition_point(|l| l.0 < s - tu - GEOM_TOL);
        let to = levels.partition_point(|l| l.0 <= s + tu + GEOM_TOL);
        if to - from != 3 {
            continue;
        }
        let (bm, bp) = (plus_axis(b, u, -1), plus_axis(b, u, 1));
        if cluster.vertices.contains(&bm) && cluster.vertices.contains(&bp) {
            bps.push(b.clone());
        }
    }
    let set: HashSet<&Vertex> = bps.iter().collect();
    let t_bonds = bps
        .iter()
        .filter_map(|b| {
            let up = plus_axis(b, u, 1);
            set.contains(&up).then(|| (b.clone(), up))
        })
        .collect();
    Ok(BreakPointData {
        u,
        break_points: bps,
        t_bonds,
        eps: None,
        cone_points: Vec::new(),
        cone_bonds: Vec::new(),
    })
}

fn is_cone_point(cluster: &Cluster, cone: &Cone, t: &[f64], z: &[i64]) -> bool {
    let sz = dot(t, &to_f64(z));
    cluster.vertices.iter().all(|w| {
        let s = dot(t, &to_f64(w));
        let diff: Vec<f64> = w.iter().zip(z).map(|(a, b)| (a - b) as f64).collect();
        if s >= sz - GEOM_TOL && !cone.contains(&diff) {
            return false;
        }
        let back: Vec<f64> = diff.iter().map(|c| -c).collect();
        !(s <= sz + GEOM_TOL && !cone.contains(&back))
    })
}

/// Break points z whose forward part lies in z + C_ε(t) and backward part in z - C_ε(t).
pub fn cone_points(
    cluster: &Cluster,
    t: &[f64],
    eps: f64,
    x: &[i64],
    y: &[i64],
) -> Result<BreakPointData, GeometryError> {
    let mut data = break_points(cluster, t, x, y)?;
    let cone = Cone::new(t, eps)?;
    data.cone_points = data
        .break_points
        .iter()
        .filter(|z| is_cone_point(cluster, &cone, t, z))
        .cloned()
        .collect();
    let set: HashSet<&Vertex> = data.cone_points.iter().collect();
    data.cone_bonds = data
        .t_bonds
        .iter()
        .filter(|(a, b)| set.contains(a) && set.contains(b))
        .cloned()
        .collect();
    data.eps = Some(eps);
    Ok(data)
}

/// A piece of the decomposition: its vertices and edges, including the cut
/// bond joining it to the previous piece.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub vertices: BTreeSet<Vertex>,
    pub edges: BTreeSet<ZEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrreducibleDecomposition {
    pub backward: Piece,
    pub interior: Vec<Piece>,
    pub forward: Piece,
    /// X(s_i) = b_{i+1} - b_i for consecutive cone-bond roots.
    pub displacements: Vec<Vertex>,
    pub cut_bonds: Vec<(Vertex, Vertex)>,
    pub eps: f64,
    /// No cone bond was found; the whole cluster is the backward piece.
    pub degenerate: bool,
}

impl IrreducibleDecomposition {
    pub fn n(&self) -> usize {
        self.interior.len()
    }

    pub fn pieces(&self) -> impl Iterator<Item = &Piece> {
        std::iter::once(&self.backward)
            .chain(self.interior.iter())
            .chain(std::iter::once(&self.forward))
    }

    /// True when the pieces are disjoint and their union is the cluster.
    pub fn reconstructs(&self, cluster: &Cluster) -> bool {
        let mut vs = BTreeSet::new();
        let mut es = BTreeSet::new();
        for p in self.pieces() {
            for v in &p.vertices {
                if !vs.insert(v.clone()) {
                    return false;
                }
            }
            for e in &p.edges {
                if !es.insert(e.clone()) {
                    return false;
                }
            }
        }
        vs == cluster.vertices && es == cluster.edges
    }
}

/// Cuts the cluster at every cone bond, ordered along t.
pub fn irreducible_decomposition(
    cluster: &Cluster,
    t: &[f64],
    eps: f64,
    x: &[i64],
    y: &[i64],
) -> Result<IrreducibleDecomposition, GeometryError> {
    let data = cone_points(cluster, t, eps, x, y)?;
    let level = |v: &Vertex| dot(t, &to_f64(v));
    let piece = |lo: f64, hi: f64, bond: Option<&(Vertex, Vertex)>| {
        let vertices: BTreeSet<Vertex> = cluster
            .vertices
            .iter()
            .filter(|v| {
                let s = level(v);
                s >= lo - GEOM_TOL && s <= hi + GEOM_TOL
            })
            .cloned()
            .collect();
        let mut edges: BTreeSet<ZEdge> = cluster
            .edges
            .iter()
            .filter(|e| vertices.contains(&e.base) && vertices.contains(&e.tip()))
            .cloned()
            .collect();
        if let Some((a, _)) = bond {
            edges.insert(ZEdge::new(a.clone(), data.u));
        }
        Piece { vertices, edges }
    };
    let bonds = &data.cone_bonds;
    if bonds.is_empty() {
        return Ok(IrreducibleDecomposition {
            backward: Piece {
                vertices: cluster.vertices.clone(),
                edges: cluster.edges.clone(),
            },
            interior: Vec::new(),
            forward: Piece {
                vertices: BTreeSet::new(),
                edges: BTreeSet::new(),
            },
            displacements: Vec::new(),
            cut_bonds: Vec::new(),
            eps,
            degenerate: true,
        });
    }
    let backward = piece(f64::NEG_INFINITY, level(&bonds[0].0), None);
    let mut interior = Vec::new();
    let mut displacements = Vec::new();
    for w in bonds.windows(2) {
        interior.push(piece(level(&w[0].1), level(&w[1].0), Some(&w[0])));
        displacements.push(w[1].0.iter().zip(&w[0].0).map(|(a, b)| a - b).collect());
    }
    let last = bonds.last().unwrap();
    let forward = piece(level(&last.1), f64::INFINITY, Some(last));
    Ok(IrreducibleDecomposition {
        backward,
        interior,
        forward,
        displacements,
        cut_bonds: bonds.clone(),
        eps,
        degenerate: false,
    })
}

/// Connected components of a plaquette set under codimension-2 adjacency.
pub fn plaquette_components(set: &BTreeSet<Plaquette>) -> Vec<BTreeSet<Plaquette>> {
    let mut seen: HashSet<&Plaquette> = HashSet::new();
    let mut out = Vec::new();
    for p in set {
        if seen.contains(p) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut stack = vec![p.clone()];
        seen.insert(p);
        while let Some(c) = stack.pop() {
            for nb in c.neighbors() {
                if let Some(r) = set.get(&nb) {
                    if seen.insert(r) {
                        stack.push(nb);
                    }
                }
            }
            comp.insert(c);
        }
        out.push(comp);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabRow {
    pub index: usize,
    /// Connected components of the surface inside the slab.
    pub crossings: usize,
    pub size: usize,
    pub good: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabReport {
    pub t_hat: Vec<f64>,
    pub n: usize,
    /// Highest slab index 𝔱_N; slabs are 0..=t_n.
    pub t_n: usize,
    pub min_crossing: usize,
    pub slabs: Vec<SlabRow>,
    pub good_count: usize,
    pub bad_count: usize,
    pub surface: BTreeSet<Plaquette>,
}

impl SlabReport {
    pub fn good_slabs(&self) -> Vec<usize> {
        self.slabs.iter().filter(|r| r.good).map(|r| r.index).collect()
    }
}

/// Splits the surface into half-open slabs of width N along t and labels
/// each slab good (one connected piece of size < 2 × minimal crossing) or bad.
/// `min_crossing` defaults to φ_t(⌊N x̂⌋) from the oracle.
pub fn classify_slabs(
    surface: &DualSurface,
    t: &[f64],
    n: usize,
    x: &[i64],
    min_crossing: Option<usize>,
) -> Result<SlabReport, GeometryError> {
    if n < 2 {
        return Err(GeometryError::BadWidth(n));
    }
    let t_hat = unit(t)?;
    let xf = to_f64(x);
    let xn = norm(&xf);
    let t_n = (xn / n as f64).floor() as i64 - 1;
    if t_n < 1 {
        return Err(GeometryError::TooFewSlabs(t_n));
    }
    let t_n = t_n as usize;
    let min_crossing = match min_crossing {
        Some(m) => m,
        None => {
            let step: Vec<i64> = xf
                .iter()
                .map(|c| (n as f64 * c / xn + GEOM_TOL).floor() as i64)
                .collect();
            phi_t_oracle(&step, &t_hat, OracleBudget::default())?
        }
    };
    let mut per: Vec<BTreeSet<Plaquette>> = vec![BTreeSet::new(); t_n + 1];
    for p in &surface.plaquettes {
        if let Some(i) = slab_index(&p.center(), &t_hat, n)? {
            if i <= t_n {
                per[i].insert(p.clone());
            }
        }
    }
    let slabs: Vec<SlabRow> = per
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let crossings = plaquette_components(s).len();
            SlabRow {
                index,
                crossings,
                size: s.len(),
                good: crossings == 1 && s.len() < 2 * min_crossing,
            }
        })
        .collect();
    let good_count = slabs.iter().filter(|r| r.good).count();
    Ok(SlabReport {
        t_hat,
        n,
        t_n,
        min_crossing,
        bad_count: slabs.len() - good_count,
        good_count,
        slabs,
        surface: surface.plaquettes.clone(),
    })
}

/// Cluster vertices of good slabs z such that the cluster in every earlier
/// slab lies in z - C_ε(t) and in every later slab in z + C_ε(t).
///
/// N-sets are represented by the cluster vertices of each slab.
pub fn correct_points(
    report: &SlabReport,
    cluster: &Cluster,
    t: &[f64],
    eps: f64,
) -> Result<Vec<Vertex>, GeometryError> {
    let cone = Cone::new(t, eps)?;
    let t_hat = unit(t)?;
    let good: BTreeSet<usize> = report.good_slabs().into_iter().collect();
    let mut by_slab: Vec<Vec<&Vertex>> = vec![Vec::new(); report.t_n + 1];
    for v in &cluster.vertices {
        if let Some(i) = slab_index(&to_f64(v), &t_hat, report.n)? {
            if i <= report.t_n {
                by_slab[i].push(v);
            }
        }
    }
    let mut out: Vec<(f64, Vertex)> = Vec::new();
    for &i in &good {
        for z in &by_slab[i] {
            let ok = (0..=report.t_n).filter(|&j| j != i).all(|j| {
                by_slab[j].iter().all(|w| {
                    let diff: Vec<f64> = w.iter().zip(z.iter()).map(|(a, b)| (a - b) as f64).collect();
                    if j < i {
                        cone.contains(&diff.iter().map(|c| -c).collect::<Vec<_>>())
                    } else {
                        cone.contains(&diff)
                    }
                })
            });
            if ok {
                out.push((dot(&t_hat, &to_f64(z)), (*z).clone()));
            }
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(out.into_iter().map(|(_, v)| v).collect())
}

/// One line of a cluster dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: usize,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(Vertex, usize)>,
    pub surface: usize,
}

impl ClusterRecord {
    pub fn new(id: usize, c: &Cluster) -> Self {
        let surface = if c.finite { surface_size(&c.vertices) } else { 0 };
        ClusterRecord {
            id,
            vertices: c.vertices.iter().cloned().collect(),
            edges: c.edges.iter().map(|e| (e.base.clone(), e.axis)).collect(),
            surface,
        }
    }

    pub fn cluster(&self) -> Cluster {
        Cluster::from_edges(
            self.edges.iter().map(|(b, a)| ZEdge::new(b.clone(), *a)),
            self.vertices.iter().cloned(),
        )
    }
}

/// Lowest and highest vertex along t (ties broken lexicographically).
pub fn extreme_points(cluster: &Cluster, t: &[f64]) -> (Vertex, Vertex) {
    let key = |v: &&Vertex| dot(t, &to_f64(v));
    let lo = cluster
        .vertices
        .iter()
        .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(b)))
        .unwrap();
    let hi = cluster
        .vertices
        .iter()
        .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap().then(b.cmp(a)))
        .unwrap();
    (lo.clone(), hi.clone())
}

/// Outcome of decomposing one sampled finite cluster at every opening.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedRow {
    pub id: usize,
    pub sweep: u64,
    pub vertices: usize,
    pub edges: usize,
    /// Cone points per opening, in the order of the openings.
    pub cone_points: Vec<usize>,
    /// Interior pieces per opening.
    pub pieces: Vec<usize>,
    pub reconstructs: bool,
    pub nested: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionBatch {
    pub eps: Vec<f64>,
    pub rows: Vec<DecomposedRow>,
    pub sweeps: u64,
    pub target_reached: bool,
}

impl DecompositionBatch {
    pub fn all_reconstruct(&self) -> bool {
        self.rows.iter().all(|r| r.reconstructs)
    }

    pub fn all_nested(&self) -> bool {
        self.rows.iter().all(|r| r.nested)
    }
}

/// Decomposes one cluster between its extreme points at each opening in
/// `eps` (increasing) and checks reconstruction and nesting of cone points.
pub fn decompose_all(
    cluster: &Cluster,
    t: &[f64],
    eps: &[f64],
) -> Result<(Vec<usize>, Vec<usize>, bool, bool), GeometryError> {
    let (x, y) = extreme_points(cluster, t);
    let mut prev: Option<HashSet<Vertex>> = None;
    let (mut cps, mut pieces) = (Vec::new(), Vec::new());
    let (mut ok, mut nested) = (true, true);
    for &e in eps {
        let dec = irreducible_decomposition(cluster, t, e, &x, &y)?;
        ok &= dec.reconstructs(cluster);
        let cp: HashSet<Vertex> = cone_points(cluster, t, e, &x, &y)?.cone_points.into_iter().collect();
        if let Some(p) = &prev {
            nested &= p.is_subset(&cp);
        }
        cps.push(cp.len());
        pieces.push(dec.interior.len());
        prev = Some(cp);
    }
    Ok((cps, pieces, ok, nested))
}

/// Samples configurations on `spec` and decomposes every finite cluster
/// until `target` clusters are collected or `max_sweeps` is spent.
/// Clusters are taken in order of their lowest vertex index within a sweep.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_batch(
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
    t: &[f64],
    eps: &[f64],
    target: usize,
    max_sweeps: u64,
    seed: u64,
    mut keep: impl FnMut(&Cluster),
) -> Result<DecompositionBatch, GeometryError> {
    if eps.is_empty() || eps.windows(2).any(|w| w[0] >= w[1]) || eps.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(GeometryError::BadOpenings);
    }
    unit(t)?;
    let g = RcGraph::from_box(spec, bc).map_err(SamplerError::from)?;
    let n = spec.n_vertices();
    let d = spec.d();
    let table = spec.edge_table();
    let boundary: Vec<usize> = (0..n).filter(|&v| spec.is_boundary(v)).collect();
    let mut chain = ChainState::new(g, *params, seed);
    chain.run(BURN_IN);
    let mut touched = vec![false; n];
    let mut slot = vec![usize::MAX; n];
    let mut rows = Vec::new();
    let mut sweeps = 0;
    while rows.len() < target && sweeps < max_sweeps {
        chain.sweep();
        sweeps += 1;
        let open = chain.config.clone();
        let uf = chain.components();
        touched.iter_mut().for_each(|b| *b = false);
        for &v in &boundary {
            touched[uf.find(v)] = true;
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for v in 0..n {
            let r = uf.find(v);
            if touched[r] {
                continue;
            }
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(v);
        }
        for grp in &groups {
            slot[uf.find(grp[0])] = usize::MAX;
        }
        for grp in groups {
            if rows.len() == target {
                break;
            }
            let mut edges = Vec::new();
            for &v in &grp {
                for axis in 0..d {
                    if let Some(k) = table[v * d + axis] {
                        if open[k] {
                            edges.push(ZEdge::new(spec.coords(v), axis));
                        }
                    }
                }
            }
            let cluster = Cluster::from_edges(edges, grp.iter().map(|&v| spec.coords(v)));
            let (cone_points, pieces, reconstructs, nested) = decompose_all(&cluster, t, eps)?;
            keep(&cluster);
            rows.push(DecomposedRow {
                id: rows.len(),
                sweep: sweeps,
                vertices: cluster.vertices.len(),
                edges: cluster.edges.len(),
                cone_points,
                pieces,
                reconstructs,
                nested,
            });
        }
    }
    Ok(DecompositionBatch {
        eps: eps.to_vec(),
        target_reached: rows.len() >= target,
        rows,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(k: i64) -> Vertex {
        vec![k, 0, 0]
    }

    #[test]
    fn components_examples() {
        let s = LatticeSpec::centered(3, 5).unwrap();
        let m = s.edges().len();
        let c = components(&BondConfig::closed(m), &s);
        assert_eq!(c.count(), 125);
        let c = components(&BondConfig::all_open(m), &s);
        assert_eq!(c.count(), 1);
        assert!(!c.finite[0]);
        let table = s.edge_table();
        let mut cfg = BondConfig::closed(m);
        let o = s.index(&[0, 0, 0]).unwrap();
        cfg.open[table[o * 3].unwrap()] = true;
        let comp = components(&cfg, &s);
        let cl = comp.cluster(comp.label_of(&[0, 0, 0]).unwrap());
        assert_eq!(cl.vertices, BTreeSet::from([e1(0), e1(1)]));
        assert!(cl.finite);
        assert_eq!(cl.edges.len(), 1);
    }

    #[test]
    fn surface_examples() {
        let single = Cluster::from_edges([], [e1(0)]);
        assert_eq!(external_boundary_and_surface(&single).unwrap().1.len(), 6);
        let pair = Cluster::line(&e1(0), 0, 1);
        assert_eq!(external_boundary_and_surface(&pair).unwrap().1.len(), 10);
        // ring of 8 around (1,1)
        let ring: BTreeSet<Vertex> = [[0, 0], [1, 0], [2, 0], [2, 1], [2, 2], [1, 2], [0, 2], [0, 1]]
            .iter()
            .map(|v| v.to_vec())
            .collect();
        let cl = Cluster {
            vertices: ring,
            edges: BTreeSet::new(),
            finite: true,
        };
        assert_eq!(external_boundary_and_surface(&cl).unwrap().0.len(), 12);
        let inf = Cluster {
            finite: false,
            ..single
        };
        assert_eq!(
            external_boundary_and_surface(&inf).unwrap_err(),
            GeometryError::InfiniteCluster
        );
    }

    #[test]
    fn phi_small() {
        let b = OracleBudget::default();
        assert_eq!(phi_psi_oracle(&[0, 0, 0], b).unwrap().0, 0);
        assert_eq!(phi_psi_oracle(&[1, 0, 0], b).unwrap(), (10, 1));
        assert_eq!(phi_psi_oracle(&[1, 0], b).unwrap(), (6, 1));
        assert!(phi_psi_oracle(&[20, 0], b).is_err());
    }

    #[test]
    fn phi_t_small() {
        let b = OracleBudget::default();
        assert_eq!(phi_t_oracle(&[1, 0, 0], &[1.0, 0.0, 0.0], b).unwrap(), 8);
        assert_eq!(phi_t_oracle(&[0, 0, 0], &[1.0, 0.0, 0.0], b).unwrap(), 0);
    }

    #[test]
    fn break_point_examples() {
        let t = [1.0, 0.0, 0.0];
        let line = Cluster::line(&e1(0), 0, 5);
        let bp = break_points(&line, &t, &e1(0), &e1(5)).unwrap();
        assert_eq!(bp.break_points, vec![e1(1), e1(2), e1(3), e1(4)]);
        assert_eq!(bp.t_bonds, vec![(e1(1), e1(2)), (e1(2), e1(3)), (e1(3), e1(4))]);
        let pair = Cluster::line(&e1(0), 0, 1);
        assert!(break_points(&pair, &t, &e1(0), &e1(1)).unwrap().break_points.is_empty());
        let mut spur = line.clone();
        spur.edges.insert(ZEdge::new(vec![2, 0, 0], 1));
        spur.vertices.insert(vec![2, 1, 0]);
        let bp = break_points(&spur, &t, &e1(0), &e1(5)).unwrap();
        assert!(!bp.break_points.contains(&e1(2)));
        assert!(bp.break_points.contains(&e1(4)));
        assert_eq!(
            break_points(&line, &t, &e1(0), &e1(7)).unwrap_err(),
            GeometryError::NotInCluster(e1(7))
        );
    }

    #[test]
    fn line_decomposition() {
        let t = [1.0, 0.0, 0.0];
        let line = Cluster::line(&e1(0), 0, 5);
        for eps in [0.05, 0.5, 0.95] {
            let cp = cone_points(&line, &t, eps, &e1(0), &e1(5)).unwrap();
            assert_eq!(cp.cone_points, cp.break_points);
        }
        let dec = irreducible_decomposition(&line, &t, 0.3, &e1(0), &e1(5)).unwrap();
        assert_eq!(dec.cut_bonds.len(), 3);
        assert_eq!(dec.n(), 2);
        for p in &dec.interior {
            assert_eq!(p.edges.len(), 1);
        }
        assert!(dec.displacements.iter().all(|x| *x == e1(1)));
        assert!(dec.reconstructs(&line));
        let pair = Cluster::line(&e1(0), 0, 1);
        let dec = irreducible_decomposition(&pair, &t, 0.3, &e1(0), &e1(1)).unwrap();
        assert!(dec.degenerate);
        assert_eq!(dec.n(), 0);
        assert!(dec.reconstructs(&pair));
    }

    #[test]
    fn blob_blocks_cone_point() {
        // line 0..12 along e1 with a wide blob around level 5; candidate z = 7
        let t = [1.0, 0.0, 0.0];
        let mut c = Cluster::line(&e1(0), 0, 12);
        for k in 1..=3 {
            c.edges.insert(ZEdge::new(vec![5, k - 1, 0], 1));
            c.vertices.insert(vec![5, k, 0]);
            c.edges.insert(ZEdge::new(vec![5, -k, 0], 1));
            c.vertices.insert(vec![5, -k, 0]);
        }
        let small = cone_points(&c, &t, 0.1, &e1(0), &e1(12)).unwrap();
        assert!(small.break_points.contains(&e1(7)));
        assert!(!small.cone_points.contains(&e1(7)));
        let wide = cone_points(&c, &t, 0.9, &e1(0), &e1(12)).unwrap();
        assert!(wide.cone_points.contains(&e1(7)));
    }

    #[test]
    fn slab_examples() {
        let t = [1.0, 0.0, 0.0];
        let line = Cluster::line(&e1(0), 0, 20);
        let (_, s) = external_boundary_and_surface(&line).unwrap();
        let r = classify_slabs(&s, &t, 5, &e1(20), None).unwrap();
        assert_eq!(r.min_crossing, 24);
        assert_eq!(r.bad_count, 0);
        // a detached ring of plaquettes in slab 2
        let mut s2 = s.clone();
        for p in external_boundary_and_surface(&Cluster::from_edges([], [vec![11, 4, 0]]))
            .unwrap()
            .1
            .plaquettes
        {
            s2.plaquettes.insert(p);
        }
        let r2 = classify_slabs(&s2, &t, 5, &e1(20), Some(24)).unwrap();
        assert!(!r2.slabs[2].good);
        assert_eq!(r2.bad_count, 1);
        let cps = correct_points(&r, &line, &t, 0.05).unwrap();
        assert_eq!(cps.len(), 20);
        assert!(classify_slabs(&s, &t, 5, &e1(8), Some(24)).is_err());
    }
}
