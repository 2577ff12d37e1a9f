//! Abstract polymer models (partition functions, cluster weights, the
//! Kotecký–Preiss check) and the plaquette-polymer instance on Z^d.

use crate::lattice::{LatticeSpec, Plaquette, ZEdge};
use crate::rc_measure::RCParams;
use crate::union_find::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use thiserror::Error;

pub const DIRECT_CAP: usize = 20;
pub const CLUSTER_CAP: usize = 12;
pub const ENUM_MAX_SIZE: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PolymerError {
    #[error("{what}: {got} polymers exceeds the limit of {cap}")]
    Budget { what: &'static str, got: usize, cap: usize },
    #[error("polymer id {0} out of range")]
    BadId(usize),
    #[error("incompatibility relation is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("activity {0} of polymer {1} is negative or not finite")]
    BadActivity(f64, usize),
    #[error("model arrays disagree in length")]
    Shape,
    #[error("polymers {0} and {1} of the contour are incompatible")]
    NotContour(usize, usize),
    #[error("polymer edge {0:?} is not inside the box")]
    OutsideBox(ZEdge),
    #[error("invalid JSON model: {0}")]
    Json(String),
}

/// Polymers 0..n with sizes, activities and an incompatibility relation.
/// Every polymer is incompatible with itself; `incompatible[i]` lists the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolymerModel {
    pub sizes: Vec<usize>,
    pub activities: Vec<f64>,
    pub incompatible: Vec<Vec<usize>>,
}

impl PolymerModel {
    pub fn new(sizes: Vec<usize>, activities: Vec<f64>, incompatible: Vec<Vec<usize>>) -> Result<Self, PolymerError> {
        let n = sizes.len();
        if activities.len() != n || incompatible.len() != n {
            return Err(PolymerError::Shape);
        }
        for (i, &z) in activities.iter().enumerate() {
            if !(z >= 0.0 && z.is_finite()) {
                return Err(PolymerError::BadActivity(z, i));
            }
        }
        let mut adj: Vec<Vec<usize>> = incompatible;
        for (i, row) in adj.iter_mut().enumerate() {
            row.retain(|&j| j != i);
            row.sort_unstable();
            row.dedup();
        }
        for (i, row) in adj.iter().enumerate() {
            for &j in row {
                if j >= n {
                    return Err(PolymerError::BadId(j));
                }
                if adj[j].binary_search(&i).is_err() {
                    return Err(PolymerError::Asymmetric(i, j));
                }
            }
        }
        Ok(PolymerModel {
            sizes,
            activities,
            incompatible: adj,
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn compatible(&self, i: usize, j: usize) -> bool {
        i != j && self.incompatible[i].binary_search(&j).is_err()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PolymerError> {
        let m: PolymerModel = serde_json::from_str(s).map_err(|e| PolymerError::Json(e.to_string()))?;
        PolymerModel::new(m.sizes, m.activities, m.incompatible)
    }

    /// Incompatibility masks restricted to `subset` (bit k = subset[k]), self included.
    fn local_masks(&self, subset: &[usize]) -> Result<Vec<u64>, PolymerError> {
        let pos: HashMap<usize, usize> = subset.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        subset
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                if i >= self.len() {
                    return Err(PolymerError::BadId(i));
                }
                let mut m = 1u64 << k;
                for j in &self.incompatible[i] {
                    if let Some(&l) = pos.get(j) {
                        m |= 1 << l;
                    }
                }
                Ok(m)
            })
            .collect()
    }
}

/// A family of mutually compatible polymers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour(pub Vec<usize>);

impl Contour {
    pub fn new(model: &PolymerModel, ids: Vec<usize>) -> Result<Self, PolymerError> {
        for (k, &i) in ids.iter().enumerate() {
            if i >= model.len() {
                return Err(PolymerError::BadId(i));
            }
            for &j in &ids[..k] {
                if !model.compatible(i, j) {
                    return Err(PolymerError::NotContour(j, i));
                }
            }
        }
        Ok(Contour(ids))
    }

    pub fn activity(&self, model: &PolymerModel) -> f64 {
        self.0.iter().map(|&i| model.activities[i]).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterWeight {
    pub polymers: Vec<usize>,
    pub theta: f64,
}

/// Z over subsets of `masks.len()` polymers, memoised on bitmasks.
struct Partition<'a> {
    masks: &'a [u64],
    z: Vec<f64>,
    memo: HashMap<u64, f64>,
}

impl Partition<'_> {
    fn eval(&mut self, set: u64) -> f64 {
        if set == 0 {
            return 1.0;
        }
        if let Some(&v) = self.memo.get(&set) {
            return v;
        }
        let v = set.trailing_zeros() as usize;
        let without = set & !(1 << v);
        let r = self.eval(without) + self.z[v] * self.eval(set & !self.masks[v]);
        self.memo.insert(set, r);
        r
    }
}

/// A model with `n` polymers of size 1..=4, activities uniform in
/// [0, max_activity] and each pair incompatible with probability `density`.
pub fn random_model(
    rng: &mut impl Rng,
    n: usize,
    max_activity: f64,
    density: f64,
) -> Result<PolymerModel, PolymerError> {
    let sizes = (0..n).map(|_| rng.gen_range(1..=4)).collect();
    let activities = (0..n).map(|_| rng.gen::<f64>() * max_activity).collect();
    let mut inc = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < density {
                inc[i].push(j);
                inc[j].push(i);
            }
        }
    }
    PolymerModel::new(sizes, activities, inc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionRow {
    pub polymers: usize,
    pub clusters: usize,
    pub z_direct: f64,
    pub exp_sum_theta: f64,
    /// |exp(Σθ) - Z| / Z.
    pub rel_err: f64,
    /// Largest |θ| over sets that split into compatible parts.
    pub max_split_theta: f64,
}

/// Compares exp of the summed cluster weights with the direct partition
/// function of the whole model.
pub fn inversion_check(model: &PolymerModel) -> Result<InversionRow, PolymerError> {
    let all: Vec<usize> = (0..model.len()).collect();
    let z = partition_direct(model, &all)?;
    let theta = theta_all(model, &all)?;
    let masks = model.local_masks(&all)?;
    let (mut sum, mut clusters, mut split) = (0.0, 0, 0.0f64);
    for (s, &t) in theta.iter().enumerate().skip(1) {
        if mask_connected(&masks, s as u64) {
            sum += t;
            clusters += 1;
        } else {
            split = split.max(t.abs());
        }
    }
    let e = sum.exp();
    Ok(InversionRow {
        polymers: model.len(),
        clusters,
        z_direct: z,
        exp_sum_theta: e,
        rel_err: (e - z).abs() / z,
        max_split_theta: split,
    })
}

/// Sum over compatible families in `subset` of the product of activities.
pub fn partition_direct(model: &PolymerModel, subset: &[usize]) -> Result<f64, PolymerError> {
    if subset.len() > DIRECT_CAP {
        return Err(PolymerError::Budget {
            what: "partition_direct",
            got: subset.len(),
            cap: DIRECT_CAP,
        });
    }
    let masks = model.local_masks(subset)?;
    let z = subset.iter().map(|&i| model.activities[i]).collect();
    let mut p = Partition {
        masks: &masks,
        z,
        memo: HashMap::new(),
    };
    Ok(p.eval((1u64 << subset.len()) - 1))
}

fn mask_connected(masks: &[u64], set: u64) -> bool {
    if set == 0 {
        return false;
    }
    let mut seen = set & set.wrapping_neg();
    loop {
        let mut grow = seen;
        let mut s = seen;
        while s != 0 {
            let v = s.trailing_zeros() as usize;
            s &= s - 1;
            grow |= masks[v] & set;
        }
        if grow == seen {
            return seen == set;
        }
        seen = grow;
    }
}

/// θ for every subset of `subset` (indexed by bitmask) by Möbius inversion of log Z.
pub fn theta_all(model: &PolymerModel, subset: &[usize]) -> Result<Vec<f64>, PolymerError> {
    let n = subset.len();
    if n > CLUSTER_CAP {
        return Err(PolymerError::Budget {
            what: "cluster_logZ",
            got: n,
            cap: CLUSTER_CAP,
        });
    }
    let masks = model.local_masks(subset)?;
    let z = subset.iter().map(|&i| model.activities[i]).collect();
    let mut p = Partition {
        masks: &masks,
        z,
        memo: HashMap::new(),
    };
    let mut f: Vec<f64> = (0..1u64 << n)
        .map(|s| {
            let v = p.eval(s);
            assert!(v > 0.0, "partition function must be positive");
            v.ln()
        })
        .collect();
    for b in 0..n {
        for s in 0..f.len() {
            if s >> b & 1 == 1 {
                f[s] -= f[s ^ (1 << b)];
            }
        }
    }
    Ok(f)
}

/// Cluster weights θ(S') over the polymer clusters S' ⊆ S, and log Z(S).
pub fn cluster_log_z(model: &PolymerModel, subset: &[usize]) -> Result<(Vec<ClusterWeight>, f64), PolymerError> {
    let theta = theta_all(model, subset)?;
    let masks = model.local_masks(subset)?;
    let mut out = Vec::new();
    let mut total = 0.0;
    for (s, &t) in theta.iter().enumerate() {
        if mask_connected(&masks, s as u64) {
            total += t;
            let polymers = (0..subset.len())
                .filter(|&k| s >> k & 1 == 1)
                .map(|k| subset[k])
                .collect();
            out.push(ClusterWeight { polymers, theta: t });
        }
    }
    Ok((out, total))
}

/// True when `set` (bitmask over `subset`) splits into two mutually compatible nonempty parts.
pub fn splits(model: &PolymerModel, subset: &[usize], set: u64) -> Result<bool, PolymerError> {
    let masks = model.local_masks(subset)?;
    Ok(set != 0 && !mask_connected(&masks, set))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpReport {
    pub pass: bool,
    /// Σ_{s'≁s} e^{a(s') + tilt(s')} z(s') for each s.
    pub sums: Vec<f64>,
    /// a(s) - sum, negative where the condition fails.
    pub margins: Vec<f64>,
    pub worst: Option<usize>,
}

/// Kotecký–Preiss check Σ_{s'≁s} e^{a(s')+tilt(s')} |z(s')| ≤ a(s) for every polymer.
pub fn kp_check(model: &PolymerModel, a: &[f64], tilt: Option<&[f64]>) -> Result<KpReport, PolymerError> {
    let n = model.len();
    if a.len() != n || tilt.is_some_and(|t| t.len() != n) {
        return Err(PolymerError::Shape);
    }
    let term = |j: usize| (a[j] + tilt.map_or(0.0, |t| t[j])).exp() * model.activities[j].abs();
    let sums: Vec<f64> = (0..n)
        .map(|i| term(i) + model.incompatible[i].iter().map(|&j| term(j)).sum::<f64>())
        .collect();
    let margins: Vec<f64> = (0..n).map(|i| a[i] - sums[i]).collect();
    let worst = (0..n).min_by(|&i, &j| margins[i].total_cmp(&margins[j]));
    Ok(KpReport {
        pass: margins.iter().all(|&m| m >= 0.0),
        sums,
        margins,
        worst,
    })
}

/// 1 / (1 + e^{c8}/(q c3) · c8/(2 + c8)).
pub fn p0_threshold(q: f64, c3: f64, c8: f64) -> f64 {
    1.0 / (1.0 + c8.exp() / (q * c3) * c8 / (2.0 + c8))
}

/// Which norm ‖s‖ = κ(s) - 1 enters the activity.
#[derive(Clone, Debug, PartialEq)]
pub enum Norm {
    /// Components of Λ with the polymer's edges removed.
    Free(LatticeSpec),
    /// Components of a box around the polymer with its boundary identified.
    Wired { margin: usize },
}

fn bounding_box(edges: &[ZEdge], margin: usize) -> LatticeSpec {
    let d = edges[0].base.len();
    let mut lo = edges[0].base.clone();
    let mut hi = edges[0].base.clone();
    for e in edges {
        let t = e.tip();
        for i in 0..d {
            lo[i] = lo[i].min(e.base[i]);
            hi[i] = hi[i].max(t[i]);
        }
    }
    let m = margin as i64;
    let dims = (0..d).map(|i| (hi[i] - lo[i] + 1 + 2 * m) as usize).collect();
    LatticeSpec::rect(dims)
        .expect("nonempty")
        .with_origin(lo.iter().map(|c| c - m).collect())
}

/// κ - 1 with the polymer's primal edges closed and all other edges open.
pub fn polymer_norm(polymer: &BTreeSet<Plaquette>, norm: &Norm) -> Result<usize, PolymerError> {
    if polymer.is_empty() {
        return Ok(0);
    }
    let edges: Vec<ZEdge> = polymer.iter().map(|p| p.dual()).collect();
    let (spec, wired) = match norm {
        Norm::Free(spec) => (spec.clone(), false),
        Norm::Wired { margin } => (bounding_box(&edges, *margin), true),
    };
    let closed: HashSet<(usize, usize)> = edges
        .iter()
        .map(|e| {
            spec.index(&e.base)
                .filter(|_| spec.contains(&e.tip()))
                .map(|i| (i, e.axis))
                .ok_or_else(|| PolymerError::OutsideBox(e.clone()))
        })
        .collect::<Result<_, _>>()?;
    let n = spec.n_vertices();
    let mut uf = UnionFind::new(n);
    let mut first_bnd = None;
    for v in 0..n {
        if wired && spec.is_boundary(v) {
            match first_bnd {
                None => first_bnd = Some(v),
                Some(b) => {
                    uf.union(b, v);
                }
            }
        }
        for axis in 0..spec.d() {
            if let Some(w) = spec.step(v, axis, 1) {
                if !closed.contains(&(v, axis)) {
                    uf.union(v, w);
                }
            }
        }
    }
    Ok(uf.components() - 1)
}

/// Ψ = ((1-p)/p)^{|s|} q^{‖s‖}.
pub fn activity_psi(polymer: &BTreeSet<Plaquette>, params: &RCParams, norm: &Norm) -> Result<f64, PolymerError> {
    let k = polymer_norm(polymer, norm)?;
    Ok(((1.0 - params.p) / params.p).powi(polymer.len() as i32) * params.q.powi(k as i32))
}

fn min_edge_boundary(n: usize, d: usize) -> usize {
    let nf = n as f64;
    let inner = (d as f64 * nf - d as f64 * nf.powf((d - 1) as f64 / d as f64) + 1e-9).floor() as usize;
    2 * d * n - 2 * inner
}

/// Wired norm in Z^d: the number of finite components left after deleting
/// the polymer's edges, found by bounded searches from their endpoints.
pub fn wired_norm_local(polymer: &BTreeSet<Plaquette>) -> usize {
    if polymer.is_empty() {
        return 0;
    }
    let d = polymer.iter().next().unwrap().0.base.len();
    let k = polymer.len();
    // a finite component of n vertices needs at least min_edge_boundary(n) deleted edges
    let n_max = (1..=k)
        .take_while(|&n| min_edge_boundary(n, d) <= k)
        .last()
        .unwrap_or(0);
    if n_max == 0 {
        return 0;
    }
    let closed: HashSet<ZEdge> = polymer.iter().map(|p| p.dual()).collect();
    let mut assigned: HashSet<Vec<i64>> = HashSet::new();
    let mut count = 0;
    for e in &closed {
        for start in [e.base.clone(), e.tip()] {
            if assigned.contains(&start) {
                continue;
            }
            let mut seen = HashSet::from([start.clone()]);
            let mut queue = VecDeque::from([start]);
            let mut finite = true;
            while let Some(v) = queue.pop_front() {
                for axis in 0..d {
                    for s in [-1i64, 1] {
                        let mut w = v.clone();
                        w[axis] += s;
                        let edge = if s > 0 {
                            ZEdge::new(v.clone(), axis)
                        } else {
                            ZEdge::new(w.clone(), axis)
                        };
                        if !closed.contains(&edge) && seen.insert(w.clone()) {
                            queue.push_back(w);
                        }
                    }
                }
                if seen.len() > n_max {
                    finite = false;
                    break;
                }
            }
            if finite {
                count += 1;
                assigned.extend(seen);
            }
        }
    }
    count
}

/// Local integer encoding of plaquettes near an anchor.
struct PlaquetteGrid {
    d: usize,
    side: i64,
    stride: Vec<i64>,
    /// neighbour id offsets per orientation
    nbr: Vec<Vec<i64>>,
}

impl PlaquetteGrid {
    fn new(d: usize, radius: usize) -> Self {
        let side = 2 * radius as i64 + 5;
        let stride: Vec<i64> = (0..d).map(|i| side.pow(i as u32) * d as i64).collect();
        let mut g = PlaquetteGrid {
            d,
            side,
            stride,
            nbr: Vec::new(),
        };
        let origin = vec![0i64; d];
        g.nbr = (0..d)
            .map(|a| {
                let here = g.id(&origin, a) as i64;
                Plaquette(ZEdge::new(origin.clone(), a))
                    .neighbors()
                    .iter()
                    .map(|p| g.id(&p.0.base, p.0.axis) as i64 - here)
                    .collect()
            })
            .collect();
        g
    }

    fn cells(&self) -> usize {
        self.side.pow(self.d as u32) as usize * self.d
    }

    fn id(&self, base: &[i64], axis: usize) -> usize {
        let r = self.side / 2;
        (base.iter().zip(&self.stride).map(|(c, s)| (c + r) * s).sum::<i64>() + axis as i64) as usize
    }

    fn decode(&self, id: usize) -> Plaquette {
        let r = self.side / 2;
        let axis = id % self.d;
        let mut cell = (id / self.d) as i64;
        let base = (0..self.d)
            .map(|_| {
                let c = cell % self.side - r;
                cell /= self.side;
                c
            })
            .collect();
        Plaquette(ZEdge::new(base, axis))
    }
}

/// Per-polymer data gathered during enumeration.
pub struct PolymerView<'a> {
    pub ids: &'a [usize],
    /// |N̄(s)|: plaquettes in s or adjacent to it.
    pub closure: usize,
    /// Squared Euclidean diameter of the plaquette centres, times 4.
    pub diam2x4: i64,
    grid: &'a PlaquetteGrid,
    iso_vertices: usize,
}

impl PolymerView<'_> {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn plaquettes(&self) -> BTreeSet<Plaquette> {
        self.ids.iter().map(|&i| self.grid.decode(i)).collect()
    }

    /// Wired norm; exact counting of isolated vertices while no two-vertex
    /// component is possible, bounded search otherwise.
    pub fn wired_norm(&self) -> usize {
        if self.size() < min_edge_boundary(2, self.grid.d) {
            self.iso_vertices
        } else {
            wired_norm_local(&self.plaquettes())
        }
    }

    pub fn diameter(&self) -> f64 {
        (self.diam2x4 as f64).sqrt() / 2.0
    }
}

struct Enumerator<'a> {
    grid: PlaquetteGrid,
    mark: Vec<bool>,
    closure_count: Vec<u8>,
    closure: usize,
    vdeg: Vec<u8>,
    iso: usize,
    set: Vec<usize>,
    centers2: Vec<Vec<i64>>,
    diam: Vec<i64>,
    max_size: usize,
    visit: &'a mut dyn FnMut(&PolymerView),
}

impl Enumerator<'_> {
    fn center2(&self, id: usize) -> Vec<i64> {
        let p = self.grid.decode(id);
        let mut c: Vec<i64> = p.0.base.iter().map(|x| 2 * x).collect();
        c[p.0.axis] += 1;
        c
    }

    fn vertex_slots(&self, id: usize) -> [usize; 2] {
        let cell = id / self.grid.d;
        let axis = id % self.grid.d;
        [cell, cell + (self.grid.stride[axis] / self.grid.d as i64) as usize]
    }

    fn add(&mut self, id: usize) {
        let c2 = self.center2(id);
        let dmax = self
            .centers2
            .iter()
            .map(|o| o.iter().zip(&c2).map(|(a, b)| (a - b) * (a - b)).sum::<i64>())
            .max()
            .unwrap_or(0);
        let prev = self.diam.last().copied().unwrap_or(0);
        self.diam.push(prev.max(dmax));
        self.centers2.push(c2);
        self.set.push(id);
        for off in std::iter::once(0).chain(self.grid.nbr[id % self.grid.d].iter().copied()) {
            let j = (id as i64 + off) as usize;
            if self.closure_count[j] == 0 {
                self.closure += 1;
            }
            self.closure_count[j] += 1;
        }
        for v in self.vertex_slots(id) {
            self.vdeg[v] += 1;
            if self.vdeg[v] as usize == 2 * self.grid.d {
                self.iso += 1;
            }
        }
    }

    fn remove(&mut self, id: usize) {
        for v in self.vertex_slots(id) {
            if self.vdeg[v] as usize == 2 * self.grid.d {
                self.iso -= 1;
            }
            self.vdeg[v] -= 1;
        }
        for off in std::iter::once(0).chain(self.grid.nbr[id % self.grid.d].iter().copied()) {
            let j = (id as i64 + off) as usize;
            self.closure_count[j] -= 1;
            if self.closure_count[j] == 0 {
                self.closure -= 1;
            }
        }
        self.set.pop();
        self.centers2.pop();
        self.diam.pop();
    }

    fn rec(&mut self, mut untried: Vec<usize>) {
        while let Some(c) = untried.pop() {
            self.add(c);
            let view = PolymerView {
                ids: &self.set,
                closure: self.closure,
                diam2x4: *self.diam.last().unwrap(),
                grid: &self.grid,
                iso_vertices: self.iso,
            };
            (self.visit)(&view);
            if self.set.len() < self.max_size {
                let mut next = untried.clone();
                let mut added = Vec::new();
                for &off in &self.grid.nbr[c % self.grid.d] {
                    let j = (c as i64 + off) as usize;
                    if !self.mark[j] {
                        self.mark[j] = true;
                        next.push(j);
                        added.push(j);
                    }
                }
                self.rec(next);
                for j in added {
                    self.mark[j] = false;
                }
            }
            self.remove(c);
        }
    }
}

/// Visits every connected plaquette set containing `anchor` with at most
/// `max_size` plaquettes, each exactly once. Views are translated so the
/// anchor sits at the origin.
pub fn for_each_plaquette_polymer(
    anchor: &Plaquette,
    max_size: usize,
    visit: &mut dyn FnMut(&PolymerView),
) -> Result<(), PolymerError> {
    if max_size > ENUM_MAX_SIZE {
        return Err(PolymerError::Budget {
            what: "plaquette enumeration size",
            got: max_size,
            cap: ENUM_MAX_SIZE,
        });
    }
    if max_size == 0 {
        return Ok(());
    }
    let d = anchor.0.base.len();
    let grid = PlaquetteGrid::new(d, max_size);
    let n = grid.cells();
    let origin = vec![0i64; d];
    let root = grid.id(&origin, anchor.0.axis);
    let mut e = Enumerator {
        mark: vec![false; n],
        closure_count: vec![0; n],
        closure: 0,
        vdeg: vec![0; n / d],
        iso: 0,
        set: Vec::new(),
        centers2: Vec::new(),
        diam: Vec::new(),
        max_size,
        grid,
        visit,
    };
    e.mark[root] = true;
    e.rec(vec![root]);
    Ok(())
}

/// All connected plaquette sets through `anchor` of size at most `max_size`.
pub fn enumerate_plaquette_polymers(
    anchor: &Plaquette,
    max_size: usize,
) -> Result<Vec<BTreeSet<Plaquette>>, PolymerError> {
    let mut out = Vec::new();
    let base = anchor.0.base.clone();
    for_each_plaquette_polymer(anchor, max_size, &mut |v| {
        out.push(
            v.plaquettes()
                .into_iter()
                .map(|p| {
                    let b = p.0.base.iter().zip(&base).map(|(x, o)| x + o).collect();
                    Plaquette(ZEdge::new(b, p.0.axis))
                })
                .collect(),
        );
    })?;
    Ok(out)
}

/// Polymer counts aggregated by (size, wired norm, 4·diameter²).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolymerCensus {
    pub d: usize,
    pub max_size: usize,
    pub counts_by_size: Vec<u64>,
    /// (size, norm, diam2x4) -> count
    pub classes: BTreeMap<(usize, usize, i64), u64>,
    /// Largest |N̄(s)| / |s| seen for each size.
    pub closure_ratio: Vec<f64>,
}

pub fn polymer_census(d: usize, max_size: usize) -> Result<PolymerCensus, PolymerError> {
    let anchor = Plaquette(ZEdge::new(vec![0; d], 0));
    let mut c = PolymerCensus {
        d,
        max_size,
        counts_by_size: vec![0; max_size + 1],
        classes: BTreeMap::new(),
        closure_ratio: vec![0.0; max_size + 1],
    };
    for_each_plaquette_polymer(&anchor, max_size, &mut |v| {
        let k = v.size();
        c.counts_by_size[k] += 1;
        *c.classes.entry((k, v.wired_norm(), v.diam2x4)).or_insert(0) += 1;
        let r = v.closure as f64 / k as f64;
        if r > c.closure_ratio[k] {
            c.closure_ratio[k] = r;
        }
    })?;
    Ok(c)
}

impl PolymerCensus {
    /// Growth constant estimate from the size counts: the ratios r_k =
    /// a_k / a_{k-1} extrapolated linearly, k r_k - (k-1) r_{k-1}.
    pub fn growth_estimate(&self) -> f64 {
        let a = &self.counts_by_size;
        let k = self.max_size;
        assert!(k >= 3, "need sizes up to at least 3");
        let r = |k: usize| a[k] as f64 / a[k - 1] as f64;
        k as f64 * r(k) - (k - 1) as f64 * r(k - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteKpRow {
    pub c8: f64,
    /// Σ over polymers through a fixed plaquette of e^{(c8/2)(|s|+ℓ)} Ψ_w.
    pub head: f64,
    /// Bound on the same sum over sizes above the truncation, from c3.
    pub tail: f64,
    /// Worst of (c8/2)|s| - |N̄(s)| (head + tail) over sizes.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaquetteKpReport {
    pub q: f64,
    pub p: f64,
    pub c3: f64,
    pub rows: Vec<PlaquetteKpRow>,
    pub best: PlaquetteKpRow,
    pub pass: bool,
}

/// KP check for the translation-invariant plaquette polymers with wired
/// activities, at each tilt constant c8 in `c8_grid`.
///
/// The sum over s' ≁ s is bounded by |N̄(s)| times the sum over polymers
/// through one plaquette; every orientation gives the same sum by symmetry.
pub fn plaquette_kp(census: &PolymerCensus, params: &RCParams, c3: f64, c8_grid: &[f64]) -> PlaquetteKpReport {
    let r = (1.0 - params.p) / params.p;
    let rows: Vec<PlaquetteKpRow> = c8_grid
        .iter()
        .map(|&c8| {
            let head: f64 = census
                .classes
                .iter()
                .map(|(&(k, norm, d2), &n)| {
                    let ell = (d2 as f64).sqrt() / 2.0;
                    n as f64 * ((c8 / 2.0) * (k as f64 + ell)).exp() * r.powi(k as i32) * params.q.powi(norm as i32)
                })
                .sum();
            // each finite component is bounded by at least 2d polymer edges and
            // each edge bounds at most two of them, so ‖s‖_w ≤ |s|/d
            let x = c3 * c8.exp() * r * params.q.powf(1.0 / census.d as f64);
            let tail = if x < 1.0 {
                x.powi(census.max_size as i32 + 1) / (1.0 - x)
            } else {
                f64::INFINITY
            };
            let w = head + tail;
            let worst_ratio = census.closure_ratio[1..].iter().cloned().fold(0.0, f64::max);
            // every size above the truncation has |N̄(s)| ≤ (1 + 6(d-1))|s|
            let ratio = worst_ratio.max(1.0 + 6.0 * (census.d as f64 - 1.0));
            let margin = c8 / 2.0 - ratio * w;
            PlaquetteKpRow {
                c8,
                head,
                tail,
                margin,
                pass: margin > 0.0,
            }
        })
        .collect();
    let best = rows
        .iter()
        .max_by(|a, b| a.margin.total_cmp(&b.margin))
        .cloned()
        .expect("nonempty c8 grid");
    PlaquetteKpReport {
        q: params.q,
        p: params.p,
        c3,
        pass: best.pass,
        best,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(z: &[f64], edges: &[(usize, usize)]) -> PolymerModel {
        let mut inc = vec![Vec::new(); z.len()];
        for &(a, b) in edges {
            inc[a].push(b);
            inc[b].push(a);
        }
        PolymerModel::new(vec![1; z.len()], z.to_vec(), inc).unwrap()
    }

    #[test]
    fn partition_examples() {
        let m = model(&[0.2, 0.3], &[(0, 1)]);
        assert_eq!(partition_direct(&m, &[]).unwrap(), 1.0);
        assert!((partition_direct(&m, &[0]).unwrap() - 1.2).abs() < 1e-15);
        assert!((partition_direct(&m, &[0, 1]).unwrap() - 1.5).abs() < 1e-15);
        let c = model(&[0.2, 0.3], &[]);
        assert!((partition_direct(&c, &[0, 1]).unwrap() - 1.2 * 1.3).abs() < 1e-15);
        let big = model(&[0.1; 21], &[]);
        assert!(partition_direct(&big, &(0..21).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn theta_examples() {
        let (cw, total) = cluster_log_z(&model(&[0.4], &[]), &[0]).unwrap();
        assert_eq!(cw.len(), 1);
        assert!((cw[0].theta - 1.4f64.ln()).abs() < 1e-15);
        assert!((total - 1.4f64.ln()).abs() < 1e-15);
        let th = theta_all(&model(&[0.2, 0.3], &[]), &[0, 1]).unwrap();
        assert!(th[3].abs() < 1e-15);
        let (z1, z2) = (0.2f64, 0.3f64);
        let th = theta_all(&model(&[z1, z2], &[(0, 1)]), &[0, 1]).unwrap();
        let want = (1.0 + z1 + z2).ln() - (1.0 + z1).ln() - (1.0 + z2).ln();
        assert!((th[3] - want).abs() < 1e-15);
    }

    #[test]
    fn model_validation_and_json() {
        assert_eq!(
            PolymerModel::new(vec![1, 1], vec![0.1, 0.1], vec![vec![1], vec![]]).unwrap_err(),
            PolymerError::Asymmetric(0, 1)
        );
        assert!(PolymerModel::new(vec![1], vec![-0.1], vec![vec![]]).is_err());
        let m = model(&[0.1, 0.2, 0.3], &[(0, 2)]);
        assert_eq!(PolymerModel::from_json(&m.to_json()).unwrap(), m);
        assert!(Contour::new(&m, vec![0, 1]).is_ok());
        assert_eq!(
            Contour::new(&m, vec![0, 2]).unwrap_err(),
            PolymerError::NotContour(0, 2)
        );
    }

    #[test]
    fn random_inversion() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..=12);
            let m = random_model(&mut rng, n, 0.3, 0.4).unwrap();
            let r = inversion_check(&m).unwrap();
            assert!(r.rel_err < 1e-12 && r.max_split_theta < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn kp_examples() {
        let zero = model(&[0.0, 0.0], &[(0, 1)]);
        let r = kp_check(&zero, &[1.0, 1.0], None).unwrap();
        assert!(r.pass && r.sums.iter().all(|&s| s == 0.0));
        let r = kp_check(&model(&[0.1], &[]), &[1.0], None).unwrap();
        assert!(r.pass);
        assert!((r.sums[0] - 0.1 * std::f64::consts::E).abs() < 1e-15);
        assert!(!kp_check(&model(&[1.0], &[]), &[1.0], None).unwrap().pass);
    }

    #[test]
    fn p0_examples() {
        let p0 = p0_threshold(2.0, 47.0, 1.0);
        assert!((p0 - 1.0 / (1.0 + std::f64::consts::E / 94.0 / 3.0)).abs() < 1e-15);
        assert!((p0 - 0.99046).abs() < 1e-5);
        assert!(p0_threshold(2.0, 47.0, 1e-9) > 1.0 - 1e-9);
        assert!(p0_threshold(3.0, 47.0, 1.0) > p0);
    }

    #[test]
    fn enumeration_small() {
        let a3 = Plaquette(ZEdge::new(vec![0, 0, 0], 0));
        assert_eq!(enumerate_plaquette_polymers(&a3, 1).unwrap().len(), 1);
        assert_eq!(enumerate_plaquette_polymers(&a3, 2).unwrap().len(), 13);
        let a2 = Plaquette(ZEdge::new(vec![0, 0], 1));
        assert_eq!(enumerate_plaquette_polymers(&a2, 2).unwrap().len(), 7);
        assert!(enumerate_plaquette_polymers(&a3, 9).is_err());
        // each set once, all connected, all contain the anchor
        let all = enumerate_plaquette_polymers(&a3, 4).unwrap();
        let uniq: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(uniq.len(), all.len());
        assert!(all.iter().all(|s| s.contains(&a3)));
        let shifted = Plaquette(ZEdge::new(vec![5, -2, 1], 2));
        let moved = enumerate_plaquette_polymers(&shifted, 3).unwrap();
        assert!(moved.iter().all(|s| s.contains(&shifted)));
    }

    #[test]
    fn activity_examples() {
        let params = RCParams::new(2.0, 0.9).unwrap();
        let one = BTreeSet::from([Plaquette(ZEdge::new(vec![0, 0, 0], 0))]);
        let w = activity_psi(&one, &params, &Norm::Wired { margin: 3 }).unwrap();
        assert!((w - 0.1 / 0.9).abs() < 1e-15);
        let path = LatticeSpec::rect(vec![3]).unwrap();
        let mid = BTreeSet::from([Plaquette(ZEdge::new(vec![1], 0))]);
        let f = activity_psi(&mid, &params, &Norm::Free(path.clone())).unwrap();
        assert!((f - 0.1 / 0.9 * 2.0).abs() < 1e-15);
        let outside = BTreeSet::from([Plaquette(ZEdge::new(vec![2], 0))]);
        assert!(activity_psi(&outside, &params, &Norm::Free(path)).is_err());
    }

    #[test]
    fn star_isolates_vertex() {
        let star: BTreeSet<Plaquette> = (0..3)
            .flat_map(|a| {
                let mut m = vec![0i64; 3];
                m[a] = -1;
                [Plaquette(ZEdge::new(vec![0, 0, 0], a)), Plaquette(ZEdge::new(m, a))]
            })
            .collect();
        assert_eq!(wired_norm_local(&star), 1);
        assert_eq!(polymer_norm(&star, &Norm::Wired { margin: 3 }).unwrap(), 1);
    }

    #[test]
    fn census_and_kp_small() {
        let c = polymer_census(3, 5).unwrap();
        assert_eq!(c.counts_by_size, vec![0, 1, 12, 158, 2148, 29685]);
        assert_eq!(c.closure_ratio[1], 13.0);
        assert!(c.classes.keys().all(|&(_, n, _)| n == 0));
        let grid = [0.25, 0.5, 1.0];
        let hi = plaquette_kp(&c, &RCParams::new(2.0, 0.999).unwrap(), c.growth_estimate(), &grid);
        assert!(hi.pass);
        let lo = plaquette_kp(&c, &RCParams::new(2.0, 0.7).unwrap(), c.growth_estimate(), &grid);
        assert!(!lo.pass);
    }
}
