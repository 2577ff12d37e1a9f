//! Finite-volume random-cluster measures computed by exhaustive enumeration.

use crate::lattice::LatticeSpec;
use crate::union_find::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest edge count accepted by the enumerator (2^24 configurations).
pub const ENUM_CAP: usize = 24;

#[derive(Debug, Error, PartialEq)]
pub enum RcError {
    #[error("q must be >= 1, got {0}")]
    BadQ(f64),
    #[error("p must lie in (0,1), got {0}")]
    BadP(f64),
    #[error("{0} edges exceed the enumeration cap of {ENUM_CAP}")]
    TooManyEdges(usize),
    #[error("configuration has {got} bits, box has {expected} edges")]
    ConfigLength { expected: usize, got: usize },
    #[error("pinned edge {0:?} is not in the outer shell of the box")]
    NotShellEdge(ShellEdge),
    #[error("event is not increasing: contains config {lower:#b} but not {upper:#b}")]
    NotIncreasing { lower: u64, upper: u64 },
    #[error("event table has {got} entries, expected {expected}")]
    EventSize { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RCParams {
    pub q: f64,
    pub p: f64,
}

impl RCParams {
    pub fn new(q: f64, p: f64) -> Result<Self, RcError> {
        if !(q >= 1.0) || !q.is_finite() {
            return Err(RcError::BadQ(q));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(RcError::BadP(p));
        }
        Ok(RCParams { q, p })
    }

    /// Bond density of the Bernoulli measure dominated by every RC measure.
    pub fn p_lower(&self) -> f64 {
        self.p / (self.p + self.q * (1.0 - self.p))
    }
}

/// An edge leaving the box: from inside vertex `inner` along `axis`, outward `sign`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShellEdge {
    pub inner: Vec<i64>,
    pub axis: usize,
    pub sign: i8,
}

/// States of the one-edge outer shell. Unlisted shell edges are closed.
/// All open shell edges lead to one common outside vertex.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pinning {
    pub open: Vec<ShellEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    Free,
    Wired,
    Pinned(Pinning),
}

impl BoundaryCondition {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryCondition::Free => "free",
            BoundaryCondition::Wired => "wired",
            BoundaryCondition::Pinned(_) => "pinned",
        }
    }
}

/// All edges of the one-edge shell around `spec`.
pub fn shell_edges(spec: &LatticeSpec) -> Vec<ShellEdge> {
    let mut out = Vec::new();
    for v in 0..spec.n_vertices() {
        for axis in 0..spec.d() {
            for sign in [-1i8, 1] {
                if spec.step(v, axis, sign as i32).is_none() {
                    out.push(ShellEdge {
                        inner: spec.coords(v),
                        axis,
                        sign,
                    });
                }
            }
        }
    }
    out
}

/// One bit per edge of the box, in [`LatticeSpec::edges`] order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondConfig {
    pub open: Vec<bool>,
}

impl BondConfig {
    pub fn closed(m: usize) -> Self {
        BondConfig { open: vec![false; m] }
    }

    pub fn all_open(m: usize) -> Self {
        BondConfig { open: vec![true; m] }
    }

    pub fn from_mask(mask: u64, m: usize) -> Self {
        BondConfig {
            open: (0..m).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    pub fn mask(&self) -> u64 {
        assert!(self.open.len() <= 64);
        self.open
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (b as u64) << i)
    }

    pub fn n_open(&self) -> usize {
        self.open.iter().filter(|&&b| b).count()
    }
}

/// Finite graph with random edges plus fixed identifications, the common
/// form of a box under any boundary condition.
///
/// Vertices `0..counted` are box vertices; indices above are auxiliary
/// (the outside vertex of a pinned shell). Components made only of
/// auxiliary vertices are not counted by κ.
#[derive(Clone, Debug)]
pub struct RcGraph {
    pub n: usize,
    pub counted: usize,
    pub edges: Vec<(u32, u32)>,
    pub fixed: Vec<(u32, u32)>,
}

impl RcGraph {
    pub fn from_box(spec: &LatticeSpec, bc: &BoundaryCondition) -> Result<Self, RcError> {
        let nv = spec.n_vertices();
        let edges = spec.edges().iter().map(|e| (e.a as u32, e.b as u32)).collect();
        let mut g = RcGraph {
            n: nv,
            counted: nv,
            edges,
            fixed: Vec::new(),
        };
        match bc {
            BoundaryCondition::Free => {}
            BoundaryCondition::Wired => {
                let bnd: Vec<usize> = (0..nv).filter(|&v| spec.is_boundary(v)).collect();
                for w in bnd.windows(2) {
                    g.fixed.push((w[0] as u32, w[1] as u32));
                }
            }
            BoundaryCondition::Pinned(pin) => {
                let outside = nv as u32;
                g.n += 1;
                for s in &pin.open {
                    let v = spec.index(&s.inner).ok_or_else(|| RcError::NotShellEdge(s.clone()))?;
                    if !(s.sign == 1 || s.sign == -1)
                        || s.axis >= spec.d()
                        || spec.step(v, s.axis, s.sign as i32).is_some()
                    {
                        return Err(RcError::NotShellEdge(s.clone()));
                    }
                    g.fixed.push((v as u32, outside));
                }
            }
        }
        Ok(g)
    }

    /// A free graph on `n` vertices with the given edge list.
    pub fn plain(n: usize, edges: Vec<(u32, u32)>) -> Self {
        RcGraph {
            n,
            counted: n,
            edges,
            fixed: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    /// Union-find after fixed identifications and the open edges of `open`.
    pub fn components_with(&self, open: impl Fn(usize) -> bool, uf: &mut UnionFind) {
        uf.reset();
        for &(a, b) in &self.fixed {
            uf.union(a as usize, b as usize);
        }
        for (i, &(a, b)) in self.edges.iter().enumerate() {
            if open(i) {
                uf.union(a as usize, b as usize);
            }
        }
    }

    /// κ read off a union-find already built by [`components_with`](Self::components_with).
    pub fn kappa_of(&self, uf: &mut UnionFind) -> usize {
        let mut k = uf.components();
        // auxiliary vertices are never joined to each other by edges
        for v in self.counted..self.n {
            if uf.component_size(v) == 1 {
                k -= 1;
            }
        }
        k
    }

    pub fn kappa_mask(&self, mask: u64, uf: &mut UnionFind) -> usize {
        self.components_with(|i| mask >> i & 1 == 1, uf);
        self.kappa_of(uf)
    }
}

fn check_len(config: &BondConfig, spec: &LatticeSpec) -> Result<(), RcError> {
    let m = spec.edges().len();
    if config.open.len() != m {
        return Err(RcError::ConfigLength {
            expected: m,
            got: config.open.len(),
        });
    }
    Ok(())
}

/// Number of open components meeting the box, with boundary identifications applied.
pub fn kappa(config: &BondConfig, spec: &LatticeSpec, bc: &BoundaryCondition) -> Result<usize, RcError> {
    check_len(config, spec)?;
    let g = RcGraph::from_box(spec, bc)?;
    let mut uf = UnionFind::new(g.n);
    g.components_with(|i| config.open[i], &mut uf);
    Ok(g.kappa_of(&mut uf))
}

/// Unnormalised weight p^{open} (1-p)^{closed} q^κ.
pub fn weight(
    config: &BondConfig,
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
) -> Result<f64, RcError> {
    let k = kappa(config, spec, bc)?;
    let o = config.n_open() as i32;
    let c = config.open.len() as i32 - o;
    Ok(params.p.powi(o) * (1.0 - params.p).powi(c) * params.q.powi(k as i32))
}

/// Normalised probabilities of every configuration, indexed by bit mask.
pub fn config_distribution(g: &RcGraph, params: &RCParams) -> Result<Vec<f64>, RcError> {
    let m = g.m();
    if m > ENUM_CAP {
        return Err(RcError::TooManyEdges(m));
    }
    let mut w = Vec::with_capacity(1 << m);
    let mut z = 0.0;
    enumerate(g, params, |_, wt, _| {
        w.push(wt);
        z += wt;
    })?;
    w.iter_mut().for_each(|x| *x /= z);
    Ok(w)
}

/// Calls `visit(mask, weight, components)` for every configuration in mask order.
/// Returns the partition function.
pub fn enumerate(
    g: &RcGraph,
    params: &RCParams,
    mut visit: impl FnMut(u64, f64, &mut UnionFind),
) -> Result<f64, RcError> {
    let m = g.m();
    if m > ENUM_CAP {
        return Err(RcError::TooManyEdges(m));
    }
    let qpow: Vec<f64> = (0..=g.n + 1).map(|k| params.q.powi(k as i32)).collect();
    let bpow: Vec<f64> = (0..=m)
        .map(|k| params.p.powi(k as i32) * (1.0 - params.p).powi((m - k) as i32))
        .collect();
    let mut uf = UnionFind::new(g.n);
    let mut z = 0.0;
    for mask in 0..(1u64 << m) {
        let k = g.kappa_mask(mask, &mut uf);
        let w = bpow[mask.count_ones() as usize] * qpow[k];
        z += w;
        visit(mask, w, &mut uf);
    }
    Ok(z)
}

/// Exact probability of `event` under the RC measure on `spec` with `bc`.
pub fn exact_probability(
    event: impl Fn(&BondConfig) -> bool,
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
) -> Result<f64, RcError> {
    let g = RcGraph::from_box(spec, bc)?;
    let m = g.m();
    let mut hit = 0.0;
    let z = enumerate(&g, params, |mask, w, _| {
        if event(&BondConfig::from_mask(mask, m)) {
            hit += w;
        }
    })?;
    Ok(hit / z)
}

/// An event on an enumerable box as a truth table over configuration masks.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTable {
    pub m: usize,
    pub hits: Vec<bool>,
}

impl EventTable {
    pub fn from_fn(m: usize, f: impl Fn(u64) -> bool) -> Self {
        EventTable {
            m,
            hits: (0..1u64 << m).map(f).collect(),
        }
    }

    /// The smallest increasing event containing all `generators`.
    pub fn up_closure(m: usize, generators: &[u64]) -> Self {
        EventTable::from_fn(m, |w| generators.iter().any(|&g| w & g == g))
    }

    /// Up-closure of one to three random nonempty generators, each edge
    /// included with probability 1/2.
    pub fn random_increasing(m: usize, rng: &mut impl Rng) -> Self {
        let k = rng.gen_range(1..=3);
        let full = if m == 64 { u64::MAX } else { (1u64 << m) - 1 };
        let gens: Vec<u64> = (0..k)
            .map(|_| loop {
                let g = rng.gen::<u64>() & full;
                if g != 0 {
                    break g;
                }
            })
            .collect();
        EventTable::up_closure(m, &gens)
    }

    pub fn and(&self, other: &EventTable) -> EventTable {
        assert_eq!(self.m, other.m);
        EventTable {
            m: self.m,
            hits: self.hits.iter().zip(&other.hits).map(|(a, b)| *a && *b).collect(),
        }
    }

    /// Exhaustive monotonicity check; the error carries a witness pair.
    pub fn check_increasing(&self) -> Result<(), RcError> {
        for w in 0..1u64 << self.m {
            if !self.hits[w as usize] {
                continue;
            }
            for e in 0..self.m {
                let up = w | 1 << e;
                if !self.hits[up as usize] {
                    return Err(RcError::NotIncreasing { lower: w, upper: up });
                }
            }
        }
        Ok(())
    }

    pub fn probability(&self, dist: &[f64]) -> f64 {
        self.hits.iter().zip(dist).filter(|(h, _)| **h).map(|(_, p)| p).sum()
    }
}

/// Product-measure probabilities of each mask with bond density `p`.
pub fn bernoulli_distribution(m: usize, p: f64) -> Vec<f64> {
    (0..1u64 << m)
        .map(|w| {
            let k = w.count_ones() as i32;
            p.powi(k) * (1.0 - p).powi(m as i32 - k)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderReport {
    pub lower: f64,
    /// (boundary condition name, probability), free first and wired last.
    pub chain: Vec<(String, f64)>,
    pub upper: f64,
    pub holds: bool,
    /// Largest amount by which any link of the chain is violated (0 if none).
    pub worst_violation: f64,
}

/// Probabilities of an increasing event along
/// P_{p(q)} <= P^f <= P^π ... <= P^w <= P_p, where pinned conditions from
/// `bc_list` are placed between free and wired.
pub fn check_order_inequalities(
    spec: &LatticeSpec,
    params: &RCParams,
    bc_list: &[BoundaryCondition],
    event: &EventTable,
    tol: f64,
) -> Result<OrderReport, RcError> {
    let m = spec.edges().len();
    if m > ENUM_CAP {
        return Err(RcError::TooManyEdges(m));
    }
    if event.m != m || event.hits.len() != 1 << m {
        return Err(RcError::EventSize {
            expected: 1 << m,
            got: event.hits.len(),
        });
    }
    event.check_increasing()?;
    let lower = event.probability(&bernoulli_distribution(m, params.p_lower()));
    let upper = event.probability(&bernoulli_distribution(m, params.p));
    let mut ordered = vec![BoundaryCondition::Free];
    ordered.extend(
        bc_list
            .iter()
            .filter(|b| matches!(b, BoundaryCondition::Pinned(_)))
            .cloned(),
    );
    ordered.push(BoundaryCondition::Wired);
    let mut chain = Vec::new();
    for bc in &ordered {
        let g = RcGraph::from_box(spec, bc)?;
        chain.push((
            bc.name().to_string(),
            event.probability(&config_distribution(&g, params)?),
        ));
    }
    let free = chain[0].1;
    let wired = chain[chain.len() - 1].1;
    let mut worst: f64 = 0.0;
    worst = worst.max(lower - free).max(wired - upper);
    for (_, v) in &chain {
        worst = worst.max(free - v).max(v - wired);
    }
    Ok(OrderReport {
        lower,
        chain,
        upper,
        holds: worst <= tol,
        worst_violation: worst.max(0.0),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FkgRow {
    pub p_f: f64,
    pub p_g: f64,
    pub p_fg: f64,
    pub holds: bool,
}

/// P(fg) >= P(f) P(g) for each pair of increasing events.
pub fn check_fkg(
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
    pairs: &[(EventTable, EventTable)],
    tol: f64,
) -> Result<Vec<FkgRow>, RcError> {
    let g = RcGraph::from_box(spec, bc)?;
    let dist = config_distribution(&g, params)?;
    pairs
        .iter()
        .map(|(f, h)| {
            f.check_increasing()?;
            h.check_increasing()?;
            let p_f = f.probability(&dist);
            let p_g = h.probability(&dist);
            let p_fg = f.and(h).probability(&dist);
            Ok(FkgRow {
                p_f,
                p_g,
                p_fg,
                holds: p_fg >= p_f * p_g - tol,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_edge() -> LatticeSpec {
        LatticeSpec::rect(vec![2, 1]).unwrap()
    }

    #[test]
    fn kappa_examples() {
        let s = LatticeSpec::cube(2, 3).unwrap();
        let m = s.edges().len();
        assert_eq!(kappa(&BondConfig::closed(m), &s, &BoundaryCondition::Free).unwrap(), 9);
        assert_eq!(
            kappa(&BondConfig::all_open(m), &s, &BoundaryCondition::Free).unwrap(),
            1
        );
        // centre plus the identified boundary
        assert_eq!(kappa(&BondConfig::closed(m), &s, &BoundaryCondition::Wired).unwrap(), 2);
        let s2 = LatticeSpec::cube(2, 2).unwrap();
        assert_eq!(
            kappa(&BondConfig::closed(4), &s2, &BoundaryCondition::Wired).unwrap(),
            1
        );
    }

    #[test]
    fn single_edge_weights() {
        let s = single_edge();
        let pr = RCParams::new(2.0, 0.9).unwrap();
        let f = BoundaryCondition::Free;
        let wo = weight(&BondConfig::all_open(1), &s, &pr, &f).unwrap();
        let wc = weight(&BondConfig::closed(1), &s, &pr, &f).unwrap();
        assert!((wo - 0.9 * 2.0).abs() < 1e-15);
        assert!((wc - 0.1 * 4.0).abs() < 1e-15);
        let p = exact_probability(|c| c.open[0], &s, &pr, &f).unwrap();
        assert!((p - 9.0 / 11.0).abs() < 1e-12);
        let pw = exact_probability(|c| c.open[0], &s, &pr, &BoundaryCondition::Wired).unwrap();
        assert!((pw - 0.9).abs() < 1e-12);
        let none = exact_probability(|c| c.open[0] && !c.open[0], &s, &pr, &f).unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn q_one_is_bernoulli() {
        let s = LatticeSpec::cube(2, 3).unwrap();
        let pr = RCParams::new(1.0, 0.37).unwrap();
        for bc in [BoundaryCondition::Free, BoundaryCondition::Wired] {
            let p = exact_probability(|c| c.open[0] && c.open[3], &s, &pr, &bc).unwrap();
            assert!((p - 0.37 * 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sums_to_one() {
        let s = LatticeSpec::rect(vec![2, 3]).unwrap();
        let pr = RCParams::new(2.5, 0.4).unwrap();
        let g = RcGraph::from_box(&s, &BoundaryCondition::Free).unwrap();
        let d = config_distribution(&g, &pr).unwrap();
        let by_count: f64 = (0..=7)
            .map(|k| {
                d.iter()
                    .enumerate()
                    .filter(|(w, _)| (*w as u64).count_ones() == k)
                    .map(|(_, p)| p)
                    .sum::<f64>()
            })
            .sum();
        assert!((by_count - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(RCParams::new(0.5, 0.5).is_err());
        assert!(RCParams::new(2.0, 1.0).is_err());
        let big = LatticeSpec::cube(2, 5).unwrap();
        assert_eq!(
            exact_probability(
                |_| true,
                &big,
                &RCParams::new(2.0, 0.5).unwrap(),
                &BoundaryCondition::Free
            ),
            Err(RcError::TooManyEdges(40))
        );
        let s = single_edge();
        let pin = Pinning {
            open: vec![ShellEdge {
                inner: vec![0, 0],
                axis: 0,
                sign: 1,
            }],
        };
        assert!(RcGraph::from_box(&s, &BoundaryCondition::Pinned(pin)).is_err());
    }

    #[test]
    fn order_chain_examples() {
        let s = single_edge();
        let pr = RCParams::new(2.0, 0.6).unwrap();
        let ev = EventTable::from_fn(1, |w| w == 1);
        let r = check_order_inequalities(&s, &pr, &[], &ev, 1e-12).unwrap();
        assert!(r.holds);
        assert!((r.chain[0].1 - r.lower).abs() < 1e-12);

        let sq = LatticeSpec::cube(2, 2).unwrap();
        let all = EventTable::from_fn(4, |w| w == 0b1111);
        let r = check_order_inequalities(&sq, &pr, &[], &all, 1e-12).unwrap();
        assert!(r.holds, "{r:?}");

        let dec = EventTable::from_fn(4, |w| w == 0);
        assert!(matches!(
            check_order_inequalities(&sq, &pr, &[], &dec, 1e-12),
            Err(RcError::NotIncreasing { .. })
        ));
    }

    #[test]
    fn pinned_sits_between_free_and_wired() {
        let s = LatticeSpec::rect(vec![2, 3]).unwrap();
        let pr = RCParams::new(3.0, 0.55).unwrap();
        let shell = shell_edges(&s);
        let pin = Pinning {
            open: shell.iter().step_by(3).cloned().collect(),
        };
        let ev = EventTable::up_closure(7, &[0b0000011, 0b1010000]);
        let r = check_order_inequalities(&s, &pr, &[BoundaryCondition::Pinned(pin)], &ev, 1e-12).unwrap();
        assert_eq!(r.chain.len(), 3);
        assert!(r.holds, "{r:?}");
    }

    #[test]
    fn fkg_trivial_pair() {
        let s = LatticeSpec::rect(vec![3, 1]).unwrap();
        let pr = RCParams::new(2.0, 0.5).unwrap();
        let f = EventTable::from_fn(2, |w| w == 0b11);
        let rows = check_fkg(&s, &pr, &BoundaryCondition::Free, &[(f.clone(), f)], 1e-12).unwrap();
        assert!(rows[0].holds);
        assert!((rows[0].p_fg - rows[0].p_f).abs() < 1e-15);
    }
}
