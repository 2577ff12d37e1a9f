//! Boxes in Z^d, nearest-neighbour edges, dual plaquettes, cones and slabs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("dimension must be at least 1, got {0}")]
    BadDimension(usize),
    #[error("box side must be at least 1")]
    EmptyBox,
    #[error("direction vector is zero")]
    ZeroDirection,
    #[error("cone opening must lie in (0,1), got {0}")]
    BadOpening(f64),
    #[error("slab width must be at least 1")]
    BadWidth,
    #[error("direction has no positive coordinate, no axis u with <t,u> > 0")]
    NoForwardAxis,
    #[error("vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A rectangular box of Z^d.
///
/// Vertices are stored by linear index with axis 0 varying fastest.
/// `origin` is the coordinate of the vertex with index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dims: Vec<usize>,
    pub origin: Vec<i64>,
}

/// Edge between box vertices `a` and `b = a + e_axis`, by linear index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
}

impl LatticeSpec {
    /// The box {0,..,L-1}^d.
    pub fn cube(d: usize, l: usize) -> Result<Self, LatticeError> {
        Self::rect(vec![l; d])
    }

    /// The box of side L with the origin at its centre; for even L the
    /// centre is rounded towards the upper corner.
    pub fn centered(d: usize, l: usize) -> Result<Self, LatticeError> {
        let mut s = Self::cube(d, l)?;
        s.origin = vec![-((l / 2) as i64); d];
        Ok(s)
    }

    pub fn rect(dims: Vec<usize>) -> Result<Self, LatticeError> {
        if dims.is_empty() {
            return Err(LatticeError::BadDimension(0));
        }
        if dims.iter().any(|&l| l == 0) {
            return Err(LatticeError::EmptyBox);
        }
        let d = dims.len();
        Ok(LatticeSpec {
            dims,
            origin: vec![0; d],
        })
    }

    pub fn with_origin(mut self, origin: Vec<i64>) -> Self {
        assert_eq!(origin.len(), self.dims.len());
        self.origin = origin;
        self
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.dims[..axis].iter().product()
    }

    pub fn index(&self, x: &[i64]) -> Option<usize> {
        if x.len() != self.d() {
            return None;
        }
        let mut idx = 0usize;
        let mut stride = 1usize;
        for i in 0..self.d() {
            let c = x[i] - self.origin[i];
            if c < 0 || c >= self.dims[i] as i64 {
                return None;
            }
            idx += c as usize * stride;
            stride *= self.dims[i];
        }
        Some(idx)
    }

    pub fn coords(&self, mut idx: usize) -> Vec<i64> {
        let mut x = Vec::with_capacity(self.d());
        for i in 0..self.d() {
            x.push((idx % self.dims[i]) as i64 + self.origin[i]);
            idx /= self.dims[i];
        }
        x
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        self.index(x).is_some()
    }

    /// True when the vertex has a lattice neighbour outside the box.
    pub fn is_boundary(&self, idx: usize) -> bool {
        let mut r = idx;
        for i in 0..self.d() {
            let c = r % self.dims[i];
            r /= self.dims[i];
            if c == 0 || c + 1 == self.dims[i] {
                return true;
            }
        }
        false
    }

    /// Neighbour of `idx` along `axis` in direction `sign` (+1 or -1), if inside.
    pub fn step(&self, idx: usize, axis: usize, sign: i32) -> Option<usize> {
        let stride = self.stride(axis);
        let c = (idx / stride) % self.dims[axis];
        if sign > 0 {
            (c + 1 < self.dims[axis]).then(|| idx + stride)
        } else {
            (c > 0).then(|| idx - stride)
        }
    }

    /// Every nearest-neighbour pair of the box exactly once, ordered by the
    /// lower endpoint's index and then by axis.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for a in 0..self.n_vertices() {
            for axis in 0..self.d() {
                if let Some(b) = self.step(a, axis, 1) {
                    out.push(Edge { a, b, axis });
                }
            }
        }
        out
    }

    /// Table mapping `a * d + axis` to the position of that edge in [`edges`](Self::edges).
    pub fn edge_table(&self) -> Vec<Option<usize>> {
        let d = self.d();
        let mut t = vec![None; self.n_vertices() * d];
        for (k, e) in self.edges().iter().enumerate() {
            t[e.a * d + e.axis] = Some(k);
        }
        t
    }
}

/// Convenience wrapper for [`LatticeSpec::edges`].
pub fn edges_of_box(spec: &LatticeSpec) -> Vec<Edge> {
    spec.edges()
}

/// A lattice edge of Z^d given by its lower endpoint and axis.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ZEdge {
    pub base: Vec<i64>,
    pub axis: usize,
}

impl ZEdge {
    pub fn new(base: Vec<i64>, axis: usize) -> Self {
        assert!(axis < base.len());
        ZEdge { base, axis }
    }

    pub fn tip(&self) -> Vec<i64> {
        let mut x = self.base.clone();
        x[self.axis] += 1;
        x
    }

    pub fn midpoint(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.base.iter().map(|&c| c as f64).collect();
        m[self.axis] += 0.5;
        m
    }
}

/// The (d-1)-cell dual to a lattice edge. The cell is centred at the edge
/// midpoint and orthogonal to the edge.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Plaquette(pub ZEdge);

impl Plaquette {
    pub fn dual_of(e: &ZEdge) -> Self {
        Plaquette(e.clone())
    }

    pub fn dual(&self) -> ZEdge {
        self.0.clone()
    }

    pub fn center(&self) -> Vec<f64> {
        self.0.midpoint()
    }

    /// Plaquettes sharing a codimension-2 face with this one, 6(d-1) in total.
    pub fn neighbors(&self) -> Vec<Plaquette> {
        let e = &self.0;
        let d = e.base.len();
        let a = e.axis;
        let mut out = Vec::with_capacity(6 * (d - 1));
        for b in 0..d {
            if b == a {
                continue;
            }
            for sign in [-1i64, 1] {
                let mut same = e.base.clone();
                same[b] += sign;
                out.push(Plaquette(ZEdge::new(same, a)));
                for shift in 0..2 {
                    let mut base = e.base.clone();
                    base[a] += shift;
                    if sign < 0 {
                        base[b] -= 1;
                    }
                    out.push(Plaquette(ZEdge::new(base, b)));
                }
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn to_f64(x: &[i64]) -> Vec<f64> {
    x.iter().map(|&c| c as f64).collect()
}

pub fn unit(t: &[f64]) -> Result<Vec<f64>, LatticeError> {
    let n = norm(t);
    if !(n > 0.0) || !n.is_finite() {
        return Err(LatticeError::ZeroDirection);
    }
    Ok(t.iter().map(|c| c / n).collect())
}

/// The first coordinate axis u with <t,u> maximal. Ties go to the lowest index.
pub fn forward_axis(t: &[f64]) -> Result<usize, LatticeError> {
    let mut best = 0;
    for i in 1..t.len() {
        if t[i] > t[best] {
            best = i;
        }
    }
    if t.is_empty() || !(t[best] > 0.0) {
        return Err(LatticeError::NoForwardAxis);
    }
    Ok(best)
}

/// The cone {x : <t̂,x> >= (1-ε)|x|}.
#[derive(Clone, Debug, PartialEq)]
pub struct Cone {
    t_hat: Vec<f64>,
    eps: f64,
}

/// Slack used when comparing projections that should be equal in exact arithmetic.
pub const GEOM_TOL: f64 = 1e-9;

impl Cone {
    pub fn new(t: &[f64], eps: f64) -> Result<Self, LatticeError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(LatticeError::BadOpening(eps));
        }
        Ok(Cone { t_hat: unit(t)?, eps })
    }

    pub fn t_hat(&self) -> &[f64] {
        &self.t_hat
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dot(&self.t_hat, x) >= (1.0 - self.eps) * norm(x) - GEOM_TOL
    }
}

pub fn in_cone(x: &[i64], cone: &Cone) -> bool {
    cone.contains(&to_f64(x))
}

/// The closed strip a <= <t̂,x> <= b.
#[derive(Clone, Debug, PartialEq)]
pub struct Slab {
    pub t_hat: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl Slab {
    pub fn new(t: &[f64], a: f64, b: f64) -> Result<Self, LatticeError> {
        assert!(a <= b, "slab offsets out of order");
        Ok(Slab { t_hat: unit(t)?, a, b })
    }

    /// The strip between the hyperplanes through x and y.
    pub fn between(t: &[f64], x: &[f64], y: &[f64]) -> Result<Self, LatticeError> {
        let t_hat = unit(t)?;
        let (a, b) = (dot(&t_hat, x), dot(&t_hat, y));
        Ok(Slab {
            t_hat,
            a: a.min(b),
            b: a.max(b),
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let s = dot(&self.t_hat, x);
        s >= self.a - GEOM_TOL && s <= self.b + GEOM_TOL
    }
}

/// Index i of the half-open slab iN <= <t̂,x> < (i+1)N containing x,
/// or `None` behind the origin hyperplane.
pub fn slab_index(x: &[f64], t: &[f64], n: usize) -> Result<Option<usize>, LatticeError> {
    if n == 0 {
        return Err(LatticeError::BadWidth);
    }
    if x.len() != t.len() {
        return Err(LatticeError::DimensionMismatch {
            expected: t.len(),
            got: x.len(),
        });
    }
    let s = dot(&unit(t)?, x) + GEOM_TOL;
    if s < 0.0 {
        return Ok(None);
    }
    Ok(Some((s / n as f64).floor() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_counts() {
        assert_eq!(LatticeSpec::cube(1, 2).unwrap().edges().len(), 1);
        assert_eq!(LatticeSpec::cube(2, 2).unwrap().edges().len(), 4);
        assert_eq!(LatticeSpec::cube(3, 2).unwrap().edges().len(), 12);
        assert_eq!(LatticeSpec::rect(vec![2, 3]).unwrap().edges().len(), 7);
        // d L^{d-1} (L-1)
        assert_eq!(LatticeSpec::cube(3, 4).unwrap().edges().len(), 3 * 16 * 3);
    }

    #[test]
    fn index_roundtrip() {
        let s = LatticeSpec::centered(3, 5).unwrap();
        for i in 0..s.n_vertices() {
            assert_eq!(s.index(&s.coords(i)), Some(i));
        }
        assert_eq!(s.coords(s.index(&[0, 0, 0]).unwrap()), vec![0, 0, 0]);
        assert!(!s.contains(&[3, 0, 0]));
        assert!(s.is_boundary(s.index(&[2, 0, 0]).unwrap()));
        assert!(!s.is_boundary(s.index(&[1, 1, -1]).unwrap()));
    }

    #[test]
    fn cone_examples() {
        let c = Cone::new(&[1.0, 0.0, 0.0], 0.3).unwrap();
        assert!(in_cone(&[1, 1, 0], &c));
        assert!(in_cone(&[0, 0, 0], &c));
        let c5 = Cone::new(&[1.0, 0.0, 0.0], 0.5).unwrap();
        assert!(!in_cone(&[0, 1, 0], &c5));
        assert!(in_cone(&[3, 0, 0], &c5));
        assert_eq!(Cone::new(&[0.0, 0.0], 0.5), Err(LatticeError::ZeroDirection));
    }

    #[test]
    fn slab_examples() {
        let t = [1.0, 0.0];
        assert_eq!(slab_index(&[15.0, 3.0], &t, 10).unwrap(), Some(1));
        assert_eq!(slab_index(&[0.0, 0.0], &t, 10).unwrap(), Some(0));
        assert_eq!(slab_index(&[-1.0, 0.0], &t, 10).unwrap(), None);
        assert!(slab_index(&[1.0, 0.0], &[0.0, 0.0], 10).is_err());
    }

    #[test]
    fn plaquette_neighbour_counts() {
        let p3 = Plaquette(ZEdge::new(vec![0, 0, 0], 0));
        let n3 = p3.neighbors();
        assert_eq!(n3.len(), 12);
        let mut u = n3.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 12);
        assert!(!n3.contains(&p3));
        let p2 = Plaquette(ZEdge::new(vec![0, 0], 1));
        assert_eq!(p2.neighbors().len(), 6);
        // adjacency is symmetric
        for q in &n3 {
            assert!(q.neighbors().contains(&p3));
        }
    }

    #[test]
    fn forward_axis_ties_go_low() {
        assert_eq!(forward_axis(&[1.0, 1.0, 0.5]).unwrap(), 0);
        assert_eq!(forward_axis(&[0.2, 1.0, 1.0]).unwrap(), 1);
        assert!(forward_axis(&[-1.0, -2.0]).is_err());
    }
}
