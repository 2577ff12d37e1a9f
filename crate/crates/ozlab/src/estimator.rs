//! Monte-Carlo finite two-point connections, τ fits, the equi-decay surface
//! with its polar body, and convexity and curvature checks.

use crate::lattice::{dot, norm, LatticeError, LatticeSpec};
use crate::rc_measure::{enumerate, BoundaryCondition, RCParams, RcError, RcGraph};
use crate::sampler::{batch_means, Algorithm, ChainState, SamplerError, BURN_IN};
use crate::union_find::UnionFind;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MARGIN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Rc(#[from] RcError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("point {0:?} is not inside the box")]
    OutsideBox(Vec<i64>),
    #[error("need at least {need} usable radii, got {got}")]
    TooFewRadii { need: usize, got: usize },
    #[error("need at least {need} directions, got {got}")]
    TooFewDirections { need: usize, got: usize },
    #[error("nonpositive tau {1} at direction {0}")]
    NonPositiveTau(usize, f64),
    #[error("directions do not surround the origin")]
    DegenerateGrid,
    #[error("curvature fit is singular at direction {0}")]
    SingularFit(usize),
    #[error("dimension {0} not supported")]
    Dimension(usize),
}

/// One row of a connectivity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityRow {
    pub x: Vec<i64>,
    pub samples: usize,
    pub hits: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub box_side: usize,
    pub cutoff: String,
}

/// Box centred at 0 with side 2(‖x‖_∞ + margin) + 1.
pub fn cutoff_box(d: usize, x_inf: i64, margin: usize) -> Result<LatticeSpec, EstimatorError> {
    Ok(LatticeSpec::centered(d, 2 * (x_inf as usize + margin) + 1)?)
}

/// Component roots touching the box boundary.
fn boundary_roots(uf: &mut UnionFind, boundary: &[usize], out: &mut Vec<bool>) {
    out.iter_mut().for_each(|b| *b = false);
    for &v in boundary {
        let r = uf.find(v);
        out[r] = true;
    }
}

/// Frequencies of {0 ↔ x, the cluster avoids the box boundary} for every x
/// in `xs`, measured on one chain in a box sized for the farthest point.
#[allow(clippy::too_many_arguments)]
pub fn finite_two_point_multi(
    xs: &[Vec<i64>],
    d: usize,
    params: &RCParams,
    bc: &BoundaryCondition,
    n_samples: usize,
    seed: u64,
    stream: u64,
    margin: usize,
) -> Result<Vec<ConnectivityRow>, EstimatorError> {
    if n_samples == 0 {
        return Err(SamplerError::NoSamples.into());
    }
    let reach = xs.iter().flat_map(|x| x.iter().map(|c| c.abs())).max().unwrap_or(0);
    let spec = cutoff_box(d, reach, margin)?;
    let origin = spec.index(&vec![0; d]).expect("centred box contains 0");
    let targets: Vec<usize> = xs
        .iter()
        .map(|x| spec.index(x).ok_or_else(|| EstimatorError::OutsideBox(x.clone())))
        .collect::<Result<_, _>>()?;
    let boundary: Vec<usize> = (0..spec.n_vertices()).filter(|&v| spec.is_boundary(v)).collect();
    let g = RcGraph::from_box(&spec, bc)?;
    let mut chain = ChainState::new(g, *params, seed).with_stream(seed, stream);
    if chain.algorithm != Algorithm::Bernoulli {
        chain.run(BURN_IN);
    }
    let mut touched = vec![false; chain.graph.n];
    let mut series = vec![Vec::with_capacity(n_samples); xs.len()];
    for _ in 0..n_samples {
        chain.sweep();
        let uf = chain.components();
        boundary_roots(uf, &boundary, &mut touched);
        let r0 = uf.find(origin);
        for (k, &t) in targets.iter().enumerate() {
            let hit = !touched[r0] && uf.find(t) == r0;
            series[k].push(hit as u8 as f64);
        }
    }
    Ok(xs
        .iter()
        .zip(series)
        .map(|(x, s)| {
            let e = batch_means(&s);
            ConnectivityRow {
                x: x.clone(),
                samples: n_samples,
                hits: s.iter().filter(|&&h| h > 0.0).count(),
                estimate: e.estimate,
                stderr: e.stderr,
                box_side: spec.dims[0],
                cutoff: format!("cluster avoids boundary of centred box, margin {margin}"),
            }
        })
        .collect())
}

pub fn finite_two_point_mc(
    x: &[i64],
    d: usize,
    params: &RCParams,
    bc: &BoundaryCondition,
    n_samples: usize,
    seed: u64,
    margin: usize,
) -> Result<ConnectivityRow, EstimatorError> {
    Ok(finite_two_point_multi(&[x.to_vec()], d, params, bc, n_samples, seed, 0, margin)?.remove(0))
}

/// Exact probability that a and b are joined by a cluster avoiding the boundary of `spec`.
pub fn finite_two_point_exact(
    a: &[i64],
    b: &[i64],
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
) -> Result<f64, EstimatorError> {
    let ia = spec.index(a).ok_or_else(|| EstimatorError::OutsideBox(a.to_vec()))?;
    let ib = spec.index(b).ok_or_else(|| EstimatorError::OutsideBox(b.to_vec()))?;
    let boundary: Vec<usize> = (0..spec.n_vertices()).filter(|&v| spec.is_boundary(v)).collect();
    let g = RcGraph::from_box(spec, bc)?;
    let mut touched = vec![false; g.n];
    let mut hit = 0.0;
    let z = enumerate(&g, params, |_, w, uf| {
        boundary_roots(uf, &boundary, &mut touched);
        let r = uf.find(ia);
        if !touched[r] && uf.find(ib) == r {
            hit += w;
        }
    })?;
    Ok(hit / z)
}

/// The box with one pendant edge leaving each boundary vertex through each
/// boundary face. Leaves are numbered after the box vertices.
pub fn pendant_shell_graph(spec: &LatticeSpec) -> RcGraph {
    let n = spec.n_vertices();
    let mut edges: Vec<(u32, u32)> = spec.edges().iter().map(|e| (e.a as u32, e.b as u32)).collect();
    let mut leaf = n as u32;
    for v in 0..n {
        for axis in 0..spec.d() {
            for s in [-1, 1] {
                if spec.step(v, axis, s).is_none() {
                    edges.push((v as u32, leaf));
                    leaf += 1;
                }
            }
        }
    }
    RcGraph::plain(leaf as usize, edges)
}

/// ĝ(a, b) for all box vertex pairs on the pendant-shell graph: the
/// probability that a and b are connected by a cluster using no shell edge.
pub fn finite_connection_matrix(spec: &LatticeSpec, params: &RCParams) -> Result<Vec<Vec<f64>>, EstimatorError> {
    let g = pendant_shell_graph(spec);
    let n = spec.n_vertices();
    let mut acc = vec![vec![0.0; n]; n];
    let mut touched = vec![false; g.n];
    let leaves: Vec<usize> = (n..g.n).collect();
    let mut roots = vec![0; n];
    let z = enumerate(&g, params, |_, w, uf| {
        boundary_roots(uf, &leaves, &mut touched);
        for (v, r) in roots.iter_mut().enumerate() {
            *r = uf.find(v);
        }
        for a in 0..n {
            if touched[roots[a]] {
                continue;
            }
            for b in a..n {
                if roots[b] == roots[a] {
                    acc[a][b] += w;
                }
            }
        }
    })?;
    for a in 0..n {
        for b in a..n {
            acc[a][b] /= z;
            acc[b][a] = acc[a][b];
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupermultRow {
    pub x: Vec<i64>,
    pub y: Vec<i64>,
    pub g_0y: f64,
    pub g_0x: f64,
    pub g_xy: f64,
    pub holds: bool,
}

/// Checks ĝ(0, y) ≥ ĝ(0, x) ĝ(x, y) exactly, with 0 the box origin corner
/// `spec.origin`, on the pendant-shell graph.
pub fn supermultiplicativity_check(
    pairs: &[(Vec<i64>, Vec<i64>)],
    spec: &LatticeSpec,
    params: &RCParams,
    tol: f64,
) -> Result<Vec<SupermultRow>, EstimatorError> {
    let g = finite_connection_matrix(spec, params)?;
    let o = spec.index(&spec.origin).expect("origin in box");
    pairs
        .iter()
        .map(|(x, y)| {
            let ix = spec.index(x).ok_or_else(|| EstimatorError::OutsideBox(x.clone()))?;
            let iy = spec.index(y).ok_or_else(|| EstimatorError::OutsideBox(y.clone()))?;
            let (g_0y, g_0x, g_xy) = (g[o][iy], g[o][ix], g[ix][iy]);
            Ok(SupermultRow {
                x: x.clone(),
                y: y.clone(),
                g_0y,
                g_0x,
                g_xy,
                holds: g_0y >= g_0x * g_xy - tol,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub direction: Vec<f64>,
    pub tau: f64,
    pub err: f64,
    pub intercept: f64,
    pub radii: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Radii dropped because the estimate was zero.
    pub excluded: Vec<f64>,
    /// α used in the -α log r correction, if any.
    pub alpha: Option<f64>,
}

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of -log ĝ(r) (optionally + α log r) against r, with a leave-one-out
/// jackknife error.
pub fn tau_fit(direction: &[f64], points: &[(f64, f64)], alpha: Option<f64>) -> Result<TauEstimate, EstimatorError> {
    let (good, bad): (Vec<(f64, f64)>, Vec<(f64, f64)>) = points.iter().partition(|(_, g)| *g > 0.0);
    if good.len() < 4 {
        return Err(EstimatorError::TooFewRadii {
            need: 4,
            got: good.len(),
        });
    }
    let xs: Vec<f64> = good.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = good
        .iter()
        .map(|(r, g)| -g.ln() - alpha.map_or(0.0, |a| a * r.ln()))
        .collect();
    let (tau, intercept) = line_fit(&xs, &ys);
    let n = xs.len();
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| xs[j]).collect();
            let y: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| ys[j]).collect();
            line_fit(&x, &y).0
        })
        .collect();
    let mean = loo.iter().sum::<f64>() / n as f64;
    let err = ((n - 1) as f64 / n as f64 * loo.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()).sqrt();
    let residuals = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + tau * x)).collect();
    Ok(TauEstimate {
        direction: direction.to_vec(),
        tau,
        err,
        intercept,
        radii: xs,
        residuals,
        excluded: bad.iter().map(|p| p.0).collect(),
        alpha,
    })
}

/// Uniform directions on the circle.
pub fn circle_grid(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vec![a.cos(), a.sin()]
        })
        .collect()
}

/// Vertices of the frequency-`f` geodesic subdivision of the icosahedron,
/// projected to the unit sphere (10 f^2 + 2 points). Even frequencies contain ±e_i.
pub fn icosahedral_grid(f: usize) -> Vec<Vec<f64>> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let v: Vec<[f64; 3]> = vec![
        [0.0, 1.0, phi],
        [0.0, -1.0, phi],
        [0.0, 1.0, -phi],
        [0.0, -1.0, -phi],
        [1.0, phi, 0.0],
        [-1.0, phi, 0.0],
        [1.0, -phi, 0.0],
        [-1.0, -phi, 0.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, 1.0],
        [phi, 0.0, -1.0],
        [-phi, 0.0, -1.0],
    ];
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut faces = Vec::new();
    for i in 0..12 {
        for j in i + 1..12 {
            for k in j + 1..12 {
                if [d2(&v[i], &v[j]), d2(&v[j], &v[k]), d2(&v[i], &v[k])]
                    .iter()
                    .all(|&e| (e - 4.0).abs() < 1e-9)
                {
                    faces.push([i, j, k]);
                }
            }
        }
    }
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut push = |p: [f64; 3]| {
        let n = norm(&p);
        let u: Vec<f64> = p.iter().map(|c| c / n).collect();
        if !pts.iter().any(|q| (0..3).all(|i| (q[i] - u[i]).abs() < 1e-9)) {
            pts.push(u);
        }
    };
    for [a, b, c] in faces {
        for i in 0..=f {
            for j in 0..=f - i {
                let k = f - i - j;
                let mut p = [0.0; 3];
                for (t, pt) in p.iter_mut().enumerate() {
                    *pt = (i as f64 * v[a][t] + j as f64 * v[b][t] + k as f64 * v[c][t]) / f as f64;
                }
                push(p);
            }
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts
}

/// Radial surface r = 1/τ̂ over a direction grid and its polar body
/// K = ∩_k {w : <w, x̂_k> ≤ τ̂_k}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquiDecaySurface {
    pub directions: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub radius: Vec<f64>,
    /// Vertices of K, one per hull facet of the points x̂_k/τ̂_k.
    pub polar_vertices: Vec<Vec<f64>>,
    /// Direction indices spanning each facet.
    pub facets: Vec<Vec<usize>>,
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Facets of the convex hull of 3-d points as outward-oriented index triples.
fn hull3(p: &[Vec<f64>]) -> Result<Vec<[usize; 3]>, EstimatorError> {
    let n = p.len();
    let scale = p.iter().map(|x| norm(x)).fold(0.0, f64::max);
    let eps = 1e-12 * scale.max(1.0);
    // initial tetrahedron
    let i0 = 0;
    let i1 = (1..n)
        .max_by(|&a, &b| norm(&sub(&p[a], &p[i0])).total_cmp(&norm(&sub(&p[b], &p[i0]))))
        .ok_or(EstimatorError::DegenerateGrid)?;
    let area = |k: usize| norm(&cross(&sub(&p[i1], &p[i0]), &sub(&p[k], &p[i0])));
    let i2 = (0..n).max_by(|&a, &b| area(a).total_cmp(&area(b))).unwrap();
    if area(i2) <= eps {
        return Err(EstimatorError::DegenerateGrid);
    }
    let nrm = cross(&sub(&p[i1], &p[i0]), &sub(&p[i2], &p[i0]));
    let vol = |k: usize| dot(&nrm, &sub(&p[k], &p[i0]));
    let i3 = (0..n).max_by(|&a, &b| vol(a).abs().total_cmp(&vol(b).abs())).unwrap();
    if vol(i3).abs() <= eps * scale * scale {
        return Err(EstimatorError::DegenerateGrid);
    }
    let plane = |f: &[usize; 3]| {
        let nn = cross(&sub(&p[f[1]], &p[f[0]]), &sub(&p[f[2]], &p[f[0]]));
        let c = dot(&nn, &p[f[0]]);
        (nn, c)
    };
    let mut faces: Vec<[usize; 3]> = vec![[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]];
    let centroid: Vec<f64> = (0..3)
        .map(|t| (p[i0][t] + p[i1][t] + p[i2][t] + p[i3][t]) / 4.0)
        .collect();
    for f in faces.iter_mut() {
        let (nn, c) = plane(f);
        if dot(&nn, &centroid) > c {
            f.swap(1, 2);
        }
    }
    for k in 0..n {
        if [i0, i1, i2, i3].contains(&k) {
            continue;
        }
        let visible: Vec<bool> = faces
            .iter()
            .map(|f| {
                let (nn, c) = plane(f);
                dot(&nn, &p[k]) - c > eps * norm(&nn)
            })
            .collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges = std::collections::HashSet::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for e in 0..3 {
                edges.insert((f[e], f[(e + 1) % 3]));
            }
        }
        let horizon: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(a, b)| !edges.contains(&(*b, *a)))
            .copied()
            .collect();
        let mut kept: Vec<[usize; 3]> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| !v)
            .map(|(f, _)| *f)
            .collect();
        for (a, b) in horizon {
            kept.push([a, b, k]);
        }
        faces = kept;
    }
    Ok(faces)
}

/// Edges of the convex hull of 2-d points, counterclockwise.
fn hull2(p: &[Vec<f64>]) -> Result<Vec<[usize; 2]>, EstimatorError> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
    let turn = |o: usize, a: usize, b: usize| {
        (p[a][0] - p[o][0]) * (p[b][1] - p[o][1]) - (p[a][1] - p[o][1]) * (p[b][0] - p[o][0])
    };
    let mut lower: Vec<usize> = Vec::new();
    for &i in &idx {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], i) <= 0.0 {
            lower.pop();
        }
        lower.push(i);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &i in idx.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], i) <= 0.0 {
            upper.pop();
        }
        upper.push(i);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(EstimatorError::DegenerateGrid);
    }
    Ok((0..lower.len())
        .map(|i| [lower[i], lower[(i + 1) % lower.len()]])
        .collect())
}

pub fn equidecay_surface(directions: &[Vec<f64>], tau: &[f64]) -> Result<EquiDecaySurface, EstimatorError> {
    let d = directions.first().map_or(0, |x| x.len());
    if d != 2 && d != 3 {
        return Err(EstimatorError::Dimension(d));
    }
    if directions.len() < 2 * d || tau.len() != directions.len() {
        return Err(EstimatorError::TooFewDirections {
            need: 2 * d,
            got: directions.len(),
        });
    }
    for (k, &t) in tau.iter().enumerate() {
        if !(t > 0.0 && t.is_finite()) {
            return Err(EstimatorError::NonPositiveTau(k, t));
        }
    }
    let dirs: Vec<Vec<f64>> = directions
        .iter()
        .map(|x| {
            let n = norm(x);
            x.iter().map(|c| c / n).collect()
        })
        .collect();
    let pts: Vec<Vec<f64>> = dirs
        .iter()
        .zip(tau)
        .map(|(x, t)| x.iter().map(|c| c / t).collect())
        .collect();
    let facets: Vec<Vec<usize>> = if d == 3 {
        hull3(&pts)?.iter().map(|f| f.to_vec()).collect()
    } else {
        hull2(&pts)?.iter().map(|f| f.to_vec()).collect()
    };
    let mut polar_vertices = Vec::with_capacity(facets.len());
    for f in &facets {
        // solve <w, pts_i> = 1 over the facet's points
        let a = DMatrix::from_fn(d, d, |i, j| pts[f[i]][j]);
        let w = a
            .lu()
            .solve(&DVector::from_element(d, 1.0))
            .ok_or(EstimatorError::DegenerateGrid)?;
        // the origin must lie strictly inside: every other point satisfies <w, p> ≤ 1
        if pts.iter().any(|p| dot(w.as_slice(), p) > 1.0 + 1e-9) {
            return Err(EstimatorError::DegenerateGrid);
        }
        polar_vertices.push(w.iter().copied().collect());
    }
    Ok(EquiDecaySurface {
        radius: tau.iter().map(|t| 1.0 / t).collect(),
        directions: dirs,
        tau: tau.to_vec(),
        polar_vertices,
        facets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityViolation {
    pub index: usize,
    pub tau: f64,
    pub support: f64,
    /// Directions whose hull facet passes outside the point.
    pub witnesses: Vec<usize>,
}

impl EquiDecaySurface {
    pub fn d(&self) -> usize {
        self.directions[0].len()
    }

    /// h_K(x) = max_{w ∈ K} <w, x>.
    pub fn support(&self, x: &[f64]) -> f64 {
        self.support_arg(x).0
    }

    fn support_arg(&self, x: &[f64]) -> (f64, usize) {
        self.polar_vertices
            .iter()
            .enumerate()
            .map(|(i, w)| (dot(w, x), i))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("nonempty polar body")
    }

    /// Largest |h_K(x̂_k) - τ̂_k| over grid points on the hull.
    pub fn roundtrip_error(&self) -> f64 {
        self.directions
            .iter()
            .zip(&self.tau)
            .map(|(x, t)| (self.support(x) - t).abs())
            .fold(0.0, f64::max)
    }

    /// Grid points where τ̂ exceeds the support function of the polar body.
    pub fn convexity_violations(&self, tol: f64) -> Vec<ConvexityViolation> {
        self.directions
            .iter()
            .zip(&self.tau)
            .enumerate()
            .filter_map(|(index, (x, &tau))| {
                let (support, f) = self.support_arg(x);
                (tau > support + tol).then(|| ConvexityViolation {
                    index,
                    tau,
                    support,
                    witnesses: self.facets[f].clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub index: usize,
    pub gauss: f64,
    /// Smallest principal curvature (the curvature itself in d=2).
    pub k_min: f64,
    pub k_max: f64,
    pub fit_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub rows: Vec<CurvatureRow>,
    pub min_gauss: f64,
    pub max_gauss: f64,
    pub min_principal: f64,
    pub positive: bool,
}

pub const CURVATURE_NEIGHBORS_3D: usize = 25;
pub const CURVATURE_HALF_WINDOW_2D: usize = 3;

fn lsq(rows: &[Vec<f64>], y: &[f64]) -> Option<(DVector<f64>, f64)> {
    let a = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    if svd.singular_values.min() < 1e-12 * svd.singular_values.max() {
        return None;
    }
    let c = svd.solve(&b, 1e-14).ok()?;
    let rms = ((&a * &c - b).norm_squared() / y.len() as f64).sqrt();
    Some((c, rms))
}

/// Gaussian and principal curvatures of the radial surface r(x̂) at each grid
/// point, from local polynomial fits: of the squared gauge τ² in d=3, of the curve r(θ) in d=2.
pub fn convexity_curvature_check(surface: &EquiDecaySurface) -> Result<CurvatureReport, EstimatorError> {
    let d = surface.d();
    let n = surface.directions.len();
    if n < 12 {
        return Err(EstimatorError::TooFewDirections { need: 12, got: n });
    }
    let mut rows = Vec::with_capacity(n);
    if d == 2 {
        let theta: Vec<f64> = surface.directions.iter().map(|x| x[1].atan2(x[0])).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| theta[a].total_cmp(&theta[b]));
        let h = CURVATURE_HALF_WINDOW_2D as i64;
        for (pos, &k) in order.iter().enumerate() {
            let mut design = Vec::new();
            let mut y = Vec::new();
            for o in -h..=h {
                let j = order[(pos as i64 + o).rem_euclid(n as i64) as usize];
                let mut dt = theta[j] - theta[k];
                dt -= (dt / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI;
                design.push((0..5).map(|e| dt.powi(e)).collect());
                y.push(surface.radius[j]);
            }
            let (c, rms) = lsq(&design, &y).ok_or(EstimatorError::SingularFit(k))?;
            let (r, r1, r2) = (c[0], c[1], 2.0 * c[2]);
            let kappa = (r * r + 2.0 * r1 * r1 - r * r2) / (r * r + r1 * r1).powf(1.5);
            rows.push(CurvatureRow {
                index: k,
                gauss: kappa,
                k_min: kappa,
                k_max: kappa,
                fit_rms: rms,
            });
        }
        rows.sort_by_key(|r| r.index);
    } else {
        for k in 0..n {
            let nrm = &surface.directions[k];
            let helper = if nrm[0].abs() < 0.9 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let eu = {
                let c = cross(nrm, &helper);
                let l = norm(&c);
                c.iter().map(|x| x / l).collect::<Vec<_>>()
            };
            let ev = cross(nrm, &eu).to_vec();
            let mut near: Vec<usize> = (0..n).collect();
            near.sort_by(|&a, &b| {
                dot(&surface.directions[b], nrm)
                    .total_cmp(&dot(&surface.directions[a], nrm))
                    .then(a.cmp(&b))
            });
            near.truncate(CURVATURE_NEIGHBORS_3D);
            // τ extended 1-homogeneously and restricted to the tangent plane at n,
            // F(a, b) = τ(n + a e_u + b e_v); its square G = F^2 is fitted since it
            // is a polynomial whenever τ is a Euclidean-type gauge
            let mut design = Vec::new();
            let mut y = Vec::new();
            for &j in &near {
                let x = &surface.directions[j];
                let h = dot(x, nrm);
                if h <= 0.2 {
                    continue;
                }
                let (a, b) = (dot(x, &eu) / h, dot(x, &ev) / h);
                let mut row = Vec::with_capacity(15);
                for deg in 0..=4 {
                    for i in 0..=deg {
                        row.push(a.powi(deg - i) * b.powi(i));
                    }
                }
                design.push(row);
                y.push((surface.tau[j] / h).powi(2));
            }
            if design.len() < 15 {
                return Err(EstimatorError::SingularFit(k));
            }
            let (c, rms) = lsq(&design, &y).ok_or(EstimatorError::SingularFit(k))?;
            if !(c[0] > 0.0) {
                return Err(EstimatorError::SingularFit(k));
            }
            let t0 = c[0].sqrt();
            let (fa, fb) = (c[1] / (2.0 * t0), c[2] / (2.0 * t0));
            let faa = 2.0 * c[3] / (2.0 * t0) - fa * fa / t0;
            let fab = c[4] / (2.0 * t0) - fa * fb / t0;
            let fbb = 2.0 * c[5] / (2.0 * t0) - fb * fb / t0;
            // gradient and Hessian of τ at n in the frame (n, e_u, e_v); H n = 0
            let g = DVector::from_vec(vec![t0, fa, fb]);
            let mut hess = DMatrix::zeros(3, 3);
            hess[(1, 1)] = faa;
            hess[(1, 2)] = fab;
            hess[(2, 1)] = fab;
            hess[(2, 2)] = fbb;
            // the level set τ = 1 passes through n/τ(n), where the Hessian is τ(n) times larger
            hess *= t0;
            let mut bordered = DMatrix::zeros(4, 4);
            bordered.view_mut((0, 0), (3, 3)).copy_from(&hess);
            for i in 0..3 {
                bordered[(i, 3)] = g[i];
                bordered[(3, i)] = g[i];
            }
            let gn = g.norm();
            let gauss = -bordered.determinant() / gn.powi(4);
            let proj = DMatrix::identity(3, 3) - &g * g.transpose() / (gn * gn);
            let shape = &proj * &hess * &proj / gn;
            let mean = shape.trace() / 2.0;
            let disc = (mean * mean - gauss).max(0.0).sqrt();
            rows.push(CurvatureRow {
                index: k,
                gauss,
                k_min: mean - disc,
                k_max: mean + disc,
                fit_rms: rms,
            });
        }
    }
    let min_gauss = rows.iter().map(|r| r.gauss).fold(f64::INFINITY, f64::min);
    let max_gauss = rows.iter().map(|r| r.gauss).fold(f64::NEG_INFINITY, f64::max);
    let min_principal = rows.iter().map(|r| r.k_min).fold(f64::INFINITY, f64::min);
    Ok(CurvatureReport {
        positive: min_principal > 0.0,
        rows,
        min_gauss,
        max_gauss,
        min_principal,
    })
}

/// τ̂ along e_1 from one multi-radius chain at radii 1..=r_max.
pub fn tau_scan_axis(
    d: usize,
    params: &RCParams,
    r_max: i64,
    n_samples: usize,
    seed: u64,
    margin: usize,
) -> Result<(Vec<ConnectivityRow>, TauEstimate), EstimatorError> {
    let xs: Vec<Vec<i64>> = (1..=r_max)
        .map(|r| {
            let mut x = vec![0; d];
            x[0] = r;
            x
        })
        .collect();
    let rows = finite_two_point_multi(&xs, d, params, &BoundaryCondition::Free, n_samples, seed, 0, margin)?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.x[0] as f64, r.estimate)).collect();
    let mut dir = vec![0.0; d];
    dir[0] = 1.0;
    let est = tau_fit(&dir, &pts, None)?;
    Ok((rows, est))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_fit_synthetic() {
        let pts: Vec<(f64, f64)> = (1..=8).map(|r| (r as f64, (-0.5 * r as f64).exp())).collect();
        let t = tau_fit(&[1.0, 0.0], &pts, None).unwrap();
        assert!((t.tau - 0.5).abs() < 1e-12 && t.err < 1e-12);
        let mut with_zero = pts.clone();
        with_zero.push((9.0, 0.0));
        assert_eq!(tau_fit(&[1.0, 0.0], &with_zero, None).unwrap().excluded, vec![9.0]);
        assert!(tau_fit(&[1.0, 0.0], &pts[..3], None).is_err());
    }

    #[test]
    fn grids() {
        let g = icosahedral_grid(6);
        assert_eq!(g.len(), 362);
        for i in 0..3 {
            for s in [-1.0, 1.0] {
                assert!(g.iter().any(|p| (p[i] - s).abs() < 1e-12));
            }
        }
        assert_eq!(circle_grid(36).len(), 36);
    }

    #[test]
    fn sphere_polar_and_curvature() {
        let g = icosahedral_grid(6);
        let s = equidecay_surface(&g, &vec![1.0; g.len()]).unwrap();
        assert!(s.roundtrip_error() < 1e-9);
        assert!(s.convexity_violations(1e-9).is_empty());
        let c = convexity_curvature_check(&s).unwrap();
        assert!(
            (c.min_gauss - 1.0).abs() < 0.05 && (c.max_gauss - 1.0).abs() < 0.05,
            "{} {}",
            c.min_gauss,
            c.max_gauss
        );
        let g2 = circle_grid(36);
        let s2 = equidecay_surface(&g2, &vec![1.0; 36]).unwrap();
        let c2 = convexity_curvature_check(&s2).unwrap();
        assert!((c2.min_gauss - 1.0).abs() < 1e-3);
    }

    #[test]
    fn box_polar() {
        let g = icosahedral_grid(4);
        let tau: Vec<f64> = g.iter().map(|x| 2.0 * x[0].abs() + x[1].abs() + x[2].abs()).collect();
        let s = equidecay_surface(&g, &tau).unwrap();
        assert!(s.roundtrip_error() < 1e-9);
        for w in &s.polar_vertices {
            assert!(
                (w[0].abs() - 2.0).abs() < 1e-9 && (w[1].abs() - 1.0).abs() < 1e-9 && (w[2].abs() - 1.0).abs() < 1e-9
            );
        }
    }

    #[test]
    fn dimple_and_degenerate() {
        let g = circle_grid(24);
        let mut tau = vec![1.0; 24];
        tau[5] = 1.3;
        let s = equidecay_surface(&g, &tau).unwrap();
        let v = s.convexity_violations(1e-9);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 5);
        assert_eq!(v[0].witnesses, vec![4, 6]);
        let flat: Vec<Vec<f64>> = circle_grid(12).iter().map(|x| vec![x[0], x[1], 0.0]).collect();
        assert_eq!(
            equidecay_surface(&flat, &[1.0; 12]).unwrap_err(),
            EstimatorError::DegenerateGrid
        );
        assert!(equidecay_surface(&g, &[0.0; 24]).is_err());
    }

    #[test]
    fn small_box_exact_vs_mc() {
        let spec = LatticeSpec::cube(2, 4).unwrap();
        let params = RCParams::new(2.0, 0.6).unwrap();
        let exact = finite_two_point_exact(&[1, 1], &[2, 1], &spec, &params, &BoundaryCondition::Free).unwrap();
        assert!(exact > 0.0 && exact < 1.0);
        // the same event against a hand count on a single interior vertex
        let lone = finite_two_point_exact(
            &[1, 1],
            &[1, 1],
            &LatticeSpec::cube(2, 3).unwrap(),
            &params,
            &BoundaryCondition::Free,
        )
        .unwrap();
        let p = params.p_lower();
        // centre of a 3x3 box is finite iff its 4 edges are closed; conditional law is not product for q>1
        assert!(lone > 0.0 && lone < (1.0 - p).powi(4) * 2.0);
    }

    /// Gaussian curvature of {τ = 1} at x̂/τ(x̂) by central differences of τ itself.
    fn fd_gauss(tau: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> f64 {
        let t = tau(x);
        let p: Vec<f64> = x.iter().map(|c| c / t).collect();
        let h = 1e-4;
        let at = |dx: [f64; 3]| tau(&[p[0] + dx[0], p[1] + dx[1], p[2] + dx[2]]);
        let e = |i: usize, s: f64| {
            let mut v = [0.0; 3];
            v[i] = s;
            v
        };
        let mut m = DMatrix::zeros(4, 4);
        for i in 0..3 {
            let gi = (at(e(i, h)) - at(e(i, -h))) / (2.0 * h);
            m[(i, 3)] = gi;
            m[(3, i)] = gi;
            for j in 0..3 {
                let mut pp = e(i, h);
                let mut pm = e(i, h);
                let mut mp = e(i, -h);
                let mut mm = e(i, -h);
                pp[j] += h;
                pm[j] -= h;
                mp[j] += h;
                mm[j] -= h;
                m[(i, j)] = (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * h * h);
            }
        }
        let g = (0..3).map(|i| m[(i, 3)] * m[(i, 3)]).sum::<f64>().sqrt();
        -m.determinant() / g.powi(4)
    }

    #[test]
    fn curvature_of_non_quadratic_gauge() {
        let tau = |x: &[f64]| {
            let r = norm(x);
            r + 0.15 * x[0].powi(3) / (r * r) + 0.08 * x[1].powi(4) / r.powi(3)
        };
        let g = icosahedral_grid(6);
        let t: Vec<f64> = g.iter().map(|x| tau(x)).collect();
        let s = equidecay_surface(&g, &t).unwrap();
        assert!(s.convexity_violations(1e-9).is_empty());
        let c = convexity_curvature_check(&s).unwrap();
        let worst = c
            .rows
            .iter()
            .map(|r| (r.gauss / fd_gauss(&tau, &g[r.index]) - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "worst relative curvature error {worst}");
    }
}
