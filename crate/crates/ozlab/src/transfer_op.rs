//! Ruelle transfer operator on a finite alphabet of irreducible pieces:
//! tilting, the leading eigenvalue, renewal masses and the prefactor fit.

use crate::lattice::{dot, to_f64, unit, Cone, LatticeError, GEOM_TOL};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

pub const MAX_MEMORY: usize = 4;
pub const DP_POINT_BUDGET: usize = 4_000_000;
/// Limit on (transform points) x (radius) x (symbols) for the axis transform.
pub const AXIS_WORK_BUDGET: usize = 2_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum TransferError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("alphabet is empty")]
    Empty,
    #[error("symbol {0} has <t, X> = {1} < 1")]
    NotForward(usize, f64),
    #[error("symbol {0} lies outside the cone")]
    OutsideCone(usize),
    #[error("displacement of symbol {0} has dimension {1}, expected {2}")]
    Dimension(usize, usize, usize),
    #[error("potential table has {got} entries, expected {expected}")]
    TableSize { expected: usize, got: usize },
    #[error("memory depth {0} not supported here")]
    Memory(usize),
    #[error("weights overflow or are not finite")]
    Overflow,
    #[error("power iteration did not converge in {0} steps")]
    NoConvergence(usize),
    #[error("leading eigenvalue is not simple: restarts disagree by {0:e}")]
    Degenerate(f64),
    #[error("operator is reducible")]
    Reducible,
    #[error("radius {radius} needs {points} points, budget is {budget}")]
    Budget { radius: f64, points: usize, budget: usize },
    #[error("need at least 10 radii with positive mass in range, got {0}")]
    TooFewPoints(usize),
    #[error("nonpositive mass {1} at r = {0}")]
    NonPositive(f64, f64),
    #[error("tilt tuning failed: {0}")]
    Tuning(String),
    #[error("bad alphabet file: {0}")]
    Json(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symbol {
    pub displacement: Vec<i64>,
    pub log_weight: f64,
}

/// A finite truncation of the alphabet of irreducible pieces along t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrreducibleAlphabet {
    pub t: Vec<f64>,
    pub symbols: Vec<Symbol>,
}

impl IrreducibleAlphabet {
    pub fn new(t: &[f64], symbols: Vec<Symbol>, eps: Option<f64>) -> Result<Self, TransferError> {
        if symbols.is_empty() {
            return Err(TransferError::Empty);
        }
        let t_hat = unit(t)?;
        let d = t.len();
        let cone = eps.map(|e| Cone::new(t, e)).transpose()?;
        for (i, s) in symbols.iter().enumerate() {
            if s.displacement.len() != d {
                return Err(TransferError::Dimension(i, s.displacement.len(), d));
            }
            let h = dot(&t_hat, &to_f64(&s.displacement));
            if h < 1.0 - GEOM_TOL {
                return Err(TransferError::NotForward(i, h));
            }
            if let Some(c) = &cone {
                if !c.contains(&to_f64(&s.displacement)) {
                    return Err(TransferError::OutsideCone(i));
                }
            }
            if !s.log_weight.is_finite() {
                return Err(TransferError::Overflow);
            }
        }
        Ok(IrreducibleAlphabet { t: t_hat, symbols })
    }

    /// Symbols with log-weights given by log frequencies of observed displacements.
    pub fn from_counts(t: &[f64], counts: &BTreeMap<Vec<i64>, u64>, eps: Option<f64>) -> Result<Self, TransferError> {
        let total: u64 = counts.values().sum();
        let symbols = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(x, &n)| Symbol {
                displacement: x.clone(),
                log_weight: (n as f64 / total as f64).ln(),
            })
            .collect();
        IrreducibleAlphabet::new(t, symbols, eps)
    }

    /// Memoryless potential taken from the symbols' log-weights.
    pub fn potential(&self) -> PotentialSpec {
        PotentialSpec {
            memory: 1,
            table: self.symbols.iter().map(|s| s.log_weight).collect(),
            initial: None,
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn d(&self) -> usize {
        self.t.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("alphabet serializes")
    }

    /// Parses and revalidates an alphabet written by [`Self::to_json`].
    pub fn from_json(s: &str, eps: Option<f64>) -> Result<Self, TransferError> {
        let raw: IrreducibleAlphabet = serde_json::from_str(s).map_err(|e| TransferError::Json(e.to_string()))?;
        IrreducibleAlphabet::new(&raw.t, raw.symbols, eps)
    }
}

/// Ξ over blocks (s_0, s_1, .., s_{m-1}) with s_0 the newest symbol,
/// indexed s_0 + k s_1 + k^2 s_2 + ..; `initial` gives the weights of the
/// first m-1 symbols of a sequence (indexed like a block of length m-1) and
/// defaults to the table with missing predecessors set to symbol 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub memory: usize,
    pub table: Vec<f64>,
    pub initial: Option<Vec<f64>>,
}

impl PotentialSpec {
    pub fn memoryless(xi: Vec<f64>) -> Self {
        PotentialSpec {
            memory: 1,
            table: xi,
            initial: None,
        }
    }

    /// Memory-2 potential from xi[s][prev] and first-symbol weights.
    pub fn memory2(xi: &[Vec<f64>], initial: Vec<f64>) -> Self {
        let k = xi.len();
        let mut table = vec![0.0; k * k];
        for (s, row) in xi.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                table[s + k * b] = v;
            }
        }
        PotentialSpec {
            memory: 2,
            table,
            initial: Some(initial),
        }
    }

    fn check(&self, k: usize) -> Result<(), TransferError> {
        if self.memory == 0 || self.memory > MAX_MEMORY {
            return Err(TransferError::Memory(self.memory));
        }
        let expected = k.pow(self.memory as u32);
        if self.table.len() != expected {
            return Err(TransferError::TableSize {
                expected,
                got: self.table.len(),
            });
        }
        if let Some(init) = &self.initial {
            let e = k.pow(self.memory as u32 - 1);
            if init.len() != e {
                return Err(TransferError::TableSize {
                    expected: e,
                    got: init.len(),
                });
            }
        }
        if self.table.iter().any(|v| !v.is_finite() && *v != f64::NEG_INFINITY) {
            return Err(TransferError::Overflow);
        }
        Ok(())
    }

    /// var_j: largest change of Ξ between blocks agreeing in their first j symbols.
    pub fn variation(&self, k: usize, j: usize) -> f64 {
        if j >= self.memory {
            return 0.0;
        }
        let head = k.pow(j as u32);
        let mut lo: HashMap<usize, f64> = HashMap::new();
        let mut hi: HashMap<usize, f64> = HashMap::new();
        for (i, &v) in self.table.iter().enumerate() {
            let key = i % head;
            let l = lo.entry(key).or_insert(v);
            *l = l.min(v);
            let h = hi.entry(key).or_insert(v);
            *h = h.max(v);
        }
        lo.iter().map(|(key, l)| hi[key] - l).fold(0.0, f64::max)
    }

    /// True when var_j ≤ c θ^{j-1} for j = 1..memory.
    pub fn holder_ok(&self, k: usize, theta: f64, c: f64) -> bool {
        (1..=self.memory).all(|j| self.variation(k, j) <= c * theta.powi(j as i32 - 1) + 1e-12)
    }

    /// The memory-m' truncation, filling dropped predecessors with symbol `fill`.
    pub fn truncate(&self, k: usize, m: usize, fill: usize) -> PotentialSpec {
        if m >= self.memory {
            return self.clone();
        }
        let mut pad = 0;
        for j in m..self.memory {
            pad += fill * k.pow(j as u32);
        }
        let table = (0..k.pow(m as u32)).map(|i| self.table[i + pad]).collect();
        PotentialSpec {
            memory: m,
            table,
            initial: None,
        }
    }
}

/// Transfer matrix acting on functions of length-(m-1) blocks:
/// (Lf)(b) = Σ_s e^{Ξ(s, b)} f((s, b) cut to length m-1).
pub fn transfer_matrix(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
) -> Result<DMatrix<f64>, TransferError> {
    let k = alphabet.len();
    if k == 0 {
        return Err(TransferError::Empty);
    }
    potential.check(k)?;
    let m = potential.memory;
    let nb = k.pow(m as u32 - 1);
    let mut mat = DMatrix::zeros(nb, nb);
    for b in 0..nb {
        for s in 0..k {
            let w = potential.table[s + k * b].exp();
            if !w.is_finite() {
                return Err(TransferError::Overflow);
            }
            let next = if m == 1 { 0 } else { (s + k * b) % nb };
            mat[(b, next)] += w;
        }
    }
    Ok(mat)
}

pub fn ruelle_apply(
    f: &[f64],
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
) -> Result<Vec<f64>, TransferError> {
    let mat = transfer_matrix(alphabet, potential)?;
    if f.len() != mat.ncols() {
        return Err(TransferError::TableSize {
            expected: mat.ncols(),
            got: f.len(),
        });
    }
    let out = &mat * DVector::from_column_slice(f);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(TransferError::Overflow);
    }
    Ok(out.iter().copied().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigen {
    pub lambda: f64,
    /// Right eigenfunction, max 1.
    pub h: Vec<f64>,
    /// Left eigenvector, total 1.
    pub measure: Vec<f64>,
    pub iterations: usize,
}

fn strongly_connected(mat: &DMatrix<f64>) -> bool {
    let n = mat.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { mat[(i, j)] } else { mat[(j, i)] };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Power iteration for (M + I); returns the Perron eigenvalue of M and a
/// max-normalised eigenvector.
fn power(
    mat: &DMatrix<f64>,
    start: DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, DVector<f64>, usize), TransferError> {
    let mut h = start;
    h /= h.max();
    for it in 1..=max_iter {
        let lh = mat * &h;
        let next = &lh + &h;
        let scale = next.max();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(TransferError::Overflow);
        }
        h = next / scale;
        let lh = mat * &h;
        let lambda = lh.dot(&h) / h.dot(&h);
        let resid = (lh - &h * lambda).amax();
        if resid <= tol * lambda.abs() {
            return Ok((lambda, h, it));
        }
    }
    Err(TransferError::NoConvergence(max_iter))
}

/// Leading eigenvalue, eigenfunction and eigenmeasure of the transfer operator.
/// Three restarts from different positive vectors must agree.
pub fn leading_eig(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    tol: f64,
    max_iter: usize,
) -> Result<Eigen, TransferError> {
    let mat = transfer_matrix(alphabet, potential)?;
    leading_eig_matrix(&mat, tol, max_iter)
}

pub fn leading_eig_matrix(mat: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Eigen, TransferError> {
    let n = mat.nrows();
    let starts = [
        DVector::from_element(n, 1.0),
        DVector::from_fn(n, |i, _| 1.0 + i as f64),
        DVector::from_fn(n, |i, _| (n - i) as f64),
    ];
    let mut runs = Vec::new();
    for s in starts {
        runs.push(power(mat, s, tol, max_iter)?);
    }
    let spread = runs
        .iter()
        .skip(1)
        .map(|r| (&r.1 - &runs[0].1).amax())
        .fold(0.0, f64::max);
    if spread > tol.sqrt().max(1e-6) {
        return Err(TransferError::Degenerate(spread));
    }
    if !strongly_connected(mat) {
        return Err(TransferError::Reducible);
    }
    let (lambda, h, iterations) = runs.swap_remove(0);
    let (_, mu, _) = power(&mat.transpose(), DVector::from_element(n, 1.0), tol, max_iter)?;
    let total = mu.sum();
    Ok(Eigen {
        lambda,
        h: h.iter().copied().collect(),
        measure: mu.iter().map(|v| v / total).collect(),
        iterations,
    })
}

/// Ξ_v(s, ·) = <v, X(s)> + Ξ(s, ·).
pub fn tilt(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    v: &[f64],
) -> Result<PotentialSpec, TransferError> {
    let k = alphabet.len();
    potential.check(k)?;
    if v.len() != alphabet.d() || v.iter().any(|c| !c.is_finite()) {
        return Err(TransferError::Overflow);
    }
    let shift: Vec<f64> = alphabet
        .symbols
        .iter()
        .map(|s| dot(v, &to_f64(&s.displacement)))
        .collect();
    let table: Vec<f64> = potential
        .table
        .iter()
        .enumerate()
        .map(|(i, x)| x + shift[i % k])
        .collect();
    if table.iter().any(|x| x.exp().is_infinite()) {
        return Err(TransferError::Overflow);
    }
    let initial = potential
        .initial
        .as_ref()
        .map(|init| init.iter().enumerate().map(|(i, x)| x + shift[i % k]).collect());
    Ok(PotentialSpec {
        memory: potential.memory,
        table,
        initial,
    })
}

pub const EIG_TOL: f64 = 1e-13;
pub const EIG_ITER: usize = 200_000;

pub fn log_lambda(alphabet: &IrreducibleAlphabet, potential: &PotentialSpec, v: &[f64]) -> Result<f64, TransferError> {
    let p = tilt(alphabet, potential, v)?;
    Ok(leading_eig(alphabet, &p, EIG_TOL, EIG_ITER)?.lambda.ln())
}

/// Mean displacement per symbol under the Markov measure of the (tilted) operator.
pub fn mean_displacement(alphabet: &IrreducibleAlphabet, potential: &PotentialSpec) -> Result<Vec<f64>, TransferError> {
    let k = alphabet.len();
    let e = leading_eig(alphabet, potential, EIG_TOL, EIG_ITER)?;
    let m = potential.memory;
    let nb = k.pow(m as u32 - 1);
    let norm_c: f64 = e.measure.iter().zip(&e.h).map(|(a, b)| a * b).sum();
    let mut mean = vec![0.0; alphabet.d()];
    for b in 0..nb {
        let pi = e.measure[b] * e.h[b] / norm_c;
        for s in 0..k {
            let next = if m == 1 { 0 } else { (s + k * b) % nb };
            let p = potential.table[s + k * b].exp() * e.h[next] / (e.lambda * e.h[b]);
            for (acc, x) in mean.iter_mut().zip(&alphabet.symbols[s].displacement) {
                *acc += pi * p * *x as f64;
            }
        }
    }
    Ok(mean)
}

/// log λ(v) on a grid of tilts; points that overflow or fail are None.
pub fn pressure_surface(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    grid: &[Vec<f64>],
) -> Vec<(Vec<f64>, Option<f64>)> {
    grid.iter()
        .map(|v| (v.clone(), log_lambda(alphabet, potential, v).ok()))
        .collect()
}

/// Tilt v with λ(v) = 1 and mean displacement parallel to `direction`, by Newton's method.
pub fn tune_tilt(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    direction: &[f64],
) -> Result<Vec<f64>, TransferError> {
    let d = alphabet.d();
    let x_hat = unit(direction)?;
    // an orthonormal basis of the complement of x̂
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let xv = DVector::from_column_slice(&x_hat);
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        e -= &xv * xv.dot(&e);
        for b in &basis {
            e -= b * b.dot(&e);
        }
        if e.norm() > 1e-6 && basis.len() < d - 1 {
            basis.push(e.normalize());
        }
    }
    let residual = |v: &DVector<f64>| -> Result<DVector<f64>, TransferError> {
        let vs: Vec<f64> = v.iter().copied().collect();
        let p = tilt(alphabet, potential, &vs)?;
        let ll = leading_eig(alphabet, &p, EIG_TOL, EIG_ITER)?.lambda.ln();
        let mean = DVector::from_vec(mean_displacement(alphabet, &p)?);
        let mut r = DVector::zeros(d);
        r[0] = ll;
        for (i, b) in basis.iter().enumerate() {
            r[i + 1] = b.dot(&mean);
        }
        Ok(r)
    };
    let mut v = DVector::zeros(d);
    for _ in 0..100 {
        let r = residual(&v)?;
        if r.amax() < 1e-12 {
            return Ok(v.iter().copied().collect());
        }
        let h = 1e-6;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut vp = v.clone();
            vp[j] += h;
            let mut vm = v.clone();
            vm[j] -= h;
            let col = (residual(&vp)? - residual(&vm)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let step = jac
            .lu()
            .solve(&r)
            .ok_or_else(|| TransferError::Tuning("singular Jacobian".into()))?;
        // damp long steps
        let len = step.norm();
        v -= if len > 1.0 { step / len } else { step };
    }
    Err(TransferError::Tuning("no convergence in 100 Newton steps".into()))
}

/// Σ_n ν_n(Σ X(s_i) = x) for all x with <t̂, x> ≤ R, including the empty
/// concatenation (mass 1 at 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalMassTable {
    pub radius: f64,
    pub mass: BTreeMap<Vec<i64>, f64>,
}

impl RenewalMassTable {
    pub fn get(&self, x: &[i64]) -> f64 {
        self.mass.get(x).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    /// CSV rows x1..xd,mass in key order.
    pub fn to_csv(&self) -> String {
        let d = self.mass.keys().next().map_or(0, |k| k.len());
        let mut out = String::from("# mass(0) = 1 counts the empty concatenation\n");
        let cols: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        out.push_str(&format!("{},mass\n", cols.join(",")));
        for (x, m) in &self.mass {
            let xs: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{:.17e}\n", xs.join(","), m));
        }
        out
    }
}

fn first_weights(k: usize, p: &PotentialSpec) -> Result<Vec<f64>, TransferError> {
    match p.memory {
        1 => Ok(p.table.clone()),
        2 => Ok(p
            .initial
            .clone()
            .unwrap_or_else(|| (0..k).map(|s| p.table[s]).collect())),
        m => Err(TransferError::Memory(m)),
    }
}

/// Exact renewal masses over every point within radius R, by dynamic
/// programming over points in increasing <t̂, x>.
pub fn renewal_mass(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    v: &[f64],
    radius: f64,
) -> Result<RenewalMassTable, TransferError> {
    let k = alphabet.len();
    let p = tilt(alphabet, potential, v)?;
    let init = first_weights(k, &p)?;
    let t = &alphabet.t;
    let level = |x: &[i64]| dot(t, &to_f64(x));
    // reachable points
    let origin = vec![0i64; alphabet.d()];
    let mut points: HashMap<Vec<i64>, usize> = HashMap::from([(origin.clone(), 0)]);
    let mut order = vec![origin];
    let mut i = 0;
    while i < order.len() {
        let x = order[i].clone();
        i += 1;
        for s in &alphabet.symbols {
            let y: Vec<i64> = x.iter().zip(&s.displacement).map(|(a, b)| a + b).collect();
            if level(&y) <= radius + GEOM_TOL && !points.contains_key(&y) {
                points.insert(y.clone(), order.len());
                order.push(y);
                if order.len() > DP_POINT_BUDGET {
                    return Err(TransferError::Budget {
                        radius,
                        points: order.len(),
                        budget: DP_POINT_BUDGET,
                    });
                }
            }
        }
    }
    let mut sorted: Vec<usize> = (0..order.len()).collect();
    sorted.sort_by(|&a, &b| {
        level(&order[a])
            .total_cmp(&level(&order[b]))
            .then(order[a].cmp(&order[b]))
    });
    // state[x][s]: mass of nonempty sequences ending at x with last symbol s
    let mut state = vec![vec![0.0; k]; order.len()];
    let mut mass = BTreeMap::new();
    for &ix in &sorted {
        let x = &order[ix];
        for s in 0..k {
            let prev: Vec<i64> = x
                .iter()
                .zip(&alphabet.symbols[s].displacement)
                .map(|(a, b)| a - b)
                .collect();
            let Some(&ip) = points.get(&prev) else {
                continue;
            };
            let mut acc = 0.0;
            if ip == 0 {
                acc += init[s].exp();
            }
            if p.memory == 1 {
                acc += p.table[s].exp() * state[ip].iter().sum::<f64>();
            } else {
                for b in 0..k {
                    acc += p.table[s + k * b].exp() * state[ip][b];
                }
            }
            state[ix][s] = acc;
        }
        let total: f64 = state[ix].iter().sum::<f64>() + if ix == 0 { 1.0 } else { 0.0 };
        if !total.is_finite() {
            return Err(TransferError::Overflow);
        }
        mass.insert(x.clone(), total);
    }
    Ok(RenewalMassTable { radius, mass })
}

/// Renewal masses at r·e_u for r = 0..=R with t = e_u, computed exactly by a
/// discrete Fourier transform in the coordinates transverse to e_u. The
/// transform length exceeds the transverse reach, so there is no aliasing.
pub fn renewal_mass_on_axis(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    v: &[f64],
    radius: usize,
) -> Result<Vec<f64>, TransferError> {
    let d = alphabet.d();
    let u = (0..d)
        .find(|&i| (alphabet.t[i] - 1.0).abs() < GEOM_TOL)
        .ok_or_else(|| TransferError::Tuning("axis masses need t along a coordinate axis".into()))?;
    let k = alphabet.len();
    let p = tilt(alphabet, potential, v)?;
    let init = first_weights(k, &p)?;
    if p.memory > 2 {
        return Err(TransferError::Memory(p.memory));
    }
    let lateral: Vec<usize> = (0..d).filter(|&i| i != u).collect();
    let steps: Vec<usize> = alphabet.symbols.iter().map(|s| s.displacement[u] as usize).collect();
    let max_slope = alphabet
        .symbols
        .iter()
        .map(|s| lateral.iter().map(|&i| s.displacement[i].abs()).max().unwrap_or(0) as f64 / s.displacement[u] as f64)
        .fold(0.0, f64::max);
    let reach = (max_slope * radius as f64).ceil() as usize;
    let n = 2 * reach + 1;
    let grid = n.pow(lateral.len() as u32);
    let points = grid * (radius + 1) * k;
    if points > AXIS_WORK_BUDGET {
        return Err(TransferError::Budget {
            radius: radius as f64,
            points,
            budget: AXIS_WORK_BUDGET,
        });
    }
    let winit: Vec<f64> = init.iter().map(|x| x.exp()).collect();
    let wtab: Vec<f64> = p.table.iter().map(|x| x.exp()).collect();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut totals = vec![0.0; radius + 1];
    let mut re = vec![vec![0.0; k]; radius + 1];
    let mut im = vec![vec![0.0; k]; radius + 1];
    let mut phase = vec![(0.0, 0.0); k];
    for g in 0..grid {
        let mut rest = g;
        let theta: Vec<f64> = lateral
            .iter()
            .map(|_| {
                let j = rest % n;
                rest /= n;
                two_pi * j as f64 / n as f64
            })
            .collect();
        for (s, sym) in alphabet.symbols.iter().enumerate() {
            let a: f64 = lateral
                .iter()
                .zip(&theta)
                .map(|(&i, th)| sym.displacement[i] as f64 * th)
                .sum();
            phase[s] = (a.cos(), a.sin());
        }
        for r in 1..=radius {
            for s in 0..k {
                let (mut sr, mut si) = (0.0, 0.0);
                if steps[s] <= r {
                    let q = r - steps[s];
                    if q == 0 {
                        sr += winit[s];
                    } else if p.memory == 1 {
                        let w = wtab[s];
                        for b in 0..k {
                            sr += w * re[q][b];
                            si += w * im[q][b];
                        }
                    } else {
                        for b in 0..k {
                            let w = wtab[s + k * b];
                            sr += w * re[q][b];
                            si += w * im[q][b];
                        }
                    }
                }
                let (c, sn) = phase[s];
                re[r][s] = sr * c - si * sn;
                im[r][s] = sr * sn + si * c;
            }
            totals[r] += re[r].iter().sum::<f64>();
        }
    }
    let mut out: Vec<f64> = totals.iter().map(|t| t / grid as f64).collect();
    out[0] = 1.0;
    if out.iter().any(|m| !m.is_finite()) {
        return Err(TransferError::Overflow);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefactorFit {
    pub tau: f64,
    pub alpha: f64,
    pub alpha_se: f64,
    pub log_amplitude: f64,
    pub points: usize,
}

/// Least squares fit of log m(r) = log A - τ r - α log r over r in [r1, r2].
pub fn prefactor_fit(masses: &[(f64, f64)], r1: f64, r2: f64) -> Result<PrefactorFit, TransferError> {
    let pts: Vec<(f64, f64)> = masses.iter().filter(|(r, _)| *r >= r1 && *r <= r2).copied().collect();
    for &(r, m) in &pts {
        if !(m > 0.0) {
            return Err(TransferError::NonPositive(r, m));
        }
    }
    if pts.len() < 10 {
        return Err(TransferError::TooFewPoints(pts.len()));
    }
    let n = pts.len();
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => -pts[i].0,
        _ => -pts[i].0.ln(),
    });
    let y = DVector::from_fn(n, |i, _| pts[i].1.ln());
    let ata = a.transpose() * &a;
    let inv = ata
        .clone()
        .try_inverse()
        .ok_or_else(|| TransferError::Tuning("singular fit".into()))?;
    let beta = &inv * a.transpose() * &y;
    let resid = &y - &a * &beta;
    let dof = (n - 3).max(1) as f64;
    let s2 = resid.norm_squared() / dof;
    Ok(PrefactorFit {
        log_amplitude: beta[0],
        tau: beta[1],
        alpha: beta[2],
        alpha_se: (s2 * inv[(2, 2)]).max(0.0).sqrt(),
        points: n,
    })
}

/// Masses along the axis paired with their radius, ready for [`prefactor_fit`].
pub fn axis_series(masses: &[f64]) -> Vec<(f64, f64)> {
    masses.iter().enumerate().map(|(r, &m)| (r as f64, m)).collect()
}

/// Bundled cone-restricted alphabets used for the prefactor checks: d=3
/// with 7 symbols and a d=2 analogue, weights are probabilities summing to 1.
pub fn standard_alphabet(d: usize) -> Result<IrreducibleAlphabet, TransferError> {
    let (t, items): (Vec<f64>, Vec<(Vec<i64>, f64)>) = match d {
        3 => (
            vec![1.0, 0.0, 0.0],
            vec![
                (vec![1, 0, 0], 0.30),
                (vec![1, 1, 0], 0.10),
                (vec![1, -1, 0], 0.10),
                (vec![1, 0, 1], 0.10),
                (vec![1, 0, -1], 0.10),
                (vec![2, 0, 0], 0.20),
                (vec![3, 0, 0], 0.10),
            ],
        ),
        2 => (
            vec![1.0, 0.0],
            vec![
                (vec![1, 0], 0.30),
                (vec![1, 1], 0.15),
                (vec![1, -1], 0.15),
                (vec![2, 0], 0.15),
                (vec![2, 1], 0.075),
                (vec![2, -1], 0.075),
                (vec![3, 0], 0.10),
            ],
        ),
        _ => return Err(TransferError::Memory(d)),
    };
    let symbols = items
        .into_iter()
        .map(|(x, w)| Symbol {
            displacement: x,
            log_weight: f64::ln(w),
        })
        .collect();
    IrreducibleAlphabet::new(&t, symbols, Some(0.3))
}

/// |log λ(memory m) - log λ(memory 1 truncation)|.
pub fn truncation_gap(
    alphabet: &IrreducibleAlphabet,
    potential: &PotentialSpec,
    fill: usize,
) -> Result<f64, TransferError> {
    let k = alphabet.len();
    let full = leading_eig(alphabet, potential, EIG_TOL, EIG_ITER)?.lambda.ln();
    let cut = leading_eig(alphabet, &potential.truncate(k, 1, fill), EIG_TOL, EIG_ITER)?
        .lambda
        .ln();
    Ok((full - cut).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha(xs: &[(Vec<i64>, f64)]) -> IrreducibleAlphabet {
        let d = xs[0].0.len();
        let mut t = vec![0.0; d];
        t[0] = 1.0;
        let syms = xs
            .iter()
            .map(|(x, w)| Symbol {
                displacement: x.clone(),
                log_weight: *w,
            })
            .collect();
        IrreducibleAlphabet::new(&t, syms, None).unwrap()
    }

    #[test]
    fn ruelle_examples() {
        let a = alpha(&[(vec![1, 0], 0.1f64.ln()), (vec![1, 1], 0.2f64.ln())]);
        let lf = ruelle_apply(&[1.0], &a, &a.potential()).unwrap();
        assert!((lf[0] - 0.3).abs() < 1e-15);
        let one = alpha(&[(vec![1, 0], -0.7)]);
        let lf = ruelle_apply(&[2.0], &one, &one.potential()).unwrap();
        assert!((lf[0] - 2.0 * (-0.7f64).exp()).abs() < 1e-15);
        let p = PotentialSpec::memory2(&[vec![0.0, 0.0], vec![0.0, f64::NEG_INFINITY]], vec![0.0, 0.0]);
        let lf = ruelle_apply(&[3.0, 5.0], &a, &p).unwrap();
        assert_eq!(lf, vec![8.0, 3.0]);
    }

    #[test]
    fn eig_examples() {
        let a = alpha(&[(vec![1, 0], 0.1f64.ln()), (vec![1, 1], 0.2f64.ln())]);
        let e = leading_eig(&a, &a.potential(), 1e-13, 1000).unwrap();
        assert!((e.lambda - 0.3).abs() < 1e-12);
        let p = PotentialSpec::memory2(&[vec![0.0, 0.0], vec![0.0, f64::NEG_INFINITY]], vec![0.0, 0.0]);
        let e = leading_eig(&a, &p, 1e-13, 10_000).unwrap();
        assert!((e.lambda - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!((e.measure.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((e.h.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-15);
        let ninf = f64::NEG_INFINITY;
        let block = PotentialSpec::memory2(&[vec![0.0, ninf], vec![ninf, 0.0]], vec![0.0, 0.0]);
        assert!(matches!(
            leading_eig(&a, &block, 1e-13, 1000),
            Err(TransferError::Degenerate(_))
        ));
        let uneven = PotentialSpec::memory2(&[vec![1.0, ninf], vec![ninf, 0.0]], vec![0.0, 0.0]);
        assert_eq!(
            leading_eig(&a, &uneven, 1e-13, 1000).unwrap_err(),
            TransferError::Reducible
        );
    }

    #[test]
    fn tilt_examples() {
        let a = alpha(&[(vec![1, 0], 0.1f64.ln()), (vec![1, 1], 0.2f64.ln())]);
        assert_eq!(tilt(&a, &a.potential(), &[0.0, 0.0]).unwrap(), a.potential());
        let v = [0.3, -0.4];
        let t = tilt(&a, &a.potential(), &v).unwrap();
        assert!((t.table[1] - (0.2f64.ln() - 0.1)).abs() < 1e-15);
        let one = alpha(&[(vec![2, 1], -0.5)]);
        let ll = log_lambda(&one, &one.potential(), &v).unwrap();
        assert!((ll - (0.6 - 0.4 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn renewal_examples() {
        let w = 0.6f64;
        let one = alpha(&[(vec![1, 0], w.ln())]);
        let t = renewal_mass(&one, &one.potential(), &[0.0, 0.0], 10.0).unwrap();
        assert_eq!(t.get(&[0, 0]), 1.0);
        for n in 1..=10 {
            assert!((t.get(&[n, 0]) - w.powi(n as i32)).abs() < 1e-15);
        }
        let (w1, w2) = (0.3f64, 0.25f64);
        let two = alpha(&[(vec![1, 0], w1.ln()), (vec![1, 1], w2.ln())]);
        let t = renewal_mass(&two, &two.potential(), &[0.0, 0.0], 12.0).unwrap();
        let binom = |n: i64, k: i64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
        for a in 1..=12i64 {
            for b in 0..=a {
                let want = binom(a, b) * w1.powi((a - b) as i32) * w2.powi(b as i32);
                assert!((t.get(&[a, b]) - want).abs() <= 1e-13 * want);
            }
        }
        let v = [0.2, -0.3];
        let tv = renewal_mass(&two, &two.potential(), &v, 12.0).unwrap();
        for (x, m) in &t.mass {
            let f = (v[0] * x[0] as f64 + v[1] * x[1] as f64).exp();
            assert!((tv.get(x) - f * m).abs() <= 1e-12 * f * m);
        }
    }

    #[test]
    fn axis_transform_matches_direct_dp() {
        for d in [2, 3] {
            let a = standard_alphabet(d).unwrap();
            let v = vec![0.0; d];
            let direct = renewal_mass(&a, &a.potential(), &v, 12.0).unwrap();
            let axis = renewal_mass_on_axis(&a, &a.potential(), &v, 12).unwrap();
            for (r, m) in axis.iter().enumerate() {
                let mut x = vec![0; d];
                x[0] = r as i64;
                assert!((direct.get(&x) - m).abs() < 1e-12, "d={d} r={r}");
            }
        }
    }

    #[test]
    fn fit_synthetic() {
        let pts: Vec<(f64, f64)> = (10..=60)
            .map(|r| (r as f64, (r as f64).powi(-1) * (-0.5 * r as f64).exp()))
            .collect();
        let f = prefactor_fit(&pts, 10.0, 60.0).unwrap();
        assert!((f.tau - 0.5).abs() < 1e-6 && (f.alpha - 1.0).abs() < 1e-6);
        assert!(prefactor_fit(&pts[..5], 0.0, 100.0).is_err());
    }

    #[test]
    fn memory2_holder() {
        let a = standard_alphabet(2).unwrap();
        let k = a.len();
        let base = a.potential();
        let xi: Vec<Vec<f64>> = (0..k)
            .map(|s| (0..k).map(|b| base.table[s] + 0.01 * ((s + b) % 3) as f64).collect())
            .collect();
        let p = PotentialSpec::memory2(&xi, base.table.clone());
        assert!(p.holder_ok(k, 0.5, 0.02));
        assert!(!p.holder_ok(k, 0.5, 0.01));
        let gap = truncation_gap(&a, &p, 0).unwrap();
        assert!(gap <= p.variation(k, 1));
    }
}
