//! Markov chains for the random-cluster measure and the statistics used on their output.
//!
//! q = 1 draws independent bonds, integer q > 1 uses Swendsen–Wang and
//! other real q > 1 uses Chayes–Machta. Both cluster moves act on the
//! graph produced by [`RcGraph::from_box`], so wired and pinned boundaries
//! are handled by the fixed identifications.

use crate::lattice::LatticeSpec;
use crate::rc_measure::{BondConfig, BoundaryCondition, RCParams, RcError, RcGraph};
use crate::union_find::UnionFind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Name of the generator, as written to run manifests.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.3), seed_from_u64, stream = cell index";

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Rc(#[from] RcError),
    #[error("at least one sweep is required")]
    NoSweeps,
    #[error("at least one sample is required")]
    NoSamples,
    #[error("diagnostics need at least {need} recorded sweeps, got {got}")]
    ShortHistory { need: usize, got: usize },
    #[error("Swendsen-Wang needs integer q, got {0}")]
    NonIntegerQ(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Algorithm {
    Bernoulli,
    SwendsenWang,
    ChayesMachta,
}

impl Algorithm {
    pub fn for_q(q: f64) -> Self {
        if q == 1.0 {
            Algorithm::Bernoulli
        } else if q.fract() == 0.0 {
            Algorithm::SwendsenWang
        } else {
            Algorithm::ChayesMachta
        }
    }
}

/// Deterministic generator for a (master seed, stream) pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Current bond configuration, its components and the generator state.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub graph: RcGraph,
    pub params: RCParams,
    pub algorithm: Algorithm,
    pub config: Vec<bool>,
    pub sweeps: u64,
    uf: UnionFind,
    rng: ChaCha8Rng,
    mark: Vec<u32>,
}

impl ChainState {
    /// A chain started from the all-closed configuration.
    pub fn new(graph: RcGraph, params: RCParams, seed: u64) -> Self {
        Self::with_algorithm(graph, params, seed, Algorithm::for_q(params.q)).expect("algorithm chosen from q")
    }

    pub fn with_algorithm(
        graph: RcGraph,
        params: RCParams,
        seed: u64,
        algorithm: Algorithm,
    ) -> Result<Self, SamplerError> {
        if algorithm == Algorithm::SwendsenWang && params.q.fract() != 0.0 {
            return Err(SamplerError::NonIntegerQ(params.q));
        }
        if algorithm == Algorithm::Bernoulli && params.q != 1.0 {
            return Err(SamplerError::Rc(RcError::BadQ(params.q)));
        }
        let m = graph.m();
        let n = graph.n;
        let mut s = ChainState {
            uf: UnionFind::new(n),
            config: vec![false; m],
            graph,
            params,
            algorithm,
            sweeps: 0,
            rng: rng_for(seed, 0),
            mark: vec![0; n],
        };
        s.relabel();
        Ok(s)
    }

    fn relabel(&mut self) {
        let cfg = &self.config;
        self.graph.components_with(|i| cfg[i], &mut self.uf);
    }

    /// Replaces the generator with stream `stream` of `seed`.
    pub fn with_stream(mut self, seed: u64, stream: u64) -> Self {
        self.rng = rng_for(seed, stream);
        self
    }

    pub fn sweep(&mut self) {
        let p = self.params.p;
        match self.algorithm {
            Algorithm::Bernoulli => {
                for b in self.config.iter_mut() {
                    *b = self.rng.gen::<f64>() < p;
                }
            }
            Algorithm::SwendsenWang => {
                let q = self.params.q as u32;
                for v in 0..self.graph.n {
                    if self.uf.find(v) == v {
                        self.mark[v] = self.rng.gen_range(0..q);
                    }
                }
                for (i, &(a, b)) in self.graph.edges.iter().enumerate() {
                    let (ra, rb) = (self.uf.find(a as usize), self.uf.find(b as usize));
                    self.config[i] = self.mark[ra] == self.mark[rb] && self.rng.gen::<f64>() < p;
                }
            }
            Algorithm::ChayesMachta => {
                let active = 1.0 / self.params.q;
                for v in 0..self.graph.n {
                    if self.uf.find(v) == v {
                        self.mark[v] = (self.rng.gen::<f64>() < active) as u32;
                    }
                }
                for (i, &(a, b)) in self.graph.edges.iter().enumerate() {
                    let (ra, rb) = (self.uf.find(a as usize), self.uf.find(b as usize));
                    if self.mark[ra] == 1 && self.mark[rb] == 1 {
                        self.config[i] = self.rng.gen::<f64>() < p;
                    }
                }
            }
        }
        self.sweeps += 1;
        self.relabel();
    }

    pub fn run(&mut self, sweeps: u64) {
        for _ in 0..sweeps {
            self.sweep();
        }
    }

    pub fn bond_config(&self) -> BondConfig {
        BondConfig {
            open: self.config.clone(),
        }
    }

    /// Configuration as a bit mask; only for graphs with at most 64 edges.
    pub fn mask(&self) -> u64 {
        assert!(self.config.len() <= 64);
        self.config
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (b as u64) << i)
    }

    /// Component union-find consistent with the current configuration.
    pub fn components(&mut self) -> &mut UnionFind {
        &mut self.uf
    }

    pub fn labels(&mut self) -> Vec<usize> {
        self.uf.labels()
    }
}

/// Runs `sweeps` sweeps on the box from a fixed start and returns the state.
pub fn sample_config(
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
    sweeps: u64,
    seed: u64,
) -> Result<ChainState, SamplerError> {
    if sweeps == 0 {
        return Err(SamplerError::NoSweeps);
    }
    let g = RcGraph::from_box(spec, bc)?;
    let mut s = ChainState::new(g, *params, seed);
    s.run(sweeps);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
    pub batches: usize,
    pub batch_variance: f64,
}

/// Number of batches used for batch-means errors.
pub const BATCHES: usize = 25;

/// Mean and batch-means standard error of a stream.
pub fn batch_means(xs: &[f64]) -> EstimateWithCI {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
    let b = if n >= 2 * BATCHES { BATCHES } else { n };
    if b < 2 {
        return EstimateWithCI {
            estimate: mean,
            stderr: 0.0,
            samples: n,
            batches: b,
            batch_variance: 0.0,
        };
    }
    let size = n / b;
    let means: Vec<f64> = (0..b)
        .map(|k| xs[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (b - 1) as f64;
    EstimateWithCI {
        estimate: mean,
        stderr: (var / b as f64).sqrt(),
        samples: n,
        batches: b,
        batch_variance: var,
    }
}

/// Frequency of every configuration of a graph with at most 16 edges over
/// `sweeps` measurements, with batch-means errors from `batches` batches.
pub fn mask_frequencies(
    chain: &mut ChainState,
    sweeps: usize,
    batches: usize,
) -> Result<Vec<EstimateWithCI>, SamplerError> {
    let m = chain.graph.m();
    if m > 16 {
        return Err(SamplerError::Rc(RcError::TooManyEdges(m)));
    }
    if sweeps < batches || batches < 2 {
        return Err(SamplerError::NoSamples);
    }
    let size = sweeps / batches;
    let mut counts = vec![vec![0u64; batches]; 1 << m];
    for b in 0..batches {
        for _ in 0..size {
            chain.sweep();
            counts[chain.mask() as usize][b] += 1;
        }
    }
    let n = (size * batches) as f64;
    Ok(counts
        .iter()
        .map(|c| {
            let means: Vec<f64> = c.iter().map(|&k| k as f64 / size as f64).collect();
            let mean = c.iter().sum::<u64>() as f64 / n;
            let var = means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (batches - 1) as f64;
            EstimateWithCI {
                estimate: mean,
                stderr: (var / batches as f64).sqrt(),
                samples: size * batches,
                batches,
                batch_variance: var,
            }
        })
        .collect())
}

/// Sweeps discarded before measuring when the chain is not exact.
pub const BURN_IN: u64 = 100;

/// Frequency of `event` along a chain, one measurement every `thinning` sweeps.
pub fn mc_estimate(
    event: impl Fn(&mut ChainState) -> bool,
    spec: &LatticeSpec,
    params: &RCParams,
    bc: &BoundaryCondition,
    n_samples: usize,
    thinning: u64,
    seed: u64,
) -> Result<EstimateWithCI, SamplerError> {
    if n_samples == 0 {
        return Err(SamplerError::NoSamples);
    }
    let g = RcGraph::from_box(spec, bc)?;
    let mut s = ChainState::new(g, *params, seed);
    if s.algorithm != Algorithm::Bernoulli {
        s.run(BURN_IN);
    }
    let mut xs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        s.run(thinning.max(1));
        xs.push(event(&mut s) as u8 as f64);
    }
    Ok(batch_means(&xs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub tau_int: f64,
    pub window: usize,
    pub degenerate: bool,
    /// τ exceeds history/50, so the run is too short to trust.
    pub too_correlated: bool,
}

pub const MIN_HISTORY: usize = 100;

/// Integrated autocorrelation time with automatic windowing (window >= 5τ),
/// floored at 1.
pub fn chain_diagnostics(history: &[f64]) -> Result<Diagnostics, SamplerError> {
    let n = history.len();
    if n < MIN_HISTORY {
        return Err(SamplerError::ShortHistory {
            need: MIN_HISTORY,
            got: n,
        });
    }
    let mean = history.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = history.iter().map(|x| x - mean).collect();
    let c0 = dev.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if c0 <= 1e-300 {
        return Ok(Diagnostics {
            tau_int: 1.0,
            window: 0,
            degenerate: true,
            too_correlated: false,
        });
    }
    let mut tau = 1.0;
    let mut window = 0;
    for t in 1..n / 2 {
        let ct = dev[..n - t].iter().zip(&dev[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        tau += 2.0 * ct / c0;
        window = t;
        if t as f64 >= 5.0 * tau {
            break;
        }
    }
    let tau = tau.max(1.0);
    Ok(Diagnostics {
        tau_int: tau,
        window,
        degenerate: false,
        too_correlated: tau > n as f64 / 50.0,
    })
}

/// Diagnostics for each observable recorded side by side.
pub fn chain_diagnostics_multi(histories: &[Vec<f64>]) -> Result<Vec<Diagnostics>, SamplerError> {
    histories.iter().map(|h| chain_diagnostics(h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism() {
        let s = LatticeSpec::cube(2, 4).unwrap();
        let pr = RCParams::new(2.5, 0.6).unwrap();
        let a = sample_config(&s, &pr, &BoundaryCondition::Free, 30, 11).unwrap();
        let b = sample_config(&s, &pr, &BoundaryCondition::Free, 30, 11).unwrap();
        let c = sample_config(&s, &pr, &BoundaryCondition::Free, 30, 12).unwrap();
        assert_eq!(a.config, b.config);
        assert_ne!(a.config, c.config);
    }

    #[test]
    fn labels_match_config() {
        let s = LatticeSpec::cube(3, 4).unwrap();
        let pr = RCParams::new(2.0, 0.4).unwrap();
        let mut st = sample_config(&s, &pr, &BoundaryCondition::Wired, 5, 3).unwrap();
        let labels = st.labels();
        let mut uf = UnionFind::new(st.graph.n);
        let cfg = st.config.clone();
        st.graph.components_with(|i| cfg[i], &mut uf);
        assert_eq!(labels, uf.labels());
    }

    #[test]
    fn trivial_events() {
        let s = LatticeSpec::cube(2, 2).unwrap();
        let pr = RCParams::new(2.0, 0.6).unwrap();
        let no = mc_estimate(|_| false, &s, &pr, &BoundaryCondition::Free, 200, 1, 1).unwrap();
        assert_eq!((no.estimate, no.stderr), (0.0, 0.0));
        let yes = mc_estimate(|_| true, &s, &pr, &BoundaryCondition::Free, 200, 1, 1).unwrap();
        assert_eq!(yes.estimate, 1.0);
    }

    #[test]
    fn bernoulli_marginal() {
        let s = LatticeSpec::rect(vec![2, 1]).unwrap();
        let pr = RCParams::new(1.0, 0.7).unwrap();
        let e = mc_estimate(|st| st.config[0], &s, &pr, &BoundaryCondition::Free, 20000, 1, 5).unwrap();
        assert!((e.estimate - 0.7).abs() < 4.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn diagnostics_rules() {
        let mut r = rng_for(9, 0);
        let iid: Vec<f64> = (0..20000).map(|_| r.gen::<f64>()).collect();
        let d = chain_diagnostics(&iid).unwrap();
        assert!((d.tau_int - 1.0).abs() < 0.2, "{d:?}");
        assert!(chain_diagnostics(&[1.0; 500]).unwrap().degenerate);
        let alt: Vec<f64> = (0..500).map(|i| (i % 2) as f64).collect();
        assert_eq!(chain_diagnostics(&alt).unwrap().tau_int, 1.0);
        assert!(chain_diagnostics(&iid[..50]).is_err());
    }

    #[test]
    fn rejects_bad_requests() {
        let s = LatticeSpec::cube(2, 2).unwrap();
        let pr = RCParams::new(2.0, 0.6).unwrap();
        assert_eq!(
            sample_config(&s, &pr, &BoundaryCondition::Free, 0, 1).unwrap_err(),
            SamplerError::NoSweeps
        );
        let g = RcGraph::from_box(&s, &BoundaryCondition::Free).unwrap();
        let pr15 = RCParams::new(1.5, 0.6).unwrap();
        assert!(ChainState::with_algorithm(g, pr15, 1, Algorithm::SwendsenWang).is_err());
    }
}
