//! Experiment runner behind the `ozlab` binary: configuration files, one job
//! per subcommand, run directories with manifests, and reports.
//!
//! Randomness: every job draws from the master seed only. Cell k (an event
//! batch, a chain, a direction) uses ChaCha8 stream k of that seed; the
//! streams used are listed in the manifest.

use crate::cluster_geometry::{decomposition_batch, ClusterRecord};
use crate::estimator::{
    convexity_curvature_check, equidecay_surface, finite_two_point_multi, supermultiplicativity_check, tau_fit,
    DEFAULT_MARGIN,
};
use crate::lattice::{norm, unit, LatticeSpec};
use crate::polymer::{
    inversion_check, p0_threshold, plaquette_kp, polymer_census, random_model, PlaquetteKpReport, ENUM_MAX_SIZE,
};
use crate::rc_measure::{
    check_fkg, check_order_inequalities, BoundaryCondition, EventTable, RCParams, RcGraph, ENUM_CAP,
};
use crate::sampler::{
    batch_means, chain_diagnostics, mask_frequencies, rng_for, Algorithm, ChainState, BURN_IN, RNG_NAME,
};
use crate::transfer_op::{axis_series, prefactor_fit, renewal_mass_on_axis, tune_tilt, IrreducibleAlphabet};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.txt";
pub const SUMMARY: &str = "summary.json";

const BUNDLED_D2: &str = include_str!("../data/alphabet_d2.json");
const BUNDLED_D3: &str = include_str!("../data/alphabet_d3.json");

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "ozlab",
    version,
    about = "Random-cluster experiments: enumeration, sampling, decomposition, polymers, transfer operators, fits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Exact inequality checks on small boxes
    Enumerate(RunArgs),
    /// Markov chain sampling with diagnostics and cluster dumps
    Sample(RunArgs),
    /// Irreducible decomposition of sampled finite clusters
    Decompose(RunArgs),
    /// Polymer census, KP checks and cluster-expansion inversion
    Polymer(RunArgs),
    /// Renewal masses and prefactor fit for an alphabet
    Transfer(RunArgs),
    /// Two-point function estimates and τ fits
    Fit(RunArgs),
    /// Summarize a finished run directory
    Report { dir: PathBuf },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Job {
    Enumerate,
    Sample,
    Decompose,
    Polymer,
    Transfer,
    Fit,
}

impl Job {
    pub fn name(self) -> &'static str {
        match self {
            Job::Enumerate => "enumerate",
            Job::Sample => "sample",
            Job::Decompose => "decompose",
            Job::Polymer => "polymer",
            Job::Transfer => "transfer",
            Job::Fit => "fit",
        }
    }

    /// Module that produces the data files.
    fn module(self) -> &'static str {
        match self {
            Job::Enumerate => "rc_measure",
            Job::Sample => "sampler",
            Job::Decompose => "cluster_geometry",
            Job::Polymer => "polymer",
            Job::Transfer => "transfer_op",
            Job::Fit => "estimator",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Job::Enumerate => &["d", "l", "dims", "q", "p", "events", "pairs", "supermult_pairs", "tol"],
            Job::Sample => &[
                "d",
                "l",
                "dims",
                "q",
                "p",
                "bc",
                "algorithm",
                "sweeps",
                "burn_in",
                "dump_every",
                "dump_max",
                "batches",
            ],
            Job::Decompose => &[
                "d",
                "l",
                "dims",
                "q",
                "p",
                "bc",
                "t",
                "eps",
                "clusters",
                "max_sweeps",
                "dump",
            ],
            Job::Polymer => &[
                "d",
                "max_size",
                "q",
                "p",
                "c3",
                "c8",
                "models",
                "max_polymers",
                "max_activity",
                "density",
            ],
            Job::Transfer => &["alphabet", "d", "eps", "r_max", "r1", "r2"],
            Job::Fit => &["d", "q", "p", "bc", "directions", "r_max", "samples", "margin", "alpha"],
        }
    }
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Parsed configuration: flat `key = value` lines, or a flat JSON object.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    entries: Vec<Entry>,
}

fn json_scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn json_value(v: &Value) -> Option<String> {
    match v {
        Value::Array(items) => {
            let nested = items.iter().any(|x| x.is_array());
            let parts: Option<Vec<String>> = items
                .iter()
                .map(|x| match x {
                    Value::Array(inner) => inner
                        .iter()
                        .map(json_scalar)
                        .collect::<Option<Vec<_>>>()
                        .map(|v| v.join(",")),
                    _ => json_scalar(x),
                })
                .collect();
            parts.map(|p| p.join(if nested { ";" } else { "," }))
        }
        _ => json_scalar(v),
    }
}

pub fn parse_config(text: &str) -> Result<RawConfig, CliError> {
    let mut entries: Vec<Entry> = Vec::new();
    let mut push = |key: String, value: String, line: usize| {
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(invalid(format!(
                "line {line}: key `{key}` already set on line {}",
                prev.line
            )));
        }
        entries.push(Entry { key, value, line });
        Ok(())
    };
    if text.trim_start().starts_with('{') {
        let obj: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| invalid(format!("line {}: invalid JSON config: {e}", e.line())))?;
        for (k, v) in &obj {
            let line = text
                .lines()
                .position(|l| l.contains(&format!("\"{k}\"")))
                .map_or(1, |i| i + 1);
            let value = json_value(v)
                .ok_or_else(|| invalid(format!("line {line}: key `{k}`: nested objects are not supported")))?;
            push(k.clone(), value, line)?;
        }
        entries.sort_by_key(|e| e.line);
    } else {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {line}: expected `key = value`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(invalid(format!("line {line}: empty key")));
            }
            push(k.to_string(), v.trim().to_string(), line)?;
        }
    }
    Ok(RawConfig { entries })
}

/// Typed access that records every effective value, defaults included.
struct Reader<'a> {
    raw: &'a RawConfig,
    snapshot: BTreeMap<String, String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig, allowed: &[&str]) -> Result<Self, CliError> {
        for e in &raw.entries {
            if e.key != "seed" && e.key != "out" && !allowed.contains(&e.key.as_str()) {
                return Err(invalid(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        Ok(Reader {
            raw,
            snapshot: BTreeMap::new(),
        })
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.raw.entries.iter().find(|e| e.key == key)
    }

    fn fail(&self, key: &str, msg: impl Display) -> CliError {
        match self.entry(key) {
            Some(e) => invalid(format!("line {}: key `{key}`: {msg}", e.line)),
            None => invalid(format!("key `{key}`: {msg}")),
        }
    }

    fn parse<T: FromStr>(&self, key: &str, s: &str) -> Result<T, CliError> {
        s.trim()
            .parse()
            .map_err(|_| self.fail(key, format!("cannot parse `{s}`")))
    }

    fn has(&self, key: &str) -> bool {
        self.entry(key).is_some()
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        match self.entry(key).map(|e| e.value.clone()) {
            Some(v) => {
                let t = self.parse(key, &v)?;
                self.snapshot.insert(key.into(), v);
                Ok(Some(t))
            }
            None => Ok(None),
        }
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T, CliError> {
        self.opt(key)?
            .ok_or_else(|| invalid(format!("missing required key `{key}`")))
    }

    fn or<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.opt(key)? {
            Some(v) => Ok(v),
            None => {
                self.snapshot.insert(key.into(), default.to_string());
                Ok(default)
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: &str) -> Result<Vec<T>, CliError> {
        let v = self.entry(key).map_or(default.to_string(), |e| e.value.clone());
        let out = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| self.parse(key, s))
            .collect::<Result<Vec<T>, _>>()?;
        self.snapshot.insert(key.into(), v);
        Ok(out)
    }

    fn vectors(&mut self, key: &str, default: &str) -> Result<Vec<Vec<i64>>, CliError> {
        let v = self.entry(key).map_or(default.to_string(), |e| e.value.clone());
        let out = v
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|part| {
                part.split(',')
                    .map(|s| self.parse(key, s))
                    .collect::<Result<Vec<i64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.snapshot.insert(key.into(), v);
        Ok(out)
    }

    fn check(&self, key: &str, ok: bool, msg: &str) -> Result<(), CliError> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(key, msg))
        }
    }

    fn params(&mut self) -> Result<RCParams, CliError> {
        let q = self.req("q")?;
        let p = self.req("p")?;
        RCParams::new(q, p).map_err(|e| self.fail("p", e))
    }

    fn lattice(&mut self) -> Result<LatticeSpec, CliError> {
        if self.has("dims") {
            let dims: Vec<usize> = self.list("dims", "")?;
            return LatticeSpec::rect(dims).map_err(|e| self.fail("dims", e));
        }
        let d = self.req("d")?;
        let l = self.req("l")?;
        LatticeSpec::cube(d, l).map_err(|e| self.fail("l", e))
    }

    fn bc(&mut self) -> Result<BoundaryCondition, CliError> {
        match self.or("bc", "free".to_string())?.as_str() {
            "free" => Ok(BoundaryCondition::Free),
            "wired" => Ok(BoundaryCondition::Wired),
            other => Err(self.fail("bc", format!("expected free or wired, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnumerateConfig {
    pub spec: LatticeSpec,
    pub params: RCParams,
    pub events: usize,
    pub pairs: usize,
    pub supermult_pairs: usize,
    pub tol: f64,
}

#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub spec: LatticeSpec,
    pub params: RCParams,
    pub bc: BoundaryCondition,
    pub algorithm: Algorithm,
    pub sweeps: usize,
    pub burn_in: u64,
    pub dump_every: usize,
    pub dump_max: usize,
    pub batches: usize,
}

#[derive(Clone, Debug)]
pub struct DecomposeConfig {
    pub spec: LatticeSpec,
    pub params: RCParams,
    pub bc: BoundaryCondition,
    pub t: Vec<f64>,
    pub eps: Vec<f64>,
    pub clusters: usize,
    pub max_sweeps: u64,
    pub dump: bool,
}

#[derive(Clone, Debug)]
pub struct PolymerConfig {
    pub d: usize,
    pub max_size: usize,
    pub q: f64,
    pub ps: Vec<RCParams>,
    pub c3: Option<f64>,
    pub c8: Vec<f64>,
    pub models: usize,
    pub max_polymers: usize,
    pub max_activity: f64,
    pub density: f64,
}

#[derive(Clone, Debug)]
pub struct TransferConfig {
    pub alphabet: IrreducibleAlphabet,
    pub source: String,
    pub r_max: usize,
    pub r1: f64,
    pub r2: f64,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub d: usize,
    pub params: RCParams,
    pub bc: BoundaryCondition,
    pub directions: Vec<Vec<i64>>,
    pub r_max: i64,
    pub samples: usize,
    pub margin: usize,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum JobConfig {
    Enumerate(EnumerateConfig),
    Sample(SampleConfig),
    Decompose(DecomposeConfig),
    Polymer(PolymerConfig),
    Transfer(TransferConfig),
    Fit(FitConfig),
}

/// A validated configuration with its effective key/value snapshot.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub job: Job,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub config: JobConfig,
    pub snapshot: BTreeMap<String, String>,
}

/// Parses and validates a configuration for `job`. Nothing runs before this succeeds.
pub fn load_config(
    job: Job,
    text: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, CliError> {
    let raw = parse_config(text)?;
    let mut r = Reader::new(&raw, job.keys())?;
    let file_seed: Option<u64> = r.opt("seed")?;
    let seed = seed.or(file_seed).unwrap_or(0);
    r.snapshot.insert("seed".into(), seed.to_string());
    let file_out: Option<String> = r.opt("out")?;
    let out = out.or(file_out.map(PathBuf::from));
    let config = match job {
        Job::Enumerate => {
            let spec = r.lattice()?;
            let params = r.params()?;
            let m = spec.edges().len();
            r.check("dims", m <= ENUM_CAP, "box has too many edges to enumerate")?;
            let events = r.or("events", 50)?;
            let pairs = r.or("pairs", 50)?;
            let supermult_pairs = r.or("supermult_pairs", 0)?;
            if supermult_pairs > 0 {
                let g = crate::estimator::pendant_shell_graph(&spec);
                r.check(
                    "supermult_pairs",
                    g.m() <= ENUM_CAP,
                    "box with pendant shell is too large to enumerate",
                )?;
            }
            let tol = r.or("tol", 1e-12)?;
            r.check("tol", tol >= 0.0, "must be nonnegative")?;
            JobConfig::Enumerate(EnumerateConfig {
                spec,
                params,
                events,
                pairs,
                supermult_pairs,
                tol,
            })
        }
        Job::Sample => {
            let spec = r.lattice()?;
            let params = r.params()?;
            let bc = r.bc()?;
            let algorithm = match r.or("algorithm", "auto".to_string())?.as_str() {
                "auto" => Algorithm::for_q(params.q),
                "sw" => Algorithm::SwendsenWang,
                "cm" => Algorithm::ChayesMachta,
                "bernoulli" => Algorithm::Bernoulli,
                other => {
                    return Err(r.fail(
                        "algorithm",
                        format!("expected auto, sw, cm or bernoulli, got `{other}`"),
                    ))
                }
            };
            ChainState::with_algorithm(RcGraph::from_box(&spec, &bc).map_err(invalid)?, params, 0, algorithm)
                .map_err(|e| r.fail("algorithm", e))?;
            let sweeps = r.req("sweeps")?;
            r.check(
                "sweeps",
                (100..=10_000_000).contains(&sweeps),
                "must be in 100..=10000000",
            )?;
            let batches = r.or("batches", 100)?;
            r.check("batches", batches >= 2 && batches <= sweeps, "must be in 2..=sweeps")?;
            let burn_in = r.or("burn_in", BURN_IN)?;
            let dump_every = r.or("dump_every", 0)?;
            let dump_max = r.or("dump_max", 100)?;
            JobConfig::Sample(SampleConfig {
                spec,
                params,
                bc,
                algorithm,
                sweeps,
                burn_in,
                dump_every,
                dump_max,
                batches,
            })
        }
        Job::Decompose => {
            let spec = r.lattice()?;
            let params = r.params()?;
            let bc = r.bc()?;
            let d = spec.d();
            let mut default_t = vec!["0"; d];
            default_t[0] = "1";
            let t: Vec<f64> = r.list("t", &default_t.join(","))?;
            r.check(
                "t",
                t.len() == d && unit(&t).is_ok(),
                "must be a nonzero vector of the box dimension",
            )?;
            let eps: Vec<f64> = r.list("eps", "0.2,0.4,0.6,0.8")?;
            r.check(
                "eps",
                !eps.is_empty() && eps.windows(2).all(|w| w[0] < w[1]) && eps.iter().all(|&e| e > 0.0 && e < 1.0),
                "must be increasing values in (0,1)",
            )?;
            let clusters = r.req("clusters")?;
            let max_sweeps = r.or("max_sweeps", 1_000_000)?;
            let dump = r.or("dump", false)?;
            JobConfig::Decompose(DecomposeConfig {
                spec,
                params,
                bc,
                t,
                eps,
                clusters,
                max_sweeps,
                dump,
            })
        }
        Job::Polymer => {
            let d = r.or("d", 3)?;
            r.check("d", (2..=4).contains(&d), "must be 2, 3 or 4")?;
            let max_size = r.or("max_size", 6)?;
            r.check("max_size", (3..=ENUM_MAX_SIZE).contains(&max_size), "must be in 3..=8")?;
            let q: f64 = r.req("q")?;
            let plist: Vec<f64> = r.list("p", "")?;
            r.check("p", !plist.is_empty(), "need at least one value")?;
            let ps = plist
                .iter()
                .map(|&p| RCParams::new(q, p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| r.fail("p", e))?;
            let c3 = r.opt("c3")?;
            r.check("c3", c3.map_or(true, |c: f64| c > 0.0), "must be positive")?;
            let grid: Vec<String> = (1..=40).map(|k| format!("{}", (k * 25) as f64 / 1000.0)).collect();
            let c8: Vec<f64> = r.list("c8", &grid.join(","))?;
            r.check(
                "c8",
                !c8.is_empty() && c8.iter().all(|&c| c > 0.0),
                "must be positive values",
            )?;
            let models = r.or("models", 1000)?;
            let max_polymers = r.or("max_polymers", 12)?;
            r.check(
                "max_polymers",
                (1..=crate::polymer::CLUSTER_CAP).contains(&max_polymers),
                "must be in 1..=12",
            )?;
            let max_activity = r.or("max_activity", 0.3)?;
            r.check("max_activity", max_activity >= 0.0, "must be nonnegative")?;
            let density = r.or("density", 0.3)?;
            r.check("density", (0.0..=1.0).contains(&density), "must be in [0,1]")?;
            JobConfig::Polymer(PolymerConfig {
                d,
                max_size,
                q,
                ps,
                c3,
                c8,
                models,
                max_polymers,
                max_activity,
                density,
            })
        }
        Job::Transfer => {
            let source = r.or("alphabet", "bundled".to_string())?;
            let eps: Option<f64> = r.opt("eps")?;
            let text = if source == "bundled" {
                match r.or("d", 3usize)? {
                    2 => BUNDLED_D2.to_string(),
                    3 => BUNDLED_D3.to_string(),
                    _ => return Err(r.fail("d", "bundled alphabets exist for d = 2 and 3")),
                }
            } else {
                fs::read_to_string(&source).map_err(|e| r.fail("alphabet", format!("cannot read `{source}`: {e}")))?
            };
            let alphabet = IrreducibleAlphabet::from_json(&text, eps).map_err(|e| r.fail("alphabet", e))?;
            let r_max = r.or("r_max", 200)?;
            let r1 = r.or("r1", 50.0)?;
            let r2 = r.or("r2", r_max as f64)?;
            r.check("r2", r1 < r2 && r2 <= r_max as f64, "need r1 < r2 <= r_max")?;
            JobConfig::Transfer(TransferConfig {
                alphabet,
                source,
                r_max,
                r1,
                r2,
            })
        }
        Job::Fit => {
            let d = r.req("d")?;
            r.check("d", (1..=4).contains(&d), "must be in 1..=4")?;
            let params = r.params()?;
            let bc = r.bc()?;
            let mut e1 = vec!["0"; d];
            e1[0] = "1";
            let directions = r.vectors("directions", &e1.join(","))?;
            r.check(
                "directions",
                directions.iter().all(|v| v.len() == d && v.iter().any(|&c| c != 0)),
                "each direction must be a nonzero integer vector of dimension d",
            )?;
            let r_max = r.or("r_max", 6)?;
            r.check("r_max", r_max >= 4, "need at least 4 radii")?;
            let samples = r.req("samples")?;
            r.check("samples", samples >= 50, "need at least 50 samples")?;
            let margin = r.or("margin", DEFAULT_MARGIN)?;
            let alpha = r.opt("alpha")?;
            JobConfig::Fit(FitConfig {
                d,
                params,
                bc,
                directions,
                r_max,
                samples,
                margin,
                alpha,
            })
        }
    };
    Ok(ExperimentConfig {
        job,
        seed,
        out,
        config,
        snapshot: r.snapshot,
    })
}

// ---------------------------------------------------------------- outputs

/// Files written by one run; removed again if the run fails.
struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
    producer: String,
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn fmt_v<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl RunDir {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn track(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            return Err(runtime(format!("refusing to overwrite {}", p.display())));
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    /// CSV with a comment line naming the producer and units, then a header row.
    fn csv(&mut self, name: &str, units: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
        let p = self.track(name)?;
        let mut buf = format!("# producer={}; units: {units}\n", self.producer).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header).map_err(runtime)?;
            for row in rows {
                w.write_record(&row).map_err(runtime)?;
            }
            w.flush().map_err(runtime)?;
        }
        fs::write(p, buf).map_err(runtime)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.track(name)?;
        fs::write(p, contents).map_err(runtime)
    }

    fn remove_all(&self) {
        for f in &self.files {
            let _ = fs::remove_file(self.path(f));
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Manifest<'a> {
    cfg: &'a ExperimentConfig,
    status: &'a str,
    started: u64,
    wall: Option<f64>,
    streams: &'a [(String, u64)],
    outputs: Vec<(String, String, u64)>,
    error: Option<String>,
}

impl Manifest<'_> {
    fn render(&self) -> String {
        let mut s = String::from("# ozlab run manifest\n");
        s += &format!("producer = ozlab {VERSION}\n");
        s += &format!("subcommand = {}\n", self.cfg.job.name());
        s += &format!("status = {}\n", self.status);
        s += &format!("rng = {RNG_NAME}\n");
        s += &format!("master_seed = {}\n", self.cfg.seed);
        s += "seed_rule = cell k draws from ChaCha8 stream k of the master seed\n";
        for (k, v) in &self.cfg.snapshot {
            s += &format!("config.{k} = {v}\n");
        }
        for (cell, stream) in self.streams {
            s += &format!("stream.{cell} = {stream}\n");
        }
        s += &format!("started_unix = {}\n", self.started);
        if let Some(w) = self.wall {
            s += &format!("wall_clock_s = {w:.3}\n");
        }
        if let Some(e) = &self.error {
            s += &format!("error = {}\n", e.replace('\n', " "));
        }
        for (name, hash, bytes) in &self.outputs {
            s += &format!("output {name} sha256={hash} bytes={bytes}\n");
        }
        s
    }
}

/// Runs a validated experiment into `out` and returns the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.job.name(), cfg.seed)));
    if dir.join(MANIFEST).exists() {
        return Err(invalid(format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(runtime)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let mut streams = Vec::new();
    let mut m = Manifest {
        cfg,
        status: "running",
        started,
        wall: None,
        streams: &[],
        outputs: Vec::new(),
        error: None,
    };
    fs::write(dir.join(MANIFEST), m.render()).map_err(runtime)?;
    let mut out = RunDir {
        dir: dir.clone(),
        files: Vec::new(),
        producer: format!("ozlab-{VERSION}/{}", cfg.job.module()),
    };
    let result = execute(cfg, &mut out, &mut streams).and_then(|summary| {
        let text = serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n";
        out.text(SUMMARY, &text)
    });
    m.streams = &streams;
    m.wall = Some(clock.elapsed().as_secs_f64());
    match result {
        Ok(()) => {
            for f in &out.files {
                let bytes = fs::read(out.path(f)).map_err(runtime)?;
                m.outputs.push((f.clone(), sha256_hex(&bytes), bytes.len() as u64));
            }
            m.status = "complete";
            fs::write(dir.join(MANIFEST), m.render()).map_err(runtime)?;
            Ok(dir)
        }
        Err(e) => {
            out.remove_all();
            m.status = "failed";
            m.error = Some(e.to_string());
            let _ = fs::write(dir.join(MANIFEST), m.render());
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, out: &mut RunDir, streams: &mut Vec<(String, u64)>) -> Result<Value, CliError> {
    match &cfg.config {
        JobConfig::Enumerate(c) => run_enumerate(c, cfg.seed, out, streams),
        JobConfig::Sample(c) => run_sample(c, cfg.seed, out, streams),
        JobConfig::Decompose(c) => run_decompose(c, cfg.seed, out, streams),
        JobConfig::Polymer(c) => run_polymer(c, cfg.seed, out, streams),
        JobConfig::Transfer(c) => run_transfer(c, out),
        JobConfig::Fit(c) => run_fit(c, cfg.seed, out, streams),
    }
}

/// JSON number, or a string for values JSON cannot hold.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn bool_s(b: bool) -> String {
    b.to_string()
}

fn run_enumerate(
    c: &EnumerateConfig,
    seed: u64,
    out: &mut RunDir,
    streams: &mut Vec<(String, u64)>,
) -> Result<Value, CliError> {
    let m = c.spec.edges().len();
    streams.push(("events".into(), 0));
    let mut rng = rng_for(seed, 0);
    let events: Vec<EventTable> = (0..c.events)
        .map(|_| EventTable::random_increasing(m, &mut rng))
        .collect();
    let mut rows = Vec::new();
    let mut order_pass = 0;
    let mut worst: f64 = 0.0;
    for (i, ev) in events.iter().enumerate() {
        let r = check_order_inequalities(&c.spec, &c.params, &[], ev, c.tol).map_err(runtime)?;
        order_pass += r.holds as usize;
        worst = worst.max(r.worst_violation);
        rows.push(vec![
            i.to_string(),
            fmt_f(r.lower),
            fmt_f(r.chain[0].1),
            fmt_f(r.chain[r.chain.len() - 1].1),
            fmt_f(r.upper),
            fmt_f(r.worst_violation),
            bool_s(r.holds),
        ]);
    }
    out.csv(
        "order.csv",
        "probabilities",
        &[
            "event",
            "p_lower",
            "free",
            "wired",
            "p_upper",
            "worst_violation",
            "holds",
        ],
        rows,
    )?;
    streams.push(("fkg_pairs".into(), 1));
    let mut rng = rng_for(seed, 1);
    let pairs: Vec<(EventTable, EventTable)> = (0..c.pairs)
        .map(|_| {
            (
                EventTable::random_increasing(m, &mut rng),
                EventTable::random_increasing(m, &mut rng),
            )
        })
        .collect();
    let mut rows = Vec::new();
    let mut fkg_pass = 0;
    for bc in [BoundaryCondition::Free, BoundaryCondition::Wired] {
        for (i, r) in check_fkg(&c.spec, &c.params, &bc, &pairs, c.tol)
            .map_err(runtime)?
            .iter()
            .enumerate()
        {
            fkg_pass += r.holds as usize;
            rows.push(vec![
                bc.name().to_string(),
                i.to_string(),
                fmt_f(r.p_f),
                fmt_f(r.p_g),
                fmt_f(r.p_fg),
                fmt_f(r.p_fg - r.p_f * r.p_g),
                bool_s(r.holds),
            ]);
        }
    }
    out.csv(
        "fkg.csv",
        "probabilities",
        &["bc", "pair", "p_f", "p_g", "p_fg", "slack", "holds"],
        rows,
    )?;
    let mut summary = json!({
        "edges": m,
        "order_checks": c.events,
        "order_pass": order_pass,
        "order_worst_violation": worst,
        "fkg_checks": 2 * c.pairs,
        "fkg_pass": fkg_pass,
    });
    if c.supermult_pairs > 0 {
        streams.push(("supermult_pairs".into(), 2));
        let mut rng = rng_for(seed, 2);
        let n = c.spec.n_vertices();
        let pairs: Vec<(Vec<i64>, Vec<i64>)> = (0..c.supermult_pairs)
            .map(|_| (c.spec.coords(rng.gen_range(0..n)), c.spec.coords(rng.gen_range(0..n))))
            .collect();
        let res = supermultiplicativity_check(&pairs, &c.spec, &c.params, c.tol).map_err(runtime)?;
        let pass = res.iter().filter(|r| r.holds).count();
        let rows = res
            .iter()
            .map(|r| {
                vec![
                    fmt_v(&r.x),
                    fmt_v(&r.y),
                    fmt_f(r.g_0y),
                    fmt_f(r.g_0x),
                    fmt_f(r.g_xy),
                    bool_s(r.holds),
                ]
            })
            .collect();
        out.csv(
            "supermult.csv",
            "probabilities; 0 is the box corner",
            &["x", "y", "g_0y", "g_0x", "g_xy", "holds"],
            rows,
        )?;
        summary["supermult_checks"] = json!(c.supermult_pairs);
        summary["supermult_pass"] = json!(pass);
    }
    Ok(summary)
}

fn run_sample(
    c: &SampleConfig,
    seed: u64,
    out: &mut RunDir,
    streams: &mut Vec<(String, u64)>,
) -> Result<Value, CliError> {
    streams.push(("chain".into(), 0));
    let g = RcGraph::from_box(&c.spec, &c.bc).map_err(runtime)?;
    let m = g.m();
    let mut chain = ChainState::with_algorithm(g.clone(), c.params, seed, c.algorithm)
        .map_err(runtime)?
        .with_stream(seed, 0);
    chain.run(c.burn_in);
    let n = c.spec.n_vertices() as f64;
    let mut hist: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut dumps = String::new();
    let mut dumped = 0;
    for s in 1..=c.sweeps {
        chain.sweep();
        let open = chain.config.iter().filter(|&&b| b).count() as f64 / m.max(1) as f64;
        let uf = chain.components();
        let k = uf.components();
        let largest = (0..c.spec.n_vertices())
            .map(|v| uf.component_size(v))
            .max()
            .unwrap_or(0);
        hist[0].push(open);
        hist[1].push(k as f64);
        hist[2].push(largest as f64 / n);
        if c.dump_every > 0 && s % c.dump_every == 0 && dumped < c.dump_max {
            let cfg = chain.bond_config();
            let comp = crate::cluster_geometry::components(&cfg, &c.spec);
            for l in 0..comp.count() {
                if dumped == c.dump_max {
                    break;
                }
                if comp.finite[l] {
                    let rec = ClusterRecord::new(dumped, &comp.cluster(l));
                    dumps += &serde_json::to_string(&rec).map_err(runtime)?;
                    dumps.push('\n');
                    dumped += 1;
                }
            }
        }
    }
    let names = ["open_fraction", "clusters", "largest_fraction"];
    let mut rows = Vec::new();
    let mut summary = json!({ "edges": m, "sweeps": c.sweeps, "algorithm": format!("{:?}", c.algorithm) });
    for (name, h) in names.iter().zip(&hist) {
        let e = batch_means(h);
        let dg = chain_diagnostics(h).map_err(runtime)?;
        rows.push(vec![
            name.to_string(),
            fmt_f(e.estimate),
            fmt_f(e.stderr),
            fmt_f(dg.tau_int),
            dg.window.to_string(),
            bool_s(dg.too_correlated),
        ]);
        summary[name] = json!({ "mean": e.estimate, "stderr": e.stderr, "tau_int": dg.tau_int });
    }
    out.csv(
        "observables.csv",
        "fractions of edges or vertices; clusters as counts; tau_int in sweeps",
        &["observable", "mean", "stderr", "tau_int", "window", "too_correlated"],
        rows,
    )?;
    if m <= 16 {
        streams.push(("frequency_chain".into(), 1));
        let exact = crate::rc_measure::config_distribution(&g, &c.params).map_err(runtime)?;
        let mut fchain = ChainState::with_algorithm(g, c.params, seed, c.algorithm)
            .map_err(runtime)?
            .with_stream(seed, 1);
        fchain.run(c.burn_in);
        let freq = mask_frequencies(&mut fchain, c.sweeps, c.batches).map_err(runtime)?;
        let mut worst: f64 = 0.0;
        let rows = freq
            .iter()
            .zip(&exact)
            .enumerate()
            .map(|(mask, (f, &e))| {
                let z = if f.stderr > 0.0 {
                    (f.estimate - e) / f.stderr
                } else if f.estimate == e {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst = worst.max(z.abs());
                vec![mask.to_string(), fmt_f(f.estimate), fmt_f(f.stderr), fmt_f(e), fmt_f(z)]
            })
            .collect();
        out.csv(
            "frequencies.csv",
            "probabilities; z in standard errors",
            &["mask", "frequency", "stderr", "exact", "z"],
            rows,
        )?;
        summary["frequency_worst_z"] = json!(worst);
    }
    if c.dump_every > 0 {
        out.text("clusters.jsonl", &dumps)?;
        summary["dumped_clusters"] = json!(dumped);
    }
    Ok(summary)
}

fn run_decompose(
    c: &DecomposeConfig,
    seed: u64,
    out: &mut RunDir,
    streams: &mut Vec<(String, u64)>,
) -> Result<Value, CliError> {
    streams.push(("chain".into(), 0));
    let mut dumps = String::new();
    let mut id = 0;
    let batch = decomposition_batch(
        &c.spec,
        &c.params,
        &c.bc,
        &c.t,
        &c.eps,
        c.clusters,
        c.max_sweeps,
        seed,
        |cl| {
            if c.dump {
                dumps += &serde_json::to_string(&ClusterRecord::new(id, cl)).expect("record serializes");
                dumps.push('\n');
            }
            id += 1;
        },
    )
    .map_err(runtime)?;
    let rows = batch
        .rows
        .iter()
        .map(|r| {
            vec![
                r.id.to_string(),
                r.sweep.to_string(),
                r.vertices.to_string(),
                r.edges.to_string(),
                fmt_v(&r.cone_points),
                fmt_v(&r.pieces),
                bool_s(r.reconstructs),
                bool_s(r.nested),
            ]
        })
        .collect();
    out.csv(
        "decomposition.csv",
        "counts; cone_points and pieces list one value per opening",
        &[
            "cluster",
            "sweep",
            "vertices",
            "edges",
            "cone_points",
            "pieces",
            "reconstructs",
            "nested",
        ],
        rows,
    )?;
    if c.dump {
        out.text("clusters.jsonl", &dumps)?;
    }
    let n = batch.rows.len();
    Ok(json!({
        "clusters": n,
        "target": c.clusters,
        "target_reached": batch.target_reached,
        "sweeps": batch.sweeps,
        "eps": c.eps,
        "reconstruct_pass": batch.rows.iter().filter(|r| r.reconstructs).count(),
        "nested_pass": batch.rows.iter().filter(|r| r.nested).count(),
        "largest_cluster": batch.rows.iter().map(|r| r.vertices).max().unwrap_or(0),
        "with_cone_points": batch.rows.iter().filter(|r| r.cone_points.last().is_some_and(|&k| k > 0)).count(),
    }))
}

/// Smallest p in [lo, 1) (to 1e-6) at which the plaquette KP check passes.
fn kp_threshold(
    census: &crate::polymer::PolymerCensus,
    q: f64,
    c3: f64,
    c8: &[f64],
) -> Option<(f64, PlaquetteKpReport)> {
    let check = |p: f64| plaquette_kp(census, &RCParams::new(q, p).expect("p in (0,1)"), c3, c8);
    let mut hi = 1.0 - 1e-9;
    let mut best = check(hi);
    if !best.pass {
        return None;
    }
    let mut lo = 0.5;
    if check(lo).pass {
        return Some((lo, check(lo)));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        let r = check(mid);
        if r.pass {
            hi = mid;
            best = r;
        } else {
            lo = mid;
        }
    }
    Some((hi, best))
}

fn run_polymer(
    c: &PolymerConfig,
    seed: u64,
    out: &mut RunDir,
    streams: &mut Vec<(String, u64)>,
) -> Result<Value, CliError> {
    let census = polymer_census(c.d, c.max_size).map_err(runtime)?;
    let c3 = c.c3.unwrap_or_else(|| census.growth_estimate());
    let rows = census
        .classes
        .iter()
        .map(|(&(size, nrm, diam), &count)| {
            vec![
                size.to_string(),
                nrm.to_string(),
                fmt_f((diam as f64).sqrt() / 2.0),
                count.to_string(),
            ]
        })
        .collect();
    out.csv(
        "census.csv",
        "plaquettes; wired norm in components; diameter in lattice units; polymers through one plaquette",
        &["size", "wired_norm", "diameter", "count"],
        rows,
    )?;
    let mut rows = Vec::new();
    let mut per_p = Vec::new();
    let mut worst = f64::INFINITY;
    for params in &c.ps {
        let rep = plaquette_kp(&census, params, c3, &c.c8);
        for r in &rep.rows {
            rows.push(vec![
                fmt_f(params.p),
                fmt_f(r.c8),
                fmt_f(r.head),
                fmt_f(r.tail),
                fmt_f(r.margin),
                bool_s(r.pass),
            ]);
        }
        worst = worst.min(rep.best.margin);
        per_p.push(json!({ "p": params.p, "margin": num(rep.best.margin), "c8": rep.best.c8, "pass": rep.pass }));
    }
    out.csv(
        "kp.csv",
        "sums are dimensionless",
        &["p", "c8", "head", "tail", "margin", "pass"],
        rows,
    )?;
    let threshold = kp_threshold(&census, c.q, c3, &c.c8);
    streams.push(("models".into(), 0));
    let results: Vec<Result<_, CliError>> = (0..c.models)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, k as u64);
            let n = rng.gen_range(1..=c.max_polymers);
            let model = random_model(&mut rng, n, c.max_activity, c.density).map_err(runtime)?;
            inversion_check(&model).map_err(runtime)
        })
        .collect();
    let inv = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows = inv
        .iter()
        .enumerate()
        .map(|(k, r)| {
            vec![
                k.to_string(),
                r.polymers.to_string(),
                r.clusters.to_string(),
                fmt_f(r.z_direct),
                fmt_f(r.exp_sum_theta),
                fmt_f(r.rel_err),
                fmt_f(r.max_split_theta),
            ]
        })
        .collect();
    out.csv(
        "inversion.csv",
        "dimensionless; model k uses stream k",
        &[
            "model",
            "polymers",
            "clusters",
            "z_direct",
            "exp_sum_theta",
            "rel_err",
            "max_split_theta",
        ],
        rows,
    )?;
    let max_rel = inv.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let max_split = inv.iter().map(|r| r.max_split_theta).fold(0.0, f64::max);
    Ok(json!({
        "d": c.d,
        "q": c.q,
        "max_size": c.max_size,
        "polymers_through_plaquette": census.counts_by_size.iter().sum::<u64>(),
        "c3": c3,
        "kp": per_p,
        "worst_kp_margin": num(worst),
        "p0_empirical": threshold.as_ref().map(|t| t.0),
        "p0_formula": threshold.as_ref().map(|t| p0_threshold(c.q, c3, t.1.best.c8)),
        "p0_formula_c8": threshold.as_ref().map(|t| t.1.best.c8),
        "inversion_models": c.models,
        "inversion_max_rel_err": max_rel,
        "inversion_max_split_theta": max_split,
    }))
}

fn run_transfer(c: &TransferConfig, out: &mut RunDir) -> Result<Value, CliError> {
    let pot = c.alphabet.potential();
    let v = tune_tilt(&c.alphabet, &pot, &c.alphabet.t).map_err(runtime)?;
    let masses = renewal_mass_on_axis(&c.alphabet, &pot, &v, c.r_max).map_err(runtime)?;
    let rows = masses
        .iter()
        .enumerate()
        .map(|(r, m)| vec![r.to_string(), fmt_f(*m)])
        .collect();
    out.csv(
        "masses.csv",
        "r in lattice steps along t; mass dimensionless",
        &["r", "mass"],
        rows,
    )?;
    let fit = prefactor_fit(&axis_series(&masses), c.r1, c.r2).map_err(runtime)?;
    let d = c.alphabet.d();
    out.csv(
        "prefactor.csv",
        "tau per lattice step; alpha dimensionless",
        &[
            "r1",
            "r2",
            "points",
            "tau",
            "alpha",
            "alpha_se",
            "log_amplitude",
            "expected_alpha",
        ],
        vec![vec![
            fmt_f(c.r1),
            fmt_f(c.r2),
            fit.points.to_string(),
            fmt_f(fit.tau),
            fmt_f(fit.alpha),
            fmt_f(fit.alpha_se),
            fmt_f(fit.log_amplitude),
            fmt_f((d as f64 - 1.0) / 2.0),
        ]],
    )?;
    out.text("alphabet.json", &(c.alphabet.to_json() + "\n"))?;
    Ok(json!({
        "alphabet": c.source,
        "d": d,
        "symbols": c.alphabet.len(),
        "tilt": v,
        "alpha": fit.alpha,
        "alpha_se": fit.alpha_se,
        "expected_alpha": (d as f64 - 1.0) / 2.0,
        "tau": fit.tau,
    }))
}

fn run_fit(c: &FitConfig, seed: u64, out: &mut RunDir, streams: &mut Vec<(String, u64)>) -> Result<Value, CliError> {
    for (k, dir) in c.directions.iter().enumerate() {
        streams.push((format!("direction_{}", fmt_v(dir).replace(' ', "_")), k as u64));
    }
    let results: Vec<Result<_, CliError>> = c
        .directions
        .par_iter()
        .enumerate()
        .map(|(k, dir)| {
            let xs: Vec<Vec<i64>> = (1..=c.r_max).map(|r| dir.iter().map(|x| x * r).collect()).collect();
            finite_two_point_multi(&xs, c.d, &c.params, &c.bc, c.samples, seed, k as u64, c.margin).map_err(runtime)
        })
        .collect();
    let per_dir = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut taus = Vec::new();
    let mut tau_rows = Vec::new();
    let mut fitted = Vec::new();
    for (dir, conn) in c.directions.iter().zip(&per_dir) {
        let len = norm(&crate::lattice::to_f64(dir));
        for r in conn {
            rows.push(vec![
                fmt_v(dir),
                fmt_v(&r.x),
                fmt_f(norm(&crate::lattice::to_f64(&r.x))),
                r.hits.to_string(),
                fmt_f(r.estimate),
                fmt_f(r.stderr),
                r.box_side.to_string(),
            ]);
        }
        let pts: Vec<(f64, f64)> = conn
            .iter()
            .map(|r| (norm(&crate::lattice::to_f64(&r.x)), r.estimate))
            .collect();
        let unit_dir: Vec<f64> = dir.iter().map(|&v| v as f64 / len).collect();
        match tau_fit(&unit_dir, &pts, c.alpha) {
            Ok(t) => {
                tau_rows.push(vec![
                    fmt_v(dir),
                    fmt_f(t.tau),
                    fmt_f(t.err),
                    t.radii.len().to_string(),
                    fmt_v(&t.excluded),
                ]);
                taus.push(json!({ "direction": dir, "tau": t.tau, "err": t.err }));
                fitted.push((unit_dir, t.tau));
            }
            Err(e) => {
                tau_rows.push(vec![fmt_v(dir), "".into(), "".into(), "0".into(), e.to_string()]);
                taus.push(json!({ "direction": dir, "tau": null, "error": e.to_string() }));
            }
        }
    }
    out.csv(
        "connectivity.csv",
        "distance in lattice units; estimate is a probability",
        &["direction", "x", "distance", "hits", "estimate", "stderr", "box_side"],
        rows,
    )?;
    out.csv(
        "tau.csv",
        "tau per lattice unit",
        &["direction", "tau", "err", "radii", "excluded_radii"],
        tau_rows,
    )?;
    let mut summary = json!({ "d": c.d, "q": c.params.q, "p": c.params.p, "samples": c.samples, "tau": taus });
    if fitted.len() >= 12 && fitted.iter().all(|(_, t)| *t > 0.0) {
        let dirs: Vec<Vec<f64>> = fitted.iter().map(|f| f.0.clone()).collect();
        let tau: Vec<f64> = fitted.iter().map(|f| f.1).collect();
        if let Ok(s) = equidecay_surface(&dirs, &tau) {
            let curv = convexity_curvature_check(&s).ok();
            let viol = s.convexity_violations(1e-9);
            let rows = (0..dirs.len())
                .map(|i| {
                    let row = curv.as_ref().and_then(|cr| cr.rows.iter().find(|r| r.index == i));
                    vec![
                        fmt_v(&dirs[i]),
                        fmt_f(tau[i]),
                        fmt_f(s.radius[i]),
                        row.map_or(String::new(), |r| fmt_f(r.gauss)),
                        bool_s(viol.iter().any(|v| v.index == i)),
                    ]
                })
                .collect();
            out.csv(
                "surface.csv",
                "radius = 1/tau in lattice units; curvature per unit length",
                &["direction", "tau", "radius", "gauss_curvature", "convexity_violation"],
                rows,
            )?;
            summary["convexity_violations"] = json!(viol.len());
            summary["polar_roundtrip_error"] = json!(s.roundtrip_error());
        }
    }
    Ok(summary)
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestData {
    pub fields: BTreeMap<String, String>,
    pub outputs: Vec<(String, String, u64)>,
}

pub fn read_manifest(dir: &Path) -> Result<ManifestData, CliError> {
    let text =
        fs::read_to_string(dir.join(MANIFEST)).map_err(|_| invalid(format!("no manifest in {}", dir.display())))?;
    let mut fields = BTreeMap::new();
    let mut outputs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("output ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let parsed = (parts.len() == 3).then(|| {
                let hash = parts[1].strip_prefix("sha256=")?;
                let bytes = parts[2].strip_prefix("bytes=")?.parse().ok()?;
                Some((parts[0].to_string(), hash.to_string(), bytes))
            });
            outputs.push(
                parsed
                    .flatten()
                    .ok_or_else(|| invalid(format!("corrupt manifest line {}", i + 1)))?,
            );
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| invalid(format!("corrupt manifest line {}", i + 1)))?;
        fields.insert(k.to_string(), v.to_string());
    }
    for k in ["producer", "subcommand", "status", "master_seed"] {
        if !fields.contains_key(k) {
            return Err(invalid(format!("corrupt manifest: missing `{k}`")));
        }
    }
    Ok(ManifestData { fields, outputs })
}

fn flat(v: &Value) -> String {
    match v {
        Value::Object(m) => m
            .iter()
            .map(|(k, x)| format!("{k}={}", flat(x)))
            .collect::<Vec<_>>()
            .join(" "),
        Value::Array(a) if a.iter().all(|x| !x.is_object()) => {
            format!("[{}]", a.iter().map(flat).collect::<Vec<_>>().join(","))
        }
        Value::Array(a) => a.iter().map(flat).collect::<Vec<_>>().join("; "),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One-page summary of a completed run. Also writes `report.txt` and
/// `index.csv` into the run directory.
pub fn emit_report(dir: &Path) -> Result<String, CliError> {
    let m = read_manifest(dir)?;
    if m.fields["status"] != "complete" {
        return Err(invalid(format!(
            "run in {} is not complete (status {})",
            dir.display(),
            m.fields["status"]
        )));
    }
    for (name, hash, _) in &m.outputs {
        let bytes = fs::read(dir.join(name)).map_err(|_| invalid(format!("output {name} is missing")))?;
        if &sha256_hex(&bytes) != hash {
            return Err(invalid(format!("output {name} does not match its checksum")));
        }
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY)).map_err(runtime)?).map_err(runtime)?;
    let mut s = format!("ozlab {} run in {}\n", m.fields["subcommand"], dir.display());
    s += &format!(
        "producer: {}   seed: {}\n",
        m.fields["producer"], m.fields["master_seed"]
    );
    if let Some(w) = m.fields.get("wall_clock_s") {
        s += &format!("wall clock: {w} s\n");
    }
    s += "\nparameters\n";
    for (k, v) in m.fields.iter().filter(|(k, _)| k.starts_with("config.")) {
        s += &format!("  {} = {v}\n", &k[7..]);
    }
    s += "\nheadline numbers\n";
    if let Value::Object(map) = &summary {
        for (k, v) in map {
            match v {
                Value::Array(a) if a.iter().any(|x| x.is_object()) => {
                    s += &format!("  {k}:\n");
                    for x in a {
                        s += &format!("    {}\n", flat(x));
                    }
                }
                _ => s += &format!("  {k}: {}\n", flat(v)),
            }
        }
    }
    s += "\ndata files\n";
    let mut index = format!("# producer=ozlab-{VERSION}/cli; units: bytes\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "bytes", "sha256"]).map_err(runtime)?;
    for (name, hash, bytes) in &m.outputs {
        s += &format!("  {name} ({bytes} bytes)\n");
        w.write_record([name.as_str(), &bytes.to_string(), hash.as_str()])
            .map_err(runtime)?;
    }
    index += &String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)?;
    fs::write(dir.join("report.txt"), &s).map_err(runtime)?;
    fs::write(dir.join("index.csv"), index).map_err(runtime)?;
    Ok(s)
}

// ---------------------------------------------------------------- entry

fn job_of(cmd: &Command) -> Option<(Job, &RunArgs)> {
    Some(match cmd {
        Command::Enumerate(a) => (Job::Enumerate, a),
        Command::Sample(a) => (Job::Sample, a),
        Command::Decompose(a) => (Job::Decompose, a),
        Command::Polymer(a) => (Job::Polymer, a),
        Command::Transfer(a) => (Job::Transfer, a),
        Command::Fit(a) => (Job::Fit, a),
        Command::Report { .. } => return None,
    })
}

/// Runs the command line and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match job_of(&cli.command) {
        None => {
            let Command::Report { dir } = &cli.command else {
                unreachable!()
            };
            emit_report(dir).map(|s| print!("{s}"))
        }
        Some((job, a)) => fs::read_to_string(&a.config)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", a.config.display())))
            .and_then(|text| load_config(job, &text, a.seed, a.out.clone()))
            .and_then(|cfg| run_experiment(&cfg))
            .map(|dir| println!("{}", dir.display())),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_json_configs_agree() {
        let flat = "# box\nq = 2\np = 0.6\ndims = 2,3\n";
        let js = "{\n  \"q\": 2,\n  \"p\": 0.6,\n  \"dims\": [2, 3]\n}\n";
        let a = load_config(Job::Enumerate, flat, None, None).unwrap();
        let b = load_config(Job::Enumerate, js, None, None).unwrap();
        assert_eq!(a.snapshot, b.snapshot);
        let v = load_config(
            Job::Fit,
            "{\"d\":2,\"q\":1,\"p\":0.3,\"samples\":100,\"directions\":[[1,0],[1,1]]}",
            None,
            None,
        )
        .unwrap();
        let JobConfig::Fit(f) = v.config else { panic!() };
        assert_eq!(f.directions, vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn validation_messages_name_line_and_key() {
        let e = load_config(Job::Enumerate, "q = 2\np = 0.6\ncolour = red\n", None, None).unwrap_err();
        assert_eq!(e, CliError::Validation("line 3: unknown key `colour`".into()));
        let e = load_config(Job::Enumerate, "q = 2\np = 1.5\nd = 2\nl = 2\n", None, None).unwrap_err();
        assert!(e.to_string().starts_with("line 2: key `p`"), "{e}");
        let e = load_config(Job::Enumerate, "q = 2\nq = 3\n", None, None).unwrap_err();
        assert!(e.to_string().contains("already set on line 1"));
        let e = load_config(Job::Enumerate, "q 2\n", None, None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = load_config(Job::Enumerate, "{\n \"q\": 2,\n \"zzz\": 1\n}", None, None).unwrap_err();
        assert_eq!(e, CliError::Validation("line 3: unknown key `zzz`".into()));
    }

    #[test]
    fn seed_override_and_defaults() {
        let c = load_config(Job::Transfer, "seed = 4\n", Some(9), None).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.snapshot["seed"], "9");
        assert_eq!(c.snapshot["alphabet"], "bundled");
        let JobConfig::Transfer(t) = c.config else { panic!() };
        assert_eq!(t.alphabet, crate::transfer_op::standard_alphabet(3).unwrap());
        let JobConfig::Transfer(t) = load_config(Job::Transfer, "d = 2", None, None).unwrap().config else {
            panic!()
        };
        assert_eq!(t.alphabet, crate::transfer_op::standard_alphabet(2).unwrap());
    }
}
