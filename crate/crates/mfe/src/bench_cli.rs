//! Experiment driver: configs, ω/R sweeps against an oracle, CSV output and
//! order fitting.

pub mod criteria;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{MfeError, Result};
use crate::mfe_engine::{assemble_expansion, ExpansionTable, MAX_ORDER};
use crate::reference_oracle::{
    default_size, example, neumann_partial_sum, reference_solve, ProblemSpec, DEFAULT_NODE_BUDGET,
    DEFAULT_STEP_BUDGET, EXAMPLE_IDS,
};

pub const CSV_HEADER: [&str; 6] = ["omega", "R", "t", "l2_error", "runtime_ms", "fitted_order"];
/// Errors at or below this are treated as saturated when fitting.
pub const NOISE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleChoice {
    Exact,
    Reference,
    Neumann,
}

impl std::str::FromStr for OracleChoice {
    type Err = MfeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "reference" => Ok(Self::Reference),
            "neumann" => Ok(Self::Neumann),
            other => Err(MfeError::Invalid(format!(
                "unknown oracle '{other}' (exact | reference | neumann)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub example: u8,
    pub omegas: Vec<f64>,
    pub orders: Vec<u32>,
    /// evaluation time; the example's horizon when absent
    pub t: Option<f64>,
    pub grid_size: Option<usize>,
    pub output: Option<PathBuf>,
    pub oracle: OracleChoice,
    pub threads: Option<usize>,
    /// false writes runtime_ms = 0 so repeated runs are byte-identical
    pub record_runtime: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            example: 4,
            omegas: vec![10.0, 100.0, 1000.0],
            orders: vec![0, 1, 2, 3],
            t: None,
            grid_size: None,
            output: None,
            oracle: OracleChoice::Exact,
            threads: None,
            record_runtime: true,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| MfeError::Invalid(format!("{key}: cannot parse '{s}'")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| MfeError::Invalid(format!("{key}: cannot parse '{v}'")))
}

impl ExperimentConfig {
    /// Flat `key = value` lines; `#` starts a comment.
    ///
    /// Keys: example, omegas, orders, t, grid_size, output, oracle, threads,
    /// record_runtime. Lists are comma separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MfeError::Invalid(format!("line {}: expected key = value", no + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "example" => cfg.example = parse_one(key, value)?,
                "omegas" => cfg.omegas = parse_list(key, value)?,
                "orders" => cfg.orders = parse_list(key, value)?,
                "t" => cfg.t = Some(parse_one(key, value)?),
                "grid_size" => cfg.grid_size = Some(parse_one(key, value)?),
                "output" => cfg.output = Some(PathBuf::from(value)),
                "oracle" => cfg.oracle = value.parse()?,
                "threads" => cfg.threads = Some(parse_one(key, value)?),
                "record_runtime" => cfg.record_runtime = parse_one(key, value)?,
                other => {
                    return Err(MfeError::Invalid(format!(
                        "line {}: unknown key '{other}'",
                        no + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !EXAMPLE_IDS.contains(&self.example) {
            return Err(MfeError::Invalid(format!(
                "unknown example id {}",
                self.example
            )));
        }
        if self.omegas.is_empty() || self.orders.is_empty() {
            return Err(MfeError::Invalid(
                "omegas and orders must be non-empty".into(),
            ));
        }
        if self.omegas.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(MfeError::Invalid("omegas must be positive".into()));
        }
        let mut sorted = self.omegas.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return Err(MfeError::Invalid("omegas must be distinct".into()));
        }
        if let Some(r) = self.orders.iter().find(|r| **r > MAX_ORDER) {
            return Err(MfeError::Invalid(format!(
                "order {r} exceeds the engine limit {MAX_ORDER}"
            )));
        }
        if self.oracle == OracleChoice::Neumann && self.orders.iter().any(|r| *r > 3) {
            return Err(MfeError::Invalid(
                "the Neumann oracle handles orders <= 3".into(),
            ));
        }
        if matches!(self.t, Some(t) if !(t.is_finite() && t >= 0.0)) {
            return Err(MfeError::Invalid("t must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub omega: f64,
    pub r: u32,
    pub t: f64,
    pub l2_error: f64,
    /// cell evaluation time, including assembly only when the table is built per ω
    pub runtime_ms: u64,
    pub fitted_order: Option<f64>,
}

fn problem(cfg: &ExperimentConfig, omega: f64) -> Result<ProblemSpec> {
    let m = cfg.grid_size.unwrap_or_else(|| default_size(cfg.example));
    let mut p = example(cfg.example, omega, m)?;
    if let Some(t) = cfg.t {
        p.t = t;
    }
    Ok(p)
}

fn oracle_value(
    cfg: &ExperimentConfig,
    p: &ProblemSpec,
    omega: f64,
    r: u32,
) -> Result<crate::operator_core::Vector> {
    match cfg.oracle {
        OracleChoice::Exact => p.exact_at(p.t, omega),
        OracleChoice::Reference => {
            Ok(reference_solve(&p.ops, &p.u0, omega, p.t, 1e-11, DEFAULT_STEP_BUDGET)?.value)
        }
        OracleChoice::Neumann => neumann_partial_sum(
            r as usize,
            p.t,
            omega,
            &p.ops,
            &p.frequencies,
            &p.u0,
            DEFAULT_NODE_BUDGET,
        ),
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    shared: Option<&(ProblemSpec, ExpansionTable)>,
    omega: f64,
    r: u32,
) -> Result<ErrorRecord> {
    let start = Instant::now();
    let owned;
    let (p, table) = match shared {
        Some((p, table)) => (p, table),
        None => {
            let p = problem(cfg, omega)?;
            let table = assemble_expansion(r, &p)?;
            owned = (p, table);
            (&owned.0, &owned.1)
        }
    };
    let approx = table.evaluate(omega);
    let runtime_ms = if cfg.record_runtime {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    let reference = oracle_value(cfg, p, omega, r)
        .map_err(|e| MfeError::Invalid(format!("oracle at omega = {omega}, R = {r}: {e}")))?;
    Ok(ErrorRecord {
        omega,
        r,
        t: p.t,
        l2_error: p.l2_error(&approx, &reference),
        runtime_ms,
        fitted_order: None,
    })
}

#[cfg(feature = "parallel")]
fn map_cells<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_cells<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// All (R, ω) cells in (R asc, ω asc) order.
///
/// Tables are assembled once per R and reused across ω unless the example's
/// operators depend on ω, in which case each cell rebuilds its own.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ErrorRecord>> {
    cfg.validate()?;
    let mut omegas = cfg.omegas.clone();
    omegas.sort_by(f64::total_cmp);
    let mut orders = cfg.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    let rebuild = problem(cfg, omegas[0])?.omega_dependent;
    let shared: BTreeMap<u32, (ProblemSpec, ExpansionTable)> = if rebuild {
        BTreeMap::new()
    } else {
        let p = problem(cfg, omegas[0])?;
        let built = map_cells(&orders, |r| {
            assemble_expansion(*r, &p).map(|t| (*r, (p.clone(), t)))
        });
        built.into_iter().collect::<Result<_>>()?
    };
    let cells: Vec<(u32, f64)> = orders
        .iter()
        .flat_map(|&r| omegas.iter().map(move |&w| (r, w)))
        .collect();
    let mut records = map_cells(&cells, |&(r, w)| run_cell(cfg, shared.get(&r), w, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    attach_fits(&mut records);
    Ok(records)
}

fn attach_fits(records: &mut [ErrorRecord]) {
    let mut by_r: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in records.iter() {
        by_r.entry(rec.r)
            .or_default()
            .push((rec.omega, rec.l2_error));
    }
    for rec in records.iter_mut() {
        rec.fitted_order = fit_order(&by_r[&rec.r]).ok();
    }
}

/// Negated least-squares slope of log(error) against log(ω).
pub fn fit_order(points: &[(f64, f64)]) -> Result<f64> {
    let mut omegas: Vec<f64> = points.iter().map(|p| p.0).collect();
    omegas.sort_by(f64::total_cmp);
    omegas.dedup();
    if omegas.len() < 3 {
        return Err(MfeError::Invalid(format!(
            "need at least 3 distinct omegas, got {}",
            omegas.len()
        )));
    }
    if points.iter().any(|p| !(p.1 > NOISE_FLOOR)) {
        return Err(MfeError::Saturated);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

/// Order implied by two (ω, error) pairs.
pub fn two_point_order(w1: f64, e1: f64, w2: f64, e2: f64) -> f64 {
    (e1 / e2).ln() / (w2 / w1).ln()
}

/// RFC 4180 CSV in the order given. Floats use the shortest round-trip form.
pub fn write_csv<W: Write>(records: &[ErrorRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            format!("{}", r.omega),
            r.r.to_string(),
            format!("{}", r.t),
            format!("{:e}", r.l2_error),
            r.runtime_ms.to_string(),
            r.fitted_order.map(|f| format!("{f}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes records sorted by (R, ω).
pub fn emit_csv(records: &[ErrorRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.r.cmp(&b.r).then(a.omega.total_cmp(&b.omega)));
    write_csv(&sorted, std::fs::File::create(path)?)
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ErrorRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(MfeError::Invalid(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("");
        out.push(ErrorRecord {
            omega: parse_one("omega", get(0))?,
            r: parse_one("R", get(1))?,
            t: parse_one("t", get(2))?,
            l2_error: parse_one("l2_error", get(3))?,
            runtime_ms: parse_one("runtime_ms", get(4))?,
            fitted_order: if get(5).is_empty() {
                None
            } else {
                Some(parse_one("fitted_order", get(5))?)
            },
        });
    }
    Ok(out)
}

/// Published error tables, rows ω = 10, 100, 1000 and columns R = 0, 1, ….
pub fn published_table(example_id: u8) -> Option<&'static [[f64; 4]; 3]> {
    const EX1: [[f64; 4]; 3] = [
        [1.12e-1, 3.17e-2, 2.75e-2, 7.38e-2],
        [1.23e-2, 3.06e-4, 2.68e-5, 7.36e-6],
        [1.27e-3, 3.15e-6, 2.68e-8, 1.76e-9],
    ];
    const EX2: [[f64; 4]; 3] = [
        [9.33e-3, 5.28e-3, 5.55e-5, f64::NAN],
        [5.33e-4, 4.87e-5, 4.94e-8, f64::NAN],
        [4.96e-5, 7.64e-8, 4.86e-11, f64::NAN],
    ];
    const EX3: [[f64; 4]; 3] = [
        [3.17e-2, 3.17e-2, 1.71e-3, f64::NAN],
        [5.45e-4, 5.45e-4, 2.00e-7, f64::NAN],
        [5.54e-6, 5.54e-6, 1.98e-11, f64::NAN],
    ];
    const EX4: [[f64; 4]; 3] = [
        [3.58e0, 3.47e-1, 2.22e-2, 1.07e-3],
        [1.00e-1, 2.64e-4, 4.62e-7, 6.07e-10],
        [1.80e-2, 8.41e-6, 2.62e-9, 6.14e-13],
    ];
    match example_id {
        1 => Some(&EX1),
        2 => Some(&EX2),
        3 => Some(&EX3),
        4 => Some(&EX4),
        _ => None,
    }
}

pub const TABLE_OMEGAS: [f64; 3] = [10.0, 100.0, 1000.0];

/// Highest R in the published table for an example.
pub fn table_orders(example_id: u8) -> Vec<u32> {
    match example_id {
        2 | 3 => vec![0, 1, 2],
        _ => vec![0, 1, 2, 3],
    }
}

/// Config that regenerates one published table.
pub fn table_config(example_id: u8) -> Result<ExperimentConfig> {
    if !EXAMPLE_IDS.contains(&example_id) {
        return Err(MfeError::Invalid(format!(
            "unknown example id {example_id}"
        )));
    }
    Ok(ExperimentConfig {
        example: example_id,
        omegas: TABLE_OMEGAS.to_vec(),
        orders: table_orders(example_id),
        ..ExperimentConfig::default()
    })
}

/// Side-by-side text of measured and published errors.
pub fn format_comparison(example_id: u8, records: &[ErrorRecord]) -> String {
    let Some(table) = published_table(example_id) else {
        return String::new();
    };
    let mut s = format!("example {example_id}: measured (published) [ratio published/measured]\n");
    for (row, w) in TABLE_OMEGAS.iter().enumerate() {
        s += &format!("omega = {w:>6}:");
        for r in table_orders(example_id) {
            let measured = records
                .iter()
                .find(|x| x.r == r && x.omega == *w)
                .map(|x| x.l2_error);
            let published = table[row][r as usize];
            match measured {
                Some(m) => s += &format!("  R{r} {m:.2e} ({published:.2e}) [{:.2}]", published / m),
                None => s += &format!("  R{r} - ({published:.2e})"),
            }
        }
        s.push('\n');
    }
    s
}
