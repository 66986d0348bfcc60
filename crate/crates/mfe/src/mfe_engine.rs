//! Boundary terms F^k[φ], the partial sums S_r^(d) and the (r, s) table.

use std::collections::BTreeMap;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{
    a_coefficient, enumerate_multi_indices, nonresonant, phi_family, rational_to_f64,
    FrequencyVector, MultiIndex, PhiVector,
};
use crate::error::{MfeError, Result};
use crate::operator_core::{
    ad_power, binomial, Grid, Mat, Multiplier, SemigroupEvaluator, Vector, ONE,
};
use crate::quadrature::{gauss_legendre, oscillatory_nodes};

/// Highest expansion order the assembler accepts.
pub const MAX_ORDER: u32 = 4;
/// Deepest nesting for τ-dependent multipliers.
pub const MAX_TIME_DEPENDENT_DEPTH: usize = 2;
pub const TABLE_VERSION: u32 = 1;

/// Generator plus the potential coefficients α_n.
#[derive(Debug, Clone)]
pub struct Operators {
    semigroup: SemigroupEvaluator,
    alphas: BTreeMap<i64, Multiplier>,
}

impl Operators {
    pub fn new(semigroup: SemigroupEvaluator, alphas: Vec<(i64, Multiplier)>) -> Result<Self> {
        let dim = semigroup.dim();
        let mut map = BTreeMap::new();
        for (n, a) in alphas {
            if n == 0 {
                return Err(MfeError::Invalid(
                    "frequency index 0 belongs in the generator".into(),
                ));
            }
            if a.dim() != dim {
                return Err(MfeError::Invalid(format!(
                    "alpha_{n} has dim {} vs {dim}",
                    a.dim()
                )));
            }
            map.insert(n, a);
        }
        Ok(Self {
            semigroup,
            alphas: map,
        })
    }

    pub fn semigroup(&self) -> &SemigroupEvaluator {
        &self.semigroup
    }

    pub fn l(&self) -> &Mat {
        self.semigroup.l()
    }

    pub fn dim(&self) -> usize {
        self.semigroup.dim()
    }

    pub fn alpha(&self, n: i64) -> Result<&Multiplier> {
        self.alphas
            .get(&n)
            .ok_or_else(|| MfeError::Invalid(format!("no multiplier registered for n = {n}")))
    }

    pub fn frequencies(&self) -> Vec<i64> {
        self.alphas.keys().copied().collect()
    }

    pub fn autonomous(&self) -> bool {
        self.alphas.values().all(Multiplier::is_static)
    }
}

/// P e^{tL} Q; `None` stands for the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTerm {
    pub left: Option<Mat>,
    pub right: Option<Mat>,
}

impl SplitTerm {
    pub fn left_or_identity(&self, n: usize) -> Mat {
        self.left.clone().unwrap_or_else(|| Mat::identity(n, n))
    }

    pub fn right_or_identity(&self, n: usize) -> Mat {
        self.right.clone().unwrap_or_else(|| Mat::identity(n, n))
    }

    pub fn apply(&self, s: &SemigroupEvaluator, t: f64, u: &Vector) -> Result<Vector> {
        let q = match &self.right {
            Some(q) => q * u,
            None => u.clone(),
        };
        let mid = s.apply(t, &q)?;
        Ok(match &self.left {
            Some(p) => p * mid,
            None => mid,
        })
    }
}

// τ-derivatives of an operator at a fixed point; None entries are zero
type Jet = Vec<Option<Mat>>;

fn mul_opt(a: &Option<Mat>, b: &Option<Mat>) -> Option<Mat> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x * y),
        _ => None,
    }
}

fn add_opt(acc: &mut Option<Mat>, x: Mat) {
    match acc {
        Some(a) => *a += x,
        None => *acc = Some(x),
    }
}

fn leibniz(a: &Jet, b: &Jet) -> Jet {
    let len = a.len().min(b.len());
    (0..len)
        .map(|m| {
            let mut acc = None;
            for i in 0..=m {
                if let Some(p) = mul_opt(&a[i], &b[m - i]) {
                    add_opt(&mut acc, p * C::new(binomial(m as u32, i as u32), 0.0));
                }
            }
            acc
        })
        .collect()
}

// Y^{(m)} = Σ_ℓ (−1)^ℓ C(k,ℓ) ad^ℓ(G^{(k−ℓ+m)})
fn boundary_jet(g: &Jet, k: u32, l: &Mat) -> Jet {
    let len = g.len().saturating_sub(k as usize).max(1);
    (0..len)
        .map(|m| {
            let mut acc = None;
            for j in 0..=k {
                let idx = (k - j) as usize + m;
                if let Some(Some(x)) = g.get(idx) {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    add_opt(
                        &mut acc,
                        ad_power(l, x, j) * C::new(sign * binomial(k, j), 0.0),
                    );
                }
            }
            acc
        })
        .collect()
}

fn alpha_jet(a: &Multiplier, point: f64, depth: usize) -> Result<Jet> {
    (0..depth).map(|j| a.derivative(point, j)).collect()
}

/// F^k[φ](t) as P e^{tL} Q.
///
/// Level j substitutes τ_j = τ_{j+1} (φ_j = 1) or τ_j = 0 (φ_j = 0) after k_j
/// derivatives. A τ-dependent α_{n_j} is sampled at 0 when j ≤ ℓ (last zero of
/// φ) and at t otherwise.
pub fn f_k_phi(
    k: &MultiIndex,
    phi: &PhiVector,
    n: &FrequencyVector,
    ops: &Operators,
    t: f64,
) -> Result<SplitTerm> {
    let d = n.dim();
    if k.dim() != d || phi.dim() != d {
        return Err(MfeError::Invalid(
            "k, phi and n must share a dimension".into(),
        ));
    }
    if !ops.autonomous() && d > MAX_TIME_DEPENDENT_DEPTH {
        return Err(MfeError::Unsupported(format!(
            "time-dependent multipliers are supported for d <= {MAX_TIME_DEPENDENT_DEPTH}, got {d}"
        )));
    }
    let depth = k.total() as usize + 1;
    let last_zero = phi.last_zero();
    let mut b: Option<Jet> = None;
    let mut c: Option<Mat> = None;
    for j in 0..d {
        let point = if j < last_zero { 0.0 } else { t };
        let a = alpha_jet(ops.alpha(n.entries()[j])?, point, depth)?;
        let g = match &b {
            None => a,
            Some(bj) => leibniz(&a, bj),
        };
        let y = boundary_jet(&g, k.parts()[j], ops.l());
        if phi.bits()[j] == 1 {
            b = Some(y);
        } else {
            let Some(y0) = y.into_iter().next().flatten() else {
                return Ok(SplitTerm {
                    left: Some(zero(ops.dim())),
                    right: None,
                });
            };
            c = Some(match c {
                Some(cm) => y0 * cm,
                None => y0,
            });
            b = None;
        }
    }
    let left = match b {
        Some(jet) => match jet.into_iter().next().flatten() {
            Some(p) => Some(p),
            None => Some(zero(ops.dim())),
        },
        None => None,
    };
    Ok(SplitTerm { left, right: c })
}

fn zero(n: usize) -> Mat {
    Mat::zeros(n, n)
}

/// One ω-independent piece of an expansion: `vector · e^{iωts} / (iω)^power`.
#[derive(Debug, Clone)]
pub struct BucketTerm {
    pub power: u32,
    pub s: i64,
    pub vector: Vector,
}

/// i^{−p}
pub fn inv_i_pow(p: u32) -> C {
    match p % 4 {
        0 => ONE,
        1 => C::new(0.0, -1.0),
        2 => C::new(-1.0, 0.0),
        _ => C::new(0.0, 1.0),
    }
}

pub fn evaluate_terms(terms: &[BucketTerm], omega: f64, t: f64, dim: usize) -> Vector {
    let mut out = Vector::zeros(dim);
    for term in terms {
        let phase = C::new(0.0, omega * t * term.s as f64).exp();
        let scale = inv_i_pow(term.power) * omega.powi(-(term.power as i32)) * phase;
        out += &term.vector * scale;
    }
    out
}

/// Every term of S_r^(d) for a nonresonant n, applied to u0.
pub fn s_terms(
    r: u32,
    n: &FrequencyVector,
    t: f64,
    ops: &Operators,
    u0: &Vector,
) -> Result<Vec<BucketTerm>> {
    let d = n.dim() as u32;
    if r < d {
        return Err(MfeError::Invalid(format!(
            "order r = {r} below dimension d = {d}"
        )));
    }
    if !nonresonant(n) {
        return Err(MfeError::Unsupported(format!(
            "{:?} is resonant; use the resonance engine",
            n.entries()
        )));
    }
    let mut out = Vec::new();
    for k in enumerate_multi_indices(n.dim(), r - d) {
        let sign = if k.total() % 2 == 0 { 1.0 } else { -1.0 };
        for l in 0..=n.dim() {
            for phi in phi_family(n.dim(), l)? {
                let a = rational_to_f64(&a_coefficient(&k, &phi, n)?);
                let split = f_k_phi(&k, &phi, n, ops, t)?;
                let v = split.apply(ops.semigroup(), t, u0)? * C::new(sign * a, 0.0);
                out.push(BucketTerm {
                    power: d + k.total(),
                    s: n.dot_vertex(l),
                    vector: v,
                });
            }
        }
    }
    Ok(out)
}

/// S_r^(d)(t) u0 at a given ω.
pub fn partial_sum_s(
    r: u32,
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    u0: &Vector,
    ops: &Operators,
) -> Result<Vector> {
    Ok(evaluate_terms(
        &s_terms(r, n, t, ops, u0)?,
        omega,
        t,
        ops.dim(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub r: u32,
    pub s: i64,
    pub coefficient: Vec<C>,
}

/// p_{r,s} with the factor i^{−r} folded in, so evaluation only needs ω^{−r} e^{isωt}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub version: u32,
    pub grid: Option<Grid>,
    pub t: f64,
    pub max_order: u32,
    pub frequencies: Vec<i64>,
    pub baseline: Vec<C>,
    pub terms: Vec<TableEntry>,
}

impl ExpansionTable {
    pub fn evaluate(&self, omega: f64) -> Vector {
        let mut out = Vector::from_vec(self.baseline.clone());
        for e in &self.terms {
            let scale = C::new(0.0, e.s as f64 * omega * self.t).exp() * omega.powi(-(e.r as i32));
            for (o, p) in out.iter_mut().zip(&e.coefficient) {
                *o += p * scale;
            }
        }
        out
    }

    pub fn get(&self, r: u32, s: i64) -> Option<&TableEntry> {
        self.terms.iter().find(|e| e.r == r && e.s == s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(s)?;
        if table.version != TABLE_VERSION {
            return Err(MfeError::Invalid(format!(
                "table version {} not understood",
                table.version
            )));
        }
        Ok(table)
    }
}

fn tuples(freqs: &[i64], d: usize) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                freqs.iter().map(move |&f| {
                    let mut q = p.clone();
                    q.push(f);
                    q
                })
            })
            .collect();
    }
    out
}

enum Job {
    Plain(FrequencyVector),
    Family(FrequencyVector),
}

fn plan(max_order: u32, freqs: &[i64]) -> Result<Vec<(u32, Job)>> {
    let mut jobs = Vec::new();
    for d in 1..=max_order as usize {
        for v in tuples(freqs, d) {
            let n = FrequencyVector::new(v)?;
            if nonresonant(&n) {
                jobs.push((d as u32, Job::Plain(n)));
                continue;
            }
            crate::combinatorics::check_single_edge(&n)?;
            // one representative per rotation class: the lexicographically smallest
            let rots = crate::combinatorics::cyclic_rotations(&n);
            if rots.iter().all(|r| &n <= r) {
                jobs.push((d as u32, Job::Family(n)));
            }
        }
    }
    Ok(jobs)
}

/// How independent frequency vectors are processed during assembly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    /// rayon when the `parallel` feature is on, otherwise sequential
    #[default]
    Parallel,
    Sequential,
}

fn run_jobs<F>(mode: Execution, jobs: &[(u32, Job)], f: F) -> Vec<Result<Vec<BucketTerm>>>
where
    F: Fn(u32, &Job) -> Result<Vec<BucketTerm>> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Execution::Parallel {
        use rayon::prelude::*;
        return jobs.par_iter().map(|(d, j)| f(*d, j)).collect();
    }
    let _ = mode;
    jobs.iter().map(|(d, j)| f(*d, j)).collect()
}

/// Table of U^[R](t): all d ≤ R and n ∈ freqs^d, bucketed by (r, s).
///
/// Nonresonant n go through S_R^(d). Single-edge resonant n are grouped into
/// rotation families and handled by the resonance engine.
pub fn assemble(
    max_order: u32,
    freqs: &[i64],
    t: f64,
    ops: &Operators,
    u0: &Vector,
) -> Result<ExpansionTable> {
    assemble_with(Execution::default(), max_order, freqs, t, ops, u0)
}

/// [`assemble`] with an explicit execution mode. Bucket sums are reduced in a
/// fixed order, so both modes give identical tables.
pub fn assemble_with(
    mode: Execution,
    max_order: u32,
    freqs: &[i64],
    t: f64,
    ops: &Operators,
    u0: &Vector,
) -> Result<ExpansionTable> {
    if max_order > MAX_ORDER {
        return Err(MfeError::Unsupported(format!(
            "R = {max_order} exceeds the limit {MAX_ORDER}"
        )));
    }
    if u0.len() != ops.dim() {
        return Err(MfeError::Invalid(
            "u0 length does not match the generator".into(),
        ));
    }
    let jobs = plan(max_order, freqs)?;
    let results = run_jobs(mode, &jobs, |_, job| match job {
        Job::Plain(n) => s_terms(max_order, n, t, ops, u0),
        Job::Family(n) => {
            let fam = crate::resonance_engine::build_resonant_family(n)?;
            crate::resonance_engine::family_terms(&fam, max_order, t, ops, u0)
        }
    });
    let mut buckets: BTreeMap<(u32, i64), Vector> = BTreeMap::new();
    for res in results {
        for term in res? {
            let entry = buckets
                .entry((term.power, term.s))
                .or_insert_with(|| Vector::zeros(ops.dim()));
            *entry += term.vector;
        }
    }
    let baseline = ops.semigroup().apply(t, u0)?;
    let terms = buckets
        .into_iter()
        .map(|((r, s), v)| {
            let f = inv_i_pow(r);
            TableEntry {
                r,
                s,
                coefficient: v.iter().map(|z| z * f).collect(),
            }
        })
        .collect();
    Ok(ExpansionTable {
        version: TABLE_VERSION,
        grid: None,
        t,
        max_order,
        frequencies: freqs.to_vec(),
        baseline: baseline.iter().copied().collect(),
        terms,
    })
}

/// Table for a registered problem.
pub fn assemble_expansion(
    max_order: u32,
    problem: &crate::reference_oracle::ProblemSpec,
) -> Result<ExpansionTable> {
    let mut table = assemble(
        max_order,
        &problem.frequencies,
        problem.t,
        &problem.ops,
        &problem.u0,
    )?;
    table.grid = problem.grid.clone();
    Ok(table)
}

pub fn evaluate_mfe(table: &ExpansionTable, omega: f64) -> Result<Vector> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(MfeError::Invalid(format!(
            "omega must be positive, got {omega}"
        )));
    }
    Ok(table.evaluate(omega))
}

/// e^{(t−τ)L} X e^{τL} w
pub fn sandwich(s: &SemigroupEvaluator, t: f64, tau: f64, x: &Mat, w: &Vector) -> Result<Vector> {
    s.apply(t - tau, &(x * s.apply(tau, w)?))
}

fn c_real(x: f64) -> C {
    C::new(x, 0.0)
}

/// Direct transcription of the ready-made R = 3 formulas for d = 1, 2, 3.
pub fn closed_form_s3(
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    u0: &Vector,
    ops: &Operators,
) -> Result<Vector> {
    if !ops.autonomous() {
        return Err(MfeError::Unsupported(
            "closed forms assume static multipliers".into(),
        ));
    }
    let s = ops.semigroup();
    let l = ops.l();
    let io = C::new(0.0, omega);
    let osc = |m: i64| C::new(0.0, omega * t * m as f64).exp();
    let etl = |v: &Vector| s.apply(t, v);
    let ad = |x: &Mat| ad_power(l, x, 1);
    let e = n.entries();
    match e.len() {
        1 => {
            let n1 = e[0];
            let a = ops.alpha(n1)?.value();
            let mut out = Vector::zeros(u0.len());
            for k in 0..3u32 {
                let x = ad_power(l, a, k);
                let z = (io * n1 as f64).powi(k as i32 + 1);
                let v = (&x * etl(u0)?) * osc(n1) - etl(&(&x * u0))?;
                out += v / z;
            }
            Ok(out)
        }
        2 => {
            let (n1, n2) = (e[0] as f64, e[1] as f64);
            let (a1, a2) = (ops.alpha(e[0])?.value(), ops.alpha(e[1])?.value());
            let a21 = a2 * a1;
            let eu = etl(u0)?;
            let second = (&a21 * &eu) * (osc(e[0] + e[1]) / c_real(n1 * (n1 + n2)))
                - (a2 * etl(&(a1 * u0))?) * (osc(e[1]) / c_real(n1 * n2))
                + etl(&(&a21 * u0))? / c_real(n2 * (n1 + n2));
            let (ad1, ad2, ad21) = (ad(a1), ad(a2), ad(&a21));
            let third = ((a2 * &ad1 * &eu) / c_real(n1 * n1 * (n1 + n2))
                + (&ad21 * &eu) / c_real(n1 * (n1 + n2) * (n1 + n2)))
                * osc(e[0] + e[1])
                + ((a2 * etl(&(&ad1 * u0))?) * c_real(-1.0 / (n1 * n1 * n2))
                    - (&ad2 * etl(&(a1 * u0))?) / c_real(n1 * n2 * n2))
                    * osc(e[1])
                + etl(&(a2 * &ad1 * u0))? / c_real(n1 * n2 * (n1 + n2))
                + etl(&(&ad21 * u0))? * c_real(-1.0 / (n1 * (n1 + n2) * (n1 + n2)))
                + etl(&(&ad2 * (a1 * u0)))? / c_real(n1 * n2 * n2);
            Ok(second / io.powi(2) + third / io.powi(3))
        }
        3 => {
            let (n1, n2, n3) = (e[0] as f64, e[1] as f64, e[2] as f64);
            let (a1, a2, a3) = (
                ops.alpha(e[0])?.value(),
                ops.alpha(e[1])?.value(),
                ops.alpha(e[2])?.value(),
            );
            let eu = etl(u0)?;
            let v = (a3 * a2 * a1 * &eu)
                * (osc(e[0] + e[1] + e[2]) / c_real(n1 * (n1 + n2) * (n1 + n2 + n3)))
                - (a3 * a2 * etl(&(a1 * u0))?) * (osc(e[1] + e[2]) / c_real(n1 * n2 * (n2 + n3)))
                + (a3 * etl(&(a2 * a1 * u0))?) * (osc(e[2]) / c_real(n2 * n3 * (n1 + n2)))
                - etl(&(a3 * a2 * a1 * u0))? / c_real((n1 + n2 + n3) * (n2 + n3) * n3);
            Ok(v / io.powi(3))
        }
        d => Err(MfeError::Unsupported(format!(
            "closed forms exist for d <= 3, got {d}"
        ))),
    }
}

fn integrate(
    t: f64,
    nodes: usize,
    dim: usize,
    f: impl Fn(f64) -> Result<Vector>,
) -> Result<Vector> {
    let rule = gauss_legendre(nodes).on(0.0, t);
    let mut acc = Vector::zeros(dim);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        acc += f(*x)? * c_real(*w);
    }
    Ok(acc)
}

/// Node ceiling for the error-term quadratures.
pub const ERROR_NODE_BUDGET: usize = 20_000;

/// E_r^(d)(t) u0 through the recursion: boundary integrals of the outer
/// variable plus the nested inner error. Static multipliers only.
pub fn error_term_recursive(
    r: u32,
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    u0: &Vector,
    ops: &Operators,
) -> Result<Vector> {
    if !ops.autonomous() {
        return Err(MfeError::Unsupported(
            "error recursion assumes static multipliers".into(),
        ));
    }
    if !nonresonant(n) {
        return Err(MfeError::Unsupported(
            "error recursion needs a nonresonant vector".into(),
        ));
    }
    let d = n.dim();
    if (r as usize) < d {
        return Err(MfeError::Invalid("r must be at least d".into()));
    }
    let dim = ops.dim();
    let s = ops.semigroup();
    if t == 0.0 {
        return Ok(Vector::zeros(dim));
    }
    let span: i64 = n.entries().iter().map(|x| x.abs()).sum();
    let nodes = oscillatory_nodes(omega, span as f64, t, (64.0 * t).ceil() as usize);
    if nodes > ERROR_NODE_BUDGET {
        return Err(MfeError::Budget(format!(
            "{nodes} nodes needed, budget {ERROR_NODE_BUDGET}"
        )));
    }
    let io = C::new(0.0, omega);
    let nd = n.entries()[d - 1];
    let alpha_d = ops.alpha(nd)?.value();
    if d == 1 {
        let x = ad_power(ops.l(), alpha_d, r);
        let v = integrate(t, nodes, dim, |tau| {
            Ok(sandwich(s, t, tau, &x, u0)? * C::new(0.0, omega * nd as f64 * tau).exp())
        })?;
        return Ok(v / (io * nd as f64).powi(r as i32));
    }
    let head = n.head().expect("d > 1");
    let mut out = Vector::zeros(dim);
    for kt in enumerate_multi_indices(d - 1, r - d as u32) {
        let kd = r + 1 - d as u32 - kt.total();
        let sign = if kt.total() % 2 == 0 { 1.0 } else { -1.0 };
        for l in 0..d {
            for phi in phi_family(d - 1, l)? {
                let a = rational_to_f64(&a_coefficient(&kt, &phi, &head)?);
                let split = f_k_phi(&kt, &phi, &head, ops, 0.0)?;
                let sv = n.dot_vertex(l);
                let x = ad_power(ops.l(), &(alpha_d * split.left_or_identity(dim)), kd);
                let cu = match &split.right {
                    Some(q) => q * u0,
                    None => u0.clone(),
                };
                let v = integrate(t, nodes, dim, |tau| {
                    Ok(sandwich(s, t, tau, &x, &cu)? * C::new(0.0, omega * sv as f64 * tau).exp())
                })?;
                let coef = c_real(sign * a)
                    / (io.powi((d - 1) as i32 + kt.total() as i32)
                        * (io * sv as f64).powi(kd as i32));
                out += v * coef;
            }
        }
    }
    let nested = integrate(t, nodes, dim, |tau| {
        let inner = error_term_recursive(r - 1, &head, tau, omega, u0, ops)?;
        Ok(s.apply(t - tau, &(alpha_d * inner))? * C::new(0.0, omega * nd as f64 * tau).exp())
    })?;
    Ok(out + nested)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator_core::{GeneratorMatrix, SymmetryHint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        Mat::from_fn(n, n, |_, _| {
            C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| {
            C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn system(seed: u64, dim: usize, freqs: &[i64]) -> (Operators, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rand_mat(&mut rng, dim) * C::new(0.5, 0.0);
        let s = SemigroupEvaluator::new(GeneratorMatrix::new(l, SymmetryHint::General).unwrap());
        let alphas = freqs
            .iter()
            .map(|&f| (f, Multiplier::diagonal(&rand_vec(&mut rng, dim))))
            .collect();
        (Operators::new(s, alphas).unwrap(), rand_vec(&mut rng, dim))
    }

    fn fv(v: &[i64]) -> FrequencyVector {
        FrequencyVector::new(v.to_vec()).unwrap()
    }

    fn phi(v: &[u8]) -> PhiVector {
        PhiVector::from_bits(v.to_vec()).unwrap()
    }

    fn close(a: &Mat, b: &Mat) -> bool {
        (a - b).norm() <= 1e-12 * b.norm().max(1.0)
    }

    #[test]
    fn f_k_phi_examples() {
        let (ops, _) = system(1, 5, &[1, 2]);
        let n = ops.dim();
        let (a1, a2) = (
            ops.alpha(1).unwrap().value().clone(),
            ops.alpha(2).unwrap().value().clone(),
        );
        let st = f_k_phi(&MultiIndex::zeros(1), &phi(&[1]), &fv(&[1]), &ops, 1.0).unwrap();
        assert!(close(&st.left_or_identity(n), &a1) && st.right.is_none());
        let st = f_k_phi(
            &MultiIndex::zeros(2),
            &phi(&[0, 1]),
            &fv(&[1, 2]),
            &ops,
            1.0,
        )
        .unwrap();
        assert!(close(&st.left_or_identity(n), &a2) && close(&st.right_or_identity(n), &a1));
        let st = f_k_phi(
            &MultiIndex::new(vec![1, 0]),
            &phi(&[1, 1]),
            &fv(&[1, 2]),
            &ops,
            1.0,
        )
        .unwrap();
        let want = -(&a2 * ad_power(ops.l(), &a1, 1));
        assert!(close(&st.left_or_identity(n), &want) && st.right.is_none());
    }

    // the four d = 2 patterns written out by hand
    #[test]
    fn f_k_phi_matches_worked_d2_patterns() {
        let (ops, _) = system(2, 4, &[1, 3]);
        let n = ops.dim();
        let l = ops.l().clone();
        let (a1, a2) = (
            ops.alpha(1).unwrap().value().clone(),
            ops.alpha(3).unwrap().value().clone(),
        );
        let id = Mat::identity(n, n);
        for k1 in 0..3u32 {
            for k2 in 0..3u32 {
                let k = MultiIndex::new(vec![k1, k2]);
                let sg = if (k1 + k2) % 2 == 0 { 1.0 } else { -1.0 };
                let inner = &a2 * ad_power(&l, &a1, k1);
                let cases = [
                    ([1u8, 1], ad_power(&l, &inner, k2), id.clone()),
                    ([1, 0], id.clone(), ad_power(&l, &inner, k2)),
                    ([0, 1], ad_power(&l, &a2, k2), ad_power(&l, &a1, k1)),
                    (
                        [0, 0],
                        id.clone(),
                        ad_power(&l, &a2, k2) * ad_power(&l, &a1, k1),
                    ),
                ];
                for (p, left, right) in cases {
                    let st = f_k_phi(&k, &phi(&p), &fv(&[1, 3]), &ops, 0.7).unwrap();
                    let got = st.left_or_identity(n) * st.right_or_identity(n);
                    let want = left * right * C::new(sg, 0.0);
                    assert!(close(&got, &want), "k={k1},{k2} phi={p:?}");
                }
            }
        }
    }

    #[test]
    fn d1_first_order_sum() {
        let (ops, u0) = system(3, 6, &[2]);
        let (t, w) = (0.8, 40.0);
        let got = partial_sum_s(1, &fv(&[2]), t, w, &u0, &ops).unwrap();
        let s = ops.semigroup();
        let a = ops.alpha(2).unwrap().value();
        let e = C::new(0.0, w * t * 2.0).exp();
        let want = (a * s.apply(t, &u0).unwrap() * e - s.apply(t, &(a * &u0)).unwrap())
            / C::new(0.0, w * 2.0);
        assert!((got - &want).norm() < 1e-13 * want.norm());
    }

    #[test]
    fn zero_potential_gives_zero() {
        let (ops, u0) = system(4, 4, &[]);
        let zero_ops = Operators::new(
            ops.semigroup().clone(),
            vec![
                (1, Multiplier::dense(Mat::zeros(4, 4))),
                (2, Multiplier::dense(Mat::zeros(4, 4))),
            ],
        )
        .unwrap();
        for n in [vec![1], vec![1, 2], vec![2, 1, 2]] {
            for r in n.len() as u32..=3 {
                let v = partial_sum_s(r, &fv(&n), 1.0, 50.0, &u0, &zero_ops).unwrap();
                assert_eq!(v.norm(), 0.0);
            }
        }
        let e = error_term_recursive(2, &fv(&[1, 2]), 0.5, 30.0, &u0, &zero_ops).unwrap();
        assert_eq!(e.norm(), 0.0);
    }

    #[test]
    fn resonant_vector_is_redirected() {
        let (ops, u0) = system(5, 4, &[-1, 1]);
        assert!(matches!(
            partial_sum_s(2, &fv(&[-1, 1]), 1.0, 10.0, &u0, &ops),
            Err(MfeError::Unsupported(_))
        ));
    }

    #[test]
    fn table_bucket_layout() {
        let (ops, u0) = system(6, 4, &[1, 2]);
        let t1 = assemble(1, &[1], 1.0, &ops, &u0).unwrap();
        let keys: Vec<_> = t1.terms.iter().map(|e| (e.r, e.s)).collect();
        assert_eq!(keys, vec![(1, 0), (1, 1)]);
        let t2 = assemble(2, &[1, 2], 1.0, &ops, &u0).unwrap();
        let mut ss: Vec<i64> = t2.terms.iter().map(|e| e.s).collect();
        ss.sort();
        ss.dedup();
        assert_eq!(ss, vec![0, 1, 2, 3, 4]);
        assert!(assemble(5, &[1], 1.0, &ops, &u0).is_err());
    }

    #[test]
    fn table_matches_direct_sum_and_is_omega_free() {
        let (ops, u0) = system(7, 5, &[1, 2]);
        let t = 0.6;
        let table = assemble(3, &[1, 2], t, &ops, &u0).unwrap();
        for w in [100.0, 1000.0] {
            let mut direct = ops.semigroup().apply(t, &u0).unwrap();
            for d in 1..=3usize {
                for v in tuples(&[1, 2], d) {
                    direct += partial_sum_s(3, &fv(&v), t, w, &u0, &ops).unwrap();
                }
            }
            let got = evaluate_mfe(&table, w).unwrap();
            assert!((&got - &direct).norm() < 1e-13 * direct.norm());
        }
        // rebuilding gives identical bytes
        let again = assemble(3, &[1, 2], t, &ops, &u0).unwrap();
        assert_eq!(table.to_json().unwrap(), again.to_json().unwrap());
    }

    #[test]
    fn empty_table_is_baseline() {
        let (ops, u0) = system(8, 4, &[1]);
        let table = assemble(0, &[1], 0.9, &ops, &u0).unwrap();
        assert!(table.terms.is_empty());
        let v = evaluate_mfe(&table, 123.0).unwrap();
        assert_eq!(v, ops.semigroup().apply(0.9, &u0).unwrap());
        assert!(evaluate_mfe(&table, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let (ops, u0) = system(9, 4, &[1, 2]);
        let table = assemble(2, &[1, 2], 0.37, &ops, &u0).unwrap();
        let back = ExpansionTable::from_json(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
        let mut bad: serde_json::Value = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        bad["version"] = 99.into();
        assert!(ExpansionTable::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn closed_form_equals_engine() {
        for (seed, n) in [
            (10u64, vec![1i64]),
            (11, vec![1, 2]),
            (12, vec![2, 1, 3]),
            (13, vec![1, 1]),
        ] {
            let freqs: Vec<i64> = {
                let mut f = n.clone();
                f.sort();
                f.dedup();
                f
            };
            let (ops, u0) = system(seed, 8, &freqs);
            let a = partial_sum_s(3, &fv(&n), 0.7, 60.0, &u0, &ops).unwrap();
            let b = closed_form_s3(&fv(&n), 0.7, 60.0, &u0, &ops).unwrap();
            assert!(
                (&a - &b).norm() <= 1e-12 * b.norm(),
                "n={n:?} {}",
                (&a - &b).norm() / b.norm()
            );
        }
    }

    #[test]
    fn split_bucket_sign_for_equal_frequencies() {
        // n = (1, 1): the e^{iωt n₂} bucket carries −1/(n₁² n₂) on α₂ e^{tL} ad(α₁)
        let (ops, u0) = system(14, 6, &[1]);
        let terms = s_terms(3, &fv(&[1, 1]), 0.5, &ops, &u0).unwrap();
        let s = ops.semigroup();
        let a = ops.alpha(1).unwrap().value();
        let ad1 = ad_power(ops.l(), a, 1);
        let want = -(a * s.apply(0.5, &(&ad1 * &u0)).unwrap())
            - ad1.clone() * s.apply(0.5, &(a * &u0)).unwrap();
        let mut got = Vector::zeros(6);
        for term in terms.iter().filter(|x| x.power == 3 && x.s == 1) {
            got += &term.vector;
        }
        // (−1)^{|k|} folded: power-3 bucket of S has the stated signs
        assert!((&got - &want).norm() < 1e-12 * want.norm());
    }
}
