//! Ground truth at desk scale: nested quadrature over the simplex, an exact
//! exponential-sum evaluation for normal generators, a small-step integrator
//! for the full system, and the four worked examples with closed-form solutions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combinatorics::{nonresonant, FrequencyVector};
use crate::error::{MfeError, Result};
use crate::mfe_engine::Operators;
use crate::operator_core::{
    discretize_operator, GeneratorMatrix, Grid, Mat, Multiplier, SemigroupEvaluator, Stencil,
    SymmetryHint, Vector, ZERO,
};
use crate::quadrature::{gauss_legendre, oscillatory_nodes};

/// Observed components of the exact solution at (t, ω).
pub type ExactFn = Arc<dyn Fn(f64, f64) -> Vector + Send + Sync>;

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub ops: Operators,
    pub u0: Vector,
    pub t: f64,
    pub frequencies: Vec<i64>,
    pub grid: Option<Grid>,
    /// L² weights of the observed components
    pub weights: Vec<f64>,
    /// leading components compared against the exact solution (u of [u, v] for waves)
    pub observed: usize,
    pub exact: Option<ExactFn>,
    /// generator, multipliers or data change with ω, so tables are rebuilt per ω
    pub omega_dependent: bool,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.ops.dim())
            .field("t", &self.t)
            .field("frequencies", &self.frequencies)
            .finish()
    }
}

impl ProblemSpec {
    pub fn observe(&self, v: &Vector) -> Vector {
        v.rows(0, self.observed).into_owned()
    }

    /// Grid-weighted L² distance on the observed components.
    pub fn l2_error(&self, approx: &Vector, reference: &Vector) -> f64 {
        weighted_norm(
            &(self.observe(approx) - self.observe_ref(reference)),
            &self.weights,
        )
    }

    fn observe_ref(&self, v: &Vector) -> Vector {
        if v.len() == self.observed {
            v.clone()
        } else {
            self.observe(v)
        }
    }

    pub fn exact_at(&self, t: f64, omega: f64) -> Result<Vector> {
        self.exact.as_ref().map(|f| f(t, omega)).ok_or_else(|| {
            MfeError::Unsupported(format!("{} has no closed-form solution", self.name))
        })
    }
}

pub fn weighted_norm(v: &Vector, w: &[f64]) -> f64 {
    v.iter()
        .zip(w)
        .map(|(z, w)| w * z.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

pub const EXAMPLE_IDS: [u8; 4] = [1, 2, 3, 4];

/// Grid size used when none is given.
pub fn default_size(id: u8) -> usize {
    match id {
        1 => 192,
        2 => 32,
        3 => 128,
        _ => 4,
    }
}

fn re(x: f64) -> C {
    C::new(x, 0.0)
}

fn diag(v: Vec<C>) -> Multiplier {
    Multiplier::diagonal(&Vector::from_vec(v))
}

/// Worked examples on a spatial grid (modal basis for Example 4).
pub fn example(id: u8, omega: f64, m: usize) -> Result<ProblemSpec> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(MfeError::Invalid(format!(
            "omega must be positive, got {omega}"
        )));
    }
    match id {
        1 => example1(omega, m),
        2 => example2(m),
        3 => example3(omega, m),
        4 => example4(omega, m),
        other => Err(MfeError::Invalid(format!("unknown example id {other}"))),
    }
}

fn bump(x: f64) -> f64 {
    if x.abs() < 1.0 {
        (-1.0 / (1.0 - x * x)).exp()
    } else {
        0.0
    }
}

pub fn exact_ex1(x: f64, t: f64, omega: f64) -> C {
    let i = C::new(0.0, 1.0);
    let e = C::new(0.0, omega * t).exp();
    (-i * e * x / omega + i * x / omega).exp() * bump(x)
}

// heat equation with degenerate diffusion (1 − x²)^4 on (−1, 1)
fn example1(omega: f64, m: usize) -> Result<ProblemSpec> {
    let grid = Grid::dirichlet(-1.0, 1.0, m)?;
    let x = grid.points().to_vec();
    let w2 = omega * omega;
    let p4 = |x: f64| (1.0 - x * x).powi(4);
    let p2 = |x: f64| (1.0 - x * x).powi(2);
    let a0: Vec<C> = x
        .iter()
        .map(|&x| {
            C::new(
                p4(x) + 2.0 * w2 * (1.0 - 3.0 * x.powi(4)),
                4.0 * omega * x * p2(x),
            ) / w2
        })
        .collect();
    let a1: Vec<C> = x
        .iter()
        .map(|&x| C::new(-2.0 * p4(x) + x * w2, -4.0 * x * omega * p2(x)) / w2)
        .collect();
    let a2: Vec<C> = x.iter().map(|&x| re(p4(x) / w2)).collect();
    let stencil = Stencil::VariableCoeffSecond {
        a: x.iter().map(|&x| p4(x)).collect(),
        c: a0,
    };
    let gen = discretize_operator(&stencil, &grid)?;
    let ops = Operators::new(
        SemigroupEvaluator::new(gen),
        vec![(1, diag(a1)), (2, diag(a2))],
    )?;
    let u0 = grid.sample(|x| re(bump(x)));
    let xs = x.clone();
    Ok(ProblemSpec {
        name: "example 1".into(),
        ops,
        u0,
        t: 3.0,
        frequencies: vec![1, 2],
        weights: grid.weights(),
        observed: m,
        exact: Some(Arc::new(move |t, w| {
            Vector::from_iterator(xs.len(), xs.iter().map(|&x| exact_ex1(x, t, w)))
        })),
        grid: Some(grid),
        omega_dependent: true,
    })
}

pub fn exact_ex2(x: f64, t: f64, omega: f64) -> C {
    let q = omega * omega - 1.0;
    let e = C::new(0.0, omega * t).exp();
    let i = C::new(0.0, 1.0);
    (re(-t - 1.0 / q) + e * t.cos() / q - i * e * omega * t.sin() / q).exp() * x.sin()
}

// heat equation with time-dependent amplitude sin(τ)
fn example2(m: usize) -> Result<ProblemSpec> {
    let grid = Grid::dirichlet(0.0, 2.0 * PI, m)?;
    let gen = discretize_operator(&Stencil::SecondDerivative, &grid)?;
    let alpha = Multiplier::time_dependent(m, 8, move |tau, j| {
        let v = match j % 4 {
            0 => tau.sin(),
            1 => tau.cos(),
            2 => -tau.sin(),
            _ => -tau.cos(),
        };
        Mat::identity(m, m) * re(v)
    });
    let ops = Operators::new(SemigroupEvaluator::new(gen), vec![(1, alpha)])?;
    let xs = grid.points().to_vec();
    Ok(ProblemSpec {
        name: "example 2".into(),
        ops,
        u0: grid.sample(|x| re(x.sin())),
        t: 5.0,
        frequencies: vec![1],
        weights: grid.weights(),
        observed: m,
        exact: Some(Arc::new(move |t, w| {
            Vector::from_iterator(xs.len(), xs.iter().map(|&x| exact_ex2(x, t, w)))
        })),
        grid: Some(grid),
        omega_dependent: false,
    })
}

pub fn exact_ex3(x: f64, t: f64, omega: f64) -> C {
    re((-(omega * t).cos() * x * x / (omega * omega)).exp() * (-x * x / 2.0).exp())
}

/// [[0, I], [L, 0]] and β_n = [[0, 0], [α_n, 0]].
pub fn wave_first_order_system(
    l: &Mat,
    alphas: Vec<(i64, Multiplier)>,
) -> Result<(GeneratorMatrix, Vec<(i64, Multiplier)>)> {
    if !l.is_square() {
        return Err(MfeError::Invalid("L must be square".into()));
    }
    let n = l.nrows();
    let mut a = Mat::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).copy_from(&Mat::identity(n, n));
    a.view_mut((n, 0), (n, n)).copy_from(l);
    let mut gen = GeneratorMatrix::new(a, SymmetryHint::General)?;
    gen.boundary = None;
    gen.wave_inner = Some(l.clone());
    let betas = alphas
        .into_iter()
        .map(|(k, m)| {
            let lift = move |x: &Mat| {
                let mut b = Mat::zeros(2 * n, 2 * n);
                b.view_mut((n, 0), (n, n)).copy_from(x);
                b
            };
            (k, m.map(lift))
        })
        .collect();
    Ok((gen, betas))
}

// wave equation with resonant frequency set {−2, −1, 1, 2}
fn example3(omega: f64, m: usize) -> Result<ProblemSpec> {
    let grid = Grid::periodic(-10.0, 10.0, m)?;
    let x = grid.points().to_vec();
    let (w2, w4) = (omega * omega, omega.powi(4));
    let c0: Vec<C> = x
        .iter()
        .map(|&x| re(1.0 - x * x - 2.0 * x * x / w4 + x.powi(4) / (2.0 * w2)))
        .collect();
    let a1: Vec<C> = x
        .iter()
        .map(|&x| re((2.0 + x * x * w2 - 4.0 * x * x) / (2.0 * w2)))
        .collect();
    let a2: Vec<C> = x
        .iter()
        .map(|&x| re(-x * x / w4 - x.powi(4) / (4.0 * w2)))
        .collect();
    let mut l = discretize_operator(&Stencil::SecondDerivative, &grid)?.matrix;
    for (j, c) in c0.iter().enumerate() {
        l[(j, j)] += c;
    }
    let alphas = vec![
        (-2, diag(a2.clone())),
        (-1, diag(a1.clone())),
        (1, diag(a1)),
        (2, diag(a2)),
    ];
    let (gen, betas) = wave_first_order_system(&l, alphas)?;
    let ops = Operators::new(SemigroupEvaluator::new(gen), betas)?;
    let mut u0 = Vector::zeros(2 * m);
    for (j, &xj) in x.iter().enumerate() {
        u0[j] = re((-xj * xj * (0.5 + 1.0 / w2)).exp());
    }
    let xs = x.clone();
    Ok(ProblemSpec {
        name: "example 3".into(),
        ops,
        u0,
        t: 1.0,
        frequencies: vec![-2, -1, 1, 2],
        weights: grid.weights(),
        observed: m,
        exact: Some(Arc::new(move |t, w| {
            Vector::from_iterator(xs.len(), xs.iter().map(|&x| exact_ex3(x, t, w)))
        })),
        grid: Some(grid),
        omega_dependent: true,
    })
}

/// Coefficient of sin(x) in the exact solution.
pub fn exact_ex4(t: f64, omega: f64) -> C {
    (re(t) - C::new(0.0, 1.0) * C::new(0.0, omega * t).exp() / omega).exp()
}

// ∂ₜu = ∂ₓₓₓₓu + e^{iωt}u on (0, π) in the sine basis sin(kx), k = 1..K
fn example4(omega: f64, k: usize) -> Result<ProblemSpec> {
    if k == 0 {
        return Err(MfeError::Invalid("need at least one mode".into()));
    }
    let l = Mat::from_diagonal(&Vector::from_fn(k, |i, _| re(((i + 1) as f64).powi(4))));
    let gen = GeneratorMatrix::new(l, SymmetryHint::Normal)?;
    let ops = Operators::new(
        SemigroupEvaluator::new(gen),
        vec![(1, Multiplier::dense(Mat::identity(k, k)))],
    )?;
    let mut u0 = Vector::zeros(k);
    u0[0] = C::new(0.0, -1.0 / omega).exp();
    Ok(ProblemSpec {
        name: "example 4".into(),
        ops,
        u0,
        t: 1.0,
        frequencies: vec![1],
        grid: None,
        weights: vec![PI / 2.0; k],
        observed: k,
        exact: Some(Arc::new(move |t, w| {
            let mut v = Vector::zeros(k);
            v[0] = exact_ex4(t, w);
            v
        })),
        omega_dependent: true,
    })
}

/// Closed-form solution of a worked example sampled on its default grid of size m.
pub fn exact_solution(id: u8, omega: f64, t: f64, m: usize) -> Result<Vector> {
    match id {
        1 => Ok(Grid::dirichlet(-1.0, 1.0, m)?.sample(|x| exact_ex1(x, t, omega))),
        2 => Ok(Grid::dirichlet(0.0, 2.0 * PI, m)?.sample(|x| exact_ex2(x, t, omega))),
        3 => Ok(Grid::periodic(-10.0, 10.0, m)?.sample(|x| exact_ex3(x, t, omega))),
        4 => {
            let mut v = Vector::zeros(m.max(1));
            v[0] = exact_ex4(t, omega);
            Ok(v)
        }
        other => Err(MfeError::Invalid(format!("unknown example id {other}"))),
    }
}

/// Random test system: generator, one multiplier per frequency and u0.
///
/// `normal` gives a skew-Hermitian generator shifted by −0.2 (eigen path);
/// otherwise L is a general complex matrix (Padé path).
pub fn random_system(
    seed: u64,
    dim: usize,
    freqs: &[i64],
    normal: bool,
) -> Result<(Operators, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = |scale: f64| {
        Mat::from_fn(dim, dim, |_, _| {
            C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale
        })
    };
    let h = rand_mat(1.0);
    let (l, hint) = if normal {
        (
            (&h - h.adjoint()) * re(0.5) - Mat::identity(dim, dim) * re(0.2),
            SymmetryHint::Normal,
        )
    } else {
        (h * re(0.5), SymmetryHint::General)
    };
    let s = SemigroupEvaluator::new(GeneratorMatrix::new(l, hint)?);
    let mut alphas = Vec::new();
    for &f in freqs {
        alphas.push((f, Multiplier::dense(rand_mat(1.0 / (dim as f64).sqrt()))));
    }
    let u0 = rand_mat(1.0).column(0).into_owned();
    Ok((Operators::new(s, alphas)?, u0))
}

/// Random multiplier with an analytic τ-profile α(τ) = A + B sin(τ) + C τ².
pub fn random_time_dependent(seed: u64, dim: usize) -> Multiplier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = || {
        Mat::from_fn(dim, dim, |_, _| {
            C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    };
    let (a, b, c) = (rand_mat(), rand_mat(), rand_mat());
    Multiplier::time_dependent(dim, 8, move |tau, j| {
        let s = match j % 4 {
            0 => tau.sin(),
            1 => tau.cos(),
            2 => -tau.sin(),
            _ => -tau.cos(),
        };
        let poly = match j {
            0 => tau * tau,
            1 => 2.0 * tau,
            2 => 2.0,
            _ => 0.0,
        };
        let base = if j == 0 {
            a.clone()
        } else {
            Mat::zeros(dim, dim)
        };
        base + &b * re(s) + &c * re(poly)
    })
}

#[derive(Debug, Clone)]
pub struct OracleValue {
    pub value: Vector,
    /// difference between the two finest passes
    pub estimate: f64,
}

/// Default ceiling on integrand evaluations for the nested quadrature.
pub const DEFAULT_NODE_BUDGET: usize = 40_000_000;

// W_j(s) = ∫_0^s e^{(s−τ)L} α_j(τ) e^{iωn_jτ} W_{j−1}(τ) dτ with W_0(τ) = e^{τL}u0
fn nested(
    j: usize,
    s: f64,
    n: &[i64],
    omega: f64,
    nodes: usize,
    ops: &Operators,
    u0: &Vector,
) -> Result<Vector> {
    let sg = ops.semigroup();
    if j == 0 {
        return sg.apply(s, u0);
    }
    let mut acc = Vector::zeros(u0.len());
    if s == 0.0 {
        return Ok(acc);
    }
    let rule = gauss_legendre(nodes).on(0.0, s);
    let alpha = ops.alpha(n[j - 1])?;
    for (tau, w) in rule.nodes.iter().zip(&rule.weights) {
        let inner = nested(j - 1, *tau, n, omega, nodes, ops, u0)?;
        let a = if alpha.is_static() {
            alpha.value() * inner
        } else {
            alpha.at(*tau) * inner
        };
        let phase = C::new(0.0, omega * n[j - 1] as f64 * tau).exp();
        acc += sg.apply(s - tau, &a)? * (phase * w);
    }
    Ok(acc)
}

/// I[F_n, σ_d(t)] u0 by iterated Gauss–Legendre, checked by doubling the nodes.
///
/// `nodes_per_dim` defaults to ten points per period of the fastest phase.
pub fn brute_force_simplex_integral(
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    nodes_per_dim: Option<usize>,
    ops: &Operators,
    u0: &Vector,
    budget: usize,
) -> Result<OracleValue> {
    let d = n.dim();
    if d > 3 {
        return Err(MfeError::Unsupported(format!(
            "nested quadrature handles d <= 3, got {d}"
        )));
    }
    let fastest = n.entries().iter().map(|x| x.abs()).sum::<i64>() as f64;
    let base = nodes_per_dim.unwrap_or_else(|| oscillatory_nodes(omega, fastest, t, 24));
    let fine = 2 * base;
    let cost = (fine as f64).powi(d as i32) + (base as f64).powi(d as i32);
    if cost > budget as f64 {
        return Err(MfeError::Budget(format!(
            "{base} nodes per dimension at d = {d} exceeds {budget} evaluations"
        )));
    }
    let coarse = nested(d, t, n.entries(), omega, base, ops, u0)?;
    let value = nested(d, t, n.entries(), omega, fine, ops, u0)?;
    let estimate = (&value - &coarse).norm();
    Ok(OracleValue { value, estimate })
}

/// Same integral, exactly, as a finite sum of exponentials.
///
/// Needs a unitarily diagonalizable generator, static multipliers and a
/// nonresonant n. In eigen coordinates every W_j is Σ_S Σ_p C_S[·, p] e^{(λ_p + iωS)s}
/// and each integration step only divides by λ_p − λ_i + iωS.
pub fn spectral_simplex_integral(
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    ops: &Operators,
    u0: &Vector,
) -> Result<Vector> {
    if !ops.autonomous() {
        return Err(MfeError::Unsupported(
            "exponential sums need static multipliers".into(),
        ));
    }
    if !nonresonant(n) {
        return Err(MfeError::Unsupported(
            "exponential sums need a nonresonant vector".into(),
        ));
    }
    let (q, lambda) = ops
        .semigroup()
        .eigen()
        .ok_or_else(|| MfeError::Unsupported("generator is not unitarily diagonalizable".into()))?;
    let dim = lambda.len();
    let y0 = q.ad_mul(u0);
    let mut terms: BTreeMap<i64, Mat> = BTreeMap::new();
    terms.insert(0, Mat::from_diagonal(&y0));
    for &nj in n.entries() {
        let b = q.adjoint() * ops.alpha(nj)?.value() * &q;
        let mut next: BTreeMap<i64, Mat> = BTreeMap::new();
        let mut diag_part = Vector::zeros(dim);
        for (s, c) in &terms {
            let g = &b * c;
            let s2 = s + nj;
            let shift = C::new(0.0, omega * s2 as f64);
            let mut h = Mat::zeros(dim, dim);
            for i in 0..dim {
                for p in 0..dim {
                    if g[(i, p)] == ZERO {
                        continue;
                    }
                    let delta = lambda[p] - lambda[i] + shift;
                    if delta.norm() < 1e-9 * (1.0 + omega) {
                        return Err(MfeError::Accuracy(format!(
                            "near-zero divisor {delta} at S = {s2}"
                        )));
                    }
                    let v = g[(i, p)] / delta;
                    h[(i, p)] = v;
                    diag_part[i] -= v;
                }
            }
            *next.entry(s2).or_insert_with(|| Mat::zeros(dim, dim)) += h;
        }
        let zero = next.entry(0).or_insert_with(|| Mat::zeros(dim, dim));
        for i in 0..dim {
            zero[(i, i)] += diag_part[i];
        }
        terms = next;
    }
    let mut y = Vector::zeros(dim);
    for (s, c) in &terms {
        let e = Vector::from_iterator(
            dim,
            lambda
                .iter()
                .map(|l| (l * t + C::new(0.0, omega * t * *s as f64)).exp()),
        );
        y += c * e;
    }
    Ok(q * y)
}

/// Simplex integral through the cheapest oracle that applies.
pub fn simplex_integral(
    n: &FrequencyVector,
    t: f64,
    omega: f64,
    ops: &Operators,
    u0: &Vector,
    budget: usize,
) -> Result<Vector> {
    match spectral_simplex_integral(n, t, omega, ops, u0) {
        Ok(v) => Ok(v),
        Err(MfeError::Unsupported(_)) | Err(MfeError::Accuracy(_)) => {
            Ok(brute_force_simplex_integral(n, t, omega, None, ops, u0, budget)?.value)
        }
        Err(e) => Err(e),
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

/// T^d e^{tL} u0 = Σ_{n ∈ freqs^d} I[F_n, σ_d(t)] u0.
pub fn neumann_layer(
    d: usize,
    t: f64,
    omega: f64,
    ops: &Operators,
    freqs: &[i64],
    u0: &Vector,
    budget: usize,
) -> Result<Vector> {
    if d == 0 {
        return ops.semigroup().apply(t, u0);
    }
    let mut acc = Vector::zeros(u0.len());
    for v in tuples(freqs, d) {
        acc += simplex_integral(&FrequencyVector::new(v)?, t, omega, ops, u0, budget)?;
    }
    Ok(acc)
}

/// u^[r](t) = Σ_{d ≤ r} T^d e^{tL} u0.
pub fn neumann_partial_sum(
    r: usize,
    t: f64,
    omega: f64,
    ops: &Operators,
    freqs: &[i64],
    u0: &Vector,
    budget: usize,
) -> Result<Vector> {
    let mut acc = Vector::zeros(u0.len());
    for d in 0..=r {
        acc += neumann_layer(d, t, omega, ops, freqs, u0, budget)?;
    }
    Ok(acc)
}

fn spectral_norm(m: &Mat) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// M^{d+1} C^d t^d / d! ‖u0‖ with M = max_τ ‖e^{τL}‖ on a grid of [0, t] and
/// C = Σ_n ‖α_n‖, the a-priori bound on ‖T^d e^{tL} u0‖.
pub fn neumann_term_bound(d: usize, t: f64, ops: &Operators, u0: &Vector) -> Result<f64> {
    let mut m: f64 = 1.0;
    for j in 0..=64 {
        let tau = t * j as f64 / 64.0;
        m = m.max(spectral_norm(&*ops.semigroup().matrix(tau)?));
    }
    let mut c = 0.0;
    for n in ops.frequencies() {
        c += spectral_norm(ops.alpha(n)?.value());
    }
    let fact: f64 = (1..=d).map(|k| k as f64).product();
    Ok(m.powi(d as i32 + 1) * c.powi(d as i32) * t.powi(d as i32) / fact * u0.norm())
}

/// Ceiling on Lawson steps across all refinement passes.
pub const DEFAULT_STEP_BUDGET: usize = 1 << 22;

fn potential(
    ops: &Operators,
    statics: &[(i64, Option<Mat>)],
    tau: f64,
    omega: f64,
    u: &Vector,
) -> Result<Vector> {
    let mut out = Vector::zeros(u.len());
    for (n, m) in statics {
        let phase = C::new(0.0, *n as f64 * omega * tau).exp();
        let v = match m {
            Some(m) => m * u,
            None => ops.alpha(*n)?.at(tau) * u,
        };
        out += v * phase;
    }
    Ok(out)
}

fn lawson(ops: &Operators, u0: &Vector, omega: f64, t: f64, steps: usize) -> Result<Vector> {
    let h = t / steps as f64;
    let s = ops.semigroup();
    let e = s.matrix(h)?;
    let e2 = s.matrix(h / 2.0)?;
    let statics: Vec<(i64, Option<Mat>)> = ops
        .frequencies()
        .into_iter()
        .map(|n| {
            let a = ops.alpha(n).expect("registered");
            (n, a.is_static().then(|| a.value().clone()))
        })
        .collect();
    let hc = re(h);
    let mut u = u0.clone();
    for step in 0..steps {
        let tau = step as f64 * h;
        let k1 = potential(ops, &statics, tau, omega, &u)?;
        let k2 = potential(
            ops,
            &statics,
            tau + h / 2.0,
            omega,
            &(&*e2 * (&u + &k1 * (hc / 2.0))),
        )?;
        let k3 = potential(
            ops,
            &statics,
            tau + h / 2.0,
            omega,
            &(&*e2 * &u + &k2 * (hc / 2.0)),
        )?;
        let k4 = potential(ops, &statics, tau + h, omega, &(&*e * &u + &*e2 * &k3 * hc))?;
        u = &*e * (&u + &k1 * (hc / 6.0)) + &*e2 * (k2 + k3) * (hc / 3.0) + k4 * (hc / 6.0);
    }
    Ok(u)
}

/// Full system u′ = Lu + Σ_n α_n(τ) e^{inωτ} u by integrating-factor RK4.
///
/// Step sizes start at h ≤ 1/(4ω) and halve until the Richardson estimate of
/// two passes drops below `tol` (relative to max(1, ‖u‖)).
pub fn reference_solve(
    ops: &Operators,
    u0: &Vector,
    omega: f64,
    t: f64,
    tol: f64,
    budget: usize,
) -> Result<OracleValue> {
    if tol < 1e-12 {
        return Err(MfeError::Invalid(format!("tolerance {tol} below 1e-12")));
    }
    if t == 0.0 {
        return Ok(OracleValue {
            value: u0.clone(),
            estimate: 0.0,
        });
    }
    let mut steps = ((4.0 * omega.max(1.0) * t).ceil() as usize).max(16);
    let mut used = steps;
    let mut prev = lawson(ops, u0, omega, t, steps)?;
    loop {
        steps *= 2;
        used += steps;
        if used > budget {
            return Err(MfeError::Budget(format!(
                "reference integrator needs more than {budget} steps"
            )));
        }
        let next = lawson(ops, u0, omega, t, steps)?;
        let diff = &next - &prev;
        let estimate = diff.norm() / 15.0;
        if estimate <= tol * next.norm().max(1.0) {
            return Ok(OracleValue {
                value: next + diff / re(15.0),
                estimate,
            });
        }
        prev = next;
    }
}

/// ½(‖v‖² + ‖∂ₓu‖²) on a periodic grid, with ‖∂ₓu‖² = −⟨u, D₂u⟩.
pub fn wave_energy(state: &Vector, d2: &Mat, h: f64) -> f64 {
    let n = state.len() / 2;
    let u = state.rows(0, n);
    let v = state.rows(n, n);
    let grad = -(u.adjoint() * (d2 * u))[(0, 0)].re;
    0.5 * h * (v.norm_squared() + grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::FrequencyVector;
    use crate::operator_core::ONE;

    fn fv(v: &[i64]) -> FrequencyVector {
        FrequencyVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_potential_integral_vanishes() {
        let (base, u0) = random_system(1, 5, &[1], true).unwrap();
        let ops = Operators::new(
            base.semigroup().clone(),
            vec![(1, Multiplier::dense(Mat::zeros(5, 5)))],
        )
        .unwrap();
        let v = brute_force_simplex_integral(
            &fv(&[1, 1]),
            1.0,
            20.0,
            None,
            &ops,
            &u0,
            DEFAULT_NODE_BUDGET,
        )
        .unwrap();
        assert_eq!(v.value.norm(), 0.0);
    }

    #[test]
    fn scalar_antiderivative() {
        let s = SemigroupEvaluator::new(
            GeneratorMatrix::new(Mat::zeros(3, 3), SymmetryHint::Normal).unwrap(),
        );
        let ops = Operators::new(s, vec![(1, Multiplier::dense(Mat::identity(3, 3)))]).unwrap();
        let u0 = Vector::from_vec(vec![ONE, re(2.0), C::new(0.0, 1.0)]);
        let (t, w) = (1.7, 30.0);
        let want = &u0 * ((C::new(0.0, w * t).exp() - ONE) / C::new(0.0, w));
        let got =
            brute_force_simplex_integral(&fv(&[1]), t, w, None, &ops, &u0, DEFAULT_NODE_BUDGET)
                .unwrap();
        assert!((&got.value - &want).norm() < 1e-13);
        let exact = spectral_simplex_integral(&fv(&[1]), t, w, &ops, &u0).unwrap();
        assert!((&exact - &want).norm() < 1e-13);
    }

    #[test]
    fn nested_quadrature_is_self_consistent() {
        let (ops, u0) = random_system(2, 8, &[1, 2], true).unwrap();
        let v = brute_force_simplex_integral(
            &fv(&[1, 2]),
            1.0,
            50.0,
            None,
            &ops,
            &u0,
            DEFAULT_NODE_BUDGET,
        )
        .unwrap();
        assert!(v.estimate < 1e-9, "{}", v.estimate);
    }

    #[test]
    fn exponential_sums_match_quadrature() {
        let (ops, u0) = random_system(3, 6, &[1, 2, -1], true).unwrap();
        for (n, w) in [
            (vec![2], 40.0),
            (vec![1, 2], 40.0),
            (vec![2, -1], 40.0),
            (vec![1, 1, 2], 12.0),
        ] {
            let n = fv(&n);
            let a = spectral_simplex_integral(&n, 0.8, w, &ops, &u0).unwrap();
            let b = brute_force_simplex_integral(&n, 0.8, w, None, &ops, &u0, DEFAULT_NODE_BUDGET)
                .unwrap();
            assert!(
                (&a - &b.value).norm() < 1e-10 * a.norm().max(1e-3),
                "{:?}",
                n.entries()
            );
        }
        assert!(spectral_simplex_integral(&fv(&[1, -1]), 0.8, 40.0, &ops, &u0).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let (ops, u0) = random_system(4, 4, &[1], true).unwrap();
        let r = brute_force_simplex_integral(&fv(&[1, 1, 1]), 1.0, 500.0, None, &ops, &u0, 1000);
        assert!(matches!(r, Err(MfeError::Budget(_))));
        assert!(
            brute_force_simplex_integral(&fv(&[1, 1, 1, 1]), 1.0, 5.0, None, &ops, &u0, 1000)
                .is_err()
        );
    }

    #[test]
    fn neumann_zeroth_term_and_additivity() {
        let (ops, u0) = random_system(5, 5, &[1, 2], true).unwrap();
        let (t, w) = (0.6, 30.0);
        let u_0 = neumann_partial_sum(0, t, w, &ops, &[1, 2], &u0, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(u_0, ops.semigroup().apply(t, &u0).unwrap());
        let u1 = neumann_partial_sum(1, t, w, &ops, &[1, 2], &u0, DEFAULT_NODE_BUDGET).unwrap();
        let u2 = neumann_partial_sum(2, t, w, &ops, &[1, 2], &u0, DEFAULT_NODE_BUDGET).unwrap();
        let layer = neumann_layer(2, t, w, &ops, &[1, 2], &u0, DEFAULT_NODE_BUDGET).unwrap();
        assert!((&u2 - &u1 - &layer).norm() <= 1e-15 * u2.norm());
    }

    #[test]
    fn free_evolution_matches_semigroup() {
        let (base, u0) = random_system(6, 6, &[1], false).unwrap();
        let ops = Operators::new(
            base.semigroup().clone(),
            vec![(1, Multiplier::dense(Mat::zeros(6, 6)))],
        )
        .unwrap();
        let v = reference_solve(&ops, &u0, 10.0, 1.0, 1e-12, DEFAULT_STEP_BUDGET).unwrap();
        let want = ops.semigroup().apply(1.0, &u0).unwrap();
        assert!((&v.value - &want).norm() < 1e-11 * want.norm());
    }

    #[test]
    fn reference_solver_reproduces_example2() {
        let p = example(2, 100.0, 32).unwrap();
        let v = reference_solve(&p.ops, &p.u0, 100.0, 5.0, 1e-12, DEFAULT_STEP_BUDGET).unwrap();
        let exact = p.exact_at(5.0, 100.0).unwrap();
        let err = p.l2_error(&v.value, &exact);
        assert!(err < 1e-9, "{err}");
        let loose = reference_solve(&p.ops, &p.u0, 100.0, 5.0, 1e-10, DEFAULT_STEP_BUDGET).unwrap();
        assert!((&loose.value - &v.value).norm() <= loose.estimate * 10.0 + 1e-12);
    }

    #[test]
    fn exact_solutions_match_initial_data() {
        let w = 30.0;
        let p4 = example(4, w, 4).unwrap();
        assert!((p4.exact_at(0.0, w).unwrap() - &p4.u0).norm() < 1e-15);
        let p3 = example(3, w, 64).unwrap();
        assert!((p3.exact_at(0.0, w).unwrap() - p3.observe(&p3.u0)).norm() < 1e-15);
        assert_eq!(exact_ex1(1.0, 0.7, w), ZERO);
        assert_eq!(exact_ex1(-1.0, 0.7, w), ZERO);
        let p1 = example(1, w, 32).unwrap();
        assert!((p1.exact_at(0.0, w).unwrap() - &p1.u0).norm() < 1e-15);
        let p2 = example(2, w, 16).unwrap();
        assert!((p2.exact_at(0.0, w).unwrap() - &p2.u0).norm() < 1e-14);
        assert!(example(9, w, 8).is_err());
        assert!(exact_solution(5, w, 0.0, 8).is_err());
    }

    #[test]
    fn wave_block_structure() {
        let l = Mat::from_fn(3, 3, |i, j| re((i * 3 + j) as f64));
        let a = Mat::from_diagonal(&Vector::from_vec(vec![re(2.0), re(3.0), re(5.0)]));
        let (gen, betas) = wave_first_order_system(
            &l,
            vec![
                (1, Multiplier::dense(a.clone())),
                (-1, Multiplier::dense(a.clone())),
            ],
        )
        .unwrap();
        let u = Vector::from_vec(vec![ONE, re(2.0), re(3.0)]);
        let v = Vector::from_vec(vec![re(-1.0), re(4.0), re(0.5)]);
        let mut uv = Vector::zeros(6);
        uv.rows_mut(0, 3).copy_from(&u);
        uv.rows_mut(3, 3).copy_from(&v);
        let out = &gen.matrix * &uv;
        assert_eq!(out.rows(0, 3).into_owned(), v);
        assert_eq!(out.rows(3, 3).into_owned(), &l * &u);
        for (_, b) in &betas {
            let bo = b.value() * &uv;
            assert_eq!(bo.rows(0, 3).norm(), 0.0);
            assert_eq!(bo.rows(3, 3).into_owned(), &a * &u);
            for (_, c) in &betas {
                assert_eq!((b.value() * c.value()).norm(), 0.0);
            }
        }
    }

    #[test]
    fn wave_energy_is_conserved() {
        let grid = Grid::periodic(-10.0, 10.0, 64).unwrap();
        let d2 = discretize_operator(&Stencil::SecondDerivative, &grid)
            .unwrap()
            .matrix;
        let (gen, _) = wave_first_order_system(&d2, vec![]).unwrap();
        let s = SemigroupEvaluator::new(gen);
        let mut state = Vector::zeros(128);
        for (j, &x) in grid.points().iter().enumerate() {
            state[j] = re((-x * x).exp());
            state[64 + j] = re(x * (-x * x / 2.0).exp());
        }
        let e0 = wave_energy(&state, &d2, grid.spacing());
        for k in 1..=10 {
            let e = wave_energy(
                &s.apply(k as f64 / 10.0, &state).unwrap(),
                &d2,
                grid.spacing(),
            );
            assert!((e - e0).abs() < 1e-8 * e0, "{e} vs {e0}");
        }
    }

    #[test]
    fn factorial_bound_holds() {
        let (ops, u0) = random_system(7, 6, &[1, 2], true).unwrap();
        for d in 1..=3 {
            let layer =
                neumann_layer(d, 1.0, 25.0, &ops, &[1, 2], &u0, DEFAULT_NODE_BUDGET).unwrap();
            assert!(layer.norm() <= neumann_term_bound(d, 1.0, &ops, &u0).unwrap());
        }
    }
}
