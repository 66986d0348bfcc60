//! Finite-dimensional operators: differentiation matrices, multipliers, the
//! semigroup e^{tL} and nested commutators.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{MfeError, Result};

pub type Mat = DMatrix<C>;
pub type Vector = DVector<C>;

pub const ZERO: C = C::new(0.0, 0.0);
pub const ONE: C = C::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Uniform 1-D grid. Dirichlet grids hold interior points only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    points: Vec<f64>,
    domain: (f64, f64),
    boundary: Boundary,
}

impl Grid {
    pub fn new(points: Vec<f64>, domain: (f64, f64), boundary: Boundary) -> Result<Self> {
        if points.len() < 4 {
            return Err(MfeError::Invalid(format!(
                "grid needs >= 4 points, got {}",
                points.len()
            )));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MfeError::Invalid(
                "grid points must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            points,
            domain,
            boundary,
        })
    }

    /// m interior points of (a, b), boundary rows removed.
    pub fn dirichlet(a: f64, b: f64, m: usize) -> Result<Self> {
        let h = (b - a) / (m as f64 + 1.0);
        Self::new(
            (1..=m).map(|j| a + j as f64 * h).collect(),
            (a, b),
            Boundary::Dirichlet,
        )
    }

    /// m points of [a, b) on the circle.
    pub fn periodic(a: f64, b: f64, m: usize) -> Result<Self> {
        let h = (b - a) / m as f64;
        Self::new(
            (0..m).map(|j| a + j as f64 * h).collect(),
            (a, b),
            Boundary::Periodic,
        )
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn spacing(&self) -> f64 {
        let (a, b) = self.domain;
        match self.boundary {
            Boundary::Dirichlet => (b - a) / (self.len() as f64 + 1.0),
            Boundary::Periodic => (b - a) / self.len() as f64,
        }
    }

    pub fn sample(&self, f: impl Fn(f64) -> C) -> Vector {
        Vector::from_iterator(self.len(), self.points.iter().map(|&x| f(x)))
    }

    /// Quadrature weights of the discrete L² norm. Trapezoid with zero
    /// boundary values and the periodic rectangle rule both reduce to h.
    pub fn weights(&self) -> Vec<f64> {
        vec![self.spacing(); self.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stencil {
    SecondDerivative,
    FourthDerivative,
    /// a(x) ∂ₓₓ + c(x), both sampled on the grid.
    VariableCoeffSecond {
        a: Vec<f64>,
        c: Vec<C>,
    },
}

impl std::str::FromStr for Stencil {
    type Err = MfeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_derivative" => Ok(Self::SecondDerivative),
            "fourth_derivative" => Ok(Self::FourthDerivative),
            other => Err(MfeError::Invalid(format!("unknown stencil '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymmetryHint {
    Normal,
    General,
}

#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub matrix: Mat,
    pub boundary: Option<Boundary>,
    pub hint: SymmetryHint,
    /// Set for first-order wave blocks [[0, I], [L, 0]]; holds L.
    pub wave_inner: Option<Mat>,
}

impl GeneratorMatrix {
    pub fn new(matrix: Mat, hint: SymmetryHint) -> Result<Self> {
        if !matrix.is_square() {
            return Err(MfeError::Invalid("generator must be square".into()));
        }
        if matrix
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(MfeError::Invalid("generator has non-finite entries".into()));
        }
        Ok(Self {
            matrix,
            boundary: None,
            hint,
            wave_inner: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

// V diag(symbol) V with V the orthonormal sine transform on interior points
fn sine_operator(m: usize, len: f64, symbol: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let scale = (2.0 / (m as f64 + 1.0)).sqrt();
    let s = DMatrix::from_fn(m, m, |j, k| {
        scale * (PI * (j as f64 + 1.0) * (k as f64 + 1.0) / (m as f64 + 1.0)).sin()
    });
    let d = DMatrix::from_diagonal(&DVector::from_fn(m, |k, _| {
        symbol((k as f64 + 1.0) * PI / len)
    }));
    &s * d * &s
}

// circulant (1/m) Σ_κ symbol(κ) e^{iκ(x_j − x_l)}, real for even symbols
fn fourier_operator(m: usize, len: f64, symbol: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let h = len / m as f64;
    let half = m / 2;
    let col: Vec<f64> = (0..m)
        .map(|q| {
            let dx = q as f64 * h;
            let mut acc = symbol(0.0);
            for k in 1..=half {
                let kap = 2.0 * PI * k as f64 / len;
                if m % 2 == 0 && k == half {
                    acc += symbol(kap) * (kap * dx).cos();
                } else {
                    acc += 2.0 * symbol(kap) * (kap * dx).cos();
                }
            }
            acc / m as f64
        })
        .collect();
    DMatrix::from_fn(m, m, |j, l| {
        col[(j as isize - l as isize).rem_euclid(m as isize) as usize]
    })
}

fn to_complex(m: &DMatrix<f64>) -> Mat {
    m.map(|x| C::new(x, 0.0))
}

/// Spectral differentiation: sine basis for Dirichlet, Fourier for periodic.
pub fn discretize_operator(stencil: &Stencil, grid: &Grid) -> Result<GeneratorMatrix> {
    let m = grid.len();
    let (a, b) = grid.domain();
    let len = b - a;
    let build = |symbol: &dyn Fn(f64) -> f64| match grid.boundary() {
        Boundary::Dirichlet => sine_operator(m, len, symbol),
        Boundary::Periodic => fourier_operator(m, len, symbol),
    };
    let (matrix, hint) = match stencil {
        Stencil::SecondDerivative => (to_complex(&build(&|k| -k * k)), SymmetryHint::Normal),
        Stencil::FourthDerivative => (to_complex(&build(&|k| k.powi(4))), SymmetryHint::Normal),
        Stencil::VariableCoeffSecond { a, c } => {
            if a.len() != m || c.len() != m {
                return Err(MfeError::Invalid(format!(
                    "coefficient samples ({}, {}) do not match grid size {m}",
                    a.len(),
                    c.len()
                )));
            }
            let d2 = to_complex(&build(&|k| -k * k));
            let mut out = Mat::from_fn(m, m, |j, l| d2[(j, l)] * a[j]);
            for j in 0..m {
                out[(j, j)] += c[j];
            }
            (out, SymmetryHint::General)
        }
    };
    let mut g = GeneratorMatrix::new(matrix, hint)?;
    g.boundary = Some(grid.boundary());
    Ok(g)
}

pub fn commutator(l: &Mat, m: &Mat) -> Mat {
    l * m - m * l
}

/// ad_L^k(M) = [L, ad_L^{k−1}(M)], ad_L^0(M) = M.
pub fn ad_power(l: &Mat, m: &Mat, k: u32) -> Mat {
    let mut x = m.clone();
    for _ in 0..k {
        x = commutator(l, &x);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Eigen,
    Pade,
}

enum Strategy {
    Diagonal(Vec<C>),
    /// L = Q diag(λ) Q*
    Unitary {
        q: Mat,
        lambda: Vec<C>,
    },
    /// block [[0, I], [L, 0]] with L = V diag(λ) V*
    Wave {
        v: Mat,
        lambda: Vec<C>,
    },
    Pade,
}

// quadrature sweeps touch thousands of distinct times; keep only the first few
const CACHE_LIMIT: usize = 64;

#[derive(Clone)]
pub struct SemigroupEvaluator {
    gen: Arc<GeneratorMatrix>,
    strategy: Arc<Strategy>,
    cache: Arc<Mutex<HashMap<u64, Arc<Mat>>>>,
}

impl std::fmt::Debug for SemigroupEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemigroupEvaluator")
            .field("dim", &self.gen.dim())
            .field("method", &self.method())
            .finish()
    }
}

fn frob(m: &Mat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn is_hermitian(m: &Mat) -> bool {
    let scale = frob(m).max(1e-300);
    frob(&(m - m.adjoint())) <= 1e-13 * scale
}

fn is_diagonal(m: &Mat) -> bool {
    m.iter()
        .enumerate()
        .all(|(idx, z)| idx % m.nrows() == idx / m.nrows() || *z == ZERO)
}

fn hermitian_eigen(m: &Mat) -> (Mat, Vec<C>) {
    let h = (m + m.adjoint()) * C::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(h);
    let lambda = eig.eigenvalues.iter().map(|&x| C::new(x, 0.0)).collect();
    (eig.eigenvectors, lambda)
}

fn unitary_eigen(m: &Mat) -> Option<(Mat, Vec<C>)> {
    if is_hermitian(m) {
        return Some(hermitian_eigen(m));
    }
    let (q, t) = nalgebra::Schur::new(m.clone()).unpack();
    let lambda: Vec<C> = (0..t.nrows()).map(|i| t[(i, i)]).collect();
    let resid = m * &q - &q * Mat::from_diagonal(&Vector::from_vec(lambda.clone()));
    (frob(&resid) <= 1e-10 * frob(m).max(1.0)).then_some((q, lambda))
}

// cosh(μt) and sinh(μt)/μ with μ² = λ
fn wave_factors(lambda: C, t: f64) -> (C, C) {
    let mu = lambda.sqrt();
    let z = mu * t;
    if z.norm() < 1e-3 {
        let z2 = z * z;
        let c = ONE + z2 / 2.0 + z2 * z2 / 24.0;
        let s = C::new(t, 0.0) * (ONE + z2 / 6.0 + z2 * z2 / 120.0);
        (c, s)
    } else {
        (z.cosh(), z.sinh() / mu)
    }
}

impl SemigroupEvaluator {
    pub fn new(gen: GeneratorMatrix) -> Self {
        let strategy = Self::pick(&gen);
        Self::with(gen, strategy)
    }

    /// Forces Padé scaling-and-squaring regardless of structure.
    pub fn pade(gen: GeneratorMatrix) -> Self {
        Self::with(gen, Strategy::Pade)
    }

    fn with(gen: GeneratorMatrix, strategy: Strategy) -> Self {
        Self {
            gen: Arc::new(gen),
            strategy: Arc::new(strategy),
            cache: Arc::default(),
        }
    }

    fn pick(gen: &GeneratorMatrix) -> Strategy {
        if let Some(inner) = &gen.wave_inner {
            if is_hermitian(inner) {
                let (v, lambda) = hermitian_eigen(inner);
                return Strategy::Wave { v, lambda };
            }
            return Strategy::Pade;
        }
        if is_diagonal(&gen.matrix) {
            return Strategy::Diagonal(gen.matrix.diagonal().iter().copied().collect());
        }
        if gen.hint == SymmetryHint::Normal {
            if let Some((q, lambda)) = unitary_eigen(&gen.matrix) {
                return Strategy::Unitary { q, lambda };
            }
        }
        Strategy::Pade
    }

    pub fn method(&self) -> Method {
        match *self.strategy {
            Strategy::Pade => Method::Pade,
            _ => Method::Eigen,
        }
    }

    /// (Q, λ) with L = Q diag(λ) Q* when L is diagonal or unitarily diagonalized.
    pub fn eigen(&self) -> Option<(Mat, Vec<C>)> {
        match &*self.strategy {
            Strategy::Diagonal(l) => Some((Mat::identity(l.len(), l.len()), l.clone())),
            Strategy::Unitary { q, lambda } => Some((q.clone(), lambda.clone())),
            _ => None,
        }
    }

    pub fn generator(&self) -> &GeneratorMatrix {
        &self.gen
    }

    pub fn l(&self) -> &Mat {
        &self.gen.matrix
    }

    pub fn dim(&self) -> usize {
        self.gen.dim()
    }

    /// Dense e^{tL}, cached per distinct t.
    pub fn matrix(&self, t: f64) -> Result<Arc<Mat>> {
        if !t.is_finite() {
            return Err(MfeError::Invalid(format!("non-finite time {t}")));
        }
        let key = t.to_bits();
        if let Some(m) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let n = self.dim();
        let m = match &*self.strategy {
            _ if t == 0.0 => Mat::identity(n, n),
            Strategy::Diagonal(l) => {
                Mat::from_diagonal(&Vector::from_iterator(n, l.iter().map(|z| (z * t).exp())))
            }
            Strategy::Unitary { q, lambda } => {
                let e = Vector::from_iterator(n, lambda.iter().map(|z| (z * t).exp()));
                q * Mat::from_diagonal(&e) * q.adjoint()
            }
            Strategy::Wave { v, lambda } => {
                let h = n / 2;
                let (mut c, mut s, mut ls) = (Vec::new(), Vec::new(), Vec::new());
                for &lam in lambda {
                    let (ch, sh) = wave_factors(lam, t);
                    c.push(ch);
                    s.push(sh);
                    ls.push(lam * sh);
                }
                let conj = |d: Vec<C>| v * Mat::from_diagonal(&Vector::from_vec(d)) * v.adjoint();
                let (cb, sb, lb) = (conj(c), conj(s), conj(ls));
                let mut out = Mat::zeros(n, n);
                out.view_mut((0, 0), (h, h)).copy_from(&cb);
                out.view_mut((0, h), (h, h)).copy_from(&sb);
                out.view_mut((h, 0), (h, h)).copy_from(&lb);
                out.view_mut((h, h), (h, h)).copy_from(&cb);
                out
            }
            Strategy::Pade => (&self.gen.matrix * C::new(t, 0.0)).exp(),
        };
        let m = Arc::new(m);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() < CACHE_LIMIT {
            cache.insert(key, m.clone());
        }
        Ok(m)
    }

    /// e^{tL} v. For eigen strategies this never forms the dense matrix.
    pub fn apply(&self, t: f64, v: &Vector) -> Result<Vector> {
        if !t.is_finite() {
            return Err(MfeError::Invalid(format!("non-finite time {t}")));
        }
        if v.len() != self.dim() {
            return Err(MfeError::Invalid(format!(
                "vector length {} vs generator {}",
                v.len(),
                self.dim()
            )));
        }
        if t == 0.0 {
            return Ok(v.clone());
        }
        Ok(match &*self.strategy {
            Strategy::Diagonal(l) => Vector::from_iterator(
                v.len(),
                l.iter()
                    .zip(v.iter())
                    .map(|(z, x)| if *x == ZERO { ZERO } else { (z * t).exp() * x }),
            ),
            Strategy::Unitary { q, lambda } => {
                let mut w = q.ad_mul(v);
                for (wi, z) in w.iter_mut().zip(lambda) {
                    *wi *= (z * t).exp();
                }
                q * w
            }
            Strategy::Wave { v: basis, lambda } => {
                let h = v.len() / 2;
                let a = basis.ad_mul(&v.rows(0, h));
                let b = basis.ad_mul(&v.rows(h, h));
                let mut na = Vector::zeros(h);
                let mut nb = Vector::zeros(h);
                for i in 0..h {
                    let (c, s) = wave_factors(lambda[i], t);
                    na[i] = c * a[i] + s * b[i];
                    nb[i] = lambda[i] * s * a[i] + c * b[i];
                }
                let mut out = Vector::zeros(v.len());
                out.rows_mut(0, h).copy_from(&(basis * na));
                out.rows_mut(h, h).copy_from(&(basis * nb));
                out
            }
            Strategy::Pade => &*self.matrix(t)? * v,
        })
    }

    /// e^{tL} M as a dense matrix.
    pub fn apply_mat(&self, t: f64, m: &Mat) -> Result<Mat> {
        if t == 0.0 {
            return Ok(m.clone());
        }
        Ok(&*self.matrix(t)? * m)
    }
}

/// Time profile of a multiplier: `eval(τ, j)` returns the j-th τ-derivative.
#[derive(Clone)]
pub struct TimeProfile {
    pub depth: usize,
    pub eval: Arc<dyn Fn(f64, usize) -> Mat + Send + Sync>,
}

/// Potential coefficient α_n as an operator; static or τ-dependent.
#[derive(Clone)]
pub struct Multiplier {
    value: Mat,
    profile: Option<TimeProfile>,
}

impl std::fmt::Debug for Multiplier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Multiplier")
            .field("dim", &self.value.nrows())
            .field("time_dependent", &self.profile.is_some())
            .finish()
    }
}

impl Multiplier {
    pub fn diagonal(d: &Vector) -> Self {
        Self {
            value: Mat::from_diagonal(d),
            profile: None,
        }
    }

    pub fn dense(value: Mat) -> Self {
        Self {
            value,
            profile: None,
        }
    }

    /// `depth` derivatives (α, α′, …, α^{(depth−1)}) are available from `eval`.
    pub fn time_dependent(
        dim: usize,
        depth: usize,
        eval: impl Fn(f64, usize) -> Mat + Send + Sync + 'static,
    ) -> Self {
        let eval: Arc<dyn Fn(f64, usize) -> Mat + Send + Sync> = Arc::new(eval);
        let value = eval(0.0, 0);
        assert_eq!(value.nrows(), dim, "profile dimension");
        Self {
            value,
            profile: Some(TimeProfile { depth, eval }),
        }
    }

    pub fn is_static(&self) -> bool {
        self.profile.is_none()
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }

    /// Value for static multipliers; α(0) otherwise.
    pub fn value(&self) -> &Mat {
        &self.value
    }

    pub fn at(&self, tau: f64) -> Mat {
        match &self.profile {
            None => self.value.clone(),
            Some(p) => (p.eval)(tau, 0),
        }
    }

    /// α^{(j)}(τ); `None` for an identically zero derivative.
    pub fn derivative(&self, tau: f64, j: usize) -> Result<Option<Mat>> {
        match &self.profile {
            None => Ok((j == 0).then(|| self.value.clone())),
            Some(p) if j < p.depth => Ok(Some((p.eval)(tau, j))),
            Some(p) => Err(MfeError::Invalid(format!(
                "derivative stack holds {} entries, order {j} requested",
                p.depth
            ))),
        }
    }

    /// Multiply every derivative by the same constant matrix on the left or right.
    pub fn map(&self, f: impl Fn(&Mat) -> Mat + Send + Sync + Clone + 'static) -> Self {
        match &self.profile {
            None => Self::dense(f(&self.value)),
            Some(p) => {
                let inner = p.eval.clone();
                let g = f.clone();
                Self {
                    value: f(&self.value),
                    profile: Some(TimeProfile {
                        depth: p.depth,
                        eval: Arc::new(move |t, j| g(&inner(t, j))),
                    }),
                }
            }
        }
    }
}

pub fn binomial(k: u32, l: u32) -> f64 {
    (0..l).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64)
}

/// ∂_τ^k (e^{(t−τ)L} α(τ) e^{τL}) = Σ_ℓ (−1)^ℓ C(k,ℓ) e^{(t−τ)L} ad_L^ℓ(α^{(k−ℓ)}(τ)) e^{τL}.
pub fn oscillatory_derivative(
    s: &SemigroupEvaluator,
    alpha: &Multiplier,
    k: u32,
    t: f64,
    tau: f64,
) -> Result<Mat> {
    if let Some(p) = &alpha.profile {
        if p.depth <= k as usize {
            return Err(MfeError::Invalid(format!(
                "derivative stack depth {} too shallow for k = {k}",
                p.depth
            )));
        }
    }
    let n = s.dim();
    let mut inner = Mat::zeros(n, n);
    for l in 0..=k {
        if let Some(d) = alpha.derivative(tau, (k - l) as usize)? {
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            inner += ad_power(s.l(), &d, l) * C::new(sign * binomial(k, l), 0.0);
        }
    }
    let left = s.matrix(t - tau)?;
    let right = s.matrix(tau)?;
    Ok(&*left * inner * &*right)
}
