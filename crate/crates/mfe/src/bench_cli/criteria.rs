//! The verification suite behind `mfe verify` and the acceptance test.

use std::time::{Duration, Instant};

use num_complex::Complex64 as C;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_order, published_table, two_point_order, TABLE_OMEGAS};
use crate::combinatorics::{
    a_coefficient, a_coefficient_recursive, check_single_edge, cyclic_rotations, nonresonant,
    phi_family, resonance_coefficient, FrequencyVector, MultiIndex, PhiVector, Rational,
};
use crate::error::Result;
use crate::mfe_engine::{
    assemble_expansion, closed_form_s3, error_term_recursive, partial_sum_s, Operators,
};
use crate::operator_core::{oscillatory_derivative, Mat, Multiplier, Vector};
use crate::reference_oracle::{
    brute_force_simplex_integral, default_size, example, neumann_layer, neumann_partial_sum,
    neumann_term_bound, random_system, random_time_dependent, reference_solve,
    spectral_simplex_integral, DEFAULT_NODE_BUDGET, DEFAULT_STEP_BUDGET,
};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} criterion {}: {} ({:.1} s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

/// (id, name, time limit in seconds, check)
pub const CRITERIA: [(u8, &str, u64, Check); 8] = [
    (1, "combinatorial exactness", 5, combinatorics_exact),
    (2, "engine vs closed forms", 30, engine_vs_closed_forms),
    (3, "simplex integral = S + E", 300, oracle_identity),
    (4, "asymptotic orders", 600, asymptotic_orders),
    (5, "published tables", 900, published_tables),
    (6, "resonance cancellation", 600, resonance_cancellation),
    (7, "Neumann truncation", 600, neumann_truncation),
    (8, "commutator derivative formula", 120, derivative_formula),
];

pub fn run(id: u8) -> Option<Outcome> {
    let (id, name, limit, check) = *CRITERIA.iter().find(|c| c.0 == id)?;
    let start = Instant::now();
    let res = check();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match res {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed.as_secs_f64() > limit as f64 {
        passed = false;
        detail += &format!("; over the {limit} s limit");
    }
    Some(Outcome {
        id,
        name,
        passed,
        detail,
        elapsed,
    })
}

pub fn run_all() -> Vec<Outcome> {
    CRITERIA.iter().filter_map(|c| run(c.0)).collect()
}

fn fv(v: &[i64]) -> FrequencyVector {
    FrequencyVector::new(v.to_vec()).expect("non-empty")
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn nonzero(rng: &mut ChaCha8Rng, m: i64) -> i64 {
    let v = rng.gen_range(1..=m);
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

fn combinatorics_exact() -> Result<(bool, String)> {
    for d in 1..=10usize {
        let total: usize = (0..=d)
            .map(|l| phi_family(d, l).map(|f| f.len()))
            .sum::<Result<usize>>()?;
        if total != 1 << d {
            return Ok((false, format!("phi families at d = {d} count {total}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut cases = 0;
    while cases < 500 {
        let d = rng.gen_range(1..=6usize);
        let n = FrequencyVector::new((0..d).map(|_| nonzero(&mut rng, 5)).collect())?;
        if !nonresonant(&n) {
            continue;
        }
        let k = MultiIndex::new((0..d).map(|_| rng.gen_range(0..=3)).collect());
        let phi = PhiVector::from_bits((0..d).map(|_| rng.gen_range(0..=1)).collect())?;
        if a_coefficient(&k, &phi, &n)? != a_coefficient_recursive(&k, &phi, &n)? {
            return Ok((
                false,
                format!(
                    "A mismatch at k = {:?}, phi = {:?}, n = {:?}",
                    k.parts(),
                    phi.bits(),
                    n.entries()
                ),
            ));
        }
        cases += 1;
    }
    let mut families = 0;
    while families < 200 {
        let d = rng.gen_range(2..=7usize);
        let mut v: Vec<i64> = (0..d - 1).map(|_| nonzero(&mut rng, 6)).collect();
        let last = -v.iter().sum::<i64>();
        if last == 0 {
            continue;
        }
        v.push(last);
        let n = FrequencyVector::new(v)?;
        if check_single_edge(&n).is_err() {
            continue;
        }
        let sum = cyclic_rotations(&n)
            .iter()
            .map(resonance_coefficient)
            .sum::<Result<Rational>>()?;
        if !sum.is_zero() {
            return Ok((false, format!("rotation sum {sum} for {:?}", n.entries())));
        }
        families += 1;
    }
    Ok((
        true,
        "2^d phi patterns for d <= 10, 500 A coefficients, 200 zero-sum families".into(),
    ))
}

fn random_nonresonant(rng: &mut ChaCha8Rng, d: usize) -> FrequencyVector {
    loop {
        let n = fv(&(0..d).map(|_| nonzero(rng, 3)).collect::<Vec<_>>());
        if nonresonant(&n) {
            return n;
        }
    }
}

fn engine_vs_closed_forms() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst: f64 = 0.0;
    for sys in 0..20u64 {
        let t = rng.gen_range(0.3..1.5);
        let omega = rng.gen_range(20.0..200.0);
        let ns: Vec<FrequencyVector> = (1..=3).map(|d| random_nonresonant(&mut rng, d)).collect();
        let mut freqs: Vec<i64> = ns.iter().flat_map(|n| n.entries().to_vec()).collect();
        freqs.sort_unstable();
        freqs.dedup();
        let (ops, u0) = random_system(1000 + sys, 8, &freqs, sys % 2 == 0)?;
        for n in &ns {
            let got = partial_sum_s(3, n, t, omega, &u0, &ops)?;
            let want = closed_form_s3(n, t, omega, &u0, &ops)?;
            worst = worst.max(rel(&got, &want));
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max relative difference {worst:.2e} (tol 1e-12)"),
    ))
}

fn oracle_identity() -> Result<(bool, String)> {
    let vectors: [&[i64]; 4] = [&[1], &[-2], &[1, 2], &[2, -1]];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, v) in vectors.iter().enumerate() {
        let n = fv(v);
        let (ops, u0) = random_system(300 + i as u64, 8, v, false)?;
        let t = 1.0;
        for omega in [25.0, 50.0, 100.0] {
            let exact =
                brute_force_simplex_integral(&n, t, omega, None, &ops, &u0, DEFAULT_NODE_BUDGET)?;
            for r in n.dim() as u32..=3 {
                let s = partial_sum_s(r, &n, t, omega, &u0, &ops)?;
                let e = error_term_recursive(r, &n, t, omega, &u0, &ops)?;
                worst = worst.max((&exact.value - s - e).norm());
                count += 1;
            }
        }
    }
    Ok((
        worst <= 1e-8,
        format!("{count} cases, max |I - S - E| = {worst:.2e} (tol 1e-8)"),
    ))
}

const ORDER_OMEGAS: [f64; 5] = [50.0, 100.0, 200.0, 400.0, 800.0];

// Norms are taken as a sup over t in (0, 1]. At one fixed t the phases
// e^{isωt} make the ω-slope wander by a few tenths.
fn sup_times(m: usize) -> Vec<f64> {
    (1..=m).map(|j| j as f64 / m as f64).collect()
}

fn asymptotic_orders() -> Result<(bool, String)> {
    let vectors: [&[i64]; 6] = [&[1], &[-2], &[1, 2], &[2, -1], &[1, 1, 2], &[1, -2, 3]];
    let mut ok = true;
    let mut worst_s = f64::INFINITY;
    let mut worst_i = f64::INFINITY;
    let mut notes = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        let n = fv(v);
        let d = n.dim();
        let mut freqs = v.to_vec();
        freqs.sort_unstable();
        freqs.dedup();
        let (ops, u0) = random_system(400 + i as u64, 8, &freqs, true)?;
        let mut integral = Vec::new();
        let mut remainders: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 4];
        for omega in ORDER_OMEGAS {
            let mut sup_i: f64 = 0.0;
            let mut sup_r = [0.0f64; 4];
            for t in sup_times(50) {
                let exact = spectral_simplex_integral(&n, t, omega, &ops, &u0)?;
                sup_i = sup_i.max(exact.norm());
                for r in d..=3 {
                    let s = partial_sum_s(r as u32, &n, t, omega, &u0, &ops)?;
                    sup_r[r] = sup_r[r].max((&exact - s).norm());
                }
            }
            integral.push((omega, sup_i));
            for r in d..=3 {
                remainders[r].push((omega, sup_r[r]));
            }
        }
        let fi = fit_order(&integral)?;
        worst_i = worst_i.min(fi - d as f64);
        if fi < d as f64 - 0.2 {
            ok = false;
            notes.push(format!("|I| order {fi:.2} for n = {v:?}"));
        }
        for r in d..=3 {
            let fr = fit_order(&remainders[r])?;
            worst_s = worst_s.min(fr - r as f64);
            if fr < r as f64 + 0.5 {
                ok = false;
                notes.push(format!("remainder order {fr:.2} at r = {r}, n = {v:?}"));
            }
        }
    }
    let mut detail = format!(
        "min (order - r) of |I - S_r| = {worst_s:.2} (need >= 0.5), min (order - d) of |I| = {worst_i:.2} (need >= -0.2)"
    );
    if !notes.is_empty() {
        detail += &format!("; {}", notes.join("; "));
    }
    Ok((ok, detail))
}

fn table_error(id: u8, omega: f64, r: u32) -> Result<f64> {
    let p = example(id, omega, default_size(id))?;
    let table = assemble_expansion(r, &p)?;
    Ok(p.l2_error(&table.evaluate(omega), &p.exact_at(p.t, omega)?))
}

// distance from the semidiscrete solution to the exact one
fn discretization_floor(id: u8, omega: f64) -> Result<f64> {
    let p = example(id, omega, default_size(id))?;
    let reference = reference_solve(&p.ops, &p.u0, omega, p.t, 1e-12, DEFAULT_STEP_BUDGET)?;
    Ok(p.l2_error(&reference.value, &p.exact_at(p.t, omega)?))
}

/// Within a factor of ten of a printed 3-digit cell, read as the interval it rounds from.
fn within_ten(measured: f64, cell: f64) -> bool {
    let exp = cell.abs().log10().floor();
    let half_ulp = 0.5 * 10f64.powf(exp - 2.0);
    measured >= (cell - half_ulp) / 10.0 && measured <= (cell + half_ulp) * 10.0
}

struct CellCheck {
    line: String,
    passed: bool,
}

fn check_cell(id: u8, omega: f64, r: u32, measured: f64) -> Result<CellCheck> {
    let row = TABLE_OMEGAS
        .iter()
        .position(|w| *w == omega)
        .expect("table omega");
    let cell = published_table(id).expect("table")[row][r as usize];
    if within_ten(measured, cell) {
        return Ok(CellCheck {
            line: format!("ex{id} R{r} w={omega}: {measured:.3e} vs {cell:.2e} ok"),
            passed: true,
        });
    }
    if measured > cell {
        let floor = discretization_floor(id, omega)?;
        if measured <= 2.0 * floor {
            return Ok(CellCheck {
                line: format!("ex{id} R{r} w={omega}: {measured:.3e} at floor {floor:.2e}"),
                passed: true,
            });
        }
    }
    Ok(CellCheck {
        line: format!(
            "ex{id} R{r} w={omega}: {measured:.3e} vs {cell:.2e} ratio {:.1} outside x10",
            cell / measured
        ),
        passed: false,
    })
}

fn order_and_cells(id: u8, r: u32, target: f64) -> Result<(bool, Vec<String>)> {
    let lo = table_error(id, 100.0, r)?;
    let hi = table_error(id, 1000.0, r)?;
    let order = two_point_order(100.0, lo, 1000.0, hi);
    let mut passed = (order - target).abs() <= 0.5;
    let mut lines = vec![format!(
        "ex{id} R{r} order {order:.3} (published {target:.2})"
    )];
    for (w, m) in [(100.0, lo), (1000.0, hi)] {
        let c = check_cell(id, w, r, m)?;
        passed &= c.passed;
        lines.push(c.line);
    }
    Ok((passed, lines))
}

fn published_tables() -> Result<(bool, String)> {
    let published_order = |id: u8, r: usize| {
        let t = published_table(id).expect("table");
        two_point_order(100.0, t[1][r], 1000.0, t[2][r])
    };
    let mut ok = true;
    let mut lines = Vec::new();
    for (id, r) in [(1u8, 2u32), (2, 2), (4, 1)] {
        let (p, l) = order_and_cells(id, r, published_order(id, r as usize))?;
        ok &= p;
        lines.extend(l);
    }
    Ok((ok, lines.join("; ")))
}

fn resonance_cancellation() -> Result<(bool, String)> {
    let omegas = [25.0, 50.0, 100.0, 200.0, 400.0];
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in [600u64, 601] {
        // the cancellation needs commuting multipliers, as multiplication operators are
        let (base, u0) = random_system(seed, 8, &[], true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut diag = || {
            Multiplier::diagonal(&Vector::from_fn(8, |_, _| {
                C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }))
        };
        let ops = Operators::new(base.semigroup().clone(), vec![(-1, diag()), (1, diag())])?;
        let (mut a, mut b, mut pair) = (Vec::new(), Vec::new(), Vec::new());
        for omega in omegas {
            let ia = brute_force_simplex_integral(
                &fv(&[-1, 1]),
                1.0,
                omega,
                None,
                &ops,
                &u0,
                DEFAULT_NODE_BUDGET,
            )?;
            let ib = brute_force_simplex_integral(
                &fv(&[1, -1]),
                1.0,
                omega,
                None,
                &ops,
                &u0,
                DEFAULT_NODE_BUDGET,
            )?;
            a.push((omega, ia.value.norm()));
            b.push((omega, ib.value.norm()));
            pair.push((omega, (ia.value + ib.value).norm()));
        }
        let (fa, fb, fp) = (fit_order(&a)?, fit_order(&b)?, fit_order(&pair)?);
        ok &= fa <= 1.2 && fb <= 1.2 && fp >= 1.8;
        lines.push(format!(
            "seed {seed}: orders {fa:.2}, {fb:.2}, pair {fp:.2}"
        ));
    }
    let measured = table_error(3, 1000.0, 2)?;
    let c = check_cell(3, 1000.0, 2, measured)?;
    ok &= c.passed;
    lines.push(c.line);
    Ok((ok, lines.join("; ")))
}

fn neumann_truncation() -> Result<(bool, String)> {
    let mut ok = true;
    let mut lines = Vec::new();
    let times = sup_times(200);
    for r in 0..=2usize {
        let mut pts = Vec::new();
        for omega in ORDER_OMEGAS {
            let p = example(4, omega, default_size(4))?;
            let mut sup: f64 = 0.0;
            for &t in &times {
                let approx = neumann_partial_sum(
                    r,
                    t,
                    omega,
                    &p.ops,
                    &p.frequencies,
                    &p.u0,
                    DEFAULT_NODE_BUDGET,
                )?;
                sup = sup.max(p.l2_error(&approx, &p.exact_at(t, omega)?));
            }
            pts.push((omega, sup));
        }
        let f = fit_order(&pts)?;
        ok &= f >= r as f64 + 0.5;
        lines.push(format!("r = {r}: order {f:.2}"));
    }
    let mut worst: f64 = 0.0;
    let mut systems =
        vec![example(4, 10.0, default_size(4)).map(|p| (p.ops, p.u0, p.frequencies))?];
    for seed in 0..3u64 {
        let (ops, u0) = random_system(700 + seed, 6, &[1, 2], true)?;
        systems.push((ops, u0, vec![1, 2]));
    }
    for (ops, u0, freqs) in &systems {
        for d in 1..=4usize {
            for t in [0.5, 1.0] {
                let bound = neumann_term_bound(d, t, ops, u0)?;
                for omega in [1.0, 5.0, 50.0] {
                    let term =
                        neumann_layer(d, t, omega, ops, freqs, u0, DEFAULT_NODE_BUDGET)?.norm();
                    worst = worst.max(term / bound);
                }
            }
        }
    }
    ok &= worst <= 1.0;
    lines.push(format!("factorial bound: max term/bound {worst:.3}"));
    Ok((ok, lines.join("; ")))
}

fn derivative_formula() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for seed in 0..5u64 {
        let (ops, _) = random_system(800 + seed, 6, &[1], false)?;
        let s = ops.semigroup();
        let alpha = random_time_dependent(900 + seed, 6);
        let (t, tau) = (1.0, 0.4);
        let raw = |x: f64| -> Result<Mat> { Ok(&*s.matrix(t - x)? * alpha.at(x) * &*s.matrix(x)?) };
        for k in 1..=3u32 {
            // central difference of the (k−1)-th derivative; k = 1 differences the raw product
            let lower = |x: f64| -> Result<Mat> {
                if k == 1 {
                    raw(x)
                } else {
                    oscillatory_derivative(s, &alpha, k - 1, t, x)
                }
            };
            let fd = (lower(tau + h)? - lower(tau - h)?) / C::new(2.0 * h, 0.0);
            let exact = oscillatory_derivative(s, &alpha, k, t, tau)?;
            worst = worst.max((&exact - &fd).norm() / exact.norm());
        }
        let fd2 =
            (raw(tau + h)? - raw(tau)? * C::new(2.0, 0.0) + raw(tau - h)?) / C::new(h * h, 0.0);
        let exact2 = oscillatory_derivative(s, &alpha, 2, t, tau)?;
        worst = worst.max((&exact2 - &fd2).norm() / exact2.norm());
    }
    let lo = table_error(2, 100.0, 2)?;
    let hi = table_error(2, 1000.0, 2)?;
    let order = two_point_order(100.0, lo, 1000.0, hi);
    let ok = worst <= 1e-5 && (order - 3.0).abs() <= 0.5;
    Ok((
        ok,
        format!(
            "max relative FD gap {worst:.2e} (tol 1e-5); example 2 R2 order {order:.3} (target 3)"
        ),
    ))
}
