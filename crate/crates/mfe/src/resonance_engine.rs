//! Frequency vectors on the long edge of the simplex: n_1 + … + n_d = 0 with
//! every proper contiguous sum nonzero.
//!
//! A single resonant vector only decays like ω^{−(d−1)}. Summed over its cyclic
//! rotations the ω^{−(d−1)} parts cancel and the family behaves like a
//! nonresonant term again.

use num_complex::Complex64 as C;
use num_traits::Zero;

use crate::combinatorics::{
    a_coefficient, check_single_edge, cyclic_rotations, enumerate_multi_indices, phi_family,
    rational_to_f64, resonance_coefficient, FrequencyVector, PhiVector, Rational,
};
use crate::error::{MfeError, Result};
use crate::mfe_engine::{evaluate_terms, f_k_phi, sandwich, BucketTerm, Operators};
use crate::operator_core::{ad_power, Mat, SemigroupEvaluator, Vector};
use crate::quadrature::gauss_legendre;

pub const MAX_RESONANT_DIM: usize = 3;
const SMOOTH_NODES_PER_UNIT: usize = 64;
const SMOOTH_TOL: f64 = 1e-10;
const SMOOTH_MAX_NODES: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct ResonantFamily {
    pub rotations: Vec<FrequencyVector>,
    pub d: usize,
    /// A[ñ_j] = 1 / Π_{m<d} (n_1 + … + n_m) per rotation
    pub coefficients: Vec<Rational>,
}

pub fn build_resonant_family(n: &FrequencyVector) -> Result<ResonantFamily> {
    check_single_edge(n)?;
    let rotations = cyclic_rotations(n);
    let coefficients = rotations
        .iter()
        .map(resonance_coefficient)
        .collect::<Result<Vec<_>>>()?;
    let total: Rational = coefficients.iter().cloned().sum();
    if !total.is_zero() {
        return Err(MfeError::Invalid(format!(
            "rotation coefficients of {:?} do not cancel",
            n.entries()
        )));
    }
    Ok(ResonantFamily {
        d: n.dim(),
        rotations,
        coefficients,
    })
}

/// ∫_0^t e^{(t−τ)L} X e^{τL} u0 dτ for a non-oscillatory integrand.
/// 64 nodes per unit time, doubled until two passes agree to 1e−10.
pub fn smooth_integral(s: &SemigroupEvaluator, t: f64, x: &Mat, u0: &Vector) -> Result<Vector> {
    if t == 0.0 {
        return Ok(Vector::zeros(u0.len()));
    }
    let run = |n: usize| -> Result<Vector> {
        let rule = gauss_legendre(n).on(0.0, t);
        let mut acc = Vector::zeros(u0.len());
        for (tau, w) in rule.nodes.iter().zip(&rule.weights) {
            acc += sandwich(s, t, *tau, x, u0)? * C::new(*w, 0.0);
        }
        Ok(acc)
    };
    let mut n = (SMOOTH_NODES_PER_UNIT as f64 * t.abs()).ceil().max(8.0) as usize;
    let mut prev = run(n)?;
    while n < SMOOTH_MAX_NODES {
        n *= 2;
        let next = run(n)?;
        let diff = (&next - &prev).norm();
        if diff < SMOOTH_TOL * next.norm().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    Err(MfeError::Accuracy(format!(
        "smooth integral did not settle within {SMOOTH_MAX_NODES} nodes"
    )))
}

// Σ_j c_j X_j with rotations sharing an identical X merged in exact arithmetic first.
fn cancelled_sum(parts: Vec<(Rational, Mat)>) -> Option<Mat> {
    let mut groups: Vec<(Rational, Mat)> = Vec::new();
    for (c, x) in parts {
        match groups.iter_mut().find(|(_, y)| *y == x) {
            Some(g) => g.0 += c,
            None => groups.push((c, x)),
        }
    }
    let scale: f64 = groups
        .iter()
        .map(|(c, x)| rational_to_f64(c).abs() * x.norm())
        .sum();
    let mut acc: Option<Mat> = None;
    for (c, x) in groups {
        if c.is_zero() {
            continue;
        }
        let term = x * C::new(rational_to_f64(&c), 0.0);
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    // commuting but differently ordered products cancel up to roundoff
    acc.filter(|m| m.norm() > 64.0 * f64::EPSILON * scale)
}

/// ω-free terms of the rotation sum up to order r.
///
/// Boundary terms whose weights stay finite go through the usual expansion.
/// The ones that would divide by the vanishing total become smooth integrals
/// in the s = 0 bucket; their |k̃| = 0 parts cancel across the rotations.
pub fn family_terms(
    fam: &ResonantFamily,
    r: u32,
    t: f64,
    ops: &Operators,
    u0: &Vector,
) -> Result<Vec<BucketTerm>> {
    let d = fam.d;
    if d > MAX_RESONANT_DIM {
        return Err(MfeError::Unsupported(format!(
            "resonant families are handled for d <= {MAX_RESONANT_DIM}, got {d}"
        )));
    }
    if (r as usize) < d {
        return Err(MfeError::Invalid(format!(
            "order r = {r} below dimension d = {d}"
        )));
    }
    if !ops.autonomous() {
        return Err(MfeError::Unsupported(
            "resonant families assume static multipliers".into(),
        ));
    }
    let dim = ops.dim();
    let mut out = Vec::new();
    for n in &fam.rotations {
        for k in enumerate_multi_indices(d, r - d as u32) {
            let sign = if k.total() % 2 == 0 { 1.0 } else { -1.0 };
            for l in 0..=d {
                // φ̃ all ones would divide by the vanishing total
                for phi in phi_family(d, l)?
                    .into_iter()
                    .filter(|p| p.bits()[..d - 1].contains(&0))
                {
                    let a = rational_to_f64(&a_coefficient(&k, &phi, n)?);
                    let v = f_k_phi(&k, &phi, n, ops, t)?.apply(ops.semigroup(), t, u0)?
                        * C::new(sign * a, 0.0);
                    out.push(BucketTerm {
                        power: d as u32 + k.total(),
                        s: n.dot_vertex(l),
                        vector: v,
                    });
                }
            }
        }
    }
    // smooth remainders, one integral per power of 1/(iω)
    for p in 0..=(r + 1 - d as u32) {
        let mut parts = Vec::new();
        for n in &fam.rotations {
            let head = n.head().expect("d >= 2");
            let last = ops.alpha(n.entries()[d - 1])?.value();
            for kt in enumerate_multi_indices(d - 1, p)
                .into_iter()
                .filter(|k| k.total() == p)
            {
                let a = a_coefficient(&kt, &PhiVector::ones(d - 1), &head)?;
                let b = f_k_phi(&kt, &PhiVector::ones(d - 1), &head, ops, t)?.left_or_identity(dim);
                let sign = if p % 2 == 0 { a } else { -a };
                parts.push((sign, last * b));
            }
        }
        if let Some(x) = cancelled_sum(parts) {
            let v = smooth_integral(ops.semigroup(), t, &x, u0)?;
            out.push(BucketTerm {
                power: d as u32 - 1 + p,
                s: 0,
                vector: v,
            });
        }
    }
    Ok(out)
}

/// Sum over all rotations of the order-r expansion, evaluated at ω.
pub fn cyclic_resonant_sum(
    fam: &ResonantFamily,
    t: f64,
    omega: f64,
    r: u32,
    ops: &Operators,
    u0: &Vector,
) -> Result<Vector> {
    Ok(evaluate_terms(
        &family_terms(fam, r, t, ops, u0)?,
        omega,
        t,
        ops.dim(),
    ))
}

/// Leading O(ω^{−2}) part of the pair (−n, n), (n, −n) written out directly.
pub fn resonant_pair_leading_term_d2(
    fam: &ResonantFamily,
    alpha_minus: &Mat,
    alpha_plus: &Mat,
    t: f64,
    omega: f64,
    s: &SemigroupEvaluator,
    u0: &Vector,
) -> Result<Vector> {
    if fam.d != 2 {
        return Err(MfeError::Invalid(format!(
            "pair formula needs d = 2, got {}",
            fam.d
        )));
    }
    let n = fam.rotations[0].entries()[0].abs() as f64;
    let l = s.l();
    let phase = C::new(0.0, omega * n * t).exp();
    let eu = |v: &Vector| s.apply(t, v);
    let mut v = alpha_plus * eu(&(alpha_minus * u0))? * phase
        + alpha_minus * eu(&(alpha_plus * u0))? * phase.conj()
        - eu(&(alpha_plus * alpha_minus * u0))? * C::new(2.0, 0.0);
    v += smooth_integral(s, t, &(alpha_minus * ad_power(l, alpha_plus, 1)), u0)?;
    v += smooth_integral(s, t, &(alpha_plus * ad_power(l, alpha_minus, 1)), u0)?;
    Ok(v / (C::new(0.0, omega).powi(2) * n * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::ratio_of;
    use crate::operator_core::{GeneratorMatrix, Multiplier, SemigroupEvaluator, SymmetryHint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[i64]) -> FrequencyVector {
        FrequencyVector::new(v.to_vec()).unwrap()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        Mat::from_fn(n, n, |_, _| {
            C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn setup(seed: u64, dim: usize, freqs: &[i64], diagonal: bool) -> (Operators, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rand_mat(&mut rng, dim);
        let l = (&h - h.adjoint()) * C::new(0.5, 0.0);
        let s = SemigroupEvaluator::new(GeneratorMatrix::new(l, SymmetryHint::Normal).unwrap());
        let alphas = freqs
            .iter()
            .map(|&f| {
                let m = if diagonal {
                    Mat::from_diagonal(&rand_mat(&mut rng, dim).column(0).into_owned())
                } else {
                    rand_mat(&mut rng, dim)
                };
                (f, Multiplier::dense(m))
            })
            .collect();
        let u0 = rand_mat(&mut rng, dim).column(0).into_owned();
        (Operators::new(s, alphas).unwrap(), u0)
    }

    #[test]
    fn family_examples() {
        let f = build_resonant_family(&fv(&[-1, 1])).unwrap();
        assert_eq!(f.rotations, vec![fv(&[-1, 1]), fv(&[1, -1])]);
        assert_eq!(f.coefficients, vec![ratio_of(-1, 1), ratio_of(1, 1)]);
        let f = build_resonant_family(&fv(&[1, 1, -2])).unwrap();
        assert_eq!(
            f.coefficients,
            vec![ratio_of(1, 2), ratio_of(-1, 1), ratio_of(1, 2)]
        );
        assert!(matches!(
            build_resonant_family(&fv(&[1, 2])),
            Err(MfeError::NotResonant(3))
        ));
        assert!(matches!(
            build_resonant_family(&fv(&[1, -1, 2, -2])),
            Err(MfeError::Unsupported(_))
        ));
    }

    #[test]
    fn d4_family_refused_by_engine() {
        let (ops, u0) = setup(1, 3, &[-3, 1], true);
        let fam = build_resonant_family(&fv(&[1, 1, 1, -3])).unwrap();
        assert!(matches!(
            family_terms(&fam, 4, 1.0, &ops, &u0),
            Err(MfeError::Unsupported(_))
        ));
    }

    #[test]
    fn equal_alphas_cancel_exactly() {
        // every rotation of (1, 1, −2) with one shared α
        let (base, u0) = setup(2, 4, &[1], false);
        let a = base.alpha(1).unwrap().clone();
        let ops = Operators::new(base.semigroup().clone(), vec![(1, a.clone()), (-2, a)]).unwrap();
        let fam = build_resonant_family(&fv(&[1, 1, -2])).unwrap();
        let terms = family_terms(&fam, 3, 0.8, &ops, &u0).unwrap();
        assert!(terms.iter().all(|x| !(x.s == 0 && x.power == 2)));
    }

    #[test]
    fn smooth_integral_of_commuting_term() {
        let (ops, u0) = setup(3, 5, &[1], false);
        let s = ops.semigroup();
        let x = Mat::identity(5, 5) * C::new(2.0, 0.0);
        let v = smooth_integral(s, 1.3, &x, &u0).unwrap();
        let want = s.apply(1.3, &u0).unwrap() * C::new(2.6, 0.0);
        assert!((v - &want).norm() < 1e-12 * want.norm());
    }

    #[test]
    fn pair_formula_matches_family_sum() {
        for n in [1i64, 2] {
            let (ops, u0) = setup(4 + n as u64, 6, &[-n, n], true);
            let fam = build_resonant_family(&fv(&[-n, n])).unwrap();
            let (am, ap) = (
                ops.alpha(-n).unwrap().value(),
                ops.alpha(n).unwrap().value(),
            );
            for w in [40.0, 400.0] {
                let pair =
                    resonant_pair_leading_term_d2(&fam, am, ap, 0.9, w, ops.semigroup(), &u0)
                        .unwrap();
                let sum = cyclic_resonant_sum(&fam, 0.9, w, 2, &ops, &u0).unwrap();
                assert!((&pair - &sum).norm() < 1e-10 * pair.norm(), "n={n} w={w}");
            }
        }
    }

    #[test]
    fn scalar_identity_multiplier_has_no_integral() {
        let (base, u0) = setup(6, 4, &[1], false);
        let id = Multiplier::dense(Mat::identity(4, 4) * C::new(0.3, 0.0));
        let ops =
            Operators::new(base.semigroup().clone(), vec![(-1, id.clone()), (1, id)]).unwrap();
        let fam = build_resonant_family(&fv(&[-1, 1])).unwrap();
        let terms = family_terms(&fam, 2, 1.0, &ops, &u0).unwrap();
        assert!(terms.iter().all(|x| x.s != 0 || x.power != 1));
        let e = ops.semigroup().apply(1.0, &u0).unwrap() * C::new(0.09, 0.0);
        let want = (e.clone() * C::new(0.0, 50.0).exp() + e.clone() * C::new(0.0, -50.0).exp()
            - e * C::new(2.0, 0.0))
            / C::new(-2500.0, 0.0);
        let got = resonant_pair_leading_term_d2(
            &fam,
            ops.alpha(-1).unwrap().value(),
            ops.alpha(1).unwrap().value(),
            1.0,
            50.0,
            ops.semigroup(),
            &u0,
        )
        .unwrap();
        assert!((got - want).norm() < 1e-14);
    }

    #[test]
    fn residuals_do_not_depend_on_omega() {
        let (ops, u0) = setup(7, 4, &[-1, 1], true);
        let fam = build_resonant_family(&fv(&[1, -1])).unwrap();
        let a = family_terms(&fam, 3, 0.7, &ops, &u0).unwrap();
        let b = family_terms(&fam, 3, 0.7, &ops, &u0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.vector, y.vector);
        }
        // evaluating at two ω only changes the scalar weights
        let v1 = evaluate_terms(&a, 30.0, 0.7, 4);
        let v2 = evaluate_terms(&a, 300.0, 0.7, 4);
        assert!(v1 != v2);
    }
}
