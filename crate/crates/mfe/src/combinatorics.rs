//! Exact integer and rational machinery behind the expansion.
//!
//! Frequencies are `i64`, coefficients are `BigRational`. Nothing here touches
//! floating point; conversion happens when terms are assembled.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};

use crate::error::{MfeError, Result};

pub type Rational = BigRational;

/// Largest dimension for which Φ families are generated.
pub const MAX_PHI_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrequencyVector(Vec<i64>);

impl FrequencyVector {
    pub fn new(entries: Vec<i64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MfeError::Invalid(
                "frequency vector must have d >= 1".into(),
            ));
        }
        if let Some(i) = entries.iter().position(|&x| x == 0) {
            return Err(MfeError::Invalid(format!(
                "frequency entry {} is zero",
                i + 1
            )));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[i64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Drop the last entry; `None` when d = 1.
    pub fn head(&self) -> Option<FrequencyVector> {
        (self.0.len() > 1).then(|| Self(self.0[..self.0.len() - 1].to_vec()))
    }

    /// n · v_ℓ, the sum of entries after the first ℓ.
    pub fn dot_vertex(&self, l: usize) -> i64 {
        self.0[l..].iter().sum()
    }

    pub fn total(&self) -> i64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhiVector {
    bits: Vec<u8>,
    last_zero: usize,
}

impl PhiVector {
    /// Builds from raw bits, computing ℓ (1-based index of the last zero, 0 if none).
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() || bits.iter().any(|&b| b > 1) {
            return Err(MfeError::Invalid(format!("bad phi bits {bits:?}")));
        }
        let last_zero = bits.iter().rposition(|&b| b == 0).map_or(0, |i| i + 1);
        Ok(Self { bits, last_zero })
    }

    pub fn ones(d: usize) -> Self {
        Self {
            bits: vec![1; d],
            last_zero: 0,
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn last_zero(&self) -> usize {
        self.last_zero
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Prefix of length d − 1 together with the last bit.
    pub fn split_last(&self) -> Option<(PhiVector, u8)> {
        let d = self.bits.len();
        (d > 1).then(|| {
            let head = PhiVector::from_bits(self.bits[..d - 1].to_vec()).expect("valid prefix");
            (head, self.bits[d - 1])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex {
    parts: Vec<u32>,
    total: u32,
}

impl MultiIndex {
    pub fn new(parts: Vec<u32>) -> Self {
        let total = parts.iter().sum();
        Self { parts, total }
    }

    pub fn zeros(d: usize) -> Self {
        Self::new(vec![0; d])
    }

    pub fn parts(&self) -> &[u32] {
        &self.parts
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }

    pub fn split_last(&self) -> Option<(MultiIndex, u32)> {
        let d = self.parts.len();
        (d > 1).then(|| {
            (
                MultiIndex::new(self.parts[..d - 1].to_vec()),
                self.parts[d - 1],
            )
        })
    }
}

/// Vertices v_0 … v_d of the unit simplex; v_ℓ has ℓ leading zeros then ones.
pub fn simplex_vertices(d: usize) -> Result<Vec<Vec<u8>>> {
    if d == 0 {
        return Err(MfeError::Invalid("simplex dimension must be >= 1".into()));
    }
    Ok((0..=d)
        .map(|l| (0..d).map(|j| u8::from(j >= l)).collect())
        .collect())
}

/// Φ_ℓ^d: last zero at coordinate ℓ, free bits below it.
pub fn phi_family(d: usize, l: usize) -> Result<Vec<PhiVector>> {
    if d == 0 || d > MAX_PHI_DIM {
        return Err(MfeError::Unsupported(format!(
            "phi families are generated for 1 <= d <= {MAX_PHI_DIM}, got {d}"
        )));
    }
    if l > d {
        return Err(MfeError::Invalid(format!("l = {l} out of range 0..={d}")));
    }
    if l == 0 {
        return Ok(vec![PhiVector::ones(d)]);
    }
    let free = l - 1;
    let out = (0u32..1 << free)
        .map(|mask| {
            let bits = (0..d)
                .map(|j| match j {
                    j if j < free => ((mask >> j) & 1) as u8,
                    j if j == free => 0,
                    _ => 1,
                })
                .collect();
            PhiVector { bits, last_zero: l }
        })
        .collect();
    Ok(out)
}

/// All k ∈ ℕ₀^d with |k| ≤ max_total, graded lexicographic.
pub fn enumerate_multi_indices(d: usize, max_total: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for total in 0..=max_total {
        let mut cur = vec![0u32; d];
        compositions(&mut cur, 0, total, &mut out);
    }
    out
}

fn compositions(cur: &mut Vec<u32>, pos: usize, rest: u32, out: &mut Vec<MultiIndex>) {
    let d = cur.len();
    if d == 0 {
        if rest == 0 {
            out.push(MultiIndex::new(Vec::new()));
        }
        return;
    }
    if pos == d - 1 {
        cur[pos] = rest;
        out.push(MultiIndex::new(cur.clone()));
        return;
    }
    for v in 0..=rest {
        cur[pos] = v;
        compositions(cur, pos + 1, rest - v, out);
    }
}

/// Every contiguous sum n_j + … + n_r is nonzero.
pub fn nonresonant(n: &FrequencyVector) -> bool {
    first_zero_window(n.entries(), n.dim()).is_none()
}

// first (from, to) window of length <= max_len summing to zero, 1-based
fn first_zero_window(n: &[i64], max_len: usize) -> Option<(usize, usize)> {
    for j in 0..n.len() {
        let mut s = 0;
        for r in j..n.len().min(j + max_len) {
            s += n[r];
            if s == 0 {
                return Some((j + 1, r + 1));
            }
        }
    }
    None
}

fn ratio(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

fn sign(phi_bit: u8) -> i64 {
    if phi_bit == 1 {
        1
    } else {
        -1
    }
}

/// A_k[φ](n) = Π_i (−1)^{φ_i+1} / c_i^{k_i+1}, with c_1 = n_1 and c_i = c_{i−1}φ_{i−1} + n_i.
pub fn a_coefficient(k: &MultiIndex, phi: &PhiVector, n: &FrequencyVector) -> Result<Rational> {
    let d = n.dim();
    if k.dim() != d || phi.dim() != d {
        return Err(MfeError::Invalid(format!(
            "dimension mismatch: k {}, phi {}, n {}",
            k.dim(),
            phi.dim(),
            d
        )));
    }
    let mut acc = Rational::one();
    let mut c = 0i64;
    let mut start = 0usize;
    for i in 0..d {
        if i > 0 && phi.bits[i - 1] == 0 {
            c = 0;
            start = i;
        }
        c += n.0[i];
        if c == 0 {
            return Err(MfeError::Resonance {
                from: start + 1,
                to: i + 1,
            });
        }
        let den = Rational::from_integer(BigInt::from(c)).pow(k.parts[i] as i32 + 1);
        acc = acc * Rational::from_integer(BigInt::from(sign(phi.bits[i]))) / den;
    }
    Ok(acc)
}

/// Same value built one coordinate at a time from the recursive relation.
pub fn a_coefficient_recursive(
    k: &MultiIndex,
    phi: &PhiVector,
    n: &FrequencyVector,
) -> Result<Rational> {
    match (k.split_last(), phi.split_last(), n.head()) {
        (Some((kh, kd)), Some((ph, pd)), Some(nh)) => {
            let prev = a_coefficient_recursive(&kh, &ph, &nh)?;
            let l = ph.last_zero();
            let den = nh.dot_vertex(l) + n.0[n.dim() - 1];
            if den == 0 {
                return Err(MfeError::Resonance {
                    from: l + 1,
                    to: n.dim(),
                });
            }
            let base = Rational::from_integer(BigInt::from(den)).pow(kd as i32 + 1);
            Ok(prev * Rational::from_integer(BigInt::from(sign(pd))) / base)
        }
        _ => {
            if n.dim() != 1 || k.dim() != 1 || phi.dim() != 1 {
                return Err(MfeError::Invalid("dimension mismatch".into()));
            }
            let base = Rational::from_integer(BigInt::from(n.0[0])).pow(k.parts[0] as i32 + 1);
            Ok(Rational::from_integer(BigInt::from(sign(phi.bits[0]))) / base)
        }
    }
}

/// n_j = (n_j, …, n_d, n_1, …, n_{j−1}) for j = 1 … d.
pub fn cyclic_rotations(n: &FrequencyVector) -> Vec<FrequencyVector> {
    let d = n.dim();
    (0..d)
        .map(|j| FrequencyVector((0..d).map(|i| n.0[(i + j) % d]).collect()))
        .collect()
}

/// Total zero, every proper contiguous sum nonzero.
pub fn check_single_edge(n: &FrequencyVector) -> Result<()> {
    let total = n.total();
    if total != 0 {
        return Err(MfeError::NotResonant(total));
    }
    if let Some((from, to)) = first_zero_window(n.entries(), n.dim() - 1) {
        return Err(MfeError::Unsupported(format!(
            "partial sum n[{from}..={to}] vanishes; only single-edge resonance is handled"
        )));
    }
    Ok(())
}

/// A[ñ] = 1 / Π_{m<d} (n_1 + … + n_m) for one rotation.
pub fn resonance_coefficient(rotation: &FrequencyVector) -> Result<Rational> {
    let d = rotation.dim();
    let mut acc = Rational::one();
    let mut s = 0i64;
    for m in 0..d.saturating_sub(1) {
        s += rotation.0[m];
        if s == 0 {
            return Err(MfeError::Resonance { from: 1, to: m + 1 });
        }
        acc /= Rational::from_integer(BigInt::from(s));
    }
    Ok(acc)
}

pub fn rational_to_f64(q: &Rational) -> f64 {
    use num_traits::ToPrimitive;
    q.to_f64().unwrap_or_else(|| {
        // extreme magnitudes: fall back to a ratio of rounded parts
        let n = q.numer().to_f64().unwrap_or(f64::INFINITY);
        let d = q.denom().to_f64().unwrap_or(f64::INFINITY);
        n / d
    })
}

pub fn ratio_of(num: i64, den: i64) -> Rational {
    ratio(num, den)
}
