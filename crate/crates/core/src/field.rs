//! Prime-field arithmetic.
//!
//! Everything the sharing layer needs: modular add/sub/mul, inversion by the
//! extended Euclidean algorithm, Horner polynomial evaluation, and Lagrange
//! interpolation at zero. The modulus is a runtime parameter so the test
//! suite can run exhaustive oracles on tiny fields (e = 17, 31) while
//! production runs use e = 2³¹ − 1.
//!
//! Arithmetic is not constant-time; side channels are out of scope here.

use rand::RngCore;

use crate::{Error, Result};

/// Moduli must stay below 2⁶³ so products fit u128 and signed intermediates
/// fit i128.
const MAX_MODULUS: u64 = 1 << 63;

/// A validated prime modulus defining the field 𝔼 = [0, e).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldPrime {
    e: u64,
}

impl FieldPrime {
    /// Builds a field over the prime `e`. Primality is verified with a
    /// deterministic Miller-Rabin test (exact for all u64 inputs).
    pub fn new(e: u64) -> Result<Self> {
        if e < 5 {
            return Err(Error::Config(format!(
                "field modulus must be at least 5, got {e}"
            )));
        }
        if e >= MAX_MODULUS {
            return Err(Error::Config(format!(
                "field modulus must be below 2^63, got {e}"
            )));
        }
        if !is_prime_u64(e) {
            return Err(Error::Config(format!("field modulus {e} is not prime")));
        }
        Ok(FieldPrime { e })
    }

    pub fn modulus(self) -> u64 {
        self.e
    }

    /// Wraps an integer into the field, reducing mod e.
    pub fn element(self, value: u64) -> FieldElement {
        FieldElement {
            value: value % self.e,
            field: self,
        }
    }

    /// Wraps a signed integer, mapping negatives to the upper half.
    pub fn element_from_i128(self, value: i128) -> FieldElement {
        let m = self.e as i128;
        FieldElement {
            value: value.rem_euclid(m) as u64,
            field: self,
        }
    }

    pub fn zero(self) -> FieldElement {
        self.element(0)
    }

    pub fn one(self) -> FieldElement {
        self.element(1)
    }

    /// Draws a uniform element of [0, e) by rejection sampling on raw 64-bit
    /// output. Kept deliberately explicit (rather than delegating to a
    /// distribution type) so the draw sequence for a given seed is frozen by
    /// this crate, not by a dependency's internals.
    pub fn sample<R: RngCore + ?Sized>(self, rng: &mut R) -> FieldElement {
        // Largest multiple of e that fits in u64; values at or above it are
        // rejected to avoid modulo bias.
        let zone = u64::MAX - (u64::MAX % self.e);
        loop {
            let raw = rng.next_u64();
            if raw < zone {
                return self.element(raw % self.e);
            }
        }
    }
}

/// A residue in [0, e) tagged with its field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldElement {
    value: u64,
    field: FieldPrime,
}

// Arithmetic is fallible (field mismatch), so these are inherent methods
// rather than the std operator traits.
#[allow(clippy::should_implement_trait)]
impl FieldElement {
    pub fn value(self) -> u64 {
        self.value
    }

    pub fn field(self) -> FieldPrime {
        self.field
    }

    pub fn is_zero(self) -> bool {
        self.value == 0
    }

    fn check_same_field(self, other: FieldElement) -> Result<()> {
        if self.field != other.field {
            return Err(Error::FieldMismatch {
                left: self.field.e,
                right: other.field.e,
            });
        }
        Ok(())
    }

    pub fn add(self, other: FieldElement) -> Result<FieldElement> {
        self.check_same_field(other)?;
        let e = self.field.e;
        let mut v = self.value + other.value; // e < 2^63, no overflow
        if v >= e {
            v -= e;
        }
        Ok(FieldElement {
            value: v,
            field: self.field,
        })
    }

    pub fn sub(self, other: FieldElement) -> Result<FieldElement> {
        self.check_same_field(other)?;
        let e = self.field.e;
        let v = if self.value >= other.value {
            self.value - other.value
        } else {
            e - (other.value - self.value)
        };
        Ok(FieldElement {
            value: v,
            field: self.field,
        })
    }

    pub fn mul(self, other: FieldElement) -> Result<FieldElement> {
        self.check_same_field(other)?;
        let v = (self.value as u128 * other.value as u128) % self.field.e as u128;
        Ok(FieldElement {
            value: v as u64,
            field: self.field,
        })
    }

    /// Multiplicative inverse via the extended Euclidean algorithm.
    pub fn inv(self) -> Result<FieldElement> {
        if self.value == 0 {
            return Err(Error::DivisionByZero);
        }
        let e = self.field.e as i128;
        let (mut r0, mut r1) = (e, self.value as i128);
        let (mut t0, mut t1) = (0i128, 1i128);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            (t0, t1) = (t1, t0 - q * t1);
        }
        debug_assert_eq!(r0, 1, "modulus is prime, gcd must be 1");
        Ok(self.field.element_from_i128(t0))
    }
}

/// Evaluates `coeffs[0] + coeffs[1]·z + ... + coeffs[d]·z^d` by Horner's
/// scheme. `coeffs[0]` is the constant term (the secret in sharing use).
pub fn eval_poly(coeffs: &[FieldElement], z: FieldElement) -> Result<FieldElement> {
    let Some((&last, rest)) = coeffs.split_last() else {
        return Err(Error::InvalidInput(
            "polynomial needs at least one coefficient".into(),
        ));
    };
    let mut acc = last;
    for &c in rest.iter().rev() {
        acc = acc.mul(z)?.add(c)?;
    }
    Ok(acc)
}

/// Evaluates the unique degree-(count−1) interpolant through the first
/// `count` points at zero:
///
/// Σᵢ yᵢ · Πⱼ≠ᵢ xⱼ · (xⱼ − xᵢ)⁻¹
///
/// Nodes must be pairwise distinct and nonzero (zero is the secret's
/// abscissa).
pub fn interpolate_at_zero(
    points: &[(FieldElement, FieldElement)],
    count: usize,
) -> Result<FieldElement> {
    let field = validate_nodes(points, count)?;
    interpolate_at(points, count, field.zero())
}

/// Lagrange evaluation of the same interpolant at an arbitrary `z`. Used by
/// the share consistency check; `interpolate_at_zero` is the public secret
/// path.
pub(crate) fn interpolate_at(
    points: &[(FieldElement, FieldElement)],
    count: usize,
    z: FieldElement,
) -> Result<FieldElement> {
    let field = validate_nodes(points, count)?;
    let mut acc = field.zero();
    for i in 0..count {
        let (xi, yi) = points[i];
        let mut num = field.one();
        let mut den = field.one();
        for (j, &(xj, _)) in points.iter().enumerate().take(count) {
            if j != i {
                num = num.mul(z.sub(xj)?)?;
                den = den.mul(xi.sub(xj)?)?;
            }
        }
        acc = acc.add(yi.mul(num)?.mul(den.inv()?)?)?;
    }
    Ok(acc)
}

fn validate_nodes(points: &[(FieldElement, FieldElement)], count: usize) -> Result<FieldPrime> {
    if count == 0 || points.len() < count {
        return Err(Error::InvalidInput(format!(
            "interpolation over {count} points but {} supplied",
            points.len()
        )));
    }
    let field = points[0].0.field();
    for (i, &(node, value)) in points.iter().enumerate().take(count) {
        if node.field() != field || value.field() != field {
            return Err(Error::FieldMismatch {
                left: field.modulus(),
                right: node.field().modulus(),
            });
        }
        if node.is_zero() {
            return Err(Error::InvalidInput(
                "interpolation node 0 would collide with the secret's abscissa".into(),
            ));
        }
        for &(earlier, _) in points.iter().take(i) {
            if earlier == node {
                return Err(Error::InvalidInput(format!(
                    "duplicate interpolation node {}",
                    node.value()
                )));
            }
        }
    }
    Ok(field)
}

/// Deterministic Miller-Rabin, exact for every u64 with this witness set.
fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &p in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n.is_multiple_of(p) {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0u32;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..s - 1 {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}
