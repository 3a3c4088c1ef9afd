//! Threshold secret sharing over a prime field.
//!
//! A dealer hides a secret as the constant term of a random degree-k
//! polynomial and hands out evaluations at nonzero nodes; any k+1 of the n
//! shares reconstruct the secret, k or fewer reveal nothing. The policy is
//! parameterized by the polynomial degree k (reconstruction needs k+1
//! points), which is the convention the aggregation protocol consumes.

use rand::RngCore;

use crate::field::{self, FieldElement, FieldPrime};
use crate::{Error, Result};

/// (k, n) sharing parameters: polynomial degree k, n shareholders, n ≥ k+1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharingPolicy {
    degree: usize,
    shareholders: usize,
    field: FieldPrime,
}

impl SharingPolicy {
    pub fn new(degree: usize, shareholders: usize, field: FieldPrime) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Config(format!(
                "polynomial degree must be at least 1, got {degree}"
            )));
        }
        if shareholders < degree + 1 {
            return Err(Error::Config(format!(
                "{shareholders} shareholders cannot reconstruct a degree-{degree} \
                 polynomial; need at least {}",
                degree + 1
            )));
        }
        // Nodes must be distinct and nonzero, so the field must offer enough
        // of them.
        if (shareholders as u64) >= field.modulus() {
            return Err(Error::Config(format!(
                "{shareholders} shareholders need distinct nonzero nodes in a field of \
                 order {}",
                field.modulus()
            )));
        }
        Ok(SharingPolicy {
            degree,
            shareholders,
            field,
        })
    }

    /// Polynomial degree k; k+1 points reconstruct.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of points needed for reconstruction (k + 1).
    pub fn threshold(&self) -> usize {
        self.degree + 1
    }

    pub fn shareholders(&self) -> usize {
        self.shareholders
    }

    pub fn field(&self) -> FieldPrime {
        self.field
    }
}

/// The dealt polynomial: `coeffs[0]` is the secret, `coeffs[1..=k]` are drawn
/// uniformly from the field (zero included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretPolynomial {
    coeffs: Vec<FieldElement>,
}

impl SecretPolynomial {
    pub fn secret(&self) -> FieldElement {
        self.coeffs[0]
    }

    pub fn coeffs(&self) -> &[FieldElement] {
        &self.coeffs
    }

    pub fn evaluate(&self, z: FieldElement) -> Result<FieldElement> {
        field::eval_poly(&self.coeffs, z)
    }
}

/// One (node, value) evaluation pair. The node is never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharePoint {
    pub node: FieldElement,
    pub value: FieldElement,
}

/// Deals `secret` to the given nodes: fresh uniform coefficients from `rng`,
/// one evaluation per node.
pub fn deal<R: RngCore + ?Sized>(
    secret: FieldElement,
    policy: &SharingPolicy,
    nodes: &[FieldElement],
    rng: &mut R,
) -> Result<(SecretPolynomial, Vec<SharePoint>)> {
    if secret.field() != policy.field {
        return Err(Error::FieldMismatch {
            left: policy.field.modulus(),
            right: secret.field().modulus(),
        });
    }
    validate_deal_nodes(nodes, policy)?;

    let mut coeffs = Vec::with_capacity(policy.degree + 1);
    coeffs.push(secret);
    for _ in 0..policy.degree {
        coeffs.push(policy.field.sample(rng));
    }
    let poly = SecretPolynomial { coeffs };

    let shares = nodes
        .iter()
        .map(|&node| {
            Ok(SharePoint {
                node,
                value: poly.evaluate(node)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((poly, shares))
}

/// Reconstructs the secret from the first k+1 shares (callers pass shares in
/// node-index order, making the chosen subset deterministic). Fewer than k+1
/// shares is the threshold property, reported as an explicit error.
pub fn reconstruct(shares: &[SharePoint], policy: &SharingPolicy) -> Result<FieldElement> {
    let needed = policy.threshold();
    if shares.len() < needed {
        return Err(Error::Threshold {
            needed,
            got: shares.len(),
        });
    }
    let points: Vec<_> = shares.iter().map(|s| (s.node, s.value)).collect();
    field::interpolate_at_zero(&points, needed)
}

/// True iff every surplus share lies on the degree-k interpolant of the
/// first k+1. With no surplus shares (exactly k+1) there is nothing to
/// check and the result is vacuously true. Any malformed input counts as
/// inconsistent.
pub fn consistency_check(shares: &[SharePoint], policy: &SharingPolicy) -> bool {
    let needed = policy.threshold();
    if shares.len() <= needed {
        return true;
    }
    let points: Vec<_> = shares.iter().map(|s| (s.node, s.value)).collect();
    for &(node, value) in &points[needed..] {
        match field::interpolate_at(&points, needed, node) {
            Ok(expected) if expected == value => {}
            _ => return false,
        }
    }
    true
}

fn validate_deal_nodes(nodes: &[FieldElement], policy: &SharingPolicy) -> Result<()> {
    if nodes.len() != policy.shareholders {
        return Err(Error::InvalidInput(format!(
            "policy expects {} nodes, got {}",
            policy.shareholders,
            nodes.len()
        )));
    }
    for (i, &node) in nodes.iter().enumerate() {
        if node.field() != policy.field {
            return Err(Error::FieldMismatch {
                left: policy.field.modulus(),
                right: node.field().modulus(),
            });
        }
        if node.is_zero() {
            return Err(Error::InvalidInput(
                "share node 0 would expose the secret directly".into(),
            ));
        }
        if nodes[..i].contains(&node) {
            return Err(Error::InvalidInput(format!(
                "duplicate share node {}",
                node.value()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// RngCore test double returning a scripted sequence of u64 draws. Values
    /// below the rejection zone pass through the uniform sampler unchanged
    /// (mod e), which lets tests pin exact polynomial coefficients.
    pub(crate) struct ScriptedRng {
        values: Vec<u64>,
        next: usize,
    }

    impl ScriptedRng {
        pub(crate) fn new(values: &[u64]) -> Self {
            ScriptedRng {
                values: values.to_vec(),
                next: 0,
            }
        }
    }

    impl RngCore for ScriptedRng {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            let v = self.values[self.next % self.values.len()];
            self.next += 1;
            v
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for chunk in dest.chunks_mut(8) {
                let v = self.next_u64().to_le_bytes();
                chunk.copy_from_slice(&v[..chunk.len()]);
            }
        }
    }

    fn f17() -> FieldPrime {
        FieldPrime::new(17).unwrap()
    }

    fn nodes(field: FieldPrime, n: usize) -> Vec<FieldElement> {
        (1..=n as u64).map(|i| field.element(i)).collect()
    }

    #[test]
    fn policy_validation() {
        let f = f17();
        assert!(SharingPolicy::new(0, 3, f).is_err());
        assert!(SharingPolicy::new(3, 3, f).is_err()); // n < k+1
        assert!(SharingPolicy::new(3, 4, f).is_ok());
        assert!(SharingPolicy::new(1, 17, f).is_err()); // not enough nonzero nodes
    }

    #[test]
    fn degenerate_rng_masks_nothing() {
        let f = f17();
        let policy = SharingPolicy::new(1, 3, f).unwrap();
        let mut rng = ScriptedRng::new(&[0]);
        let secret = f.element(9);
        let (_, shares) = deal(secret, &policy, &nodes(f, 3), &mut rng).unwrap();
        for s in &shares {
            assert_eq!(s.value, secret);
        }
    }

    #[test]
    fn worked_example_f17() {
        // f(z) = 5 + 3z + 2z² at nodes 1, 2, 3 → shares 10, 2, 15
        let f = f17();
        let policy = SharingPolicy::new(2, 3, f).unwrap();
        let mut rng = ScriptedRng::new(&[3, 2]);
        let (poly, shares) = deal(f.element(5), &policy, &nodes(f, 3), &mut rng).unwrap();
        let coeff_values: Vec<u64> = poly.coeffs().iter().map(|c| c.value()).collect();
        assert_eq!(coeff_values, vec![5, 3, 2]);
        let share_values: Vec<u64> = shares.iter().map(|s| s.value.value()).collect();
        assert_eq!(share_values, vec![10, 2, 15]);
        assert_eq!(reconstruct(&shares, &policy).unwrap().value(), 5);
    }

    #[test]
    fn different_seeds_give_different_shares() {
        let f = FieldPrime::new(2_147_483_647).unwrap();
        let policy = SharingPolicy::new(3, 5, f).unwrap();
        let secret = f.element(12345);
        let mut rng_a = ChaCha8Rng::seed_from_u64(1);
        let mut rng_b = ChaCha8Rng::seed_from_u64(2);
        let (_, a) = deal(secret, &policy, &nodes(f, 5), &mut rng_a).unwrap();
        let (_, b) = deal(secret, &policy, &nodes(f, 5), &mut rng_b).unwrap();
        assert_ne!(a, b);
        assert_eq!(reconstruct(&a, &policy).unwrap(), secret);
        assert_eq!(reconstruct(&b, &policy).unwrap(), secret);
    }

    #[test]
    fn threshold_error_with_too_few_shares() {
        let f = f17();
        let policy = SharingPolicy::new(2, 4, f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, shares) = deal(f.element(7), &policy, &nodes(f, 4), &mut rng).unwrap();
        match reconstruct(&shares[..2], &policy) {
            Err(Error::Threshold { needed: 3, got: 2 }) => {}
            other => panic!("expected threshold error, got {other:?}"),
        }
    }

    #[test]
    fn deal_rejects_bad_nodes() {
        let f = f17();
        let policy = SharingPolicy::new(1, 3, f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let secret = f.element(1);
        let dup = vec![f.element(1), f.element(1), f.element(2)];
        assert!(deal(secret, &policy, &dup, &mut rng).is_err());
        let zero = vec![f.element(0), f.element(1), f.element(2)];
        assert!(deal(secret, &policy, &zero, &mut rng).is_err());
        assert!(deal(secret, &policy, &nodes(f, 2), &mut rng).is_err());
    }

    /// Exhaustive over e = 17: every secret, k ∈ {1,2,3}, n ∈ {k+1..6}, and
    /// every (k+1)-subset of the dealt shares reconstructs the secret.
    #[test]
    fn reconstruct_roundtrip_exhaustive_small_field() {
        let f = f17();
        let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
        for k in 1..=3usize {
            for n in (k + 1)..=6usize {
                let policy = SharingPolicy::new(k, n, f).unwrap();
                for s in 0..17u64 {
                    let secret = f.element(s);
                    let (_, shares) = deal(secret, &policy, &nodes(f, n), &mut rng).unwrap();
                    for subset in combinations(n, k + 1) {
                        let chosen: Vec<_> = subset.iter().map(|&i| shares[i]).collect();
                        assert_eq!(
                            reconstruct(&chosen, &policy).unwrap(),
                            secret,
                            "k={k} n={n} s={s} subset={subset:?}"
                        );
                    }
                    assert!(consistency_check(&shares, &policy));
                }
            }
        }
    }

    #[test]
    fn reconstruct_roundtrip_randomized_mersenne31() {
        let f = FieldPrime::new(2_147_483_647).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0xDEED);
        for _ in 0..100 {
            let k = 1 + (rng.next_u64() % 4) as usize;
            let n = k + 1 + (rng.next_u64() % 4) as usize;
            let policy = SharingPolicy::new(k, n, f).unwrap();
            let secret = f.sample(&mut rng);
            let (_, shares) = deal(secret, &policy, &nodes(f, n), &mut rng).unwrap();
            assert_eq!(reconstruct(&shares, &policy).unwrap(), secret);
            assert!(consistency_check(&shares, &policy));
        }
    }

    #[test]
    fn consistency_check_flags_tampering() {
        let f = f17();
        let policy = SharingPolicy::new(2, 5, f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, mut shares) = deal(f.element(8), &policy, &nodes(f, 5), &mut rng).unwrap();
        assert!(consistency_check(&shares, &policy));
        shares[4].value = shares[4].value.add(f.one()).unwrap();
        assert!(!consistency_check(&shares, &policy));
        // exactly k+1 shares: nothing to cross-check
        assert!(consistency_check(&shares[..3], &policy));
    }

    /// With the secret fixed, each share's marginal distribution over many
    /// deals is uniform. Chi-square against the uniform at 1% significance;
    /// the 99th percentile of χ² with 16 degrees of freedom is 32.0.
    #[test]
    fn share_marginal_uniformity_chi_square() {
        let f = f17();
        let policy = SharingPolicy::new(2, 4, f).unwrap();
        let ns = nodes(f, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        let trials = 20_000usize;
        let mut counts = [[0u64; 17]; 4];
        for _ in 0..trials {
            let (_, shares) = deal(f.element(5), &policy, &ns, &mut rng).unwrap();
            for (slot, share) in shares.iter().enumerate() {
                counts[slot][share.value.value() as usize] += 1;
            }
        }
        let expected = trials as f64 / 17.0;
        for (slot, bucket) in counts.iter().enumerate() {
            let chi2: f64 = bucket
                .iter()
                .map(|&c| {
                    let diff = c as f64 - expected;
                    diff * diff / expected
                })
                .sum();
            assert!(
                chi2 < 32.0,
                "share {slot} marginal failed uniformity: chi2 = {chi2}"
            );
        }
    }

    /// For e = 17 and k ∈ {1, 2}: any k or fewer observed shares admit the
    /// same number of coefficient completions for every candidate secret.
    /// Counted by brute force over all coefficient vectors.
    #[test]
    fn threshold_security_zero_information_small_field() {
        let f = f17();
        let e = 17u64;
        for k in 1..=2usize {
            let n = k + 2;
            let policy = SharingPolicy::new(k, n, f).unwrap();
            let ns = nodes(f, n);
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            for s in 0..e {
                let (_, shares) = deal(f.element(s), &policy, &ns, &mut rng).unwrap();
                for m in 1..=k {
                    for subset in combinations(n, m) {
                        let observed: Vec<_> =
                            subset.iter().map(|&i| shares[i]).collect();
                        let mut counts = Vec::new();
                        for candidate in 0..e {
                            counts.push(count_completions(f, k, candidate, &observed));
                        }
                        assert!(
                            counts.windows(2).all(|w| w[0] == w[1]),
                            "k={k} m={m} secret={s}: completion counts vary: {counts:?}"
                        );
                        assert_eq!(counts[0], e.pow((k - m) as u32));
                    }
                }
            }
        }
    }

    /// Brute-force count of coefficient vectors (c₁..c_k) making a polynomial
    /// with the candidate constant term pass through the observed shares.
    fn count_completions(
        f: FieldPrime,
        k: usize,
        candidate_secret: u64,
        observed: &[SharePoint],
    ) -> u64 {
        let e = f.modulus();
        let total = e.pow(k as u32);
        let mut count = 0;
        for idx in 0..total {
            let mut coeffs = vec![f.element(candidate_secret)];
            let mut rem = idx;
            for _ in 0..k {
                coeffs.push(f.element(rem % e));
                rem /= e;
            }
            let ok = observed.iter().all(|share| {
                field::eval_poly(&coeffs, share.node).unwrap() == share.value
            });
            if ok {
                count += 1;
            }
        }
        count
    }

    /// All `size`-element subsets of 0..n, lexicographic.
    fn combinations(n: usize, size: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn rec(start: usize, n: usize, size: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if current.len() == size {
                out.push(current.clone());
                return;
            }
            for i in start..n {
                current.push(i);
                rec(i + 1, n, size, current, out);
                current.pop();
            }
        }
        rec(0, n, size, &mut current, &mut out);
        out
    }
}
