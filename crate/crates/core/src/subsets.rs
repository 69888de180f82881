//! Subset-lattice combinatorics: alternating sums, the `u ↔ v` transforms of
//! a subset family, the `c_k` recurrence, ordered covers and the splitting
//! law of the tagged backbone.
//!
//! Scalar identities are exact over [`BigRational`]; the same transforms run
//! on `f64` and on [`ScalarField`]s.

use crate::field::ScalarField;
use crate::geometry::Point;
use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Largest ground set supported.
pub const MAX_N: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubsetError {
    #[error("{a} is not a subset of {c}")]
    NotSubset { a: Subset, c: Subset },
    #[error("condition v_A >= 0 fails for A = {set}: value {value:e}{}", location.map(|p| format!(" at {p}")).unwrap_or_default())]
    Admissibility {
        set: Subset,
        value: f64,
        location: Option<Point>,
    },
    #[error("split law for {set} has zero denominator")]
    ZeroDenominator { set: Subset },
    #[error("family size mismatch: expected n = {expected}, got {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("ground set size {0} out of range 1..={MAX_N}")]
    BadSize(usize),
    #[error("fields of a family live on different grids")]
    GridMismatch,
    #[error("bad subset key {0:?}")]
    BadKey(String),
}

/// A subset of `{1, …, n}` stored as a bitmask (element `i` ↔ bit `i−1`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Subset(pub u32);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    pub fn full(n: usize) -> Subset {
        Subset(((1u64 << n) - 1) as u32)
    }

    pub fn singleton(i: usize) -> Subset {
        Subset(1 << (i - 1))
    }

    pub fn from_elems(elems: &[usize]) -> Subset {
        Subset(elems.iter().fold(0, |m, &i| m | (1 << (i - 1))))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << (i - 1)) != 0
    }

    pub fn is_subset_of(self, other: Subset) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: Subset) -> Subset {
        Subset(self.0 | other.0)
    }

    pub fn intersection(self, other: Subset) -> Subset {
        Subset(self.0 & other.0)
    }

    pub fn minus(self, other: Subset) -> Subset {
        Subset(self.0 & !other.0)
    }

    pub fn elems(self) -> Vec<usize> {
        (1..=32).filter(|&i| self.contains(i)).collect()
    }

    /// `(−1)^{|A|}`.
    pub fn sign(self) -> i64 {
        if self.len() % 2 == 0 {
            1
        } else {
            -1
        }
    }

    /// All subsets of `self`, the empty set included, in increasing mask order.
    pub fn subsets(self) -> impl Iterator<Item = Subset> {
        let full = self.0;
        let mut next = Some(0u32);
        std::iter::from_fn(move || {
            let cur = next?;
            next = if cur == full {
                None
            } else {
                Some((cur.wrapping_sub(full)) & full)
            };
            Some(Subset(cur))
        })
    }

    pub fn nonempty_subsets(self) -> impl Iterator<Item = Subset> {
        self.subsets().filter(|s| !s.is_empty())
    }

    /// Bracketed element list, `"[1,2]"`; the JSON key form.
    pub fn key(self) -> String {
        let e: Vec<String> = self.elems().iter().map(|i| i.to_string()).collect();
        format!("[{}]", e.join(","))
    }

    pub fn parse_key(s: &str) -> Result<Subset, SubsetError> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| SubsetError::BadKey(s.into()))?;
        let mut out = Subset::EMPTY;
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let i: usize = part.parse().map_err(|_| SubsetError::BadKey(s.into()))?;
            if i == 0 || i > 32 {
                return Err(SubsetError::BadKey(s.into()));
            }
            out = out.union(Subset::singleton(i));
        }
        Ok(out)
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e: Vec<String> = self.elems().iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", e.join(","))
    }
}

impl fmt::Debug for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Subset {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.elems().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Subset {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let elems = Vec::<usize>::deserialize(d)?;
        if elems.iter().any(|&i| i == 0 || i > 32) {
            return Err(D::Error::custom("subset elements must lie in 1..=32"));
        }
        Ok(Subset::from_elems(&elems))
    }
}

/// Values that subset families can hold and combine linearly.
pub trait FamilyValue: Clone {
    /// `Σ c_i x_i` with integer coefficients; `terms` is nonempty.
    fn combine(terms: &[(i64, &Self)]) -> Result<Self, SubsetError>;

    /// Smallest value and where it occurs.
    fn minimum(&self) -> (f64, Option<Point>);
}

impl FamilyValue for f64 {
    fn combine(terms: &[(i64, &Self)]) -> Result<Self, SubsetError> {
        Ok(terms.iter().map(|(c, x)| *c as f64 * **x).sum())
    }

    fn minimum(&self) -> (f64, Option<Point>) {
        (*self, None)
    }
}

impl FamilyValue for BigRational {
    fn combine(terms: &[(i64, &Self)]) -> Result<Self, SubsetError> {
        Ok(terms
            .iter()
            .fold(BigRational::zero(), |acc, (c, x)| acc + BigRational::from_integer(BigInt::from(*c)) * *x))
    }

    fn minimum(&self) -> (f64, Option<Point>) {
        (self.to_f64().unwrap_or(f64::NAN), None)
    }
}

impl FamilyValue for ScalarField {
    fn combine(terms: &[(i64, &Self)]) -> Result<Self, SubsetError> {
        ScalarField::combination(terms, "combination").map_err(|_| SubsetError::GridMismatch)
    }

    fn minimum(&self) -> (f64, Option<Point>) {
        let (k, v) = self
            .values()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (k, v)| if v < best.1 { (k, v) } else { best });
        (v, Some(self.grid().point(k)))
    }
}

/// A value for every nonempty `A ⊆ {1, …, n}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetFamily<T> {
    n: usize,
    values: Vec<T>,
}

impl<T> SubsetFamily<T> {
    pub fn from_fn(n: usize, mut f: impl FnMut(Subset) -> T) -> Result<Self, SubsetError> {
        if n == 0 || n > MAX_N {
            return Err(SubsetError::BadSize(n));
        }
        let values = (1..(1u32 << n)).map(|m| f(Subset(m))).collect();
        Ok(Self { n, values })
    }

    pub fn try_from_fn<E>(n: usize, mut f: impl FnMut(Subset) -> Result<T, E>) -> Result<Self, E>
    where
        E: From<SubsetError>,
    {
        if n == 0 || n > MAX_N {
            return Err(SubsetError::BadSize(n).into());
        }
        let mut values = Vec::with_capacity((1 << n) - 1);
        for m in 1..(1u32 << n) {
            values.push(f(Subset(m))?);
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ground(&self) -> Subset {
        Subset::full(self.n)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Panics for the empty set or sets outside the ground set.
    pub fn get(&self, a: Subset) -> &T {
        assert!(!a.is_empty() && a.is_subset_of(self.ground()), "{a} not in family over n = {}", self.n);
        &self.values[a.0 as usize - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Subset, &T)> {
        self.values.iter().enumerate().map(|(i, v)| (Subset(i as u32 + 1), v))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Subset, &T) -> U) -> SubsetFamily<U> {
        SubsetFamily {
            n: self.n,
            values: self.iter().map(|(a, v)| f(a, v)).collect(),
        }
    }
}

impl<T: Serialize> SubsetFamily<T> {
    /// `{ "[1]": …, "[1,2]": … }`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, serde_json::Value> = self
            .iter()
            .map(|(a, v)| (a.key(), serde_json::to_value(v).expect("serializable value")))
            .collect();
        serde_json::to_value(map).expect("map serializes")
    }
}

impl<T: for<'de> Deserialize<'de>> SubsetFamily<T> {
    pub fn from_json(n: usize, value: &serde_json::Value) -> Result<Self, SubsetError> {
        let map: BTreeMap<String, serde_json::Value> =
            serde_json::from_value(value.clone()).map_err(|e| SubsetError::BadKey(e.to_string()))?;
        let mut slots: Vec<Option<T>> = (1..(1u32 << n)).map(|_| None).collect();
        for (k, v) in map {
            let a = Subset::parse_key(&k)?;
            if a.is_empty() || !a.is_subset_of(Subset::full(n)) {
                return Err(SubsetError::BadKey(k));
            }
            slots[a.0 as usize - 1] = Some(serde_json::from_value(v).map_err(|e| SubsetError::BadKey(e.to_string()))?);
        }
        let found = slots.iter().filter(|s| s.is_some()).count();
        if found != slots.len() {
            return Err(SubsetError::SizeMismatch { expected: n, found });
        }
        SubsetFamily::from_fn(n, |a| slots[a.0 as usize - 1].take().unwrap())
    }
}

/// `Σ_{A ⊆ B ⊆ C} (−1)^{|B|}`.
pub fn alt_subset_sum(a: Subset, c: Subset) -> Result<i64, SubsetError> {
    if !a.is_subset_of(c) {
        return Err(SubsetError::NotSubset { a, c });
    }
    Ok(c.minus(a).subsets().map(|extra| a.union(extra).sign()).sum())
}

/// Both sides of `Π_{i∈A}(1 − w_i) = 1 + Σ_{∅≠C⊆A} (−1)^{|C|} Π_{i∈C} w_i`.
pub fn product_expansion(w: &[BigRational]) -> (BigRational, BigRational) {
    let lhs = w.iter().fold(BigRational::one(), |acc, x| acc * (BigRational::one() - x));
    let all = Subset::full(w.len());
    let rhs = all.nonempty_subsets().fold(BigRational::one(), |acc, c| {
        let prod = c.elems().iter().fold(BigRational::one(), |p, &i| p * &w[i - 1]);
        if c.sign() > 0 {
            acc + prod
        } else {
            acc - prod
        }
    });
    (lhs, rhs)
}

/// `v_A = Σ_{N∖A ⊆ B ⊆ N, B≠∅} (−1)^{|A|+|B|+n+1} u^B`, without the sign check.
pub fn v_from_u_unchecked<T: FamilyValue>(u: &SubsetFamily<T>) -> Result<SubsetFamily<T>, SubsetError> {
    let n = u.n();
    let full = u.ground();
    SubsetFamily::try_from_fn(n, |a| {
        let rest = full.minus(a);
        let terms: Vec<(i64, &T)> = a
            .subsets()
            .map(|extra| rest.union(extra))
            .filter(|b| !b.is_empty())
            .map(|b| {
                let parity = a.len() + b.len() + n + 1;
                (if parity % 2 == 0 { 1 } else { -1 }, u.get(b))
            })
            .collect();
        T::combine(&terms)
    })
}

/// Checks `v_A ≥ tol` (tol ≤ 0) for every `A`.
pub fn check_admissible<T: FamilyValue>(v: &SubsetFamily<T>, tol: f64) -> Result<(), SubsetError> {
    for (a, value) in v.iter() {
        let (min, location) = value.minimum();
        if !(min >= tol) {
            return Err(SubsetError::Admissibility { set: a, value: min, location });
        }
    }
    Ok(())
}

/// Tolerance of the admissibility check on floating-point families.
pub const ADMISSIBILITY_TOL: f64 = -1e-12;

/// [`v_from_u_unchecked`] followed by the `v_A ≥ 0` check.
pub fn v_from_u<T: FamilyValue>(u: &SubsetFamily<T>) -> Result<SubsetFamily<T>, SubsetError> {
    let v = v_from_u_unchecked(u)?;
    check_admissible(&v, ADMISSIBILITY_TOL)?;
    Ok(v)
}

/// `u^A = Σ_{B ⊆ N, A∩B ≠ ∅} v_B`.
pub fn u_from_v<T: FamilyValue>(v: &SubsetFamily<T>) -> Result<SubsetFamily<T>, SubsetError> {
    let full = v.ground();
    SubsetFamily::try_from_fn(v.n(), |a| {
        let terms: Vec<(i64, &T)> = full
            .nonempty_subsets()
            .filter(|b| !b.intersection(a).is_empty())
            .map(|b| (1, v.get(b)))
            .collect();
        T::combine(&terms)
    })
}

/// The upper family `v^A` computed from `u` and from `v`, with the two
/// inverse relations checked.
#[derive(Clone, Debug)]
pub struct UpperRelations<T> {
    pub from_u: SubsetFamily<T>,
    pub from_v: SubsetFamily<T>,
    /// `v^A` from `u` equals `Σ_{A⊆B⊆N} v_B`.
    pub routes_agree: bool,
    /// `v_A = Σ_{A⊆B⊆N} (−1)^{|A|+|B|} v^B`.
    pub lower_recovered: bool,
    /// `u^A = Σ_{∅≠B⊆A} (−1)^{|B|+1} v^B`.
    pub u_recovered: bool,
}

impl<T> UpperRelations<T> {
    pub fn all_hold(&self) -> bool {
        self.routes_agree && self.lower_recovered && self.u_recovered
    }
}

pub fn vupper_relations<T: FamilyValue + PartialEq>(u: &SubsetFamily<T>) -> Result<UpperRelations<T>, SubsetError> {
    let n = u.n();
    let full = u.ground();
    let v = v_from_u_unchecked(u)?;
    let from_u = SubsetFamily::try_from_fn(n, |a| {
        let terms: Vec<(i64, &T)> = a.nonempty_subsets().map(|b| (-b.sign(), u.get(b))).collect();
        T::combine(&terms)
    })?;
    let from_v = SubsetFamily::try_from_fn(n, |a| {
        let terms: Vec<(i64, &T)> = full
            .minus(a)
            .subsets()
            .map(|extra| (1, v.get(a.union(extra))))
            .collect();
        T::combine(&terms)
    })?;
    let lower = SubsetFamily::try_from_fn(n, |a| {
        let terms: Vec<(i64, &T)> = full
            .minus(a)
            .subsets()
            .map(|extra| (a.sign() * a.union(extra).sign(), from_u.get(a.union(extra))))
            .collect();
        T::combine(&terms)
    })?;
    let u_back = SubsetFamily::try_from_fn(n, |a| {
        let terms: Vec<(i64, &T)> = a.nonempty_subsets().map(|b| (-b.sign(), from_u.get(b))).collect();
        T::combine(&terms)
    })?;
    Ok(UpperRelations {
        routes_agree: from_u == from_v,
        lower_recovered: lower == v,
        u_recovered: &u_back == u,
        from_u,
        from_v,
    })
}

#[cfg(test)]
fn rational(x: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

fn binomial(n: u64, k: u64) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, i| acc * BigInt::from(n - i) / BigInt::from(i + 1))
}

fn factorial(n: u64) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, i| acc * BigInt::from(i))
}

/// `c_1 = a`, `c_k = Σ_{j=1}^{k−1} C(k,j) c_j c_{k−j}`; returns `c_1..c_n`.
pub fn c_sequence(n: usize, a: &BigRational) -> Vec<BigRational> {
    let mut c: Vec<BigRational> = Vec::with_capacity(n);
    for k in 1..=n {
        if k == 1 {
            c.push(a.clone());
            continue;
        }
        let next = (1..k).fold(BigRational::zero(), |acc, j| {
            acc + BigRational::from_integer(binomial(k as u64, j as u64)) * &c[j - 1] * &c[k - j - 1]
        });
        c.push(next);
    }
    c
}

/// Solution of the recurrence in closed form: `c_k = a^k (2k−2)!/(k−1)!`.
pub fn c_closed_form(k: usize, a: &BigRational) -> BigRational {
    let k = k as u64;
    let ratio = BigRational::new(factorial(2 * k - 2), factorial(k - 1));
    ratio * num::pow(a.clone(), k as usize)
}

/// `c_k = Σ_{∅≠B⊊A} c_{|B|} c_{|A∖B|}` for every `A` with `2 ≤ |A| ≤ len`,
/// summing over the actual subsets of `A`, and the same sum grouped by
/// binomial coefficients.
pub fn set_recurrence_holds(c: &[BigRational]) -> bool {
    (2..=c.len()).all(|k| {
        let a = Subset::full(k);
        let by_sets = a
            .nonempty_subsets()
            .filter(|&b| b != a)
            .fold(BigRational::zero(), |acc, b| acc + &c[b.len() - 1] * &c[k - b.len() - 1]);
        let grouped = (1..k).fold(BigRational::zero(), |acc, j| {
            acc + BigRational::from_integer(binomial(k as u64, j as u64)) * &c[j - 1] * &c[k - j - 1]
        });
        by_sets == c[k - 1] && grouped == c[k - 1]
    })
}

pub fn set_recurrence_check(n: usize, a: &BigRational) -> bool {
    set_recurrence_holds(&c_sequence(n, a))
}

/// All set partitions of `{1..n}`, blocks in increasing order of least element.
pub fn set_partitions(n: usize) -> Vec<Vec<Subset>> {
    fn extend(i: usize, n: usize, blocks: &mut Vec<Subset>, out: &mut Vec<Vec<Subset>>) {
        if i > n {
            out.push(blocks.clone());
            return;
        }
        for b in 0..blocks.len() {
            let saved = blocks[b];
            blocks[b] = saved.union(Subset::singleton(i));
            extend(i + 1, n, blocks, out);
            blocks[b] = saved;
        }
        blocks.push(Subset::singleton(i));
        extend(i + 1, n, blocks, out);
        blocks.pop();
    }
    let mut out = Vec::new();
    extend(1, n, &mut Vec::new(), &mut out);
    out
}

/// Coefficient of `⟨X,v⟩^m` in the partition sum with `v^A = c_{|A|} v`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegroupingRow {
    pub m: usize,
    /// `Σ_{σ ∈ P(N), |σ| = m} Π_{A∈σ} c_{|A|}` by enumerating partitions.
    pub by_partitions: BigRational,
    /// The same coefficient as `n!/m! · [x^n] C(x)^m`, `C` the exponential
    /// generating function of `c`.
    pub by_generating_function: BigRational,
    /// The regrouped form `c_n / m!`.
    pub regrouped: BigRational,
}

impl RegroupingRow {
    pub fn routes_agree(&self) -> bool {
        self.by_partitions == self.by_generating_function
    }

    pub fn regrouping_holds(&self) -> bool {
        self.by_partitions == self.regrouped
    }
}

pub fn partition_regrouping(n: usize, a: &BigRational) -> Vec<RegroupingRow> {
    let c = c_sequence(n, a);
    let partitions = set_partitions(n);
    // egf coefficients C_k = c_k / k!, index 0 unused (= 0)
    let egf: Vec<BigRational> = std::iter::once(BigRational::zero())
        .chain((1..=n).map(|k| &c[k - 1] / BigRational::from_integer(factorial(k as u64))))
        .collect();
    let mul = |p: &[BigRational], q: &[BigRational]| {
        let mut out = vec![BigRational::zero(); n + 1];
        for i in 0..=n {
            for j in 0..=(n - i) {
                out[i + j] += &p[i] * &q[j];
            }
        }
        out
    };
    let mut power = egf.clone();
    let mut rows = Vec::new();
    for m in 1..=n {
        if m > 1 {
            power = mul(&power, &egf);
        }
        let by_partitions = partitions
            .iter()
            .filter(|s| s.len() == m)
            .fold(BigRational::zero(), |acc, s| {
                acc + s.iter().fold(BigRational::one(), |p, b| p * &c[b.len() - 1])
            });
        let scale = BigRational::new(factorial(n as u64), factorial(m as u64));
        rows.push(RegroupingRow {
            m,
            by_partitions,
            by_generating_function: &power[n] * scale,
            regrouped: &c[n - 1] / BigRational::from_integer(factorial(m as u64)),
        });
    }
    rows
}

/// Ordered `m`-tuples of nonempty subsets whose union is `a`, by brute force.
pub fn covers(a: Subset, m: usize) -> Vec<Vec<Subset>> {
    let parts: Vec<Subset> = a.nonempty_subsets().collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; m];
    if m == 0 || parts.is_empty() {
        return out;
    }
    loop {
        let tuple: Vec<Subset> = idx.iter().map(|&i| parts[i]).collect();
        if tuple.iter().fold(Subset::EMPTY, |u, s| u.union(*s)) == a {
            out.push(tuple);
        }
        let mut pos = m;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < parts.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// `|S_m(A)| = Σ_{B⊆A} (−1)^{|A∖B|} (2^{|B|} − 1)^m`.
pub fn cover_count(a: Subset, m: usize) -> BigInt {
    a.subsets().fold(BigInt::zero(), |acc, b| {
        let term = num::pow(BigInt::from((1u64 << b.len()) - 1), m);
        if a.minus(b).len() % 2 == 0 {
            acc + term
        } else {
            acc - term
        }
    })
}

/// Number of orderings of an `m`-set compatible with fixed orders on a
/// `j`-subset and on its complement, by enumerating all `m!` orderings.
pub fn compatible_orderings(m: usize, j: usize) -> u64 {
    fn permute(prefix: &mut Vec<usize>, left: &mut Vec<usize>, j: usize, count: &mut u64) {
        if left.is_empty() {
            // M = {0..j} must appear increasing, and so must its complement
            let inside: Vec<usize> = prefix.iter().copied().filter(|&x| x < j).collect();
            let outside: Vec<usize> = prefix.iter().copied().filter(|&x| x >= j).collect();
            if inside.windows(2).all(|w| w[0] < w[1]) && outside.windows(2).all(|w| w[0] < w[1]) {
                *count += 1;
            }
            return;
        }
        for i in 0..left.len() {
            let x = left.remove(i);
            prefix.push(x);
            permute(prefix, left, j, count);
            prefix.pop();
            left.insert(i, x);
        }
    }
    let mut count = 0;
    permute(&mut Vec::new(), &mut (0..m).collect(), j, &mut count);
    count
}

/// Probability table of the ordered split `(B, B′)`, `B ∪ B′ = A`, with
/// weights `v_B v_{B′}`.
pub fn split_law(v: &SubsetFamily<f64>, a: Subset) -> Result<Vec<(Subset, Subset, f64)>, SubsetError> {
    let mut table = Vec::new();
    let mut total = 0.0;
    for b in a.nonempty_subsets() {
        for b2 in a.nonempty_subsets() {
            if b.union(b2) == a {
                let w = v.get(b) * v.get(b2);
                total += w;
                table.push((b, b2, w));
            }
        }
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(SubsetError::ZeroDenominator { set: a });
    }
    for row in table.iter_mut() {
        row.2 /= total;
    }
    Ok(table)
}

/// Draws from [`split_law`] given a uniform variate in `[0, 1)`.
pub fn sample_split(v: &SubsetFamily<f64>, a: Subset, uniform: f64) -> Result<(Subset, Subset), SubsetError> {
    let table = split_law(v, a)?;
    let mut acc = 0.0;
    for &(b, b2, p) in &table {
        acc += p;
        if uniform < acc {
            return Ok((b, b2));
        }
    }
    // rounding left a sliver at the top: take the last positive entry
    let &(b, b2, _) = table.iter().rev().find(|r| r.2 > 0.0).expect("positive total");
    Ok((b, b2))
}

/// Both sides of the expansion
/// `Σ_{B⊆N} (−1)^{|B|} e^{−⟨X,u^B⟩} = e^{−⟨X,u^N⟩} Σ_{m≥1} (1/m!) Σ_{S_m(N)} Π ⟨X,v_{C_i}⟩`,
/// given the pairings `⟨X,u^B⟩` (`u^∅ = 0`); the right side is truncated
/// at `m_max`.
pub fn mcheck_expansion(pairings: &SubsetFamily<f64>, m_max: usize) -> Result<(f64, f64), SubsetError> {
    let n = pairings.n();
    let full = pairings.ground();
    let lhs: f64 = full
        .subsets()
        .map(|b| {
            let x = if b.is_empty() { 0.0 } else { *pairings.get(b) };
            b.sign() as f64 * (-x).exp()
        })
        .sum();
    let v = v_from_u(pairings)?;
    // dp[mask] = Σ over ordered m-tuples with union `mask` of Π ⟨X,v_C⟩
    let size = 1usize << n;
    let mut dp = vec![0.0; size];
    dp[0] = 1.0;
    let mut series = 0.0;
    let mut inv_factorial = 1.0;
    for m in 1..=m_max {
        let mut next = vec![0.0; size];
        for (mask, &w) in dp.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in full.nonempty_subsets() {
                next[mask | c.0 as usize] += w * v.get(c);
            }
        }
        dp = next;
        inv_factorial /= m as f64;
        series += inv_factorial * dp[full.0 as usize];
    }
    Ok((lhs, (-*pairings.get(full)).exp() * series))
}

/// [`mcheck_expansion`] for an atomic measure with masses `atoms` and
/// per-atom values of the `u^B`.
pub fn mcheck_expansion_check(
    n: usize,
    atoms: &[(f64, SubsetFamily<f64>)],
    m_max: usize,
) -> Result<(f64, f64), SubsetError> {
    for (_, u) in atoms {
        if u.n() != n {
            return Err(SubsetError::SizeMismatch { expected: n, found: u.n() });
        }
    }
    let pairings = SubsetFamily::from_fn(n, |b| atoms.iter().map(|(m, u)| m * u.get(b)).sum())?;
    mcheck_expansion(&pairings, m_max)
}

/// Rational helper for tests and reports.
pub fn ratio(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(if x.is_negative() { f64::NEG_INFINITY } else { f64::INFINITY })
}
