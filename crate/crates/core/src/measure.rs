//! Finite atomless measure spaces modeled by refinable dyadic atoms.
//!
//! Every atom weight is `numerator / 2^denominator_log2`, so measures and
//! integrals of signs are exact integers over a common denominator. The
//! atomless hypothesis is replaced by on-demand refinement: any atom can be
//! split into `2^j` equal children, and a [`Refinement`] maps every old atom
//! to the contiguous range of its children so that live sets and signs can be
//! carried over to the refined space.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact nonnegative dyadic rational, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dyadic {
    numerator: u128,
    denominator_log2: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic {
        numerator: 0,
        denominator_log2: 0,
    };

    pub fn new(numerator: u128, denominator_log2: u32) -> Self {
        if numerator == 0 {
            return Self::ZERO;
        }
        let shift = numerator.trailing_zeros().min(denominator_log2);
        Dyadic {
            numerator: numerator >> shift,
            denominator_log2: denominator_log2 - shift,
        }
    }

    pub fn numerator(&self) -> u128 {
        self.numerator
    }

    pub fn denominator_log2(&self) -> u32 {
        self.denominator_log2
    }

    pub fn to_f64(self) -> f64 {
        self.numerator as f64 / 2f64.powi(self.denominator_log2 as i32)
    }

    /// `self / 2^k`.
    pub fn halved(self, k: u32) -> Self {
        Dyadic::new(self.numerator, self.denominator_log2 + k)
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        // align denominators; an overflowing shift means the shifted side is larger
        let (a, b, flip) = if self.denominator_log2 >= other.denominator_log2 {
            (self, other, false)
        } else {
            (other, self, true)
        };
        let shift = a.denominator_log2 - b.denominator_log2;
        let ord = match b.numerator.checked_shl(shift) {
            Some(bs) if shift < 128 && (bs >> shift) == b.numerator => a.numerator.cmp(&bs),
            _ => Ordering::Less,
        };
        if flip {
            ord.reverse()
        } else {
            ord
        }
    }
}

/// A finite measure space whose atoms carry exact dyadic weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct MeasureSpace {
    denominator_log2: u32,
    numerators: Vec<u64>,
}

#[derive(Deserialize)]
struct RawSpace {
    denominator_log2: u32,
    numerators: Vec<u64>,
}

impl TryFrom<RawSpace> for MeasureSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        MeasureSpace::new(raw.denominator_log2, raw.numerators)
    }
}

impl MeasureSpace {
    pub fn new(denominator_log2: u32, numerators: Vec<u64>) -> Result<Self> {
        if numerators.is_empty() {
            return Err(Error::InvalidInput("a measure space needs at least one atom".into()));
        }
        if numerators.contains(&0) {
            return Err(Error::InvalidInput("atom weights must be positive".into()));
        }
        if denominator_log2 > 120 {
            return Err(Error::Overflow);
        }
        Ok(MeasureSpace {
            denominator_log2,
            numerators,
        })
    }

    /// `count` atoms of weight `1/count`; `count` must be a power of two.
    pub fn uniform(count: usize) -> Result<Self> {
        if count == 0 || !count.is_power_of_two() {
            return Err(Error::NonDyadic(count));
        }
        Self::new(count.trailing_zeros(), vec![1; count])
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    pub fn denominator_log2(&self) -> u32 {
        self.denominator_log2
    }

    pub fn numerators(&self) -> &[u64] {
        &self.numerators
    }

    pub fn weight(&self, atom: usize) -> Dyadic {
        Dyadic::new(self.numerators[atom] as u128, self.denominator_log2)
    }

    pub fn weight_f64(&self, atom: usize) -> f64 {
        self.numerators[atom] as f64 / 2f64.powi(self.denominator_log2 as i32)
    }

    pub fn total(&self) -> Dyadic {
        let sum: u128 = self.numerators.iter().map(|&n| n as u128).sum();
        Dyadic::new(sum, self.denominator_log2)
    }

    pub fn full_set(&self) -> AtomSet {
        AtomSet::full(self.len())
    }

    pub fn measure(&self, set: &AtomSet) -> Dyadic {
        let sum: u128 = set.iter().map(|i| self.numerators[i] as u128).sum();
        Dyadic::new(sum, self.denominator_log2)
    }

    pub fn check_set(&self, set: &AtomSet) -> Result<()> {
        match set.indices().last() {
            Some(&last) if last >= self.len() => Err(Error::InvalidAtom {
                index: last,
                len: self.len(),
            }),
            _ => Ok(()),
        }
    }

    pub fn check_sign(&self, sign: &SignVector) -> Result<()> {
        if sign.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: sign.len(),
            });
        }
        Ok(())
    }

    /// Numerator of `∫ x dμ` over the common denominator `2^denominator_log2`.
    pub fn integral_numerator(&self, sign: &SignVector) -> i128 {
        sign.values
            .iter()
            .zip(&self.numerators)
            .map(|(&v, &n)| v as i128 * n as i128)
            .sum()
    }

    pub fn is_mean_zero(&self, sign: &SignVector) -> bool {
        self.integral_numerator(sign) == 0
    }

    /// True when all atoms of `set` have the same weight.
    pub fn has_equal_weights(&self, set: &AtomSet) -> bool {
        let mut it = set.iter().map(|i| self.numerators[i]);
        match it.next() {
            Some(first) => it.all(|n| n == first),
            None => true,
        }
    }

    /// Split `atom` into `parts` children of equal weight.
    pub fn refine(&self, atom: usize, parts: usize) -> Result<(MeasureSpace, Refinement)> {
        self.refine_many(&[(atom, parts)])
    }

    /// Split several atoms at once; each `(atom, parts)` pair follows the
    /// rules of [`MeasureSpace::refine`]. Atoms not listed keep one child.
    pub fn refine_many(&self, splits: &[(usize, usize)]) -> Result<(MeasureSpace, Refinement)> {
        let mut parts_of = vec![1usize; self.len()];
        for &(atom, parts) in splits {
            if atom >= self.len() {
                return Err(Error::InvalidAtom {
                    index: atom,
                    len: self.len(),
                });
            }
            if parts < 2 {
                return Err(Error::InvalidParts(parts));
            }
            if !parts.is_power_of_two() {
                return Err(Error::NonDyadic(parts));
            }
            parts_of[atom] = parts_of[atom].checked_mul(parts).ok_or(Error::Overflow)?;
        }

        // extra denominator bits needed so that every child numerator is integral
        let mut extra = 0u32;
        for (i, &parts) in parts_of.iter().enumerate() {
            let need = parts.trailing_zeros();
            let have = self.numerators[i].trailing_zeros();
            extra = extra.max(need.saturating_sub(have));
        }
        let max_num = self.numerators.iter().copied().max().unwrap_or(0);
        if extra > 0 && (max_num.leading_zeros() <= extra || self.denominator_log2 + extra > 120) {
            return Err(Error::Overflow);
        }

        let total_children: usize = parts_of.iter().sum();
        let mut numerators = Vec::with_capacity(total_children);
        let mut offsets = Vec::with_capacity(self.len() + 1);
        offsets.push(0);
        for (i, &parts) in parts_of.iter().enumerate() {
            let scaled = self.numerators[i] << extra;
            let child = scaled >> parts.trailing_zeros();
            numerators.extend(std::iter::repeat_n(child, parts));
            offsets.push(numerators.len());
        }
        let space = MeasureSpace {
            denominator_log2: self.denominator_log2 + extra,
            numerators,
        };
        Ok((space, Refinement { offsets }))
    }
}

/// Map from the atoms of a coarse space to contiguous child ranges of a
/// refined space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    offsets: Vec<usize>,
}

impl Refinement {
    pub fn identity(len: usize) -> Self {
        Refinement {
            offsets: (0..=len).collect(),
        }
    }

    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "refinement offsets must start at 0 and increase".into(),
            ));
        }
        Ok(Refinement { offsets })
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn old_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn new_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn children(&self, atom: usize) -> Range<usize> {
        self.offsets[atom]..self.offsets[atom + 1]
    }

    pub fn is_identity(&self) -> bool {
        self.old_len() == self.new_len()
    }

    /// Parent of every new atom.
    pub fn parents(&self) -> Vec<usize> {
        let mut parents = Vec::with_capacity(self.new_len());
        for i in 0..self.old_len() {
            parents.extend(std::iter::repeat_n(i, self.children(i).len()));
        }
        parents
    }

    pub fn lift_set(&self, set: &AtomSet) -> AtomSet {
        let mut indices = Vec::with_capacity(set.len());
        for i in set.iter() {
            indices.extend(self.children(i));
        }
        AtomSet { indices }
    }

    pub fn lift_sign(&self, sign: &SignVector) -> SignVector {
        let mut values = Vec::with_capacity(self.new_len());
        for (i, &v) in sign.values.iter().enumerate() {
            values.extend(std::iter::repeat_n(v, self.children(i).len()));
        }
        SignVector { values }
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Refinement) -> Refinement {
        assert_eq!(self.new_len(), next.old_len(), "refinements do not chain");
        Refinement {
            offsets: self.offsets.iter().map(|&o| next.offsets[o]).collect(),
        }
    }
}

/// Sorted, duplicate-free set of atom indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AtomSet {
    indices: Vec<usize>,
}

impl AtomSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        AtomSet { indices }
    }

    pub fn full(len: usize) -> Self {
        AtomSet {
            indices: (0..len).collect(),
        }
    }

    pub fn empty() -> Self {
        AtomSet::default()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, atom: usize) -> bool {
        self.indices.binary_search(&atom).is_ok()
    }

    pub fn difference(&self, other: &AtomSet) -> AtomSet {
        AtomSet {
            indices: self.iter().filter(|&i| !other.contains(i)).collect(),
        }
    }

    pub fn union(&self, other: &AtomSet) -> AtomSet {
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        AtomSet::new(indices)
    }

    pub fn is_disjoint(&self, other: &AtomSet) -> bool {
        other.iter().all(|i| !self.contains(i))
    }
}

impl FromIterator<usize> for AtomSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        AtomSet::new(iter.into_iter().collect())
    }
}

/// A `{-1, 0, +1}`-valued step function over the atoms of a space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct SignVector {
    values: Vec<i8>,
}

impl TryFrom<Vec<i8>> for SignVector {
    type Error = Error;

    fn try_from(values: Vec<i8>) -> Result<Self> {
        SignVector::from_values(values)
    }
}

impl From<SignVector> for Vec<i8> {
    fn from(sign: SignVector) -> Vec<i8> {
        sign.values
    }
}

impl SignVector {
    pub fn from_values(values: Vec<i8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::InvalidInput(format!("sign value {v} outside {{-1,0,1}}")));
        }
        Ok(SignVector { values })
    }

    pub fn zeros(len: usize) -> Self {
        SignVector { values: vec![0; len] }
    }

    /// `value` on every atom of `set`, zero elsewhere.
    pub fn constant_on(len: usize, set: &AtomSet, value: i8) -> Self {
        let mut values = vec![0; len];
        for i in set.iter() {
            values[i] = value.signum();
        }
        SignVector { values }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, atom: usize) -> i8 {
        self.values[atom]
    }

    pub fn set(&mut self, atom: usize, value: i8) {
        self.values[atom] = value.signum();
    }

    pub fn support(&self) -> AtomSet {
        AtomSet {
            indices: self
                .values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn restrict(&self, set: &AtomSet) -> SignVector {
        let mut values = vec![0; self.len()];
        for i in set.iter() {
            values[i] = self.values[i];
        }
        SignVector { values }
    }

    pub fn negated(&self) -> SignVector {
        SignVector {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Sum of two signs with disjoint supports.
    pub fn disjoint_sum(&self, other: &SignVector) -> Result<SignVector> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        let mut values = self.values.clone();
        for (i, &v) in other.values.iter().enumerate() {
            if v != 0 {
                if values[i] != 0 {
                    return Err(Error::InvalidInput(format!("sign supports overlap at atom {i}")));
                }
                values[i] = v;
            }
        }
        Ok(SignVector { values })
    }

    /// Pointwise product.
    pub fn product(&self, other: &SignVector) -> SignVector {
        SignVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        }
    }

    /// `(self - other) / 2`, defined where both are `±1` on the same support.
    pub fn half_difference(&self, other: &SignVector) -> SignVector {
        SignVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| ((a - b) / 2).signum())
                .collect(),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Alternating `+1/-1` blocks of size `|set| / 2^level` over `set` in index
/// order: the dyadic Rademacher function of the given level on `set`.
pub fn rademacher_sign(space: &MeasureSpace, set: &AtomSet, level: u32) -> Result<SignVector> {
    space.check_set(set)?;
    if set.is_empty() || level == 0 || level >= usize::BITS {
        return Err(Error::NotDivisible { len: set.len(), level });
    }
    let blocks = 1usize << level;
    if !set.len().is_multiple_of(blocks) {
        return Err(Error::NotDivisible { len: set.len(), level });
    }
    if !space.has_equal_weights(set) {
        return Err(Error::UnequalWeights);
    }
    let block = set.len() / blocks;
    let mut sign = SignVector::zeros(space.len());
    for (pos, atom) in set.iter().enumerate() {
        sign.values[atom] = if (pos / block).is_multiple_of(2) { 1 } else { -1 };
    }
    Ok(sign)
}

/// Highest Rademacher level available on `set` (largest `L` with `2^L | |set|`).
pub fn max_rademacher_level(set: &AtomSet) -> u32 {
    if set.is_empty() {
        0
    } else {
        set.len().trailing_zeros()
    }
}

/// Splits that give every atom of `set` the weight of its lightest atom, or
/// `UnequalWeights` when the odd parts of the numerators differ.
pub fn uniformizing_splits(space: &MeasureSpace, set: &AtomSet) -> Result<Vec<(usize, usize)>> {
    space.check_set(set)?;
    let odd = |n: u64| n >> n.trailing_zeros();
    let mut it = set.iter().map(|i| space.numerators[i]);
    let Some(first) = it.next() else {
        return Ok(Vec::new());
    };
    if it.any(|n| odd(n) != odd(first)) {
        return Err(Error::UnequalWeights);
    }
    let low = set
        .iter()
        .map(|i| space.numerators[i].trailing_zeros())
        .min()
        .unwrap_or(0);
    Ok(set
        .iter()
        .filter_map(|i| {
            let k = space.numerators[i].trailing_zeros() - low;
            (k > 0).then(|| (i, 1usize << k))
        })
        .collect())
}

const HALF_SPLIT_SEARCH_LIMIT: usize = 24;

/// Split `set` into two disjoint subsets of exactly equal measure.
///
/// Equal-weight sets of even size split into their first and second halves.
/// Otherwise atoms are taken greedily by decreasing weight; a failed greedy
/// pass falls back to exhaustive search on small sets.
pub fn half_split(space: &MeasureSpace, set: &AtomSet) -> Result<(AtomSet, AtomSet)> {
    space.check_set(set)?;
    let total: u128 = set.iter().map(|i| space.numerators[i] as u128).sum();
    if set.is_empty() || !total.is_multiple_of(2) {
        return Err(Error::Unsplittable);
    }
    let half = total / 2;

    if space.has_equal_weights(set) {
        if !set.len().is_multiple_of(2) {
            return Err(Error::Unsplittable);
        }
        let mid = set.len() / 2;
        return Ok((
            AtomSet {
                indices: set.indices[..mid].to_vec(),
            },
            AtomSet {
                indices: set.indices[mid..].to_vec(),
            },
        ));
    }

    let mut order: Vec<usize> = set.indices.clone();
    order.sort_by(|&a, &b| space.numerators[b].cmp(&space.numerators[a]).then(a.cmp(&b)));
    let mut acc = 0u128;
    let mut first = Vec::new();
    for &i in &order {
        let w = space.numerators[i] as u128;
        if acc + w <= half {
            acc += w;
            first.push(i);
        }
    }
    if acc == half {
        let first = AtomSet::new(first);
        let second = set.difference(&first);
        return Ok((first, second));
    }

    if set.len() > HALF_SPLIT_SEARCH_LIMIT {
        return Err(Error::Unsplittable);
    }
    let n = set.len();
    for mask in 1u32..(1u32 << n) {
        let sum: u128 = (0..n)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| space.numerators[set.indices[b]] as u128)
            .sum();
        if sum == half {
            let first: AtomSet = (0..n)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| set.indices[b])
                .collect();
            let second = set.difference(&first);
            return Ok((first, second));
        }
    }
    Err(Error::Unsplittable)
}
