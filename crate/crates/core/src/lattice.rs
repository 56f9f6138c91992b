//! Occupancy configurations on a periodic one-dimensional lattice, local
//! functions stored as truth tables, and the structural checks on exchange
//! and walker rates.
//!
//! Site indices are taken modulo the torus size everywhere. The shift
//! convention is `(τ_x η)(y) = η(x + y)`, so a positive shift moves the
//! observation window to the right.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest support a [`LocalFunction`] may have (table of `2^16` entries).
pub const MAX_SUPPORT: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("lattice size must be positive")]
    EmptyLattice,
    #[error("density {0} is outside [0, 1]")]
    DensityOutOfRange(f64),
    #[error("support offset {0} appears more than once")]
    DuplicateOffset(i64),
    #[error("table has {found} entries, support of size {support} needs {expected}")]
    TableLength {
        support: usize,
        expected: usize,
        found: usize,
    },
    #[error("support of size {0} exceeds the maximum of {MAX_SUPPORT}")]
    SupportTooLarge(usize),
    #[error("table entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid run-length encoding: {0}")]
    Encoding(String),
}

/// Reduce an arbitrary integer site to `0..len`.
#[inline]
pub fn wrap(x: i64, len: usize) -> usize {
    x.rem_euclid(len as i64) as usize
}

/// Bit-packed occupancy of a torus of `len` sites.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    len: usize,
    words: Vec<u64>,
    particle_count: usize,
}

impl fmt::Debug for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = (0..self.len)
            .map(|x| if self.get(x) { '1' } else { '0' })
            .collect();
        f.debug_struct("Configuration")
            .field("len", &self.len)
            .field("particle_count", &self.particle_count)
            .field("bits", &bits)
            .finish()
    }
}

impl Configuration {
    pub fn empty(len: usize) -> Result<Self, LatticeError> {
        if len == 0 {
            return Err(LatticeError::EmptyLattice);
        }
        Ok(Self {
            len,
            words: vec![0; len.div_ceil(64)],
            particle_count: 0,
        })
    }

    pub fn full(len: usize) -> Result<Self, LatticeError> {
        let mut config = Self::empty(len)?;
        for x in 0..len {
            config.set(x, true);
        }
        Ok(config)
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Result<Self, LatticeError> {
        let bits: Vec<bool> = bits.into_iter().collect();
        let mut config = Self::empty(bits.len())?;
        for (x, b) in bits.into_iter().enumerate() {
            config.set(x, b);
        }
        Ok(config)
    }

    /// Configuration whose site `y` holds bit `y` of `index` (`len <= 64`).
    pub fn from_index(len: usize, index: u64) -> Result<Self, LatticeError> {
        assert!(len <= 64, "from_index needs len <= 64");
        Self::from_bits((0..len).map(|y| (index >> y) & 1 == 1))
    }

    /// Inverse of [`Configuration::from_index`].
    pub fn to_index(&self) -> u64 {
        assert!(self.len <= 64, "to_index needs len <= 64");
        self.words[0]
    }

    /// Product Bernoulli(`rho`) configuration, deterministic in `seed`.
    pub fn bernoulli(len: usize, rho: f64, seed: u64) -> Result<Self, LatticeError> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Self::bernoulli_with(len, rho, &mut rng)
    }

    pub fn bernoulli_with<R: Rng + ?Sized>(
        len: usize,
        rho: f64,
        rng: &mut R,
    ) -> Result<Self, LatticeError> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(LatticeError::DensityOutOfRange(rho));
        }
        let mut config = Self::empty(len)?;
        for x in 0..len {
            // one draw per site even at rho in {0, 1} keeps streams aligned
            let u: f64 = rng.random();
            if u < rho {
                config.set(x, true);
            }
        }
        Ok(config)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    /// True when no site is occupied.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.particle_count == 0
    }

    #[inline]
    pub fn particle_count(&self) -> usize {
        self.particle_count
    }

    /// Particle count recomputed from the bits, independent of the cache.
    pub fn recount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.particle_count as f64 / self.len as f64
    }

    /// Occupancy at site `x` in `0..len`.
    #[inline]
    pub fn get(&self, x: usize) -> bool {
        (self.words[x >> 6] >> (x & 63)) & 1 == 1
    }

    /// Occupancy at an arbitrary integer site, wrapped onto the torus.
    #[inline]
    pub fn at(&self, x: i64) -> bool {
        self.get(wrap(x, self.len))
    }

    pub fn set(&mut self, x: usize, occupied: bool) {
        let before = self.get(x);
        if before != occupied {
            self.words[x >> 6] ^= 1 << (x & 63);
            if occupied {
                self.particle_count += 1;
            } else {
                self.particle_count -= 1;
            }
        }
    }

    /// Exchange the occupancies of `x` and `x + 1` in place. Returns whether
    /// the configuration changed.
    #[inline]
    pub fn swap_in_place(&mut self, x: usize) -> bool {
        let y = if x + 1 == self.len { 0 } else { x + 1 };
        let (wx, bx) = (x >> 6, x & 63);
        let (wy, by) = (y >> 6, y & 63);
        let differ = ((self.words[wx] >> bx) ^ (self.words[wy] >> by)) & 1;
        self.words[wx] ^= differ << bx;
        self.words[wy] ^= differ << by;
        differ == 1
    }

    /// `η^{x,x+1}`: the configuration with sites `x` and `x+1` exchanged.
    pub fn swap(&self, x: i64) -> Self {
        let mut out = self.clone();
        out.swap_in_place(wrap(x, self.len));
        out
    }

    /// `τ_k η`, i.e. the configuration `y ↦ η(y + k)`.
    pub fn rotate(&self, k: i64) -> Self {
        let mut out = Self::empty(self.len).expect("nonempty");
        for y in 0..self.len {
            if self.at(y as i64 + k) {
                out.set(y, true);
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |x| self.get(x))
    }

    /// Run-length encoding such as `"3x0,2x1,1x0"`.
    pub fn to_rle(&self) -> String {
        let mut parts = Vec::new();
        let mut current = self.get(0);
        let mut run = 0usize;
        for b in self.iter() {
            if b == current {
                run += 1;
            } else {
                parts.push(format!("{run}x{}", current as u8));
                current = b;
                run = 1;
            }
        }
        parts.push(format!("{run}x{}", current as u8));
        parts.join(",")
    }

    pub fn from_rle(s: &str) -> Result<Self, LatticeError> {
        let mut bits = Vec::new();
        for part in s.split(',') {
            let (count, bit) = part
                .split_once('x')
                .ok_or_else(|| LatticeError::Encoding(part.to_string()))?;
            let count: usize = count
                .parse()
                .map_err(|_| LatticeError::Encoding(part.to_string()))?;
            let bit = match bit {
                "0" => false,
                "1" => true,
                _ => return Err(LatticeError::Encoding(part.to_string())),
            };
            bits.extend(std::iter::repeat_n(bit, count));
        }
        Self::from_bits(bits)
    }
}

/// A function of finitely many occupancies, stored as a dense truth table.
///
/// Bit `k` of a table index is the occupancy read at `support[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLocalFunction", into = "RawLocalFunction")]
pub struct LocalFunction {
    support: Vec<i64>,
    table: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLocalFunction {
    support: Vec<i64>,
    table: Vec<f64>,
}

impl TryFrom<RawLocalFunction> for LocalFunction {
    type Error = LatticeError;
    fn try_from(raw: RawLocalFunction) -> Result<Self, Self::Error> {
        LocalFunction::new(raw.support, raw.table)
    }
}

impl From<LocalFunction> for RawLocalFunction {
    fn from(f: LocalFunction) -> Self {
        RawLocalFunction {
            support: f.support,
            table: f.table,
        }
    }
}

impl LocalFunction {
    /// Build from a support and a table indexed in the order the support is
    /// given. The support is stored sorted; the table is permuted to match.
    pub fn new(support: Vec<i64>, table: Vec<f64>) -> Result<Self, LatticeError> {
        if support.len() > MAX_SUPPORT {
            return Err(LatticeError::SupportTooLarge(support.len()));
        }
        let expected = 1usize << support.len();
        if table.len() != expected {
            return Err(LatticeError::TableLength {
                support: support.len(),
                expected,
                found: table.len(),
            });
        }
        if let Some(index) = table.iter().position(|v| !v.is_finite()) {
            return Err(LatticeError::NonFinite { index });
        }
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by_key(|&k| support[k]);
        for w in order.windows(2) {
            if support[w[0]] == support[w[1]] {
                return Err(LatticeError::DuplicateOffset(support[w[0]]));
            }
        }
        let sorted: Vec<i64> = order.iter().map(|&k| support[k]).collect();
        let mut permuted = vec![0.0; expected];
        for (new_index, slot) in permuted.iter_mut().enumerate() {
            let mut old_index = 0usize;
            for (new_bit, &old_bit) in order.iter().enumerate() {
                if (new_index >> new_bit) & 1 == 1 {
                    old_index |= 1 << old_bit;
                }
            }
            *slot = table[old_index];
        }
        Ok(Self {
            support: sorted,
            table: permuted,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self::new(Vec::new(), vec![value]).expect("constant table is valid")
    }

    /// `η ↦ η(offset)`.
    pub fn occupation(offset: i64) -> Self {
        Self::new(vec![offset], vec![0.0, 1.0]).expect("valid")
    }

    /// Tabulate `f` over every pattern on `support`; `f` receives the
    /// occupancies in support order.
    pub fn tabulate<F: Fn(&[bool]) -> f64>(support: Vec<i64>, f: F) -> Result<Self, LatticeError> {
        let size = support.len();
        if size > MAX_SUPPORT {
            return Err(LatticeError::SupportTooLarge(size));
        }
        let mut bits = vec![false; size];
        let table = (0..1usize << size)
            .map(|index| {
                for (k, b) in bits.iter_mut().enumerate() {
                    *b = (index >> k) & 1 == 1;
                }
                f(&bits)
            })
            .collect();
        Self::new(support, table)
    }

    /// `Π_{a ∈ offsets} (η(a) − rho)`.
    pub fn centered_monomial(offsets: &[i64], rho: f64) -> Result<Self, LatticeError> {
        Self::tabulate(offsets.to_vec(), |bits| {
            bits.iter().map(|&b| b as u8 as f64 - rho).product()
        })
    }

    pub fn support(&self) -> &[i64] {
        &self.support
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn max_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.table.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_constant(&self) -> bool {
        self.table.iter().all(|&v| v == self.table[0])
    }

    /// Largest minus smallest support offset; 0 for an empty support.
    pub fn diameter(&self) -> i64 {
        match (self.support.first(), self.support.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }

    /// Table index of the pattern read around site `x`.
    #[inline]
    pub fn pattern_at(&self, config: &Configuration, x: i64) -> usize {
        let mut index = 0usize;
        for (k, &o) in self.support.iter().enumerate() {
            index |= (config.at(x + o) as usize) << k;
        }
        index
    }

    /// `f(τ_x η)`.
    #[inline]
    pub fn evaluate(&self, config: &Configuration, x: i64) -> f64 {
        self.table[self.pattern_at(config, x)]
    }

    /// Linear combination `Σ_k coeff_k f_k` over the union of supports.
    pub fn combine(terms: &[(f64, &LocalFunction)]) -> Result<Self, LatticeError> {
        let mut support: Vec<i64> = terms
            .iter()
            .flat_map(|(_, f)| f.support.iter().copied())
            .collect();
        support.sort_unstable();
        support.dedup();
        let positions: Vec<Vec<usize>> = terms
            .iter()
            .map(|(_, f)| {
                f.support
                    .iter()
                    .map(|o| support.binary_search(o).expect("in union"))
                    .collect()
            })
            .collect();
        let size = support.len();
        if size > MAX_SUPPORT {
            return Err(LatticeError::SupportTooLarge(size));
        }
        let table = (0..1usize << size)
            .map(|index| {
                terms
                    .iter()
                    .zip(&positions)
                    .map(|((coeff, f), pos)| {
                        let sub = pos
                            .iter()
                            .enumerate()
                            .fold(0usize, |acc, (k, &p)| acc | (((index >> p) & 1) << k));
                        coeff * f.table[sub]
                    })
                    .sum()
            })
            .collect();
        Self::new(support, table)
    }
}

/// Real weights on a contiguous block of sites `start, start+1, …`, e.g. a
/// test function sampled at `x/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteWeights {
    pub start: i64,
    pub values: Vec<f64>,
}

impl SiteWeights {
    /// Sample `f(x/n)` for `x` in `first..=last`.
    pub fn sample<F: Fn(f64) -> f64>(f: F, n: u32, first: i64, last: i64) -> Self {
        let values = (first..=last).map(|x| f(x as f64 / n as f64)).collect();
        Self {
            start: first,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offsets covered, relative to the evaluation point.
    pub fn offsets(&self) -> std::ops::Range<i64> {
        self.start..self.start + self.values.len() as i64
    }

    /// `Σ_k w_k (η(x0 + start + k) − rho)`.
    #[inline]
    pub fn centered_sum(&self, config: &Configuration, x0: i64, rho: f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, w)| w * (config.at(x0 + self.start + k as i64) as u8 as f64 - rho))
            .sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.values.iter().map(|w| w * w).sum()
    }
}

/// Exchange rate `c(·)` of the lattice gas together with its ellipticity floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRate {
    #[serde(flatten)]
    pub function: LocalFunction,
    pub epsilon0: f64,
}

impl ExchangeRate {
    pub fn new(function: LocalFunction, epsilon0: f64) -> Self {
        Self { function, epsilon0 }
    }

    /// `c ≡ 1`.
    pub fn ssep() -> Self {
        Self::new(LocalFunction::constant(1.0), 1.0)
    }

    pub fn max_rate(&self) -> f64 {
        self.function.max_value()
    }
}

/// Walker jump rates `{r_z}` keyed by jump size.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WalkRateSet {
    pub entries: BTreeMap<i64, LocalFunction>,
}

impl WalkRateSet {
    pub fn new(entries: BTreeMap<i64, LocalFunction>) -> Self {
        Self { entries }
    }

    pub fn jumps(&self) -> impl Iterator<Item = i64> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `ω = Σ_z z r_z`.
    pub fn drift_function(&self) -> Result<LocalFunction, LatticeError> {
        let terms: Vec<(f64, &LocalFunction)> =
            self.entries.iter().map(|(&z, f)| (z as f64, f)).collect();
        LocalFunction::combine(&terms)
    }

    /// `Σ_z z² r_z`.
    pub fn quadratic_function(&self) -> Result<LocalFunction, LatticeError> {
        let terms: Vec<(f64, &LocalFunction)> = self
            .entries
            .iter()
            .map(|(&z, f)| ((z * z) as f64, f))
            .collect();
        LocalFunction::combine(&terms)
    }

    /// Largest support diameter over all rates.
    pub fn diameter(&self) -> i64 {
        self.entries.values().map(LocalFunction::diameter).max().unwrap_or(0)
    }
}

/// The two-rate walker on SSEP: total jump rate 1 (times `n`), right with
/// probability `α/(α+β)` on an occupied site and `β/(α+β)` on an empty one.
pub fn warmup_rates(alpha: f64, beta: f64) -> (ExchangeRate, WalkRateSet) {
    let total = alpha + beta;
    let (p, q) = (alpha / total, beta / total);
    let mut entries = BTreeMap::new();
    entries.insert(1, LocalFunction::new(vec![0], vec![q, p]).expect("valid"));
    entries.insert(-1, LocalFunction::new(vec![0], vec![p, q]).expect("valid"));
    (ExchangeRate::ssep(), WalkRateSet::new(entries))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// `epsilon0` is not a positive finite number.
    NonPositiveFloor(f64),
    /// A table entry of `c` is below `epsilon0`.
    Ellipticity { index: usize, value: f64, floor: f64 },
    /// The support of `c` contains offset 0 or 1.
    Reversibility { offset: i64 },
    /// The walker rate set is empty.
    NoJumps,
    /// Jump size 0 is present.
    ZeroJump,
    /// A walker rate table has a negative entry.
    NegativeWalkRate { jump: i64, index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveFloor(e) => write!(f, "ellipticity: epsilon0 = {e} must be > 0"),
            Violation::Ellipticity { index, value, floor } => write!(
                f,
                "ellipticity: c table entry {index} = {value} is below epsilon0 = {floor}"
            ),
            Violation::Reversibility { offset } => write!(
                f,
                "reversibility: support of c contains offset {offset}"
            ),
            Violation::NoJumps => write!(f, "walker rates: no jump sizes given"),
            Violation::ZeroJump => write!(f, "walker rates: jump size 0 is not allowed"),
            Violation::NegativeWalkRate { jump, index, value } => write!(
                f,
                "walker rates: r_{jump} table entry {index} = {value} is negative"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "rates valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", lines.join("; "))
    }
}

/// Check finite range, ellipticity and reversibility of `c`, and the
/// admissibility of the walker rates. Finite range holds by construction.
pub fn validate_rates(c: &ExchangeRate, r: &WalkRateSet) -> ValidationReport {
    let mut violations = Vec::new();
    if !(c.epsilon0 > 0.0 && c.epsilon0.is_finite()) {
        violations.push(Violation::NonPositiveFloor(c.epsilon0));
    } else {
        for (index, &value) in c.function.table().iter().enumerate() {
            if value < c.epsilon0 {
                violations.push(Violation::Ellipticity {
                    index,
                    value,
                    floor: c.epsilon0,
                });
            }
        }
    }
    for &offset in c.function.support() {
        if offset == 0 || offset == 1 {
            violations.push(Violation::Reversibility { offset });
        }
    }
    if r.is_empty() {
        violations.push(Violation::NoJumps);
    }
    for (&jump, f) in &r.entries {
        if jump == 0 {
            violations.push(Violation::ZeroJump);
        }
        for (index, &value) in f.table().iter().enumerate() {
            if value < 0.0 {
                violations.push(Violation::NegativeWalkRate { jump, index, value });
            }
        }
    }
    ValidationReport { violations }
}
