//! Linear algebra over F₂: fixed-width bit vectors and subspaces kept in
//! reduced row echelon form.
//!
//! Bit vectors are stored in the low `n` bits of a `u32`. Position 0 of the
//! string form is the most significant bit, so the string `"10"` is the
//! integer `0b10` and also the computational basis index `2`.

use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Largest supported ambient dimension (2^20 amplitudes downstream).
pub const MAX_DIM: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Gf2Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid dimension: {0}")]
    Dimension(String),
    #[error("subspace of dimension {0} is too large to enumerate")]
    Capacity(usize),
    #[error("generators are not linearly independent")]
    Dependent,
    #[error("parse error: {0}")]
    Parse(String),
}

fn check_ambient(n: usize) -> Result<(), Gf2Error> {
    if n == 0 || n > MAX_DIM || !n.is_multiple_of(2) {
        return Err(Gf2Error::Dimension(format!(
            "ambient dimension must be even and in 2..={MAX_DIM}, got {n}"
        )));
    }
    Ok(())
}

fn mask(n: usize) -> u32 {
    if n == 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

/// An element of F₂ⁿ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitVec {
    n: u8,
    bits: u32,
}

impl BitVec {
    pub fn new(n: usize, bits: u32) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        if bits & !mask(n) != 0 {
            return Err(Gf2Error::Dimension(format!(
                "value {bits:#x} does not fit in {n} bits"
            )));
        }
        Ok(Self { n: n as u8, bits })
    }

    pub fn zero(n: usize) -> Result<Self, Gf2Error> {
        Self::new(n, 0)
    }

    /// Parses a string of `0`/`1` characters, most significant first.
    pub fn parse(s: &str) -> Result<Self, Gf2Error> {
        let mut bits = 0u32;
        for c in s.chars() {
            bits = (bits << 1)
                | match c {
                    '0' => 0,
                    '1' => 1,
                    other => {
                        return Err(Gf2Error::Parse(format!("unexpected character {other:?}")))
                    }
                };
        }
        Self::new(s.len(), bits)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        Ok(Self {
            n: n as u8,
            bits: rng.random::<u32>() & mask(n),
        })
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Integer value, which is also the basis-state index.
    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Bit at string position `i` (0 is the most significant).
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len());
        (self.bits >> (self.len() - 1 - i)) & 1 == 1
    }

    pub fn is_zero(&self) -> bool {
        self.bits == 0
    }

    pub fn dot(&self, other: &BitVec) -> Result<bool, Gf2Error> {
        if self.n != other.n {
            return Err(Gf2Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok((self.bits & other.bits).count_ones() % 2 == 1)
    }
}

impl fmt::Display for BitVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:0width$b}", self.bits, width = self.len())
    }
}

/// Parity of the AND of `a` and `b`.
pub fn dot(a: &BitVec, b: &BitVec) -> Result<bool, Gf2Error> {
    a.dot(b)
}

/// Reduces `rows` to reduced row echelon form with pivots ascending by
/// string position (descending integer value). Zero rows are dropped.
fn rref(rows: &[u32], n: usize) -> Vec<u32> {
    let mut rows: Vec<u32> = rows.to_vec();
    let mut rank = 0;
    for col in (0..n).rev() {
        let bit = 1u32 << col;
        let Some(pivot) = (rank..rows.len()).find(|&i| rows[i] & bit != 0) else {
            continue;
        };
        rows.swap(rank, pivot);
        let pivot_row = rows[rank];
        for (i, row) in rows.iter_mut().enumerate() {
            if i != rank && *row & bit != 0 {
                *row ^= pivot_row;
            }
        }
        rank += 1;
    }
    rows.truncate(rank);
    rows
}

fn pivot_bit(row: u32) -> u32 {
    debug_assert!(row != 0);
    1u32 << (31 - row.leading_zeros())
}

/// A linear subspace of F₂ⁿ.
///
/// Equality compares the canonical basis only, so two different generator
/// sets for the same span are equal.
#[derive(Debug, Clone)]
pub struct Subspace {
    ambient_dim: usize,
    generators: Vec<BitVec>,
    basis: Vec<u32>,
}

impl PartialEq for Subspace {
    fn eq(&self, other: &Self) -> bool {
        self.ambient_dim == other.ambient_dim && self.basis == other.basis
    }
}

impl Eq for Subspace {}

impl std::hash::Hash for Subspace {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.ambient_dim.hash(state);
        self.basis.hash(state);
    }
}

impl Subspace {
    /// Builds the span of linearly independent `generators`.
    pub fn from_generators(n: usize, generators: Vec<BitVec>) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        if let Some(g) = generators.iter().find(|g| g.len() != n) {
            return Err(Gf2Error::DimensionMismatch {
                expected: n,
                got: g.len(),
            });
        }
        let raw: Vec<u32> = generators.iter().map(BitVec::bits).collect();
        let basis = rref(&raw, n);
        if basis.len() != generators.len() {
            return Err(Gf2Error::Dependent);
        }
        Ok(Self {
            ambient_dim: n,
            generators,
            basis,
        })
    }

    /// Span of arbitrary vectors; dependent ones are discarded.
    pub fn span(n: usize, vectors: &[BitVec]) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        if let Some(g) = vectors.iter().find(|g| g.len() != n) {
            return Err(Gf2Error::DimensionMismatch {
                expected: n,
                got: g.len(),
            });
        }
        let raw: Vec<u32> = vectors.iter().map(BitVec::bits).collect();
        Ok(Self::from_basis(n, rref(&raw, n)))
    }

    fn from_basis(n: usize, basis: Vec<u32>) -> Self {
        let generators = basis
            .iter()
            .map(|&b| BitVec {
                n: n as u8,
                bits: b,
            })
            .collect();
        Self {
            ambient_dim: n,
            generators,
            basis,
        }
    }

    pub fn trivial(n: usize) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        Ok(Self::from_basis(n, Vec::new()))
    }

    pub fn full(n: usize) -> Result<Self, Gf2Error> {
        check_ambient(n)?;
        Ok(Self::from_basis(
            n,
            (0..n).rev().map(|c| 1u32 << c).collect(),
        ))
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Number of members, 2^dim.
    pub fn size(&self) -> usize {
        1usize << self.dim()
    }

    pub fn generators(&self) -> &[BitVec] {
        &self.generators
    }

    /// Canonical basis rows.
    pub fn basis_rref(&self) -> Vec<BitVec> {
        self.basis
            .iter()
            .map(|&b| BitVec {
                n: self.ambient_dim as u8,
                bits: b,
            })
            .collect()
    }

    /// Membership by elimination against the canonical basis.
    pub fn contains(&self, x: &BitVec) -> Result<bool, Gf2Error> {
        if x.len() != self.ambient_dim {
            return Err(Gf2Error::DimensionMismatch {
                expected: self.ambient_dim,
                got: x.len(),
            });
        }
        Ok(self.contains_index(x.bits()))
    }

    /// Membership for a raw basis index; the caller guarantees the width.
    pub fn contains_index(&self, mut x: u32) -> bool {
        for &row in &self.basis {
            if x & pivot_bit(row) != 0 {
                x ^= row;
            }
        }
        x == 0
    }

    /// `{y : x·y = 0 for all x in self}`.
    pub fn orthogonal_complement(&self) -> Subspace {
        let n = self.ambient_dim;
        let pivots: Vec<u32> = self.basis.iter().map(|&r| pivot_bit(r)).collect();
        let pivot_mask = pivots.iter().fold(0u32, |acc, p| acc | p);
        let mut out = Vec::with_capacity(n - self.dim());
        for col in (0..n).rev() {
            let free = 1u32 << col;
            if pivot_mask & free != 0 {
                continue;
            }
            let mut y = free;
            for (&row, &p) in self.basis.iter().zip(&pivots) {
                if row & free != 0 {
                    y |= p;
                }
            }
            out.push(y);
        }
        Self::from_basis(n, rref(&out, n))
    }

    /// All members in ascending (lexicographic) order.
    pub fn enumerate(&self) -> Result<Vec<BitVec>, Gf2Error> {
        Ok(self
            .member_indices()?
            .into_iter()
            .map(|bits| BitVec {
                n: self.ambient_dim as u8,
                bits,
            })
            .collect())
    }

    /// All members as sorted basis indices.
    pub fn member_indices(&self) -> Result<Vec<u32>, Gf2Error> {
        if self.dim() > MAX_DIM {
            return Err(Gf2Error::Capacity(self.dim()));
        }
        let mut members: Vec<u32> = (0u32..1 << self.dim())
            .map(|sel| {
                self.basis
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| sel >> i & 1 == 1)
                    .fold(0u32, |acc, (_, &row)| acc ^ row)
            })
            .collect();
        members.sort_unstable();
        Ok(members)
    }

    /// Hex rows of the canonical basis, one per line.
    pub fn to_hex_rows(&self) -> String {
        let width = self.ambient_dim.div_ceil(4);
        self.basis
            .iter()
            .map(|row| format!("{row:0width$x}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Inverse of [`Subspace::to_hex_rows`]; blank lines are ignored.
    pub fn from_hex_rows(n: usize, text: &str) -> Result<Self, Gf2Error> {
        let rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                u32::from_str_radix(l, 16)
                    .map_err(|e| Gf2Error::Parse(format!("{l:?}: {e}")))
                    .and_then(|bits| BitVec::new(n, bits))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_generators(n, rows)
    }
}

/// Uniformly samples `dim` rows, resampling until they are independent.
pub fn sample_subspace<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Subspace, Gf2Error> {
    check_ambient(n)?;
    if dim > n {
        return Err(Gf2Error::Dimension(format!(
            "cannot sample a {dim}-dimensional subspace of F2^{n}"
        )));
    }
    loop {
        let rows: Vec<BitVec> = (0..dim)
            .map(|_| BitVec::random(n, rng))
            .collect::<Result<_, _>>()?;
        match Subspace::from_generators(n, rows) {
            Ok(s) => return Ok(s),
            Err(Gf2Error::Dependent) => continue,
            Err(e) => return Err(e),
        }
    }
}
