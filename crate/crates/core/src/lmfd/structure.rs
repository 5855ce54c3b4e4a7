use crate::{Error, Result};

/// Degree structure of `G = R_rb / s^2 + D^-1 N` with `R_rb` a fully
/// parameterized `p x q` rigid-body block.
///
/// Row `i` of `D` has degree `nu_i`; the diagonal entry is monic in the
/// basis (its `phi_{nu_i}` coefficient is pinned to 1), an off-diagonal
/// entry `D_ij` has degree `<= min(nu_i, nu_j - 1)`, and row `i` of `N` has
/// degree `<= nu_i - 2`. This is the Popov form for observability indices
/// `nu`, which makes `D` both row- and column-reduced with `deg det D =
/// sum nu_i`, and forces relative degree two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmfdStructure {
    p: usize,
    q: usize,
    n_m: usize,
    n_rb: usize,
    row_degrees: Vec<usize>,
    d_slots: Vec<Slot>,
    n_slots: Vec<Slot>,
    r_offset: usize,
    n_theta: usize,
}

/// Parameters of one polynomial entry: `theta[offset..offset + count]` are
/// the coefficients of `phi_0 .. phi_{count-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub count: usize,
}

impl LmfdStructure {
    pub fn new(p: usize, q: usize, n_m: usize, n_rb: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::invalid("LMFD needs at least one output and one input"));
        }
        if n_rb > n_m {
            return Err(Error::invalid(format!(
                "{n_rb} rigid-body modes exceed the mode count {n_m}"
            )));
        }
        if n_m == 0 {
            return Err(Error::invalid("LMFD needs at least one mode"));
        }
        let n_f = 2 * (n_m - n_rb);
        let (base, extra) = (n_f / p, n_f % p);
        let row_degrees: Vec<usize> = (0..p).map(|i| base + usize::from(i < extra)).collect();

        let mut offset = 0;
        let mut d_slots = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                let count = if i == j {
                    row_degrees[i]
                } else if row_degrees[j] == 0 {
                    0
                } else {
                    row_degrees[i].min(row_degrees[j] - 1) + 1
                };
                d_slots.push(Slot { offset, count });
                offset += count;
            }
        }
        let mut n_slots = Vec::with_capacity(p * q);
        for nu in &row_degrees {
            for _ in 0..q {
                let count = nu.saturating_sub(1);
                n_slots.push(Slot { offset, count });
                offset += count;
            }
        }
        let r_offset = offset;
        if n_rb > 0 {
            offset += p * q;
        }
        Ok(Self {
            p,
            q,
            n_m,
            n_rb,
            row_degrees,
            d_slots,
            n_slots,
            r_offset,
            n_theta: offset,
        })
    }

    pub fn outputs(&self) -> usize {
        self.p
    }

    pub fn inputs(&self) -> usize {
        self.q
    }

    pub fn n_modes(&self) -> usize {
        self.n_m
    }

    pub fn n_rb(&self) -> usize {
        self.n_rb
    }

    /// McMillan degree `2 n_m`.
    pub fn mcmillan_degree(&self) -> usize {
        2 * self.n_m
    }

    /// Degree of `det D`, i.e. the flexible-part order.
    pub fn flexible_degree(&self) -> usize {
        2 * (self.n_m - self.n_rb)
    }

    pub fn row_degrees(&self) -> &[usize] {
        &self.row_degrees
    }

    pub fn max_row_degree(&self) -> usize {
        self.row_degrees.iter().copied().max().unwrap_or(0)
    }

    /// Number of scalar polynomials needed for the denominator basis.
    pub fn d_basis_len(&self) -> usize {
        self.max_row_degree() + 1
    }

    /// Number of scalar polynomials needed for the numerator basis.
    pub fn n_basis_len(&self) -> usize {
        self.max_row_degree().saturating_sub(1)
    }

    pub fn d_slot(&self, i: usize, j: usize) -> Slot {
        self.d_slots[i * self.p + j]
    }

    pub fn n_slot(&self, i: usize, k: usize) -> Slot {
        self.n_slots[i * self.q + k]
    }

    /// Offset of the row-major rigid block, if there are rigid-body modes.
    pub fn r_offset(&self) -> Option<usize> {
        (self.n_rb > 0).then_some(self.r_offset)
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    /// Parameters belonging to `D`: `0..d_params()`.
    pub fn d_params(&self) -> usize {
        self.n_slots.first().map_or(self.r_offset, |s| s.offset)
    }
}

pub fn build_structure(p: usize, q: usize, n_m: usize, n_rb: usize) -> Result<LmfdStructure> {
    LmfdStructure::new(p, q, n_m, n_rb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quasi_constant_degrees() {
        let s = build_structure(3, 7, 23, 3).unwrap();
        assert_eq!(s.flexible_degree(), 40);
        assert_eq!(s.row_degrees(), &[14, 13, 13]);
        assert_eq!(s.mcmillan_degree(), 46);
    }

    #[test]
    fn siso_degree() {
        let s = build_structure(1, 1, 5, 1).unwrap();
        assert_eq!(s.row_degrees(), &[8]);
        // 8 free denominator coefficients, numerator degree 6, one rigid gain
        assert_eq!(s.n_theta(), 8 + 7 + 1);
    }

    #[test]
    fn rigid_only() {
        let s = build_structure(2, 3, 2, 2).unwrap();
        assert_eq!(s.row_degrees(), &[0, 0]);
        assert_eq!(s.n_theta(), 6);
        assert_eq!(s.n_basis_len(), 0);
    }

    #[test]
    fn infeasible_rejected() {
        assert!(build_structure(2, 2, 1, 2).is_err());
        assert!(build_structure(0, 2, 3, 0).is_err());
    }

    #[test]
    fn degree_sum_invariant() {
        for p in 1..6 {
            for n_m in 1..12 {
                for n_rb in 0..=n_m.min(3) {
                    let s = build_structure(p, 2, n_m, n_rb).unwrap();
                    assert_eq!(s.row_degrees().iter().sum::<usize>(), s.flexible_degree());
                    let (lo, hi) = (
                        s.row_degrees().iter().min().unwrap(),
                        s.row_degrees().iter().max().unwrap(),
                    );
                    assert!(hi - lo <= 1);
                }
            }
        }
    }
}
