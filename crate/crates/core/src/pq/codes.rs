use crate::error::{Error, Result};

/// Backing storage for code cells: one byte per code up to 8 bits, two above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodeCells {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl CodeCells {
    fn len(&self) -> usize {
        match self {
            CodeCells::U8(v) => v.len(),
            CodeCells::U16(v) => v.len(),
        }
    }
}

/// `n_tokens x M` matrix of centroid indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodesMatrix {
    m: usize,
    nbits: u32,
    cells: CodeCells,
}

impl CodesMatrix {
    pub fn new(m: usize, nbits: u32) -> Self {
        Self::with_capacity(m, nbits, 0)
    }

    pub fn with_capacity(m: usize, nbits: u32, tokens: usize) -> Self {
        let cells = if nbits <= 8 {
            CodeCells::U8(Vec::with_capacity(tokens * m))
        } else {
            CodeCells::U16(Vec::with_capacity(tokens * m))
        };
        Self { m, nbits, cells }
    }

    /// Builds a matrix from raw codes, checking every code against `2^nbits`.
    pub fn from_codes(m: usize, nbits: u32, codes: &[usize]) -> Result<Self> {
        if m == 0 || !codes.len().is_multiple_of(m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: codes.len() % m.max(1),
            });
        }
        let mut out = Self::with_capacity(m, nbits, codes.len() / m);
        for row in codes.chunks_exact(m) {
            out.push_row(row)?;
        }
        Ok(out)
    }

    /// Wraps already-packed cells, validating each code.
    pub fn from_cells(m: usize, nbits: u32, cells: CodeCells) -> Result<Self> {
        let wide = nbits > 8;
        if wide != matches!(cells, CodeCells::U16(_)) {
            return Err(Error::Format(format!("cell width does not match nbits = {nbits}")));
        }
        if m == 0 || !cells.len().is_multiple_of(m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: cells.len() % m.max(1),
            });
        }
        let out = Self { m, nbits, cells };
        out.validate()?;
        Ok(out)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn nbits(&self) -> u32 {
        self.nbits
    }

    pub fn n_tokens(&self) -> usize {
        self.cells.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.cells.len() == 0
    }

    pub fn cells(&self) -> &CodeCells {
        &self.cells
    }

    pub fn cell_width(&self) -> usize {
        match self.cells {
            CodeCells::U8(_) => 1,
            CodeCells::U16(_) => 2,
        }
    }

    /// Bytes occupied by the stored cells.
    pub fn bytes(&self) -> usize {
        self.cells.len() * self.cell_width()
    }

    #[inline]
    pub fn get(&self, token: usize, subspace: usize) -> usize {
        let i = token * self.m + subspace;
        match &self.cells {
            CodeCells::U8(v) => v[i] as usize,
            CodeCells::U16(v) => v[i] as usize,
        }
    }

    pub fn row(&self, token: usize) -> Vec<usize> {
        (0..self.m).map(|i| self.get(token, i)).collect()
    }

    pub fn push_row(&mut self, row: &[usize]) -> Result<()> {
        if row.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                actual: row.len(),
            });
        }
        let limit = 1usize << self.nbits;
        if let Some(i) = row.iter().position(|&c| c >= limit) {
            return Err(Error::CodeOutOfRange {
                token: self.n_tokens(),
                subspace: i,
                code: row[i],
                nbits: self.nbits,
            });
        }
        match &mut self.cells {
            CodeCells::U8(v) => v.extend(row.iter().map(|&c| c as u8)),
            CodeCells::U16(v) => v.extend(row.iter().map(|&c| c as u16)),
        }
        Ok(())
    }

    /// Appends every row of `other`, which must share `M` and `nbits`.
    pub fn extend_from(&mut self, other: &CodesMatrix) -> Result<()> {
        if other.m != self.m || other.nbits != self.nbits {
            return Err(Error::CodebookMismatch(format!(
                "cannot append codes (M={}, nbits={}) to (M={}, nbits={})",
                other.m, other.nbits, self.m, self.nbits
            )));
        }
        match (&mut self.cells, &other.cells) {
            (CodeCells::U8(a), CodeCells::U8(b)) => a.extend_from_slice(b),
            (CodeCells::U16(a), CodeCells::U16(b)) => a.extend_from_slice(b),
            _ => unreachable!("cell width follows nbits"),
        }
        Ok(())
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> CodesMatrix {
        let (a, b) = (start * self.m, end * self.m);
        let cells = match &self.cells {
            CodeCells::U8(v) => CodeCells::U8(v[a..b].to_vec()),
            CodeCells::U16(v) => CodeCells::U16(v[a..b].to_vec()),
        };
        CodesMatrix {
            m: self.m,
            nbits: self.nbits,
            cells,
        }
    }

    /// Checks every stored code is below `2^nbits`.
    pub fn validate(&self) -> Result<()> {
        let limit = 1usize << self.nbits;
        let bad = match &self.cells {
            CodeCells::U8(v) => v.iter().position(|&c| c as usize >= limit),
            CodeCells::U16(v) => v.iter().position(|&c| c as usize >= limit),
        };
        match bad {
            None => Ok(()),
            Some(i) => Err(Error::CodeOutOfRange {
                token: i / self.m,
                subspace: i % self.m,
                code: self.get(i / self.m, i % self.m),
                nbits: self.nbits,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_width_follows_nbits() {
        assert_eq!(CodesMatrix::new(4, 8).cell_width(), 1);
        assert_eq!(CodesMatrix::new(4, 9).cell_width(), 2);
        let c = CodesMatrix::from_codes(2, 12, &[4095, 0, 7, 8]).unwrap();
        assert_eq!(c.n_tokens(), 2);
        assert_eq!(c.bytes(), 8);
        assert_eq!(c.row(0), vec![4095, 0]);
    }

    #[test]
    fn rejects_out_of_range() {
        let err = CodesMatrix::from_codes(2, 2, &[0, 1, 3, 4]).unwrap_err();
        assert!(matches!(
            err,
            Error::CodeOutOfRange {
                token: 1,
                subspace: 1,
                code: 4,
                nbits: 2
            }
        ));
        assert!(CodesMatrix::from_cells(2, 3, CodeCells::U8(vec![0, 8])).is_err());
        assert!(CodesMatrix::from_cells(2, 3, CodeCells::U16(vec![0, 1])).is_err());
    }

    #[test]
    fn extend_and_slice() {
        let mut a = CodesMatrix::from_codes(2, 4, &[1, 2]).unwrap();
        let b = CodesMatrix::from_codes(2, 4, &[3, 4, 5, 6]).unwrap();
        a.extend_from(&b).unwrap();
        assert_eq!(a.n_tokens(), 3);
        assert_eq!(a.slice_rows(1, 3), b);
        assert!(a.extend_from(&CodesMatrix::new(2, 5)).is_err());
    }
}
