use crate::error::{Error, Result};
use crate::pq::{CodeCells, Codebook, CodesMatrix};

/// Per-step table of scaled query/centroid dot products, `M x 2^nbits`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    m: usize,
    nbits: u32,
    table: Vec<f32>,
}

impl Lut {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ksub(&self) -> usize {
        1 << self.nbits
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    #[inline]
    pub fn get(&self, subspace: usize, code: usize) -> f32 {
        self.table[subspace * self.ksub() + code]
    }

    fn check_codes(&self, codes: &CodesMatrix) -> Result<()> {
        if codes.m() != self.m || codes.nbits() != self.nbits {
            return Err(Error::CodebookMismatch(format!(
                "codes (M={}, nbits={}) vs lookup table (M={}, nbits={})",
                codes.m(),
                codes.nbits(),
                self.m,
                self.nbits
            )));
        }
        Ok(())
    }
}

/// `table[i][c] = scale * <q_i, C_K^i[c]>` where `q_i` is the query restricted
/// to subspace `i`.
pub fn build_key_lut(q: &[f32], cb: &Codebook, scale: f64) -> Result<Lut> {
    let cfg = cb.config();
    if q.len() != cfg.d {
        return Err(Error::DimensionMismatch {
            expected: cfg.d,
            actual: q.len(),
        });
    }
    let dsub = cfg.dsub();
    let mut table = Vec::with_capacity(cfg.m * cfg.ksub());
    let mut qi = vec![0f64; dsub];
    for (i, q_sub) in q.chunks_exact(dsub).enumerate() {
        for (a, &b) in qi.iter_mut().zip(q_sub) {
            *a = scale * b as f64;
        }
        let cents = cb.subspace(i);
        match dsub {
            1 => lut_row::<1>(&qi, cents, &mut table),
            2 => lut_row::<2>(&qi, cents, &mut table),
            4 => lut_row::<4>(&qi, cents, &mut table),
            8 => lut_row::<8>(&qi, cents, &mut table),
            _ => table.extend(cents.chunks_exact(dsub).map(|c| {
                let dot: f64 = qi.iter().zip(c).map(|(&a, &b)| a * b as f64).sum();
                dot as f32
            })),
        }
    }
    Ok(Lut {
        m: cfg.m,
        nbits: cfg.nbits,
        table,
    })
}

fn lut_row<const DS: usize>(qi: &[f64], cents: &[f32], table: &mut Vec<f32>) {
    let q: [f64; DS] = qi.try_into().expect("subspace width");
    let (cs, _) = cents.as_chunks::<DS>();
    table.extend(cs.iter().map(|c| {
        let mut dot = 0f64;
        for j in 0..DS {
            dot += q[j] * c[j] as f64;
        }
        dot as f32
    }));
}

/// Scores every coded key by summing one table entry per subspace; keys are
/// never decoded.
pub fn score_tokens(lut: &Lut, codes: &CodesMatrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(codes.n_tokens());
    score_into(lut, codes, &mut out)?;
    Ok(out)
}

/// Like [`score_tokens`], appending into `out`.
pub fn score_into(lut: &Lut, codes: &CodesMatrix, out: &mut Vec<f64>) -> Result<()> {
    lut.check_codes(codes)?;
    match codes.cells() {
        CodeCells::U8(cells) if lut.ksub() == 256 => {
            let (tables, _) = lut.table.as_chunks::<256>();
            score_rows_u8(tables, cells, out)
        }
        CodeCells::U8(cells) => score_rows(lut, cells, out),
        CodeCells::U16(cells) => score_rows(lut, cells, out),
    }
    Ok(())
}

fn score_rows<T: Copy + Into<usize>>(lut: &Lut, cells: &[T], out: &mut Vec<f64>) {
    let ksub = lut.ksub();
    let m = lut.m;
    out.reserve(cells.len() / m);
    for row in cells.chunks_exact(m) {
        // Four independent sums to break the add dependency chain.
        let mut s = [0f64; 4];
        let mut quads = row.chunks_exact(4);
        let mut base = 0;
        for quad in &mut quads {
            for (j, &c) in quad.iter().enumerate() {
                s[j] += lut.table[base + j * ksub + c.into()] as f64;
            }
            base += 4 * ksub;
        }
        for (j, &c) in quads.remainder().iter().enumerate() {
            s[j] += lut.table[base + j * ksub + c.into()] as f64;
        }
        out.push((s[0] + s[1]) + (s[2] + s[3]));
    }
}

/// 8-bit codes index 256-entry tables directly, without bounds checks.
fn score_rows_u8(tables: &[[f32; 256]], cells: &[u8], out: &mut Vec<f64>) {
    let m = tables.len();
    let start = out.len();
    out.resize(start + cells.len() / m, 0.0);
    for (row, o) in cells.chunks_exact(m).zip(&mut out[start..]) {
        let mut s = [0f64; 4];
        let mut quads = row.chunks_exact(4);
        let mut tabs = tables.chunks_exact(4);
        for (quad, tab) in (&mut quads).zip(&mut tabs) {
            for j in 0..4 {
                s[j] += tab[j][quad[j] as usize] as f64;
            }
        }
        for (j, (&c, tab)) in quads.remainder().iter().zip(tabs.remainder()).enumerate() {
            s[j] += tab[c as usize] as f64;
        }
        *o = (s[0] + s[1]) + (s[2] + s[3]);
    }
}
