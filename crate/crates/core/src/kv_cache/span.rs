use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pq::CodesMatrix;

/// Up to `block_tokens` consecutive quantized tokens. Frozen once full;
/// the tail block is copy-on-write while snapshots hold it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub keys: CodesMatrix,
    pub values: CodesMatrix,
}

impl CodeBlock {
    pub fn n_tokens(&self) -> usize {
        self.keys.n_tokens()
    }
}

/// The quantized prefix `[0, n_q)` of a layer cache as a list of shared
/// blocks. Cloning is cheap: it copies block handles, not codes.
#[derive(Debug, Clone)]
pub struct QuantizedSpan {
    blocks: Vec<Arc<CodeBlock>>,
    n_tokens: usize,
    block_tokens: usize,
    m: usize,
    nbits: u32,
}

impl QuantizedSpan {
    pub fn new(m: usize, nbits: u32, block_tokens: usize) -> Self {
        Self {
            blocks: Vec::new(),
            n_tokens: 0,
            block_tokens: block_tokens.max(1),
            m,
            nbits,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.n_tokens == 0
    }

    pub fn blocks(&self) -> &[Arc<CodeBlock>] {
        &self.blocks
    }

    pub fn block_tokens(&self) -> usize {
        self.block_tokens
    }

    /// Code bytes for keys and values together.
    pub fn bytes(&self) -> usize {
        self.blocks.iter().map(|b| b.keys.bytes() + b.values.bytes()).sum()
    }

    /// Appends matching key and value code rows.
    pub fn push_rows(&mut self, keys: &CodesMatrix, values: &CodesMatrix) -> Result<()> {
        if keys.n_tokens() != values.n_tokens() {
            return Err(Error::DimensionMismatch {
                expected: keys.n_tokens(),
                actual: values.n_tokens(),
            });
        }
        for c in [keys, values] {
            if c.m() != self.m || c.nbits() != self.nbits {
                return Err(Error::CodebookMismatch(format!(
                    "codes (M={}, nbits={}) vs span (M={}, nbits={})",
                    c.m(),
                    c.nbits(),
                    self.m,
                    self.nbits
                )));
            }
        }
        let total = keys.n_tokens();
        let mut done = 0;
        while done < total {
            let room = match self.blocks.last() {
                Some(b) if b.n_tokens() < self.block_tokens => self.block_tokens - b.n_tokens(),
                _ => {
                    self.blocks.push(Arc::new(CodeBlock {
                        keys: CodesMatrix::with_capacity(self.m, self.nbits, self.block_tokens),
                        values: CodesMatrix::with_capacity(self.m, self.nbits, self.block_tokens),
                    }));
                    self.block_tokens
                }
            };
            let take = room.min(total - done);
            let block = Arc::make_mut(self.blocks.last_mut().expect("block exists"));
            block.keys.extend_from(&keys.slice_rows(done, done + take))?;
            block.values.extend_from(&values.slice_rows(done, done + take))?;
            done += take;
        }
        self.n_tokens += total;
        Ok(())
    }

    /// All key codes and all value codes as two contiguous matrices.
    pub fn to_matrices(&self) -> (CodesMatrix, CodesMatrix) {
        let mut k = CodesMatrix::with_capacity(self.m, self.nbits, self.n_tokens);
        let mut v = CodesMatrix::with_capacity(self.m, self.nbits, self.n_tokens);
        for b in &self.blocks {
            k.extend_from(&b.keys).expect("same geometry");
            v.extend_from(&b.values).expect("same geometry");
        }
        (k, v)
    }
}

/// Full-precision tokens `[start, start + len)` awaiting batch quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct RecentBuffer {
    d: usize,
    start: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl RecentBuffer {
    pub fn new(d: usize, start: usize) -> Self {
        Self {
            d,
            start,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Absolute index of the oldest entry.
    pub fn start(&self) -> usize {
        self.start
    }

    /// One past the absolute index of the newest entry.
    pub fn end(&self) -> usize {
        self.start + self.len()
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f32>()
    }

    pub(crate) fn push(&mut self, k: &[f32], v: &[f32]) {
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
    }

    /// Copies of the entries at offsets `[from, from + count)`.
    pub(crate) fn copy_range(&self, from: usize, count: usize) -> (Vec<f32>, Vec<f32>) {
        let (a, b) = (from * self.d, (from + count) * self.d);
        (self.keys[a..b].to_vec(), self.values[a..b].to_vec())
    }

    pub(crate) fn pop_front(&mut self, count: usize) {
        self.keys.drain(..count * self.d);
        self.values.drain(..count * self.d);
        self.start += count;
    }
}
