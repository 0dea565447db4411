//! Compressed sparse row storage for the (symmetric) operators of the pipeline,
//! plus the `row col value` triplet text format used for oracle cross-checks.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{HdmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists; each row is sorted by column.
    /// Duplicate columns within a row are summed.
    pub fn from_rows(mut rows: Vec<Vec<(u32, f64)>>) -> Self {
        let n = rows.len();
        rows.par_iter_mut().for_each(|r| {
            r.sort_by_key(|e| e.0);
            r.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        });
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for r in rows {
            for (c, v) in r {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(HdmError::IndexOutOfRange {
                    index: r.max(c),
                    len: n,
                });
            }
            rows[r].push((c as u32, v));
        }
        Ok(Self::from_rows(rows))
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        Self::from_rows(
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(c, v)| (c as u32, *v))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b]
            .iter()
            .zip(&self.values[a..b])
            .map(|(c, v)| (*c as usize, *v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        match self.indices[a..b].binary_search(&(j as u32)) {
            Ok(p) => self.values[a + p],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y = A x`; rows are summed in storage order, so results are thread-count independent.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(256).enumerate().for_each(|(c, chunk)| {
            for (k, yi) in chunk.iter_mut().enumerate() {
                let i = c * 256 + k;
                let (a, b) = (self.indptr[i], self.indptr[i + 1]);
                *yi = sparse_dot(&self.indices[a..b], &self.values[a..b], x);
            }
        });
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| self.values[self.indptr[i]..self.indptr[i + 1]].iter().sum())
            .collect()
    }

    pub fn row_abs_sums(&self) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| {
                self.values[self.indptr[i]..self.indptr[i + 1]]
                    .iter()
                    .map(|v| v.abs())
                    .sum()
            })
            .collect()
    }

    /// Entry map `(i, j, v) -> (i, j, f(i, j, v))` with the sparsity pattern unchanged.
    pub fn map_entries(&self, f: impl Fn(usize, usize, f64) -> f64 + Sync) -> Self {
        let mut values = self.values.clone();
        let indptr = &self.indptr;
        let indices = &self.indices;
        // rows own disjoint value ranges
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(self.n);
        let mut rest: &mut [f64] = &mut values;
        for i in 0..self.n {
            let (head, tail) = rest.split_at_mut(indptr[i + 1] - indptr[i]);
            slices.push(head);
            rest = tail;
        }
        slices.into_par_iter().enumerate().for_each(|(i, row)| {
            for (k, v) in row.iter_mut().enumerate() {
                let j = indices[indptr[i] + k] as usize;
                *v = f(i, j, *v);
            }
        });
        CsrMatrix {
            n: self.n,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values,
        }
    }

    /// `A` with `shift` added to the diagonal and entries scaled by `scale`: `shift·I + scale·A`.
    pub fn shifted(&self, scale: f64, shift: f64) -> Self {
        let rows = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let mut r: Vec<(u32, f64)> = self.row(i).map(|(c, v)| (c as u32, scale * v)).collect();
                r.push((i as u32, shift));
                r
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Largest `|A_ij - A_ji|`; zero for exactly symmetric storage.
    pub fn symmetry_defect(&self) -> f64 {
        (0..self.n)
            .into_par_iter()
            .map(|i| {
                self.row(i)
                    .map(|(j, v)| (v - self.get(j, i)).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        out
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// Writes `n` on the first line, then one `row col value` line per stored entry.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.n)?;
        let mut line = String::new();
        for (i, j, v) in self.triplets() {
            line.clear();
            let _ = writeln!(line, "{i} {j} {}", fmt_real(v));
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_triplets<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let n: usize = lines
            .next()
            .ok_or_else(|| HdmError::Format("empty triplet file".into()))??
            .trim()
            .parse()
            .map_err(|e| HdmError::Format(format!("bad dimension line: {e}")))?;
        let mut trips = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = || HdmError::Format(format!("line {}: expected `row col value`", ln + 2));
            let r: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let c: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let v: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            trips.push((r, c, v));
        }
        Self::from_triplets(n, &trips)
    }
}

/// Sparse row · dense vector, with four independent accumulators.
#[inline]
fn sparse_dot(idx: &[u32], val: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let split = idx.len() - idx.len() % 4;
    for (i4, v4) in idx[..split].chunks_exact(4).zip(val[..split].chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += v4[l] * x[i4[l] as usize];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (i, v) in idx[split..].iter().zip(&val[split..]) {
        s += v * x[*i as usize];
    }
    s
}

/// Shortest decimal form carrying 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Contiguous fibre blocks: fibre `j` owns rows `offsets[j] .. offsets[j] + sizes[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
}

impl BlockLayout {
    pub fn from_sizes(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        BlockLayout { offsets, sizes }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.sizes[self.sizes.len() - 1])
    }

    pub fn range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j] + self.sizes[j]
    }

    /// Block containing global row `p`.
    pub fn block_of(&self, p: usize) -> usize {
        self.offsets.partition_point(|&o| o <= p) - 1
    }
}
