use super::kernels;
use super::tensor::{Real, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a · bᵀ with a: [m, k], b: [n, k]
    MatMulT {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
        cols: usize,
    },
    MulRow {
        a: Var,
        row: Var,
        cols: usize,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddConst {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    MaskedSoftmax {
        a: Var,
        keep: Vec<bool>,
        cols: usize,
    },
    LayerNorm {
        a: Var,
        cols: usize,
        inv_std: Vec<T>,
    },
    MaskedMean {
        a: Var,
        keep: Vec<bool>,
        cols: usize,
    },
    MaskedMax {
        a: Var,
        argmax: Vec<usize>,
        cols: usize,
    },
    SelectRow {
        a: Var,
        row: usize,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    NormalizeRows {
        a: Var,
        cols: usize,
        norms: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
        cols: usize,
        norms_a: Vec<T>,
        norms_b: Vec<T>,
    },
    RowDot {
        a: Var,
        b: Var,
        cols: usize,
    },
    AngleSim {
        a: Var,
        b: Var,
        cols: usize,
    },
    PairDiff {
        s: Var,
        pairs: Vec<(usize, usize)>,
    },
    Log1pSumExp {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        excluded: Option<Vec<bool>>,
        cols: usize,
    },
    BceWithLogits {
        x: Var,
        labels: Vec<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Reverse-mode computation record. Nodes are appended in evaluation order,
/// so every node's parents precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that gradients are not propagated to.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(true),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            &[a, b],
        ))
    }

    /// `a · bᵀ` for a: [m, k], b: [n, k].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let out = kernels::matmul_t(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulT { a, b, m, k, n },
            &[a, b],
        ))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &'static str) -> Result<usize> {
        let cols = *self
            .shape(a)
            .last()
            .ok_or_else(|| shape_err(op, "scalar input".into()))?;
        if self.shape(row) != [cols] {
            return Err(shape_err(
                op,
                format!("row {:?} for input {:?}", self.shape(row), self.shape(a)),
            ));
        }
        Ok(cols)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_broadcast(a, row, "add_row")?;
        let r = self.value(row).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::AddRow { a, row, cols },
            &[a, row],
        ))
    }

    /// Multiplies every row of `a` element-wise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_broadcast(a, row, "mul_row")?;
        let r = self.value(row).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % cols])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MulRow { a, row, cols },
            &[a, row],
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, c }, &[a]))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst { a }, &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { a }, &[a]))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: rows,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            cols,
        };
        Ok(self.push(Tensor::new(vec![ids.len(), cols], out)?, op, &[table]))
    }

    /// Row-wise softmax over the columns whose `keep` flag is set; dropped
    /// columns receive exactly zero weight.
    pub fn masked_softmax_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "masked_softmax_rows")?;
        if keep.len() != cols {
            return Err(shape_err(
                "masked_softmax_rows",
                format!("mask of {} for {cols} columns", keep.len()),
            ));
        }
        if !keep.iter().any(|&k| k) {
            return Err(NumericsError::EmptyReduction {
                op: "masked_softmax_rows",
            });
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..cols {
                if keep[c] {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    total = total + e;
                }
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / total;
            }
        }
        let op = Op::MaskedSoftmax {
            a,
            keep: keep.to_vec(),
            cols,
        };
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, op, &[a]))
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let src = self.value(a).data();
        let n = T::from_usize(cols).unwrap();
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { a, cols, inv_std },
            &[a],
        ))
    }

    fn check_row_mask(&self, a: Var, keep: &[bool], op: &'static str) -> Result<(usize, usize)> {
        let (rows, cols) = self.dims2(a, op)?;
        if keep.len() != rows {
            return Err(shape_err(
                op,
                format!("mask of {} for {rows} rows", keep.len()),
            ));
        }
        if !keep.iter().any(|&k| k) {
            return Err(NumericsError::EmptyReduction { op });
        }
        Ok((rows, cols))
    }

    /// Average of the rows whose `keep` flag is set.
    pub fn masked_mean_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.check_row_mask(a, keep, "masked_mean_rows")?;
        let src = self.value(a).data();
        let count = T::from_usize(keep.iter().filter(|&&k| k).count()).unwrap();
        let mut out = vec![T::zero(); cols];
        for r in (0..rows).filter(|&r| keep[r]) {
            for c in 0..cols {
                out[c] = out[c] + src[r * cols + c];
            }
        }
        for v in &mut out {
            *v = *v / count;
        }
        let op = Op::MaskedMean {
            a,
            keep: keep.to_vec(),
            cols,
        };
        Ok(self.push(Tensor::vector(out), op, &[a]))
    }

    /// Element-wise maximum over the rows whose `keep` flag is set. Ties go to
    /// the earliest row.
    pub fn masked_max_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.check_row_mask(a, keep, "masked_max_rows")?;
        let src = self.value(a).data();
        let first = keep.iter().position(|&k| k).unwrap_or(0);
        let mut out = src[first * cols..(first + 1) * cols].to_vec();
        let mut argmax = vec![first; cols];
        for r in (first + 1..rows).filter(|&r| keep[r]) {
            for c in 0..cols {
                let v = src[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let op = Op::MaskedMax { a, argmax, cols };
        Ok(self.push(Tensor::vector(out), op, &[a]))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "select_row")?;
        if row >= rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "select_row",
                index: row,
                len: rows,
            });
        }
        let out = self.value(a).row(row).to_vec();
        Ok(self.push(Tensor::vector(out), Op::SelectRow { a, row, cols }, &[a]))
    }

    /// Stacks vectors `[d]` and matrices `[r, d]` into one `[Σr, d]` matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(NumericsError::EmptyReduction { op: "concat_rows" })?;
        let cols = *self
            .shape(*first)
            .last()
            .ok_or_else(|| shape_err("concat_rows", "scalar part".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let shape = self.shape(p);
            let r = match shape {
                [c] if *c == cols => 1,
                [r, c] if *c == cols => *r,
                s => {
                    return Err(shape_err(
                        "concat_rows",
                        format!("part {s:?} with {cols} columns"),
                    ))
                }
            };
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, op, parts))
    }

    /// L2-normalizes each row (or the vector itself for 1-D input).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims();
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = kernels::norm(row);
            if norm == T::zero() || !norm.is_finite() {
                return Err(NumericsError::ZeroNorm {
                    op: "normalize_rows",
                });
            }
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
            norms.push(norm);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::NormalizeRows { a, cols, norms },
            &[a],
        ))
    }

    /// Row-wise cosine similarity; `[n, d] × [n, d] → [n]`, `[d] × [d] → []`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (rows, cols) = self.value(a).as_matrix_dims();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows);
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&xa[r * cols..(r + 1) * cols], &xb[r * cols..(r + 1) * cols]);
            let (na, nb) = (kernels::norm(ra), kernels::norm(rb));
            if na == T::zero() || nb == T::zero() {
                return Err(NumericsError::ZeroNorm { op: "cosine" });
            }
            out.push(kernels::dot(ra, rb) / (na * nb));
            norms_a.push(na);
            norms_b.push(nb);
        }
        let shape = if self.shape(a).len() <= 1 {
            Vec::new()
        } else {
            vec![rows]
        };
        let op = Op::CosineRows {
            a,
            b,
            cols,
            norms_a,
            norms_b,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[a, b]))
    }

    /// Row-wise dot product; `[n, d] × [n, d] → [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (rows, cols) = self.value(a).as_matrix_dims();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..rows)
            .map(|r| kernels::dot(&xa[r * cols..(r + 1) * cols], &xb[r * cols..(r + 1) * cols]))
            .collect();
        let shape = if self.shape(a).len() <= 1 {
            Vec::new()
        } else {
            vec![rows]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::RowDot { a, b, cols }, &[a, b]))
    }

    /// Row-wise angle similarity of complex-split embeddings: each row is read
    /// as `x + iy` (first half real, second half imaginary) and the result is
    /// `-mean_k |arg(z_a,k / z_b,k)| / π`, in `[-1, 0]`.
    pub fn angle_sim_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "angle_sim")?;
        let (rows, cols) = self.value(a).as_matrix_dims();
        if cols % 2 != 0 || cols == 0 {
            return Err(NumericsError::OddDimension { dim: cols });
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..rows)
            .map(|r| {
                kernels::angle_sim(&xa[r * cols..(r + 1) * cols], &xb[r * cols..(r + 1) * cols])
            })
            .collect();
        let shape = if self.shape(a).len() <= 1 {
            Vec::new()
        } else {
            vec![rows]
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::AngleSim { a, b, cols },
            &[a, b],
        ))
    }

    /// `out[p] = s[j] - s[i]` for each `(i, j)` in `pairs`.
    pub fn pair_diff(&mut self, s: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let src = self.value(s).data();
        let len = src.len();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= len || j >= len) {
            return Err(NumericsError::IndexOutOfRange {
                op: "pair_diff",
                index: i.max(j),
                len,
            });
        }
        let out: Vec<T> = pairs.iter().map(|&(i, j)| src[j] - src[i]).collect();
        let op = Op::PairDiff {
            s,
            pairs: pairs.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, &[s]))
    }

    /// `log(1 + Σ exp(a))`, i.e. log-sum-exp with an implicit zero logit.
    /// An empty input yields exactly zero.
    pub fn log1p_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = kernels::log1p_sum_exp(self.value(a).data());
        Ok(self.push(Tensor::scalar(v), Op::Log1pSumExp { a }, &[a]))
    }

    /// Mean over rows of `-log softmax(row)[target]`. Entries flagged in
    /// `excluded` (row-major, same shape as `logits`) are left out of the
    /// softmax. A 1-D `logits` is treated as a single row.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, cols) = self.value(logits).as_matrix_dims();
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(mask) = excluded {
            if mask.len() != rows * cols {
                return Err(shape_err("cross_entropy", "exclusion mask shape".into()));
            }
        }
        let src = self.value(logits).data();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(NumericsError::TargetOutOfRange { target: t, n: cols });
            }
            if excluded.is_some_and(|m| m[r * cols + t]) {
                return Err(shape_err(
                    "cross_entropy",
                    format!("target of row {r} is excluded"),
                ));
            }
            let row = &src[r * cols..(r + 1) * cols];
            let keep = |c: usize| excluded.is_none_or(|m| !m[r * cols + c]);
            let lse = kernels::masked_lse(row, keep);
            total = total + (lse - row[t]);
        }
        let value = total / T::from_usize(rows).unwrap();
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            excluded: excluded.map(<[bool]>::to_vec),
            cols,
        };
        Ok(self.push(Tensor::scalar(value), op, &[logits]))
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `labels`.
    pub fn bce_with_logits(&mut self, x: Var, labels: &[T]) -> Result<Var> {
        let src = self.value(x).data();
        if src.len() != labels.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} labels for {} logits", labels.len(), src.len()),
            ));
        }
        if src.is_empty() {
            return Err(NumericsError::EmptyReduction {
                op: "bce_with_logits",
            });
        }
        let total: T = src
            .iter()
            .zip(labels)
            .map(|(&z, &y)| kernels::softplus(z) - y * z)
            .sum();
        let value = total / T::from_usize(src.len()).unwrap();
        let op = Op::BceWithLogits {
            x,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(value), op, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(v), Op::Sum { a }, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(NumericsError::EmptyReduction { op: "mean" });
        }
        let v = self.value(a).data().iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        Ok(self.push(Tensor::scalar(v), Op::Mean { a }, &[a]))
    }

    /// Reverse pass from `output`, seeded with ones. Each node on the path is
    /// visited exactly once, in reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].value.is_finite() {
            return Err(NumericsError::NonFinite {
                what: "backward seed",
            });
        }
        grads[output.0] = Some(vec![T::one(); self.nodes[output.0].value.numel()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(c).for_each(|(e, x)| *e = *e + x),
            slot @ None => *slot = Some(c),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.accumulate(grads, a, || kernels::matmul_t(g, val(b), m, n, k));
                self.accumulate(grads, b, || kernels::t_matmul(val(a), g, k, m, n));
            }
            &Op::MatMulT { a, b, m, k, n } => {
                self.accumulate(grads, a, || kernels::matmul(g, val(b), m, n, k));
                self.accumulate(grads, b, || kernels::t_matmul(g, val(a), n, m, k));
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|&x| -x).collect());
            }
            &Op::Mul { a, b } => {
                self.accumulate(grads, a, || {
                    g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect()
                });
                self.accumulate(grads, b, || {
                    g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect()
                });
            }
            &Op::AddRow { a, row, cols } => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, row, || kernels::column_sums(g, cols));
            }
            &Op::MulRow { a, row, cols } => {
                let r = val(row);
                self.accumulate(grads, a, || {
                    g.iter()
                        .enumerate()
                        .map(|(i, &x)| x * r[i % cols])
                        .collect()
                });
                self.accumulate(grads, row, || {
                    let prod: Vec<T> = g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect();
                    kernels::column_sums(&prod, cols)
                });
            }
            &Op::Scale { a, c } => self.accumulate(grads, a, || g.iter().map(|&x| x * c).collect()),
            &Op::AddConst { a } => self.accumulate(grads, a, || g.to_vec()),
            &Op::Gelu { a } => self.accumulate(grads, a, || {
                g.iter()
                    .zip(val(a))
                    .map(|(&x, &z)| x * kernels::gelu_grad(z))
                    .collect()
            }),
            Op::Gather { table, ids, cols } => {
                let cols = *cols;
                self.accumulate(grads, *table, || {
                    let mut d = vec![T::zero(); self.nodes[table.0].value.numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            d[id * cols + c] = d[id * cols + c] + g[t * cols + c];
                        }
                    }
                    d
                });
            }
            Op::MaskedSoftmax { a, keep, cols } => {
                let cols = *cols;
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); out.len()];
                    for r in 0..out.len() / cols {
                        let (y, gy) =
                            (&out[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let inner = kernels::dot(y, gy);
                        for c in (0..cols).filter(|&c| keep[c]) {
                            d[r * cols + c] = y[c] * (gy[c] - inner);
                        }
                    }
                    d
                });
            }
            Op::LayerNorm { a, cols, inv_std } => {
                let cols = *cols;
                self.accumulate(grads, *a, || {
                    let n = T::from_usize(cols).unwrap();
                    let mut d = vec![T::zero(); out.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (y, gy) =
                            (&out[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let mean_g = gy.iter().copied().sum::<T>() / n;
                        let mean_gy = kernels::dot(gy, y) / n;
                        for c in 0..cols {
                            d[r * cols + c] = is * (gy[c] - mean_g - y[c] * mean_gy);
                        }
                    }
                    d
                });
            }
            Op::MaskedMean { a, keep, cols } => {
                let cols = *cols;
                let count = T::from_usize(keep.iter().filter(|&&k| k).count()).unwrap();
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); keep.len() * cols];
                    for r in (0..keep.len()).filter(|&r| keep[r]) {
                        for c in 0..cols {
                            d[r * cols + c] = g[c] / count;
                        }
                    }
                    d
                });
            }
            Op::MaskedMax { a, argmax, cols } => {
                let cols = *cols;
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); self.nodes[a.0].value.numel()];
                    for c in 0..cols {
                        d[argmax[c] * cols + c] = g[c];
                    }
                    d
                });
            }
            &Op::SelectRow { a, row, cols } => {
                self.accumulate(grads, a, || {
                    let mut d = vec![T::zero(); self.nodes[a.0].value.numel()];
                    d[row * cols..(row + 1) * cols].copy_from_slice(g);
                    d
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, || g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::NormalizeRows { a, cols, norms } => {
                let cols = *cols;
                self.accumulate(grads, *a, || {
                    let mut d = vec![T::zero(); out.len()];
                    for (r, &nrm) in norms.iter().enumerate() {
                        let (y, gy) =
                            (&out[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let inner = kernels::dot(y, gy);
                        for c in 0..cols {
                            d[r * cols + c] = (gy[c] - y[c] * inner) / nrm;
                        }
                    }
                    d
                });
            }
            Op::CosineRows {
                a,
                b,
                cols,
                norms_a,
                norms_b,
            } => {
                let cols = *cols;
                let (xa, xb) = (val(*a), val(*b));
                let grad_for = |x: &[T], y: &[T], nx: &[T], ny: &[T]| {
                    let mut d = vec![T::zero(); x.len()];
                    for r in 0..nx.len() {
                        let c = out[r];
                        let (rx, ry) = (&x[r * cols..(r + 1) * cols], &y[r * cols..(r + 1) * cols]);
                        let inv = T::one() / (nx[r] * ny[r]);
                        let self_term = c / (nx[r] * nx[r]);
                        for k in 0..cols {
                            d[r * cols + k] = g[r] * (ry[k] * inv - rx[k] * self_term);
                        }
                    }
                    d
                };
                self.accumulate(grads, *a, || grad_for(xa, xb, norms_a, norms_b));
                self.accumulate(grads, *b, || grad_for(xb, xa, norms_b, norms_a));
            }
            &Op::RowDot { a, b, cols } => {
                let scaled = |y: &[T]| {
                    y.iter()
                        .enumerate()
                        .map(|(i, &v)| v * g[i / cols])
                        .collect::<Vec<T>>()
                };
                self.accumulate(grads, a, || scaled(val(b)));
                self.accumulate(grads, b, || scaled(val(a)));
            }
            &Op::AngleSim { a, b, cols } => {
                let (xa, xb) = (val(a), val(b));
                let mut da = vec![T::zero(); xa.len()];
                let mut db = vec![T::zero(); xb.len()];
                for (r, &gr) in g.iter().enumerate().take(xa.len() / cols) {
                    let span = r * cols..(r + 1) * cols;
                    kernels::angle_sim_grad(
                        &xa[span.clone()],
                        &xb[span.clone()],
                        gr,
                        &mut da[span.clone()],
                        &mut db[span],
                    );
                }
                self.accumulate(grads, a, || da);
                self.accumulate(grads, b, || db);
            }
            Op::PairDiff { s, pairs } => {
                self.accumulate(grads, *s, || {
                    let mut d = vec![T::zero(); self.nodes[s.0].value.numel()];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        d[j] = d[j] + g[p];
                        d[i] = d[i] - g[p];
                    }
                    d
                });
            }
            &Op::Log1pSumExp { a } => {
                let total = out[0];
                self.accumulate(grads, a, || {
                    val(a).iter().map(|&x| g[0] * (x - total).exp()).collect()
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                excluded,
                cols,
            } => {
                let cols = *cols;
                let src = val(*logits);
                let rows = targets.len();
                let scale = g[0] / T::from_usize(rows).unwrap();
                self.accumulate(grads, *logits, || {
                    let mut d = vec![T::zero(); src.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &src[r * cols..(r + 1) * cols];
                        let keep = |c: usize| excluded.as_ref().is_none_or(|m| !m[r * cols + c]);
                        let lse = kernels::masked_lse(row, keep);
                        for c in (0..cols).filter(|&c| keep(c)) {
                            d[r * cols + c] = scale * (row[c] - lse).exp();
                        }
                        d[r * cols + t] = d[r * cols + t] - scale;
                    }
                    d
                });
            }
            Op::BceWithLogits { x, labels } => {
                let n = T::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *x, || {
                    val(*x)
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n)
                        .collect()
                });
            }
            &Op::Sum { a } => {
                self.accumulate(grads, a, || vec![g[0]; self.nodes[a.0].value.numel()])
            }
            &Op::Mean { a } => {
                let n = self.nodes[a.0].value.numel();
                let v = g[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, a, || vec![v; n]);
            }
        }
    }
}
