//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node; nodes only reference earlier nodes, so the
//! tape is acyclic and a single reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// `[m×n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m×n] ⊙ [n]` broadcast over rows.
    MulRow(Var, Var),
    Relu(Var),
    RowNormalizeSum(Var),
    LayerNorm(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumSquares(Var),
    GatherRows(Var, Vec<usize>),
    /// Rows `start..start+len` of a matrix.
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    /// Summed cross-entropy over rows with a target.
    CrossEntropy(Var, Vec<Option<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Records a computation for one backward pass. Call [`Tape::clear`] between steps.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_bt")?;
        let (n, k2) = self.value(b).dims2("matmul_bt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_bt",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let data = matmul_a_bt(self.data(a), self.data(b), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMulBt(a, b), out))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.value(a).with_data(data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let out = self.zip("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out)
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).last_axis_rows();
        if self.value(row).numel() != n {
            return Err(Error::dim(
                op,
                format!("row operand has {} entries, last axis is {n}", self.value(row).numel()),
            ));
        }
        Ok((m, n))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_check("add_row", a, row)?;
        let r = self.data(row);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let out = self.value(a).with_data(data)?;
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_check("mul_row", a, row)?;
        let r = self.data(row);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        let out = self.value(a).with_data(data)?;
        Ok(self.push(Op::MulRow(a, row), out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Divides each row by its sum. All-zero rows stay zero.
    pub fn row_normalize_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("row_normalize_sum", "negative entry"));
        }
        let (m, n) = t.last_axis_rows();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let out = t.with_data(data)?;
        Ok(self.push(Op::RowNormalizeSum(a), out))
    }

    /// Layer normalization over the last axis, optionally followed by `gain ⊙ · + bias`.
    ///
    /// No epsilon is added to the variance; a constant slice maps to zeros.
    pub fn layer_norm(&mut self, a: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.last_axis_rows();
        if n < 2 {
            return Err(Error::contract("layer_norm", "last axis must have at least 2 entries"));
        }
        let mut data = t.data().to_vec();
        for i in 0..m {
            standardize(&mut data[i * n..(i + 1) * n]);
        }
        let out = t.with_data(data)?;
        let normed = self.push(Op::LayerNorm(a), out);
        match affine {
            None => Ok(normed),
            Some((gain, bias)) => {
                let scaled = self.mul_row(normed, gain)?;
                self.add_row(scaled, bias)
            }
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.last_axis_rows();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = t.with_data(data).expect("same shape");
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = crate::vecmath::norm_sq(self.data(a));
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    /// Row lookup `table[ids[i]]`, the embedding primitive.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row id {bad} out of range for {rows} rows")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), out))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.data(a)[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows", "nothing to concatenate"));
        };
        let n = self.value(first).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, k) = self.value(p).dims2("concat_rows")?;
            if k != n {
                return Err(Error::dim("concat_rows", format!("column counts {n} and {k} differ")));
            }
            rows += m;
            data.extend_from_slice(self.data(p));
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    /// `Σ_i [logsumexp(logits_i) − logits_i[target_i]]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim(
                "cross_entropy",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        let data = self.data(logits);
        let mut total = 0.0;
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(t) = *tgt {
                if t >= n {
                    return Err(Error::Input(format!("target {t} out of range for {n} classes")));
                }
                let row = &data[i * n..(i + 1) * n];
                total += log_sum_exp(row) - row[t];
            }
        }
        Ok(self.push(Op::CrossEntropy(logits, targets.to_vec()), Tensor::scalar(total)))
    }

    /// Reverse sweep from a scalar root; fills `grad` on every node reachable from it.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, has shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2("matmul")?;
                    let n = self.shape(*b)[1];
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let da = matmul_a_bt(&g, self.data(*b), m, n, k);
                    let db = matmul_at_b(self.data(*a), &g, m, k, n);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.value(*a).dims2("matmul_bt")?;
                    let n = self.shape(*b)[0];
                    // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                    let da = matmul_raw(&g, self.data(*b), m, n, k);
                    let db = matmul_at_b(&g, self.data(*a), m, n, k);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    let da = g.iter().zip(bv).map(|(gi, y)| gi * y).collect();
                    let db = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    let da = g.iter().zip(bv).map(|(gi, y)| gi / y).collect();
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|x| c * x).collect());
                }
                Op::AddRow(a, row) => {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        dr[i % n] += gi;
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let r = self.data(*row);
                    let av = self.data(*a);
                    let n = r.len();
                    let mut dr = vec![0.0; n];
                    let mut da = vec![0.0; g.len()];
                    for (i, gi) in g.iter().enumerate() {
                        dr[i % n] += gi * av[i];
                        da[i] = gi * r[i % n];
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let av = self.data(*a);
                    let da = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::RowNormalizeSum(a) => {
                    let av = self.data(*a);
                    let y = node.value.data();
                    let (m, n) = node.value.last_axis_rows();
                    let mut da = vec![0.0; av.len()];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let s: f64 = av[r.clone()].iter().sum();
                        if s <= 0.0 {
                            continue;
                        }
                        // d(a_j / S)/da_k = (δ_jk − y_j) / S
                        let gy = crate::vecmath::dot(&g[r.clone()], &y[r.clone()]);
                        for j in r {
                            da[j] = (g[j] - gy) / s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm(a) => {
                    let av = self.data(*a);
                    let y = node.value.data();
                    let (m, n) = node.value.last_axis_rows();
                    let mut da = vec![0.0; av.len()];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let std = population_std(&av[r.clone()]);
                        if std == 0.0 {
                            continue;
                        }
                        let nf = n as f64;
                        let mean_g = g[r.clone()].iter().sum::<f64>() / nf;
                        let mean_gy = crate::vecmath::dot(&g[r.clone()], &y[r.clone()]) / nf;
                        for j in r {
                            da[j] = (g[j] - mean_g - y[j] * mean_gy) / std;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let (m, n) = node.value.last_axis_rows();
                    let mut da = vec![0.0; y.len()];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let gy = crate::vecmath::dot(&g[r.clone()], &y[r.clone()]);
                        for j in r {
                            da[j] = y[j] * (g[j] - gy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumSquares(a) => {
                    let da = self.data(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(table, ids) => {
                    let (rows, n) = self.value(*table).dims2("gather_rows")?;
                    let mut dt = vec![0.0; rows * n];
                    for (k, &i) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[i * n + j] += g[k * n + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = self.value(*a).dims2("slice_rows")?;
                    // add into the parent's buffer in place; a fresh m×n buffer per slice
                    // makes batched attention quadratic in the batch
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; m * n]);
                    for (d, x) in da[start * n..start * n + g.len()].iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let k = self.value(*p).numel();
                        accumulate(&mut grads, *p, g[offset..offset + k].to_vec());
                        offset += k;
                    }
                }
                Op::CrossEntropy(logits, targets) => {
                    let (_, n) = self.value(*logits).dims2("cross_entropy")?;
                    let data = self.data(*logits);
                    let mut dl = vec![0.0; data.len()];
                    for (i, tgt) in targets.iter().enumerate() {
                        if let Some(t) = *tgt {
                            let row = &data[i * n..(i + 1) * n];
                            let lse = log_sum_exp(row);
                            for j in 0..n {
                                dl[i * n + j] = g[0] * (row[j] - lse).exp();
                            }
                            dl[i * n + t] -= g[0];
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Mean 0, variance 1 in place; a constant slice becomes all zeros.
pub(crate) fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = population_std(x);
    if std == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
    } else {
        x.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_zero_with_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[4], &[-1.0, -0.5, -3.0, -1e-9]));
        let r = tape.relu(a);
        assert!(tape.value(r).data().iter().all(|&x| x == 0.0));
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn row_normalize_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 3], &[1.0, 1.0, 2.0]));
        let n = tape.row_normalize_sum(a).unwrap();
        assert_eq!(tape.value(n).data(), &[0.25, 0.25, 0.5]);

        let z = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let nz = tape.row_normalize_sum(z).unwrap();
        assert_eq!(tape.value(nz).data(), &[0.0, 0.0, 0.0]);
        let w = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let p = tape.mul(nz, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_normalize_rejects_negative() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, -1e-12]));
        assert!(matches!(tape.row_normalize_sum(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn uniform_row_gradient_orthogonal_to_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 4], &[0.7; 4]));
        let n = tape.row_normalize_sum(a).unwrap();
        let w = tape.constant(t(&[1, 4], &[1.0, -2.0, 0.5, 3.0]));
        let p = tape.mul(n, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let g: f64 = tape.grad(a).unwrap().iter().sum();
        assert!(g.abs() < 1e-15, "{g}");
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(a, None).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        assert!((d[0] + 1.5f64.sqrt()).abs() < 1e-12);
        assert!((d[2] - 1.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[5.0, 5.0, 5.0, 1.0, 2.0, 4.0]));
        let y = tape.layer_norm(a, None).unwrap();
        assert_eq!(&tape.value(y).data()[..3], &[0.0, 0.0, 0.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.5, 0.5]));
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(&tape.grad(a).unwrap()[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_needs_two_entries() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        assert!(tape.layer_norm(a, None).is_err());
    }

    #[test]
    fn layer_norm_affine_applies_gain_and_bias() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[0.0, 2.0]));
        let g = tape.leaf(t(&[2], &[2.0, 3.0]));
        let b = tape.leaf(t(&[2], &[1.0, -1.0]));
        let y = tape.layer_norm(a, Some((g, b))).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_and_square_norm() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let q = tape.sum_squares(x);
        tape.backward(q).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn overlapping_slices_accumulate() {
        // rows 0..2 and 1..3 of a 4×1 column; row 1 counted twice, row 3 never
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let a = tape.slice_rows(x, 0, 2).unwrap();
        let b = tape.slice_rows(x, 1, 2).unwrap();
        let (qa, qb) = (tape.sum_squares(a), tape.sum_squares(b));
        let s = tape.add(qa, qb).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 8.0, 6.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.gather_rows(e, &[0, 3]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 8]));
        let ce = tape.cross_entropy(l, &[Some(3), None]).unwrap();
        assert!((tape.value(ce).item() - 8f64.ln()).abs() < 1e-14);
        tape.backward(ce).unwrap();
        let g = tape.grad(l).unwrap();
        assert!((g[3] - (0.125 - 1.0)).abs() < 1e-15);
        assert!(g[8..].iter().all(|&x| x == 0.0));
    }
}
