//! Fused multi-head attention over message pairs.
//!
//! Computes, for every head of one layer, exactly what
//! [`super::layers::gat_attention_layer`] records op by op, in a single tape
//! node with a hand-written backward pass. Intermediates of the forward pass
//! are kept on the op for the backward pass.

use std::sync::Arc;

use crate::diff::{CustomOp, Result, Tape, Tensor, Var};

use super::graph::PairIndex;

struct HeadCache {
    /// `[E, dout]` projected target rows.
    zt: Vec<f64>,
    /// `[P, dout]` projected source rows.
    zs: Vec<f64>,
    /// Pre-activation scores.
    score: Vec<f64>,
    alpha: Vec<f64>,
}

struct MultiHeadAttention {
    target: Arc<[usize]>,
    offsets: Arc<[usize]>,
    group_size: Vec<f64>,
    heads: usize,
    din: usize,
    dout: usize,
    slope: f64,
    average: bool,
    cache: Vec<HeadCache>,
}

/// `out[r, c] = sum_k x[r, k] w[k, c]`.
fn project(x: &[f64], w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    if dout == 2 {
        return project_fixed::<2>(x, w, din);
    }
    let rows = x.len().checked_div(din).unwrap_or(0);
    let mut out = vec![0.0; rows * dout];
    for (xr, or) in x.chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        for (&xk, wk) in xr.iter().zip(w.chunks_exact(dout)) {
            for (o, &wkj) in or.iter_mut().zip(wk) {
                *o += xk * wkj;
            }
        }
    }
    out
}

/// [`project`] with the output width known at compile time; same summation
/// order.
fn project_fixed<const D: usize>(x: &[f64], w: &[f64], din: usize) -> Vec<f64> {
    let rows = x.len().checked_div(din).unwrap_or(0);
    let w: Vec<[f64; D]> = w.chunks_exact(D).map(|c| c.try_into().expect("chunk of D")).collect();
    let mut out = vec![0.0; rows * D];
    for (xr, or) in x.chunks_exact(din).zip(out.chunks_exact_mut(D)) {
        let mut acc = [0.0; D];
        for (&xk, wk) in xr.iter().zip(&w) {
            for j in 0..D {
                acc[j] += xk * wk[j];
            }
        }
        or.copy_from_slice(&acc);
    }
    out
}

/// Adds `x^T d` into `dw` and `d w^T` into `dx`, row by row.
fn project_backward(x: &[f64], d: &[f64], w: &[f64], din: usize, dout: usize, dw: &mut [f64], dx: &mut [f64]) {
    if dout == 2 {
        return project_backward_fixed::<2>(x, d, w, din, dw, dx);
    }
    for ((xr, dr), dxr) in x.chunks_exact(din).zip(d.chunks_exact(dout)).zip(dx.chunks_exact_mut(din)) {
        if dr.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (((&xk, wk), dwk), dxk) in xr.iter().zip(w.chunks_exact(dout)).zip(dw.chunks_exact_mut(dout)).zip(dxr) {
            let mut acc = 0.0;
            for ((&dj, &wkj), dwkj) in dr.iter().zip(wk).zip(dwk.iter_mut()) {
                *dwkj += xk * dj;
                acc += dj * wkj;
            }
            *dxk += acc;
        }
    }
}

fn project_backward_fixed<const D: usize>(x: &[f64], d: &[f64], w: &[f64], din: usize, dw: &mut [f64], dx: &mut [f64]) {
    let w: Vec<[f64; D]> = w.chunks_exact(D).map(|c| c.try_into().expect("chunk of D")).collect();
    let mut dw_acc = vec![[0.0; D]; din];
    for ((xr, dr), dxr) in x.chunks_exact(din).zip(d.chunks_exact(D)).zip(dx.chunks_exact_mut(din)) {
        let dr: &[f64; D] = dr.try_into().expect("chunk of D");
        if dr.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (((&xk, wk), dwk), dxk) in xr.iter().zip(&w).zip(dw_acc.iter_mut()).zip(dxr) {
            let mut acc = 0.0;
            for j in 0..D {
                dwk[j] += xk * dr[j];
                acc += dr[j] * wk[j];
            }
            *dxk += acc;
        }
    }
    for (dst, src) in dw.chunks_exact_mut(D).zip(&dw_acc) {
        for j in 0..D {
            dst[j] += src[j];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MultiHeadAttention {
    fn out_cols(&self) -> usize {
        if self.average {
            self.dout
        } else {
            self.heads * self.dout
        }
    }

    fn segments(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        self.offsets.windows(2).enumerate().map(|(t, w)| (t, w[0]..w[1]))
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Tensor {
        let (t_rows, s_rows) = (inputs[0], inputs[1]);
        let (h_n, din, dout) = (self.heads, self.din, self.dout);
        let p_n = self.target.len();
        let cols = self.out_cols();
        let scale = if self.average { 1.0 / h_n as f64 } else { 1.0 };
        let mut out = vec![0.0; p_n * cols];
        for h in 0..h_n {
            let w = &inputs[2 + h].values;
            let a = &inputs[2 + h_n + h].values;
            let (a_t, a_s) = a.split_at(dout);
            let zt = project(&t_rows.values, w, din, dout);
            let zs = project(&s_rows.values, w, din, dout);
            let t_score: Vec<f64> = zt.chunks_exact(dout).map(|r| dot(r, a_t)).collect();
            let score: Vec<f64> =
                zs.chunks_exact(dout).zip(self.target.iter()).map(|(r, &t)| t_score[t] + dot(r, a_s)).collect();
            let mut alpha: Vec<f64> = score.iter().map(|&e| if e > 0.0 { e } else { self.slope * e }).collect();
            for (_, range) in self.segments() {
                let seg = &mut alpha[range];
                if seg.is_empty() {
                    continue;
                }
                let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in seg.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                seg.iter_mut().for_each(|x| *x /= z);
            }
            let base = if self.average { 0 } else { h * dout };
            for (((orow, zr), &al), &n) in
                out.chunks_exact_mut(cols).zip(zs.chunks_exact(dout)).zip(&alpha).zip(&self.group_size)
            {
                let wp = al * n;
                for (o, &z) in orow[base..base + dout].iter_mut().zip(zr) {
                    *o += wp * z * scale;
                }
            }
            self.cache.push(HeadCache { zt, zs, score, alpha });
        }
        Tensor::new(p_n, cols, out)
    }
}

impl CustomOp for MultiHeadAttention {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64], grad_inputs: &mut [Vec<f64>]) {
        let (t_rows, s_rows) = (inputs[0], inputs[1]);
        let (h_n, din, dout) = (self.heads, self.din, self.dout);
        let p_n = self.target.len();
        let e_n = t_rows.rows();
        let cols = self.out_cols();
        let scale = if self.average { 1.0 / h_n as f64 } else { 1.0 };
        let mut dzs = vec![0.0; p_n * dout];
        let mut dzt = vec![0.0; e_n * dout];
        let mut dalpha = vec![0.0; p_n];
        for (h, c) in self.cache.iter().enumerate() {
            let w = &inputs[2 + h].values;
            let a = &inputs[2 + h_n + h].values;
            let (a_t, a_s) = a.split_at(dout);
            let base = if self.average { 0 } else { h * dout };
            dzt.iter_mut().for_each(|x| *x = 0.0);
            for ((((grow, zr), dr), (&al, &n)), da) in grad_out
                .chunks_exact(cols)
                .zip(c.zs.chunks_exact(dout))
                .zip(dzs.chunks_exact_mut(dout))
                .zip(c.alpha.iter().zip(&self.group_size))
                .zip(dalpha.iter_mut())
            {
                let g = &grow[base..base + dout];
                let wp = al * n;
                let mut dw = 0.0;
                for ((d, &gk), &zk) in dr.iter_mut().zip(g).zip(zr) {
                    *d = wp * gk * scale;
                    dw += zk * gk * scale;
                }
                *da = dw * n;
            }
            let mut da = vec![0.0; 2 * dout];
            for (t, range) in self.segments() {
                let s: f64 = range.clone().map(|p| c.alpha[p] * dalpha[p]).sum();
                let zt = &c.zt[t * dout..(t + 1) * dout];
                for p in range {
                    let dl = c.alpha[p] * (dalpha[p] - s);
                    let de = if c.score[p] > 0.0 { dl } else { self.slope * dl };
                    if de == 0.0 {
                        continue;
                    }
                    let zs = &c.zs[p * dout..(p + 1) * dout];
                    for k in 0..dout {
                        da[k] += de * zt[k];
                        da[dout + k] += de * zs[k];
                    }
                    for (d, &ak) in dzt[t * dout..(t + 1) * dout].iter_mut().zip(a_t) {
                        *d += de * ak;
                    }
                    for (d, &ak) in dzs[p * dout..(p + 1) * dout].iter_mut().zip(a_s) {
                        *d += de * ak;
                    }
                }
            }
            grad_inputs[2 + h_n + h].iter_mut().zip(&da).for_each(|(x, y)| *x += y);

            let mut dw = vec![0.0; din * dout];
            let (g_t, rest) = grad_inputs.split_at_mut(1);
            project_backward(&s_rows.values, &dzs, w, din, dout, &mut dw, &mut rest[0]);
            project_backward(&t_rows.values, &dzt, w, din, dout, &mut dw, &mut g_t[0]);
            grad_inputs[2 + h].iter_mut().zip(&dw).for_each(|(x, y)| *x += y);
        }
    }
}

/// All heads of one attention layer as a single tape node. Returns the
/// `[P, heads * dout]` concatenated (or `[P, dout]` averaged) weighted
/// source rows.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    ws: &[Var],
    a_s: &[Var],
    target_rows: Var,
    source_rows: Var,
    pairs: &PairIndex,
    slope: f64,
    average: bool,
) -> Result<Var> {
    let heads = ws.len();
    let (din, dout) = {
        let w = tape.value(ws[0]);
        (w.rows(), w.cols())
    };
    let (tv, sv) = (tape.value(target_rows), tape.value(source_rows));
    if tv.cols() != din || sv.cols() != din || sv.rows() != pairs.len() {
        return Err(crate::diff::DiffError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: sv.shape.clone(),
            rhs: vec![pairs.len(), din],
        });
    }
    if pairs.is_empty() {
        return Err(crate::diff::DiffError::EmptySegment { op: "multi_head_attention" });
    }
    for h in 0..heads {
        let (w, a) = (tape.value(ws[h]), tape.value(a_s[h]));
        if w.shape != [din, dout] || a.shape != [2 * dout, 1] {
            return Err(crate::diff::DiffError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: w.shape.clone(),
                rhs: a.shape.clone(),
            });
        }
    }
    let mut op = MultiHeadAttention {
        target: pairs.target.clone(),
        offsets: pairs.offsets.clone(),
        group_size: pairs.group_size.values.clone(),
        heads,
        din,
        dout,
        slope,
        average,
        cache: Vec::with_capacity(heads),
    };
    let mut inputs = vec![target_rows, source_rows];
    inputs.extend_from_slice(ws);
    inputs.extend_from_slice(a_s);
    let values: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
    let out = op.forward(&values);
    Ok(tape.custom(inputs, out, Box::new(op)))
}
