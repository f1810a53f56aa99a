//! Operation recording and the reverse sweep.

use crate::error::{Error, Result};

use super::{Segments, Tensor};

/// Records the backward step of every differentiable op applied through it.
///
/// [`Tape::backward`] consumes the tape and runs the recorded steps in
/// reverse. Recording order is a valid topological order because an op's
/// inputs always exist before its output.
#[derive(Default)]
pub struct Tape {
    steps: Vec<Box<dyn FnOnce()>>,
}

fn dim_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.shape_string(),
        rhs: rhs.shape_string(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn output(&mut self, rows: usize, cols: usize, values: Vec<f64>, track: bool) -> Tensor {
        if track {
            Tensor::leaf(rows, cols, values)
        } else {
            Tensor::constant(rows, cols, values)
        }
    }

    fn record(&mut self, step: impl FnOnce() + 'static) {
        self.steps.push(Box::new(step));
    }

    /// Matrix product of `a` (N x D) and `w` (D x E).
    pub fn matmul(&mut self, a: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (n, d) = a.shape();
        let (d2, e) = w.shape();
        if d != d2 {
            return Err(dim_err("matmul", a, w));
        }
        let values = a.with_values(|av| w.with_values(|wv| mm(av, n, d, wv, e)));
        let track = a.requires_grad() || w.requires_grad();
        let out = self.output(n, e, values, track);
        if track {
            let (a, w, out) = (a.clone(), w.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                if a.requires_grad() {
                    let da = w.with_values(|wv| mm_abt(&g, n, e, wv, d));
                    a.accumulate_grad(&da);
                }
                if w.requires_grad() {
                    let dw = a.with_values(|av| mm_atb(av, n, d, &g, e));
                    w.accumulate_grad(&dw);
                }
            });
        }
        Ok(out)
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        if shape != b.shape() {
            return Err(dim_err("add", a, b));
        }
        let values = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| x + y).collect()));
        let track = a.requires_grad() || b.requires_grad();
        let out = self.output(shape.0, shape.1, values, track);
        if track {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                a.accumulate_grad(&g);
                b.accumulate_grad(&g);
            });
        }
        Ok(out)
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let shape = a.shape();
        if shape != b.shape() {
            return Err(dim_err("mul", a, b));
        }
        let values = a.with_values(|av| b.with_values(|bv| av.iter().zip(bv).map(|(x, y)| x * y).collect()));
        let track = a.requires_grad() || b.requires_grad();
        let out = self.output(shape.0, shape.1, values, track);
        if track {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                if a.requires_grad() {
                    let da = b.with_values(|bv| g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect::<Vec<_>>());
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db = a.with_values(|av| g.iter().zip(av).map(|(gi, ai)| gi * ai).collect::<Vec<_>>());
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Broadcast-add a 1 x D row to every row of an N x D tensor.
    pub fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (n, d) = a.shape();
        if row.shape() != (1, d) {
            return Err(dim_err("add_row", a, row));
        }
        let values = a.with_values(|av| {
            row.with_values(|rv| {
                let mut out = av.to_vec();
                for r in 0..n {
                    for c in 0..d {
                        out[r * d + c] += rv[c];
                    }
                }
                out
            })
        });
        let track = a.requires_grad() || row.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (a, row, out) = (a.clone(), row.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                a.accumulate_grad(&g);
                if row.requires_grad() {
                    let mut dr = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dr[c] += g[r * d + c];
                        }
                    }
                    row.accumulate_grad(&dr);
                }
            });
        }
        Ok(out)
    }

    /// Per-row concatenation along the channel axis.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, d1) = a.shape();
        let (n2, d2) = b.shape();
        if n != n2 {
            return Err(dim_err("concat_channels", a, b));
        }
        let d = d1 + d2;
        let mut values = vec![0.0; n * d];
        a.with_values(|av| {
            b.with_values(|bv| {
                for r in 0..n {
                    values[r * d..r * d + d1].copy_from_slice(&av[r * d1..(r + 1) * d1]);
                    values[r * d + d1..(r + 1) * d].copy_from_slice(&bv[r * d2..(r + 1) * d2]);
                }
            })
        });
        let track = a.requires_grad() || b.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                if a.requires_grad() {
                    let mut da = vec![0.0; n * d1];
                    for r in 0..n {
                        da[r * d1..(r + 1) * d1].copy_from_slice(&g[r * d..r * d + d1]);
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n * d2];
                    for r in 0..n {
                        db[r * d2..(r + 1) * d2].copy_from_slice(&g[r * d + d1..(r + 1) * d]);
                    }
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    /// Stack two same-width tensors on top of each other.
    pub fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n1, d) = a.shape();
        let (n2, d2) = b.shape();
        if d != d2 {
            return Err(dim_err("concat_rows", a, b));
        }
        let mut values = Vec::with_capacity((n1 + n2) * d);
        a.with_values(|av| values.extend_from_slice(av));
        b.with_values(|bv| values.extend_from_slice(bv));
        let track = a.requires_grad() || b.requires_grad();
        let out = self.output(n1 + n2, d, values, track);
        if track {
            let (a, b, out) = (a.clone(), b.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                if a.requires_grad() {
                    a.accumulate_grad(&g[..n1 * d]);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g[n1 * d..]);
                }
            });
        }
        Ok(out)
    }

    /// Row lookup: `out[i] = src[indices[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, src: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (m, d) = src.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: src.shape_string(),
                rhs: format!("row index {bad}"),
            });
        }
        let n = indices.len();
        let mut values = vec![0.0; n * d];
        src.with_values(|sv| {
            for (r, &i) in indices.iter().enumerate() {
                values[r * d..(r + 1) * d].copy_from_slice(&sv[i * d..(i + 1) * d]);
            }
        });
        let track = src.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (src, out) = (src.clone(), out.clone());
            let indices = indices.to_vec();
            self.record(move || {
                let g = out.grad_snapshot();
                let mut ds = vec![0.0; m * d];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        ds[i * d + c] += g[r * d + c];
                    }
                }
                src.accumulate_grad(&ds);
            });
        }
        Ok(out)
    }

    /// Channel-wise max over each local group: N x D rows pool to M x D.
    ///
    /// Backward routes each output gradient entirely to the argmax row of its
    /// group and channel; ties break to the lowest row index, which keeps the
    /// sweep deterministic.
    pub fn segment_max(&mut self, x: &Tensor, segments: &Segments) -> Result<Tensor> {
        let (n, d) = x.shape();
        if segments.len() != n {
            return Err(Error::Dimension {
                op: "segment_max_pool",
                lhs: x.shape_string(),
                rhs: format!("{} segment entries", segments.len()),
            });
        }
        let m = segments.num_groups();
        let mut values = vec![f64::NEG_INFINITY; m * d];
        let mut argmax = vec![usize::MAX; m * d];
        x.with_values(|xv| {
            for (row, &g) in segments.group_of().iter().enumerate() {
                for c in 0..d {
                    let v = xv[row * d + c];
                    // Strict > keeps the first (lowest-index) row on ties.
                    if argmax[g * d + c] == usize::MAX || v > values[g * d + c] {
                        values[g * d + c] = v;
                        argmax[g * d + c] = row;
                    }
                }
            }
        });
        let track = x.requires_grad();
        let out = self.output(m, d, values, track);
        if track {
            let (x, out) = (x.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                let mut dx = vec![0.0; n * d];
                for slot in 0..m * d {
                    let c = slot % d;
                    dx[argmax[slot] * d + c] += g[slot];
                }
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Per-row normalization to zero mean and unit variance, then a learned
    /// per-channel gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = x.shape();
        if gain.shape() != (1, d) {
            return Err(dim_err("layer_norm gain", x, gain));
        }
        if bias.shape() != (1, d) {
            return Err(dim_err("layer_norm bias", x, bias));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("layer_norm input contains non-finite values".into()));
        }
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        x.with_values(|xv| {
            for r in 0..n {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for c in 0..d {
                    normalized[r * d + c] = (row[c] - mean) * inv;
                }
            }
        });
        let values = gain.with_values(|gv| {
            bias.with_values(|bv| {
                let mut out = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        out[r * d + c] = normalized[r * d + c] * gv[c] + bv[c];
                    }
                }
                out
            })
        });
        let track = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (x, gain, bias, out) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                if gain.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * normalized[r * d + c];
                        }
                    }
                    gain.accumulate_grad(&dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
                if x.requires_grad() {
                    let dx = gain.with_values(|gv| {
                        let mut dx = vec![0.0; n * d];
                        let df = d as f64;
                        for r in 0..n {
                            let inv = inv_std[r];
                            // d/dx of (x - mean) * inv_std through mean and variance.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for c in 0..d {
                                let dxhat = g[r * d + c] * gv[c];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * normalized[r * d + c];
                            }
                            for c in 0..d {
                                let dxhat = g[r * d + c] * gv[c];
                                let xhat = normalized[r * d + c];
                                dx[r * d + c] =
                                    inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                            }
                        }
                        dx
                    });
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Element-wise `max(x, 0)`. Gradient passes only where `x > 0`.
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.shape();
        let values = x.with_values(|xv| xv.iter().map(|&v| v.max(0.0)).collect());
        let track = x.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (x, out) = (x.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                let dx = x.with_values(|xv| {
                    g.iter()
                        .zip(xv)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect::<Vec<_>>()
                });
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Multiply every element by a fixed scalar.
    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let (n, d) = x.shape();
        let values = x.with_values(|xv| xv.iter().map(|v| v * factor).collect());
        let track = x.requires_grad();
        let out = self.output(n, d, values, track);
        if track {
            let (x, out) = (x.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot();
                let dx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
                x.accumulate_grad(&dx);
            });
        }
        Ok(out)
    }

    /// Sum of all elements as a 1 x 1 tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.shape();
        let total = x.with_values(|xv| xv.iter().sum());
        let track = x.requires_grad();
        let out = self.output(1, 1, vec![total], track);
        if track {
            let (x, out) = (x.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot()[0];
                x.accumulate_grad(&vec![g; n * d]);
            });
        }
        Ok(out)
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// given label distributions. Labels may be soft; each row must sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let (b, c) = logits.shape();
        if labels.shape() != (b, c) {
            return Err(dim_err("softmax_cross_entropy", logits, labels));
        }
        let label_values = labels.values();
        for r in 0..b {
            let s: f64 = label_values[r * c..(r + 1) * c].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidLabel(format!(
                    "label row {r} sums to {s}, expected 1"
                )));
            }
            if label_values[r * c..(r + 1) * c].iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidLabel(format!(
                    "label row {r} has a negative entry"
                )));
            }
        }
        let mut probs = vec![0.0; b * c];
        let mut log_probs = vec![0.0; b * c];
        let loss = logits.with_values(|zv| {
            let mut total = 0.0;
            for r in 0..b {
                let row = &zv[r * c..(r + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for v in row {
                    denom += (v - max).exp();
                }
                let log_denom = denom.ln();
                for (j, v) in row.iter().enumerate() {
                    let lp = v - max - log_denom;
                    log_probs[r * c + j] = lp;
                    probs[r * c + j] = lp.exp();
                    total -= label_values[r * c + j] * lp;
                }
            }
            total / b as f64
        });
        let track = logits.requires_grad() || labels.requires_grad();
        let out = self.output(1, 1, vec![loss], track);
        if track {
            let (logits, labels, out) = (logits.clone(), labels.clone(), out.clone());
            self.record(move || {
                let g = out.grad_snapshot()[0];
                let scale = g / b as f64;
                if logits.requires_grad() {
                    let dz: Vec<f64> = probs
                        .iter()
                        .zip(&label_values)
                        .map(|(p, l)| (p - l) * scale)
                        .collect();
                    logits.accumulate_grad(&dz);
                }
                if labels.requires_grad() {
                    let dl: Vec<f64> = log_probs.iter().map(|lp| -lp * scale).collect();
                    labels.accumulate_grad(&dl);
                }
            });
        }
        Ok(out)
    }

    /// Seed the scalar loss with gradient 1 and run all recorded steps in
    /// reverse, accumulating into every tensor that carries a gradient buffer.
    pub fn backward(mut self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Dimension {
                op: "backward",
                lhs: loss.shape_string(),
                rhs: "1x1 scalar".into(),
            });
        }
        loss.accumulate_grad(&[1.0]);
        for step in self.steps.drain(..).rev() {
            step();
        }
        Ok(())
    }
}

fn mm(a: &[f64], n: usize, d: usize, b: &[f64], e: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * e];
    for i in 0..n {
        let a_row = &a[i * d..(i + 1) * d];
        let out_row = &mut out[i * e..(i + 1) * e];
        for (k, &av) in a_row.iter().enumerate() {
            let b_row = &b[k * e..(k + 1) * e];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` (N x E) times `b` transposed, where `b` is D x E: row-dot-row form.
fn mm_abt(a: &[f64], n: usize, e: usize, b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let a_row = &a[i * e..(i + 1) * e];
        for k in 0..d {
            let b_row = &b[k * e..(k + 1) * e];
            out[i * d + k] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a` transposed times `g`, where `a` is N x D and `g` is N x E.
fn mm_atb(a: &[f64], n: usize, d: usize, g: &[f64], e: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * e];
    for i in 0..n {
        let a_row = &a[i * d..(i + 1) * d];
        let g_row = &g[i * e..(i + 1) * e];
        for (k, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[k * e..(k + 1) * e];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}
