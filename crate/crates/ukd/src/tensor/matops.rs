//! Matrix and structural operations for [`Graph`].
//!
//! Forward builders plus their reverse rules. The three accumulation kernels
//! below implement `out += a @ b` for the normal/transposed layouts needed by
//! both directions of matmul.

use super::{numel, Graph, Op, Var};
use crate::error::{Result, UkdError};
use crate::interp::axis_taps;

/// `out[m,n] += a[m,k] @ b[k,n]` (row-major, ikj order).
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

/// `out[m,n] += a[m,k] @ b[n,k]^T` (dot products of rows).
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            orow[j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T @ g[m,n]`.
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * grow[j];
                }
            }
        }
    }
}

impl Graph {
    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(UkdError::Dimension(format!("{what}: expected 2D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 3 {
            return Err(UkdError::Dimension(format!("{what}: expected 3D, got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(UkdError::Dimension(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut values = vec![0.0; m * n];
        mm_nn(self.values(a), self.values(b), m, k, n, &mut values);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(values, vec![m, n], rg, Op::Matmul { a: a.id, b: b.id, m, k, n }))
    }

    /// `a[m,k] @ b[n,k]^T -> [m,n]`. The natural layout for `Linear` weights
    /// stored as `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(UkdError::Dimension(format!(
                "matmul_nt: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut values = vec![0.0; m * n];
        mm_nt(self.values(a), self.values(b), m, k, n, &mut values);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(values, vec![m, n], rg, Op::MatmulNT { a: a.id, b: b.id, m, k, n }))
    }

    /// Batched `a[bt,m,k] @ b[bt,k,n] -> [bt,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bt, m, k) = self.dims3(a, "bmm lhs")?;
        let (bt2, k2, n) = self.dims3(b, "bmm rhs")?;
        if bt != bt2 || k != k2 {
            return Err(UkdError::Dimension(format!(
                "bmm: shapes {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut values = vec![0.0; bt * m * n];
        for t in 0..bt {
            mm_nn(
                &self.values(a)[t * m * k..(t + 1) * m * k],
                &self.values(b)[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut values[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(values, vec![bt, m, n], rg, Op::Bmm { a: a.id, b: b.id, bt, m, k, n }))
    }

    /// Batched `a[bt,m,k] @ b[bt,n,k]^T -> [bt,m,n]` (attention scores).
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bt, m, k) = self.dims3(a, "bmm_nt lhs")?;
        let (bt2, n, k2) = self.dims3(b, "bmm_nt rhs")?;
        if bt != bt2 || k != k2 {
            return Err(UkdError::Dimension(format!(
                "bmm_nt: shapes {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut values = vec![0.0; bt * m * n];
        for t in 0..bt {
            mm_nt(
                &self.values(a)[t * m * k..(t + 1) * m * k],
                &self.values(b)[t * n * k..(t + 1) * n * k],
                m,
                k,
                n,
                &mut values[t * m * n..(t + 1) * m * n],
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(values, vec![bt, m, n], rg, Op::BmmNT { a: a.id, b: b.id, bt, m, k, n }))
    }

    /// Reinterpret the element buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values(x).len() {
            return Err(UkdError::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let values = self.values(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(values, shape.to_vec(), rg, Op::Reshape(x.id)))
    }

    /// Stack 2D blocks with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(UkdError::Parameter("concat_rows: no parts".into()));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, dc) = self.dims2(p, "concat_rows")?;
            if dc != d {
                return Err(UkdError::Dimension(format!(
                    "concat_rows: column mismatch {dc} vs {d}"
                )));
            }
            rows.push(r);
            total += r;
        }
        let mut values = Vec::with_capacity(total * d);
        for &p in parts {
            values.extend_from_slice(self.values(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            values,
            vec![total, d],
            rg,
            Op::ConcatRows { parts: parts.iter().map(|p| p.id).collect(), rows },
        ))
    }

    /// Gather rows of a 2D tensor by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "select_rows")?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(UkdError::Parameter(format!(
                "select_rows: row {bad} out of range {n}"
            )));
        }
        let xs = self.values(x);
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![idx.len(), d], rg, Op::SelectRows { x: x.id, idx: idx.to_vec() }))
    }

    /// Replace masked rows of `x[n,d]` with a learned `token[d]`. The output
    /// at a masked row depends only on the token, never on that row of `x`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.dims2(x, "mask_rows")?;
        if self.shape(token) != [d] {
            return Err(UkdError::Dimension(format!(
                "mask_rows: token {:?} must be [{d}]",
                self.shape(token)
            )));
        }
        if mask.len() != n {
            return Err(UkdError::Dimension(format!(
                "mask_rows: mask length {} for {n} rows",
                mask.len()
            )));
        }
        let tv = self.values(token).to_vec();
        let xs = self.values(x);
        let mut values = Vec::with_capacity(n * d);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                values.extend_from_slice(&tv);
            } else {
                values.extend_from_slice(&xs[i * d..(i + 1) * d]);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(token);
        Ok(self.push(
            values,
            vec![n, d],
            rg,
            Op::MaskRows { x: x.id, token: token.id, mask: mask.to_vec() },
        ))
    }

    /// Multiply each row of `x[n,d]` by a fixed scalar (stochastic depth).
    pub fn scale_rows(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let (n, d) = self.dims2(x, "scale_rows")?;
        if scales.len() != n {
            return Err(UkdError::Dimension(format!(
                "scale_rows: {} scales for {n} rows",
                scales.len()
            )));
        }
        let xs = self.values(x);
        let mut values = Vec::with_capacity(n * d);
        for (i, &s) in scales.iter().enumerate() {
            values.extend(xs[i * d..(i + 1) * d].iter().map(|v| v * s));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![n, d], rg, Op::ScaleRows { x: x.id, scales: scales.to_vec() }))
    }

    /// `[b*t, h*dh] -> [b*h, t, dh]`: regroup rows from (batch, token) to
    /// (batch, head) for attention.
    pub fn split_heads(&mut self, x: Var, b: usize, t: usize, h: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "split_heads")?;
        if rows != b * t || d % h != 0 {
            return Err(UkdError::Dimension(format!(
                "split_heads: shape {:?} vs b={b} t={t} h={h}",
                self.shape(x)
            )));
        }
        let dh = d / h;
        let xs = self.values(x);
        let mut values = vec![0.0; xs.len()];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let src = ((bi * t + ti) * h + hi) * dh;
                    let dst = ((bi * h + hi) * t + ti) * dh;
                    values[dst..dst + dh].copy_from_slice(&xs[src..src + dh]);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![b * h, t, dh], rg, Op::SplitHeads { x: x.id, b, t, h, dh }))
    }

    /// Inverse of [`Graph::split_heads`]: `[b*h, t, dh] -> [b*t, h*dh]`.
    pub fn merge_heads(&mut self, x: Var, b: usize, h: usize) -> Result<Var> {
        let (bh, t, dh) = self.dims3(x, "merge_heads")?;
        if bh != b * h {
            return Err(UkdError::Dimension(format!(
                "merge_heads: batch axis {bh} vs b={b} h={h}"
            )));
        }
        let xs = self.values(x);
        let mut values = vec![0.0; xs.len()];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let src = ((bi * h + hi) * t + ti) * dh;
                    let dst = ((bi * t + ti) * h + hi) * dh;
                    values[dst..dst + dh].copy_from_slice(&xs[src..src + dh]);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![b * t, h * dh], rg, Op::MergeHeads { x: x.id, b, t, h, dh }))
    }

    /// Bilinearly resize a square feature grid `[src*src, d] -> [dst*dst, d]`
    /// inside the graph (used for positional-embedding rescaling).
    pub fn bilinear_grid(&mut self, x: Var, src: usize, dst: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "bilinear_grid")?;
        if rows != src * src {
            return Err(UkdError::Dimension(format!(
                "bilinear_grid: {rows} rows is not a {src}x{src} grid"
            )));
        }
        let values = crate::interp::resize_plane(self.values(x), d, src, src, dst, dst);
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![dst * dst, d], rg, Op::BilinearGrid { x: x.id, src, dst, d }))
    }

    /// `x[n,in] @ w[out,in]^T (+ bias)`: the standard linear layer.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reverse rules for the ops defined in this file.
    pub(crate) fn propagate_matop(
        &self,
        id: usize,
        op: &Op,
        g: &[f64],
        local: &mut [Option<Vec<f64>>],
    ) {
        match *op {
            Op::Matmul { a, b, m, k, n } => {
                if self.bump(local, a) {
                    mm_nt(g, &self.nodes[b].values, m, n, k, local[a].as_mut().unwrap());
                }
                if self.bump(local, b) {
                    mm_tn(&self.nodes[a].values, g, m, k, n, local[b].as_mut().unwrap());
                }
            }
            Op::MatmulNT { a, b, m, k, n } => {
                if self.bump(local, a) {
                    mm_nn(g, &self.nodes[b].values, m, n, k, local[a].as_mut().unwrap());
                }
                if self.bump(local, b) {
                    mm_tn(g, &self.nodes[a].values, m, n, k, local[b].as_mut().unwrap());
                }
            }
            Op::Bmm { a, b, bt, m, k, n } => {
                for t in 0..bt {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if self.bump(local, a) {
                        mm_nt(
                            gt,
                            &self.nodes[b].values[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut local[a].as_mut().unwrap()[t * m * k..(t + 1) * m * k],
                        );
                    }
                    if self.bump(local, b) {
                        mm_tn(
                            &self.nodes[a].values[t * m * k..(t + 1) * m * k],
                            gt,
                            m,
                            k,
                            n,
                            &mut local[b].as_mut().unwrap()[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::BmmNT { a, b, bt, m, k, n } => {
                for t in 0..bt {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if self.bump(local, a) {
                        mm_nn(
                            gt,
                            &self.nodes[b].values[t * n * k..(t + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut local[a].as_mut().unwrap()[t * m * k..(t + 1) * m * k],
                        );
                    }
                    if self.bump(local, b) {
                        mm_tn(
                            gt,
                            &self.nodes[a].values[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut local[b].as_mut().unwrap()[t * n * k..(t + 1) * n * k],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if self.bump(local, x) {
                    super::axpy(local[x].as_mut().unwrap(), g, 1.0);
                }
            }
            Op::ConcatRows { ref parts, ref rows } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let mut offset = 0usize;
                for (&p, &r) in parts.iter().zip(rows) {
                    if self.bump(local, p) {
                        super::axpy(
                            local[p].as_mut().unwrap(),
                            &g[offset * d..(offset + r) * d],
                            1.0,
                        );
                    }
                    offset += r;
                }
            }
            Op::SelectRows { x, ref idx } => {
                if self.bump(local, x) {
                    let d = self.nodes[x].shape[1];
                    let dst = local[x].as_mut().unwrap();
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..d {
                            dst[src_r * d + c] += g[out_r * d + c];
                        }
                    }
                }
            }
            Op::MaskRows { x, token, ref mask } => {
                let d = self.nodes[token].values.len();
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for c in 0..d {
                                dst[i * d + c] += g[i * d + c];
                            }
                        }
                    }
                }
                if self.bump(local, token) {
                    let dst = local[token].as_mut().unwrap();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..d {
                                dst[c] += g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, ref scales } => {
                if self.bump(local, x) {
                    let d = self.nodes[x].shape[1];
                    let dst = local[x].as_mut().unwrap();
                    for (i, &s) in scales.iter().enumerate() {
                        for c in 0..d {
                            dst[i * d + c] += s * g[i * d + c];
                        }
                    }
                }
            }
            Op::SplitHeads { x, b, t, h, dh } => {
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let xs = ((bi * t + ti) * h + hi) * dh;
                                let ys = ((bi * h + hi) * t + ti) * dh;
                                for c in 0..dh {
                                    dst[xs + c] += g[ys + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, t, h, dh } => {
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let xs = ((bi * h + hi) * t + ti) * dh;
                                let ys = ((bi * t + ti) * h + hi) * dh;
                                for c in 0..dh {
                                    dst[xs + c] += g[ys + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::BilinearGrid { x, src, dst: dst_side, d } => {
                if self.bump(local, x) {
                    let taps = axis_taps(src, dst_side);
                    let acc = local[x].as_mut().unwrap();
                    for (yi, &(y0, y1, wy)) in taps.iter().enumerate() {
                        for (xi, &(x0, x1, wx)) in taps.iter().enumerate() {
                            let gr = &g[(yi * dst_side + xi) * d..(yi * dst_side + xi + 1) * d];
                            for c in 0..d {
                                let gv = gr[c];
                                acc[(y0 * src + x0) * d + c] += (1.0 - wy) * (1.0 - wx) * gv;
                                acc[(y0 * src + x1) * d + c] += (1.0 - wy) * wx * gv;
                                acc[(y1 * src + x0) * d + c] += wy * (1.0 - wx) * gv;
                                acc[(y1 * src + x1) * d + c] += wy * wx * gv;
                            }
                        }
                    }
                }
            }
            _ => unreachable!("not a matop"),
        }
    }
}
