//! Differentiable operations on [`Graph`].
//!
//! Every op validates shapes up front, computes the forward value eagerly, and
//! registers a backward closure that reads parent values back out of the graph
//! (closures capture only `Var` handles and small index data, never tensor
//! clones). Backward math is plain loops over flat storage; the three matmul
//! kernels below are the only code anything hot runs through.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// c[m,n] = a[m,k] * b[k,n]
pub(crate) fn mm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    debug_assert_eq!(k, b.dim(0));
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aip * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// c[m,n] = a[m,k] * b[n,k]^T
pub(crate) fn mm_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(0);
    debug_assert_eq!(k, b.dim(1));
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// c[m,n] = a[k,m]^T * b[k,n]
pub(crate) fn mm_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    debug_assert_eq!(k, b.dim(0));
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == S::zero() {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += api * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

fn want_rank<S: Scalar>(op: &'static str, t: &Tensor<S>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {}, got shape {:?}", rank, t.shape())));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += x;
        }
        Ok(self.push_op(out, vec![a, b], Box::new(move |_, g| vec![g.clone(), g.clone()])))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= x;
        }
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            let mut da = gr.value(b).clone();
            let mut db = gr.value(a).clone();
            for (d, &x) in da.data_mut().iter_mut().zip(g.data()) {
                *d *= x;
            }
            for (d, &x) in db.data_mut().iter_mut().zip(g.data()) {
                *d *= x;
            }
            vec![da, db]
        };
        Ok(self.push_op(out, vec![a, b], Box::new(back)))
    }

    /// Multiply every element by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push_op(out, vec![a], Box::new(move |_, g| vec![g.map(|v| v * c)]))
    }

    /// x[n,d] + b[d] broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        want_rank("add_bias", xv, 2)?;
        want_rank("add_bias", bv, 1)?;
        let (n, d) = (xv.dim(0), xv.dim(1));
        if bv.dim(0) != d {
            return Err(Error::dim("add_bias", format!("{:?} vs {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..n {
            for (o, &bb) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut db = vec![S::zero(); d];
            for i in 0..n {
                for (acc, &gv) in db.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                    *acc += gv;
                }
            }
            vec![g.clone(), Tensor::from_vec(&[d], db).unwrap()]
        };
        Ok(self.push_op(out, vec![x, b], Box::new(back)))
    }

    /// x[c,h,w] + b[c] broadcast over the spatial plane.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        want_rank("add_channel_bias", xv, 3)?;
        want_rank("add_channel_bias", bv, 1)?;
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if bv.dim(0) != c {
            return Err(Error::dim(
                "add_channel_bias",
                format!("{:?} vs {:?}", xv.shape(), bv.shape()),
            ));
        }
        let plane = h * w;
        let mut out = xv.clone();
        for ci in 0..c {
            let bb = bv.data()[ci];
            for o in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
                *o += bb;
            }
        }
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut db = vec![S::zero(); c];
            for (ci, acc) in db.iter_mut().enumerate() {
                for &gv in &g.data()[ci * plane..(ci + 1) * plane] {
                    *acc += gv;
                }
            }
            vec![g.clone(), Tensor::from_vec(&[c], db).unwrap()]
        };
        Ok(self.push_op(out, vec![x, b], Box::new(back)))
    }

    /// a[m,k] * b[k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        want_rank("matmul", av, 2)?;
        want_rank("matmul", bv, 2)?;
        if av.dim(1) != bv.dim(0) {
            return Err(Error::dim("matmul", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = mm(av, bv);
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            vec![mm_nt(g, gr.value(b)), mm_tn(gr.value(a), g)]
        };
        Ok(self.push_op(out, vec![a, b], Box::new(back)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        want_rank("transpose", av, 2)?;
        let (m, n) = (av.dim(0), av.dim(1));
        let t = |src: &Tensor<S>, rows: usize, cols: usize| {
            let mut out = vec![S::zero(); rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = src.data()[i * cols + j];
                }
            }
            Tensor::from_vec(&[cols, rows], out).unwrap()
        };
        let out = t(av, m, n);
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut out = vec![S::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    out[i * n + j] = g.data()[j * m + i];
                }
            }
            vec![Tensor::from_vec(&[m, n], out).unwrap()]
        };
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// View under a new shape with identical element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let old_shape = self.value(a).shape().to_vec();
        let back =
            move |_: &Graph<S>, g: &Tensor<S>| vec![g.reshaped(&old_shape).expect("reshape back")];
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Axis permutation of a rank-3 tensor.
    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let av = self.value(a);
        want_rank("permute3", av, 3)?;
        {
            let mut seen = [false; 3];
            for &p in &perm {
                if p > 2 || seen[p] {
                    return Err(Error::Argument(format!("permute3: bad permutation {:?}", perm)));
                }
                seen[p] = true;
            }
        }
        let out = permute3_raw(av, perm);
        // Inverse permutation routes gradients back.
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = move |_: &Graph<S>, g: &Tensor<S>| vec![permute3_raw(g, inv)];
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Rows [start, end) of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        want_rank("slice_rows", av, 2)?;
        let (m, n) = (av.dim(0), av.dim(1));
        if start >= end || end > m {
            return Err(Error::Argument(format!(
                "slice_rows: [{start}, {end}) out of bounds for {m} rows"
            )));
        }
        let out =
            Tensor::from_vec(&[end - start, n], av.data()[start * n..end * n].to_vec()).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut full = vec![S::zero(); m * n];
            full[start * n..end * n].copy_from_slice(g.data());
            vec![Tensor::from_vec(&[m, n], full).unwrap()]
        };
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Columns [start, end) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        want_rank("slice_cols", av, 2)?;
        let (m, n) = (av.dim(0), av.dim(1));
        if start >= end || end > n {
            return Err(Error::Argument(format!(
                "slice_cols: [{start}, {end}) out of bounds for {n} cols"
            )));
        }
        let w = end - start;
        let mut out = vec![S::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&av.data()[i * n + start..i * n + end]);
        }
        let out = Tensor::from_vec(&[m, w], out).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut full = vec![S::zero(); m * n];
            for i in 0..m {
                full[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Tensor::from_vec(&[m, n], full).unwrap()]
        };
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Vertical stack of rank-2 tensors with equal column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows: empty input".into()));
        }
        let n = self.value(parts[0]).dim(1);
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            want_rank("concat_rows", pv, 2)?;
            if pv.dim(1) != n {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", pv.dim(1), n),
                ));
            }
            rows.push(pv.dim(0));
            data.extend_from_slice(pv.data());
        }
        let total: usize = rows.iter().sum();
        let out = Tensor::from_vec(&[total, n], data).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut offset = 0usize;
            rows.iter()
                .map(|&r| {
                    let part =
                        Tensor::from_vec(&[r, n], g.data()[offset..offset + r * n].to_vec())
                            .unwrap();
                    offset += r * n;
                    part
                })
                .collect()
        };
        Ok(self.push_op(out, parts.to_vec(), Box::new(back)))
    }

    /// Horizontal stack of rank-2 tensors with equal row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols: empty input".into()));
        }
        let m = self.value(parts[0]).dim(0);
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            want_rank("concat_cols", pv, 2)?;
            if pv.dim(0) != m {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", pv.dim(0), m),
                ));
            }
            cols.push(pv.dim(1));
        }
        let total: usize = cols.iter().sum();
        let mut data = vec![S::zero(); m * total];
        let mut offset = 0usize;
        for (pi, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            let w = cols[pi];
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::from_vec(&[m, total], data).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut grads = Vec::with_capacity(cols.len());
            let mut offset = 0usize;
            for &w in &cols {
                let mut part = vec![S::zero(); m * w];
                for i in 0..m {
                    part[i * w..(i + 1) * w]
                        .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                grads.push(Tensor::from_vec(&[m, w], part).unwrap());
                offset += w;
            }
            grads
        };
        Ok(self.push_op(out, parts.to_vec(), Box::new(back)))
    }

    /// Row lookup: out[i, :] = a[idx[i], :]. Doubles as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        want_rank("gather_rows", av, 2)?;
        let (m, n) = (av.dim(0), av.dim(1));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Argument(format!("gather_rows: index {bad} >= {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&av.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(&[idx.len(), n], data).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut full = vec![S::zero(); m * n];
            for (row, &i) in idx.iter().enumerate() {
                for (acc, &gv) in
                    full[i * n..(i + 1) * n].iter_mut().zip(&g.data()[row * n..(row + 1) * n])
                {
                    *acc += gv;
                }
            }
            vec![Tensor::from_vec(&[m, n], full).unwrap()]
        };
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Row-wise softmax of a rank-2 tensor, numerically stabilised.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        want_rank("softmax_rows", av, 2)?;
        let (m, n) = (av.dim(0), av.dim(1));
        if n == 0 {
            return Err(Error::dim("softmax_rows", "zero-width rows"));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut z = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        let out = Tensor::from_vec(&[m, n], out).unwrap();
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            // dx = y * (g - sum(g * y)) per row; y is recomputed from the
            // parent because the closure cannot hold a handle to its own node.
            let av = gr.value(a);
            let mut dx = vec![S::zero(); m * n];
            for i in 0..m {
                let row = &av.data()[i * n..(i + 1) * n];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut y = vec![S::zero(); n];
                let mut z = S::zero();
                for (o, &v) in y.iter_mut().zip(row) {
                    *o = (v - mx).exp();
                    z += *o;
                }
                for o in y.iter_mut() {
                    *o = *o / z;
                }
                let grow = &g.data()[i * n..(i + 1) * n];
                let mut dot = S::zero();
                for (&gv, &yv) in grow.iter().zip(&y) {
                    dot += gv * yv;
                }
                for ((d, &gv), &yv) in dx[i * n..(i + 1) * n].iter_mut().zip(grow).zip(&y) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Tensor::from_vec(&[m, n], dx).unwrap()]
        };
        Ok(self.push_op(out, vec![a], Box::new(back)))
    }

    /// Per-row layer normalisation with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        want_rank("layer_norm", xv, 2)?;
        want_rank("layer_norm", gv, 1)?;
        want_rank("layer_norm", bv, 1)?;
        let (n, d) = (xv.dim(0), xv.dim(1));
        if gv.dim(0) != d || bv.dim(0) != d {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        if d == 0 {
            return Err(Error::dim("layer_norm", "zero feature dim"));
        }
        let epss = S::from_f64(eps);
        let dinv = S::one() / S::from_usize(d);
        let normalise = move |xv: &Tensor<S>, i: usize| -> (Vec<S>, S) {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu *= dinv;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var *= dinv;
            let istd = S::one() / (var + epss).sqrt();
            (row.iter().map(|&v| (v - mu) * istd).collect(), istd)
        };
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let (xh, _) = normalise(xv, i);
            for ((o, xh), (&gm, &bt)) in
                out[i * d..(i + 1) * d].iter_mut().zip(xh).zip(gv.data().iter().zip(bv.data()))
            {
                *o = xh * gm + bt;
            }
        }
        let out = Tensor::from_vec(&[n, d], out).unwrap();
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            let xv = gr.value(x);
            let gv = gr.value(gamma);
            let mut dx = vec![S::zero(); n * d];
            let mut dgamma = vec![S::zero(); d];
            let mut dbeta = vec![S::zero(); d];
            for i in 0..n {
                let (xh, istd) = normalise(xv, i);
                let grow = &g.data()[i * d..(i + 1) * d];
                // dxh = g * gamma; dx = istd * (dxh - mean(dxh) - xh * mean(dxh*xh))
                let mut m1 = S::zero();
                let mut m2 = S::zero();
                let mut dxh = vec![S::zero(); d];
                for j in 0..d {
                    dxh[j] = grow[j] * gv.data()[j];
                    m1 += dxh[j];
                    m2 += dxh[j] * xh[j];
                    dgamma[j] += grow[j] * xh[j];
                    dbeta[j] += grow[j];
                }
                m1 *= dinv;
                m2 *= dinv;
                for j in 0..d {
                    dx[i * d + j] = istd * (dxh[j] - m1 - xh[j] * m2);
                }
            }
            vec![
                Tensor::from_vec(&[n, d], dx).unwrap(),
                Tensor::from_vec(&[d], dgamma).unwrap(),
                Tensor::from_vec(&[d], dbeta).unwrap(),
            ]
        };
        Ok(self.push_op(out, vec![x, gamma, beta], Box::new(back)))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let out = self.value(a).map(|x| {
            let t = (c * (x + k * x * x * x)).tanh();
            half * x * (S::one() + t)
        });
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            let av = gr.value(a);
            let mut dx = g.clone();
            for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let dt = (S::one() - t * t) * c * (S::one() + three * k * x * x);
                *d *= half * (S::one() + t) + half * x * dt;
            }
            vec![dx]
        };
        self.push_op(out, vec![a], Box::new(back))
    }

    /// 2-D convolution, no padding. x[ci,h,w], k[co,ci,kh,kw], stride (sh,sw).
    /// The stride must step the kernel across the input exactly, i.e.
    /// (h - kh) % sh == 0 and (w - kw) % sw == 0.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: (usize, usize)) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        want_rank("conv2d", xv, 3)?;
        if kv.rank() != 4 {
            return Err(Error::dim("conv2d", format!("kernel rank {:?}", kv.shape())));
        }
        let (ci, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (co, kci, kh, kw) = (kv.dim(0), kv.dim(1), kv.dim(2), kv.dim(3));
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::Config("conv2d: zero stride".into()));
        }
        if kci != ci {
            return Err(Error::dim("conv2d", format!("channels {} vs kernel {}", ci, kci)));
        }
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
            ));
        }
        if (h - kh) % sh != 0 || (w - kw) % sw != 0 {
            return Err(Error::Config(format!(
                "conv2d: input {}x{} with kernel {}x{} is not divisible by stride {}x{} under \
                 'none' padding",
                h, w, kh, kw, sh, sw
            )));
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let mut out = vec![S::zero(); co * oh * ow];
        let xd = xv.data();
        let kd = kv.data();
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for c in 0..ci {
                        for ky in 0..kh {
                            let xrow = (c * h + oy * sh + ky) * w + ox * sw;
                            let krow = ((o * ci + c) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += xd[xrow + kx] * kd[krow + kx];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[co, oh, ow], out).unwrap();
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            let xv = gr.value(x);
            let kv = gr.value(kernel);
            let xd = xv.data();
            let kd = kv.data();
            let gd = g.data();
            let mut dx = vec![S::zero(); ci * h * w];
            let mut dk = vec![S::zero(); co * ci * kh * kw];
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gd[(o * oh + oy) * ow + ox];
                        if gv == S::zero() {
                            continue;
                        }
                        for c in 0..ci {
                            for ky in 0..kh {
                                let xrow = (c * h + oy * sh + ky) * w + ox * sw;
                                let krow = ((o * ci + c) * kh + ky) * kw;
                                for kx in 0..kw {
                                    dx[xrow + kx] += gv * kd[krow + kx];
                                    dk[krow + kx] += gv * xd[xrow + kx];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::from_vec(&[ci, h, w], dx).unwrap(),
                Tensor::from_vec(&[co, ci, kh, kw], dk).unwrap(),
            ]
        };
        Ok(self.push_op(out, vec![x, kernel], Box::new(back)))
    }

    /// Channelwise adaptive mean pooling of x[c,h,w] down to [c,oh,ow].
    /// Output cell (i,j) averages the input bin rows [floor(i*h/oh),
    /// floor((i+1)*h/oh)) x cols [floor(j*w/ow), floor((j+1)*w/ow)); the bins
    /// partition the plane exactly.
    pub fn adaptive_mean_pool3(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        want_rank("adaptive_mean_pool3", xv, 3)?;
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if oh == 0 || ow == 0 {
            return Err(Error::dim("adaptive_mean_pool3", "zero output extent"));
        }
        if oh > h || ow > w {
            return Err(Error::dim(
                "adaptive_mean_pool3",
                format!("output {}x{} exceeds input {}x{}", oh, ow, h, w),
            ));
        }
        let row_bin = move |i: usize| (i * h / oh, (i + 1) * h / oh);
        let col_bin = move |j: usize| (j * w / ow, (j + 1) * w / ow);
        let mut out = vec![S::zero(); c * oh * ow];
        let xd = xv.data();
        for ci in 0..c {
            for i in 0..oh {
                let (r0, r1) = row_bin(i);
                for j in 0..ow {
                    let (c0, c1) = col_bin(j);
                    let mut acc = S::zero();
                    for y in r0..r1 {
                        for xcol in c0..c1 {
                            acc += xd[(ci * h + y) * w + xcol];
                        }
                    }
                    let count = S::from_usize((r1 - r0) * (c1 - c0));
                    out[(ci * oh + i) * ow + j] = acc / count;
                }
            }
        }
        let out = Tensor::from_vec(&[c, oh, ow], out).unwrap();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            let mut dx = vec![S::zero(); c * h * w];
            let gd = g.data();
            for ci in 0..c {
                for i in 0..oh {
                    let (r0, r1) = row_bin(i);
                    for j in 0..ow {
                        let (c0, c1) = col_bin(j);
                        let count = S::from_usize((r1 - r0) * (c1 - c0));
                        let gv = gd[(ci * oh + i) * ow + j] / count;
                        for y in r0..r1 {
                            for xcol in c0..c1 {
                                dx[(ci * h + y) * w + xcol] += gv;
                            }
                        }
                    }
                }
            }
            vec![Tensor::from_vec(&[c, h, w], dx).unwrap()]
        };
        Ok(self.push_op(out, vec![x], Box::new(back)))
    }

    /// Mean cross-entropy of logits[n,v] against integer targets, stabilised
    /// via log-sum-exp. Returns a scalar.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        want_rank("cross_entropy_mean", lv, 2)?;
        let (n, v) = (lv.dim(0), lv.dim(1));
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy_mean",
                format!("{} logit rows vs {} targets", n, targets.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Argument("cross_entropy_mean: empty batch".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Argument(format!(
                "cross_entropy_mean: target {bad} >= vocab {v}"
            )));
        }
        let ninv = S::one() / S::from_usize(n);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv.data()[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut z = S::zero();
            for &x in row {
                z += (x - mx).exp();
            }
            total += mx + z.ln() - row[t];
        }
        let out = Tensor::scalar(total * ninv);
        let back = move |gr: &Graph<S>, g: &Tensor<S>| {
            let lv = gr.value(logits);
            let gs = g.data()[0] * ninv;
            let mut dl = vec![S::zero(); n * v];
            for (i, &t) in targets.iter().enumerate() {
                let row = &lv.data()[i * v..(i + 1) * v];
                let mut mx = row[0];
                for &x in row {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut z = S::zero();
                for &x in row {
                    z += (x - mx).exp();
                }
                let drow = &mut dl[i * v..(i + 1) * v];
                for (d, &x) in drow.iter_mut().zip(row) {
                    *d = (x - mx).exp() / z * gs;
                }
                drow[t] -= gs;
            }
            vec![Tensor::from_vec(&[n, v], dl).unwrap()]
        };
        Ok(self.push_op(out, vec![logits], Box::new(back)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut total = S::zero();
        for &x in av.data() {
            total += x;
        }
        let shape = av.shape().to_vec();
        let back = move |_: &Graph<S>, g: &Tensor<S>| {
            vec![Tensor::filled(&shape, g.data()[0])]
        };
        self.push_op(Tensor::scalar(total), vec![a], Box::new(back))
    }

    /// x[n,in] * w[in,out] + b[out]; the standard dense layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }
}

fn permute3_raw<S: Scalar>(t: &Tensor<S>, perm: [usize; 3]) -> Tensor<S> {
    let shape = [t.dim(0), t.dim(1), t.dim(2)];
    let oshape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let mut out = vec![S::zero(); t.numel()];
    let (s1, s2) = (shape[1], shape[2]);
    let (o1, o2) = (oshape[1], oshape[2]);
    let mut src = [0usize; 3];
    for a in 0..oshape[0] {
        src[perm[0]] = a;
        for b in 0..o1 {
            src[perm[1]] = b;
            for c in 0..o2 {
                src[perm[2]] = c;
                out[(a * o1 + b) * o2 + c] = t.data()[(src[0] * s1 + src[1]) * s2 + src[2]];
            }
        }
    }
    Tensor::from_vec(&oshape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn mm_kernels_agree() {
        let a = t2(3, 4, &(0..12).map(|v| v as f64 * 0.37 - 1.0).collect::<Vec<_>>());
        let b = t2(4, 2, &(0..8).map(|v| v as f64 * 0.21 + 0.5).collect::<Vec<_>>());
        let c = mm(&a, &b);
        // mm_nt(a, b^T) == a*b
        let mut bt = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b.at2(i, j);
            }
        }
        let bt = t2(2, 4, &bt);
        assert!(c.max_abs_diff(&mm_nt(&a, &bt)).unwrap() < 1e-12);
        // mm_tn(a^T, b) with a^T stored as a
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.at2(i, j);
            }
        }
        let at = t2(4, 3, &at);
        assert!(c.max_abs_diff(&mm_tn(&at, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]));
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for i in 0..2 {
            let sum: f64 = (0..3).map(|j| v.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Large logits stay finite.
        assert!(v.all_finite());
        assert!((v.at2(1, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_hand_example() {
        // 1x1x8 row, kernel 1x4 stride (1,4): two windows.
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::from_vec(&[1, 1, 8], (1..=8).map(|v| v as f64).collect()).unwrap(),
        );
        let k = g.constant(Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let y = g.conv2d(x, k, (1, 4)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2]);
        assert_eq!(g.value(y).data(), &[10.0, 26.0]); // 1+2+3+4, 5+6+7+8
    }

    #[test]
    fn conv2d_rejects_indivisible_stride() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 7]));
        let k = g.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(matches!(g.conv2d(x, k, (1, 4)), Err(Error::Config(_))));
    }

    #[test]
    fn adaptive_pool_partitions() {
        // 1x5 -> 1x2: bins [0,2) and [2,5).
        let mut g = Graph::<f64>::new();
        let x = g.constant(
            Tensor::from_vec(&[1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        );
        let y = g.adaptive_mean_pool3(x, 1, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 4.0]);
    }

    #[test]
    fn adaptive_pool_identity_when_same_size() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        let y = g.adaptive_mean_pool3(x, 3, 3).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[4, 7]));
        let loss = g.cross_entropy_mean(logits, vec![0, 3, 6, 2]).unwrap();
        assert!((g.value(loss).item().unwrap() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_and_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let picked = g.gather_rows(table, vec![2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = g.sum_all(picked);
        let grads = g.backward(loss).unwrap();
        // Row 2 was picked twice.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = g.slice_rows(a, 0, 1).unwrap();
        let rest = g.slice_rows(a, 1, 3).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());

        let left = g.slice_cols(a, 0, 1).unwrap();
        let right = g.slice_cols(a, 1, 2).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn permute3_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute3(x, [2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let q = g.permute3(p, [1, 2, 0]).unwrap();
        assert_eq!(g.value(q).data(), g.value(x).data());
    }

    #[test]
    fn transpose_hand_example() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let at = g.transpose(a).unwrap();
        assert_eq!(g.value(at).shape(), &[3, 2]);
        assert_eq!(g.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(Tensor::filled(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let v = g.value(y);
        let mean: f64 = v.data().iter().sum::<f64>() / 4.0;
        let var: f64 = v.data().iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_known_points() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![0.0, 100.0, -100.0]).unwrap());
        let y = g.gelu(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 100.0).abs() < 1e-9);
        assert!(v[2].abs() < 1e-9);
    }

    #[test]
    fn frozen_leaf_subgraph_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let frozen = g.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let live = g.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]), true);
        let y = g.matmul(frozen, live).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }
}
