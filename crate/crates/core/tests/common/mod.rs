//! Shared helpers for integration tests: an independent, loop-based
//! reference implementation of page compression used to cross-check the
//! graph-based one. Deliberately avoids the library's tensor ops; everything
//! here is plain nested-Vec arithmetic.

#![allow(dead_code)]

use doctok_core::compressor::VariantKind;
use doctok_core::params::ParamSet;

pub type Mat = Vec<Vec<f64>>;

pub fn mat_from_param(ps: &ParamSet<f64>, name: &str) -> Mat {
    let t = &ps.get(name).expect(name).tensor;
    assert_eq!(t.rank(), 2);
    let (rows, cols) = (t.dim(0), t.dim(1));
    (0..rows).map(|i| (0..cols).map(|j| t.at2(i, j)).collect()).collect()
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for (x, row) in v.iter().zip(m.iter()) {
        for (o, w) in out.iter_mut().zip(row.iter()) {
            *o += x * w;
        }
    }
    out
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// One query vector attending to `keys`/`values` rows, multi-head, returning
/// the concatenated head outputs (no residual).
fn attend(q: &[f64], keys: &[&Vec<f64>], values: &[&Vec<f64>], heads: usize) -> Vec<f64> {
    let dim = q.len();
    let dk = dim / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; dim];
    for hd in 0..heads {
        let lo = hd * dk;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| (0..dk).map(|t| q[lo + t] * k[lo + t]).sum::<f64>() * scale)
            .collect();
        let att = softmax(&scores);
        for (a, v) in att.iter().zip(values.iter()) {
            for t in 0..dk {
                out[lo + t] += a * v[lo + t];
            }
        }
    }
    out
}

/// Reference weights extracted from a parameter set.
pub struct NaiveWeights {
    /// (wq, wk, wv) per layer.
    pub layers: Vec<(Mat, Mat, Mat)>,
    /// Learned queries; resampler only.
    pub query: Option<Mat>,
}

impl NaiveWeights {
    pub fn from_params(ps: &ParamSet<f64>, layers: usize, resampler: bool) -> NaiveWeights {
        NaiveWeights {
            layers: (0..layers)
                .map(|l| {
                    (
                        mat_from_param(ps, &format!("cmp.l{l}.wq")),
                        mat_from_param(ps, &format!("cmp.l{l}.wk")),
                        mat_from_param(ps, &format!("cmp.l{l}.wv")),
                    )
                })
                .collect(),
            query: resampler.then(|| mat_from_param(ps, "cmp.query")),
        }
    }
}

/// Independent compression: builds the big map by direct indexing, walks
/// queries one by one, and applies attention with explicit loops.
/// `global` is [h*w][dim]; `subs` is row-major over the r x c grid, each
/// [h*w][dim]. Returns [out_len][dim].
pub fn naive_compress(
    kind: VariantKind,
    heads: usize,
    r: usize,
    c: usize,
    h: usize,
    w: usize,
    global: &Mat,
    subs: &[Mat],
    weights: &NaiveWeights,
) -> Mat {
    let dim = global[0].len();
    let cols_hi = c * w;
    // Block layout: sub (gr, gc) token (i, j) lands at (gr*h+i, gc*w+j).
    let mut reorg: Mat = vec![vec![0.0; dim]; r * h * cols_hi];
    for gr in 0..r {
        for gc in 0..c {
            for i in 0..h {
                for j in 0..w {
                    reorg[(gr * h + i) * cols_hi + (gc * w + j)] =
                        subs[gr * c + gc][i * w + j].clone();
                }
            }
        }
    }
    let group_rows = |i0: usize, j0: usize| -> Vec<usize> {
        let mut out = Vec::new();
        for x in r * i0..r * (i0 + 1) {
            for y in c * j0..c * (j0 + 1) {
                out.push(x * cols_hi + y);
            }
        }
        out
    };

    match kind {
        VariantKind::GroupAtt | VariantKind::CompleteAtt => {
            let mut q: Mat = global.clone();
            for (wq, wk, wv) in &weights.layers {
                let qp: Mat = q.iter().map(|row| vec_mat(row, wq)).collect();
                let kp: Mat = reorg.iter().map(|row| vec_mat(row, wk)).collect();
                let vp: Mat = reorg.iter().map(|row| vec_mat(row, wv)).collect();
                let mut next = Vec::with_capacity(q.len());
                for i0 in 0..h {
                    for j0 in 0..w {
                        let qi = i0 * w + j0;
                        let rows: Vec<usize> = match kind {
                            VariantKind::GroupAtt => group_rows(i0, j0),
                            _ => (0..kp.len()).collect(),
                        };
                        let keys: Vec<&Vec<f64>> = rows.iter().map(|&x| &kp[x]).collect();
                        let vals: Vec<&Vec<f64>> = rows.iter().map(|&x| &vp[x]).collect();
                        let att = attend(&qp[qi], &keys, &vals, heads);
                        next.push(att.iter().zip(q[qi].iter()).map(|(a, b)| a + b).collect());
                    }
                }
                q = next;
            }
            q
        }
        VariantKind::GroupMean => {
            let mut out = Vec::with_capacity(h * w);
            for i0 in 0..h {
                for j0 in 0..w {
                    let rows = group_rows(i0, j0);
                    let mut mean = vec![0.0; dim];
                    for &x in &rows {
                        for (m, v) in mean.iter_mut().zip(reorg[x].iter()) {
                            *m += v;
                        }
                    }
                    let n = rows.len() as f64;
                    let qi = i0 * w + j0;
                    out.push(
                        mean.iter().zip(global[qi].iter()).map(|(m, g)| m / n + g).collect(),
                    );
                }
            }
            out
        }
        VariantKind::Resampler => {
            let mut keys_src: Mat = global.clone();
            keys_src.extend(reorg.iter().cloned());
            let mut q: Mat = weights.query.clone().expect("resampler queries");
            for (wq, wk, wv) in &weights.layers {
                let qp: Mat = q.iter().map(|row| vec_mat(row, wq)).collect();
                let kp: Mat = keys_src.iter().map(|row| vec_mat(row, wk)).collect();
                let vp: Mat = keys_src.iter().map(|row| vec_mat(row, wv)).collect();
                let keys: Vec<&Vec<f64>> = kp.iter().collect();
                let vals: Vec<&Vec<f64>> = vp.iter().collect();
                let mut next = Vec::with_capacity(q.len());
                for (qi, qrow) in qp.iter().enumerate() {
                    let att = attend(qrow, &keys, &vals, heads);
                    next.push(att.iter().zip(q[qi].iter()).map(|(a, b)| a + b).collect());
                }
                q = next;
            }
            q
        }
        VariantKind::AdaptiveMean => {
            // Partition bins over the big map; with rows_hi = r*h and target h
            // the bins are exact r x c blocks, but compute them generally.
            let rows_hi = r * h;
            let mut out = Vec::with_capacity(h * w);
            for i0 in 0..h {
                for j0 in 0..w {
                    let (x0, x1) = (i0 * rows_hi / h, (i0 + 1) * rows_hi / h);
                    let (y0, y1) = (j0 * cols_hi / w, (j0 + 1) * cols_hi / w);
                    let mut acc = vec![0.0; dim];
                    let mut n = 0.0;
                    for x in x0..x1 {
                        for y in y0..y1 {
                            for (a, v) in acc.iter_mut().zip(reorg[x * cols_hi + y].iter()) {
                                *a += v;
                            }
                            n += 1.0;
                        }
                    }
                    out.push(acc.iter().map(|a| a / n).collect());
                }
            }
            out
        }
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b.iter()) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}
