//! Recorded operations and their vector-Jacobian products.

use super::error::Result;
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub(crate) enum Op<S: Scalar> {
    MatMul {
        a: Tensor<S>,
        b: Tensor<S>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Tensor<S>,
        b: Tensor<S>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Sub {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Mul {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    AddSuffix {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    MulSuffix {
        a: Tensor<S>,
        b: Tensor<S>,
    },
    Scale {
        a: Tensor<S>,
        factor: S,
    },
    MulConst {
        a: Tensor<S>,
        mask: Vec<S>,
    },
    Softmax {
        a: Tensor<S>,
        cols: usize,
    },
    LayerNorm {
        a: Tensor<S>,
        cols: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu {
        a: Tensor<S>,
    },
    XLogX {
        a: Tensor<S>,
    },
    Sum {
        a: Tensor<S>,
        scale: S,
    },
    SumAxis {
        a: Tensor<S>,
        outer: usize,
        dim: usize,
        inner: usize,
        scale: S,
    },
    Reshape {
        a: Tensor<S>,
    },
    TransposeLast2 {
        a: Tensor<S>,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Narrow {
        a: Tensor<S>,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Tensor<S>>,
        outer: usize,
        dims: Vec<usize>,
        inner: usize,
    },
    Expand {
        a: Tensor<S>,
        outer: usize,
        count: usize,
        inner: usize,
    },
    IndexSelect0 {
        a: Tensor<S>,
        idx: Vec<usize>,
        row: usize,
    },
    ScatterRows0 {
        a: Tensor<S>,
        idx: Vec<usize>,
        row: usize,
    },
    ScaleRows {
        a: Tensor<S>,
        w: Tensor<S>,
        row: usize,
    },
    NormalizeRows {
        a: Tensor<S>,
        cols: usize,
    },
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

pub(crate) fn bmm_kernel<S: Scalar>(
    a: &[S],
    a_trans: bool,
    b: &[S],
    b_trans: bool,
    out: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    // Sizes here are attention-sized (a handful of tokens); a plain loop
    // beats GEMM packing overhead.
    for bi in 0..batch {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = if a_trans { ab[p * m + i] } else { ab[i * k + p] };
                if av == S::zero() {
                    continue;
                }
                let orow = &mut ob[i * n..(i + 1) * n];
                if b_trans {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = *o + av * bb[j * k + p];
                    }
                } else {
                    let brow = &bb[p * n..(p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * *bv;
                    }
                }
            }
        }
    }
}

pub(crate) fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let three = S::lit(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * k * x * x);
    (y, dy)
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        use Op::*;
        match self {
            MatMul { a, b, .. } | Bmm { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => {
                vec![a, b]
            }
            AddSuffix { a, b } | MulSuffix { a, b } => vec![a, b],
            ScaleRows { a, w, .. } => vec![a, w],
            Concat { parts, .. } => parts.iter().collect(),
            Scale { a, .. }
            | MulConst { a, .. }
            | Softmax { a, .. }
            | LayerNorm { a, .. }
            | Gelu { a }
            | XLogX { a }
            | Sum { a, .. }
            | SumAxis { a, .. }
            | Reshape { a }
            | TransposeLast2 { a, .. }
            | Narrow { a, .. }
            | Expand { a, .. }
            | IndexSelect0 { a, .. }
            | ScatterRows0 { a, .. }
            | NormalizeRows { a, .. } => vec![a],
        }
    }

    /// Gradients w.r.t. each parent given the output gradient `g`.
    pub(crate) fn backward(&self, out: &Tensor<S>, g: &[S]) -> Result<Vec<(Tensor<S>, Vec<S>)>> {
        use Op::*;
        let grads = match self {
            MatMul { a, b, rows, k, n } => {
                let mut ga = Vec::new();
                if a.requires_grad() {
                    ga = vec![S::zero(); rows * k];
                    S::gemm(*rows, *n, *k, S::one(), g, false, &b.data(), true, S::zero(), &mut ga);
                }
                let mut gb = Vec::new();
                if b.requires_grad() {
                    gb = vec![S::zero(); k * n];
                    S::gemm(*k, *rows, *n, S::one(), &a.data(), true, g, false, S::zero(), &mut gb);
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Bmm { a, b, batch, m, k, n } => {
                let mut ga = vec![S::zero(); batch * m * k];
                let mut gb = vec![S::zero(); batch * k * n];
                if a.requires_grad() {
                    bmm_kernel(g, false, &b.data(), true, &mut ga, *batch, *m, *n, *k);
                }
                if b.requires_grad() {
                    bmm_kernel(&a.data(), true, g, false, &mut gb, *batch, *k, *m, *n);
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Add { a, b } => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Sub { a, b } => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -*v).collect())],
            Mul { a, b } => {
                let ad = a.data();
                let bd = b.data();
                let ga = g.iter().zip(bd.iter()).map(|(g, b)| *g * *b).collect();
                let gb = g.iter().zip(ad.iter()).map(|(g, a)| *g * *a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            AddSuffix { a, b } => {
                let bn = b.numel();
                let mut gb = vec![S::zero(); bn];
                for chunk in g.chunks(bn) {
                    add_into(&mut gb, chunk);
                }
                vec![(a.clone(), g.to_vec()), (b.clone(), gb)]
            }
            MulSuffix { a, b } => {
                let bn = b.numel();
                let ad = a.data();
                let bd = b.data();
                let mut ga = vec![S::zero(); g.len()];
                let mut gb = vec![S::zero(); bn];
                for (i, (gv, av)) in g.iter().zip(ad.iter()).enumerate() {
                    ga[i] = *gv * bd[i % bn];
                    gb[i % bn] = gb[i % bn] + *gv * *av;
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Scale { a, factor } => vec![(a.clone(), g.iter().map(|v| *v * *factor).collect())],
            MulConst { a, mask } => vec![(a.clone(), g.iter().zip(mask).map(|(g, m)| *g * *m).collect())],
            Softmax { a, cols } => {
                let y = out.data();
                let mut ga = vec![S::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(*cols).zip(y.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                    let dot: S = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *yv * (*gv - dot);
                    }
                }
                vec![(a.clone(), ga)]
            }
            LayerNorm { a, cols, xhat, inv_std } => {
                let n = S::from_usize_lossy(*cols);
                let mut ga = vec![S::zero(); g.len()];
                for (r, ((gr, xr), dr)) in g.chunks(*cols).zip(xhat.chunks(*cols)).zip(ga.chunks_mut(*cols)).enumerate() {
                    let sg: S = gr.iter().copied().sum();
                    let sgx: S = gr.iter().zip(xr).map(|(g, x)| *g * *x).sum();
                    let k = inv_std[r] / n;
                    for ((d, gv), xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *d = k * (n * *gv - sg - *xv * sgx);
                    }
                }
                vec![(a.clone(), ga)]
            }
            Gelu { a } => {
                let ad = a.data();
                let ga = g.iter().zip(ad.iter()).map(|(g, x)| *g * gelu_parts(*x).1).collect();
                vec![(a.clone(), ga)]
            }
            XLogX { a } => {
                let ad = a.data();
                let ga = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x > S::zero() { *g * (x.ln() + S::one()) } else { S::zero() })
                    .collect();
                vec![(a.clone(), ga)]
            }
            Sum { a, scale } => vec![(a.clone(), vec![g[0] * *scale; a.numel()])],
            SumAxis {
                a,
                outer,
                dim,
                inner,
                scale,
            } => {
                let mut ga = vec![S::zero(); a.numel()];
                for o in 0..*outer {
                    for d in 0..*dim {
                        for i in 0..*inner {
                            ga[(o * dim + d) * inner + i] = g[o * inner + i] * *scale;
                        }
                    }
                }
                vec![(a.clone(), ga)]
            }
            Reshape { a } => vec![(a.clone(), g.to_vec())],
            TransposeLast2 { a, batch, rows, cols } => {
                // out is (batch, cols, rows)
                let mut ga = vec![S::zero(); g.len()];
                for b in 0..*batch {
                    let base = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[base + r * cols + c] = g[base + c * rows + r];
                        }
                    }
                }
                vec![(a.clone(), ga)]
            }
            Narrow {
                a,
                outer,
                dim,
                inner,
                start,
                len,
            } => {
                let mut ga = vec![S::zero(); a.numel()];
                for o in 0..*outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * dim + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(src);
                }
                vec![(a.clone(), ga)]
            }
            Concat { parts, outer, dims, inner } => {
                let total: usize = dims.iter().sum();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for (p, d) in parts.iter().zip(dims) {
                    let mut gp = vec![S::zero(); outer * d * inner];
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        gp[o * d * inner..(o + 1) * d * inner].copy_from_slice(&g[src..src + d * inner]);
                    }
                    offset += d;
                    res.push((p.clone(), gp));
                }
                res
            }
            Expand { a, outer, count, inner } => {
                let mut ga = vec![S::zero(); outer * inner];
                for o in 0..*outer {
                    for c in 0..*count {
                        let src = (o * count + c) * inner;
                        add_into(&mut ga[o * inner..(o + 1) * inner], &g[src..src + inner]);
                    }
                }
                vec![(a.clone(), ga)]
            }
            IndexSelect0 { a, idx, row } => {
                let mut ga = vec![S::zero(); a.numel()];
                for (i, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * row..(src + 1) * row], &g[i * row..(i + 1) * row]);
                }
                vec![(a.clone(), ga)]
            }
            ScatterRows0 { a, idx, row } => {
                let mut ga = vec![S::zero(); a.numel()];
                for (i, &dst) in idx.iter().enumerate() {
                    ga[i * row..(i + 1) * row].copy_from_slice(&g[dst * row..(dst + 1) * row]);
                }
                vec![(a.clone(), ga)]
            }
            ScaleRows { a, w, row } => {
                let ad = a.data();
                let wd = w.data();
                let mut ga = vec![S::zero(); g.len()];
                let mut gw = vec![S::zero(); wd.len()];
                for (r, wv) in wd.iter().enumerate() {
                    let span = r * row..(r + 1) * row;
                    for ((d, gv), av) in ga[span.clone()].iter_mut().zip(&g[span.clone()]).zip(&ad[span]) {
                        *d = *gv * *wv;
                        gw[r] = gw[r] + *gv * *av;
                    }
                }
                vec![(a.clone(), ga), (w.clone(), gw)]
            }
            NormalizeRows { a, cols } => {
                let ad = a.data();
                let y = out.data();
                let mut ga = vec![S::zero(); g.len()];
                for ((xr, (gr, yr)), dr) in ad.chunks(*cols).zip(g.chunks(*cols).zip(y.chunks(*cols))).zip(ga.chunks_mut(*cols)) {
                    let s: S = xr.iter().copied().sum();
                    let dot: S = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                    for (d, gv) in dr.iter_mut().zip(gr) {
                        *d = (*gv - dot) / s;
                    }
                }
                vec![(a.clone(), ga)]
            }
        };
        Ok(grads)
    }
}
