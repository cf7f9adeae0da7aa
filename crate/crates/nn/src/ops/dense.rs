use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::Tensor;

/// Row-wise softmax of a `batch × classes` matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = logits.clone();
    for r in 0..b {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

impl Graph {
    /// `x·wᵀ + b` with `x: batch × in`, `w: out × in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
        let dout = wv.shape()[0];
        assert_eq!(wv.shape()[1], din, "linear: input width mismatch");
        let mut out = vec![0.0; bsz * dout];
        gemm(
            MatRef::new(xv.data(), bsz, din),
            MatRef::new(wv.data(), dout, din).t(),
            &mut out,
            0.0,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        self.apply(
            &[x, w, b],
            Tensor::from_vec(&[bsz, dout], out),
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let g = MatRef::new(ctx.grad.data(), bsz, dout);
                let dx = ctx.needs[0].then(|| {
                    let mut d = vec![0.0; bsz * din];
                    gemm(g, MatRef::new(w.data(), dout, din), &mut d, 0.0);
                    Tensor::from_vec(x.shape(), d)
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![0.0; dout * din];
                    gemm(g.t(), MatRef::new(x.data(), bsz, din), &mut d, 0.0);
                    Tensor::from_vec(w.shape(), d)
                });
                let db = ctx.needs[2].then(|| {
                    let mut d = vec![0.0; dout];
                    for row in ctx.grad.data().chunks(dout) {
                        for (a, v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(&[dout], d)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Spatial mean: `b × c × h × w → b × c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let s = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().sum::<f64>() / s as f64)
            .collect();
        self.apply(
            &[x],
            Tensor::from_vec(&[b, c], data),
            Box::new(move |ctx| {
                let mut d = Vec::with_capacity(b * c * s);
                for &g in ctx.grad.data() {
                    d.extend(std::iter::repeat_n(g / s as f64, s));
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], d))]
            }),
        )
    }

    /// Concatenate two `b × c_i × h × w` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, h, w) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((ba, h, w), (bb, hb, wb), "concat_channels: shape mismatch");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(ba * (sa + sb));
        for i in 0..ba {
            data.extend_from_slice(self.value(a).sample(i));
            data.extend_from_slice(self.value(b).sample(i));
        }
        self.apply(
            &[a, b],
            Tensor::from_vec(&[ba, ca + cb, h, w], data),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut da = Vec::with_capacity(ba * sa);
                let mut db = Vec::with_capacity(ba * sb);
                for chunk in g.chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(&[ba, ca, h, w], da)),
                    ctx.needs[1].then(|| Tensor::from_vec(&[ba, cb, h, w], db)),
                ]
            }),
        )
    }

    /// Mean softmax cross-entropy of `batch × classes` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), b);
        let probs = softmax_rows(lv);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                assert!(y < k, "label {y} out of range for {k} classes");
                -probs.data()[r * k + y].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / b as f64;
        let labels = labels.to_vec();
        self.apply(
            &[logits],
            Tensor::scalar(loss),
            Box::new(move |ctx| {
                let scale = ctx.grad.item() / b as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d.data_mut()[r * k + y] -= 1.0;
                }
                d.scale_inplace(scale);
                vec![Some(d)]
            }),
        )
    }
}
