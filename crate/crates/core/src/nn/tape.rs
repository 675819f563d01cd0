//! Define-by-run reverse-mode autodiff over small C×H×W tensors.
//!
//! Each op executes eagerly when recorded, storing its output value on the
//! tape. `backward` walks the nodes in reverse, accumulating adjoints into
//! parent nodes and parameter gradients into a flat buffer that mirrors the
//! `ModelParams` layout. Parameters are read straight from the borrowed
//! parameter slice; they are not tape nodes.

use crate::bernoulli::LOG_CLAMP;
use crate::nn::params::Seg;
use crate::nn::tensor::Tensor;

pub type NodeId = usize;

enum Op {
    Input,
    Conv3x3 { x: NodeId, w: Seg, b: Seg },
    Conv1x1 { x: NodeId, w: Seg, b: Seg },
    BilinearUp2 { x: NodeId },
    AvgPool2 { x: NodeId },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    ConcatC { a: NodeId, b: NodeId },
    TimeBias { x: NodeId, w: Seg, b: Seg, emb: Vec<f64> },
    TimeScale { x: NodeId, w: Seg, b: Seg, emb: Vec<f64> },
    SelfAttention { x: NodeId, wq: Seg, wk: Seg, wv: Seg, wo: Seg },
    CrossAttention { x: NodeId, ctx: NodeId, wq: Seg, wk: Seg, wv: Seg, wo: Seg },
    Lincomb { terms: Vec<(NodeId, f64)> },
    MseMean { pred: NodeId, target: Vec<f64> },
    BceMean { prob: NodeId, target: Vec<f64> },
    BernKlMean { prob: NodeId },
    GaussKlMean { mu: NodeId },
    ScalarSum { terms: Vec<(NodeId, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape { params, nodes: Vec::with_capacity(128) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    fn seg(&self, s: Seg) -> &[f64] {
        &self.params[s.off..s.off + s.len]
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// 3×3 convolution, stride 1, zero padding 1; preserves spatial size.
    pub fn conv3x3(&mut self, x: NodeId, w: Seg, b: Seg, c_out: usize) -> NodeId {
        let (c_in, h, wd) = self.nodes[x].value.shape();
        assert_eq!(w.len, c_out * c_in * 9, "conv3x3 weight size mismatch");
        assert_eq!(b.len, c_out, "conv3x3 bias size mismatch");
        let mut out = Tensor::zeros(c_out, h, wd);
        conv3x3_forward(
            &self.nodes[x].value,
            self.seg(w),
            self.seg(b),
            &mut out,
        );
        self.push(out, Op::Conv3x3 { x, w, b })
    }

    /// 1×1 convolution (per-pixel channel mixing).
    pub fn conv1x1(&mut self, x: NodeId, w: Seg, b: Seg, c_out: usize) -> NodeId {
        let (c_in, h, wd) = self.nodes[x].value.shape();
        assert_eq!(w.len, c_out * c_in, "conv1x1 weight size mismatch");
        assert_eq!(b.len, c_out, "conv1x1 bias size mismatch");
        let n = h * wd;
        let mut out = Tensor::zeros(c_out, h, wd);
        let xs = &self.nodes[x].value;
        let wv = self.seg(w);
        let bv = self.seg(b);
        for co in 0..c_out {
            let plane = out.plane_mut(co);
            plane.fill(bv[co]);
            for ci in 0..c_in {
                let coeff = wv[co * c_in + ci];
                let src = xs.plane(ci);
                for i in 0..n {
                    plane[i] += coeff * src[i];
                }
            }
        }
        self.push(out, Op::Conv1x1 { x, w, b })
    }

    /// Bilinear ×2 upsample with half-pixel centers, edge-clamped.
    pub fn bilinear_up2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[x].value.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let ytab = up2_axis_table(h);
        let xtab = up2_axis_table(w);
        let mut out = Tensor::zeros(c, oh, ow);
        for ch in 0..c {
            let src = self.nodes[x].value.plane(ch);
            let dst = out.plane_mut(ch);
            for oy in 0..oh {
                let (y0, y1, wy) = ytab[oy];
                for ox in 0..ow {
                    let (x0, x1, wx) = xtab[ox];
                    let v = (1.0 - wy) * ((1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1])
                        + wy * ((1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                    dst[oy * ow + ox] = v;
                }
            }
        }
        self.push(out, Op::BilinearUp2 { x })
    }

    /// 2×2 mean pooling; spatial dims must be even.
    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.nodes[x].value.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(c, oh, ow);
        for ch in 0..c {
            let src = self.nodes[x].value.plane(ch);
            let dst = out.plane_mut(ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        self.push(out, Op::AvgPool2 { x })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[x].value, |v| v * sigma(v));
        self.push(value, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[x].value, sigma);
        self.push(value, Op::Sigmoid { x })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "elementwise mul shape mismatch"
        );
        let value = Tensor {
            c: self.nodes[a].value.c,
            h: self.nodes[a].value.h,
            w: self.nodes[a].value.w,
            data: self.nodes[a]
                .value
                .data
                .iter()
                .zip(&self.nodes[b].value.data)
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        self.push(value, Op::Mul { a, b })
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, ha, wa) = self.nodes[a].value.shape();
        let (cb, hb, wb) = self.nodes[b].value.shape();
        assert_eq!((ha, wa), (hb, wb), "channel concat needs equal spatial dims");
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(&self.nodes[a].value.data);
        data.extend_from_slice(&self.nodes[b].value.data);
        let value = Tensor { c: ca + cb, h: ha, w: wa, data };
        self.push(value, Op::ConcatC { a, b })
    }

    /// Adds a learned per-channel bias computed from the time embedding:
    /// y[c] = x[c] + (W·emb + b)[c].
    pub fn time_bias(&mut self, x: NodeId, w: Seg, b: Seg, emb: &[f64]) -> NodeId {
        let (c, h, wd) = self.nodes[x].value.shape();
        assert_eq!(w.len, c * emb.len(), "time bias weight size mismatch");
        assert_eq!(b.len, c, "time bias size mismatch");
        let wv = self.seg(w);
        let bv = self.seg(b);
        let mut value = self.nodes[x].value.clone();
        for ch in 0..c {
            let mut bias = bv[ch];
            for (k, &e) in emb.iter().enumerate() {
                bias += wv[ch * emb.len() + k] * e;
            }
            for v in value.plane_mut(ch) {
                *v += bias;
            }
        }
        let _ = (h, wd);
        self.push(value, Op::TimeBias { x, w, b, emb: emb.to_vec() })
    }

    /// Scales the whole tensor by a learned scalar function of the time
    /// embedding: y = (w·emb + b)·x.
    pub fn time_scale(&mut self, x: NodeId, w: Seg, b: Seg, emb: &[f64]) -> NodeId {
        assert_eq!(w.len, emb.len(), "time scale weight size mismatch");
        assert_eq!(b.len, 1, "time scale bias must be scalar");
        let wv = self.seg(w);
        let mut s = self.seg(b)[0];
        for (k, &e) in emb.iter().enumerate() {
            s += wv[k] * e;
        }
        let src = &self.nodes[x].value;
        let value = Tensor {
            c: src.c,
            h: src.h,
            w: src.w,
            data: src.data.iter().map(|&v| s * v).collect(),
        };
        self.push(value, Op::TimeScale { x, w, b, emb: emb.to_vec() })
    }

    /// Single-head self-attention over all spatial positions with a
    /// residual connection: y = x + Wo·softmax(QᵀK/√C)·V.
    pub fn self_attention(&mut self, x: NodeId, wq: Seg, wk: Seg, wv: Seg, wo: Seg) -> NodeId {
        let (c, h, wd) = self.nodes[x].value.shape();
        for s in [wq, wk, wv, wo] {
            assert_eq!(s.len, c * c, "attention weight size mismatch");
        }
        let att = attention_forward(
            &self.nodes[x].value,
            &self.nodes[x].value,
            self.seg(wq),
            self.seg(wk),
            self.seg(wv),
            self.seg(wo),
        );
        let mut value = self.nodes[x].value.clone();
        for (v, o) in value.data.iter_mut().zip(&att.data) {
            *v += o;
        }
        let _ = (h, wd);
        self.push(value, Op::SelfAttention { x, wq, wk, wv, wo })
    }

    /// Single-head cross-attention: queries from `x`, keys/values from
    /// `ctx`, residual on `x`. Spatial sizes must match.
    pub fn cross_attention(
        &mut self,
        x: NodeId,
        ctx: NodeId,
        wq: Seg,
        wk: Seg,
        wv: Seg,
        wo: Seg,
    ) -> NodeId {
        let (c, h, wd) = self.nodes[x].value.shape();
        let (cc, hc, wc) = self.nodes[ctx].value.shape();
        assert_eq!((h, wd), (hc, wc), "cross-attention spatial mismatch");
        assert_eq!(wq.len, c * c);
        assert_eq!(wk.len, c * cc);
        assert_eq!(wv.len, c * cc);
        assert_eq!(wo.len, c * c);
        let att = attention_forward(
            &self.nodes[x].value,
            &self.nodes[ctx].value,
            self.seg(wq),
            self.seg(wk),
            self.seg(wv),
            self.seg(wo),
        );
        let mut value = self.nodes[x].value.clone();
        for (v, o) in value.data.iter_mut().zip(&att.data) {
            *v += o;
        }
        self.push(value, Op::CrossAttention { x, ctx, wq, wk, wv, wo })
    }

    /// Elementwise linear combination of same-shape nodes.
    pub fn lincomb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        assert!(!terms.is_empty());
        let shape = self.nodes[terms[0].0].value.shape();
        let mut value = Tensor::zeros(shape.0, shape.1, shape.2);
        for &(id, coeff) in &terms {
            assert_eq!(self.nodes[id].value.shape(), shape, "lincomb shape mismatch");
            for (v, &s) in value.data.iter_mut().zip(&self.nodes[id].value.data) {
                *v += coeff * s;
            }
        }
        self.push(value, Op::Lincomb { terms })
    }

    /// Scalar node: mean squared error against a fixed target.
    pub fn mse_mean(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        assert_eq!(self.nodes[pred].value.shape(), target.shape());
        let n = target.data.len() as f64;
        let v = self.nodes[pred]
            .value
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(v), Op::MseMean { pred, target: target.data.clone() })
    }

    /// Scalar node: clamped binary cross entropy against a fixed target.
    pub fn bce_mean(&mut self, prob: NodeId, target: &Tensor) -> NodeId {
        assert_eq!(self.nodes[prob].value.shape(), target.shape());
        let n = target.data.len() as f64;
        let v = self.nodes[prob]
            .value
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &y)| {
                let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(v), Op::BceMean { prob, target: target.data.clone() })
    }

    /// Scalar node: mean Bernoulli KL to the fair coin.
    pub fn bern_kl_mean(&mut self, prob: NodeId) -> NodeId {
        let term = |q: f64| if q == 0.0 { 0.0 } else { q * (2.0 * q).ln() };
        let n = self.nodes[prob].value.data.len() as f64;
        let v = self.nodes[prob]
            .value
            .data
            .iter()
            .map(|&p| term(p) + term(1.0 - p))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(v), Op::BernKlMean { prob })
    }

    /// Scalar node: mean Gaussian KL to the standard normal with a fixed
    /// scalar variance: ½(σ²−1−ln σ²) + ½·mean(μ²).
    pub fn gauss_kl_mean(&mut self, mu: NodeId, sigma2: f64) -> NodeId {
        assert!(sigma2 > 0.0, "gauss_kl_mean needs positive variance");
        let n = self.nodes[mu].value.data.len() as f64;
        let mean_sq = self.nodes[mu].value.data.iter().map(|&m| m * m).sum::<f64>() / n;
        let v = 0.5 * (sigma2 - 1.0 - sigma2.ln()) + 0.5 * mean_sq;
        self.push(Tensor::scalar(v), Op::GaussKlMean { mu })
    }

    /// Weighted sum of scalar nodes.
    pub fn scalar_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v = terms
            .iter()
            .map(|&(id, coeff)| coeff * self.nodes[id].value.scalar_value())
            .sum::<f64>();
        self.push(Tensor::scalar(v), Op::ScalarSum { terms })
    }

    /// Reverse pass from a scalar root seeded with adjoint 1.
    pub fn backward(&self, root: NodeId, grads: &mut [f64]) {
        assert_eq!(self.nodes[root].value.data.len(), 1, "backward root must be scalar");
        self.backward_seeded(&[(root, Tensor::scalar(1.0))], grads);
    }

    /// Reverse pass from explicitly seeded adjoints. Gradients accumulate
    /// into `grads`, which must match the parameter vector length.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length mismatch");
        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            assert_eq!(seed.shape(), self.nodes[*id].value.shape(), "seed shape mismatch");
            accumulate(&mut adjoints[*id], seed);
        }
        for id in (0..self.nodes.len()).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            self.backprop_node(id, &adj, &mut adjoints, grads);
        }
    }

    fn backprop_node(
        &self,
        id: NodeId,
        adj: &Tensor,
        adjoints: &mut [Option<Tensor>],
        grads: &mut [f64],
    ) {
        match &self.nodes[id].op {
            Op::Input => {}
            Op::Conv3x3 { x, w, b } => {
                let mut dx = Tensor::zeros(
                    self.nodes[*x].value.c,
                    self.nodes[*x].value.h,
                    self.nodes[*x].value.w,
                );
                conv3x3_backward(&self.nodes[*x].value, self.seg(*w), adj, &mut dx, grads, *w, *b);
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = &self.nodes[*x].value;
                let (c_in, h, wd) = xs.shape();
                let c_out = adj.c;
                let n = h * wd;
                let wv = self.seg(*w);
                let mut dx = Tensor::zeros(c_in, h, wd);
                for co in 0..c_out {
                    let da = adj.plane(co);
                    grads[b.off + co] += da.iter().sum::<f64>();
                    for ci in 0..c_in {
                        let src = xs.plane(ci);
                        let mut dw = 0.0;
                        let coeff = wv[co * c_in + ci];
                        let dst = dx.plane_mut(ci);
                        for i in 0..n {
                            dw += da[i] * src[i];
                            dst[i] += coeff * da[i];
                        }
                        grads[w.off + co * c_in + ci] += dw;
                    }
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::BilinearUp2 { x } => {
                let (c, h, w) = self.nodes[*x].value.shape();
                let ytab = up2_axis_table(h);
                let xtab = up2_axis_table(w);
                let mut dx = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    let da = adj.plane(ch);
                    let dst = dx.plane_mut(ch);
                    for oy in 0..2 * h {
                        let (y0, y1, wy) = ytab[oy];
                        for ox in 0..2 * w {
                            let (x0, x1, wx) = xtab[ox];
                            let g = da[oy * 2 * w + ox];
                            dst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                            dst[y0 * w + x1] += (1.0 - wy) * wx * g;
                            dst[y1 * w + x0] += wy * (1.0 - wx) * g;
                            dst[y1 * w + x1] += wy * wx * g;
                        }
                    }
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = self.nodes[*x].value.shape();
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    let da = adj.plane(ch);
                    let dst = dx.plane_mut(ch);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = 0.25 * da[oy * ow + ox];
                            let i = 2 * oy * w + 2 * ox;
                            dst[i] += g;
                            dst[i + 1] += g;
                            dst[i + w] += g;
                            dst[i + w + 1] += g;
                        }
                    }
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::Silu { x } => {
                let src = &self.nodes[*x].value;
                let mut dx = Tensor::zeros(src.c, src.h, src.w);
                for i in 0..src.data.len() {
                    let s = sigma(src.data[i]);
                    dx.data[i] = adj.data[i] * (s + src.data[i] * s * (1.0 - s));
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[id].value;
                let mut dx = Tensor::zeros(out.c, out.h, out.w);
                for i in 0..out.data.len() {
                    dx.data[i] = adj.data[i] * out.data[i] * (1.0 - out.data[i]);
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::Mul { a, b } => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let mut da = Tensor::zeros(va.c, va.h, va.w);
                let mut db = Tensor::zeros(vb.c, vb.h, vb.w);
                for i in 0..va.data.len() {
                    da.data[i] = adj.data[i] * vb.data[i];
                    db.data[i] = adj.data[i] * va.data[i];
                }
                accumulate(&mut adjoints[*a], &da);
                accumulate(&mut adjoints[*b], &db);
            }
            Op::ConcatC { a, b } => {
                let ca = self.nodes[*a].value.c;
                let split = ca * adj.h * adj.w;
                let da = Tensor {
                    c: ca,
                    h: adj.h,
                    w: adj.w,
                    data: adj.data[..split].to_vec(),
                };
                let db = Tensor {
                    c: adj.c - ca,
                    h: adj.h,
                    w: adj.w,
                    data: adj.data[split..].to_vec(),
                };
                accumulate(&mut adjoints[*a], &da);
                accumulate(&mut adjoints[*b], &db);
            }
            Op::TimeBias { x, w, b, emb } => {
                let c = adj.c;
                for ch in 0..c {
                    let channel_sum: f64 = adj.plane(ch).iter().sum();
                    grads[b.off + ch] += channel_sum;
                    for (k, &e) in emb.iter().enumerate() {
                        grads[w.off + ch * emb.len() + k] += channel_sum * e;
                    }
                }
                accumulate(&mut adjoints[*x], adj);
            }
            Op::TimeScale { x, w, b, emb } => {
                let src = &self.nodes[*x].value;
                let wv = self.seg(*w);
                let mut s = self.seg(*b)[0];
                for (k, &e) in emb.iter().enumerate() {
                    s += wv[k] * e;
                }
                let dot: f64 = adj.data.iter().zip(&src.data).map(|(&a, &v)| a * v).sum();
                grads[b.off] += dot;
                for (k, &e) in emb.iter().enumerate() {
                    grads[w.off + k] += dot * e;
                }
                let mut dx = Tensor::zeros(src.c, src.h, src.w);
                for i in 0..src.data.len() {
                    dx.data[i] = s * adj.data[i];
                }
                accumulate(&mut adjoints[*x], &dx);
            }
            Op::SelfAttention { x, wq, wk, wv, wo } => {
                let (dx, dctx) = attention_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*x].value,
                    self.seg(*wq),
                    self.seg(*wk),
                    self.seg(*wv),
                    self.seg(*wo),
                    adj,
                    grads,
                    *wq,
                    *wk,
                    *wv,
                    *wo,
                );
                // residual plus query path plus key/value path (same input)
                let mut total = adj.clone();
                for i in 0..total.data.len() {
                    total.data[i] += dx.data[i] + dctx.data[i];
                }
                accumulate(&mut adjoints[*x], &total);
            }
            Op::CrossAttention { x, ctx, wq, wk, wv, wo } => {
                let (dx, dctx) = attention_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*ctx].value,
                    self.seg(*wq),
                    self.seg(*wk),
                    self.seg(*wv),
                    self.seg(*wo),
                    adj,
                    grads,
                    *wq,
                    *wk,
                    *wv,
                    *wo,
                );
                let mut total = adj.clone();
                for i in 0..total.data.len() {
                    total.data[i] += dx.data[i];
                }
                accumulate(&mut adjoints[*x], &total);
                accumulate(&mut adjoints[*ctx], &dctx);
            }
            Op::Lincomb { terms } => {
                for &(tid, coeff) in terms {
                    let scaled = Tensor {
                        c: adj.c,
                        h: adj.h,
                        w: adj.w,
                        data: adj.data.iter().map(|&v| coeff * v).collect(),
                    };
                    accumulate(&mut adjoints[tid], &scaled);
                }
            }
            Op::MseMean { pred, target } => {
                let g = adj.scalar_value();
                let p = &self.nodes[*pred].value;
                let n = target.len() as f64;
                let mut dp = Tensor::zeros(p.c, p.h, p.w);
                for i in 0..target.len() {
                    dp.data[i] = g * 2.0 * (p.data[i] - target[i]) / n;
                }
                accumulate(&mut adjoints[*pred], &dp);
            }
            Op::BceMean { prob, target } => {
                let g = adj.scalar_value();
                let p = &self.nodes[*prob].value;
                let n = target.len() as f64;
                let mut dp = Tensor::zeros(p.c, p.h, p.w);
                for i in 0..target.len() {
                    let pv = p.data[i];
                    // gradient vanishes on the clamped plateaus
                    if pv > LOG_CLAMP && pv < 1.0 - LOG_CLAMP {
                        dp.data[i] = g * (pv - target[i]) / (pv * (1.0 - pv)) / n;
                    }
                }
                accumulate(&mut adjoints[*prob], &dp);
            }
            Op::BernKlMean { prob } => {
                let g = adj.scalar_value();
                let p = &self.nodes[*prob].value;
                let n = p.data.len() as f64;
                let mut dp = Tensor::zeros(p.c, p.h, p.w);
                for i in 0..p.data.len() {
                    let pv = p.data[i].clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                    dp.data[i] = g * (pv / (1.0 - pv)).ln() / n;
                }
                accumulate(&mut adjoints[*prob], &dp);
            }
            Op::GaussKlMean { mu } => {
                let g = adj.scalar_value();
                let m = &self.nodes[*mu].value;
                let n = m.data.len() as f64;
                let mut dm = Tensor::zeros(m.c, m.h, m.w);
                for i in 0..m.data.len() {
                    dm.data[i] = g * m.data[i] / n;
                }
                accumulate(&mut adjoints[*mu], &dm);
            }
            Op::ScalarSum { terms } => {
                let g = adj.scalar_value();
                for &(tid, coeff) in terms {
                    accumulate(&mut adjoints[tid], &Tensor::scalar(g * coeff));
                }
            }
        }
    }
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { c: t.c, h: t.h, w: t.w, data: t.data.iter().map(|&v| f(v)).collect() }
}

fn accumulate(slot: &mut Option<Tensor>, delta: &Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                *a += d;
            }
        }
        None => *slot = Some(delta.clone()),
    }
}

/// Per-axis interpolation table for the ×2 upsample: output index →
/// (lo index, hi index, hi weight).
fn up2_axis_table(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn conv3x3_forward(x: &Tensor, w: &[f64], b: &[f64], out: &mut Tensor) {
    let (c_in, h, wd) = x.shape();
    let c_out = out.c;
    for co in 0..c_out {
        let plane = out.plane_mut(co);
        plane.fill(b[co]);
        for ci in 0..c_in {
            let src = x.plane(ci);
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize).min(h as isize - dy) as usize;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (wd as isize).min(wd as isize - dx) as usize;
                    let coeff = w[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * wd + x_lo..y * wd + x_hi];
                        let irow = &src[sy * wd + (x_lo as isize + dx) as usize
                            ..sy * wd + (x_hi as isize + dx) as usize];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += coeff * i;
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward(
    x: &Tensor,
    w: &[f64],
    adj: &Tensor,
    dx: &mut Tensor,
    grads: &mut [f64],
    seg_w: Seg,
    seg_b: Seg,
) {
    let (c_in, h, wd) = x.shape();
    let c_out = adj.c;
    for co in 0..c_out {
        let da = adj.plane(co);
        grads[seg_b.off + co] += da.iter().sum::<f64>();
        for ci in 0..c_in {
            let src = x.plane(ci);
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize).min(h as isize - dy) as usize;
                for kx in 0..3usize {
                    let dx_off = kx as isize - 1;
                    let x_lo = (-dx_off).max(0) as usize;
                    let x_hi = (wd as isize).min(wd as isize - dx_off) as usize;
                    let coeff = w[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    let mut wgrad = 0.0;
                    let dplane = dx.plane_mut(ci);
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let arow = &da[y * wd + x_lo..y * wd + x_hi];
                        let s0 = sy * wd + (x_lo as isize + dx_off) as usize;
                        let s1 = sy * wd + (x_hi as isize + dx_off) as usize;
                        let irow = &src[s0..s1];
                        let drow = &mut dplane[s0..s1];
                        for ((&a, &i), d) in arow.iter().zip(irow).zip(drow.iter_mut()) {
                            wgrad += a * i;
                            *d += coeff * a;
                        }
                    }
                    grads[seg_w.off + ((co * c_in + ci) * 3 + ky) * 3 + kx] += wgrad;
                }
            }
        }
    }
}

/// Shared single-head attention forward. Queries come from `x`, keys and
/// values from `ctx`; returns Wo·softmax(QᵀK/√C)·V without the residual.
fn attention_forward(
    x: &Tensor,
    ctx: &Tensor,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
) -> Tensor {
    let (c, h, w) = x.shape();
    let cc = ctx.c;
    let n = h * w;
    let q = project(wq, x, c, c, n);
    let k = project(wk, ctx, c, cc, n);
    let v = project(wv, ctx, c, cc, n);
    let a = softmax_scores(&q, &k, c, n);
    // ctx_vec[ch][i] = sum_j a[i][j] v[ch][j]
    let mut ctx_vec = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * v[ch * n + j];
            }
            ctx_vec[ch * n + i] = acc;
        }
    }
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let plane = out.plane_mut(ch);
        for cd in 0..c {
            let coeff = wo[ch * c + cd];
            for i in 0..n {
                plane[i] += coeff * ctx_vec[cd * n + i];
            }
        }
    }
    out
}

fn project(w: &[f64], x: &Tensor, c_out: usize, c_in: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * n];
    for co in 0..c_out {
        for ci in 0..c_in {
            let coeff = w[co * c_in + ci];
            let src = x.plane(ci);
            for i in 0..n {
                out[co * n + i] += coeff * src[i];
            }
        }
    }
    out
}

fn softmax_scores(q: &[f64], k: &[f64], c: usize, n: usize) -> Vec<f64> {
    let scale = 1.0 / (c as f64).sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut a[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let mut s = 0.0;
            for ch in 0..c {
                s += q[ch * n + i] * k[ch * n + j];
            }
            row[j] = s * scale;
            max = max.max(row[j]);
        }
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        for r in row.iter_mut() {
            *r /= sum;
        }
    }
    a
}

/// Backward for the shared attention block. Recomputes the forward
/// intermediates from the stored inputs, accumulates weight gradients, and
/// returns (d_x via queries, d_ctx via keys and values), residual excluded.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    x: &Tensor,
    ctx: &Tensor,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    adj: &Tensor,
    grads: &mut [f64],
    seg_q: Seg,
    seg_k: Seg,
    seg_v: Seg,
    seg_o: Seg,
) -> (Tensor, Tensor) {
    let (c, h, w) = x.shape();
    let cc = ctx.c;
    let n = h * w;
    let scale = 1.0 / (c as f64).sqrt();
    let q = project(wq, x, c, c, n);
    let k = project(wk, ctx, c, cc, n);
    let v = project(wv, ctx, c, cc, n);
    let a = softmax_scores(&q, &k, c, n);
    let mut ctx_vec = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * v[ch * n + j];
            }
            ctx_vec[ch * n + i] = acc;
        }
    }

    // output projection
    let mut d_ctx_vec = vec![0.0; c * n];
    for ch in 0..c {
        let da = adj.plane(ch);
        for cd in 0..c {
            let mut dw = 0.0;
            let coeff = wo[ch * c + cd];
            for i in 0..n {
                dw += da[i] * ctx_vec[cd * n + i];
                d_ctx_vec[cd * n + i] += coeff * da[i];
            }
            grads[seg_o.off + ch * c + cd] += dw;
        }
    }

    // attention weights and values
    let mut d_a = vec![0.0; n * n];
    let mut d_v = vec![0.0; c * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += d_ctx_vec[ch * n + i] * v[ch * n + j];
            }
            d_a[i * n + j] = acc;
        }
    }
    for ch in 0..c {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a[i * n + j] * d_ctx_vec[ch * n + i];
            }
            d_v[ch * n + j] = acc;
        }
    }

    // softmax jacobian, rowwise
    let mut d_s = vec![0.0; n * n];
    for i in 0..n {
        let arow = &a[i * n..(i + 1) * n];
        let darow = &d_a[i * n..(i + 1) * n];
        let dot: f64 = arow.iter().zip(darow).map(|(&av, &dv)| av * dv).sum();
        for j in 0..n {
            d_s[i * n + j] = arow[j] * (darow[j] - dot);
        }
    }

    // scores → q, k
    let mut d_q = vec![0.0; c * n];
    let mut d_k = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += d_s[i * n + j] * k[ch * n + j];
            }
            d_q[ch * n + i] = acc * scale;
        }
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += d_s[i * n + j] * q[ch * n + i];
            }
            d_k[ch * n + j] = acc * scale;
        }
    }

    // projections → inputs and weights
    let mut dx = Tensor::zeros(c, h, w);
    let mut dctx = Tensor::zeros(cc, h, w);
    backprop_projection(wq, x, &d_q, c, c, n, &mut dx, &mut grads[seg_q.off..seg_q.off + seg_q.len]);
    backprop_projection(wk, ctx, &d_k, c, cc, n, &mut dctx, &mut grads[seg_k.off..seg_k.off + seg_k.len]);
    backprop_projection(wv, ctx, &d_v, c, cc, n, &mut dctx, &mut grads[seg_v.off..seg_v.off + seg_v.len]);
    (dx, dctx)
}

fn backprop_projection(
    w: &[f64],
    x: &Tensor,
    d_out: &[f64],
    c_out: usize,
    c_in: usize,
    n: usize,
    dx: &mut Tensor,
    dw: &mut [f64],
) {
    for co in 0..c_out {
        for ci in 0..c_in {
            let coeff = w[co * c_in + ci];
            let src = x.plane(ci);
            let dst = dx.plane_mut(ci);
            let mut wg = 0.0;
            for i in 0..n {
                let g = d_out[co * n + i];
                wg += g * src[i];
                dst[i] += coeff * g;
            }
            dw[co * c_in + ci] += wg;
        }
    }
}
