//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A `GradTape` owns every intermediate tensor of one forward pass plus the
//! list of operations that produced them. `backward` replays the list in
//! reverse, so each node is visited exactly once in reverse topological
//! order, and accumulates gradients for every parameter leaf into the
//! originating `ParamStore`. Repeated backward calls keep accumulating until
//! the store's gradients are zeroed.
//!
//! Operations that hit a non-differentiable point during the forward pass
//! (max-pool ties, ReLU at exactly zero, clamped cross-entropy inputs)
//! record a flag instead of failing; gradient-check reports surface those
//! flags so a tolerance excursion at such a point is distinguishable from a
//! broken backward rule.

use crate::error::{Error, Result};
use crate::kan;
use crate::loss;
use crate::optim::ParamStore;
use crate::spline::SplineSpec;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Contrastive-loss candidate mode: restrict positive-pair locations to
/// matching downsampled labels, or use every location literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LpclMode {
    LabelMasked,
    ViewOnly,
}

enum Node {
    Add { a: usize, b: usize, out: usize },
    Scale { a: usize, k: f64, out: usize },
    Mul { a: usize, b: usize, out: usize },
    MulBcastChannel { x: usize, alpha: usize, out: usize },
    MatMul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    AddBiasRow { x: usize, bias: usize, out: usize, n: usize },
    Relu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Sum { x: usize, out: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, out: usize, stride: usize, pad: usize },
    Conv1x1 { x: usize, w: usize, bias: Option<usize>, out: usize },
    DwConv3x3 { x: usize, w: usize, bias: Option<usize>, out: usize },
    MaxPool2x2 { x: usize, out: usize, argmax: Vec<u32> },
    BilinearUp2x { x: usize, out: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// True when the statistics were computed from this batch (and so
        /// carry gradient); false when they are frozen running buffers.
        batch_stats: bool,
    },
    LayerNormLast {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        dim: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNormChannels {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatChannels { a: usize, b: usize, out: usize },
    Tokenize { x: usize, proj: usize, out: usize },
    Detokenize { tokens: usize, proj: usize, out: usize, h: usize, w: usize },
    TokToMap { tokens: usize, out: usize, h: usize, w: usize },
    MapToTok { x: usize, out: usize },
    KanLayer { x: usize, coeff: usize, w_base: usize, w_spline: usize, out: usize, spec: SplineSpec },
    Bce { pred: usize, target: Tensor, out: usize },
    DiceLoss { pred: usize, target: Tensor, out: usize },
    JaccardLoss { pred: usize, target: Tensor, out: usize },
    Lpcl {
        features: usize,
        labels: Tensor,
        pairing: Vec<Option<usize>>,
        tau: f64,
        mode: LpclMode,
        out: usize,
    },
    WeightedSum { terms: Vec<(usize, f64)>, out: usize },
    Reshape { x: usize, out: usize },
}

#[derive(Default)]
pub struct GradTape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    param_links: Vec<(usize, String)>,
    nondiff: Vec<&'static str>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn push_val(&mut self, t: Tensor) -> usize {
        self.vals.push(t);
        self.vals.len() - 1
    }

    /// Record a constant leaf. No gradient is reported for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        Var(self.push_val(t))
    }

    /// Record a parameter leaf by snapshotting its current store value.
    /// After `backward`, the gradient accumulates into the store entry.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let id = self.push_val(value);
        self.param_links.push((id, name.to_string()));
        Ok(Var(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.vals[v.0].scalar_value()
    }

    /// Operation names that hit a non-differentiable point this forward pass.
    pub fn nondiff_sites(&self) -> &[&'static str] {
        &self.nondiff
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    // ---- elementwise and linear algebra -------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Add { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data = self.vals[a.0].data().iter().map(|x| x * k).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let out = self.push_val(t);
        self.nodes.push(Node::Scale { a: a.0, k, out });
        Var(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Mul { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    /// `x * alpha` with `x: [B,C,H,W]` and `alpha: [B,1,H,W]` broadcast over
    /// the channel axis.
    pub fn mul_bcast_channel(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let als = self.shape(alpha).to_vec();
        if xs.len() != 4 || als.len() != 4 || als[1] != 1 || xs[0] != als[0] || xs[2] != als[2] || xs[3] != als[3] {
            return Err(Error::shape(format!(
                "broadcast mul: {:?} vs {:?}",
                xs, als
            )));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.vals[x.0].data();
        let ad = self.vals[alpha.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            let arow = &ad[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for s in 0..hw {
                    out[base + s] = xd[base + s] * arow[s];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::MulBcastChannel { x: x.0, alpha: alpha.0, out });
        Ok(Var(out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {:?} @ {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.vals[a.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::MatMul { a: a.0, b: b.0, out, m, k, n });
        Ok(Var(out))
    }

    /// Add a length-`N` bias vector to every row of an `[..., N]` tensor.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Error::shape("bias add on 0-d tensor"))?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "bias {:?} does not match row width {}",
                self.shape(bias),
                n
            )));
        }
        let bd = self.vals[bias.0].data().to_vec();
        let data = self.vals[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let t = Tensor::new(xs, data)?;
        let out = self.push_val(t);
        self.nodes.push(Node::AddBiasRow { x: x.0, bias: bias.0, out, n });
        Ok(Var(out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xd = self.vals[x.0].data();
        if xd.iter().any(|v| *v == 0.0) {
            self.nondiff.push("relu");
        }
        let data = xd.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let out = self.push_val(t);
        self.nodes.push(Node::Relu { x: x.0, out });
        Var(out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.vals[x.0]
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let out = self.push_val(t);
        self.nodes.push(Node::Sigmoid { x: x.0, out });
        Var(out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.vals[x.0].sum());
        let out = self.push_val(t);
        self.nodes.push(Node::Sum { x: x.0, out });
        Var(out)
    }

    // ---- convolution family --------------------------------------------

    /// Cross-correlation with zero padding.
    /// `x: [B,C,H,W]`, `w: [O,C,kh,kw]`, optional `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d expects 4-d input and kernel"));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d: input channels {} vs kernel channels {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::shape("conv2d: bias length must equal output channels"));
            }
        }

        let xd = self.vals[x.0].data();
        let wdat = self.vals[w.0].data();
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                let obase = (bi * o + oi) * ho * wo;
                if let Some(bv) = bias {
                    let bval = self.vals[bv.0].data()[oi];
                    out[obase..obase + ho * wo].iter_mut().for_each(|v| *v = bval);
                }
                for ci in 0..c {
                    let xbase = (bi * c + ci) * h * wd;
                    let wbase = (oi * c + ci) * kh * kw;
                    for u in 0..kh {
                        for v in 0..kw {
                            let kval = wdat[wbase + u * kw + v];
                            if kval == 0.0 {
                                continue;
                            }
                            for i in 0..ho {
                                let y = (i * stride + u) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + y as usize * wd;
                                let orow = obase + i * wo;
                                for j in 0..wo {
                                    let xx = (j * stride + v) as isize - pad as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    out[orow + j] += kval * xd[xrow + xx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, o, ho, wo], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Conv2d {
            x: x.0,
            w: w.0,
            bias: bias.map(|v| v.0),
            out,
            stride,
            pad,
        });
        Ok(Var(out))
    }

    /// Pointwise convolution: `x: [B,C,H,W]`, `w: [O,C]`, optional `bias: [O]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("conv1x1: {:?} with weight {:?}", xs, ws)));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let o = ws[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::shape("conv1x1: bias length must equal output channels"));
            }
        }
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let mut out = vec![0.0; b * o * hw];
        for bi in 0..b {
            for oi in 0..o {
                let obase = (bi * o + oi) * hw;
                if let Some(bv) = bias {
                    let bval = self.vals[bv.0].data()[oi];
                    out[obase..obase + hw].iter_mut().for_each(|v| *v = bval);
                }
                for ci in 0..c {
                    let kval = wd[oi * c + ci];
                    if kval == 0.0 {
                        continue;
                    }
                    let xbase = (bi * c + ci) * hw;
                    for s in 0..hw {
                        out[obase + s] += kval * xd[xbase + s];
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, o, xs[2], xs[3]], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Conv1x1 { x: x.0, w: w.0, bias: bias.map(|v| v.0), out });
        Ok(Var(out))
    }

    /// Depth-wise 3x3 convolution, padding 1, stride 1.
    /// `x: [B,C,H,W]`, `w: [C,3,3]`, optional `bias: [C]`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws != [xs[1], 3, 3] {
            return Err(Error::shape(format!(
                "dwconv3x3: input {:?}, kernel {:?}",
                xs, ws
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [xs[1]] {
                return Err(Error::shape("dwconv3x3: bias length must equal channels"));
            }
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.vals[x.0].data();
        let kd = self.vals[w.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * wd;
                if let Some(bv) = bias {
                    let bval = self.vals[bv.0].data()[ci];
                    out[base..base + h * wd].iter_mut().for_each(|v| *v = bval);
                }
                for u in 0..3usize {
                    for v in 0..3usize {
                        let kval = kd[ci * 9 + u * 3 + v];
                        if kval == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let y = i as isize + u as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = base + y as usize * wd;
                            let orow = base + i * wd;
                            for j in 0..wd {
                                let xx = j as isize + v as isize - 1;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                out[orow + j] += kval * xd[xrow + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::DwConv3x3 { x: x.0, w: w.0, bias: bias.map(|v| v.0), out });
        Ok(Var(out))
    }

    // ---- pooling and resampling -----------------------------------------

    /// 2x2 max pooling with stride 2. Gradient routes to the first maximal
    /// element of each window in row-major order; exact ties are flagged as
    /// non-differentiable points.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2x2 expects [B,C,H,W]"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2x2 requires even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        let mut tie = false;
        for bc in 0..b * c {
            let base = bc * h * w;
            let obase = bc * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    let mut tie_here = false;
                    for du in 0..2 {
                        for dv in 0..2 {
                            let at = base + (2 * i + du) * w + 2 * j + dv;
                            let v = xd[at];
                            if v > best {
                                best = v;
                                best_at = at;
                                tie_here = false;
                            } else if v == best {
                                tie_here = true;
                            }
                        }
                    }
                    tie |= tie_here;
                    out[obase + i * wo + j] = best;
                    argmax[obase + i * wo + j] = best_at as u32;
                }
            }
        }
        if tie {
            self.nondiff.push("max_pool2x2");
        }
        let t = Tensor::new(vec![b, c, ho, wo], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::MaxPool2x2 { x: x.0, out, argmax });
        Ok(Var(out))
    }

    /// Bilinear 2x upsampling, align-corners = false.
    pub fn bilinear_up2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("bilinear_up2x expects [B,C,H,W]"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            let base = bc * h * w;
            let obase = bc * ho * wo;
            for i in 0..ho {
                let (y0, y1, dy) = up2x_coords(i, h);
                for j in 0..wo {
                    let (x0, x1, dx) = up2x_coords(j, w);
                    let v = (1.0 - dy) * (1.0 - dx) * xd[base + y0 * w + x0]
                        + (1.0 - dy) * dx * xd[base + y0 * w + x1]
                        + dy * (1.0 - dx) * xd[base + y1 * w + x0]
                        + dy * dx * xd[base + y1 * w + x1];
                    out[obase + i * wo + j] = v;
                }
            }
        }
        let t = Tensor::new(vec![b, c, ho, wo], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::BilinearUp2x { x: x.0, out });
        Ok(Var(out))
    }

    // ---- normalization ----------------------------------------------------

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// In training mode normalizes by batch statistics and returns them
    /// (mean, unbiased variance) so the caller can update running buffers.
    /// In eval mode pass the stored running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Tensor, Tensor)> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm expects [B,C,H,W]"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = b * h * w;
        if m == 0 {
            return Err(Error::invalid("batch_norm on an empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm: gamma/beta must be per-channel"));
        }
        let xd = self.vals[x.0].data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * h * w;
                acc += xd[base..base + h * w].iter().sum::<f64>();
            }
            mean[ci] = acc / m as f64;
            let mut vacc = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    let d = xd[base + s] - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    out[base + s] = gd[ci] * (xd[base + s] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out,
            mean: mean.clone(),
            inv_std,
            batch_stats: true,
        });
        // Unbiased variance for the running buffer when more than one
        // element contributes.
        let corr = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
        let var_unbiased: Vec<f64> = var.iter().map(|v| v * corr).collect();
        Ok((
            Var(out),
            Tensor::new(vec![c], mean)?,
            Tensor::new(vec![c], var_unbiased)?,
        ))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm expects [B,C,H,W]"));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if b * h * w == 0 {
            return Err(Error::invalid("batch_norm on an empty batch"));
        }
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || running_mean.shape() != [c]
            || running_var.shape() != [c]
        {
            return Err(Error::shape("batch_norm: per-channel shapes disagree"));
        }
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for s in 0..h * w {
                    out[base + s] = gd[ci] * (xd[base + s] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out,
            mean,
            inv_std,
            batch_stats: false,
        });
        Ok(Var(out))
    }

    /// Layer normalization over the last dimension of an `[..., D]` tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layer_norm on 0-d tensor"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm: normalized dimension is 0"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm: gamma/beta must match last dim"));
        }
        let rows = self.vals[x.0].numel() / d;
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            means[r] = mu;
            inv_stds[r] = inv;
            for i in 0..d {
                out[r * d + i] = gd[i] * (row[i] - mu) * inv + bd[i];
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::LayerNormLast {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out,
            dim: d,
            mean: means,
            inv_std: inv_stds,
        });
        Ok(Var(out))
    }

    /// Layer normalization across the channel axis of a `[B,C,H,W]` map:
    /// every spatial position is treated as one token of width C.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("layer_norm_channels expects [B,C,H,W]"));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if c == 0 {
            return Err(Error::shape("layer_norm_channels: channel count is 0"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm_channels: gamma/beta must be per-channel"));
        }
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        let rows = b * hw;
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for bi in 0..b {
            for s in 0..hw {
                let r = bi * hw + s;
                let mut mu = 0.0;
                for ci in 0..c {
                    mu += xd[(bi * c + ci) * hw + s];
                }
                mu /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let dv = xd[(bi * c + ci) * hw + s] - mu;
                    var += dv * dv;
                }
                var /= c as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                means[r] = mu;
                inv_stds[r] = inv;
                for ci in 0..c {
                    let at = (bi * c + ci) * hw + s;
                    out[at] = gd[ci] * (xd[at] - mu) * inv + bd[ci];
                }
            }
        }
        let t = Tensor::new(xs, out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::LayerNormChannels {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out,
            mean: means,
            inv_std: inv_stds,
        });
        Ok(Var(out))
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape(format!(
                "concat_channels: spatial/batch mismatch {:?} vs {:?}",
                sa, sb
            )));
        }
        let (bn, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let ad = self.vals[a.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; bn * (ca + cb) * hw];
        for bi in 0..bn {
            let dst = bi * (ca + cb) * hw;
            out[dst..dst + ca * hw].copy_from_slice(&ad[bi * ca * hw..(bi + 1) * ca * hw]);
            out[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&bd[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let t = Tensor::new(vec![bn, ca + cb, sa[2], sa[3]], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::ConcatChannels { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    /// Flatten each spatial position of `x: [B,C,H,W]` into a token and
    /// project channels through `proj: [C,D]`, yielding `[B, H*W, D]`.
    pub fn tokenize(&mut self, x: Var, proj: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ps = self.shape(proj).to_vec();
        if xs.len() != 4 || ps.len() != 2 || xs[1] != ps[0] {
            return Err(Error::shape(format!(
                "tokenize: input {:?} with projection {:?}",
                xs, ps
            )));
        }
        let (b, c, hw, d) = (xs[0], xs[1], xs[2] * xs[3], ps[1]);
        let xd = self.vals[x.0].data();
        let pd = self.vals[proj.0].data();
        let mut out = vec![0.0; b * hw * d];
        for bi in 0..b {
            for ci in 0..c {
                let xbase = (bi * c + ci) * hw;
                let prow = &pd[ci * d..(ci + 1) * d];
                for s in 0..hw {
                    let xv = xd[xbase + s];
                    if xv == 0.0 {
                        continue;
                    }
                    let obase = (bi * hw + s) * d;
                    for di in 0..d {
                        out[obase + di] += xv * prow[di];
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, hw, d], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Tokenize { x: x.0, proj: proj.0, out });
        Ok(Var(out))
    }

    /// Inverse of `tokenize`: `[B,T,D]` tokens through `proj: [D,C]` back to
    /// a `[B,C,H,W]` map with `T = H*W`.
    pub fn detokenize(&mut self, tokens: Var, proj: Var, h: usize, w: usize) -> Result<Var> {
        let ts = self.shape(tokens).to_vec();
        let ps = self.shape(proj).to_vec();
        if ts.len() != 3 || ps.len() != 2 || ts[2] != ps[0] || ts[1] != h * w {
            return Err(Error::shape(format!(
                "detokenize: tokens {:?} with projection {:?} for {}x{}",
                ts, ps, h, w
            )));
        }
        let (b, hw, d, c) = (ts[0], ts[1], ts[2], ps[1]);
        let td = self.vals[tokens.0].data();
        let pd = self.vals[proj.0].data();
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for s in 0..hw {
                let tbase = (bi * hw + s) * d;
                for di in 0..d {
                    let tv = td[tbase + di];
                    if tv == 0.0 {
                        continue;
                    }
                    let prow = &pd[di * c..(di + 1) * c];
                    for ci in 0..c {
                        out[(bi * c + ci) * hw + s] += tv * prow[ci];
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, c, h, w], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Detokenize { tokens: tokens.0, proj: proj.0, out, h, w });
        Ok(Var(out))
    }

    /// Permute `[B,T,D]` tokens to a `[B,D,H,W]` map (T = H*W).
    pub fn tok_to_map(&mut self, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let ts = self.shape(tokens).to_vec();
        if ts.len() != 3 || ts[1] != h * w {
            return Err(Error::shape(format!("tok_to_map: {:?} for {}x{}", ts, h, w)));
        }
        let (b, hw, d) = (ts[0], ts[1], ts[2]);
        let td = self.vals[tokens.0].data();
        let mut out = vec![0.0; td.len()];
        for bi in 0..b {
            for s in 0..hw {
                for di in 0..d {
                    out[(bi * d + di) * hw + s] = td[(bi * hw + s) * d + di];
                }
            }
        }
        let t = Tensor::new(vec![b, d, h, w], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::TokToMap { tokens: tokens.0, out, h, w });
        Ok(Var(out))
    }

    /// Permute a `[B,D,H,W]` map to `[B,T,D]` tokens.
    pub fn map_to_tok(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("map_to_tok expects [B,D,H,W]"));
        }
        let (b, d, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for di in 0..d {
                for s in 0..hw {
                    out[(bi * hw + s) * d + di] = xd[(bi * d + di) * hw + s];
                }
            }
        }
        let t = Tensor::new(vec![b, hw, d], out)?;
        let out = self.push_val(t);
        self.nodes.push(Node::MapToTok { x: x.0, out });
        Ok(Var(out))
    }

    // ---- KAN layer ---------------------------------------------------------

    /// Apply one KAN layer to the trailing axis of `x: [..., n_in]`.
    /// Every input-output edge carries `w_base * silu(t) + w_spline * spline(t)`.
    pub fn kan_layer(
        &mut self,
        x: Var,
        coeff: Var,
        w_base: Var,
        w_spline: Var,
        spec: &SplineSpec,
    ) -> Result<Var> {
        spec.validate()?;
        let xs = self.shape(x).to_vec();
        let n_in = *xs.last().ok_or_else(|| Error::shape("kan_layer on 0-d tensor"))?;
        let cs = self.shape(coeff).to_vec();
        if cs.len() != 3 || cs[0] != n_in || cs[2] != spec.basis_len() {
            return Err(Error::shape(format!(
                "kan_layer: coefficients {:?} for n_in {} and basis {}",
                cs,
                n_in,
                spec.basis_len()
            )));
        }
        let n_out = cs[1];
        if self.shape(w_base) != [n_in, n_out] || self.shape(w_spline) != [n_in, n_out] {
            return Err(Error::shape("kan_layer: weight shapes must be [n_in, n_out]"));
        }
        let out_t = kan::kan_forward(
            &self.vals[x.0],
            &self.vals[coeff.0],
            &self.vals[w_base.0],
            &self.vals[w_spline.0],
            spec,
        )?;
        let out = self.push_val(out_t);
        self.nodes.push(Node::KanLayer {
            x: x.0,
            coeff: coeff.0,
            w_base: w_base.0,
            w_spline: w_spline.0,
            out,
            spec: *spec,
        });
        Ok(Var(out))
    }

    // ---- losses -------------------------------------------------------------

    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("bce: prediction/target shapes differ"));
        }
        let (val, clamped) = loss::bce_forward(&self.vals[pred.0], target);
        if clamped {
            self.nondiff.push("bce_clamp");
        }
        let out = self.push_val(Tensor::scalar(val));
        self.nodes.push(Node::Bce { pred: pred.0, target: target.clone(), out });
        Ok(Var(out))
    }

    pub fn dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("dice_loss: prediction/target shapes differ"));
        }
        let val = loss::dice_forward(&self.vals[pred.0], target);
        let out = self.push_val(Tensor::scalar(val));
        self.nodes.push(Node::DiceLoss { pred: pred.0, target: target.clone(), out });
        Ok(Var(out))
    }

    pub fn jaccard_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("jaccard_loss: prediction/target shapes differ"));
        }
        let val = loss::jaccard_forward(&self.vals[pred.0], target);
        let out = self.push_val(Tensor::scalar(val));
        self.nodes.push(Node::JaccardLoss { pred: pred.0, target: target.clone(), out });
        Ok(Var(out))
    }

    /// Pixel-wise contrastive loss over augmented views.
    /// `features: [V,D,S,S]`, `labels: [V,S,S]` binary, `pairing[i]` = index
    /// of view i's positive partner.
    pub fn lpcl(
        &mut self,
        features: Var,
        labels: &Tensor,
        pairing: &[Option<usize>],
        tau: f64,
        mode: LpclMode,
    ) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        if fs.len() != 4 {
            return Err(Error::shape("lpcl: features must be [V,D,S,S]"));
        }
        let v = fs[0];
        if v < 2 {
            return Err(Error::invalid("lpcl needs at least two views"));
        }
        if labels.shape() != [v, fs[2], fs[3]] {
            return Err(Error::shape(format!(
                "lpcl: labels {:?} for features {:?}",
                labels.shape(),
                fs
            )));
        }
        if pairing.len() != v {
            return Err(Error::shape("lpcl: pairing length must equal view count"));
        }
        for (i, p) in pairing.iter().enumerate() {
            if let Some(j) = p {
                if *j >= v || *j == i {
                    return Err(Error::invalid(format!("lpcl: bad partner {} for view {}", j, i)));
                }
            }
        }
        if tau <= 0.0 {
            return Err(Error::invalid("lpcl: temperature must be positive"));
        }
        let val = loss::lpcl_forward(&self.vals[features.0], labels, pairing, tau, mode);
        let out = self.push_val(Tensor::scalar(val));
        self.nodes.push(Node::Lpcl {
            features: features.0,
            labels: labels.clone(),
            pairing: pairing.to_vec(),
            tau,
            mode,
            out,
        });
        Ok(Var(out))
    }

    /// View the same elements under a different shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.vals[x.0].clone().reshaped(shape)?;
        let out = self.push_val(t);
        self.nodes.push(Node::Reshape { x: x.0, out });
        Ok(Var(out))
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for (v, w) in terms {
            if !self.vals[v.0].is_scalar() {
                return Err(Error::shape("weighted_sum expects scalar terms"));
            }
            acc += w * self.vals[v.0].scalar_value();
        }
        let out = self.push_val(Tensor::scalar(acc));
        self.nodes.push(Node::WeightedSum {
            terms: terms.iter().map(|(v, w)| (v.0, *w)).collect(),
            out,
        });
        Ok(Var(out))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// `store`; call `store.zero_grads()` between steps.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        if !self.vals[loss.0].scalar_value().is_finite() {
            return Err(Error::invalid("backward on a non-finite loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            self.backward_node(node, &mut grads);
        }

        for (id, name) in &self.param_links {
            if let Some(g) = &grads[*id] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, grads: &mut [Option<Vec<f64>>]) {
        fn take(grads: &[Option<Vec<f64>>], id: usize) -> Option<Vec<f64>> {
            grads[id].clone()
        }
        fn accum(grads: &mut [Option<Vec<f64>>], id: usize, add: &[f64]) {
            match &mut grads[id] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(add) {
                        *a += b;
                    }
                }
                None => grads[id] = Some(add.to_vec()),
            }
        }

        match node {
            Node::Add { a, b, out } => {
                if let Some(d) = take(grads, *out) {
                    accum(grads, *a, &d);
                    accum(grads, *b, &d);
                }
            }
            Node::Scale { a, k, out } => {
                if let Some(d) = take(grads, *out) {
                    let da: Vec<f64> = d.iter().map(|v| v * k).collect();
                    accum(grads, *a, &da);
                }
            }
            Node::Mul { a, b, out } => {
                if let Some(d) = take(grads, *out) {
                    let bd = self.vals[*b].data();
                    let ad = self.vals[*a].data();
                    let da: Vec<f64> = d.iter().zip(bd).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = d.iter().zip(ad).map(|(x, y)| x * y).collect();
                    accum(grads, *a, &da);
                    accum(grads, *b, &db);
                }
            }
            Node::MulBcastChannel { x, alpha, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let xd = self.vals[*x].data();
                    let ad = self.vals[*alpha].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dalpha = vec![0.0; ad.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            for s in 0..hw {
                                dx[base + s] = d[base + s] * ad[bi * hw + s];
                                dalpha[bi * hw + s] += d[base + s] * xd[base + s];
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *alpha, &dalpha);
                }
            }
            Node::MatMul { a, b, out, m, k, n } => {
                if let Some(d) = take(grads, *out) {
                    let ad = self.vals[*a].data();
                    let bd = self.vals[*b].data();
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..*m {
                        for j in 0..*n {
                            let dv = d[i * n + j];
                            if dv == 0.0 {
                                continue;
                            }
                            for p in 0..*k {
                                da[i * k + p] += dv * bd[p * n + j];
                                db[p * n + j] += dv * ad[i * k + p];
                            }
                        }
                    }
                    accum(grads, *a, &da);
                    accum(grads, *b, &db);
                }
            }
            Node::AddBiasRow { x, bias, out, n } => {
                if let Some(d) = take(grads, *out) {
                    accum(grads, *x, &d);
                    let mut db = vec![0.0; *n];
                    for (i, v) in d.iter().enumerate() {
                        db[i % n] += v;
                    }
                    accum(grads, *bias, &db);
                }
            }
            Node::Relu { x, out } => {
                if let Some(d) = take(grads, *out) {
                    let xd = self.vals[*x].data();
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accum(grads, *x, &dx);
                }
            }
            Node::Sigmoid { x, out } => {
                if let Some(d) = take(grads, *out) {
                    let od = self.vals[*out].data();
                    let dx: Vec<f64> = d.iter().zip(od).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accum(grads, *x, &dx);
                }
            }
            Node::Sum { x, out } => {
                if let Some(d) = take(grads, *out) {
                    let dx = vec![d[0]; self.vals[*x].numel()];
                    accum(grads, *x, &dx);
                }
            }
            Node::Conv2d { x, w, bias, out, stride, pad } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let ws = self.vals[*w].shape();
                    let os = self.vals[*out].shape();
                    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (ho, wo) = (os[2], os[3]);
                    let xd = self.vals[*x].data();
                    let wdat = self.vals[*w].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wdat.len()];
                    for bi in 0..b {
                        for oi in 0..o {
                            let dbase = (bi * o + oi) * ho * wo;
                            for ci in 0..c {
                                let xbase = (bi * c + ci) * h * wd;
                                let wbase = (oi * c + ci) * kh * kw;
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let kval = wdat[wbase + u * kw + v];
                                        let mut kgrad = 0.0;
                                        for i in 0..ho {
                                            let y = (i * stride + u) as isize - *pad as isize;
                                            if y < 0 || y >= h as isize {
                                                continue;
                                            }
                                            let xrow = xbase + y as usize * wd;
                                            let drow = dbase + i * wo;
                                            for j in 0..wo {
                                                let xx = (j * stride + v) as isize - *pad as isize;
                                                if xx < 0 || xx >= wd as isize {
                                                    continue;
                                                }
                                                let g = d[drow + j];
                                                kgrad += g * xd[xrow + xx as usize];
                                                dx[xrow + xx as usize] += g * kval;
                                            }
                                        }
                                        dw[wbase + u * kw + v] += kgrad;
                                    }
                                }
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *w, &dw);
                    if let Some(bv) = bias {
                        let mut db = vec![0.0; o];
                        for bi in 0..b {
                            for oi in 0..o {
                                let dbase = (bi * o + oi) * ho * wo;
                                db[oi] += d[dbase..dbase + ho * wo].iter().sum::<f64>();
                            }
                        }
                        accum(grads, *bv, &db);
                    }
                }
            }
            Node::Conv1x1 { x, w, bias, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let o = self.vals[*w].shape()[0];
                    let xd = self.vals[*x].data();
                    let wd = self.vals[*w].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wd.len()];
                    for bi in 0..b {
                        for oi in 0..o {
                            let dbase = (bi * o + oi) * hw;
                            for ci in 0..c {
                                let xbase = (bi * c + ci) * hw;
                                let kval = wd[oi * c + ci];
                                let mut kgrad = 0.0;
                                for s in 0..hw {
                                    let g = d[dbase + s];
                                    kgrad += g * xd[xbase + s];
                                    dx[xbase + s] += g * kval;
                                }
                                dw[oi * c + ci] += kgrad;
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *w, &dw);
                    if let Some(bv) = bias {
                        let mut db = vec![0.0; o];
                        for bi in 0..b {
                            for oi in 0..o {
                                let dbase = (bi * o + oi) * hw;
                                db[oi] += d[dbase..dbase + hw].iter().sum::<f64>();
                            }
                        }
                        accum(grads, *bv, &db);
                    }
                }
            }
            Node::DwConv3x3 { x, w, bias, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let xd = self.vals[*x].data();
                    let kd = self.vals[*w].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    let mut db = vec![0.0; c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * wd;
                            db[ci] += d[base..base + h * wd].iter().sum::<f64>();
                            for u in 0..3usize {
                                for v in 0..3usize {
                                    let kval = kd[ci * 9 + u * 3 + v];
                                    let mut kgrad = 0.0;
                                    for i in 0..h {
                                        let y = i as isize + u as isize - 1;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let xrow = base + y as usize * wd;
                                        let drow = base + i * wd;
                                        for j in 0..wd {
                                            let xx = j as isize + v as isize - 1;
                                            if xx < 0 || xx >= wd as isize {
                                                continue;
                                            }
                                            let g = d[drow + j];
                                            kgrad += g * xd[xrow + xx as usize];
                                            dx[xrow + xx as usize] += g * kval;
                                        }
                                    }
                                    dk[ci * 9 + u * 3 + v] += kgrad;
                                }
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *w, &dk);
                    if let Some(bv) = bias {
                        accum(grads, *bv, &db);
                    }
                }
            }
            Node::MaxPool2x2 { x, out, argmax } => {
                if let Some(d) = take(grads, *out) {
                    let mut dx = vec![0.0; self.vals[*x].numel()];
                    for (i, g) in d.iter().enumerate() {
                        dx[argmax[i] as usize] += g;
                    }
                    accum(grads, *x, &dx);
                }
            }
            Node::BilinearUp2x { x, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; self.vals[*x].numel()];
                    for bc in 0..b * c {
                        let base = bc * h * w;
                        let obase = bc * ho * wo;
                        for i in 0..ho {
                            let (y0, y1, dy) = up2x_coords(i, h);
                            for j in 0..wo {
                                let (x0, x1, dxw) = up2x_coords(j, w);
                                let g = d[obase + i * wo + j];
                                dx[base + y0 * w + x0] += g * (1.0 - dy) * (1.0 - dxw);
                                dx[base + y0 * w + x1] += g * (1.0 - dy) * dxw;
                                dx[base + y1 * w + x0] += g * dy * (1.0 - dxw);
                                dx[base + y1 * w + x1] += g * dy * dxw;
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                }
            }
            Node::BatchNorm { x, gamma, beta, out, mean, inv_std, batch_stats } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let m = (b * hw) as f64;
                    let xd = self.vals[*x].data();
                    let gd = self.vals[*gamma].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ci in 0..c {
                        let mut sum_d = 0.0;
                        let mut sum_dxhat = 0.0;
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for s in 0..hw {
                                let g = d[base + s];
                                let xhat = (xd[base + s] - mean[ci]) * inv_std[ci];
                                sum_d += g;
                                sum_dxhat += g * xhat;
                            }
                        }
                        dgamma[ci] = sum_dxhat;
                        dbeta[ci] = sum_d;
                        // Frozen statistics are constants; batch statistics
                        // carry the usual centering corrections.
                        let (md, mdx) = if *batch_stats {
                            (sum_d / m, sum_dxhat / m)
                        } else {
                            (0.0, 0.0)
                        };
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for s in 0..hw {
                                let g = d[base + s];
                                let xhat = (xd[base + s] - mean[ci]) * inv_std[ci];
                                dx[base + s] = gd[ci] * inv_std[ci] * (g - md - xhat * mdx);
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *gamma, &dgamma);
                    accum(grads, *beta, &dbeta);
                }
            }
            Node::LayerNormLast { x, gamma, beta, out, dim, mean, inv_std } => {
                if let Some(d) = take(grads, *out) {
                    let dcount = *dim;
                    let rows = self.vals[*x].numel() / dcount;
                    let xd = self.vals[*x].data();
                    let gd = self.vals[*gamma].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; dcount];
                    let mut dbeta = vec![0.0; dcount];
                    for r in 0..rows {
                        let base = r * dcount;
                        let inv = inv_std[r];
                        let mu = mean[r];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..dcount {
                            let g = d[base + i] * gd[i];
                            let xhat = (xd[base + i] - mu) * inv;
                            sum_g += g;
                            sum_gx += g * xhat;
                            dgamma[i] += d[base + i] * xhat;
                            dbeta[i] += d[base + i];
                        }
                        let n = dcount as f64;
                        for i in 0..dcount {
                            let g = d[base + i] * gd[i];
                            let xhat = (xd[base + i] - mu) * inv;
                            dx[base + i] = inv * (g - sum_g / n - xhat * sum_gx / n);
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *gamma, &dgamma);
                    accum(grads, *beta, &dbeta);
                }
            }
            Node::LayerNormChannels { x, gamma, beta, out, mean, inv_std } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let xd = self.vals[*x].data();
                    let gd = self.vals[*gamma].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..b {
                        for s in 0..hw {
                            let r = bi * hw + s;
                            let inv = inv_std[r];
                            let mu = mean[r];
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for ci in 0..c {
                                let at = (bi * c + ci) * hw + s;
                                let g = d[at] * gd[ci];
                                let xhat = (xd[at] - mu) * inv;
                                sum_g += g;
                                sum_gx += g * xhat;
                                dgamma[ci] += d[at] * xhat;
                                dbeta[ci] += d[at];
                            }
                            let n = c as f64;
                            for ci in 0..c {
                                let at = (bi * c + ci) * hw + s;
                                let g = d[at] * gd[ci];
                                let xhat = (xd[at] - mu) * inv;
                                dx[at] = inv * (g - sum_g / n - xhat * sum_gx / n);
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *gamma, &dgamma);
                    accum(grads, *beta, &dbeta);
                }
            }
            Node::ConcatChannels { a, b, out } => {
                if let Some(d) = take(grads, *out) {
                    let sa = self.vals[*a].shape();
                    let sb = self.vals[*b].shape();
                    let (bn, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut da = vec![0.0; self.vals[*a].numel()];
                    let mut dbv = vec![0.0; self.vals[*b].numel()];
                    for bi in 0..bn {
                        let src = bi * (ca + cb) * hw;
                        da[bi * ca * hw..(bi + 1) * ca * hw]
                            .copy_from_slice(&d[src..src + ca * hw]);
                        dbv[bi * cb * hw..(bi + 1) * cb * hw]
                            .copy_from_slice(&d[src + ca * hw..src + (ca + cb) * hw]);
                    }
                    accum(grads, *a, &da);
                    accum(grads, *b, &dbv);
                }
            }
            Node::Tokenize { x, proj, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let dd = self.vals[*proj].shape()[1];
                    let xd = self.vals[*x].data();
                    let pd = self.vals[*proj].data();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dp = vec![0.0; pd.len()];
                    for bi in 0..b {
                        for s in 0..hw {
                            let tbase = (bi * hw + s) * dd;
                            for ci in 0..c {
                                let xv = xd[(bi * c + ci) * hw + s];
                                let prow = &pd[ci * dd..(ci + 1) * dd];
                                let mut acc = 0.0;
                                for di in 0..dd {
                                    let g = d[tbase + di];
                                    acc += g * prow[di];
                                    dp[ci * dd + di] += g * xv;
                                }
                                dx[(bi * c + ci) * hw + s] += acc;
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                    accum(grads, *proj, &dp);
                }
            }
            Node::Detokenize { tokens, proj, out, h, w } => {
                if let Some(d) = take(grads, *out) {
                    let ts = self.vals[*tokens].shape();
                    let (b, hw, dd) = (ts[0], ts[1], ts[2]);
                    debug_assert_eq!(hw, h * w);
                    let c = self.vals[*proj].shape()[1];
                    let td = self.vals[*tokens].data();
                    let pd = self.vals[*proj].data();
                    let mut dt = vec![0.0; td.len()];
                    let mut dp = vec![0.0; pd.len()];
                    for bi in 0..b {
                        for s in 0..hw {
                            let tbase = (bi * hw + s) * dd;
                            for di in 0..dd {
                                let tv = td[tbase + di];
                                let prow = &pd[di * c..(di + 1) * c];
                                let mut acc = 0.0;
                                for ci in 0..c {
                                    let g = d[(bi * c + ci) * hw + s];
                                    acc += g * prow[ci];
                                    dp[di * c + ci] += g * tv;
                                }
                                dt[tbase + di] += acc;
                            }
                        }
                    }
                    accum(grads, *tokens, &dt);
                    accum(grads, *proj, &dp);
                }
            }
            Node::TokToMap { tokens, out, h, w } => {
                if let Some(d) = take(grads, *out) {
                    let ts = self.vals[*tokens].shape();
                    let (b, hw, dd) = (ts[0], ts[1], ts[2]);
                    debug_assert_eq!(hw, h * w);
                    let mut dt = vec![0.0; self.vals[*tokens].numel()];
                    for bi in 0..b {
                        for s in 0..hw {
                            for di in 0..dd {
                                dt[(bi * hw + s) * dd + di] = d[(bi * dd + di) * hw + s];
                            }
                        }
                    }
                    accum(grads, *tokens, &dt);
                }
            }
            Node::MapToTok { x, out } => {
                if let Some(d) = take(grads, *out) {
                    let xs = self.vals[*x].shape();
                    let (b, dd, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut dx = vec![0.0; self.vals[*x].numel()];
                    for bi in 0..b {
                        for di in 0..dd {
                            for s in 0..hw {
                                dx[(bi * dd + di) * hw + s] = d[(bi * hw + s) * dd + di];
                            }
                        }
                    }
                    accum(grads, *x, &dx);
                }
            }
            Node::KanLayer { x, coeff, w_base, w_spline, out, spec } => {
                if let Some(d) = take(grads, *out) {
                    let (dx, dc, dwb, dws) = kan::kan_backward(
                        &self.vals[*x],
                        &self.vals[*coeff],
                        &self.vals[*w_base],
                        &self.vals[*w_spline],
                        spec,
                        &d,
                    );
                    accum(grads, *x, &dx);
                    accum(grads, *coeff, &dc);
                    accum(grads, *w_base, &dwb);
                    accum(grads, *w_spline, &dws);
                }
            }
            Node::Bce { pred, target, out } => {
                if let Some(d) = take(grads, *out) {
                    let dp = loss::bce_backward(&self.vals[*pred], target, d[0]);
                    accum(grads, *pred, &dp);
                }
            }
            Node::DiceLoss { pred, target, out } => {
                if let Some(d) = take(grads, *out) {
                    let dp = loss::dice_backward(&self.vals[*pred], target, d[0]);
                    accum(grads, *pred, &dp);
                }
            }
            Node::JaccardLoss { pred, target, out } => {
                if let Some(d) = take(grads, *out) {
                    let dp = loss::jaccard_backward(&self.vals[*pred], target, d[0]);
                    accum(grads, *pred, &dp);
                }
            }
            Node::Lpcl { features, labels, pairing, tau, mode, out } => {
                if let Some(d) = take(grads, *out) {
                    let df = loss::lpcl_backward(
                        &self.vals[*features],
                        labels,
                        pairing,
                        *tau,
                        *mode,
                        d[0],
                    );
                    accum(grads, *features, &df);
                }
            }
            Node::WeightedSum { terms, out } => {
                if let Some(d) = take(grads, *out) {
                    for (id, w) in terms {
                        accum(grads, *id, &[d[0] * w]);
                    }
                }
            }
            Node::Reshape { x, out } => {
                if let Some(d) = take(grads, *out) {
                    accum(grads, *x, &d);
                }
            }
        }
    }
}

/// Source sampling coordinates for 2x bilinear upsampling without corner
/// alignment: output index `i` reads between input rows `y0` and `y1` with
/// weight `dy` on `y1`.
#[inline]
fn up2x_coords(i: usize, len: usize) -> (usize, usize, f64) {
    let src = (i as f64 + 0.5) / 2.0 - 0.5;
    let floor = src.floor();
    let dy = src - floor;
    let y0 = floor.max(0.0) as usize;
    let y0 = y0.min(len - 1);
    let y1 = (y0 + 1).min(len - 1);
    if floor < 0.0 {
        (y0, y0, 0.0)
    } else {
        (y0, y1, dy)
    }
}
