use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{ParamSet, ParamView, Tensor, ViewLayout};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride-`s` convolution with "same" padding for an odd kernel `k`.
    pub fn same(k: usize, stride: usize) -> Self {
        Self::new(stride, k / 2, 1)
    }

    pub fn depthwise(k: usize, stride: usize, channels: usize) -> Self {
        Self::new(stride, k / 2, channels)
    }
}

/// Batch normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel moments observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRecord {
    pub tag: usize,
    pub count: usize,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl BnRecord {
    pub fn channels(&self) -> usize {
        self.sum.len()
    }

    pub fn mean(&self) -> Vec<f32> {
        let n = self.count as f64;
        self.sum.iter().map(|s| (s / n) as f32).collect()
    }

    /// Biased (population) variance.
    pub fn var(&self) -> Vec<f32> {
        let n = self.count as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / n;
                (q / n - m * m).max(0.0) as f32
            })
            .collect()
    }

    /// Unbiased variance, the usual choice for running estimates.
    pub fn unbiased_var(&self) -> Vec<f32> {
        let n = self.count as f64;
        let corr = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var().iter().map(|v| (*v as f64 * corr) as f32).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    HardSwish,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: ParamView,
        bias: Option<ParamView>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: ParamView,
        beta: ParamView,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: ParamView,
        bias: Option<ParamView>,
    },
    Mask {
        x: Var,
        factors: Vec<f32>,
        per: usize,
    },
    ZeroPad {
        x: Var,
        pad: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    SoftCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) params: Vec<Option<Vec<f32>>>,
    vars: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// No gradients yet for a set of `num_params` parameters.
    pub fn empty(num_params: usize) -> Self {
        Self {
            params: vec![None; num_params],
            vars: Vec::new(),
        }
    }

    pub fn set_param(&mut self, id: super::ParamId, grad: Vec<f32>) {
        self.params[id.0] = Some(grad);
    }

    /// Full-size gradient of a parameter, `None` if no op touched it.
    pub fn param(&self, id: super::ParamId) -> Option<&[f32]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf created with [`Graph::leaf`].
    pub fn var(&self, v: Var) -> Option<&[f32]> {
        self.vars.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Tape of primitive applications over a borrowed parameter set.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward is a single reverse sweep.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    grad_enabled: bool,
    macs: u64,
    bn_records: Vec<BnRecord>,
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        s => Err(Error::Dimension(format!("expected NCHW tensor, got {s:?}"))),
    }
}

fn check_view_out(view: &ParamView, expected: usize, what: &str) -> Result<()> {
    if view.out != expected {
        return Err(Error::Dimension(format!(
            "{what} covers {} channels, expected {expected}",
            view.out
        )));
    }
    Ok(())
}

/// Depthwise kernel view repacked as `[k*k, channels]`.
fn depthwise_weights(data: &[f32], lay: &ViewLayout, channels: usize, k: usize) -> Vec<f32> {
    let mut wt = vec![0.0f32; k * k * channels];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                wt[(ky * k + kx) * channels + c] = data[lay.index(c, 0, ky, kx)];
            }
        }
    }
    wt
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Columns of a whole batch as `[channels*k*k, n*plane]`, sample-major
/// within each row.
fn unfold_batch(x: &[f32], n: usize, g: &ConvGeom) -> Vec<f32> {
    let plane = g.out_h * g.out_w;
    if is_pointwise(g) {
        return kernels::to_channel_major(x, n, g.channels, plane);
    }
    let np = n * plane;
    let img = g.channels * g.h * g.w;
    let mut cols = vec![0.0f32; g.channels * g.k * g.k * np];
    for b in 0..n {
        kernels::im2col_ld(&x[b * img..(b + 1) * img], g, &mut cols[b * plane..], np);
    }
    cols
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
            bn_records: Vec::new(),
        }
    }

    /// A graph that records no backward state; parameters are read-only.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates executed by conv and linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn bn_records(&self) -> &[BnRecord] {
        &self.bn_records
    }

    pub fn take_bn_records(&mut self) -> Vec<BnRecord> {
        std::mem::take(&mut self.bn_records)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn param_data(&self, view: &ParamView) -> Result<(&'p [f32], ViewLayout)> {
        let t = self.params.get(view.id);
        Ok((t.data(), ViewLayout::resolve(view, t)?))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.to_tensor(v);
        self.input(t)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: ParamView,
        bias: Option<ParamView>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let [n, cin, h, wd] = dims4(self.shape(x))?;
        let ConvSpec {
            stride,
            padding,
            groups,
        } = spec;
        if groups == 0 || stride == 0 {
            return Err(Error::Config("stride and groups must be positive".into()));
        }
        if cin % groups != 0 || w.out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide input channels {cin} and output channels {}",
                w.out
            )));
        }
        if w.inp != cin / groups {
            return Err(Error::Dimension(format!(
                "weight expects {} input channels per group, input has {}",
                w.inp,
                cin / groups
            )));
        }
        if w.k % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", w.k)));
        }
        if h + 2 * padding < w.k || wd + 2 * padding < w.k {
            return Err(Error::Dimension(format!(
                "kernel {} with padding {padding} does not fit a {h}x{wd} input",
                w.k
            )));
        }
        if let Some(b) = &bias {
            check_view_out(b, w.out, "bias")?;
        }
        let k = w.k;
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (wd + 2 * padding - k) / stride + 1;
        let cout = w.out;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let plane = out_h * out_w;
        let (wdata, lay) = self.param_data(&w)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; n * cout * plane];

        if groups == cin && cout == cin {
            let geom = ConvGeom {
                channels: cin,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let wt = depthwise_weights(wdata, &lay, cin, k);
            let xt = kernels::nchw_to_nhwc(xv, n, cin, h * wd);
            let mut yt = vec![0.0f32; out.len()];
            kernels::depthwise_nhwc(&xt, n, &geom, &wt, &mut yt);
            kernels::add_nhwc_to_nchw(&yt, n, cout, plane, &mut out);
        } else if groups == 1 {
            let packed;
            let (wbuf, wrs) = if lay.rows_contiguous() {
                (wdata, lay.row_stride)
            } else {
                packed = lay.pack(wdata);
                (&packed[..], lay.row_len())
            };
            let geom = ConvGeom {
                channels: cin,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let np = n * plane;
            let src = unfold_batch(xv, n, &geom);
            let mut tmp = vec![0.0f32; cout * np];
            kernels::gemm(cout, cin * k * k, np, wbuf, wrs, 1, &src, np, 1, 0.0, &mut tmp, np, 1);
            kernels::add_from_channel_major(&tmp, n, cout, plane, &mut out);
        } else {
            let packed;
            let (wbuf, wrs) = if lay.rows_contiguous() {
                (wdata, lay.row_stride)
            } else {
                packed = lay.pack(wdata);
                (&packed[..], lay.row_len())
            };
            let geom = ConvGeom {
                channels: cin_g,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let direct = k == 1 && stride == 1 && padding == 0;
            let kk = cin_g * k * k;
            let mut cols = if direct { Vec::new() } else { vec![0.0; kk * plane] };
            for b in 0..n {
                for g in 0..groups {
                    let xg = &xv[(b * cin + g * cin_g) * h * wd..(b * cin + (g + 1) * cin_g) * h * wd];
                    let src: &[f32] = if direct {
                        xg
                    } else {
                        kernels::im2col(xg, &geom, &mut cols);
                        &cols
                    };
                    let dst = &mut out[(b * cout + g * cout_g) * plane..];
                    kernels::gemm(
                        cout_g,
                        kk,
                        plane,
                        &wbuf[g * cout_g * wrs..],
                        wrs,
                        1,
                        src,
                        plane,
                        1,
                        0.0,
                        dst,
                        plane,
                        1,
                    );
                }
            }
        }
        if let Some(bv) = &bias {
            let (bdata, blay) = self.param_data(bv)?;
            for b in 0..n {
                for c in 0..cout {
                    let bias_c = bdata[blay.index(c, 0, 0, 0)];
                    out[(b * cout + c) * plane..(b * cout + c + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bias_c);
                }
            }
        }
        self.macs += (n * plane * k * k * cin_g * cout) as u64;
        Ok(self.push(
            vec![n, cout, out_h, out_w],
            out,
            Op::Conv { x, w, bias, spec },
            true,
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamView,
        beta: ParamView,
        mode: BnMode<'_>,
        eps: f32,
        tag: Option<usize>,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch norm eps must be positive, got {eps}")));
        }
        check_view_out(&gamma, c, "gamma")?;
        check_view_out(&beta, c, "beta")?;
        let (gdata, glay) = self.param_data(&gamma)?;
        let (bdata, blay) = self.param_data(&beta)?;
        let hw = h * w;
        let m = n * hw;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0f32; xv.len()];
        let keep = self.grad_enabled;
        let mut xhat = if keep { vec![0.0f32; xv.len()] } else { Vec::new() };
        let mut inv_std = vec![0.0f32; c];
        let batch_stats = matches!(mode, BnMode::Train);
        let mut record = BnRecord {
            tag: tag.unwrap_or(usize::MAX),
            count: m,
            sum: vec![0.0; c],
            sum_sq: vec![0.0; c],
        };
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    if n < 2 {
                        return Err(Error::DegenerateStats(format!(
                            "train-mode batch norm needs a batch of at least 2, got {n}"
                        )));
                    }
                    let (mut s, mut q) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            s += v as f64;
                            q += (v as f64) * (v as f64);
                        }
                    }
                    record.sum[ch] = s;
                    record.sum_sq[ch] = q;
                    let mean = s / m as f64;
                    ((mean) as f32, (q / m as f64 - mean * mean).max(0.0) as f32)
                }
                BnMode::Eval { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::Dimension(format!(
                            "running stats cover {} channels, input has {c}",
                            mean.len()
                        )));
                    }
                    (mean[ch], var[ch])
                }
            };
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ch] = istd;
            let gm = gdata[glay.index(ch, 0, 0, 0)];
            let bt = bdata[blay.index(ch, 0, 0, 0)];
            for b in 0..n {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = (xv[i] - mean) * istd;
                    if keep {
                        xhat[i] = xh;
                    }
                    out[i] = gm * xh + bt;
                }
            }
        }
        if batch_stats && tag.is_some() {
            self.bn_records.push(record);
        }
        Ok(self.push(
            vec![n, c, h, w],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            true,
        ))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = match kind {
            Unary::Relu => xv.iter().map(|v| v.max(0.0)).collect(),
            Unary::HardSwish => xv
                .iter()
                .map(|&v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0)
                .collect(),
            Unary::Sigmoid => xv.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, out, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn hard_swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::HardSwish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    /// `x[n, c, :, :] * s[n, c]`, the squeeze-and-excitation gate.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if self.shape(s) != [n, c] {
            return Err(Error::Dimension(format!(
                "channel scale {:?} does not match input {:?}",
                self.shape(s),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let sv = &self.nodes[s.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let f = sv[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(self.push(vec![n, c, h, w], out, Op::ScaleChannels { x, s }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        let hw = (h * w) as f32;
        let out = self.nodes[x.0]
            .value
            .chunks(h * w)
            .map(|p| p.iter().sum::<f32>() / hw)
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { x }, rg))
    }

    /// `y = x W^T + b` for `x: [N, in]` and `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: ParamView, bias: Option<ParamView>) -> Result<Var> {
        let (n, inp) = match self.shape(x) {
            [n, i] => (*n, *i),
            s => return Err(Error::Dimension(format!("linear expects [N, in], got {s:?}"))),
        };
        if w.inp != inp || w.k != 1 {
            return Err(Error::Dimension(format!(
                "linear weight takes {} inputs, got {inp}",
                w.inp
            )));
        }
        if let Some(b) = &bias {
            check_view_out(b, w.out, "bias")?;
        }
        let (wdata, lay) = self.param_data(&w)?;
        let out_f = w.out;
        let mut out = vec![0.0f32; n * out_f];
        kernels::gemm(
            n,
            inp,
            out_f,
            &self.nodes[x.0].value,
            inp,
            1,
            wdata,
            1,
            lay.row_stride,
            0.0,
            &mut out,
            out_f,
            1,
        );
        if let Some(bv) = &bias {
            let (bdata, blay) = self.param_data(bv)?;
            for row in out.chunks_mut(out_f) {
                for (o, v) in row.iter_mut().enumerate() {
                    *v += bdata[blay.index(o, 0, 0, 0)];
                }
            }
        }
        self.macs += (n * inp * out_f) as u64;
        Ok(self.push(vec![n, out_f], out, Op::Linear { x, w, bias }, true))
    }

    fn mask(&mut self, x: Var, factors: Vec<f32>, per: usize) -> Var {
        let out = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / per])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, out, Op::Mask { x, factors, per }, rg)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let factors = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(x, factors, 1)
    }

    /// Per-sample drop of a whole residual branch (stochastic depth).
    pub fn drop_connect(&mut self, x: Var, p: f32, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let n = self.shape(x)[0];
        let per = self.nodes[x.0].value.len() / n.max(1);
        let keep = 1.0 - p;
        let factors = (0..n)
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(x, factors, per)
    }

    /// Constant zero padding of the two spatial dimensions.
    pub fn zero_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![0.0f32; n * c * oh * ow];
        let xv = &self.nodes[x.0].value;
        for p in 0..n * c {
            for y in 0..h {
                let src = &xv[(p * h + y) * w..(p * h + y + 1) * w];
                let dst = (p * oh + y + pad) * ow + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c, oh, ow], out, Op::ZeroPad { x, pad }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f32>() / v.len() as f32;
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![s], Op::Mean { x }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    /// Mean over the batch of `-sum_c target[c] * log_softmax(logits)[c]`.
    /// Targets are constants.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let b = self.shape(logits).first().copied().unwrap_or(0);
        self.weighted_cross_entropy(logits, targets, &vec![1.0; b])
    }

    /// `sum_i w_i * CE_i / B`. Rows with weight zero contribute nothing, have
    /// exactly zero gradient and may carry any target.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[f32],
        weights: &[f32],
    ) -> Result<Var> {
        let (b, c) = match self.shape(logits) {
            [b, c] => (*b, *c),
            s => {
                return Err(Error::Dimension(format!(
                    "cross entropy expects [B, C] logits, got {s:?}"
                )))
            }
        };
        if targets.len() != b * c || weights.len() != b {
            return Err(Error::Dimension(format!(
                "{} targets and {} weights for {b}x{c} logits",
                targets.len(),
                weights.len()
            )));
        }
        for (i, (row, w)) in targets.chunks(c).zip(weights).enumerate() {
            if *w == 0.0 {
                continue;
            }
            let s: f32 = row.iter().sum();
            if row.iter().any(|t| *t < 0.0) || (s - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!(
                    "target row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        let lv = &self.nodes[logits.0].value;
        let probs = super::softmax_rows(lv, c);
        let mut total = 0.0f64;
        for ((row, trow), w) in lv.chunks(c).zip(targets.chunks(c)).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64
                + row
                    .iter()
                    .map(|z| ((z - max) as f64).exp())
                    .sum::<f64>()
                    .ln();
            let mut ce = 0.0f64;
            for (z, t) in row.iter().zip(trow) {
                if *t != 0.0 {
                    ce -= *t as f64 * (*z as f64 - lse);
                }
            }
            total += *w as f64 * ce;
        }
        let loss = (total / b as f64) as f32;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss value {}",
                self.nodes[loss.0].value[0]
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            vars: vec![None; self.nodes.len()],
        };
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, node, dy, &mut grads, &mut out)?;
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn param_grad<'g>(&self, out: &'g mut Gradients, id: super::ParamId) -> &'g mut Vec<f32> {
        let len = self.params.get(id).numel();
        out.params[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(
        &self,
        i: usize,
        node: &Node,
        dy: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        out: &mut Gradients,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                accumulate(&mut out.vars[i], dy);
            }
            Op::Conv { x, w, bias, spec } => self.conv_backward(*x, w, bias, spec, node, &dy, grads, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dims4(&node.shape)?;
                let hw = h * w;
                let m = (n * hw) as f32;
                let (gdata, glay) = self.param_data(gamma)?;
                let blay = ViewLayout::resolve(beta, self.params.get(beta.id))?;
                let glay_idx: Vec<usize> = (0..c).map(|ch| glay.index(ch, 0, 0, 0)).collect();
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let (mut s, mut sx) = (0.0f32, 0.0f32);
                        for (d, xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                            s += d;
                            sx += d * xh;
                        }
                        sum_dy[ch] += s;
                        sum_dy_xhat[ch] += sx;
                    }
                }
                {
                    let gg = self.param_grad(out, gamma.id);
                    for ch in 0..c {
                        gg[glay_idx[ch]] += sum_dy_xhat[ch];
                    }
                }
                {
                    let bg = self.param_grad(out, beta.id);
                    for ch in 0..c {
                        bg[blay.index(ch, 0, 0, 0)] += sum_dy[ch];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let g = gdata[glay_idx[ch]] * inv_std[ch];
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            if *batch_stats {
                                let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                                for j in r {
                                    dx[j] = g * (dy[j] - sd - xhat[j] * sdx);
                                }
                            } else {
                                for j in r {
                                    dx[j] = g * dy[j];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Unary { x, kind } => {
                let xv = &self.nodes[x.0].value;
                let dx: Vec<f32> = match kind {
                    Unary::Relu => dy
                        .iter()
                        .zip(xv)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect(),
                    Unary::HardSwish => dy
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| {
                            if v <= -3.0 {
                                0.0
                            } else if v >= 3.0 {
                                *d
                            } else {
                                d * (2.0 * v + 3.0) / 6.0
                            }
                        })
                        .collect(),
                    Unary::Sigmoid => dy
                        .iter()
                        .zip(&node.value)
                        .map(|(d, y)| d * y * (1.0 - y))
                        .collect(),
                };
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.iter().zip(bv).map(|(d, y)| d * y).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy.iter().zip(av).map(|(d, y)| d * y).collect());
                }
            }
            Op::ScaleChannels { x, s } => {
                let [_, _, h, w] = dims4(&node.shape)?;
                let hw = h * w;
                let (xv, sv) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
                if self.wants(*x) {
                    let dx = dy.iter().enumerate().map(|(j, d)| d * sv[j / hw]).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*s) {
                    let ds = dy
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(d, xx)| d.iter().zip(xx).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads[s.0], ds);
                }
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = dims4(self.shape(*x))?;
                let hw = h * w;
                let inv = 1.0 / hw as f32;
                let dx = (0..dy.len() * hw).map(|j| dy[j / hw] * inv).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Linear { x, w, bias } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_f = w.out;
                let (wdata, lay) = self.param_data(w)?;
                let xv = &self.nodes[x.0].value;
                {
                    let gw = self.param_grad(out, w.id);
                    kernels::gemm(out_f, n, inp, &dy, 1, out_f, xv, inp, 1, 1.0, gw, lay.row_stride, 1);
                }
                if let Some(bv) = bias {
                    let blay = ViewLayout::resolve(bv, self.params.get(bv.id))?;
                    let gb = self.param_grad(out, bv.id);
                    for row in dy.chunks(out_f) {
                        for (o, d) in row.iter().enumerate() {
                            gb[blay.index(o, 0, 0, 0)] += d;
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; n * inp];
                    kernels::gemm(n, out_f, inp, &dy, out_f, 1, wdata, lay.row_stride, 1, 0.0, &mut dx, inp, 1);
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Mask { x, factors, per } => {
                let dx = dy.iter().enumerate().map(|(j, d)| d * factors[j / per]).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::ZeroPad { x, pad } => {
                let [n, c, h, w] = dims4(self.shape(*x))?;
                let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        let src = (p * oh + y + pad) * ow + pad;
                        dx[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(&dy[src..src + w]);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sum { x } => {
                let len = self.nodes[x.0].value.len();
                accumulate(&mut grads[x.0], vec![dy[0]; len]);
            }
            Op::Mean { x } => {
                let len = self.nodes[x.0].value.len();
                accumulate(&mut grads[x.0], vec![dy[0] / len as f32; len]);
            }
            Op::Scale { x, c } => {
                accumulate(&mut grads[x.0], dy.iter().map(|d| d * c).collect());
            }
            Op::SoftCrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let [b, c] = [self.shape(*logits)[0], self.shape(*logits)[1]];
                let scale = dy[0] / b as f32;
                let mut dx = vec![0.0f32; b * c];
                for (((d, p), t), w) in dx
                    .chunks_mut(c)
                    .zip(probs.chunks(c))
                    .zip(targets.chunks(c))
                    .zip(weights)
                {
                    if *w == 0.0 {
                        continue;
                    }
                    let tsum: f32 = t.iter().sum();
                    for ((di, pi), ti) in d.iter_mut().zip(p).zip(t) {
                        *di = scale * w * (pi * tsum - ti);
                    }
                }
                accumulate(&mut grads[logits.0], dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: &ParamView,
        bias: &Option<ParamView>,
        spec: &ConvSpec,
        node: &Node,
        dy: &[f32],
        grads: &mut [Option<Vec<f32>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let [n, cin, h, wd] = dims4(self.shape(x))?;
        let [_, cout, out_h, out_w] = dims4(&node.shape)?;
        let ConvSpec {
            stride,
            padding,
            groups,
        } = *spec;
        let k = w.k;
        let plane = out_h * out_w;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let (wdata, lay) = self.param_data(w)?;
        let xv = &self.nodes[x.0].value;
        let want_x = self.wants(x);
        let mut dx = if want_x { vec![0.0f32; xv.len()] } else { Vec::new() };

        if let Some(bv) = bias {
            let blay = ViewLayout::resolve(bv, self.params.get(bv.id))?;
            let gb = self.param_grad(out, bv.id);
            for b in 0..n {
                for c in 0..cout {
                    let s: f32 = dy[(b * cout + c) * plane..(b * cout + c + 1) * plane].iter().sum();
                    gb[blay.index(c, 0, 0, 0)] += s;
                }
            }
        }

        if groups == cin && cout == cin {
            let geom = ConvGeom {
                channels: cin,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let wt = depthwise_weights(wdata, &lay, cin, k);
            let xt = kernels::nchw_to_nhwc(xv, n, cin, h * wd);
            let dyt = kernels::nchw_to_nhwc(dy, n, cout, plane);
            let mut dwt = vec![0.0f32; k * k * cin];
            let mut dxt = if want_x { vec![0.0f32; xv.len()] } else { Vec::new() };
            kernels::depthwise_nhwc_backward(
                &xt,
                &dyt,
                n,
                &geom,
                &wt,
                want_x.then_some(&mut dxt[..]),
                &mut dwt,
            );
            if want_x {
                kernels::add_nhwc_to_nchw(&dxt, n, cin, h * wd, &mut dx);
            }
            let mut dw = vec![0.0f32; cout * k * k];
            for c in 0..cout {
                for kk in 0..k * k {
                    dw[c * k * k + kk] = dwt[kk * cout + c];
                }
            }
            lay.scatter_add(&dw, self.param_grad(out, w.id));
        } else if groups == 1 {
            let contiguous = lay.rows_contiguous();
            let packed;
            let (wbuf, wrs) = if contiguous {
                (wdata, lay.row_stride)
            } else {
                packed = lay.pack(wdata);
                (&packed[..], lay.row_len())
            };
            let geom = ConvGeom {
                channels: cin,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let np = n * plane;
            let kk = cin * k * k;
            let src = unfold_batch(xv, n, &geom);
            let dy_cm = kernels::to_channel_major(dy, n, cout, plane);
            if contiguous {
                let gw = self.param_grad(out, w.id);
                kernels::gemm(cout, np, kk, &dy_cm, np, 1, &src, 1, np, 1.0, gw, wrs, 1);
            } else {
                let mut dw = vec![0.0f32; cout * kk];
                kernels::gemm(cout, np, kk, &dy_cm, np, 1, &src, 1, np, 0.0, &mut dw, kk, 1);
                lay.scatter_add(&dw, self.param_grad(out, w.id));
            }
            if want_x {
                let mut dsrc = vec![0.0f32; kk * np];
                kernels::gemm(kk, cout, np, wbuf, 1, wrs, &dy_cm, np, 1, 0.0, &mut dsrc, np, 1);
                if is_pointwise(&geom) {
                    kernels::add_from_channel_major(&dsrc, n, cin, plane, &mut dx);
                } else {
                    let img = cin * h * wd;
                    for b in 0..n {
                        kernels::col2im_add_ld(&dsrc[b * plane..], &geom, &mut dx[b * img..(b + 1) * img], np);
                    }
                }
            }
        } else {
            let contiguous = lay.rows_contiguous();
            let packed;
            let (wbuf, wrs) = if contiguous {
                (wdata, lay.row_stride)
            } else {
                packed = lay.pack(wdata);
                (&packed[..], lay.row_len())
            };
            let geom = ConvGeom {
                channels: cin_g,
                h,
                w: wd,
                k,
                stride,
                pad: padding,
                out_h,
                out_w,
            };
            let direct = k == 1 && stride == 1 && padding == 0;
            let kk = cin_g * k * k;
            let mut cols = if direct { Vec::new() } else { vec![0.0; kk * plane] };
            let mut dcols = if direct || !want_x { Vec::new() } else { vec![0.0; kk * plane] };
            let mut dw_packed = if contiguous { Vec::new() } else { vec![0.0f32; cout * kk] };
            let mut gw_full = if contiguous {
                Some(std::mem::take(self.param_grad(out, w.id)))
            } else {
                None
            };
            for b in 0..n {
                for g in 0..groups {
                    let xr = (b * cin + g * cin_g) * h * wd..(b * cin + (g + 1) * cin_g) * h * wd;
                    let src: &[f32] = if direct {
                        &xv[xr.clone()]
                    } else {
                        kernels::im2col(&xv[xr.clone()], &geom, &mut cols);
                        &cols
                    };
                    let dyg = &dy[(b * cout + g * cout_g) * plane..];
                    let (gw, gws): (&mut [f32], usize) = match &mut gw_full {
                        Some(full) => (&mut full[g * cout_g * wrs..], wrs),
                        None => (&mut dw_packed[g * cout_g * kk..], kk),
                    };
                    kernels::gemm(cout_g, plane, kk, dyg, plane, 1, src, 1, plane, 1.0, gw, gws, 1);
                    if want_x {
                        let wg = &wbuf[g * cout_g * wrs..];
                        if direct {
                            kernels::gemm(kk, cout_g, plane, wg, 1, wrs, dyg, plane, 1, 1.0, &mut dx[xr], plane, 1);
                        } else {
                            kernels::gemm(kk, cout_g, plane, wg, 1, wrs, dyg, plane, 1, 0.0, &mut dcols, plane, 1);
                            kernels::col2im_add(&dcols, &geom, &mut dx[xr]);
                        }
                    }
                }
            }
            match gw_full {
                Some(full) => *self.param_grad(out, w.id) = full,
                None => lay.scatter_add(&dw_packed, self.param_grad(out, w.id)),
            }
        }
        if want_x {
            accumulate(&mut grads[x.0], dx);
        }
        Ok(())
    }
}
