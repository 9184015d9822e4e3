//! The weight-sharing supernet.
//!
//! Every tensor is allocated at the largest size any configuration needs.
//! A subnet reads leading sub-blocks of those tensors through
//! [`ParamView`]s: the first `c` output channels for width, the first
//! `e * Cin` channels of the expanded tensors for expansion, the centred
//! `k x k` window of the depthwise kernel, and the first `d` layers of a
//! stage for depth.

mod checkpoint;
mod standalone;

pub use checkpoint::{load_checkpoint, save_checkpoint, HeadReinit};
pub use standalone::{StandaloneLayer, StandaloneNet};

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::space::{se_reduced, Activation, Anchor, SearchSpace, SubnetConfig};
use crate::tensor::{BnMode, BnRecord, ConvSpec, Graph, ParamId, ParamSet, ParamView, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const DEFAULT_DROPOUT: f32 = 0.3;
pub const DEFAULT_DROP_CONNECT: f32 = 0.2;

/// Gamma/beta of one batch norm plus the index of its running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeParams {
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
}

/// Inverted-residual layer at maximal size.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticLayer {
    pub max_in: usize,
    pub max_mid: usize,
    pub max_out: usize,
    pub max_kernel: usize,
    pub stride: usize,
    pub act: Activation,
    /// Absent when the stage only offers expansion 1.
    pub expand: Option<(ParamId, BnSlot)>,
    pub depthwise: ParamId,
    pub depthwise_bn: BnSlot,
    pub se: Option<SeParams>,
    pub project: ParamId,
    pub project_bn: BnSlot,
}

/// Dimensions of one executed layer under a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveLayer {
    pub stage: usize,
    pub index: usize,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expand: bool,
    pub residual: bool,
}

/// Index ranges of one tensor read by a configuration. Kernel ranges index
/// rows and columns of the stored kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlice {
    pub param: ParamId,
    pub out: Range<usize>,
    pub inp: Range<usize>,
    pub kernel: Range<usize>,
}

impl TensorSlice {
    pub fn contains(&self, o: usize, i: usize, ky: usize, kx: usize) -> bool {
        self.out.contains(&o)
            && self.inp.contains(&i)
            && self.kernel.contains(&ky)
            && self.kernel.contains(&kx)
    }

    pub fn is_subset_of(&self, other: &TensorSlice) -> bool {
        let sub = |a: &Range<usize>, b: &Range<usize>| a.start >= b.start && a.end <= b.end;
        self.param == other.param
            && sub(&self.out, &other.out)
            && sub(&self.inp, &other.inp)
            && sub(&self.kernel, &other.kernel)
    }
}

/// How a forward pass treats normalization and stochastic layers.
pub enum Mode<'r> {
    /// Batch statistics, dropout and drop-connect.
    Train { rng: &'r mut dyn RngCore },
    /// Batch statistics, recorded for recalibration; no stochastic layers.
    Calibrate,
    /// Running statistics; no stochastic layers.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub space: SearchSpace,
    pub num_classes: usize,
    pub params: ParamSet,
    pub stem: ParamId,
    pub stem_bn: BnSlot,
    pub stages: Vec<Vec<ElasticLayer>>,
    pub head_conv: ParamId,
    pub head_bn: BnSlot,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    pub running: Vec<RunningStats>,
    pub dropout: f32,
    pub drop_connect: f32,
    /// Free-form metadata carried through checkpoints.
    pub meta: BTreeMap<String, String>,
}

fn act(g: &mut Graph, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::HardSwish => g.hard_swish(x),
    }
}

struct Builder<'a> {
    params: ParamSet,
    running: Vec<RunningStats>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.params.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    /// He-normal convolution weight `[out, inp, k, k]`.
    fn conv(&mut self, name: String, out: usize, inp: usize, k: usize) -> ParamId {
        let std = (2.0 / (inp * k * k) as f32).sqrt();
        self.normal(name, &[out, inp, k, k], std)
    }

    fn fc(&mut self, name: &str, out: usize, inp: usize) -> (ParamId, ParamId) {
        let std = (1.0 / inp as f32).sqrt();
        let w = self.normal(format!("{name}.weight"), &[out, inp], std);
        let b = self.params.add(format!("{name}.bias"), Tensor::zeros(&[out]));
        (w, b)
    }

    fn bn(&mut self, name: &str, c: usize) -> BnSlot {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.running.push(RunningStats {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        BnSlot {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl Supernet {
    /// Fresh supernet for `space` with a `num_classes`-way classifier.
    pub fn init(space: &SearchSpace, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamSet::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let stem_w = *space.stem.width_choices.last().unwrap();
        let stem = b.conv("stem.conv.weight".into(), stem_w, space.in_channels, space.stem.kernel);
        let stem_bn = b.bn("stem.bn", stem_w);

        let mut stages = Vec::new();
        let mut prev = stem_w;
        for (si, spec) in space.stages.iter().enumerate() {
            let mut layers = Vec::new();
            let (max_out, max_k, max_e) = (spec.max_width(), spec.max_kernel(), spec.max_expansion());
            for li in 0..spec.max_depth() {
                let max_in = if li == 0 { prev } else { max_out };
                let max_mid = max_in * max_e;
                let p = format!("stages.{si}.{li}");
                let expand = (max_e > 1).then(|| {
                    let w = b.conv(format!("{p}.expand.weight"), max_mid, max_in, 1);
                    (w, b.bn(&format!("{p}.expand_bn"), max_mid))
                });
                let depthwise = b.conv(format!("{p}.depthwise.weight"), max_mid, 1, max_k);
                let depthwise_bn = b.bn(&format!("{p}.depthwise_bn"), max_mid);
                let se = spec.use_se.then(|| {
                    let r = se_reduced(max_mid);
                    let (reduce_w, reduce_b) = b.fc(&format!("{p}.se.reduce"), r, max_mid);
                    let (expand_w, expand_b) = b.fc(&format!("{p}.se.expand"), max_mid, r);
                    SeParams {
                        reduce_w,
                        reduce_b,
                        expand_w,
                        expand_b,
                    }
                });
                let project = b.conv(format!("{p}.project.weight"), max_out, max_mid, 1);
                let project_bn = b.bn(&format!("{p}.project_bn"), max_out);
                layers.push(ElasticLayer {
                    max_in,
                    max_mid,
                    max_out,
                    max_kernel: max_k,
                    stride: if li == 0 { spec.stride } else { 1 },
                    act: spec.act,
                    expand,
                    depthwise,
                    depthwise_bn,
                    se,
                    project,
                    project_bn,
                });
            }
            prev = max_out;
            stages.push(layers);
        }

        let head_w = *space.head.width_choices.last().unwrap();
        let head_conv = b.conv("head.conv.weight".into(), head_w, prev, 1);
        let head_bn = b.bn("head.bn", head_w);
        let classifier_w = b.normal("classifier.weight".into(), &[num_classes, head_w], 0.01);
        let classifier_b = b.params.add("classifier.bias", Tensor::zeros(&[num_classes]));
        let Builder { params, running, .. } = b;
        Ok(Self {
            space: space.clone(),
            num_classes,
            params,
            stem,
            stem_bn,
            stages,
            head_conv,
            head_bn,
            classifier_w,
            classifier_b,
            running,
            dropout: DEFAULT_DROPOUT,
            drop_connect: DEFAULT_DROP_CONNECT,
            meta: BTreeMap::new(),
        })
    }

    /// Replaces the classifier with a fresh `num_classes`-way layer.
    pub fn reinit_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let head_w = self.params.get(self.classifier_w).shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0f32, 0.01).unwrap();
        let data = (0..num_classes * head_w).map(|_| dist.sample(&mut rng)).collect();
        *self.params.get_mut(self.classifier_w) =
            Tensor::new(vec![num_classes, head_w], data)?.with_requires_grad(true);
        *self.params.get_mut(self.classifier_b) =
            Tensor::zeros(&[num_classes]).with_requires_grad(true);
        self.num_classes = num_classes;
        Ok(())
    }

    /// Layers executed by `config`, in order.
    pub fn active_layers(&self, config: &SubnetConfig) -> Vec<ActiveLayer> {
        let mut out = Vec::new();
        let mut cin = config.stem_width;
        for (si, sc) in config.stages.iter().enumerate() {
            for li in 0..sc.depth {
                let layer = &self.stages[si][li];
                out.push(ActiveLayer {
                    stage: si,
                    index: li,
                    cin,
                    mid: cin * sc.expansion,
                    cout: sc.width,
                    kernel: sc.kernel,
                    stride: layer.stride,
                    expand: sc.expansion != 1,
                    residual: layer.stride == 1 && cin == sc.width,
                });
                cin = sc.width;
            }
        }
        out
    }

    fn last_width(config: &SubnetConfig) -> usize {
        config.stages.last().map_or(config.stem_width, |s| s.width)
    }

    /// Every tensor region read by `config`.
    pub fn slice_rules(&self, config: &SubnetConfig) -> Result<Vec<TensorSlice>> {
        self.space.check(config)?;
        let mut out = Vec::new();
        let full = |p: ParamId, o: usize, i: usize| TensorSlice {
            param: p,
            out: 0..o,
            inp: 0..i,
            kernel: 0..1,
        };
        let bn = |out: &mut Vec<TensorSlice>, s: &BnSlot, c: usize| {
            out.push(full(s.gamma, c, 1));
            out.push(full(s.beta, c, 1));
        };
        let k0 = self.space.stem.kernel;
        out.push(TensorSlice {
            kernel: 0..k0,
            ..full(self.stem, config.stem_width, self.space.in_channels)
        });
        bn(&mut out, &self.stem_bn, config.stem_width);
        for a in self.active_layers(config) {
            let layer = &self.stages[a.stage][a.index];
            if a.expand {
                let (w, s) = layer.expand.as_ref().expect("expansion > 1 needs an expand conv");
                out.push(full(*w, a.mid, a.cin));
                bn(&mut out, s, a.mid);
            }
            let off = (layer.max_kernel - a.kernel) / 2;
            out.push(TensorSlice {
                kernel: off..off + a.kernel,
                ..full(layer.depthwise, a.mid, 1)
            });
            bn(&mut out, &layer.depthwise_bn, a.mid);
            if let Some(se) = &layer.se {
                let r = se_reduced(a.mid);
                out.push(full(se.reduce_w, r, a.mid));
                out.push(full(se.reduce_b, r, 1));
                out.push(full(se.expand_w, a.mid, r));
                out.push(full(se.expand_b, a.mid, 1));
            }
            out.push(full(layer.project, a.cout, a.mid));
            bn(&mut out, &layer.project_bn, a.cout);
        }
        out.push(full(self.head_conv, config.head_width, Self::last_width(config)));
        bn(&mut out, &self.head_bn, config.head_width);
        out.push(full(self.classifier_w, self.num_classes, config.head_width));
        out.push(full(self.classifier_b, self.num_classes, 1));
        Ok(out)
    }

    fn view(&self, id: ParamId) -> ParamView {
        self.params.view(id)
    }

    fn batch_norm(
        &self,
        g: &mut Graph,
        x: Var,
        slot: &BnSlot,
        c: usize,
        mode: &Mode<'_>,
    ) -> Result<Var> {
        let gamma = self.view(slot.gamma).rows(c);
        let beta = self.view(slot.beta).rows(c);
        match mode {
            Mode::Eval => {
                let rs = &self.running[slot.stats];
                let bn = BnMode::Eval {
                    mean: &rs.mean[..c],
                    var: &rs.var[..c],
                };
                g.batch_norm(x, gamma, beta, bn, BN_EPS, None)
            }
            Mode::Calibrate => g.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS, Some(slot.stats)),
            Mode::Train { .. } => g.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS, None),
        }
    }

    /// Records the forward pass of subnet `config` on `x` (NCHW at
    /// `config.resolution`) and returns the logits node.
    pub fn forward(
        &self,
        g: &mut Graph,
        config: &SubnetConfig,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.space.check(config)?;
        match g.shape(x) {
            [_, c, h, w] if *c == self.space.in_channels && *h == config.resolution && *w == config.resolution => {}
            s => {
                return Err(Error::Contract(format!(
                    "input {s:?} does not match resolution {} with {} channels",
                    config.resolution, self.space.in_channels
                )))
            }
        }
        let stem = &self.space.stem;
        let w = self
            .view(self.stem)
            .sliced(config.stem_width, self.space.in_channels, stem.kernel);
        let mut h = g.conv2d(x, w, None, ConvSpec::same(stem.kernel, stem.stride))?;
        h = self.batch_norm(g, h, &self.stem_bn, config.stem_width, mode)?;
        h = act(g, h, stem.act);

        for a in self.active_layers(config) {
            let layer = &self.stages[a.stage][a.index];
            let input = h;
            let mut y = input;
            if a.expand {
                let (w, s) = layer.expand.as_ref().unwrap();
                y = g.conv2d(y, self.view(*w).sliced(a.mid, a.cin, 1), None, ConvSpec::same(1, 1))?;
                y = self.batch_norm(g, y, s, a.mid, mode)?;
                y = act(g, y, layer.act);
            }
            let dw = self.view(layer.depthwise).sliced(a.mid, 1, a.kernel);
            y = g.conv2d(y, dw, None, ConvSpec::depthwise(a.kernel, a.stride, a.mid))?;
            y = self.batch_norm(g, y, &layer.depthwise_bn, a.mid, mode)?;
            y = act(g, y, layer.act);
            if let Some(se) = &layer.se {
                let r = se_reduced(a.mid);
                let pooled = g.global_avg_pool(y)?;
                let mut s = g.linear(
                    pooled,
                    self.view(se.reduce_w).sliced(r, a.mid, 1),
                    Some(self.view(se.reduce_b).rows(r)),
                )?;
                s = g.relu(s);
                s = g.linear(
                    s,
                    self.view(se.expand_w).sliced(a.mid, r, 1),
                    Some(self.view(se.expand_b).rows(a.mid)),
                )?;
                s = g.sigmoid(s);
                y = g.scale_channels(y, s)?;
            }
            let pw = self.view(layer.project).sliced(a.cout, a.mid, 1);
            y = g.conv2d(y, pw, None, ConvSpec::same(1, 1))?;
            y = self.batch_norm(g, y, &layer.project_bn, a.cout, mode)?;
            if a.residual {
                if let Mode::Train { rng } = mode {
                    y = g.drop_connect(y, self.drop_connect, true, rng);
                }
                y = g.add(input, y)?;
            }
            h = y;
        }

        let cin = Self::last_width(config);
        let hw = config.head_width;
        h = g.conv2d(h, self.view(self.head_conv).sliced(hw, cin, 1), None, ConvSpec::same(1, 1))?;
        h = self.batch_norm(g, h, &self.head_bn, hw, mode)?;
        h = act(g, h, self.space.head.act);
        h = g.global_avg_pool(h)?;
        if let Mode::Train { rng } = mode {
            h = g.dropout(h, self.dropout, true, rng);
        }
        g.linear(
            h,
            self.view(self.classifier_w).sliced(self.num_classes, hw, 1),
            Some(self.view(self.classifier_b)),
        )
    }

    /// Logits of `config` on `batch` without recording gradients.
    pub fn subnet_forward(
        &self,
        config: &SubnetConfig,
        batch: &Tensor,
        mut mode: Mode<'_>,
    ) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, config, x, &mut mode)?;
        Ok(g.to_tensor(y))
    }

    /// Recomputes the running statistics of every batch norm slice used by
    /// `config` from up to `k` calibration batches. Weights are untouched.
    pub fn bn_recalibrate<'b, I>(&mut self, config: &SubnetConfig, batches: I, k: usize) -> Result<()>
    where
        I: IntoIterator<Item = &'b Tensor>,
    {
        if k == 0 {
            return Err(Error::Contract("recalibration needs at least one batch".into()));
        }
        let mut acc: BTreeMap<usize, BnRecord> = BTreeMap::new();
        let mut used = 0;
        for batch in batches.into_iter().take(k) {
            let mut g = Graph::inference(&self.params);
            let x = g.input(batch.clone());
            self.forward(&mut g, config, x, &mut Mode::Calibrate)?;
            for r in g.take_bn_records() {
                match acc.get_mut(&r.tag) {
                    Some(a) => {
                        a.count += r.count;
                        a.sum.iter_mut().zip(&r.sum).for_each(|(x, y)| *x += y);
                        a.sum_sq.iter_mut().zip(&r.sum_sq).for_each(|(x, y)| *x += y);
                    }
                    None => {
                        acc.insert(r.tag, r);
                    }
                }
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::Contract("calibration stream is empty".into()));
        }
        for (tag, rec) in acc {
            let c = rec.channels();
            let rs = &mut self.running[tag];
            rs.mean[..c].copy_from_slice(&rec.mean());
            rs.var[..c].copy_from_slice(&rec.unbiased_var());
        }
        Ok(())
    }

    pub fn maxnet(&self) -> SubnetConfig {
        self.space.anchor(Anchor::Max)
    }

    pub fn minnet(&self) -> SubnetConfig {
        self.space.anchor(Anchor::Min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::bundled_profile;

    fn net() -> Supernet {
        Supernet::init(&bundled_profile("desk-small").unwrap(), 4, 3).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_rejects_one_class() {
        let s = bundled_profile("desk-small").unwrap();
        assert_eq!(Supernet::init(&s, 4, 7).unwrap().params, Supernet::init(&s, 4, 7).unwrap().params);
        assert!(matches!(Supernet::init(&s, 1, 7), Err(Error::Config(_))));
    }

    #[test]
    fn maxnet_on_zero_image_is_finite() {
        let n = net();
        let c = n.maxnet();
        let x = Tensor::zeros(&[2, 3, c.resolution, c.resolution]);
        let y = n.subnet_forward(&c, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.all_finite());
    }

    #[test]
    fn resolution_mismatch_is_contract_error() {
        let n = net();
        let x = Tensor::zeros(&[2, 3, 20, 20]);
        assert!(matches!(n.subnet_forward(&n.maxnet(), &x, Mode::Eval), Err(Error::Contract(_))));
    }

    #[test]
    fn slice_rule_examples() {
        let n = net();
        let mut c = n.maxnet();
        c.stages[1].kernel = 3;
        c.stages[1].expansion = 2;
        let rules = n.slice_rules(&c).unwrap();
        let dw = n.stages[1][1].depthwise;
        let r = rules.iter().find(|r| r.param == dw).unwrap();
        // second layer of stage 2 has Cin = 24, so expansion 2 keeps 48 of 144 channels
        assert_eq!(r.kernel, 1..4);
        assert_eq!(r.out, 0..48);
        assert_eq!(n.stages[1][1].max_mid, 144);
    }

    #[test]
    fn recalibration_requires_batches() {
        let mut n = net();
        let c = n.minnet();
        assert!(matches!(n.bn_recalibrate(&c, std::iter::empty(), 8), Err(Error::Contract(_))));
        let b = Tensor::zeros(&[2, 3, 16, 16]);
        assert!(matches!(n.bn_recalibrate(&c, [&b], 0), Err(Error::Contract(_))));
    }
}
