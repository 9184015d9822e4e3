//! Compact networks materialized from a supernet slice.
//!
//! The forward pass here is written with plain loops and shares no code
//! with the autodiff graph, so it doubles as an independent check of the
//! elastic execution path.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Supernet, BN_EPS};
use crate::error::{Error, Result};
use crate::space::{conv_out, se_reduced, Activation, SearchSpace, SubnetConfig};
use crate::tensor::{ParamId, Tensor};

/// Convolution followed by inference-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub cout: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    /// `[cout, cin / groups, k, k]`
    pub weight: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    pub reduced: usize,
    pub reduce_w: Vec<f32>,
    pub reduce_b: Vec<f32>,
    pub expand_w: Vec<f32>,
    pub expand_b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneLayer {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub se: Option<SqueezeExcite>,
    pub project: ConvBn,
    pub act: Activation,
    pub residual: bool,
}

/// A single fixed architecture with its own weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneNet {
    pub config: SubnetConfig,
    pub num_classes: usize,
    pub in_channels: usize,
    pub stem: ConvBn,
    pub stem_act: Activation,
    pub layers: Vec<StandaloneLayer>,
    pub head: ConvBn,
    pub head_act: Activation,
    pub classifier_w: Vec<f32>,
    pub classifier_b: Vec<f32>,
    /// Profile the config was drawn from.
    pub profile_text: String,
}

fn apply_act(v: f32, a: Activation) -> f32 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::HardSwish => v * (v + 3.0).clamp(0.0, 6.0) / 6.0,
    }
}

impl ConvBn {
    fn param_count(&self) -> usize {
        self.weight.len() + self.gamma.len() + self.beta.len()
    }

    /// `x` is `[cin, h, w]` for one image; returns `[cout, oh, ow]`.
    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let pad = self.k / 2;
        let oh = conv_out(h, self.k, self.stride);
        let ow = conv_out(w, self.k, self.stride);
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        let mut out = vec![0.0f32; self.cout * oh * ow];
        for co in 0..self.cout {
            let g = co / cout_g;
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin_g {
                let src = &x[(g * cin_g + ci) * h * w..(g * cin_g + ci + 1) * h * w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let wv = self.weight[((co * cin_g + ci) * self.k + ky) * self.k + kx];
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[oy * ow + ox] += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            let istd = 1.0 / (self.var[co] + BN_EPS).sqrt();
            for v in plane.iter_mut() {
                *v = self.gamma[co] * ((*v - self.mean[co]) * istd) + self.beta[co];
            }
        }
        (out, oh, ow)
    }
}

fn dense(x: &[f32], w: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let inp = x.len();
    (0..out)
        .map(|o| b[o] + w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
        .collect()
}

fn mean_planes(x: &[f32], c: usize) -> Vec<f32> {
    let hw = x.len() / c;
    x.chunks(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect()
}

/// Tensor source used while assembling a standalone net.
trait Source {
    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f32>>;
}

struct MapSource(BTreeMap<String, Vec<f32>>);

impl Source for MapSource {
    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let v = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if v.len() != len {
            return Err(Error::Format(format!(
                "tensor `{name}` holds {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn(
    src: &mut dyn Source,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
    groups: usize,
) -> Result<ConvBn> {
    Ok(ConvBn {
        cout,
        cin,
        k,
        stride,
        groups,
        weight: src.take(&format!("{name}.weight"), cout * (cin / groups) * k * k)?,
        gamma: src.take(&format!("{name}.gamma"), cout)?,
        beta: src.take(&format!("{name}.beta"), cout)?,
        mean: src.take(&format!("{name}.running_mean"), cout)?,
        var: src.take(&format!("{name}.running_var"), cout)?,
    })
}

impl StandaloneNet {
    fn assemble(
        space: &SearchSpace,
        config: &SubnetConfig,
        num_classes: usize,
        src: &mut dyn Source,
    ) -> Result<Self> {
        space.check(config)?;
        let stem = conv_bn(
            src,
            "stem",
            config.stem_width,
            space.in_channels,
            space.stem.kernel,
            space.stem.stride,
            1,
        )?;
        let mut layers = Vec::new();
        let mut cin = config.stem_width;
        let mut i = 0;
        for (spec, sc) in space.stages.iter().zip(&config.stages) {
            for li in 0..sc.depth {
                let stride = if li == 0 { spec.stride } else { 1 };
                let mid = cin * sc.expansion;
                let p = format!("layers.{i}");
                let expand = if sc.expansion != 1 {
                    Some(conv_bn(src, &format!("{p}.expand"), mid, cin, 1, 1, 1)?)
                } else {
                    None
                };
                let depthwise = conv_bn(src, &format!("{p}.depthwise"), mid, mid, sc.kernel, stride, mid)?;
                let se = if spec.use_se {
                    let r = se_reduced(mid);
                    Some(SqueezeExcite {
                        reduced: r,
                        reduce_w: src.take(&format!("{p}.se.reduce.weight"), r * mid)?,
                        reduce_b: src.take(&format!("{p}.se.reduce.bias"), r)?,
                        expand_w: src.take(&format!("{p}.se.expand.weight"), mid * r)?,
                        expand_b: src.take(&format!("{p}.se.expand.bias"), mid)?,
                    })
                } else {
                    None
                };
                let project = conv_bn(src, &format!("{p}.project"), sc.width, mid, 1, 1, 1)?;
                layers.push(StandaloneLayer {
                    expand,
                    depthwise,
                    se,
                    project,
                    act: spec.act,
                    residual: stride == 1 && cin == sc.width,
                });
                cin = sc.width;
                i += 1;
            }
        }
        let head = conv_bn(src, "head", config.head_width, cin, 1, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            in_channels: space.in_channels,
            stem,
            stem_act: space.stem.act,
            layers,
            head,
            head_act: space.head.act,
            classifier_w: src.take("classifier.weight", num_classes * config.head_width)?,
            classifier_b: src.take("classifier.bias", num_classes)?,
            profile_text: space.profile_text.clone(),
        })
    }

    /// Named tensors in assembly order, as stored in files.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn cb<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f32])>, name: &str, c: &'a ConvBn) {
            out.push((
                format!("{name}.weight"),
                vec![c.cout, c.cin / c.groups, c.k, c.k],
                &c.weight,
            ));
            out.push((format!("{name}.gamma"), vec![c.cout], &c.gamma));
            out.push((format!("{name}.beta"), vec![c.cout], &c.beta));
            out.push((format!("{name}.running_mean"), vec![c.cout], &c.mean));
            out.push((format!("{name}.running_var"), vec![c.cout], &c.var));
        }
        cb(&mut out, "stem", &self.stem);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            if let Some(e) = &l.expand {
                cb(&mut out, &format!("{p}.expand"), e);
            }
            cb(&mut out, &format!("{p}.depthwise"), &l.depthwise);
            if let Some(se) = &l.se {
                let mid = l.depthwise.cout;
                out.push((format!("{p}.se.reduce.weight"), vec![se.reduced, mid], &se.reduce_w));
                out.push((format!("{p}.se.reduce.bias"), vec![se.reduced], &se.reduce_b));
                out.push((format!("{p}.se.expand.weight"), vec![mid, se.reduced], &se.expand_w));
                out.push((format!("{p}.se.expand.bias"), vec![mid], &se.expand_b));
            }
            cb(&mut out, &format!("{p}.project"), &l.project);
        }
        cb(&mut out, "head", &self.head);
        out.push((
            "classifier.weight".into(),
            vec![self.num_classes, self.config.head_width],
            &self.classifier_w,
        ));
        out.push(("classifier.bias".into(), vec![self.num_classes], &self.classifier_b));
        out
    }

    /// Trainable values: weights, biases and batch-norm scale/shift.
    pub fn param_count(&self) -> u64 {
        let mut n = self.stem.param_count() + self.head.param_count();
        n += self.classifier_w.len() + self.classifier_b.len();
        for l in &self.layers {
            n += l.expand.as_ref().map_or(0, ConvBn::param_count);
            n += l.depthwise.param_count() + l.project.param_count();
            if let Some(se) = &l.se {
                n += se.reduce_w.len() + se.reduce_b.len() + se.expand_w.len() + se.expand_b.len();
            }
        }
        n as u64
    }

    /// Logits for one `[C, H, W]` image.
    pub fn forward_image(&self, img: &[f32]) -> Vec<f32> {
        let r = self.config.resolution;
        let (mut x, mut h, mut w) = self.stem.forward(img, r, r);
        x.iter_mut().for_each(|v| *v = apply_act(*v, self.stem_act));
        for l in &self.layers {
            let input = x.clone();
            let mut y = x;
            if let Some(e) = &l.expand {
                y = e.forward(&y, h, w).0;
                y.iter_mut().for_each(|v| *v = apply_act(*v, l.act));
            }
            let (mut z, oh, ow) = l.depthwise.forward(&y, h, w);
            z.iter_mut().for_each(|v| *v = apply_act(*v, l.act));
            if let Some(se) = &l.se {
                let mid = l.depthwise.cout;
                let pooled = mean_planes(&z, mid);
                let s: Vec<f32> = dense(&pooled, &se.reduce_w, &se.reduce_b, se.reduced)
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let gate: Vec<f32> = dense(&s, &se.expand_w, &se.expand_b, mid)
                    .into_iter()
                    .map(|v| 1.0 / (1.0 + (-v).exp()))
                    .collect();
                let hw = oh * ow;
                for (c, g) in gate.iter().enumerate() {
                    z[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v *= g);
                }
            }
            let (mut out, _, _) = l.project.forward(&z, oh, ow);
            if l.residual {
                out.iter_mut().zip(&input).for_each(|(a, b)| *a += b);
            }
            x = out;
            h = oh;
            w = ow;
        }
        let (mut y, _, _) = self.head.forward(&x, h, w);
        y.iter_mut().for_each(|v| *v = apply_act(*v, self.head_act));
        let pooled = mean_planes(&y, self.head.cout);
        dense(&pooled, &self.classifier_w, &self.classifier_b, self.num_classes)
    }

    /// Logits for an NCHW batch at the config's resolution.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let r = self.config.resolution;
        match batch.shape() {
            [_, c, h, w] if *c == self.in_channels && *h == r && *w == r => {}
            s => {
                return Err(Error::Contract(format!(
                    "input {s:?} does not match resolution {r} with {} channels",
                    self.in_channels
                )))
            }
        }
        let n = batch.shape()[0];
        let per = batch.numel() / n.max(1);
        let mut out = Vec::with_capacity(n * self.num_classes);
        for img in batch.data().chunks(per) {
            out.extend(self.forward_image(img));
        }
        Tensor::new(vec![n, self.num_classes], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "standalone".to_string());
        meta.insert("config".to_string(), self.config.encode());
        meta.insert("num_classes".to_string(), self.num_classes.to_string());
        let tensors = self.tensors();
        super::checkpoint::write_container(path, &meta, &self.profile_text, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = super::checkpoint::read_container(path)?;
        if c.meta.get("kind").map(String::as_str) != Some("standalone") {
            return Err(Error::Format(format!("{} is not a standalone network", path.display())));
        }
        let space = crate::space::load_profile(&c.profile)?;
        let config = space.decode(c.meta_str("config")?)?;
        let num_classes = c.meta_usize("num_classes")?;
        let mut src = MapSource(c.tensors.into_iter().map(|(n, _, d)| (n, d)).collect());
        let net = Self::assemble(&space, &config, num_classes, &mut src)?;
        if let Some(extra) = src.0.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(net)
    }
}

impl Supernet {
    fn slice_param(&self, id: ParamId, out: usize, inp: usize, k: usize) -> Vec<f32> {
        let t = self.params.get(id);
        let shape = t.shape();
        let (full_in, full_k) = match shape {
            [_] => (1, 1),
            [_, i] => (*i, 1),
            [_, i, kk, _] => (*i, *kk),
            _ => unreachable!("parameters are 1-, 2- or 4-d"),
        };
        let off = (full_k - k) / 2;
        let mut v = Vec::with_capacity(out * inp * k * k);
        for o in 0..out {
            for i in 0..inp {
                for ky in 0..k {
                    for kx in 0..k {
                        v.push(t.data()[((o * full_in + i) * full_k + ky + off) * full_k + kx + off]);
                    }
                }
            }
        }
        v
    }

    /// Copies the slices used by `config` into a standalone network. Running
    /// statistics are taken as stored; recalibrate first.
    pub fn materialize(&self, config: &SubnetConfig) -> Result<StandaloneNet> {
        self.space.check(config)?;
        let mut map = BTreeMap::new();
        let put_bn = |map: &mut BTreeMap<String, Vec<f32>>, name: &str, slot: &super::BnSlot, c: usize| {
            map.insert(format!("{name}.gamma"), self.slice_param(slot.gamma, c, 1, 1));
            map.insert(format!("{name}.beta"), self.slice_param(slot.beta, c, 1, 1));
            let rs = &self.running[slot.stats];
            map.insert(format!("{name}.running_mean"), rs.mean[..c].to_vec());
            map.insert(format!("{name}.running_var"), rs.var[..c].to_vec());
        };
        let k0 = self.space.stem.kernel;
        map.insert(
            "stem.weight".into(),
            self.slice_param(self.stem, config.stem_width, self.space.in_channels, k0),
        );
        put_bn(&mut map, "stem", &self.stem_bn, config.stem_width);
        for (i, a) in self.active_layers(config).iter().enumerate() {
            let layer = &self.stages[a.stage][a.index];
            let p = format!("layers.{i}");
            if a.expand {
                let (w, s) = layer.expand.as_ref().unwrap();
                map.insert(format!("{p}.expand.weight"), self.slice_param(*w, a.mid, a.cin, 1));
                put_bn(&mut map, &format!("{p}.expand"), s, a.mid);
            }
            map.insert(
                format!("{p}.depthwise.weight"),
                self.slice_param(layer.depthwise, a.mid, 1, a.kernel),
            );
            put_bn(&mut map, &format!("{p}.depthwise"), &layer.depthwise_bn, a.mid);
            if let Some(se) = &layer.se {
                let r = se_reduced(a.mid);
                map.insert(format!("{p}.se.reduce.weight"), self.slice_param(se.reduce_w, r, a.mid, 1));
                map.insert(format!("{p}.se.reduce.bias"), self.slice_param(se.reduce_b, r, 1, 1));
                map.insert(format!("{p}.se.expand.weight"), self.slice_param(se.expand_w, a.mid, r, 1));
                map.insert(format!("{p}.se.expand.bias"), self.slice_param(se.expand_b, a.mid, 1, 1));
            }
            map.insert(
                format!("{p}.project.weight"),
                self.slice_param(layer.project, a.cout, a.mid, 1),
            );
            put_bn(&mut map, &format!("{p}.project"), &layer.project_bn, a.cout);
        }
        let last = config.stages.last().map_or(config.stem_width, |s| s.width);
        map.insert(
            "head.weight".into(),
            self.slice_param(self.head_conv, config.head_width, last, 1),
        );
        put_bn(&mut map, "head", &self.head_bn, config.head_width);
        map.insert(
            "classifier.weight".into(),
            self.slice_param(self.classifier_w, self.num_classes, config.head_width, 1),
        );
        map.insert(
            "classifier.bias".into(),
            self.slice_param(self.classifier_b, self.num_classes, 1, 1),
        );
        let mut src = MapSource(map);
        StandaloneNet::assemble(&self.space, config, self.num_classes, &mut src)
    }
}
