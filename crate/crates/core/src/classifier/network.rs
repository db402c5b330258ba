//! 1-D convolutional feature extractor with four MLP heads, in plain f64
//! arithmetic with a hand-written backward pass.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of regression heads (chlorophyll, carotenoid, anthocyanin).
pub const REG_HEADS: usize = 3;
/// Heads in parameter order: segmentation first, then the regressions.
pub const HEAD_NAMES: [&str; 4] = ["seg", "ab", "ar", "ant"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub bands: usize,
    /// Output channels of the three conv blocks.
    pub channels: [usize; 3],
    pub kernel: usize,
    pub pool: usize,
    /// Hidden width of every head.
    pub hidden: usize,
}

impl NetworkSpec {
    pub fn new(bands: usize) -> Self {
        Self {
            bands,
            channels: [8, 16, 32],
            kernel: 5,
            pool: 2,
            hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.hidden == 0 || self.pool == 0 || self.channels.contains(&0) {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Sequence length entering each conv block, plus the final pooled length.
    pub fn lengths(&self) -> [usize; 4] {
        let mut l = [self.bands; 4];
        for i in 1..4 {
            l[i] = l[i - 1].div_ceil(self.pool);
        }
        l
    }

    pub fn feature_len(&self) -> usize {
        self.channels[2] * self.lengths()[3]
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    /// Multiply-accumulates for one forward pass.
    pub fn macs(&self) -> usize {
        let l = self.lengths();
        let mut cin = 1;
        let mut macs = 0;
        for (i, &c) in self.channels.iter().enumerate() {
            macs += l[i] * cin * c * self.kernel;
            cin = c;
        }
        let f = self.feature_len();
        macs + 4 * f * self.hidden + self.hidden * (2 + REG_HEADS)
    }
}

#[derive(Debug, Clone)]
struct ConvSlot {
    w: Range<usize>,
    b: Range<usize>,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
struct HeadSlot {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    out: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvSlot>,
    heads: Vec<HeadSlot>,
    total: usize,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut conv = Vec::new();
        let mut cin = 1;
        for &cout in &spec.channels {
            let w = take(cout * cin * spec.kernel);
            let b = take(cout);
            conv.push(ConvSlot { w, b, cin, cout });
            cin = cout;
        }
        let f = spec.feature_len();
        let mut heads = Vec::new();
        for out in [2, 1, 1, 1] {
            let w1 = take(spec.hidden * f);
            let b1 = take(spec.hidden);
            let w2 = take(out * spec.hidden);
            let b2 = take(out);
            heads.push(HeadSlot {
                w1,
                b1,
                w2,
                b2,
                out,
            });
        }
        Self {
            conv,
            heads,
            total: at,
        }
    }
}

/// Raw network outputs; regressions are in scaled units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOutput {
    /// Background, tree.
    pub logits: [f64; 2],
    pub reg: [f64; REG_HEADS],
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    conv_pre: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    hidden_pre: Vec<Vec<f64>>,
    pub output: NetOutput,
}

impl Trace {
    /// ReLU on/off states and pooling winners; a change between two nearby
    /// parameter vectors means a kink lies between them.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut p = Vec::new();
        for z in self.conv_pre.iter().chain(&self.hidden_pre) {
            p.extend(z.iter().map(|&v| (v > 0.0) as usize));
        }
        for a in &self.argmax {
            p.extend_from_slice(a);
        }
        p
    }
}

/// Training target for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub is_tree: bool,
    /// Scaled contents; ignored for background samples.
    pub scaled: [f64; REG_HEADS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingLoss {
    pub seg: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layout_total: usize,
    params: Vec<f64>,
}

fn check_finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability of the tree class from the two logits.
pub fn tree_probability(logits: [f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

impl Network {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let total = spec.param_count();
        Ok(Self {
            spec,
            layout_total: total,
            params: vec![0.0; total],
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let layout = Layout::new(&net.spec);
        let f = net.spec.feature_len();
        let mut fill = |params: &mut [f64], r: &Range<usize>, fan_in: usize, gain: f64| {
            let n = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[r.clone()] {
                *p = n.sample(rng);
            }
        };
        for c in &layout.conv {
            fill(&mut net.params, &c.w, c.cin * net.spec.kernel, 2.0);
        }
        for h in &layout.heads {
            fill(&mut net.params, &h.w1, f, 2.0);
            fill(&mut net.params, &h.w2, net.spec.hidden, 1.0);
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.layout_total {
            return Err(Error::Dimension(format!(
                "network needs {} parameters, got {}",
                net.layout_total,
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Names and shapes of the weight tensors in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let s = &self.spec;
        let f = s.feature_len();
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, &c) in s.channels.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![c, cin, s.kernel]));
            out.push((format!("conv{i}.bias"), vec![c]));
            cin = c;
        }
        for (name, o) in HEAD_NAMES.iter().zip([2, 1, 1, 1]) {
            out.push((format!("{name}.fc1.weight"), vec![s.hidden, f]));
            out.push((format!("{name}.fc1.bias"), vec![s.hidden]));
            out.push((format!("{name}.fc2.weight"), vec![o, s.hidden]));
            out.push((format!("{name}.fc2.bias"), vec![o]));
        }
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<NetOutput> {
        Ok(self.trace(input)?.output)
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.spec.bands {
            return Err(Error::Dimension(format!(
                "network expects {} bands, got {}",
                self.spec.bands,
                input.len()
            )));
        }
        check_finite(input, 0)?;
        let layout = Layout::new(&self.spec);
        let lengths = self.spec.lengths();
        let k = self.spec.kernel;
        let pad = k / 2;
        let pool = self.spec.pool;
        let p = &self.params;

        let mut conv_pre = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        let mut argmax = Vec::with_capacity(3);
        let mut x: &[f64] = input;
        for (li, c) in layout.conv.iter().enumerate() {
            let l = lengths[li];
            let lo = lengths[li + 1];
            let w = &p[c.w.clone()];
            let b = &p[c.b.clone()];
            let mut z = vec![0.0; c.cout * l];
            for co in 0..c.cout {
                let row = &mut z[co * l..(co + 1) * l];
                row.fill(b[co]);
                for ci in 0..c.cin {
                    let xr = &x[ci * l..(ci + 1) * l];
                    for j in 0..k {
                        let wv = w[(co * c.cin + ci) * k + j];
                        let (t0, t1) = (pad.saturating_sub(j), (l + pad).saturating_sub(j).min(l));
                        let shift = j as isize - pad as isize;
                        for t in t0..t1 {
                            row[t] += wv * xr[(t as isize + shift) as usize];
                        }
                    }
                }
            }
            check_finite(&z, li)?;
            let mut pv = vec![0.0; c.cout * lo];
            let mut am = vec![0usize; c.cout * lo];
            for co in 0..c.cout {
                for s in 0..lo {
                    let start = s * pool;
                    let end = (start + pool).min(l);
                    let mut best = start;
                    for t in start + 1..end {
                        if z[co * l + t] > z[co * l + best] {
                            best = t;
                        }
                    }
                    pv[co * lo + s] = z[co * l + best].max(0.0);
                    am[co * lo + s] = best;
                }
            }
            conv_pre.push(z);
            pooled.push(pv);
            argmax.push(am);
            x = pooled.last().expect("just pushed");
        }

        let feat = pooled.last().expect("three blocks");
        let f = feat.len();
        let hidden = self.spec.hidden;
        let mut hidden_pre = Vec::with_capacity(4);
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(4);
        for (hi, h) in layout.heads.iter().enumerate() {
            let w1 = &p[h.w1.clone()];
            let mut hz: Vec<f64> = p[h.b1.clone()].to_vec();
            for (u, hv) in hz.iter_mut().enumerate() {
                *hv += w1[u * f..(u + 1) * f]
                    .iter()
                    .zip(feat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            let w2 = &p[h.w2.clone()];
            let mut o: Vec<f64> = p[h.b2.clone()].to_vec();
            for (m, ov) in o.iter_mut().enumerate() {
                *ov += w2[m * hidden..(m + 1) * hidden]
                    .iter()
                    .zip(&hz)
                    .map(|(a, z)| a * z.max(0.0))
                    .sum::<f64>();
            }
            check_finite(&o, 3 + hi)?;
            hidden_pre.push(hz);
            outs.push(o);
        }
        let output = NetOutput {
            logits: [outs[0][0], outs[0][1]],
            reg: [outs[1][0], outs[2][0], outs[3][0]],
        };
        Ok(Trace {
            input: input.to_vec(),
            conv_pre,
            pooled,
            argmax,
            hidden_pre,
            output,
        })
    }

    /// Loss over a batch plus its gradient, accumulated into `grad`.
    pub fn loss_and_grad(
        &self,
        inputs: &[&[f64]],
        targets: &[Target],
        grad: &mut [f64],
    ) -> Result<TrainingLoss> {
        if grad.len() != self.params.len() {
            return Err(Error::Dimension(
                "gradient buffer has the wrong length".into(),
            ));
        }
        let traces = inputs
            .iter()
            .map(|x| self.trace(x))
            .collect::<Result<Vec<_>>>()?;
        let outputs: Vec<NetOutput> = traces.iter().map(|t| t.output).collect();
        let loss = batch_loss(&outputs, targets)?;
        let n = targets.len() as f64;
        let n_tree = targets.iter().filter(|t| t.is_tree).count() as f64;
        for (tr, tg) in traces.iter().zip(targets) {
            let pt = tree_probability(tr.output.logits);
            let y = if tg.is_tree { 1.0 } else { 0.0 };
            let d_logits = [((1.0 - pt) - (1.0 - y)) / n, (pt - y) / n];
            let mut d_reg = [0.0; REG_HEADS];
            if tg.is_tree {
                for h in 0..REG_HEADS {
                    d_reg[h] = 2.0 * (tr.output.reg[h] - tg.scaled[h]) / n_tree;
                }
            }
            self.backward(tr, d_logits, d_reg, grad)?;
        }
        Ok(loss)
    }

    /// Backpropagates output gradients through one trace.
    pub fn backward(
        &self,
        tr: &Trace,
        d_logits: [f64; 2],
        d_reg: [f64; REG_HEADS],
        grad: &mut [f64],
    ) -> Result<()> {
        let layout = Layout::new(&self.spec);
        let lengths = self.spec.lengths();
        let k = self.spec.kernel;
        let pad = k / 2;
        let hidden = self.spec.hidden;
        let p = &self.params;
        let feat = &tr.pooled[2];
        let f = feat.len();
        let mut d_feat = vec![0.0; f];

        for (hi, h) in layout.heads.iter().enumerate() {
            let d_out: Vec<f64> = if hi == 0 {
                d_logits.to_vec()
            } else {
                vec![d_reg[hi - 1]]
            };
            if d_out.iter().all(|&d| d == 0.0) {
                continue;
            }
            let hz = &tr.hidden_pre[hi];
            let w2 = &p[h.w2.clone()];
            let mut d_hidden = vec![0.0; hidden];
            for m in 0..h.out {
                grad[h.b2.start + m] += d_out[m];
                for u in 0..hidden {
                    grad[h.w2.start + m * hidden + u] += d_out[m] * hz[u].max(0.0);
                    d_hidden[u] += d_out[m] * w2[m * hidden + u];
                }
            }
            let w1 = &p[h.w1.clone()];
            for u in 0..hidden {
                if hz[u] <= 0.0 {
                    continue;
                }
                let d = d_hidden[u];
                grad[h.b1.start + u] += d;
                let gw = &mut grad[h.w1.start + u * f..h.w1.start + (u + 1) * f];
                for (g, x) in gw.iter_mut().zip(feat) {
                    *g += d * x;
                }
                for (df, w) in d_feat.iter_mut().zip(&w1[u * f..(u + 1) * f]) {
                    *df += d * w;
                }
            }
        }
        check_finite(&d_feat, 3)?;

        let mut d_pooled = d_feat;
        for li in (0..3).rev() {
            let c = &layout.conv[li];
            let l = lengths[li];
            let lo = lengths[li + 1];
            let z = &tr.conv_pre[li];
            let mut dz = vec![0.0; c.cout * l];
            for co in 0..c.cout {
                for s in 0..lo {
                    let t = tr.argmax[li][co * lo + s];
                    if z[co * l + t] > 0.0 {
                        dz[co * l + t] += d_pooled[co * lo + s];
                    }
                }
            }
            let x: &[f64] = if li == 0 {
                &tr.input
            } else {
                &tr.pooled[li - 1]
            };
            let w = &p[c.w.clone()];
            let mut dx = vec![0.0; c.cin * l];
            for co in 0..c.cout {
                let dzr = &dz[co * l..(co + 1) * l];
                grad[c.b.start + co] += dzr.iter().sum::<f64>();
                for ci in 0..c.cin {
                    let xr = &x[ci * l..(ci + 1) * l];
                    for j in 0..k {
                        let (t0, t1) = (pad.saturating_sub(j), (l + pad).saturating_sub(j).min(l));
                        let shift = j as isize - pad as isize;
                        let wi = (co * c.cin + ci) * k + j;
                        let mut gw = 0.0;
                        let wv = w[wi];
                        for t in t0..t1 {
                            let src = (t as isize + shift) as usize;
                            gw += dzr[t] * xr[src];
                            if li > 0 {
                                dx[ci * l + src] += dzr[t] * wv;
                            }
                        }
                        grad[c.w.start + wi] += gw;
                    }
                }
            }
            check_finite(&dx, li)?;
            d_pooled = dx;
        }
        Ok(())
    }
}

/// Mean cross-entropy plus the per-head mean squared errors over tree samples.
pub fn batch_loss(outputs: &[NetOutput], targets: &[Target]) -> Result<TrainingLoss> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if outputs.len() != targets.len() {
        return Err(Error::Dimension(
            "outputs and targets differ in length".into(),
        ));
    }
    let n = outputs.len() as f64;
    let mut seg = 0.0;
    let mut sq = [0.0; REG_HEADS];
    let mut n_tree = 0usize;
    for (o, t) in outputs.iter().zip(targets) {
        // -ln softmax(l)[y] = ln(1 + e^(l_other - l_y))
        let (ly, lo) = if t.is_tree {
            (o.logits[1], o.logits[0])
        } else {
            (o.logits[0], o.logits[1])
        };
        seg += softplus(lo - ly);
        if t.is_tree {
            n_tree += 1;
            for h in 0..REG_HEADS {
                sq[h] += (o.reg[h] - t.scaled[h]).powi(2);
            }
        }
    }
    let seg = seg / n;
    let reg = if n_tree == 0 {
        0.0
    } else {
        sq.iter().map(|s| s / n_tree as f64).sum()
    };
    Ok(TrainingLoss {
        seg,
        reg,
        total: seg + reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(bands: usize, ch: usize, seed: u64) -> Network {
        let spec = NetworkSpec {
            bands,
            channels: [ch; 3],
            kernel: 3,
            pool: 2,
            hidden: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::init(spec, &mut rng).unwrap()
    }

    /// Straightforward re-implementation that indexes tensors by name and
    /// uses explicit zero padding.
    fn reference_forward(net: &Network, x: &[f64]) -> ([f64; 2], [f64; 3]) {
        let s = net.spec();
        let mut tensors = std::collections::HashMap::new();
        let mut at = 0;
        for (name, shape) in net.tensor_shapes() {
            let n: usize = shape.iter().product();
            tensors.insert(name, net.params()[at..at + n].to_vec());
            at += n;
        }
        let mut act: Vec<Vec<f64>> = vec![x.to_vec()];
        for i in 0..3 {
            let w = &tensors[&format!("conv{i}.weight")];
            let b = &tensors[&format!("conv{i}.bias")];
            let cin = act.len();
            let l = act[0].len();
            let pad = s.kernel / 2;
            let padded: Vec<Vec<f64>> = act
                .iter()
                .map(|r| {
                    let mut v = vec![0.0; pad];
                    v.extend(r);
                    v.extend(vec![0.0; pad]);
                    v
                })
                .collect();
            let mut next = Vec::new();
            for co in 0..s.channels[i] {
                let mut row = Vec::new();
                for t in 0..l {
                    let mut acc = b[co];
                    for (ci, pr) in padded.iter().enumerate() {
                        for j in 0..s.kernel {
                            acc += w[co * cin * s.kernel + ci * s.kernel + j] * pr[t + j];
                        }
                    }
                    row.push(acc.max(0.0));
                }
                let pooled: Vec<f64> = row
                    .chunks(s.pool)
                    .map(|c| c.iter().cloned().fold(f64::MIN, f64::max))
                    .collect();
                next.push(pooled);
            }
            act = next;
        }
        let feat: Vec<f64> = act.concat();
        let head = |name: &str| -> Vec<f64> {
            let w1 = &tensors[&format!("{name}.fc1.weight")];
            let b1 = &tensors[&format!("{name}.fc1.bias")];
            let w2 = &tensors[&format!("{name}.fc2.weight")];
            let b2 = &tensors[&format!("{name}.fc2.bias")];
            let h: Vec<f64> = (0..s.hidden)
                .map(|u| {
                    (b1[u]
                        + (0..feat.len())
                            .map(|i| w1[u * feat.len() + i] * feat[i])
                            .sum::<f64>())
                    .max(0.0)
                })
                .collect();
            (0..b2.len())
                .map(|m| {
                    b2[m]
                        + (0..s.hidden)
                            .map(|u| w2[m * s.hidden + u] * h[u])
                            .sum::<f64>()
                })
                .collect()
        };
        let seg = head("seg");
        (
            [seg[0], seg[1]],
            [head("ab")[0], head("ar")[0], head("ant")[0]],
        )
    }

    #[test]
    fn zero_network_gives_even_logits() {
        let net = Network::zeros(NetworkSpec::new(16)).unwrap();
        let out = net.forward(&[0.3; 16]).unwrap();
        assert_eq!(out.logits, [0.0, 0.0]);
        assert_eq!(tree_probability(out.logits), 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_checks_input() {
        let net = toy(8, 2, 1);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.forward(&x[..7]), Err(Error::Dimension(_))));
        let mut bad = x.clone();
        bad[3] = f64::NAN;
        assert!(matches!(
            net.forward(&bad),
            Err(Error::NonFinite { layer: 0 })
        ));
    }

    #[test]
    fn default_spec_sizes() {
        let s = NetworkSpec::new(64);
        assert_eq!(s.lengths(), [64, 32, 16, 8]);
        assert_eq!(s.feature_len(), 256);
        let tensor_total: usize = Network::zeros(s.clone())
            .unwrap()
            .tensor_shapes()
            .iter()
            .map(|(_, sh)| sh.iter().product::<usize>())
            .sum();
        assert_eq!(tensor_total, s.param_count());
        // odd lengths use ceil pooling
        assert_eq!(NetworkSpec::new(5).lengths(), [5, 3, 2, 1]);
    }

    #[test]
    fn loss_examples() {
        let t = Target {
            is_tree: true,
            scaled: [0.5, 0.5, 0.5],
        };
        let even = NetOutput {
            logits: [0.0, 0.0],
            reg: [0.5; 3],
        };
        let l = batch_loss(&[even], &[t]).unwrap();
        assert!((l.seg - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.reg, 0.0);

        let sure = NetOutput {
            logits: [-800.0, 800.0],
            reg: [0.6, 0.7, 0.8],
        };
        let l = batch_loss(&[sure], &[t]).unwrap();
        assert_eq!(l.seg, 0.0);
        assert!((l.reg - 0.14).abs() < 1e-12);
        assert_eq!(l.total, l.seg + l.reg);

        let perfect = NetOutput {
            logits: [-800.0, 800.0],
            reg: [0.5; 3],
        };
        assert_eq!(batch_loss(&[perfect], &[t]).unwrap().total, 0.0);

        // background regressions are ignored
        let bg = Target {
            is_tree: false,
            scaled: [9.0; 3],
        };
        let o = NetOutput {
            logits: [800.0, -800.0],
            reg: [0.0; 3],
        };
        assert_eq!(batch_loss(&[o], &[bg]).unwrap().total, 0.0);
        assert!(batch_loss(&[], &[]).is_err());
    }

    #[test]
    fn seg_weights_ignore_regression_error() {
        let net = toy(8, 2, 3);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let tr = net.trace(&x).unwrap();
        let mut g = vec![0.0; net.params().len()];
        net.backward(&tr, [0.0, 0.0], [0.3, -0.2, 0.1], &mut g)
            .unwrap();
        let layout = Layout::new(net.spec());
        let seg = &layout.heads[0];
        assert!(g[seg.w1.start..seg.b2.end].iter().all(|&v| v == 0.0));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // all-zero weights with biases matching the targets exactly
        let spec = NetworkSpec {
            bands: 4,
            channels: [2; 3],
            kernel: 3,
            pool: 2,
            hidden: 2,
        };
        let mut net = Network::zeros(spec).unwrap();
        let layout = Layout::new(net.spec());
        let target = [0.2, 0.4, 0.6];
        for (h, v) in target.iter().enumerate() {
            net.params_mut()[layout.heads[h + 1].b2.start] = *v;
        }
        let x = [0.1, 0.2, 0.3, 0.4];
        let t = Target {
            is_tree: true,
            scaled: target,
        };
        let mut g = vec![0.0; net.params().len()];
        let bg = Target {
            is_tree: false,
            scaled: [0.0; 3],
        };
        // balanced classes with even logits make the CE gradient cancel
        let l = net.loss_and_grad(&[&x, &x], &[t, bg], &mut g).unwrap();
        assert_eq!(l.reg, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    /// Central differences, skipping parameters whose ±h probes cross a
    /// ReLU or pooling kink. Returns the worst relative error.
    pub(crate) fn max_gradient_error(
        net: &Network,
        xs: &[Vec<f64>],
        ts: &[Target],
    ) -> (f64, usize) {
        let inputs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut g = vec![0.0; net.params().len()];
        net.loss_and_grad(&inputs, ts, &mut g).unwrap();
        let pattern = |n: &Network| -> Vec<usize> {
            inputs
                .iter()
                .flat_map(|x| n.trace(x).unwrap().activation_pattern())
                .collect()
        };
        let base = pattern(net);
        let loss = |n: &Network| {
            let outs: Vec<NetOutput> = inputs.iter().map(|x| n.forward(x).unwrap()).collect();
            batch_loss(&outs, ts).unwrap().total
        };
        let h = 1e-3;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            if pattern(&plus) != base || pattern(&minus) != base {
                continue;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = g[i].abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((g[i] - numeric).abs() / denom);
            checked += 1;
        }
        (worst, checked)
    }

    pub(crate) fn random_case(seed: u64) -> (Network, Vec<Vec<f64>>, Vec<Target>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetworkSpec {
            bands: rng.gen_range(1..=8),
            channels: [
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
            ],
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            pool: rng.gen_range(1..=2),
            hidden: rng.gen_range(1..=4),
        };
        let mut net = Network::zeros(spec.clone()).unwrap();
        let n = Normal::new(0.0, 0.3).unwrap();
        for p in net.params_mut() {
            *p = n.sample(&mut rng);
        }
        let batch = rng.gen_range(2..=4);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..spec.bands).map(|_| n.sample(&mut rng) * 3.0).collect())
            .collect();
        let ts: Vec<Target> = (0..batch)
            .map(|i| Target {
                is_tree: i % 2 == 0,
                scaled: [rng.gen(), rng.gen(), rng.gen()],
            })
            .collect();
        (net, xs, ts)
    }

    #[test]
    fn gradient_matches_finite_differences_on_toy_net() {
        let net = toy(4, 2, 11);
        let xs = vec![vec![0.5, -1.0, 2.0, 0.3], vec![-0.2, 0.8, 0.1, -1.5]];
        let ts = vec![
            Target {
                is_tree: true,
                scaled: [0.4, 0.2, 0.9],
            },
            Target {
                is_tree: false,
                scaled: [0.0; 3],
            },
        ];
        let (err, checked) = max_gradient_error(&net, &xs, &ts);
        assert!(
            checked > net.params().len() / 2,
            "only {checked} parameters checked"
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn matches_reference_forward() {
        for seed in 0..20 {
            let (net, xs, _) = random_case(seed);
            for x in &xs {
                let (logits, reg) = reference_forward(&net, x);
                let out = net.forward(x).unwrap();
                for (a, b) in out
                    .logits
                    .iter()
                    .zip(&logits)
                    .chain(out.reg.iter().zip(&reg))
                {
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gradients_hold_on_random_nets(seed in any::<u64>()) {
            let (net, xs, ts) = random_case(seed);
            let (err, _) = max_gradient_error(&net, &xs, &ts);
            prop_assert!(err < 1e-4, "max relative error {}", err);
        }

        #[test]
        fn softmax_confidence_bounds(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let p = tree_probability([a, b]);
            prop_assert!((p + tree_probability([b, a]) - 1.0).abs() < 1e-12);
            prop_assert!(p.max(1.0 - p) >= 0.5);
        }
    }
}
