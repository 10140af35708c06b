//! Small layer toolkit on top of candle: grouped parameter store,
//! conv + batch-norm + SiLU blocks, CSP bottlenecks and SPP pooling.
//!
//! Every learnable parameter belongs to exactly one of the three groups
//! (encoder, detect head, segment heads); the trainer freezes and thaws
//! whole groups.

use std::cell::RefCell;
use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Head;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Enc,
    Det,
    Seg,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Enc, Group::Det, Group::Seg];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Enc => "enc",
            Group::Det => "det",
            Group::Seg => "seg",
        }
    }
}

/// Which groups run in training mode (batch statistics + running-stat
/// updates) and which heads are computed at all.
#[derive(Debug, Clone)]
pub struct ForwardMode {
    pub train_groups: BTreeSet<Group>,
    pub active_heads: BTreeSet<Head>,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            train_groups: BTreeSet::new(),
            active_heads: Head::ALL.into_iter().collect(),
        }
    }

    pub fn train_all() -> Self {
        ForwardMode {
            train_groups: Group::ALL.into_iter().collect(),
            active_heads: Head::ALL.into_iter().collect(),
        }
    }

    pub fn is_train(&self, g: Group) -> bool {
        self.train_groups.contains(&g)
    }
}

pub struct NamedParam {
    pub name: String,
    pub group: Group,
    pub var: Var,
}

/// Non-trainable persistent state (batch-norm running statistics).
pub struct NamedBuffer {
    pub name: String,
    pub group: Group,
    pub value: RefCell<Tensor>,
}

/// Creates parameters with a deterministic seeded init stream and records
/// them by (group, name) for optimization and checkpointing.
pub struct ParamStore {
    pub device: Device,
    pub dtype: DType,
    rng: RefCell<ChaCha8Rng>,
    pub params: Vec<std::rc::Rc<NamedParam>>,
    pub buffers: Vec<std::rc::Rc<NamedBuffer>>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        ParamStore {
            device,
            dtype: DType::F32,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// He-uniform tensor: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    fn init_uniform(&self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Tensor::from_vec(vals, shape, &self.device)?)
    }

    pub fn param_init(
        &mut self,
        group: Group,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<std::rc::Rc<NamedParam>> {
        let t = self.init_uniform(shape, fan_in)?;
        self.push_param(group, name, t)
    }

    pub fn param_const(
        &mut self,
        group: Group,
        name: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<std::rc::Rc<NamedParam>> {
        let t = Tensor::full(value as f32, shape, &self.device)?;
        self.push_param(group, name, t)
    }

    fn push_param(
        &mut self,
        group: Group,
        name: &str,
        t: Tensor,
    ) -> Result<std::rc::Rc<NamedParam>> {
        let p = std::rc::Rc::new(NamedParam {
            name: name.to_string(),
            group,
            var: Var::from_tensor(&t)?,
        });
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn buffer_const(
        &mut self,
        group: Group,
        name: &str,
        shape: &[usize],
        value: f64,
    ) -> Result<std::rc::Rc<NamedBuffer>> {
        let t = Tensor::full(value as f32, shape, &self.device)?;
        let b = std::rc::Rc::new(NamedBuffer {
            name: name.to_string(),
            group,
            value: RefCell::new(t),
        });
        self.buffers.push(b.clone());
        Ok(b)
    }

    pub fn params_of(&self, groups: &BTreeSet<Group>) -> Vec<std::rc::Rc<NamedParam>> {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .cloned()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }
}

pub struct BatchNorm {
    pub weight: std::rc::Rc<NamedParam>,
    pub bias: std::rc::Rc<NamedParam>,
    pub running_mean: std::rc::Rc<NamedBuffer>,
    pub running_var: std::rc::Rc<NamedBuffer>,
    pub momentum: f64,
    pub eps: f64,
    pub group: Group,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, group: Group, name: &str, ch: usize) -> Result<Self> {
        Ok(BatchNorm {
            weight: store.param_const(group, &format!("{name}.bn.weight"), &[ch], 1.0)?,
            bias: store.param_const(group, &format!("{name}.bn.bias"), &[ch], 0.0)?,
            running_mean: store.buffer_const(group, &format!("{name}.bn.running_mean"), &[ch], 0.0)?,
            running_var: store.buffer_const(group, &format!("{name}.bn.running_var"), &[ch], 1.0)?,
            momentum: 0.03,
            eps: 1e-5,
            group,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let train = mode.is_train(self.group);
        let (mean, var) = if train {
            let n = (x.elem_count() / c) as f64;
            let m = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&m)?;
            let v = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            // Update running stats outside the autodiff graph.
            {
                let md = m.detach().reshape(&[c])?;
                let vd = v.detach().reshape(&[c])?;
                // Unbiased variance for the running estimate.
                let vd = (vd * (n / (n - 1.0).max(1.0)))?;
                let mut rm = self.running_mean.value.borrow_mut();
                *rm = ((&*rm * (1.0 - self.momentum))? + (md * self.momentum)?)?;
                let mut rv = self.running_var.value.borrow_mut();
                *rv = ((&*rv * (1.0 - self.momentum))? + (vd * self.momentum)?)?;
            }
            (m, v)
        } else {
            let m = self.running_mean.value.borrow().reshape(&[1, c, 1, 1])?;
            let v = self.running_var.value.borrow().reshape(&[1, c, 1, 1])?;
            (m, v)
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = self.weight.var.as_tensor().reshape(&[1, c, 1, 1])?;
        let b = self.bias.var.as_tensor().reshape(&[1, c, 1, 1])?;
        Ok(xhat.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

/// Conv2d + BatchNorm + SiLU.
pub struct ConvBlock {
    pub weight: std::rc::Rc<NamedParam>,
    pub bn: BatchNorm,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = store.param_init(
            group,
            &format!("{name}.conv.weight"),
            &[cout, cin, k, k],
            cin * k * k,
        )?;
        Ok(ConvBlock {
            weight,
            bn: BatchNorm::new(store, group, name, cout)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let y = x.conv2d(self.weight.var.as_tensor(), self.padding, self.stride, 1, 1)?;
        let y = self.bn.forward(&y, mode)?;
        Ok(candle_nn::ops::silu(&y)?)
    }
}

/// Plain conv with bias, no normalization or activation (prediction layers).
pub struct ConvPred {
    pub weight: std::rc::Rc<NamedParam>,
    pub bias: std::rc::Rc<NamedParam>,
    pub padding: usize,
}

impl ConvPred {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        let weight = store.param_init(
            group,
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
        )?;
        let bias = store.param_const(group, &format!("{name}.bias"), &[cout], 0.0)?;
        Ok(ConvPred { weight, bias, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.var.as_tensor(), self.padding, 1, 1, 1)?;
        let b = self.bias.var.as_tensor().reshape(&[1, y.dim(1)?, 1, 1])?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Residual bottleneck used inside CSP stages.
pub struct Bottleneck {
    cv1: ConvBlock,
    cv2: ConvBlock,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        ch: usize,
        shortcut: bool,
    ) -> Result<Self> {
        Ok(Bottleneck {
            cv1: ConvBlock::new(store, group, &format!("{name}.cv1"), ch, ch, 1, 1)?,
            cv2: ConvBlock::new(store, group, &format!("{name}.cv2"), ch, ch, 3, 1)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x, mode)?, mode)?;
        if self.shortcut {
            Ok((x + y)?)
        } else {
            Ok(y)
        }
    }
}

/// CSP stage: the input is split into a processed path (a chain of
/// bottlenecks) and a shortcut path, merged by concatenation.
pub struct CspBlock {
    cv1: ConvBlock,
    cv2: ConvBlock,
    cv3: ConvBlock,
    blocks: Vec<Bottleneck>,
}

impl CspBlock {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
    ) -> Result<Self> {
        let hidden = (cout / 2).max(4);
        let blocks = (0..n)
            .map(|i| Bottleneck::new(store, group, &format!("{name}.m{i}"), hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        Ok(CspBlock {
            cv1: ConvBlock::new(store, group, &format!("{name}.cv1"), cin, hidden, 1, 1)?,
            cv2: ConvBlock::new(store, group, &format!("{name}.cv2"), cin, hidden, 1, 1)?,
            cv3: ConvBlock::new(store, group, &format!("{name}.cv3"), hidden * 2, cout, 1, 1)?,
            blocks,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let mut a = self.cv1.forward(x, mode)?;
        for b in &self.blocks {
            a = b.forward(&a, mode)?;
        }
        let c = self.cv2.forward(x, mode)?;
        let y = Tensor::cat(&[&a, &c], 1)?;
        self.cv3.forward(&y, mode)
    }
}

/// Same-size max pooling with odd kernel `k`, built from edge-replicated
/// padding and separable shifted maxima so gradients flow through it.
pub fn max_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    debug_assert!(k % 2 == 1);
    let p = k / 2;
    let (h, w) = (x.dim(2)?, x.dim(3)?);
    // Horizontal pass.
    let xp = x.pad_with_same(3, p, p)?;
    let mut y = xp.narrow(3, 0, w)?;
    for dx in 1..k {
        y = y.maximum(&xp.narrow(3, dx, w)?)?;
    }
    // Vertical pass.
    let yp = y.pad_with_same(2, p, p)?;
    let mut out = yp.narrow(2, 0, h)?;
    for dy in 1..k {
        out = out.maximum(&yp.narrow(2, dy, h)?)?;
    }
    Ok(out)
}

/// Spatial pyramid pooling: parallel same-size max pools of kernels 5, 9, 13,
/// concatenated with the input path.
pub struct Spp {
    cv1: ConvBlock,
    cv2: ConvBlock,
    kernels: [usize; 3],
}

impl Spp {
    pub fn new(
        store: &mut ParamStore,
        group: Group,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let hidden = (cin / 2).max(4);
        Ok(Spp {
            cv1: ConvBlock::new(store, group, &format!("{name}.cv1"), cin, hidden, 1, 1)?,
            cv2: ConvBlock::new(store, group, &format!("{name}.cv2"), hidden * 4, cout, 1, 1)?,
            kernels: [5, 9, 13],
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let y = self.cv1.forward(x, mode)?;
        let pools = self
            .kernels
            .iter()
            .map(|&k| max_pool_same(&y, k))
            .collect::<Result<Vec<_>>>()?;
        let cat = Tensor::cat(&[&y, &pools[0], &pools[1], &pools[2]], 1)?;
        self.cv2.forward(&cat, mode)
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(x.upsample_nearest2d(x.dim(2)? * 2, x.dim(3)? * 2)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_same_matches_naive() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f32, 1f32, (1, 2, 7, 9), &dev).unwrap();
        let y = max_pool_same(&x, 5).unwrap();
        let xf: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yf: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let (c, h, w) = (2usize, 7usize, 9usize);
        let at = |buf: &[f32], ci: usize, yy: i64, xx: i64| -> f32 {
            let yy = yy.clamp(0, h as i64 - 1) as usize;
            let xx = xx.clamp(0, w as i64 - 1) as usize;
            buf[ci * h * w + yy * w + xx]
        };
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let mut m = f32::NEG_INFINITY;
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            m = m.max(at(&xf, ci, yy as i64 + dy, xx as i64 + dx));
                        }
                    }
                    let got = yf[ci * h * w + yy * w + xx];
                    assert!((m - got).abs() < 1e-6, "{ci},{yy},{xx}: {m} vs {got}");
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(0, dev.clone());
        let bn = BatchNorm::new(&mut store, Group::Enc, "t", 3).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 4, 4), &dev).unwrap();
        let eval = ForwardMode::eval();
        let y0 = bn.forward(&x, &eval).unwrap();
        // Fresh stats: mean 0, var 1 -> output is weight*x + bias = x.
        let diff = (y0 - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-3, "{diff}");
        // Training forward moves the running stats.
        let train = ForwardMode::train_all();
        bn.forward(&x, &train).unwrap();
        let rm: Vec<f32> = bn.running_mean.value.borrow().to_vec1().unwrap();
        assert!(rm.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn param_store_records_groups() {
        let mut store = ParamStore::new(0, Device::Cpu);
        ConvBlock::new(&mut store, Group::Enc, "a", 3, 8, 3, 1).unwrap();
        ConvPred::new(&mut store, Group::Det, "b", 8, 6, 1).unwrap();
        let enc: BTreeSet<Group> = [Group::Enc].into_iter().collect();
        let det: BTreeSet<Group> = [Group::Det].into_iter().collect();
        assert_eq!(store.params_of(&enc).len(), 3); // conv.weight, bn.weight, bn.bias
        assert_eq!(store.params_of(&det).len(), 2); // weight, bias
        assert!(store.num_params() > 0);
    }
}
