//! Model builders: MLP, small CNN, and a miniature width/depth-parameterized
//! residual network, plus the layer-group reset intervention.
//!
//! Every parameter belongs to exactly one of six reset groups. For the
//! residual network, group 1 is the stem convolution (with its norm), groups
//! 2-5 are the four modules, and group 6 is the output head. MLP/CNN map the
//! same ids onto first layer / evenly partitioned hidden layers / output
//! layer, so reset experiments keep their meaning across architectures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Forward evaluation mode. Train mode updates normalization running
/// statistics; eval mode is side-effect-free.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
    MiniResnet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Base channel count w; modules run at w, 2w, 4w, 8w.
    #[serde(default = "default_width")]
    pub width_w: usize,
    /// Residual blocks per module.
    #[serde(default = "default_depth")]
    pub depth_d: usize,
    pub num_classes: usize,
    /// Per-example input shape C x H x W.
    pub input_shape: [usize; 3],
    /// Hidden layer sizes (MLP only).
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
}

fn default_width() -> usize {
    8
}
fn default_depth() -> usize {
    2
}

pub const GROUP_IDS: [u8; 6] = [1, 2, 3, 4, 5, 6];

#[derive(Clone)]
pub struct Linear<E: Scalar> {
    pub weight: Tensor<E>, // [in, out]
    pub bias: Tensor<E>,   // [out]
}

impl<E: Scalar> Linear<E> {
    fn new(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![input, output]).with_grad(),
            bias: Tensor::zeros(vec![output]).with_grad(),
        }
    }
}

#[derive(Clone)]
pub struct Conv<E: Scalar> {
    pub weight: Tensor<E>, // [out_c, in_c, k, k]
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> Conv<E> {
    fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Conv {
            weight: Tensor::zeros(vec![out_c, in_c, k, k]).with_grad(),
            bias: bias.then(|| Tensor::zeros(vec![out_c]).with_grad()),
            stride,
            pad,
        }
    }
}

#[derive(Clone)]
pub struct BatchNorm<E: Scalar> {
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Scalar> BatchNorm<E> {
    fn new(channels: usize) -> Self {
        BatchNorm {
            scale: Tensor::zeros(vec![channels]).with_grad(),
            shift: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn reset_stats(&mut self) {
        self.running_mean.iter_mut().for_each(|v| *v = E::zero());
        self.running_var.iter_mut().for_each(|v| *v = E::one());
    }
}

#[derive(Clone)]
pub struct ResidualBlock<E: Scalar> {
    conv1: Conv<E>,
    bn1: BatchNorm<E>,
    conv2: Conv<E>,
    bn2: BatchNorm<E>,
    /// 1x1 projection when the block changes resolution or channel count.
    shortcut: Option<(Conv<E>, BatchNorm<E>)>,
}

impl<E: Scalar> ResidualBlock<E> {
    fn new(in_c: usize, out_c: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || in_c != out_c)
            .then(|| (Conv::new(in_c, out_c, 1, stride, 0, false), BatchNorm::new(out_c)));
        ResidualBlock {
            conv1: Conv::new(in_c, out_c, 3, stride, 1, false),
            bn1: BatchNorm::new(out_c),
            conv2: Conv::new(out_c, out_c, 3, 1, 1, false),
            bn2: BatchNorm::new(out_c),
            shortcut,
        }
    }
}

#[derive(Clone)]
pub enum Layer<E: Scalar> {
    Linear(Linear<E>),
    Conv(Conv<E>),
    BatchNorm(BatchNorm<E>),
    Relu,
    Flatten,
    GlobalAvgPool,
    Block(ResidualBlock<E>),
}

impl<E: Scalar> Layer<E> {
    /// Visits trainable parameters in the same order `forward` binds them.
    pub(crate) fn visit_params(&self, f: &mut dyn FnMut(&Tensor<E>)) {
        match self {
            Layer::Linear(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Layer::Conv(c) => {
                f(&c.weight);
                if let Some(b) = &c.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&bn.scale);
                f(&bn.shift);
            }
            Layer::Block(b) => {
                f(&b.conv1.weight);
                f(&b.bn1.scale);
                f(&b.bn1.shift);
                f(&b.conv2.weight);
                f(&b.bn2.scale);
                f(&b.bn2.shift);
                if let Some((sc, sbn)) = &b.shortcut {
                    f(&sc.weight);
                    f(&sbn.scale);
                    f(&sbn.shift);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor<E>)) {
        match self {
            Layer::Linear(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Layer::Conv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&mut bn.scale);
                f(&mut bn.shift);
            }
            Layer::Block(b) => {
                f(&mut b.conv1.weight);
                f(&mut b.bn1.scale);
                f(&mut b.bn1.shift);
                f(&mut b.conv2.weight);
                f(&mut b.bn2.scale);
                f(&mut b.bn2.shift);
                if let Some((sc, sbn)) = &mut b.shortcut {
                    f(&mut sc.weight);
                    f(&mut sbn.scale);
                    f(&mut sbn.shift);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<E>)) {
        match self {
            Layer::BatchNorm(bn) => f(bn),
            Layer::Block(b) => {
                f(&mut b.bn1);
                f(&mut b.bn2);
                if let Some((_, sbn)) = &mut b.shortcut {
                    f(sbn);
                }
            }
            _ => {}
        }
    }

    /// He-normal fan-in init for weights, zero biases, identity norms.
    /// Only weight draws consume randomness, so layout changes elsewhere do
    /// not shift the stream.
    fn init(&mut self, rng: &mut Rng) {
        fn he_fill<E: Scalar>(t: &mut Tensor<E>, fan_in: usize, rng: &mut Rng) {
            use rand::Rng as _;
            use rand_distr::StandardNormal;
            let std = (2.0 / fan_in as f64).sqrt();
            for v in t.data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = E::from_f64(z * std);
            }
        }
        fn init_conv<E: Scalar>(c: &mut Conv<E>, rng: &mut Rng) {
            let shape = c.weight.shape().to_vec();
            he_fill(&mut c.weight, shape[1] * shape[2] * shape[3], rng);
            if let Some(b) = &mut c.bias {
                b.data.iter_mut().for_each(|v| *v = E::zero());
            }
        }
        fn init_bn<E: Scalar>(bn: &mut BatchNorm<E>) {
            bn.scale.data.iter_mut().for_each(|v| *v = E::one());
            bn.shift.data.iter_mut().for_each(|v| *v = E::zero());
            bn.reset_stats();
        }
        match self {
            Layer::Linear(l) => {
                let fan_in = l.weight.shape()[0];
                he_fill(&mut l.weight, fan_in, rng);
                l.bias.data.iter_mut().for_each(|v| *v = E::zero());
            }
            Layer::Conv(c) => init_conv(c, rng),
            Layer::BatchNorm(bn) => init_bn(bn),
            Layer::Block(b) => {
                init_conv(&mut b.conv1, rng);
                init_bn(&mut b.bn1);
                init_conv(&mut b.conv2, rng);
                init_bn(&mut b.bn2);
                if let Some((sc, sbn)) = &mut b.shortcut {
                    init_conv(sc, rng);
                    init_bn(sbn);
                }
            }
            _ => {}
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<E>,
        binds: &mut Vec<Var>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        fn bind<E: Scalar>(tape: &mut Tape<E>, binds: &mut Vec<Var>, t: &Tensor<E>) -> Var {
            let v = tape.leaf(t.clone());
            binds.push(v);
            v
        }
        fn fwd_conv<E: Scalar>(
            c: &Conv<E>,
            tape: &mut Tape<E>,
            binds: &mut Vec<Var>,
            x: Var,
        ) -> Result<Var> {
            let w = bind(tape, binds, &c.weight);
            let mut h = tape.conv2d(x, w, c.stride, c.pad)?;
            if let Some(b) = &c.bias {
                let bv = bind(tape, binds, b);
                h = tape.add_bias_channel(h, bv)?;
            }
            Ok(h)
        }
        fn fwd_bn<E: Scalar>(
            bn: &mut BatchNorm<E>,
            tape: &mut Tape<E>,
            binds: &mut Vec<Var>,
            x: Var,
            mode: Mode,
        ) -> Result<Var> {
            let s = bind(tape, binds, &bn.scale);
            let b = bind(tape, binds, &bn.shift);
            match mode {
                Mode::Train => {
                    let eps = E::from_f64(bn.eps);
                    let (y, mean, var) = tape.batch_norm_train(x, s, b, eps)?;
                    let mom = E::from_f64(bn.momentum);
                    let keep = E::one() - mom;
                    for (r, m) in bn.running_mean.iter_mut().zip(&mean) {
                        *r = keep * *r + mom * *m;
                    }
                    for (r, v) in bn.running_var.iter_mut().zip(&var) {
                        *r = keep * *r + mom * *v;
                    }
                    Ok(y)
                }
                Mode::Eval => tape.batch_norm_eval(
                    x,
                    s,
                    b,
                    &bn.running_mean,
                    &bn.running_var,
                    E::from_f64(bn.eps),
                ),
            }
        }
        match self {
            Layer::Linear(l) => {
                let w = bind(tape, binds, &l.weight);
                let b = bind(tape, binds, &l.bias);
                let h = tape.matmul(x, w)?;
                tape.add_bias_row(h, b)
            }
            Layer::Conv(c) => fwd_conv(c, tape, binds, x),
            Layer::BatchNorm(bn) => fwd_bn(bn, tape, binds, x, mode),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Flatten => {
                let shape = tape.value(x).shape().to_vec();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, vec![n, rest])
            }
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Block(blk) => {
                let h = fwd_conv(&blk.conv1, tape, binds, x)?;
                let h = fwd_bn(&mut blk.bn1, tape, binds, h, mode)?;
                let h = tape.relu(h);
                let h = fwd_conv(&blk.conv2, tape, binds, h)?;
                let h = fwd_bn(&mut blk.bn2, tape, binds, h, mode)?;
                let s = match &mut blk.shortcut {
                    Some((sc, sbn)) => {
                        let s = fwd_conv(sc, tape, binds, x)?;
                        fwd_bn(sbn, tape, binds, s, mode)?
                    }
                    None => x,
                };
                let sum = tape.add(h, s)?;
                Ok(tape.relu(sum))
            }
        }
    }
}

#[derive(Clone)]
pub struct Group<E: Scalar> {
    pub id: u8,
    pub layers: Vec<Layer<E>>,
}

#[derive(Clone)]
pub struct Network<E: Scalar> {
    pub config: ModelConfig,
    pub groups: Vec<Group<E>>,
    /// Master init seed; group g draws from a stream derived from (seed, g).
    pub init_seed: u64,
    last_bindings: Vec<Var>,
}

fn validate(config: &ModelConfig) -> Result<()> {
    let [c, h, w] = config.input_shape;
    if c == 0 || h == 0 || w == 0 || config.num_classes == 0 {
        return Err(Error::Config(
            "input_shape extents and num_classes must be positive".into(),
        ));
    }
    match config.kind {
        ModelKind::Mlp => {
            if config.hidden_sizes.is_empty() || config.hidden_sizes.contains(&0) {
                return Err(Error::Config(
                    "mlp requires at least one positive hidden size".into(),
                ));
            }
        }
        ModelKind::Cnn | ModelKind::MiniResnet => {
            if config.width_w == 0 || config.depth_d == 0 {
                return Err(Error::Config("width_w and depth_d must be positive".into()));
            }
            if config.kind == ModelKind::MiniResnet && (h < 16 || w < 16) {
                return Err(Error::Config(format!(
                    "mini_resnet needs spatial extent >= 16 for its four 2x downsamplings, got {h}x{w}"
                )));
            }
            if config.kind == ModelKind::Cnn && (h < 4 || w < 4) {
                return Err(Error::Config(format!(
                    "cnn needs spatial extent >= 4 for its two 2x downsamplings, got {h}x{w}"
                )));
            }
        }
    }
    Ok(())
}

/// Splits `items` into `cells` chunks whose sizes differ by at most one,
/// larger cells first.
pub(crate) fn even_chunks(count: usize, cells: usize) -> Vec<std::ops::Range<usize>> {
    let base = count / cells;
    let extra = count % cells;
    let mut ranges = Vec::with_capacity(cells);
    let mut start = 0;
    for i in 0..cells {
        let len = base + usize::from(i < extra);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

fn architecture<E: Scalar>(config: &ModelConfig) -> Vec<Group<E>> {
    let [c, _, _] = config.input_shape;
    let k = config.num_classes;
    let w = config.width_w;
    match config.kind {
        ModelKind::Mlp => {
            let input: usize = config.input_shape.iter().product();
            let hidden = &config.hidden_sizes;
            let mut groups: Vec<Group<E>> = vec![Group {
                id: 1,
                layers: vec![
                    Layer::Flatten,
                    Layer::Linear(Linear::new(input, hidden[0])),
                    Layer::Relu,
                ],
            }];
            // Hidden layers after the first, spread evenly over groups 2-5.
            let ranges = even_chunks(hidden.len() - 1, 4);
            for (gi, range) in ranges.into_iter().enumerate() {
                let mut layers = Vec::new();
                for li in range {
                    layers.push(Layer::Linear(Linear::new(hidden[li], hidden[li + 1])));
                    layers.push(Layer::Relu);
                }
                groups.push(Group {
                    id: 2 + gi as u8,
                    layers,
                });
            }
            groups.push(Group {
                id: 6,
                layers: vec![Layer::Linear(Linear::new(*hidden.last().unwrap(), k))],
            });
            groups
        }
        ModelKind::Cnn => {
            let conv = |ic, oc, s| Layer::Conv(Conv::new(ic, oc, 3, s, 1, true));
            vec![
                Group {
                    id: 1,
                    layers: vec![conv(c, w, 1), Layer::Relu],
                },
                Group {
                    id: 2,
                    layers: vec![conv(w, 2 * w, 2), Layer::Relu],
                },
                Group {
                    id: 3,
                    layers: vec![conv(2 * w, 2 * w, 1), Layer::Relu],
                },
                Group {
                    id: 4,
                    layers: vec![conv(2 * w, 4 * w, 2), Layer::Relu],
                },
                Group {
                    id: 5,
                    layers: vec![conv(4 * w, 4 * w, 1), Layer::Relu],
                },
                Group {
                    id: 6,
                    layers: vec![Layer::GlobalAvgPool, Layer::Linear(Linear::new(4 * w, k))],
                },
            ]
        }
        ModelKind::MiniResnet => {
            let mut groups = vec![Group {
                id: 1,
                layers: vec![
                    Layer::Conv(Conv::new(c, w, 3, 1, 1, false)),
                    Layer::BatchNorm(BatchNorm::new(w)),
                    Layer::Relu,
                ],
            }];
            let mut in_c = w;
            for m in 0..4u8 {
                let out_c = w << m; // w, 2w, 4w, 8w
                let mut layers = Vec::new();
                for b in 0..config.depth_d {
                    let stride = if b == 0 { 2 } else { 1 };
                    let block_in = if b == 0 { in_c } else { out_c };
                    layers.push(Layer::Block(ResidualBlock::new(block_in, out_c, stride)));
                }
                groups.push(Group {
                    id: 2 + m,
                    layers,
                });
                in_c = out_c;
            }
            groups.push(Group {
                id: 6,
                layers: vec![
                    Layer::GlobalAvgPool,
                    Layer::Linear(Linear::new(8 * w, k)),
                ],
            });
            groups
        }
    }
}

fn group_stream(seed: u64, group_id: u8) -> Rng {
    rng::rng_from(rng::derive_indexed(seed, "init-group", group_id as u64))
}

impl<E: Scalar> Network<E> {
    /// Deterministic architecture and parameters for a given (config, seed).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        validate(&config)?;
        let mut groups = architecture::<E>(&config);
        for g in &mut groups {
            let mut rng = group_stream(seed, g.id);
            for layer in &mut g.layers {
                layer.init(&mut rng);
            }
        }
        Ok(Network {
            config,
            groups,
            init_seed: seed,
            last_bindings: Vec::new(),
        })
    }

    /// Redraws the parameters of the named groups from the init distribution
    /// under `seed`; everything else stays bit-identical. Running statistics
    /// of reset groups return to their init values. Resetting all six groups
    /// reproduces `build(config, seed)` exactly.
    pub fn reset_groups(&mut self, ids: &[u8], seed: u64) -> Result<()> {
        for &id in ids {
            if !GROUP_IDS.contains(&id) {
                return Err(Error::Config(format!("unknown reset group id {id}")));
            }
        }
        for g in &mut self.groups {
            if ids.contains(&g.id) {
                let mut rng = group_stream(seed, g.id);
                for layer in &mut g.layers {
                    layer.init(&mut rng);
                }
            }
        }
        Ok(())
    }

    /// Logits for a batch shaped [N, C, H, W]. Train mode updates
    /// normalization running statistics; eval mode has no side effects.
    pub fn forward(&mut self, tape: &mut Tape<E>, x: &Tensor<E>, mode: Mode) -> Result<Var> {
        let want = &self.config.input_shape;
        let got = x.shape();
        if got.len() != 4 || got[1..] != want[..] {
            return Err(Error::Dim {
                op: "forward",
                lhs: got.to_vec(),
                rhs: want.to_vec(),
            });
        }
        let mut binds = Vec::new();
        let mut h = tape.leaf(x.clone());
        for group in &mut self.groups {
            for layer in &mut group.layers {
                h = layer.forward(tape, &mut binds, h, mode)?;
            }
        }
        self.last_bindings = binds;
        Ok(h)
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(u8, &Tensor<E>)) {
        for g in &self.groups {
            for layer in &g.layers {
                layer.visit_params(&mut |t| f(g.id, t));
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(u8, &mut Tensor<E>)) {
        for g in &mut self.groups {
            for layer in &mut g.layers {
                layer.visit_params_mut(&mut |t| f(g.id, t));
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    /// Flat coordinate range of each group in `flat_params` order.
    pub fn group_ranges(&self) -> Vec<(u8, std::ops::Range<usize>)> {
        let mut ranges = Vec::new();
        let mut offset = 0;
        for g in &self.groups {
            let mut len = 0;
            for layer in &g.layers {
                layer.visit_params(&mut |t| len += t.numel());
            }
            ranges.push((g.id, offset..offset + len));
            offset += len;
        }
        ranges
    }

    pub fn flat_params(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_param(&mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[E]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.for_each_param_mut(&mut |_, t| {
            let n = t.numel();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// Gradient of every parameter in flat order; error if any is missing.
    pub fn flat_grads(&self) -> Result<Vec<E>> {
        let mut out = Vec::with_capacity(self.num_params());
        let mut missing = None;
        self.for_each_param(&mut |gid, t| match &t.grad {
            Some(g) => out.extend_from_slice(g),
            None => missing = missing.or(Some(gid)),
        });
        match missing {
            Some(gid) => Err(Error::Contract(format!(
                "parameter group {gid} has no gradient; run backward + collect_grads first"
            ))),
            None => Ok(out),
        }
    }

    /// Copies leaf gradients from the tape of the last forward pass into the
    /// parameters' grad slots. Parameters untouched by the loss get zeros.
    pub fn collect_grads(&mut self, tape: &Tape<E>) -> Result<()> {
        let mut count = 0;
        self.for_each_param(&mut |_, _| count += 1);
        if self.last_bindings.len() != count {
            return Err(Error::Contract(format!(
                "stale bindings: {} bound vs {} parameters; call forward first",
                self.last_bindings.len(),
                count
            )));
        }
        let binds = std::mem::take(&mut self.last_bindings);
        let mut idx = 0;
        self.for_each_param_mut(&mut |_, t| {
            match tape.grad(binds[idx]) {
                Some(g) => match &mut t.grad {
                    Some(dst) => dst.copy_from_slice(g),
                    None => t.grad = Some(g.to_vec()),
                },
                None => t.zero_grad(),
            }
            idx += 1;
        });
        self.last_bindings = binds;
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.grad = None);
    }

    /// Snapshot of all normalization running statistics, in traversal order.
    pub fn norm_stats(&mut self) -> Vec<(Vec<E>, Vec<E>)> {
        let mut out = Vec::new();
        for g in &mut self.groups {
            for layer in &mut g.layers {
                layer.visit_norms_mut(&mut |bn| {
                    out.push((bn.running_mean.clone(), bn.running_var.clone()));
                });
            }
        }
        out
    }

    pub fn set_norm_stats(&mut self, stats: &[(Vec<E>, Vec<E>)]) {
        let mut idx = 0;
        for g in &mut self.groups {
            for layer in &mut g.layers {
                layer.visit_norms_mut(&mut |bn| {
                    bn.running_mean.copy_from_slice(&stats[idx].0);
                    bn.running_var.copy_from_slice(&stats[idx].1);
                    idx += 1;
                });
            }
        }
    }

    /// Same architecture and values in another element type.
    pub fn cast<T: Scalar>(&mut self) -> Network<T> {
        let mut twin = Network::<T> {
            config: self.config.clone(),
            groups: architecture::<T>(&self.config),
            init_seed: self.init_seed,
            last_bindings: Vec::new(),
        };
        let params = self.flat_params();
        let cast: Vec<T> = params.iter().map(|&v| T::from_f64(v.as_f64())).collect();
        twin.set_flat_params(&cast).expect("same architecture");
        let stats = self.norm_stats();
        let cast_stats: Vec<(Vec<T>, Vec<T>)> = stats
            .iter()
            .map(|(m, v)| {
                (
                    m.iter().map(|&x| T::from_f64(x.as_f64())).collect(),
                    v.iter().map(|&x| T::from_f64(x.as_f64())).collect(),
                )
            })
            .collect();
        twin.set_norm_stats(&cast_stats);
        twin
    }
}
