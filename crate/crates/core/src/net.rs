//! Inception modules and whole networks built from the layer primitives.
//!
//! A network is `stem -> body -> head`. The stem is a list of convolutions
//! (each followed by ReLU) and pools; the body interleaves inception modules
//! with downsampling pools; the head is global average pooling, dropout and
//! a dense layer producing class logits. Auxiliary heads may hang off
//! intermediate modules and contribute a weighted loss during training.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, conv_backward_impl, conv_forward, dense_backward, dense_forward, dropout,
    dropout_backward, pool_backward, pool_forward, relu_backward, relu_in_place, softmax_xent,
    split_channels, ConvSpec, LayerState, Mode, PoolIndices, PoolSpec,
};
use crate::optim::{xavier_init_with, XavierVariant};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Branch widths of one inception module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub b1: usize,
    pub b3r: usize,
    pub b3: usize,
    pub b5r: usize,
    pub b5: usize,
    pub pp: usize,
}

impl InceptionSpec {
    pub const fn new(b1: usize, b3r: usize, b3: usize, b5r: usize, b5: usize, pp: usize) -> Self {
        InceptionSpec {
            b1,
            b3r,
            b3,
            b5r,
            b5,
            pp,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.b1 + self.b3 + self.b5 + self.pp
    }

    pub fn validate(&self) -> Result<()> {
        if [self.b1, self.b3r, self.b3, self.b5r, self.b5, self.pp].contains(&0) {
            return Err(Error::spec(
                "inception",
                format!("all branch widths must be >= 1: {self:?}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StemLayer {
    /// Convolution followed by ReLU.
    Conv(ConvSpec),
    Pool(PoolSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyLayer {
    Inception(InceptionSpec),
    Pool(PoolSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxHeadSpec {
    /// Pool applied to the module output; `None` means global average pooling.
    pub pool: Option<PoolSpec>,
    pub conv_channels: usize,
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub stem: Vec<StemLayer>,
    pub body: Vec<BodyLayer>,
    /// 1-based indices of the inception modules carrying auxiliary heads.
    pub aux_after: Vec<usize>,
    pub aux_weight: f64,
    pub aux_head: AuxHeadSpec,
    pub head_dropout: f64,
    pub classes: usize,
    #[serde(default)]
    pub init: XavierVariant,
}

impl NetworkSpec {
    /// Desk-scale preset: 64x64 grayscale input, three inception modules, no
    /// auxiliary heads.
    pub fn mini() -> Self {
        Self::mini_with_input(64, 64)
    }

    /// The mini preset at another input size (both sides divisible by 8).
    ///
    /// Stem: 2x2 average pool, 5x5 conv (8 channels), 2x2 max pool, so a
    /// 64x64 image reaches the first module at 16x16. A 2x2 max pool sits
    /// between the first and second module.
    pub fn mini_with_input(h: usize, w: usize) -> Self {
        NetworkSpec {
            input: (1, h, w),
            stem: vec![
                StemLayer::Pool(PoolSpec::average(2, 2, 0)),
                StemLayer::Conv(ConvSpec::same(1, 8, 5)),
                StemLayer::Pool(PoolSpec::max(2, 2, 0)),
            ],
            body: vec![
                BodyLayer::Inception(InceptionSpec::new(4, 4, 8, 2, 4, 4)),
                BodyLayer::Pool(PoolSpec::max(2, 2, 0)),
                BodyLayer::Inception(InceptionSpec::new(8, 6, 12, 2, 4, 8)),
                BodyLayer::Inception(InceptionSpec::new(8, 8, 12, 2, 4, 8)),
            ],
            aux_after: vec![],
            aux_weight: 0.3,
            aux_head: AuxHeadSpec {
                pool: None,
                conv_channels: 16,
                hidden: 32,
                dropout: 0.7,
            },
            head_dropout: 0.4,
            classes: 2,
            init: XavierVariant::FanIn,
        }
    }

    /// GoogLeNet-shaped preset: 224x224 input, nine inception modules with
    /// auxiliary heads after the third and sixth. Widths are a quarter of
    /// the usual GoogLeNet widths; stride-2 convolutions are replaced by
    /// stride-1 convolutions followed by exact-halving pools.
    pub fn faithful() -> Self {
        let halve = PoolSpec::max(4, 2, 1);
        NetworkSpec {
            input: (1, 224, 224),
            stem: vec![
                StemLayer::Conv(ConvSpec::same(1, 16, 7)),
                StemLayer::Pool(halve),
                StemLayer::Pool(halve),
                StemLayer::Conv(ConvSpec::same(16, 16, 1)),
                StemLayer::Conv(ConvSpec::same(16, 48, 3)),
                StemLayer::Pool(halve),
            ],
            body: vec![
                BodyLayer::Inception(InceptionSpec::new(16, 24, 32, 4, 8, 8)),
                BodyLayer::Inception(InceptionSpec::new(32, 32, 48, 8, 24, 16)),
                BodyLayer::Pool(halve),
                BodyLayer::Inception(InceptionSpec::new(48, 24, 52, 4, 12, 16)),
                BodyLayer::Inception(InceptionSpec::new(40, 28, 56, 6, 16, 16)),
                BodyLayer::Inception(InceptionSpec::new(32, 32, 64, 6, 16, 16)),
                BodyLayer::Inception(InceptionSpec::new(28, 36, 72, 8, 16, 16)),
                BodyLayer::Inception(InceptionSpec::new(64, 40, 80, 8, 32, 32)),
                BodyLayer::Pool(halve),
                BodyLayer::Inception(InceptionSpec::new(64, 40, 80, 8, 32, 32)),
                BodyLayer::Inception(InceptionSpec::new(96, 48, 96, 12, 32, 32)),
            ],
            aux_after: vec![3, 6],
            aux_weight: 0.3,
            aux_head: AuxHeadSpec {
                pool: Some(PoolSpec::average(5, 3, 0)),
                conv_channels: 32,
                hidden: 256,
                dropout: 0.7,
            },
            head_dropout: 0.4,
            classes: 2,
            init: XavierVariant::FanIn,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mini" => Ok(Self::mini()),
            "faithful" => Ok(Self::faithful()),
            other => Err(Error::Param(format!("unknown network preset '{other}'"))),
        }
    }

    /// Switch to `channels`-channel input; the first stem convolution widens to match.
    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input.0 = channels;
        if let Some(StemLayer::Conv(c)) = self
            .stem
            .iter_mut()
            .find(|l| matches!(l, StemLayer::Conv(_)))
        {
            c.in_channels = channels;
        }
        self
    }

    pub fn num_modules(&self) -> usize {
        self.body
            .iter()
            .filter(|l| matches!(l, BodyLayer::Inception(_)))
            .count()
    }

    /// Canonical text form used in checkpoint headers.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_canonical(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Param(format!("bad network spec: {e}")))
    }
}

/// Convolution followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
struct ConvUnit {
    spec: ConvSpec,
    state: LayerState,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input: Arc<Tensor>,
    output: Arc<Tensor>,
}

impl ConvUnit {
    fn new(spec: ConvSpec) -> Result<Self> {
        Ok(ConvUnit {
            state: LayerState::conv(&spec)?,
            spec,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv_forward(x, &self.spec, &self.state)?;
        relu_in_place(&mut y);
        Ok(y)
    }

    fn forward_cached(&self, x: &Arc<Tensor>) -> Result<(Arc<Tensor>, ConvCache)> {
        let y = Arc::new(self.forward(x)?);
        let cache = ConvCache {
            input: Arc::clone(x),
            output: Arc::clone(&y),
        };
        Ok((y, cache))
    }

    fn backward(
        &mut self,
        cache: &ConvCache,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let dpre = relu_backward(&cache.output, dy)?;
        conv_backward_impl(&cache.input, &dpre, &self.spec, &mut self.state, need_dx)
    }
}

const INCEPTION_POOL: PoolSpec = PoolSpec {
    kind: crate::layers::PoolKind::Max,
    window: (3, 3),
    stride: (1, 1),
    pad: (1, 1),
};

#[derive(Clone, Debug, PartialEq)]
struct InceptionBlock {
    spec: InceptionSpec,
    b1: ConvUnit,
    b3r: ConvUnit,
    b3: ConvUnit,
    b5r: ConvUnit,
    b5: ConvUnit,
    pp: ConvUnit,
}

#[derive(Clone, Debug)]
struct InceptionCache {
    b1: ConvCache,
    b3r: ConvCache,
    b3: ConvCache,
    b5r: ConvCache,
    b5: ConvCache,
    pool: PoolIndices,
    pp: ConvCache,
}

impl InceptionBlock {
    fn new(spec: InceptionSpec, in_ch: usize) -> Result<Self> {
        spec.validate()?;
        Ok(InceptionBlock {
            spec,
            b1: ConvUnit::new(ConvSpec::same(in_ch, spec.b1, 1))?,
            b3r: ConvUnit::new(ConvSpec::same(in_ch, spec.b3r, 1))?,
            b3: ConvUnit::new(ConvSpec::same(spec.b3r, spec.b3, 3))?,
            b5r: ConvUnit::new(ConvSpec::same(in_ch, spec.b5r, 1))?,
            b5: ConvUnit::new(ConvSpec::same(spec.b5r, spec.b5, 5))?,
            pp: ConvUnit::new(ConvSpec::same(in_ch, spec.pp, 1))?,
        })
    }

    fn units(&self) -> [&ConvUnit; 6] {
        [&self.b1, &self.b3r, &self.b3, &self.b5r, &self.b5, &self.pp]
    }

    fn units_mut(&mut self) -> [&mut ConvUnit; 6] {
        [
            &mut self.b1,
            &mut self.b3r,
            &mut self.b3,
            &mut self.b5r,
            &mut self.b5,
            &mut self.pp,
        ]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y1 = self.b1.forward(x)?;
        let y3 = self.b3.forward(&self.b3r.forward(x)?)?;
        let y5 = self.b5.forward(&self.b5r.forward(x)?)?;
        let (pooled, _) = pool_forward(x, &INCEPTION_POOL)?;
        let yp = self.pp.forward(&pooled)?;
        concat_channels(&[&y1, &y3, &y5, &yp])
    }

    fn forward_cached(&self, x: &Arc<Tensor>) -> Result<(Tensor, InceptionCache)> {
        let (y1, b1) = self.b1.forward_cached(x)?;
        let (r3, b3r) = self.b3r.forward_cached(x)?;
        let (y3, b3) = self.b3.forward_cached(&r3)?;
        let (r5, b5r) = self.b5r.forward_cached(x)?;
        let (y5, b5) = self.b5.forward_cached(&r5)?;
        let (pooled, pool) = pool_forward(x, &INCEPTION_POOL)?;
        let (yp, pp) = self.pp.forward_cached(&Arc::new(pooled))?;
        let y = concat_channels(&[&y1, &y3, &y5, &yp])?;
        Ok((
            y,
            InceptionCache {
                b1,
                b3r,
                b3,
                b5r,
                b5,
                pool,
                pp,
            },
        ))
    }

    fn backward(&mut self, cache: &InceptionCache, dy: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let parts = split_channels(dy, &[s.b1, s.b3, s.b5, s.pp])?;
        let mut dx = self.b1.backward(&cache.b1, &parts[0], true)?.unwrap();

        let d = self.b3.backward(&cache.b3, &parts[1], true)?.unwrap();
        dx.add_assign(&self.b3r.backward(&cache.b3r, &d, true)?.unwrap())?;

        let d = self.b5.backward(&cache.b5, &parts[2], true)?.unwrap();
        dx.add_assign(&self.b5r.backward(&cache.b5r, &d, true)?.unwrap())?;

        let d = self.pp.backward(&cache.pp, &parts[3], true)?.unwrap();
        dx.add_assign(&pool_backward(&d, &INCEPTION_POOL, &cache.pool)?)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum StemUnit {
    Conv(Box<ConvUnit>),
    Pool(PoolSpec),
}

#[derive(Clone, Debug, PartialEq)]
enum BodyUnit {
    Inception(Box<InceptionBlock>),
    Pool(PoolSpec),
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv(ConvCache),
    Pool(PoolIndices),
    Inception(InceptionCache),
}

/// Global pool, dropout, dense to class logits.
#[derive(Clone, Debug, PartialEq)]
struct Head {
    pool: PoolSpec,
    dropout: f64,
    dense: LayerState,
}

#[derive(Clone, Debug)]
struct HeadCache {
    pool: PoolIndices,
    mask: Option<Tensor>,
    dense_in: Tensor,
}

impl Head {
    fn forward(&self, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Tensor, HeadCache)> {
        let (pooled, pool) = pool_forward(x, &self.pool)?;
        let (dropped, mask) = dropout(&pooled, self.dropout, rng, mode)?;
        let logits = dense_forward(&dropped, &self.dense)?;
        Ok((
            logits,
            HeadCache {
                pool,
                mask,
                dense_in: dropped,
            },
        ))
    }

    fn backward(&mut self, cache: &HeadCache, dlogits: &Tensor) -> Result<Tensor> {
        let d = dense_backward(&cache.dense_in, dlogits, &mut self.dense)?;
        let d = dropout_backward(&d, cache.mask.as_ref())?;
        pool_backward(&d, &self.pool, &cache.pool)
    }
}

/// Pool, 1x1 conv + ReLU, dense + ReLU, dropout, dense to logits.
#[derive(Clone, Debug, PartialEq)]
struct AuxHead {
    module: usize,
    pool: PoolSpec,
    conv: ConvUnit,
    fc: LayerState,
    dropout: f64,
    out: LayerState,
}

#[derive(Clone, Debug)]
struct AuxCache {
    pool: PoolIndices,
    conv: ConvCache,
    fc_out: Tensor,
    mask: Option<Tensor>,
    out_in: Tensor,
}

impl AuxHead {
    fn forward(&self, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<(Tensor, AuxCache)> {
        let (pooled, pool) = pool_forward(x, &self.pool)?;
        let (c, conv) = self.conv.forward_cached(&Arc::new(pooled))?;
        let mut fc_out = dense_forward(&c, &self.fc)?;
        relu_in_place(&mut fc_out);
        let (dropped, mask) = dropout(&fc_out, self.dropout, rng, mode)?;
        let logits = dense_forward(&dropped, &self.out)?;
        Ok((
            logits,
            AuxCache {
                pool,
                conv,
                fc_out,
                mask,
                out_in: dropped,
            },
        ))
    }

    fn backward(&mut self, cache: &AuxCache, dlogits: &Tensor) -> Result<Tensor> {
        let d = dense_backward(&cache.out_in, dlogits, &mut self.out)?;
        let d = dropout_backward(&d, cache.mask.as_ref())?;
        let d = relu_backward(&cache.fc_out, &d)?;
        let d = dense_backward(&cache.conv.output, &d, &mut self.fc)?;
        let d = self.conv.backward(&cache.conv, &d, true)?.unwrap();
        pool_backward(&d, &self.pool, &cache.pool)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    stem: Vec<StemUnit>,
    body: Vec<BodyUnit>,
    aux: Vec<AuxHead>,
    head: Head,
}

/// Everything `backward` needs from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    stem: Vec<LayerCache>,
    body: Vec<LayerCache>,
    aux: Vec<(AuxCache, Tensor)>,
    head: HeadCache,
    main_logits: Tensor,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    /// One entry per auxiliary head; empty in eval mode.
    pub aux_logits: Vec<Tensor>,
    /// Present only in train mode.
    pub cache: Option<ForwardCache>,
    /// Output channel count of each inception module, in order.
    pub module_channels: Vec<usize>,
}

/// Derived shapes of each stage, computed while validating a spec.
fn plan_error(layer: &str, e: Error) -> Error {
    match e {
        Error::Spec { reason, .. } => Error::spec(layer, reason),
        other => Error::spec(layer, other.to_string()),
    }
}

/// Build a network with Xavier-initialized weights and zero biases.
pub fn build_network(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<Network> {
    let (mut c, mut h, mut w) = spec.input;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::spec("input", "input dimensions must be >= 1"));
    }
    if spec.classes < 2 {
        return Err(Error::spec("head", "need at least two classes"));
    }
    for (name, rate) in [
        ("head", spec.head_dropout),
        ("aux head", spec.aux_head.dropout),
    ] {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::spec(name, format!("dropout {rate} outside [0, 1)")));
        }
    }
    if !(spec.aux_weight >= 0.0 && spec.aux_weight.is_finite()) {
        return Err(Error::spec(
            "aux head",
            "aux_weight must be finite and >= 0",
        ));
    }
    let modules = spec.num_modules();
    if modules == 0 {
        return Err(Error::spec(
            "body",
            "at least one inception module required",
        ));
    }
    for pair in spec.aux_after.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::spec(
                "aux_after",
                "indices must be strictly increasing",
            ));
        }
    }
    if let Some(&bad) = spec.aux_after.iter().find(|&&m| m < 1 || m >= modules) {
        return Err(Error::spec(
            "aux_after",
            format!("module index {bad} must be in 1..{modules} (1-based, before the last module)"),
        ));
    }

    let mut stem = Vec::new();
    for (i, layer) in spec.stem.iter().enumerate() {
        let name = format!("stem[{i}]");
        match *layer {
            StemLayer::Conv(cs) => {
                if cs.in_channels != c {
                    return Err(Error::spec(
                        name,
                        format!(
                            "conv expects {} input channels, receives {c}",
                            cs.in_channels
                        ),
                    ));
                }
                (h, w) = cs.output_hw(h, w).map_err(|e| plan_error(&name, e))?;
                c = cs.out_channels;
                stem.push(StemUnit::Conv(Box::new(ConvUnit::new(cs)?)));
            }
            StemLayer::Pool(ps) => {
                (h, w) = ps.output_hw(h, w).map_err(|e| plan_error(&name, e))?;
                stem.push(StemUnit::Pool(ps));
            }
        }
    }

    let mut body = Vec::new();
    let mut aux = Vec::new();
    let mut module = 0;
    for (i, layer) in spec.body.iter().enumerate() {
        match *layer {
            BodyLayer::Inception(is) => {
                module += 1;
                let name = format!("module {module} (body[{i}])");
                is.validate().map_err(|e| plan_error(&name, e))?;
                body.push(BodyUnit::Inception(Box::new(InceptionBlock::new(is, c)?)));
                c = is.out_channels();
                if spec.aux_after.contains(&module) {
                    let aname = format!("aux head after module {module}");
                    let a = &spec.aux_head;
                    let pool = a.pool.unwrap_or(PoolSpec::global_average(h, w));
                    let (ph, pw) = pool.output_hw(h, w).map_err(|e| plan_error(&aname, e))?;
                    if a.conv_channels == 0 || a.hidden == 0 {
                        return Err(Error::spec(aname, "aux widths must be >= 1"));
                    }
                    aux.push(AuxHead {
                        module,
                        pool,
                        conv: ConvUnit::new(ConvSpec::same(c, a.conv_channels, 1))?,
                        fc: LayerState::dense(a.conv_channels * ph * pw, a.hidden)?,
                        dropout: a.dropout,
                        out: LayerState::dense(a.hidden, spec.classes)?,
                    });
                }
            }
            BodyLayer::Pool(ps) => {
                let name = format!("body[{i}] pool");
                (h, w) = ps.output_hw(h, w).map_err(|e| plan_error(&name, e))?;
                body.push(BodyUnit::Pool(ps));
            }
        }
    }

    let head = Head {
        pool: PoolSpec::global_average(h, w),
        dropout: spec.head_dropout,
        dense: LayerState::dense(c, spec.classes)?,
    };

    let mut net = Network {
        spec: spec.clone(),
        stem,
        body,
        aux,
        head,
    };
    let variant = spec.init;
    for st in net.layer_states_mut() {
        let [out, inp, kh, kw] = st.weights.value.shape();
        st.weights.value = xavier_init_with(
            st.weights.value.shape(),
            inp * kh * kw,
            out * kh * kw,
            variant,
            rng,
        )?;
    }
    Ok(net)
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Parameterized layers in declaration order: stem, body modules (each
    /// `b1, b3r, b3, b5r, b5, pp`), auxiliary heads, main head.
    pub fn layer_states(&self) -> Vec<&LayerState> {
        let mut out = Vec::new();
        for s in &self.stem {
            if let StemUnit::Conv(u) = s {
                out.push(&u.state);
            }
        }
        for b in &self.body {
            if let BodyUnit::Inception(m) = b {
                out.extend(m.units().into_iter().map(|u| &u.state));
            }
        }
        for a in &self.aux {
            out.extend([&a.conv.state, &a.fc, &a.out]);
        }
        out.push(&self.head.dense);
        out
    }

    pub fn layer_states_mut(&mut self) -> Vec<&mut LayerState> {
        let mut out = Vec::new();
        for s in &mut self.stem {
            if let StemUnit::Conv(u) = s {
                out.push(&mut u.state);
            }
        }
        for b in &mut self.body {
            if let BodyUnit::Inception(m) = b {
                out.extend(m.units_mut().into_iter().map(|u| &mut u.state));
            }
        }
        for a in &mut self.aux {
            out.extend([&mut a.conv.state, &mut a.fc, &mut a.out]);
        }
        out.push(&mut self.head.dense);
        out
    }

    /// Number of layer states belonging to auxiliary heads (they sit just
    /// before the final head in declaration order).
    pub fn aux_layer_count(&self) -> usize {
        self.aux.len() * 3
    }

    pub fn num_params(&self) -> usize {
        self.layer_states().iter().map(|s| s.num_params()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in self.layer_states_mut() {
            s.zero_grads();
        }
    }

    /// 1-based module indices that carry auxiliary heads.
    pub fn aux_positions(&self) -> Vec<usize> {
        self.aux.iter().map(|a| a.module).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input;
        if x.c() != c || x.h() != h || x.w() != w {
            return Err(Error::ShapeMismatch {
                op: "network input",
                expected: [x.n(), c, h, w],
                got: x.shape(),
            });
        }
        Ok(())
    }

    /// Run the network. Train mode samples dropout from `rng`, evaluates the
    /// auxiliary heads and returns a cache for `backward`; eval mode is pure.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        let mut cur = Arc::new(x.clone());
        let mut stem_cache = Vec::new();
        for s in &self.stem {
            match s {
                StemUnit::Conv(u) => {
                    if train {
                        let (y, c) = u.forward_cached(&cur)?;
                        stem_cache.push(LayerCache::Conv(c));
                        cur = y;
                    } else {
                        cur = Arc::new(u.forward(&cur)?);
                    }
                }
                StemUnit::Pool(p) => {
                    let (y, idx) = pool_forward(&cur, p)?;
                    if train {
                        stem_cache.push(LayerCache::Pool(idx));
                    }
                    cur = Arc::new(y);
                }
            }
        }

        let mut body_cache = Vec::new();
        let mut aux_out = Vec::new();
        let mut module_channels = Vec::new();
        let mut module = 0;
        let mut aux_iter = self.aux.iter().peekable();
        for b in &self.body {
            match b {
                BodyUnit::Inception(m) => {
                    module += 1;
                    if train {
                        let (y, c) = m.forward_cached(&cur)?;
                        body_cache.push(LayerCache::Inception(c));
                        cur = Arc::new(y);
                    } else {
                        cur = Arc::new(m.forward(&cur)?);
                    }
                    module_channels.push(cur.c());
                    if train {
                        if let Some(a) = aux_iter.next_if(|a| a.module == module) {
                            let (logits, c) = a.forward(&cur, mode, rng)?;
                            aux_out.push((c, logits));
                        }
                    }
                }
                BodyUnit::Pool(p) => {
                    let (y, idx) = pool_forward(&cur, p)?;
                    if train {
                        body_cache.push(LayerCache::Pool(idx));
                    }
                    cur = Arc::new(y);
                }
            }
        }

        let (logits, head_cache) = self.head.forward(&cur, mode, rng)?;
        logits.ensure_finite("network logits")?;
        let aux_logits: Vec<Tensor> = aux_out.iter().map(|(_, l)| l.clone()).collect();
        let cache = train.then(|| ForwardCache {
            batch: x.n(),
            stem: stem_cache,
            body: body_cache,
            aux: aux_out,
            head: head_cache,
            main_logits: logits.clone(),
        });
        Ok(ForwardOutput {
            logits,
            aux_logits,
            cache,
            module_channels,
        })
    }

    /// Eval-mode logits only.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        // eval mode never draws from the rng
        let mut unused = SeededRng::new(0);
        Ok(self.forward(x, Mode::Eval, &mut unused)?.logits)
    }

    /// Eval-mode activations entering the classifier head.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for s in &self.stem {
            cur = match s {
                StemUnit::Conv(u) => u.forward(&cur)?,
                StemUnit::Pool(p) => pool_forward(&cur, p)?.0,
            };
        }
        for b in &self.body {
            cur = match b {
                BodyUnit::Inception(m) => m.forward(&cur)?,
                BodyUnit::Pool(p) => pool_forward(&cur, p)?.0,
            };
        }
        Ok(cur)
    }

    /// Main loss, and `main + aux_weight * sum(aux)` total loss, without gradients.
    pub fn losses(&self, out: &ForwardOutput, labels: &[usize]) -> Result<(f64, f64)> {
        let (main, _) = softmax_xent(&out.logits, labels)?;
        let mut total = main;
        for l in &out.aux_logits {
            total += self.spec.aux_weight * softmax_xent(l, labels)?.0;
        }
        Ok((main, total))
    }

    /// Backpropagate the combined loss through a train-mode cache.
    ///
    /// Gradient slots are overwritten (zeroed first) and the total loss
    /// `main + aux_weight * sum(aux losses)` is returned.
    pub fn backward(&mut self, cache: Option<ForwardCache>, labels: &[usize]) -> Result<f64> {
        let cache = cache
            .ok_or_else(|| Error::State("backward needs a train-mode forward cache".into()))?;
        if labels.len() != cache.batch {
            return Err(Error::State(format!(
                "{} labels for a forward batch of {}",
                labels.len(),
                cache.batch
            )));
        }
        let n_stem_cache = self.stem.len();
        if cache.stem.len() != n_stem_cache
            || cache.body.len() != self.body.len()
            || cache.aux.len() != self.aux.len()
        {
            return Err(Error::State(
                "forward cache does not belong to this network".into(),
            ));
        }
        self.zero_grads();

        let (main_loss, dlogits) = softmax_xent(&cache.main_logits, labels)?;
        let mut total = main_loss;
        let mut aux_grads: Vec<Option<Tensor>> = Vec::with_capacity(self.aux.len());
        let aux_weight = self.spec.aux_weight;
        for (head, (ac, logits)) in self.aux.iter_mut().zip(&cache.aux) {
            let (loss, mut d) = softmax_xent(logits, labels)?;
            total += aux_weight * loss;
            d.data_mut().iter_mut().for_each(|v| *v *= aux_weight);
            aux_grads.push(Some(head.backward(ac, &d)?));
        }

        let mut d = self.head.backward(&cache.head, &dlogits)?;

        let mut module = self.spec.num_modules();
        for (unit, lc) in self.body.iter_mut().zip(&cache.body).rev() {
            match (unit, lc) {
                (BodyUnit::Inception(m), LayerCache::Inception(c)) => {
                    if let Some(pos) = self.aux.iter().position(|a| a.module == module) {
                        if let Some(g) = aux_grads[pos].take() {
                            d.add_assign(&g)?;
                        }
                    }
                    d = m.backward(c, &d)?;
                    module -= 1;
                }
                (BodyUnit::Pool(p), LayerCache::Pool(idx)) => {
                    d = pool_backward(&d, p, idx)?;
                }
                _ => {
                    return Err(Error::State(
                        "forward cache does not match body layout".into(),
                    ))
                }
            }
        }

        let first_conv = self
            .stem
            .iter()
            .position(|s| matches!(s, StemUnit::Conv(_)));
        for (i, (unit, lc)) in self.stem.iter_mut().zip(&cache.stem).enumerate().rev() {
            match (unit, lc) {
                (StemUnit::Conv(u), LayerCache::Conv(c)) => {
                    // nothing upstream of the first convolution has parameters
                    let need_dx = Some(i) != first_conv;
                    match u.backward(c, &d, need_dx)? {
                        Some(dx) => d = dx,
                        None => break,
                    }
                }
                (StemUnit::Pool(p), LayerCache::Pool(idx)) => {
                    if first_conv.is_some_and(|f| i < f) {
                        break;
                    }
                    d = pool_backward(&d, p, idx)?;
                }
                _ => {
                    return Err(Error::State(
                        "forward cache does not match stem layout".into(),
                    ))
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok(total)
    }

    /// Write `.ckpt`: a text header (format line, spec length, canonical
    /// spec) followed by every layer's weights then bias as little-endian
    /// `f64`, in declaration order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let spec = self.spec.to_canonical();
        let mut out =
            format!("{CKPT_MAGIC} {CKPT_VERSION}\nspec {}\n{spec}\n", spec.len()).into_bytes();
        for st in self.layer_states() {
            for p in st.params() {
                for v in p.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Network> {
        let bad = |r: &str| Error::format(path, r);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not utf-8"))?;
        let expect = format!("{CKPT_MAGIC} {CKPT_VERSION}");
        if first != expect {
            return Err(bad(&format!("expected '{expect}', found '{first}'")));
        }
        let rest = &bytes[nl + 1..];
        let nl2 = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing spec line"))?;
        let len_line =
            std::str::from_utf8(&rest[..nl2]).map_err(|_| bad("spec line is not utf-8"))?;
        let len: usize = len_line
            .strip_prefix("spec ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed spec length"))?;
        let body = &rest[nl2 + 1..];
        if body.len() < len + 1 || body[len] != b'\n' {
            return Err(bad("truncated spec"));
        }
        let spec_text = std::str::from_utf8(&body[..len]).map_err(|_| bad("spec is not utf-8"))?;
        let spec = NetworkSpec::from_canonical(spec_text)?;
        let mut net = build_network(&spec, &mut SeededRng::new(0))?;
        let mut values = body[len + 1..].chunks_exact(8);
        if body[len + 1..].len() != net.num_params() * 8 {
            return Err(bad(&format!(
                "parameter section has {} bytes, spec needs {}",
                body[len + 1..].len(),
                net.num_params() * 8
            )));
        }
        for st in net.layer_states_mut() {
            for p in st.params_mut() {
                for v in p.value.data_mut() {
                    *v = f64::from_le_bytes(values.next().unwrap().try_into().unwrap());
                }
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_checkpoint_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}

const CKPT_MAGIC: &str = "abstractnet-checkpoint";
const CKPT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_builds_deterministically() {
        let a = build_network(&NetworkSpec::mini(), &mut SeededRng::new(7)).unwrap();
        let b = build_network(&NetworkSpec::mini(), &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
        let c = build_network(&NetworkSpec::mini(), &mut SeededRng::new(8)).unwrap();
        assert_ne!(a, c);
        for st in a.layer_states() {
            assert!(st.bias.value.data().iter().all(|&v| v == 0.0));
            assert!(st.weights.accum.data().iter().all(|&v| v == 0.0));
            assert!(st.weights.velocity.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn faithful_structure() {
        let spec = NetworkSpec::faithful();
        assert_eq!(spec.num_modules(), 9);
        let net = build_network(&spec, &mut SeededRng::new(1)).unwrap();
        assert_eq!(net.aux_positions(), vec![3, 6]);
    }

    #[test]
    fn rejects_bad_channel_arithmetic() {
        let mut spec = NetworkSpec::mini();
        spec.stem[1] = StemLayer::Conv(ConvSpec::same(3, 8, 5));
        let err = build_network(&spec, &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("stem[1]"), "{err}");

        let mut spec = NetworkSpec::mini();
        spec.body.insert(1, BodyLayer::Pool(PoolSpec::max(3, 2, 0)));
        let err = build_network(&spec, &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("body[1]"), "{err}");
    }

    #[test]
    fn rejects_bad_aux_positions() {
        let mut spec = NetworkSpec::mini();
        spec.aux_after = vec![3];
        assert!(build_network(&spec, &mut SeededRng::new(0)).is_err());
        spec.aux_after = vec![2, 1];
        assert!(build_network(&spec, &mut SeededRng::new(0)).is_err());
        spec.aux_after = vec![0];
        assert!(build_network(&spec, &mut SeededRng::new(0)).is_err());
        spec.aux_after = vec![1, 2];
        assert!(build_network(&spec, &mut SeededRng::new(0)).is_ok());
    }

    #[test]
    fn single_module_shapes() {
        let block = InceptionBlock::new(InceptionSpec::new(4, 2, 4, 2, 4, 4), 8).unwrap();
        let x = Tensor::uniform([1, 8, 16, 16], 0.0, 1.0, &mut SeededRng::new(2)).unwrap();
        assert_eq!(block.forward(&x).unwrap().shape(), [1, 16, 16, 16]);
    }

    #[test]
    fn backward_requires_train_cache() {
        let mut net = build_network(
            &NetworkSpec::mini_with_input(16, 16),
            &mut SeededRng::new(0),
        )
        .unwrap();
        let x = Tensor::zeros([2, 1, 16, 16]).unwrap();
        let out = net.forward(&x, Mode::Eval, &mut SeededRng::new(1)).unwrap();
        assert!(matches!(
            net.backward(out.cache, &[0, 1]),
            Err(Error::State(_))
        ));
        let out = net
            .forward(&x, Mode::Train, &mut SeededRng::new(1))
            .unwrap();
        assert!(matches!(
            net.backward(out.cache, &[0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = build_network(&NetworkSpec::mini(), &mut SeededRng::new(3)).unwrap();
        let bytes = net.to_checkpoint_bytes();
        let back = Network::from_checkpoint_bytes(&bytes, Path::new("mem.ckpt")).unwrap();
        assert_eq!(back.layer_states(), net.layer_states());
        assert!(
            Network::from_checkpoint_bytes(&bytes[..bytes.len() - 8], Path::new("mem.ckpt"))
                .is_err()
        );
    }
}
