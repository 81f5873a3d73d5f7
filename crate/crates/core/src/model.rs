//! The two-headed video network.
//!
//! ```text
//! clip[0..T] ─► trunk: [conv3d 3×3×3 → relu → 2×2 avg-pool] × blocks
//!                 ├─► filter head: conv3d → relu → spatial mean → per-frame linear
//!                 │        → T×s² logits → softmax filters → applied to clip[t] ≈ clip[t+1]
//!                 │        → flatten → DMR linear (dmr_dim)
//!                 └─► AR: global mean → linear (ar_dim)
//! concat(AR, DMR) ─► classifier linear (K logits)
//! ```
//!
//! All trunk convolutions use temporal stride 1 and replicate padding so the
//! filter head still sees one feature column per input frame.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::dynfilter::DynamicFilterBank;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::LossConfig;
use crate::rng::{domain, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyper-parameters. Field order matches the model file layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input frames per clip (T).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of each dynamic filter (odd).
    pub filter_size: usize,
    pub dmr_dim: usize,
    pub ar_dim: usize,
    pub trunk_channels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frames: 16,
            height: 32,
            width: 32,
            filter_size: 5,
            dmr_dim: 512,
            ar_dim: 64,
            trunk_channels: vec![8, 16],
            num_classes: 4,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("network config", m));
        if self.filter_size % 2 == 0 || self.filter_size == 0 {
            return bad(format!("filter size {} must be odd", self.filter_size));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.num_classes == 0 {
            return bad("T, H, W and class count must be >= 1".into());
        }
        if self.dmr_dim == 0 || self.ar_dim == 0 {
            return bad("dmr_dim and ar_dim must be >= 1".into());
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return bad(format!("bad trunk channels {:?}", self.trunk_channels));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.filter_size * self.filter_size
    }

    fn feature_channels(&self) -> usize {
        *self.trunk_channels.last().expect("validated")
    }
}

/// Which part of the network a parameter section belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionGroup {
    Trunk,
    FilterHead,
    /// AR projection, DMR projection and classifier; untouched by pretraining.
    ClassHead,
}

struct SectionSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
    group: SectionGroup,
}

fn layout(cfg: &NetworkConfig) -> Vec<SectionSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize, bias: bool, group| {
        out.push(SectionSpec {
            name,
            shape,
            fan_in,
            bias,
            group,
        })
    };
    let mut c_in = 1;
    for (i, &c) in cfg.trunk_channels.iter().enumerate() {
        push(format!("trunk.{i}.kernel"), vec![c, c_in, 3, 3, 3], c_in * 27, false, SectionGroup::Trunk);
        push(format!("trunk.{i}.bias"), vec![c], 0, true, SectionGroup::Trunk);
        c_in = c;
    }
    let c = cfg.feature_channels();
    let taps = cfg.taps();
    let fh = SectionGroup::FilterHead;
    push("filter.conv.kernel".into(), vec![c, c, 3, 3, 3], c * 27, false, fh);
    push("filter.conv.bias".into(), vec![c], 0, true, fh);
    push("filter.linear.weight".into(), vec![taps, c], c, false, fh);
    push("filter.linear.bias".into(), vec![taps], 0, true, fh);
    let ch = SectionGroup::ClassHead;
    push("ar.weight".into(), vec![cfg.ar_dim, c], c, false, ch);
    push("ar.bias".into(), vec![cfg.ar_dim], 0, true, ch);
    push("dmr.weight".into(), vec![cfg.dmr_dim, cfg.frames * taps], cfg.frames * taps, false, ch);
    push("dmr.bias".into(), vec![cfg.dmr_dim], 0, true, ch);
    let feat = cfg.ar_dim + cfg.dmr_dim;
    push("cls.weight".into(), vec![cfg.num_classes, feat], feat, false, ch);
    push("cls.bias".into(), vec![cfg.num_classes], 0, true, ch);
    out
}

/// Named parameter sections of a network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    config: NetworkConfig,
    names: Vec<String>,
    groups: Vec<SectionGroup>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Fan-in scaled uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    /// Section `i` draws from SplitMix stream `(seed, INIT, i)`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let specs = layout(config);
        let mut names = Vec::new();
        let mut groups = Vec::new();
        let mut tensors = Vec::new();
        for (i, spec) in specs.into_iter().enumerate() {
            let t = if spec.bias {
                Tensor::zeros(spec.shape)
            } else {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                let mut rng = SplitMix64::stream(config.seed, domain::INIT, i as u64);
                Tensor::from_fn(spec.shape, |_| S::lit(rng.uniform(-bound, bound)))
            };
            names.push(spec.name);
            groups.push(spec.group);
            tensors.push(t);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            groups,
            tensors,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, idx: usize) -> SectionGroup {
        self.groups[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<S> {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Mask selecting the sections of the given groups.
    pub fn mask(&self, groups: &[SectionGroup]) -> Vec<bool> {
        self.groups.iter().map(|g| groups.contains(g)).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// What [`forward`] should build.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Build the AR / DMR / classifier branch.
    pub classify: bool,
    /// Per-section flags marking which parameters get gradients.
    pub trainable: Option<&'a [bool]>,
}

/// A recorded forward pass. Values live on `graph`.
pub struct Forward<S> {
    pub graph: Graph<S>,
    pub params: Vec<Var>,
    /// Input frames `T×H×W`.
    pub frames: Var,
    /// Ground-truth next frames `T×H×W`, when the clip carries `T+1` frames.
    pub target: Option<Var>,
    pub filter_logits: Var,
    pub bank: DynamicFilterBank,
    pub predicted: Var,
    pub ar: Option<Var>,
    pub dmr: Option<Var>,
    pub class_logits: Option<Var>,
}

/// Detached copy of the interesting forward values.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S> {
    pub filter_logits: Tensor<S>,
    pub filters: Tensor<S>,
    pub predicted: Tensor<S>,
    pub ar: Option<Tensor<S>>,
    pub dmr: Option<Tensor<S>>,
    pub class_logits: Option<Tensor<S>>,
}

impl<S: Scalar> Forward<S> {
    pub fn output(&self) -> ForwardOutput<S> {
        let g = &self.graph;
        ForwardOutput {
            filter_logits: g.value(self.filter_logits).clone(),
            filters: g.value(self.bank.filters).clone(),
            predicted: g.value(self.predicted).clone(),
            ar: self.ar.map(|v| g.value(v).clone()),
            dmr: self.dmr.map(|v| g.value(v).clone()),
            class_logits: self.class_logits.map(|v| g.value(v).clone()),
        }
    }

    /// Frame-prediction loss against the clip's own next frames.
    pub fn loss_fp(&mut self, cfg: &LossConfig) -> Result<Var> {
        let target = self
            .target
            .ok_or_else(|| Error::invalid("loss_fp", "clip has no ground-truth frame T+1"))?;
        self.graph.huber_fp(self.predicted, target, cfg)
    }

    pub fn loss_cls(&mut self, label: usize) -> Result<Var> {
        let logits = self
            .class_logits
            .ok_or_else(|| Error::invalid("loss_cls", "forward built without the classifier"))?;
        self.graph.cross_entropy(logits, label)
    }

    /// Gradient of each parameter section after `backward` (None if untracked).
    pub fn take_gradients(&mut self) -> Vec<Option<Vec<S>>> {
        let vars = self.params.clone();
        vars.into_iter().map(|v| self.graph.take_grad(v)).collect()
    }
}

/// Runs the network on a `T×H×W` or `(T+1)×H×W` clip.
pub fn forward<S: Scalar>(params: &ModelParams<S>, clip: &Tensor<S>, opts: &ForwardOptions) -> Result<Forward<S>> {
    let cfg = params.config();
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let shape = clip.shape();
    if shape.len() != 3 || shape[1] != h || shape[2] != w || (shape[0] != t && shape[0] != t + 1) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: shape.to_vec(),
            rhs: vec![t, h, w],
        });
    }
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(params.len());
    for (i, p) in params.tensors().iter().enumerate() {
        let train = opts.trainable.is_some_and(|m| m[i]);
        vars.push(if train { g.param(p.clone())? } else { g.input(p.clone())? });
    }
    let var = |name: &str| vars[params.index_of(name).expect("section exists")];

    let frames = g.input(clip.slice_leading(0, t)?)?;
    let target = if shape[0] == t + 1 {
        Some(g.input(clip.slice_leading(1, t + 1)?)?)
    } else {
        None
    };

    let mut x = g.reshape(frames, vec![1, t, h, w])?;
    for i in 0..cfg.trunk_channels.len() {
        x = g.conv3d(x, var(&format!("trunk.{i}.kernel")), 1, Padding::SameReplicate)?;
        x = g.bias_add(x, var(&format!("trunk.{i}.bias")))?;
        x = g.relu(x)?;
        let s = g.value(x).shape();
        if s[2] >= 2 && s[3] >= 2 {
            x = g.avg_pool(x, 2)?;
        }
    }
    let trunk = x;

    let f = g.conv3d(trunk, var("filter.conv.kernel"), 1, Padding::SameReplicate)?;
    let f = g.bias_add(f, var("filter.conv.bias"))?;
    let f = g.relu(f)?;
    let per_frame = g.max_trailing(f, 2)?; // C×T
    let l = g.matmul(var("filter.linear.weight"), per_frame)?; // s²×T
    let l = g.bias_add(l, var("filter.linear.bias"))?;
    let filter_logits = g.transpose(l)?; // T×s²
    let bank = g.make_filters(filter_logits)?;
    let predicted = g.apply_filters(frames, &bank)?;

    let (mut ar, mut dmr, mut class_logits) = (None, None, None);
    if opts.classify {
        let c = cfg.feature_channels();
        let pooled = g.mean_trailing(trunk, 1)?;
        let pooled = g.reshape(pooled, vec![c, 1])?;
        let a = g.matmul(var("ar.weight"), pooled)?;
        let a = g.bias_add(a, var("ar.bias"))?;
        let flat = g.flatten_dmr_input(&bank)?;
        let flat = g.reshape(flat, vec![t * cfg.taps(), 1])?;
        let d = g.matmul(var("dmr.weight"), flat)?;
        let d = g.bias_add(d, var("dmr.bias"))?;
        let feat = g.concat(&[a, d])?;
        let feat = g.reshape(feat, vec![cfg.ar_dim + cfg.dmr_dim, 1])?;
        let z = g.matmul(var("cls.weight"), feat)?;
        let z = g.bias_add(z, var("cls.bias"))?;
        let z = g.reshape(z, vec![cfg.num_classes])?;
        ar = Some(a);
        dmr = Some(d);
        class_logits = Some(z);
    }

    Ok(Forward {
        graph: g,
        params: vars,
        frames,
        target,
        filter_logits,
        bank,
        predicted,
        ar,
        dmr,
        class_logits,
    })
}

const MODEL_MAGIC: [u8; 4] = *b"DYNM";
const MODEL_VERSION: u32 = 1;

/// Serializes to the `DYNM` little-endian layout:
/// magic, version u32, T H W s dmr_dim ar_dim u32, block count u32, channels
/// u32 each, num_classes u32, seed u64, then per section: name length u32,
/// name bytes, element count u64, f32 values.
pub fn encode_model(params: &ModelParams<f32>) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    let u32le = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(MODEL_VERSION as usize, &mut out);
    for v in [cfg.frames, cfg.height, cfg.width, cfg.filter_size, cfg.dmr_dim, cfg.ar_dim] {
        u32le(v, &mut out);
    }
    u32le(cfg.trunk_channels.len(), &mut out);
    for &c in &cfg.trunk_channels {
        u32le(c, &mut out);
    }
    u32le(cfg.num_classes, &mut out);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        u32le(name.len(), &mut out);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut c = Cursor::new(bytes);
    c.magic(MODEL_MAGIC)?;
    let version = c.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = c.u32("config")? as usize;
    }
    let blocks = c.u32("block count")? as usize;
    let mut trunk_channels = Vec::with_capacity(blocks.min(64));
    for _ in 0..blocks {
        trunk_channels.push(c.u32("channels")? as usize);
    }
    let num_classes = c.u32("class count")? as usize;
    let seed = c.u64("seed")?;
    let config = NetworkConfig {
        frames: dims[0],
        height: dims[1],
        width: dims[2],
        filter_size: dims[3],
        dmr_dim: dims[4],
        ar_dim: dims[5],
        trunk_channels,
        num_classes,
        seed,
    };
    config
        .validate()
        .map_err(|e| Error::Malformed(format!("stored config invalid: {e}")))?;
    let specs = layout(&config);
    let mut params = ModelParams::<f32> {
        config,
        names: Vec::new(),
        groups: Vec::new(),
        tensors: Vec::new(),
    };
    for spec in specs {
        let n = c.u32("section name length")? as usize;
        let name = c.take(n, "section name")?;
        if name != spec.name.as_bytes() {
            return Err(Error::Malformed(format!(
                "expected section {:?}, found {:?}",
                spec.name,
                String::from_utf8_lossy(name)
            )));
        }
        let count = c.u64("element count")? as usize;
        let expect: usize = spec.shape.iter().product();
        if count != expect {
            return Err(Error::Malformed(format!("section {} has {count} elements, expected {expect}", spec.name)));
        }
        let data = c.f32s(count, &spec.name)?;
        params.names.push(spec.name);
        params.groups.push(spec.group);
        params.tensors.push(Tensor::new(spec.shape, data)?);
    }
    if !c.at_end() {
        return Err(Error::Malformed("trailing bytes after last section".into()));
    }
    Ok(params)
}

pub fn save_model(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_model(params))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_model(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            frames: 4,
            height: 8,
            width: 8,
            filter_size: 3,
            dmr_dim: 6,
            ar_dim: 4,
            trunk_channels: vec![2, 3],
            num_classes: 4,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = ModelParams::<f32>::init(&tiny()).unwrap();
        let b = ModelParams::<f32>::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(&NetworkConfig { seed: 12, ..tiny() }).unwrap();
        assert_ne!(a, c);
        for (name, t) in a.names().iter().zip(a.tensors()) {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn even_filter_size_rejected() {
        assert!(ModelParams::<f32>::init(&NetworkConfig {
            filter_size: 4,
            ..tiny()
        })
        .is_err());
    }

    #[test]
    fn default_shapes() {
        let cfg = NetworkConfig::default();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        let clip = Tensor::from_fn(vec![17, 32, 32], |i| ((i * 7919) % 101) as f32 / 100.0);
        let fw = forward(
            &p,
            &clip,
            &ForwardOptions {
                classify: true,
                trainable: None,
            },
        )
        .unwrap();
        let out = fw.output();
        assert_eq!(out.filter_logits.shape(), &[16, 25]);
        assert_eq!(out.predicted.shape(), &[16, 32, 32]);
        assert_eq!(out.dmr.unwrap().len(), 512);
        assert_eq!(out.class_logits.unwrap().len(), 4);
    }

    #[test]
    fn zero_clip_predicts_zero() {
        let p = ModelParams::<f64>::init(&tiny()).unwrap();
        let fw = forward(&p, &Tensor::zeros(vec![5, 8, 8]), &ForwardOptions::default()).unwrap();
        assert!(fw.graph.value(fw.predicted).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let p = ModelParams::<f32>::init(&tiny()).unwrap();
        let clip = Tensor::from_fn(vec![5, 8, 8], |i| (i as f32 * 0.31).sin().abs());
        let opts = ForwardOptions {
            classify: true,
            trainable: None,
        };
        let a = forward(&p, &clip, &opts).unwrap().output();
        let b = forward(&p, &clip, &opts).unwrap().output();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_clip_shape_rejected() {
        let p = ModelParams::<f32>::init(&tiny()).unwrap();
        assert!(forward(&p, &Tensor::zeros(vec![6, 8, 8]), &ForwardOptions::default()).is_err());
        assert!(forward(&p, &Tensor::zeros(vec![4, 8, 7]), &ForwardOptions::default()).is_err());
    }

    #[test]
    fn model_bytes_round_trip() {
        let p = ModelParams::<f32>::init(&tiny()).unwrap();
        let bytes = encode_model(&p);
        assert_eq!(&bytes[..4], b"DYNM");
        assert_eq!(decode_model(&bytes).unwrap(), p);
    }

    #[test]
    fn model_decode_errors() {
        let p = ModelParams::<f32>::init(&tiny()).unwrap();
        let mut bytes = encode_model(&p);
        let full = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_model(&full[..full.len() - 3]), Err(Error::Truncated(_))));
        let mut v2 = full.clone();
        v2[4] = 2;
        assert!(matches!(decode_model(&v2), Err(Error::UnsupportedVersion(2))));
    }
}
