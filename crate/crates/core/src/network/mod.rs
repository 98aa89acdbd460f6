//! Miniature 3D U-Net with a style encoder, per-decoder-block feature
//! modulation and three parallel 1x1x1 output heads.
//!
//! Encoder level `i` has `base * 2^i` channels: one 3x3x3 convolution and a
//! ReLU, then 2x max pooling. The bottleneck has `base * 2^depth` channels.
//! Each decoder level upsamples, concatenates the skip connection, convolves,
//! applies `gamma(s) * h + beta(s)` with `s` the style vector, then a ReLU.
//! The style encoder is two stride-2 convolutions with ReLU, global average
//! pooling and a linear map to `style_dim` outputs.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::gradcheck::{check_fn, random_tensor, GradCheck, FD_STEP};
use crate::tensor::{softmax_channels, Graph, NodeId, Result, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub class_count: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub style_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 4,
            class_count: 4,
            base_channels: 8,
            depth: 2,
            style_dim: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.in_channels == 0 || self.base_channels == 0 || self.style_dim == 0 {
            return Err("in_channels, base_channels and style_dim must be positive".into());
        }
        if self.class_count < 2 {
            return Err(format!("class_count must be at least 2, got {}", self.class_count));
        }
        Ok(())
    }

    fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Trunk,
    StyleEncoder,
    Modulation,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SourcePretrain,
    TargetAdapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Csh,
    Ih,
    Cnh,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Csh, Head::Ih, Head::Cnh];

    pub fn name(self) -> &'static str {
        match self {
            Head::Csh => "csh",
            Head::Ih => "ih",
            Head::Cnh => "cnh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// All network parameters in a fixed, enumerable order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: NetConfig,
    pub params: Vec<Param>,
}

/// Parameter names and shapes in storage order.
fn layout(cfg: &NetConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: String, group, cout: usize, cin: usize, k: usize| {
        out.push((format!("{name}.weight"), group, vec![cout, cin, k, k, k]));
        out.push((format!("{name}.bias"), group, vec![cout]));
    };
    let mut cin = cfg.in_channels;
    for i in 0..cfg.depth {
        let c = cfg.level_channels(i);
        conv(&mut out, format!("enc{i}.conv"), ParamGroup::Trunk, c, cin, 3);
        cin = c;
    }
    let bottom = cfg.level_channels(cfg.depth);
    conv(&mut out, "bottleneck.conv".into(), ParamGroup::Trunk, bottom, cin, 3);
    for i in (0..cfg.depth).rev() {
        let c = cfg.level_channels(i);
        conv(&mut out, format!("dec{i}.conv"), ParamGroup::Trunk, c, cfg.level_channels(i + 1) + c, 3);
    }
    for i in (0..cfg.depth).rev() {
        let c = cfg.level_channels(i);
        for m in ["gamma", "beta"] {
            out.push((format!("dec{i}.{m}.weight"), ParamGroup::Modulation, vec![c, cfg.style_dim]));
            out.push((format!("dec{i}.{m}.bias"), ParamGroup::Modulation, vec![c]));
        }
    }
    let b = cfg.base_channels;
    conv(&mut out, "style.conv1".into(), ParamGroup::StyleEncoder, b, cfg.in_channels, 3);
    conv(&mut out, "style.conv2".into(), ParamGroup::StyleEncoder, b, b, 3);
    out.push(("style.fc.weight".into(), ParamGroup::StyleEncoder, vec![cfg.style_dim, b]));
    out.push(("style.fc.bias".into(), ParamGroup::StyleEncoder, vec![cfg.style_dim]));
    for h in Head::ALL {
        conv(&mut out, format!("head.{}", h.name()), ParamGroup::Head, cfg.class_count, b, 1);
    }
    out
}

impl ModelState {
    /// He-normal convolution and linear weights, zero biases, and identity
    /// modulation (`gamma` bias 1, all other modulation entries 0).
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, group, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    let fill = if group == ParamGroup::Modulation && name.contains(".gamma.") { 1.0 } else { 0.0 };
                    vec![fill; n]
                } else if group == ParamGroup::Modulation {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Param {
                    name,
                    group,
                    value: Tensor::new(shape, data).expect("layout shape"),
                }
            })
            .collect();
        ModelState { config, params }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Which parameters receive gradient updates in `phase`, by index.
    pub fn trainable_mask(&self, phase: Phase) -> Vec<bool> {
        self.params
            .iter()
            .map(|p| match phase {
                Phase::SourcePretrain => true,
                Phase::TargetAdapt => p.group != ParamGroup::Trunk,
            })
            .collect()
    }

    /// Overwrites the IH and CnH heads with copies of the CsH head.
    pub fn copy_primary_head(&mut self) {
        for suffix in ["weight", "bias"] {
            let src = self.get(&format!("head.csh.{suffix}")).expect("csh head").clone();
            for h in [Head::Ih, Head::Cnh] {
                *self.get_mut(&format!("head.{}.{suffix}", h.name())).expect("head") = src.clone();
            }
        }
    }

    /// Concatenation of every parameter, in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Checks that names, groups and shapes match the layout for `config`.
    pub fn check_layout(&self) -> std::result::Result<(), String> {
        let want = layout(&self.config);
        if want.len() != self.params.len() {
            return Err(format!("expected {} parameters, found {}", want.len(), self.params.len()));
        }
        for ((name, group, shape), p) in want.iter().zip(&self.params) {
            if *name != p.name || *group != p.group || shape[..] != *p.value.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, expected {name} with shape {shape:?}",
                    p.name,
                    p.value.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Parameters inserted into a graph as leaves.
pub struct Bound {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
}

impl Bound {
    fn id(&self, name: &str) -> NodeId {
        let i = self.names.iter().position(|n| n == name).expect("known parameter");
        self.ids[i]
    }
}

/// Inserts every parameter of `state`; those with `trainable[i]` become
/// differentiable leaves.
pub fn bind(g: &mut Graph, state: &ModelState, trainable: &[bool]) -> Bound {
    let ids = state
        .params
        .iter()
        .zip(trainable)
        .map(|(p, &t)| {
            let mut v = p.value.clone();
            v.set_requires_grad(t);
            g.leaf(v)
        })
        .collect();
    Bound {
        ids,
        names: state.params.iter().map(|p| p.name.clone()).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Apply style modulation in the decoder.
    pub modulate: bool,
    /// Evaluate the IH and CnH heads as well as CsH.
    pub all_heads: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            modulate: true,
            all_heads: true,
        }
    }
}

/// Graph nodes of one forward pass. `ih`/`cnh` are `None` when only the
/// primary head was evaluated; `style` is `None` without modulation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub csh: NodeId,
    pub ih: Option<NodeId>,
    pub cnh: Option<NodeId>,
    pub style: Option<NodeId>,
}

pub fn style_encode(g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
    let h = g.conv3d(x, p.id("style.conv1.weight"), p.id("style.conv1.bias"), 2, 1)?;
    let h = g.relu(h);
    let h = g.conv3d(h, p.id("style.conv2.weight"), p.id("style.conv2.bias"), 2, 1)?;
    let h = g.relu(h);
    let pooled = g.global_avg_pool(h)?;
    g.linear(pooled, p.id("style.fc.weight"), p.id("style.fc.bias"))
}

/// `gamma(s) * h + beta(s)` with `gamma`, `beta` linear in `s`.
pub fn modulate(g: &mut Graph, p: &Bound, level: usize, h: NodeId, s: NodeId) -> Result<NodeId> {
    let gamma = g.linear(s, p.id(&format!("dec{level}.gamma.weight")), p.id(&format!("dec{level}.gamma.bias")))?;
    let beta = g.linear(s, p.id(&format!("dec{level}.beta.weight")), p.id(&format!("dec{level}.beta.bias")))?;
    g.channel_affine(h, gamma, beta)
}

pub fn forward(g: &mut Graph, cfg: &NetConfig, p: &Bound, x: NodeId, opts: ForwardOptions) -> Result<ForwardNodes> {
    let shape = g.value(x).shape().to_vec();
    let [c, d, h, w] = g.value(x).dims4("forward")?;
    if c != cfg.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            axis: "input channels".into(),
            expected: cfg.in_channels,
            found: c,
        });
    }
    let unit = 1usize << cfg.depth;
    if [d, h, w].iter().any(|n| n % unit != 0) {
        return Err(TensorError::Invalid {
            op: "forward",
            msg: format!("spatial extents {:?} not divisible by {unit}", &shape[1..]),
        });
    }
    let style = if opts.modulate { Some(style_encode(g, p, x)?) } else { None };
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut feat = x;
    for i in 0..cfg.depth {
        let y = g.conv3d(feat, p.id(&format!("enc{i}.conv.weight")), p.id(&format!("enc{i}.conv.bias")), 1, 1)?;
        let y = g.relu(y);
        skips.push(y);
        feat = g.maxpool2(y)?;
    }
    let y = g.conv3d(feat, p.id("bottleneck.conv.weight"), p.id("bottleneck.conv.bias"), 1, 1)?;
    feat = g.relu(y);
    for i in (0..cfg.depth).rev() {
        let up = g.upsample2(feat)?;
        let cat = g.concat_channels(&[up, skips[i]])?;
        let mut y = g.conv3d(cat, p.id(&format!("dec{i}.conv.weight")), p.id(&format!("dec{i}.conv.bias")), 1, 1)?;
        if let Some(s) = style {
            y = modulate(g, p, i, y, s)?;
        }
        feat = g.relu(y);
    }
    let head = |g: &mut Graph, h: Head| {
        g.conv3d(
            feat,
            p.id(&format!("head.{}.weight", h.name())),
            p.id(&format!("head.{}.bias", h.name())),
            1,
            0,
        )
    };
    let csh = head(g, Head::Csh)?;
    let (ih, cnh) = if opts.all_heads {
        (Some(head(g, Head::Ih)?), Some(head(g, Head::Cnh)?))
    } else {
        (None, None)
    };
    Ok(ForwardNodes { csh, ih, cnh, style })
}

/// CsH-head class probabilities for one input, without gradients.
pub fn predict_probs(state: &ModelState, x: &Tensor, modulate: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = bind(&mut g, state, &vec![false; state.params.len()]);
    let xi = g.leaf(x.clone());
    let opts = ForwardOptions {
        modulate,
        all_heads: false,
    };
    let out = forward(&mut g, &state.config, &bound, xi, opts)?;
    softmax_channels(g.value(out.csh))
}

/// Style vector of one input.
pub fn style_vector(state: &ModelState, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, state, &vec![false; state.params.len()]);
    let xi = g.leaf(x.clone());
    let s = style_encode(&mut g, &bound, xi)?;
    Ok(g.value(s).data().to_vec())
}

/// `sum(softmax(head) * r_head)` over the three heads with fixed random
/// weights `r`, and its gradient for every parameter flagged in `wrt`.
fn weighted_head_objective(
    state: &ModelState,
    x: &Tensor,
    weights: &[Tensor; 3],
    wrt: &[bool],
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, state, wrt);
    let xi = g.leaf(x.clone());
    let out = forward(&mut g, &state.config, &bound, xi, ForwardOptions::default())?;
    let heads = [out.csh, out.ih.expect("all heads"), out.cnh.expect("all heads")];
    let mut total = None;
    for (h, w) in heads.into_iter().zip(weights) {
        let p = g.softmax_channels(h)?;
        let wi = g.leaf(w.clone());
        let m = g.mul(p, wi)?;
        let s = g.sum(m);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let loss = total.expect("three heads");
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let out = bound
        .ids
        .iter()
        .zip(wrt)
        .filter(|(_, &w)| w)
        .map(|(&id, _)| grads.take(id).expect("leaf gradient"))
        .collect();
    Ok((value, out))
}

/// Toy network with every parameter, including the modulation maps, drawn at
/// random so that no path is switched off.
fn random_toy(rng: &mut ChaCha8Rng) -> (ModelState, Tensor, [Tensor; 3]) {
    let cfg = NetConfig {
        in_channels: 2,
        class_count: 3,
        base_channels: 2,
        depth: 2,
        style_dim: 2,
    };
    let mut state = ModelState::init(cfg.clone(), rng.gen());
    for p in &mut state.params {
        let noise = random_tensor(rng, p.value.shape());
        p.value.add_scaled(&noise, 0.5);
    }
    let x = random_tensor(rng, &[2, 4, 4, 4]);
    let w = [(); 3].map(|_| random_tensor(rng, &[3, 4, 4, 4]));
    (state, x, w)
}

fn check_params(state: ModelState, x: Tensor, w: [Tensor; 3], wrt: Vec<bool>) -> Result<f64> {
    let inputs: Vec<Tensor> = state
        .params
        .iter()
        .zip(&wrt)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p.value.clone())
        .collect();
    check_fn(&inputs, FD_STEP, |ins| {
        let mut s = state.clone();
        let mut it = ins.iter();
        for (p, &t) in s.params.iter_mut().zip(&wrt) {
            if t {
                p.value = it.next().expect("one input per flagged parameter").clone();
            }
        }
        weighted_head_objective(&s, &x, &w, &wrt)
    })
}

/// End-to-end checks of the network on a 4-voxel-wide toy configuration.
pub fn network_checks() -> Vec<GradCheck> {
    vec![
        GradCheck::new("network_end_to_end", |rng| {
            let (state, x, w) = random_toy(rng);
            let wrt = vec![true; state.params.len()];
            check_params(state, x, w, wrt)
        }),
        GradCheck::new("network_modulation", |rng| {
            let (state, x, w) = random_toy(rng);
            let wrt = state.params.iter().map(|p| p.group == ParamGroup::Modulation).collect();
            check_params(state, x, w, wrt)
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetConfig {
        NetConfig {
            in_channels: 2,
            class_count: 3,
            base_channels: 2,
            depth: 2,
            style_dim: 2,
        }
    }

    fn input(cfg: &NetConfig, n: usize) -> Tensor {
        let v = n * n * n;
        let data = (0..cfg.in_channels * v).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        Tensor::new(vec![cfg.in_channels, n, n, n], data).unwrap()
    }

    #[test]
    fn layout_groups_and_mask() {
        let s = ModelState::init(NetConfig::default(), 1);
        s.check_layout().unwrap();
        assert!(s.trainable_mask(Phase::SourcePretrain).iter().all(|&b| b));
        for (p, m) in s.params.iter().zip(s.trainable_mask(Phase::TargetAdapt)) {
            assert_eq!(m, p.group != ParamGroup::Trunk, "{}", p.name);
            if p.name.contains("conv") && !p.name.starts_with("style") {
                assert!(!m);
            }
        }
        assert_eq!(s.get("dec0.gamma.bias").unwrap().data(), &[1.0; 8]);
        assert!(s.get("dec1.beta.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_and_normalization() {
        let cfg = toy();
        let s = ModelState::init(cfg.clone(), 3);
        let p = predict_probs(&s, &input(&cfg, 8), true).unwrap();
        assert_eq!(p.shape(), &[3, 8, 8, 8]);
        let v = 512;
        for i in 0..v {
            let sum: f64 = (0..3).map(|k| p.data()[k * v + i]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(predict_probs(&s, &input(&cfg, 6), true).is_err());
        let mut wrong = cfg.clone();
        wrong.in_channels = 3;
        assert!(predict_probs(&s, &input(&wrong, 8), true).is_err());
    }

    #[test]
    fn identity_modulation_at_init() {
        let cfg = toy();
        let s = ModelState::init(cfg.clone(), 4);
        let x = input(&cfg, 8);
        assert_eq!(predict_probs(&s, &x, true).unwrap(), predict_probs(&s, &x, false).unwrap());
    }

    #[test]
    fn forced_gamma_doubles_features() {
        let cfg = toy();
        let mut s = ModelState::init(cfg.clone(), 5);
        s.get_mut("dec0.gamma.bias").unwrap().data_mut().fill(2.0);
        let mut g = Graph::new();
        let b = bind(&mut g, &s, &vec![false; s.params.len()]);
        let h = g.leaf(input(&cfg, 4).reshape(&[2, 4, 4, 4]).unwrap());
        let st = g.leaf(Tensor::from_vec(vec![0.3, -0.7]));
        let y = modulate(&mut g, &b, 0, h, st).unwrap();
        let twice: Vec<f64> = g.value(h).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.value(y).data(), &twice[..]);
    }

    #[test]
    fn style_of_zero_and_constant_inputs() {
        let cfg = toy();
        let s = ModelState::init(cfg.clone(), 6);
        assert_eq!(style_vector(&s, &Tensor::zeros(&[2, 8, 8, 8])).unwrap(), vec![0.0, 0.0]);
        let a = style_vector(&s, &Tensor::full(&[2, 8, 8, 8], 0.5)).unwrap();
        let b = style_vector(&s, &Tensor::full(&[2, 8, 8, 8], 0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_copy_makes_heads_agree() {
        let mut s = ModelState::init(toy(), 7);
        assert_ne!(s.get("head.csh.weight"), s.get("head.ih.weight"));
        s.copy_primary_head();
        assert_eq!(s.get("head.csh.weight"), s.get("head.ih.weight"));
        assert_eq!(s.get("head.csh.bias"), s.get("head.cnh.bias"));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for r in crate::tensor::gradcheck::run_checks(&network_checks(), 2, 31) {
            assert!(r.passed, "{} {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(ModelState::init(toy(), 9), ModelState::init(toy(), 9));
        assert_ne!(ModelState::init(toy(), 9), ModelState::init(toy(), 10));
    }
}
