//! Stacked U-Nets with per-input stems and CBAM gating.
//!
//! Stage 1 sees the center slice and its priors, each through its own stem.
//! Stage 2 sees the stage-1 prediction plus the same inputs through a fresh
//! set of stems.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BnState, Graph, Mode, NamedTensors, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::SliceTriplet;

/// Which slices accompany the center slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSet {
    None,
    /// Slices `i-1` and `i+1`.
    Adjacent,
    /// The extra-contrast slice only.
    Extra,
    AdjacentAndExtra,
}

impl PriorSet {
    pub fn n_priors(self) -> usize {
        match self {
            PriorSet::None => 0,
            PriorSet::Adjacent => 2,
            PriorSet::Extra => 1,
            PriorSet::AdjacentAndExtra => 3,
        }
    }

    pub fn uses_extra(self) -> bool {
        matches!(self, PriorSet::Extra | PriorSet::AdjacentAndExtra)
    }

    pub fn uses_adjacent(self) -> bool {
        matches!(self, PriorSet::Adjacent | PriorSet::AdjacentAndExtra)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbamPlacement {
    None,
    EncoderOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub stem_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub cbam_reduction: usize,
    pub cbam: CbamPlacement,
    pub priors: PriorSet,
    pub stacked: bool,
    pub input_size: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::paper()
    }
}

pub const PAPER_PARAM_COUNT: f64 = 4.01e6;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl NetConfig {
    /// Full-width configuration: 4 levels, 32/64/128/256 channels.
    pub fn paper() -> Self {
        NetConfig {
            levels: 4,
            stem_channels: 32,
            encoder_channels: vec![32, 64, 128, 256],
            cbam_reduction: 8,
            cbam: CbamPlacement::Both,
            priors: PriorSet::Adjacent,
            stacked: true,
            input_size: [256, 256],
        }
    }

    /// Small configuration used for desk-scale training.
    pub fn toy() -> Self {
        NetConfig {
            levels: 3,
            stem_channels: 8,
            encoder_channels: vec![8, 16, 32],
            cbam_reduction: 2,
            cbam: CbamPlacement::Both,
            priors: PriorSet::Adjacent,
            stacked: true,
            input_size: [64, 64],
        }
    }

    pub fn n_inputs(&self) -> usize {
        1 + self.priors.n_priors()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("levels", "must be at least 1"));
        }
        if self.encoder_channels.len() != self.levels {
            return Err(Error::config(
                "encoder_channels",
                format!("{} entries for {} levels", self.encoder_channels.len(), self.levels),
            ));
        }
        if self.stem_channels == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels", "channel counts must be positive"));
        }
        if self.cbam != CbamPlacement::None {
            if self.cbam_reduction == 0 {
                return Err(Error::config("cbam_reduction", "must be positive"));
            }
            for &c in &self.encoder_channels {
                if c % self.cbam_reduction != 0 {
                    return Err(Error::config(
                        "cbam_reduction",
                        format!("{c} channels not divisible by {}", self.cbam_reduction),
                    ));
                }
            }
        }
        self.check_input(self.input_size[0], self.input_size[1])
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::config(
                "input_size",
                format!("{h}x{w} not divisible by {m}"),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; guards checkpoint loading.
    pub fn arch_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("NetConfig serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
    bns: Vec<(String, usize)>,
}

impl SpecBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k],
            init: Init::He(cin * k * k),
        });
        self.specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zero });
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) {
        self.specs.push(ParamSpec { name: format!("{name}.w"), shape: vec![cout, cin], init: Init::He(cin) });
        self.specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zero });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.specs.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![c], init: Init::One });
        self.specs.push(ParamSpec { name: format!("{name}.beta"), shape: vec![c], init: Init::Zero });
        self.bns.push((name.to_string(), c));
    }

    /// Convolutions feeding batch norm carry no bias; the batch mean would
    /// cancel it.
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.conv.w"),
            shape: vec![cout, cin, 3, 3],
            init: Init::He(cin * 9),
        });
        self.bn(&format!("{name}.bn"), cout);
    }

    fn cbam(&mut self, name: &str, c: usize, r: usize) {
        self.dense(&format!("{name}.fc1"), c, c / r);
        self.dense(&format!("{name}.fc2"), c / r, c);
        self.conv(&format!("{name}.spatial"), 2, 1, CBAM_SPATIAL_KERNEL);
    }

    fn unet(&mut self, p: &str, cfg: &NetConfig, cin: usize) {
        let ch = &cfg.encoder_channels;
        let mut prev = cin;
        for (l, &c) in ch.iter().enumerate() {
            self.conv_bn(&format!("{p}.enc{l}.block1"), prev, c);
            self.conv_bn(&format!("{p}.enc{l}.block2"), c, c);
            if cfg.cbam != CbamPlacement::None {
                self.cbam(&format!("{p}.enc{l}.cbam"), c, cfg.cbam_reduction);
            }
            prev = c;
        }
        for l in (0..cfg.levels - 1).rev() {
            let c = ch[l];
            self.conv_bn(&format!("{p}.dec{l}.up"), ch[l + 1], c);
            self.conv_bn(&format!("{p}.dec{l}.block1"), 2 * c, c);
            self.conv_bn(&format!("{p}.dec{l}.block2"), c, c);
            if cfg.cbam == CbamPlacement::Both {
                self.cbam(&format!("{p}.dec{l}.cbam"), c, cfg.cbam_reduction);
            }
        }
        self.conv(&format!("{p}.head"), ch[0], 1, 3);
    }

    /// Zeroes the weights of the head producing the network output. A zero
    /// output is where the SSIM gradient favours positive correlation with
    /// the target; a random head can start in the sign-flipped basin
    /// (pred ~ -target also scores high SSIM) that clipping later erases.
    fn zero_output_head(&mut self, stage: &str) {
        let name = format!("{stage}.unet.head.w");
        for s in self.specs.iter_mut().filter(|s| s.name == name) {
            s.init = Init::Zero;
        }
    }

    fn for_config(cfg: &NetConfig) -> Self {
        let mut b = SpecBuilder { specs: Vec::new(), bns: Vec::new() };
        let n = cfg.n_inputs();
        for j in 0..n {
            b.conv_bn(&format!("s1.stem{j}"), 1, cfg.stem_channels);
        }
        b.unet("s1.unet", cfg, n * cfg.stem_channels);
        if cfg.stacked {
            for j in 0..=n {
                b.conv_bn(&format!("s2.stem{j}"), 1, cfg.stem_channels);
            }
            b.unet("s2.unet", cfg, (n + 1) * cfg.stem_channels);
        }
        b.zero_output_head(if cfg.stacked { "s2" } else { "s1" });
        b
    }
}

/// Total number of trainable scalars.
pub fn param_count(cfg: &NetConfig) -> usize {
    SpecBuilder::for_config(cfg)
        .specs
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Parameter count of the full-width configuration against the 4.01M
/// reference: `(count, reference, deviation_percent)`.
pub fn paper_param_report() -> (usize, f64, f64) {
    let n = param_count(&NetConfig::paper());
    (n, PAPER_PARAM_COUNT, 100.0 * (n as f64 - PAPER_PARAM_COUNT) / PAPER_PARAM_COUNT)
}

/// Parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: NetConfig,
    pub params: NamedTensors<T>,
    pub bn: BTreeMap<String, BnState<T>>,
}

/// He-normal conv/dense weights (the output head excepted), zero biases,
/// unit gammas; tensor `k` in name order draws from child stream `k` of
/// `seed`.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let b = SpecBuilder::for_config(cfg);
    let mut specs = b.specs;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut params = NamedTensors::new();
    for (k, s) in specs.iter().enumerate() {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zero => vec![T::zero(); n],
            Init::One => vec![T::one(); n],
            Init::He(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::Numerical(e.to_string()))?;
                let mut rng = seed::child_rng(seed, k as u64);
                (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
            }
        };
        if params.insert(s.name.clone(), Tensor { shape: s.shape.clone(), data }).is_some() {
            return Err(Error::Graph(format!("duplicate parameter name {}", s.name)));
        }
    }
    let bn = b.bns.into_iter().map(|(name, c)| (name, BnState::new(c))).collect();
    Ok(Model { cfg: cfg.clone(), params, bn })
}

/// Graph handles of every parameter.
pub type ParamVars = BTreeMap<String, Var>;

/// The slices one forward pass consumes, each `[N, 1, H, W]`, in stem order
/// (`prev`, `center`, `next`, `extra`, restricted to the configured priors).
pub fn input_slots<T: Real>(batch: &[&SliceTriplet], priors: PriorSet) -> Result<Vec<Tensor<T>>> {
    let first = batch.first().ok_or_else(|| Error::shape("empty batch"))?;
    let (nx, ny) = first.center.dims();
    let mut pick: Vec<Box<dyn Fn(&SliceTriplet) -> Result<&crate::Slice>>> = Vec::new();
    if priors.uses_adjacent() {
        pick.push(Box::new(|t| Ok(&t.prev)));
    }
    pick.push(Box::new(|t| Ok(&t.center)));
    if priors.uses_adjacent() {
        pick.push(Box::new(|t| Ok(&t.next)));
    }
    if priors.uses_extra() {
        pick.push(Box::new(|t| {
            t.extra_prior
                .as_ref()
                .ok_or_else(|| Error::config("priors", format!("slice {} of {} has no extra prior", t.slice_index, t.subject_id)))
        }));
    }
    pick.iter()
        .map(|f| {
            let mut data = Vec::with_capacity(batch.len() * nx * ny);
            for t in batch {
                let s = f(t)?;
                if s.dims() != (nx, ny) {
                    return Err(Error::shape(format!("slice {:?} in a {nx}x{ny} batch", s.dims())));
                }
                data.extend(s.data.iter().map(|&v| T::from_f64(v as f64)));
            }
            Ok(Tensor { shape: vec![batch.len(), 1, ny, nx], data })
        })
        .collect()
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    p: &'a ParamVars,
    bn: &'a mut BTreeMap<String, BnState<T>>,
    mode: Mode,
}

impl<T: Real> Ctx<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        self.g.conv2d(x, w, b)
    }

    fn conv_bn_relu(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.conv.w"))?;
        let y = self.g.conv2d_no_bias(x, w)?;
        let bn_name = format!("{name}.bn");
        let gamma = self.var(&format!("{bn_name}.gamma"))?;
        let beta = self.var(&format!("{bn_name}.beta"))?;
        let state = self
            .bn
            .get_mut(&bn_name)
            .ok_or_else(|| Error::Graph(format!("missing batch-norm state {bn_name}")))?;
        let y = self.g.batch_norm(y, gamma, beta, state, self.mode)?;
        Ok(self.g.relu(y))
    }

    fn mlp(&mut self, name: &str, z: Var) -> Result<Var> {
        let (w1, b1) = (self.var(&format!("{name}.fc1.w"))?, self.var(&format!("{name}.fc1.b"))?);
        let (w2, b2) = (self.var(&format!("{name}.fc2.w"))?, self.var(&format!("{name}.fc2.b"))?);
        let h = self.g.dense(z, w1, b1)?;
        let h = self.g.relu(h);
        self.g.dense(h, w2, b2)
    }

    fn cbam(&mut self, name: &str, x: Var) -> Result<Var> {
        let avg = self.g.global_avg_pool(x)?;
        let max = self.g.global_max_pool(x)?;
        let a = self.mlp(name, avg)?;
        let m = self.mlp(name, max)?;
        let logits = self.g.add(a, m)?;
        let ca = self.g.sigmoid(logits);
        let x1 = self.g.mul(x, ca)?;
        let mean = self.g.channel_mean(x1)?;
        let max = self.g.channel_max(x1)?;
        let s = self.g.concat_channels(&[mean, max])?;
        let s = self.conv(&format!("{name}.spatial"), s)?;
        let sa = self.g.sigmoid(s);
        self.g.mul(x1, sa)
    }

    fn unet(&mut self, p: &str, cfg: &NetConfig, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x;
        for l in 0..cfg.levels {
            if l > 0 {
                h = self.g.avg_pool_2x2(h)?;
            }
            h = self.conv_bn_relu(&format!("{p}.enc{l}.block1"), h)?;
            h = self.conv_bn_relu(&format!("{p}.enc{l}.block2"), h)?;
            if cfg.cbam != CbamPlacement::None {
                h = self.cbam(&format!("{p}.enc{l}.cbam"), h)?;
            }
            skips.push(h);
        }
        for l in (0..cfg.levels - 1).rev() {
            let up = self.g.upsample_nearest_2x(h)?;
            let up = self.conv_bn_relu(&format!("{p}.dec{l}.up"), up)?;
            let cat = self.g.concat_channels(&[skips[l], up])?;
            h = self.conv_bn_relu(&format!("{p}.dec{l}.block1"), cat)?;
            h = self.conv_bn_relu(&format!("{p}.dec{l}.block2"), h)?;
            if cfg.cbam == CbamPlacement::Both {
                h = self.cbam(&format!("{p}.dec{l}.cbam"), h)?;
            }
        }
        self.conv(&format!("{p}.head"), h)
    }

    fn stems(&mut self, stage: &str, inputs: &[Var]) -> Result<Var> {
        let feats = inputs
            .iter()
            .enumerate()
            .map(|(j, &x)| self.conv_bn_relu(&format!("{stage}.stem{j}"), x))
            .collect::<Result<Vec<_>>>()?;
        self.g.concat_channels(&feats)
    }
}

/// One stem: 3x3 conv, batch norm, ReLU.
pub fn stem_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    bn: &mut BTreeMap<String, BnState<T>>,
    name: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    Ctx { g, p: params, bn, mode }.conv_bn_relu(name, x)
}

/// CBAM block `name` (channel gate, then spatial gate).
pub fn cbam_forward<T: Real>(g: &mut Graph<T>, params: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let mut bn = BTreeMap::new();
    Ctx { g, p: params, bn: &mut bn, mode: Mode::Eval }.cbam(name, x)
}

/// Single U-Net `prefix` over already-concatenated features.
pub fn unet_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    bn: &mut BTreeMap<String, BnState<T>>,
    cfg: &NetConfig,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let [_, _, h, w] = g.value(x).dims4()?;
    cfg.check_input(h, w)?;
    Ctx { g, p: params, bn, mode }.unet(prefix, cfg, x)
}

/// Both stages over the input slots from [`input_slots`]. With stacking
/// disabled the stage-1 prediction is returned twice.
pub fn stacked_forward<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    bn: &mut BTreeMap<String, BnState<T>>,
    cfg: &NetConfig,
    inputs: &[Var],
    mode: Mode,
) -> Result<(Var, Var)> {
    if inputs.len() != cfg.n_inputs() {
        return Err(Error::shape(format!(
            "{} input slots for a network expecting {}",
            inputs.len(),
            cfg.n_inputs()
        )));
    }
    for &x in inputs {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("input slot has {c} channels, expected 1")));
        }
        cfg.check_input(h, w)?;
    }
    let mut ctx = Ctx { g, p: params, bn, mode };
    let f1 = ctx.stems("s1", inputs)?;
    let pred1 = ctx.unet("s1.unet", cfg, f1)?;
    if !cfg.stacked {
        return Ok((pred1, pred1));
    }
    let mut stage2 = Vec::with_capacity(inputs.len() + 1);
    stage2.push(pred1);
    stage2.extend_from_slice(inputs);
    let f2 = ctx.stems("s2", &stage2)?;
    let pred2 = ctx.unet("s2.unet", cfg, f2)?;
    Ok((pred1, pred2))
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        init_params(cfg, seed)
    }

    /// Records every parameter on `g`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect()
    }

    /// Forward pass over a batch; returns `(pred1, pred2)` nodes.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        params: &ParamVars,
        batch: &[&SliceTriplet],
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let slots = input_slots::<T>(batch, self.cfg.priors)?;
        let inputs: Vec<Var> = slots.into_iter().map(|t| g.constant(t)).collect();
        stacked_forward(g, params, &mut self.bn, &self.cfg, &inputs, mode)
    }

    /// Eval-mode prediction of stage 2 for each triplet, as `[N, 1, H, W]`.
    pub fn predict(&mut self, batch: &[&SliceTriplet]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (_, pred2) = self.forward(&mut g, &p, batch, Mode::Eval)?;
        Ok(g.value(pred2).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Slice;

    /// Layer-by-layer count written out independently of `SpecBuilder`.
    fn hand_count(cfg: &NetConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let conv_bn = |cin: usize, cout: usize| cout * cin * 9 + 2 * cout;
        let r = cfg.cbam_reduction;
        let cbam = |c: usize| (c * (c / r) + c / r) + ((c / r) * c + c) + conv(2, 1, 7);
        let ch = &cfg.encoder_channels;
        let unet = |cin: usize| {
            let mut total = 0;
            let mut prev = cin;
            for &c in ch {
                total += conv_bn(prev, c) + conv_bn(c, c);
                if cfg.cbam != CbamPlacement::None {
                    total += cbam(c);
                }
                prev = c;
            }
            for l in 0..ch.len() - 1 {
                total += conv_bn(ch[l + 1], ch[l]) + conv_bn(2 * ch[l], ch[l]) + conv_bn(ch[l], ch[l]);
                if cfg.cbam == CbamPlacement::Both {
                    total += cbam(ch[l]);
                }
            }
            total + conv(ch[0], 1, 3)
        };
        let n = cfg.n_inputs();
        let s = cfg.stem_channels;
        let mut total = n * conv_bn(1, s) + unet(n * s);
        if cfg.stacked {
            total += (n + 1) * conv_bn(1, s) + unet((n + 1) * s);
        }
        total
    }

    fn small(levels: usize, chans: Vec<usize>) -> NetConfig {
        NetConfig {
            levels,
            stem_channels: 4,
            encoder_channels: chans,
            cbam_reduction: 2,
            cbam: CbamPlacement::Both,
            priors: PriorSet::Adjacent,
            stacked: true,
            input_size: [16, 16],
        }
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = small(2, vec![4, 8]);
        assert_eq!(param_count(&cfg), hand_count(&cfg));
        let m: Model<f32> = init_params(&cfg, 1).unwrap();
        assert_eq!(m.param_count(), hand_count(&cfg));
        for cfg in [NetConfig::toy(), NetConfig::paper()] {
            assert_eq!(param_count(&cfg), hand_count(&cfg));
        }
        let mut enc_only = NetConfig::toy();
        enc_only.cbam = CbamPlacement::EncoderOnly;
        enc_only.priors = PriorSet::AdjacentAndExtra;
        assert_eq!(param_count(&enc_only), hand_count(&enc_only));
    }

    #[test]
    fn doubling_width_roughly_quadruples_count() {
        let mut a = small(3, vec![8, 16, 32]);
        a.cbam = CbamPlacement::None;
        a.stem_channels = 8;
        let mut b = a.clone();
        b.encoder_channels = vec![16, 32, 64];
        b.stem_channels = 16;
        let ratio = param_count(&b) as f64 / param_count(&a) as f64;
        assert!((3.6..4.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = small(2, vec![4, 8]);
        let a: Model<f32> = init_params(&cfg, 3).unwrap();
        let b: Model<f32> = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.params.values().all(|t| t.all_finite()));
        let c: Model<f32> = init_params(&cfg, 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(2, vec![4, 8]);
        cfg.encoder_channels = vec![4];
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "encoder_channels"));
        let mut cfg = small(2, vec![4, 6]);
        cfg.cbam_reduction = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "cbam_reduction"));
        let mut cfg = small(3, vec![4, 8, 8]);
        cfg.input_size = [18, 16];
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "input_size"));
    }

    fn triplet(n: usize, seed: u64, extra: bool) -> SliceTriplet {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        let mut s = || Slice::new(n, n, (0..n * n).map(|_| rng.random::<f32>()).collect()).unwrap();
        SliceTriplet {
            prev: s(),
            center: s(),
            next: s(),
            extra_prior: if extra { Some(s()) } else { None },
            slice_index: 0,
            subject_id: "s".into(),
        }
    }

    #[test]
    fn output_shape_matches_input_for_several_configs() {
        let mut configs = vec![small(2, vec![4, 8]), small(3, vec![4, 8, 8]), small(1, vec![4])];
        let mut c = small(2, vec![4, 8]);
        c.priors = PriorSet::None;
        c.cbam = CbamPlacement::None;
        configs.push(c);
        let mut c = small(3, vec![2, 4, 4]);
        c.priors = PriorSet::AdjacentAndExtra;
        c.stacked = false;
        c.input_size = [24, 24];
        configs.push(c);
        for cfg in configs {
            let n = cfg.input_size[0];
            let mut m: Model<f32> = init_params(&cfg, 5).unwrap();
            let t = [triplet(n, 1, true), triplet(n, 2, true)];
            let batch: Vec<&SliceTriplet> = t.iter().collect();
            let out = m.predict(&batch).unwrap();
            assert_eq!(out.shape, vec![2, 1, n, n], "{cfg:?}");
        }
    }

    #[test]
    fn unstacked_returns_pred1_twice() {
        let mut cfg = small(2, vec![4, 8]);
        cfg.stacked = false;
        let mut m: Model<f32> = init_params(&cfg, 5).unwrap();
        let t = triplet(16, 9, false);
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let (p1, p2) = m.forward(&mut g, &p, &[&t], Mode::Train).unwrap();
        assert_eq!(g.value(p1), g.value(p2));
    }

    #[test]
    fn stem_widths_follow_input_count() {
        let cfg = NetConfig::toy();
        let specs = SpecBuilder::for_config(&cfg).specs;
        let shape = |n: &str| specs.iter().find(|s| s.name == n).unwrap().shape.clone();
        // 3 stage-1 inputs and 4 stage-2 inputs, 8 channels each.
        assert_eq!(shape("s1.unet.enc0.block1.conv.w")[1], 24);
        assert_eq!(shape("s2.unet.enc0.block1.conv.w")[1], 32);
        let mut paper = NetConfig::paper();
        assert_eq!(
            SpecBuilder::for_config(&paper).specs.iter().find(|s| s.name == "s1.unet.enc0.block1.conv.w").unwrap().shape[1],
            96
        );
        paper.priors = PriorSet::AdjacentAndExtra;
        assert_eq!(
            SpecBuilder::for_config(&paper).specs.iter().find(|s| s.name == "s1.unet.enc0.block1.conv.w").unwrap().shape[1],
            128
        );
    }

    #[test]
    fn zero_input_through_fresh_stem_is_zero() {
        let cfg = small(2, vec![4, 8]);
        let mut m: Model<f64> = init_params(&cfg, 5).unwrap();
        m.params.insert("s1.stem0.conv.w".into(), Tensor::full(&[4, 1, 3, 3], 0.3));
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let y = stem_forward(&mut g, &p, &mut m.bn, "s1.stem0", x, Mode::Eval).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_zero_weights_give_zero_prediction() {
        let cfg = small(2, vec![4, 8]);
        let mut m: Model<f32> = init_params(&cfg, 5).unwrap();
        for t in m.params.values_mut() {
            t.data.fill(0.0);
        }
        let t = triplet(16, 3, false);
        let out = m.predict(&[&t]).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    fn cbam_params(c: usize, r: usize, seed_v: u64) -> (NamedTensors<f64>, Tensor<f64>) {
        let cfg = NetConfig { encoder_channels: vec![c], levels: 1, cbam_reduction: r, ..small(1, vec![c]) };
        let m: Model<f64> = init_params(&cfg, seed_v).unwrap();
        let p: NamedTensors<f64> = m
            .params
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("s1.unet.enc0.cbam.").map(|s| (format!("cb.{s}"), v)))
            .collect();
        use rand::Rng;
        let mut rng = seed::rng(seed_v);
        let x = Tensor { shape: vec![2, c, 8, 8], data: (0..2 * c * 64).map(|_| rng.random_range(-1.0..1.0)).collect() };
        (p, x)
    }

    #[test]
    fn saturated_cbam_is_identity_and_gates_contract() {
        let (mut p, x) = cbam_params(4, 2, 11);
        let run = |p: &NamedTensors<f64>| {
            let mut g = Graph::new();
            let vars: ParamVars = p.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
            let xv = g.constant(x.clone());
            let y = cbam_forward(&mut g, &vars, "cb", xv).unwrap();
            g.value(y).clone()
        };
        let y = run(&p);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!(a.abs() < b.abs() || *b == 0.0, "gate must be strictly inside (0,1)");
        }
        p.get_mut("cb.fc2.b").unwrap().data.fill(1e3);
        p.get_mut("cb.spatial.b").unwrap().data.fill(1e3);
        p.get_mut("cb.spatial.w").unwrap().data.fill(0.0);
        let y = run(&p);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn arch_hash_tracks_config() {
        let a = NetConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.arch_hash(), b.arch_hash());
        b.stacked = false;
        assert_ne!(a.arch_hash(), b.arch_hash());
    }

    #[test]
    fn paper_config_count_is_reported() {
        let (n, reference, dev) = paper_param_report();
        assert!(n > 0 && reference == 4.01e6);
        assert!((dev - 100.0 * (n as f64 - 4.01e6) / 4.01e6).abs() < 1e-12);
    }
}
