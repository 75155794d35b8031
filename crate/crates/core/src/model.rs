//! Backbone, relation module, upsampling and the two prediction heads.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::labeling::LabelConfig;
use crate::math;
use crate::rng::{fnv1a, SplitMix64};
use crate::rram::{self, RramConfig, RramVars};
use crate::tensor::{Graph, Tensor, Var};

/// Total downsampling of the backbone (three 2x2 pools).
pub const DOWNSAMPLE: usize = 8;

/// How backbone conv weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InitScheme {
    /// Zero-mean Gaussian with `init_std`.
    #[default]
    Gaussian,
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`.
    He,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output channels of the three backbone stages.
    pub channels: Vec<usize>,
    pub head_width: usize,
    /// Number of count classes of the classification head.
    pub classes: usize,
    pub init_std: f64,
    pub backbone_init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: vec![32, 64, 128],
            head_width: 256,
            classes: 4,
            init_std: 0.01,
            backbone_init: InitScheme::Gaussian,
        }
    }
}

/// Named parameter set, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; a repeated name is an error.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Validation(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Rounds every value to the nearest binary32, as a checkpoint would.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Parameters placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps graph variables that already hold the named parameters.
    pub fn from_vars<'a>(vars: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: vars.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    /// `[1, Hc, Wc]` predicted count map.
    pub count: Var,
    /// `[C, Hc, Wc]` class logits.
    pub logits: Var,
    /// Backbone (or relation module) features before upsampling.
    pub features: Var,
}

/// A concrete architecture: backbone, optional relation module, heads, and
/// the label grid it predicts on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    rram: Option<RramConfig>,
    label: LabelConfig,
}

impl Model {
    pub fn new(config: ModelConfig, rram: Option<RramConfig>, label: LabelConfig) -> Result<Self> {
        label.validate()?;
        if config.channels.len() != 3 || config.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs three positive stage widths, got {:?}",
                config.channels
            )));
        }
        if config.in_channels == 0 || config.head_width == 0 {
            return Err(Error::Config(
                "in_channels and head_width must be positive".into(),
            ));
        }
        if config.classes != label.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but the label bins define {}",
                config.classes,
                label.num_classes()
            )));
        }
        if !(config.init_std > 0.0 && config.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if let Some(r) = &rram {
            r.validate()?;
        }
        Ok(Self {
            config,
            rram,
            label,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rram(&self) -> Option<&RramConfig> {
        self.rram.as_ref()
    }

    pub fn label(&self) -> &LabelConfig {
        &self.label
    }

    fn features(&self) -> usize {
        self.config.channels[2]
    }

    /// Every parameter name with its dims, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            shapes.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            shapes.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.config.in_channels;
        for (stage, &c) in self.config.channels.iter().enumerate() {
            conv(&format!("backbone.conv{}", 2 * stage + 1), c, cin, 3);
            conv(&format!("backbone.conv{}", 2 * stage + 2), c, c, 3);
            cin = c;
        }
        let cx = self.features();
        let hw = self.config.head_width;
        if let Some(r) = &self.rram {
            conv("rram.theta", r.nodes, cx, 1);
            conv("rram.phi", r.dim, cx, 1);
            conv("rram.psi", cx, r.dim, 1);
        }
        conv("reg.conv1", hw, cx, 3);
        conv("reg.conv2", 1, hw, 1);
        conv("cls.conv1", hw, cx, 3);
        conv("cls.conv2", self.config.classes, hw, 1);
        if let Some(r) = &self.rram {
            shapes.push(("rram.adjacency".to_string(), vec![r.nodes, r.nodes]));
            for l in 0..r.gcn_layers {
                shapes.push((format!("rram.gcn{l}.weight"), vec![r.dim, r.dim]));
            }
        }
        shapes
    }

    /// Weights (and the raw adjacency) from `N(0, std^2)`, biases zero. Each
    /// tensor draws from its own stream keyed by `seed ^ fnv1a(name)`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut params = ModelParams::new();
        for (name, dims) in self.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else {
                let std = match (self.config.backbone_init, name.starts_with("backbone.")) {
                    (InitScheme::He, true) => {
                        let fan_in: usize = dims[1..].iter().product();
                        math::sqrt(2.0 / fan_in as f64)
                    }
                    _ => self.config.init_std,
                };
                let mut rng = SplitMix64::new(seed ^ fnv1a(name.as_bytes()));
                Tensor::from_fn(&dims, |_| std * rng.next_normal())
            };
            params.insert(name, t).expect("parameter names are unique");
        }
        params
    }

    /// Confirms that `params` holds exactly this architecture's tensors.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, dims) in &shapes {
            match params.get(name) {
                None => return Err(Error::Validation(format!("missing parameter {name}"))),
                Some(t) if t.dims() != dims.as_slice() => {
                    return Err(Error::Validation(format!(
                        "parameter {name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .names()
                .find(|n| !shapes.iter().any(|(s, _)| s == n))
                .unwrap_or("?");
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        trainable: bool,
    ) -> Result<BoundParams> {
        self.check_params(params)?;
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Ok(BoundParams { vars })
    }

    /// Label grid size for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(dim_err!("input {h}x{w} is not divisible by {DOWNSAMPLE}"));
        }
        self.label.grid_dims(h, w)
    }

    fn conv(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        name: &str,
        x: Var,
        padding: usize,
    ) -> Result<Var> {
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        g.conv2d(x, w, b, padding)
    }

    /// Three stages of (conv3x3, ReLU, conv3x3, ReLU, maxpool2): 1/8 resolution.
    pub fn backbone_forward(&self, g: &mut Graph, p: &BoundParams, image: Var) -> Result<Var> {
        let d = g.dims(image);
        if d.len() != 3
            || d[0] != self.config.in_channels
            || d[1] % DOWNSAMPLE != 0
            || d[2] % DOWNSAMPLE != 0
        {
            return Err(dim_err!(
                "backbone expects [{}, h, w] with h, w divisible by {DOWNSAMPLE}, got {d:?}",
                self.config.in_channels
            ));
        }
        let mut x = image;
        for stage in 0..3 {
            for j in 1..=2 {
                let c = self.conv(g, p, &format!("backbone.conv{}", 2 * stage + j), x, 1)?;
                x = g.relu(c)?;
            }
            x = g.maxpool2(x)?;
        }
        Ok(x)
    }

    fn rram_vars(&self, p: &BoundParams, layers: usize) -> Result<RramVars> {
        Ok(RramVars {
            theta_weight: p.var("rram.theta.weight")?,
            theta_bias: p.var("rram.theta.bias")?,
            phi_weight: p.var("rram.phi.weight")?,
            phi_bias: p.var("rram.phi.bias")?,
            psi_weight: p.var("rram.psi.weight")?,
            psi_bias: p.var("rram.psi.bias")?,
            adjacency: p.var("rram.adjacency")?,
            gcn_weights: (0..layers)
                .map(|l| p.var(&format!("rram.gcn{l}.weight")))
                .collect::<Result<_>>()?,
        })
    }

    /// Backbone, relation module, bilinear upsampling to the label grid, then
    /// the regression head (conv3x3, ReLU, conv1x1 to 1 channel) and the
    /// classification head (conv3x3, ReLU, conv1x1 to `C` channels).
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: Var) -> Result<ModelOutput> {
        let d = g.dims(image).to_vec();
        if d.len() != 3 {
            return Err(dim_err!("model expects [C,H,W], got {d:?}"));
        }
        let (gh, gw) = self.output_dims(d[1], d[2])?;
        let mut x = self.backbone_forward(g, p, image)?;
        if let Some(r) = &self.rram {
            let vars = self.rram_vars(p, r.gcn_layers)?;
            x = rram::rram_forward(g, x, &vars)?.output;
        }
        let up = g.bilinear_resize(x, gh, gw)?;
        let reg = self.conv(g, p, "reg.conv1", up, 1)?;
        let reg = g.relu(reg)?;
        let count = self.conv(g, p, "reg.conv2", reg, 0)?;
        let cls = self.conv(g, p, "cls.conv1", up, 1)?;
        let cls = g.relu(cls)?;
        let logits = self.conv(g, p, "cls.conv2", cls, 0)?;
        Ok(ModelOutput {
            count,
            logits,
            features: x,
        })
    }

    /// Inference without gradient bookkeeping: `(count map, logits)`.
    pub fn predict(&self, params: &ModelParams, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok((g.tensor(out.count), g.tensor(out.logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn model(rram: bool) -> Model {
        let cfg = ModelConfig {
            channels: vec![4, 4, 4],
            head_width: 8,
            ..ModelConfig::default()
        };
        let r = RramConfig {
            nodes: 2,
            dim: 4,
            gcn_layers: 1,
        };
        Model::new(cfg, rram.then_some(r), LabelConfig::default()).unwrap()
    }

    #[test]
    fn backbone_shapes() {
        let m = model(false);
        let params = m.init_params(0);
        for (size, expect) in [(64, 8), (32, 4)] {
            let mut g = Graph::new();
            let p = m.bind(&mut g, &params, false).unwrap();
            let x = g.constant(Tensor::zeros(&[1, size, size]));
            let f = m.backbone_forward(&mut g, &p, x).unwrap();
            assert_eq!(g.dims(f), &[4, expect, expect]);
            // zero input and zero biases: zero features
            assert!(g.value(f).iter().all(|&v| v == 0.0));
        }
        let mut g = Graph::new();
        let p = m.bind(&mut g, &params, false).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 36, 32]));
        assert!(matches!(
            m.backbone_forward(&mut g, &p, x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn default_backbone_width() {
        let m = Model::new(
            ModelConfig::default(),
            Some(RramConfig::default()),
            LabelConfig::default(),
        )
        .unwrap();
        let params = m.init_params(1);
        let mut g = Graph::new();
        let p = m.bind(&mut g, &params, false).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 32, 32]));
        let f = m.backbone_forward(&mut g, &p, x).unwrap();
        assert_eq!(g.dims(f), &[128, 4, 4]);
    }

    #[test]
    fn output_grid_matches_labels() {
        let m = model(true);
        let params = m.init_params(3);
        let (c, l) = m.predict(&params, &Tensor::zeros(&[1, 64, 64])).unwrap();
        assert_eq!(c.dims(), &[1, 17, 17]);
        assert_eq!(l.dims(), &[4, 17, 17]);
        let (c, l) = m.predict(&params, &Tensor::zeros(&[1, 128, 128])).unwrap();
        assert_eq!(c.dims(), &[1, 33, 33]);
        assert_eq!(l.dims(), &[4, 33, 33]);
        for r in [1, 2, 4, 8, 16] {
            let label = LabelConfig::with_r(r);
            let m = Model::new(
                model(true).config().clone(),
                model(true).rram().cloned(),
                label.clone(),
            )
            .unwrap();
            let params = m.init_params(0);
            for (h, w) in [(32, 32), (48, 64), (64, 32)] {
                let (c, _) = m.predict(&params, &Tensor::zeros(&[1, h, w])).unwrap();
                let (gh, gw) = label.grid_dims(h, w).unwrap();
                assert_eq!(c.dims(), &[1, gh, gw]);
            }
        }
    }

    #[test]
    fn zero_heads_predict_bias() {
        let m = model(true);
        let mut params = m.init_params(4);
        params
            .get_mut("reg.conv2.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);
        params.get_mut("reg.conv2.bias").unwrap().data_mut()[0] = 0.75;
        let img = Tensor::from_fn(&[1, 32, 32], |i| (i % 7) as f64 / 7.0 - 0.5);
        let (c, _) = m.predict(&params, &img).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.75));
        // flipped input: same dims
        let (cf, _) = m.predict(&params, &img.flip_last_axis()).unwrap();
        assert_eq!(cf.dims(), c.dims());
    }

    #[test]
    fn init_is_deterministic_and_gaussian() {
        let m = Model::new(
            ModelConfig::default(),
            Some(RramConfig::default()),
            LabelConfig::default(),
        )
        .unwrap();
        let a = m.init_params(7);
        let b = m.init_params(7);
        assert_eq!(a, b);
        assert_ne!(a, m.init_params(8));
        let mut n = 0usize;
        let (mut s, mut s2) = (0.0, 0.0);
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                for &v in t.data() {
                    n += 1;
                    s += v;
                    s2 += v * v;
                }
            }
        }
        assert!(n >= 100_000);
        let mean = s / n as f64;
        let std = libm::sqrt(s2 / n as f64 - mean * mean);
        assert!((0.009..=0.011).contains(&std), "{std}");
    }

    #[test]
    fn rram_names_are_the_only_difference() {
        let with: Vec<String> = model(true)
            .init_params(0)
            .names()
            .map(String::from)
            .collect();
        let without: Vec<String> = model(false)
            .init_params(0)
            .names()
            .map(String::from)
            .collect();
        let extra: Vec<&String> = with.iter().filter(|n| !without.contains(n)).collect();
        assert!(extra.iter().all(|n| n.starts_with("rram.")));
        assert_eq!(extra.len(), 8);
        assert!(without.iter().all(|n| with.contains(n)));
    }

    #[test]
    fn check_params_catches_mismatch() {
        let m = model(true);
        let mut p = m.init_params(0);
        assert!(m.check_params(&p).is_ok());
        assert!(model(false).check_params(&p).is_err());
        *p.get_mut("cls.conv2.weight").unwrap() = Tensor::zeros(&[5, 8, 1, 1]);
        assert!(m.check_params(&p).is_err());
        assert!(p.insert("rram.adjacency", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn rejects_class_mismatch() {
        let cfg = ModelConfig {
            classes: 3,
            ..ModelConfig::default()
        };
        assert!(Model::new(cfg, None, LabelConfig::default()).is_err());
    }

    #[test]
    fn tiny_model_gradients() {
        let m = Model::new(
            ModelConfig {
                channels: vec![4, 4, 4],
                head_width: 4,
                backbone_init: InitScheme::He,
                init_std: 0.3,
                ..ModelConfig::default()
            },
            Some(RramConfig {
                nodes: 2,
                dim: 4,
                gcn_layers: 1,
            }),
            LabelConfig::default(),
        )
        .unwrap();
        let params = m.init_params(5);
        let mut rng = SplitMix64::new(5);
        let img = Tensor::from_fn(&[1, 32, 32], |_| rng.next_f64() - 0.5);
        let named: Vec<(&str, &Tensor)> = params.iter().collect();
        let report = grad_check(
            &named,
            GradCheckConfig {
                eps: 1e-4,
                tol: 1e-3,
            },
            |g, vars| {
                let bound =
                    BoundParams::from_vars(named.iter().map(|(n, _)| *n).zip(vars.iter().copied()));
                let x = g.constant(img.clone());
                let out = m.forward(g, &bound, x)?;
                let a = g.sum(out.count)?;
                let b = g.sum(out.logits)?;
                let b = g.scale(b, 0.3)?;
                g.add(a, b)
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
