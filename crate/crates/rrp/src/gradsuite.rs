//! Finite-difference checks of every differentiable operator and of a tiny
//! full model.

use rrp_core::labeling::LabelConfig;
use rrp_core::model::{InitScheme, Model, ModelConfig};
use rrp_core::rng::SplitMix64;
use rrp_core::rram::RramConfig;
use rrp_core::tensor::{grad_check, GradCheckConfig, OpKind, Reduction};
use rrp_core::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub op_tol: f64,
    pub model_tol: f64,
    /// Finite-difference step for the whole-model check. The model loss sums
    /// thousands of terms, so a 1e-5 step loses small gradients to rounding.
    pub model_eps: f64,
    pub include_model: bool,
    /// Corrupts one operator's backward pass, to show the suite catches it.
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            op_tol: 1e-4,
            model_tol: 1e-3,
            model_eps: 1e-4,
            include_model: true,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

fn normal(dims: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.next_normal())
}

/// `sum(y * c)` with a fixed random `c`, so every output entry matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed ^ 0xc0ffee);
    let c = normal(&g.dims(y).to_vec(), &mut rng);
    let c = g.constant(c);
    let p = g.mul(y, c)?;
    g.sum(p)
}

/// Ops in the order they are reported.
pub const OPS: [OpKind; 18] = [
    OpKind::Conv2d,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::MaxPool2,
    OpKind::BilinearResize,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Mul,
    OpKind::GlobalAvgPool,
    OpKind::SoftmaxRows,
    OpKind::Slice0,
    OpKind::StackRows,
    OpKind::BroadcastSpatial,
    OpKind::Reshape,
    OpKind::Sum,
    OpKind::Scale,
    OpKind::MseLoss,
    OpKind::CrossEntropy,
];

fn op_inputs(op: OpKind, rng: &mut SplitMix64) -> Vec<Tensor> {
    let mut n = |d: &[usize]| normal(d, rng);
    match op {
        OpKind::Conv2d => vec![n(&[2, 5, 6]), n(&[3, 2, 3, 3]), n(&[3])],
        OpKind::Relu | OpKind::Sigmoid | OpKind::Sum | OpKind::Scale => vec![n(&[2, 3, 4])],
        OpKind::MaxPool2 => vec![n(&[2, 4, 6])],
        OpKind::BilinearResize => vec![n(&[2, 3, 4])],
        OpKind::MatMul => vec![n(&[3, 4]), n(&[4, 5])],
        OpKind::Add | OpKind::Mul => vec![n(&[2, 3, 4]), n(&[1, 3, 4])],
        OpKind::GlobalAvgPool => vec![n(&[3, 4, 5])],
        OpKind::SoftmaxRows => vec![n(&[3, 5])],
        OpKind::Slice0 => vec![n(&[3, 2, 4])],
        OpKind::StackRows => vec![n(&[4]), n(&[4]), n(&[4])],
        OpKind::BroadcastSpatial => vec![n(&[4])],
        OpKind::Reshape => vec![n(&[2, 6])],
        OpKind::MseLoss => vec![n(&[1, 3, 4])],
        OpKind::CrossEntropy => vec![n(&[4, 2, 3])],
        OpKind::Leaf => vec![],
    }
}

fn op_forward(op: OpKind, g: &mut Graph, v: &[Var], seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed ^ 0x7a26);
    let y = match op {
        OpKind::Conv2d => g.conv2d(v[0], v[1], v[2], 1)?,
        OpKind::Relu => g.relu(v[0])?,
        OpKind::Sigmoid => g.sigmoid(v[0])?,
        OpKind::MaxPool2 => g.maxpool2(v[0])?,
        OpKind::BilinearResize => g.bilinear_resize(v[0], 5, 7)?,
        OpKind::MatMul => g.matmul(v[0], v[1])?,
        OpKind::Add => g.add(v[0], v[1])?,
        OpKind::Mul => g.mul(v[0], v[1])?,
        OpKind::GlobalAvgPool => g.global_average_pool(v[0])?,
        OpKind::SoftmaxRows => g.softmax_rows(v[0])?,
        OpKind::Slice0 => g.slice0(v[0], 1)?,
        OpKind::StackRows => g.stack_rows(v)?,
        OpKind::BroadcastSpatial => g.broadcast_spatial(v[0], 3, 5)?,
        OpKind::Reshape => g.reshape(v[0], &[3, 4])?,
        OpKind::Sum => return g.sum(v[0]),
        OpKind::Scale => g.scale(v[0], -1.3)?,
        OpKind::MseLoss => {
            let target = normal(&[1, 3, 4], &mut rng);
            let red = if seed % 2 == 0 {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            return g.mse_loss(v[0], &target, red);
        }
        OpKind::CrossEntropy => {
            let classes: Vec<usize> = (0..6).map(|_| rng.below(4) as usize).collect();
            let red = if seed % 2 == 0 {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            return g.cross_entropy(v[0], &classes, red);
        }
        OpKind::Leaf => unreachable!("leaves have no backward pass"),
    };
    project(g, y, seed)
}

fn merge(
    name: &str,
    tol: f64,
    reports: impl IntoIterator<Item = rrp_core::tensor::GradCheckReport>,
) -> CheckResult {
    let mut r = CheckResult {
        name: name.to_string(),
        max_rel_error: 0.0,
        tol,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for rep in reports {
        r.max_rel_error = r.max_rel_error.max(rep.max_rel_error);
        r.checked += rep.checked;
        r.skipped += rep.skipped;
        r.passed &= rep.passed;
    }
    r
}

pub fn check_op(op: OpKind, cfg: &SuiteConfig) -> Result<CheckResult> {
    let gc = GradCheckConfig {
        eps: 1e-5,
        tol: cfg.op_tol,
    };
    let mut reports = Vec::new();
    for seed in 0..cfg.seeds {
        let mut rng =
            SplitMix64::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ op.name().len() as u64);
        let inputs = op_inputs(op, &mut rng);
        let names: Vec<String> = (0..inputs.len())
            .map(|i| format!("{}.input{i}", op.name()))
            .collect();
        let params: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&inputs).collect();
        reports.push(grad_check(&params, gc, |g, v| {
            if let Some(f) = cfg.fault {
                g.inject_fault(f);
            }
            op_forward(op, g, v, seed)
        })?);
    }
    Ok(merge(op.name(), cfg.op_tol, reports))
}

/// The tiny architecture used for whole-model checks.
pub fn tiny_model() -> Model {
    Model::new(
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
    .expect("tiny model config is valid")
}

/// Checks every parameter of [`tiny_model`] on a random 32x32 input through
/// both heads' losses.
pub fn check_model(cfg: &SuiteConfig) -> Result<CheckResult> {
    let model = tiny_model();
    let gc = GradCheckConfig {
        eps: cfg.model_eps,
        tol: cfg.model_tol,
    };
    let mut reports = Vec::new();
    for seed in 0..cfg.seeds {
        let params = model.init_params(seed);
        let mut rng = SplitMix64::new(seed ^ 0x1111);
        let image = Tensor::from_fn(&[1, 32, 32], |_| rng.next_f64() - 0.5);
        let target = Tensor::from_fn(&[1, 9, 9], |_| rng.below(5) as f64);
        let classes: Vec<usize> = (0..81).map(|_| rng.below(4) as usize).collect();
        let named: Vec<(&str, &Tensor)> = params.iter().collect();
        reports.push(grad_check(&named, gc, |g, vars| {
            if let Some(f) = cfg.fault {
                g.inject_fault(f);
            }
            let bound = rrp_core::model::BoundParams::from_vars(
                named.iter().map(|(n, _)| *n).zip(vars.iter().copied()),
            );
            let x = g.constant(image.clone());
            let out = model.forward(g, &bound, x)?;
            let reg = g.mse_loss(out.count, &target, Reduction::Mean)?;
            let cls = g.cross_entropy(out.logits, &classes, Reduction::Mean)?;
            g.add(reg, cls)
        })?);
    }
    Ok(merge("model", cfg.model_tol, reports))
}

/// One result per operator, then the full model.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for op in OPS {
        out.push(check_op(op, cfg)?);
    }
    if cfg.include_model {
        out.push(check_model(cfg)?);
    }
    Ok(out)
}
