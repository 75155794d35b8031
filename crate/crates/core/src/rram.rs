//! Region relation-aware module.
//!
//! `n` attention maps select regions of the feature map; each region is
//! summarized by attention-weighted global average pooling of a reduced
//! feature map, the `n` summaries are mixed by a GCN over a learnable fully
//! connected directed graph, and the mixed summaries are painted back through
//! the same attention maps and added to the input features.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RramConfig {
    /// Number of region nodes `n`.
    pub nodes: usize,
    /// Reduced channel dimension `d`, kept by every GCN layer.
    pub dim: usize,
    pub gcn_layers: usize,
}

impl Default for RramConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            dim: 64,
            gcn_layers: 1,
        }
    }
}

impl RramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "rram needs positive nodes and dim, got n = {}, d = {}",
                self.nodes, self.dim
            )));
        }
        Ok(())
    }
}

/// Graph handles of the module's parameters.
#[derive(Debug, Clone)]
pub struct RramVars {
    /// `[n, Cx, 1, 1]` and `[n]`: one 1x1 attention conv per node.
    pub theta_weight: Var,
    pub theta_bias: Var,
    /// `[d, Cx, 1, 1]` and `[d]`.
    pub phi_weight: Var,
    pub phi_bias: Var,
    /// `[Cx, d, 1, 1]` and `[Cx]`.
    pub psi_weight: Var,
    pub psi_bias: Var,
    /// Raw adjacency `[n, n]`.
    pub adjacency: Var,
    /// One `[d, d]` weight per GCN layer.
    pub gcn_weights: Vec<Var>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct RramOutput {
    pub output: Var,
    pub attention: Var,
    pub descriptors: Var,
    pub relation_descriptors: Var,
    pub adjacency: Var,
}

/// `sigmoid(theta(X))`: one map in `(0, 1)` per node, `[n, H, W]`.
pub fn attention_maps(g: &mut Graph, x: Var, theta_weight: Var, theta_bias: Var) -> Result<Var> {
    let k = g.dims(theta_weight);
    if k.len() != 4 || k[2] != 1 || k[3] != 1 {
        return Err(Error::Dimension(format!(
            "attention conv must be 1x1, got {k:?}"
        )));
    }
    let logits = g.conv2d(x, theta_weight, theta_bias, 0)?;
    g.sigmoid(logits)
}

/// `z_v = GAP(W_v * F)` for every node, stacked to `[n, d]`, where `F` is an
/// already reduced `[d, H, W]` feature map.
pub fn pool_regions(g: &mut Graph, features: Var, attention: Var) -> Result<Var> {
    let (fd, ad) = (g.dims(features), g.dims(attention));
    if fd.len() != 3 || ad.len() != 3 || fd[1..] != ad[1..] {
        return Err(Error::Dimension(format!(
            "features {fd:?} and attention {ad:?} must share spatial dims"
        )));
    }
    let n = ad[0];
    let mut rows = Vec::with_capacity(n);
    for v in 0..n {
        let map = g.slice0(attention, v)?;
        let masked = g.mul(features, map)?;
        rows.push(g.global_average_pool(masked)?);
    }
    g.stack_rows(&rows)
}

/// Region descriptors `Z = [GAP(W_v * phi(X))]_v`, with `phi` a 1x1 conv.
pub fn weighted_pool(
    g: &mut Graph,
    x: Var,
    phi_weight: Var,
    phi_bias: Var,
    attention: Var,
) -> Result<Var> {
    let features = g.conv2d(x, phi_weight, phi_bias, 0)?;
    pool_regions(g, features, attention)
}

/// `softmax_rows(A + I)`.
pub fn normalize_adjacency(g: &mut Graph, adjacency: Var) -> Result<Var> {
    let d = g.dims(adjacency);
    if d.len() != 2 || d[0] != d[1] {
        return Err(Error::Dimension(format!(
            "adjacency must be square, got {d:?}"
        )));
    }
    let eye = g.constant(Tensor::eye(d[0]));
    let biased = g.add(adjacency, eye)?;
    g.softmax_rows(biased)
}

/// `ReLU(A_hat H W)`.
pub fn gcn_layer(g: &mut Graph, h: Var, adjacency_hat: Var, weight: Var) -> Result<Var> {
    let mixed = g.matmul(adjacency_hat, h)?;
    let projected = g.matmul(mixed, weight)?;
    g.relu(projected)
}

/// `X' = sum_v broadcast(H_v) * W_v`, a `[d, H, W]` map.
pub fn broadcast_regions(g: &mut Graph, descriptors: Var, attention: Var) -> Result<Var> {
    let (dd, ad) = (g.dims(descriptors), g.dims(attention));
    if dd.len() != 2 || ad.len() != 3 || dd[0] != ad[0] {
        return Err(Error::Dimension(format!(
            "descriptors {dd:?} and attention {ad:?} disagree on node count"
        )));
    }
    let (n, h, w) = (ad[0], ad[1], ad[2]);
    let mut acc: Option<Var> = None;
    for v in 0..n {
        let row = g.slice0(descriptors, v)?;
        let spread = g.broadcast_spatial(row, h, w)?;
        let map = g.slice0(attention, v)?;
        let painted = g.mul(spread, map)?;
        acc = Some(match acc {
            None => painted,
            Some(prev) => g.add(prev, painted)?,
        });
    }
    Ok(acc.expect("at least one node"))
}

/// `X + psi(X')`, with `psi` a 1x1 conv from `d` back to `Cx` channels.
pub fn broadcast_fuse(
    g: &mut Graph,
    descriptors: Var,
    attention: Var,
    x: Var,
    psi_weight: Var,
    psi_bias: Var,
) -> Result<Var> {
    let painted = broadcast_regions(g, descriptors, attention)?;
    let expanded = g.conv2d(painted, psi_weight, psi_bias, 0)?;
    g.add(x, expanded)
}

/// Full module: attention, pooling, `L_g` GCN layers, fusion.
pub fn rram_forward(g: &mut Graph, x: Var, p: &RramVars) -> Result<RramOutput> {
    let attention = attention_maps(g, x, p.theta_weight, p.theta_bias)?;
    let descriptors = weighted_pool(g, x, p.phi_weight, p.phi_bias, attention)?;
    let adjacency = normalize_adjacency(g, p.adjacency)?;
    let mut h = descriptors;
    for &w in &p.gcn_weights {
        h = gcn_layer(g, h, adjacency, w)?;
    }
    let output = broadcast_fuse(g, h, attention, x, p.psi_weight, p.psi_bias)?;
    Ok(RramOutput {
        output,
        attention,
        descriptors,
        relation_descriptors: h,
        adjacency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::{grad_check, GradCheckConfig};
    use alloc::vec;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn random(dims: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
        Tensor::from_fn(dims, |_| scale * rng.next_normal())
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4, 4], &mut SplitMix64::new(1), 1.0));
        let w = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
        let b0 = g.constant(Tensor::zeros(&[2]));
        let a = attention_maps(&mut g, x, w, b0).unwrap();
        assert!(g.value(a).iter().all(|&v| v == 0.5));

        let b = g.constant(t(&[2], &[40.0, -1.0]));
        let a = attention_maps(&mut g, x, w, b).unwrap();
        let v = g.value(a);
        assert!(v[..16].iter().all(|&x| x == 1.0));
        let s = 1.0 / (1.0 + libm::exp(1.0));
        assert!(v[16..].iter().all(|&x| (x - s).abs() < 1e-15));

        let w3 = g.constant(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(attention_maps(&mut g, x, w3, b).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3, 2, 2], 1.0));
        let half = g.constant(Tensor::full(&[1, 2, 2], 0.5));
        let z = pool_regions(&mut g, ones, half).unwrap();
        assert_eq!(g.dims(z), &[1, 3]);
        assert_eq!(g.value(z), &[0.5; 3]);

        let zero = g.constant(Tensor::zeros(&[3, 2, 2]));
        let att = g.constant(random(&[2, 2, 2], &mut SplitMix64::new(2), 1.0));
        let z = pool_regions(&mut g, zero, att).unwrap();
        assert_eq!(g.value(z), &[0.0; 6]);

        let f = g.constant(t(&[1, 2, 2], &[4.0, 0.0, 0.0, 0.0]));
        let m = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let z = pool_regions(&mut g, f, m).unwrap();
        assert_eq!(g.value(z), &[1.0]);
    }

    #[test]
    fn pooling_equals_matrix_product() {
        // Z = W_flat F_flat^T / (H W), an independent route.
        let mut rng = SplitMix64::new(3);
        let (n, d, h, w) = (3, 4, 3, 5);
        let f = random(&[d, h, w], &mut rng, 1.0);
        let a = random(&[n, h, w], &mut rng, 1.0);
        let mut g = Graph::new();
        let (fv, av) = (g.constant(f.clone()), g.constant(a.clone()));
        let z = pool_regions(&mut g, fv, av).unwrap();
        for v in 0..n {
            for c in 0..d {
                let mut s = 0.0;
                for p in 0..h * w {
                    s += a.data()[v * h * w + p] * f.data()[c * h * w + p];
                }
                assert!((g.value(z)[v * d + c] - s / (h * w) as f64).abs() < 1e-14);
            }
        }
    }

    fn adjacency_oracle(a: &Tensor) -> Vec<f64> {
        let n = a.dims()[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| a.data()[i * n + j] + if i == j { 1.0 } else { 0.0 })
                .collect();
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let denom: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            for j in 0..n {
                out[i * n + j] = libm::exp(row[j] - max) / denom;
            }
        }
        out
    }

    fn gcn_oracle(h: &Tensor, ahat: &[f64], w: &Tensor) -> Vec<f64> {
        let (n, d) = (h.dims()[0], h.dims()[1]);
        let mut mixed = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                for j in 0..n {
                    mixed[i * d + c] += ahat[i * n + j] * h.data()[j * d + c];
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += mixed[i * d + k] * w.data()[k * d + c];
                }
                out[i * d + c] = s.max(0.0);
            }
        }
        out
    }

    #[test]
    fn adjacency_examples() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 1], &[-3.7]));
        let ah = normalize_adjacency(&mut g, a).unwrap();
        assert_eq!(g.value(ah), &[1.0]);

        let a = g.param(Tensor::zeros(&[2, 2]));
        let ah = normalize_adjacency(&mut g, a).unwrap();
        let v = g.value(ah);
        assert!((v[0] - 0.73106).abs() < 1e-5 && (v[1] - 0.26894).abs() < 1e-5);
        assert!(v[0] > v[1] && v[3] > v[2]);
        let bad = g.param(Tensor::zeros(&[2, 3]));
        assert!(normalize_adjacency(&mut g, bad).is_err());
    }

    #[test]
    fn gcn_examples() {
        let mut g = Graph::new();
        let h = g.constant(t(&[1, 2], &[1.0, -2.0]));
        let a = g.constant(t(&[1, 1], &[1.0]));
        let w = g.constant(Tensor::eye(2));
        let y = gcn_layer(&mut g, h, a, w).unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0]);

        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let a2 = g.constant(Tensor::full(&[2, 2], 0.5));
        let y = gcn_layer(&mut g, zero, a2, w).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);

        let i2 = g.constant(Tensor::eye(2));
        let y = gcn_layer(&mut g, i2, a2, w).unwrap();
        assert_eq!(g.value(y), &[0.5; 4]);

        let w3 = g.constant(Tensor::eye(3));
        assert!(gcn_layer(&mut g, i2, a2, w3).is_err());
    }

    proptest! {
        #[test]
        fn gcn_and_adjacency_match_loop_oracles(n in 1usize..=8, d in 1usize..=8, seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let a = random(&[n, n], &mut rng, 1.0);
            let h = random(&[n, d], &mut rng, 1.0);
            let w = random(&[d, d], &mut rng, 1.0);
            let expect_a = adjacency_oracle(&a);
            let expect_h = gcn_oracle(&h, &expect_a, &w);
            let mut g = Graph::new();
            let av = g.param(a);
            let ah = normalize_adjacency(&mut g, av).unwrap();
            for (x, e) in g.value(ah).iter().zip(&expect_a) {
                prop_assert!((x - e).abs() <= 1e-12);
            }
            for row in g.value(ah).chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let (hv, wv) = (g.constant(h), g.constant(w));
            let y = gcn_layer(&mut g, hv, ah, wv).unwrap();
            for (x, e) in g.value(y).iter().zip(&expect_h) {
                prop_assert!((x - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let mut rng = SplitMix64::new(9);
        let x = random(&[3, 2, 2], &mut rng, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let att = g.constant(random(&[2, 2, 2], &mut rng, 1.0));
        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let psi = g.constant(random(&[3, 3, 1, 1], &mut rng, 1.0));
        let psi_b = g.constant(Tensor::zeros(&[3]));
        let y = broadcast_fuse(&mut g, zero, att, xv, psi, psi_b).unwrap();
        assert_eq!(g.value(y), x.data());

        // one node, constant attention 1, identity psi
        let h1 = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let hv = g.constant(h1.clone());
        let ones = g.constant(Tensor::full(&[1, 2, 2], 1.0));
        let eye = g.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
        let y = broadcast_fuse(&mut g, hv, ones, xv, eye, psi_b).unwrap();
        for (i, v) in g.value(y).iter().enumerate() {
            assert_eq!(*v, x.data()[i] + h1.data()[i / 4]);
        }

        // two nodes with disjoint masks on a 2x2 grid
        let hv = g.constant(t(&[2, 2], &[1.0, 2.0, 10.0, 20.0]));
        let masks = g.constant(t(&[2, 2, 2], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let painted = broadcast_regions(&mut g, hv, masks).unwrap();
        assert_eq!(
            g.value(painted),
            &[1.0, 1.0, 10.0, 10.0, 2.0, 2.0, 20.0, 20.0]
        );
    }

    fn random_vars(
        g: &mut Graph,
        rng: &mut SplitMix64,
        cx: usize,
        n: usize,
        d: usize,
        layers: usize,
    ) -> RramVars {
        RramVars {
            theta_weight: g.param(random(&[n, cx, 1, 1], rng, 0.5)),
            theta_bias: g.param(random(&[n], rng, 0.5)),
            phi_weight: g.param(random(&[d, cx, 1, 1], rng, 0.5)),
            phi_bias: g.param(random(&[d], rng, 0.5)),
            psi_weight: g.param(random(&[cx, d, 1, 1], rng, 0.5)),
            psi_bias: g.param(random(&[cx], rng, 0.5)),
            adjacency: g.param(random(&[n, n], rng, 0.5)),
            gcn_weights: (0..layers)
                .map(|_| g.param(random(&[d, d], rng, 0.5)))
                .collect(),
        }
    }

    #[test]
    fn zero_layers_means_no_mixing() {
        let mut rng = SplitMix64::new(11);
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 3, 3], &mut rng, 1.0));
        let p = random_vars(&mut g, &mut rng, 4, 3, 5, 0);
        let out = rram_forward(&mut g, x, &p).unwrap();
        assert_eq!(out.relation_descriptors, out.descriptors);
    }

    #[test]
    fn permuting_nodes_is_consistent() {
        let mut rng = SplitMix64::new(12);
        let (cx, n, d, h, w) = (3, 3, 4, 3, 3);
        let x = random(&[cx, h, w], &mut rng, 1.0);
        let theta = random(&[n, cx, 1, 1], &mut rng, 1.0);
        let theta_b = random(&[n], &mut rng, 1.0);
        let phi = random(&[d, cx, 1, 1], &mut rng, 1.0);
        let phi_b = random(&[d], &mut rng, 1.0);
        let psi = random(&[cx, d, 1, 1], &mut rng, 1.0);
        let psi_b = random(&[cx], &mut rng, 1.0);
        let adj = random(&[n, n], &mut rng, 1.0);
        let gcn = random(&[d, d], &mut rng, 1.0);
        let perm = [2usize, 0, 1];

        let permute_rows = |t: &Tensor| -> Tensor {
            let stride = t.len() / t.dims()[0];
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * stride..(p + 1) * stride]);
            }
            Tensor::new(t.dims().to_vec(), data).unwrap()
        };
        let adj_p = Tensor::from_fn(&[n, n], |i| adj.data()[perm[i / n] * n + perm[i % n]]);

        let run = |theta: Tensor, theta_b: Tensor, adj: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let vars = RramVars {
                theta_weight: g.param(theta),
                theta_bias: g.param(theta_b),
                phi_weight: g.param(phi.clone()),
                phi_bias: g.param(phi_b.clone()),
                psi_weight: g.param(psi.clone()),
                psi_bias: g.param(psi_b.clone()),
                adjacency: g.param(adj),
                gcn_weights: vec![g.param(gcn.clone())],
            };
            let out = rram_forward(&mut g, xv, &vars).unwrap();
            (
                g.tensor(out.descriptors),
                g.tensor(out.relation_descriptors),
                g.tensor(out.output),
            )
        };
        let (z, hl, y) = run(theta.clone(), theta_b.clone(), adj);
        let (zp, hlp, yp) = run(permute_rows(&theta), permute_rows(&theta_b), adj_p);
        let close = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&permute_rows(&z), &zp));
        assert!(close(&permute_rows(&hl), &hlp));
        assert!(close(&y, &yp));
    }

    #[test]
    fn end_to_end_gradients() {
        for seed in 0..10u64 {
            let mut rng = SplitMix64::new(500 + seed);
            let (cx, n, d) = (3, 3, 5);
            let x = random(&[cx, 4, 4], &mut rng, 1.0);
            let params: Vec<Tensor> = vec![
                random(&[n, cx, 1, 1], &mut rng, 0.5),
                random(&[n], &mut rng, 0.5),
                random(&[d, cx, 1, 1], &mut rng, 0.5),
                random(&[d], &mut rng, 0.5),
                random(&[cx, d, 1, 1], &mut rng, 0.5),
                random(&[cx], &mut rng, 0.5),
                random(&[n, n], &mut rng, 0.5),
                random(&[d, d], &mut rng, 0.5),
                x,
            ];
            let names = [
                "theta.w",
                "theta.b",
                "phi.w",
                "phi.b",
                "psi.w",
                "psi.b",
                "adjacency",
                "gcn0",
                "x",
            ];
            let named: Vec<(&str, &Tensor)> = names.iter().copied().zip(params.iter()).collect();
            let wsum = random(&[cx, 4, 4], &mut rng, 1.0);
            let report = grad_check(&named, GradCheckConfig::default(), |g, v| {
                let vars = RramVars {
                    theta_weight: v[0],
                    theta_bias: v[1],
                    phi_weight: v[2],
                    phi_bias: v[3],
                    psi_weight: v[4],
                    psi_bias: v[5],
                    adjacency: v[6],
                    gcn_weights: vec![v[7]],
                };
                let out = rram_forward(g, v[8], &vars)?;
                let w = g.constant(wsum.clone());
                let p = g.mul(out.output, w)?;
                g.sum(p)
            })
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }
}
