//! Finite-difference gradient suite over every layer kind and the desk model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::DenseArray;
use crate::engine::{
    cross_entropy_loss, grad_check, GradCheckOptions, Graph, LayerKind, LayerNode, Phase,
};
use crate::error::Result;
use crate::network::{build_model, ArchitectureSpec};
use crate::synth::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckCase {
    pub case: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

const KINDS: [&str; 8] = [
    "conv2d",
    "batchnorm",
    "relu",
    "maxpool2x2",
    "global_avg_pool",
    "dense",
    "residual_add",
    "dropout",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DenseArray::from_vec(shape, v).expect("shape matches")
}

fn randomize(node: &mut LayerNode<f64>, rng: &mut ChaCha8Rng) {
    for p in &mut node.params {
        *p = uniform(rng, &p.shape().to_vec(), -1.0, 1.0);
    }
    if let LayerKind::Batchnorm { .. } = node.kind {
        let c = node.buffers[0].len();
        node.buffers[0] = uniform(rng, &[c], -0.5, 0.5);
        node.buffers[1] = uniform(rng, &[c], 0.5, 2.0);
    }
}

/// One random single-layer graph, its input and phase.
fn layer_case(kind: &str, rng: &mut ChaCha8Rng) -> (Graph<f64>, DenseArray<f64>, Phase) {
    let b = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let side = 2 * rng.random_range(2..=3);
    let mut phase = Phase::Eval;
    let image = [b, c, side, side];
    let mut g = Graph::new();
    let mut shape = image.to_vec();
    let node_kind = match kind {
        "conv2d" => {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            LayerKind::Conv2d {
                in_channels: c,
                out_channels: rng.random_range(1..=4),
                kernel: k,
                stride: rng.random_range(1..=2),
                padding: k / 2,
                bias: rng.random_bool(0.5),
            }
        }
        "batchnorm" => {
            if rng.random_bool(0.5) {
                phase = Phase::Train;
            }
            LayerKind::Batchnorm {
                channels: c,
                eps: 1e-5,
                momentum: 0.1,
            }
        }
        "relu" => LayerKind::Relu,
        "maxpool2x2" => LayerKind::Maxpool2x2,
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        "dense" => {
            let fin = rng.random_range(1..=6);
            shape = vec![b, fin];
            LayerKind::Dense {
                in_features: fin,
                out_features: rng.random_range(1..=5),
            }
        }
        "residual_add" => {
            let mut conv = LayerNode::new(
                "branch",
                LayerKind::Conv2d {
                    in_channels: c,
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                },
            );
            randomize(&mut conv, rng);
            let v = g.push(conv, &[0]);
            g.push(LayerNode::new("add", LayerKind::ResidualAdd), &[0, v]);
            let x = uniform(rng, &shape, -1.0, 1.0);
            return (g, x, phase);
        }
        "dropout" => {
            phase = Phase::Train;
            LayerKind::Dropout {
                rate: rng.random_range(0.1..0.6),
            }
        }
        other => unreachable!("unknown layer kind {other}"),
    };
    let mut node = LayerNode::new(kind, node_kind);
    randomize(&mut node, rng);
    g.push(node, &[0]);
    (g, uniform(rng, &shape, -1.0, 1.0), phase)
}

fn check(
    name: String,
    g: &Graph<f64>,
    x: &DenseArray<f64>,
    phase: Phase,
    weights: Option<DenseArray<f64>>,
    coords: usize,
    seed: u64,
) -> Result<CheckCase> {
    // a random linear functional of the output, or summed cross-entropy on class 0
    let loss = |y: &DenseArray<f64>| -> Result<(f64, DenseArray<f64>)> {
        match &weights {
            Some(w) => {
                let l = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                Ok((l, w.clone()))
            }
            None => {
                let (b, k) = y.dims2()?;
                let all: Vec<usize> = (0..k).collect();
                let mut total = 0.0;
                let mut grad = Vec::with_capacity(b * k);
                for i in 0..b {
                    let (l, g) = cross_entropy_loss(y.item(i), i % k, &all)?;
                    total += l;
                    grad.extend(g);
                }
                Ok((total, DenseArray::from_vec(&[b, k], grad)?))
            }
        }
    };
    let opts = GradCheckOptions {
        phase,
        coords_per_param: coords,
        check_input: true,
        seed,
    };
    let rep = grad_check(g, x, &loss, &opts)?;
    Ok(CheckCase {
        case: name,
        max_rel_err: rep.max_rel_err(),
        checked: rep.groups.iter().map(|g| g.checked).sum(),
        skipped_at_kinks: rep.groups.iter().map(|g| g.skipped_at_kinks).sum(),
    })
}

/// `configs` random configurations per layer kind, then the full desk model
/// in both phases.
pub fn gradcheck_suite(seed: u64, configs: usize) -> Result<Vec<CheckCase>> {
    let mut out = Vec::new();
    for (ki, kind) in KINDS.iter().enumerate() {
        for c in 0..configs {
            let s = derive_seed(seed, kind, c as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (g, x, phase) = layer_case(kind, &mut rng);
            let y = g.forward(&x, &mut crate::engine::ForwardCtx::eval(), None);
            let out_shape = match y {
                Ok((y, _)) => y.shape().to_vec(),
                // dropout and batchnorm shapes do not depend on phase
                Err(e) => return Err(e),
            };
            let w = uniform(&mut rng, &out_shape, -1.0, 1.0);
            let name = format!("{kind}#{c} ({phase:?})");
            out.push(check(name, &g, &x, phase, Some(w), 8, s ^ ki as u64)?);
        }
    }
    let model = build_model(&ArchitectureSpec::desk(), derive_seed(seed, "desk", 0))?;
    let mut g: Graph<f64> = model.graph.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "desk-input", 0));
    for node in &mut g.nodes {
        if let LayerKind::Batchnorm { .. } = node.kind {
            randomize(node, &mut rng);
        }
    }
    let x = uniform(&mut rng, &[2, 2, 56, 56], -1.0, 1.0);
    for phase in [Phase::Eval, Phase::Train] {
        out.push(check(
            format!("desk model ({phase:?})"),
            &g,
            &x,
            phase,
            None,
            2,
            derive_seed(seed, "desk-coords", phase as u64),
        )?);
    }
    Ok(out)
}
