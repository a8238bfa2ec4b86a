//! Central finite-difference check of analytic gradients (64-bit).
//!
//! For each sampled coordinate `θ_j` the numeric derivative is
//! `(L(θ_j + h) - L(θ_j - h)) / 2h` with `h = 1e-5`. Coordinates whose
//! perturbation flips a ReLU gate or a max-pool winner are resampled: the loss
//! is not differentiable across those boundaries, so neither side of the
//! comparison is meaningful there.
//!
//! Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. The floor keeps
//! gradients at the level of float round-off (~1e-11 absolute for O(1)
//! losses) from reading as large relative errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Tape};
use super::layers::{Cache, ForwardCtx, Phase};
use crate::array::DenseArray;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Loss on the graph output: returns `(loss, dloss/doutput)`.
pub type LossFn<'a> = dyn Fn(&DenseArray<f64>) -> Result<(f64, DenseArray<f64>)> + 'a;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub phase: Phase,
    /// Coordinates sampled per parameter array (all of them if the array is smaller).
    pub coords_per_param: usize,
    pub check_input: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            phase: Phase::Eval,
            coords_per_param: 6,
            check_input: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    /// `node_name/param_index`, or `input`.
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(PartialEq)]
struct GateSignature {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

fn signature(tape: &Tape<f64>) -> GateSignature {
    let mut relu = Vec::new();
    let mut pool = Vec::new();
    for e in &tape.entries {
        match &e.cache {
            Cache::Relu { mask } => relu.push(mask.clone()),
            Cache::Maxpool { argmax, .. } => pool.push(argmax.clone()),
            _ => {}
        }
    }
    GateSignature { relu, pool }
}

struct Evaluator<'a> {
    phase: Phase,
    dropout_seed: u64,
    loss: &'a LossFn<'a>,
}

impl Evaluator<'_> {
    fn run(&self, g: &Graph<f64>, x: &DenseArray<f64>) -> Result<(f64, GateSignature)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let mut ctx = ForwardCtx {
            phase: self.phase,
            force_dropout: None,
            rng: Some(&mut rng),
        };
        let mut tape = Tape::new();
        let (y, _) = g.forward(x, &mut ctx, Some(&mut tape))?;
        let (l, _) = (self.loss)(&y)?;
        Ok((l, signature(&tape)))
    }
}

/// Compares analytic gradients of `loss(graph(x))` against central differences.
pub fn grad_check(
    graph: &Graph<f64>,
    x: &DenseArray<f64>,
    loss: &LossFn<'_>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = Evaluator {
        phase: opts.phase,
        dropout_seed: opts.seed ^ 0x5eed,
        loss,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(eval.dropout_seed);
    let mut ctx = ForwardCtx {
        phase: opts.phase,
        force_dropout: None,
        rng: Some(&mut rng),
    };
    let mut tape = Tape::new();
    let (y, _) = graph.forward(x, &mut ctx, Some(&mut tape))?;
    let base_sig = signature(&tape);
    let (_, gy) = loss(&y)?;
    let analytic = graph.backward(&tape, gy, x.shape(), opts.check_input)?;

    let mut picker = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    let mut work = graph.clone();

    for ni in 0..graph.nodes.len() {
        for pi in 0..graph.nodes[ni].params.len() {
            let n = graph.nodes[ni].params[pi].len();
            let coords = pick_coords(n, opts.coords_per_param, &mut picker);
            let mut rep = GroupReport {
                name: format!("{}/{}", graph.nodes[ni].name, pi),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                checked: 0,
                skipped_at_kinks: 0,
            };
            for j in coords {
                let orig = work.nodes[ni].params[pi].data()[j];
                work.nodes[ni].params[pi].data_mut()[j] = orig + FD_STEP;
                let (lp, sp) = eval.run(&work, x)?;
                work.nodes[ni].params[pi].data_mut()[j] = orig - FD_STEP;
                let (lm, sm) = eval.run(&work, x)?;
                work.nodes[ni].params[pi].data_mut()[j] = orig;
                if sp != base_sig || sm != base_sig {
                    rep.skipped_at_kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * FD_STEP);
                let a = analytic.params[ni][pi].data()[j];
                rep.max_rel_err = rep.max_rel_err.max(rel_err(a, numeric));
                rep.max_abs_err = rep.max_abs_err.max((a - numeric).abs());
                rep.checked += 1;
            }
            groups.push(rep);
        }
    }

    if opts.check_input {
        let coords = pick_coords(x.len(), opts.coords_per_param, &mut picker);
        let mut xw = x.clone();
        let mut rep = GroupReport {
            name: "input".into(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            skipped_at_kinks: 0,
        };
        for j in coords {
            let orig = xw.data()[j];
            xw.data_mut()[j] = orig + FD_STEP;
            let (lp, sp) = eval.run(graph, &xw)?;
            xw.data_mut()[j] = orig - FD_STEP;
            let (lm, sm) = eval.run(graph, &xw)?;
            xw.data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                rep.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic.input.data()[j];
            rep.max_rel_err = rep.max_rel_err.max(rel_err(a, numeric));
            rep.max_abs_err = rep.max_abs_err.max((a - numeric).abs());
            rep.checked += 1;
        }
        groups.push(rep);
    }
    Ok(GradCheckReport { groups })
}

fn pick_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let j = rng.random_range(0..n);
        if !picked.contains(&j) {
            picked.push(j);
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::layers::{LayerKind, LayerNode};

    #[test]
    fn zero_model_at_symmetric_point_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        g.push(
            LayerNode::new(
                "fc",
                LayerKind::Dense {
                    in_features: 3,
                    out_features: 2,
                },
            ),
            &[0],
        );
        let x = DenseArray::zeros(&[1, 3]);
        // squared norm of output: zero weights and zero input give zero gradient
        let loss = |y: &DenseArray<f64>| {
            let l = y.data().iter().map(|v| v * v).sum::<f64>();
            let gy = DenseArray::from_vec(y.shape(), y.data().iter().map(|v| 2.0 * v).collect())?;
            Ok((l, gy))
        };
        let rep = grad_check(&g, &x, &loss, &GradCheckOptions::default()).unwrap();
        for grp in &rep.groups {
            assert!(grp.max_abs_err < 1e-12, "{grp:?}");
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }
}
