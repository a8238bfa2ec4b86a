//! Static layer graphs with a recording tape for reverse-mode gradients.
//!
//! Values are numbered: value `0` is the graph input and node `i` produces
//! value `i + 1`. Nodes run in list order, so the list order is a valid
//! topological order and the backward pass is its exact reverse.

use super::layers::{layer_backward, layer_forward, Cache, ForwardCtx, LayerNode, Phase};
use crate::array::{DenseArray, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T> {
    pub nodes: Vec<LayerNode<T>>,
    /// Input value ids of each node.
    pub wiring: Vec<Vec<usize>>,
}

#[derive(Debug)]
pub struct TapeEntry<T> {
    pub node: usize,
    pub cache: Cache<T>,
}

/// Forward record consumed by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    pub entries: Vec<TapeEntry<T>>,
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-node parameter gradients, aligned with `Graph::nodes[i].params`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Vec<Vec<DenseArray<T>>>,
    /// Gradient with respect to the graph input (zeros unless requested).
    pub input: DenseArray<T>,
    /// Node indices in the order the backward pass visited them.
    pub visit_order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|a| a.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }
}

/// Batch statistics produced by batchnorm nodes during a training pass.
pub type StatUpdates<T> = Vec<(usize, Vec<T>, Vec<T>, usize)>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            wiring: Vec::new(),
        }
    }

    /// Appends a node reading the given value ids; returns the id of its output.
    pub fn push(&mut self, node: LayerNode<T>, inputs: &[usize]) -> usize {
        self.nodes.push(node);
        self.wiring.push(inputs.to_vec());
        self.nodes.len()
    }

    pub fn output_value(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() != self.wiring.len() {
            return Err(Error::config("graph wiring length differs from node count"));
        }
        for (i, (node, ins)) in self.nodes.iter().zip(&self.wiring).enumerate() {
            node.validate()?;
            if ins.len() != node.kind.arity() {
                return Err(Error::config(format!(
                    "node `{}` wired to {} inputs, needs {}",
                    node.name,
                    ins.len(),
                    node.kind.arity()
                )));
            }
            if ins.iter().any(|&v| v > i) {
                return Err(Error::config(format!(
                    "node `{}` reads a value produced later",
                    node.name
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.iter().map(|n| n.cast()).collect(),
            wiring: self.wiring.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.param_count()).sum()
    }

    fn last_uses(&self) -> Vec<usize> {
        let mut last = vec![0usize; self.nodes.len() + 1];
        for (i, ins) in self.wiring.iter().enumerate() {
            for &v in ins {
                last[v] = last[v].max(i);
            }
        }
        last
    }

    /// Runs the graph. With a tape, every node's cache is recorded.
    ///
    /// Batchnorm statistics of a training pass are returned rather than applied,
    /// so this takes `&self` and a frozen graph can be shared across threads.
    pub fn forward(
        &self,
        x: &DenseArray<T>,
        ctx: &mut ForwardCtx<'_>,
        tape: Option<&mut Tape<T>>,
    ) -> Result<(DenseArray<T>, StatUpdates<T>)> {
        self.forward_until(x, ctx, tape, self.nodes.len())
    }

    /// Runs only the first `end` nodes and returns value `end`.
    pub fn forward_until(
        &self,
        x: &DenseArray<T>,
        ctx: &mut ForwardCtx<'_>,
        mut tape: Option<&mut Tape<T>>,
        end: usize,
    ) -> Result<(DenseArray<T>, StatUpdates<T>)> {
        if end > self.nodes.len() {
            return Err(Error::usage(format!(
                "graph has {} nodes, cannot stop after {end}",
                self.nodes.len()
            )));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.clear();
        }
        let last = self.last_uses();
        let out_id = end;
        let mut values: Vec<Option<DenseArray<T>>> = vec![None; self.nodes.len() + 1];
        values[0] = Some(x.clone());
        let mut updates = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(end) {
            let inputs: Vec<&DenseArray<T>> = self.wiring[i]
                .iter()
                .map(|&v| {
                    values[v]
                        .as_ref()
                        .ok_or_else(|| Error::Internal(format!("value {v} released early")))
                })
                .collect::<Result<_>>()?;
            let count = inputs[0].len() / inputs[0].shape().get(1).copied().unwrap_or(1);
            let out = layer_forward(node, &inputs, ctx)?;
            if let Some((mean, var)) = out.batch_stats {
                updates.push((i, mean, var, count));
            }
            if let Some(t) = tape.as_deref_mut() {
                t.entries.push(TapeEntry {
                    node: i,
                    cache: out.cache,
                });
            }
            values[i + 1] = Some(out.value);
            for &v in &self.wiring[i] {
                if last[v] == i && v != out_id {
                    values[v] = None;
                }
            }
        }
        let y = values[out_id]
            .take()
            .ok_or_else(|| Error::Internal("graph produced no output".into()))?;
        Ok((y, updates))
    }

    /// Blends batch statistics into the batchnorm running buffers.
    pub fn apply_stat_updates(&mut self, updates: StatUpdates<T>) {
        for (i, mean, var, count) in updates {
            let node = &mut self.nodes[i];
            let momentum = match node.kind {
                super::layers::LayerKind::Batchnorm { momentum, .. } => T::lit(momentum),
                _ => continue,
            };
            let keep = T::one() - momentum;
            let unbias = if count > 1 {
                T::lit(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            for (r, &m) in node.buffers[0].data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in node.buffers[1].data_mut().iter_mut().zip(&var) {
                *r = keep * *r + momentum * v * unbias;
            }
        }
    }

    /// Training-phase forward that records the tape and updates running stats.
    pub fn forward_train(
        &mut self,
        x: &DenseArray<T>,
        ctx: &mut ForwardCtx<'_>,
        tape: &mut Tape<T>,
    ) -> Result<DenseArray<T>> {
        debug_assert_eq!(ctx.phase, Phase::Train);
        let (y, updates) = self.forward(x, ctx, Some(tape))?;
        self.apply_stat_updates(updates);
        Ok(y)
    }

    /// Reverse pass over a recorded tape.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_out: DenseArray<T>,
        input_shape: &[usize],
        want_input_grad: bool,
    ) -> Result<Gradients<T>> {
        if tape.len() != self.nodes.len()
            || tape.entries.iter().enumerate().any(|(i, e)| e.node != i)
        {
            return Err(Error::usage(
                "backward requires a complete forward record on the tape",
            ));
        }
        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; self.nodes.len() + 1];
        grads[self.output_value()] = Some(grad_out);
        let mut params: Vec<Vec<DenseArray<T>>> = vec![Vec::new(); self.nodes.len()];
        let mut visit_order = Vec::with_capacity(self.nodes.len());
        for entry in tape.entries.iter().rev() {
            let i = entry.node;
            visit_order.push(i);
            let node = &self.nodes[i];
            let g = match grads[i + 1].take() {
                Some(g) => g,
                None => {
                    // output never reached the loss; contributes nothing
                    params[i] = node
                        .params
                        .iter()
                        .map(|p| DenseArray::zeros(p.shape()))
                        .collect();
                    continue;
                }
            };
            let need_input = want_input_grad || self.wiring[i].iter().any(|&v| v != 0);
            let (input_grads, param_grads) = layer_backward(node, &entry.cache, &g, need_input)?;
            params[i] = param_grads;
            for (&v, gi) in self.wiring[i].iter().zip(input_grads) {
                match grads[v].as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads[v] = Some(gi),
                }
            }
        }
        let input = grads[0]
            .take()
            .unwrap_or_else(|| DenseArray::zeros(input_shape));
        Ok(Gradients {
            params,
            input,
            visit_order,
        })
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::layers::LayerKind;

    fn residual_graph() -> Graph<f64> {
        let mut g = Graph::new();
        let a = g.push(LayerNode::new("relu", LayerKind::Relu), &[0]);
        g.push(LayerNode::new("add", LayerKind::ResidualAdd), &[0, a]);
        g
    }

    #[test]
    fn skip_connection_gradients_accumulate() {
        let g = residual_graph();
        let x = DenseArray::from_f64(&[3], &[-1.0, 2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let (y, _) = g
            .forward(&x, &mut ForwardCtx::eval(), Some(&mut tape))
            .unwrap();
        assert_eq!(y.data(), &[-1.0, 4.0, 1.0]);
        let grads = g
            .backward(&tape, DenseArray::full(&[3], 1.0), x.shape(), true)
            .unwrap();
        // identity path contributes 1, relu path contributes 1 where x > 0
        assert_eq!(grads.input.data(), &[1.0, 2.0, 2.0]);
        assert_eq!(grads.visit_order, vec![1, 0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let g = residual_graph();
        let tape = Tape::new();
        let err = g
            .backward(&tape, DenseArray::full(&[3], 1.0), &[3], true)
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
