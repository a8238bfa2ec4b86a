//! Residual CNN built from a declarative description.
//!
//! Every residual block is `conv3x3 → bn → relu → conv3x3 → bn`, added to a
//! shortcut (identity, or `conv1x1 → bn` when the block changes width or
//! stride), followed by a relu. The head is global average pooling, a dropout
//! node (inert unless a rate is configured or MC-dropout forces it), and one
//! dense layer emitting the pre-softmax scores of every network class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::{DenseArray, Scalar};
use crate::engine::{ForwardCtx, Graph, LayerKind, LayerNode, Phase};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    /// 2x2 max pooling after the stem activation.
    pub maxpool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    /// First block of the stage halves the spatial size with a stride-2 conv.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub preset: String,
    /// 2 for image + heatmap; 1 for the image-only ablation.
    pub input_channels: usize,
    /// Side of the square crop the network accepts.
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub num_network_classes: usize,
    /// Dropout rate in front of the final dense layer during training.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl ArchitectureSpec {
    /// Small CPU preset: 3x3 stride-2 stem to 16 channels, stages 16/32/64, 56x56 input.
    pub fn desk() -> Self {
        ArchitectureSpec {
            preset: "desk".into(),
            input_channels: 2,
            input_size: 56,
            stem: StemSpec {
                kernel: 3,
                stride: 2,
                channels: 16,
                maxpool: false,
            },
            stages: vec![
                StageSpec {
                    blocks: 2,
                    channels: 16,
                    downsample: false,
                },
                StageSpec {
                    blocks: 2,
                    channels: 32,
                    downsample: true,
                },
                StageSpec {
                    blocks: 2,
                    channels: 64,
                    downsample: true,
                },
            ],
            num_network_classes: 10,
            dropout: 0.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// The 18-layer residual topology with a 2-channel stem, 224x224 input.
    pub fn paper18() -> Self {
        let stage = |channels, downsample| StageSpec {
            blocks: 2,
            channels,
            downsample,
        };
        ArchitectureSpec {
            preset: "paper18".into(),
            input_channels: 2,
            input_size: 224,
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                channels: 64,
                maxpool: true,
            },
            stages: vec![
                stage(64, false),
                stage(128, true),
                stage(256, true),
                stage(512, true),
            ],
            num_network_classes: 10,
            dropout: 0.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper18" => Ok(Self::paper18()),
            other => Err(Error::config(format!(
                "unknown architecture preset `{other}` (expected desk or paper18)"
            ))),
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_network_classes = n;
        self
    }

    pub fn with_input_channels(mut self, c: usize) -> Self {
        self.input_channels = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.num_network_classes == 0 || self.input_size == 0 {
            return Err(Error::config(
                "input channels, input size and class count must be positive",
            ));
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::config("stem kernel, stride and channels must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("architecture needs at least one stage"));
        }
        if let Some(s) = self
            .stages
            .iter()
            .find(|s| s.channels == 0 || s.blocks == 0)
        {
            return Err(Error::config(format!(
                "stage with {} blocks of width {} is not allowed",
                s.blocks, s.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        let mut side = self.input_size;
        side = (side + 2 * (self.stem.kernel / 2) - self.stem.kernel) / self.stem.stride + 1;
        if self.stem.maxpool {
            side /= 2;
        }
        for s in &self.stages {
            if s.downsample {
                side = (side - 1) / 2 + 1;
            }
        }
        if side == 0 {
            return Err(Error::config("input too small for the stage stack"));
        }
        Ok(())
    }

    fn last_width(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Per-channel mean subtracted from the input (image, then heatmap).
    pub channel_means: Vec<f64>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ArchitectureSpec,
    pub graph: Graph<T>,
    pub meta: TrainingMeta,
}

/// Builds the graph with He-normal conv/dense weights, unit batchnorm scale.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<Model<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f32>::new();

    let conv = |name: String, cin, cout, k, stride| {
        LayerNode::new(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride,
                padding: k / 2,
                bias: false,
            },
        )
    };
    let bn = |name: String, c| {
        LayerNode::new(
            name,
            LayerKind::Batchnorm {
                channels: c,
                eps: spec.bn_eps,
                momentum: spec.bn_momentum,
            },
        )
    };

    let mut v = g.push(
        conv(
            "stem.conv".into(),
            spec.input_channels,
            spec.stem.channels,
            spec.stem.kernel,
            spec.stem.stride,
        ),
        &[0],
    );
    v = g.push(bn("stem.bn".into(), spec.stem.channels), &[v]);
    v = g.push(LayerNode::new("stem.relu", LayerKind::Relu), &[v]);
    if spec.stem.maxpool {
        v = g.push(LayerNode::new("stem.pool", LayerKind::Maxpool2x2), &[v]);
    }

    let mut width = spec.stem.channels;
    for (si, stage) in spec.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let p = format!("s{}.b{}", si + 1, bi + 1);
            let stride = if bi == 0 && stage.downsample { 2 } else { 1 };
            let input = v;
            let mut a = g.push(conv(format!("{p}.conv1"), width, stage.channels, 3, stride), &[input]);
            a = g.push(bn(format!("{p}.bn1"), stage.channels), &[a]);
            a = g.push(LayerNode::new(format!("{p}.relu1"), LayerKind::Relu), &[a]);
            a = g.push(conv(format!("{p}.conv2"), stage.channels, stage.channels, 3, 1), &[a]);
            a = g.push(bn(format!("{p}.bn2"), stage.channels), &[a]);
            let shortcut = if stride != 1 || width != stage.channels {
                let s = g.push(conv(format!("{p}.down.conv"), width, stage.channels, 1, stride), &[input]);
                g.push(bn(format!("{p}.down.bn"), stage.channels), &[s])
            } else {
                input
            };
            v = g.push(LayerNode::new(format!("{p}.add"), LayerKind::ResidualAdd), &[shortcut, a]);
            v = g.push(LayerNode::new(format!("{p}.relu2"), LayerKind::Relu), &[v]);
            width = stage.channels;
        }
    }

    v = g.push(LayerNode::new("head.pool", LayerKind::GlobalAvgPool), &[v]);
    v = g.push(
        LayerNode::new("head.dropout", LayerKind::Dropout { rate: spec.dropout }),
        &[v],
    );
    g.push(
        LayerNode::new(
            "head.fc",
            LayerKind::Dense {
                in_features: spec.last_width(),
                out_features: spec.num_network_classes,
            },
        ),
        &[v],
    );

    for node in &mut g.nodes {
        let fan_in = match node.kind {
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::Dense { in_features, .. } => in_features,
            _ => continue,
        };
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Internal(e.to_string()))?;
        for w in node.params[0].data_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
    }
    g.validate()?;
    Ok(Model {
        spec: spec.clone(),
        graph: g,
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

/// One row of [`param_report`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSize {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub buffers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub param_count: usize,
    pub buffer_count: usize,
    /// `4 * (param_count + buffer_count)`: every trainable parameter and
    /// every batchnorm running statistic stored as a 32-bit float.
    pub estimated_bytes: usize,
    pub layers: Vec<LayerSize>,
}

pub fn param_report<T: Scalar>(graph: &Graph<T>) -> ParamReport {
    let layers: Vec<LayerSize> = graph
        .nodes
        .iter()
        .map(|n| LayerSize {
            name: n.name.clone(),
            kind: n.kind.tag(),
            params: n.param_count(),
            buffers: n.buffers.iter().map(|b| b.len()).sum(),
        })
        .collect();
    let param_count = layers.iter().map(|l| l.params).sum();
    let buffer_count = layers.iter().map(|l| l.buffers).sum();
    ParamReport {
        param_count,
        buffer_count,
        estimated_bytes: 4 * (param_count + buffer_count),
        layers,
    }
}

impl<T: Scalar> Model<T> {
    pub fn num_classes(&self) -> usize {
        self.spec.num_network_classes
    }

    fn check_batch(&self, batch: &DenseArray<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims4()?;
        if c != self.spec.input_channels {
            return Err(Error::config(format!(
                "model expects {} input channels, batch has {c}",
                self.spec.input_channels
            )));
        }
        if h != self.spec.input_size || w != self.spec.input_size {
            return Err(Error::config(format!(
                "model expects {0}x{0} inputs, batch is {h}x{w}",
                self.spec.input_size
            )));
        }
        Ok(())
    }

    /// Pre-softmax scores, shape `(N, num_network_classes)`.
    ///
    /// Batchnorm running statistics are not touched; training goes through
    /// [`Graph::forward_train`].
    pub fn forward(&self, batch: &DenseArray<T>, phase: Phase) -> Result<DenseArray<T>> {
        self.check_batch(batch)?;
        match phase {
            Phase::Eval => Ok(self.graph.forward(batch, &mut ForwardCtx::eval(), None)?.0),
            Phase::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.meta.seed);
                let mut ctx = ForwardCtx::train(&mut rng);
                Ok(self.graph.forward(batch, &mut ctx, None)?.0)
            }
        }
    }

    /// Index of the dropout node in front of the final dense layer.
    pub fn head_dropout_index(&self) -> Result<usize> {
        let n = self.graph.nodes.len();
        match (
            self.graph.nodes.get(n.wrapping_sub(2)).map(|x| &x.kind),
            self.graph.nodes.last().map(|x| &x.kind),
        ) {
            (Some(LayerKind::Dropout { .. }), Some(LayerKind::Dense { .. })) => Ok(n - 2),
            _ => Err(Error::config(
                "model head must end with dropout followed by dense",
            )),
        }
    }

    /// Pooled features feeding the head (eval phase), shape `(N, width)`.
    pub fn features(&self, batch: &DenseArray<T>) -> Result<DenseArray<T>> {
        self.check_batch(batch)?;
        let end = self.head_dropout_index()?;
        Ok(self
            .graph
            .forward_until(batch, &mut ForwardCtx::eval(), None, end)?
            .0)
    }

    pub fn final_dense(&self) -> &crate::engine::LayerNode<T> {
        self.graph.nodes.last().expect("model has nodes")
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            graph: self.graph.cast(),
            meta: self.meta.clone(),
        }
    }

    pub fn report(&self) -> ParamReport {
        param_report(&self.graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ArchitectureSpec::desk(), 7).unwrap();
        let b = build_model(&ArchitectureSpec::desk(), 7).unwrap();
        for (na, nb) in a.graph.nodes.iter().zip(&b.graph.nodes) {
            for (pa, pb) in na.params.iter().zip(&nb.params) {
                let bits_a: Vec<u32> = pa.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = pb.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
        let c = build_model(&ArchitectureSpec::desk(), 8).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn desk_forward_shape() {
        let m = build_model(&ArchitectureSpec::desk(), 1).unwrap();
        let x = DenseArray::<f32>::zeros(&[1, 2, 56, 56]);
        let y = m.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }

    #[test]
    fn paper18_has_two_blocks_per_stage() {
        let spec = ArchitectureSpec::paper18();
        let blocks: Vec<usize> = spec.stages.iter().map(|s| s.blocks).collect();
        assert_eq!(blocks, vec![2, 2, 2, 2]);
        let m = build_model(&spec, 0).unwrap();
        let adds = m
            .graph
            .nodes
            .iter()
            .filter(|n| n.kind == LayerKind::ResidualAdd)
            .count();
        assert_eq!(adds, 8);
    }

    #[test]
    fn spatial_mismatch_is_config_error() {
        let m = build_model(&ArchitectureSpec::desk(), 1).unwrap();
        let x = DenseArray::<f32>::zeros(&[1, 2, 64, 64]);
        assert!(matches!(m.forward(&x, Phase::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_zero_head_gives_zero_scores() {
        let mut m = build_model(&ArchitectureSpec::desk(), 3).unwrap();
        let fc = m.graph.nodes.last_mut().unwrap();
        for p in &mut fc.params {
            p.data_mut().fill(0.0);
        }
        let x = DenseArray::<f32>::zeros(&[1, 2, 56, 56]);
        let y = m.forward(&x, Phase::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let m = build_model(&ArchitectureSpec::desk(), 5).unwrap();
        let one: Vec<f32> = (0..2 * 56 * 56).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let x = DenseArray::from_vec(&[2, 2, 56, 56], two).unwrap();
        let y1 = m.forward(&x, Phase::Eval).unwrap();
        let y2 = m.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1.item(0), y1.item(1));
    }

    #[test]
    fn layer_arithmetic() {
        let mut g = Graph::<f32>::new();
        g.push(
            LayerNode::new(
                "fc",
                LayerKind::Dense {
                    in_features: 10,
                    out_features: 20,
                },
            ),
            &[0],
        );
        let r = param_report(&g);
        assert_eq!((r.param_count, r.estimated_bytes), (220, 880));

        let conv = LayerNode::<f32>::new(
            "c",
            LayerKind::Conv2d {
                in_channels: 16,
                out_channels: 32,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
        );
        assert_eq!(conv.param_count(), 4640);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(ArchitectureSpec::preset("resnet152").is_err());
        let mut bad = ArchitectureSpec::desk();
        bad.stages[1].channels = 0;
        assert!(build_model(&bad, 0).is_err());
    }
}
