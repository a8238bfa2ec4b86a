//! Encoding a dataset once, then SGD over random crops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::engine::{sgd_step, ForwardCtx, SgdConfig, SgdState, Tape};
use crate::error::{Error, Result};
use crate::heads::{
    bucket_baseline, configure_output, masked_loss, network_class_for, HeadLayout, MappingTable,
    NetOutput, OutputVariant,
};
use crate::network::{build_model, ArchitectureSpec, Model};
use crate::pipeline::{
    assemble_input, crop, rescaled_channels, CropMode, EncodedInput, PipelineConfig, Recording,
};
use crate::synth::derive_seed;

use super::{Classifier, Net};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Recompute the per-channel input means on the training set.
    pub fit_channel_means: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            sgd: SgdConfig::default(),
            fit_channel_means: true,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub net: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// A recording encoded up to (not including) the crop, with its target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: EncodedInput,
    pub baseline: f64,
    pub label: Option<String>,
    /// Base-layout network class; `None` for unlabeled or special sets.
    pub base_class: Option<usize>,
}

/// Means of the rescaled image and heatmap channels over a set of recordings.
pub fn channel_means(recs: &[Recording], cfg: &PipelineConfig) -> Result<Vec<f64>> {
    if recs.is_empty() {
        return Err(Error::data("cannot fit channel means on an empty set"));
    }
    let mut sums = [0.0f64; 2];
    let mut count = 0usize;
    for r in recs {
        let (img, heat) = rescaled_channels(r, cfg)?;
        sums[0] += img.iter().map(|&v| v as f64).sum::<f64>();
        sums[1] += heat.iter().map(|&v| v as f64).sum::<f64>();
        count += img.len();
    }
    let mut means = vec![sums[0] / count as f64];
    if cfg.use_heatmap {
        means.push(sums[1] / count as f64);
    }
    Ok(means)
}

pub fn with_means(cfg: &PipelineConfig, means: &[f64]) -> PipelineConfig {
    let mut c = cfg.clone();
    c.image_mean = means[0];
    if let Some(&h) = means.get(1) {
        c.heatmap_mean = h;
    }
    c
}

/// Network class of a labeled recording under the base layout.
pub fn base_class_of(
    rec: &Recording,
    layout: &HeadLayout,
    table: &MappingTable,
) -> Result<Option<usize>> {
    let Some(label) = &rec.label else {
        return Ok(None);
    };
    let bucket = bucket_baseline(rec.baseline)?;
    network_class_for(label, rec.mode, bucket, layout, table).map(Some)
}

/// Encodes every recording; with `strict`, every label must map to a class.
pub fn encode_all(
    recs: &[Recording],
    cfg: &PipelineConfig,
    layout: &HeadLayout,
    table: &MappingTable,
    strict: bool,
) -> Result<Vec<Sample>> {
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let base_class = match base_class_of(r, layout, table) {
                Ok(c) => c,
                Err(e) if strict => {
                    return Err(Error::data(format!("record {} ({}): {e}", i + 1, r.split)))
                }
                Err(_) => None,
            };
            Ok(Sample {
                input: assemble_input(r, cfg)?,
                baseline: r.baseline,
                label: r.label.clone(),
                base_class,
            })
        })
        .collect()
}

/// Loss and `dL/dlogits` for a batch; the mean over samples.
pub fn batch_loss_grad(
    net: &NetOutput,
    logits: &DenseArray<f32>,
    targets: &[usize],
    samples: &[&Sample],
) -> Result<(f64, DenseArray<f32>, usize)> {
    let (b, k) = logits.dims2()?;
    let mut grad = DenseArray::zeros(&[b, k]);
    let mut total = 0.0f64;
    let mut correct = 0;
    let scale = 1.0 / b as f32;
    for i in 0..b {
        let row = logits.item(i);
        let mode = samples[i].input.mode;
        let (loss, g) = masked_loss(row, targets[i], mode, &net.layout)?;
        total += loss as f64;
        for (d, v) in grad.item_mut(i).iter_mut().zip(g) {
            *d = v * scale;
        }
        if net.predict(row, mode)? == targets[i] {
            correct += 1;
        }
    }
    Ok((total / b as f64, grad, correct))
}

/// Trains one network on the samples it serves.
pub fn train_net(
    spec: &ArchitectureSpec,
    net: &NetOutput,
    samples: &[(&Sample, usize)],
    crop_size: usize,
    cfg: &TrainConfig,
    seed: u64,
    net_index: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Model<f32>> {
    if samples.is_empty() {
        return Err(Error::data("no training samples for this network"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("epochs and batch size must be positive"));
    }
    let mut model = build_model(spec, derive_seed(seed, "init", net_index as u64))?;
    let mut state = SgdState::new();
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.sgd.lr_at_epoch(epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            "shuffle",
            (net_index as u64) << 32 | epoch as u64,
        )));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let crop_seed = derive_seed(seed, "crop", (epoch as u64) << 32 | i as u64);
                crops.push(crop(&samples[i].0.input, crop_size, CropMode::Random(crop_seed))?.0);
            }
            let refs: Vec<&DenseArray<f32>> = crops.iter().collect();
            let x = DenseArray::stack(&refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout", step));
            let logits = model
                .graph
                .forward_train(&x, &mut ForwardCtx::train(&mut rng), &mut tape)?;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i].0).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| samples[i].1).collect();
            let (loss, grad, ok) = batch_loss_grad(net, &logits, &targets, &batch)?;
            let grads = model.graph.backward(&tape, grad, x.shape(), false)?;
            let grad_refs: Vec<&DenseArray<f32>> = grads.params.iter().flatten().collect();
            let mut params: Vec<&mut DenseArray<f32>> = model
                .graph
                .nodes
                .iter_mut()
                .flat_map(|n| n.params.iter_mut())
                .collect();
            sgd_step(
                &mut params,
                &grad_refs,
                lr,
                cfg.sgd.momentum,
                cfg.sgd.weight_decay,
                &mut state,
            )?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            seen += chunk.len();
            step += 1;
        }
        log(&EpochLog {
            net: net_index,
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    model.meta.epochs = cfg.epochs;
    Ok(model)
}

/// Everything needed to train one output variant.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub variant: OutputVariant,
    pub arch: &'a ArchitectureSpec,
    pub pipeline: &'a PipelineConfig,
    pub layout: &'a HeadLayout,
    pub table: &'a MappingTable,
    pub train: &'a TrainConfig,
    pub seed: u64,
    pub config_hash: String,
}

/// Trains every network of a variant and assembles the classifier.
pub fn train_classifier(
    spec: &TrainSpec<'_>,
    recs: &[Recording],
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Classifier> {
    let means = if spec.train.fit_channel_means {
        channel_means(recs, spec.pipeline)?
    } else {
        let mut m = vec![spec.pipeline.image_mean];
        if spec.pipeline.use_heatmap {
            m.push(spec.pipeline.heatmap_mean);
        }
        m
    };
    let pipeline = with_means(spec.pipeline, &means);
    let samples = encode_all(recs, &pipeline, spec.layout, spec.table, true)?;
    let output = configure_output(spec.variant, spec.layout)?;
    let mut nets = Vec::new();
    for (ni, net) in output.nets.iter().enumerate() {
        let mine: Vec<(&Sample, usize)> = samples
            .iter()
            .filter(|s| net.modes.contains(&s.input.mode))
            .map(|s| {
                let base = s.base_class.expect("strict encoding labels every sample");
                let name = spec.layout.class_name(base).expect("class in layout");
                Ok((s, net.translate(name, spec.layout)?))
            })
            .collect::<Result<_>>()?;
        let arch = spec
            .arch
            .clone()
            .with_classes(net.num_classes())
            .with_input_channels(pipeline.channels());
        let mut model = train_net(
            &arch,
            net,
            &mine,
            pipeline.crop,
            spec.train,
            spec.seed,
            ni,
            log,
        )?;
        model.meta.seed = spec.seed;
        model.meta.channel_means = means.clone();
        model.meta.config_hash = spec.config_hash.clone();
        nets.push(Net {
            model,
            quantiles: None,
        });
    }
    Classifier::new(
        spec.variant,
        pipeline,
        spec.layout.clone(),
        spec.table.clone(),
        nets,
    )
}
