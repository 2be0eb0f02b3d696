use rand::seq::SliceRandom;

use super::metrics::{EpochRecord, Evaluation, MetricsLog};
use super::{cosine_lr, LossMode, Sgd, TrainConfig, TrainError};
use crate::ccloss::{cc_loss_graph, intra_inter, pairwise_sq_dist_naive, CcLossParams, LossBreakdown};
use crate::data::{batches, BatchOptions, LabeledDataset};
use crate::nn::{InputShape, ModelConfig, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, Scalar, Tensor, TensorError};

/// Final and best-test-accuracy parameters plus the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub log: MetricsLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Attention statistics use at most this many items, drawn by a fixed
    /// permutation so they are comparable across runs.
    pub stats_sample: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 256, stats_sample: 1024 }
    }
}

pub fn model_config_for(config: &TrainConfig, train: &LabeledDataset) -> ModelConfig {
    ModelConfig {
        backbone: config.backbone,
        input: InputShape { channels: train.channels(), height: train.height(), width: train.width() },
        hidden_dim: config.hidden_dim,
        classes: train.class_count(),
        mlp_widths: config.mlp_widths.clone(),
    }
}

pub fn train(config: &TrainConfig, train_ds: &LabeledDataset, test_ds: &LabeledDataset) -> Result<TrainOutcome, TrainError> {
    train_with(config, train_ds, test_ds, |_| {})
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

fn non_finite(epoch: usize, batch: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op } => TrainError::NonFinite { epoch, batch, term: op.to_string() },
        other => TrainError::Tensor(other),
    }
}

/// Trains from scratch; `on_epoch` sees each record as it is logged.
pub fn train_with<F: FnMut(&EpochRecord)>(
    config: &TrainConfig,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    if (train_ds.height(), train_ds.width(), train_ds.channels()) != (test_ds.height(), test_ds.width(), test_ds.channels()) {
        return Err(TrainError::Config("train and test image shapes differ".into()));
    }
    let mut mcfg = model_config_for(config, train_ds);
    mcfg.classes = mcfg.classes.max(test_ds.class_count());
    let mut model = ModelParams::<f32>::init(&mcfg, &mut stream_rng(config.seed, Stream::Init, 0))?;
    let loss_params = CcLossParams { lambda: config.lambda, epsilon: config.epsilon };
    let mode = config.loss_mode;

    let mut sgd = Sgd::<f32>::new(model.named_params().iter().map(|(_, t)| t.numel()), config.momentum, config.weight_decay);
    let steps_per_epoch = train_ds.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let eval_opts = EvalOptions::default();

    let mut log = MetricsLog { initial: evaluate(&model, test_ds, mode, eval_opts)?, records: Vec::new() };
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let opts = BatchOptions {
            batch_size: config.batch_size,
            seed: config.seed,
            epoch: epoch as u64,
            shuffle: true,
            augment: config.augment(),
            require_pairs: mode == LossMode::Cc,
        };
        let epoch_lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)?;
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let mut hits = 0usize;
        for (bi, batch) in batches::<f32>(train_ds, opts)?.enumerate() {
            let lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)?;
            let wrap = non_finite(epoch, bi);
            let mut g = Graph::<f32>::new();
            let vars = model.bind(&mut g);
            let x = g.constant(batch.inputs);
            let n = batch.labels.len();

            let (objective, logits, breakdown) = if mode.uses_attention() {
                let out = model.forward_cam(&mut g, &vars, x).map_err(|e| match e {
                    crate::nn::NnError::Tensor(t) => wrap(t),
                    other => other.into(),
                })?;
                let lv = cc_loss_graph(&mut g, out.logits, out.attention, &batch.labels, loss_params).map_err(&wrap)?;
                let mut b = lv.read(&g);
                // pairwise terms need two samples; a singleton tail batch trains on CE alone
                let objective = if mode == LossMode::Cc && n >= 2 {
                    lv.total
                } else {
                    b.total = b.ce;
                    lv.ce
                };
                (objective, out.logits, b)
            } else {
                let logits = model.forward_plain(&mut g, &vars, x).map_err(|e| match e {
                    crate::nn::NnError::Tensor(t) => wrap(t),
                    other => other.into(),
                })?;
                let ce = g.softmax_ce(logits, &batch.labels).map_err(&wrap)?;
                let v = g.value(ce).item().f64();
                (ce, logits, LossBreakdown { total: v, ce: v, ..Default::default() })
            };

            for (term, v) in [("ce", breakdown.ce), ("intra", breakdown.intra), ("inter", breakdown.inter), ("total", breakdown.total)] {
                if !v.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch: bi, term: term.into() });
                }
            }

            hits += argmax_hits(g.value(logits), &batch.labels);
            let w = n as f64;
            sums.total += breakdown.total * w;
            sums.ce += breakdown.ce * w;
            sums.intra += breakdown.intra * w;
            sums.inter += breakdown.inter * w;
            sums.ratio += breakdown.ratio * w;
            seen += n;

            g.backward(objective).map_err(&wrap)?;
            let handles = vars.all();
            let grads: Vec<Tensor<f32>> = handles
                .iter()
                .zip(model.named_params())
                .map(|(&v, (_, p))| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            drop(g);
            sgd.step(&mut model.params_mut(), &grads, lr)?;
            if model.params_mut().iter().any(|p| !p.all_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: bi, term: "parameters".into() });
            }
            step += 1;
        }

        let s = seen as f64;
        let train = LossBreakdown {
            total: sums.total / s,
            ce: sums.ce / s,
            intra: sums.intra / s,
            inter: sums.inter / s,
            ratio: sums.ratio / s,
        };
        let test = evaluate(&model, test_ds, mode, eval_opts)?;
        let rec = EpochRecord { epoch, lr: epoch_lr, train, train_acc: hits as f64 / s, test };
        if test.accuracy > best.2 {
            best = (model.clone(), epoch, test.accuracy);
        }
        on_epoch(&rec);
        log.push(rec);
    }

    Ok(TrainOutcome { best: best.0, best_epoch: best.1, last: model, log })
}

/// Top-1 accuracy of the head selected by `mode` (plain head for
/// [`LossMode::CePlain`], gated head otherwise) and attention-distance
/// statistics computed with the direct kernel in `f64`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    ds: &LabeledDataset,
    mode: LossMode,
    opts: EvalOptions,
) -> Result<Evaluation, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty dataset".into()));
    }
    let mut hits = 0usize;
    for batch in batches::<T>(ds, BatchOptions::sequential(opts.batch_size))? {
        let mut g = Graph::<T>::new();
        let vars = params.bind(&mut g);
        let x = g.constant(batch.inputs);
        let logits = if mode.uses_attention() {
            params.forward_cam(&mut g, &vars, x)?.logits
        } else {
            params.forward_plain(&mut g, &vars, x)?
        };
        hits += argmax_hits(g.value(logits), &batch.labels);
    }
    let accuracy = hits as f64 / ds.len() as f64;

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream_rng(0, Stream::EvalSample, 0));
    order.truncate(opts.stats_sample.max(2));
    let sample = ds.select(&order);
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    for batch in batches::<T>(&sample, BatchOptions::sequential(opts.batch_size))? {
        let mut g = Graph::<T>::new();
        let vars = params.bind(&mut g);
        let x = g.constant(batch.inputs);
        let out = params.forward_cam(&mut g, &vars, x)?;
        let att = g.value(out.attention);
        width = att.shape()[1];
        rows.extend(att.data().iter().map(|v| v.f64()));
    }
    let c = Tensor::new(vec![sample.len(), width], rows)?;
    let d = pairwise_sq_dist_naive(&c)?;
    let labels = sample.labels();
    let (intra, inter) = intra_inter(&d, labels)?;
    let (mut same_pairs, mut diff_pairs) = (0usize, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                same_pairs += 1;
            } else {
                diff_pairs += 1;
            }
        }
    }
    let mean_intra = if same_pairs > 0 { intra / same_pairs as f64 } else { 0.0 };
    let mean_inter = if diff_pairs > 0 { inter / diff_pairs as f64 } else { 0.0 };
    let ratio = if mean_inter > 0.0 { mean_intra / mean_inter } else { 0.0 };
    Ok(Evaluation { accuracy, mean_intra, mean_inter, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs_split;
    use crate::train::DatasetId;

    fn blobs_config(mode: LossMode, epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::desk_default(DatasetId::Synth);
        c.loss_mode = mode;
        c.epochs = epochs;
        c.seed = 3;
        c.hidden_dim = 16;
        c
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let (_, te) = synth_blobs_split(10, 1, 100, 10, 0.0, 5).unwrap();
        let cfg = blobs_config(LossMode::Cc, 1);
        let model = ModelParams::<f32>::init(&model_config_for(&cfg, &te), &mut stream_rng(1, Stream::Init, 0)).unwrap();
        let ev = evaluate(&model, &te, LossMode::Cc, EvalOptions::default()).unwrap();
        assert!((ev.accuracy - 0.1).abs() <= 0.05, "{}", ev.accuracy);
    }

    #[test]
    fn memorizes_ten_samples() {
        let (tr, _) = synth_blobs_split(2, 5, 1, 4, 6.0, 2).unwrap();
        let mut cfg = blobs_config(LossMode::Cc, 60);
        cfg.batch_size = 10;
        let out = train_with(&cfg, &tr, &tr, |_| {}).unwrap();
        let ev = evaluate(&out.last, &tr, LossMode::Cc, EvalOptions::default()).unwrap();
        assert_eq!(ev.accuracy, 1.0);
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let (tr, te) = synth_blobs_split(4, 100, 50, 16, 3.0, 1).unwrap();
        let out = train(&blobs_config(LossMode::Cc, 5), &tr, &te).unwrap();
        let totals: Vec<f64> = out.log.records.iter().map(|r| r.train.total).collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    }

    #[test]
    fn singleton_tail_batch_is_ce_only() {
        // 9 samples with batch 4 leaves a batch of 1
        let (tr, te) = synth_blobs_split(3, 3, 2, 4, 6.0, 4).unwrap();
        let mut cfg = blobs_config(LossMode::Cc, 2);
        cfg.batch_size = 4;
        let out = train(&cfg, &tr, &te).unwrap();
        assert_eq!(out.log.records.len(), 2);
    }

    #[test]
    fn plain_mode_trains() {
        let (tr, te) = synth_blobs_split(3, 60, 30, 8, 8.0, 6).unwrap();
        let out = train(&blobs_config(LossMode::CePlain, 4), &tr, &te).unwrap();
        assert!(out.log.last().unwrap().test.accuracy > 0.9);
        assert_eq!(out.log.last().unwrap().train.intra, 0.0);
    }
}
