//! SGD training loop, top-1 evaluation, model serialization, and the
//! ablation runner.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::augment::{self, DonorSampler};
use crate::backbone::{self, ModelParams, ParamNodes};
use crate::config::{Mode, RunConfig};
use crate::data::{channel_stats, codec, Dataset};
use crate::error::{Error, Result};
use crate::graph::{GradientMap, Graph};
use crate::losses::{self, LossBreakdown};
use crate::rng::{seed_rng, Prng, TAG_INIT, TAG_SAMPLE, TAG_SHUFFLE};
use crate::tensor::Tensor;

/// Trained parameters together with everything inference needs to reproduce
/// the training-time preprocessing.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub image_side: usize,
}

impl TrainedModel {
    /// Applies the stored resize and normalization to a raw image.
    pub fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        let resized = augment::resize_bilinear(image, self.image_side)?;
        augment::normalize(&resized, &self.norm_mean, &self.norm_std)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<f64> {
        let k = self.params.category_count();
        if dataset.category_count() != k {
            return Err(Error::CategoryMismatch { train: k, test: dataset.category_count() });
        }
        let mut images = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        for (image, label) in dataset.samples() {
            images.push(self.preprocess(image)?);
            labels.push(*label);
        }
        evaluate_top1(&self.params, &images, &labels)
    }
}

/// Per-epoch metrics: mean per-triplet losses plus accuracies.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub train_top1: f64,
    pub test_top1: f64,
    pub lr: f64,
}

/// Step decay: the rate is divided by 10 every `lr_decay_every` epochs.
/// Dividing by an exact power of ten keeps the decimal values exact.
pub fn lr_at_epoch(config: &RunConfig, epoch: usize) -> f64 {
    let k = (epoch / config.lr_decay_every).min(400) as i32;
    config.lr0 / 10f64.powi(k)
}

fn sgd_step(param: &mut Tensor, velocity: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64) {
    let v = velocity.data_mut();
    let g = grad.data();
    let p = param.data_mut();
    for i in 0..p.len() {
        v[i] = momentum * v[i] - lr * g[i];
        p[i] += v[i];
    }
}

/// Donor source over the preprocessed training cache: uniform over all
/// samples of other categories, with its own flip draw.
struct CachedDonors<'a> {
    images: &'a [Tensor],
    labels: &'a [usize],
    pools: &'a [Vec<usize>],
    flip_prob: f64,
}

impl DonorSampler for CachedDonors<'_> {
    fn sample_donor(&self, label: usize, rng: &mut Prng) -> Result<(Tensor, usize)> {
        let pool = self
            .pools
            .get(label)
            .filter(|p| !p.is_empty())
            .ok_or(Error::NoDonorAvailable { label })?;
        let pick = pool[rng.random_range(0..pool.len())];
        let flip = rng.random::<f64>() < self.flip_prob;
        let image =
            if flip { augment::hflip(&self.images[pick]) } else { self.images[pick].clone() };
        Ok((image, self.labels[pick]))
    }
}

fn preprocess_set(
    set: &Dataset,
    side: usize,
    mean: &[f64],
    std: &[f64],
) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut images = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    for (image, label) in set.samples() {
        let resized = augment::resize_bilinear(image, side)?;
        images.push(augment::normalize(&resized, mean, std)?);
        labels.push(*label);
    }
    Ok((images, labels))
}

/// One optimizer step over a batch: builds a single graph holding every
/// triplet, averages the totals, and runs one backward sweep.
fn batch_step(
    config: &RunConfig,
    params: &ModelParams,
    batch: &[usize],
    epoch: usize,
    images: &[Tensor],
    labels: &[usize],
    pools: &[Vec<usize>],
) -> Result<(GradientMap, ParamNodes, Vec<LossBreakdown>)> {
    let mut g = Graph::new();
    let nodes = backbone::insert_params(&mut g, params)?;
    let donors = CachedDonors { images, labels, pools, flip_prob: config.flip_prob };
    let mut losses_by_sample = Vec::with_capacity(batch.len());
    for &idx in batch {
        let mut rng = seed_rng(&[config.seed, TAG_SAMPLE, epoch as u64, idx as u64]);
        let flip = rng.random::<f64>() < config.flip_prob;
        let original =
            if flip { augment::hflip(&images[idx]) } else { images[idx].clone() };
        let label = labels[idx];
        let loss = match config.mode {
            Mode::Baseline => {
                let img = g.constant(original);
                let fwd = backbone::forward_on_graph(&mut g, &nodes, img)?;
                losses::baseline_loss(&mut g, fwd.logits, label)?
            }
            mode => {
                let triplet =
                    augment::augment_triplet(&original, label, &donors, config, &mut rng)?;
                let node_f = g.constant(triplet.original);
                let node_r = g.constant(triplet.replaced);
                let node_m = g.constant(triplet.masked);
                let fwd_f = backbone::forward_on_graph(&mut g, &nodes, node_f)?;
                let fwd_r = backbone::forward_on_graph(&mut g, &nodes, node_r)?;
                let fwd_m = backbone::forward_on_graph(&mut g, &nodes, node_m)?;
                losses::total_loss(
                    &mut g,
                    [fwd_f.logits, fwd_r.logits, fwd_m.logits],
                    [fwd_f.features, fwd_r.features, fwd_m.features],
                    label,
                    config.eps,
                    mode == Mode::Cecs,
                    config.cos_weight,
                    config.extra_pair,
                )?
            }
        };
        losses_by_sample.push(loss);
    }
    let mut sum = losses_by_sample[0].total;
    for loss in &losses_by_sample[1..] {
        sum = g.add(sum, loss.total)?;
    }
    let mean = g.scale(sum, 1.0 / batch.len() as f64)?;
    let grads = g.backward(mean)?;
    let breakdowns = losses_by_sample
        .iter()
        .map(|t| LossBreakdown::from_graph(&g, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, nodes, breakdowns))
}

fn as_divergence(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFiniteValue { .. } | Error::NonFiniteGradient { .. } => {
            Error::Divergence { epoch, step, detail: e.to_string() }
        }
        other => other,
    }
}

/// Trains from scratch. Preprocessing statistics come from the training
/// split; the test split reuses them. Identical inputs produce bit-identical
/// models and metrics.
pub fn train(
    config: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(TrainedModel, Vec<MetricsRecord>)> {
    config.validate()?;
    if train_set.category_count() != test_set.category_count() {
        return Err(Error::CategoryMismatch {
            train: train_set.category_count(),
            test: test_set.category_count(),
        });
    }
    let k = train_set.category_count();
    let channels = train_set.image_shape()[2];
    if test_set.image_shape()[2] != channels {
        return Err(Error::ChannelMismatch { expected: channels, got: test_set.image_shape()[2] });
    }

    let resized: Vec<(Tensor, usize)> = train_set
        .samples()
        .iter()
        .map(|(img, l)| Ok((augment::resize_bilinear(img, config.image_side)?, *l)))
        .collect::<Result<_>>()?;
    let (norm_mean, norm_std) = channel_stats(&resized)?;
    let mut train_images = Vec::with_capacity(resized.len());
    let mut train_labels = Vec::with_capacity(resized.len());
    for (t, l) in &resized {
        train_images.push(augment::normalize(t, &norm_mean, &norm_std)?);
        train_labels.push(*l);
    }
    let (test_images, test_labels) =
        preprocess_set(test_set, config.image_side, &norm_mean, &norm_std)?;

    let mut init_rng = seed_rng(&[config.seed, TAG_INIT]);
    let mut params = backbone::init_params(channels, k, &mut init_rng)?;
    let mut velocity: Vec<Tensor> =
        params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();

    let pools: Vec<Vec<usize>> = (0..k)
        .map(|l| {
            train_labels
                .iter()
                .enumerate()
                .filter(|(_, &ll)| ll != l)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        order.shuffle(&mut seed_rng(&[config.seed, TAG_SHUFFLE, epoch as u64]));
        let mut epoch_losses = LossBreakdown::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (grads, nodes, breakdowns) =
                batch_step(config, &params, batch, epoch, &train_images, &train_labels, &pools)
                    .map_err(|e| as_divergence(e, epoch, step))?;
            for b in &breakdowns {
                epoch_losses.add(b);
            }
            for (i, param) in params.tensors_mut().into_iter().enumerate() {
                sgd_step(param, &mut velocity[i], grads.get(nodes.ids[i]), lr, config.momentum);
            }
        }
        epoch_losses.scale(1.0 / train_images.len() as f64);
        let train_top1 = evaluate_top1(&params, &train_images, &train_labels)?;
        let test_top1 = evaluate_top1(&params, &test_images, &test_labels)?;
        records.push(MetricsRecord { epoch, losses: epoch_losses, train_top1, test_top1, lr });
    }

    let model = TrainedModel { params, norm_mean, norm_std, image_side: config.image_side };
    Ok((model, records))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose top logit matches the label. Ties resolve to the
/// smallest class index.
pub fn evaluate_top1(params: &ModelParams, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (image, &label) in images.iter().zip(labels) {
        let out = backbone::extract_features(params, image)?;
        if argmax(out.logits.data()) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Serializes a model as 11 consecutive RAWT records: the 8 parameter
/// tensors in canonical order, then norm_mean, norm_std, and [image_side].
pub fn save_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in model.params.tensors() {
        codec::encode_rawt_into(t, &mut out)?;
    }
    let channels = model.norm_mean.len();
    codec::encode_rawt_into(
        &Tensor::from_vec(vec![channels], model.norm_mean.clone())?,
        &mut out,
    )?;
    codec::encode_rawt_into(
        &Tensor::from_vec(vec![model.norm_std.len()], model.norm_std.clone())?,
        &mut out,
    )?;
    codec::encode_rawt_into(&Tensor::from_vec(vec![1], vec![model.image_side as f64])?, &mut out)?;
    Ok(out)
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InvalidTensor(format!(
            "{} has shape {:?}, expected {:?}",
            what,
            t.shape(),
            shape
        )));
    }
    Ok(())
}

pub fn load_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut off = 0;
    let mut records = Vec::with_capacity(11);
    for _ in 0..11 {
        records.push(codec::decode_rawt_at(bytes, &mut off, "params")?);
    }
    if off != bytes.len() {
        return Err(Error::Undecodable {
            path: "params".to_string(),
            reason: format!("{} trailing bytes after 11 records", bytes.len() - off),
        });
    }
    let mut it = records.into_iter();
    let mut next = || it.next().expect("11 records read");
    let (c1k, c1b) = (next(), next());
    let (c2k, c2b) = (next(), next());
    let (c3k, c3b) = (next(), next());
    let (fc_w, fc_b) = (next(), next());
    let (mean, std, meta) = (next(), next(), next());

    if c1k.rank() != 4 || c1k.shape()[0] != 3 || c1k.shape()[1] != 3 {
        return Err(Error::InvalidTensor(format!(
            "conv1 kernel has shape {:?}, expected [3,3,cin,8]",
            c1k.shape()
        )));
    }
    let cin = c1k.shape()[2];
    if fc_w.rank() != 2 || fc_w.shape()[0] != backbone::FEATURE_WIDTH {
        return Err(Error::InvalidTensor(format!(
            "classifier weight has shape {:?}, expected [{},k]",
            fc_w.shape(),
            backbone::FEATURE_WIDTH
        )));
    }
    let k = fc_w.shape()[1];
    expect_shape(&c1k, &[3, 3, cin, 8], "conv1 kernel")?;
    expect_shape(&c1b, &[8], "conv1 bias")?;
    expect_shape(&c2k, &[3, 3, 8, 16], "conv2 kernel")?;
    expect_shape(&c2b, &[16], "conv2 bias")?;
    expect_shape(&c3k, &[3, 3, 16, 32], "conv3 kernel")?;
    expect_shape(&c3b, &[32], "conv3 bias")?;
    expect_shape(&fc_b, &[k], "classifier bias")?;
    expect_shape(&mean, &[cin], "norm_mean")?;
    expect_shape(&std, &[cin], "norm_std")?;
    expect_shape(&meta, &[1], "meta")?;
    let side = meta.data()[0];
    if side.fract() != 0.0 || side < 4.0 {
        return Err(Error::InvalidTensor(format!("image_side {} is not a valid side", side)));
    }

    let params = ModelParams {
        conv1: backbone::ConvLayer { kernel: c1k, bias: c1b },
        conv2: backbone::ConvLayer { kernel: c2k, bias: c2b },
        conv3: backbone::ConvLayer { kernel: c3k, bias: c3b },
        fc_w,
        fc_b,
    };
    Ok(TrainedModel {
        params,
        norm_mean: mean.data().to_vec(),
        norm_std: std.data().to_vec(),
        image_side: side as usize,
    })
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out =
        String::from("epoch,l_f,l_replace,l_mask,l_cls,l_cos,total,train_top1,test_top1,lr\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.losses.l_f,
            r.losses.l_replace,
            r.losses.l_mask,
            r.losses.l_cls,
            r.losses.l_cos,
            r.losses.total,
            r.train_top1,
            r.test_top1,
            r.lr
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<(u64, f64)>,
    pub median: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs the module study (baseline, ce, cecs at the configured q) and the
/// patch study (cecs at q = 1, 2, 3) across the given seeds, reporting final
/// test top-1 per run. Distinct (mode, q) pairs each train once per seed;
/// runs execute in parallel.
pub fn run_ablation(
    config: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::ConfigInvariant("ablation needs at least one seed".to_string()));
    }
    let variants: [(&str, Mode, usize); 6] = [
        ("baseline", Mode::Baseline, config.q),
        ("ce", Mode::Ce, config.q),
        ("cecs", Mode::Cecs, config.q),
        ("q1", Mode::Cecs, 1),
        ("q2", Mode::Cecs, 2),
        ("q3", Mode::Cecs, 3),
    ];
    let mut jobs: Vec<(Mode, usize, u64)> = Vec::new();
    for &(_, mode, q) in &variants {
        for &seed in seeds {
            let job = (mode, q, seed);
            if !jobs.contains(&job) {
                jobs.push(job);
            }
        }
    }
    let results: Vec<((Mode, usize, u64), f64)> = jobs
        .par_iter()
        .map(|&(mode, q, seed)| {
            let run_config = RunConfig { mode, q, seed, ..config.clone() };
            let (_, records) = train(&run_config, train_set, test_set)?;
            let last = records.last().expect("validate enforces epochs >= 1");
            Ok(((mode, q, seed), last.test_top1))
        })
        .collect::<Result<Vec<_>>>()?;
    let lookup = |mode: Mode, q: usize, seed: u64| -> f64 {
        results
            .iter()
            .find(|(key, _)| *key == (mode, q, seed))
            .expect("every job ran")
            .1
    };
    let rows = variants
        .iter()
        .map(|&(name, mode, q)| {
            let per_seed: Vec<(u64, f64)> =
                seeds.iter().map(|&s| (s, lookup(mode, q, s))).collect();
            let mut values: Vec<f64> = per_seed.iter().map(|&(_, v)| v).collect();
            let median = median(&mut values);
            AblationRow { name: name.to_string(), per_seed, median }
        })
        .collect();
    Ok(AblationTable { rows })
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut out = String::from("mode_or_q,seed,test_top1\n");
    for row in &table.rows {
        for (seed, value) in &row.per_seed {
            out.push_str(&format!("{},{},{}\n", row.name, seed, value));
        }
        out.push_str(&format!("{},median,{}\n", row.name, row.median));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_half, SynthSpec};

    fn tiny_spec() -> SynthSpec {
        SynthSpec { k: 2, m: 4, side: 16, ..SynthSpec::default() }
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            n: 4,
            q: 2,
            epochs: 2,
            batch_size: 2,
            lr0: 0.01,
            image_side: 16,
            ..RunConfig::default()
        }
    }

    fn tiny_sets() -> (Dataset, Dataset) {
        let set = generate_synthetic(&tiny_spec()).unwrap();
        split_half(&set, 0).unwrap()
    }

    #[test]
    fn lr_schedule_hits_exact_decades() {
        let config = RunConfig { lr0: 0.0008, lr_decay_every: 60, ..RunConfig::default() };
        assert_eq!(lr_at_epoch(&config, 0), 0.0008);
        assert_eq!(lr_at_epoch(&config, 59), 0.0008);
        assert_eq!(lr_at_epoch(&config, 60), 0.00008);
        assert_eq!(lr_at_epoch(&config, 119), 0.00008);
        assert_eq!(lr_at_epoch(&config, 120), 8e-6);
    }

    #[test]
    fn sgd_step_matches_hand_numbers() {
        let mut p = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let mut v = Tensor::zeros(&[2]);
        let g = Tensor::from_vec(vec![2], vec![2.0, -4.0]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.125, 0.5);
        assert_eq!(v.data(), &[-0.25, 0.5]);
        assert_eq!(p.data(), &[0.75, -1.5]);
        sgd_step(&mut p, &mut v, &g, 0.125, 0.5);
        assert_eq!(v.data(), &[-0.375, 0.75]);
        assert_eq!(p.data(), &[0.375, -0.75]);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let mut p = Tensor::from_vec(vec![2], vec![0.25, -1.5]).unwrap();
        let before = p.data().to_vec();
        let mut v = Tensor::zeros(&[2]);
        let g = Tensor::from_vec(vec![2], vec![3.0, -7.0]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.0, 0.9);
        assert_eq!(p.data(), before.as_slice());
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test_set) = tiny_sets();
        let config = tiny_config();
        let (model_a, records_a) = train(&config, &train_set, &test_set).unwrap();
        let (model_b, records_b) = train(&config, &train_set, &test_set).unwrap();
        for (a, b) in model_a.params.tensors().iter().zip(model_b.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(metrics_csv(&records_a), metrics_csv(&records_b));
        assert_eq!(save_model(&model_a).unwrap(), save_model(&model_b).unwrap());
    }

    #[test]
    fn one_step_matches_manual_graph_update() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig {
            mode: Mode::Cecs,
            epochs: 1,
            batch_size: usize::MAX,
            momentum: 0.0,
            flip_prob: 0.0,
            ..tiny_config()
        };
        let config = RunConfig { batch_size: train_set.len(), ..config };
        let (model, _) = train(&config, &train_set, &test_set).unwrap();

        let resized: Vec<(Tensor, usize)> = train_set
            .samples()
            .iter()
            .map(|(img, l)| (augment::resize_bilinear(img, config.image_side).unwrap(), *l))
            .collect();
        let (mean, std) = channel_stats(&resized).unwrap();
        let images: Vec<Tensor> =
            resized.iter().map(|(t, _)| augment::normalize(t, &mean, &std).unwrap()).collect();
        let labels: Vec<usize> = resized.iter().map(|(_, l)| *l).collect();
        let mut params =
            backbone::init_params(3, 2, &mut seed_rng(&[config.seed, TAG_INIT])).unwrap();
        let pools: Vec<Vec<usize>> = (0..2)
            .map(|l| (0..labels.len()).filter(|&i| labels[i] != l).collect())
            .collect();
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut seed_rng(&[config.seed, TAG_SHUFFLE, 0]));
        let (grads, nodes, _) =
            batch_step(&config, &params, &order, 0, &images, &labels, &pools).unwrap();
        let lr = lr_at_epoch(&config, 0);
        for (i, param) in params.tensors_mut().into_iter().enumerate() {
            let mut v = Tensor::zeros(param.shape());
            sgd_step(param, &mut v, grads.get(nodes.ids[i]), lr, 0.0);
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_cos_weight_reproduces_ce_bitwise() {
        let (train_set, test_set) = tiny_sets();
        let ce = RunConfig { mode: Mode::Ce, ..tiny_config() };
        let cecs0 = RunConfig { mode: Mode::Cecs, cos_weight: 0.0, ..tiny_config() };
        let (model_ce, rec_ce) = train(&ce, &train_set, &test_set).unwrap();
        let (model_cecs, rec_cecs) = train(&cecs0, &train_set, &test_set).unwrap();
        for (a, b) in model_ce.params.tensors().iter().zip(model_cecs.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in rec_ce.iter().zip(&rec_cecs) {
            assert_eq!(a.losses.l_cls, b.losses.l_cls);
            assert_eq!(a.train_top1, b.train_top1);
        }
    }

    #[test]
    fn baseline_metrics_zero_the_augmented_terms() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig { mode: Mode::Baseline, epochs: 1, ..tiny_config() };
        let (_, records) = train(&config, &train_set, &test_set).unwrap();
        let r = records[0].losses;
        assert_eq!(r.l_replace, 0.0);
        assert_eq!(r.l_mask, 0.0);
        assert_eq!(r.l_cos, 0.0);
        assert_eq!(r.l_f, r.l_cls);
        assert_eq!(r.l_f, r.total);
        assert!(r.l_f > 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig { lr0: 1e12, epochs: 10, ..tiny_config() };
        match train(&config, &train_set, &test_set) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn category_mismatch_is_rejected() {
        let (train_set, _) = tiny_sets();
        let other = generate_synthetic(&SynthSpec { k: 3, m: 2, side: 16, ..tiny_spec() })
            .unwrap();
        assert!(matches!(
            train(&tiny_config(), &train_set, &other),
            Err(Error::CategoryMismatch { train: 2, test: 3 })
        ));
    }

    #[test]
    fn model_roundtrip_preserves_narrowed_values() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig { epochs: 1, ..tiny_config() };
        let (model, _) = train(&config, &train_set, &test_set).unwrap();
        let bytes = save_model(&model).unwrap();
        let loaded = load_model(&bytes).unwrap();
        assert_eq!(loaded.image_side, model.image_side);
        for (a, b) in loaded.params.tensors().iter().zip(model.params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(save_model(&loaded).unwrap(), bytes);

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 5);
        assert!(load_model(&truncated).is_err());
    }

    #[test]
    fn evaluate_top1_breaks_ties_toward_smaller_index() {
        let mut rng = seed_rng(&[0, TAG_INIT]);
        let mut params = backbone::init_params(3, 2, &mut rng).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let images = vec![Tensor::full(&[8, 8, 3], 0.5).unwrap(); 3];
        let labels = vec![0usize, 1, 0];
        let top1 = evaluate_top1(&params, &images, &labels).unwrap();
        assert_eq!(top1, 2.0 / 3.0);
        assert!(matches!(evaluate_top1(&params, &[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn metrics_csv_has_exact_header_and_rows() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig { epochs: 2, ..tiny_config() };
        let (_, records) = train(&config, &train_set, &test_set).unwrap();
        let csv = metrics_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "epoch,l_f,l_replace,l_mask,l_cls,l_cos,total,train_top1,test_top1,lr"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("1,"));
    }

    #[test]
    fn ablation_covers_all_variants_and_reuses_matching_q() {
        let (train_set, test_set) = tiny_sets();
        let config = RunConfig { epochs: 1, ..tiny_config() };
        let table = run_ablation(&config, &train_set, &test_set, &[0, 1]).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["baseline", "ce", "cecs", "q1", "q2", "q3"]);
        for row in &table.rows {
            assert_eq!(row.per_seed.len(), 2);
        }
        let cecs = table.row("cecs").unwrap();
        let q2 = table.row("q2").unwrap();
        assert_eq!(cecs.per_seed, q2.per_seed);
        assert_eq!(cecs.median, q2.median);

        let csv = ablation_csv(&table);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "mode_or_q,seed,test_top1");
        assert_eq!(lines.len(), 1 + 6 * 3);
        assert!(lines[3].starts_with("baseline,median,"));
    }

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut [5.0]), 5.0);
    }
}
