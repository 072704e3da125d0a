//! Adam, grouped stratified k-fold splits, the per-fold training loop and
//! cross-validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::evaluation::{stratified_report, ImageVote, Report};
use crate::network::{predict_scores, stack_refs, DCaps, DCapsConfig};
use crate::numerics::{ParamStore, Real, Tape, Tensor};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Default settings: lr 1e-3, betas 0.9 / 0.999, eps 1e-8.
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState::with_lr(params, 1e-3)
    }

    pub fn with_lr(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {} is not finite", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::lit(1.0 - b1.powi(t));
    let c2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Which identifier keeps records together across folds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    #[default]
    Polyp,
    Patient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fold_count: usize,
    pub learning_rate: f64,
    /// Train without the reconstruction decoder.
    pub no_recon: bool,
    /// Routing iterations for every multi-type capsule layer.
    pub routing: Option<usize>,
    pub group_by: GroupBy,
    /// Random flips and half-turns of training images.
    pub augment: bool,
    /// When at least 2, hold out one of this many stratified group folds
    /// of each training set for validation.
    pub validation_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 20,
            seed: 0,
            fold_count: 10,
            learning_rate: 1e-3,
            no_recon: false,
            routing: None,
            group_by: GroupBy::Polyp,
            augment: false,
            validation_folds: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.fold_count < 2 {
            return Err(Error::config(format!("fold count must be >= 2, got {}", self.fold_count)));
        }
        if self.validation_folds == 1 {
            return Err(Error::config("validation folds must be 0 or >= 2"));
        }
        if self.routing == Some(0) {
            return Err(Error::config("routing iterations must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Apply the routing and reconstruction overrides to a network config.
    pub fn apply(&self, config: &DCapsConfig) -> DCapsConfig {
        let mut c = config.clone();
        if let Some(r) = self.routing {
            c.set_routing(r);
        }
        if self.no_recon {
            c.recon_enabled = false;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split record indices into `k` folds so that every group lands in one
/// fold and each fold's per-class group count is within one of `n_c / k`.
/// A group's class is the majority label of its records (ties go to the
/// larger label). Groups of each class are shuffled with `seed` and dealt
/// round-robin, the dealing position carrying over from class to class.
pub fn stratified_kfold(labels: &[usize], k: usize, group_ids: &[String], seed: u64) -> Result<Vec<Fold>> {
    if labels.len() != group_ids.len() {
        return Err(Error::shape(format!(
            "{} labels but {} group ids",
            labels.len(),
            group_ids.len()
        )));
    }
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in group_ids.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (&g, members) in &groups {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in members {
            *votes.entry(labels[i]).or_default() += 1;
        }
        let class = votes
            .iter()
            .max_by_key(|&(&c, &n)| (n, c))
            .map(|(&c, _)| c)
            .expect("groups are nonempty");
        by_class.entry(class).or_default().push(g);
    }
    if k > groups.len() {
        let counts: Vec<String> = by_class
            .iter()
            .map(|(c, g)| format!("class {c}: {} groups", g.len()))
            .collect();
        return Err(Error::config(format!(
            "{k} folds requested but only {} groups ({})",
            groups.len(),
            counts.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &g in members.iter() {
            fold_of.insert(g, next % k);
            next += 1;
        }
    }
    let mut folds = vec![
        Fold {
            train: Vec::new(),
            test: Vec::new(),
        };
        k
    ];
    for (i, g) in group_ids.iter().enumerate() {
        let f = fold_of[g.as_str()];
        for (j, fold) in folds.iter_mut().enumerate() {
            if j == f {
                fold.test.push(i);
            } else {
                fold.train.push(i);
            }
        }
    }
    Ok(folds)
}

/// One epoch's summary line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub recon_loss: Option<f64>,
}

/// Images with their class labels, indexable by record.
#[derive(Clone, Copy)]
pub struct Samples<'a> {
    pub images: &'a [Tensor<f32>],
    pub labels: &'a [usize],
}

#[derive(Debug)]
pub struct FoldTraining {
    pub log: Vec<EpochLog>,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
    pub best_validation: Option<(usize, f64)>,
}

/// Flip or half-turn an `[H, W, C]` image. `mode` 0 is the identity,
/// 1 mirrors left-right, 2 mirrors top-bottom, 3 rotates by 180 degrees.
pub fn augment(img: &Tensor<f32>, mode: u8) -> Tensor<f32> {
    let &[h, w, c] = img.shape() else {
        return img.clone();
    };
    if mode == 0 {
        return img.clone();
    }
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match mode {
                1 => (y, w - 1 - x),
                2 => (h - 1 - y, x),
                _ => (h - 1 - y, w - 1 - x),
            };
            out.extend_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same extents")
}

/// Train `net` in place on `train`. Batches are reshuffled every epoch
/// and the last partial batch is kept. With a checkpoint directory, the
/// final epoch (epoch 0 when `epochs` is 0) and every new best validation
/// accuracy are saved as `fold{f}_epoch{e}.ckpt`.
pub fn train_fold(
    net: &mut DCaps<f32>,
    data: Samples<'_>,
    train: &[usize],
    validation: &[usize],
    cfg: &TrainConfig,
    fold: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<FoldTraining> {
    if train.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no training records")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1)));
    let mut adam = AdamState::with_lr(net.params(), cfg.learning_rate);
    let mut out = FoldTraining {
        log: Vec::new(),
        checkpoints: Vec::new(),
        best_validation: None,
    };
    let save = |net: &DCaps<f32>, epoch: usize, out: &mut FoldTraining| -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("fold{fold}_epoch{epoch}.ckpt"));
            checkpoint::save(net, &path)?;
            out.checkpoints.push(path);
        }
        Ok(())
    };
    if cfg.epochs == 0 {
        save(net, 0, &mut out)?;
        return Ok(out);
    }
    let with_recon = net.config().recon_enabled;
    let mut order = train.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut recon_sum, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor<f32>> = batch
                .iter()
                .map(|&i| {
                    let mode = if cfg.augment { rng.gen_range(0..4u8) } else { 0 };
                    augment(&data.images[i], mode)
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let tape = Tape::new();
            let bound = net.params().bind(&tape);
            let x = tape.constant(Tensor::stack(&imgs)?);
            let nonfinite = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} (fold {fold}, epoch {epoch}, batch indices {batch:?})"
                )),
                e => e,
            };
            let outputs = net.forward_vars(&bound, x, with_recon)?;
            let terms = net.loss_vars(&outputs, &labels, x).map_err(nonfinite)?;
            let grads = tape.backward(terms.total).map_err(nonfinite)?;
            net.params_mut().zero_grads();
            net.params_mut().accumulate(&grads, &bound)?;
            adam_step(net.params_mut(), &mut adam).map_err(nonfinite)?;

            let n = batch.len() as f64;
            loss_sum += terms.total.value().item() as f64 * n;
            if let Some(r) = terms.recon {
                recon_sum += r.value().item() as f64 * n;
            }
            let scores = outputs.scores.value();
            let heads = net.config().heads();
            for (s, &y) in scores.data().chunks(heads).zip(&labels) {
                let s: Vec<f64> = s.iter().map(|v| f64::from(*v)).collect();
                correct += usize::from(predict_scores(&s).class == y);
            }
        }
        let n = train.len() as f64;
        let entry = EpochLog {
            fold,
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            recon_loss: with_recon.then(|| recon_sum / n),
        };
        info!("{}", serde_json::to_string(&entry)?);
        out.log.push(entry);

        if !validation.is_empty() {
            let acc = accuracy(net, data, validation)?;
            info!("fold {fold} epoch {epoch}: validation accuracy {acc:.4}");
            if out.best_validation.is_none_or(|(_, best)| acc > best) {
                out.best_validation = Some((epoch, acc));
                if epoch < cfg.epochs {
                    save(net, epoch, &mut out)?;
                }
            }
        }
    }
    save(net, cfg.epochs, &mut out)?;
    Ok(out)
}

const EVAL_BATCH: usize = 16;

fn accuracy(net: &DCaps<f32>, data: Samples<'_>, idx: &[usize]) -> Result<f64> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &data.images[i]).collect();
    let scores = net.scores(&imgs, EVAL_BATCH)?;
    let correct = scores
        .iter()
        .zip(idx)
        .filter(|(s, &i)| predict_scores(s).class == data.labels[i])
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Score records and turn them into binary votes. With several output
/// capsules the positive score is `s_1 / (s_0 + s_1)` and the confidence
/// is the normalised margin.
pub fn vote(net: &DCaps<f32>, records: &[&SampleRecord], images: &[&Tensor<f32>]) -> Result<Vec<ImageVote>> {
    let scores = net.scores(images, EVAL_BATCH)?;
    Ok(records
        .iter()
        .zip(scores)
        .map(|(r, s)| {
            if s.len() == 1 {
                ImageVote::binary(&r.polyp_id, &r.image_path, s[0], r.light, r.focus)
            } else {
                let total = s[0] + s[1];
                ImageVote {
                    polyp_id: r.polyp_id.clone(),
                    image_id: r.image_path.clone(),
                    score: if total > 0.0 { s[1] / total } else { 0.5 },
                    confidence: predict_scores(&s).confidence,
                    light: r.light,
                    focus: r.focus,
                }
            }
        })
        .collect())
}

/// An experiment's records, binary labels and preprocessed images.
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub labels: Vec<usize>,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn polyp_labels(&self) -> BTreeMap<String, usize> {
        self.records
            .iter()
            .zip(&self.labels)
            .map(|(r, &y)| (r.polyp_id.clone(), y))
            .collect()
    }

    fn samples(&self) -> Samples<'_> {
        Samples {
            images: &self.images,
            labels: &self.labels,
        }
    }
}

pub struct FoldResult {
    pub fold: usize,
    pub split: Fold,
    pub log: Vec<EpochLog>,
    pub votes: Vec<ImageVote>,
    pub report: Report,
    /// Held-out reconstruction MSE before and after training.
    pub recon_mse: Option<(f64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub pooled: Report,
}

impl CrossValidation {
    /// Mean held-out reconstruction MSE before and after training.
    pub fn recon_mse(&self) -> Option<(f64, f64)> {
        let all: Vec<(f64, f64)> = self.folds.iter().filter_map(|f| f.recon_mse).collect();
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        Some((
            all.iter().map(|p| p.0).sum::<f64>() / n,
            all.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }
}

/// Train and evaluate every fold (concurrently, within the current rayon
/// pool) and pool the held-out votes. Checkpoints go to `out_dir` when
/// given.
pub fn run_cross_validation(
    data: &Dataset,
    config: &DCapsConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CrossValidation> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::Data("no records to cross-validate".into()));
    }
    let net_config = cfg.apply(config);
    net_config.validate()?;
    let groups = group_keys(&data.records, cfg.group_by);
    let folds = stratified_kfold(&data.labels, cfg.fold_count, &groups, cfg.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let results: Vec<FoldResult> = folds
        .into_par_iter()
        .enumerate()
        .map(|(f, split)| run_fold(data, &net_config, cfg, f, split, &groups, out_dir))
        .collect::<Result<_>>()?;
    let votes: Vec<ImageVote> = results.iter().flat_map(|r| r.votes.iter().cloned()).collect();
    let pooled = stratified_report(&votes, &data.polyp_labels(), true)?;
    Ok(CrossValidation {
        folds: results,
        pooled,
    })
}

pub fn group_keys(records: &[SampleRecord], by: GroupBy) -> Vec<String> {
    records
        .iter()
        .map(|r| match by {
            GroupBy::Polyp => r.polyp_id.clone(),
            GroupBy::Patient => r.patient_id.clone(),
        })
        .collect()
}

fn run_fold(
    data: &Dataset,
    config: &DCapsConfig,
    cfg: &TrainConfig,
    fold: usize,
    split: Fold,
    groups: &[String],
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    let test_labels: std::collections::BTreeSet<usize> = split.test.iter().map(|&i| data.labels[i]).collect();
    if test_labels.len() < 2 {
        warn!("fold {fold}: held-out records are all class {test_labels:?}; sensitivity or specificity is undefined");
    }
    let (train, validation) = if cfg.validation_folds >= 2 {
        let labels: Vec<usize> = split.train.iter().map(|&i| data.labels[i]).collect();
        let keys: Vec<String> = split.train.iter().map(|&i| groups[i].clone()).collect();
        let inner = stratified_kfold(&labels, cfg.validation_folds, &keys, cfg.seed.wrapping_add(fold as u64))?;
        let pick = |idx: &[usize]| idx.iter().map(|&j| split.train[j]).collect::<Vec<_>>();
        (pick(&inner[0].train), pick(&inner[0].test))
    } else {
        (split.train.clone(), Vec::new())
    };

    let mut net = DCaps::<f32>::build(config.clone(), cfg.seed.wrapping_add(fold as u64))?;
    let test_imgs: Vec<&Tensor<f32>> = split.test.iter().map(|&i| &data.images[i]).collect();
    let recon_before = if config.recon_enabled {
        Some(net.recon_mse(&test_imgs, EVAL_BATCH)?)
    } else {
        None
    };
    let trained = train_fold(&mut net, data.samples(), &train, &validation, cfg, fold, out_dir)?;
    let recon_mse = match recon_before {
        Some(before) => Some((before, net.recon_mse(&test_imgs, EVAL_BATCH)?)),
        None => None,
    };
    let test_records: Vec<&SampleRecord> = split.test.iter().map(|&i| &data.records[i]).collect();
    let votes = vote(&net, &test_records, &test_imgs)?;
    let report = stratified_report(&votes, &data.polyp_labels(), true)?;
    if let Some(all) = report.column("All Polyps").and_then(|c| c.accuracy) {
        info!("fold {fold}: held-out polyp accuracy {all:.4}");
    }
    Ok(FoldResult {
        fold,
        split,
        log: trained.log,
        votes,
        report,
        recon_mse,
        checkpoints: trained.checkpoints,
    })
}

/// Build a batch tensor from record indices.
pub fn batch_of(images: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &images[i]).collect();
    stack_refs(&refs)
}
