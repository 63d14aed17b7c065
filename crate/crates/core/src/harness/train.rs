//! The training loop. Every random choice is drawn from a stream keyed by the
//! run seed and a global index (epoch for shuffling, global sample number for
//! trimaps and augmentation), so a resumed run replays exactly what an
//! uninterrupted one would have done.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mattekit_autograd::Tape;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{self, Checkpoint};
use super::config::ExperimentConfig;
use crate::augment::plan_crop;
use crate::compose::composite;
use crate::losses::{compute_loss, CompositionTargets, LossInputs};
use crate::metrics::{self, MetricReport};
use crate::net::{batch_inputs, Network, Params};
use crate::rng::{stream, stream_rng};
use crate::synth::{odd_in, synthesize_dataset, DatasetManifest, Sample};
use crate::trimap::{self, Trimap, TrimapLabel};
use crate::{pngio, AlphaMatte, Error, Image, Result};

/// Training and held-out samples loaded into memory.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    /// `(id, sample)` pairs scored after training.
    pub test: Vec<(String, Sample)>,
}

impl Dataset {
    /// Synthesizes under `out_dir/data` unless a manifest is configured. The last
    /// `test_fg · bgs_per_fg` entries are held out.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let manifest = match &config.data.manifest {
            Some(path) => DatasetManifest::load(path)?,
            None => synthesize_dataset(
                &config.data.synth_config(),
                &config.out_dir.join("data"),
                config.seed,
            )?,
        };
        Self::from_manifest(manifest, config.data.test_fg * config.data.bgs_per_fg)
    }

    pub fn from_manifest(manifest: DatasetManifest, test_count: usize) -> Result<Self> {
        if test_count >= manifest.len() {
            return Err(Error::Config(format!(
                "{} entries cannot hold out {test_count} for testing",
                manifest.len()
            )));
        }
        let mut samples = manifest.load_all()?;
        let test_samples = samples.split_off(manifest.len() - test_count);
        let ids = manifest.entries[manifest.len() - test_count..]
            .iter()
            .map(|e| e.id());
        let test = ids.zip(test_samples).collect();
        Ok(Self {
            manifest,
            train: samples,
            test,
        })
    }
}

/// A training-resolution batch in network layout.
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub trimaps: Vec<Trimap>,
    pub alpha: Vec<f64>,
    pub unknown: Vec<bool>,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

/// Training trimap for one draw: morphology or distance, chosen at random.
pub fn training_trimap(
    config: &ExperimentConfig,
    alpha: &AlphaMatte,
    global_sample: u64,
) -> Result<Trimap> {
    let mut rng = stream_rng(config.seed, stream::TRIMAP, global_sample);
    let t = &config.trimap;
    if rng.gen_bool(t.distance_probability) {
        trimap::from_alpha_distance(alpha, rng.gen_range(t.radius[0]..=t.radius[1]))
    } else {
        trimap::from_alpha_morphology(alpha, odd_in(&mut rng, (t.kernel[0], t.kernel[1])))
    }
}

/// Trimap, crop and flip for one sample, then recomposition in float.
pub fn prepare_sample(
    config: &ExperimentConfig,
    sample: &Sample,
    global_sample: u64,
) -> Result<(Image, AlphaMatte, Trimap, Image, Image)> {
    let tri = training_trimap(config, &sample.alpha, global_sample)?;
    let mut rng = stream_rng(config.seed, stream::AUGMENT, global_sample);
    let plan = plan_crop(&tri, &config.augment, &mut rng)?;
    let fg = plan.apply_image(&sample.foreground)?;
    let bg = plan.apply_image(&sample.background)?;
    let alpha = plan.apply_alpha(&sample.alpha)?;
    let trimap = plan.apply_trimap(&tri)?;
    let image = composite(&fg, &bg, &alpha)?;
    Ok((image, alpha, trimap, fg, bg))
}

pub fn iterations_per_epoch(config: &ExperimentConfig, train_len: usize) -> u64 {
    (train_len / config.batch_size).max(1) as u64
}

/// Training indices for `iteration`: a fresh permutation per epoch.
pub fn batch_indices(config: &ExperimentConfig, train_len: usize, iteration: u64) -> Vec<usize> {
    let ipe = iterations_per_epoch(config, train_len);
    let (epoch, b) = (iteration / ipe, (iteration % ipe) as usize);
    let mut order: Vec<usize> = (0..train_len).collect();
    order.shuffle(&mut stream_rng(config.seed, stream::SHUFFLE, epoch));
    let bs = config.batch_size.min(train_len);
    order[b * bs..(b + 1) * bs].to_vec()
}

pub fn make_batch(config: &ExperimentConfig, data: &Dataset, iteration: u64) -> Result<Batch> {
    let indices = batch_indices(config, data.train.len(), iteration);
    let first = iteration * config.batch_size as u64;
    let prepared = indices
        .iter()
        .enumerate()
        .map(|(j, &i)| prepare_sample(config, &data.train[i], first + j as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = Batch {
        indices,
        images: Vec::new(),
        trimaps: Vec::new(),
        alpha: Vec::new(),
        unknown: Vec::new(),
        fg: Vec::new(),
        bg: Vec::new(),
    };
    for (image, alpha, trimap, fg, bg) in prepared {
        batch.alpha.extend_from_slice(alpha.values());
        batch.unknown.extend(trimap.unknown_mask());
        batch.fg.extend(fg.to_planar());
        batch.bg.extend(bg.to_planar());
        batch.images.push(image);
        batch.trimaps.push(trimap);
    }
    Ok(batch)
}

/// Forward, loss and backward for one batch. Returns the loss and one gradient
/// buffer per parameter (zeros where a parameter did not reach the loss).
pub fn loss_and_gradients(
    config: &ExperimentConfig,
    net: &Network,
    params: &Params,
    batch: &Batch,
    iteration: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let imgs: Vec<&Image> = batch.images.iter().collect();
    let tris: Vec<&Trimap> = batch.trimaps.iter().collect();
    let (img, tri) = batch_inputs(&imgs, &tris)?;
    let composite_planar = img.data().to_vec();
    let mut g = Tape::new();
    let p = params.bind(&mut g);
    let iv = g.constant(img);
    let tv = g.constant(tri);
    let out = net.forward(&mut g, &p, iv, tv)?;
    let inputs = LossInputs {
        alpha_g: &batch.alpha,
        unknown: &batch.unknown,
        colour: CompositionTargets {
            fg: &batch.fg,
            bg: &batch.bg,
            composite: &composite_planar,
        },
    };
    let mut loss = compute_loss(
        &mut g,
        &config.loss,
        &config.dgm,
        iteration,
        out.refined,
        &inputs,
    )?;
    if config.supervise_prelim && config.net.msr {
        let prelim = compute_loss(
            &mut g,
            &config.loss,
            &config.dgm,
            iteration,
            out.prelim,
            &inputs,
        )?;
        loss = g.add(loss, prelim)?;
    }
    g.backward(loss)?;
    let value = g.value(loss).item().expect("scalar loss");
    let grads = p
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    Ok((value, grads))
}

/// Known trimap regions override the prediction.
pub fn apply_trimap(alpha: &AlphaMatte, trimap: &Trimap) -> Result<AlphaMatte> {
    AlphaMatte::new(
        alpha.width(),
        alpha.height(),
        alpha
            .values()
            .iter()
            .zip(trimap.labels())
            .map(|(&a, l)| match l {
                TrimapLabel::Foreground => 1.0,
                TrimapLabel::Background => 0.0,
                TrimapLabel::Unknown => a,
            })
            .collect(),
    )
}

/// Refined predictions on the held-out set, in its order.
pub fn predict_test(net: &Network, params: &Params, data: &Dataset) -> Result<Vec<AlphaMatte>> {
    data.test
        .par_iter()
        .map(|(_, s)| {
            let a = net.infer(params, &[&s.composite], &[&s.trimap])?.remove(0);
            apply_trimap(&a, &s.trimap)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

pub fn evaluate_predictions(
    data: &Dataset,
    preds: &[AlphaMatte],
    params: &metrics::MetricParams,
) -> Result<Evaluation> {
    let per_image = data
        .test
        .par_iter()
        .zip(preds)
        .map(|((id, s), p)| {
            Ok((
                id.clone(),
                metrics::evaluate_pair(p, &s.alpha, &s.trimap.unknown_mask(), params)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = metrics::aggregate(per_image.iter().map(|(_, r)| r));
    Ok(Evaluation {
        per_image,
        aggregate,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (after checkpointing if at an epoch boundary) once this many
    /// iterations have run in total.
    pub stop_after: Option<u64>,
    /// Skip the held-out evaluation before and after training.
    pub skip_eval: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub iterations: u64,
    pub losses: Vec<f64>,
    pub initial: Option<Evaluation>,
    pub final_: Option<Evaluation>,
    pub params: Params,
}

pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn csv(&self) -> PathBuf {
        self.root.join("csv")
    }
    pub fn preds(&self) -> PathBuf {
        self.root.join("preds")
    }
    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.csv().join("loss.csv")
    }
    pub fn checkpoint(&self, epoch: u64) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:04}.ckpt"))
    }
    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const LOSS_CSV_HEADER: &str = "iteration,epoch,lr,sigma2,loss";

/// Keeps the CSV header and rows for iterations before `iteration`.
fn truncated_loss_csv(path: &Path, iteration: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for line in text.lines().skip(1) {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path, format!("malformed row `{line}`")))?;
        if it < iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn evaluation_csv(eval: &Evaluation) -> String {
    let mut out = String::from("id,sad,mse,grad,conn,unknown_count\n");
    for (id, r) in &eval.per_image {
        let _ = writeln!(
            out,
            "{id},{},{},{},{},{}",
            r.sad, r.mse, r.grad, r.conn, r.unknown_pixel_count
        );
    }
    out
}

pub fn train(config: &ExperimentConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let layout = RunLayout::new(&config.out_dir);
    write_file(&layout.snapshot(), &config.snapshot()?)?;
    let data = Dataset::prepare(config)?;
    train_on(config, &data, options)
}

/// Trains on an already loaded dataset, writing into `config.out_dir`.
pub fn train_on(
    config: &ExperimentConfig,
    data: &Dataset,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let layout = RunLayout::new(&config.out_dir);
    write_file(&layout.snapshot(), &config.snapshot()?)?;
    let (net, init_params) = Network::new(&config.net, config.seed)?;
    let metric_params = metrics::MetricParams::default();

    let initial = if options.skip_eval {
        None
    } else {
        let eval = evaluate_predictions(
            data,
            &predict_test(&net, &init_params, data)?,
            &metric_params,
        )?;
        write_file(
            &layout.csv().join("eval_initial.csv"),
            &evaluation_csv(&eval),
        )?;
        Some(eval)
    };

    let (mut params, mut adam, start) = match &options.resume {
        Some(path) => {
            let ck = checkpoint::load(path, &init_params)?;
            log::info!(
                "resuming from {} at iteration {}",
                path.display(),
                ck.iteration
            );
            (ck.params, ck.adam, ck.iteration)
        }
        None => {
            let adam = AdamState::new(&init_params);
            (init_params, adam, 0)
        }
    };

    let ipe = iterations_per_epoch(config, data.train.len());
    let total = config.epochs * ipe;
    let stop = options.stop_after.map_or(total, |s| s.min(total));
    let adam_cfg = AdamConfig {
        beta1: config.optimizer.beta1,
        beta2: config.optimizer.beta2,
        eps: config.optimizer.eps,
    };
    let mut csv = truncated_loss_csv(&layout.loss_csv(), start)?;
    let mut losses = Vec::new();

    for it in start..stop {
        let epoch = it / ipe;
        let lr = config.lr_at_epoch(epoch);
        let sigma2 = config.dgm.sigma2_at(it);
        let batch = make_batch(config, data, it)?;
        let (loss, grads) = loss_and_gradients(config, &net, &params, &batch, it)?;
        adam_step(
            &mut params,
            &grads,
            &mut adam,
            lr,
            &adam_cfg,
            it,
            &batch.indices,
        )?;
        let _ = writeln!(csv, "{it},{epoch},{lr},{sigma2},{loss}");
        losses.push(loss);
        if it % ipe == 0 || it + 1 == stop {
            log::info!("iteration {it} epoch {epoch} lr {lr} sigma2 {sigma2} loss {loss:.6}");
        }
        if (it + 1) % ipe == 0 {
            let done = (it + 1) / ipe;
            let ck = Checkpoint {
                iteration: it + 1,
                epoch: done,
                params: params.clone(),
                adam: adam.clone(),
            };
            checkpoint::save(&layout.checkpoint(done), &ck)?;
            checkpoint::save(&layout.latest(), &ck)?;
            write_file(&layout.loss_csv(), &csv)?;
        }
    }
    write_file(&layout.loss_csv(), &csv)?;

    let final_ = if options.skip_eval || stop < total {
        None
    } else {
        let preds = predict_test(&net, &params, data)?;
        for ((id, _), p) in data.test.iter().zip(&preds) {
            pngio::write_alpha(
                &metrics::prediction_path(&layout.preds(), id),
                p,
                pngio::AlphaDepth::Eight,
            )?;
        }
        let eval = evaluate_predictions(data, &preds, &metric_params)?;
        write_file(&layout.csv().join("eval_final.csv"), &evaluation_csv(&eval))?;
        Some(eval)
    };
    if let (Some(i), Some(f)) = (&initial, &final_) {
        let summary = serde_json::json!({ "initial": i.aggregate, "final": f.aggregate });
        write_file(
            &layout.root.join("metrics.json"),
            &(serde_json::to_string_pretty(&summary).expect("json") + "\n"),
        )?;
        log::info!(
            "held-out SAD {:.4} -> {:.4}",
            i.aggregate.sad,
            f.aggregate.sad
        );
    }
    Ok(TrainOutcome {
        run_dir: layout.root,
        iterations: stop,
        losses,
        initial,
        final_,
        params,
    })
}
