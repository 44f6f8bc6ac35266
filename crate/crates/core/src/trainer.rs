//! Siamese training loop: two augmented views through one parameter set,
//! heatmap BCE + coordinate L1 per view, the correlation loss on the pooled
//! bottleneck features, and AdamW updates. Per-sample tapes keep memory flat
//! and let the batch fan out across worker threads; the batch-level
//! correlation gradient is injected into each sample's reverse sweep as an
//! extra cotangent seed, so threading never changes the math.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{single_view, two_views, AugConfig, PatchSchedule, SampleRecord};
use crate::codec::{decode, encode, CodecConfig, HeatmapStack};
use crate::dcca::{dcca_value_and_grads, DccaConfig, ViewFeatures};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::metrics;
use crate::netops::{bce_heatmap_loss, l1_coord_loss, soft_argmax};
use crate::network::{forward, init_params, NetworkConfig, NetworkParams};
use crate::rng::Rng;
use crate::synth::Corpus;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub w_bce: f64,
    pub w_l1: f64,
    pub w_dcca: f64,
    pub soft_argmax_beta: f64,
    pub schedule: PatchSchedule,
    pub augment: AugConfig,
    pub network: NetworkConfig,
    pub codec: CodecConfig,
    pub dcca: DccaConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub siamese_enabled: bool,
    pub fifa_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        let codec = CodecConfig::for_image(network.input_h, network.input_w)
            .expect("default input divisible by 4");
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            // desk-scale default; 1e-4 suits long fine-tuning runs but does
            // not converge from random init within 60 epochs
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            w_bce: 1.0,
            w_l1: 1.0,
            // the correlation term uses the scalar (top-component) form at
            // desk scale; its weight is tempered so its trunk gradient does
            // not drown the landmark losses on small batches
            w_dcca: 0.1,
            soft_argmax_beta: 10.0,
            schedule: PatchSchedule {
                initial_side: 5,
                epoch_interval: 2,
                tail_epochs: 50,
                intensity: [0.0; 3],
            },
            augment: AugConfig::default(),
            network,
            codec,
            dcca: DccaConfig {
                num_components: Some(1),
                ..Default::default()
            },
            seed: 0,
            eval_every: 5,
            siamese_enabled: true,
            fifa_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config {
                path: "train.epochs/batch_size".into(),
                msg: "must be positive".into(),
            });
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config {
                path: "train.learning_rate".into(),
                msg: "must be positive".into(),
            });
        }
        for (name, w) in [("w_bce", self.w_bce), ("w_l1", self.w_l1), ("w_dcca", self.w_dcca)] {
            if w < 0.0 {
                return Err(Error::Config {
                    path: format!("train.{name}"),
                    msg: "loss weights must be non-negative".into(),
                });
            }
        }
        if self.epochs != self.schedule.total_epochs() {
            return Err(Error::Config {
                path: "train.schedule".into(),
                msg: format!(
                    "schedule spans {} epochs (side*interval+tail) but epochs = {}",
                    self.schedule.total_epochs(),
                    self.epochs
                ),
            });
        }
        self.network.validate()?;
        self.augment.validate()?;
        if self.codec.heatmap_h != self.network.heatmap_h()
            || self.codec.heatmap_w != self.network.heatmap_w()
            || self.codec.scale * self.codec.heatmap_h != self.network.input_h
        {
            return Err(Error::Config {
                path: "train.codec".into(),
                msg: format!(
                    "codec heatmap {}x{} (scale {}) inconsistent with network input {}x{}",
                    self.codec.heatmap_h,
                    self.codec.heatmap_w,
                    self.codec.scale,
                    self.network.input_h,
                    self.network.input_w
                ),
            });
        }
        if self.batch_size < 2 && self.siamese_enabled && self.w_dcca > 0.0 {
            return Err(Error::Config {
                path: "train.batch_size".into(),
                msg: "correlation loss needs batches of at least 2".into(),
            });
        }
        Ok(())
    }

    /// Weights for the patch-size sweep: same recipe, different initial side.
    /// Side 0 disables the patch stage entirely.
    pub fn with_initial_side(mut self, side: usize) -> Self {
        if side == 0 {
            self.fifa_enabled = false;
            self.schedule.tail_epochs = self.epochs - self.schedule.initial_side * self.schedule.epoch_interval;
        } else {
            self.fifa_enabled = true;
            self.schedule.initial_side = side;
            self.schedule.tail_epochs = self.epochs - side * self.schedule.epoch_interval;
        }
        self
    }
}

/// First/second AdamW moments, aligned with the parameter table order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn for_params(params: &NetworkParams) -> Self {
        OptimizerState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay.
fn adamw_update(
    params: &mut NetworkParams,
    grads: &[Vec<f64>],
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let p = params.get(name).expect("aligned");
        let g = &grads[i];
        let mut data = p.data().to_vec();
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        for j in 0..data.len() {
            m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * g[j];
            v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            data[j] -= cfg.learning_rate * (mh / (vh.sqrt() + cfg.adam_eps))
                + cfg.learning_rate * cfg.weight_decay * data[j];
        }
        params.set(name, Tensor::new(p.shape().to_vec(), data)?)?;
    }
    Ok(())
}

/// Per-epoch loss means and the test metric when evaluated that epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_bce: f64,
    pub mean_l1: f64,
    pub mean_dcca: f64,
    pub mean_total: f64,
    pub test_nme_ic: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    /// Full CSV including wall-clock times.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_bce,mean_l1,mean_dcca,mean_total,test_nme_ic,wall_secs\n");
        for e in &self.epochs {
            let nme = e.test_nme_ic.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.3}\n",
                e.epoch, e.mean_bce, e.mean_l1, e.mean_dcca, e.mean_total, nme, e.wall_secs
            ));
        }
        out
    }

    /// CSV without the wall-clock column; identical configs produce identical
    /// canonical logs bit for bit.
    pub fn canonical_csv(&self) -> String {
        let mut out = String::from("epoch,mean_bce,mean_l1,mean_dcca,mean_total,test_nme_ic\n");
        for e in &self.epochs {
            let nme = e.test_nme_ic.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                e.epoch, e.mean_bce, e.mean_l1, e.mean_dcca, e.mean_total, nme
            ));
        }
        out
    }
}

/// Loss components of one optimization step (batch means).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub bce: f64,
    pub l1: f64,
    pub dcca: f64,
    pub total: f64,
}

/// Worker threads for batch fan-out: FIFA_THREADS if set, else the machine's
/// parallelism. Thread count never changes results, only wall time.
pub fn worker_threads() -> usize {
    std::env::var("FIFA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

/// Forward state of one sample, kept alive until the batch gradient is known.
struct SampleForward {
    tape: Tape,
    bound: NetworkParams,
    loss_node: NodeId,
    pooled_nodes: Vec<NodeId>,
    pooled_data: Vec<Vec<f64>>,
    bce: f64,
    l1: f64,
}

fn forward_sample(
    views: &[SampleRecord],
    params: &NetworkParams,
    cfg: &TrainConfig,
    inv_batch: f64,
) -> Result<SampleForward> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let n_views = views.len() as f64;
    let mut bce_terms = Vec::with_capacity(views.len());
    let mut l1_terms = Vec::with_capacity(views.len());
    let mut pooled_nodes = Vec::with_capacity(views.len());
    let mut pooled_data = Vec::with_capacity(views.len());

    let (hh, hw) = (cfg.codec.heatmap_h, cfg.codec.heatmap_w);
    let k = cfg.network.landmarks;
    for view in views {
        let img = view.image.reshaped([1, 3, cfg.network.input_h, cfg.network.input_w])?;
        let (logits, pooled) = forward(&mut tape, &img, &bound, &cfg.network)?;
        let target = encode(&view.landmarks, &cfg.codec);
        let target = target.values.reshaped([1, k, hh, hw])?;
        let bce = bce_heatmap_loss(&mut tape, &logits, &target)?;

        let probs = tape.sigmoid(&logits);
        let coords = soft_argmax(&mut tape, &probs, cfg.soft_argmax_beta)?;
        let gt: Vec<f64> = view
            .landmarks
            .points
            .iter()
            .flat_map(|p| [p.x / cfg.codec.scale as f64, p.y / cfg.codec.scale as f64])
            .collect();
        let gt = Tensor::new([1, k, 2], gt)?;
        let l1 = l1_coord_loss(&mut tape, &coords, &gt)?;

        bce_terms.push(bce);
        l1_terms.push(l1);
        pooled_nodes.push(pooled.node().expect("tracked in training"));
        pooled_data.push(pooled.data().to_vec());
    }

    // mean over views, weighted, scaled by 1/B so batch contributions sum to
    // the batch-mean loss
    let mut bce_sum = bce_terms[0].clone();
    let mut l1_sum = l1_terms[0].clone();
    for t in &bce_terms[1..] {
        bce_sum = tape.add(&bce_sum, t)?;
    }
    for t in &l1_terms[1..] {
        l1_sum = tape.add(&l1_sum, t)?;
    }
    let bce_mean = tape.scale(&bce_sum, 1.0 / n_views);
    let l1_mean = tape.scale(&l1_sum, 1.0 / n_views);
    let wb = tape.scale(&bce_mean, cfg.w_bce);
    let wl = tape.scale(&l1_mean, cfg.w_l1);
    let combined = tape.add(&wb, &wl)?;
    let scalar = tape.scale(&combined, inv_batch);
    if !scalar.item().is_finite() {
        return Err(Error::NonFinite { op: "train_step(loss)".into() });
    }

    Ok(SampleForward {
        loss_node: scalar.node().expect("tracked"),
        bce: bce_mean.item(),
        l1: l1_mean.item(),
        tape,
        bound,
        pooled_nodes,
        pooled_data,
    })
}

/// Map worker: run `job` over items, preserving order, on up to `threads`
/// workers. Results are collected positionally, so scheduling cannot change
/// any downstream arithmetic.
fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, job: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(job).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let job = &job;
    let slot_refs = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..threads.min(n) {
            handles.push(scope.spawn(|| {
                let mut acc: Vec<(usize, R)> = Vec::new();
                loop {
                    let next = queue.lock().expect("queue").pop();
                    match next {
                        Some((i, item)) => acc.push((i, job(item))),
                        None => break,
                    }
                }
                let mut slots = slot_refs.lock().expect("slots");
                for (i, r) in acc {
                    slots[i] = Some(r);
                }
            }));
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// One optimization step over a batch: build views, forward every sample on
/// its own tape, compute the batch correlation term, sweep gradients back
/// (seeding the pooled features with the correlation cotangent), and apply
/// one AdamW update.
pub fn train_step(
    batch: &[SampleRecord],
    params: &mut NetworkParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossParts> {
    let use_dcca = cfg.siamese_enabled && cfg.w_dcca > 0.0;
    if batch.len() < 2 && use_dcca {
        return Err(Error::DegenerateBatch);
    }

    // augmented views per sample
    let mut view_sets = Vec::with_capacity(batch.len());
    for rec in batch {
        if cfg.siamese_enabled {
            let (v1, v2) = two_views(rec, &cfg.augment, &cfg.schedule, epoch)?;
            view_sets.push(vec![v1, v2]);
        } else {
            view_sets.push(vec![single_view(rec, &cfg.augment, &cfg.schedule, epoch, cfg.fifa_enabled)?]);
        }
    }

    // forward pass, one tape per sample
    let inv_batch = 1.0 / batch.len() as f64;
    let threads = worker_threads();
    let forwards: Vec<Result<SampleForward>> = parallel_map(view_sets, threads, |views| {
        forward_sample(&views, params, cfg, inv_batch)
    });
    let mut samples = Vec::with_capacity(batch.len());
    for (i, f) in forwards.into_iter().enumerate() {
        samples.push(f.map_err(|e| Error::contract("train_step", format!("sample {i} (epoch {epoch}): {e}")))?);
    }

    // batch-level correlation term on the pooled features
    let d = cfg.network.feature_dim;
    let (dcca_val, dcca_grads) = if use_dcca {
        let b = samples.len();
        let mut h1 = Vec::with_capacity(b * d);
        let mut h2 = Vec::with_capacity(b * d);
        for s in &samples {
            h1.extend_from_slice(&s.pooled_data[0]);
            h2.extend_from_slice(&s.pooled_data[1]);
        }
        let v = ViewFeatures::new(Tensor::new([b, d], h1)?, Tensor::new([b, d], h2)?)?;
        let (val, g1, g2) = dcca_value_and_grads(&v, &cfg.dcca)?;
        (val, Some((g1, g2)))
    } else {
        (0.0, None)
    };

    // reverse sweeps, seeded with the correlation cotangent
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let sweep_inputs: Vec<(usize, SampleForward)> = samples.into_iter().enumerate().collect();
    let per_sample: Vec<Result<(Vec<Option<Vec<f64>>>, f64, f64)>> =
        parallel_map(sweep_inputs, threads, |(i, s)| {
            let mut seeds = vec![(s.loss_node, vec![1.0])];
            if let Some((g1, g2)) = &dcca_grads {
                let row1: Vec<f64> = g1[i * d..(i + 1) * d].iter().map(|v| v * cfg.w_dcca).collect();
                let row2: Vec<f64> = g2[i * d..(i + 1) * d].iter().map(|v| v * cfg.w_dcca).collect();
                seeds.push((s.pooled_nodes[0], row1));
                seeds.push((s.pooled_nodes[1], row2));
            }
            let mut grads = s.tape.backward_seeded(seeds)?;
            let by_param: Vec<Option<Vec<f64>>> = names
                .iter()
                .map(|n| grads.take(s.bound.get(n).expect("bound")))
                .collect();
            Ok((by_param, s.bce, s.l1))
        });

    // fixed-order reduction keeps results independent of thread scheduling
    let mut total: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut mean_bce = 0.0;
    let mut mean_l1 = 0.0;
    for (i, r) in per_sample.into_iter().enumerate() {
        let (by_param, bce, l1) =
            r.map_err(|e| Error::contract("train_step", format!("sample {i} (epoch {epoch}): {e}")))?;
        mean_bce += bce * inv_batch;
        mean_l1 += l1 * inv_batch;
        for (acc, g) in total.iter_mut().zip(by_param) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
        }
    }

    adamw_update(params, &total, opt, cfg)?;

    let total_loss = cfg.w_bce * mean_bce + cfg.w_l1 * mean_l1 + cfg.w_dcca * dcca_val;
    if !total_loss.is_finite() {
        return Err(Error::NonFinite {
            op: format!("train_step(epoch {epoch})"),
        });
    }
    Ok(LossParts {
        bce: mean_bce,
        l1: mean_l1,
        dcca: dcca_val,
        total: total_loss,
    })
}

/// Inference: forward, sigmoid, decode back to image coordinates.
pub fn predict(params: &NetworkParams, images: &[Tensor], cfg: &TrainConfig) -> Result<Vec<LandmarkSet>> {
    let threads = worker_threads();
    let k = cfg.network.landmarks;
    let (hh, hw) = (cfg.codec.heatmap_h, cfg.codec.heatmap_w);
    let results: Vec<Result<LandmarkSet>> = parallel_map(images.to_vec(), threads, |img| {
        let mut tape = Tape::inference();
        let img = img.reshaped([1, 3, cfg.network.input_h, cfg.network.input_w])?;
        let (logits, _) = forward(&mut tape, &img, params, &cfg.network)?;
        let probs = tape.sigmoid(&logits);
        let stack = HeatmapStack::from_values(probs.reshaped([k, hh, hw])?, 1.0)?;
        Ok(decode(&stack, &cfg.codec))
    });
    results.into_iter().collect()
}

/// Everything a finished run hands back.
pub struct FitOutcome {
    pub params: NetworkParams,
    pub best_params: NetworkParams,
    pub best_epoch: usize,
    pub best_test_nme: f64,
    pub final_test_nme: f64,
    pub log: RunLog,
}

/// Mean test NME under the interocular normalizer.
pub fn test_nme(params: &NetworkParams, test: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let images: Vec<Tensor> = test.samples.iter().map(|s| s.image.clone()).collect();
    let preds = predict(params, &images, cfg)?;
    let result = metrics::evaluate(&preds, &test.samples)?;
    Ok(result.mean_nme_ic)
}

/// Full training run: seeded shuffles, the patch schedule, periodic test
/// evaluation, best-checkpoint tracking. Deterministic given (cfg, corpora);
/// pass `initial` to continue from saved parameters with a fresh optimizer.
pub fn fit(train: &Corpus, test: &Corpus, cfg: &TrainConfig, initial: Option<NetworkParams>) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.samples.is_empty() || test.samples.is_empty() {
        return Err(Error::contract("fit", "corpora must be non-empty"));
    }
    let mut params = match initial {
        Some(p) => p,
        None => init_params(&cfg.network, cfg.seed)?,
    };
    let mut opt = OptimizerState::for_params(&params);
    let mut log = RunLog::default();
    let mut best_test = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut final_test = f64::NAN;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        Rng::derive(cfg.seed ^ 0x1f2e_3d4c, epoch as u64).shuffle(&mut order);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break; // drop the ragged tail so every step sees a full batch
            }
            let batch: Vec<SampleRecord> = chunk.iter().map(|&i| train.samples[i].clone()).collect();
            let parts = train_step(&batch, &mut params, &mut opt, cfg, epoch)?;
            sums.0 += parts.bce;
            sums.1 += parts.l1;
            sums.2 += parts.dcca;
            sums.3 += parts.total;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::contract(
                "fit",
                format!("no full batches: {} samples, batch {}", train.samples.len(), cfg.batch_size),
            ));
        }
        let inv = 1.0 / steps as f64;

        let evaluate_now = epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let nme = if evaluate_now {
            let v = test_nme(&params, test, cfg)?;
            if v < best_test {
                best_test = v;
                best_epoch = epoch;
                best_params = params.clone();
            }
            if epoch + 1 == cfg.epochs {
                final_test = v;
            }
            Some(v)
        } else {
            None
        };

        log.epochs.push(EpochLog {
            epoch,
            mean_bce: sums.0 * inv,
            mean_l1: sums.1 * inv,
            mean_dcca: sums.2 * inv,
            mean_total: sums.3 * inv,
            test_nme_ic: nme,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(FitOutcome {
        params,
        best_params,
        best_epoch,
        best_test_nme: best_test,
        final_test_nme: final_test,
        log,
    })
}
