//! Stage-1 training: intra-view contrastive learning plus view-aware
//! adversarial bridging.
//!
//! A toy encoder (one affine projection followed by unit-sphere
//! normalization) is trained against per-view memory banks, while a view
//! discriminator learns to tell drone/satellite/APV features apart and the
//! encoder is pushed to make every view classify as APV. The two parameter
//! blocks are updated in strict alternation and never touch each other.
//! Adversarial terms activate from epoch 2 onward; epoch 1 is a contrastive
//! warm-up.

use serde::{Deserialize, Serialize};

use crate::cluster::{
    compute_prototypes, dbscan, memory_update, MemoryDictionary, PseudoLabels,
};
use crate::loss::{cross_entropy, intra_view_loss};
use crate::nn::{
    normalize_rows, normalize_rows_backward, relu, relu_backward, Affine, AffineGrads,
};
use crate::store::{EmbeddingSet, ViewTag};
use crate::util::{seeded_rng, shuffled_indices};
use crate::{Error, Result};

/// Toy backbone: a single affine projection; outputs are re-normalized to the
/// unit sphere after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layer: Affine,
}

impl EncoderParams {
    pub fn dim_out(&self) -> usize {
        self.layer.out_dim
    }

    /// Encodes a flat batch, returning unit-norm rows.
    pub fn encode(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let y = self.layer.forward(inputs, batch);
        let (u, _) = normalize_rows(&y, batch, self.layer.out_dim)?;
        Ok(u)
    }

    /// Encodes an entire embedding set, preserving ids and view.
    pub fn encode_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let u = self.encode(&set.vectors, set.count())?;
        EmbeddingSet::new(self.layer.out_dim, u, set.ids.clone(), set.view)
    }
}

/// View discriminator: one ReLU hidden layer, then a 3-way output
/// (drone / satellite / apv).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub hidden: Affine,
    pub output: Affine,
}

pub const NUM_VIEWS: usize = 3;

/// Seeded initialization of both parameter blocks.
pub fn init_models(
    dim_in: usize,
    dim_out: usize,
    hidden: usize,
    seed: u64,
) -> Result<(EncoderParams, DiscriminatorParams)> {
    if dim_in == 0 || dim_out == 0 || hidden == 0 {
        return Err(Error::Param("model dimensions must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let encoder = EncoderParams {
        layer: Affine::init(dim_in, dim_out, &mut rng),
    };
    let discriminator = DiscriminatorParams {
        hidden: Affine::init(dim_out, hidden, &mut rng),
        output: Affine::init(hidden, NUM_VIEWS, &mut rng),
    };
    Ok((encoder, discriminator))
}

struct DiscForward {
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

fn disc_forward(disc: &DiscriminatorParams, features: &[f64], batch: usize) -> DiscForward {
    let pre = disc.hidden.forward(features, batch);
    let act = relu(&pre);
    let logits = disc.output.forward(&act, batch);
    DiscForward { pre, act, logits }
}

/// CE of the discriminator on given targets plus the gradient w.r.t. its
/// input features (parameters frozen).
fn disc_input_grad(
    disc: &DiscriminatorParams,
    features: &[f64],
    batch: usize,
    targets: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let fwd = disc_forward(disc, features, batch);
    let res = cross_entropy(&fwd.logits, targets, NUM_VIEWS)?;
    let mut out_grads = AffineGrads::zeros_like(&disc.output);
    let dact = disc.output.backward(&fwd.act, res.grad("logits"), batch, &mut out_grads);
    let dpre = relu_backward(&fwd.pre, &dact);
    let mut hid_grads = AffineGrads::zeros_like(&disc.hidden);
    let dinput = disc.hidden.backward(features, &dpre, batch, &mut hid_grads);
    Ok((res.value, dinput))
}

/// One gradient-descent step on the discriminator parameters minimizing
/// CE against the true view labels. Encoder features are constants. Returns
/// the pre-step loss.
pub fn discriminator_step(
    disc: &mut DiscriminatorParams,
    features: &[f64],
    views: &[ViewTag],
    lr: f64,
) -> Result<f64> {
    let batch = views.len();
    if batch == 0 {
        return Err(Error::Batch("discriminator_step on an empty batch".into()));
    }
    let targets: Vec<usize> = views.iter().map(|v| v.class_index()).collect();
    let fwd = disc_forward(disc, features, batch);
    let res = cross_entropy(&fwd.logits, &targets, NUM_VIEWS)?;
    let mut out_grads = AffineGrads::zeros_like(&disc.output);
    let dact = disc.output.backward(&fwd.act, res.grad("logits"), batch, &mut out_grads);
    let dpre = relu_backward(&fwd.pre, &dact);
    let mut hid_grads = AffineGrads::zeros_like(&disc.hidden);
    disc.hidden.backward(features, &dpre, batch, &mut hid_grads);
    disc.output.step(&out_grads, lr);
    disc.hidden.step(&hid_grads, lr);
    Ok(res.value)
}

/// One view's share of a training step: raw input rows plus that view's
/// pseudo-labels (-1 entries are skipped by the contrastive term).
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub inputs: Vec<f64>,
    pub labels: Vec<i64>,
    pub view: ViewTag,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss components of one backbone step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StepLosses {
    pub l_sat: f64,
    pub l_drone: f64,
    /// Discriminator loss against true view labels; absent in warm-up.
    pub l_view: Option<f64>,
    /// Adversarial CE toward the APV label; absent in warm-up.
    pub l_adv: Option<f64>,
}

/// Composite Stage-1 loss (contrastive terms plus `lambda` times the
/// adversarial CE toward the APV label) with the analytic gradient w.r.t. the
/// encoder parameters. Discriminator parameters are frozen here.
pub fn stage1_composite(
    encoder: &EncoderParams,
    disc: &DiscriminatorParams,
    drone: &ViewBatch,
    satellite: &ViewBatch,
    apv: &ViewBatch,
    drone_memory: &MemoryDictionary,
    sat_memory: &MemoryDictionary,
    lambda: f64,
    temperature: f64,
) -> Result<(StepLosses, AffineGrads)> {
    let dim_out = encoder.dim_out();
    let mut grads = AffineGrads::zeros_like(&encoder.layer);
    let mut l_sat = 0.0;
    let mut l_drone = 0.0;
    let mut l_adv_sum = 0.0;
    let adv_total = drone.len() + satellite.len() + apv.len();
    if adv_total == 0 {
        return Err(Error::Batch("stage-1 step on an empty batch".into()));
    }

    let mut process = |batch: &ViewBatch, memory: Option<&MemoryDictionary>| -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let b = batch.len();
        let y = encoder.layer.forward(&batch.inputs, b);
        let (u, norms) = normalize_rows(&y, b, dim_out)?;
        let mut du = vec![0.0f64; b * dim_out];
        let mut contrastive = 0.0;
        if let Some(memory) = memory {
            let counted = batch.labels.iter().filter(|&&l| l >= 0).count();
            if counted > 0 {
                for (i, &label) in batch.labels.iter().enumerate() {
                    if label < 0 {
                        continue;
                    }
                    let row = &u[i * dim_out..(i + 1) * dim_out];
                    let res = intra_view_loss(row, memory, label as usize, temperature)?;
                    contrastive += res.value / counted as f64;
                    for (g, &dv) in du[i * dim_out..(i + 1) * dim_out]
                        .iter_mut()
                        .zip(res.grad("query"))
                    {
                        *g += dv / counted as f64;
                    }
                }
            }
        }
        if lambda > 0.0 {
            // Every view is pushed toward the APV class.
            let targets = vec![ViewTag::Apv.class_index(); b];
            let (value, dinput) = disc_input_grad(disc, &u, b, &targets)?;
            // disc_input_grad averages over its own batch; re-weight to the
            // combined three-view batch.
            let scale = b as f64 / adv_total as f64;
            l_adv_sum += value * scale;
            for (g, &dv) in du.iter_mut().zip(&dinput) {
                *g += lambda * dv * scale;
            }
        }
        let dy = normalize_rows_backward(&u, &norms, &du, b, dim_out);
        encoder.layer.backward(&batch.inputs, &dy, b, &mut grads);
        Ok(contrastive)
    };

    l_drone += process(drone, Some(drone_memory))?;
    l_sat += process(satellite, Some(sat_memory))?;
    process(apv, None)?;

    Ok((
        StepLosses {
            l_sat,
            l_drone,
            l_view: None,
            l_adv: (lambda > 0.0).then_some(l_adv_sum),
        },
        grads,
    ))
}

/// One descent step on the encoder minimizing
/// `L_sat + L_drone + lambda * L_adv` with the discriminator frozen.
pub fn adversarial_backbone_step(
    encoder: &mut EncoderParams,
    disc: &DiscriminatorParams,
    drone: &ViewBatch,
    satellite: &ViewBatch,
    apv: &ViewBatch,
    drone_memory: &MemoryDictionary,
    sat_memory: &MemoryDictionary,
    lambda: f64,
    lr: f64,
    temperature: f64,
) -> Result<StepLosses> {
    let (losses, grads) = stage1_composite(
        encoder,
        disc,
        drone,
        satellite,
        apv,
        drone_memory,
        sat_memory,
        lambda,
        temperature,
    )?;
    encoder.layer.step(&grads, lr);
    Ok(losses)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub memory_momentum: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    /// Satellite galleries often have one instance per location, which would
    /// make every satellite a noise point under the drone-side min_samples.
    pub dbscan_min_samples_satellite: usize,
    pub encoder_dim: usize,
    /// Start the encoder at the identity map (requires `encoder_dim` equal to
    /// the input dimension). Training then refines the raw feature space
    /// instead of having to recover its structure from a random projection,
    /// which would scramble the cosine geometry the clustering and graph
    /// association steps depend on.
    pub identity_init: bool,
    pub disc_hidden: usize,
    pub disc_lr: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 10,
            lr: 0.1,
            batch: 24,
            temperature: 0.05,
            lambda: 0.1,
            memory_momentum: 0.2,
            dbscan_eps: 0.25,
            dbscan_min_samples: 4,
            dbscan_min_samples_satellite: 1,
            encoder_dim: 64,
            identity_init: true,
            disc_hidden: 16,
            disc_lr: 0.05,
            seed: 0,
        }
    }
}

/// Per-iteration loss trace entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceEntry {
    pub epoch: usize,
    pub iter: usize,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Everything Stage 1 produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub encoder: EncoderParams,
    pub discriminator: DiscriminatorParams,
    pub drone_memory: MemoryDictionary,
    pub satellite_memory: MemoryDictionary,
    pub drone_labels: PseudoLabels,
    pub sat_labels: PseudoLabels,
    pub loss_trace: Vec<TraceEntry>,
}

fn gather_batch(set: &EmbeddingSet, labels: &PseudoLabels, idx: &[usize], view: ViewTag) -> ViewBatch {
    let mut inputs = Vec::with_capacity(idx.len() * set.dim);
    let mut lab = Vec::with_capacity(idx.len());
    for &i in idx {
        inputs.extend_from_slice(set.row(i));
        lab.push(labels.labels[i]);
    }
    ViewBatch {
        inputs,
        labels: lab,
        view,
    }
}

/// Runs the full Stage-1 loop: per epoch, re-cluster both views with the
/// current encoder, rebuild memories, then iterate equal-thirds batches.
/// Deterministic for a fixed config.
pub fn run_stage1(
    drone: &EmbeddingSet,
    satellite: &EmbeddingSet,
    apv: &EmbeddingSet,
    config: &Stage1Config,
) -> Result<Stage1Output> {
    if drone.count() == 0 || satellite.count() == 0 || apv.count() == 0 {
        return Err(Error::stage("stage1", "all three views need at least one sample"));
    }
    if config.batch < 3 {
        return Err(Error::Config("stage1 batch must be at least 3".into()));
    }
    let third = (config.batch / 3).max(1);
    let (mut encoder, mut disc) = init_models(
        drone.dim,
        config.encoder_dim,
        config.disc_hidden,
        config.seed,
    )?;
    if config.identity_init {
        if config.encoder_dim != drone.dim {
            return Err(Error::Config(format!(
                "identity_init needs encoder_dim == input dim ({} != {})",
                config.encoder_dim, drone.dim
            )));
        }
        encoder.layer = Affine::identity(drone.dim);
    }
    let mut rng = seeded_rng(config.seed.wrapping_add(1));

    let mut trace = Vec::new();
    let mut drone_labels = PseudoLabels { labels: vec![] };
    let mut sat_labels = PseudoLabels { labels: vec![] };
    let mut drone_memory: Option<MemoryDictionary> = None;
    let mut sat_memory: Option<MemoryDictionary> = None;

    for epoch in 1..=config.epochs {
        // Fresh pseudo-labels and memories from the current encoder.
        let enc_drone = encoder.encode_set(drone)?;
        let enc_sat = encoder.encode_set(satellite)?;
        drone_labels = dbscan(&enc_drone, config.dbscan_eps, config.dbscan_min_samples)?;
        sat_labels = dbscan(
            &enc_sat,
            config.dbscan_eps,
            config.dbscan_min_samples_satellite,
        )?;
        if drone_labels.num_clusters() == 0 {
            return Err(Error::stage("stage1", "clustering yielded zero clusters in view drone"));
        }
        if sat_labels.num_clusters() == 0 {
            return Err(Error::stage(
                "stage1",
                "clustering yielded zero clusters in view satellite",
            ));
        }
        let mut d_mem = compute_prototypes(&enc_drone, &drone_labels)?;
        let mut s_mem = compute_prototypes(&enc_sat, &sat_labels)?;

        let d_order = shuffled_indices(drone.count(), &mut rng);
        let s_order = shuffled_indices(satellite.count(), &mut rng);
        let p_order = shuffled_indices(apv.count(), &mut rng);
        let iters = drone.count().div_ceil(third);
        let adversarial = epoch >= 2 && config.lambda > 0.0;

        for iter in 0..iters {
            let take = |order: &[usize], n: usize| -> Vec<usize> {
                (0..third).map(|t| order[(iter * third + t) % n]).collect()
            };
            let d_idx = take(&d_order, drone.count());
            let s_idx = take(&s_order, satellite.count());
            let p_idx = take(&p_order, apv.count());
            let d_batch = gather_batch(drone, &drone_labels, &d_idx, ViewTag::Drone);
            let s_batch = gather_batch(satellite, &sat_labels, &s_idx, ViewTag::Satellite);
            let p_batch = ViewBatch {
                inputs: p_idx.iter().flat_map(|&i| apv.row(i).to_vec()).collect(),
                labels: vec![-1; p_idx.len()],
                view: ViewTag::Apv,
            };

            let l_view = if adversarial {
                // Discriminator sees the current encoder's features with the
                // true view labels; encoder parameters are constants here.
                let mut features = encoder.encode(&d_batch.inputs, d_batch.len())?;
                features.extend(encoder.encode(&s_batch.inputs, s_batch.len())?);
                features.extend(encoder.encode(&p_batch.inputs, p_batch.len())?);
                let mut views = vec![ViewTag::Drone; d_batch.len()];
                views.extend(vec![ViewTag::Satellite; s_batch.len()]);
                views.extend(vec![ViewTag::Apv; p_batch.len()]);
                Some(discriminator_step(&mut disc, &features, &views, config.disc_lr)?)
            } else {
                None
            };

            let lambda = if adversarial { config.lambda } else { 0.0 };
            let mut losses = adversarial_backbone_step(
                &mut encoder,
                &disc,
                &d_batch,
                &s_batch,
                &p_batch,
                &d_mem,
                &s_mem,
                lambda,
                config.lr,
                config.temperature,
            )?;
            losses.l_view = l_view;

            // Momentum updates from the pre-step query features.
            let d_features = encoder.encode(&d_batch.inputs, d_batch.len())?;
            for (i, &label) in d_batch.labels.iter().enumerate() {
                if label >= 0 {
                    let row = &d_features[i * config.encoder_dim..(i + 1) * config.encoder_dim];
                    memory_update(&mut d_mem, row, label as usize, config.memory_momentum)?;
                }
            }
            let s_features = encoder.encode(&s_batch.inputs, s_batch.len())?;
            for (i, &label) in s_batch.labels.iter().enumerate() {
                if label >= 0 {
                    let row = &s_features[i * config.encoder_dim..(i + 1) * config.encoder_dim];
                    memory_update(&mut s_mem, row, label as usize, config.memory_momentum)?;
                }
            }

            trace.push(TraceEntry {
                epoch,
                iter,
                losses,
            });
        }
        drone_memory = Some(d_mem);
        sat_memory = Some(s_mem);
    }

    Ok(Stage1Output {
        encoder,
        discriminator: disc,
        drone_memory: drone_memory.ok_or_else(|| Error::stage("stage1", "no epochs ran"))?,
        satellite_memory: sat_memory.expect("set together with drone_memory"),
        drone_labels,
        sat_labels,
        loss_trace: trace,
    })
}

/// Serializes encoder + discriminator into the shared checkpoint format.
pub fn save_checkpoint(
    path: &std::path::Path,
    encoder: &EncoderParams,
    disc: &DiscriminatorParams,
    config_echo: serde_json::Value,
    epoch: usize,
) -> Result<()> {
    use crate::ckpt::{CheckpointHeader, TensorInfo};
    let tensor = |name: &str, rows: usize, cols: usize| TensorInfo {
        name: name.into(),
        rows,
        cols,
    };
    let header = CheckpointHeader {
        tensors: vec![
            tensor("encoder.weight", encoder.layer.in_dim, encoder.layer.out_dim),
            tensor("encoder.bias", 1, encoder.layer.out_dim),
            tensor("disc.hidden.weight", disc.hidden.in_dim, disc.hidden.out_dim),
            tensor("disc.hidden.bias", 1, disc.hidden.out_dim),
            tensor("disc.output.weight", disc.output.in_dim, disc.output.out_dim),
            tensor("disc.output.bias", 1, disc.output.out_dim),
        ],
        config: config_echo,
        epoch,
    };
    crate::ckpt::save(
        path,
        &header,
        &[
            &encoder.layer.weight,
            &encoder.layer.bias,
            &disc.hidden.weight,
            &disc.hidden.bias,
            &disc.output.weight,
            &disc.output.bias,
        ],
    )
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &std::path::Path) -> Result<(EncoderParams, DiscriminatorParams)> {
    let (header, tensors) = crate::ckpt::load(path)?;
    if header.tensors.len() != 6 {
        return Err(Error::Format(format!(
            "expected 6 tensors in checkpoint, found {}",
            header.tensors.len()
        )));
    }
    let shape = |i: usize| (header.tensors[i].rows, header.tensors[i].cols);
    let (in_dim, out_dim) = shape(0);
    let (hid_in, hid_out) = shape(2);
    let (o_in, o_out) = shape(4);
    let encoder = EncoderParams {
        layer: Affine {
            in_dim,
            out_dim,
            weight: tensors[0].clone(),
            bias: tensors[1].clone(),
        },
    };
    let disc = DiscriminatorParams {
        hidden: Affine {
            in_dim: hid_in,
            out_dim: hid_out,
            weight: tensors[2].clone(),
            bias: tensors[3].clone(),
        },
        output: Affine {
            in_dim: o_in,
            out_dim: o_out,
            weight: tensors[4].clone(),
            bias: tensors[5].clone(),
        },
    };
    Ok((encoder, disc))
}
