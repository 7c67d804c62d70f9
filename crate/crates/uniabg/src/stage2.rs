//! Stage-2 training on filtered drone-satellite pairs.
//!
//! The Stage-1 encoder is warm-started and extended with three affine heads:
//! a contrastive head (symmetric InfoNCE over the batch), a classification
//! head (cross-entropy against the associated satellite cluster, applied to
//! both the drone and the satellite side), and an alignment head (mean squared
//! distance between the paired projections). All heads train jointly with
//! analytic gradients.

use serde::{Deserialize, Serialize};

use crate::cluster::PseudoLabels;
use crate::hgfc::AssociationMap;
use crate::loss::{cross_entropy, info_nce, mse_align};
use crate::nn::{normalize_rows, normalize_rows_backward, Affine, AffineGrads};
use crate::stage1::EncoderParams;
use crate::store::EmbeddingSet;
use crate::util::{seeded_rng, shuffled_indices};
use crate::{Error, Result};

/// Supervision extracted from the association map: one (drone, satellite,
/// cluster label) triple per associated drone with a clustered representative.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub dim: usize,
    /// Raw drone input rows, one per pair.
    pub drone_inputs: Vec<f64>,
    /// Raw satellite representative rows, one per pair.
    pub sat_inputs: Vec<f64>,
    /// Winning satellite cluster per pair.
    pub labels: Vec<usize>,
    /// Drone indices the pairs came from, for traceability.
    pub drone_indices: Vec<usize>,
    /// Total satellite cluster count (classification head width).
    pub num_classes: usize,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds the pair dataset from an association map. Unassociated drones and
/// associations whose representative is a noise satellite are skipped; an
/// empty result is an error because Stage 2 would have nothing to train on.
pub fn build_pairs(
    assoc: &AssociationMap,
    drone: &EmbeddingSet,
    satellite: &EmbeddingSet,
    sat_labels: &PseudoLabels,
) -> Result<PairDataset> {
    if assoc.assoc.len() != drone.count() {
        return Err(Error::Shape(format!(
            "{} associations for {} drones",
            assoc.assoc.len(),
            drone.count()
        )));
    }
    if sat_labels.len() != satellite.count() {
        return Err(Error::Shape(format!(
            "{} satellite labels for {} satellites",
            sat_labels.len(),
            satellite.count()
        )));
    }
    let num_classes = sat_labels.num_clusters();
    let mut dataset = PairDataset {
        dim: drone.dim,
        drone_inputs: Vec::new(),
        sat_inputs: Vec::new(),
        labels: Vec::new(),
        drone_indices: Vec::new(),
        num_classes,
    };
    for (i, a) in assoc.assoc.iter().enumerate() {
        let Some(a) = a else { continue };
        let Some(cluster) = a.sat_cluster else { continue };
        dataset.drone_inputs.extend_from_slice(drone.row(i));
        dataset.sat_inputs.extend_from_slice(satellite.row(a.sat_rep));
        dataset.labels.push(cluster);
        dataset.drone_indices.push(i);
    }
    if dataset.is_empty() {
        return Err(Error::Data(
            "association map yields no trainable pairs".into(),
        ));
    }
    Ok(dataset)
}

/// Stage-2 model: warm-started encoder plus three task heads. The contrastive
/// and alignment head outputs are unit-normalized; the classification head
/// emits raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub encoder: EncoderParams,
    pub f_ctr: Affine,
    pub f_cls: Affine,
    pub f_dsa: Affine,
}

impl Stage2Model {
    /// Fresh heads on top of an existing encoder. The contrastive and
    /// alignment heads keep the encoder width and start at the identity so the
    /// warm-started encoder's geometry survives initialization; the
    /// classification head is as wide as the satellite cluster count and is
    /// randomly initialized.
    pub fn new(encoder: EncoderParams, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Param("num_classes must be positive".into()));
        }
        let dim = encoder.dim_out();
        let mut rng = seeded_rng(seed);
        Ok(Stage2Model {
            f_ctr: Affine::identity(dim),
            f_cls: Affine::init(dim, num_classes, &mut rng),
            f_dsa: Affine::identity(dim),
            encoder,
        })
    }

    /// Retrieval features: contrastive-head output, unit-normalized.
    pub fn retrieval_features(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let b = set.count();
        let u = self.encoder.encode(&set.vectors, b)?;
        let y = self.f_ctr.forward(&u, b);
        let (out, _) = normalize_rows(&y, b, self.f_ctr.out_dim)?;
        EmbeddingSet::new(self.f_ctr.out_dim, out, set.ids.clone(), set.view)
    }
}

/// Gradient accumulators for every Stage-2 parameter block.
#[derive(Debug, Clone)]
pub struct Stage2Grads {
    pub encoder: AffineGrads,
    pub f_ctr: AffineGrads,
    pub f_cls: AffineGrads,
    pub f_dsa: AffineGrads,
}

impl Stage2Grads {
    pub fn zeros_like(model: &Stage2Model) -> Self {
        Stage2Grads {
            encoder: AffineGrads::zeros_like(&model.encoder.layer),
            f_ctr: AffineGrads::zeros_like(&model.f_ctr),
            f_cls: AffineGrads::zeros_like(&model.f_cls),
            f_dsa: AffineGrads::zeros_like(&model.f_dsa),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.encoder.flatten_into(out);
        self.f_ctr.flatten_into(out);
        self.f_cls.flatten_into(out);
        self.f_dsa.flatten_into(out);
    }
}

/// Loss components of one Stage-2 step; the objective is their plain sum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Stage2Losses {
    pub contrastive: f64,
    pub alignment: f64,
    pub classification: f64,
}

impl Stage2Losses {
    pub fn total(&self) -> f64 {
        self.contrastive + self.alignment + self.classification
    }
}

struct SideForward {
    enc_u: Vec<f64>,
    enc_norms: Vec<f64>,
    ctr_u: Vec<f64>,
    ctr_norms: Vec<f64>,
    dsa_u: Vec<f64>,
    dsa_norms: Vec<f64>,
    logits: Vec<f64>,
}

fn side_forward(model: &Stage2Model, inputs: &[f64], batch: usize) -> Result<SideForward> {
    let dim = model.encoder.dim_out();
    let y = model.encoder.layer.forward(inputs, batch);
    let (enc_u, enc_norms) = normalize_rows(&y, batch, dim)?;
    let ctr_y = model.f_ctr.forward(&enc_u, batch);
    let (ctr_u, ctr_norms) = normalize_rows(&ctr_y, batch, model.f_ctr.out_dim)?;
    let dsa_y = model.f_dsa.forward(&enc_u, batch);
    let (dsa_u, dsa_norms) = normalize_rows(&dsa_y, batch, model.f_dsa.out_dim)?;
    let logits = model.f_cls.forward(&enc_u, batch);
    Ok(SideForward {
        enc_u,
        enc_norms,
        ctr_u,
        ctr_norms,
        dsa_u,
        dsa_norms,
        logits,
    })
}

/// Backpropagates one side's head gradients down to the encoder parameters.
fn side_backward(
    model: &Stage2Model,
    inputs: &[f64],
    batch: usize,
    fwd: &SideForward,
    d_ctr_u: &[f64],
    d_dsa_u: &[f64],
    d_logits: &[f64],
    grads: &mut Stage2Grads,
) {
    let dim = model.encoder.dim_out();
    let d_ctr_y = normalize_rows_backward(&fwd.ctr_u, &fwd.ctr_norms, d_ctr_u, batch, model.f_ctr.out_dim);
    let mut d_enc = model.f_ctr.backward(&fwd.enc_u, &d_ctr_y, batch, &mut grads.f_ctr);
    let d_dsa_y = normalize_rows_backward(&fwd.dsa_u, &fwd.dsa_norms, d_dsa_u, batch, model.f_dsa.out_dim);
    for (g, v) in d_enc
        .iter_mut()
        .zip(model.f_dsa.backward(&fwd.enc_u, &d_dsa_y, batch, &mut grads.f_dsa))
    {
        *g += v;
    }
    for (g, v) in d_enc
        .iter_mut()
        .zip(model.f_cls.backward(&fwd.enc_u, d_logits, batch, &mut grads.f_cls))
    {
        *g += v;
    }
    let d_enc_y = normalize_rows_backward(&fwd.enc_u, &fwd.enc_norms, &d_enc, batch, dim);
    model.encoder.layer.backward(inputs, &d_enc_y, batch, &mut grads.encoder);
}

/// Full Stage-2 objective for one batch:
/// `InfoNCE(ctr_q, ctr_r) + MSE(dsa_q, dsa_r) + CE(cls_q) + CE(cls_r)`,
/// with analytic gradients for every parameter block.
pub fn stage2_loss(
    model: &Stage2Model,
    drone_inputs: &[f64],
    sat_inputs: &[f64],
    labels: &[usize],
    temperature: f64,
) -> Result<(Stage2Losses, Stage2Grads)> {
    let batch = labels.len();
    if batch < 2 {
        return Err(Error::Batch(format!(
            "stage-2 step needs at least 2 pairs, got {batch}"
        )));
    }
    let q = side_forward(model, drone_inputs, batch)?;
    let r = side_forward(model, sat_inputs, batch)?;

    let nce = info_nce(&q.ctr_u, &r.ctr_u, batch, model.f_ctr.out_dim, temperature)?;
    let mse = mse_align(&q.dsa_u, &r.dsa_u, batch, model.f_dsa.out_dim)?;
    let ce_q = cross_entropy(&q.logits, labels, model.f_cls.out_dim)?;
    let ce_r = cross_entropy(&r.logits, labels, model.f_cls.out_dim)?;

    let mut grads = Stage2Grads::zeros_like(model);
    side_backward(
        model,
        drone_inputs,
        batch,
        &q,
        nce.grad("queries"),
        mse.grad("a"),
        ce_q.grad("logits"),
        &mut grads,
    );
    side_backward(
        model,
        sat_inputs,
        batch,
        &r,
        nce.grad("references"),
        mse.grad("b"),
        ce_r.grad("logits"),
        &mut grads,
    );

    Ok((
        Stage2Losses {
            contrastive: nce.value,
            alignment: mse.value,
            classification: ce_q.value + ce_r.value,
        },
        grads,
    ))
}

/// One joint descent step over all Stage-2 parameters. Returns the pre-step
/// loss components.
pub fn stage2_step(
    model: &mut Stage2Model,
    drone_inputs: &[f64],
    sat_inputs: &[f64],
    labels: &[usize],
    temperature: f64,
    lr: f64,
) -> Result<Stage2Losses> {
    let (losses, grads) = stage2_loss(model, drone_inputs, sat_inputs, labels, temperature)?;
    model.encoder.layer.step(&grads.encoder, lr);
    model.f_ctr.step(&grads.f_ctr, lr);
    model.f_cls.step(&grads.f_cls, lr);
    model.f_dsa.step(&grads.f_dsa, lr);
    Ok(losses)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 20,
            lr: 0.01,
            batch: 24,
            temperature: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage2TraceEntry {
    pub epoch: usize,
    pub iter: usize,
    #[serde(flatten)]
    pub losses: Stage2Losses,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub model: Stage2Model,
    pub loss_trace: Vec<Stage2TraceEntry>,
}

/// Runs Stage 2: seeded shuffle per epoch, fixed-size batches, trailing
/// singleton batches skipped (InfoNCE needs two rows). Zero epochs returns
/// the freshly initialized model unchanged.
pub fn run_stage2(
    dataset: &PairDataset,
    encoder: EncoderParams,
    config: &Stage2Config,
) -> Result<Stage2Output> {
    if config.batch < 2 {
        return Err(Error::Config("stage2 batch must be at least 2".into()));
    }
    let mut model = Stage2Model::new(encoder, dataset.num_classes, config.seed)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut trace = Vec::new();
    let dim = dataset.dim;

    for epoch in 1..=config.epochs {
        let order = shuffled_indices(dataset.len(), &mut rng);
        for (iter, chunk) in order.chunks(config.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut drone_inputs = Vec::with_capacity(chunk.len() * dim);
            let mut sat_inputs = Vec::with_capacity(chunk.len() * dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &p in chunk {
                drone_inputs.extend_from_slice(&dataset.drone_inputs[p * dim..(p + 1) * dim]);
                sat_inputs.extend_from_slice(&dataset.sat_inputs[p * dim..(p + 1) * dim]);
                labels.push(dataset.labels[p]);
            }
            let losses = stage2_step(
                &mut model,
                &drone_inputs,
                &sat_inputs,
                &labels,
                config.temperature,
                config.lr,
            )?;
            trace.push(Stage2TraceEntry {
                epoch,
                iter,
                losses,
            });
        }
    }

    Ok(Stage2Output {
        model,
        loss_trace: trace,
    })
}
