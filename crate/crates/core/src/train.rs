//! Supervised training of a toy hash model through the blocked surrogate.
//!
//! Each mini-batch runs one forward pass of `F_θ` and one of `P_π` (dropout
//! active) and then:
//!
//! 1. `L_π = -log o_i` with `i` the block index of `bin(ℓ)`, a π-only loss;
//! 2. `L_θ = -log o_c` with `c` the block index of the sample's class center,
//!    differentiated with respect to `ℓ` through the frozen π;
//! 3. π is updated, then θ.
//!
//! Both gradients are taken before any parameter changes, from the same
//! forward pass and dropout mask.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::{class_stats, serialize_extended_f64, Percentile};
use crate::centers::CenterSet;
use crate::codes::BitCode;
use crate::error::{invalid, Error, Result};
use crate::labels::LabelSet;
use crate::mvb::{decayed_lr, SurrogateModel};
use crate::nn::{
    adam_step, softmax, AdamConfig, AdamState, Cache, DenseNet, Gradients, LayerSpec, Matrix, Mode,
};
use crate::ranking::map_at_r;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub features: Matrix,
    pub labels: Vec<LabelSet>,
    /// Row indices of the query split.
    pub queries: Vec<usize>,
    /// Row indices of the base (retrieval and training) split.
    pub base: Vec<usize>,
}

impl SyntheticData {
    pub fn rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.features.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.features.row(i));
        }
        out
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<LabelSet> {
        idx.iter().map(|&i| self.labels[i].clone()).collect()
    }
}

/// Gaussian blobs with unit covariance. Class `c` is centred at
/// `separation / √2 · e_c`, so class means are pairwise `separation` apart.
/// The first tenth of each class (at least one sample) forms the query split.
pub fn make_synthetic_dataset(
    classes: usize,
    per_class: usize,
    d: usize,
    separation: f64,
    seed: u64,
) -> Result<SyntheticData> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if d < classes {
        return Err(Error::InvalidConfig(format!(
            "feature dimension {d} is below the class count {classes}"
        )));
    }
    if per_class < 2 {
        return Err(Error::InvalidConfig("need at least 2 samples per class".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidConfig("separation must be finite and non-negative".into()));
    }
    let mut r = rng::stream(seed, "dataset", 0);
    let offset = separation / std::f64::consts::SQRT_2;
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let (mut queries, mut base) = (Vec::new(), Vec::new());
    let n_query = (per_class / 10).max(1);
    for c in 0..classes {
        for s in 0..per_class {
            for k in 0..d {
                let noise: f64 = r.sample(StandardNormal);
                data.push(noise + if k == c { offset } else { 0.0 });
            }
            let row = labels.len();
            labels.push(LabelSet::single(c as u32));
            if s < n_query {
                queries.push(row);
            } else {
                base.push(row);
            }
        }
    }
    Ok(SyntheticData {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        queries,
        base,
    })
}

/// `F_θ`: affine `d → hidden`, SiLU, affine `hidden → h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyHashModel {
    net: DenseNet,
}

impl ToyHashModel {
    pub fn new(d: usize, h: usize, hidden: usize, seed: u64) -> Result<Self> {
        let specs = [
            LayerSpec::Affine {
                inputs: d,
                outputs: hidden,
            },
            LayerSpec::Silu,
            LayerSpec::Affine {
                inputs: hidden,
                outputs: h,
            },
        ];
        Self::from_net(DenseNet::new(&specs, &mut rng::stream(seed, "hash-init", 0))?)
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        Ok(Self { net })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn bits(&self) -> usize {
        self.net.output_dim()
    }

    /// Real-valued outputs `ℓ`, one row per input.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.net.predict(x)
    }

    pub fn hash(&self, x: &Matrix) -> Result<Vec<BitCode>> {
        let l = self.embed(x)?;
        (0..l.rows()).map(|r| crate::codes::binarize(l.row(r))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `-log o_c` through the surrogate.
    Surrogate,
    /// Per-bit binary cross-entropy of `sigmoid(ℓ)` against the center bits,
    /// bypassing the surrogate (π is still fitted).
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_pi: f64,
    pub lr_theta: f64,
    pub decay_every: Option<usize>,
    pub objective: Objective,
    pub percentile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 64,
            lr_pi: 1e-3,
            lr_theta: 1e-3,
            decay_every: None,
            objective: Objective::Surrogate,
            percentile: 99.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss_pi: f64,
    pub loss_theta: f64,
    pub map: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub ratio: f64,
    pub min_pairwise: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

fn fmt_extended(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else {
        format!("{v}")
    }
}

impl TrainTrace {
    /// CSV with columns `epoch,loss_pi,loss_theta,map,ratio`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_pi,loss_theta,map,ratio\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.loss_pi,
                r.loss_theta,
                r.map,
                fmt_extended(r.ratio)
            )
            .expect("writing to a String");
        }
        out
    }

    /// Spearman correlation between per-epoch bound ratio and mAP.
    pub fn correlation(&self) -> Result<f64> {
        let h: Vec<(f64, f64)> = self.records.iter().map(|r| (r.ratio, r.map)).collect();
        crate::bounds::bound_correlation(&h)
    }
}

/// Losses and gradients of one mini-batch, all taken before any update.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss_pi: f64,
    pub loss_theta: f64,
    pub grads_pi: Vec<Gradients>,
    pub grads_theta: Gradients,
}

fn check_centers(labels: &[LabelSet], centers: &[BitCode], h: usize) -> Result<()> {
    if centers.iter().any(|c| c.len() != h) {
        return Err(Error::InvalidConfig("center length differs from the code length".into()));
    }
    if let Some(l) = labels
        .iter()
        .flat_map(|s| s.labels())
        .find(|&&l| l as usize >= centers.len())
    {
        return Err(Error::InvalidConfig(format!("no center for label {l}")));
    }
    Ok(())
}

/// Forward of every block net on its slice of `ℓ`.
fn surrogate_forward<R: Rng + ?Sized>(
    sur: &SurrogateModel,
    l: &Matrix,
    rng: &mut R,
) -> Result<Vec<(Matrix, Cache)>> {
    sur.nets()
        .iter()
        .enumerate()
        .map(|(j, net)| net.forward(&sur.block_input(l, j), rng))
        .collect()
}

/// `Σ_j -log o_j[t_j]` summed over each sample's targets and averaged over
/// the batch, with per-block logit gradients.
fn block_cross_entropy(
    sur: &SurrogateModel,
    outs: &[(Matrix, Cache)],
    targets: &[Vec<&BitCode>],
) -> Result<(f64, Vec<Matrix>)> {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outs.len());
    for (j, (logits, _)) in outs.iter().enumerate() {
        let mut g = Matrix::zeros(logits.rows(), logits.cols());
        for (r, ts) in targets.iter().enumerate() {
            let p = softmax(logits.row(r));
            let row = g.row_mut(r);
            for t in ts {
                let idx = sur.block_index(t, j);
                loss -= p[idx].max(f64::MIN_POSITIVE).ln();
                for (k, (gv, pv)) in row.iter_mut().zip(&p).enumerate() {
                    *gv += (pv - if k == idx { 1.0 } else { 0.0 }) / n;
                }
            }
        }
        grads.push(g);
    }
    Ok((loss / n, grads))
}

/// Gradient with respect to `ℓ` of the surrogate loss, assembled from the
/// per-block input gradients.
fn grad_through_surrogate(
    sur: &SurrogateModel,
    outs: &[(Matrix, Cache)],
    logit_grads: &[Matrix],
    rows: usize,
) -> Result<(Vec<Gradients>, Matrix)> {
    let mut dl = Matrix::zeros(rows, sur.bits());
    let mut param_grads = Vec::with_capacity(outs.len());
    for (j, ((_, cache), g)) in outs.iter().zip(logit_grads).enumerate() {
        let (pg, dx) = sur.nets()[j].backward(cache, g)?;
        let o = sur.block_offset(j);
        for r in 0..rows {
            dl.row_mut(r)[o..o + dx.cols()].copy_from_slice(dx.row(r));
        }
        param_grads.push(pg);
    }
    Ok((param_grads, dl))
}

/// Surrogate loss `L_θ(ℓ)` and `∂L_θ/∂ℓ` for fixed π and a fixed dropout
/// stream.
pub fn surrogate_loss_grad<R: Rng + ?Sized>(
    sur: &SurrogateModel,
    l: &Matrix,
    targets: &[Vec<&BitCode>],
    rng: &mut R,
) -> Result<(f64, Matrix)> {
    let outs = surrogate_forward(sur, l, rng)?;
    let (loss, lg) = block_cross_entropy(sur, &outs, targets)?;
    let (_, dl) = grad_through_surrogate(sur, &outs, &lg, l.rows())?;
    Ok((loss, dl))
}

fn bce_loss_grad(l: &Matrix, targets: &[Vec<&BitCode>]) -> (f64, Matrix) {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(l.rows(), l.cols());
    for (r, ts) in targets.iter().enumerate() {
        let lr = l.row(r).to_vec();
        let row = g.row_mut(r);
        for t in ts {
            for (k, &x) in lr.iter().enumerate() {
                let y = if t.bit(k) { 1.0 } else { 0.0 };
                // log(1 + e^x) - y x, stable form.
                loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
                row[k] += (crate::nn::sigmoid(x) - y) / n;
            }
        }
    }
    (loss / n, g)
}

/// One mini-batch of losses and gradients. The surrogate must be in train
/// mode for dropout to be active.
pub fn compute_step<R: Rng + ?Sized>(
    model: &ToyHashModel,
    sur: &SurrogateModel,
    x: &Matrix,
    labels: &[LabelSet],
    centers: &[BitCode],
    objective: Objective,
    rng: &mut R,
) -> Result<StepOutput> {
    if labels.len() != x.rows() || labels.is_empty() {
        return invalid("one label set per batch row required");
    }
    check_centers(labels, centers, model.bits())?;
    let (l, cache_theta) = model.net.forward(x, rng)?;
    if l.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite hash output".into()));
    }
    let outs = surrogate_forward(sur, &l, rng)?;

    let own: Vec<BitCode> = (0..l.rows())
        .map(|r| crate::codes::binarize(l.row(r)))
        .collect::<Result<_>>()?;
    let own_targets: Vec<Vec<&BitCode>> = own.iter().map(|c| vec![c]).collect();
    let (loss_pi, lg_pi) = block_cross_entropy(sur, &outs, &own_targets)?;
    let (grads_pi, _) = grad_through_surrogate(sur, &outs, &lg_pi, l.rows())?;

    let center_targets: Vec<Vec<&BitCode>> = labels
        .iter()
        .map(|s| s.labels().iter().map(|&c| &centers[c as usize]).collect())
        .collect();
    let (loss_theta, dl) = match objective {
        Objective::Surrogate => {
            let (loss, lg) = block_cross_entropy(sur, &outs, &center_targets)?;
            let (_, dl) = grad_through_surrogate(sur, &outs, &lg, l.rows())?;
            (loss, dl)
        }
        Objective::Bce => bce_loss_grad(&l, &center_targets),
    };
    if !loss_pi.is_finite() || !loss_theta.is_finite() {
        return Err(Error::Divergence(format!(
            "losses L_pi = {loss_pi}, L_theta = {loss_theta}"
        )));
    }
    let (grads_theta, _) = model.net.backward(&cache_theta, &dl)?;
    Ok(StepOutput {
        loss_pi,
        loss_theta,
        grads_pi,
        grads_theta,
    })
}

/// Hash base and queries; mAP over the whole base and the bound ratio of the
/// base codes.
pub fn trace_bound(model: &ToyHashModel, data: &SyntheticData, percentile: f64) -> Result<(f64, f64)> {
    let base_codes = model.hash(&data.rows(&data.base))?;
    let query_codes = model.hash(&data.rows(&data.queries))?;
    let base_labels = data.labels_of(&data.base);
    let summary = map_at_r(
        &query_codes,
        &data.labels_of(&data.queries),
        &base_codes,
        &base_labels,
        base_codes.len(),
    )?;
    let stats = class_stats(&base_codes, &base_labels, Percentile::new(percentile)?)?;
    Ok((summary.map.unwrap_or(0.0), stats.ratio))
}

/// Trains `model` and `sur` on the base split, recording one trace row per
/// epoch.
pub fn train_supervised(
    model: &mut ToyHashModel,
    sur: &mut SurrogateModel,
    centers: &CenterSet,
    data: &SyntheticData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    if sur.bits() != model.bits() || centers.bits() != model.bits() {
        return Err(Error::InvalidConfig("hash model, surrogate and centers disagree on h".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    Percentile::new(cfg.percentile)?;
    check_centers(&data.labels, centers.centers(), model.bits())?;
    let mut adam_theta = AdamState::new(
        &model.net,
        AdamConfig {
            lr: cfg.lr_theta,
            ..Default::default()
        },
    );
    let mut adam_pi: Vec<AdamState> = sur
        .nets()
        .iter()
        .map(|n| {
            AdamState::new(
                n,
                AdamConfig {
                    lr: cfg.lr_pi,
                    ..Default::default()
                },
            )
        })
        .collect();
    let mut order_rng = rng::stream(seed, "train-order", 0);
    let mut drop_rng = rng::stream(seed, "train-dropout", 0);
    let mut order = data.base.clone();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        model.net.set_mode(Mode::Train);
        sur.set_mode(Mode::Train);
        adam_theta.config.lr = decayed_lr(cfg.lr_theta, epoch, cfg.decay_every);
        for a in &mut adam_pi {
            a.config.lr = decayed_lr(cfg.lr_pi, epoch, cfg.decay_every);
        }
        order.shuffle(&mut order_rng);
        let (mut sum_pi, mut sum_theta) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let x = data.rows(chunk);
            let labels = data.labels_of(chunk);
            let step = compute_step(model, sur, &x, &labels, centers.centers(), cfg.objective, &mut drop_rng)?;
            for ((net, g), a) in sur.nets_mut().iter_mut().zip(&step.grads_pi).zip(&mut adam_pi) {
                adam_step(net, g, a)?;
            }
            adam_step(&mut model.net, &step.grads_theta, &mut adam_theta)?;
            sum_pi += step.loss_pi * chunk.len() as f64;
            sum_theta += step.loss_theta * chunk.len() as f64;
        }
        sur.set_mode(Mode::Eval);
        let (map, ratio) = trace_bound(model, data, cfg.percentile)?;
        let n = order.len() as f64;
        trace.records.push(TraceRecord {
            epoch: epoch + 1,
            loss_pi: sum_pi / n,
            loss_theta: sum_theta / n,
            map,
            ratio,
            min_pairwise: centers.min_pairwise(),
        });
    }
    sur.set_mode(Mode::Eval);
    Ok(trace)
}
