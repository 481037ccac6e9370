//! Multivariate Bernoulli joint tables and the blocked surrogate estimator.
//!
//! A table over `{-1,+1}^h` has `2^h` entries indexed by
//! [`code_to_index`](crate::codes::code_to_index). The surrogate splits the
//! `h` bits into consecutive blocks, models each block with its own
//! categorical network and assembles the joint as the product of blocks.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::serialize_extended_f64;
use crate::codes::{code_to_index, index_to_code, BitCode, MAX_TABLE_BITS};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    adam_step, softmax, softmax_cross_entropy_batch, AdamConfig, AdamState, DenseNet, LayerSpec,
    Matrix, Mode,
};
use crate::rng;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvbDistribution {
    bits: usize,
    probs: Vec<f64>,
}

fn check_width(bits: usize) -> Result<()> {
    if bits == 0 {
        return invalid("zero-bit distribution");
    }
    if bits > MAX_TABLE_BITS {
        return Err(Error::UnsupportedWidth {
            bits,
            max: MAX_TABLE_BITS,
        });
    }
    Ok(())
}

impl MvbDistribution {
    pub fn new(bits: usize, probs: Vec<f64>) -> Result<Self> {
        check_width(bits)?;
        if probs.len() != 1 << bits {
            return invalid(format!("{} entries for a {bits}-bit table", probs.len()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return invalid("probabilities must be finite and non-negative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return invalid(format!("probabilities sum to {total}"));
        }
        Ok(Self { bits, probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(bits: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return invalid("weights must have a positive finite sum");
        }
        Self::new(bits, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn point_mass(bits: usize, index: usize) -> Result<Self> {
        check_width(bits)?;
        if index >= 1 << bits {
            return invalid(format!("index {index} outside a {bits}-bit table"));
        }
        let mut p = vec![0.0; 1 << bits];
        p[index] = 1.0;
        Ok(Self { bits, probs: p })
    }

    pub fn uniform(bits: usize) -> Result<Self> {
        check_width(bits)?;
        let n = 1usize << bits;
        Ok(Self {
            bits,
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// Symmetric Dirichlet(1) draw: normalized unit exponentials.
    pub fn dirichlet<R: Rng + ?Sized>(bits: usize, rng: &mut R) -> Result<Self> {
        check_width(bits)?;
        let w: Vec<f64> = (0..1usize << bits).map(|_| rng.sample(Exp1)).collect();
        Self::from_weights(bits, w)
    }

    /// Independent bits with `P(b_k = +1) = marginals[k]`.
    pub fn product_of_marginals(marginals: &[f64]) -> Result<Self> {
        let bits = marginals.len();
        check_width(bits)?;
        if marginals.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return invalid("marginals must lie in [0, 1]");
        }
        let probs = (0..1usize << bits)
            .map(|i| {
                marginals
                    .iter()
                    .enumerate()
                    .map(|(k, &m)| if i >> k & 1 == 1 { m } else { 1.0 - m })
                    .product()
            })
            .collect();
        Ok(Self { bits, probs })
    }

    /// Joint of independent blocks: block `j` covers the next
    /// `log2(tables[j].len())` bits, starting from bit 1.
    pub fn product_of_blocks(tables: &[&MvbDistribution]) -> Result<Self> {
        let bits: usize = tables.iter().map(|t| t.bits).sum();
        check_width(bits)?;
        let mut probs = vec![1.0];
        let mut width = 0;
        for t in tables {
            let mut next = vec![0.0; probs.len() << t.bits];
            for (hi, &q) in t.probs.iter().enumerate() {
                for (lo, &p) in probs.iter().enumerate() {
                    next[hi << width | lo] = p * q;
                }
            }
            probs = next;
            width += t.bits;
        }
        Ok(Self { bits, probs })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, code: &BitCode) -> Result<f64> {
        if code.len() != self.bits {
            return invalid("code length does not match the table");
        }
        Ok(self.probs[code_to_index(code)?])
    }

    /// `P(b_k = +1)` for each bit.
    pub fn marginals(&self) -> Vec<f64> {
        (0..self.bits)
            .map(|k| {
                self.probs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i >> k & 1 == 1)
                    .map(|(_, p)| p)
                    .sum()
            })
            .collect()
    }

    /// Marginal table of bits `start..start + len` (zero-based).
    pub fn block_marginal(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.bits {
            return invalid("block outside the table");
        }
        let mut probs = vec![0.0; 1 << len];
        let mask = (1usize << len) - 1;
        for (i, &p) in self.probs.iter().enumerate() {
            probs[i >> start & mask] += p;
        }
        Ok(Self { bits: len, probs })
    }
}

/// `0.9 · (P_1 ⊗ … ⊗ P_u) + 0.1 · Q`, each `P_j` and `Q` a Dirichlet(1)
/// draw. Strong within-block correlation, weak cross-block correlation.
pub fn block_mixture<R: Rng + ?Sized>(block_bits: &[usize], rng: &mut R) -> Result<MvbDistribution> {
    let blocks = block_bits
        .iter()
        .map(|&b| MvbDistribution::dirichlet(b, rng))
        .collect::<Result<Vec<_>>>()?;
    let prod = MvbDistribution::product_of_blocks(&blocks.iter().collect::<Vec<_>>())?;
    let q = MvbDistribution::dirichlet(prod.bits, rng)?;
    let w = prod
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| 0.9 * a + 0.1 * b)
        .collect();
    MvbDistribution::from_weights(prod.bits, w)
}

/// Inverse-CDF sampling; deterministic per seed.
pub fn mvb_sample(dist: &MvbDistribution, n: usize, seed: u64) -> Vec<BitCode> {
    let mut r = rng::stream(seed, "mvb-sample", 0);
    sample_with(dist, n, &mut r)
}

pub fn sample_with<R: Rng + ?Sized>(dist: &MvbDistribution, n: usize, rng: &mut R) -> Vec<BitCode> {
    let mut cdf = Vec::with_capacity(dist.probs.len());
    let mut acc = 0.0;
    for &p in &dist.probs {
        acc += p;
        cdf.push(acc);
    }
    let last_positive = dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(last_positive);
            index_to_code(i, dist.bits).expect("index below 2^h")
        })
        .collect()
}

/// `Σ p_i ln(p_i / q_i)` in nats; `+inf` when `q_i = 0 < p_i`.
pub fn kl_divergence(p: &MvbDistribution, q: &MvbDistribution) -> Result<f64> {
    if p.bits != q.bits {
        return invalid(format!("{}-bit vs {}-bit tables", p.bits, q.bits));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (a / b).ln();
    }
    Ok(kl)
}

/// Product of empirical per-bit marginals.
pub fn naive_estimate(samples: &[BitCode]) -> Result<MvbDistribution> {
    let first = samples.first().ok_or(Error::EmptyList)?;
    let h = first.len();
    check_width(h)?;
    if samples.iter().any(|s| s.len() != h) {
        return invalid("samples differ in length");
    }
    let n = samples.len() as f64;
    let marginals: Vec<f64> = (0..h)
        .map(|k| samples.iter().filter(|s| s.bit(k)).count() as f64 / n)
        .collect();
    MvbDistribution::product_of_marginals(&marginals)
}

/// Empirical frequency table.
pub fn empirical(samples: &[BitCode]) -> Result<MvbDistribution> {
    let first = samples.first().ok_or(Error::EmptyList)?;
    check_width(first.len())?;
    let mut counts = vec![0.0; 1 << first.len()];
    for s in samples {
        if s.len() != first.len() {
            return invalid("samples differ in length");
        }
        counts[code_to_index(s)?] += 1.0;
    }
    MvbDistribution::from_weights(first.len(), counts)
}

/// Block sizes for `h` bits: `u` blocks of `h / u` bits, the last taking the
/// remainder. Without `u`, blocks of 8 bits and a final remainder block.
pub fn block_layout(h: usize, u: Option<usize>) -> Result<Vec<usize>> {
    if h == 0 {
        return invalid("zero-bit code");
    }
    let sizes = match u {
        Some(0) => return invalid("block count must be at least 1"),
        Some(u) if u > h => return invalid(format!("{u} blocks for {h} bits")),
        Some(u) => {
            let base = h / u;
            let mut s = vec![base; u - 1];
            s.push(h - base * (u - 1));
            s
        }
        None => {
            let mut s = vec![8; h / 8];
            if h % 8 != 0 {
                s.push(h % 8);
            }
            s
        }
    };
    if let Some(&b) = sizes.iter().find(|&&b| b > MAX_TABLE_BITS) {
        return Err(Error::UnsupportedWidth {
            bits: b,
            max: MAX_TABLE_BITS,
        });
    }
    Ok(sizes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout: 0.5,
        }
    }
}

/// `P_π`: one categorical network per block. Block `j` reads its own slice
/// of the real-valued input and outputs `2^{block_bits}` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    bits: usize,
    blocks: Vec<usize>,
    offsets: Vec<usize>,
    nets: Vec<DenseNet>,
}

impl SurrogateModel {
    /// Per-block nets `b → hidden`, SiLU, dropout, `hidden → 2^b`, each
    /// initialized from its own stream.
    pub fn new(bits: usize, u: Option<usize>, cfg: &SurrogateConfig, seed: u64) -> Result<Self> {
        let blocks = block_layout(bits, u)?;
        let nets = blocks
            .iter()
            .enumerate()
            .map(|(j, &b)| {
                let specs = [
                    LayerSpec::Affine {
                        inputs: b,
                        outputs: cfg.hidden,
                    },
                    LayerSpec::Silu,
                    LayerSpec::Dropout { rate: cfg.dropout },
                    LayerSpec::Affine {
                        inputs: cfg.hidden,
                        outputs: 1 << b,
                    },
                ];
                DenseNet::new(&specs, &mut rng::stream(seed, "surrogate-init", j as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_nets(bits, nets)
    }

    /// Assemble from existing block nets (e.g. a checkpoint); block widths are
    /// read from the nets' input widths.
    pub fn from_nets(bits: usize, nets: Vec<DenseNet>) -> Result<Self> {
        let blocks: Vec<usize> = nets.iter().map(DenseNet::input_dim).collect();
        if blocks.iter().sum::<usize>() != bits {
            return invalid("block widths do not add up to the code length");
        }
        if nets.iter().zip(&blocks).any(|(n, &b)| n.output_dim() != 1 << b) {
            return invalid("block net output width must be 2^block_bits");
        }
        let offsets = blocks
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect();
        Ok(Self {
            bits,
            blocks,
            offsets,
            nets,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn nets(&self) -> &[DenseNet] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [DenseNet] {
        &mut self.nets
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(DenseNet::param_count).sum()
    }

    /// Total logits across blocks, `Σ 2^{b_j}`.
    pub fn output_width(&self) -> usize {
        self.blocks.iter().map(|&b| 1usize << b).sum()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.nets.iter_mut().for_each(|n| n.set_mode(mode));
    }

    /// Columns of `x` belonging to block `j`.
    pub fn block_input(&self, x: &Matrix, j: usize) -> Matrix {
        let (o, b) = (self.offsets[j], self.blocks[j]);
        let mut out = Matrix::zeros(x.rows(), b);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[o..o + b]);
        }
        out
    }

    /// Index of block `j` of `code` in that block's table.
    pub fn block_index(&self, code: &BitCode, j: usize) -> usize {
        let o = self.offsets[j];
        (0..self.blocks[j]).fold(0, |acc, k| acc | usize::from(code.bit(o + k)) << k)
    }

    pub fn block_offset(&self, j: usize) -> usize {
        self.offsets[j]
    }

    /// Eval-mode per-block softmax tables for each input row:
    /// `result[j][row]` is block `j`'s distribution.
    pub fn block_tables(&self, x: &Matrix) -> Result<Vec<Vec<Vec<f64>>>> {
        if x.cols() != self.bits {
            return invalid(format!("input width {} for a {}-bit surrogate", x.cols(), self.bits));
        }
        self.nets
            .par_iter()
            .enumerate()
            .map(|(j, net)| {
                let logits = net.predict(&self.block_input(x, j))?;
                Ok((0..logits.rows()).map(|r| softmax(logits.row(r))).collect())
            })
            .collect()
    }
}

pub fn lift_codes(codes: &[BitCode]) -> Result<Matrix> {
    let h = codes.first().map_or(0, BitCode::len);
    Matrix::from_vec(codes.len(), h, codes.iter().flat_map(BitCode::to_reals).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiply the learning rate by 0.1 every this many epochs.
    pub decay_every: Option<usize>,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 64,
            lr: 1e-3,
            decay_every: None,
        }
    }
}

pub(crate) fn decayed_lr(base: f64, epoch: usize, decay_every: Option<usize>) -> f64 {
    match decay_every {
        Some(k) if k > 0 => base * 0.1f64.powi((epoch / k) as i32),
        _ => base,
    }
}

/// Mean training loss per epoch, one series per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateLog {
    pub block_losses: Vec<Vec<f64>>,
}

/// MLE of each block net: softmax cross-entropy of row `r` of `inputs`
/// against the block index of `targets[r]`. Blocks train independently and
/// in parallel, each on its own shuffling stream.
pub fn surrogate_train(
    model: &mut SurrogateModel,
    inputs: &Matrix,
    targets: &[BitCode],
    cfg: &SurrogateTrainConfig,
    seed: u64,
) -> Result<SurrogateLog> {
    if inputs.rows() != targets.len() || targets.is_empty() {
        return invalid("need one non-empty target per input row");
    }
    if inputs.cols() != model.bits || targets.iter().any(|t| t.len() != model.bits) {
        return invalid(format!("inputs and targets must be {}-bit", model.bits));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if inputs.data().iter().any(|v| !v.is_finite()) {
        return invalid("non-finite surrogate input");
    }
    let block_inputs: Vec<Matrix> = (0..model.blocks.len()).map(|j| model.block_input(inputs, j)).collect();
    let block_targets: Vec<Vec<usize>> = (0..model.blocks.len())
        .map(|j| targets.iter().map(|t| model.block_index(t, j)).collect())
        .collect();
    let results: Vec<Result<Vec<f64>>> = model
        .nets
        .par_iter_mut()
        .enumerate()
        .map(|(j, net)| {
            train_block(net, &block_inputs[j], &block_targets[j], cfg, seed, j as u64)
        })
        .collect();
    Ok(SurrogateLog {
        block_losses: results.into_iter().collect::<Result<_>>()?,
    })
}

fn gather_rows(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

fn train_block(
    net: &mut DenseNet,
    x: &Matrix,
    targets: &[usize],
    cfg: &SurrogateTrainConfig,
    seed: u64,
    block: u64,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    net.set_mode(Mode::Train);
    let mut order_rng = rng::stream(seed, "surrogate-order", block);
    let mut drop_rng = rng::stream(seed, "surrogate-dropout", block);
    let mut adam = AdamState::new(
        net,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.config.lr = decayed_lr(cfg.lr, epoch, cfg.decay_every);
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let xb = gather_rows(x, chunk);
            let tb: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (logits, cache) = net.forward(&xb, &mut drop_rng)?;
            let (loss, grad) = softmax_cross_entropy_batch(&logits, &tb)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("block {block} loss is {loss}")));
            }
            total += loss * chunk.len() as f64;
            let (g, _) = net.backward(&cache, &grad)?;
            adam_step(net, &g, &mut adam)?;
        }
        losses.push(total / x.rows() as f64);
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}

/// Mean over input rows of the outer product of per-block softmaxes.
pub fn surrogate_predict(model: &SurrogateModel, x: &Matrix) -> Result<MvbDistribution> {
    check_width(model.bits)?;
    if x.rows() == 0 {
        return Err(Error::EmptyList);
    }
    let tables = model.block_tables(x)?;
    let mut joint = vec![0.0; 1 << model.bits];
    let mut row_joint = Vec::with_capacity(joint.len());
    for r in 0..x.rows() {
        row_joint.clear();
        row_joint.push(1.0);
        for (j, block) in tables.iter().enumerate() {
            let width = model.offsets[j];
            let q = &block[r];
            let mut next = vec![0.0; row_joint.len() * q.len()];
            for (hi, &qv) in q.iter().enumerate() {
                for (lo, &pv) in row_joint.iter().enumerate() {
                    next[hi << width | lo] = pv * qv;
                }
            }
            row_joint = next;
        }
        joint.iter_mut().zip(&row_joint).for_each(|(a, b)| *a += b);
    }
    let n = x.rows() as f64;
    MvbDistribution::from_weights(model.bits, joint.into_iter().map(|v| v / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub bits: usize,
    pub blocks: Option<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub train: SurrogateTrainConfig,
    pub surrogate: SurrogateConfig,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(bits: usize, seed: u64) -> Self {
        Self {
            bits,
            blocks: None,
            train_samples: 10_000,
            eval_samples: 100,
            train: SurrogateTrainConfig::default(),
            surrogate: SurrogateConfig::default(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub bits: usize,
    pub blocks: Vec<usize>,
    pub generator: String,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub surrogate_kl: f64,
    #[serde(serialize_with = "serialize_extended_f64")]
    pub naive_kl: f64,
    pub block_losses: Vec<Vec<f64>>,
    pub truth: Vec<f64>,
    pub surrogate: Vec<f64>,
}

/// The toy estimation protocol: draw a ground-truth table, sample training
/// codes, train the surrogate, and compare both estimators by KL from the
/// truth.
///
/// Ground truth is Dirichlet(1) over the full table when there is a single
/// block, otherwise [`block_mixture`] over the block layout. Each training
/// target is paired with an input drawn as an independent permutation of the
/// same samples, so the network cannot copy its input; evaluation inputs are
/// fresh samples.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    check_width(cfg.bits)?;
    if cfg.train_samples == 0 || cfg.eval_samples == 0 {
        return Err(Error::InvalidConfig("sample counts must be positive".into()));
    }
    let layout = block_layout(cfg.bits, cfg.blocks)?;
    let mut truth_rng = rng::stream(cfg.seed, "mvb-truth", 0);
    let (truth, generator) = if layout.len() == 1 {
        (MvbDistribution::dirichlet(cfg.bits, &mut truth_rng)?, "dirichlet(1)")
    } else {
        (block_mixture(&layout, &mut truth_rng)?, "0.9*blockwise-dirichlet(1)+0.1*dirichlet(1)")
    };
    let train = sample_with(&truth, cfg.train_samples, &mut rng::stream(cfg.seed, "mvb-train", 0));
    let eval = sample_with(&truth, cfg.eval_samples, &mut rng::stream(cfg.seed, "mvb-eval", 0));
    let mut paired = train.clone();
    {
        use rand::seq::SliceRandom;
        paired.shuffle(&mut rng::stream(cfg.seed, "mvb-pair", 0));
    }
    let mut model = SurrogateModel::new(cfg.bits, cfg.blocks, &cfg.surrogate, cfg.seed)?;
    let log = surrogate_train(&mut model, &lift_codes(&paired)?, &train, &cfg.train, cfg.seed)?;
    let est = surrogate_predict(&model, &lift_codes(&eval)?)?;
    let naive = naive_estimate(&train)?;
    Ok(ToyReport {
        bits: cfg.bits,
        blocks: layout,
        generator: generator.into(),
        surrogate_kl: kl_divergence(&truth, &est)?,
        naive_kl: kl_divergence(&truth, &naive)?,
        block_losses: log.block_losses,
        truth: truth.probs,
        surrogate: est.probs,
    })
}
