//! Small dense networks with hand-written reverse-mode gradients and Adam.
//!
//! Affine weights are stored `in × out`, row-major, so a batch `X` (rows are
//! samples) maps to `X·W + b`. Dropout is inverted: kept units are scaled by
//! `1 / (1 - rate)` at train time and eval mode is the identity.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major dense matrix; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!("{} values for a {rows}×{cols} matrix", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { inputs: usize, outputs: usize },
    Silu,
    Dropout { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Affine {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Silu,
    Dropout {
        rate: f64,
    },
}

impl Layer {
    fn spec(&self) -> LayerSpec {
        match *self {
            Layer::Affine { inputs, outputs, .. } => LayerSpec::Affine { inputs, outputs },
            Layer::Silu => LayerSpec::Silu,
            Layer::Dropout { rate } => LayerSpec::Dropout { rate },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Activations saved by a forward pass, tied to the parameter generation it
/// was computed with.
#[derive(Clone, Debug)]
pub struct Cache {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Dropout multipliers per layer (`None` for other layers or eval mode).
    masks: Vec<Option<Vec<f64>>>,
}

/// Gradients for each affine layer, `(weights, bias)` in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b))
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= k);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += o);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    mode: Mode,
    generation: u64,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            match *spec {
                LayerSpec::Affine { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return invalid("affine layer with zero width");
                    }
                    if width.is_some_and(|w| w != inputs) {
                        return invalid(format!(
                            "affine layer expects {inputs} inputs after width {}",
                            width.unwrap()
                        ));
                    }
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    let weights = (0..inputs * outputs)
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect();
                    layers.push(Layer::Affine {
                        inputs,
                        outputs,
                        weights,
                        bias: vec![0.0; outputs],
                    });
                    width = Some(outputs);
                }
                LayerSpec::Silu => layers.push(Layer::Silu),
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return invalid(format!("dropout rate {rate} outside [0, 1)"));
                    }
                    layers.push(Layer::Dropout { rate });
                }
            }
        }
        if width.is_none() {
            return invalid("network has no affine layer");
        }
        Ok(Self {
            layers,
            mode: Mode::Train,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> usize {
        self.affine_dims().next().expect("validated in new").0
    }

    pub fn output_dim(&self) -> usize {
        self.affine_dims().last().expect("validated in new").1
    }

    fn affine_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::Affine { inputs, outputs, .. } => Some((*inputs, *outputs)),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.affine_dims().map(|(i, o)| i * o + o).sum()
    }

    /// Flat parameter view: each affine layer's weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            if let Layer::Affine { weights, bias, .. } = l {
                out.extend_from_slice(weights);
                out.extend_from_slice(bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return invalid(format!(
                "{} parameters for a net with {}",
                flat.len(),
                self.param_count()
            ));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite parameter");
        }
        let mut pos = 0;
        for l in &mut self.layers {
            if let Layer::Affine { weights, bias, .. } = l {
                let (nw, nb) = (weights.len(), bias.len());
                weights.copy_from_slice(&flat[pos..pos + nw]);
                pos += nw;
                bias.copy_from_slice(&flat[pos..pos + nb]);
                pos += nb;
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .affine_dims()
                .map(|(i, o)| (vec![0.0; i * o], vec![0.0; o]))
                .collect(),
        }
    }

    /// Forward pass over a batch. Dropout draws from `rng` in train mode only.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Result<(Matrix, Cache)> {
        if x.cols != self.input_dim() {
            return invalid(format!(
                "input width {} does not match {}",
                x.cols,
                self.input_dim()
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = match layer {
                Layer::Affine {
                    inputs: n_in,
                    outputs,
                    weights,
                    bias,
                } => {
                    let mut out = Matrix::zeros(cur.rows, *outputs);
                    for r in 0..cur.rows {
                        let o = out.row_mut(r);
                        o.copy_from_slice(bias);
                        for (i, &xi) in cur.row(r).iter().enumerate().take(*n_in) {
                            if xi == 0.0 {
                                continue;
                            }
                            let w = &weights[i * outputs..(i + 1) * outputs];
                            for (oj, wj) in o.iter_mut().zip(w) {
                                *oj += xi * wj;
                            }
                        }
                    }
                    masks.push(None);
                    out
                }
                Layer::Silu => {
                    masks.push(None);
                    let mut out = cur.clone();
                    out.data.iter_mut().for_each(|v| *v = silu(*v));
                    out
                }
                Layer::Dropout { rate } => {
                    if self.mode == Mode::Train && *rate > 0.0 {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..cur.data.len())
                            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                            .collect();
                        let mut out = cur.clone();
                        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        masks.push(Some(mask));
                        out
                    } else {
                        masks.push(None);
                        cur.clone()
                    }
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        Ok((
            cur,
            Cache {
                generation: self.generation,
                inputs,
                masks,
            },
        ))
    }

    /// Eval-mode forward without dropout randomness.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut eval = self.clone();
        eval.mode = Mode::Eval;
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        eval.forward(x, &mut unused).map(|(out, _)| out)
    }

    /// Gradients of `Σ_rows dout · output` w.r.t. parameters and input. Any
    /// averaging over the batch belongs in `dout`.
    pub fn backward(&self, cache: &Cache, dout: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.generation != self.generation {
            return Err(Error::InvalidState(
                "cache was computed before the last parameter update".into(),
            ));
        }
        let rows = cache.inputs.first().map_or(0, |m| m.rows);
        if dout.rows != rows || dout.cols != self.output_dim() {
            return invalid("upstream gradient shape does not match the forward pass");
        }
        let mut grads = self.zero_gradients();
        let mut slot = grads.layers.len();
        let mut g = dout.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[idx];
            g = match layer {
                Layer::Affine {
                    inputs: n_in,
                    outputs,
                    weights,
                    ..
                } => {
                    slot -= 1;
                    let (gw, gb) = &mut grads.layers[slot];
                    let mut gin = Matrix::zeros(rows, *n_in);
                    for r in 0..rows {
                        let gr = g.row(r);
                        for (b, &v) in gb.iter_mut().zip(gr) {
                            *b += v;
                        }
                        let xr = input.row(r);
                        let gi = gin.row_mut(r);
                        for i in 0..*n_in {
                            let w = &weights[i * outputs..(i + 1) * outputs];
                            let gwi = &mut gw[i * outputs..(i + 1) * outputs];
                            let xi = xr[i];
                            let mut acc = 0.0;
                            for j in 0..*outputs {
                                gwi[j] += xi * gr[j];
                                acc += w[j] * gr[j];
                            }
                            gi[i] = acc;
                        }
                    }
                    gin
                }
                Layer::Silu => {
                    let mut out = g;
                    out.data
                        .iter_mut()
                        .zip(&input.data)
                        .for_each(|(v, &x)| *v *= silu_grad(x));
                    out
                }
                Layer::Dropout { .. } => match &cache.masks[idx] {
                    Some(mask) => {
                        let mut out = g;
                        out.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                        out
                    }
                    None => g,
                },
            };
        }
        Ok((grads, g))
    }

    fn bump(&mut self) {
        self.generation += 1;
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax - one_hot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return invalid(format!("target {target} outside {} logits", logits.len()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean cross-entropy over rows; the returned gradient is already divided by
/// the batch size.
pub fn softmax_cross_entropy_batch(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows {
        return invalid("one target per row required");
    }
    let n = logits.rows as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.row(r), t)?;
        total += l;
        grad.row_mut(r).iter_mut().zip(g).for_each(|(d, v)| *d = v / n);
    }
    Ok((total / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let n = net.param_count();
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update. Invalidates outstanding caches.
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let count: usize = grads.layers.iter().map(|(w, b)| w.len() + b.len()).sum();
    if count != state.m.len() || count != net.param_count() {
        return invalid("gradient shape does not match the network");
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mut k = 0;
    let mut slot = 0;
    for layer in &mut net.layers {
        if let Layer::Affine { weights, bias, .. } = layer {
            let (gw, gb) = &grads.layers[slot];
            slot += 1;
            for (p, g) in weights.iter_mut().chain(bias.iter_mut()).zip(gw.iter().chain(gb)) {
                state.m[k] = c.beta1 * state.m[k] + (1.0 - c.beta1) * g;
                state.v[k] = c.beta2 * state.v[k] + (1.0 - c.beta2) * g * g;
                let mhat = state.m[k] / bc1;
                let vhat = state.v[k] / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
                k += 1;
            }
        }
    }
    net.bump();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    seed: u64,
    nets: Vec<NetHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    name: String,
    layers: Vec<LayerSpec>,
}

/// Checkpoint layout: `u32` LE header length, JSON header (layer shapes per
/// named net and the seed), then every net's parameters as LE `f64` in
/// [`DenseNet::params`] order.
pub fn write_checkpoint<W: Write>(mut w: W, seed: u64, nets: &[(&str, &DenseNet)]) -> Result<()> {
    let header = CheckpointHeader {
        seed,
        nets: nets
            .iter()
            .map(|(name, n)| NetHeader {
                name: (*name).to_string(),
                layers: n.specs(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, n) in nets {
        for v in n.params() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the seed and the named nets, in eval mode.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(u64, Vec<(String, DenseNet)>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(header.nets.len());
    let mut dummy = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for nh in header.nets {
        let mut net = DenseNet::new(&nh.layers, &mut dummy)
            .map_err(|e| Error::Format(format!("checkpoint layers: {e}")))?;
        let mut flat = vec![0.0; net.param_count()];
        let mut buf = [0u8; 8];
        for v in &mut flat {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated checkpoint parameters".into()))?;
            *v = f64::from_le_bytes(buf);
        }
        net.set_params(&flat)?;
        net.set_mode(Mode::Eval);
        out.push((nh.name, net));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((header.seed, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(net: &mut DenseNet, r: &mut ChaCha8Rng) {
        let p: Vec<f64> = (0..net.param_count()).map(|_| r.random_range(-0.8..0.8)).collect();
        net.set_params(&p).unwrap();
    }

    fn small_net(seed: u64) -> DenseNet {
        let specs = [
            LayerSpec::Affine { inputs: 8, outputs: 16 },
            LayerSpec::Silu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Affine { inputs: 16, outputs: 8 },
        ];
        let mut r = rng(seed);
        let mut n = DenseNet::new(&specs, &mut r).unwrap();
        randomize(&mut n, &mut r);
        n
    }

    /// Naive triple-loop reference, eval mode.
    fn reference_forward(net: &DenseNet, x: &Matrix) -> Matrix {
        let mut cur: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for l in net.layers() {
            match l {
                Layer::Affine { inputs, outputs, weights, bias } => {
                    cur = cur
                        .iter()
                        .map(|row| {
                            (0..*outputs)
                                .map(|j| bias[j] + (0..*inputs).map(|i| row[i] * weights[i * outputs + j]).sum::<f64>())
                                .collect()
                        })
                        .collect();
                }
                Layer::Silu => {
                    cur = cur.iter().map(|row| row.iter().map(|&v| v / (1.0 + (-v).exp())).collect()).collect()
                }
                Layer::Dropout { .. } => {}
            }
        }
        Matrix::from_rows(&cur).unwrap()
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut r = rng(1);
        let mut n = DenseNet::new(&[LayerSpec::Affine { inputs: 3, outputs: 2 }], &mut r).unwrap();
        n.set_params(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, -2.0]).unwrap();
        let out = n.predict(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5, -2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let n = small_net(2);
        assert!(n.predict(&Matrix::zeros(1, 7)).is_err());
        let mut r = rng(0);
        let bad = [
            LayerSpec::Affine { inputs: 2, outputs: 3 },
            LayerSpec::Affine { inputs: 4, outputs: 1 },
        ];
        assert!(DenseNet::new(&bad, &mut r).is_err());
    }

    #[test]
    fn rate_zero_train_equals_eval() {
        let mut r = rng(3);
        let specs = [
            LayerSpec::Affine { inputs: 4, outputs: 6 },
            LayerSpec::Dropout { rate: 0.0 },
            LayerSpec::Affine { inputs: 6, outputs: 2 },
        ];
        let n = DenseNet::new(&specs, &mut r).unwrap();
        let x = random_matrix(&mut r, 5, 4);
        let (train, _) = n.forward(&x, &mut r).unwrap();
        assert_eq!(train, n.predict(&x).unwrap());
    }

    #[test]
    fn forward_matches_reference() {
        let n = small_net(4);
        let x = random_matrix(&mut rng(5), 7, 8);
        let got = n.predict(&x).unwrap();
        let want = reference_forward(&n, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_deterministic_given_mask_seed() {
        let n = small_net(6);
        let x = random_matrix(&mut rng(7), 3, 8);
        let (a, _) = n.forward(&x, &mut rng(8)).unwrap();
        let (b, _) = n.forward(&x, &mut rng(8)).unwrap();
        assert_eq!(a, b);
    }

    /// Loss = Σ dout ⊙ output for a fixed dropout mask (same rng seed).
    fn probe_loss(net: &DenseNet, x: &Matrix, dout: &Matrix, mask_seed: u64) -> f64 {
        let (out, _) = net.forward(x, &mut rng(mask_seed)).unwrap();
        out.data().iter().zip(dout.data()).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(9);
        for mode in [Mode::Eval, Mode::Train] {
            let mut net = small_net(10);
            net.set_mode(mode);
            let x = random_matrix(&mut r, 4, 8);
            let dout = random_matrix(&mut r, 4, 8);
            let (_, cache) = net.forward(&x, &mut rng(11)).unwrap();
            let (grads, gx) = net.backward(&cache, &dout).unwrap();
            let analytic: Vec<f64> = grads.iter().copied().collect();
            let base = net.params();
            let step = 1e-4;
            let mut worst: f64 = 0.0;
            for k in 0..base.len() {
                let mut p = base.clone();
                p[k] += step;
                net.set_params(&p).unwrap();
                let up = probe_loss(&net, &x, &dout, 11);
                p[k] -= 2.0 * step;
                net.set_params(&p).unwrap();
                let down = probe_loss(&net, &x, &dout, 11);
                worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * step)));
            }
            net.set_params(&base).unwrap();
            for k in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[k] += step;
                let up = probe_loss(&net, &xp, &dout, 11);
                xp.data_mut()[k] -= 2.0 * step;
                let down = probe_loss(&net, &xp, &dout, 11);
                worst = worst.max(rel_err(gx.data()[k], (up - down) / (2.0 * step)));
            }
            assert!(worst < 1e-4, "{mode:?}: {worst}");
        }
    }

    #[test]
    fn linear_squared_error_closed_form() {
        // L = ½ Σ ||X W + b - Y||², ∂L/∂W = Xᵀ (XW + b - Y), ∂L/∂b = Σ rows.
        let mut r = rng(12);
        let mut net = DenseNet::new(&[LayerSpec::Affine { inputs: 3, outputs: 2 }], &mut r).unwrap();
        randomize(&mut net, &mut r);
        let x = random_matrix(&mut r, 5, 3);
        let y = random_matrix(&mut r, 5, 2);
        let (out, cache) = net.forward(&x, &mut r).unwrap();
        let mut resid = out.clone();
        resid.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a -= b);
        let (g, _) = net.backward(&cache, &resid).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..5).map(|s| x.row(s)[i] * resid.row(s)[j]).sum();
                assert!((g.layers[0].0[i * 2 + j] - want).abs() < 1e-12);
            }
        }
        for j in 0..2 {
            let want: f64 = (0..5).map(|s| resid.row(s)[j]).sum();
            assert!((g.layers[0].1[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let n = small_net(13);
        let x = random_matrix(&mut rng(14), 3, 8);
        let (_, cache) = n.forward(&x, &mut rng(15)).unwrap();
        let (g, gx) = n.backward(&cache, &Matrix::zeros(3, 8)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut n = small_net(16);
        let x = random_matrix(&mut rng(17), 2, 8);
        let (_, cache) = n.forward(&x, &mut rng(18)).unwrap();
        let (g, _) = n.backward(&cache, &Matrix::zeros(2, 8)).unwrap();
        let mut st = AdamState::new(&n, AdamConfig::default());
        adam_step(&mut n, &g, &mut st).unwrap();
        assert!(matches!(
            n.backward(&cache, &Matrix::zeros(2, 8)),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = softmax_cross_entropy(&[0.0; 256], 17).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        assert!((l - 5.545).abs() < 1e-3);
        let mut logits = vec![0.0; 4];
        logits[2] = 50.0;
        assert!(softmax_cross_entropy(&logits, 2).unwrap().0 < 1e-20);
        assert!(softmax_cross_entropy(&logits, 4).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut r = rng(19);
        let logits: Vec<f64> = (0..10).map(|_| r.random_range(-3.0..3.0)).collect();
        let (_, g) = softmax_cross_entropy(&logits, 3).unwrap();
        for k in 0..10 {
            let mut p = logits.clone();
            p[k] += 1e-5;
            let up = softmax_cross_entropy(&p, 3).unwrap().0;
            p[k] -= 2e-5;
            let down = softmax_cross_entropy(&p, 3).unwrap().0;
            assert!(rel_err(g[k], (up - down) / 2e-5) < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut n = small_net(20);
        let before = n.params();
        let mut st = AdamState::new(&n, AdamConfig::default());
        let g = n.zero_gradients();
        adam_step(&mut n, &g, &mut st).unwrap();
        assert_eq!(n.params(), before);
    }

    #[test]
    fn adam_constant_gradient_step_is_lr() {
        let mut n = DenseNet::new(&[LayerSpec::Affine { inputs: 1, outputs: 1 }], &mut rng(0)).unwrap();
        let mut st = AdamState::new(&n, AdamConfig::default());
        let g = Gradients { layers: vec![(vec![0.3], vec![-2.0])] };
        let mut prev = n.params();
        for _ in 0..500 {
            adam_step(&mut n, &g, &mut st).unwrap();
            let p = n.params();
            assert!(((prev[0] - p[0]) - 1e-3).abs() < 1e-3 * 1e-3);
            assert!(((p[1] - prev[1]) - 1e-3).abs() < 1e-3 * 1e-3);
            prev = p;
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut n = DenseNet::new(&[LayerSpec::Affine { inputs: 1, outputs: 1 }], &mut rng(0)).unwrap();
        let mut st = AdamState::new(&n, AdamConfig::default());
        let g = Gradients { layers: vec![(vec![f64::NAN], vec![0.0])] };
        assert!(matches!(adam_step(&mut n, &g, &mut st), Err(Error::Divergence(_))));
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // Fit y = 2x - 1 by least squares.
        let mut r = rng(21);
        let mut n = DenseNet::new(&[LayerSpec::Affine { inputs: 1, outputs: 1 }], &mut r).unwrap();
        let xs: Vec<f64> = (0..32).map(|i| i as f64 / 16.0 - 1.0).collect();
        let x = Matrix::from_vec(32, 1, xs.clone()).unwrap();
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        let mut st = AdamState::new(&n, cfg);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (out, cache) = n.forward(&x, &mut r).unwrap();
            let mut resid = out;
            let mut loss = 0.0;
            for (v, &xi) in resid.data_mut().iter_mut().zip(&xs) {
                *v -= 2.0 * xi - 1.0;
                loss += 0.5 * *v * *v / 32.0;
                *v /= 32.0;
            }
            losses.push(loss);
            let (g, _) = n.backward(&cache, &resid).unwrap();
            adam_step(&mut n, &g, &mut st).unwrap();
        }
        assert!(losses[50..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = small_net(22);
        let mut b = DenseNet::new(&[LayerSpec::Affine { inputs: 2, outputs: 3 }], &mut rng(1)).unwrap();
        b.set_mode(Mode::Eval);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 42, &[("a", &a), ("b", &b)]).unwrap();
        let (seed, nets) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(nets[0].0, "a");
        assert_eq!(nets[0].1.params(), a.params());
        assert_eq!(nets[1].1.specs(), b.specs());
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn silu_properties(x in -30.0f64..30.0, dx in 0.0f64..5.0) {
            prop_assert!((silu(x) - x / (1.0 + (-x).exp())).abs() < 1e-12);
            if x >= 0.0 {
                prop_assert!(silu(x + dx) >= silu(x));
            }
        }
    }

    #[test]
    fn silu_at_zero() {
        assert_eq!(silu(0.0), 0.0);
    }
}
