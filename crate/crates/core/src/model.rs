//! Residual convolutional encoder, classifier head, and the spectral-norm
//! discriminator used by the adversarial method.
//!
//! The backbone keeps the modified stem (3x3 kernel, stride 1, padding 1,
//! no max pooling) so input-space attributions stay sharp. The penalty site
//! for the representation-matching loss is the global average pool of the
//! last residual block's pre-activation feature map, exposed separately from
//! the (post-activation) embedding fed to the classifier head.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Channel width of each stage; stages after the first downsample by 2.
    pub widths: Vec<usize>,
    /// Residual blocks per stage (parallel to `widths`).
    pub blocks: Vec<usize>,
    pub input_conv_kernel: usize,
    pub input_conv_stride: usize,
    pub input_conv_pad: usize,
    pub input_maxpool: bool,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Desk-scale default: small enough for minutes-scale single-core
        // training at 64x64. Wider variants are plain config changes.
        BackboneConfig {
            input_channels: 1,
            widths: vec![8, 16, 32, 64],
            blocks: vec![1, 1, 1, 1],
            input_conv_kernel: 3,
            input_conv_stride: 1,
            input_conv_pad: 1,
            input_maxpool: false,
            num_classes: 2,
        }
    }
}

impl BackboneConfig {
    /// ResNet-18-shaped variant (stage widths and depths; stem still per
    /// the modified settings).
    pub fn resnet18_widths() -> Self {
        BackboneConfig {
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            ..Default::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.blocks.len() != self.widths.len() {
            return Err(Error::Config("widths and blocks must be parallel, non-empty".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths and block counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input_conv_kernel == 0
            || self.input_conv_stride == 0
            || self.input_conv_pad >= self.input_conv_kernel
        {
            return Err(Error::Config("invalid input conv geometry".into()));
        }
        Ok(())
    }
}

/// Forward products of the encoder.
pub struct EncoderOutputs {
    /// Post-activation global average pool; input to the classifier head.
    pub embedding: Var,
    /// Global average pool of the last block's pre-activation features: the
    /// site regularized by the representation-matching penalty.
    pub pre_activation: Var,
    /// (N, num_classes).
    pub logits: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone)]
pub struct ConvNet<T> {
    pub cfg: BackboneConfig,
    params: Vec<Tensor<T>>,
    descs: Vec<ParamDesc>,
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn linear_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (1.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Per-block geometry derived from the config.
struct BlockPlan {
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

fn block_plans(cfg: &BackboneConfig) -> Vec<BlockPlan> {
    let mut plans = Vec::new();
    let mut in_ch = cfg.widths[0];
    for (si, (&width, &nblocks)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
        for b in 0..nblocks {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            plans.push(BlockPlan { in_ch, out_ch: width, stride });
            in_ch = width;
        }
    }
    plans
}

impl<T: Scalar> ConvNet<T> {
    /// He-initialized network; fully determined by (config, seed).
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut descs = Vec::new();
        let mut push = |name: String, t: Tensor<T>, descs: &mut Vec<ParamDesc>, params: &mut Vec<Tensor<T>>| {
            descs.push(ParamDesc { name, shape: t.shape().to_vec() });
            params.push(t);
        };

        let k = cfg.input_conv_kernel;
        let stem_fan = cfg.input_channels * k * k;
        push(
            "stem.w".into(),
            he_normal(&[cfg.widths[0], cfg.input_channels, k, k], stem_fan, &mut rng),
            &mut descs,
            &mut params,
        );
        push("stem.b".into(), Tensor::zeros(&[cfg.widths[0]]), &mut descs, &mut params);

        for (bi, plan) in block_plans(&cfg).iter().enumerate() {
            let fan1 = plan.in_ch * 9;
            push(
                format!("block{bi}.conv1.w"),
                he_normal(&[plan.out_ch, plan.in_ch, 3, 3], fan1, &mut rng),
                &mut descs,
                &mut params,
            );
            push(format!("block{bi}.conv1.b"), Tensor::zeros(&[plan.out_ch]), &mut descs, &mut params);
            let fan2 = plan.out_ch * 9;
            push(
                format!("block{bi}.conv2.w"),
                he_normal(&[plan.out_ch, plan.out_ch, 3, 3], fan2, &mut rng),
                &mut descs,
                &mut params,
            );
            push(format!("block{bi}.conv2.b"), Tensor::zeros(&[plan.out_ch]), &mut descs, &mut params);
            if plan.in_ch != plan.out_ch || plan.stride != 1 {
                push(
                    format!("block{bi}.short.w"),
                    he_normal(&[plan.out_ch, plan.in_ch, 1, 1], plan.in_ch, &mut rng),
                    &mut descs,
                    &mut params,
                );
                push(format!("block{bi}.short.b"), Tensor::zeros(&[plan.out_ch]), &mut descs, &mut params);
            }
        }

        let embed = cfg.embedding_dim();
        push(
            "head.w".into(),
            linear_normal(&[embed, cfg.num_classes], embed, &mut rng),
            &mut descs,
            &mut params,
        );
        push("head.b".into(), Tensor::zeros(&[cfg.num_classes]), &mut descs, &mut params);

        Ok(ConvNet { cfg, params, descs })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn descs(&self) -> &[ParamDesc] {
        &self.descs
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.descs).any(|(p, d)| p.shape() != d.shape.as_slice())
        {
            return Err(Error::Checkpoint("parameter list does not match network layout".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ConvNet<U> {
        ConvNet {
            cfg: self.cfg.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            descs: self.descs.clone(),
        }
    }

    /// Registers every parameter as a tape leaf, in declaration order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let min_side = 1usize << (self.cfg.widths.len() - 1);
        if shape.len() != 4 || shape[1] != self.cfg.input_channels {
            return Err(Error::Shape(format!(
                "expected NCHW input with {} channels, got {:?}",
                self.cfg.input_channels, shape
            )));
        }
        if shape[2] < min_side || shape[3] < min_side {
            return Err(Error::Shape(format!(
                "input {}x{} too small for {} downsampling stages",
                shape[2],
                shape[3],
                self.cfg.widths.len()
            )));
        }
        Ok(())
    }

    /// Full forward pass over bound parameter vars. Deterministic given
    /// (params, input).
    pub fn forward(&self, tape: &mut Tape<T>, pvars: &[Var], x: Var) -> Result<EncoderOutputs> {
        self.check_input(tape.shape(x))?;
        let mut cursor = 0usize;
        let mut take = || {
            let v = pvars[cursor];
            cursor += 1;
            v
        };

        let stem_w = take();
        let stem_b = take();
        let c = tape.conv2d(x, stem_w, self.cfg.input_conv_stride, self.cfg.input_conv_pad);
        let cb = tape.add_chan_bias(c, stem_b);
        let mut h = tape.relu(cb);
        if self.cfg.input_maxpool {
            h = tape.max_pool_2x2(h);
        }

        let mut last_pre = h;
        for plan in block_plans(&self.cfg) {
            let w1 = take();
            let b1 = take();
            let w2 = take();
            let b2 = take();
            let c1 = tape.conv2d(h, w1, plan.stride, 1);
            let c1b = tape.add_chan_bias(c1, b1);
            let a1 = tape.relu(c1b);
            let c2 = tape.conv2d(a1, w2, 1, 1);
            let c2b = tape.add_chan_bias(c2, b2);
            let short = if plan.in_ch != plan.out_ch || plan.stride != 1 {
                let ws = take();
                let bs = take();
                let sc = tape.conv2d(h, ws, plan.stride, 0);
                tape.add_chan_bias(sc, bs)
            } else {
                h
            };
            let pre = tape.add(c2b, short);
            h = tape.relu(pre);
            last_pre = pre;
        }

        let embedding = tape.global_avg_pool(h);
        let pre_activation = tape.global_avg_pool(last_pre);
        let head_w = take();
        let head_b = take();
        let logits = tape.linear(embedding, head_w, head_b);
        debug_assert_eq!(cursor, pvars.len());
        Ok(EncoderOutputs { embedding, pre_activation, logits })
    }

    /// Convenience: bind + forward, for inference-style callers.
    pub fn forward_fresh(&self, tape: &mut Tape<T>, x: Var) -> Result<EncoderOutputs> {
        let pvars = self.bind(tape);
        self.forward(tape, &pvars, x)
    }
}

/// Anything that maps an NCHW image batch to logits on a tape. Attribution
/// and evaluation are written against this contract so analytic test models
/// can stand in for trained networks.
pub trait LogitModel<T: Scalar> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;
}

impl<T: Scalar> LogitModel<T> for ConvNet<T> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_fresh(tape, x)?.logits)
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
}

// ---- checkpoints -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: BackboneConfig,
    params: Vec<ParamDesc>,
    /// Caller-provided run metadata (seed, epoch, training config echo).
    meta: serde_json::Value,
}

const CHECKPOINT_FORMAT: &str = "attriprior-checkpoint-v1";

/// Single-file checkpoint: one JSON header line, then little-endian f64
/// parameter data in declaration order.
pub fn save_checkpoint<T: Scalar>(path: &Path, net: &ConvNet<T>, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: net.cfg.clone(),
        params: net.descs().to_vec(),
        meta,
    };
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    let mut buf = Vec::new();
    for p in net.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ConvNet<T>, serde_json::Value)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    let mut net = ConvNet::<T>::new(header.config, 0)?;
    if net.descs() != header.params.as_slice() {
        return Err(Error::Checkpoint("parameter layout does not match config".into()));
    }
    let body = &bytes[nl + 1..];
    let expected: usize = header.params.iter().map(|d| d.shape.iter().product::<usize>()).sum();
    if body.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of parameter data, found {}",
            expected * 8,
            body.len()
        )));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(header.params.len());
    for d in &header.params {
        let n: usize = d.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut le = [0u8; 8];
            le.copy_from_slice(&body[offset..offset + 8]);
            offset += 8;
            data.push(T::from_f64(f64::from_le_bytes(le)));
        }
        params.push(Tensor::from_vec(&d.shape, data)?);
    }
    net.set_params(params)?;
    Ok((net, header.meta))
}

// ---- discriminator ------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Width of each of the three fully-connected hidden layers.
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Spectral normalization on the hidden-layer weights.
    pub spectral_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { hidden_width: 1024, hidden_layers: 3, spectral_norm: true }
    }
}

/// One persistent power-iteration state per normalized weight.
#[derive(Clone, Debug)]
struct PowerIter {
    u: Vec<f64>,
    v: Vec<f64>,
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= n;
    }
}

impl PowerIter {
    fn new(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let mut u: Vec<f64> = (0..rows).map(|_| dist.sample(rng)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| dist.sample(rng)).collect();
        l2_normalize(&mut u);
        l2_normalize(&mut v);
        PowerIter { u, v }
    }

    /// One power-iteration step on W (rows x cols); returns the current
    /// spectral-norm estimate u' W v.
    fn step<T: Scalar>(&mut self, w: &Tensor<T>) -> f64 {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        // v <- normalize(W' u)
        let mut v = vec![0.0; cols];
        for r in 0..rows {
            let ur = self.u[r];
            let row = &w.data()[r * cols..(r + 1) * cols];
            for (c, &wv) in row.iter().enumerate() {
                v[c] += wv.to_f64() * ur;
            }
        }
        l2_normalize(&mut v);
        // u <- normalize(W v)
        let mut u = vec![0.0; rows];
        for r in 0..rows {
            let row = &w.data()[r * cols..(r + 1) * cols];
            u[r] = row.iter().zip(&v).map(|(&wv, &vv)| wv.to_f64() * vv).sum();
        }
        let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        l2_normalize(&mut u);
        self.u = u;
        self.v = v;
        sigma
    }

    /// Rank-1 matrix u v' as a tensor, for the tape-side sigma expression.
    fn outer<T: Scalar>(&self) -> Tensor<T> {
        let (rows, cols) = (self.u.len(), self.v.len());
        let mut data = Vec::with_capacity(rows * cols);
        for &ur in &self.u {
            for &vc in &self.v {
                data.push(T::from_f64(ur * vc));
            }
        }
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }
}

pub struct Discriminator<T> {
    pub cfg: DiscriminatorConfig,
    pub input_dim: usize,
    params: Vec<Tensor<T>>,
    power: Vec<PowerIter>,
}

/// Warm-up power iterations at construction; afterwards one step per forward
/// tracks the slowly-moving weights.
const POWER_WARMUP: usize = 30;

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, input_dim: usize, seed: u64) -> Result<Self> {
        if cfg.hidden_layers == 0 || cfg.hidden_width == 0 || input_dim == 0 {
            return Err(Error::Config("discriminator dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut power = Vec::new();
        let mut fan_in = input_dim;
        for _ in 0..cfg.hidden_layers {
            let w: Tensor<T> = he_normal(&[fan_in, cfg.hidden_width], fan_in, &mut rng);
            let mut pi = PowerIter::new(fan_in, cfg.hidden_width, &mut rng);
            for _ in 0..POWER_WARMUP {
                pi.step(&w);
            }
            params.push(w);
            params.push(Tensor::zeros(&[cfg.hidden_width]));
            power.push(pi);
            fan_in = cfg.hidden_width;
        }
        params.push(linear_normal(&[fan_in, 1], fan_in, &mut rng));
        params.push(Tensor::zeros(&[1]));
        Ok(Discriminator { cfg, input_dim, params, power })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("discriminator parameter mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Advances every power-iteration state one step against the current
    /// weights. Call once per training forward.
    pub fn refresh_spectral_estimates(&mut self) {
        for (li, pi) in self.power.iter_mut().enumerate() {
            pi.step(&self.params[2 * li]);
        }
    }

    /// Current spectral-norm estimate of hidden layer `li`'s raw weight.
    pub fn sigma_estimate(&self, li: usize) -> f64 {
        let w = &self.params[2 * li];
        let mut num = 0.0;
        let cols = w.shape()[1];
        for (r, &ur) in self.power[li].u.iter().enumerate() {
            let row = &w.data()[r * cols..(r + 1) * cols];
            num += ur * row.iter().zip(&self.power[li].v).map(|(&wv, &vv)| wv.to_f64() * vv).sum::<f64>();
        }
        num
    }

    /// Probability in (0,1) that each embedding row came from the masked
    /// domain. Gradients flow into both the bound discriminator parameters
    /// and the embedding argument.
    pub fn forward(&self, tape: &mut Tape<T>, pvars: &[Var], embedding: Var) -> Result<Var> {
        let shape = tape.shape(embedding);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "discriminator expects (N,{}), got {:?}",
                self.input_dim, shape
            )));
        }
        let mut h = embedding;
        for li in 0..self.cfg.hidden_layers {
            let w = pvars[2 * li];
            let b = pvars[2 * li + 1];
            let w_used = if self.cfg.spectral_norm {
                // sigma = u' W v with u,v held constant; dividing by it keeps
                // the layer 1-Lipschitz while remaining differentiable in W.
                let uv = tape.leaf(self.power[li].outer());
                let prod = tape.mul(w, uv);
                let sigma = tape.sum_all(prod);
                let inv = tape.recip_safe(sigma, T::tiny());
                let shape = tape.shape(w).to_vec();
                let invb = tape.broadcast_to(inv, &shape);
                tape.mul(w, invb)
            } else {
                w
            };
            let y = tape.linear(h, w_used, b);
            h = tape.relu(y);
        }
        let wo = pvars[2 * self.cfg.hidden_layers];
        let bo = pvars[2 * self.cfg.hidden_layers + 1];
        let logit = tape.linear(h, wo, bo);
        let n = tape.shape(logit)[0];
        let flat = tape.reshape(logit, &[n]);
        Ok(tape.sigmoid(flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig { widths: vec![4, 8], blocks: vec![1, 1], ..Default::default() }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let net = ConvNet::<f32>::new(tiny_cfg(), 7).unwrap();
        let x = Tensor::filled(&[3, 1, 16, 16], 0.3f32);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = net.forward_fresh(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(out.logits), &[3, 2]);
        assert_eq!(tape.shape(out.embedding), &[3, 8]);
        assert_eq!(tape.shape(out.pre_activation), &[3, 8]);

        let mut tape2 = Tape::new();
        let xv2 = tape2.leaf(x);
        let out2 = net.forward_fresh(&mut tape2, xv2).unwrap();
        assert_eq!(tape.value(out.logits), tape2.value(out2.logits));
    }

    #[test]
    fn batch_of_16_at_64_produces_16x2_logits() {
        let net = ConvNet::<f32>::new(BackboneConfig::default(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[16, 1, 64, 64], 0.1f32));
        let out = net.forward_fresh(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[16, 2]);
    }

    #[test]
    fn zero_image_zero_head_gives_zero_logits() {
        let mut net = ConvNet::<f64>::new(tiny_cfg(), 3).unwrap();
        let n = net.params().len();
        // Zero the final linear layer (weight and bias are the last two).
        for i in [n - 2, n - 1] {
            let z = Tensor::zeros(net.params()[i].shape());
            net.params_mut()[i] = z;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 1, 8, 8]));
        let out = net.forward_fresh(&mut tape, x).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_shape_mismatch_rejected() {
        let net = ConvNet::<f32>::new(tiny_cfg(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(net.forward_fresh(&mut tape, x).is_err());
        let x = tape.leaf(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(net.forward_fresh(&mut tape, x).is_err());
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        let a = ConvNet::<f32>::new(tiny_cfg(), 0).unwrap();
        let b = ConvNet::<f32>::new(tiny_cfg(), 999).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        // stem 4*1*9+4, block0 (4->4): 2*(4*4*9+4), block1 (4->8, s2):
        // 8*4*9+8 + 8*8*9+8 + short 8*4+8, head 8*2+2.
        let expect = (36 + 4) + 2 * (144 + 4) + (288 + 8) + (576 + 8) + (32 + 8) + (16 + 2);
        assert_eq!(a.param_count(), expect);
    }

    #[test]
    fn maxpool_variant_runs_when_enabled() {
        let cfg = BackboneConfig { input_maxpool: true, ..tiny_cfg() };
        let net = ConvNet::<f32>::new(cfg, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 1, 16, 16], 0.5f32));
        let out = net.forward_fresh(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[1, 2]);
    }

    /// Gradient of the mean logit w.r.t. every parameter matches central
    /// finite differences through the whole backbone.
    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut net = ConvNet::<f64>::new(tiny_cfg(), 11).unwrap();
        // Zero-initialized biases leave some pre-activations exactly at the
        // relu kink (clipped receptive fields sum to 0), where the chosen
        // subgradient and a two-sided difference legitimately disagree.
        // Shift every bias off zero before differentiating.
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            if p.shape().len() == 1 {
                for (e, v) in p.data_mut().iter_mut().enumerate() {
                    *v += 0.011 * (((i * 31 + e * 7) % 13) as f64 - 6.0);
                }
            }
        }
        let x = Tensor::from_vec(
            &[1, 1, 8, 8],
            (0..64).map(|i| ((i * 23 % 31) as f64) / 31.0 - 0.4).collect(),
        )
        .unwrap();

        let loss_of = |net: &ConvNet<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = net.forward_fresh(&mut tape, xv).unwrap();
            let lp = tape.log_softmax(out.logits);
            let idx = std::sync::Arc::new(vec![0usize]);
            let picked = tape.row_gather(lp, idx);
            let s = tape.sum_all(picked);
            let m = tape.neg(s);
            tape.value(m).item()
        };

        let mut tape = Tape::new();
        let pvars = net.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = net.forward(&mut tape, &pvars, xv).unwrap();
        let lp = tape.log_softmax(out.logits);
        let idx = std::sync::Arc::new(vec![0usize]);
        let picked = tape.row_gather(lp, idx);
        let s = tape.sum_all(picked);
        let loss = tape.neg(s);
        let grads = tape.grad(loss, &pvars);

        let h = 1e-6;
        for (pi, p) in net.params().iter().enumerate() {
            // Probe a few entries of each tensor.
            let probes: Vec<usize> =
                (0..p.len()).step_by((p.len() / 3).max(1)).take(3).collect();
            for &e in &probes {
                let mut plus = net.clone();
                plus.params_mut()[pi].data_mut()[e] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data_mut()[e] -= h;
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ana = tape.value(grads[pi]).data()[e];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < 1e-4,
                    "param {pi} ({}) elem {e}: fd {num} vs grad {ana}",
                    net.descs()[pi].name
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = ConvNet::<f32>::new(tiny_cfg(), 42).unwrap();
        let meta = serde_json::json!({"seed": 42, "epoch": 7});
        save_checkpoint(&path, &net, meta.clone()).unwrap();
        let (loaded, got_meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(loaded.cfg, net.cfg);
        for (a, b) in loaded.params().iter().zip(net.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let cfg = DiscriminatorConfig { hidden_width: 16, ..Default::default() };
        let disc = Discriminator::<f64>::new(cfg, 8, 5).unwrap();
        let mut tape = Tape::new();
        let pvars = disc.bind(&mut tape);
        let e = tape.leaf(Tensor::from_vec(&[3, 8], (0..24).map(|i| i as f64 * 0.3 - 3.0).collect()).unwrap());
        let p = disc.forward(&mut tape, &pvars, e).unwrap();
        assert_eq!(tape.shape(p), &[3]);
        for &v in tape.value(p).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_embedding_zero_bias_gives_half() {
        let cfg = DiscriminatorConfig { hidden_width: 8, ..Default::default() };
        let disc = Discriminator::<f64>::new(cfg, 4, 1).unwrap();
        let mut tape = Tape::new();
        let pvars = disc.bind(&mut tape);
        let e = tape.leaf(Tensor::zeros(&[2, 4]));
        let p = disc.forward(&mut tape, &pvars, e).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    /// Independent long power iteration on the normalized weight: its top
    /// singular value must sit within 1% of 1.
    #[test]
    fn spectral_normalized_weight_has_unit_norm() {
        let cfg = DiscriminatorConfig { hidden_width: 48, ..Default::default() };
        let mut disc = Discriminator::<f64>::new(cfg, 24, 9).unwrap();
        for _ in 0..100 {
            disc.refresh_spectral_estimates();
        }
        for li in 0..disc.cfg.hidden_layers {
            let w = &disc.params()[2 * li];
            let sigma_hat = disc.sigma_estimate(li);
            // Oracle: 500 fresh power iterations in f64 on W / sigma_hat.
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut v: Vec<f64> = (0..cols).map(|i| ((i * 37 + li) % 17) as f64 + 1.0).collect();
            l2_normalize(&mut v);
            let mut sigma_true = 0.0;
            for _ in 0..500 {
                let mut u = vec![0.0; rows];
                for r in 0..rows {
                    let row = &w.data()[r * cols..(r + 1) * cols];
                    u[r] = row.iter().zip(&v).map(|(&a, &b)| a * b).sum();
                }
                let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                sigma_true = un;
                l2_normalize(&mut u);
                let mut nv = vec![0.0; cols];
                for r in 0..rows {
                    let row = &w.data()[r * cols..(r + 1) * cols];
                    for (c, &a) in row.iter().enumerate() {
                        nv[c] += a * u[r];
                    }
                }
                l2_normalize(&mut nv);
                v = nv;
            }
            let normalized = sigma_true / sigma_hat;
            assert!(
                (normalized - 1.0).abs() < 0.01,
                "layer {li}: |sigma(W/sigma_hat)| = {normalized}"
            );
        }
    }
}
