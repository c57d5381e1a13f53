//! Desk-scale trainable backend: a residual convolutional network with
//! exact hand-written gradients.
//!
//! Three residual blocks of two 3x3 convolutions each, periodic padding
//! along W and zero padding along H, with the 128-dim time/noise embedding
//! projected into a per-channel bias inside every block. Everything runs in
//! f64; forward and backward are plain loops over flat buffers so the
//! gradient is exact for the implemented architecture (finite-difference
//! checked in the tests).

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ConditioningWindow;
use crate::rng::{StreamKey, StreamPurpose};

use super::embed::{fourier_features, silu, silu_deriv, EmbeddingConfig};
use super::DenoiserBackend;

/// Architecture descriptor; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    pub n_vars: usize,
    pub height: usize,
    pub width: usize,
    /// Conditioning channels appended to the input (window states + statics).
    pub cond_channels: usize,
    /// Base channel width.
    pub channels: usize,
    pub n_blocks: usize,
    pub embedding: EmbeddingConfig,
    /// Lead-time normalization divisor (hours); t is fed as t / t_max.
    pub t_max_hours: f64,
    pub dropout_p: f64,
    /// False for the deterministic baseline, which sees no noisy channel.
    pub noisy_input: bool,
}

impl ConvNetConfig {
    pub fn input_channels(&self) -> usize {
        self.cond_channels + if self.noisy_input { self.n_vars } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.n_vars == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter("empty state shape".into()));
        }
        if self.channels == 0 || self.n_blocks == 0 {
            return Err(Error::InvalidParameter("network needs channels and blocks".into()));
        }
        if !(self.t_max_hours > 0.0) {
            return Err(Error::InvalidParameter("t_max_hours must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidParameter("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Offsets of each parameter tensor inside the flat theta vector.
#[derive(Debug, Clone)]
struct Layout {
    emb_w1: (usize, usize), // (offset, len)
    emb_b1: (usize, usize),
    emb_w2: (usize, usize),
    emb_b2: (usize, usize),
    lift_w: (usize, usize),
    lift_b: (usize, usize),
    blocks: Vec<BlockLayout>,
    head_w: (usize, usize),
    head_b: (usize, usize),
    total: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    conv1_w: (usize, usize),
    conv1_b: (usize, usize),
    proj_w: (usize, usize),
    proj_b: (usize, usize),
    conv2_w: (usize, usize),
    conv2_b: (usize, usize),
}

impl Layout {
    fn new(cfg: &ConvNetConfig) -> Self {
        let feat = cfg.embedding.feature_dim();
        let emb = cfg.embedding.output_dim;
        let c = cfg.channels;
        let cin = cfg.input_channels();
        let v = cfg.n_vars;
        let mut off = 0usize;
        let mut take = |len: usize| {
            let o = (off, len);
            off += len;
            o
        };
        let emb_w1 = take(emb * feat);
        let emb_b1 = take(emb);
        let emb_w2 = take(emb * emb);
        let emb_b2 = take(emb);
        let lift_w = take(c * cin * 9);
        let lift_b = take(c);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockLayout {
                conv1_w: take(c * c * 9),
                conv1_b: take(c),
                proj_w: take(c * emb),
                proj_b: take(c),
                conv2_w: take(c * c * 9),
                conv2_b: take(c),
            })
            .collect();
        let head_w = take(v * c * 9);
        let head_b = take(v);
        Layout {
            emb_w1,
            emb_b1,
            emb_w2,
            emb_b2,
            lift_w,
            lift_b,
            blocks,
            head_w,
            head_b,
            total: off,
        }
    }
}

fn slice(theta: &[f64], span: (usize, usize)) -> &[f64] {
    &theta[span.0..span.0 + span.1]
}

fn slice_mut(grad: &mut [f64], span: (usize, usize)) -> &mut [f64] {
    &mut grad[span.0..span.0 + span.1]
}

/// 3x3 convolution, zero-padded along H, periodic along W.
/// `input` is `(cin, H, W)` flat, `out` is `(cout, H, W)` flat.
fn conv3x3(
    input: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    out: &mut [f64],
) {
    let hw = height * width;
    for (co, &bias) in b.iter().enumerate().take(cout) {
        out[co * hw..(co + 1) * hw].fill(bias);
    }
    for co in 0..cout {
        let out_c = co * hw;
        for ci in 0..cin {
            let in_c = ci * hw;
            let wbase = (co * cin + ci) * 9;
            for dy in 0..3usize {
                let sy = dy as isize - 1;
                for dx in 0..3usize {
                    let sx = dx as isize - 1;
                    let k = w[wbase + dy * 3 + dx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..height {
                        let yin = y as isize + sy;
                        if yin < 0 || yin >= height as isize {
                            continue;
                        }
                        let in_row = in_c + yin as usize * width;
                        let out_row = out_c + y * width;
                        for x in 0..width {
                            let xin = (x as isize + sx).rem_euclid(width as isize) as usize;
                            out[out_row + x] += k * input[in_row + xin];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of a 3x3 convolution with respect to its input: the correlation
/// of `dout` with the flipped kernel under the same padding rules.
fn conv3x3_backward_input(
    dout: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    din: &mut [f64],
) {
    let hw = height * width;
    din.fill(0.0);
    for co in 0..cout {
        let dout_c = co * hw;
        for ci in 0..cin {
            let din_c = ci * hw;
            let wbase = (co * cin + ci) * 9;
            for dy in 0..3usize {
                let sy = dy as isize - 1;
                for dx in 0..3usize {
                    let sx = dx as isize - 1;
                    let k = w[wbase + dy * 3 + dx];
                    if k == 0.0 {
                        continue;
                    }
                    // out[y, x] consumed in[y+sy, x+sx]; flip for the pullback.
                    for y in 0..height {
                        let yin = y as isize + sy;
                        if yin < 0 || yin >= height as isize {
                            continue;
                        }
                        let din_row = din_c + yin as usize * width;
                        let dout_row = dout_c + y * width;
                        for x in 0..width {
                            let xin = (x as isize + sx).rem_euclid(width as isize) as usize;
                            din[din_row + xin] += k * dout[dout_row + x];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a 3x3 convolution with respect to weights and bias.
fn conv3x3_backward_params(
    dout: &[f64],
    input: &[f64],
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let hw = height * width;
    for co in 0..cout {
        let dout_c = co * hw;
        let mut bias_acc = 0.0;
        for v in &dout[dout_c..dout_c + hw] {
            bias_acc += v;
        }
        db[co] += bias_acc;
        for ci in 0..cin {
            let in_c = ci * hw;
            let wbase = (co * cin + ci) * 9;
            for dy in 0..3usize {
                let sy = dy as isize - 1;
                for dx in 0..3usize {
                    let sx = dx as isize - 1;
                    let mut acc = 0.0;
                    for y in 0..height {
                        let yin = y as isize + sy;
                        if yin < 0 || yin >= height as isize {
                            continue;
                        }
                        let in_row = in_c + yin as usize * width;
                        let dout_row = dout_c + y * width;
                        for x in 0..width {
                            let xin = (x as isize + sx).rem_euclid(width as isize) as usize;
                            acc += dout[dout_row + x] * input[in_row + xin];
                        }
                    }
                    dw[wbase + dy * 3 + dx] += acc;
                }
            }
        }
    }
}

/// Activation caches from one forward pass, consumed by `backward`.
pub struct Tape {
    x_all: Vec<f64>,
    feats: Vec<f64>,
    e1_pre: Vec<f64>,
    e1: Vec<f64>,
    e2_pre: Vec<f64>,
    e: Vec<f64>,
    /// Pre-block hidden states: h entering block b (len n_blocks + 1; the
    /// last entry is the final h entering the head).
    h: Vec<Vec<f64>>,
    /// Per block: silu(h) fed to conv1.
    a1: Vec<Vec<f64>>,
    /// Per block: conv1 output + embedding bias (pre-silu).
    c1e: Vec<Vec<f64>>,
    /// Per block: dropout(silu(c1e)) fed to conv2.
    a2d: Vec<Vec<f64>>,
    /// Per block: dropout mask (empty when dropout is off).
    masks: Vec<Vec<f64>>,
    /// silu(final h), fed to the head conv.
    a_head: Vec<f64>,
    out: Vec<f64>,
}

/// The trainable network. Parameters live in one flat f64 vector addressed
/// by an internal layout, which is what checkpoints serialize.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub config: ConvNetConfig,
    pub theta: Vec<f64>,
    layout: Layout,
}

impl ConvNet {
    /// Xavier-uniform initialization from a seeded stream; biases zero.
    pub fn init(config: ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut theta = vec![0.0; layout.total];
        let mut rng = StreamKey::new(seed, StreamPurpose::ParamInit, 0, 1).rng();
        let feat = config.embedding.feature_dim();
        let emb = config.embedding.output_dim;
        let c = config.channels;
        let cin = config.input_channels();
        let v = config.n_vars;
        let mut fill = |span: (usize, usize), fan_in: usize, fan_out: usize, theta: &mut [f64]| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in slice_mut(theta, span) {
                *x = rng.random_range(-limit..limit);
            }
        };
        fill(layout.emb_w1, feat, emb, &mut theta);
        fill(layout.emb_w2, emb, emb, &mut theta);
        fill(layout.lift_w, cin * 9, c * 9, &mut theta);
        for b in &layout.blocks {
            fill(b.conv1_w, c * 9, c * 9, &mut theta);
            fill(b.proj_w, emb, c, &mut theta);
            fill(b.conv2_w, c * 9, c * 9, &mut theta);
        }
        fill(layout.head_w, c * 9, v * 9, &mut theta);
        Ok(ConvNet {
            config,
            theta,
            layout,
        })
    }

    /// Rebuild a network from a flat parameter vector (checkpoint load).
    pub fn from_theta(config: ConvNetConfig, theta: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if theta.len() != layout.total {
            return Err(Error::shape_in(
                "checkpoint theta",
                format!("{}", layout.total),
                format!("{}", theta.len()),
            ));
        }
        Ok(ConvNet {
            config,
            theta,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Zeroed network of the same architecture (tests).
    pub fn zeroed(config: ConvNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let theta = vec![0.0; layout.total];
        Ok(ConvNet {
            config,
            theta,
            layout,
        })
    }

    fn embed_forward(&self, c_noise: f64, t_norm: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let cfg = &self.config.embedding;
        let mut feats = fourier_features(t_norm, cfg);
        for (f, g) in feats.iter_mut().zip(fourier_features(c_noise, cfg)) {
            *f += g;
        }
        let emb = cfg.output_dim;
        let feat_dim = cfg.feature_dim();
        let w1 = slice(&self.theta, self.layout.emb_w1);
        let b1 = slice(&self.theta, self.layout.emb_b1);
        let w2 = slice(&self.theta, self.layout.emb_w2);
        let b2 = slice(&self.theta, self.layout.emb_b2);
        let mut e1_pre = vec![0.0; emb];
        for i in 0..emb {
            let row = &w1[i * feat_dim..(i + 1) * feat_dim];
            let mut acc = b1[i];
            for (j, &f) in feats.iter().enumerate() {
                acc += row[j] * f;
            }
            e1_pre[i] = acc;
        }
        let e1: Vec<f64> = e1_pre.iter().map(|&p| silu(p)).collect();
        let mut e2_pre = vec![0.0; emb];
        for i in 0..emb {
            let row = &w2[i * emb..(i + 1) * emb];
            let mut acc = b2[i];
            for (j, &h) in e1.iter().enumerate() {
                acc += row[j] * h;
            }
            e2_pre[i] = acc;
        }
        let e: Vec<f64> = e2_pre.iter().map(|&p| silu(p)).collect();
        (feats, e1_pre, e1, e2_pre, e)
    }

    /// Forward pass with full activation caching. `dropout_key` enables
    /// train-mode dropout with masks drawn deterministically from the key.
    pub fn forward_cached(
        &self,
        scaled_noisy: Option<&Array3<f64>>,
        cond: &Array3<f64>,
        c_noise: f64,
        lead_time_hours: f64,
        dropout_key: Option<StreamKey>,
    ) -> Result<Tape> {
        let cfg = &self.config;
        let (hh, ww) = (cfg.height, cfg.width);
        let hw = hh * ww;
        let cin = cfg.input_channels();
        let c = cfg.channels;
        let v = cfg.n_vars;
        if cond.dim() != (cfg.cond_channels, hh, ww) {
            return Err(Error::shape_in(
                "convnet conditioning",
                format!("({}, {hh}, {ww})", cfg.cond_channels),
                format!("{:?}", cond.dim()),
            ));
        }
        match (cfg.noisy_input, scaled_noisy) {
            (true, Some(x)) if x.dim() == (v, hh, ww) => {}
            (false, None) => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "noisy-input channel does not match the architecture".into(),
                ))
            }
        }

        // Stack input channels: noisy state first, then conditioning.
        let mut x_all = vec![0.0; cin * hw];
        let mut cidx = 0;
        if let Some(x) = scaled_noisy {
            for val in x.iter() {
                x_all[cidx] = *val;
                cidx += 1;
            }
        }
        for val in cond.iter() {
            x_all[cidx] = *val;
            cidx += 1;
        }

        let t_norm = lead_time_hours / cfg.t_max_hours;
        let (feats, e1_pre, e1, e2_pre, e) = self.embed_forward(c_noise, t_norm);

        let mut h0 = vec![0.0; c * hw];
        conv3x3(
            &x_all,
            slice(&self.theta, self.layout.lift_w),
            slice(&self.theta, self.layout.lift_b),
            cin,
            c,
            hh,
            ww,
            &mut h0,
        );

        let n_blocks = cfg.n_blocks;
        let mut h_list = Vec::with_capacity(n_blocks + 1);
        let mut a1_list = Vec::with_capacity(n_blocks);
        let mut c1e_list = Vec::with_capacity(n_blocks);
        let mut a2d_list = Vec::with_capacity(n_blocks);
        let mut mask_list = Vec::with_capacity(n_blocks);
        h_list.push(h0);

        for (b, bl) in self.layout.blocks.iter().enumerate() {
            let h_in = h_list.last().unwrap().clone();
            let a1: Vec<f64> = h_in.iter().map(|&x| silu(x)).collect();
            let mut c1 = vec![0.0; c * hw];
            conv3x3(
                &a1,
                slice(&self.theta, bl.conv1_w),
                slice(&self.theta, bl.conv1_b),
                c,
                c,
                hh,
                ww,
                &mut c1,
            );
            // Per-channel embedding bias.
            let proj_w = slice(&self.theta, bl.proj_w);
            let proj_b = slice(&self.theta, bl.proj_b);
            let emb_dim = cfg.embedding.output_dim;
            for ch in 0..c {
                let row = &proj_w[ch * emb_dim..(ch + 1) * emb_dim];
                let mut bias = proj_b[ch];
                for (j, &ej) in e.iter().enumerate() {
                    bias += row[j] * ej;
                }
                for val in &mut c1[ch * hw..(ch + 1) * hw] {
                    *val += bias;
                }
            }
            let c1e = c1;
            let mut a2: Vec<f64> = c1e.iter().map(|&x| silu(x)).collect();
            let mask = if cfg.dropout_p > 0.0 {
                if let Some(key) = dropout_key {
                    let mut rng = StreamKey::new(
                        key.master_seed,
                        StreamPurpose::Dropout,
                        key.member,
                        key.slot.wrapping_mul(8).wrapping_add(b as u64),
                    )
                    .rng();
                    let keep = 1.0 / (1.0 - cfg.dropout_p);
                    let mask: Vec<f64> = (0..c * hw)
                        .map(|_| {
                            if rng.random::<f64>() < cfg.dropout_p {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    for (x, m) in a2.iter_mut().zip(&mask) {
                        *x *= m;
                    }
                    mask
                } else {
                    Vec::new()
                }
            } else {
                Vec::new()
            };
            let a2d = a2;
            let mut c2 = vec![0.0; c * hw];
            conv3x3(
                &a2d,
                slice(&self.theta, bl.conv2_w),
                slice(&self.theta, bl.conv2_b),
                c,
                c,
                hh,
                ww,
                &mut c2,
            );
            let mut h_out = h_in.clone();
            for (x, d) in h_out.iter_mut().zip(&c2) {
                *x += d;
            }
            h_list.push(h_out);
            a1_list.push(a1);
            c1e_list.push(c1e);
            a2d_list.push(a2d);
            mask_list.push(mask);
        }

        let h_final = h_list.last().unwrap();
        let a_head: Vec<f64> = h_final.iter().map(|&x| silu(x)).collect();
        let mut out = vec![0.0; v * hw];
        conv3x3(
            &a_head,
            slice(&self.theta, self.layout.head_w),
            slice(&self.theta, self.layout.head_b),
            c,
            v,
            hh,
            ww,
            &mut out,
        );
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::TrainingFault("non-finite network activations".into()));
        }
        Ok(Tape {
            x_all,
            feats,
            e1_pre,
            e1,
            e2_pre,
            e,
            h: h_list,
            a1: a1_list,
            c1e: c1e_list,
            a2d: a2d_list,
            masks: mask_list,
            a_head,
            out,
        })
    }

    /// Eval-mode forward returning the output tensor.
    pub fn forward(
        &self,
        scaled_noisy: Option<&Array3<f64>>,
        cond: &Array3<f64>,
        c_noise: f64,
        lead_time_hours: f64,
    ) -> Result<Array3<f64>> {
        let tape = self.forward_cached(scaled_noisy, cond, c_noise, lead_time_hours, None)?;
        Ok(self.tape_output(&tape))
    }

    pub fn tape_output(&self, tape: &Tape) -> Array3<f64> {
        Array3::from_shape_vec(
            (self.config.n_vars, self.config.height, self.config.width),
            tape.out.clone(),
        )
        .expect("tape shape")
    }

    /// Backward pass: accumulates d(loss)/d(theta) into `grad` and returns
    /// d(loss)/d(scaled noisy input) (empty tensor for architectures without
    /// a noisy channel).
    pub fn backward(&self, tape: &Tape, dout: &Array3<f64>, grad: &mut [f64]) -> Array3<f64> {
        let cfg = &self.config;
        let (hh, ww) = (cfg.height, cfg.width);
        let hw = hh * ww;
        let c = cfg.channels;
        let v = cfg.n_vars;
        let cin = cfg.input_channels();
        let emb_dim = cfg.embedding.output_dim;
        assert_eq!(grad.len(), self.layout.total);
        let dout_flat: Vec<f64> = dout.iter().cloned().collect();

        // Head conv.
        let mut d_a_head = vec![0.0; c * hw];
        conv3x3_backward_input(
            &dout_flat,
            slice(&self.theta, self.layout.head_w),
            c,
            v,
            hh,
            ww,
            &mut d_a_head,
        );
        {
            // Split borrows: parameter grads for the head.
            let (head_w, head_b) = (self.layout.head_w, self.layout.head_b);
            let mut dw = vec![0.0; head_w.1];
            let mut db = vec![0.0; head_b.1];
            conv3x3_backward_params(&dout_flat, &tape.a_head, c, v, hh, ww, &mut dw, &mut db);
            for (g, d) in slice_mut(grad, head_w).iter_mut().zip(&dw) {
                *g += d;
            }
            for (g, d) in slice_mut(grad, head_b).iter_mut().zip(&db) {
                *g += d;
            }
        }

        // Through the head activation.
        let h_final = tape.h.last().unwrap();
        let mut dh: Vec<f64> = d_a_head
            .iter()
            .zip(h_final)
            .map(|(&g, &x)| g * silu_deriv(x))
            .collect();

        let mut d_e = vec![0.0; emb_dim];

        for (b, bl) in self.layout.blocks.iter().enumerate().rev() {
            let dc2 = dh.clone(); // residual branch
            // conv2 parameter grads and input pullback.
            let mut dw2 = vec![0.0; bl.conv2_w.1];
            let mut db2 = vec![0.0; bl.conv2_b.1];
            conv3x3_backward_params(&dc2, &tape.a2d[b], c, c, hh, ww, &mut dw2, &mut db2);
            for (g, d) in slice_mut(grad, bl.conv2_w).iter_mut().zip(&dw2) {
                *g += d;
            }
            for (g, d) in slice_mut(grad, bl.conv2_b).iter_mut().zip(&db2) {
                *g += d;
            }
            let mut d_a2d = vec![0.0; c * hw];
            conv3x3_backward_input(
                &dc2,
                slice(&self.theta, bl.conv2_w),
                c,
                c,
                hh,
                ww,
                &mut d_a2d,
            );
            // Dropout backward.
            if !tape.masks[b].is_empty() {
                for (g, m) in d_a2d.iter_mut().zip(&tape.masks[b]) {
                    *g *= m;
                }
            }
            // silu(c1e) backward.
            let d_c1e: Vec<f64> = d_a2d
                .iter()
                .zip(&tape.c1e[b])
                .map(|(&g, &x)| g * silu_deriv(x))
                .collect();
            // Embedding projection grads: per-channel spatial sums.
            {
                let proj_w = slice(&self.theta, bl.proj_w);
                let mut d_proj_w = vec![0.0; bl.proj_w.1];
                let mut d_proj_b = vec![0.0; bl.proj_b.1];
                for ch in 0..c {
                    let mut s = 0.0;
                    for &g in &d_c1e[ch * hw..(ch + 1) * hw] {
                        s += g;
                    }
                    d_proj_b[ch] += s;
                    let row = &proj_w[ch * emb_dim..(ch + 1) * emb_dim];
                    for j in 0..emb_dim {
                        d_proj_w[ch * emb_dim + j] += s * tape.e[j];
                        d_e[j] += s * row[j];
                    }
                }
                for (g, d) in slice_mut(grad, bl.proj_w).iter_mut().zip(&d_proj_w) {
                    *g += d;
                }
                for (g, d) in slice_mut(grad, bl.proj_b).iter_mut().zip(&d_proj_b) {
                    *g += d;
                }
            }
            // conv1 grads and pullback.
            let mut dw1 = vec![0.0; bl.conv1_w.1];
            let mut db1 = vec![0.0; bl.conv1_b.1];
            conv3x3_backward_params(&d_c1e, &tape.a1[b], c, c, hh, ww, &mut dw1, &mut db1);
            for (g, d) in slice_mut(grad, bl.conv1_w).iter_mut().zip(&dw1) {
                *g += d;
            }
            for (g, d) in slice_mut(grad, bl.conv1_b).iter_mut().zip(&db1) {
                *g += d;
            }
            let mut d_a1 = vec![0.0; c * hw];
            conv3x3_backward_input(
                &d_c1e,
                slice(&self.theta, bl.conv1_w),
                c,
                c,
                hh,
                ww,
                &mut d_a1,
            );
            // dh = skip path + silu'(h_in) * d_a1.
            let h_in = &tape.h[b];
            for i in 0..c * hw {
                dh[i] += d_a1[i] * silu_deriv(h_in[i]);
            }
        }

        // Lift conv.
        {
            let mut dwl = vec![0.0; self.layout.lift_w.1];
            let mut dbl = vec![0.0; self.layout.lift_b.1];
            conv3x3_backward_params(&dh, &tape.x_all, cin, c, hh, ww, &mut dwl, &mut dbl);
            for (g, d) in slice_mut(grad, self.layout.lift_w).iter_mut().zip(&dwl) {
                *g += d;
            }
            for (g, d) in slice_mut(grad, self.layout.lift_b).iter_mut().zip(&dbl) {
                *g += d;
            }
        }
        let mut d_x_all = vec![0.0; cin * hw];
        conv3x3_backward_input(
            &dh,
            slice(&self.theta, self.layout.lift_w),
            cin,
            c,
            hh,
            ww,
            &mut d_x_all,
        );

        // Embedding dense layers.
        {
            let feat_dim = cfg.embedding.feature_dim();
            let w2 = slice(&self.theta, self.layout.emb_w2);
            let d_e2_pre: Vec<f64> = d_e
                .iter()
                .zip(&tape.e2_pre)
                .map(|(&g, &p)| g * silu_deriv(p))
                .collect();
            let mut d_e1 = vec![0.0; emb_dim];
            {
                let gw2 = slice_mut(grad, self.layout.emb_w2);
                for i in 0..emb_dim {
                    for j in 0..emb_dim {
                        gw2[i * emb_dim + j] += d_e2_pre[i] * tape.e1[j];
                        d_e1[j] += w2[i * emb_dim + j] * d_e2_pre[i];
                    }
                }
            }
            for (g, d) in slice_mut(grad, self.layout.emb_b2).iter_mut().zip(&d_e2_pre) {
                *g += d;
            }
            let d_e1_pre: Vec<f64> = d_e1
                .iter()
                .zip(&tape.e1_pre)
                .map(|(&g, &p)| g * silu_deriv(p))
                .collect();
            {
                let gw1 = slice_mut(grad, self.layout.emb_w1);
                for i in 0..emb_dim {
                    for j in 0..feat_dim {
                        gw1[i * feat_dim + j] += d_e1_pre[i] * tape.feats[j];
                    }
                }
            }
            for (g, d) in slice_mut(grad, self.layout.emb_b1).iter_mut().zip(&d_e1_pre) {
                *g += d;
            }
        }

        if cfg.noisy_input {
            Array3::from_shape_vec((v, hh, ww), d_x_all[..v * hw].to_vec()).expect("shape")
        } else {
            Array3::zeros((0, hh, ww))
        }
    }
}

/// [`ConvNet`] exposed as a sampling backend (eval mode, no dropout).
pub struct ConvNetBackend {
    pub net: std::sync::Arc<ConvNet>,
}

impl ConvNetBackend {
    pub fn new(net: std::sync::Arc<ConvNet>) -> Self {
        ConvNetBackend { net }
    }
}

impl DenoiserBackend for ConvNetBackend {
    fn raw_apply(
        &self,
        scaled_noisy: &Array3<f64>,
        c_noise: f64,
        lead_time: f64,
        window: &ConditioningWindow,
    ) -> Result<Array3<f64>> {
        let cond = window.stack_channels();
        self.net.forward(Some(scaled_noisy), &cond, c_noise, lead_time)
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }
}
