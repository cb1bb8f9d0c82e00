use ndarray::{concatenate, s, Array4, Axis};

use super::layers::{
    max_pool2, max_pool2_backward, relu_backward, relu_inplace, BatchNorm, BnCache, Conv2d, ConvTranspose2,
};
use super::{NetworkConfig, Param, Scalar};
use crate::error::{ensure, Error, Result};
use crate::seed::{child_seed, rng};

/// Batch normalization uses batch statistics in `Train` and running
/// statistics in `Eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two (conv, batch norm, ReLU) stages.
#[derive(Clone, Debug)]
struct ConvBlock<T> {
    convs: [Conv2d<T>; 2],
    norms: Option<[BatchNorm<T>; 2]>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Array4<T>,
    mid: Array4<T>,
    out: Array4<T>,
    bn: Vec<BnCache<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, config: &NetworkConfig, rng: &mut crate::seed::Rng) -> Self {
        let k = config.kernel_size;
        let bn = config.batch_norm;
        Self {
            convs: [
                Conv2d::new(&format!("{name}.conv0"), in_ch, out_ch, k, !bn, rng),
                Conv2d::new(&format!("{name}.conv1"), out_ch, out_ch, k, !bn, rng),
            ],
            norms: bn.then(|| {
                [
                    BatchNorm::new(&format!("{name}.bn0"), out_ch),
                    BatchNorm::new(&format!("{name}.bn1"), out_ch),
                ]
            }),
        }
    }

    fn stage_eval(&self, i: usize, x: &Array4<T>) -> Array4<T> {
        let mut h = self.convs[i].forward(x);
        if let Some(norms) = &self.norms {
            h = norms[i].forward_eval(&h);
        }
        relu_inplace(&mut h);
        h
    }

    fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let mid = self.stage_eval(0, x);
        self.stage_eval(1, &mid)
    }

    fn stage_train(&self, i: usize, x: &Array4<T>, bn: &mut Vec<BnCache<T>>) -> Array4<T> {
        let mut h = self.convs[i].forward(x);
        if let Some(norms) = &self.norms {
            let (y, cache) = norms[i].forward_train(&h);
            h = y;
            bn.push(cache);
        }
        relu_inplace(&mut h);
        h
    }

    fn forward_train(&self, x: Array4<T>) -> BlockCache<T> {
        let mut bn = Vec::with_capacity(2);
        let mid = self.stage_train(0, &x, &mut bn);
        let out = self.stage_train(1, &mid, &mut bn);
        BlockCache { input: x, mid, out, bn }
    }

    fn update_running(&mut self, cache: &BlockCache<T>) {
        if let Some(norms) = self.norms.as_mut() {
            for (norm, c) in norms.iter_mut().zip(&cache.bn) {
                norm.update_running(c);
            }
        }
    }

    fn backward(&mut self, cache: &BlockCache<T>, gy: &Array4<T>, need_gx: bool) -> Option<Array4<T>> {
        let mut g = relu_backward(&cache.out, gy);
        if let Some(norms) = self.norms.as_mut() {
            g = norms[1].backward(&cache.bn[1], &g);
        }
        g = self.convs[1].backward(&cache.mid, &g, true).expect("requested");
        g = relu_backward(&cache.mid, &g);
        if let Some(norms) = self.norms.as_mut() {
            g = norms[0].backward(&cache.bn[0], &g);
        }
        self.convs[0].backward(&cache.input, &g, need_gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for i in 0..2 {
            out.extend(self.convs[i].params());
            if let Some(norms) = &self.norms {
                out.push(&norms[i].gamma);
                out.push(&norms[i].beta);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        let [c0, c1] = &mut self.convs;
        match self.norms.as_mut() {
            Some([n0, n1]) => {
                out.extend(c0.params_mut());
                out.push(&mut n0.gamma);
                out.push(&mut n0.beta);
                out.extend(c1.params_mut());
                out.push(&mut n1.gamma);
                out.push(&mut n1.beta);
            }
            None => {
                out.extend(c0.params_mut());
                out.extend(c1.params_mut());
            }
        }
        out
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        if let Some(norms) = &self.norms {
            for n in norms {
                let base = n.gamma.name.trim_end_matches(".gamma");
                out.push((format!("{base}.running_mean"), &n.running_mean));
                out.push((format!("{base}.running_var"), &n.running_var));
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        if let Some(norms) = self.norms.as_mut() {
            for n in norms.iter_mut() {
                let base = n.gamma.name.trim_end_matches(".gamma").to_string();
                out.push((format!("{base}.running_mean"), &mut n.running_mean));
                out.push((format!("{base}.running_var"), &mut n.running_var));
            }
        }
        out
    }
}

/// Encoder levels of widths `f, 2f, ..., 2^(depth-1) f` each followed by
/// 2x max pooling, a bottleneck of width `2^depth f`, a mirrored decoder
/// with transposed-convolution upsampling and skip concatenation, and a
/// linear 1x1 projection to the output channels.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: NetworkConfig,
    encoder: Vec<ConvBlock<T>>,
    bottleneck: ConvBlock<T>,
    up: Vec<ConvTranspose2<T>>,
    decoder: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
}

/// Activations recorded by [`UNet::forward_train`] for the backward pass.
pub struct Tape<T> {
    encoder: Vec<BlockCache<T>>,
    pools: Vec<Vec<u8>>,
    bottleneck: BlockCache<T>,
    decoder: Vec<BlockCache<T>>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(child_seed(seed, "unet-init", 0));
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut in_ch = config.in_channels;
        for level in 0..d {
            encoder.push(ConvBlock::new(
                &format!("enc{level}"),
                in_ch,
                config.width(level),
                &config,
                &mut r,
            ));
            in_ch = config.width(level);
        }
        let bottleneck = ConvBlock::new("bottleneck", in_ch, config.width(d), &config, &mut r);
        let mut up = Vec::with_capacity(d);
        let mut decoder = Vec::with_capacity(d);
        for level in 0..d {
            up.push(ConvTranspose2::new(
                &format!("up{level}"),
                config.width(level + 1),
                config.width(level),
                &mut r,
            ));
            decoder.push(ConvBlock::new(
                &format!("dec{level}"),
                2 * config.width(level),
                config.width(level),
                &config,
                &mut r,
            ));
        }
        let head = Conv2d::new("head", config.width(0), config.out_channels, 1, true, &mut r);
        Ok(Self {
            config,
            encoder,
            bottleneck,
            up,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        ensure!(n >= 1, Input, "empty input batch");
        ensure!(
            c == self.config.in_channels,
            Input,
            "expected {} input channel(s), got {c}",
            self.config.in_channels
        );
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Input(format!(
                "input of {h}x{w} is not divisible by {m}; both sides must be a multiple of {m} for depth {}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Inference with running batch-norm statistics. Does not touch `self`.
    pub fn forward_eval(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let d = self.config.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x.as_standard_layout().into_owned();
        for block in &self.encoder {
            let out = block.forward_eval(&h);
            h = max_pool2(&out).0;
            skips.push(out);
        }
        h = self.bottleneck.forward_eval(&h);
        for level in (0..d).rev() {
            let upsampled = self.up[level].forward(&h);
            let joined = concatenate(Axis(1), &[skips[level].view(), upsampled.view()]).unwrap();
            h = self.decoder[level].forward_eval(&joined.as_standard_layout().into_owned());
        }
        Ok(self.head.forward(&h))
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_train(x)?.0),
        }
    }

    /// Training-mode forward pass: uses batch statistics, updates the
    /// running statistics and records a tape for [`UNet::backward`].
    pub fn forward_train(&mut self, x: &Array4<T>) -> Result<(Array4<T>, Tape<T>)> {
        self.check_input(x)?;
        let d = self.config.depth;
        let mut enc_caches = Vec::with_capacity(d);
        let mut pools = Vec::with_capacity(d);
        let mut h = x.as_standard_layout().into_owned();
        for block in &self.encoder {
            let cache = block.forward_train(h);
            let (pooled, arg) = max_pool2(&cache.out);
            h = pooled;
            pools.push(arg);
            enc_caches.push(cache);
        }
        let bottleneck = self.bottleneck.forward_train(h);
        let mut dec_caches: Vec<Option<BlockCache<T>>> = (0..d).map(|_| None).collect();
        for level in (0..d).rev() {
            let below = if level + 1 == d {
                &bottleneck.out
            } else {
                &dec_caches[level + 1].as_ref().unwrap().out
            };
            let upsampled = self.up[level].forward(below);
            let joined = concatenate(Axis(1), &[enc_caches[level].out.view(), upsampled.view()]).unwrap();
            dec_caches[level] = Some(self.decoder[level].forward_train(joined.as_standard_layout().into_owned()));
        }
        let decoder: Vec<BlockCache<T>> = dec_caches.into_iter().map(Option::unwrap).collect();
        let out = self.head.forward(&decoder[0].out);

        for (block, cache) in self.encoder.iter_mut().zip(&enc_caches) {
            block.update_running(cache);
        }
        self.bottleneck.update_running(&bottleneck);
        for (block, cache) in self.decoder.iter_mut().zip(&decoder) {
            block.update_running(cache);
        }
        Ok((
            out,
            Tape {
                encoder: enc_caches,
                pools,
                bottleneck,
                decoder,
            },
        ))
    }

    /// Accumulates dL/dparams given dL/doutput for the recorded pass.
    pub fn backward(&mut self, tape: &Tape<T>, grad_out: &Array4<T>) {
        let d = self.config.depth;
        let grad_out = grad_out.as_standard_layout().into_owned();
        let mut g = self.head.backward(&tape.decoder[0].out, &grad_out, true).unwrap();
        let mut skip_grads: Vec<Option<Array4<T>>> = (0..d).map(|_| None).collect();
        for level in 0..d {
            let gj = self.decoder[level].backward(&tape.decoder[level], &g, true).unwrap();
            let width = self.config.width(level);
            skip_grads[level] = Some(gj.slice(s![.., ..width, .., ..]).to_owned());
            let g_up = gj.slice(s![.., width.., .., ..]).to_owned();
            let below = if level + 1 == d {
                &tape.bottleneck.out
            } else {
                &tape.decoder[level + 1].out
            };
            g = self.up[level].backward(below, &g_up);
        }
        g = self.bottleneck.backward(&tape.bottleneck, &g, true).unwrap();
        for level in (0..d).rev() {
            let mut g_enc = max_pool2_backward(&g, &tape.pools[level]);
            g_enc.zip_mut_with(skip_grads[level].as_ref().unwrap(), |a, &b| *a = *a + b);
            let need_gx = level > 0;
            if let Some(gx) = self.encoder[level].backward(&tape.encoder[level], &g_enc, need_gx) {
                g = gx;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All learnable tensors in a stable order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend(b.params());
        }
        out.extend(self.bottleneck.params());
        for (u, b) in self.up.iter().zip(&self.decoder) {
            out.push(&u.weight);
            out.push(&u.bias);
            out.extend(b.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.params_mut());
        }
        out.extend(self.bottleneck.params_mut());
        for (u, b) in self.up.iter_mut().zip(self.decoder.iter_mut()) {
            out.push(&mut u.weight);
            out.push(&mut u.bias);
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend(b.buffers());
        }
        out.extend(self.bottleneck.buffers());
        for b in &self.decoder {
            out.extend(b.buffers());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.buffers_mut());
        }
        out.extend(self.bottleneck.buffers_mut());
        for b in &mut self.decoder {
            out.extend(b.buffers_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Encoder feature widths, shallowest first.
    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder.iter().map(|b| b.convs[1].out_ch).collect()
    }
}
