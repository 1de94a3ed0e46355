//! The convolutional autoencoder: densely connected encoder, mirrored decoder.

use super::config::NetworkConfig;
use super::layers::{
    concat, maxpool, maxpool_backward, split, upsample, upsample_backward, BnCache, BnRelu, Conv, Linear, Param,
    Tensor,
};
use crate::error::Result;
use crate::util;

/// Network weights and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub(crate) k: usize,
    pub(crate) latent_dim: usize,
    pub(crate) channels: Vec<usize>,
    pub(crate) dense: bool,
    pub(crate) enc_conv: Vec<Conv>,
    pub(crate) enc_bn: Vec<BnRelu>,
    pub(crate) enc_fc: Linear,
    pub(crate) dec_fc: Linear,
    /// Indexed by level; level `l` runs at the level's input resolution.
    pub(crate) dec_conv: Vec<Conv>,
    /// `dec_bn[l - 1]` follows `dec_conv[l]` for `l >= 1`.
    pub(crate) dec_bn: Vec<BnRelu>,
}

struct LevelTape {
    input: Tensor,
    bn: BnCache,
    bn_out_shape: (usize, usize, usize),
    pool_arg: Vec<u32>,
    /// Argmax of the pooled skip path and the shape it was pooled from.
    skip: Option<(Vec<u32>, (usize, usize, usize))>,
    y_channels: usize,
}

struct DecoderTape {
    input_shape: (usize, usize, usize),
    up: Tensor,
    bn: Option<BnCache>,
}

pub(crate) struct Tape {
    levels: Vec<LevelTape>,
    z_last: Tensor,
    fc_out: Vec<f64>,
    latent: Vec<f64>,
    dec: Vec<DecoderTape>,
}

pub(crate) struct Forward {
    pub latent: Vec<f64>,
    pub recon: Tensor,
}

/// Builds a freshly initialized autoencoder with seeded weights.
pub fn build_autoencoder(cfg: &NetworkConfig, seed: u64) -> Result<Autoencoder> {
    cfg.validate()?;
    let mut rng = util::rng(seed);
    let sizes = cfg.sizes();
    let levels = cfg.num_levels;
    let ch = &cfg.channels;

    let mut enc_conv = Vec::with_capacity(levels);
    let mut enc_bn = Vec::with_capacity(levels);
    let mut z_channels = 1;
    for l in 0..levels {
        enc_conv.push(Conv::new(&format!("enc{l}.conv"), z_channels, ch[l], false, 2.0, &mut rng));
        enc_bn.push(BnRelu::new(&format!("enc{l}.bn"), ch[l]));
        z_channels = if cfg.dense_connections && l > 0 { ch[l] + z_channels } else { ch[l] };
    }
    let s = sizes[levels];
    let flat = s * s * z_channels;
    let enc_fc = Linear::new("enc.fc", flat, cfg.latent_dim, 1.0, &mut rng);
    let dec_fc = Linear::new("dec.fc", cfg.latent_dim, s * s * ch[levels - 1], 2.0, &mut rng);
    let mut dec_conv = Vec::with_capacity(levels);
    let mut dec_bn = Vec::with_capacity(levels - 1);
    for l in 0..levels {
        let (cout, gain) = if l == 0 { (1, 1.0) } else { (ch[l - 1], 2.0) };
        dec_conv.push(Conv::new(&format!("dec{l}.conv"), ch[l], cout, l == 0, gain, &mut rng));
        if l > 0 {
            dec_bn.push(BnRelu::new(&format!("dec{l}.bn"), cout));
        }
    }
    Ok(Autoencoder {
        k: cfg.k,
        latent_dim: cfg.latent_dim,
        channels: ch.clone(),
        dense: cfg.dense_connections,
        enc_conv,
        enc_bn,
        enc_fc,
        dec_fc,
        dec_conv,
        dec_bn,
    })
}

fn shape(t: &Tensor) -> (usize, usize, usize) {
    (t.h, t.w, t.c)
}

impl Autoencoder {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.k];
        for _ in 0..self.levels() {
            s.push(s.last().unwrap() / 2);
        }
        s
    }

    /// All trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for (c, b) in self.enc_conv.iter_mut().zip(self.enc_bn.iter_mut()) {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.enc_fc.params_mut());
        v.extend(self.dec_fc.params_mut());
        for c in self.dec_conv.iter_mut() {
            v.extend(c.params_mut());
        }
        for b in self.dec_bn.iter_mut() {
            v.extend(b.params_mut());
        }
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        for (c, b) in self.enc_conv.iter().zip(&self.enc_bn) {
            v.push(&c.weight);
            v.extend(c.bias.as_ref());
            v.push(&b.gamma);
            v.push(&b.beta);
        }
        v.extend([&self.enc_fc.weight, &self.enc_fc.bias, &self.dec_fc.weight, &self.dec_fc.bias]);
        for c in &self.dec_conv {
            v.push(&c.weight);
            v.extend(c.bias.as_ref());
        }
        for b in &self.dec_bn {
            v.push(&b.gamma);
            v.push(&b.beta);
        }
        v
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Trainable scalars flattened in `params()` order.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Sets the `i`-th trainable scalar in `flat_parameters()` order.
    pub fn set_parameter(&mut self, mut i: usize, v: f64) {
        for p in self.params_mut() {
            if i < p.value.len() {
                p.value[i] = v;
                return;
            }
            i -= p.value.len();
        }
        panic!("parameter index out of range");
    }

    pub(crate) fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub(crate) fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnRelu> {
        self.enc_bn.iter_mut().chain(self.dec_bn.iter_mut())
    }

    pub(crate) fn bn_layers(&self) -> impl Iterator<Item = &BnRelu> {
        self.enc_bn.iter().chain(self.dec_bn.iter())
    }

    /// Runs the encoder only; inference-mode normalization.
    pub(crate) fn encode_tensor(&self, x: &Tensor) -> Vec<f64> {
        self.encoder(x, false).0
    }

    fn encoder(&self, x: &Tensor, train: bool) -> (Vec<f64>, Vec<LevelTape>, Tensor) {
        let mut tapes = Vec::with_capacity(self.levels());
        let mut z = x.clone();
        for l in 0..self.levels() {
            let u = self.enc_conv[l].forward(&z);
            let (v, bn) = if train {
                let (v, cache) = self.enc_bn[l].forward_train(&u);
                (v, Some(cache))
            } else {
                (self.enc_bn[l].forward_infer(&u), None)
            };
            let (y, pool_arg) = maxpool(&v);
            let y_channels = y.c;
            let (next, skip) = if self.dense && l > 0 {
                let (p, arg) = maxpool(&z);
                (concat(&y, &p), Some((arg, shape(&z))))
            } else {
                (y, None)
            };
            if let Some(bn) = bn {
                tapes.push(LevelTape { input: z, bn, bn_out_shape: shape(&v), pool_arg, skip, y_channels });
            }
            z = next;
        }
        let latent = self.enc_fc.forward(&z.data, z.n);
        (latent, tapes, z)
    }

    fn decoder(&self, latent: &[f64], n: usize, train: bool) -> (Tensor, Vec<f64>, Vec<DecoderTape>) {
        let sizes = self.sizes();
        let levels = self.levels();
        let s = sizes[levels];
        let mut fc_out = self.dec_fc.forward(latent, n);
        fc_out.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut t = Tensor { n, h: s, w: s, c: self.channels[levels - 1], data: fc_out.clone() };
        let mut tapes = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let input_shape = shape(&t);
            let up = upsample(&t, sizes[l], sizes[l]);
            let conv = self.dec_conv[l].forward(&up);
            let (out, bn) = if l == 0 {
                (conv, None)
            } else if train {
                let (o, cache) = self.dec_bn[l - 1].forward_train(&conv);
                (o, Some(cache))
            } else {
                (self.dec_bn[l - 1].forward_infer(&conv), None)
            };
            if train {
                tapes.push(DecoderTape { input_shape, up, bn });
            }
            t = out;
        }
        (t, fc_out, tapes)
    }

    /// Inference-mode reconstruction.
    pub(crate) fn reconstruct(&self, x: &Tensor) -> Forward {
        let (latent, _, z) = self.encoder(x, false);
        let (recon, _, _) = self.decoder(&latent, z.n, false);
        Forward { latent, recon }
    }

    /// Training-mode pass; batch statistics normalize every layer.
    pub(crate) fn forward_train(&self, x: &Tensor) -> (Forward, Tape) {
        let (latent, levels, z_last) = self.encoder(x, true);
        let (recon, fc_out, dec) = self.decoder(&latent, x.n, true);
        let tape = Tape { levels, z_last, fc_out, latent: latent.clone(), dec };
        (Forward { latent, recon }, tape)
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub(crate) fn update_running_stats(&mut self, tape: &Tape) {
        for (bn, lt) in self.enc_bn.iter_mut().zip(&tape.levels) {
            bn.update_running(&lt.bn);
        }
        // decoder tapes run from the deepest level to level 0
        let levels = self.levels();
        for (i, dt) in tape.dec.iter().enumerate() {
            let l = levels - 1 - i;
            if let (Some(cache), true) = (&dt.bn, l > 0) {
                self.dec_bn[l - 1].update_running(cache);
            }
        }
    }

    /// Accumulates parameter gradients given `dL/d recon` and `dL/d latent`.
    pub(crate) fn backward(&mut self, tape: &Tape, d_recon: &Tensor, d_latent: &[f64]) {
        let levels = self.levels();
        let n = d_recon.n;

        let mut d = d_recon.clone();
        for (i, dt) in tape.dec.iter().enumerate().rev() {
            let l = levels - 1 - i;
            if l > 0 {
                d = self.dec_bn[l - 1].backward(dt.bn.as_ref().expect("training tape"), &d);
            }
            let du = self.dec_conv[l].backward(&dt.up, &d, true).expect("input gradient");
            d = upsample_backward(&du, dt.input_shape.0, dt.input_shape.1);
        }
        let mut d_fc = d.data;
        for (g, o) in d_fc.iter_mut().zip(&tape.fc_out) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_lat = self.dec_fc.backward(&tape.latent, &d_fc, n);
        for (a, b) in d_lat.iter_mut().zip(d_latent) {
            *a += b;
        }
        let d_flat = self.enc_fc.backward(&tape.z_last.data, &d_lat, n);
        let mut dz = Tensor { data: d_flat, ..tape.z_last.clone() };

        for l in (0..levels).rev() {
            let lt = &tape.levels[l];
            let (dy, d_skip) = match &lt.skip {
                Some(_) => {
                    let (a, b) = split(&dz, lt.y_channels);
                    (a, Some(b))
                }
                None => (dz, None),
            };
            let (h, w, c) = lt.bn_out_shape;
            let mut dv = Tensor::zeros(n, h, w, c);
            maxpool_backward(&dy, &lt.pool_arg, &mut dv);
            let du = self.enc_bn[l].backward(&lt.bn, &dv);
            let dprev = self.enc_conv[l].backward(&lt.input, &du, l > 0);
            if l == 0 {
                break;
            }
            let mut dprev = dprev.expect("input gradient");
            if let (Some(ds), Some((arg, _))) = (d_skip, &lt.skip) {
                maxpool_backward(&ds, arg, &mut dprev);
            }
            dz = dprev;
        }
    }
}

/// Circulant `K x K` images of feature rows, NHWC with one channel.
pub(crate) fn circulant_batch<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, k: usize) -> Tensor {
    let n = rows.len();
    let mut t = Tensor::zeros(n, k, k, 1);
    let mut row64 = vec![0.0; k];
    for (i, row) in rows.enumerate() {
        for (a, &b) in row64.iter_mut().zip(row) {
            *a = b as f64;
        }
        crate::features::write_circulant(&row64, &mut t.data[i * k * k..(i + 1) * k * k]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dense: bool) -> NetworkConfig {
        NetworkConfig { k: 12, latent_dim: 3, num_levels: 3, channels: vec![2, 3, 4], c: 2, dense_connections: dense, ..Default::default() }
    }

    #[test]
    fn shapes_propagate() {
        for dense in [false, true] {
            let ae = build_autoencoder(&tiny(dense), 1).unwrap();
            let x = Tensor::zeros(3, 12, 12, 1);
            let f = ae.reconstruct(&x);
            assert_eq!(f.latent.len(), 9);
            assert_eq!((f.recon.n, f.recon.h, f.recon.w, f.recon.c), (3, 12, 12, 1));
            assert!(f.recon.data.iter().all(|v| v.is_finite()));
        }
        // skip path widens the flattened encoder output: 1x1x(4+3+2)
        let ae = build_autoencoder(&tiny(true), 1).unwrap();
        assert_eq!(ae.enc_fc.din, 9);
        let ae = build_autoencoder(&tiny(false), 1).unwrap();
        assert_eq!(ae.enc_fc.din, 4);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_autoencoder(&tiny(true), 5).unwrap();
        let b = build_autoencoder(&tiny(true), 5).unwrap();
        let c = build_autoencoder(&tiny(true), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_parameters(), c.flat_parameters());
    }

    #[test]
    fn parameter_accessors_agree() {
        let mut a = build_autoencoder(&tiny(true), 2).unwrap();
        let n = a.num_parameters();
        assert_eq!(a.flat_parameters().len(), n);
        a.set_parameter(n - 1, 42.0);
        assert_eq!(*a.flat_parameters().last().unwrap(), 42.0);
    }
}
