//! Convolutional encoder-decoder noise predictor.
//!
//! Residual blocks with group normalization, stride-2 convolution
//! downsampling, nearest-neighbour upsampling with skip concatenation, and
//! a sinusoidal time embedding passed through a two-layer perceptron per
//! block. The second convolution of each block and the output head start
//! at zero, so an untrained network predicts exactly zero noise.
//!
//! All parameters live in a single flat buffer; a name/shape registry
//! drives checkpointing and the optimizer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::image::MaterialImage;

use super::layers::*;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub level_mults: Vec<usize>,
    pub temb_dim: usize,
}

impl NetConfig {
    /// Desk-scale default: 3 resolution levels, base width 32, 128-d
    /// time embedding.
    pub fn desk_default() -> Self {
        Self { in_channels: 2, base_width: 32, level_mults: vec![1, 2, 4], temb_dim: 128 }
    }

    /// Tiny configuration for fast unit tests.
    pub fn tiny() -> Self {
        Self { in_channels: 2, base_width: 8, level_mults: vec![1, 2], temb_dim: 16 }
    }

    pub fn levels(&self) -> usize {
        self.level_mults.len()
    }

    /// Input dimensions must be divisible by this factor.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

struct Registry {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl Registry {
    fn new() -> Self {
        Self { entries: Vec::new(), len: 0 }
    }

    fn alloc(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.len..self.len + n;
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), range: range.clone() });
        self.len += n;
        range
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> ConvSpec {
        let w = self.alloc(format!("{name}.w"), &[c_out, c_in, kernel, kernel]);
        let b = self.alloc(format!("{name}.b"), &[c_out]);
        ConvSpec { c_in, c_out, kernel, stride, w, b }
    }

    fn group_norm(&mut self, name: &str, c: usize) -> GroupNormSpec {
        let gamma = self.alloc(format!("{name}.gamma"), &[c]);
        let beta = self.alloc(format!("{name}.beta"), &[c]);
        let groups = [8usize, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap();
        GroupNormSpec { c, groups, gamma, beta }
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearSpec {
        let w = self.alloc(format!("{name}.w"), &[d_out, d_in]);
        let b = self.alloc(format!("{name}.b"), &[d_out]);
        LinearSpec { d_in, d_out, w, b }
    }
}

struct ResBlockSpec {
    c_out: usize,
    gn1: GroupNormSpec,
    conv1: ConvSpec,
    lin1: LinearSpec,
    lin2: LinearSpec,
    gn2: GroupNormSpec,
    conv2: ConvSpec,
    skip: Option<ConvSpec>,
}

impl ResBlockSpec {
    fn build(reg: &mut Registry, name: &str, c_in: usize, c_out: usize, temb_dim: usize) -> Self {
        Self {
            c_out,
            gn1: reg.group_norm(&format!("{name}.gn1"), c_in),
            conv1: reg.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1),
            lin1: reg.linear(&format!("{name}.temb1"), temb_dim, temb_dim),
            lin2: reg.linear(&format!("{name}.temb2"), temb_dim, c_out),
            gn2: reg.group_norm(&format!("{name}.gn2"), c_out),
            conv2: reg.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| reg.conv(&format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }
}

struct ResBlockCache {
    gn1: GroupNormCache,
    silu1: SiluCache,
    conv1: ConvCache,
    temb_in: Vec<f32>,
    temb_h: Vec<f32>, // pre-SiLU hidden
    temb_act: Vec<f32>,
    gn2: GroupNormCache,
    silu2: SiluCache,
    conv2: ConvCache,
    skip: Option<ConvCache>,
}

fn resblock_forward(
    spec: &ResBlockSpec,
    params: &[f32],
    x: &Tensor,
    temb: &[f32],
) -> (Tensor, ResBlockCache) {
    let (g1, gn1) = group_norm_forward(&spec.gn1, params, x);
    let (a1, silu1) = silu_forward(&g1);
    let (mut h, conv1) = conv_forward(&spec.conv1, params, &a1);

    let temb_h = linear_forward(&spec.lin1, params, temb);
    let (temb_act, _) = silu_vec_forward(&temb_h);
    let bias = linear_forward(&spec.lin2, params, &temb_act);
    for c in 0..spec.c_out {
        let b = bias[c];
        for v in h.plane_mut(c) {
            *v += b;
        }
    }

    let (g2, gn2) = group_norm_forward(&spec.gn2, params, &h);
    let (a2, silu2) = silu_forward(&g2);
    let (h2, conv2) = conv_forward(&spec.conv2, params, &a2);

    let (skip_out, skip_cache) = match &spec.skip {
        Some(sc) => {
            let (s, c) = conv_forward(sc, params, x);
            (s, Some(c))
        }
        None => (x.clone(), None),
    };
    let mut out = skip_out;
    for (o, v) in out.data.iter_mut().zip(h2.data.iter()) {
        *o += v;
    }
    let cache = ResBlockCache {
        gn1,
        silu1,
        conv1,
        temb_in: temb.to_vec(),
        temb_h,
        temb_act,
        gn2,
        silu2,
        conv2,
        skip: skip_cache,
    };
    (out, cache)
}

/// Returns (dx, dtemb).
fn resblock_backward(
    spec: &ResBlockSpec,
    params: &[f32],
    cache: &ResBlockCache,
    dout: &Tensor,
    mut grads: Option<&mut [f32]>,
) -> (Tensor, Vec<f32>) {
    // Residual branch.
    let da2 = conv_backward(&spec.conv2, params, &cache.conv2, dout, grads.as_deref_mut());
    let dg2 = silu_backward(&cache.silu2, &da2);
    let dh = group_norm_backward(&spec.gn2, params, &cache.gn2, &dg2, grads.as_deref_mut());

    // Time-embedding bias: gradient per channel is the spatial sum.
    let dbias: Vec<f32> = (0..spec.c_out).map(|c| dh.plane(c).iter().sum()).collect();
    let dtemb_act =
        linear_backward(&spec.lin2, params, &cache.temb_act, &dbias, grads.as_deref_mut());
    let dtemb_h = silu_vec_backward(&cache.temb_h, &dtemb_act);
    let dtemb =
        linear_backward(&spec.lin1, params, &cache.temb_in, &dtemb_h, grads.as_deref_mut());

    let da1 = conv_backward(&spec.conv1, params, &cache.conv1, &dh, grads.as_deref_mut());
    let dg1 = silu_backward(&cache.silu1, &da1);
    let mut dx = group_norm_backward(&spec.gn1, params, &cache.gn1, &dg1, grads.as_deref_mut());

    // Skip branch.
    match (&spec.skip, &cache.skip) {
        (Some(sc), Some(scache)) => {
            let ds = conv_backward(sc, params, scache, dout, grads);
            for (a, b) in dx.data.iter_mut().zip(ds.data.iter()) {
                *a += b;
            }
        }
        _ => {
            for (a, b) in dx.data.iter_mut().zip(dout.data.iter()) {
                *a += b;
            }
        }
    }
    (dx, dtemb)
}

/// Trainable convolutional denoiser.
pub struct DenoiserNet {
    cfg: NetConfig,
    params: Vec<f32>,
    entries: Vec<ParamEntry>,
    conv_in: ConvSpec,
    enc: Vec<ResBlockSpec>,
    down: Vec<ConvSpec>,
    bottom: ResBlockSpec,
    up_conv: Vec<ConvSpec>,
    dec: Vec<ResBlockSpec>,
    head_gn: GroupNormSpec,
    head_conv: ConvSpec,
}

pub struct ForwardCache {
    conv_in: ConvCache,
    enc: Vec<ResBlockCache>,
    down: Vec<ConvCache>,
    bottom: ResBlockCache,
    up_conv: Vec<ConvCache>,
    dec: Vec<ResBlockCache>,
    skip_channels: Vec<usize>,
    head_gn: GroupNormCache,
    head_silu: SiluCache,
    head_conv: ConvCache,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut reg = Registry::new();
        let base = cfg.base_width;
        let levels = cfg.levels();
        let conv_in = reg.conv("conv_in", cfg.in_channels, base, 3, 1);

        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut cur = base;
        for l in 0..levels {
            let w = base * cfg.level_mults[l];
            enc.push(ResBlockSpec::build(&mut reg, &format!("enc{l}"), cur, w, cfg.temb_dim));
            cur = w;
            if l + 1 < levels {
                down.push(reg.conv(&format!("down{l}"), cur, cur, 3, 2));
            }
        }
        let bottom = ResBlockSpec::build(&mut reg, "bottom", cur, cur, cfg.temb_dim);

        let mut up_conv = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            let w = base * cfg.level_mults[l];
            up_conv.push(reg.conv(&format!("up{l}"), cur, w, 3, 1));
            dec.push(ResBlockSpec::build(&mut reg, &format!("dec{l}"), 2 * w, w, cfg.temb_dim));
            cur = w;
        }
        let head_gn = reg.group_norm("head.gn", cur);
        let head_conv = reg.conv("head.conv", cur, cfg.in_channels, 3, 1);

        let mut net = Self {
            cfg,
            params: vec![0.0; reg.len],
            entries: reg.entries,
            conv_in,
            enc,
            down,
            bottom,
            up_conv,
            dec,
            head_gn,
            head_conv,
        };
        net.initialize(seed);
        net
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        // Zero-started tensors: second conv of each res block and the head.
        let zero_names: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.name.ends_with("conv2.w") || e.name == "head.conv.w")
            .map(|e| e.name.clone())
            .collect();
        for entry in &self.entries {
            let slice = &mut self.params[entry.range.clone()];
            if entry.name.ends_with(".gamma") {
                slice.fill(1.0);
            } else if entry.name.ends_with(".b")
                || entry.name.ends_with(".beta")
                || zero_names.contains(&entry.name)
            {
                slice.fill(0.0);
            } else {
                // He-normal on fan-in.
                let fan_in: usize = entry.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                for v in slice.iter_mut() {
                    *v = dist.sample(&mut rng) as f32;
                }
            }
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Tensor) {
        let d = self.cfg.size_divisor();
        assert!(
            x.h % d == 0 && x.w % d == 0,
            "denoiser input {}x{} must be divisible by {d}",
            x.h,
            x.w
        );
        assert_eq!(x.c, self.cfg.in_channels, "denoiser expects {} channels", self.cfg.in_channels);
    }

    /// Forward pass retaining every intermediate needed by backward.
    pub fn forward(&self, x: &Tensor, t: usize) -> (Tensor, ForwardCache) {
        self.check_input(x);
        let temb = sinusoidal_embedding(t, self.cfg.temb_dim);
        let p = &self.params[..];

        let (mut h, conv_in) = conv_forward(&self.conv_in, p, x);
        let mut enc_caches = Vec::new();
        let mut down_caches = Vec::new();
        let mut skips: Vec<Tensor> = Vec::new();
        let levels = self.cfg.levels();
        for l in 0..levels {
            let (out, c) = resblock_forward(&self.enc[l], p, &h, &temb);
            enc_caches.push(c);
            h = out;
            if l + 1 < levels {
                skips.push(h.clone());
                let (out, c) = conv_forward(&self.down[l], p, &h);
                down_caches.push(c);
                h = out;
            }
        }
        let (mut h, bottom) = resblock_forward(&self.bottom, p, &h, &temb);

        let mut up_caches = Vec::new();
        let mut dec_caches = Vec::new();
        let mut skip_channels = Vec::new();
        for (i, _) in (0..levels - 1).rev().enumerate() {
            let up = upsample2_forward(&h);
            let (u, c) = conv_forward(&self.up_conv[i], p, &up);
            up_caches.push(c);
            let skip = skips.pop().expect("skip stack");
            skip_channels.push(skip.c);
            let cat = concat_channels(&u, &skip);
            let (out, c) = resblock_forward(&self.dec[i], p, &cat, &temb);
            dec_caches.push(c);
            h = out;
        }

        let (g, head_gn) = group_norm_forward(&self.head_gn, p, &h);
        let (a, head_silu) = silu_forward(&g);
        let (out, head_conv) = conv_forward(&self.head_conv, p, &a);
        let cache = ForwardCache {
            conv_in,
            enc: enc_caches,
            down: down_caches,
            bottom,
            up_conv: up_caches,
            dec: dec_caches,
            skip_channels,
            head_gn,
            head_silu,
            head_conv,
        };
        (out, cache)
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when
    /// given (same layout as `params`) and returns the input cotangent.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dout: &Tensor,
        mut grads: Option<&mut [f32]>,
    ) -> Tensor {
        let p = &self.params[..];
        let da = conv_backward(&self.head_conv, p, &cache.head_conv, dout, grads.as_deref_mut());
        let dg = silu_backward(&cache.head_silu, &da);
        let mut dh = group_norm_backward(&self.head_gn, p, &cache.head_gn, &dg, grads.as_deref_mut());

        let levels = self.cfg.levels();
        let mut dskips: Vec<Tensor> = Vec::new();
        for i in (0..levels - 1).rev() {
            let (dcat, _dtemb) =
                resblock_backward(&self.dec[i], p, &cache.dec[i], &dh, grads.as_deref_mut());
            let u_channels = dcat.c - cache.skip_channels[i];
            let (du, dskip) = split_channels(&dcat, u_channels);
            dskips.push(dskip);
            let dup = conv_backward(&self.up_conv[i], p, &cache.up_conv[i], &du, grads.as_deref_mut());
            dh = upsample2_backward(&dup);
        }

        let (mut dh, _) = resblock_backward(&self.bottom, p, &cache.bottom, &dh, grads.as_deref_mut());
        for l in (0..levels).rev() {
            if l + 1 < levels {
                let mut d = conv_backward(&self.down[l], p, &cache.down[l], &dh, grads.as_deref_mut());
                let dskip = dskips.pop().expect("skip cotangent");
                for (a, b) in d.data.iter_mut().zip(dskip.data.iter()) {
                    *a += b;
                }
                dh = d;
            }
            let (d, _) = resblock_backward(&self.enc[l], p, &cache.enc[l], &dh, grads.as_deref_mut());
            dh = d;
        }
        conv_backward(&self.conv_in, p, &cache.conv_in, &dh, grads)
    }

    /// Forward without retaining caches is not cheaper here; callers that
    /// only need the output can drop the cache.
    pub fn predict_tensor(&self, x: &Tensor, t: usize) -> Tensor {
        self.forward(x, t).0
    }
}

pub fn material_to_tensor(img: &MaterialImage) -> Tensor {
    let (h, w) = (img.height(), img.width());
    let mut t = Tensor::zeros(2, h, w);
    for (d, s) in t.plane_mut(0).iter_mut().zip(img.water.data.iter()) {
        *d = *s as f32;
    }
    for (d, s) in t.plane_mut(1).iter_mut().zip(img.calcium.data.iter()) {
        *d = *s as f32;
    }
    t
}

pub fn tensor_to_material(t: &Tensor, pixel_size_mm: f64) -> MaterialImage {
    let mut img = MaterialImage::zeros(t.h, t.w, pixel_size_mm);
    for (d, s) in img.water.data.iter_mut().zip(t.plane(0).iter()) {
        *d = *s as f64;
    }
    for (d, s) in img.calcium.data.iter_mut().zip(t.plane(1).iter()) {
        *d = *s as f64;
    }
    img
}

impl crate::diffusion::ScoreModel for DenoiserNet {
    fn predict(
        &self,
        x_t: &MaterialImage,
        t: usize,
        _sched: &crate::diffusion::DiffusionSchedule,
    ) -> MaterialImage {
        let x = material_to_tensor(x_t);
        let out = self.predict_tensor(&x, t);
        tensor_to_material(&out, x_t.pixel_size_mm)
    }

    fn vjp(
        &self,
        x_t: &MaterialImage,
        t: usize,
        _sched: &crate::diffusion::DiffusionSchedule,
        cotangent: &MaterialImage,
    ) -> MaterialImage {
        let x = material_to_tensor(x_t);
        let (_, cache) = self.forward(&x, t);
        let dout = material_to_tensor(cotangent);
        let dx = self.backward(&cache, &dout, None);
        tensor_to_material(&dx, x_t.pixel_size_mm)
    }

    fn predict_with_vjp<'a>(
        &'a self,
        x_t: &MaterialImage,
        t: usize,
        _sched: &'a crate::diffusion::DiffusionSchedule,
    ) -> (MaterialImage, crate::diffusion::score::VjpClosure<'a>) {
        let x = material_to_tensor(x_t);
        let (out, cache) = self.forward(&x, t);
        let pred = tensor_to_material(&out, x_t.pixel_size_mm);
        let px = x_t.pixel_size_mm;
        let closure = move |cot: &MaterialImage| {
            let dout = material_to_tensor(cot);
            let dx = self.backward(&cache, &dout, None);
            tensor_to_material(&dx, px)
        };
        (pred, Box::new(closure))
    }
}

/// Validation helper shared by samplers that require net-compatible shapes.
pub fn check_net_shape(cfg: &NetConfig, height: usize, width: usize) -> Result<()> {
    let d = cfg.size_divisor();
    if height % d != 0 || width % d != 0 {
        return Err(CoreError::InvalidConfig(format!(
            "image {height}x{width} not divisible by the network's factor {d}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn untrained_net_outputs_zero() {
        let net = DenoiserNet::new(NetConfig::tiny(), 1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let data = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(2, 8, 8, data);
        let out = net.predict_tensor(&x, 17);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let net = DenoiserNet::new(NetConfig::tiny(), 1);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // Perturb params so the output is nonzero.
        let mut net = net;
        for v in net.params_mut().iter_mut() {
            *v += rng.gen_range(-0.05f32..0.05);
        }
        let data: Vec<f32> = (0..2 * 12 * 16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(2, 12, 16, data);
        let a = net.predict_tensor(&x, 5);
        let b = net.predict_tensor(&x, 5);
        assert_eq!(a.data, b.data);
        assert_eq!((a.c, a.h, a.w), (2, 12, 16));
        let c = net.predict_tensor(&x, 6);
        assert_ne!(a.data, c.data, "time embedding must matter");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = DenoiserNet::new(NetConfig::tiny(), 7);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for v in net.params_mut().iter_mut() {
            *v += rng.gen_range(-0.05f32..0.05);
        }
        let x = Tensor::from_vec(
            2,
            4,
            4,
            (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let cot = Tensor::from_vec(
            2,
            4,
            4,
            (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let t = 3;
        let (out, cache) = net.forward(&x, t);
        let _ = out;
        let mut grads = vec![0.0f32; net.n_params()];
        let dx = net.backward(&cache, &cot, Some(&mut grads));

        let loss = |net: &DenoiserNet, x: &Tensor| -> f64 {
            let o = net.predict_tensor(x, t);
            o.data.iter().zip(cot.data.iter()).map(|(a, b)| (a * b) as f64).sum()
        };

        // Input gradient.
        let h = 1e-2f32;
        for idx in [0usize, 9, 20, 31] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h as f64);
            let an = dx.data[idx] as f64;
            assert!(
                (fd - an).abs() <= 0.05 * fd.abs().max(0.3),
                "input {idx}: fd {fd} vs analytic {an}"
            );
        }

        // Parameter gradients spread over layer types.
        let picks: Vec<usize> = {
            let e = net.param_entries();
            let pick = |name: &str| -> usize {
                let entry = e.iter().find(|p| p.name == name).unwrap();
                entry.range.start + entry.range.len() / 2
            };
            vec![
                pick("conv_in.w"),
                pick("enc0.gn1.gamma"),
                pick("enc0.conv1.w"),
                pick("enc0.temb2.w"),
                pick("bottom.conv2.w"),
                pick("dec0.skip.w"),
                pick("head.conv.w"),
            ]
        };
        for idx in picks {
            let orig = net.params()[idx];
            net.params_mut()[idx] = orig + h;
            let lp = loss(&net, &x);
            net.params_mut()[idx] = orig - h;
            let lm = loss(&net, &x);
            net.params_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = grads[idx] as f64;
            assert!(
                (fd - an).abs() <= 0.05 * fd.abs().max(0.3),
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn vjp_agrees_with_jacobian_probe() {
        use crate::diffusion::{standard_schedule, ScoreModel};
        let mut net = DenoiserNet::new(NetConfig::tiny(), 4);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for v in net.params_mut().iter_mut() {
            *v += rng.gen_range(-0.05f32..0.05);
        }
        let sched = standard_schedule();
        let mut x = MaterialImage::zeros(4, 4, 1.0);
        for v in x.water.data.iter_mut().chain(x.calcium.data.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut cot = MaterialImage::zeros(4, 4, 1.0);
        for v in cot.water.data.iter_mut().chain(cot.calcium.data.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let vjp = net.vjp(&x, 9, &sched, &cot);
        // <J^T cot, e_j> == <cot, J e_j> via forward differences.
        let h = 1e-2;
        for (m, j) in [(0usize, 3usize), (1, 10)] {
            let mut xp = x.clone();
            xp.channel_mut(m).data[j] += h;
            let mut xm = x.clone();
            xm.channel_mut(m).data[j] -= h;
            let pp = net.predict(&xp, 9, &sched);
            let pm = net.predict(&xm, 9, &sched);
            let mut fd = 0.0;
            for mm in 0..2 {
                for jj in 0..16 {
                    fd += cot.channel(mm).data[jj]
                        * (pp.channel(mm).data[jj] - pm.channel(mm).data[jj])
                        / (2.0 * h);
                }
            }
            let an = vjp.channel(m).data[j];
            assert!((fd - an).abs() <= 0.05 * fd.abs().max(0.3), "fd {fd} vs vjp {an}");
        }
    }

    #[test]
    fn param_names_are_unique_and_stable() {
        let net = DenoiserNet::new(NetConfig::desk_default(), 0);
        let names: Vec<&str> = net.param_entries().iter().map(|e| e.name.as_str()).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        assert!(names.contains(&"conv_in.w"));
        assert!(names.contains(&"head.conv.w"));
        // Desk config should be under ~2M parameters.
        assert!(net.n_params() < 2_000_000, "n_params = {}", net.n_params());
    }
}
