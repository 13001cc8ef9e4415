//! Cross-conditioned UNet: translates the source image pair into the target
//! pair, fusing a distribution latent into every encoder scale through a
//! condition-embedding block.

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{CdmError, Result};
use crate::image::{ImageBatch, ValueRange};
use crate::mrm::Latent;
use crate::nn::{
    accumulate, silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Adam, Conv2d,
    LayerNormChan, Linear, Params,
};

/// One encoder scale's fusion block: the feature path is
/// LayerNorm -> SiLU -> 1x1 conv, the condition path is affine -> SiLU ->
/// affine broadcast over spatial positions, merged by addition.
#[derive(Debug, Clone)]
pub struct CondEmbed {
    pub ln: LayerNormChan,
    pub conv: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CondEmbed {
    pub fn new(rng: &mut ChaCha20Rng, in_c: usize, out_c: usize, latent_dim: usize) -> Self {
        CondEmbed {
            ln: LayerNormChan::new(in_c),
            conv: Conv2d::new(rng, in_c, out_c, 1, 1, 0),
            fc1: Linear::new(rng, latent_dim, latent_dim),
            fc2: Linear::new(rng, latent_dim, out_c),
        }
    }

    fn zeros_like(&self) -> Self {
        CondEmbed {
            ln: self.ln.zeros_like(),
            conv: self.conv.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    /// Fused feature map, same spatial dims, `out_c` channels.
    pub fn forward(&self, x: &Array4<f64>, cond: &Latent) -> Array4<f64> {
        let feat = self.conv.forward(&silu(&self.ln.forward(x)));
        let c1 = self.fc1.forward(&cond.clone().insert_axis(Axis(0)));
        let cvec = self.fc2.forward(&silu(&c1));
        let mut out = feat;
        for n in 0..out.shape()[0] {
            for c in 0..out.shape()[1] {
                out.slice_mut(s![n, c, .., ..]).mapv_inplace(|v| v + cvec[[0, c]]);
            }
        }
        out
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        cond: &Latent,
        gout: &Array4<f64>,
        g: &mut CondEmbed,
    ) -> Array4<f64> {
        // condition path
        let cond2 = cond.clone().insert_axis(Axis(0));
        let c1 = self.fc1.forward(&cond2);
        let act = silu(&c1);
        let mut gcvec = Array2::zeros((1, gout.shape()[1]));
        for n in 0..gout.shape()[0] {
            for c in 0..gout.shape()[1] {
                gcvec[[0, c]] += gout.slice(s![n, c, .., ..]).sum();
            }
        }
        let gact = self.fc2.backward(&act, &gcvec, &mut g.fc2);
        let gc1 = silu_backward(&c1, &gact);
        self.fc1.backward(&cond2, &gc1, &mut g.fc1);
        // feature path
        let ln_out = self.ln.forward(x);
        let act_f = silu(&ln_out);
        let gact_f = self.conv.backward(&act_f, gout, &mut g.conv);
        let gln = silu_backward(&ln_out, &gact_f);
        self.ln.backward(x, &gln, &mut g.ln)
    }
}

impl Params for CondEmbed {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.ln.visit(f);
        self.conv.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.ln.visit_mut(f);
        self.conv.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CUNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_scales: usize,
    pub base_width: usize,
    pub latent_dim: usize,
}

impl CUNetConfig {
    pub fn new(image_size: usize, latent_dim: usize) -> Self {
        CUNetConfig {
            image_size,
            in_channels: 2,
            out_channels: 2,
            n_scales: 4,
            base_width: 32,
            latent_dim,
        }
    }

    /// Channels produced by scale `s` (and carried by its skip connection).
    pub fn width(&self, s: usize) -> usize {
        self.base_width << s
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 2 {
            return Err(CdmError::invalid("need at least 2 scales"));
        }
        if self.image_size % (1 << self.n_scales) != 0 {
            return Err(CdmError::invalid(format!(
                "image size {} not divisible by 2^{}",
                self.image_size, self.n_scales
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CUNetParams {
    pub cfg: CUNetConfig,
    pub embeds: Vec<CondEmbed>,
    pub downs: Vec<Conv2d>,
    pub mid: Conv2d,
    pub dec: Vec<Conv2d>,
    pub out_conv: Conv2d,
}

impl Params for CUNetParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for e in &self.embeds {
            e.visit(f);
        }
        for d in &self.downs {
            d.visit(f);
        }
        self.mid.visit(f);
        for d in &self.dec {
            d.visit(f);
        }
        self.out_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for e in &mut self.embeds {
            e.visit_mut(f);
        }
        for d in &mut self.downs {
            d.visit_mut(f);
        }
        self.mid.visit_mut(f);
        for d in &mut self.dec {
            d.visit_mut(f);
        }
        self.out_conv.visit_mut(f);
    }
}

impl CUNetParams {
    pub fn init(cfg: CUNetConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.n_scales;
        let mut embeds = Vec::with_capacity(l);
        let mut downs = Vec::with_capacity(l);
        for s in 0..l {
            let in_c = if s == 0 { cfg.in_channels } else { cfg.width(s - 1) };
            let out_c = cfg.width(s);
            embeds.push(CondEmbed::new(rng, in_c, out_c, cfg.latent_dim));
            downs.push(Conv2d::new(rng, out_c, out_c, 3, 2, 1));
        }
        let c_top = cfg.width(l - 1);
        let mid = Conv2d::new(rng, c_top, c_top, 3, 1, 1);
        // decoder step s consumes upsampled features plus the scale-s skip
        let mut dec = Vec::with_capacity(l);
        for s in 0..l {
            // input is the previous decoder output (or the bottleneck at the
            // top), which always carries width(s) channels, plus the skip
            let up_c = cfg.width(s);
            let out_c = if s == 0 { cfg.base_width } else { cfg.width(s - 1) };
            dec.push(Conv2d::new(rng, up_c + cfg.width(s), out_c, 3, 1, 1));
        }
        let out_conv = Conv2d::new(rng, cfg.base_width, cfg.out_channels, 1, 1, 0);
        Ok(CUNetParams {
            cfg,
            embeds,
            downs,
            mid,
            dec,
            out_conv,
        })
    }

    pub fn zeros_like(&self) -> Self {
        CUNetParams {
            cfg: self.cfg.clone(),
            embeds: self.embeds.iter().map(|e| e.zeros_like()).collect(),
            downs: self.downs.iter().map(|d| d.zeros_like()).collect(),
            mid: self.mid.zeros_like(),
            dec: self.dec.iter().map(|d| d.zeros_like()).collect(),
            out_conv: self.out_conv.zeros_like(),
        }
    }

    /// Zero every parameter on the condition paths; the network output then
    /// ignores the condition entirely.
    pub fn zero_condition_branch(&mut self) {
        for e in &mut self.embeds {
            e.fc1.w.fill(0.0);
            e.fc1.b.fill(0.0);
            e.fc2.w.fill(0.0);
            e.fc2.b.fill(0.0);
        }
    }
}

/// Everything the backward pass needs from a forward evaluation.
pub struct CunetCache {
    pub embed_in: Vec<Array4<f64>>,
    pub skips: Vec<Array4<f64>>,
    pub mid_in: Array4<f64>,
    pub mid_pre: Array4<f64>,
    pub dec_up_in: Vec<Array4<f64>>,
    pub dec_cat: Vec<Array4<f64>>,
    pub dec_pre: Vec<Array4<f64>>,
    pub out_in: Array4<f64>,
    pub output: Array4<f64>,
}

fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

pub fn cunet_forward_cached(
    params: &CUNetParams,
    source: &Array4<f64>,
    cond: &Latent,
) -> Result<CunetCache> {
    let cfg = &params.cfg;
    let (h, w) = (source.shape()[2], source.shape()[3]);
    if source.shape()[1] != cfg.in_channels {
        return Err(CdmError::shape(
            format!("{} channels", cfg.in_channels),
            format!("{}", source.shape()[1]),
        ));
    }
    if h != w || h % (1 << cfg.n_scales) != 0 {
        return Err(CdmError::invalid(format!(
            "spatial dims {h}x{w} must be square and divisible by 2^{}",
            cfg.n_scales
        )));
    }
    if cond.len() != cfg.latent_dim {
        return Err(CdmError::shape(
            format!("latent dim {}", cfg.latent_dim),
            format!("{}", cond.len()),
        ));
    }
    let l = cfg.n_scales;
    let mut embed_in = Vec::with_capacity(l);
    let mut skips = Vec::with_capacity(l);
    let mut x = source.clone();
    for s in 0..l {
        embed_in.push(x.clone());
        let fused = params.embeds[s].forward(&x, cond);
        skips.push(fused.clone());
        x = params.downs[s].forward(&fused);
    }
    let mid_in = x.clone();
    let mid_pre = params.mid.forward(&mid_in);
    x = silu(&mid_pre);
    let mut dec_up_in = vec![Array4::zeros((0, 0, 0, 0)); l];
    let mut dec_cat = vec![Array4::zeros((0, 0, 0, 0)); l];
    let mut dec_pre = vec![Array4::zeros((0, 0, 0, 0)); l];
    for s in (0..l).rev() {
        dec_up_in[s] = x.clone();
        let up = upsample_nearest2(&x);
        let cat = concat_channels(&up, &skips[s]);
        dec_cat[s] = cat.clone();
        let pre = params.dec[s].forward(&cat);
        dec_pre[s] = pre.clone();
        x = silu(&pre);
    }
    let out_in = x;
    let output = params.out_conv.forward(&out_in);
    Ok(CunetCache {
        embed_in,
        skips,
        mid_in,
        mid_pre,
        dec_up_in,
        dec_cat,
        dec_pre,
        out_in,
        output,
    })
}

/// Translate normalized source images into normalized target images.
pub fn cunet_forward(
    params: &CUNetParams,
    source: &ImageBatch,
    cond: &Latent,
) -> Result<ImageBatch> {
    let cache = cunet_forward_cached(params, &source.data, cond)?;
    Ok(ImageBatch {
        data: cache.output,
        range: ValueRange::Signed,
    })
}

/// Backpropagate a gradient w.r.t. the output; accumulates parameter
/// gradients into `grads` and returns the gradient w.r.t. the source.
pub fn cunet_backward(
    params: &CUNetParams,
    cond: &Latent,
    cache: &CunetCache,
    gout: &Array4<f64>,
    grads: &mut CUNetParams,
) -> Array4<f64> {
    let l = params.cfg.n_scales;
    let mut g = params.out_conv.backward(&cache.out_in, gout, &mut grads.out_conv);
    let mut skip_grads: Vec<Option<Array4<f64>>> = vec![None; l];
    for s in 0..l {
        let gpre = silu_backward(&cache.dec_pre[s], &g);
        let gcat = params.dec[s].backward(&cache.dec_cat[s], &gpre, &mut grads.dec[s]);
        let up_c = cache.dec_cat[s].shape()[1] - cache.skips[s].shape()[1];
        let gup = gcat.slice(s![.., ..up_c, .., ..]).to_owned();
        skip_grads[s] = Some(gcat.slice(s![.., up_c.., .., ..]).to_owned());
        g = upsample_nearest2_backward(&gup);
    }
    let gmid_pre = silu_backward(&cache.mid_pre, &g);
    g = params.mid.backward(&cache.mid_in, &gmid_pre, &mut grads.mid);
    for s in (0..l).rev() {
        let mut gfused = params.downs[s].backward(&cache.skips[s], &g, &mut grads.downs[s]);
        gfused += skip_grads[s].as_ref().unwrap();
        g = params.embeds[s].backward(&cache.embed_in[s], cond, &gfused, &mut grads.embeds[s]);
    }
    g
}

/// Mean over all pixels and channels of the squared difference.
pub fn synthesis_loss(pred: &ImageBatch, gt: &ImageBatch) -> Result<f64> {
    if pred.data.shape() != gt.data.shape() {
        return Err(CdmError::shape(
            format!("{:?}", gt.data.shape()),
            format!("{:?}", pred.data.shape()),
        ));
    }
    Ok((&pred.data - &gt.data).mapv(|v| v * v).mean().unwrap())
}

/// Loss and parameter gradients for one (source, target, condition) case.
/// Inputs are single images `[c, h, w]` in network range.
pub fn cunet_case_loss_and_grad(
    params: &CUNetParams,
    source: &ndarray::Array3<f64>,
    target: &ndarray::Array3<f64>,
    cond: &Latent,
) -> Result<(f64, CUNetParams)> {
    let src = source.clone().insert_axis(Axis(0));
    let tgt = target.clone().insert_axis(Axis(0));
    let cache = cunet_forward_cached(params, &src, cond)?;
    let diff = &cache.output - &tgt;
    let n = diff.len() as f64;
    let loss = diff.mapv(|v| v * v).sum() / n;
    let gout = diff.mapv(|v| 2.0 * v / n);
    let mut grads = params.zeros_like();
    cunet_backward(params, cond, &cache, &gout, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct CUNetTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Train the translator on aligned (source, target, condition) triples;
/// conditions are precomputed latents (the caller decides their source).
/// Returns mean loss per epoch.
pub fn train_cunet(
    params: &mut CUNetParams,
    sources: &[ndarray::Array3<f64>],
    targets: &[ndarray::Array3<f64>],
    conditions: &[Latent],
    opts: &CUNetTrainOpts,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    if sources.is_empty() || sources.len() != targets.len() || sources.len() != conditions.len() {
        return Err(CdmError::invalid(
            "sources, targets, and conditions must be equal-length and non-empty",
        ));
    }
    let mut opt = Adam::new(opts.lr, opts.weight_decay, params.param_count());
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let results: Result<Vec<(f64, CUNetParams)>> = chunk
                .par_iter()
                .map(|&i| cunet_case_loss_and_grad(params, &sources[i], &targets[i], &conditions[i]))
                .collect();
            let results = results?;
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                accumulate(&mut grads, g);
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut flat = grads.to_flat();
            for v in &mut flat {
                *v *= scale;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(CdmError::NonFiniteLoss {
                    stage: "cunet",
                    detail: format!("epoch {epoch}: loss {batch_loss}"),
                });
            }
            total += batch_loss * chunk.len() as f64;
            let mut p = params.to_flat();
            opt.step(&mut p, &flat);
            params.assign_flat(&p);
        }
        let mean = total / sources.len() as f64;
        log::info!("cunet epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}
