//! Modality-specific representation model: a masked-patch autoencoder over
//! the target modalities. The encoder produces the latent vector the
//! diffusion network models; the decoder reconstructs the masked input.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{CdmError, Result};
use crate::image::{ImageBatch, ValueRange};
use crate::nn::{
    accumulate, global_avg_pool, global_avg_pool_backward, silu, silu_backward,
    upsample_nearest2, upsample_nearest2_backward, Adam, Conv2d, Linear, Params,
};

/// Target-distribution vector produced by the encoder.
pub type Latent = Array1<f64>;

const NORM_FLOOR: f64 = 1e-12;

/// Boolean patch grid; `true` cells are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub masked: Array2<bool>,
}

impl PatchMask {
    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn check_geometry(&self, h: usize, w: usize) -> Result<()> {
        if self.grid_h * self.patch_size != h || self.grid_w * self.patch_size != w {
            return Err(CdmError::shape(
                format!("{}x{} grid of {}px patches", self.grid_h, self.grid_w, self.patch_size),
                format!("{h}x{w} image"),
            ));
        }
        Ok(())
    }
}

/// Uniformly choose `round(mask_ratio * cells)` patches without replacement.
pub fn sample_mask(
    patch_size: usize,
    grid_h: usize,
    grid_w: usize,
    mask_ratio: f64,
    rng: &mut ChaCha20Rng,
) -> PatchMask {
    assert!(grid_h >= 1 && grid_w >= 1 && (0.0..=1.0).contains(&mask_ratio));
    let cells = grid_h * grid_w;
    let n_masked = (mask_ratio * cells as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(rng);
    let mut masked = Array2::from_elem((grid_h, grid_w), false);
    for &cell in order.iter().take(n_masked) {
        masked[(cell / grid_w, cell % grid_w)] = true;
    }
    PatchMask {
        patch_size,
        grid_h,
        grid_w,
        masked,
    }
}

/// Replace masked patches by `fill` on every channel.
pub fn apply_mask(images: &ImageBatch, mask: &PatchMask, fill: f64) -> Result<ImageBatch> {
    let masks = vec![mask.clone(); images.channels()];
    apply_channel_masks(images, &masks, fill)
}

/// Replace masked patches by `fill`, one independent mask per channel.
pub fn apply_channel_masks(
    images: &ImageBatch,
    masks: &[PatchMask],
    fill: f64,
) -> Result<ImageBatch> {
    if masks.len() != images.channels() {
        return Err(CdmError::shape(
            format!("{} masks", images.channels()),
            format!("{}", masks.len()),
        ));
    }
    let (h, w) = (images.height(), images.width());
    let mut out = images.clone();
    for (c, mask) in masks.iter().enumerate() {
        mask.check_geometry(h, w)?;
        let p = mask.patch_size;
        for gi in 0..mask.grid_h {
            for gj in 0..mask.grid_w {
                if mask.masked[(gi, gj)] {
                    out.data
                        .slice_mut(s![.., c, gi * p..(gi + 1) * p, gj * p..(gj + 1) * p])
                        .fill(fill);
                }
            }
        }
    }
    Ok(out)
}

/// Masked-patch reconstruction loss: mean over masked patches of the
/// per-patch Euclidean norm of the difference, each channel masked
/// independently.
pub fn mrm_loss(pred: &ImageBatch, target: &ImageBatch, mask: &PatchMask) -> Result<f64> {
    let masks = vec![mask.clone(); pred.channels()];
    mrm_loss_multi(pred, target, &masks)
}

pub fn mrm_loss_multi(
    pred: &ImageBatch,
    target: &ImageBatch,
    masks: &[PatchMask],
) -> Result<f64> {
    Ok(loss_multi_impl(pred, target, masks, None)?)
}

/// Loss plus gradient with respect to `pred` (zero at unmasked pixels).
pub fn mrm_loss_multi_grad(
    pred: &ImageBatch,
    target: &ImageBatch,
    masks: &[PatchMask],
) -> Result<(f64, Array4<f64>)> {
    let mut grad = Array4::zeros(pred.data.raw_dim());
    let loss = loss_multi_impl(pred, target, masks, Some(&mut grad))?;
    Ok((loss, grad))
}

fn loss_multi_impl(
    pred: &ImageBatch,
    target: &ImageBatch,
    masks: &[PatchMask],
    mut grad: Option<&mut Array4<f64>>,
) -> Result<f64> {
    pred.same_shape(target)?;
    if masks.len() != pred.channels() {
        return Err(CdmError::shape(
            format!("{} masks", pred.channels()),
            format!("{}", masks.len()),
        ));
    }
    let (n, h, w) = (pred.batch_size(), pred.height(), pred.width());
    let total_masked: usize = masks.iter().map(|m| m.num_masked()).sum::<usize>() * n;
    if total_masked == 0 {
        return Err(CdmError::invalid("mask selects no patches"));
    }
    let mut total = 0.0;
    for (c, mask) in masks.iter().enumerate() {
        mask.check_geometry(h, w)?;
        let p = mask.patch_size;
        for b in 0..n {
            for gi in 0..mask.grid_h {
                for gj in 0..mask.grid_w {
                    if !mask.masked[(gi, gj)] {
                        continue;
                    }
                    let sl = s![b, c, gi * p..(gi + 1) * p, gj * p..(gj + 1) * p];
                    let diff = &pred.data.slice(sl) - &target.data.slice(sl);
                    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                    total += norm;
                    if let Some(g) = grad.as_deref_mut() {
                        if norm > NORM_FLOOR {
                            let scale = 1.0 / (norm * total_masked as f64);
                            g.slice_mut(sl).zip_mut_with(&diff, |gv, &d| *gv += d * scale);
                        }
                    }
                }
            }
        }
    }
    Ok(total / total_masked as f64)
}

/// Architecture hyperparameters for the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MrmConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub n_stages: usize,
    pub base_width: usize,
    pub latent_dim: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    /// Fill value for masked pixels, in network-input units.
    pub fill_value: f64,
}

impl MrmConfig {
    pub fn new(image_size: usize) -> Self {
        MrmConfig {
            image_size,
            in_channels: 2,
            n_stages: 4,
            base_width: 16,
            latent_dim: 256,
            patch_size: (image_size / 8).max(1),
            mask_ratio: 0.6,
            fill_value: 0.0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size / self.patch_size,
            self.image_size / self.patch_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.n_stages;
        if self.image_size % down != 0 || self.image_size / down == 0 {
            return Err(CdmError::invalid(format!(
                "image size {} not divisible into {} stages",
                self.image_size, self.n_stages
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(CdmError::invalid("patch size must divide image size"));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        let c = self.base_width << (self.n_stages - 1);
        let hw = self.image_size >> self.n_stages;
        (c, hw)
    }
}

/// Encoder (strided conv stack, pooled, affine to the latent) and decoder
/// (affine, upsampling conv stack, 1x1 output conv).
#[derive(Debug, Clone)]
pub struct MrmParams {
    pub cfg: MrmConfig,
    pub enc: Vec<Conv2d>,
    pub fe_head: Linear,
    pub fd_head: Linear,
    pub dec: Vec<Conv2d>,
    pub out_conv: Conv2d,
}

impl Params for MrmParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.enc {
            l.visit(f);
        }
        self.fe_head.visit(f);
        self.fd_head.visit(f);
        for l in &self.dec {
            l.visit(f);
        }
        self.out_conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.enc {
            l.visit_mut(f);
        }
        self.fe_head.visit_mut(f);
        self.fd_head.visit_mut(f);
        for l in &mut self.dec {
            l.visit_mut(f);
        }
        self.out_conv.visit_mut(f);
    }
}

impl MrmParams {
    pub fn init(cfg: MrmConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::new();
        let mut c_in = cfg.in_channels;
        for i in 0..cfg.n_stages {
            let c_out = cfg.base_width << i;
            enc.push(Conv2d::new(rng, c_in, c_out, 3, 2, 1));
            c_in = c_out;
        }
        let (c_bot, hw_bot) = cfg.bottleneck();
        let fe_head = Linear::new(rng, c_bot, cfg.latent_dim);
        let fd_head = Linear::new(rng, cfg.latent_dim, c_bot * hw_bot * hw_bot);
        let mut dec = Vec::new();
        let mut c = c_bot;
        for _ in 0..cfg.n_stages {
            let c_out = (c / 2).max(4);
            dec.push(Conv2d::new(rng, c, c_out, 3, 1, 1));
            c = c_out;
        }
        let out_conv = Conv2d::new(rng, c, cfg.in_channels, 1, 1, 0);
        Ok(MrmParams {
            cfg,
            enc,
            fe_head,
            fd_head,
            dec,
            out_conv,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MrmParams {
            cfg: self.cfg.clone(),
            enc: self.enc.iter().map(Conv2d::zeros_like).collect(),
            fe_head: self.fe_head.zeros_like(),
            fd_head: self.fd_head.zeros_like(),
            dec: self.dec.iter().map(Conv2d::zeros_like).collect(),
            out_conv: self.out_conv.zeros_like(),
        }
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        if x.channels() != self.cfg.in_channels {
            return Err(CdmError::shape(
                format!("{} channels", self.cfg.in_channels),
                format!("{}", x.channels()),
            ));
        }
        if x.height() != self.cfg.image_size || x.width() != self.cfg.image_size {
            return Err(CdmError::shape(
                format!("{0}x{0}", self.cfg.image_size),
                format!("{}x{}", x.height(), x.width()),
            ));
        }
        Ok(())
    }
}

pub struct MrmCache {
    enc_in: Vec<Array4<f64>>,
    enc_pre: Vec<Array4<f64>>,
    pooled: Array2<f64>,
    latent: Array2<f64>,
    dec_head_out_hw: (usize, usize, usize),
    dec_in: Vec<Array4<f64>>,
    dec_pre: Vec<Array4<f64>>,
    out_in: Array4<f64>,
}

/// Encoder path only: unmasked targets to latent rows `[n, D]`.
pub fn encode(params: &MrmParams, targets: &ImageBatch) -> Result<Array2<f64>> {
    params.check_input(targets)?;
    let mut x = targets.data.clone();
    for conv in &params.enc {
        x = silu(&conv.forward(&x));
    }
    Ok(params.fe_head.forward(&global_avg_pool(&x)))
}

/// Full masked-autoencoder pass: reconstruction plus the latent of the input.
pub fn mrm_forward(params: &MrmParams, masked: &ImageBatch) -> Result<(ImageBatch, Array2<f64>)> {
    let (recon, latent, _) = mrm_forward_cached(params, masked)?;
    Ok((recon, latent))
}

pub fn mrm_forward_cached(
    params: &MrmParams,
    masked: &ImageBatch,
) -> Result<(ImageBatch, Array2<f64>, MrmCache)> {
    params.check_input(masked)?;
    let mut enc_in = Vec::new();
    let mut enc_pre = Vec::new();
    let mut x = masked.data.clone();
    for conv in &params.enc {
        enc_in.push(x.clone());
        let pre = conv.forward(&x);
        x = silu(&pre);
        enc_pre.push(pre);
    }
    let pooled = global_avg_pool(&x);
    let latent = params.fe_head.forward(&pooled);

    let (c_bot, hw_bot) = params.cfg.bottleneck();
    let n = masked.batch_size();
    let head_out = params.fd_head.forward(&latent);
    let mut y = head_out
        .into_shape_with_order((n, c_bot, hw_bot, hw_bot))
        .unwrap();
    let mut dec_in = Vec::new();
    let mut dec_pre = Vec::new();
    for conv in &params.dec {
        let up = upsample_nearest2(&y);
        dec_in.push(up.clone());
        let pre = conv.forward(&up);
        y = silu(&pre);
        dec_pre.push(pre);
    }
    let out_in = y.clone();
    let recon = params.out_conv.forward(&y);
    let cache = MrmCache {
        enc_in,
        enc_pre,
        pooled,
        latent: latent.clone(),
        dec_head_out_hw: (n, c_bot, hw_bot),
        dec_in,
        dec_pre,
        out_in,
    };
    Ok((
        ImageBatch::new(recon, ValueRange::Signed),
        latent,
        cache,
    ))
}

/// Backward pass; accumulates parameter gradients into `grads`.
pub fn mrm_backward(
    params: &MrmParams,
    cache: &MrmCache,
    grad_recon: &Array4<f64>,
    grads: &mut MrmParams,
) {
    let mut g = params
        .out_conv
        .backward(&cache.out_in, grad_recon, &mut grads.out_conv);
    for (i, conv) in params.dec.iter().enumerate().rev() {
        let gpre = silu_backward(&cache.dec_pre[i], &g);
        g = conv.backward(&cache.dec_in[i], &gpre, &mut grads.dec[i]);
        g = upsample_nearest2_backward(&g);
    }
    let (n, c_bot, hw_bot) = cache.dec_head_out_hw;
    let g_head = g
        .into_shape_with_order((n, c_bot * hw_bot * hw_bot))
        .unwrap();
    let g_latent = params
        .fd_head
        .backward(&cache.latent, &g_head, &mut grads.fd_head);
    let g_pooled = params
        .fe_head
        .backward(&cache.pooled, &g_latent, &mut grads.fe_head);
    let (h_last, w_last) = {
        let sh = cache.enc_pre.last().unwrap().shape();
        (sh[2], sh[3])
    };
    let mut g = global_avg_pool_backward(&g_pooled, h_last, w_last);
    for (i, conv) in params.enc.iter().enumerate().rev() {
        let gpre = silu_backward(&cache.enc_pre[i], &g);
        g = conv.backward(&cache.enc_in[i], &gpre, &mut grads.enc[i]);
    }
}

/// Masked-reconstruction loss and parameter gradients for one case.
/// `target` is the clean normalized target stack `[C, h, w]`.
pub fn mrm_case_loss_and_grad(
    params: &MrmParams,
    target: &Array3<f64>,
    masks: &[PatchMask],
) -> Result<(f64, MrmParams)> {
    let target_batch = ImageBatch::new(
        target.clone().insert_axis(Axis(0)),
        ValueRange::Signed,
    );
    let masked = apply_channel_masks(&target_batch, masks, params.cfg.fill_value)?;
    let (recon, _, cache) = mrm_forward_cached(params, &masked)?;
    let (loss, grad_recon) = mrm_loss_multi_grad(&recon, &target_batch, masks)?;
    let mut grads = params.zeros_like();
    mrm_backward(params, &cache, &grad_recon, &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct MrmTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Train the masked autoencoder on per-case normalized target stacks.
/// Returns the mean masked loss per epoch.
pub fn train_mrm(
    params: &mut MrmParams,
    targets: &[Array3<f64>],
    opts: &MrmTrainOpts,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(CdmError::invalid("empty training set"));
    }
    let (grid_h, grid_w) = params.cfg.grid();
    let mut opt = Adam::new(opts.lr, opts.weight_decay, params.param_count());
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            // masks drawn sequentially so the run is deterministic
            let jobs: Vec<(usize, Vec<PatchMask>)> = chunk
                .iter()
                .map(|&i| {
                    let masks: Vec<PatchMask> = (0..params.cfg.in_channels)
                        .map(|_| {
                            sample_mask(params.cfg.patch_size, grid_h, grid_w, params.cfg.mask_ratio, rng)
                        })
                        .collect();
                    (i, masks)
                })
                .collect();
            let results: Vec<Result<(f64, MrmParams)>> = jobs
                .par_iter()
                .map(|(i, masks)| mrm_case_loss_and_grad(params, &targets[*i], masks))
                .collect();
            let mut batch_loss = 0.0;
            let mut grads = params.zeros_like();
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                accumulate(&mut grads, &g);
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(CdmError::NonFiniteLoss {
                    stage: "mrm",
                    detail: format!("epoch {epoch}, loss {batch_loss}"),
                });
            }
            let mut flat = params.to_flat();
            let mut gflat = grads.to_flat();
            gflat.iter_mut().for_each(|g| *g *= scale);
            opt.step(&mut flat, &gflat);
            params.assign_flat(&flat);
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let mean = epoch_loss / targets.len() as f64;
        log::info!("mrm epoch {epoch}: masked loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(epoch_losses)
}
