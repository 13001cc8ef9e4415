//! Three-stage training orchestration, checkpoint persistence, two-phase
//! inference, and the sampling-efficiency benchmark.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{parse_train_config, serialize_train_config};
use crate::cunet::{
    cunet_forward, train_cunet, CUNetConfig, CUNetParams, CUNetTrainOpts,
};
use crate::data::{denormalize_from_network, normalize_for_network, CaseRecord};
use crate::error::{CdmError, Result};
use crate::image::{ImageBatch, ValueRange};
use crate::mdn::{
    mdn_sample, train_mdn, LatentStats, MdnConfig, MdnParams, MdnTrainOpts,
};
use crate::metrics::{mae, psnr, ssim, MetricReport, MetricRow};
use crate::mrm::{encode, train_mrm, Latent, MrmConfig, MrmParams, MrmTrainOpts};
use crate::nn::Params;
use crate::schedules::{make_linear_schedule, NoiseSchedule};

/// Where the translator's conditioning latent comes from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    /// Encoder latent of the ground-truth targets (default).
    Encoder,
    /// A latent drawn from the trained vector-diffusion model.
    MdnSample,
}

/// Every knob the pipeline needs, one place.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_sampling: usize,
    pub mask_ratio: f64,
    pub mrm_epochs: usize,
    pub mrm_lr: f64,
    pub mrm_base_width: usize,
    pub mrm_n_stages: usize,
    pub mdn_epochs: usize,
    pub mdn_lr: f64,
    pub mdn_blocks: usize,
    pub cunet_epochs: usize,
    pub cunet_lr: f64,
    pub cunet_base_width: usize,
    pub cunet_n_scales: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub condition_source: ConditionSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            image_size: 64,
            latent_dim: 256,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            n_sampling: 30,
            mask_ratio: 0.6,
            mrm_epochs: 15,
            mrm_lr: 1e-3,
            mrm_base_width: 16,
            mrm_n_stages: 4,
            mdn_epochs: 200,
            mdn_lr: 1e-3,
            mdn_blocks: 3,
            cunet_epochs: 20,
            cunet_lr: 1e-3,
            cunet_base_width: 16,
            cunet_n_scales: 4,
            weight_decay: 1e-5,
            batch_size: 8,
            seed: 42,
            condition_source: ConditionSource::Encoder,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sampling == 0 || self.n_sampling > self.t_max {
            return Err(CdmError::invalid(format!(
                "n_sampling {} must be in 1..={}",
                self.n_sampling, self.t_max
            )));
        }
        if self.beta_start <= 0.0 || self.beta_end <= self.beta_start || self.beta_end >= 1.0 {
            return Err(CdmError::invalid("betas must satisfy 0 < start < end < 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(CdmError::invalid("mask ratio must be in [0,1]"));
        }
        if self.image_size == 0 || self.latent_dim == 0 || self.batch_size == 0 {
            return Err(CdmError::invalid("sizes must be positive"));
        }
        self.mrm_config().validate()?;
        self.cunet_config().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn mrm_config(&self) -> MrmConfig {
        let mut cfg = MrmConfig::new(self.image_size);
        cfg.base_width = self.mrm_base_width;
        cfg.n_stages = self.mrm_n_stages;
        cfg.latent_dim = self.latent_dim;
        cfg.mask_ratio = self.mask_ratio;
        cfg
    }

    pub fn mdn_config(&self) -> MdnConfig {
        let mut cfg = MdnConfig::new(self.latent_dim);
        cfg.n_blocks = self.mdn_blocks;
        cfg
    }

    pub fn cunet_config(&self) -> CUNetConfig {
        let mut cfg = CUNetConfig::new(self.image_size, self.latent_dim);
        cfg.base_width = self.cunet_base_width;
        cfg.n_scales = self.cunet_n_scales;
        cfg
    }
}

/// Trained parameters for all three stages plus the config that shaped them.
/// A stage's parameters are present iff that stage has completed.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub config: TrainConfig,
    pub mrm: Option<MrmParams>,
    pub mdn: Option<(MdnParams, LatentStats)>,
    pub cunet: Option<CUNetParams>,
}

const BUNDLE_MAGIC: &[u8; 4] = b"CDMB";
const BUNDLE_VERSION: u16 = 1;

impl CheckpointBundle {
    pub fn new(config: TrainConfig) -> Self {
        CheckpointBundle {
            config,
            mrm: None,
            mdn: None,
            cunet: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.mrm.is_some() && self.mdn.is_some() && self.cunet.is_some()
    }

    fn require_complete(&self) -> Result<()> {
        for (name, present) in [
            ("mrm", self.mrm.is_some()),
            ("mdn", self.mdn.is_some()),
            ("cunet", self.cunet.is_some()),
        ] {
            if !present {
                return Err(CdmError::MissingStage {
                    required: name,
                    requested: "inference",
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(BUNDLE_MAGIC);
        body.write_u16::<LittleEndian>(BUNDLE_VERSION)?;
        let cfg_text = serialize_train_config(&self.config);
        body.write_u32::<LittleEndian>(cfg_text.len() as u32)?;
        body.extend_from_slice(cfg_text.as_bytes());
        let flags = (self.mrm.is_some() as u8)
            | ((self.mdn.is_some() as u8) << 1)
            | ((self.cunet.is_some() as u8) << 2);
        body.push(flags);
        let write_section = |values: &[f64], body: &mut Vec<u8>| -> Result<()> {
            body.write_u64::<LittleEndian>(values.len() as u64)?;
            for v in values {
                body.write_f64::<LittleEndian>(*v)?;
            }
            Ok(())
        };
        if let Some(mrm) = &self.mrm {
            write_section(&mrm.to_flat(), &mut body)?;
        }
        if let Some((mdn, stats)) = &self.mdn {
            write_section(&mdn.to_flat(), &mut body)?;
            write_section(stats.mean.as_slice().unwrap(), &mut body)?;
            write_section(stats.std.as_slice().unwrap(), &mut body)?;
        }
        if let Some(cunet) = &self.cunet {
            write_section(&cunet.to_flat(), &mut body)?;
        }
        let crc = crc32fast::hash(&body);
        body.write_u32::<LittleEndian>(crc)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&body)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let corrupt = |detail: &str| CdmError::CorruptFile {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(corrupt("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(corrupt("CRC mismatch"));
        }
        let mut r = std::io::Cursor::new(body);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != BUNDLE_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let cfg_len = r.read_u32::<LittleEndian>()? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let cfg_text =
            String::from_utf8(cfg_bytes).map_err(|_| corrupt("config not UTF-8"))?;
        let config = parse_train_config(&cfg_text)?;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let flags = flags[0];
        let read_section = |r: &mut std::io::Cursor<&[u8]>| -> Result<Vec<f64>> {
            let n = r.read_u64::<LittleEndian>()? as usize;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(r.read_f64::<LittleEndian>()?);
            }
            Ok(out)
        };
        let mut bundle = CheckpointBundle::new(config.clone());
        let mut shape_rng = ChaCha20Rng::seed_from_u64(0);
        if flags & 1 != 0 {
            let flat = read_section(&mut r)?;
            let mut p = MrmParams::init(config.mrm_config(), &mut shape_rng)?;
            if p.param_count() != flat.len() {
                return Err(corrupt("mrm section size does not match config"));
            }
            p.assign_flat(&flat);
            bundle.mrm = Some(p);
        }
        if flags & 2 != 0 {
            let flat = read_section(&mut r)?;
            let mut p = MdnParams::init(config.mdn_config(), &mut shape_rng)?;
            if p.param_count() != flat.len() {
                return Err(corrupt("mdn section size does not match config"));
            }
            p.assign_flat(&flat);
            let mean = read_section(&mut r)?;
            let std = read_section(&mut r)?;
            if mean.len() != config.latent_dim || std.len() != config.latent_dim {
                return Err(corrupt("latent stats size does not match config"));
            }
            bundle.mdn = Some((
                p,
                LatentStats {
                    mean: mean.into(),
                    std: std.into(),
                },
            ));
        }
        if flags & 4 != 0 {
            let flat = read_section(&mut r)?;
            let mut p = CUNetParams::init(config.cunet_config(), &mut shape_rng)?;
            if p.param_count() != flat.len() {
                return Err(corrupt("cunet section size does not match config"));
            }
            p.assign_flat(&flat);
            bundle.cunet = Some(p);
        }
        Ok(bundle)
    }
}

fn normalized_single(batch: &ImageBatch) -> Array3<f64> {
    let (norm, _) = normalize_for_network(batch);
    norm.data.index_axis(Axis(0), 0).to_owned()
}

fn normalized_targets(cases: &[CaseRecord]) -> Vec<Array3<f64>> {
    cases.iter().map(|c| normalized_single(&c.target_batch())).collect()
}

fn normalized_sources(cases: &[CaseRecord]) -> Vec<Array3<f64>> {
    cases.iter().map(|c| normalized_single(&c.source_batch())).collect()
}

/// Frozen-encoder latents of the normalized target stacks, one row per case.
pub fn encode_targets(mrm: &MrmParams, cases: &[CaseRecord]) -> Result<ndarray::Array2<f64>> {
    let n = cases.len();
    let s = cases[0].image_size();
    let mut stack = Array4::zeros((n, 2, s, s));
    for (i, case) in cases.iter().enumerate() {
        stack.index_axis_mut(Axis(0), i).assign(&normalized_single(&case.target_batch()));
    }
    encode(
        mrm,
        &ImageBatch {
            data: stack,
            range: ValueRange::Signed,
        },
    )
}

/// Stage 1: masked-patch representation learning. Overwrites any previous
/// stage-1 parameters; returns the per-epoch loss curve.
pub fn run_stage_mrm(bundle: &mut CheckpointBundle, cases: &[CaseRecord]) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(CdmError::invalid("empty training set"));
    }
    let cfg = &bundle.config;
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6d72_6d00);
    let mut params = MrmParams::init(cfg.mrm_config(), &mut rng)?;
    let targets = normalized_targets(cases);
    let opts = MrmTrainOpts {
        epochs: cfg.mrm_epochs,
        lr: cfg.mrm_lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
    };
    let losses = train_mrm(&mut params, &targets, &opts, &mut rng)?;
    bundle.mrm = Some(params);
    Ok(losses)
}

/// Stage 2: vector diffusion over the frozen encoder's latents.
pub fn run_stage_mdn(bundle: &mut CheckpointBundle, cases: &[CaseRecord]) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(CdmError::invalid("empty training set"));
    }
    let mrm = bundle.mrm.as_ref().ok_or(CdmError::MissingStage {
        required: "mrm",
        requested: "mdn",
    })?;
    let cfg = bundle.config.clone();
    let latents = encode_targets(mrm, cases)?;
    let stats = LatentStats::fit(&latents);
    let std_latents = stats.standardize(&latents);
    let schedule = cfg.schedule()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6d64_6e00);
    let mut params = MdnParams::init(cfg.mdn_config(), &mut rng)?;
    let opts = MdnTrainOpts {
        epochs: cfg.mdn_epochs,
        lr: cfg.mdn_lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
    };
    let losses = train_mdn(&mut params, &std_latents, &opts, &schedule, &mut rng)?;
    bundle.mdn = Some((params, stats));
    Ok(losses)
}

/// Stage 3: the cross-conditioned translator, conditioned per config either
/// on frozen-encoder latents of the ground truth (default) or on samples
/// from the trained diffusion model.
pub fn run_stage_cunet(bundle: &mut CheckpointBundle, cases: &[CaseRecord]) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(CdmError::invalid("empty training set"));
    }
    let mrm = bundle.mrm.as_ref().ok_or(CdmError::MissingStage {
        required: "mrm",
        requested: "cunet",
    })?;
    let cfg = bundle.config.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6375_6e00);
    let conditions: Vec<Latent> = match cfg.condition_source {
        ConditionSource::Encoder => {
            let latents = encode_targets(mrm, cases)?;
            latents.rows().into_iter().map(|r| r.to_owned()).collect()
        }
        ConditionSource::MdnSample => {
            let (mdn, stats) = bundle.mdn.as_ref().ok_or(CdmError::MissingStage {
                required: "mdn",
                requested: "cunet",
            })?;
            let schedule = cfg.schedule()?;
            (0..cases.len())
                .map(|i| {
                    let mut r = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
                    mdn_sample(mdn, &schedule, cfg.n_sampling, &mut r).map(|l| stats.destandardize(&l))
                })
                .collect::<Result<_>>()?
        }
    };
    let sources = normalized_sources(cases);
    let targets = normalized_targets(cases);
    let mut params = CUNetParams::init(cfg.cunet_config(), &mut rng)?;
    let opts = CUNetTrainOpts {
        epochs: cfg.cunet_epochs,
        lr: cfg.cunet_lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
    };
    let losses = train_cunet(&mut params, &sources, &targets, &conditions, &opts, &mut rng)?;
    bundle.cunet = Some(params);
    Ok(losses)
}

/// Two-phase inference with an explicit number of sampling steps.
pub fn synthesize_with_n(
    bundle: &CheckpointBundle,
    sources: &ImageBatch,
    seed: u64,
    n_sampling: usize,
) -> Result<ImageBatch> {
    bundle.require_complete()?;
    let (mdn, stats) = bundle.mdn.as_ref().unwrap();
    let cunet = bundle.cunet.as_ref().unwrap();
    let schedule = bundle.config.schedule()?;
    let (norm, _) = normalize_for_network(sources);
    let n = norm.batch_size();
    let mut out = Array4::zeros(norm.data.raw_dim());
    for i in 0..n {
        // one latent per synthesized image
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let latent = stats.destandardize(&mdn_sample(mdn, &schedule, n_sampling, &mut rng)?);
        let src = ImageBatch {
            data: norm
                .data
                .index_axis(Axis(0), i)
                .to_owned()
                .insert_axis(Axis(0)),
            range: ValueRange::Signed,
        };
        let pred = cunet_forward(cunet, &src, &latent)?;
        out.index_axis_mut(Axis(0), i)
            .assign(&pred.data.index_axis(Axis(0), 0));
    }
    Ok(denormalize_from_network(&ImageBatch {
        data: out,
        range: ValueRange::Signed,
    }))
}

/// Sample a target-distribution latent, condition the translator with it,
/// and map the result back to image range.
pub fn synthesize(bundle: &CheckpointBundle, sources: &ImageBatch, seed: u64) -> Result<ImageBatch> {
    synthesize_with_n(bundle, sources, seed, bundle.config.n_sampling)
}

pub const TARGET_MODALITIES: [&str; 2] = ["T1c", "T2f"];

fn metric_rows_for_case(
    case: &CaseRecord,
    pred: &ImageBatch,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(2);
    for (ch, name) in TARGET_MODALITIES.iter().enumerate() {
        let p = pred.data.index_axis(Axis(0), 0);
        let p = p.index_axis(Axis(0), ch).to_owned();
        let gt = case.modality(name);
        rows.push(MetricRow {
            case_id: case.case_id.clone(),
            modality: name.to_string(),
            psnr: psnr(&p, gt, 1.0)?,
            ssim: ssim(&p, gt)?,
            mae: mae(&p, gt)?,
        });
    }
    Ok(rows)
}

pub fn evaluate_with_n(
    bundle: &CheckpointBundle,
    cases: &[CaseRecord],
    n_sampling: usize,
) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(CdmError::invalid("empty test split"));
    }
    bundle.require_complete()?;
    let mut rows = Vec::with_capacity(cases.len() * 2);
    for (i, case) in cases.iter().enumerate() {
        let seed = bundle.config.seed.wrapping_add(0x1000).wrapping_add(i as u64);
        let pred = synthesize_with_n(bundle, &case.source_batch(), seed, n_sampling)?;
        rows.extend(metric_rows_for_case(case, &pred)?);
    }
    Ok(MetricReport::from_rows(rows))
}

/// Per-modality and averaged metrics of the synthesized targets on a split.
pub fn evaluate(bundle: &CheckpointBundle, cases: &[CaseRecord]) -> Result<MetricReport> {
    evaluate_with_n(bundle, cases, bundle.config.n_sampling)
}

/// Baseline that copies the source modalities as the prediction: T1 stands
/// in for T1c and T2 for T2f. The floor any learned translator must beat.
pub fn identity_baseline_report(cases: &[CaseRecord]) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(CdmError::invalid("empty test split"));
    }
    let mut rows = Vec::with_capacity(cases.len() * 2);
    for case in cases {
        for (src, tgt) in [("T1", "T1c"), ("T2", "T2f")] {
            let p = case.modality(src);
            let gt = case.modality(tgt);
            rows.push(MetricRow {
                case_id: case.case_id.clone(),
                modality: tgt.to_string(),
                psnr: psnr(p, gt, 1.0)?,
                ssim: ssim(p, gt)?,
                mae: mae(p, gt)?,
            });
        }
    }
    Ok(MetricReport::from_rows(rows))
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n_sampling: usize,
    pub seconds_per_image: f64,
    pub fps: f64,
    pub psnr_avg: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Median per-image latent-sampling time at n=30 divided by the cost of
    /// 30 translator forward passes.
    pub mdn_cunet_ratio: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_sampling,seconds_per_image,fps,psnr_avg\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.3},{:.4}\n",
                r.n_sampling, r.seconds_per_image, r.fps, r.psnr_avg
            ));
        }
        out.push_str(&format!(
            "# mdn_sampling_vs_30_cunet_forwards_ratio={:.6}\n",
            self.mdn_cunet_ratio
        ));
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Sweep the number of sampling steps, timing full per-image synthesis and
/// scoring test-set PSNR at each setting.
pub fn benchmark_sampling(
    bundle: &CheckpointBundle,
    cases: &[CaseRecord],
    n_values: &[usize],
    repetitions: usize,
) -> Result<BenchReport> {
    if n_values.is_empty() {
        return Err(CdmError::invalid("empty n_values"));
    }
    if cases.is_empty() || repetitions == 0 {
        return Err(CdmError::invalid("need cases and at least one repetition"));
    }
    bundle.require_complete()?;
    let mut rows = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            for (i, case) in cases.iter().enumerate() {
                let seed = bundle.config.seed.wrapping_add(0x1000).wrapping_add(i as u64);
                synthesize_with_n(bundle, &case.source_batch(), seed, n)?;
            }
            times.push(start.elapsed().as_secs_f64() / cases.len() as f64);
        }
        let seconds_per_image = median(times);
        let report = evaluate_with_n(bundle, cases, n)?;
        let psnr_avg = report
            .aggregate("avg")
            .map(|r| r.psnr)
            .ok_or_else(|| CdmError::invalid("missing aggregate"))?;
        rows.push(BenchRow {
            n_sampling: n,
            seconds_per_image,
            fps: 1.0 / seconds_per_image,
            psnr_avg,
        });
    }
    // latent sampling at n=30 vs 30 translator forward passes
    let (mdn, _) = bundle.mdn.as_ref().unwrap();
    let cunet = bundle.cunet.as_ref().unwrap();
    let schedule = bundle.config.schedule()?;
    let mut mdn_times = Vec::with_capacity(repetitions);
    let mut cunet_times = Vec::with_capacity(repetitions);
    let (norm, _) = normalize_for_network(&cases[0].source_batch());
    let probe_latent = {
        let mut rng = ChaCha20Rng::seed_from_u64(bundle.config.seed);
        let (_, stats) = bundle.mdn.as_ref().unwrap();
        stats.destandardize(&mdn_sample(mdn, &schedule, 30, &mut rng)?)
    };
    for _ in 0..repetitions {
        let mut rng = ChaCha20Rng::seed_from_u64(bundle.config.seed);
        let start = Instant::now();
        mdn_sample(mdn, &schedule, 30, &mut rng)?;
        mdn_times.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        cunet_forward(cunet, &norm, &probe_latent)?;
        cunet_times.push(start.elapsed().as_secs_f64());
    }
    let mdn_cunet_ratio = median(mdn_times) / (30.0 * median(cunet_times));
    Ok(BenchReport {
        rows,
        mdn_cunet_ratio,
    })
}

/// Loss curves share the report CSV dialect.
pub fn loss_curve_csv(stage: &str, losses: &[f64]) -> String {
    let mut out = String::from("stage,epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{stage},{i},{l:.8}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_case, PhantomSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            latent_dim: 16,
            t_max: 50,
            n_sampling: 10,
            mrm_epochs: 2,
            mrm_base_width: 4,
            mrm_n_stages: 2,
            mdn_epochs: 3,
            mdn_blocks: 2,
            cunet_epochs: 2,
            cunet_base_width: 4,
            cunet_n_scales: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_cases(n: usize) -> Vec<CaseRecord> {
        let spec = PhantomSpec::new(16);
        (0..n)
            .map(|i| generate_phantom_case(&spec, &format!("case_{i:04}"), 100 + i as u64))
            .collect()
    }

    fn trained_bundle() -> (CheckpointBundle, Vec<CaseRecord>) {
        let cases = tiny_cases(6);
        let mut bundle = CheckpointBundle::new(tiny_config());
        run_stage_mrm(&mut bundle, &cases).unwrap();
        run_stage_mdn(&mut bundle, &cases).unwrap();
        run_stage_cunet(&mut bundle, &cases).unwrap();
        (bundle, cases)
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.n_sampling = 51;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.beta_end = c.beta_start;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.mask_ratio = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stages_enforce_ordering() {
        let cases = tiny_cases(4);
        let mut bundle = CheckpointBundle::new(tiny_config());
        match run_stage_mdn(&mut bundle, &cases) {
            Err(CdmError::MissingStage { required, requested }) => {
                assert_eq!(required, "mrm");
                assert_eq!(requested, "mdn");
            }
            other => panic!("expected MissingStage, got {other:?}"),
        }
        assert!(matches!(
            run_stage_cunet(&mut bundle, &cases),
            Err(CdmError::MissingStage { .. })
        ));
        // inference on an incomplete bundle
        let src = cases[0].source_batch();
        assert!(matches!(
            synthesize(&bundle, &src, 1),
            Err(CdmError::MissingStage { .. })
        ));
    }

    #[test]
    fn full_run_is_deterministic_and_idempotent() {
        let (bundle_a, cases) = trained_bundle();
        let (bundle_b, _) = trained_bundle();
        assert_eq!(
            bundle_a.mrm.as_ref().unwrap().to_flat(),
            bundle_b.mrm.as_ref().unwrap().to_flat()
        );
        assert_eq!(
            bundle_a.mdn.as_ref().unwrap().0.to_flat(),
            bundle_b.mdn.as_ref().unwrap().0.to_flat()
        );
        assert_eq!(
            bundle_a.cunet.as_ref().unwrap().to_flat(),
            bundle_b.cunet.as_ref().unwrap().to_flat()
        );
        // re-running a completed stage reproduces it
        let mut again = bundle_a.clone();
        run_stage_cunet(&mut again, &cases).unwrap();
        assert_eq!(
            again.cunet.as_ref().unwrap().to_flat(),
            bundle_a.cunet.as_ref().unwrap().to_flat()
        );
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let (bundle, _) = trained_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.cdmb");
        bundle.write(&path).unwrap();
        let loaded = CheckpointBundle::read(&path).unwrap();
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(
            loaded.mrm.as_ref().unwrap().to_flat(),
            bundle.mrm.as_ref().unwrap().to_flat()
        );
        assert_eq!(
            loaded.mdn.as_ref().unwrap().0.to_flat(),
            bundle.mdn.as_ref().unwrap().0.to_flat()
        );
        assert_eq!(loaded.mdn.as_ref().unwrap().1, bundle.mdn.as_ref().unwrap().1);
        assert_eq!(
            loaded.cunet.as_ref().unwrap().to_flat(),
            bundle.cunet.as_ref().unwrap().to_flat()
        );
        // writing the loaded bundle again gives identical bytes
        let path2 = dir.path().join("ckpt2.cdmb");
        loaded.write(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let (bundle, _) = trained_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.cdmb");
        bundle.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            CheckpointBundle::read(&path),
            Err(CdmError::CorruptFile { .. })
        ));
    }

    #[test]
    fn partial_bundle_round_trips() {
        let cases = tiny_cases(4);
        let mut bundle = CheckpointBundle::new(tiny_config());
        run_stage_mrm(&mut bundle, &cases).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.cdmb");
        bundle.write(&path).unwrap();
        let loaded = CheckpointBundle::read(&path).unwrap();
        assert!(loaded.mrm.is_some());
        assert!(loaded.mdn.is_none());
        assert!(loaded.cunet.is_none());
    }

    #[test]
    fn synthesis_is_deterministic_and_in_range() {
        let (bundle, cases) = trained_bundle();
        let src = cases[0].source_batch();
        let a = synthesize(&bundle, &src, 7).unwrap();
        let b = synthesize(&bundle, &src, 7).unwrap();
        assert_eq!(a.data, b.data);
        let c = synthesize(&bundle, &src, 8).unwrap();
        assert_ne!(a.data, c.data);
        assert_eq!(a.data.shape(), &[1, 2, 16, 16]);
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn evaluation_report_structure_and_aggregates() {
        let (bundle, cases) = trained_bundle();
        let report = evaluate(&bundle, &cases).unwrap();
        // cases x 2 modalities, plus T1c/T2f/avg aggregates
        assert_eq!(report.rows.len(), cases.len() * 2);
        assert_eq!(report.aggregates.len(), 3);
        let t1c_rows: Vec<&MetricRow> = report
            .rows
            .iter()
            .filter(|r| r.modality == "T1c")
            .collect();
        let mean_psnr: f64 =
            t1c_rows.iter().map(|r| r.psnr).sum::<f64>() / t1c_rows.len() as f64;
        let agg = report.aggregate("T1c").unwrap();
        assert!((agg.psnr - mean_psnr).abs() < 1e-9);
        assert!(evaluate(&bundle, &[]).is_err());
    }

    #[test]
    fn identity_baseline_reports_all_cases() {
        let cases = tiny_cases(5);
        let report = identity_baseline_report(&cases).unwrap();
        assert_eq!(report.rows.len(), 5 * 2);
        assert_eq!(report.aggregates.len(), 3);
        // phantom transfer curves differ between source and target, so the
        // baseline cannot be perfect
        assert!(report.aggregate("avg").unwrap().mae > 0.0);
    }

    #[test]
    fn benchmark_structure() {
        let (bundle, cases) = trained_bundle();
        let report = benchmark_sampling(&bundle, &cases[..2], &[10], 1).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].n_sampling, 10);
        assert!(report.rows[0].seconds_per_image > 0.0);
        assert!((report.rows[0].fps - 1.0 / report.rows[0].seconds_per_image).abs() < 1e-9);
        assert!(report.mdn_cunet_ratio > 0.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("n_sampling,seconds_per_image,fps,psnr_avg\n"));
        assert!(csv.contains("# mdn_sampling_vs_30_cunet_forwards_ratio="));
        assert!(benchmark_sampling(&bundle, &cases[..2], &[], 1).is_err());
    }

    #[test]
    fn loss_curve_csv_dialect() {
        let csv = loss_curve_csv("mrm", &[1.0, 0.5]);
        assert_eq!(csv, "stage,epoch,loss\nmrm,0,1.00000000\nmrm,1,0.50000000\n");
    }
}
