//! Image-quality metrics: PSNR, SSIM, MAE, and the evaluation report.

use ndarray::Array2;

use crate::error::{CdmError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CdmError::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. Identical images yield `f64::INFINITY`;
/// aggregation excludes those with a count.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, max_value: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if max_value <= 0.0 {
        return Err(CdmError::invalid("max_value must be positive"));
    }
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub fn mae(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

// Separable valid-mode Gaussian filter.
fn gauss_filter(x: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                s += kv * x[(i, j + t)];
            }
            rows[(i, j)] = s;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                s += kv * rows[(i + t, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// valid positions only, dynamic range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CdmError::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mu_a = gauss_filter(a);
    let mu_b = gauss_filter(b);
    let m_aa = gauss_filter(&(a * a));
    let m_bb = gauss_filter(&(b * b));
    let m_ab = gauss_filter(&(a * b));
    let mut total = 0.0;
    for ((&ma, &mb), ((&aa, &bb), &ab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(m_aa.iter().zip(m_bb.iter()).zip(m_ab.iter()))
    {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub case_id: String,
    pub modality: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Per-case rows plus aggregate rows; aggregates are arithmetic means over
/// cases, with infinite-PSNR cases excluded from the PSNR mean.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<MetricRow>,
    pub infinite_psnr_count: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut report = MetricReport {
            rows,
            aggregates: Vec::new(),
            infinite_psnr_count: 0,
        };
        report.infinite_psnr_count = report.rows.iter().filter(|r| r.psnr.is_infinite()).count();
        let modalities: Vec<String> = {
            let mut seen = Vec::new();
            for r in &report.rows {
                if !seen.contains(&r.modality) {
                    seen.push(r.modality.clone());
                }
            }
            seen
        };
        for m in &modalities {
            report
                .aggregates
                .push(Self::mean_row(m, report.rows.iter().filter(|r| &r.modality == m)));
        }
        if !report.rows.is_empty() {
            report
                .aggregates
                .push(Self::mean_row("avg", report.rows.iter()));
        }
        report
    }

    fn mean_row<'a>(modality: &str, rows: impl Iterator<Item = &'a MetricRow>) -> MetricRow {
        let mut n = 0usize;
        let mut n_finite = 0usize;
        let (mut sp, mut ss, mut sm) = (0.0, 0.0, 0.0);
        for r in rows {
            n += 1;
            ss += r.ssim;
            sm += r.mae;
            if r.psnr.is_finite() {
                sp += r.psnr;
                n_finite += 1;
            }
        }
        MetricRow {
            case_id: "aggregate".to_string(),
            modality: modality.to_string(),
            psnr: if n_finite > 0 { sp / n_finite as f64 } else { f64::INFINITY },
            ssim: ss / n as f64,
            mae: sm / n as f64,
        }
    }

    pub fn aggregate(&self, modality: &str) -> Option<&MetricRow> {
        self.aggregates.iter().find(|r| r.modality == modality)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,modality,psnr,ssim,mae\n");
        for r in self.rows.iter().chain(self.aggregates.iter()) {
            let p = if r.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{:.6}", r.psnr)
            };
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.case_id, r.modality, p, r.ssim, r.mae
            ));
        }
        out
    }
}
