//! Separation quality metrics: SDR, SIR, and SAR from a least-squares
//! decomposition of each estimate against delayed copies of the references.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Metric values are clamped to this magnitude; a ratio beyond 24 orders of
/// magnitude (or a zero denominator) snaps to the cap exactly.
pub const METRIC_CAP_DB: f64 = 300.0;
const CAP_RATIO: f64 = 1e24;

pub const DEFAULT_FILTER_LEN: usize = 512;

/// Additive split of a padded estimate: target part, interference leaking in
/// from the other references, and everything neither projection explains.
/// The three parts sum back to the zero-padded estimate.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub ridge_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceMetrics {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
}

/// Permutation-resolved metrics for one mixture, indexed by estimate; entry
/// i was scored against reference `permutation[i]`.
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub sdr_db: Vec<f64>,
    pub sir_db: Vec<f64>,
    pub sar_db: Vec<f64>,
    pub permutation: Vec<usize>,
    pub filter_len: usize,
    pub ridge_used: bool,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn db_ratio(num: f64, den: f64) -> f64 {
    if !(den > num / CAP_RATIO) || den == 0.0 {
        return METRIC_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

/// Cholesky factorization in flat row-major storage; `None` when a pivot is
/// not strictly positive.
fn cholesky_solve(gram: &[f64], rhs: &[f64], dim: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let dot: f64 = l[i * dim..i * dim + j]
                .iter()
                .zip(&l[j * dim..j * dim + j])
                .map(|(a, b)| a * b)
                .sum();
            let mut sum = gram[i * dim + j] - dot;
            if i == j {
                sum += ridge;
                if !(sum > 0.0) {
                    return None;
                }
                l[i * dim + i] = sum.sqrt();
            } else {
                l[i * dim + j] = sum / l[j * dim + j];
            }
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..dim {
        let dot: f64 = l[i * dim..i * dim + i].iter().zip(&y).map(|(a, b)| a * b).sum();
        y[i] = (y[i] - dot) / l[i * dim + i];
    }
    for i in (0..dim).rev() {
        let mut acc = y[i];
        for k in i + 1..dim {
            acc -= l[k * dim + i] * y[k];
        }
        y[i] = acc / l[i * dim + i];
    }
    Some(y)
}

/// Plain solve first; a failed factorization retries once with a diagonal
/// ridge of 1e-12 times the trace and reports that it did.
fn solve_spd(gram: &[f64], rhs: &[f64], dim: usize) -> Result<(Vec<f64>, bool)> {
    if let Some(x) = cholesky_solve(gram, rhs, dim, 0.0) {
        return Ok((x, false));
    }
    let trace: f64 = (0..dim).map(|i| gram[i * dim + i]).sum();
    let ridge = 1e-12 * trace + f64::MIN_POSITIVE;
    match cholesky_solve(gram, rhs, dim, ridge) {
        Some(x) => Ok((x, true)),
        None => Err(Error::Numeric {
            tensor: "projection normal equations".into(),
            detail: "not positive definite even with ridge".into(),
        }),
    }
}

/// Least-squares projection of `est` onto the 0..filter_len-1 sample delays
/// of every signal in `sources`, over the padded length n+filter_len-1.
/// Correlations come from one FFT per signal; the normal equations are a
/// block-Toeplitz Gram solved by Cholesky.
fn project(est: &[f64], sources: &[&[f64]], filter_len: usize) -> Result<(Vec<f64>, bool)> {
    let n = est.len();
    let l = filter_len;
    let padded = n + l - 1;
    let m = (n + l).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);

    let spectrum = |x: &[f64]| -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(m, Complex64::new(0.0, 0.0));
        fft.process(&mut buf);
        buf
    };
    let src_spec: Vec<Vec<Complex64>> = sources.iter().map(|s| spectrum(s)).collect();
    let est_spec = spectrum(est);

    // corr(a, b)[d] = sum_u a[u] b[u+d]; negative lags wrap to the top bins,
    // uncorrupted because m >= n + l.
    let corr = |a: &[Complex64], b: &[Complex64]| -> Vec<f64> {
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x.conj() * y).collect();
        ifft.process(&mut buf);
        buf.iter().map(|c| c.re / m as f64).collect()
    };
    let lag = |tab: &[f64], d: isize| -> f64 {
        if d >= 0 {
            tab[d as usize]
        } else {
            tab[m - (-d) as usize]
        }
    };

    let cs = sources.len();
    let dim = cs * l;
    let mut gram = vec![0.0; dim * dim];
    for j in 0..cs {
        for k in j..cs {
            let tab = corr(&src_spec[j], &src_spec[k]);
            for t in 0..l {
                for s in 0..l {
                    let v = lag(&tab, t as isize - s as isize);
                    gram[(j * l + t) * dim + (k * l + s)] = v;
                    gram[(k * l + s) * dim + (j * l + t)] = v;
                }
            }
        }
    }
    let mut rhs = vec![0.0; dim];
    for j in 0..cs {
        let tab = corr(&src_spec[j], &est_spec);
        rhs[j * l..(j + 1) * l].copy_from_slice(&tab[..l]);
    }

    let (coef, ridge_used) = solve_spd(&gram, &rhs, dim)?;
    let mut proj = vec![0.0; padded];
    for j in 0..cs {
        for t in 0..l {
            let h = coef[j * l + t];
            if h != 0.0 {
                for (u, &sv) in sources[j].iter().enumerate() {
                    proj[u + t] += h * sv;
                }
            }
        }
    }
    Ok((proj, ridge_used))
}

/// Per-estimate projection pieces shared by every permutation assignment:
/// one target projection per reference plus the all-references projection.
struct EstProjections {
    s_targets: Vec<Vec<f64>>,
    p_all: Vec<f64>,
    est_pad: Vec<f64>,
    ridge_used: bool,
}

fn est_projections(
    estimate: &Waveform,
    truths: &[Waveform],
    filter_len: usize,
) -> Result<EstProjections> {
    if truths.is_empty() {
        return Err(Error::Data("no reference sources to score against".into()));
    }
    if filter_len == 0 {
        return Err(Error::InvalidConfig(
            "projection filter needs at least one tap".into(),
        ));
    }
    let n = estimate.samples.len();
    for (j, t) in truths.iter().enumerate() {
        if t.samples.len() != n {
            return Err(Error::Shape(format!(
                "reference {j} has {} samples, estimate has {n}",
                t.samples.len()
            )));
        }
    }
    let srcs: Vec<&[f64]> = truths.iter().map(|t| t.samples.as_slice()).collect();
    let mut ridge_used = false;
    let mut s_targets = Vec::with_capacity(srcs.len());
    for &s in &srcs {
        let (proj, flag) = project(&estimate.samples, &[s], filter_len)?;
        ridge_used |= flag;
        s_targets.push(proj);
    }
    let (p_all, flag) = project(&estimate.samples, &srcs, filter_len)?;
    ridge_used |= flag;
    let mut est_pad = estimate.samples.clone();
    est_pad.resize(n + filter_len - 1, 0.0);
    Ok(EstProjections {
        s_targets,
        p_all,
        est_pad,
        ridge_used,
    })
}

fn assemble(p: &EstProjections, matched: usize) -> Decomposition {
    let s_target = p.s_targets[matched].clone();
    let e_interf: Vec<f64> = p.p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let e_artif: Vec<f64> = p.est_pad.iter().zip(&p.p_all).map(|(a, b)| a - b).collect();
    Decomposition {
        s_target,
        e_interf,
        e_artif,
        ridge_used: p.ridge_used,
    }
}

/// Splits `estimate` into target, interference, and artifact parts relative
/// to `truths[matched]`. The parts sum to the zero-padded estimate exactly.
pub fn decompose(
    estimate: &Waveform,
    truths: &[Waveform],
    matched: usize,
    filter_len: usize,
) -> Result<Decomposition> {
    if matched >= truths.len() {
        return Err(Error::InvalidConfig(format!(
            "matched source index {matched} out of range for {} references",
            truths.len()
        )));
    }
    let p = est_projections(estimate, truths, filter_len)?;
    Ok(assemble(&p, matched))
}

pub fn metrics(d: &Decomposition) -> SourceMetrics {
    let st = energy(&d.s_target);
    let ei = energy(&d.e_interf);
    let ea = energy(&d.e_artif);
    let dist: Vec<f64> = d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b).collect();
    let pall: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
    SourceMetrics {
        sdr_db: db_ratio(st, energy(&dist)),
        sir_db: db_ratio(st, ei),
        sar_db: db_ratio(energy(&pall), ea),
    }
}

/// Scores both estimate-to-reference assignments and keeps the one with the
/// higher mean SDR; an exact tie keeps the identity assignment.
pub fn resolve_permutation(
    estimates: &[Waveform],
    truths: &[Waveform],
    filter_len: usize,
) -> Result<EvalMetrics> {
    if estimates.len() != 2 || truths.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "permutation search handles exactly two sources, got {} estimates and {} references",
            estimates.len(),
            truths.len()
        )));
    }
    let projs: Vec<EstProjections> = estimates
        .iter()
        .map(|e| est_projections(e, truths, filter_len))
        .collect::<Result<_>>()?;
    let score = |i: usize, j: usize| metrics(&assemble(&projs[i], j));
    let identity = [score(0, 0), score(1, 1)];
    let swapped = [score(0, 1), score(1, 0)];
    let mean = |p: &[SourceMetrics; 2]| (p[0].sdr_db + p[1].sdr_db) / 2.0;
    let (chosen, permutation) = if mean(&swapped) > mean(&identity) {
        (swapped, vec![1, 0])
    } else {
        (identity, vec![0, 1])
    };
    Ok(EvalMetrics {
        sdr_db: chosen.iter().map(|m| m.sdr_db).collect(),
        sir_db: chosen.iter().map(|m| m.sir_db).collect(),
        sar_db: chosen.iter().map(|m| m.sar_db).collect(),
        permutation,
        filter_len,
        ridge_used: projs.iter().any(|p| p.ridge_used),
    })
}

/// One test mixture: separated estimates, aligned references, and a leading
/// region to exclude from scoring (the online warm-up, zero for offline).
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub estimates: Vec<Waveform>,
    pub truths: Vec<Waveform>,
    pub skip_samples: usize,
}

#[derive(Debug, Clone)]
pub struct ItemReport {
    pub id: String,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSummary {
    pub filter_len: usize,
    pub num_mixtures: usize,
    pub mean_sdr_db: f64,
    pub median_sdr_db: f64,
    pub mean_sir_db: f64,
    pub median_sir_db: f64,
    pub mean_sar_db: f64,
    pub median_sar_db: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub items: Vec<ItemReport>,
    pub filter_len: usize,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl CorpusReport {
    /// Pools the per-estimate values of every mixture.
    pub fn summary(&self) -> CorpusSummary {
        let pool = |f: fn(&EvalMetrics) -> &Vec<f64>| -> Vec<f64> {
            self.items
                .iter()
                .flat_map(|it| f(&it.metrics).iter().copied())
                .collect()
        };
        let sdr = pool(|m| &m.sdr_db);
        let sir = pool(|m| &m.sir_db);
        let sar = pool(|m| &m.sar_db);
        CorpusSummary {
            filter_len: self.filter_len,
            num_mixtures: self.items.len(),
            mean_sdr_db: mean(&sdr),
            median_sdr_db: median(&sdr),
            mean_sir_db: mean(&sir),
            median_sir_db: median(&sir),
            mean_sar_db: mean(&sar),
            median_sar_db: median(&sar),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,perm,sdr1,sdr2,sir1,sir2,sar1,sar2\n");
        for item in &self.items {
            let m = &item.metrics;
            let perm: String = m.permutation.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                item.id, perm, m.sdr_db[0], m.sdr_db[1], m.sir_db[0], m.sir_db[1], m.sar_db[0], m.sar_db[1]
            ));
        }
        out
    }
}

/// Scores every mixture after dropping its skip region. Items are scored
/// and aggregated in input order.
pub fn evaluate_corpus(pairs: &[EvalPair], filter_len: usize) -> Result<CorpusReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let mut items = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let cut = |w: &Waveform| -> Result<Waveform> {
            if pair.skip_samples >= w.samples.len() {
                return Err(Error::Data(format!(
                    "mixture {}: skip region {} covers the whole signal ({} samples)",
                    pair.id,
                    pair.skip_samples,
                    w.samples.len()
                )));
            }
            Waveform::new(w.samples[pair.skip_samples..].to_vec())
        };
        let estimates: Vec<Waveform> = pair.estimates.iter().map(&cut).collect::<Result<_>>()?;
        let truths: Vec<Waveform> = pair.truths.iter().map(&cut).collect::<Result<_>>()?;
        let metrics = resolve_permutation(&estimates, &truths, filter_len)?;
        items.push(ItemReport {
            id: pair.id.clone(),
            metrics,
        });
    }
    Ok(CorpusReport { items, filter_len })
}
