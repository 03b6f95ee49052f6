//! Randomized-smoothing certification.
//!
//! [`certify_dataset`] runs the two-phase Monte-Carlo procedure (select the
//! top class, then lower-bound its probability) on every input and keeps a
//! [`CertCache`]. [`incremental_certify`] re-certifies a modified classifier
//! against that cache by bounding how often the two disagree under the same
//! noise.

mod binom;
mod normal;

pub use binom::{beta_inc, binom_lower_bound, binom_upper_bound, ln_gamma};
pub use normal::{erfc, inv_norm_cdf, norm_cdf};

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::quant::QuantizedNetwork;
use crate::rng::{input_stream, Phase, StreamRng};

/// Radius thresholds reported in every [`AcrReport`].
pub const RADIUS_GRID: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// A deterministic classifier on flat inputs.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn classify(&self, x: &[f64]) -> usize;
}

impl BaseClassifier for Network {
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn classify(&self, x: &[f64]) -> usize {
        self.classify_slice(x, None)
    }
}

impl BaseClassifier for QuantizedNetwork {
    fn num_classes(&self) -> usize {
        self.base().num_classes()
    }

    fn classify(&self, x: &[f64]) -> usize {
        self.classify_slice(x)
    }
}

/// Wraps a closure as a classifier.
pub struct FnClassifier<F> {
    pub num_classes: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> usize + Sync> BaseClassifier for FnClassifier<F> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn classify(&self, x: &[f64]) -> usize {
        (self.f)(x)
    }
}

/// Class counts of `clf(x + ε)` over `n` draws `ε ~ N(0, σ²I)` from `rng`.
/// When `trace` is given, the individual predictions are appended to it.
pub fn sample_counts<C: BaseClassifier + ?Sized>(
    clf: &C,
    x: &[f64],
    sigma: f64,
    n: usize,
    rng: &mut StreamRng,
    mut trace: Option<&mut Vec<u32>>,
) -> Vec<u64> {
    let mut counts = vec![0u64; clf.num_classes()];
    let mut noisy = vec![0.0; x.len()];
    for _ in 0..n {
        for (y, &v) in noisy.iter_mut().zip(x) {
            let e: f64 = rng.sample(StandardNormal);
            *y = v + sigma * e;
        }
        let c = clf.classify(&noisy);
        counts[c] += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(c as u32);
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    pub sigma: f64,
    /// Samples used to pick the top class.
    pub n_select: usize,
    /// Samples used to bound its probability.
    pub n_estimate: usize,
    pub alpha: f64,
}

impl SmoothingParams {
    /// Selection size `max(32, n/10)`.
    pub fn new(sigma: f64, n: usize, alpha: f64) -> Self {
        Self {
            sigma,
            n_select: (n / 10).max(32),
            n_estimate: n,
            alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || self.n_select == 0 || self.n_estimate == 0 {
            return Err(Error::Config(format!("invalid smoothing parameters {self:?}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Outcome of certifying one input, before comparison with its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certified {
    pub predicted: usize,
    pub p_lower: f64,
    /// `None` when the procedure abstains (`p_lower <= 0.5`).
    pub radius: Option<f64>,
}

fn radius_for(sigma: f64, p: f64) -> Option<f64> {
    if p > 0.5 {
        // p > 0.5 and p <= 1; p == 1 only with n = ∞, which cannot occur.
        inv_norm_cdf(p.min(1.0 - f64::EPSILON)).ok().map(|z| sigma * z)
    } else {
        None
    }
}

/// Two-phase certification: pick the top class from `n_select` draws of
/// `select`, lower-bound its probability from `n_estimate` fresh draws of
/// `estimate`, and return radius `σ·Φ⁻¹(p_lower)` or abstain.
pub fn certify_input<C: BaseClassifier + ?Sized>(
    clf: &C,
    x: &[f64],
    params: &SmoothingParams,
    select: &mut StreamRng,
    estimate: &mut StreamRng,
    trace: Option<&mut Vec<u32>>,
) -> Certified {
    let sel = sample_counts(clf, x, params.sigma, params.n_select, select, None);
    let predicted = crate::nn::argmax_u64(&sel);
    let counts = sample_counts(clf, x, params.sigma, params.n_estimate, estimate, trace);
    let p_lower = binom_lower_bound(counts[predicted], params.n_estimate as u64, params.alpha)
        .expect("validated counts");
    Certified {
        predicted,
        p_lower,
        radius: radius_for(params.sigma, p_lower),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationRecord {
    pub input_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub p_lower: f64,
    pub radius: Option<f64>,
    pub correct: bool,
    pub n: usize,
    pub sigma: f64,
    pub alpha: f64,
}

impl CertificationRecord {
    pub fn abstained(&self) -> bool {
        self.radius.is_none()
    }

    /// Contribution to the ACR: the radius when certified and correct,
    /// otherwise 0.
    pub fn certified_radius(&self) -> f64 {
        match self.radius {
            Some(r) if self.correct => r,
            _ => 0.0,
        }
    }
}

/// Fraction of records that are correct, not abstained and have radius
/// `> r` (`>= r` at `r = 0`).
pub fn certified_accuracy(records: &[CertificationRecord], r: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|rec| match rec.radius {
            Some(rad) if rec.correct => rad > r || (r == 0.0 && rad >= 0.0),
            _ => false,
        })
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcrReport {
    pub acr: f64,
    pub records: Vec<CertificationRecord>,
    /// `(r, certified accuracy at r)` over [`RADIUS_GRID`].
    pub certified_accuracy: Vec<(f64, f64)>,
}

impl AcrReport {
    pub fn from_records(records: Vec<CertificationRecord>) -> Self {
        let acr = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.certified_radius()).sum::<f64>() / records.len() as f64
        };
        let certified_accuracy = RADIUS_GRID.iter().map(|&r| (r, certified_accuracy(&records, r))).collect();
        Self {
            acr,
            records,
            certified_accuracy,
        }
    }

    pub fn clean_accuracy(&self) -> f64 {
        certified_accuracy(&self.records, 0.0)
    }

    /// `input_id,label,predicted,p_lower,radius,abstain,correct,n,sigma,alpha`.
    /// Abstained rows carry radius 0.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("input_id,label,predicted,p_lower,radius,abstain,correct,n,sigma,alpha\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.input_id,
                r.label,
                r.predicted,
                r.p_lower,
                r.radius.unwrap_or(0.0),
                u8::from(r.abstained()),
                u8::from(r.correct),
                r.n,
                r.sigma,
                r.alpha
            );
        }
        out
    }

    /// `radius,certified_accuracy` over the report grid.
    pub fn accuracy_table_csv(&self) -> String {
        let mut out = String::from("radius,certified_accuracy\n");
        for (r, a) in &self.certified_accuracy {
            let _ = writeln!(out, "{r},{a}");
        }
        out
    }
}

/// Parses the output of [`AcrReport::records_csv`].
pub fn parse_records_csv<R: std::io::Read>(reader: R) -> Result<Vec<CertificationRecord>> {
    const HEADER: [&str; 10] = [
        "input_id", "label", "predicted", "p_lower", "radius", "abstain", "correct", "n", "sigma", "alpha",
    ];
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Format(format!("records csv: {e}")))?;
    if header.iter().ne(HEADER) {
        return Err(Error::Format(format!("records csv: unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let bad = |what: &str| Error::Format(format!("records csv row {}: bad {what}", row + 1));
        let rec = rec.map_err(|e| Error::Format(format!("records csv row {}: {e}", row + 1)))?;
        let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|_| bad(HEADER[i]));
        let real = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad(HEADER[i]));
        let flag = |i: usize| match rec[i].trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(HEADER[i])),
        };
        out.push(CertificationRecord {
            input_id: int(0)?,
            label: int(1)?,
            predicted: int(2)?,
            p_lower: real(3)?,
            radius: if flag(5)? { None } else { Some(real(4)?) },
            correct: flag(6)?,
            n: int(7)?,
            sigma: real(8)?,
            alpha: real(9)?,
        });
    }
    Ok(out)
}

/// Cached result of certifying the original classifier on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub input_id: usize,
    pub predicted: usize,
    pub p_lower: f64,
    /// Predictions of the original classifier on the estimation draws.
    pub trace: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertCache {
    pub sigma: f64,
    pub alpha: f64,
    pub n0: usize,
    /// Seed of the per-input noise substreams.
    pub run_seed: u64,
    pub entries: Vec<CacheEntry>,
}

impl CertCache {
    pub fn get(&self, input_id: usize) -> Option<&CacheEntry> {
        self.entries
            .get(input_id)
            .filter(|e| e.input_id == input_id)
            .or_else(|| self.entries.iter().find(|e| e.input_id == input_id))
    }
}

fn check_inputs<C: BaseClassifier + ?Sized>(clf: &C, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("no inputs to certify".into()));
    }
    if data.num_classes() > clf.num_classes() {
        return Err(Error::Domain("dataset labels exceed classifier classes".into()));
    }
    Ok(())
}

/// Certifies every input of `data`. Input `i` draws its noise from
/// substreams keyed by `(seed, i, phase)`, so the result does not depend on
/// the thread count. The first `trace_len` estimation predictions of each
/// input are kept in the cache.
pub fn certify_dataset<C: BaseClassifier + ?Sized>(
    clf: &C,
    data: &Dataset,
    params: &SmoothingParams,
    seed: u64,
    trace_len: usize,
) -> Result<(AcrReport, CertCache)> {
    params.validate()?;
    check_inputs(clf, data)?;
    let results: Vec<(CertificationRecord, CacheEntry)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut select = input_stream(seed, i, Phase::Select);
            let mut estimate = input_stream(seed, i, Phase::Estimate);
            let mut trace = Vec::new();
            let keep = trace_len > 0;
            let cert = certify_input(clf, data.sample(i), params, &mut select, &mut estimate, keep.then_some(&mut trace));
            trace.truncate(trace_len);
            let label = data.label(i);
            let record = CertificationRecord {
                input_id: i,
                label,
                predicted: cert.predicted,
                p_lower: cert.p_lower,
                radius: cert.radius,
                correct: cert.predicted == label,
                n: params.n_estimate,
                sigma: params.sigma,
                alpha: params.alpha,
            };
            let entry = CacheEntry {
                input_id: i,
                predicted: cert.predicted,
                p_lower: cert.p_lower,
                trace,
            };
            (record, entry)
        })
        .collect();
    let (records, entries): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let cache = CertCache {
        sigma: params.sigma,
        alpha: params.alpha,
        n0: params.n_estimate,
        run_seed: seed,
        entries,
    };
    Ok((AcrReport::from_records(records), cache))
}

/// Incremental certification of a modified classifier.
///
/// For each input the first `n` estimation draws of the original run are
/// replayed through `clf` and compared with the cached predictions. With `d`
/// disagreements, `ζ = binom_upper_bound(d, n, alpha_zeta)` bounds the
/// disagreement probability, and the cached class is certified with
/// `p = p_lower − ζ`. Inputs whose cached bound already abstained stay
/// abstained.
pub fn incremental_certify<C: BaseClassifier + ?Sized>(
    clf: &C,
    cache: &CertCache,
    data: &Dataset,
    sigma: f64,
    n: usize,
    alpha_zeta: f64,
) -> Result<AcrReport> {
    check_inputs(clf, data)?;
    if sigma != cache.sigma {
        return Err(Error::Config(format!(
            "cache was built with sigma {}, requested {sigma}",
            cache.sigma
        )));
    }
    if n == 0 {
        return Err(Error::Config("incremental certification needs n >= 1".into()));
    }
    if !(alpha_zeta > 0.0 && alpha_zeta < 1.0) {
        return Err(Error::Config(format!("alpha_zeta must be in (0, 1), got {alpha_zeta}")));
    }
    let records: Vec<CertificationRecord> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let entry = cache.get(i).ok_or(Error::CacheMiss { input_id: i })?;
            if entry.trace.len() < n {
                return Err(Error::Config(format!(
                    "input {i}: cache holds {} traced draws, {n} requested",
                    entry.trace.len()
                )));
            }
            let x = data.sample(i);
            let mut rng = input_stream(cache.run_seed, i, Phase::Estimate);
            let mut noisy = vec![0.0; x.len()];
            let mut disagree = 0u64;
            for &orig in &entry.trace[..n] {
                for (y, &v) in noisy.iter_mut().zip(x) {
                    let e: f64 = rng.sample(StandardNormal);
                    *y = v + sigma * e;
                }
                if clf.classify(&noisy) as u32 != orig {
                    disagree += 1;
                }
            }
            let zeta = binom_upper_bound(disagree, n as u64, alpha_zeta)?;
            let p = entry.p_lower - zeta;
            let radius = if entry.p_lower > 0.5 { radius_for(sigma, p) } else { None };
            let label = data.label(i);
            Ok(CertificationRecord {
                input_id: i,
                label,
                predicted: entry.predicted,
                p_lower: p,
                radius,
                correct: entry.predicted == label,
                n,
                sigma,
                alpha: cache.alpha + alpha_zeta,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AcrReport::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn constant(class: usize) -> FnClassifier<impl Fn(&[f64]) -> usize + Sync> {
        FnClassifier {
            num_classes: 3,
            f: move |_: &[f64]| class,
        }
    }

    fn record(correct: bool, radius: Option<f64>) -> CertificationRecord {
        CertificationRecord {
            input_id: 0,
            label: 0,
            predicted: if correct { 0 } else { 1 },
            p_lower: 0.9,
            radius,
            correct,
            n: 10,
            sigma: 0.25,
            alpha: 0.001,
        }
    }

    #[test]
    fn zero_sigma_concentrates_counts() {
        let clf = FnClassifier {
            num_classes: 2,
            f: |x: &[f64]| usize::from(x[0] > 0.0),
        };
        let mut r = rng::stream(1, rng::Purpose::Noise);
        assert_eq!(sample_counts(&clf, &[0.3], 0.0, 50, &mut r, None), vec![0, 50]);
        assert_eq!(sample_counts(&constant(0), &[0.3], 1.0, 50, &mut r, None), vec![50, 0, 0]);
    }

    #[test]
    fn constant_classifier_radius_closed_form() {
        let params = SmoothingParams {
            sigma: 0.5,
            n_select: 32,
            n_estimate: 1000,
            alpha: 0.001,
        };
        let mut a = input_stream(0, 0, Phase::Select);
        let mut b = input_stream(0, 0, Phase::Estimate);
        let c = certify_input(&constant(2), &[0.0], &params, &mut a, &mut b, None);
        let p = 0.001f64.powf(1.0 / 1000.0);
        assert_eq!(c.predicted, 2);
        assert_eq!(c.p_lower, p);
        assert!((p - 0.993_116).abs() < 1e-6);
        assert_eq!(c.radius, Some(0.5 * inv_norm_cdf(p).unwrap()));
    }

    #[test]
    fn acr_composition() {
        let r = 0.25 * inv_norm_cdf(0.975).unwrap();
        let report = AcrReport::from_records(vec![record(true, Some(r))]);
        assert!((report.acr - 0.489_991).abs() < 1e-6);
    }

    #[test]
    fn certified_accuracy_rules() {
        let recs = vec![
            record(true, Some(0.3)),
            record(true, None),
            record(false, Some(0.9)),
            record(true, Some(0.6)),
        ];
        assert_eq!(certified_accuracy(&recs, 0.0), 0.5);
        assert_eq!(certified_accuracy(&recs, 0.3), 0.25);
        assert_eq!(certified_accuracy(&recs, 0.6), 0.0);
        let report = AcrReport::from_records(recs);
        assert_eq!(report.clean_accuracy(), report.certified_accuracy[0].1);
        assert!((report.acr - 0.9 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn all_abstain_gives_zero_acr() {
        let report = AcrReport::from_records(vec![record(true, None), record(false, None)]);
        assert_eq!(report.acr, 0.0);
    }
}
