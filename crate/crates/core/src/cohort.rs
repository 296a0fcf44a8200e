//! Synthetic longitudinal screening cohort.
//!
//! Each patient has two eyes examined at shared, irregularly spaced visits.
//! Every eye follows a latent severity trajectory, logistic in time; the
//! observed grade is the rounded latent, and the exam features are a noisy
//! polynomial embedding of the latent. Eyes whose grade never changes are
//! dropped, and patients without a retained eye are not counted.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};
use crate::progression::{normalize_time, SeverityGrade, VisitTime};

pub const COHORT_MAGIC: &[u8; 7] = b"LMTCOH1";

const DAYS_PER_YEAR: f64 = 365.25;
/// Degree of the polynomial feature basis.
const BASIS_DEGREE: usize = 4;
/// Stream reserved for the shared feature mixing matrix.
const BASIS_STREAM: u64 = u64::MAX;
/// Candidate patients tried per requested patient before giving up.
const MAX_ATTEMPTS_PER_PATIENT: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split code {other}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    /// Retained patients (each with at least one eye that changes grade).
    pub n_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub gap_median_days: f64,
    /// Standard deviation of the log gap.
    pub gap_log_sigma: f64,
    pub gap_min_days: f64,
    pub gap_max_days: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Fraction of eyes whose severity decreases over time.
    pub regress_fraction: f64,
    /// Fraction of eyes with constant severity.
    pub flat_fraction: f64,
    /// Logistic rate range, per year.
    pub rate_min: f64,
    pub rate_max: f64,
    /// Range of the baseline latent severity.
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Range of the total severity change over the trajectory.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 2000,
            min_visits: 2,
            max_visits: 5,
            gap_median_days: 365.0,
            gap_log_sigma: 0.5,
            gap_min_days: 90.0,
            gap_max_days: 1460.0,
            feature_dim: 32,
            noise_sigma: 0.3,
            regress_fraction: 0.1,
            flat_fraction: 0.05,
            rate_min: 1.0,
            rate_max: 4.0,
            baseline_min: -0.3,
            baseline_max: 2.8,
            amplitude_min: 0.6,
            amplitude_max: 2.5,
            split_train: 0.6,
            split_val: 0.2,
            split_test: 0.2,
        }
    }
}

impl CohortConfig {
    pub const KEYS: [&'static str; 20] = [
        "n_patients",
        "min_visits",
        "max_visits",
        "gap_median_days",
        "gap_log_sigma",
        "gap_min_days",
        "gap_max_days",
        "feature_dim",
        "noise_sigma",
        "regress_fraction",
        "flat_fraction",
        "rate_min",
        "rate_max",
        "baseline_min",
        "baseline_max",
        "amplitude_min",
        "amplitude_max",
        "split_train",
        "split_val",
        "split_test",
    ];

    /// Set one field from its textual form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::contract(format!("invalid value '{v}' for {key}")))
        }
        match key {
            "n_patients" => self.n_patients = num(key, value)?,
            "min_visits" => self.min_visits = num(key, value)?,
            "max_visits" => self.max_visits = num(key, value)?,
            "gap_median_days" => self.gap_median_days = num(key, value)?,
            "gap_log_sigma" => self.gap_log_sigma = num(key, value)?,
            "gap_min_days" => self.gap_min_days = num(key, value)?,
            "gap_max_days" => self.gap_max_days = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "regress_fraction" => self.regress_fraction = num(key, value)?,
            "flat_fraction" => self.flat_fraction = num(key, value)?,
            "rate_min" => self.rate_min = num(key, value)?,
            "rate_max" => self.rate_max = num(key, value)?,
            "baseline_min" => self.baseline_min = num(key, value)?,
            "baseline_max" => self.baseline_max = num(key, value)?,
            "amplitude_min" => self.amplitude_min = num(key, value)?,
            "amplitude_max" => self.amplitude_max = num(key, value)?,
            "split_train" => self.split_train = num(key, value)?,
            "split_val" => self.split_val = num(key, value)?,
            "split_test" => self.split_test = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let v = [
            self.n_patients.to_string(),
            self.min_visits.to_string(),
            self.max_visits.to_string(),
            self.gap_median_days.to_string(),
            self.gap_log_sigma.to_string(),
            self.gap_min_days.to_string(),
            self.gap_max_days.to_string(),
            self.feature_dim.to_string(),
            self.noise_sigma.to_string(),
            self.regress_fraction.to_string(),
            self.flat_fraction.to_string(),
            self.rate_min.to_string(),
            self.rate_max.to_string(),
            self.baseline_min.to_string(),
            self.baseline_max.to_string(),
            self.amplitude_min.to_string(),
            self.amplitude_max.to_string(),
            self.split_train.to_string(),
            self.split_val.to_string(),
            self.split_test.to_string(),
        ];
        Self::KEYS.iter().copied().zip(v).collect()
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.split_train, self.split_val, self.split_test)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.n_patients == 0 {
            return fail("n_patients must be positive".into());
        }
        if self.min_visits < 2 || self.max_visits < self.min_visits {
            return fail(format!(
                "visit range [{}, {}] must satisfy 2 <= min <= max",
                self.min_visits, self.max_visits
            ));
        }
        if !(self.gap_min_days > 0.0 && self.gap_min_days <= self.gap_max_days) {
            return fail("gap bounds must satisfy 0 < min <= max".into());
        }
        if !(self.gap_median_days > 0.0 && self.gap_log_sigma >= 0.0) {
            return fail("gap median must be positive and log sigma non-negative".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        for (name, p) in [("regress_fraction", self.regress_fraction), ("flat_fraction", self.flat_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.regress_fraction + self.flat_fraction > 1.0 {
            return fail("regress_fraction + flat_fraction exceeds 1".into());
        }
        if !(0.0 < self.rate_min && self.rate_min <= self.rate_max) {
            return fail("rate range must satisfy 0 < min <= max".into());
        }
        if !(self.baseline_min <= self.baseline_max && self.amplitude_min <= self.amplitude_max) {
            return fail("baseline and amplitude ranges must be ordered".into());
        }
        check_fractions(self.fractions())
    }
}

fn check_fractions((a, b, c): (f64, f64, f64)) -> Result<()> {
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exam {
    pub patient: u64,
    pub eye: u64,
    pub t_days: f64,
    pub grade: SeverityGrade,
    /// Continuous severity that produced `grade` and `features`.
    pub latent: f64,
    pub features: Vec<f64>,
}

impl Exam {
    pub fn time(&self) -> VisitTime {
        normalize_time(self.t_days).expect("exam times are non-negative")
    }
}

/// Time-sorted exams of one eye.
#[derive(Clone, Debug, PartialEq)]
pub struct Eye {
    pub id: u64,
    pub exams: Vec<Exam>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: u64,
    pub split: Split,
    pub eyes: Vec<Eye>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub seed: u64,
    pub patients: Vec<Patient>,
}

/// Two consecutive exams of the same eye.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsecutivePair {
    pub patient: u64,
    pub eye: u64,
    /// Position of `first` within the eye's exams.
    pub index: usize,
    pub first: Exam,
    pub second: Exam,
}

impl Cohort {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn exams(&self) -> impl Iterator<Item = (&Patient, &Exam)> {
        self.patients
            .iter()
            .flat_map(|p| p.eyes.iter().flat_map(move |e| e.exams.iter().map(move |x| (p, x))))
    }

    pub fn num_exams(&self) -> usize {
        self.exams().count()
    }

    pub fn patients_in(&self, split: Split) -> impl Iterator<Item = &Patient> {
        self.patients.iter().filter(move |p| p.split == split)
    }
}

/// Polynomial embedding `x = B·φ(s) + η` shared by every exam of a cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureModel {
    /// `feature_dim × BASIS_DEGREE`, row-major.
    pub mixing: Vec<f64>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
}

impl FeatureModel {
    pub fn new(config: &CohortConfig, seed: u64) -> Self {
        let mut rng = stream(seed, BASIS_STREAM);
        let normal = Normal::new(0.0, 1.0 / (BASIS_DEGREE as f64).sqrt()).expect("valid normal");
        let mixing = (0..config.feature_dim * BASIS_DEGREE).map(|_| normal.sample(&mut rng)).collect();
        FeatureModel {
            mixing,
            feature_dim: config.feature_dim,
            noise_sigma: config.noise_sigma,
        }
    }

    /// `φ(s)`: powers 1..=4 of the centred severity `(s − 2) / 2`.
    pub fn basis(latent: f64) -> [f64; BASIS_DEGREE] {
        let u = (latent - 2.0) / 2.0;
        [u, u * u, u * u * u, u * u * u * u]
    }

    /// Noise-free features `B·φ(s)`.
    pub fn mean(&self, latent: f64) -> Vec<f64> {
        let phi = Self::basis(latent);
        self.mixing
            .chunks(BASIS_DEGREE)
            .map(|row| row.iter().zip(&phi).map(|(b, p)| b * p).sum())
            .collect()
    }

    pub fn render<R: Rng + ?Sized>(&self, latent: f64, rng: &mut R) -> Vec<f64> {
        let mut x = self.mean(latent);
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("valid sigma");
            x.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        x
    }
}

/// Features of one exam; `grade` must be the rounding of `latent`.
pub fn render_exam<R: Rng + ?Sized>(
    model: &FeatureModel,
    grade: SeverityGrade,
    latent: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if SeverityGrade::from_latent(latent) != grade {
        return Err(Error::contract(format!("grade {grade} inconsistent with latent {latent}")));
    }
    Ok(model.render(latent, rng))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Progress,
    Regress,
    Flat,
}

/// Latent severity of one eye as a function of time in years.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Trajectory {
    low: f64,
    high: f64,
    onset: f64,
    rate: f64,
    shape: Shape,
}

impl Trajectory {
    fn sample<R: Rng + ?Sized>(config: &CohortConfig, follow_up_years: f64, rng: &mut R) -> Self {
        let low = rng.random_range(config.baseline_min..=config.baseline_max);
        let amp = rng.random_range(config.amplitude_min..=config.amplitude_max);
        let high = (low + amp).min(4.4);
        let onset = rng.random_range(-0.5..=follow_up_years + 0.5);
        let rate = rng.random_range(config.rate_min..=config.rate_max);
        let u: f64 = rng.random();
        let shape = if u < config.flat_fraction {
            Shape::Flat
        } else if u < config.flat_fraction + config.regress_fraction {
            Shape::Regress
        } else {
            Shape::Progress
        };
        Trajectory {
            low,
            high,
            onset,
            rate,
            shape,
        }
    }

    fn at(&self, years: f64) -> f64 {
        let s = 1.0 / (1.0 + (-self.rate * (years - self.onset)).exp());
        match self.shape {
            Shape::Progress => self.low + (self.high - self.low) * s,
            Shape::Regress => self.high - (self.high - self.low) * s,
            Shape::Flat => self.low,
        }
    }
}

/// One candidate patient; `None` if neither eye changes grade.
fn generate_patient(config: &CohortConfig, model: &FeatureModel, seed: u64, candidate: u64) -> Option<Vec<Eye>> {
    let mut rng = stream(seed, candidate);
    let visits = rng.random_range(config.min_visits..=config.max_visits);
    let gap = LogNormal::new(config.gap_median_days.ln(), config.gap_log_sigma).expect("valid log-normal");
    let mut days = vec![0.0];
    for _ in 1..visits {
        let g = gap.sample(&mut rng).clamp(config.gap_min_days, config.gap_max_days);
        days.push(days.last().unwrap() + g.round());
    }
    let follow_up = days.last().unwrap() / DAYS_PER_YEAR;
    let mut eyes = Vec::new();
    for eye in 0..2u64 {
        let traj = Trajectory::sample(config, follow_up, &mut rng);
        let exams: Vec<Exam> = days
            .iter()
            .map(|&d| {
                let latent = traj.at(d / DAYS_PER_YEAR);
                Exam {
                    patient: 0,
                    eye,
                    t_days: d,
                    grade: SeverityGrade::from_latent(latent),
                    latent,
                    features: model.render(latent, &mut rng),
                }
            })
            .collect();
        if exams.windows(2).any(|w| w[0].grade != w[1].grade) {
            eyes.push(Eye { id: eye, exams });
        }
    }
    (!eyes.is_empty()).then_some(eyes)
}

/// Generate `config.n_patients` patients and assign splits.
pub fn generate_cohort(config: &CohortConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let model = FeatureModel::new(config, seed);
    let mut patients = Vec::with_capacity(config.n_patients);
    let max_candidates = config.n_patients * MAX_ATTEMPTS_PER_PATIENT;
    for candidate in 0..max_candidates as u64 {
        if patients.len() == config.n_patients {
            break;
        }
        if let Some(mut eyes) = generate_patient(config, &model, seed, candidate) {
            let id = patients.len() as u64;
            for e in &mut eyes {
                e.exams.iter_mut().for_each(|x| x.patient = id);
            }
            patients.push(Patient {
                id,
                split: Split::Train,
                eyes,
            });
        }
    }
    if patients.is_empty() {
        return Err(Error::contract("cohort configuration retains no eye with a grade change"));
    }
    if patients.len() < config.n_patients {
        log::warn!(
            "only {} of {} patients retained after {max_candidates} candidates",
            patients.len(),
            config.n_patients
        );
    }
    let cohort = Cohort {
        config: config.clone(),
        seed,
        patients,
    };
    split_patients(cohort, config.fractions(), seed)
}

/// Randomly partition patients into train/val/test with the given fractions.
pub fn split_patients(mut cohort: Cohort, fractions: (f64, f64, f64), seed: u64) -> Result<Cohort> {
    check_fractions(fractions)?;
    let n = cohort.patients.len();
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, BASIS_STREAM - 1));
    for (rank, &i) in order.iter().enumerate() {
        cohort.patients[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(cohort)
}

/// All consecutive same-eye pairs of patients in `split` (every split if `None`).
pub fn extract_pairs(cohort: &Cohort, split: Option<Split>) -> Vec<ConsecutivePair> {
    let mut out = Vec::new();
    for p in &cohort.patients {
        if split.is_some_and(|s| s != p.split) {
            continue;
        }
        for e in &p.eyes {
            for (index, w) in e.exams.windows(2).enumerate() {
                out.push(ConsecutivePair {
                    patient: p.id,
                    eye: e.id,
                    index,
                    first: w[0].clone(),
                    second: w[1].clone(),
                });
            }
        }
    }
    out
}

fn config_echo(cohort: &Cohort) -> String {
    let mut s = format!("seed={}\n", cohort.seed);
    for (k, v) in cohort.config.to_pairs() {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

/// Binary cohort file: magic, config echo, then one record per exam.
///
/// All integers little-endian. Echo: `u64` byte length then `key=value` lines.
/// Record: patient `u64`, eye `u64`, time in days `f64`, grade `u8`, split
/// `u8`, latent `f64`, feature count `u32`, features `f64`.
pub fn write_cohort<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    w.write_all(COHORT_MAGIC)?;
    let echo = config_echo(cohort);
    w.write_all(&(echo.len() as u64).to_le_bytes())?;
    w.write_all(echo.as_bytes())?;
    w.write_all(&(cohort.num_exams() as u64).to_le_bytes())?;
    for (p, x) in cohort.exams() {
        w.write_all(&x.patient.to_le_bytes())?;
        w.write_all(&x.eye.to_le_bytes())?;
        w.write_all(&x.t_days.to_le_bytes())?;
        w.write_all(&[x.grade.value(), p.split.code()])?;
        w.write_all(&x.latent.to_le_bytes())?;
        w.write_all(&(x.features.len() as u32).to_le_bytes())?;
        for v in &x.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated cohort file: {e}")))?;
    Ok(buf)
}

pub fn read_cohort<R: Read>(mut r: R) -> Result<Cohort> {
    let magic: [u8; 7] = read_exact(&mut r)?;
    if &magic != COHORT_MAGIC {
        return Err(Error::Format(format!(
            "bad cohort magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut echo = vec![0u8; len];
    r.read_exact(&mut echo)
        .map_err(|e| Error::Format(format!("truncated config echo: {e}")))?;
    let echo = String::from_utf8(echo).map_err(|e| Error::Format(e.to_string()))?;
    let mut config = CohortConfig::default();
    let mut seed = None;
    for line in echo.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config echo line '{line}'")))?;
        if k == "seed" {
            seed = Some(v.parse().map_err(|_| Error::Format(format!("bad seed '{v}'")))?);
        } else if !config.set(k, v).map_err(|e| Error::Format(e.to_string()))? {
            return Err(Error::Format(format!("unknown config key '{k}' in cohort file")));
        }
    }
    let seed = seed.ok_or_else(|| Error::Format("cohort file lacks a seed".into()))?;
    let count = u64::from_le_bytes(read_exact(&mut r)?);
    let mut patients: Vec<Patient> = Vec::new();
    for _ in 0..count {
        let patient = u64::from_le_bytes(read_exact(&mut r)?);
        let eye = u64::from_le_bytes(read_exact(&mut r)?);
        let t_days = f64::from_le_bytes(read_exact(&mut r)?);
        let [grade, split] = read_exact::<_, 2>(&mut r)?;
        let latent = f64::from_le_bytes(read_exact(&mut r)?);
        let dim = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let features = (0..dim)
            .map(|_| read_exact(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let grade = SeverityGrade::new(grade).map_err(|e| Error::Format(e.to_string()))?;
        let split = Split::from_code(split)?;
        let exam = Exam {
            patient,
            eye,
            t_days,
            grade,
            latent,
            features,
        };
        if patients.last().is_none_or(|p| p.id != patient) {
            patients.push(Patient {
                id: patient,
                split,
                eyes: Vec::new(),
            });
        }
        let p = patients.last_mut().unwrap();
        if p.eyes.last().is_none_or(|e| e.id != eye) {
            p.eyes.push(Eye { id: eye, exams: Vec::new() });
        }
        p.eyes.last_mut().unwrap().exams.push(exam);
    }
    Ok(Cohort { config, seed, patients })
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cohort(cohort, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    read_cohort(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// CSV with columns `patient_id,eye_id,t_days,grade`.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, mut w: W) -> Result<()> {
    writeln!(w, "patient_id,eye_id,t_days,grade")?;
    for (_, x) in cohort.exams() {
        writeln!(w, "{},{},{},{}", x.patient, x.eye, x.t_days, x.grade)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortConfig {
        CohortConfig {
            n_patients: n,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_cohort(&small(60), 7).unwrap();
        let b = generate_cohort(&small(60), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(60), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn retained_eyes_change_and_visit_counts() {
        let c = generate_cohort(&small(300), 1).unwrap();
        assert_eq!(c.patients.len(), 300);
        for p in &c.patients {
            assert!(!p.eyes.is_empty() && p.eyes.len() <= 2);
            for e in &p.eyes {
                assert!((2..=5).contains(&e.exams.len()));
                assert!(e.exams.windows(2).any(|w| w[0].grade != w[1].grade));
                assert!(e.exams.windows(2).all(|w| w[0].t_days < w[1].t_days));
                for w in e.exams.windows(2) {
                    let gap = w[1].t_days - w[0].t_days;
                    assert!((90.0..=1460.0).contains(&gap));
                }
                for x in &e.exams {
                    assert_eq!(x.grade, SeverityGrade::from_latent(x.latent));
                    assert!(x.features.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn grade_marginals_cover_all_grades() {
        let c = generate_cohort(&small(1000), 2).unwrap();
        let mut counts = [0usize; 5];
        for (_, x) in c.exams() {
            counts[x.grade.value() as usize] += 1;
        }
        let n: usize = counts.iter().sum();
        for k in counts {
            assert!(k as f64 / n as f64 > 0.01, "{counts:?}");
        }
    }

    #[test]
    fn no_change_config_is_an_error() {
        let cfg = CohortConfig {
            n_patients: 5,
            flat_fraction: 1.0,
            regress_fraction: 0.0,
            ..CohortConfig::default()
        };
        assert!(generate_cohort(&cfg, 0).is_err());
    }

    #[test]
    fn noise_free_rendering_depends_only_on_latent() {
        let cfg = CohortConfig {
            noise_sigma: 0.0,
            ..small(40)
        };
        let model = FeatureModel::new(&cfg, 3);
        let mut rng = stream(3, 0);
        let a = render_exam(&model, SeverityGrade::new(2).unwrap(), 1.7, &mut rng).unwrap();
        let b = render_exam(&model, SeverityGrade::new(2).unwrap(), 1.7, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(render_exam(&model, SeverityGrade::new(0).unwrap(), 1.7, &mut rng).is_err());
        let c = generate_cohort(&cfg, 3).unwrap();
        for (_, x) in c.exams() {
            assert_eq!(x.features, model.mean(x.latent));
        }
    }

    #[test]
    fn monte_carlo_mean() {
        let cfg = small(10);
        let model = FeatureModel::new(&cfg, 4);
        let mut rng = stream(99, 0);
        let n = 4000;
        let s = 2.6;
        let mut acc = vec![0.0; cfg.feature_dim];
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(model.render(s, &mut rng)) {
                *a += v;
            }
        }
        let bound = 3.0 * cfg.noise_sigma / (n as f64).sqrt();
        for (a, m) in acc.iter().zip(model.mean(s)) {
            assert!((a / n as f64 - m).abs() < bound);
        }
    }

    #[test]
    fn severity_moves_features_consistently() {
        let cfg = small(10);
        let model = FeatureModel::new(&cfg, 5);
        let mut rng = stream(5, 1);
        let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
        let mut total = 0.0;
        let reps = 50;
        for _ in 0..reps {
            let xs: Vec<Vec<f64>> = grid.iter().map(|&s| model.render(s, &mut rng)).collect();
            let deltas: Vec<Vec<f64>> = xs
                .windows(4)
                .step_by(4)
                .map(|w| w[3].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
                .collect();
            for d in deltas.windows(2) {
                let dot: f64 = d[0].iter().zip(&d[1]).map(|(a, b)| a * b).sum();
                let na: f64 = d[0].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = d[1].iter().map(|a| a * a).sum::<f64>().sqrt();
                total += dot / (na * nb);
            }
        }
        assert!(total > 0.0);
    }

    #[test]
    fn pair_counts_match_recount() {
        let c = generate_cohort(&small(200), 6).unwrap();
        let pairs = extract_pairs(&c, None);
        let mut expect = 0;
        for p in &c.patients {
            for e in &p.eyes {
                expect += e.exams.len() - 1;
            }
        }
        assert_eq!(pairs.len(), expect);
        assert!(pairs.iter().all(|p| p.first.t_days < p.second.t_days && p.first.eye == p.second.eye));
        let by_split: usize = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| extract_pairs(&c, Some(s)).len())
            .sum();
        assert_eq!(by_split, expect);
    }

    #[test]
    fn three_visit_eye_gives_two_pairs() {
        let mut c = generate_cohort(&small(30), 7).unwrap();
        let eye = c
            .patients
            .iter()
            .flat_map(|p| &p.eyes)
            .find(|e| e.exams.len() == 3)
            .cloned()
            .expect("some eye with three visits");
        c.patients.truncate(1);
        c.patients[0].eyes = vec![eye];
        assert_eq!(extract_pairs(&c, None).len(), 2);
    }

    #[test]
    fn split_partition_and_sizes() {
        let c = generate_cohort(&small(101), 8).unwrap();
        let count = |s| c.patients_in(s).count() as f64;
        assert!((count(Split::Train) - 60.6).abs() <= 1.0);
        assert!((count(Split::Val) - 20.2).abs() <= 1.0);
        assert!((count(Split::Test) - 20.2).abs() <= 1.0);
        let all = split_patients(c.clone(), (1.0, 0.0, 0.0), 1).unwrap();
        assert!(all.patients.iter().all(|p| p.split == Split::Train));
        assert!(split_patients(c.clone(), (0.5, 0.2, 0.2), 1).is_err());
        assert!(split_patients(c, (1.2, -0.2, 0.0), 1).is_err());
    }

    #[test]
    fn file_round_trip_and_csv() {
        let c = generate_cohort(&small(25), 9).unwrap();
        let mut buf = Vec::new();
        write_cohort(&c, &mut buf).unwrap();
        assert_eq!(&buf[..7], COHORT_MAGIC);
        let back = read_cohort(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert!(read_cohort(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cohort(&bad[..]), Err(Error::Format(_))));

        let mut csv = Vec::new();
        write_cohort_csv(&c, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("patient_id,eye_id,t_days,grade\n"));
        assert_eq!(text.lines().count(), c.num_exams() + 1);
    }
}
