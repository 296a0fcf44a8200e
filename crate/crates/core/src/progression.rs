//! Severity interpolation between consecutive exams and time normalization.

use std::fmt;

use crate::error::{Error, Result};

/// Days per normalized time unit (two years).
pub const DAYS_PER_UNIT: f64 = 730.0;

/// ICDR severity grade, 0 (no DR) through 4 (proliferative DR).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeverityGrade(u8);

impl SeverityGrade {
    pub const MAX: u8 = 4;

    pub fn new(grade: u8) -> Result<Self> {
        if grade > Self::MAX {
            return Err(Error::contract(format!("severity grade {grade} outside 0..=4")));
        }
        Ok(SeverityGrade(grade))
    }

    /// Round and clamp a continuous severity onto the grade scale.
    pub fn from_latent(latent: f64) -> Self {
        SeverityGrade(latent.round().clamp(0.0, Self::MAX as f64) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

impl fmt::Display for SeverityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Time in normalized units (`days / 730`).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct VisitTime(f64);

impl VisitTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::contract(format!("visit time {t} must be finite and >= 0")));
        }
        Ok(VisitTime(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn days(self) -> f64 {
        self.0 * DAYS_PER_UNIT
    }
}

pub fn normalize_time(days: f64) -> Result<VisitTime> {
    if days < 0.0 {
        return Err(Error::contract(format!("negative time {days} days")));
    }
    VisitTime::new(days / DAYS_PER_UNIT)
}

/// Assumed shape of severity between two visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    Linear,
    /// Geometric interpolation on `grade + 1`, defined for grade 0.
    Exponential,
    /// Geometric interpolation on the raw grade; fails when either grade is 0.
    ExponentialLiteral,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Linear => "linear",
            Profile::Exponential => "exp",
            Profile::ExponentialLiteral => "exp_literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" | "lin" => Ok(Profile::Linear),
            "exp" | "exponential" => Ok(Profile::Exponential),
            "exp_literal" => Ok(Profile::ExponentialLiteral),
            other => Err(Error::contract(format!("unknown profile '{other}'"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Severity at time `t` between visits `(t_i, s_i)` and `(t_ip1, s_ip1)`.
///
/// Both profiles hit the endpoint grades exactly at `t_i` and `t_ip1`.
pub fn interpolate_severity(
    profile: Profile,
    s_i: SeverityGrade,
    s_ip1: SeverityGrade,
    t_i: f64,
    t_ip1: f64,
    t: f64,
) -> Result<f64> {
    if !(t_i < t_ip1) {
        return Err(Error::contract(format!("interval [{t_i}, {t_ip1}] is empty")));
    }
    if !(t_i <= t && t <= t_ip1) {
        return Err(Error::contract(format!("t = {t} outside [{t_i}, {t_ip1}]")));
    }
    let frac = (t - t_i) / (t_ip1 - t_i);
    interpolate_fraction(profile, s_i, s_ip1, frac)
}

/// Same as [`interpolate_severity`] with the position given as a fraction
/// `(t - t_i) / (t_ip1 - t_i)` in `[0, 1]`.
pub fn interpolate_fraction(
    profile: Profile,
    s_i: SeverityGrade,
    s_ip1: SeverityGrade,
    frac: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::contract(format!("interpolation fraction {frac} outside [0, 1]")));
    }
    let (a, b) = (s_i.as_f64(), s_ip1.as_f64());
    if frac == 0.0 {
        if profile == Profile::ExponentialLiteral && (a == 0.0 || b == 0.0) {
            return Err(literal_grade_zero());
        }
        return Ok(a);
    }
    if frac == 1.0 {
        if profile == Profile::ExponentialLiteral && (a == 0.0 || b == 0.0) {
            return Err(literal_grade_zero());
        }
        return Ok(b);
    }
    match profile {
        Profile::Linear => Ok(a + frac * (b - a)),
        Profile::Exponential => Ok(geometric(a + 1.0, b + 1.0, frac) - 1.0),
        Profile::ExponentialLiteral => {
            if a == 0.0 || b == 0.0 {
                return Err(literal_grade_zero());
            }
            Ok(geometric(a, b, frac))
        }
    }
}

fn geometric(a: f64, b: f64, frac: f64) -> f64 {
    if a == b {
        a
    } else {
        a * (b / a).powf(frac)
    }
}

fn literal_grade_zero() -> Error {
    Error::contract("literal exponential profile is undefined for grade 0")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: u8) -> SeverityGrade {
        SeverityGrade::new(v).unwrap()
    }

    #[test]
    fn time_normalization() {
        assert_eq!(normalize_time(730.0).unwrap().value(), 1.0);
        assert_eq!(normalize_time(0.0).unwrap().value(), 0.0);
        assert_eq!(normalize_time(365.0).unwrap().value(), 0.5);
        assert!(normalize_time(-1.0).is_err());
    }

    #[test]
    fn grade_bounds() {
        assert!(SeverityGrade::new(5).is_err());
        assert_eq!(SeverityGrade::from_latent(4.7).value(), 4);
        assert_eq!(SeverityGrade::from_latent(-0.3).value(), 0);
        assert_eq!(SeverityGrade::from_latent(1.5).value(), 2);
    }

    #[test]
    fn linear_midpoint() {
        let v = interpolate_severity(Profile::Linear, g(0), g(4), 1.0, 2.0, 1.5).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn exponential_offset_midpoint() {
        let v = interpolate_severity(Profile::Exponential, g(1), g(4), 0.0, 1.0, 0.5).unwrap();
        let expect = 2.0 * (5.0f64 / 2.0).sqrt() - 1.0;
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 2.1623).abs() < 1e-4);
    }

    #[test]
    fn literal_exponential_rejects_grade_zero() {
        assert!(interpolate_severity(Profile::ExponentialLiteral, g(0), g(2), 0.0, 1.0, 0.5).is_err());
        let v = interpolate_severity(Profile::ExponentialLiteral, g(1), g(4), 0.0, 1.0, 0.5).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contract_errors() {
        assert!(interpolate_severity(Profile::Linear, g(0), g(1), 1.0, 1.0, 1.0).is_err());
        assert!(interpolate_severity(Profile::Linear, g(0), g(1), 0.0, 1.0, 1.5).is_err());
        assert!(interpolate_severity(Profile::Linear, g(0), g(1), 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn endpoints_monotonicity_and_range_on_all_pairs() {
        for profile in [Profile::Linear, Profile::Exponential] {
            for a in 0..=4 {
                for b in 0..=4 {
                    let (t0, t1) = (0.37, 1.91);
                    let at0 = interpolate_severity(profile, g(a), g(b), t0, t1, t0).unwrap();
                    let at1 = interpolate_severity(profile, g(a), g(b), t0, t1, t1).unwrap();
                    assert!((at0 - a as f64).abs() < 1e-12);
                    assert!((at1 - b as f64).abs() < 1e-12);
                    let grid: Vec<f64> = (0..100)
                        .map(|k| {
                            let t = (t0 + (t1 - t0) * k as f64 / 99.0).min(t1);
                            interpolate_severity(profile, g(a), g(b), t0, t1, t).unwrap()
                        })
                        .collect();
                    if a <= b {
                        assert!(grid.windows(2).all(|w| w[1] >= w[0] - 1e-12));
                    } else {
                        assert!(grid.windows(2).all(|w| w[1] <= w[0] + 1e-12));
                    }
                    if a == b {
                        assert!(grid.iter().all(|&v| v == a as f64));
                    }
                    let (lo, hi) = (a.min(b) as f64, a.max(b) as f64);
                    assert!(grid.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
                }
            }
        }
    }
}
