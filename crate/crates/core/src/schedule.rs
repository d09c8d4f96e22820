//! Time schedules: `beta_t = c (t / (1 - t))^a` for the metric path and
//! `kappa_t` for the mixture path.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Metric-path schedule. `beta(0) = 0` and `beta` grows without bound as
/// `t -> 1`; values are clipped at `beta_cap`, beyond which paths treat the
/// conditional distribution as an exact point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule<T> {
    pub c: T,
    pub a: T,
    pub beta_cap: T,
}

impl<T: Scalar> Default for BetaSchedule<T> {
    fn default() -> Self {
        Self {
            c: T::lit(3.0),
            a: T::lit(0.9),
            beta_cap: T::lit(1e6),
        }
    }
}

impl<T: Scalar> BetaSchedule<T> {
    pub fn new(c: T, a: T, beta_cap: T) -> Result<Self> {
        for (name, v) in [("c", c), ("a", a), ("beta_cap", beta_cap)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "schedule parameter {name} = {v} must be positive and finite"
                )));
            }
        }
        Ok(Self { c, a, beta_cap })
    }

    fn check_time(t: T) -> Result<()> {
        if !(t >= T::zero() && t < T::one()) {
            return Err(Error::Domain(format!(
                "beta is defined on [0, 1), got t = {t}"
            )));
        }
        Ok(())
    }

    /// Uncapped `c (t/(1-t))^a`.
    pub fn beta_raw(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        Ok(self.c * (t / (T::one() - t)).powf(self.a))
    }

    pub fn beta(&self, t: T) -> Result<T> {
        Ok(self.beta_raw(t)?.min(self.beta_cap))
    }

    /// Whether `t` lies in the region where the raw schedule reaches the cap.
    pub fn is_capped(&self, t: T) -> Result<bool> {
        Ok(self.beta_raw(t)? >= self.beta_cap)
    }

    /// First time at which the raw schedule reaches `beta_cap`.
    pub fn cap_time(&self) -> T {
        let r = (self.beta_cap / self.c).powf(T::one() / self.a);
        r / (T::one() + r)
    }

    /// `c a (t/(1-t))^(a-1) / (1-t)^2`. Zero in the capped region. At `t = 0`
    /// the derivative is singular for `a < 1` and reported as a domain error.
    pub fn beta_dot(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        if t == T::zero() {
            if self.a < T::one() {
                return Err(Error::Domain(format!(
                    "beta_dot is singular at t = 0 for a = {} < 1",
                    self.a
                )));
            }
            return Ok(if self.a == T::one() {
                self.c
            } else {
                T::zero()
            });
        }
        if self.is_capped(t)? {
            return Ok(T::zero());
        }
        let one_minus = T::one() - t;
        Ok(self.c * self.a * (t / one_minus).powf(self.a - T::one()) / (one_minus * one_minus))
    }
}

/// Mixture-path schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaSchedule {
    /// `kappa_t = t`.
    #[default]
    Linear,
}

impl KappaSchedule {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::Linear),
            other => Err(Error::Domain(format!("unknown kappa schedule `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
        }
    }

    fn check_time<T: Scalar>(t: T) -> Result<()> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::Domain(format!(
                "kappa is defined on [0, 1], got t = {t}"
            )));
        }
        Ok(())
    }

    pub fn kappa<T: Scalar>(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        match self {
            Self::Linear => Ok(t),
        }
    }

    pub fn kappa_dot<T: Scalar>(&self, t: T) -> Result<T> {
        Self::check_time(t)?;
        match self {
            Self::Linear => Ok(T::one()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
        (f(t + h) - f(t - h)) / (2.0 * h)
    }

    #[test]
    fn beta_boundary_and_midpoint() {
        let s = BetaSchedule::<f64>::default();
        assert_eq!(s.beta(0.0).unwrap(), 0.0);
        assert!((s.beta(0.5).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn beta_matches_high_precision_values() {
        // 40-digit reference values.
        let s = BetaSchedule::<f64>::default();
        assert!((s.beta(0.9).unwrap() - 21.674_022_167_526_228).abs() < 1e-12);
        assert!((s.beta(0.3).unwrap() - 1.399_400_897_001_647_5).abs() < 1e-13);
        assert!((s.beta_dot(0.3).unwrap() - 5.997_432_415_721_346).abs() < 1e-12);
    }

    #[test]
    fn beta_rejects_t_at_or_above_one() {
        let s = BetaSchedule::<f64>::default();
        assert!(matches!(s.beta(1.0), Err(Error::Domain(_))));
        assert!(matches!(s.beta(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn beta_is_capped() {
        let s = BetaSchedule::<f64>::default();
        let t = 1.0 - 1e-9;
        assert_eq!(s.beta(t).unwrap(), 1e6);
        assert!(s.is_capped(t).unwrap());
        assert_eq!(s.beta_dot(t).unwrap(), 0.0);
        let tc = s.cap_time();
        assert!((s.beta_raw(tc).unwrap() - 1e6).abs() / 1e6 < 1e-9);
    }

    #[test]
    fn beta_dot_at_midpoint() {
        let s = BetaSchedule::<f64>::default();
        let v = s.beta_dot(0.5).unwrap();
        assert!((v - 10.8).abs() < 1e-12);
        let fd = central_difference(|t| s.beta(t).unwrap(), 0.5, 1e-6);
        assert!((v - fd).abs() < 1e-5);
    }

    #[test]
    fn beta_dot_agrees_with_finite_differences() {
        for &a in &[0.9, 2.0] {
            let s = BetaSchedule::new(3.0, a, 1e6).unwrap();
            for i in 1..10 {
                let t = i as f64 / 10.0;
                let v = s.beta_dot(t).unwrap();
                assert!(v >= 0.0);
                let fd = central_difference(|t| s.beta(t).unwrap(), t, 1e-6);
                assert!(
                    (v - fd).abs() <= 1e-5 * (1.0 + v),
                    "a={a} t={t}: {v} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn beta_dot_singular_at_zero_for_small_a() {
        let s = BetaSchedule::<f64>::default();
        assert!(matches!(s.beta_dot(0.0), Err(Error::Domain(_))));
        let s2 = BetaSchedule::new(3.0, 2.0, 1e6).unwrap();
        assert_eq!(s2.beta_dot(0.0).unwrap(), 0.0);
        let s1 = BetaSchedule::new(3.0, 1.0, 1e6).unwrap();
        assert_eq!(s1.beta_dot(0.0).unwrap(), 3.0);
    }

    #[test]
    fn beta_monotone_on_grid() {
        let s = BetaSchedule::<f64>::default();
        let mut prev = 0.0;
        for i in 0..1000 {
            let b = s.beta(i as f64 / 1000.0).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn kappa_linear() {
        let k = KappaSchedule::Linear;
        assert_eq!(k.kappa(0.25f64).unwrap(), 0.25);
        assert_eq!(k.kappa_dot(0.25f64).unwrap(), 1.0);
        assert_eq!(k.kappa(0.0f64).unwrap(), 0.0);
        assert_eq!(k.kappa(1.0f64).unwrap(), 1.0);
        let fd = central_difference(|t| k.kappa(t).unwrap(), 0.4, 1e-6);
        assert!((fd - 1.0).abs() < 1e-8);
        assert!(k.kappa(1.5f64).is_err());
        assert_eq!(KappaSchedule::parse("linear").unwrap(), k);
        assert!(KappaSchedule::parse("cosine").is_err());
    }

    #[test]
    fn single_precision_schedule() {
        let s = BetaSchedule::<f32>::default();
        assert!((s.beta(0.5).unwrap() - 3.0).abs() < 1e-6);
        assert!((s.beta_dot(0.5).unwrap() - 10.8).abs() < 1e-4);
    }
}
