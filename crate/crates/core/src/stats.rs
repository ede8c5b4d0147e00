//! Descriptive statistics and t-tests.
//!
//! p-values come from the Student t distribution evaluated through the
//! regularized incomplete beta function, which accepts fractional degrees
//! of freedom (Welch–Satterthwaite).

use serde::{Deserialize, Serialize};
use statrs::function::beta::checked_beta_reg;

use crate::error::{Error, Result};
use crate::exec::ordered_sum;

pub fn mean(xs: &[f64]) -> f64 {
    ordered_sum(xs) / xs.len() as f64
}

/// Variance with divisor n − 1.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Upper-tail probability P(T > t) for Student's t with `df` degrees of freedom.
pub fn t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let x = df / (df + t * t);
    let half_tail = 0.5 * checked_beta_reg(df / 2.0, 0.5, x).unwrap_or(f64::NAN);
    if t >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

pub fn t_cdf(t: f64, df: f64) -> f64 {
    1.0 - t_sf(t, df)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    Greater,
    Less,
    TwoSided,
}

impl Alternative {
    fn p_value(self, t: f64, df: f64) -> f64 {
        match self {
            Alternative::Greater => t_sf(t, df),
            Alternative::Less => t_sf(-t, df),
            Alternative::TwoSided => (2.0 * t_sf(t.abs(), df)).min(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub alternative: Alternative,
}

/// `estimate / se` with the convention 0/0 = 0.
fn ratio(estimate: f64, se: f64) -> f64 {
    if se == 0.0 {
        if estimate == 0.0 {
            0.0
        } else {
            estimate.signum() * f64::INFINITY
        }
    } else {
        estimate / se
    }
}

/// One-sample t-test of `mean(xs) − mu`.
pub fn one_sample_t(xs: &[f64], mu: f64, alternative: Alternative) -> Result<TTest> {
    if xs.len() < 2 {
        return Err(Error::Domain(format!("one-sample t-test needs >= 2 values, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let se = (sample_variance(xs) / n).sqrt();
    let t = ratio(mean(xs) - mu, se);
    let df = n - 1.0;
    Ok(TTest { t, df, p: alternative.p_value(t, df), alternative })
}

/// Paired t-test on `a[i] − b[i]`.
pub fn paired_t(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    one_sample_t(&diffs, 0.0, alternative)
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)` with
/// Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain(format!(
            "Welch's t-test needs >= 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        if diff != 0.0 {
            return Err(Error::Domain("both groups have zero variance and different means".into()));
        }
        let df = na + nb - 2.0;
        return Ok(TTest { t: 0.0, df, p: alternative.p_value(0.0, df), alternative });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(TTest { t, df, p: alternative.p_value(t, df), alternative })
}

/// Pearson correlation. `Ok(None)` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Config(format!("series lengths differ ({} vs {})", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Domain("correlation needs at least 2 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// z-scores with the sample standard deviation. Returns the scores and
/// whether the group was degenerate (fewer than two values or zero
/// variance), in which case every score is 0.
pub fn zscores(xs: &[f64]) -> (Vec<f64>, bool) {
    if xs.len() < 2 {
        return (vec![0.0; xs.len()], true);
    }
    let m = mean(xs);
    let sd = sample_sd(xs);
    if sd == 0.0 || !sd.is_finite() {
        return (vec![0.0; xs.len()], true);
    }
    (xs.iter().map(|x| (x - m) / sd).collect(), false)
}
