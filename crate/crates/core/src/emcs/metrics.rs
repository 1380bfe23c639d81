//! Replication-level quality measures. One row per estimator and
//! parameter class; counting the metric block from bias = column 1, the
//! Jarque-Bera statistic sits in column 8 and the SE bias in column 10.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One-pass central moments up to order four.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance (divides by n).
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    /// Sample standard deviation (divides by n - 1).
    pub fn sample_sd(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n as f64 - 1.0)).sqrt()
        }
    }

    pub fn skewness(&self) -> f64 {
        let n = self.n as f64;
        let m2 = self.m2 / n;
        (self.m3 / n) / m2.powf(1.5)
    }

    pub fn kurtosis(&self) -> f64 {
        let n = self.n as f64;
        let m2 = self.m2 / n;
        (self.m4 / n) / (m2 * m2)
    }

    /// Jarque-Bera statistic (R/6)(S^2 + (K-3)^2/4); None when the sample
    /// is degenerate (fewer than 8 values or zero variance).
    pub fn jb(&self) -> Option<f64> {
        if self.n < 8 || self.m2 == 0.0 {
            return None;
        }
        let s = self.skewness();
        let k = self.kurtosis();
        Some(self.n as f64 / 6.0 * (s * s + (k - 3.0) * (k - 3.0) / 4.0))
    }
}

/// Jarque-Bera statistic of a replication sample.
pub fn jb_stat(estimates: &[f64]) -> Result<f64> {
    if estimates.len() < 8 {
        return Err(Error::Config(format!(
            "Jarque-Bera needs at least 8 replications, got {}",
            estimates.len()
        )));
    }
    let mut m = Moments::default();
    for &e in estimates {
        m.push(e);
    }
    m.jb().ok_or_else(|| {
        Error::Numerical("Jarque-Bera undefined: estimates have zero variance".into())
    })
}

/// One metrics row. For the ATE the bias is signed and the cross-sectional
/// SDs are zero by convention; for GATE and IATE classes the bias is the
/// average absolute per-parameter bias and shape statistics are averaged
/// over parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: String,
    pub parameter: String,
    pub bias: f64,
    pub sd_true: f64,
    pub sd_est: f64,
    pub mse: f64,
    pub mc_sd: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub jb: Option<f64>,
    pub mean_se: f64,
    pub se_bias: f64,
    pub covp90: f64,
    pub failed_reps: u32,
}

pub const CSV_HEADER: &str =
    "estimator,parameter,bias,sd_true,sd_est,mse,mc_sd,skewness,kurtosis,jb,mean_se,se_bias,covp90,failed_reps";

fn field(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{}", v)
    }
}

/// Renders the metric grid; deterministic for identical inputs.
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.estimator,
            r.parameter,
            field(r.bias),
            field(r.sd_true),
            field(r.sd_est),
            field(r.mse),
            field(r.mc_sd),
            field(r.skewness),
            field(r.kurtosis),
            r.jb.map(field).unwrap_or_else(|| "NA".into()),
            field(r.mean_se),
            field(r.se_bias),
            field(r.covp90),
            r.failed_reps,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn symmetric_two_point_sample_gives_r_over_six() {
        let r = 40;
        let mut estimates = Vec::new();
        for _ in 0..r / 2 {
            estimates.push(-1.0);
            estimates.push(1.0);
        }
        // S = 0, K = 1, so JB = R/6 * (0 + 4/4) = R/6.
        let jb = jb_stat(&estimates).unwrap();
        assert!((jb - r as f64 / 6.0).abs() < 1e-10, "{}", jb);
    }

    #[test]
    fn exact_normal_moments_give_zero() {
        // {-1, 1, 0 x4} repeated: m2 = 1/3, m4 = 1/3, so K = 3 and S = 0.
        let estimates = vec![-1.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let jb = jb_stat(&estimates).unwrap();
        assert!(jb.abs() < 1e-10, "{}", jb);
    }

    #[test]
    fn normal_draws_rarely_exceed_the_one_percent_critical_value() {
        let mut below = 0;
        let meta = 40;
        for rep in 0..meta {
            let mut rng = crate::rng::derive(31, crate::rng::stream::REPLICATION, rep);
            let draws: Vec<f64> = (0..1000)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if jb_stat(&draws).unwrap() < 9.2 {
                below += 1;
            }
        }
        assert!(below >= meta - 1, "only {} of {} below 9.2", below, meta);
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        assert!(jb_stat(&[1.0; 5]).is_err());
        assert!(jb_stat(&[2.5; 20]).is_err());
    }

    #[test]
    fn online_moments_match_direct_formulas() {
        let xs = [0.3, -1.2, 4.5, 2.2, -0.7, 0.0, 3.1, -2.4, 1.1, 0.9];
        let mut m = Moments::default();
        for &x in &xs {
            m.push(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let mk = |k: i32| xs.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
        assert!((m.mean() - mean).abs() < 1e-12);
        assert!((m.variance() - mk(2)).abs() < 1e-12);
        assert!((m.skewness() - mk(3) / mk(2).powf(1.5)).abs() < 1e-10);
        assert!((m.kurtosis() - mk(4) / (mk(2) * mk(2))).abs() < 1e-10);
    }

    #[test]
    fn csv_rendering_is_stable_and_marks_undefined_jb() {
        let rows = vec![MetricsRow {
            estimator: "oracle".into(),
            parameter: "ATE".into(),
            bias: 0.0,
            sd_true: 0.0,
            sd_est: 0.0,
            mse: 0.0,
            mc_sd: 0.0,
            skewness: f64::NAN,
            kurtosis: f64::NAN,
            jb: None,
            mean_se: 0.0,
            se_bias: 0.0,
            covp90: 1.0,
            failed_reps: 0,
        }];
        let a = render_csv(&rows);
        let b = render_csv(&rows);
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
        assert!(a.contains(",NA,"));
    }
}
