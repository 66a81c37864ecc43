use nth_lab_core::limitgram::quantile;
use nth_lab_core::math::log_log_slope;
use nth_lab_core::GaussianRng;
use serde::Serialize;

/// Log-log slope with a percentile bootstrap interval over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `values[i][s]` is the measurement at `xs[i]` for seed `s`. The point
/// estimate fits `ln(mean_s values)` against `ln x`; each resample draws seeds
/// with replacement (the same draw for every `x`) and refits.
pub fn bootstrap_slope(xs: &[f64], values: &[Vec<f64>], resamples: usize, seed: u64) -> SlopeFit {
    assert_eq!(xs.len(), values.len());
    let means: Vec<f64> = values.iter().map(|v| mean(v)).collect();
    let slope = log_log_slope(xs, &means);
    let seeds = values.iter().map(Vec::len).min().unwrap_or(0);
    if resamples == 0 || seeds < 2 {
        return SlopeFit {
            slope,
            lo: slope,
            hi: slope,
            resamples: 0,
        };
    }
    let mut rng = GaussianRng::new(seed);
    let mut fits = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; seeds];
    for _ in 0..resamples {
        for k in idx.iter_mut() {
            *k = (rng.next_u64() % seeds as u64) as usize;
        }
        let ys: Vec<f64> = values
            .iter()
            .map(|v| idx.iter().map(|&k| v[k]).sum::<f64>() / seeds as f64)
            .collect();
        fits.push(log_log_slope(xs, &ys));
    }
    SlopeFit {
        slope,
        lo: quantile(&fits, 0.025),
        hi: quantile(&fits, 0.975),
        resamples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs = [128.0, 256.0, 512.0, 1024.0];
        let values: Vec<Vec<f64>> = xs.iter().map(|x: &f64| vec![3.0 / x; 5]).collect();
        let fit = bootstrap_slope(&xs, &values, 200, 1);
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.lo + 1.0).abs() < 1e-12 && (fit.hi + 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_interval_covers() {
        let xs = [128.0, 256.0, 512.0, 1024.0, 2048.0];
        let mut rng = GaussianRng::new(3);
        let values: Vec<Vec<f64>> = xs
            .iter()
            .map(|x: &f64| (0..10).map(|_| x.powf(-0.5) * (1.0 + 0.1 * rng.normal())).collect())
            .collect();
        let fit = bootstrap_slope(&xs, &values, 1000, 2);
        assert!(fit.lo <= fit.slope && fit.slope <= fit.hi);
        assert!(fit.lo < -0.5 + 0.1 && fit.hi > -0.5 - 0.1, "{fit:?}");
        assert!(fit.hi - fit.lo < 0.2);
        assert_eq!(bootstrap_slope(&xs, &values, 1000, 2), fit);
    }
}
