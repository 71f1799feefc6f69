//! Synthetic production/consumption and price processes with degrading forecasts.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    /// Production base level range (kW).
    pub production_level: (f64, f64),
    /// Production segment duration range (steps, inclusive).
    pub production_duration: (usize, usize),
    /// Spot price range ($/kWh).
    pub price_level: (f64, f64),
    /// Steps a spot price is held.
    pub price_hold: usize,
    pub ou_theta: f64,
    pub ou_dt: f64,
    pub production_sigma: f64,
    pub price_sigma: f64,
    pub price_floor: f64,
    pub forecast_theta: f64,
    pub forecast_production_sigma: f64,
    pub forecast_price_sigma: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            production_level: (-2.0, 2.0),
            production_duration: (30, 120),
            price_level: (0.2, 0.8),
            price_hold: 360,
            ou_theta: 0.15,
            ou_dt: 1.0,
            production_sigma: 0.3,
            price_sigma: 0.05,
            price_floor: 0.01,
            forecast_theta: 0.15,
            forecast_production_sigma: 0.5,
            forecast_price_sigma: 0.1,
        }
    }
}

/// Euler-Maruyama step of `dX = theta (mu - X) dt + sigma dW`.
pub fn ou_step(value: f64, theta: f64, mu: f64, sigma: f64, dt: f64, rng: &mut impl Rng) -> f64 {
    let drift = value + theta * (mu - value) * dt;
    if sigma == 0.0 {
        return drift;
    }
    let n: f64 = StandardNormal.sample(rng);
    drift + sigma * dt.sqrt() * n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSeries {
    pub production: Vec<f64>,
    pub price: Vec<f64>,
    pub production_base: Vec<f64>,
    pub price_base: Vec<f64>,
    pub production_noise: Vec<f64>,
    pub price_noise: Vec<f64>,
}

impl MarketSeries {
    pub fn len(&self) -> usize {
        self.production.len()
    }

    pub fn is_empty(&self) -> bool {
        self.production.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,production,price,production_base,price_base")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{k},{},{},{},{}",
                self.production[k], self.price[k], self.production_base[k], self.price_base[k]
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Series covering `steps + horizon + 1` samples.
pub fn generate_market(
    steps: usize,
    horizon: usize,
    cfg: &MarketConfig,
    rng: &mut impl Rng,
) -> MarketSeries {
    let len = steps + horizon + 1;

    let mut production_base = Vec::with_capacity(len);
    while production_base.len() < len {
        let (lo, hi) = cfg.production_duration;
        let duration = rng.random_range(lo.max(1)..=hi.max(lo.max(1)));
        let level = uniform(rng, cfg.production_level);
        production_base.extend(std::iter::repeat_n(level, duration));
    }
    production_base.truncate(len);

    // random phase so spot changes do not always align with the episode start
    let hold = cfg.price_hold.max(1);
    let mut price_base = Vec::with_capacity(len);
    let mut remaining = rng.random_range(1..=hold);
    while price_base.len() < len {
        let level = uniform(rng, cfg.price_level);
        price_base.extend(std::iter::repeat_n(level, remaining));
        remaining = hold;
    }
    price_base.truncate(len);

    let mut production_noise = Vec::with_capacity(len);
    let mut price_noise = Vec::with_capacity(len);
    let (mut p, mut l) = (0.0, 0.0);
    for _ in 0..len {
        production_noise.push(p);
        price_noise.push(l);
        p = ou_step(p, cfg.ou_theta, 0.0, cfg.production_sigma, cfg.ou_dt, rng);
        l = ou_step(l, cfg.ou_theta, 0.0, cfg.price_sigma, cfg.ou_dt, rng);
    }

    let production = production_base
        .iter()
        .zip(&production_noise)
        .map(|(b, n)| b + n)
        .collect();
    let price = price_base
        .iter()
        .zip(&price_noise)
        .map(|(b, n)| (b + n).max(cfg.price_floor))
        .collect();
    MarketSeries {
        production,
        price,
        production_base,
        price_base,
        production_noise,
        price_noise,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub anchor: usize,
    pub production: Vec<f64>,
    pub price: Vec<f64>,
}

/// Forecast of `horizon` samples starting at `anchor`.
///
/// The level observed at the anchor is held constant and a second OU process,
/// started at zero and scaled by `j / horizon`, is added at lead `j`.
pub fn generate_forecast(
    series: &MarketSeries,
    anchor: usize,
    horizon: usize,
    cfg: &MarketConfig,
    rng: &mut impl Rng,
) -> crate::Result<Forecast> {
    if horizon == 0 || anchor + horizon > series.len() {
        return Err(crate::Error::Contract(format!(
            "forecast window {anchor}..{} exceeds market series of length {}",
            anchor + horizon,
            series.len()
        )));
    }
    let p0 = series.production[anchor];
    let l0 = series.price[anchor];
    let mut production = Vec::with_capacity(horizon);
    let mut price = Vec::with_capacity(horizon);
    let (mut zp, mut zl) = (0.0, 0.0);
    for j in 0..horizon {
        let scale = j as f64 / horizon as f64;
        production.push(p0 + scale * zp);
        price.push((l0 + scale * zl).max(cfg.price_floor));
        zp = ou_step(
            zp,
            cfg.forecast_theta,
            0.0,
            cfg.forecast_production_sigma,
            cfg.ou_dt,
            rng,
        );
        zl = ou_step(
            zl,
            cfg.forecast_theta,
            0.0,
            cfg.forecast_price_sigma,
            cfg.ou_dt,
            rng,
        );
    }
    Ok(Forecast {
        anchor,
        production,
        price,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ou_deterministic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ou_step(2.0, 0.15, 0.0, 0.0, 1.0, &mut rng), 2.0 - 0.3);
        assert_eq!(ou_step(2.0, 0.0, 0.0, 0.0, 1.0, &mut rng), 2.0);
    }

    #[test]
    fn ou_stationary_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (theta, sigma) = (0.15, 0.3);
        let mut x = 0.0;
        for _ in 0..1000 {
            x = ou_step(x, theta, 0.0, sigma, 1.0, &mut rng);
        }
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            x = ou_step(x, theta, 0.0, sigma, 1.0, &mut rng);
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        let expected = sigma / (2.0 * theta).sqrt();
        assert!(
            (std / expected - 1.0).abs() < 0.05,
            "std {std} vs {expected}"
        );
    }

    #[test]
    fn noiseless_single_segment_is_constant_base() {
        let cfg = MarketConfig {
            production_level: (1.5, 1.5),
            production_duration: (500, 500),
            price_level: (0.4, 0.4),
            production_sigma: 0.0,
            price_sigma: 0.0,
            ..MarketConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = generate_market(100, 20, &cfg, &mut rng);
        assert_eq!(s.len(), 121);
        assert!(s.production.iter().all(|&p| p == 1.5));
        assert!(s.price.iter().all(|&l| l == 0.4));
    }

    #[test]
    fn market_is_pure_function_of_seed() {
        let cfg = MarketConfig::default();
        let a = generate_market(100, 20, &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        let b = generate_market(100, 20, &cfg, &mut ChaCha8Rng::seed_from_u64(77));
        let c = generate_market(100, 20, &cfg, &mut ChaCha8Rng::seed_from_u64(78));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn price_floor_and_ranges() {
        let cfg = MarketConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = generate_market(100, 20, &cfg, &mut rng);
            assert!(s.price.iter().all(|&l| l >= 0.01));
            assert!(s.production_base.iter().all(|&p| (-2.0..=2.0).contains(&p)));
            assert!(s.price_base.iter().all(|&l| (0.2..=0.8).contains(&l)));
        }
    }

    #[test]
    fn forecast_lead_zero_is_truth() {
        let cfg = MarketConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = generate_market(100, 20, &cfg, &mut rng);
        for anchor in [0, 17, 100] {
            let f = generate_forecast(&s, anchor, 20, &cfg, &mut rng).unwrap();
            assert_eq!(f.production[0], s.production[anchor]);
            assert_eq!(f.price[0], s.price[anchor]);
        }
        assert!(generate_forecast(&s, 102, 20, &cfg, &mut rng).is_err());
    }

    #[test]
    fn noiseless_forecast_is_constant() {
        let cfg = MarketConfig {
            forecast_production_sigma: 0.0,
            forecast_price_sigma: 0.0,
            ..MarketConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = generate_market(100, 20, &cfg, &mut rng);
        let f = generate_forecast(&s, 30, 20, &cfg, &mut rng).unwrap();
        assert!(f.production.iter().all(|&p| p == s.production[30]));
        assert!(f.price.iter().all(|&l| l == s.price[30]));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = MarketConfig::default();
        let s = generate_market(10, 5, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("step,production,price"));
    }
}
