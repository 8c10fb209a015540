//! Price discretization.
//!
//! Whether a price is "expensive" only makes sense relative to its category,
//! so absolute prices are mapped to discrete levels per category: fit a
//! logistic distribution to the category's prices by maximum likelihood, then
//! cut the fitted CDF between the category's min and max price into
//! equal-probability bins.
//!
//! The CDF is parameterized by mean `mu` and standard deviation `delta`:
//!
//! ```text
//! cdf(x) = 1 / (1 + exp(-pi * (x - mu) / (sqrt(3) * delta)))
//! ```
//!
//! and a price maps to `round(rho * (cdf(x) - cdf(min)) / (cdf(max) - cdf(min)))`,
//! clamped into `1..=rho` (rounding is half-away-from-zero, which `round`
//! already is; the half-width end bins fold into levels 1 and rho so exactly
//! `rho` distinct levels exist).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

// Inherent float methods shadow the trait under std; without std the trait
// (backed by libm) is the only provider.
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub enum PriceError {
    TooFewSamples { n: usize },
    EmptyCategory,
    UnknownCategory { index: usize },
}

impl core::fmt::Display for PriceError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PriceError::TooFewSamples { n } => {
                write!(f, "logistic fit needs at least 2 samples, got {n}")
            }
            PriceError::EmptyCategory => write!(f, "category has no prices"),
            PriceError::UnknownCategory { index } => write!(f, "category {index} not in scheme"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PriceError {}

/// Maximum-likelihood logistic fit in mean/standard-deviation form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    pub mu: f64,
    pub delta: f64,
    pub n_samples: usize,
    /// False when the Newton solver did not converge or the sample was
    /// degenerate and moment/floor estimates were used instead.
    pub converged: bool,
}

/// CDF of the logistic distribution with the fit's mean and standard
/// deviation. Strictly increasing, bounded in (0, 1).
pub fn logistic_cdf(x: f64, fit: &LogisticFit) -> f64 {
    let z = core::f64::consts::PI * (x - fit.mu) / (3.0_f64.sqrt() * fit.delta);
    1.0 / (1.0 + (-z).exp())
}

/// Quantile function matching [`logistic_cdf`].
pub fn logistic_quantile(p: f64, fit: &LogisticFit) -> f64 {
    let scale = 3.0_f64.sqrt() * fit.delta / core::f64::consts::PI;
    fit.mu + scale * (p / (1.0 - p)).ln()
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
const PRICE_EPS: f64 = 1e-6;

/// Fit (mu, delta) by maximum likelihood: damped Newton from the moment
/// estimates, falling back to the moments themselves on non-convergence.
/// An all-identical sample degenerates to `delta = max(1e-6, 0.01 * |mu|)`.
pub fn fit_logistic(prices: &[f64]) -> Result<LogisticFit, PriceError> {
    let n = prices.len();
    if n < 2 {
        return Err(PriceError::TooFewSamples { n });
    }
    let mean = prices.iter().sum::<f64>() / n as f64;
    let var = prices.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();

    if std < PRICE_EPS {
        return Ok(LogisticFit {
            mu: mean,
            delta: (0.01 * mean.abs()).max(PRICE_EPS),
            n_samples: n,
            converged: false,
        });
    }

    // Work in the location/scale parametrization: scale s = sqrt(3)*delta/pi.
    let mut mu = mean;
    let mut s = 3.0_f64.sqrt() * std / core::f64::consts::PI;
    let mut ll = logistic_ll(prices, mu, s);
    let mut converged = false;

    for _ in 0..NEWTON_MAX_ITER {
        let (g_mu, g_s, h_mm, h_ms, h_ss) = logistic_ll_derivs(prices, mu, s);
        // Newton step: solve H * step = -grad for the 2x2 Hessian.
        let det = h_mm * h_ss - h_ms * h_ms;
        let (mut d_mu, mut d_s) = if det.abs() > 1e-300 {
            ((-(g_mu * h_ss - g_s * h_ms)) / det, (-(h_mm * g_s - h_ms * g_mu)) / det)
        } else {
            // Fall back to a gradient step when the Hessian is singular.
            (g_mu * 1e-3, g_s * 1e-3)
        };

        // Damping: halve until the likelihood does not decrease and s stays
        // positive.
        let mut accepted = false;
        for _ in 0..40 {
            let (mu2, s2) = (mu + d_mu, s + d_s);
            if s2 > 0.0 {
                let ll2 = logistic_ll(prices, mu2, s2);
                if ll2 >= ll - 1e-15 {
                    let change = d_mu.abs().max(d_s.abs());
                    mu = mu2;
                    s = s2;
                    ll = ll2;
                    accepted = true;
                    if change < NEWTON_TOL {
                        converged = true;
                    }
                    break;
                }
            }
            d_mu *= 0.5;
            d_s *= 0.5;
        }
        if converged || !accepted {
            break;
        }
    }

    if converged {
        Ok(LogisticFit {
            mu,
            delta: s * core::f64::consts::PI / 3.0_f64.sqrt(),
            n_samples: n,
            converged: true,
        })
    } else {
        // Moment fallback, flagged.
        Ok(LogisticFit { mu: mean, delta: std, n_samples: n, converged: false })
    }
}

fn logistic_ll(xs: &[f64], mu: f64, s: f64) -> f64 {
    let mut ll = 0.0;
    for &x in xs {
        let z = (x - mu) / s;
        // log f = -z - ln s - 2 ln(1 + e^{-z}); evaluate stably for |z| large.
        let log1p_exp = if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
        ll += -z - s.ln() - 2.0 * log1p_exp;
    }
    ll
}

fn logistic_ll_derivs(xs: &[f64], mu: f64, s: f64) -> (f64, f64, f64, f64, f64) {
    let (mut g_mu, mut g_s) = (0.0, 0.0);
    let (mut h_mm, mut h_ms, mut h_ss) = (0.0, 0.0, 0.0);
    for &x in xs {
        let z = (x - mu) / s;
        let sig = 1.0 / (1.0 + (-z).exp());
        let t = 2.0 * sig - 1.0;
        let w = sig * (1.0 - sig);
        g_mu += t / s;
        g_s += (t * z - 1.0) / s;
        h_mm += -2.0 * w / (s * s);
        h_ms += (-2.0 * w * z - t) / (s * s);
        h_ss += (-2.0 * w * z * z - 2.0 * t * z + 1.0) / (s * s);
    }
    (g_mu, g_s, h_mm, h_ms, h_ss)
}

/// Per-category pieces of a [`LevelScheme`].
#[derive(Debug, Clone)]
pub struct CategoryLevels {
    pub fit: LogisticFit,
    pub min_price: f64,
    pub max_price: f64,
    /// Set when cdf(max) == cdf(min) and every price folds into level 1.
    pub degenerate: bool,
}

/// Price-to-level mapping for every category.
#[derive(Debug, Clone)]
pub struct LevelScheme {
    pub rho: usize,
    pub categories: Vec<CategoryLevels>,
}

impl LevelScheme {
    /// Fit each category independently. `prices_by_category[c]` lists the
    /// distinct items' prices of category `c`.
    pub fn fit(prices_by_category: &[Vec<f64>], rho: usize) -> Result<LevelScheme, PriceError> {
        assert!(rho >= 2, "need at least two price levels");
        let mut categories = Vec::with_capacity(prices_by_category.len());
        for prices in prices_by_category {
            if prices.is_empty() {
                return Err(PriceError::EmptyCategory);
            }
            let fit = if prices.len() == 1 {
                // Single item: center the fit on it.
                LogisticFit {
                    mu: prices[0],
                    delta: (0.01 * prices[0].abs()).max(PRICE_EPS),
                    n_samples: 1,
                    converged: false,
                }
            } else {
                fit_logistic(prices)?
            };
            let mut min_price = prices[0];
            let mut max_price = prices[0];
            for &p in prices {
                min_price = min_price.min(p);
                max_price = max_price.max(p);
            }
            let degenerate =
                logistic_cdf(max_price, &fit) - logistic_cdf(min_price, &fit) < 1e-300;
            categories.push(CategoryLevels { fit, min_price, max_price, degenerate });
        }
        Ok(LevelScheme { rho, categories })
    }

    /// Level of price `x_p` in `category`, in `1..=rho`. The price is clamped
    /// into the category's observed [min, max] first.
    pub fn assign(&self, x_p: f64, category: usize) -> Result<usize, PriceError> {
        let cat =
            self.categories.get(category).ok_or(PriceError::UnknownCategory { index: category })?;
        if cat.degenerate {
            return Ok(1);
        }
        let x = x_p.clamp(cat.min_price, cat.max_price);
        let lo = logistic_cdf(cat.min_price, &cat.fit);
        let hi = logistic_cdf(cat.max_price, &cat.fit);
        let frac = (logistic_cdf(x, &cat.fit) - lo) / (hi - lo);
        let raw = (self.rho as f64 * frac).round(); // ties away from zero
        Ok((raw as usize).clamp(1, self.rho))
    }

    /// The rho-1 interior cut prices of a category: the prices where the
    /// assigned level steps up.
    pub fn boundaries(&self, category: usize) -> Result<Vec<f64>, PriceError> {
        let cat =
            self.categories.get(category).ok_or(PriceError::UnknownCategory { index: category })?;
        if cat.degenerate {
            return Ok(Vec::new());
        }
        let lo = logistic_cdf(cat.min_price, &cat.fit);
        let hi = logistic_cdf(cat.max_price, &cat.fit);
        let mut cuts = Vec::with_capacity(self.rho - 1);
        for level in 1..self.rho {
            let frac = (level as f64 + 0.5) / self.rho as f64;
            let p = lo + frac * (hi - lo);
            cuts.push(logistic_quantile(p, &cat.fit));
        }
        Ok(cuts)
    }
}

/// Uniform quantization alternative: `floor((x - min) / (max - min) * rho)`
/// clamped into `1..=rho`.
pub fn assign_level_uniform(x_p: f64, min: f64, max: f64, rho: usize) -> usize {
    if max <= min {
        return 1; // degenerate range
    }
    let x = x_p.clamp(min, max);
    let raw = ((x - min) / (max - min) * rho as f64).floor() as usize;
    raw.clamp(1, rho)
}

/// One-line summary used by reports: `category, mu, delta, min, max, cuts...`.
pub fn describe_category(scheme: &LevelScheme, category: usize, name: &str) -> String {
    let cat = &scheme.categories[category];
    let cuts = scheme
        .boundaries(category)
        .unwrap_or_default()
        .iter()
        .map(|c| format!("{c:.6}"))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{cuts}",
        cat.fit.mu, cat.fit.delta, cat.min_price, cat.max_price
    )
}
