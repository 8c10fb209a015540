//! Synthetic corpora with controllable price/interest structure.
//!
//! Sessions are sampled from latent "archetypes": each archetype prefers a
//! small cluster of categories AND a price band (cheap or expensive half of
//! each category). Two archetypes share every category cluster and differ
//! only in their band, so a model that exploits price has signal that pure
//! popularity cannot capture. Prices per category follow a logistic
//! distribution with per-category location/spread.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{DataError, Event};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub n_sessions: usize,
    pub rho: usize,
    pub seed: u64,
    /// Probability that a drawn item ignores the archetype and is uniform
    /// over the whole catalog.
    pub noise: f64,
    /// Probability that a non-noise PREFIX item stays in the archetype's
    /// band (the rest come from the cluster's other band). Targets always
    /// honor the band, so purity below 1 makes the prefix's price levels a
    /// noisy-but-informative cue for the target's band.
    pub band_purity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_items: 200,
            n_categories: 8,
            n_brands: 6,
            n_sessions: 5000,
            rho: 5,
            seed: 7,
            noise: 0.1,
            band_purity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceBand {
    Low,
    High,
}

#[derive(Debug, Clone)]
pub struct Archetype {
    pub categories: Vec<usize>,
    pub band: PriceBand,
}

/// What the generator actually did — enough to verify learned behavior
/// against the construction.
#[derive(Debug, Clone)]
pub struct GeneratorTruth {
    pub archetypes: Vec<Archetype>,
    /// Archetype drawn for each generated session, in generation order.
    pub session_archetype: Vec<usize>,
    /// Band of each item within its category (by price rank).
    pub item_band: Vec<PriceBand>,
    pub item_category: Vec<usize>,
    /// Per-category logistic parameters used to draw prices (mu, delta).
    pub category_price: Vec<(f64, f64)>,
}

/// Timestamps are laid out as `session_index * 100 + position`, so any event
/// time identifies the generated session it came from.
pub fn session_origin(time: i64) -> usize {
    (time / 100) as usize
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Event>, GeneratorTruth), DataError> {
    if cfg.n_categories == 0 || cfg.n_brands == 0 || cfg.rho < 2 {
        return Err(DataError::Infeasible { reason: "counts must be positive, rho >= 2".into() });
    }
    // Every category/brand/level must be able to hold >= 10 items to survive
    // core filtering.
    let needed = 10 * cfg.n_categories.max(cfg.n_brands).max(cfg.rho);
    if cfg.n_items < needed {
        return Err(DataError::Infeasible {
            reason: format!("{} items cannot fill every feature group with 10", cfg.n_items),
        });
    }
    if cfg.n_sessions < 3 {
        return Err(DataError::Infeasible { reason: "need at least 3 sessions".into() });
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(DataError::Infeasible { reason: "noise must be in [0,1]".into() });
    }

    let mut rng = Rng::new(cfg.seed);

    // Item features.
    let item_category: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_categories).collect();
    let mut brand_assign: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_brands).collect();
    rng.shuffle(&mut brand_assign);

    let category_price: Vec<(f64, f64)> =
        (0..cfg.n_categories).map(|c| (15.0 + 12.0 * c as f64, 0.25 * (15.0 + 12.0 * c as f64))).collect();
    let prices: Vec<f64> = (0..cfg.n_items)
        .map(|i| {
            let (mu, delta) = category_price[item_category[i]];
            rng.logistic(mu, delta).max(0.5)
        })
        .collect();

    // Band = cheap or expensive half of the item's category, by price rank.
    let mut item_band = vec![PriceBand::Low; cfg.n_items];
    for c in 0..cfg.n_categories {
        let mut members: Vec<usize> = (0..cfg.n_items).filter(|&i| item_category[i] == c).collect();
        members.sort_by(|&a, &b| prices[a].partial_cmp(&prices[b]).unwrap().then(a.cmp(&b)));
        let half = members.len() / 2;
        for (rank, &i) in members.iter().enumerate() {
            item_band[i] = if rank < half { PriceBand::Low } else { PriceBand::High };
        }
    }

    // Archetypes: category pairs, one low-band and one high-band archetype
    // per pair.
    let mut archetypes = Vec::new();
    let n_pairs = cfg.n_categories.div_ceil(2);
    for j in 0..n_pairs {
        let cats = vec![(2 * j) % cfg.n_categories, (2 * j + 1) % cfg.n_categories];
        archetypes.push(Archetype { categories: cats.clone(), band: PriceBand::Low });
        archetypes.push(Archetype { categories: cats, band: PriceBand::High });
    }

    // Mild popularity skew inside each pool.
    let weights: Vec<f64> = (0..cfg.n_items).map(|_| rng.uniform(0.5, 1.5)).collect();

    let pools: Vec<Vec<usize>> = archetypes
        .iter()
        .map(|a| {
            (0..cfg.n_items)
                .filter(|&i| a.categories.contains(&item_category[i]) && item_band[i] == a.band)
                .collect::<Vec<_>>()
        })
        .collect();
    // Same cluster, opposite band: where impure prefix items come from.
    let off_pools: Vec<Vec<usize>> = archetypes
        .iter()
        .map(|a| {
            (0..cfg.n_items)
                .filter(|&i| a.categories.contains(&item_category[i]) && item_band[i] != a.band)
                .collect::<Vec<_>>()
        })
        .collect();
    if pools.iter().any(|p| p.len() < 2) || off_pools.iter().any(|p| p.is_empty()) {
        return Err(DataError::Infeasible { reason: "archetype pool too small".into() });
    }

    let len_weights = [0.30, 0.25, 0.20, 0.12, 0.08, 0.05]; // session lengths 3..=8

    let mut events = Vec::new();
    let mut session_archetype = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let arch = rng.below(archetypes.len());
        session_archetype.push(arch);
        let len = 3 + rng.weighted(&len_weights);
        let pool = &pools[arch];
        let off_pool = &off_pools[arch];
        let pool_weights: Vec<f64> = pool.iter().map(|&i| weights[i]).collect();
        let off_weights: Vec<f64> = off_pool.iter().map(|&i| weights[i]).collect();

        let mut chosen: Vec<usize> = Vec::with_capacity(len);
        for slot in 0..len {
            let is_target = slot + 1 == len;
            let mut pick = 0;
            for attempt in 0..10 {
                pick = if rng.next_f64() < cfg.noise {
                    rng.weighted(&weights)
                } else if is_target || rng.next_f64() < cfg.band_purity {
                    pool[rng.weighted(&pool_weights)]
                } else {
                    off_pool[rng.weighted(&off_weights)]
                };
                if !chosen.contains(&pick) || attempt == 9 {
                    break;
                }
            }
            chosen.push(pick);
        }

        let base = s as i64 * 100;
        for (j, &item) in chosen.iter().enumerate() {
            events.push(Event {
                session_key: format!("s{s:06}"),
                timestamp: base + j as i64,
                item: format!("i{item:04}"),
                price: round2(prices[item]),
                category: format!("c{}", item_category[item]),
                brand: format!("b{}", brand_assign[item]),
            });
        }
    }

    Ok((
        events,
        GeneratorTruth { archetypes, session_archetype, item_band, item_category, category_price },
    ))
}

fn round2(x: f64) -> f64 {
    #[cfg_attr(feature = "std", allow(unused_imports))]
    use num_traits::Float;
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{apply_core_filter, build_sessions, LevelMode};

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SyntheticConfig { n_sessions: 300, ..Default::default() };
        let (a, _) = generate_synthetic(&cfg).unwrap();
        let (b, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SyntheticConfig { n_sessions: 50, ..Default::default() };
        let (a, _) = generate_synthetic(&cfg).unwrap();
        let (b, _) =
            generate_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn infeasible_configs_error() {
        let cfg = SyntheticConfig { n_items: 30, n_categories: 8, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(DataError::Infeasible { .. })));
    }

    #[test]
    fn default_corpus_survives_core_filter() {
        let (events, _) = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let set = build_sessions(&events, 19);
        let filtered = apply_core_filter(&set, 10, 5, LevelMode::Logistic).unwrap();
        assert!(filtered.sessions.len() > 4000, "kept {}", filtered.sessions.len());
        assert!(filtered.catalog.n_items() > 150);
    }

    #[test]
    fn low_band_archetypes_buy_cheap_levels() {
        let (events, truth) = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let set = build_sessions(&events, 19);
        let filtered = apply_core_filter(&set, 10, 5, LevelMode::Logistic).unwrap();

        let mut low = 0usize;
        let mut total = 0usize;
        for session in &filtered.sessions {
            let arch = truth.session_archetype[session_origin(session.last_time())];
            if truth.archetypes[arch].band != PriceBand::Low {
                continue;
            }
            for &i in &session.seq {
                total += 1;
                if filtered.catalog.level[i as usize] <= 2 {
                    low += 1;
                }
            }
        }
        let frac = low as f64 / total as f64;
        assert!(frac > 0.8, "only {frac:.3} of low-band purchases in bottom two levels");
    }
}
