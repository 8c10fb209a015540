//! Interaction logs, session building, core filtering and splitting.
//!
//! The raw input is a flat event log (one purchase per row). Events are
//! grouped into sessions, single-item sessions are dropped, overlong sessions
//! keep their most recent items, and the whole corpus is pushed through an
//! iterated 10-core filter: items must occur at least `min_count` times and
//! every price level / category / brand must contain at least `min_count`
//! items, repeated until stable. Splitting is chronological by each
//! session's last event time.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::price::{assign_level_uniform, LevelScheme};

pub const UNKNOWN: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    MissingColumn { name: String },
    MalformedRow { line: usize, reason: String },
    NegativePrice { line: usize },
    CorpusEliminated,
    TooFewSessions { n: usize },
    Infeasible { reason: String },
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::MissingColumn { name } => write!(f, "header is missing column '{name}'"),
            DataError::MalformedRow { line, reason } => {
                write!(f, "malformed row at line {line}: {reason}")
            }
            DataError::NegativePrice { line } => write!(f, "negative price at line {line}"),
            DataError::CorpusEliminated => write!(f, "corpus eliminated by core filter"),
            DataError::TooFewSessions { n } => {
                write!(f, "need at least 3 sessions to split, got {n}")
            }
            DataError::Infeasible { reason } => write!(f, "infeasible config: {reason}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for DataError {}

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub session_key: String,
    pub timestamp: i64,
    pub item: String,
    pub price: f64,
    pub category: String,
    pub brand: String,
}

/// How rows map to sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionKeying {
    /// The `session` column is already a session id.
    RawSessionId,
    /// The `session` column is a user id; a session is (user, calendar day).
    UserDay,
}

#[derive(Debug, Clone)]
pub struct SchemaConfig {
    pub delimiter: char,
    pub keying: SessionKeying,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig { delimiter: ',', keying: SessionKeying::RawSessionId }
    }
}

const COLUMNS: [&str; 6] = ["session", "timestamp", "item", "price", "category", "brand"];

/// Parse delimiter-separated text with a header naming the six columns
/// (any order). Empty category/brand cells map to the UNKNOWN sentinel.
pub fn parse_events(input: &str, schema: &SchemaConfig) -> Result<Vec<Event>, DataError> {
    let mut lines = input.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Ok(Vec::new()),
        }
    };
    let names: Vec<&str> = header.split(schema.delimiter).map(|s| s.trim()).collect();
    let mut col = [usize::MAX; 6];
    for (want_idx, want) in COLUMNS.iter().enumerate() {
        match names.iter().position(|n| n.eq_ignore_ascii_case(want)) {
            Some(i) => col[want_idx] = i,
            None => return Err(DataError::MissingColumn { name: want.to_string() }),
        }
    }

    let mut events = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(schema.delimiter).map(|s| s.trim()).collect();
        if fields.len() < names.len() {
            return Err(DataError::MalformedRow {
                line: lineno,
                reason: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        let timestamp: i64 = fields[col[1]].parse().map_err(|_| DataError::MalformedRow {
            line: lineno,
            reason: format!("bad timestamp '{}'", fields[col[1]]),
        })?;
        let price: f64 = fields[col[3]].parse().map_err(|_| DataError::MalformedRow {
            line: lineno,
            reason: format!("bad price '{}'", fields[col[3]]),
        })?;
        if !price.is_finite() {
            return Err(DataError::MalformedRow {
                line: lineno,
                reason: format!("non-finite price '{}'", fields[col[3]]),
            });
        }
        if price < 0.0 {
            return Err(DataError::NegativePrice { line: lineno });
        }
        let raw_key = fields[col[0]];
        let session_key = match schema.keying {
            SessionKeying::RawSessionId => raw_key.to_string(),
            SessionKeying::UserDay => format!("{raw_key}#{}", timestamp.div_euclid(86_400)),
        };
        let category = fields[col[4]];
        let brand = fields[col[5]];
        events.push(Event {
            session_key,
            timestamp,
            item: fields[col[2]].to_string(),
            price,
            category: if category.is_empty() { UNKNOWN.to_string() } else { category.to_string() },
            brand: if brand.is_empty() { UNKNOWN.to_string() } else { brand.to_string() },
        });
    }
    Ok(events)
}

/// Per-item features. Indices are dense; `level` is 1..=rho once assigned.
#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    pub item_ids: Vec<String>,
    pub price: Vec<f64>,
    pub category: Vec<u32>,
    pub brand: Vec<u32>,
    pub level: Vec<u32>,
    pub category_names: Vec<String>,
    pub brand_names: Vec<String>,
    pub rho: usize,
    pub scheme: Option<LevelScheme>,
}

impl ItemCatalog {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn n_brands(&self) -> usize {
        self.brand_names.len()
    }

    pub fn index_of(&self, raw_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == raw_id)
    }
}

/// A session as its full chronological item sequence (last item is the
/// prediction target, the preceding items the input prefix).
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub seq: Vec<u32>,
    pub times: Vec<i64>,
}

impl Session {
    pub fn prefix(&self) -> &[u32] {
        &self.seq[..self.seq.len() - 1]
    }

    pub fn target(&self) -> u32 {
        *self.seq.last().unwrap()
    }

    pub fn last_time(&self) -> i64 {
        *self.times.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct SessionSet {
    pub sessions: Vec<Session>,
    pub catalog: ItemCatalog,
    pub split_tag: SplitTag,
}

/// Group events into sessions: group by key in first-appearance order, sort
/// each group by timestamp (stable), drop singleton sessions, and keep only
/// the most recent `max_len + 1` items of overlong sessions (`max_len` prefix
/// items plus the target). The catalog is built from the surviving
/// sequences; item features come from the item's first occurrence.
pub fn build_sessions(events: &[Event], max_len: usize) -> SessionSet {
    let mut group_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut groups: Vec<Vec<&Event>> = Vec::new();
    for ev in events {
        let gi = *group_of.entry(ev.session_key.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[gi].push(ev);
    }

    let mut catalog = ItemCatalog::default();
    let mut item_index: BTreeMap<&str, u32> = BTreeMap::new();
    let mut cat_index: BTreeMap<&str, u32> = BTreeMap::new();
    let mut brand_index: BTreeMap<&str, u32> = BTreeMap::new();
    let mut sessions = Vec::new();

    for group in &mut groups {
        group.sort_by_key(|e| e.timestamp);
        if group.len() < 2 {
            continue;
        }
        let keep_from = group.len().saturating_sub(max_len + 1);
        let kept = &group[keep_from..];
        let mut seq = Vec::with_capacity(kept.len());
        let mut times = Vec::with_capacity(kept.len());
        for ev in kept {
            let idx = *item_index.entry(ev.item.as_str()).or_insert_with(|| {
                let cat = *cat_index.entry(ev.category.as_str()).or_insert_with(|| {
                    catalog.category_names.push(ev.category.clone());
                    (catalog.category_names.len() - 1) as u32
                });
                let brand = *brand_index.entry(ev.brand.as_str()).or_insert_with(|| {
                    catalog.brand_names.push(ev.brand.clone());
                    (catalog.brand_names.len() - 1) as u32
                });
                catalog.item_ids.push(ev.item.clone());
                catalog.price.push(ev.price);
                catalog.category.push(cat);
                catalog.brand.push(brand);
                catalog.level.push(0);
                (catalog.item_ids.len() - 1) as u32
            });
            seq.push(idx);
            times.push(ev.timestamp);
        }
        sessions.push(Session { seq, times });
    }

    SessionSet { sessions, catalog, split_tag: SplitTag::All }
}

/// How price levels are derived during filtering and preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelMode {
    Logistic,
    Uniform,
}

fn assign_levels_masked(
    catalog: &ItemCatalog,
    alive: &[bool],
    rho: usize,
    mode: LevelMode,
) -> (Vec<u32>, Option<LevelScheme>) {
    let n_cats = catalog.n_categories();
    let mut prices_by_cat: Vec<Vec<f64>> = vec![Vec::new(); n_cats];
    for i in 0..catalog.n_items() {
        if alive[i] {
            prices_by_cat[catalog.category[i] as usize].push(catalog.price[i]);
        }
    }
    // Empty categories (all items dead) get a placeholder so indices stay
    // aligned; no alive item references them.
    for p in &mut prices_by_cat {
        if p.is_empty() {
            p.push(1.0);
        }
    }
    let mut levels = vec![0u32; catalog.n_items()];
    match mode {
        LevelMode::Logistic => {
            let scheme = LevelScheme::fit(&prices_by_cat, rho).expect("non-empty categories");
            for i in 0..catalog.n_items() {
                if alive[i] {
                    levels[i] =
                        scheme.assign(catalog.price[i], catalog.category[i] as usize).unwrap()
                            as u32;
                }
            }
            (levels, Some(scheme))
        }
        LevelMode::Uniform => {
            let ranges: Vec<(f64, f64)> = prices_by_cat
                .iter()
                .map(|ps| {
                    let mut lo = ps[0];
                    let mut hi = ps[0];
                    for &p in ps {
                        lo = lo.min(p);
                        hi = hi.max(p);
                    }
                    (lo, hi)
                })
                .collect();
            for i in 0..catalog.n_items() {
                if alive[i] {
                    let (lo, hi) = ranges[catalog.category[i] as usize];
                    levels[i] = assign_level_uniform(catalog.price[i], lo, hi, rho) as u32;
                }
            }
            // Keep the fitted scheme for reporting even in uniform mode.
            let scheme = LevelScheme::fit(&prices_by_cat, rho).ok();
            (levels, scheme)
        }
    }
}

/// Iterated core filter: drop items occurring fewer than `min_count` times,
/// drop whole categories/brands/price levels containing fewer than
/// `min_count` items, re-validate sessions (length >= 2), and repeat to a
/// fixpoint. Price levels are re-fit on the surviving items each round and
/// once more for the final catalog.
pub fn apply_core_filter(
    set: &SessionSet,
    min_count: usize,
    rho: usize,
    mode: LevelMode,
) -> Result<SessionSet, DataError> {
    let catalog = &set.catalog;
    let n = catalog.n_items();
    let mut alive = vec![true; n];
    let mut sessions: Vec<Vec<u32>> = set.sessions.iter().map(|s| s.seq.clone()).collect();
    let mut times: Vec<Vec<i64>> = set.sessions.iter().map(|s| s.times.clone()).collect();

    for _round in 0..1000 {
        let mut removed = false;

        // Occurrence counts over current sessions.
        let mut occur = vec![0usize; n];
        for s in &sessions {
            for &i in s {
                occur[i as usize] += 1;
            }
        }
        for i in 0..n {
            if alive[i] && occur[i] < min_count {
                alive[i] = false;
                removed = true;
            }
        }

        // Feature groups must contain at least min_count items.
        let mut cat_count = vec![0usize; catalog.n_categories()];
        let mut brand_count = vec![0usize; catalog.n_brands()];
        for i in 0..n {
            if alive[i] {
                cat_count[catalog.category[i] as usize] += 1;
                brand_count[catalog.brand[i] as usize] += 1;
            }
        }
        for i in 0..n {
            if alive[i]
                && (cat_count[catalog.category[i] as usize] < min_count
                    || brand_count[catalog.brand[i] as usize] < min_count)
            {
                alive[i] = false;
                removed = true;
            }
        }

        // Price levels, re-derived from the current survivors.
        if alive.iter().any(|&a| a) {
            let (levels, _) = assign_levels_masked(catalog, &alive, rho, mode);
            let mut level_count = vec![0usize; rho + 1];
            for i in 0..n {
                if alive[i] {
                    level_count[levels[i] as usize] += 1;
                }
            }
            for i in 0..n {
                if alive[i] && level_count[levels[i] as usize] < min_count {
                    alive[i] = false;
                    removed = true;
                }
            }
        }

        // Strip dead items from sessions; drop sessions below 2 items.
        let mut kept_sessions = Vec::with_capacity(sessions.len());
        let mut kept_times = Vec::with_capacity(times.len());
        for (seq, tim) in sessions.iter().zip(&times) {
            let mut s2 = Vec::with_capacity(seq.len());
            let mut t2 = Vec::with_capacity(tim.len());
            for (k, &i) in seq.iter().enumerate() {
                if alive[i as usize] {
                    s2.push(i);
                    t2.push(tim[k]);
                }
            }
            if s2.len() != seq.len() {
                removed = true;
            }
            if s2.len() >= 2 {
                kept_sessions.push(s2);
                kept_times.push(t2);
            }
        }
        sessions = kept_sessions;
        times = kept_times;

        if !removed {
            break;
        }
        if sessions.is_empty() {
            return Err(DataError::CorpusEliminated);
        }
    }

    if sessions.is_empty() || !alive.iter().any(|&a| a) {
        return Err(DataError::CorpusEliminated);
    }

    // Rebuild a dense catalog over the survivors.
    let mut new_index = vec![u32::MAX; n];
    let mut new_catalog = ItemCatalog::default();
    let mut cat_map = vec![u32::MAX; catalog.n_categories()];
    let mut brand_map = vec![u32::MAX; catalog.n_brands()];
    for i in 0..n {
        if !alive[i] {
            continue;
        }
        let c = catalog.category[i] as usize;
        if cat_map[c] == u32::MAX {
            cat_map[c] = new_catalog.category_names.len() as u32;
            new_catalog.category_names.push(catalog.category_names[c].clone());
        }
        let b = catalog.brand[i] as usize;
        if brand_map[b] == u32::MAX {
            brand_map[b] = new_catalog.brand_names.len() as u32;
            new_catalog.brand_names.push(catalog.brand_names[b].clone());
        }
        new_index[i] = new_catalog.item_ids.len() as u32;
        new_catalog.item_ids.push(catalog.item_ids[i].clone());
        new_catalog.price.push(catalog.price[i]);
        new_catalog.category.push(cat_map[c]);
        new_catalog.brand.push(brand_map[b]);
        new_catalog.level.push(0);
    }

    // Final level assignment on the dense catalog.
    let alive_all = vec![true; new_catalog.n_items()];
    let (levels, scheme) = assign_levels_masked(&new_catalog, &alive_all, rho, mode);
    new_catalog.level = levels;
    new_catalog.rho = rho;
    new_catalog.scheme = scheme;

    let sessions = sessions
        .into_iter()
        .zip(times)
        .map(|(seq, tim)| Session {
            seq: seq.into_iter().map(|i| new_index[i as usize]).collect(),
            times: tim,
        })
        .collect();

    Ok(SessionSet { sessions, catalog: new_catalog, split_tag: SplitTag::All })
}

/// Chronological split by each session's last event time (stable order for
/// ties): first `ratios.0` of sessions to train, next `ratios.1` to
/// validation, remainder to test. Train/valid counts use floor.
pub fn chronological_split(
    set: &SessionSet,
    ratios: (f64, f64, f64),
) -> Result<(SessionSet, SessionSet, SessionSet), DataError> {
    let n = set.sessions.len();
    if n < 3 {
        return Err(DataError::TooFewSessions { n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| set.sessions[i].last_time());

    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_valid = (ratios.1 * n as f64).floor() as usize;

    let pick = |range: core::ops::Range<usize>, tag: SplitTag| SessionSet {
        sessions: order[range].iter().map(|&i| set.sessions[i].clone()).collect(),
        catalog: set.catalog.clone(),
        split_tag: tag,
    };
    Ok((
        pick(0..n_train, SplitTag::Train),
        pick(n_train..n_train + n_valid, SplitTag::Valid),
        pick(n_train + n_valid..n, SplitTag::Test),
    ))
}

/// Corpus statistics in the usual dataset-table shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub n_items: usize,
    pub n_price_levels: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub n_interactions: usize,
    pub n_sessions: usize,
    pub avg_length: f64,
}

pub fn corpus_stats(set: &SessionSet) -> CorpusStats {
    let n_interactions: usize = set.sessions.iter().map(|s| s.seq.len()).sum();
    let n_sessions = set.sessions.len();
    let mut seen_levels = vec![false; set.catalog.rho + 1];
    for &l in &set.catalog.level {
        seen_levels[l as usize] = true;
    }
    CorpusStats {
        n_items: set.catalog.n_items(),
        n_price_levels: seen_levels.iter().skip(1).filter(|&&b| b).count(),
        n_categories: set.catalog.n_categories(),
        n_brands: set.catalog.n_brands(),
        n_interactions,
        n_sessions,
        avg_length: if n_sessions == 0 { 0.0 } else { n_interactions as f64 / n_sessions as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(key: &str, t: i64, item: &str, price: f64, cat: &str, brand: &str) -> Event {
        Event {
            session_key: key.to_string(),
            timestamp: t,
            item: item.to_string(),
            price,
            category: cat.to_string(),
            brand: brand.to_string(),
        }
    }

    #[test]
    fn parse_single_row() {
        let text = "session,timestamp,item,price,category,brand\ns1,10,i1,5.5,c1,b1\n";
        let events = parse_events(text, &SchemaConfig::default()).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].item, "i1");
        assert_eq!(events[0].price, 5.5);
    }

    #[test]
    fn parse_rejects_negative_price() {
        let text = "session,timestamp,item,price,category,brand\ns1,10,i1,-3,c1,b1\n";
        let err = parse_events(text, &SchemaConfig::default()).unwrap_err();
        assert_eq!(err, DataError::NegativePrice { line: 2 });
        assert_eq!(err.to_string(), "negative price at line 2");
    }

    #[test]
    fn parse_header_only_gives_empty() {
        let text = "session,timestamp,item,price,category,brand\n";
        assert!(parse_events(text, &SchemaConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn parse_maps_empty_features_to_unknown() {
        let text = "session,timestamp,item,price,category,brand\ns1,10,i1,1.0,,\n";
        let events = parse_events(text, &SchemaConfig::default()).unwrap();
        assert_eq!(events[0].category, UNKNOWN);
        assert_eq!(events[0].brand, UNKNOWN);
    }

    #[test]
    fn parse_reports_malformed_rows() {
        let text = "session,timestamp,item,price,category,brand\ns1,notatime,i1,1.0,c,b\n";
        match parse_events(text, &SchemaConfig::default()).unwrap_err() {
            DataError::MalformedRow { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn user_day_keying_splits_by_calendar_day() {
        let text = "session,timestamp,item,price,category,brand\n\
                    u1,10,i1,1.0,c,b\nu1,100000,i2,1.0,c,b\n";
        let schema = SchemaConfig { delimiter: ',', keying: SessionKeying::UserDay };
        let events = parse_events(text, &schema).unwrap();
        assert_ne!(events[0].session_key, events[1].session_key);
    }

    #[test]
    fn sessions_sorted_and_singletons_dropped() {
        let events = vec![
            ev("k", 2, "i2", 1.0, "c", "b"),
            ev("k", 1, "i1", 1.0, "c", "b"),
            ev("solo", 5, "i3", 1.0, "c", "b"),
        ];
        let set = build_sessions(&events, 19);
        assert_eq!(set.sessions.len(), 1);
        let s = &set.sessions[0];
        assert_eq!(set.catalog.item_ids[s.prefix()[0] as usize], "i1");
        assert_eq!(set.catalog.item_ids[s.target() as usize], "i2");
    }

    #[test]
    fn long_sessions_keep_most_recent_items() {
        let events: Vec<Event> =
            (0..25).map(|t| ev("k", t, &format!("i{t}"), 1.0, "c", "b")).collect();
        let set = build_sessions(&events, 19);
        let s = &set.sessions[0];
        assert_eq!(s.prefix().len(), 19);
        assert_eq!(set.catalog.item_ids[s.prefix()[0] as usize], "i5");
        assert_eq!(set.catalog.item_ids[s.target() as usize], "i24");
    }

    #[test]
    fn build_sessions_is_permutation_invariant() {
        let mut events = vec![
            ev("a", 3, "i1", 1.0, "c", "b"),
            ev("a", 1, "i2", 1.0, "c", "b"),
            ev("b", 2, "i1", 1.0, "c", "b"),
            ev("b", 9, "i3", 1.0, "c", "b"),
        ];
        let base = build_sessions(&events, 19);
        events.reverse();
        let flipped = build_sessions(&events, 19);
        let names = |set: &SessionSet| -> Vec<Vec<String>> {
            set.sessions
                .iter()
                .map(|s| {
                    s.seq.iter().map(|&i| set.catalog.item_ids[i as usize].clone()).collect()
                })
                .collect()
        };
        let mut a = names(&base);
        let mut b = names(&flipped);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    /// Corpus of `n_items` distinct items at one shared price (degenerate
    /// category, everything level 1), each occurring `reps` times across
    /// two-item sessions.
    fn uniform_corpus(n_items: usize, reps: usize) -> SessionSet {
        let mut events = Vec::new();
        let mut pending: Vec<String> = Vec::new();
        for i in 0..n_items {
            for _ in 0..reps {
                pending.push(format!("item{i}"));
            }
        }
        for (snum, pair) in pending.chunks(2).enumerate() {
            if pair.len() < 2 {
                break;
            }
            let key = format!("s{snum}");
            let t = snum as i64 * 10;
            for (j, name) in pair.iter().enumerate() {
                events.push(ev(&key, t + j as i64, name, 3.0, "c", "b"));
            }
        }
        build_sessions(&events, 19)
    }

    #[test]
    fn core_filter_removes_rare_item() {
        // Six backbone items split over two price levels, each occurring 3
        // times; z occurs only twice. min_count = 3 drops z and re-validates
        // its sessions.
        let cheap = ["a", "b", "c"];
        let dear = ["d", "e", "f"];
        let mut events = Vec::new();
        let mut t = 0;
        for r in 0..3 {
            for (k, (&lo, &hi)) in cheap.iter().zip(&dear).enumerate() {
                let key = format!("s{r}_{k}");
                events.push(ev(&key, t, lo, 1.0 + 0.1 * k as f64, "c", "b"));
                events.push(ev(&key, t + 1, hi, 9.0 + 0.1 * k as f64, "c", "b"));
                t += 10;
            }
        }
        events.push(ev("z1", t, "z", 5.0, "c", "b"));
        events.push(ev("z1", t + 1, "a", 1.0, "c", "b"));
        events.push(ev("z2", t + 10, "z", 5.0, "c", "b"));
        events.push(ev("z2", t + 11, "d", 9.0, "c", "b"));
        let set = build_sessions(&events, 19);
        let filtered = apply_core_filter(&set, 3, 2, LevelMode::Logistic).unwrap();
        assert!(filtered.catalog.index_of("z").is_none());
        for name in cheap.iter().chain(&dear) {
            assert!(filtered.catalog.index_of(name).is_some(), "{name} must survive");
        }
        // The two z-sessions shrink to one item and vanish.
        assert_eq!(filtered.sessions.len(), 9);
        assert!(filtered.sessions.iter().all(|s| s.seq.len() >= 2));
    }

    #[test]
    fn core_filter_fixpoint_of_compliant_corpus_is_identity() {
        let set = uniform_corpus(12, 12);
        let once = apply_core_filter(&set, 10, 2, LevelMode::Logistic).unwrap();
        assert_eq!(once.sessions.len(), set.sessions.len());
        let twice = apply_core_filter(&once, 10, 2, LevelMode::Logistic).unwrap();
        assert_eq!(once.sessions.len(), twice.sessions.len());
        assert_eq!(once.catalog.n_items(), twice.catalog.n_items());
        for (a, b) in once.sessions.iter().zip(&twice.sessions) {
            assert_eq!(a.seq, b.seq);
        }
    }

    #[test]
    fn core_filter_cascades() {
        // All items share one price/category/brand. w occurs exactly 3 times,
        // one of them beside z (which occurs once). Removing z kills that
        // session, drags w to 2 < 3, and w goes on the second pass.
        let mut events = Vec::new();
        let mut t = 0;
        for (a, b) in [("x", "y"), ("y", "v"), ("v", "x")] {
            for r in 0..4 {
                let key = format!("bb{a}{b}{r}");
                events.push(ev(&key, t, a, 2.0, "c", "b"));
                events.push(ev(&key, t + 1, b, 2.0, "c", "b"));
                t += 10;
            }
        }
        for (s, other) in [("w1", "x"), ("w2", "y")] {
            events.push(ev(s, t, "w", 2.0, "c", "b"));
            events.push(ev(s, t + 1, other, 2.0, "c", "b"));
            t += 10;
        }
        events.push(ev("wz", t, "w", 2.0, "c", "b"));
        events.push(ev("wz", t + 1, "z", 2.0, "c", "b"));
        let set = build_sessions(&events, 19);
        let filtered = apply_core_filter(&set, 3, 2, LevelMode::Logistic).unwrap();
        assert!(filtered.catalog.index_of("z").is_none());
        assert!(filtered.catalog.index_of("w").is_none(), "w must cascade out");
        for name in ["x", "y", "v"] {
            assert!(filtered.catalog.index_of(name).is_some());
        }
    }

    #[test]
    fn core_filter_can_eliminate_corpus() {
        let set = uniform_corpus(2, 4);
        assert!(matches!(
            apply_core_filter(&set, 10, 2, LevelMode::Logistic),
            Err(DataError::CorpusEliminated)
        ));
    }

    #[test]
    fn core_filter_at_ten_core_defaults() {
        let set = uniform_corpus(15, 11);
        let filtered = apply_core_filter(&set, 10, 2, LevelMode::Logistic).unwrap();
        assert_eq!(filtered.catalog.n_items(), 15);
        assert_eq!(filtered.sessions.len(), set.sessions.len());
    }

    fn tiny_sessions(n: usize) -> SessionSet {
        let mut events = Vec::new();
        for s in 0..n {
            let key = format!("s{s}");
            events.push(ev(&key, (s * 10) as i64, "i1", 1.0, "c", "b"));
            events.push(ev(&key, (s * 10 + 1) as i64, "i2", 2.0, "c", "b"));
        }
        build_sessions(&events, 19)
    }

    #[test]
    fn split_counts_use_floor_with_remainder_to_test() {
        let set = tiny_sessions(10);
        let (tr, va, te) = chronological_split(&set, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!((tr.sessions.len(), va.sessions.len(), te.sessions.len()), (7, 2, 1));

        let set = tiny_sessions(103);
        let (tr, va, te) = chronological_split(&set, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!((tr.sessions.len(), va.sessions.len(), te.sessions.len()), (72, 20, 11));
    }

    #[test]
    fn split_is_chronological_and_stable_on_ties() {
        let mut events = Vec::new();
        // Sessions all ending at the same time: stable input order applies.
        for s in 0..5 {
            let key = format!("s{s}");
            events.push(ev(&key, 0, "i1", 1.0, "c", "b"));
            events.push(ev(&key, 100, "i2", 2.0, "c", "b"));
        }
        let set = build_sessions(&events, 19);
        let (tr, va, te) = chronological_split(&set, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!(tr.sessions.len(), 3);
        assert_eq!(va.sessions.len(), 1);
        assert_eq!(te.sessions.len(), 1);
        // Stable: train gets the first three sessions in input order.
        assert_eq!(tr.sessions[0], set.sessions[0]);
        assert_eq!(tr.sessions[2], set.sessions[2]);
        assert_eq!(te.sessions[0], set.sessions[4]);
    }

    #[test]
    fn split_rejects_tiny_corpora() {
        let set = tiny_sessions(2);
        assert_eq!(
            chronological_split(&set, (0.7, 0.2, 0.1)).unwrap_err(),
            DataError::TooFewSessions { n: 2 }
        );
    }

    #[test]
    fn splits_partition_the_corpus() {
        let set = tiny_sessions(29);
        let (tr, va, te) = chronological_split(&set, (0.7, 0.2, 0.1)).unwrap();
        assert_eq!(tr.sessions.len() + va.sessions.len() + te.sessions.len(), 29);
        assert!(tr.sessions.iter().all(|s| s.seq.len() >= 2));
    }
}
