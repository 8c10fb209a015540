//! On-disk artifact formats: the preprocessed session store, checkpoints,
//! and the tabular reports. Every format carries a version marker and loads
//! refuse anything they do not recognize. Text tables are tab-separated;
//! floats print in Rust's shortest round-trip form so identical runs write
//! identical bytes.
//!
//! Session store (`sessions.tsv`, tab-separated, header `sessrec-sessions v1`):
//! a `levels` line (logistic|uniform), `rho`, then three blocks introduced by
//! `categories/brands/items <count>` — categories carry the fitted logistic
//! (mu, delta, n, converged, min, max, degenerate), items carry raw id,
//! price, category, brand and level — followed by three
//! `sessions <tag> <count>` blocks with one `item,..<TAB>time,..` line per
//! session.
//!
//! Checkpoint (`model.ckpt`, little-endian binary): magic `SRCKPT01`, a
//! length-prefixed `key=value` config block (dimensions, variant flags,
//! seed), the optimizer step count, then each named array as name, rows,
//! cols and three f32 payloads (weights, first and second Adam moments).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sessrec_core::dataset::{Event, ItemCatalog, Session, SessionSet, SplitTag};
use sessrec_core::eval::MetricsRow;
use sessrec_core::model::{Model, ModelConfig, VariantFlags};
use sessrec_core::price::{CategoryLevels, LevelScheme, LogisticFit};
use sessrec_core::train::EpochStats;
use sessrec_core::ParameterStore;

const SESSIONS_HEADER: &str = "sessrec-sessions\tv1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"SRCKPT01";

/// The three splits plus their shared catalog, as produced by `preprocess`.
#[derive(Debug, Clone)]
pub struct SplitStore {
    pub train: SessionSet,
    pub valid: SessionSet,
    pub test: SessionSet,
    pub level_mode: &'static str,
}

impl SplitStore {
    pub fn catalog(&self) -> &ItemCatalog {
        &self.train.catalog
    }
}

pub fn write_events_csv(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::from("session,timestamp,item,price,category,brand\n");
    for e in events {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.session_key, e.timestamp, e.item, e.price, e.category, e.brand
        )?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn no_tabs(s: &str, what: &str) -> Result<()> {
    if s.contains('\t') || s.contains('\n') {
        bail!("{what} '{s}' contains a tab or newline; cannot serialize");
    }
    Ok(())
}

pub fn write_sessions(path: &Path, store: &SplitStore) -> Result<()> {
    let catalog = store.catalog();
    let mut out = String::new();
    writeln!(out, "{SESSIONS_HEADER}")?;
    writeln!(out, "levels\t{}", store.level_mode)?;
    writeln!(out, "rho\t{}", catalog.rho)?;

    writeln!(out, "categories\t{}", catalog.n_categories())?;
    for (i, name) in catalog.category_names.iter().enumerate() {
        no_tabs(name, "category")?;
        match &catalog.scheme {
            Some(scheme) => {
                let c: &CategoryLevels = &scheme.categories[i];
                writeln!(
                    out,
                    "{i}\t{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    c.fit.mu,
                    c.fit.delta,
                    c.fit.n_samples,
                    c.fit.converged as u8,
                    c.min_price,
                    c.max_price,
                    c.degenerate as u8
                )?;
            }
            None => writeln!(out, "{i}\t{name}\t0\t1\t0\t0\t0\t0\t0")?,
        }
    }

    writeln!(out, "brands\t{}", catalog.n_brands())?;
    for (i, name) in catalog.brand_names.iter().enumerate() {
        no_tabs(name, "brand")?;
        writeln!(out, "{i}\t{name}")?;
    }

    writeln!(out, "items\t{}", catalog.n_items())?;
    for i in 0..catalog.n_items() {
        no_tabs(&catalog.item_ids[i], "item id")?;
        writeln!(
            out,
            "{i}\t{}\t{}\t{}\t{}\t{}",
            catalog.item_ids[i],
            catalog.price[i],
            catalog.category[i],
            catalog.brand[i],
            catalog.level[i]
        )?;
    }

    for (tag, set) in
        [("train", &store.train), ("valid", &store.valid), ("test", &store.test)]
    {
        writeln!(out, "sessions\t{tag}\t{}", set.sessions.len())?;
        for s in &set.sessions {
            let items: Vec<String> = s.seq.iter().map(|i| i.to_string()).collect();
            let times: Vec<String> = s.times.iter().map(|t| t.to_string()).collect();
            writeln!(out, "{}\t{}", items.join(","), times.join(","))?;
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_sessions(path: &Path) -> Result<SplitStore> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read session store {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let mut next = || lines.next().map(|(n, l)| (n + 1, l)).context("unexpected end of file");

    let (_, header) = next()?;
    if header != SESSIONS_HEADER {
        bail!("unrecognized session store header '{header}' (expected '{SESSIONS_HEADER}')");
    }
    let parse_kv = |line: (usize, &str), key: &str| -> Result<String> {
        let (n, l) = line;
        let (k, v) = l.split_once('\t').with_context(|| format!("line {n}: expected {key}"))?;
        if k != key {
            bail!("line {n}: expected '{key}', found '{k}'");
        }
        Ok(v.to_string())
    };

    let level_mode_owned = parse_kv(next()?, "levels")?;
    let level_mode: &'static str = match level_mode_owned.as_str() {
        "logistic" => "logistic",
        "uniform" => "uniform",
        other => bail!("unknown level mode '{other}'"),
    };
    let rho: usize = parse_kv(next()?, "rho")?.parse()?;

    let n_cats: usize = parse_kv(next()?, "categories")?.parse()?;
    let mut category_names = Vec::with_capacity(n_cats);
    let mut scheme_cats = Vec::with_capacity(n_cats);
    for _ in 0..n_cats {
        let (n, l) = next()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 9 {
            bail!("line {n}: malformed category row");
        }
        category_names.push(f[1].to_string());
        scheme_cats.push(CategoryLevels {
            fit: LogisticFit {
                mu: f[2].parse()?,
                delta: f[3].parse()?,
                n_samples: f[4].parse()?,
                converged: f[5] == "1",
            },
            min_price: f[6].parse()?,
            max_price: f[7].parse()?,
            degenerate: f[8] == "1",
        });
    }

    let n_brands: usize = parse_kv(next()?, "brands")?.parse()?;
    let mut brand_names = Vec::with_capacity(n_brands);
    for _ in 0..n_brands {
        let (n, l) = next()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 2 {
            bail!("line {n}: malformed brand row");
        }
        brand_names.push(f[1].to_string());
    }

    let n_items: usize = parse_kv(next()?, "items")?.parse()?;
    let mut catalog = ItemCatalog {
        item_ids: Vec::with_capacity(n_items),
        price: Vec::with_capacity(n_items),
        category: Vec::with_capacity(n_items),
        brand: Vec::with_capacity(n_items),
        level: Vec::with_capacity(n_items),
        category_names,
        brand_names,
        rho,
        scheme: Some(LevelScheme { rho, categories: scheme_cats }),
    };
    for _ in 0..n_items {
        let (n, l) = next()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 6 {
            bail!("line {n}: malformed item row");
        }
        catalog.item_ids.push(f[1].to_string());
        catalog.price.push(f[2].parse()?);
        catalog.category.push(f[3].parse()?);
        catalog.brand.push(f[4].parse()?);
        catalog.level.push(f[5].parse()?);
    }

    let mut splits: BTreeMap<String, Vec<Session>> = BTreeMap::new();
    for tag in ["train", "valid", "test"] {
        let (n, l) = next()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 3 || f[0] != "sessions" || f[1] != tag {
            bail!("line {n}: expected 'sessions\t{tag}\t<count>'");
        }
        let count: usize = f[2].parse()?;
        let mut sessions = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, l) = next()?;
            let (items, times) =
                l.split_once('\t').with_context(|| format!("line {n}: malformed session"))?;
            let seq: Vec<u32> =
                items.split(',').map(|p| p.parse()).collect::<Result<_, _>>()?;
            let times: Vec<i64> =
                times.split(',').map(|p| p.parse()).collect::<Result<_, _>>()?;
            if seq.len() != times.len() || seq.len() < 2 {
                bail!("line {n}: session items/times mismatch");
            }
            if let Some(&bad) = seq.iter().find(|&&i| i as usize >= n_items) {
                bail!("line {n}: item index {bad} out of range");
            }
            sessions.push(Session { seq, times });
        }
        splits.insert(tag.to_string(), sessions);
    }
    if lines.next().is_some() {
        bail!("trailing data after the last split");
    }

    let mut take = |tag: &str, split: SplitTag| SessionSet {
        sessions: splits.remove(tag).unwrap(),
        catalog: catalog.clone(),
        split_tag: split,
    };
    Ok(SplitStore {
        train: take("train", SplitTag::Train),
        valid: take("valid", SplitTag::Valid),
        test: take("test", SplitTag::Test),
        level_mode,
    })
}

/// Everything a checkpoint needs to rebuild the model: dimensions, variant
/// flags, and the training seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub n_items: usize,
    pub rho: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub best_epoch: usize,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParameterStore<f32>,
) -> Result<()> {
    let v = &meta.model.variant;
    let config = format!(
        "d={}\nheads={}\nrounds={}\nneighbor_cap={}\nseed={}\n\
         n_items={}\nrho={}\nn_categories={}\nn_brands={}\nbest_epoch={}\n\
         use_price={}\nuse_category={}\nuse_brand={}\nprice_conv_only={}\n\
         uniform_levels={}\ngcn_aggregation={}\nno_cooccurrence={}\nno_fusion={}\nsingle_loss={}\n",
        meta.model.d,
        meta.model.heads,
        meta.model.rounds,
        meta.model.neighbor_cap,
        meta.model.seed,
        meta.n_items,
        meta.rho,
        meta.n_categories,
        meta.n_brands,
        meta.best_epoch,
        v.use_price,
        v.use_category,
        v.use_brand,
        v.price_conv_only,
        v.uniform_levels,
        v.gcn_aggregation,
        v.no_cooccurrence,
        v.no_fusion,
        v.single_loss,
    );

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());
    push_u64(&mut buf, store.optimizer_step_count());
    let arrays = store.export();
    push_u32(&mut buf, arrays.len() as u32);
    for (name, rows, cols, data, m, vv) in arrays {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, rows as u32);
        push_u32(&mut buf, cols as u32);
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in m {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in vv {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn parse_config(text: &str) -> Result<CheckpointMeta> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        map.get(k).cloned().with_context(|| format!("checkpoint config missing '{k}'"))
    };
    let flag = |k: &str| -> Result<bool> { Ok(get(k)? == "true") };
    Ok(CheckpointMeta {
        model: ModelConfig {
            d: get("d")?.parse()?,
            heads: get("heads")?.parse()?,
            rounds: get("rounds")?.parse()?,
            neighbor_cap: get("neighbor_cap")?.parse()?,
            seed: get("seed")?.parse()?,
            variant: VariantFlags {
                use_price: flag("use_price")?,
                use_category: flag("use_category")?,
                use_brand: flag("use_brand")?,
                price_conv_only: flag("price_conv_only")?,
                uniform_levels: flag("uniform_levels")?,
                gcn_aggregation: flag("gcn_aggregation")?,
                no_cooccurrence: flag("no_cooccurrence")?,
                no_fusion: flag("no_fusion")?,
                single_loss: flag("single_loss")?,
            },
        },
        n_items: get("n_items")?.parse()?,
        rho: get("rho")?.parse()?,
        n_categories: get("n_categories")?.parse()?,
        n_brands: get("n_brands")?.parse()?,
        best_epoch: get("best_epoch")?.parse()?,
    })
}

/// Load a checkpoint and rebuild the model against the given catalog. The
/// catalog must match the dimensions the checkpoint was trained with.
pub fn load_checkpoint(
    path: &Path,
    catalog: &ItemCatalog,
) -> Result<(Model, ParameterStore<f32>, CheckpointMeta)> {
    let buf =
        fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        bail!("not a checkpoint (bad magic)");
    }
    let config_len = cur.u32()? as usize;
    let config = std::str::from_utf8(cur.take(config_len)?).context("config not UTF-8")?;
    let meta = parse_config(config)?;

    if meta.n_items != catalog.n_items()
        || meta.rho != catalog.rho
        || meta.n_categories != catalog.n_categories()
        || meta.n_brands != catalog.n_brands()
    {
        bail!(
            "checkpoint was trained on a different catalog \
             (items {} vs {}, rho {} vs {}, categories {} vs {}, brands {} vs {})",
            meta.n_items,
            catalog.n_items(),
            meta.rho,
            catalog.rho,
            meta.n_categories,
            catalog.n_categories(),
            meta.n_brands,
            catalog.n_brands()
        );
    }

    let (model, mut store) = Model::init::<f32>(meta.model.clone(), catalog)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let step = cur.u64()?;
    let n_arrays = cur.u32()? as usize;
    for _ in 0..n_arrays {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)?.to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let data = cur.f32s(rows * cols)?;
        let m = cur.f32s(rows * cols)?;
        let v = cur.f32s(rows * cols)?;
        store.import(&name, rows, cols, data, m, v).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    if cur.pos != buf.len() {
        bail!("trailing bytes after checkpoint payload");
    }
    store.set_optimizer_step_count(step);
    Ok((model, store, meta))
}

pub fn write_history(path: &Path, history: &[EpochStats], eval_k: usize) -> Result<()> {
    let mut out = format!("epoch\ttrain_loss\tvalid_prec@{eval_k}\tvalid_mrr@{eval_k}\n");
    for h in history {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            h.epoch, h.train_loss, h.valid_prec, h.valid_mrr
        )?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_metrics(
    path: &Path,
    rows: &[(String, String, Vec<MetricsRow>)], // (model, variant, metrics)
) -> Result<()> {
    let mut out = String::from("model\tvariant\tk\tprec\tmrr\n");
    for (model, variant, metrics) in rows {
        for m in metrics {
            writeln!(out, "{model}\t{variant}\t{}\t{:.6}\t{:.6}", m.k, m.prec, m.mrr)?;
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_breakdown<K: std::fmt::Display>(
    path: &Path,
    key_name: &str,
    groups: &[(K, usize, Vec<MetricsRow>)],
) -> Result<()> {
    let mut out = format!("{key_name}\tsessions\tk\tprec\tmrr\n");
    for (key, count, metrics) in groups {
        for m in metrics {
            writeln!(out, "{key}\t{count}\t{}\t{:.6}\t{:.6}", m.k, m.prec, m.mrr)?;
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
