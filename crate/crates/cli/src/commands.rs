//! Subcommand implementations. Logs go to stderr; machine-readable outputs
//! are files under the workdir (the `recommend`, `gradcheck` and
//! `graph stats` reports print to stdout).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sessrec_core::convolution::SampledNeighbors;
use sessrec_core::dataset::{
    apply_core_filter, build_sessions, chronological_split, corpus_stats, parse_events,
    ItemCatalog, LevelMode, Session,
};
use sessrec_core::eval::{
    breakdown_by_length, breakdown_by_level, evaluate_baseline, global_popularity, metrics_table,
    random_rank, s_pop_rank, MetricsRow, ModelEvaluation, SknnIndex,
};
use sessrec_core::hypergraph::{EdgeType, HeteroHypergraph, NodeRef, NODE_TYPES};
use sessrec_core::model::{gradient_check, level_map, Model};
use sessrec_core::price::describe_category;
use sessrec_core::synth::generate_synthetic;
use sessrec_core::train::{
    catalog_with_uniform_levels, run_ablation, standard_variants, train, variant_by_name,
};
use sessrec_core::ParameterStore;

use crate::artifacts::{
    load_checkpoint, load_sessions, save_checkpoint, write_breakdown, write_events_csv,
    write_history, write_metrics, write_sessions, CheckpointMeta, SplitStore,
};
use crate::config::RunConfig;

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let (events, truth) = generate_synthetic(&cfg.synth).map_err(|e| anyhow::anyhow!("{e}"))?;
    fs::create_dir_all(&cfg.workdir)?;
    write_events_csv(&cfg.events, &events)?;

    let mut arch = String::from("archetype\tband\tcategories\n");
    for (i, a) in truth.archetypes.iter().enumerate() {
        let cats: Vec<String> = a.categories.iter().map(|c| format!("c{c}")).collect();
        arch.push_str(&format!("{i}\t{:?}\t{}\n", a.band, cats.join(",")));
    }
    fs::write(cfg.workdir.join("truth_archetypes.tsv"), arch)?;
    let mut sess = String::from("session\tarchetype\n");
    for (i, a) in truth.session_archetype.iter().enumerate() {
        sess.push_str(&format!("s{i:06}\t{a}\n"));
    }
    fs::write(cfg.workdir.join("truth_sessions.tsv"), sess)?;

    eprintln!(
        "synth: {} events over {} sessions -> {}",
        events.len(),
        truth.session_archetype.len(),
        cfg.events.display()
    );
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let raw = fs::read_to_string(&cfg.events)
        .with_context(|| format!("cannot read events {}", cfg.events.display()))?;
    let events = parse_events(&raw, &cfg.schema()).map_err(|e| anyhow::anyhow!("{e}"))?;
    eprintln!("preprocess: parsed {} events", events.len());

    let level_mode = if cfg.variant()?.uniform_levels {
        LevelMode::Uniform
    } else {
        LevelMode::Logistic
    };
    let built = build_sessions(&events, cfg.max_len);
    eprintln!("preprocess: {} sessions before filtering", built.sessions.len());
    let filtered = apply_core_filter(&built, cfg.min_count, cfg.rho, level_mode)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let (train_set, valid_set, test_set) =
        chronological_split(&filtered, cfg.split).map_err(|e| anyhow::anyhow!("{e}"))?;

    fs::create_dir_all(&cfg.workdir)?;
    let store = SplitStore {
        train: train_set,
        valid: valid_set,
        test: test_set,
        level_mode: match level_mode {
            LevelMode::Logistic => "logistic",
            LevelMode::Uniform => "uniform",
        },
    };
    write_sessions(&cfg.sessions_path(), &store)?;
    write_levels_table(&cfg.workdir.join("levels.tsv"), store.catalog())?;

    let stats = corpus_stats(&filtered);
    let report = format!(
        "metric\tvalue\nitems\t{}\nprice_levels\t{}\ncategories\t{}\nbrands\t{}\n\
         interactions\t{}\nsessions\t{}\navg_length\t{:.6}\n\
         train_sessions\t{}\nvalid_sessions\t{}\ntest_sessions\t{}\n",
        stats.n_items,
        stats.n_price_levels,
        stats.n_categories,
        stats.n_brands,
        stats.n_interactions,
        stats.n_sessions,
        stats.avg_length,
        store.train.sessions.len(),
        store.valid.sessions.len(),
        store.test.sessions.len(),
    );
    fs::write(cfg.workdir.join("stats.tsv"), report)?;
    eprintln!(
        "preprocess: kept {} items, {} sessions ({}/{}/{}) -> {}",
        stats.n_items,
        stats.n_sessions,
        store.train.sessions.len(),
        store.valid.sessions.len(),
        store.test.sessions.len(),
        cfg.sessions_path().display()
    );
    Ok(())
}

fn write_levels_table(path: &Path, catalog: &ItemCatalog) -> Result<()> {
    let mut out = String::from("category\tmu\tdelta\tmin\tmax\tcuts\n");
    if let Some(scheme) = &catalog.scheme {
        for (i, name) in catalog.category_names.iter().enumerate() {
            out.push_str(&describe_category(scheme, i, name).replace(',', "\t"));
            out.push('\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_levels_export(cfg: &RunConfig) -> Result<()> {
    let store = load_sessions(&cfg.sessions_path())?;
    let path = cfg.workdir.join("levels.tsv");
    write_levels_table(&path, store.catalog())?;
    eprintln!("levels: wrote {}", path.display());
    Ok(())
}

/// The splits with the checkpoint's level convention applied.
fn apply_level_mode(store: &mut SplitStore, uniform: bool) {
    if uniform {
        let catalog = catalog_with_uniform_levels(store.catalog());
        store.train.catalog = catalog.clone();
        store.valid.catalog = catalog.clone();
        store.test.catalog = catalog;
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut store = load_sessions(&cfg.sessions_path())?;
    let train_cfg = cfg.train_config()?;
    apply_level_mode(&mut store, train_cfg.model.variant.uniform_levels);

    eprintln!(
        "train: {} train / {} valid sessions, variant {}, d={} h={} r={}",
        store.train.sessions.len(),
        store.valid.sessions.len(),
        cfg.variant_name,
        cfg.d,
        cfg.heads,
        cfg.rounds
    );
    let outcome =
        train::<f32>(&train_cfg, &store.train, &store.valid).map_err(|e| anyhow::anyhow!("{e}"))?;

    let catalog = store.catalog();
    let meta = CheckpointMeta {
        model: train_cfg.model.clone(),
        n_items: catalog.n_items(),
        rho: catalog.rho,
        n_categories: catalog.n_categories(),
        n_brands: catalog.n_brands(),
        best_epoch: outcome.best_epoch,
    };
    fs::create_dir_all(&cfg.workdir)?;
    save_checkpoint(&cfg.checkpoint_path(), &meta, &outcome.best)?;
    write_history(&cfg.workdir.join("history.tsv"), &outcome.history, train_cfg.eval_k)?;
    let last = outcome.history.last().unwrap();
    eprintln!(
        "train: best epoch {} (valid prec@{} {:.4}); final loss {:.4} -> {}",
        outcome.best_epoch,
        train_cfg.eval_k,
        outcome.history[outcome.best_epoch - 1].valid_prec,
        last.train_loss,
        cfg.checkpoint_path().display()
    );
    Ok(())
}

/// Session scoring split across worker threads (chunks keep input order, so
/// any worker count gives identical output).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_parallel(
    model: &Model,
    params: &ParameterStore<f32>,
    graph: &HeteroHypergraph,
    caps: &SampledNeighbors,
    sessions: &[Session],
    catalog: &ItemCatalog,
    k_max: usize,
    workers: usize,
) -> Result<ModelEvaluation> {
    let workers = workers.max(1).min(sessions.len().max(1));
    if workers == 1 {
        return sessrec_core::eval::evaluate_model(
            model, params, graph, caps, sessions, catalog, k_max,
        )
        .map_err(|e| anyhow::anyhow!("{e}"));
    }
    let chunk_size = sessions.len().div_ceil(workers);
    let chunks: Vec<&[Session]> = sessions.chunks(chunk_size).collect();
    let evals: Vec<Result<ModelEvaluation>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    sessrec_core::eval::evaluate_model(
                        model, params, graph, caps, chunk, catalog, k_max,
                    )
                    .map_err(|e| anyhow::anyhow!("{e}"))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut results = Vec::with_capacity(sessions.len());
    let mut loss_sum = 0.0;
    let mut clamped = 0;
    for (chunk_eval, chunk_len) in evals.into_iter().zip(sessions.chunks(chunk_size)) {
        let e = chunk_eval?;
        loss_sum += e.mean_loss * chunk_len.len() as f64;
        clamped += e.clamped;
        results.extend(e.results);
    }
    Ok(ModelEvaluation {
        results,
        mean_loss: loss_sum / sessions.len().max(1) as f64,
        clamped,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let mut store = load_sessions(&cfg.sessions_path())?;
    let ckpt_path = cfg.checkpoint_path();
    if !ckpt_path.exists() {
        bail!("checkpoint not found: {}", ckpt_path.display());
    }
    let (model, params, meta) = load_checkpoint(&ckpt_path, store.catalog())?;
    // Uniform re-leveling changes level values only, never dimensions, so
    // the loaded parameters stay valid.
    apply_level_mode(&mut store, meta.model.variant.uniform_levels);
    let catalog = store.catalog();
    let k_max = cfg.ks.iter().copied().max().unwrap_or(20);

    let graph = HeteroHypergraph::build_masked(&store.train, meta.model.variant.feature_mask())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let caps = SampledNeighbors::build(&graph, meta.model.neighbor_cap, meta.model.seed);
    let eval = evaluate_parallel(
        &model,
        &params,
        &graph,
        &caps,
        &store.test.sessions,
        catalog,
        k_max,
        cfg.workers,
    )?;
    eprintln!(
        "evaluate: {} test sessions, mean two-task loss {:.4} ({} clamped)",
        store.test.sessions.len(),
        eval.mean_loss,
        eval.clamped
    );

    let mut rows: Vec<(String, String, Vec<MetricsRow>)> = vec![(
        "model".into(),
        variant_label(&meta),
        metrics_table(&eval.results, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
    )];
    if cfg.baselines {
        let pop = global_popularity(&store.train.sessions, catalog.n_items());
        let spop =
            evaluate_baseline(&store.test.sessions, catalog, k_max, |p| s_pop_rank(p, &pop));
        rows.push((
            "s-pop".into(),
            "-".into(),
            metrics_table(&spop, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
        ));
        let index = SknnIndex::build(&store.train.sessions, catalog.n_items(), cfg.sknn_neighbors);
        let sknn = evaluate_baseline(&store.test.sessions, catalog, k_max, |p| index.rank(p));
        rows.push((
            "sknn".into(),
            "-".into(),
            metrics_table(&sknn, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
        ));
        let mut rng = sessrec_core::Rng::new(cfg.seed);
        let random =
            evaluate_baseline(&store.test.sessions, catalog, k_max, |_| {
                random_rank(catalog.n_items(), &mut rng)
            });
        rows.push((
            "random".into(),
            "-".into(),
            metrics_table(&random, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
        ));
    }
    fs::create_dir_all(&cfg.workdir)?;
    write_metrics(&cfg.workdir.join("results.tsv"), &rows)?;
    write_breakdown(
        &cfg.workdir.join("by_level.tsv"),
        "target_level",
        &breakdown_by_level(&eval.results, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;
    write_breakdown(
        &cfg.workdir.join("by_length.tsv"),
        "prefix_length",
        &breakdown_by_length(&eval.results, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;
    for (name, variant, metrics) in &rows {
        for m in metrics {
            eprintln!(
                "evaluate: {name}[{variant}] prec@{} {:.4} mrr@{} {:.4}",
                m.k, m.prec, m.k, m.mrr
            );
        }
    }
    Ok(())
}

fn variant_label(meta: &CheckpointMeta) -> String {
    for (name, flags) in standard_variants() {
        if flags == meta.model.variant {
            return name;
        }
    }
    "custom".into()
}

pub fn cmd_recommend(cfg: &RunConfig, items: &str, top: usize) -> Result<()> {
    let mut store = load_sessions(&cfg.sessions_path())?;
    let ckpt_path = cfg.checkpoint_path();
    if !ckpt_path.exists() {
        bail!("checkpoint not found: {}", ckpt_path.display());
    }
    let (model, params, meta) = load_checkpoint(&ckpt_path, store.catalog())?;
    apply_level_mode(&mut store, meta.model.variant.uniform_levels);
    let catalog = store.catalog();

    let mut prefix = Vec::new();
    for raw in items.split(',') {
        let raw = raw.trim();
        let idx = catalog
            .index_of(raw)
            .with_context(|| format!("item '{raw}' is not in the catalog"))?;
        prefix.push(idx as u32);
    }
    if prefix.is_empty() {
        bail!("no items given");
    }
    if prefix.len() > cfg.max_len {
        prefix = prefix[prefix.len() - cfg.max_len..].to_vec();
    }

    let graph = HeteroHypergraph::build_masked(&store.train, meta.model.variant.feature_mask())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let caps = SampledNeighbors::build(&graph, meta.model.neighbor_cap, meta.model.seed);
    let lmap = level_map(catalog);
    let mut tape = sessrec_core::autodiff::Tape::new();
    let tables = model.convolve(&mut tape, &params, &graph, &caps);
    let scores = model
        .score_session(&mut tape, &params, &tables, &prefix, catalog, &lmap)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let order = sessrec_core::preference::rank_descending(&scores.combined);
    let mut out = String::from("rank\titem\tprobability\tprice_level\tcategory\n");
    for (r, &i) in order.iter().take(top).enumerate() {
        let i = i as usize;
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}",
            r + 1,
            catalog.item_ids[i],
            scores.combined[i],
            catalog.level[i],
            catalog.category_names[catalog.category[i] as usize]
        )?;
    }
    if let Some(price) = &scores.price {
        let dist: Vec<String> =
            price.iter().enumerate().map(|(l, p)| format!("{}:{:.4}", l + 1, p)).collect();
        writeln!(out, "price_level_distribution\t{}", dist.join("\t"))?;
    }
    print_stdout(&out);
    Ok(())
}

/// Train and evaluate the chosen variants; `seeds > 1` repeats every variant
/// with consecutive seeds and reports the averaged metrics.
pub fn cmd_ablate(cfg: &RunConfig, variants: Option<&str>, seeds: usize) -> Result<()> {
    let store = load_sessions(&cfg.sessions_path())?;
    let chosen: Vec<(String, sessrec_core::model::VariantFlags)> = match variants {
        None => standard_variants(),
        Some(list) => list
            .split(',')
            .map(|name| {
                let name = name.trim();
                variant_by_name(name)
                    .map(|v| (name.to_string(), v))
                    .with_context(|| format!("unknown variant '{name}'"))
            })
            .collect::<Result<_>>()?,
    };
    let seeds = seeds.max(1);
    eprintln!(
        "ablate: {} variants x {seeds} seed(s) on {} train sessions",
        chosen.len(),
        store.train.sessions.len()
    );

    let mut accum: Vec<(String, usize, Vec<MetricsRow>)> = Vec::new();
    for round in 0..seeds {
        let mut base = cfg.train_config()?;
        base.model.seed = cfg.seed + round as u64;
        let rows =
            run_ablation::<f32>(&base, &chosen, &store.train, &store.valid, &store.test, &cfg.ks)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
        if round == 0 {
            accum = rows.into_iter().map(|r| (r.name, r.best_epoch, r.metrics)).collect();
        } else {
            for (acc, row) in accum.iter_mut().zip(rows) {
                acc.1 += row.best_epoch;
                for (m, new) in acc.2.iter_mut().zip(row.metrics) {
                    m.prec += new.prec;
                    m.mrr += new.mrr;
                }
            }
        }
    }
    for (_, best_epoch, metrics) in &mut accum {
        *best_epoch = (*best_epoch as f64 / seeds as f64).round() as usize;
        for m in metrics {
            m.prec /= seeds as f64;
            m.mrr /= seeds as f64;
        }
    }

    fs::create_dir_all(&cfg.workdir)?;
    let mut out = String::from("variant\tbest_epoch\tk\tprec\tmrr\n");
    for (name, best_epoch, metrics) in &accum {
        for m in metrics {
            writeln!(out, "{name}\t{best_epoch}\t{}\t{:.6}\t{:.6}", m.k, m.prec, m.mrr)?;
        }
        let at_max = metrics.last().unwrap();
        eprintln!("ablate: {name} prec@{} {:.4}", at_max.k, at_max.prec);
    }
    fs::write(cfg.workdir.join("ablation.tsv"), out)?;
    Ok(())
}

/// Exit code 0 when every parameter's analytic gradient matches central
/// finite differences within rel 1e-4 at f64, 2 otherwise.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let report = gradient_check(cfg.seed, 1e-5).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut out = String::from("parameter\tentries\tmax_rel_err\n");
    for e in &report.entries {
        writeln!(out, "{}\t{}\t{:.3e}", e.name, e.checked, e.max_rel_err)?;
    }
    writeln!(out, "overall\t-\t{:.3e}", report.max_rel_err)?;
    print_stdout(&out);
    if report.max_rel_err > 1e-4 {
        eprintln!("gradcheck: FAILED (max rel err {:.3e} > 1e-4)", report.max_rel_err);
        Ok(2)
    } else {
        eprintln!("gradcheck: ok (max rel err {:.3e})", report.max_rel_err);
        Ok(0)
    }
}

pub fn cmd_graph_stats(cfg: &RunConfig) -> Result<()> {
    let store = load_sessions(&cfg.sessions_path())?;
    let mask = cfg.variant()?.feature_mask();
    let graph =
        HeteroHypergraph::build_masked(&store.train, mask).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut out = String::from("node_type\tcount\n");
    for &t in &NODE_TYPES {
        writeln!(out, "{}\t{}", t.short_name(), graph.n_nodes[t as usize])?;
    }
    out.push_str("edge_type\tcount\n");
    for (name, ty) in
        [("feature", EdgeType::Feature), ("price", EdgeType::Price), ("session", EdgeType::Session)]
    {
        writeln!(out, "{name}\t{}", graph.edge_count(ty))?;
    }
    out.push_str("node_type\tdegree_bucket\tnodes\n");
    for &t in &NODE_TYPES {
        let mut hist: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
        for i in 0..graph.n_nodes[t as usize] as u32 {
            let mut degree = 0;
            for &tau in &NODE_TYPES {
                degree += graph.adjacent(NodeRef::new(t, i), tau).len();
            }
            *hist.entry(bucket(degree)).or_insert(0) += 1;
        }
        for (b, count) in hist {
            writeln!(out, "{}\t<={b}\t{count}", t.short_name())?;
        }
    }
    print_stdout(&out);
    Ok(())
}

/// Print a report, tolerating a closed pipe (e.g. `| head`).
fn print_stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn bucket(degree: usize) -> usize {
    let mut b = 1;
    while b < degree {
        b *= 2;
    }
    b
}

pub fn cmd_plot_data(cfg: &RunConfig) -> Result<()> {
    let mut store = load_sessions(&cfg.sessions_path())?;
    let ckpt_path = cfg.checkpoint_path();
    if !ckpt_path.exists() {
        bail!("checkpoint not found: {}", ckpt_path.display());
    }
    let (model, params, meta) = load_checkpoint(&ckpt_path, store.catalog())?;
    apply_level_mode(&mut store, meta.model.variant.uniform_levels);
    let catalog = store.catalog();
    let k_max = cfg.ks.iter().copied().max().unwrap_or(20);
    let graph = HeteroHypergraph::build_masked(&store.train, meta.model.variant.feature_mask())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let caps = SampledNeighbors::build(&graph, meta.model.neighbor_cap, meta.model.seed);
    let eval = evaluate_parallel(
        &model,
        &params,
        &graph,
        &caps,
        &store.test.sessions,
        catalog,
        k_max,
        cfg.workers,
    )?;

    fs::create_dir_all(&cfg.workdir)?;
    write_breakdown(
        &cfg.workdir.join("metrics_by_price_level.tsv"),
        "target_level",
        &breakdown_by_level(&eval.results, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;
    write_breakdown(
        &cfg.workdir.join("metrics_by_session_length.tsv"),
        "prefix_length",
        &breakdown_by_length(&eval.results, &cfg.ks).map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;

    // Variant comparison extracts, when an ablation table is present.
    let ablation = cfg.workdir.join("ablation.tsv");
    if ablation.exists() {
        let text = fs::read_to_string(&ablation)?;
        let filter = |names: &[&str]| -> String {
            let mut out = String::from("variant\tbest_epoch\tk\tprec\tmrr\n");
            for line in text.lines().skip(1) {
                if let Some(name) = line.split('\t').next() {
                    if names.contains(&name) {
                        out.push_str(line);
                        out.push('\n');
                    }
                }
            }
            out
        };
        fs::write(
            cfg.workdir.join("discretization_comparison.tsv"),
            filter(&["full", "uniform-levels"]),
        )?;
        fs::write(
            cfg.workdir.join("convolution_comparison.tsv"),
            filter(&["full", "gcn", "no-cooccurrence"]),
        )?;
        fs::write(
            cfg.workdir.join("learning_schema_comparison.tsv"),
            filter(&["full", "no-fusion", "single-loss"]),
        )?;
    }
    eprintln!("plot-data: wrote breakdown tables to {}", cfg.workdir.display());
    Ok(())
}
