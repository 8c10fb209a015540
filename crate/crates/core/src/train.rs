//! Mini-batch training with validation-based selection, plus the ablation
//! harness.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::Tape;
use crate::convolution::SampledNeighbors;
use crate::dataset::{ItemCatalog, SessionSet};
use crate::eval::{evaluate_model, metrics_table, EvalError, MetricsRow};
use crate::hypergraph::{GraphError, HeteroHypergraph};
use crate::model::{level_map, Model, ModelConfig, VariantFlags};
use crate::params::{AdamParams, ParameterStore};
use crate::preference::ModelError;
use crate::price::assign_level_uniform;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    Graph(GraphError),
    Eval(EvalError),
    EmptySet { which: &'static str },
    NonFiniteLoss { epoch: usize, batch: usize, tensor: String },
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Graph(e) => write!(f, "{e}"),
            TrainError::Eval(e) => write!(f, "{e}"),
            TrainError::EmptySet { which } => write!(f, "{which} is empty"),
            TrainError::NonFiniteLoss { epoch, batch, tensor } => {
                write!(f, "non-finite loss at epoch {epoch} batch {batch} ({tensor})")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Validation cutoff used for model selection (Prec@k).
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { model: ModelConfig::default(), batch_size: 100, lr: 1e-3, epochs: 30, eval_k: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_prec: f64,
    pub valid_mrr: f64,
}

pub struct TrainOutcome<F> {
    pub model: Model,
    /// Parameters of the epoch with the best validation Prec@k.
    pub best: ParameterStore<F>,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: ParameterStore<F>,
    pub history: Vec<EpochStats>,
}

/// Epochs of shuffled mini-batches over a fixed graph: one convolution pass
/// per batch, the two-task loss, one Adam step. After each epoch the model
/// is scored on the validation split; the best checkpoint wins.
pub fn train<F: Float>(
    cfg: &TrainConfig,
    train_set: &SessionSet,
    valid_set: &SessionSet,
) -> Result<TrainOutcome<F>, TrainError> {
    if train_set.sessions.is_empty() {
        return Err(TrainError::EmptySet { which: "train set" });
    }
    if valid_set.sessions.is_empty() {
        return Err(TrainError::EmptySet { which: "valid set" });
    }
    if cfg.epochs == 0 {
        return Err(TrainError::EmptySet { which: "epoch budget" });
    }
    let catalog = &train_set.catalog;
    let graph = HeteroHypergraph::build_masked(train_set, cfg.model.variant.feature_mask())?;
    let caps = SampledNeighbors::build(&graph, cfg.model.neighbor_cap, cfg.model.seed);
    let (model, mut store) = Model::init::<F>(cfg.model.clone(), catalog)?;
    let lmap = level_map(catalog);
    let adam = AdamParams { lr: cfg.lr, ..AdamParams::default() };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore<F>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.sessions.len()).collect();
        let mut rng = Rng::new(cfg.model.seed ^ epoch as u64);
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sessions: Vec<&crate::dataset::Session> =
                chunk.iter().map(|&i| &train_set.sessions[i]).collect();
            let mut tape = Tape::new();
            let tables = model.convolve(&mut tape, &store, &graph, &caps);
            let loss = model.batch_loss(&mut tape, &store, &tables, &sessions, catalog, &lmap)?;
            let value = tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                let tensor = tape
                    .first_nonfinite()
                    .map(|(i, op)| format!("node {i} ({op})"))
                    .unwrap_or_else(|| "loss".to_string());
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no, tensor });
            }
            loss_sum += value * sessions.len() as f64;
            store.zero_grads();
            tape.backward(loss, &mut store);
            store.adam_step(&adam);
        }
        let train_loss = loss_sum / train_set.sessions.len() as f64;

        let eval =
            evaluate_model(&model, &store, &graph, &caps, &valid_set.sessions, catalog, cfg.eval_k)?;
        let rows = metrics_table(&eval.results, &[cfg.eval_k])?;
        let stats = EpochStats {
            epoch,
            train_loss,
            valid_prec: rows[0].prec,
            valid_mrr: rows[0].mrr,
        };
        if best.as_ref().is_none_or(|(p, _, _)| stats.valid_prec > *p) {
            best = Some((stats.valid_prec, epoch, store.clone()));
        }
        history.push(stats);
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best: best_store, best_epoch, last: store, history })
}

/// Catalog with price levels re-derived by uniform quantization over each
/// category's observed [min, max] (same items, same sessions).
pub fn catalog_with_uniform_levels(catalog: &ItemCatalog) -> ItemCatalog {
    let n_cats = catalog.n_categories();
    let mut lo = alloc::vec![f64::INFINITY; n_cats];
    let mut hi = alloc::vec![f64::NEG_INFINITY; n_cats];
    for i in 0..catalog.n_items() {
        let c = catalog.category[i] as usize;
        lo[c] = lo[c].min(catalog.price[i]);
        hi[c] = hi[c].max(catalog.price[i]);
    }
    let mut out = catalog.clone();
    for i in 0..catalog.n_items() {
        let c = catalog.category[i] as usize;
        out.level[i] = assign_level_uniform(catalog.price[i], lo[c], hi[c], catalog.rho) as u32;
    }
    out
}

/// A named variant's test metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Train and evaluate each variant with identical seed and data. Variants
/// flagged `uniform_levels` re-derive catalog levels by uniform quantization
/// before training.
pub fn run_ablation<F: Float>(
    base: &TrainConfig,
    variants: &[(String, VariantFlags)],
    train_set: &SessionSet,
    valid_set: &SessionSet,
    test_set: &SessionSet,
    ks: &[usize],
) -> Result<Vec<AblationRow>, TrainError> {
    let k_max = ks.iter().copied().max().unwrap_or(20);
    let mut rows = Vec::with_capacity(variants.len());
    for (name, variant) in variants {
        let mut cfg = base.clone();
        cfg.model.variant = *variant;

        let (tr, va, te);
        let (train_ref, valid_ref, test_ref) = if variant.uniform_levels {
            let catalog = catalog_with_uniform_levels(&train_set.catalog);
            tr = SessionSet { catalog: catalog.clone(), ..train_set.clone() };
            va = SessionSet { catalog: catalog.clone(), ..valid_set.clone() };
            te = SessionSet { catalog, ..test_set.clone() };
            (&tr, &va, &te)
        } else {
            (train_set, valid_set, test_set)
        };

        let outcome = train::<F>(&cfg, train_ref, valid_ref)?;
        let graph =
            HeteroHypergraph::build_masked(train_ref, cfg.model.variant.feature_mask())?;
        let caps = SampledNeighbors::build(&graph, cfg.model.neighbor_cap, cfg.model.seed);
        let eval = evaluate_model(
            &outcome.model,
            &outcome.best,
            &graph,
            &caps,
            &test_ref.sessions,
            &test_ref.catalog,
            k_max,
        )?;
        rows.push(AblationRow {
            name: name.clone(),
            best_epoch: outcome.best_epoch,
            metrics: metrics_table(&eval.results, ks)?,
        });
    }
    Ok(rows)
}

/// The standard ablation set: the full model plus the feature-drop matrix,
/// quantization, aggregation and learning-schema variants.
pub fn standard_variants() -> Vec<(String, VariantFlags)> {
    let full = VariantFlags::full();
    alloc::vec![
        ("full".to_string(), full),
        ("no-price".to_string(), VariantFlags { use_price: false, ..full }),
        ("price-conv-only".to_string(), VariantFlags { price_conv_only: true, ..full }),
        ("uniform-levels".to_string(), VariantFlags { uniform_levels: true, ..full }),
        ("no-category".to_string(), VariantFlags { use_category: false, ..full }),
        ("no-brand".to_string(), VariantFlags { use_brand: false, ..full }),
        (
            "no-price-category".to_string(),
            VariantFlags { use_price: false, use_category: false, ..full },
        ),
        (
            "no-price-brand".to_string(),
            VariantFlags { use_price: false, use_brand: false, ..full },
        ),
        (
            "no-category-brand".to_string(),
            VariantFlags { use_category: false, use_brand: false, ..full },
        ),
        (
            "id-only".to_string(),
            VariantFlags {
                use_price: false,
                use_category: false,
                use_brand: false,
                ..full
            },
        ),
        ("gcn".to_string(), VariantFlags { gcn_aggregation: true, ..full }),
        ("no-cooccurrence".to_string(), VariantFlags { no_cooccurrence: true, ..full }),
        ("no-fusion".to_string(), VariantFlags { no_fusion: true, ..full }),
        ("single-loss".to_string(), VariantFlags { single_loss: true, ..full }),
    ]
}

/// Look a variant up by its CLI name.
pub fn variant_by_name(name: &str) -> Option<VariantFlags> {
    standard_variants().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Session, SplitTag};

    fn tiny_corpus(n_sessions: usize) -> (SessionSet, SessionSet) {
        // 6 items, 2 levels, alternating targets; enough to drive a few
        // training steps.
        let catalog = ItemCatalog {
            item_ids: (0..6).map(|i| format!("i{i}")).collect(),
            price: alloc::vec![1.0, 1.5, 2.0, 8.0, 8.5, 9.0],
            category: alloc::vec![0, 0, 0, 1, 1, 1],
            brand: alloc::vec![0, 1, 0, 1, 0, 1],
            level: alloc::vec![1, 1, 1, 2, 2, 2],
            category_names: alloc::vec!["c0".into(), "c1".into()],
            brand_names: alloc::vec!["b0".into(), "b1".into()],
            rho: 2,
            scheme: None,
        };
        let make = |base: usize, count: usize| -> Vec<Session> {
            (0..count)
                .map(|s| {
                    let a = ((s + base) % 3) as u32;
                    let b = a + 3;
                    let c = ((s + base + 1) % 3) as u32;
                    Session {
                        seq: alloc::vec![a, b, c],
                        times: alloc::vec![s as i64 * 10, s as i64 * 10 + 1, s as i64 * 10 + 2],
                    }
                })
                .collect()
        };
        let train = SessionSet {
            sessions: make(0, n_sessions),
            catalog: catalog.clone(),
            split_tag: SplitTag::Train,
        };
        let valid =
            SessionSet { sessions: make(1, 4), catalog, split_tag: SplitTag::Valid };
        (train, valid)
    }

    fn quick_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 8,
                heads: 2,
                rounds: 1,
                neighbor_cap: 50,
                seed,
                variant: VariantFlags::full(),
            },
            batch_size: 4,
            lr: 1e-2,
            epochs,
            eval_k: 3,
        }
    }

    #[test]
    fn history_is_seed_deterministic() {
        let (train_set, valid_set) = tiny_corpus(12);
        let a = train::<f32>(&quick_cfg(5, 3), &train_set, &valid_set).unwrap();
        let b = train::<f32>(&quick_cfg(5, 3), &train_set, &valid_set).unwrap();
        assert_eq!(a.history, b.history);
        for p in a.last.ids() {
            assert_eq!(a.last.data(p), b.last.data(p), "param {}", a.last.name(p));
        }
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_corpus() {
        let (train_set, valid_set) = tiny_corpus(16);
        let out = train::<f32>(&quick_cfg(2, 6), &train_set, &valid_set).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (train_set, valid_set) = tiny_corpus(4);
        let empty = SessionSet {
            sessions: alloc::vec![],
            catalog: train_set.catalog.clone(),
            split_tag: SplitTag::Valid,
        };
        assert!(matches!(
            train::<f32>(&quick_cfg(1, 1), &empty, &valid_set),
            Err(TrainError::EmptySet { which: "train set" })
        ));
        assert!(matches!(
            train::<f32>(&quick_cfg(1, 1), &train_set, &empty),
            Err(TrainError::EmptySet { which: "valid set" })
        ));
        assert!(matches!(
            train::<f32>(&quick_cfg(1, 0), &train_set, &valid_set),
            Err(TrainError::EmptySet { which: "epoch budget" })
        ));
    }

    #[test]
    fn uniform_level_catalog_keeps_shapes() {
        let (train_set, _) = tiny_corpus(4);
        let uni = catalog_with_uniform_levels(&train_set.catalog);
        assert_eq!(uni.n_items(), train_set.catalog.n_items());
        assert!(uni.level.iter().all(|&l| l >= 1 && l <= uni.rho as u32));
    }

    #[test]
    fn standard_variants_validate() {
        for (name, v) in standard_variants() {
            assert!(v.validate().is_ok(), "{name} invalid");
        }
        assert!(variant_by_name("no-price").is_some());
        assert!(variant_by_name("bogus").is_none());
    }
}
