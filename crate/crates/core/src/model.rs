//! Model assembly: parameters, variants, forward pass and gradient checks.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{central_difference, Tape, Var};
use crate::convolution::{run_convolution, ConvKind, ConvParamIds, NodeTables, SampledNeighbors};
use crate::dataset::{ItemCatalog, Session};
use crate::hypergraph::{FeatureMask, HeteroHypergraph, NodeType, NODE_TYPES};
use crate::params::{ParamId, ParameterStore};
use crate::preference::{
    combined_logits, fuse_preferences, interest_logits, interest_preference, position_enhance,
    price_logits, price_preference, FusionIds, HeadIds, InterestIds, ModelError,
};
use crate::rng::Rng;

pub use crate::preference::MAX_SESSION_LEN;

/// Ablation switchboard. The default is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    pub use_price: bool,
    pub use_category: bool,
    pub use_brand: bool,
    /// Keep price nodes in the convolution but mine no price preference and
    /// score by interest alone.
    pub price_conv_only: bool,
    /// Derive price levels by uniform quantization instead of the fitted
    /// logistic CDF (consumed during preprocessing).
    pub uniform_levels: bool,
    /// Replace the triple-level convolution with plain neighborhood
    /// averaging.
    pub gcn_aggregation: bool,
    /// Drop the co-occurrence term.
    pub no_cooccurrence: bool,
    /// Skip the remember-gate fusion; raw preferences feed the heads.
    pub no_fusion: bool,
    /// Train on a single cross-entropy over the combined ranking scores
    /// instead of the two-task sum.
    pub single_loss: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_price: true,
            use_category: true,
            use_brand: true,
            price_conv_only: false,
            uniform_levels: false,
            gcn_aggregation: false,
            no_cooccurrence: false,
            no_fusion: false,
            single_loss: false,
        }
    }
}

impl VariantFlags {
    pub fn full() -> Self {
        Self::default()
    }

    /// Whether the price-preference path (mining, fusion, price head, the
    /// price term of the ranking score) is active.
    pub fn price_preference_active(&self) -> bool {
        self.use_price && !self.price_conv_only
    }

    pub fn feature_mask(&self) -> FeatureMask {
        FeatureMask { price: self.use_price, category: self.use_category, brand: self.use_brand }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.price_conv_only && !self.use_price {
            return Err(ModelError::InvalidVariant {
                reason: "price-conv-only requires price nodes".to_string(),
            });
        }
        if self.no_fusion && !self.price_preference_active() {
            return Err(ModelError::InvalidVariant {
                reason: "no-fusion only applies when both preferences exist".to_string(),
            });
        }
        if self.single_loss && !self.price_preference_active() {
            return Err(ModelError::InvalidVariant {
                reason: "single-loss scores need the price preference".to_string(),
            });
        }
        if self.gcn_aggregation && self.no_cooccurrence {
            return Err(ModelError::InvalidVariant {
                reason: "gcn aggregation already has no co-occurrence term".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub rounds: usize,
    pub neighbor_cap: usize,
    pub seed: u64,
    pub variant: VariantFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 8,
            rounds: 3,
            neighbor_cap: 200,
            seed: 1,
            variant: VariantFlags::full(),
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    emb: [ParamId; 4],
    pos: ParamId,
    conv: ConvParamIds,
    price_enhance_w: ParamId,
    price_enhance_b: ParamId,
    heads: Vec<HeadIds>,
    interest_enhance_w: ParamId,
    interest_enhance_b: ParamId,
    interest: InterestIds,
    fusion: FusionIds,
}

/// A fully wired model: catalog dimensions plus parameter handles. The
/// learnable state itself lives in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub n_items: usize,
    pub rho: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    ids: Ids,
}

impl Model {
    /// Register every parameter (uniform ±1/sqrt(d), zero biases) and return
    /// the model plus its freshly initialized store. All variants register
    /// the same parameter set from the same seed stream, so ablations start
    /// from identical weights.
    pub fn init<F: Float>(
        cfg: ModelConfig,
        catalog: &ItemCatalog,
    ) -> Result<(Model, ParameterStore<F>), ModelError> {
        if cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads) {
            return Err(ModelError::HeadsMustDivideDim { d: cfg.d, heads: cfg.heads });
        }
        cfg.variant.validate()?;

        let d = cfg.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = Rng::new(cfg.seed);
        let mut store = ParameterStore::new();

        let emb = [
            store.register("emb.id", catalog.n_items(), d, bound, &mut rng),
            store.register("emb.price", catalog.rho, d, bound, &mut rng),
            store.register("emb.category", catalog.n_categories(), d, bound, &mut rng),
            store.register("emb.brand", catalog.n_brands(), d, bound, &mut rng),
        ];
        let pos = store.register("emb.pos", MAX_SESSION_LEN, d, bound, &mut rng);

        let mut intra: [[Option<ParamId>; 4]; 4] = Default::default();
        for &t in &NODE_TYPES {
            for &s in &NODE_TYPES {
                if t != s {
                    let name = format!("conv.intra.{}.{}", t.short_name(), s.short_name());
                    intra[t as usize][s as usize] =
                        Some(store.register(&name, d, d, bound, &mut rng));
                }
            }
        }
        let mut fuse_all = Vec::with_capacity(4);
        let mut gates = Vec::with_capacity(4);
        for &t in &NODE_TYPES {
            fuse_all.push(store.register(
                &format!("conv.inter.{}.all", t.short_name()),
                d,
                4 * d,
                bound,
                &mut rng,
            ));
            let mut g = Vec::with_capacity(3);
            for j in 0..3 {
                g.push(store.register(
                    &format!("conv.inter.{}.gate{j}", t.short_name()),
                    d,
                    d,
                    bound,
                    &mut rng,
                ));
            }
            gates.push([g[0], g[1], g[2]]);
        }
        let conv = ConvParamIds {
            intra,
            fuse_all: [fuse_all[0], fuse_all[1], fuse_all[2], fuse_all[3]],
            gates: [gates[0], gates[1], gates[2], gates[3]],
        };

        let price_enhance_w = store.register("pref.price.enhance.w", d, 2 * d, bound, &mut rng);
        let price_enhance_b = store.register("pref.price.enhance.b", d, 1, 0.0, &mut rng);
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let dh = d / cfg.heads;
            heads.push(HeadIds {
                wq: store.register(&format!("attn.head{i}.wq"), dh, d, bound, &mut rng),
                wk: store.register(&format!("attn.head{i}.wk"), dh, d, bound, &mut rng),
                wv: store.register(&format!("attn.head{i}.wv"), dh, d, bound, &mut rng),
            });
        }
        let interest_enhance_w =
            store.register("pref.interest.enhance.w", d, 2 * d, bound, &mut rng);
        let interest_enhance_b = store.register("pref.interest.enhance.b", d, 1, 0.0, &mut rng);
        let interest = InterestIds {
            a1: store.register("pref.interest.a1", d, d, bound, &mut rng),
            a2: store.register("pref.interest.a2", d, d, bound, &mut rng),
            bias: store.register("pref.interest.b", d, 1, 0.0, &mut rng),
            z: store.register("pref.interest.z", d, 1, bound, &mut rng),
        };
        let fusion = FusionIds {
            w1_price: store.register("fuse.w1p", d, d, bound, &mut rng),
            w2_price: store.register("fuse.w2p", d, d, bound, &mut rng),
            w1_interest: store.register("fuse.w1i", d, d, bound, &mut rng),
            w2_interest: store.register("fuse.w2i", d, d, bound, &mut rng),
            w1_merge: store.register("fuse.w1pi", d, d, bound, &mut rng),
            w2_merge: store.register("fuse.w2pi", d, d, bound, &mut rng),
            bias_merge: store.register("fuse.bpi", d, 1, 0.0, &mut rng),
        };

        let model = Model {
            cfg,
            n_items: catalog.n_items(),
            rho: catalog.rho,
            n_categories: catalog.n_categories(),
            n_brands: catalog.n_brands(),
            ids: Ids {
                emb,
                pos,
                conv,
                price_enhance_w,
                price_enhance_b,
                heads,
                interest_enhance_w,
                interest_enhance_b,
                interest,
                fusion,
            },
        };
        Ok((model, store))
    }

    pub fn conv_kind(&self) -> ConvKind {
        if self.cfg.variant.gcn_aggregation {
            ConvKind::Gcn
        } else if self.cfg.variant.no_cooccurrence {
            ConvKind::TripleNoCooc
        } else {
            ConvKind::Triple
        }
    }

    pub fn id_table(&self) -> ParamId {
        self.ids.emb[NodeType::Id as usize]
    }

    pub fn price_table(&self) -> ParamId {
        self.ids.emb[NodeType::Price as usize]
    }

    /// Initial per-node embedding vars for every node present in the graph.
    pub fn initial_tables<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        graph: &HeteroHypergraph,
    ) -> NodeTables {
        let mut vars: [Vec<Var>; 4] = Default::default();
        for &t in &NODE_TYPES {
            let table = self.ids.emb[t as usize];
            vars[t as usize] = (0..graph.n_nodes[t as usize])
                .map(|i| tape.param_row(store, table, i))
                .collect();
        }
        NodeTables { vars }
    }

    /// Convolved tables for one batch (or for evaluation).
    pub fn convolve<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        graph: &HeteroHypergraph,
        caps: &SampledNeighbors,
    ) -> NodeTables {
        let tables = self.initial_tables(tape, store, graph);
        run_convolution(
            tape,
            store,
            graph,
            caps,
            &self.ids.conv,
            tables,
            self.cfg.d,
            self.cfg.rounds,
            self.conv_kind(),
        )
    }

    /// The two preference vectors of one session prefix (price preference is
    /// `None` for interest-only variants).
    pub fn session_preferences<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        tables: &NodeTables,
        prefix: &[u32],
        catalog: &ItemCatalog,
    ) -> Result<(Option<Var>, Var), ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let id_seq: Vec<Var> =
            prefix.iter().map(|&i| tables.vars[NodeType::Id as usize][i as usize]).collect();
        let enhanced_ids = position_enhance(
            tape,
            store,
            self.ids.interest_enhance_w,
            self.ids.interest_enhance_b,
            self.ids.pos,
            &id_seq,
        )?;
        let interest_hat =
            interest_preference(tape, store, self.ids.interest, &enhanced_ids, &id_seq)?;

        if !self.cfg.variant.price_preference_active() {
            return Ok((None, interest_hat));
        }

        let price_seq: Vec<Var> = prefix
            .iter()
            .map(|&i| {
                let level = catalog.level[i as usize] as usize - 1;
                tables.vars[NodeType::Price as usize][level]
            })
            .collect();
        let enhanced_prices = position_enhance(
            tape,
            store,
            self.ids.price_enhance_w,
            self.ids.price_enhance_b,
            self.ids.pos,
            &price_seq,
        )?;
        let price_hat = price_preference(tape, store, &self.ids.heads, &enhanced_prices)?;

        if self.cfg.variant.no_fusion {
            Ok((Some(price_hat), interest_hat))
        } else {
            let (u_p, u_i) =
                fuse_preferences(tape, store, self.ids.fusion, price_hat, interest_hat);
            Ok((Some(u_p), u_i))
        }
    }

    /// Scalar training loss of one session.
    pub fn session_loss<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        tables: &NodeTables,
        session: &Session,
        catalog: &ItemCatalog,
        level_map: &[usize],
    ) -> Result<Var, ModelError> {
        let (u_p, u_i) =
            self.session_preferences(tape, store, tables, session.prefix(), catalog)?;
        let target = session.target() as usize;
        match u_p {
            Some(u_p) if self.cfg.variant.single_loss => {
                let logits = combined_logits(
                    tape,
                    store,
                    self.id_table(),
                    self.price_table(),
                    u_p,
                    u_i,
                    level_map,
                );
                Ok(tape.nll_from_logits(logits, target))
            }
            Some(u_p) => {
                let li = interest_logits(tape, store, self.id_table(), u_i);
                let l_interest = tape.nll_from_logits(li, target);
                let lp = price_logits(tape, store, self.price_table(), u_p);
                let target_level = catalog.level[target] as usize - 1;
                let l_price = tape.nll_from_logits(lp, target_level);
                Ok(tape.add(l_interest, l_price))
            }
            None => {
                let li = interest_logits(tape, store, self.id_table(), u_i);
                Ok(tape.nll_from_logits(li, target))
            }
        }
    }

    /// Mean loss over a batch of sessions (conv tables shared by the batch).
    pub fn batch_loss<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        tables: &NodeTables,
        sessions: &[&Session],
        catalog: &ItemCatalog,
        level_map: &[usize],
    ) -> Result<Var, ModelError> {
        debug_assert!(!sessions.is_empty());
        let mut losses = Vec::with_capacity(sessions.len());
        for s in sessions {
            losses.push(self.session_loss(tape, store, tables, s, catalog, level_map)?);
        }
        let stacked = tape.stack(&losses);
        Ok(tape.mean_all(stacked))
    }

    /// Per-session output distributions, all over the *initial* embedding
    /// tables: the interest head (over items), the price head (over levels,
    /// when the price path is active) and the combined ranking distribution.
    pub fn score_session<F: Float>(
        &self,
        tape: &mut Tape<F>,
        store: &ParameterStore<F>,
        tables: &NodeTables,
        prefix: &[u32],
        catalog: &ItemCatalog,
        level_map: &[usize],
    ) -> Result<SessionScores<F>, ModelError> {
        let (u_p, u_i) = self.session_preferences(tape, store, tables, prefix, catalog)?;
        let ui = tape.value(u_i).to_vec();
        let up = u_p.map(|v| tape.value(v).to_vec());

        let d = self.cfg.d;
        let id_data = store.data(self.id_table());
        let mut interest_logits: Vec<F> = Vec::with_capacity(self.n_items);
        for i in 0..self.n_items {
            let row = &id_data[i * d..(i + 1) * d];
            let mut acc = F::zero();
            for c in 0..d {
                acc = acc + row[c] * ui[c];
            }
            interest_logits.push(acc);
        }

        let mut combined = interest_logits.clone();
        let price = if let Some(up) = up {
            let price_data = store.data(self.price_table());
            let mut level_scores: Vec<F> = Vec::with_capacity(self.rho);
            for l in 0..self.rho {
                let row = &price_data[l * d..(l + 1) * d];
                let mut acc = F::zero();
                for c in 0..d {
                    acc = acc + row[c] * up[c];
                }
                level_scores.push(acc);
            }
            for i in 0..self.n_items {
                combined[i] = combined[i] + level_scores[level_map[i]];
            }
            let mut probs = level_scores;
            crate::params::softmax_in_place(&mut probs);
            Some(probs)
        } else {
            None
        };
        crate::params::softmax_in_place(&mut combined);
        crate::params::softmax_in_place(&mut interest_logits);
        Ok(SessionScores { combined, interest: interest_logits, price })
    }
}

/// Output distributions of one scored session.
#[derive(Debug, Clone)]
pub struct SessionScores<F> {
    /// Ranking distribution over items (price and interest terms summed
    /// before the softmax; equals `interest` for interest-only variants).
    pub combined: Vec<F>,
    /// Interest-head distribution over items.
    pub interest: Vec<F>,
    /// Price-head distribution over levels, when the price path is active.
    pub price: Option<Vec<F>>,
}

/// 0-based level index per item, as used by the combined ranking head.
pub fn level_map(catalog: &ItemCatalog) -> Vec<usize> {
    catalog.level.iter().map(|&l| (l as usize).saturating_sub(1)).collect()
}

/// Outcome of comparing one parameter's analytic gradient against central
/// finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Compare every parameter's analytic gradient of the two-task loss against
/// 64-bit central finite differences on a tiny fixed model (3 items, 2
/// categories, 2 brands, 3 levels, d=4, 2 heads, 2 rounds, one 3-item
/// session).
pub fn gradient_check(seed: u64, step: f64) -> Result<GradCheckReport, ModelError> {
    use crate::dataset::{SessionSet, SplitTag};

    let catalog = ItemCatalog {
        item_ids: vec!["a".into(), "b".into(), "c".into()],
        price: vec![1.0, 5.0, 9.0],
        category: vec![0, 1, 0],
        brand: vec![0, 1, 1],
        level: vec![1, 2, 3],
        category_names: vec!["c0".into(), "c1".into()],
        brand_names: vec!["b0".into(), "b1".into()],
        rho: 3,
        scheme: None,
    };
    let session = Session { seq: vec![0, 1, 2], times: vec![0, 1, 2] };
    let train = SessionSet {
        sessions: vec![session.clone()],
        catalog: catalog.clone(),
        split_tag: SplitTag::Train,
    };
    let cfg = ModelConfig {
        d: 4,
        heads: 2,
        rounds: 2,
        neighbor_cap: 200,
        seed,
        variant: VariantFlags::full(),
    };
    let (model, mut store) = Model::init::<f64>(cfg, &catalog)?;
    let graph = HeteroHypergraph::build(&train).expect("toy graph");
    let caps = SampledNeighbors::build(&graph, model.cfg.neighbor_cap, seed);
    let lmap = level_map(&catalog);

    let eval_loss = |store: &ParameterStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, store, &graph, &caps);
        let loss = model
            .batch_loss(&mut tape, store, &tables, &[&session], &catalog, &lmap)
            .expect("loss");
        tape.scalar(loss)
    };

    // Analytic gradients.
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        let loss = model.batch_loss(&mut tape, &store, &tables, &[&session], &catalog, &lmap)?;
        if !tape.scalar(loss).is_finite() {
            let tensor = tape
                .first_nonfinite()
                .map(|(i, op)| format!("node {i} ({op})"))
                .unwrap_or_else(|| "loss".to_string());
            return Err(ModelError::NonFiniteLoss { tensor });
        }
        tape.backward(loss, &mut store);
    }

    let mut entries = Vec::new();
    let mut overall: f64 = 0.0;
    for p in store.ids().collect::<Vec<_>>() {
        let analytic = store.grad(p).to_vec();
        let (rows, cols) = store.shape(p);
        let mut worst: f64 = 0.0;
        for (idx, &a) in analytic.iter().enumerate().take(rows * cols) {
            let mut f = |s: &ParameterStore<f64>| eval_loss(s);
            let fd = central_difference(&mut store, p, idx, step, &mut f);
            let abs_err = (a - fd).abs();
            let rel =
                if abs_err <= 1e-8 { 0.0 } else { abs_err / a.abs().max(fd.abs()).max(1e-8) };
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        entries.push(GradCheckEntry {
            name: store.name(p).to_string(),
            max_rel_err: worst,
            checked: rows * cols,
        });
    }
    Ok(GradCheckReport { entries, max_rel_err: overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SessionSet, SplitTag};

    fn toy_catalog() -> ItemCatalog {
        ItemCatalog {
            item_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            price: vec![1.0, 2.0, 8.0, 9.0],
            category: vec![0, 0, 1, 1],
            brand: vec![0, 1, 0, 1],
            level: vec![1, 1, 2, 2],
            category_names: vec!["c0".into(), "c1".into()],
            brand_names: vec!["b0".into(), "b1".into()],
            rho: 2,
            scheme: None,
        }
    }

    fn toy_train(catalog: &ItemCatalog) -> SessionSet {
        SessionSet {
            sessions: vec![
                Session { seq: vec![0, 1, 2], times: vec![0, 1, 2] },
                Session { seq: vec![2, 3], times: vec![10, 11] },
            ],
            catalog: catalog.clone(),
            split_tag: SplitTag::Train,
        }
    }

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            d: 4,
            heads: 2,
            rounds: 2,
            neighbor_cap: 200,
            seed,
            variant: VariantFlags::full(),
        }
    }

    #[test]
    fn init_rejects_bad_head_counts() {
        let catalog = toy_catalog();
        let cfg = ModelConfig { d: 10, heads: 4, ..tiny_cfg(1) };
        assert!(matches!(
            Model::init::<f32>(cfg, &catalog),
            Err(ModelError::HeadsMustDivideDim { d: 10, heads: 4 })
        ));
        let cfg = ModelConfig { d: 128, heads: 16, ..tiny_cfg(1) };
        assert!(Model::init::<f32>(cfg, &catalog).is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let catalog = toy_catalog();
        let (_, a) = Model::init::<f32>(tiny_cfg(9), &catalog).unwrap();
        let (_, b) = Model::init::<f32>(tiny_cfg(9), &catalog).unwrap();
        for p in a.ids() {
            assert_eq!(a.data(p), b.data(p));
        }
    }

    #[test]
    fn variant_validation_catches_contradictions() {
        let v = VariantFlags { use_price: false, price_conv_only: true, ..VariantFlags::full() };
        assert!(v.validate().is_err());
        let v = VariantFlags { use_price: false, single_loss: true, ..VariantFlags::full() };
        assert!(v.validate().is_err());
        let v = VariantFlags { use_price: false, no_fusion: true, ..VariantFlags::full() };
        assert!(v.validate().is_err());
        let v =
            VariantFlags { gcn_aggregation: true, no_cooccurrence: true, ..VariantFlags::full() };
        assert!(v.validate().is_err());
    }

    #[test]
    fn zero_rounds_is_identity() {
        let catalog = toy_catalog();
        let train = toy_train(&catalog);
        let cfg = ModelConfig { rounds: 0, ..tiny_cfg(3) };
        let (model, store) = Model::init::<f64>(cfg, &catalog).unwrap();
        let graph = HeteroHypergraph::build(&train).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 3);
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        for i in 0..4 {
            assert_eq!(tape.value(tables.vars[0][i]), store.row(model.id_table(), i));
        }
    }

    #[test]
    fn scores_are_distributions() {
        let catalog = toy_catalog();
        let train = toy_train(&catalog);
        let (model, store) = Model::init::<f64>(tiny_cfg(5), &catalog).unwrap();
        let graph = HeteroHypergraph::build(&train).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 5);
        let lmap = level_map(&catalog);
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        let scores =
            model.score_session(&mut tape, &store, &tables, &[0, 1], &catalog, &lmap).unwrap();
        assert_eq!(scores.combined.len(), 4);
        assert!((scores.combined.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(scores.combined.iter().all(|&p| p > 0.0));
        assert!((scores.interest.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let price = scores.price.unwrap();
        assert_eq!(price.len(), 2);
        assert!((price.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    fn grads_after_one_batch(variant: VariantFlags) -> (Model, ParameterStore<f64>) {
        let catalog = toy_catalog();
        let train = toy_train(&catalog);
        let cfg = ModelConfig { variant, ..tiny_cfg(7) };
        let (model, mut store) = Model::init::<f64>(cfg, &catalog).unwrap();
        let graph = HeteroHypergraph::build_masked(&train, variant.feature_mask()).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 7);
        let lmap = level_map(&catalog);
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        let session = train.sessions[0].clone();
        let loss =
            model.batch_loss(&mut tape, &store, &tables, &[&session], &catalog, &lmap).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store);
        (model, store)
    }

    #[test]
    fn no_price_variant_never_touches_price_parameters() {
        let variant = VariantFlags { use_price: false, ..VariantFlags::full() };
        let (model, store) = grads_after_one_batch(variant);
        assert!(store.grad(model.price_table()).iter().all(|&g| g == 0.0));
        for p in store.ids().collect::<Vec<_>>() {
            if store.name(p).starts_with("attn.") {
                assert!(store.grad(p).iter().all(|&g| g == 0.0), "{}", store.name(p));
            }
        }
    }

    #[test]
    fn price_conv_only_trains_price_nodes_but_not_the_price_head() {
        let variant = VariantFlags { price_conv_only: true, ..VariantFlags::full() };
        let (model, store) = grads_after_one_batch(variant);
        // Price embeddings still learn through the convolution...
        assert!(store.grad(model.price_table()).iter().any(|&g| g != 0.0));
        // ...but the attention heads and fusion gates stay untouched.
        for p in store.ids().collect::<Vec<_>>() {
            let name = store.name(p);
            if name.starts_with("attn.") || name.starts_with("fuse.") {
                assert!(store.grad(p).iter().all(|&g| g == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gradients_are_local_to_the_reachable_component() {
        // Two disconnected components (disjoint items, categories, brands,
        // levels). A batch touching only component A leaves B's category and
        // brand embeddings without gradient; B's ID and price rows still get
        // head gradients through the dense softmax over all items/levels.
        let catalog = ItemCatalog {
            item_ids: vec!["a0".into(), "a1".into(), "b0".into(), "b1".into()],
            price: vec![1.0, 2.0, 8.0, 9.0],
            category: vec![0, 0, 1, 1],
            brand: vec![0, 0, 1, 1],
            level: vec![1, 1, 2, 2],
            category_names: vec!["ca".into(), "cb".into()],
            brand_names: vec!["ba".into(), "bb".into()],
            rho: 2,
            scheme: None,
        };
        let train = SessionSet {
            sessions: vec![
                Session { seq: vec![0, 1], times: vec![0, 1] },
                Session { seq: vec![2, 3], times: vec![10, 11] },
            ],
            catalog: catalog.clone(),
            split_tag: SplitTag::Train,
        };
        let (model, mut store) = Model::init::<f64>(tiny_cfg(9), &catalog).unwrap();
        let graph = HeteroHypergraph::build(&train).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 9);
        let lmap = level_map(&catalog);
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        let batch = Session { seq: vec![0, 1], times: vec![0, 1] };
        let loss =
            model.batch_loss(&mut tape, &store, &tables, &[&batch], &catalog, &lmap).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store);

        let cat_grad = store.grad(store.id("emb.category").unwrap());
        let d = 4;
        assert!(cat_grad[..d].iter().any(|&g| g != 0.0), "component A category must learn");
        assert!(cat_grad[d..].iter().all(|&g| g == 0.0), "component B category untouched");
        let brand_grad = store.grad(store.id("emb.brand").unwrap());
        assert!(brand_grad[d..].iter().all(|&g| g == 0.0), "component B brand untouched");
        // The heads score every item and level, so B's rows do receive
        // gradient there.
        let id_grad = store.grad(model.id_table());
        assert!(id_grad[2 * d..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn batch_loss_is_finite_and_positive() {
        let catalog = toy_catalog();
        let train = toy_train(&catalog);
        let (model, store) = Model::init::<f64>(tiny_cfg(6), &catalog).unwrap();
        let graph = HeteroHypergraph::build(&train).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 6);
        let lmap = level_map(&catalog);
        let mut tape = Tape::new();
        let tables = model.convolve(&mut tape, &store, &graph, &caps);
        let refs: Vec<&Session> = train.sessions.iter().collect();
        let loss = model.batch_loss(&mut tape, &store, &tables, &refs, &catalog, &lmap).unwrap();
        let v = tape.scalar(loss);
        assert!(v.is_finite() && v > 0.0, "loss {v}");
    }
}
