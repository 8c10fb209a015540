//! Triple-level convolution over the heterogeneous hypergraph.
//!
//! Each round updates every node from three signals, all read from the
//! pre-round tables (synchronous update):
//!
//! * co-occurrence: plain average of the same-type nodes sharing a hyperedge,
//! * intra-type: bilinear attention over the adjacent nodes of one other
//!   type, giving one type embedding per foreign type,
//! * inter-type: the three type embeddings gated into the node vector,
//!   `h = v + sum_j tanh(W_a [v;e1;e2;e3] + W_j e_j) ⊙ e_j`.
//!
//! Rounds share parameters. Hub nodes are tamed by seed-deterministic
//! neighbor sampling fixed per run.

// Convolution entry points thread tape/store/graph/caps explicitly, and the
// reference oracles in the tests index arrays the way the formulas read.
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::hypergraph::{node_stream, sample_neighbors, HeteroHypergraph, NodeRef, NodeType, NODE_TYPES};
use crate::params::{ParamId, ParameterStore};

/// Adjacency after neighbor-cap sampling, laid out like the graph's index:
/// `lists[t][i][tau]`.
#[derive(Debug, Clone)]
pub struct SampledNeighbors {
    lists: Vec<Vec<[Vec<u32>; 4]>>,
}

impl SampledNeighbors {
    pub fn build(graph: &HeteroHypergraph, cap: usize, seed: u64) -> Self {
        let lists = NODE_TYPES
            .iter()
            .map(|&t| {
                (0..graph.n_nodes[t as usize] as u32)
                    .map(|i| {
                        let node = NodeRef::new(t, i);
                        let mut per_type: [Vec<u32>; 4] = Default::default();
                        for &tau in &NODE_TYPES {
                            let full = graph.adjacent(node, tau);
                            per_type[tau as usize] = sample_neighbors(
                                full,
                                cap,
                                seed ^ node_stream(node, tau),
                            );
                        }
                        per_type
                    })
                    .collect()
            })
            .collect();
        SampledNeighbors { lists }
    }

    pub fn neighbors(&self, node: NodeRef, tau: NodeType) -> &[u32] {
        &self.lists[node.ty as usize][node.index as usize][tau as usize]
    }
}

/// Parameter ids of the convolution: one bilinear matrix per ordered
/// (target, source) type pair and one gating set per target type.
#[derive(Debug, Clone)]
pub struct ConvParamIds {
    /// `intra[t][tau]` for `tau != t`.
    pub intra: [[Option<ParamId>; 4]; 4],
    /// `W_a` (d x 4d) per target type.
    pub fuse_all: [ParamId; 4],
    /// The three gate matrices per target type, in source order.
    pub gates: [[ParamId; 3]; 4],
}

/// Per-type node embeddings on the tape.
#[derive(Debug, Clone)]
pub struct NodeTables {
    pub vars: [Vec<Var>; 4],
}

impl NodeTables {
    pub fn get(&self, node: NodeRef) -> Var {
        self.vars[node.ty as usize][node.index as usize]
    }
}

/// Average of the co-occurring same-type nodes (pre-round values); zero for
/// an empty set.
pub fn cooccurrence_conv<F: Float>(
    tape: &mut Tape<F>,
    tables: &NodeTables,
    caps: &SampledNeighbors,
    node: NodeRef,
    d: usize,
) -> Var {
    let neigh = caps.neighbors(node, node.ty);
    if neigh.is_empty() {
        return tape.zeros(d);
    }
    let vars: Vec<Var> =
        neigh.iter().map(|&j| tables.vars[node.ty as usize][j as usize]).collect();
    tape.mean_vecs(&vars)
}

/// Bilinear attention over the node's neighbors of type `tau`:
/// `alpha_k = softmax_k(v_i^T W v_k)`, `e = sum alpha_k v_k`. Empty
/// neighborhoods give the zero vector.
pub fn intra_type_conv<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    tables: &NodeTables,
    caps: &SampledNeighbors,
    node: NodeRef,
    tau: NodeType,
    w: ParamId,
    d: usize,
) -> Var {
    let neigh = caps.neighbors(node, tau);
    if neigh.is_empty() {
        return tape.zeros(d);
    }
    let target = tables.get(node);
    // v_i^T W v_k = (W^T v_i) . v_k — hoist the matrix product out of the
    // neighbor loop.
    let q = tape.matvec_t(store, w, target);
    let vecs: Vec<Var> = neigh.iter().map(|&j| tables.vars[tau as usize][j as usize]).collect();
    let logits: Vec<Var> = vecs.iter().map(|&v| tape.dot(q, v)).collect();
    let stacked = tape.stack(&logits);
    let alpha = tape.softmax(stacked);
    tape.weighted_sum(alpha, &vecs)
}

/// Gated fusion of the three foreign-type embeddings into the node vector.
pub fn inter_type_conv<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    target: Var,
    type_embs: &[Var; 3],
    fuse_all: ParamId,
    gates: &[ParamId; 3],
) -> Var {
    let cat = tape.concat(&[target, type_embs[0], type_embs[1], type_embs[2]]);
    let merged = tape.matvec(store, fuse_all, cat);
    let mut out = target;
    for j in 0..3 {
        let we = tape.matvec(store, gates[j], type_embs[j]);
        let pre = tape.add(merged, we);
        let gate = tape.tanh(pre);
        let gated = tape.mul(gate, type_embs[j]);
        out = tape.add(out, gated);
    }
    out
}

/// Aggregation rule of a convolution round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// The full co-occurrence + intra-type + inter-type scheme.
    Triple,
    /// Triple without the co-occurrence term.
    TripleNoCooc,
    /// Plain neighborhood averaging over all adjacent nodes of every type,
    /// ignoring relation structure.
    Gcn,
}

/// One synchronous round: every node of every type updated from the
/// pre-round tables.
pub fn triple_level_step<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    graph: &HeteroHypergraph,
    caps: &SampledNeighbors,
    params: &ConvParamIds,
    tables: &NodeTables,
    d: usize,
    kind: ConvKind,
) -> NodeTables {
    let mut out: [Vec<Var>; 4] = Default::default();
    for &t in &NODE_TYPES {
        let n = graph.n_nodes[t as usize];
        let mut column = Vec::with_capacity(n);
        for i in 0..n as u32 {
            let node = NodeRef::new(t, i);
            let v = tables.get(node);
            let h = match kind {
                ConvKind::Gcn => {
                    let mut vars: Vec<Var> = Vec::new();
                    for &tau in &NODE_TYPES {
                        for &j in caps.neighbors(node, tau) {
                            vars.push(tables.vars[tau as usize][j as usize]);
                        }
                    }
                    if vars.is_empty() {
                        v
                    } else {
                        let mean = tape.mean_vecs(&vars);
                        tape.add(v, mean)
                    }
                }
                ConvKind::Triple | ConvKind::TripleNoCooc => {
                    let sources: Vec<NodeType> =
                        NODE_TYPES.iter().copied().filter(|&tau| tau != t).collect();
                    let e0 = intra_type_conv(
                        tape, store, tables, caps, node, sources[0],
                        params.intra[t as usize][sources[0] as usize].unwrap(), d,
                    );
                    let e1 = intra_type_conv(
                        tape, store, tables, caps, node, sources[1],
                        params.intra[t as usize][sources[1] as usize].unwrap(), d,
                    );
                    let e2 = intra_type_conv(
                        tape, store, tables, caps, node, sources[2],
                        params.intra[t as usize][sources[2] as usize].unwrap(), d,
                    );
                    let fused = inter_type_conv(
                        tape,
                        store,
                        v,
                        &[e0, e1, e2],
                        params.fuse_all[t as usize],
                        &params.gates[t as usize],
                    );
                    if kind == ConvKind::Triple {
                        let c = cooccurrence_conv(tape, tables, caps, node, d);
                        tape.add(fused, c)
                    } else {
                        fused
                    }
                }
            };
            column.push(h);
        }
        out[t as usize] = column;
    }
    NodeTables { vars: out }
}

/// `rounds` synchronous steps with shared parameters; `rounds = 0` returns
/// the input tables (diagnostic identity).
pub fn run_convolution<F: Float>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    graph: &HeteroHypergraph,
    caps: &SampledNeighbors,
    params: &ConvParamIds,
    tables: NodeTables,
    d: usize,
    rounds: usize,
    kind: ConvKind,
) -> NodeTables {
    let mut current = tables;
    for _ in 0..rounds {
        current = triple_level_step(tape, store, graph, caps, params, &current, d, kind);
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::toy_set;
    use crate::model::{Model, ModelConfig, VariantFlags};
    use alloc::vec;
    use alloc::vec::Vec;

    const D: usize = 2;

    struct Fixture {
        graph: HeteroHypergraph,
        caps: SampledNeighbors,
        model: Model,
        store: ParameterStore<f64>,
    }

    /// Three items over two levels/categories/brands with one 3-item
    /// session, d=2.
    fn fixture(seed: u64) -> Fixture {
        let set = toy_set(&[1, 2, 1], &[0, 0, 1], &[0, 1, 1], &[&[0, 1, 2]]);
        let graph = HeteroHypergraph::build(&set).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, seed);
        let cfg = ModelConfig {
            d: D,
            heads: 1,
            rounds: 1,
            neighbor_cap: 200,
            seed,
            variant: VariantFlags::full(),
        };
        let (model, store) = Model::init::<f64>(cfg, &set.catalog).unwrap();
        Fixture { graph, caps, model, store }
    }

    fn zero_all(store: &mut ParameterStore<f64>) {
        for p in store.ids().collect::<Vec<_>>() {
            for v in store.data_mut(p) {
                *v = 0.0;
            }
        }
    }

    fn set_row(store: &mut ParameterStore<f64>, name: &str, row: usize, values: &[f64]) {
        let p = store.id(name).unwrap();
        let (_, cols) = store.shape(p);
        store.data_mut(p)[row * cols..row * cols + values.len()].copy_from_slice(values);
    }

    #[test]
    fn cooccurrence_is_the_arithmetic_mean() {
        let mut fx = fixture(1);
        zero_all(&mut fx.store);
        set_row(&mut fx.store, "emb.id", 0, &[1.0, 1.0]);
        set_row(&mut fx.store, "emb.id", 2, &[3.0, 3.0]);
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        // Item 1 co-occurs with items 0 and 2 via the session edge.
        let c = cooccurrence_conv(
            &mut tape,
            &tables,
            &fx.caps,
            NodeRef::new(NodeType::Id, 1),
            D,
        );
        assert_eq!(tape.value(c), &[2.0, 2.0]);
        // A category node has no co-occurrence: zero vector.
        let z = cooccurrence_conv(
            &mut tape,
            &tables,
            &fx.caps,
            NodeRef::new(NodeType::Category, 0),
            D,
        );
        assert_eq!(tape.value(z), &[0.0, 0.0]);
    }

    #[test]
    fn cooccurrence_of_single_neighbor_is_that_neighbor() {
        let set = toy_set(&[1, 2], &[0, 0], &[0, 0], &[&[0, 1]]);
        let graph = HeteroHypergraph::build(&set).unwrap();
        let caps = SampledNeighbors::build(&graph, 200, 3);
        let cfg = ModelConfig {
            d: D,
            heads: 1,
            rounds: 1,
            neighbor_cap: 200,
            seed: 3,
            variant: VariantFlags::full(),
        };
        let (model, mut store) = Model::init::<f64>(cfg, &set.catalog).unwrap();
        zero_all(&mut store);
        set_row(&mut store, "emb.id", 1, &[0.5, -0.25]);
        let mut tape = Tape::new();
        let tables = model.initial_tables(&mut tape, &store, &graph);
        let c = cooccurrence_conv(&mut tape, &tables, &caps, NodeRef::new(NodeType::Id, 0), D);
        assert_eq!(tape.value(c), &[0.5, -0.25]);
    }

    #[test]
    fn intra_type_attention_with_zero_weight_is_the_mean() {
        let mut fx = fixture(2);
        zero_all(&mut fx.store);
        set_row(&mut fx.store, "emb.id", 0, &[2.0, 0.0]);
        set_row(&mut fx.store, "emb.id", 2, &[0.0, 4.0]);
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        // Price level 1 (node 0) is adjacent to items 0 and 2; W = 0 makes
        // the attention uniform.
        let w = fx.store.id("conv.intra.price.id").unwrap();
        let e = intra_type_conv(
            &mut tape,
            &fx.store,
            &tables,
            &fx.caps,
            NodeRef::new(NodeType::Price, 0),
            NodeType::Id,
            w,
            D,
        );
        assert_eq!(tape.value(e), &[1.0, 2.0]);
    }

    #[test]
    fn intra_type_attention_singleton_passes_through() {
        let fx = fixture(4);
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        // Item 0's only category neighbor is category 0.
        let w = fx.store.id("conv.intra.id.category").unwrap();
        let e = intra_type_conv(
            &mut tape,
            &fx.store,
            &tables,
            &fx.caps,
            NodeRef::new(NodeType::Id, 0),
            NodeType::Category,
            w,
            D,
        );
        let expected = fx.store.row(fx.store.id("emb.category").unwrap(), 0);
        assert_eq!(tape.value(e), expected);
    }

    #[test]
    fn intra_type_attention_matches_hand_computation() {
        // Two neighbors, hand-set vectors and W; oracle computed with
        // straight-line arithmetic.
        let mut fx = fixture(5);
        zero_all(&mut fx.store);
        let v_target = [0.3, -0.7];
        let v_a = [1.0, 0.5];
        let v_b = [-0.4, 0.8];
        let w = [[0.6, -0.2], [0.1, 0.9]];
        set_row(&mut fx.store, "emb.price", 0, &v_target);
        set_row(&mut fx.store, "emb.id", 0, &v_a);
        set_row(&mut fx.store, "emb.id", 2, &v_b);
        let wid = fx.store.id("conv.intra.price.id").unwrap();
        set_row(&mut fx.store, "conv.intra.price.id", 0, &w[0]);
        set_row(&mut fx.store, "conv.intra.price.id", 1, &w[1]);

        // Oracle: logit_k = v_target^T W v_k, alpha = softmax, e = sum.
        let vt_w = [
            v_target[0] * w[0][0] + v_target[1] * w[1][0],
            v_target[0] * w[0][1] + v_target[1] * w[1][1],
        ];
        let la = vt_w[0] * v_a[0] + vt_w[1] * v_a[1];
        let lb = vt_w[0] * v_b[0] + vt_w[1] * v_b[1];
        let m = la.max(lb);
        let (ea, eb) = ((la - m).exp(), (lb - m).exp());
        let (aa, ab) = (ea / (ea + eb), eb / (ea + eb));
        let oracle = [aa * v_a[0] + ab * v_b[0], aa * v_a[1] + ab * v_b[1]];

        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        let e = intra_type_conv(
            &mut tape,
            &fx.store,
            &tables,
            &fx.caps,
            NodeRef::new(NodeType::Price, 0),
            NodeType::Id,
            wid,
            D,
        );
        let got = tape.value(e);
        for i in 0..D {
            assert!((got[i] - oracle[i]).abs() < 1e-12, "{got:?} vs {oracle:?}");
        }
    }

    #[test]
    fn inter_type_fusion_degenerate_cases() {
        let fx = fixture(6);
        let mut tape = Tape::new();
        let v = tape.constant(vec![0.4, -0.9]);
        let zero = tape.zeros(D);
        let wa = fx.store.id("conv.inter.id.all").unwrap();
        let g0 = fx.store.id("conv.inter.id.gate0").unwrap();
        let g1 = fx.store.id("conv.inter.id.gate1").unwrap();
        let g2 = fx.store.id("conv.inter.id.gate2").unwrap();
        // All type embeddings zero: h = v whatever the parameters are.
        let h = inter_type_conv(&mut tape, &fx.store, v, &[zero, zero, zero], wa, &[g0, g1, g2]);
        assert_eq!(tape.value(h), &[0.4, -0.9]);

        // Zero parameters but nonzero embeddings: gates are tanh(0) = 0.
        let mut store0 = fx.store.clone();
        zero_all(&mut store0);
        let e1 = tape.constant(vec![1.0, 2.0]);
        let h0 = inter_type_conv(&mut tape, &store0, v, &[e1, e1, e1], wa, &[g0, g1, g2]);
        assert_eq!(tape.value(h0), &[0.4, -0.9]);
    }

    #[test]
    fn inter_type_fusion_matches_hand_computation() {
        let mut fx = fixture(7);
        zero_all(&mut fx.store);
        let v = [0.2, -0.1];
        let e1 = [0.5, 0.3];
        let e2 = [-0.6, 0.4];
        let e3 = [0.9, -0.8];
        // W_a row-major (2 x 8), gate matrices 2x2.
        let wa = [
            [0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.05, -0.05],
            [0.0, 0.15, -0.25, 0.35, 0.1, -0.3, 0.2, 0.1],
        ];
        let w1 = [[0.4, -0.1], [0.2, 0.3]];
        let w2 = [[-0.2, 0.5], [0.1, -0.4]];
        let w3 = [[0.3, 0.3], [-0.5, 0.2]];
        let p_wa = fx.store.id("conv.inter.id.all").unwrap();
        for r in 0..2 {
            let (_, cols) = fx.store.shape(p_wa);
            fx.store.data_mut(p_wa)[r * cols..r * cols + 8].copy_from_slice(&wa[r]);
        }
        set_row(&mut fx.store, "conv.inter.id.gate0", 0, &w1[0]);
        set_row(&mut fx.store, "conv.inter.id.gate0", 1, &w1[1]);
        set_row(&mut fx.store, "conv.inter.id.gate1", 0, &w2[0]);
        set_row(&mut fx.store, "conv.inter.id.gate1", 1, &w2[1]);
        set_row(&mut fx.store, "conv.inter.id.gate2", 0, &w3[0]);
        set_row(&mut fx.store, "conv.inter.id.gate2", 1, &w3[1]);

        // Oracle.
        let cat = [v[0], v[1], e1[0], e1[1], e2[0], e2[1], e3[0], e3[1]];
        let mut merged = [0.0f64; 2];
        for r in 0..2 {
            merged[r] = (0..8).map(|c| wa[r][c] * cat[c]).sum();
        }
        let gate = |w: &[[f64; 2]; 2], e: &[f64; 2]| -> [f64; 2] {
            [
                (merged[0] + w[0][0] * e[0] + w[0][1] * e[1]).tanh(),
                (merged[1] + w[1][0] * e[0] + w[1][1] * e[1]).tanh(),
            ]
        };
        let (g1v, g2v, g3v) = (gate(&w1, &e1), gate(&w2, &e2), gate(&w3, &e3));
        let oracle = [
            v[0] + g1v[0] * e1[0] + g2v[0] * e2[0] + g3v[0] * e3[0],
            v[1] + g1v[1] * e1[1] + g2v[1] * e2[1] + g3v[1] * e3[1],
        ];

        let mut tape = Tape::new();
        let tv = tape.constant(v.to_vec());
        let t1 = tape.constant(e1.to_vec());
        let t2 = tape.constant(e2.to_vec());
        let t3 = tape.constant(e3.to_vec());
        let g0 = fx.store.id("conv.inter.id.gate0").unwrap();
        let g1 = fx.store.id("conv.inter.id.gate1").unwrap();
        let g2 = fx.store.id("conv.inter.id.gate2").unwrap();
        let h = inter_type_conv(&mut tape, &fx.store, tv, &[t1, t2, t3], p_wa, &[g0, g1, g2]);
        let got = tape.value(h);
        for i in 0..D {
            assert!((got[i] - oracle[i]).abs() < 1e-12, "{got:?} vs {oracle:?}");
        }
    }

    #[test]
    fn zero_parameters_reduce_step_to_v_plus_c() {
        let mut fx = fixture(8);
        // Keep embeddings, zero every conv weight.
        for name in [
            "conv.inter.id.all", "conv.inter.price.all", "conv.inter.category.all",
            "conv.inter.brand.all",
        ] {
            let p = fx.store.id(name).unwrap();
            for v in fx.store.data_mut(p) {
                *v = 0.0;
            }
        }
        for t in ["id", "price", "category", "brand"] {
            for j in 0..3 {
                let p = fx.store.id(&alloc::format!("conv.inter.{t}.gate{j}")).unwrap();
                for v in fx.store.data_mut(p) {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        let stepped = triple_level_step(
            &mut tape,
            &fx.store,
            &fx.graph,
            &fx.caps,
            conv_ids(&fx.store),
            &tables,
            D,
            ConvKind::Triple,
        );
        for &t in &NODE_TYPES {
            for i in 0..fx.graph.n_nodes[t as usize] as u32 {
                let node = NodeRef::new(t, i);
                let v = tape.value(tables.get(node)).to_vec();
                let c_var = cooccurrence_conv(&mut tape, &tables, &fx.caps, node, D);
                let c = tape.value(c_var).to_vec();
                let h = tape.value(stepped.get(node));
                for k in 0..D {
                    assert!(
                        (h[k] - (v[k] + c[k])).abs() < 1e-12,
                        "{t:?}{i}: h != v + c"
                    );
                }
            }
        }
    }

    fn conv_ids(store: &ParameterStore<f64>) -> &'static ConvParamIds {
        // Rebuild the id map the model registered; leaked for test brevity.
        let mut intra: [[Option<ParamId>; 4]; 4] = Default::default();
        for &t in &NODE_TYPES {
            for &s in &NODE_TYPES {
                if t != s {
                    let name =
                        alloc::format!("conv.intra.{}.{}", t.short_name(), s.short_name());
                    intra[t as usize][s as usize] = Some(store.id(&name).unwrap());
                }
            }
        }
        let fuse = |t: NodeType| store.id(&alloc::format!("conv.inter.{}.all", t.short_name())).unwrap();
        let gate = |t: NodeType, j: usize| {
            store.id(&alloc::format!("conv.inter.{}.gate{j}", t.short_name())).unwrap()
        };
        let ids = ConvParamIds {
            intra,
            fuse_all: [
                fuse(NodeType::Id),
                fuse(NodeType::Price),
                fuse(NodeType::Category),
                fuse(NodeType::Brand),
            ],
            gates: [
                [gate(NodeType::Id, 0), gate(NodeType::Id, 1), gate(NodeType::Id, 2)],
                [gate(NodeType::Price, 0), gate(NodeType::Price, 1), gate(NodeType::Price, 2)],
                [
                    gate(NodeType::Category, 0),
                    gate(NodeType::Category, 1),
                    gate(NodeType::Category, 2),
                ],
                [gate(NodeType::Brand, 0), gate(NodeType::Brand, 1), gate(NodeType::Brand, 2)],
            ],
        };
        alloc::boxed::Box::leak(alloc::boxed::Box::new(ids))
    }

    /// Naive reference: recompute one full step with plain f64 slices
    /// straight from the store and graph, no tape involved.
    fn naive_step(fx: &Fixture) -> [Vec<Vec<f64>>; 4] {
        let store = &fx.store;
        let emb = |t: NodeType, i: u32| -> Vec<f64> {
            let name = match t {
                NodeType::Id => "emb.id",
                NodeType::Price => "emb.price",
                NodeType::Category => "emb.category",
                NodeType::Brand => "emb.brand",
            };
            store.row(store.id(name).unwrap(), i as usize).to_vec()
        };
        let matvec = |name: &str, x: &[f64]| -> Vec<f64> {
            let p = store.id(name).unwrap();
            let (rows, cols) = store.shape(p);
            let d = store.data(p);
            (0..rows).map(|r| (0..cols).map(|c| d[r * cols + c] * x[c]).sum()).collect()
        };
        let mut out: [Vec<Vec<f64>>; 4] = Default::default();
        for &t in &NODE_TYPES {
            for i in 0..fx.graph.n_nodes[t as usize] as u32 {
                let node = NodeRef::new(t, i);
                let v = emb(t, i);
                // intra-type embeddings for the three foreign types
                let sources: Vec<NodeType> =
                    NODE_TYPES.iter().copied().filter(|&tau| tau != t).collect();
                let mut es: Vec<Vec<f64>> = Vec::new();
                for &tau in &sources {
                    let neigh = fx.caps.neighbors(node, tau);
                    if neigh.is_empty() {
                        es.push(vec![0.0; D]);
                        continue;
                    }
                    let wname =
                        alloc::format!("conv.intra.{}.{}", t.short_name(), tau.short_name());
                    let p = store.id(&wname).unwrap();
                    let wd = store.data(p);
                    // logit_k = v^T W v_k
                    let mut vt_w = [0.0; D];
                    for c in 0..D {
                        for r in 0..D {
                            vt_w[c] += v[r] * wd[r * D + c];
                        }
                    }
                    let vecs: Vec<Vec<f64>> = neigh.iter().map(|&j| emb(tau, j)).collect();
                    let logits: Vec<f64> = vecs
                        .iter()
                        .map(|vk| (0..D).map(|c| vt_w[c] * vk[c]).sum())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let mut e = vec![0.0; D];
                    for (k, vk) in vecs.iter().enumerate() {
                        for c in 0..D {
                            e[c] += exps[k] / z * vk[c];
                        }
                    }
                    es.push(e);
                }
                // inter-type gating
                let mut cat = v.clone();
                for e in &es {
                    cat.extend_from_slice(e);
                }
                let merged =
                    matvec(&alloc::format!("conv.inter.{}.all", t.short_name()), &cat);
                let mut h = v.clone();
                for (j, e) in es.iter().enumerate() {
                    let we = matvec(
                        &alloc::format!("conv.inter.{}.gate{j}", t.short_name()),
                        e,
                    );
                    for c in 0..D {
                        h[c] += (merged[c] + we[c]).tanh() * e[c];
                    }
                }
                // co-occurrence
                let cooc = fx.caps.neighbors(node, t);
                if !cooc.is_empty() {
                    for &j in cooc {
                        let vj = emb(t, j);
                        for c in 0..D {
                            h[c] += vj[c] / cooc.len() as f64;
                        }
                    }
                }
                out[t as usize].push(h);
            }
        }
        out
    }

    #[test]
    fn step_matches_naive_reference() {
        let fx = fixture(11);
        let oracle = naive_step(&fx);
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        let stepped = triple_level_step(
            &mut tape,
            &fx.store,
            &fx.graph,
            &fx.caps,
            conv_ids(&fx.store),
            &tables,
            D,
            ConvKind::Triple,
        );
        for &t in &NODE_TYPES {
            for i in 0..fx.graph.n_nodes[t as usize] {
                let got = tape.value(stepped.vars[t as usize][i]);
                let want = &oracle[t as usize][i];
                for c in 0..D {
                    let rel = (got[c] - want[c]).abs() / want[c].abs().max(1.0);
                    assert!(rel < 1e-9, "{t:?}{i}[{c}]: {got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn two_rounds_equal_step_of_step() {
        let fx = fixture(12);
        let mut tape = Tape::new();
        let t0 = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        let ids = conv_ids(&fx.store);
        let once = triple_level_step(
            &mut tape, &fx.store, &fx.graph, &fx.caps, ids, &t0, D, ConvKind::Triple,
        );
        let twice = triple_level_step(
            &mut tape, &fx.store, &fx.graph, &fx.caps, ids, &once, D, ConvKind::Triple,
        );
        let mut tape2 = Tape::new();
        let t0b = fx.model.initial_tables(&mut tape2, &fx.store, &fx.graph);
        let via_run = run_convolution(
            &mut tape2, &fx.store, &fx.graph, &fx.caps, ids, t0b, D, 2, ConvKind::Triple,
        );
        for &t in &NODE_TYPES {
            for i in 0..fx.graph.n_nodes[t as usize] {
                assert_eq!(
                    tape.value(twice.vars[t as usize][i]),
                    tape2.value(via_run.vars[t as usize][i])
                );
            }
        }
    }

    #[test]
    fn gcn_step_is_v_plus_neighborhood_mean() {
        let fx = fixture(13);
        let mut tape = Tape::new();
        let tables = fx.model.initial_tables(&mut tape, &fx.store, &fx.graph);
        let stepped = triple_level_step(
            &mut tape,
            &fx.store,
            &fx.graph,
            &fx.caps,
            conv_ids(&fx.store),
            &tables,
            D,
            ConvKind::Gcn,
        );
        // Check item 0 by hand: neighbors across all types, equal weights.
        let node = NodeRef::new(NodeType::Id, 0);
        let mut expect = tape.value(tables.get(node)).to_vec();
        let mut all: Vec<Vec<f64>> = Vec::new();
        for &tau in &NODE_TYPES {
            for &j in fx.caps.neighbors(node, tau) {
                all.push(tape.value(tables.vars[tau as usize][j as usize]).to_vec());
            }
        }
        for c in 0..D {
            expect[c] += all.iter().map(|v| v[c]).sum::<f64>() / all.len() as f64;
        }
        let got = tape.value(stepped.get(node));
        for c in 0..D {
            assert!((got[c] - expect[c]).abs() < 1e-12);
        }
    }
}
