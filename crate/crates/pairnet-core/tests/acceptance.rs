//! Acceptance suite. Nine criteria, one test (and one pass/fail line) each:
//!
//! 1. gradient integrity of every differentiable stage (< 2 minutes)
//! 2. assignment optimality against brute-force enumeration (exact)
//! 3. loss identities and the pair-loss closed form (1e-12)
//! 4. greedy claiming vs the maximum-matching oracle, plus monotonicity
//! 5. pipeline upper bound: noiseless oracle + injected labels → perfect
//! 6. desk-scale learning on the standard synthetic configuration
//! 7. positive-weight ablation degrades pair recall
//! 8. determinism and persistence (bit-exact round trips)
//! 9. duplicate-prediction resistance
//!
//! Criteria 6 and 7 share two full training runs through lazy fixtures.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pairnet_core::eval::{gt_injected_predictions, random_pair_baseline};
use pairnet_core::fusion::{
    rank_triplets, relation_loss, RelationLossConfig, RelationLossKind, SeesawCounts,
    TripletClasses, TripletPrediction,
};
use pairnet_core::hungarian::min_cost_assignment;
use pairnet_core::inspect::{inspect_image, read_pgm, write_pgm, InspectSidecar};
use pairnet_core::metrics::{compute_metrics, DatasetEvalInputs, MetricsReport, PqAccumulator};
use pairnet_core::model::{query_assignment, ModelConfig, PairNetModel};
use pairnet_core::nn::checkpoint::{load_checkpoint, save_checkpoint};
use pairnet_core::nn::gradcheck::{check_gradients, check_gradients_sampled};
use pairnet_core::nn::{multi_head_attention, ParamId, ParamStore, Tape, Tensor, Value};
use pairnet_core::oracle::{
    matching_cost, oracle_queries, EmbeddingTable, ObjectQuerySet, OracleConfig,
};
use pairnet_core::ppn::{
    ppn_loss, ppn_positive_weight, MatrixLearner, MatrixLearnerKind, MlpProjector,
};
use pairnet_core::rng::stream;
use pairnet_core::scene::synth::{synthesize, SynthConfig, SynthOutput};
use pairnet_core::train::{evaluate_with_config, train, TrainConfig, TrainOutputs};

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// The standard synthetic world: 500 train / 50 val images, 24x24 pixels,
/// 8 object classes (3 stuff), 6 relation classes, mean 5.6 relations,
/// seed 0.
fn standard_world() -> &'static SynthOutput {
    static WORLD: OnceLock<SynthOutput> = OnceLock::new();
    WORLD.get_or_init(|| synthesize(&SynthConfig::default()).expect("standard synthesis"))
}

/// The standard training run: default config (12 epochs, accumulation 8,
/// stepped schedule), seed 0, density-reciprocal positive weighting.
fn weighted_run() -> &'static TrainOutputs {
    static RUN: OnceLock<TrainOutputs> = OnceLock::new();
    RUN.get_or_init(|| {
        let world = standard_world();
        train(&TrainConfig::default(), &world.train, &world.val).expect("weighted training run")
    })
}

/// The same run with the positive-cell weight forced to 1.
fn unweighted_run() -> &'static TrainOutputs {
    static RUN: OnceLock<TrainOutputs> = OnceLock::new();
    RUN.get_or_init(|| {
        let world = standard_world();
        let cfg = TrainConfig {
            positive_weight_override: Some(1.0),
            ..TrainConfig::default()
        };
        train(&cfg, &world.train, &world.val).expect("unweighted training run")
    })
}

/// Small world shared by the cheap criteria.
fn tiny_world() -> &'static SynthOutput {
    static WORLD: OnceLock<SynthOutput> = OnceLock::new();
    WORLD.get_or_init(|| {
        synthesize(&SynthConfig {
            train_scenes: 12,
            val_scenes: 8,
            height: 12,
            width: 12,
            object_classes: 4,
            stuff_classes: 2,
            relation_classes: 3,
            mean_relations: 3.0,
            max_relations: 6,
            skew: 1.0,
            segments_min: 3,
            segments_max: 5,
            seed: 21,
        })
        .expect("tiny synthesis")
    })
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        n_obj: 8,
        width: 16,
        n_rel: 10,
        decoder_layers: 1,
        heads: 2,
        object_classes: 4,
        relation_classes: 3,
        matrix_learner: MatrixLearnerKind::Mlp,
        fold_pair_score: false,
    }
}

/// Projects an arbitrary-shape value to a scalar with fixed random weights
/// so every output entry receives a distinct gradient.
fn scalarize(tape: &mut Tape, v: Value, proj: &Tensor) -> Value {
    let p = tape.leaf(proj.clone());
    let prod = tape.mul(v, p).unwrap();
    let n = proj.numel();
    let flat = tape.reshape(prod, &[1, n]).unwrap();
    let ones = tape.leaf(Tensor::filled(&[n, 1], 1.0));
    let zb = tape.leaf(Tensor::zeros(&[1]));
    let s = tape.linear(flat, ones, zb).unwrap();
    tape.reshape(s, &[]).unwrap()
}

fn store_tensors(store: &ParamStore) -> (Vec<ParamId>, Vec<Tensor>) {
    let ids: Vec<ParamId> = store.ids().collect();
    let tensors = ids.iter().map(|&id| store.value(id).clone()).collect();
    (ids, tensors)
}

/// Shifts every parameter by a small random offset. Freshly built modules
/// have all-zero biases, and a relu that suppresses an entire row leaves the
/// next pre-activation exactly at its bias — an exact kink where central
/// differences and the one-sided analytic convention legitimately disagree.
/// Probing at a generic nearby point instead keeps the check meaningful.
fn jitter_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.value(id).clone();
        let noise = Tensor::uniform(t.shape(), 0.12, rng);
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        store
            .set_value(id, Tensor::new(t.shape().to_vec(), data).unwrap())
            .unwrap();
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_integrity() {
    const INSTANCES: usize = 20;
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let started = Instant::now();

    // Linear layers.
    for s in 0..INSTANCES as u64 {
        let mut rng = stream(900, &[1, s]);
        let (r, fi, fo) = (
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
        );
        let x = Tensor::uniform(&[r, fi], 1.0, &mut rng);
        let w = Tensor::uniform(&[fi, fo], 1.0, &mut rng);
        let b = Tensor::uniform(&[fo], 1.0, &mut rng);
        let proj = Tensor::uniform(&[r, fo], 1.0, &mut rng);
        let rep = check_gradients(&[x, w, b], H, |t, l| {
            let y = t.linear(l[0], l[1], l[2])?;
            Ok(scalarize(t, y, &proj))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "linear {s}: {}", rep.max_rel_err);
    }

    // Convolutional matrix learner (the conv2d path) and the row-wise
    // variant, parameters and input both probed.
    for (kind, tag) in [(MatrixLearnerKind::CnnTiny, 2u64), (MatrixLearnerKind::Mlp, 3u64)] {
        for s in 0..INSTANCES as u64 {
            let mut rng = stream(900, &[tag, s]);
            let n = rng.gen_range(3..6usize);
            let mut store = ParamStore::new();
            let learner = MatrixLearner::new(&mut store, "ml", kind, n, &mut rng).unwrap();
            jitter_params(&mut store, &mut rng);
            let (ids, params) = store_tensors(&store);
            let mut inputs = vec![Tensor::uniform(&[n, n], 1.0, &mut rng)];
            inputs.extend(params);
            let proj = Tensor::uniform(&[n, n], 1.0, &mut rng);
            let mut probe = stream(901, &[tag, s]);
            let rep = check_gradients_sampled(&inputs, H, 6, Some(&mut probe), |t, l| {
                for (i, &id) in ids.iter().enumerate() {
                    store.preset_binding(t, id, l[i + 1]);
                }
                let y = learner.apply(t, &store, l[0])?;
                Ok(scalarize(t, y, &proj))
            })
            .unwrap();
            assert!(rep.max_rel_err < TOL, "learner {tag}/{s}: {}", rep.max_rel_err);
        }
    }

    // Multi-head attention with positional terms.
    for s in 0..INSTANCES as u64 {
        let mut rng = stream(900, &[4, s]);
        let heads = 2usize;
        let d = 8usize;
        let (lq, lkv) = (rng.gen_range(2..5usize), rng.gen_range(2..6usize));
        let mut inputs = vec![
            Tensor::uniform(&[lq, d], 1.0, &mut rng),
            Tensor::uniform(&[lkv, d], 1.0, &mut rng),
            Tensor::uniform(&[lq, d], 1.0, &mut rng),
            Tensor::uniform(&[lkv, d], 1.0, &mut rng),
            Tensor::uniform(&[lkv, d], 1.0, &mut rng),
        ];
        for _ in 0..4 {
            inputs.push(Tensor::uniform(&[d, d], 0.7, &mut rng));
            inputs.push(Tensor::uniform(&[d], 0.7, &mut rng));
        }
        let proj = Tensor::uniform(&[lq, d], 1.0, &mut rng);
        let rep = check_gradients(&inputs, H, |t, l| {
            let weights = [l[5], l[6], l[7], l[8], l[9], l[10], l[11], l[12]];
            let (y, _) = multi_head_attention(t, l[0], l[1], l[2], l[3], l[4], &weights, heads)?;
            Ok(scalarize(t, y, &proj))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "attention {s}: {}", rep.max_rel_err);
    }

    // Query projectors.
    for s in 0..INSTANCES as u64 {
        let mut rng = stream(900, &[5, s]);
        let d = 6usize;
        let n = rng.gen_range(2..5usize);
        let mut store = ParamStore::new();
        let projector = MlpProjector::new(&mut store, "proj", d, &mut rng).unwrap();
        jitter_params(&mut store, &mut rng);
        let (ids, params) = store_tensors(&store);
        let mut inputs = vec![Tensor::uniform(&[n, d], 1.0, &mut rng)];
        inputs.extend(params);
        let proj = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let rep = check_gradients(&inputs, H, |t, l| {
            for (i, &id) in ids.iter().enumerate() {
                store.preset_binding(t, id, l[i + 1]);
            }
            let y = projector.apply(t, &store, l[0])?;
            Ok(scalarize(t, y, &proj))
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "projector {s}: {}", rep.max_rel_err);
    }

    // The full composite training loss, probed through every parameter.
    let world = tiny_world();
    for s in 0..INSTANCES as u64 {
        let mut model = PairNetModel::new(tiny_model_cfg(), 40 + s).unwrap();
        let mut jit = stream(903, &[s]);
        jitter_params(&mut model.store, &mut jit);
        let table = EmbeddingTable::new(4, 8, 16, s).unwrap();
        let oracle = OracleConfig {
            embedding_noise: 0.05,
            ..OracleConfig::noiseless(s)
        };
        let img = (s as usize) % world.train.scenes.len();
        let scene = &world.train.scenes[img];
        let graph = &world.train.graphs[img];
        let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
        let kind = match s % 3 {
            0 => RelationLossKind::CrossEntropy,
            1 => RelationLossKind::Focal,
            _ => RelationLossKind::Seesaw,
        };
        // The seesaw compensation factor is a stop-gradient reweighting: it is
        // computed from the forward-pass probabilities and applied as a
        // constant, so a finite-difference probe (which perturbs the weights
        // too) is only meaningful with the compensation exponent at zero. The
        // count-based mitigation path stays active and fully differentiable.
        let loss_cfg = RelationLossConfig {
            kind,
            seesaw_compensation: 0.0,
            ..RelationLossConfig::default()
        };
        let mut counts = SeesawCounts::new(4);
        counts.observe(&[0, 0, 1, 2, 3, 3, 3]);
        let weights = Default::default();
        let (ids, inputs) = store_tensors(&model.store);
        let mut probe = stream(902, &[s]);
        let rep = check_gradients_sampled(&inputs, H, 3, Some(&mut probe), |t, l| {
            for (i, &id) in ids.iter().enumerate() {
                model.store.preset_binding(t, id, l[i]);
            }
            let step =
                model.train_forward(t, scene, graph, &qs, &loss_cfg, &counts, &weights, None)?;
            Ok(step.loss)
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "composite {s}: {}", rep.max_rel_err);
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient sweep took {elapsed:.1}s, budget is 120s");
}

// ---------------------------------------------------------------------------
// Criterion 2: assignment optimality
// ---------------------------------------------------------------------------

/// Brute-force minimum over all injective row-to-column maps; totals are
/// summed in row order to match the solver's total exactly.
fn brute_force_min(costs: &Tensor) -> f64 {
    let (rows, cols) = (costs.shape()[0], costs.shape()[1]);
    let data = costs.data();
    let mut best = f64::INFINITY;
    let mut chosen = vec![usize::MAX; rows];
    fn recurse(
        r: usize,
        rows: usize,
        cols: usize,
        data: &[f64],
        used: &mut Vec<bool>,
        chosen: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if r == rows {
            let total: f64 = (0..rows).map(|i| data[i * cols + chosen[i]]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                chosen[r] = c;
                recurse(r + 1, rows, cols, data, used, chosen, best, );
                used[c] = false;
            }
        }
    }
    let mut used = vec![false; cols];
    recurse(0, rows, cols, data, &mut used, &mut chosen, &mut best);
    best
}

/// The matcher's cross-entropy arithmetic, replicated operation-for-
/// operation so brute-force totals are bit-comparable.
fn ce_of_row(logits: &Tensor, row: usize, col: usize) -> f64 {
    let c = logits.shape()[1];
    let data = &logits.data()[row * c..(row + 1) * c];
    let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + data.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - data[col]
}

#[test]
fn criterion_2_assignment_optimality() {
    // Query-to-segment assignment costs, solved vs enumerated.
    let synth = SynthConfig {
        train_scenes: 100,
        val_scenes: 0,
        height: 8,
        width: 8,
        object_classes: 4,
        stuff_classes: 2,
        relation_classes: 3,
        mean_relations: 2.0,
        max_relations: 4,
        skew: 1.0,
        segments_min: 3,
        segments_max: 5,
        seed: 33,
    };
    let data = synthesize(&synth).unwrap().train;
    let table = EmbeddingTable::new(4, 5, 12, 7).unwrap();
    let mut instances = 0usize;
    for (i, scene) in data.scenes.iter().enumerate() {
        for noise_seed in [0u64, 1] {
            let oracle = OracleConfig {
                embedding_noise: 0.6,
                class_flip_prob: 0.3,
                mask_perturb_rate: 0.2,
                seed: 100 + i as u64 * 2 + noise_seed,
            };
            let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
            let costs = matching_cost(scene, &qs).unwrap();
            assert!(costs.shape()[0] <= 5 && costs.shape()[1] <= 5);
            let (assignment, total) = min_cost_assignment(&costs).unwrap();
            let direct: f64 = assignment
                .iter()
                .enumerate()
                .map(|(r, &c)| costs.data()[r * costs.shape()[1] + c])
                .sum();
            assert_eq!(total, direct, "solver total must be its own row sum");
            assert_eq!(total, brute_force_min(&costs), "scene {i} noise {noise_seed}");
            instances += 1;
        }
    }
    assert_eq!(instances, 200);

    // Triplet matching costs, solved vs enumerated with replicated
    // cross-entropy arithmetic.
    for s in 0..200u64 {
        let mut rng = stream(950, &[s]);
        let k = rng.gen_range(2..6usize);
        let n = rng.gen_range(1..=k);
        let obj_classes = rng.gen_range(2..5usize);
        let rel_classes = rng.gen_range(2..5usize);
        let sub = Tensor::uniform(&[k, obj_classes + 1], 2.0, &mut rng);
        let obj = Tensor::uniform(&[k, obj_classes + 1], 2.0, &mut rng);
        let rel = Tensor::uniform(&[k, rel_classes + 1], 2.0, &mut rng);
        // Distinct triplets only: duplicates make identical cost rows, and the
        // resulting assignment ties are equal in value but not bit-comparable
        // across summation orders.
        let mut gt: Vec<TripletClasses> = Vec::with_capacity(n);
        while gt.len() < n {
            let cand = (
                rng.gen_range(1..=obj_classes) as u32,
                rng.gen_range(1..=rel_classes) as u32,
                rng.gen_range(1..=obj_classes) as u32,
            );
            if !gt.contains(&cand) {
                gt.push(cand);
            }
        }
        let assignment = pairnet_core::fusion::triplet_matching(&sub, &obj, &rel, &gt).unwrap();

        let mut costs = vec![0.0; n * k];
        for (g, &(cs, cr, co)) in gt.iter().enumerate() {
            for slot in 0..k {
                costs[g * k + slot] = ce_of_row(&sub, slot, cs as usize - 1)
                    + ce_of_row(&obj, slot, co as usize - 1)
                    + ce_of_row(&rel, slot, cr as usize);
            }
        }
        let matrix = Tensor::new(vec![n, k], costs).unwrap();
        assert_eq!(assignment.total_cost, brute_force_min(&matrix), "instance {s}");
        // The assignment itself is injective.
        let mut seen = vec![false; k];
        for &slot in &assignment.pred_of_gt {
            assert!(!seen[slot]);
            seen[slot] = true;
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 3: loss identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_loss_identities() {
    // Focal loss with zero focusing power reduces to cross entropy.
    for s in 0..50u64 {
        let mut rng = stream(960, &[s]);
        let k = rng.gen_range(2..8usize);
        let c = rng.gen_range(2..7usize);
        let logits = Tensor::uniform(&[k, c], 3.0, &mut rng);
        let targets: Vec<usize> = (0..k).map(|_| rng.gen_range(0..c)).collect();

        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let ce = tape.ce_loss(l, &targets).unwrap();
        let focal = tape.focal_loss(l, &targets, 0.0).unwrap();
        let diff = (tape.value(ce).item() - tape.value(focal).item()).abs();
        assert!(diff <= 1e-12, "focal id {s}: {diff}");
    }

    // Seesaw with equal counts and no compensation reduces to cross entropy.
    for s in 0..50u64 {
        let mut rng = stream(961, &[s]);
        let k = rng.gen_range(2..8usize);
        let c = rng.gen_range(3..7usize);
        let logits = Tensor::uniform(&[k, c], 3.0, &mut rng);
        let targets: Vec<usize> = (0..k).map(|_| rng.gen_range(0..c)).collect();
        let mut counts = SeesawCounts::new(c);
        let flat: Vec<usize> = (0..c).flat_map(|j| std::iter::repeat(j).take(5)).collect();
        counts.observe(&flat);
        let cfg = RelationLossConfig {
            kind: RelationLossKind::Seesaw,
            seesaw_compensation: 0.0,
            ..RelationLossConfig::default()
        };
        let ce_cfg = RelationLossConfig {
            kind: RelationLossKind::CrossEntropy,
            ..RelationLossConfig::default()
        };

        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let seesaw = relation_loss(&mut tape, l, &targets, &cfg, &counts).unwrap();
        let ce = relation_loss(&mut tape, l, &targets, &ce_cfg, &counts).unwrap();
        let diff = (tape.value(seesaw).item() - tape.value(ce).item()).abs();
        assert!(diff <= 1e-12, "seesaw id {s}: {diff}");
    }

    // Pair-proposal loss at zero logits equals ln(2) * (N - s + p*s) / N.
    for s in 0..50u64 {
        let mut rng = stream(962, &[s]);
        let n = rng.gen_range(2..10usize);
        let cells = n * n;
        let max_pos = cells - n;
        let positives = rng.gen_range(1..=max_pos);
        let mut cells_vec = vec![0.0f64; cells];
        let mut placed = 0;
        while placed < positives {
            let r = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            if r != c && cells_vec[r * n + c] == 0.0 {
                cells_vec[r * n + c] = 1.0;
                placed += 1;
            }
        }
        let gt = Tensor::new(vec![n, n], cells_vec).unwrap();
        let p = ppn_positive_weight(&gt);
        assert_eq!(p, cells as f64 / positives as f64);

        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[n, n]));
        let loss = ppn_loss(&mut tape, logits, &gt, p).unwrap();
        let expected = std::f64::consts::LN_2
            * ((cells - positives) as f64 + p * positives as f64)
            / cells as f64;
        let diff = (tape.value(loss).item() - expected).abs();
        assert!(diff <= 1e-12, "pair-loss closed form {s}: {diff}");
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: the metric oracle and recall monotonicity
// ---------------------------------------------------------------------------

/// A random prediction list over one scene: some predictions derived from
/// ground truth with mostly-correct labels, some pure noise.
fn random_predictions(
    scene: &pairnet_core::scene::PanopticScene,
    graph: &pairnet_core::scene::SceneGraph,
    qs: &ObjectQuerySet,
    object_classes: usize,
    relation_classes: usize,
    max_preds: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TripletPrediction> {
    let assignment = query_assignment(scene, qs).unwrap();
    let (h, w) = (scene.height, scene.width);
    let n_obj = qs.n_obj();
    let one_hot = |len: usize, at: usize| {
        let mut v = vec![0.0; len];
        v[at] = 1.0;
        v
    };
    let n_preds = rng.gen_range(1..=max_preds);
    let mut preds = Vec::with_capacity(n_preds);
    for i in 0..n_preds {
        let (sub_slot, obj_slot, sub_c, rel_c, obj_c);
        if !graph.triplets.is_empty() && rng.gen_bool(0.6) {
            let t = &graph.triplets[rng.gen_range(0..graph.triplets.len())];
            sub_slot = assignment.slot_of(t.subject);
            obj_slot = assignment.slot_of(t.object);
            let scene_class = |seg: u32| scene.segments[(seg - 1) as usize].class;
            sub_c = if rng.gen_bool(0.75) {
                scene_class(t.subject)
            } else {
                rng.gen_range(1..=object_classes) as u32
            };
            obj_c = if rng.gen_bool(0.75) {
                scene_class(t.object)
            } else {
                rng.gen_range(1..=object_classes) as u32
            };
            rel_c = if rng.gen_bool(0.75) {
                t.relation
            } else {
                rng.gen_range(1..=relation_classes) as u32
            };
        } else {
            sub_slot = rng.gen_range(0..n_obj);
            obj_slot = rng.gen_range(0..n_obj);
            sub_c = rng.gen_range(1..=object_classes) as u32;
            obj_c = rng.gen_range(1..=object_classes) as u32;
            rel_c = rng.gen_range(1..=relation_classes) as u32;
        }
        preds.push(TripletPrediction {
            pair_index: i,
            sub_query: sub_slot,
            obj_query: obj_slot,
            sub_dist: one_hot(object_classes + 1, sub_c as usize - 1),
            obj_dist: one_hot(object_classes + 1, obj_c as usize - 1),
            rel_dist: one_hot(relation_classes + 1, rel_c as usize),
            sub_mask: Tensor::new(vec![h, w], qs.mask_of(sub_slot).to_vec()).unwrap(),
            obj_mask: Tensor::new(vec![h, w], qs.mask_of(obj_slot).to_vec()).unwrap(),
            score: rng.gen_range(0.0..1.0),
        });
    }
    rank_triplets(preds)
}

#[test]
fn criterion_4_metric_oracle_and_monotonicity() {
    let world = tiny_world();
    let table = EmbeddingTable::new(4, 8, 16, 5).unwrap();
    let oracle = OracleConfig::noiseless(5);

    // Greedy rank-order claiming agrees with the maximum-matching oracle on
    // a pinned corpus of tiny instances (at most 6 annotations, at most 10
    // predictions per image).
    for s in 0..50u64 {
        let mut rng = stream(970, &[s]);
        let img = (s as usize) % world.train.scenes.len();
        let scene = &world.train.scenes[img];
        let graph = &world.train.graphs[img];
        if graph.triplets.is_empty() {
            continue;
        }
        assert!(graph.triplets.len() <= 6);
        let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
        let preds = vec![random_predictions(scene, graph, &qs, 4, 3, 10, &mut rng)];
        let inputs = DatasetEvalInputs {
            predictions: &preds,
            scenes: std::slice::from_ref(scene),
            graphs: std::slice::from_ref(graph),
            objects: &world.train.objects,
        };
        let report = compute_metrics(&inputs, &[2, 5, 10], 0.5, true).unwrap();
        let optimal = report.optimal_recall_at_k.as_ref().unwrap();
        let optimal_pair = report.optimal_pair_recall_at_k.as_ref().unwrap();
        for k in [2usize, 5, 10] {
            assert_eq!(
                report.recall_at_k[&k], optimal[&k],
                "greedy vs maximum diverged at K={k}, instance {s}"
            );
            assert_eq!(
                report.pair_recall_at_k[&k], optimal_pair[&k],
                "pair greedy vs maximum diverged at K={k}, instance {s}"
            );
        }
    }

    // Monotonicity and pair dominance on fuzzed multi-image datasets with
    // deep prediction lists.
    for s in 0..10u64 {
        let mut rng = stream(971, &[s]);
        let scenes = &world.val.scenes;
        let graphs = &world.val.graphs;
        let mut preds = Vec::new();
        for (scene, graph) in scenes.iter().zip(graphs) {
            let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
            preds.push(random_predictions(scene, graph, &qs, 4, 3, 60, &mut rng));
        }
        let inputs = DatasetEvalInputs {
            predictions: &preds,
            scenes,
            graphs,
            objects: &world.val.objects,
        };
        let report = compute_metrics(&inputs, &[20, 50, 100], 0.5, false).unwrap();
        let (r20, r50, r100) = (
            report.recall_at_k[&20],
            report.recall_at_k[&50],
            report.recall_at_k[&100],
        );
        assert!(r20 <= r50 && r50 <= r100, "monotonicity: {r20} {r50} {r100}");
        for k in [20usize, 50, 100] {
            assert!(
                report.pair_recall_at_k[&k] >= report.recall_at_k[&k],
                "pair dominance at K={k}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 5: pipeline upper bound
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_pipeline_upper_bound() {
    let world = standard_world();
    let data = &world.val;
    let cfg = ModelConfig::default();
    let table = EmbeddingTable::new(cfg.object_classes, cfg.n_obj, cfg.width, 0).unwrap();
    let oracle = OracleConfig::noiseless(0);

    let mut predictions = Vec::with_capacity(data.scenes.len());
    let mut pq = PqAccumulator::new();
    for (scene, graph) in data.scenes.iter().zip(&data.graphs) {
        let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
        predictions.push(
            gt_injected_predictions(scene, graph, &qs, data.relations.len()).unwrap(),
        );
        pq.add_image(&qs, scene).unwrap();
    }
    let inputs = DatasetEvalInputs {
        predictions: &predictions,
        scenes: &data.scenes,
        graphs: &data.graphs,
        objects: &data.objects,
    };
    let report = compute_metrics(&inputs, &[20, 50, 100], 0.5, false).unwrap();
    for k in [20usize, 50, 100] {
        assert_eq!(report.recall_at_k[&k], 1.0, "R@{k} must be exactly 1");
        assert_eq!(report.pair_recall_at_k[&k], 1.0, "pair-R@{k} must be exactly 1");
        assert_eq!(report.mean_recall_at_k[&k], 1.0, "mR@{k} must be exactly 1");
    }
    assert_eq!(pq.value(), Some(1.0), "panoptic quality must be exactly 1");
}

// ---------------------------------------------------------------------------
// Criterion 6: desk-scale learning
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_desk_scale_learning() {
    let world = standard_world();
    let cfg = TrainConfig::default();

    let untrained = PairNetModel::new(cfg.model.clone(), cfg.seed).unwrap();
    let untrained_pair = evaluate_with_config(&untrained, &cfg, &world.val, &[20])
        .unwrap()
        .report
        .pair_recall_at_k[&20];

    let run = weighted_run();
    let last = run.record.epochs.last().unwrap();
    let final_pair = last.metrics.pair_recall_at_k[&20];
    let final_triplet = last.metrics.recall_at_k[&20];
    let baseline = random_pair_baseline(cfg.model.n_obj, cfg.model.n_rel, 20);

    assert!(
        final_pair >= 3.0 * untrained_pair,
        "pair-R@20 {final_pair:.4} must be >= 3x untrained {untrained_pair:.4}"
    );
    assert!(
        final_pair >= 5.0 * baseline,
        "pair-R@20 {final_pair:.4} must be >= 5x baseline {baseline:.4}"
    );
    assert!(
        final_triplet >= 0.5 * final_pair,
        "R@20 {final_triplet:.4} must be >= half of pair-R@20 {final_pair:.4}"
    );

    let first_ppn = run.record.epochs.first().unwrap().mean_ppn;
    let last_ppn = last.mean_ppn;
    assert!(
        last_ppn <= 0.5 * first_ppn,
        "pair loss must halve: first epoch {first_ppn:.5}, last epoch {last_ppn:.5}"
    );
    assert!(
        run.record.wall_clock_seconds < 1800.0,
        "run took {:.0}s, budget is 30 minutes",
        run.record.wall_clock_seconds
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: positive-weight ablation
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_positive_weight_ablation() {
    let weighted = weighted_run();
    let unweighted = unweighted_run();
    let weighted_pair = weighted.record.epochs.last().unwrap().metrics.pair_recall_at_k[&20];
    let unweighted_pair = unweighted
        .record
        .epochs
        .last()
        .unwrap()
        .metrics
        .pair_recall_at_k[&20];
    assert!(
        unweighted_pair <= 0.5 * weighted_pair,
        "flat weighting should collapse pair recall: {unweighted_pair:.4} vs weighted {weighted_pair:.4}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let world = tiny_world();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        model: tiny_model_cfg(),
        oracle: OracleConfig::noiseless(3),
        seed: 7,
        eval_ks: vec![5, 10],
        ..TrainConfig::default()
    };

    // Same seed, same data: bit-identical loss sequences.
    let a = train(&cfg, &world.train, &world.val).unwrap();
    let b = train(&cfg, &world.train, &world.val).unwrap();
    assert_eq!(a.record.step_losses, b.record.step_losses);
    assert_eq!(a.record.epochs, b.record.epochs);

    // Checkpoint round trip: identical metrics report.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.pnet");
    save_checkpoint(&a.model.store, &ckpt).unwrap();
    let mut restored = PairNetModel::new(cfg.model.clone(), cfg.seed).unwrap();
    load_checkpoint(&mut restored.store, &ckpt).unwrap();
    let before = evaluate_with_config(&a.model, &cfg, &world.val, &[5, 10])
        .unwrap()
        .report;
    let after = evaluate_with_config(&restored, &cfg, &world.val, &[5, 10])
        .unwrap()
        .report;
    assert_eq!(before, after, "checkpoint round trip changed the report");

    // Report JSON round trip is lossless.
    let text = serde_json::to_string(&before).unwrap();
    let parsed: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, before);

    // Heatmap artifacts re-parse losslessly.
    let table = EmbeddingTable::new(4, 8, 16, cfg.oracle.seed).unwrap();
    let i = world
        .val
        .graphs
        .iter()
        .position(|g| !g.triplets.is_empty())
        .unwrap();
    let qs = oracle_queries(&world.val.scenes[i], &table, &cfg.oracle)
        .unwrap()
        .query_set;
    let out = inspect_image(
        &a.model,
        &world.val.scenes[i],
        &world.val.graphs[i],
        &qs,
        dir.path(),
    )
    .unwrap();
    for f in &out.files {
        let (h, w, bytes) = read_pgm(f).unwrap();
        let rewritten = dir.path().join("rewrite.pgm");
        write_pgm(&rewritten, h, w, &bytes).unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(&rewritten).unwrap(),
            "{} did not round-trip",
            f.display()
        );
    }
    let sidecar: InspectSidecar =
        serde_json::from_str(&std::fs::read_to_string(&out.sidecar_path).unwrap()).unwrap();
    assert_eq!(sidecar, out.sidecar);
}

// ---------------------------------------------------------------------------
// Criterion 9: duplicate resistance
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_duplicate_resistance() {
    let world = tiny_world();
    let table = EmbeddingTable::new(4, 8, 16, 5).unwrap();
    let oracle = OracleConfig::noiseless(5);
    let i = world
        .val
        .graphs
        .iter()
        .position(|g| g.triplets.len() >= 2)
        .expect("need an image with at least two relations");
    let scene = &world.val.scenes[i];
    let graph = &world.val.graphs[i];
    let gt_count = graph.triplets.len();

    let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
    let correct = gt_injected_predictions(scene, graph, &qs, world.val.relations.len())
        .unwrap()
        .into_iter()
        .next()
        .unwrap();
    let duplicates: Vec<TripletPrediction> = (0..20)
        .map(|j| TripletPrediction {
            pair_index: j,
            ..correct.clone()
        })
        .collect();

    let preds = vec![duplicates];
    let inputs = DatasetEvalInputs {
        predictions: &preds,
        scenes: std::slice::from_ref(scene),
        graphs: std::slice::from_ref(graph),
        objects: &world.val.objects,
    };
    let report = compute_metrics(&inputs, &[20], 0.5, false).unwrap();
    let expected = 1.0 / gt_count as f64;
    assert_eq!(
        report.recall_at_k[&20], expected,
        "20 copies of one correct triplet must score exactly 1/{gt_count}"
    );
}
