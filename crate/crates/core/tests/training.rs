//! Observed behaviour of the pretraining and fine-tuning loops.

mod common;

use common::{random_mat, rng};
use hyperrec_core::eval::{leave_last_out_split, SplitSet};
use hyperrec_core::hypergraph::{self, HypergraphOperator, Side};
use hyperrec_core::ingest::{synth_block_model, BlockModel};
use hyperrec_core::numerics::{Adam, AdamConfig, DenseMat, ParamSet, SparseCsr, Tape};
use hyperrec_core::pretrain::{
    pretrain_loss, pretrain_objective, pretrain_step, sample_bpr_triples, train_pretrain, EmbeddingState,
    PretrainConfig, PretrainGraphs,
};
use hyperrec_core::toyllm::{
    finetune_examples, finetune_step, train_finetune, Example, FineTuneConfig, FineTuneModel, Template,
};

fn toy(seed: u64) -> (SplitSet, PretrainGraphs) {
    let d = synth_block_model(&BlockModel::toy(seed)).unwrap();
    let split = leave_last_out_split(&d.log);
    let graphs = PretrainGraphs::build(&split.train, &[d.text, d.visual], 5, 2).unwrap();
    (split, graphs)
}

#[test]
fn switching_off_extra_terms_leaves_bpr() {
    let (_, graphs) = toy(1);
    let cfg = PretrainConfig {
        alpha: 0.0,
        beta: 0.0,
        lambda: 0.0,
        ..PretrainConfig::default()
    };
    let state = EmbeddingState::init(graphs.users(), graphs.items(), &cfg, &mut rng(2));
    let triples = sample_bpr_triples(&graphs.interactions.matrix, 64, &mut rng(3)).unwrap();
    let l = pretrain_loss(&state, &graphs, &triples, &cfg).unwrap();
    assert_eq!(l.total, l.bpr);
    assert!(l.u2u > 0.0 && l.i2i > 0.0 && l.reg > 0.0);
}

#[test]
fn loss_decreases_over_first_steps() {
    let (_, graphs) = toy(4);
    let cfg = PretrainConfig {
        lr: 1e-3,
        ..PretrainConfig::default()
    };
    let mut state = EmbeddingState::init(graphs.users(), graphs.items(), &cfg, &mut rng(5));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &state.params);
    let batch = sample_bpr_triples(&graphs.interactions.matrix, cfg.batch_size, &mut rng(6)).unwrap();
    let mut prev = f64::INFINITY;
    for _ in 0..5 {
        let l = pretrain_step(&mut state, &mut adam, &graphs, &batch, &cfg).unwrap();
        assert!(l.total < prev, "{} !< {prev}", l.total);
        assert!(l.bpr >= 0.0 && l.u2u >= 0.0 && l.i2i >= 0.0 && l.reg >= 0.0);
        prev = l.total;
    }
}

#[test]
fn zero_alpha_isolates_the_user_operator() {
    let (_, graphs) = toy(7);
    let cfg = PretrainConfig {
        alpha: 0.0,
        ..PretrainConfig::default()
    };
    let state = EmbeddingState::init(graphs.users(), graphs.items(), &cfg, &mut rng(8));
    let triples = sample_bpr_triples(&graphs.interactions.matrix, 64, &mut rng(9)).unwrap();
    let mut swapped = graphs.clone();
    swapped.u2u = Some(HypergraphOperator {
        matrix: SparseCsr::identity(graphs.users()),
        side: Side::User,
    });
    let a = pretrain_loss(&state, &graphs, &triples, &cfg).unwrap();
    let b = pretrain_loss(&state, &swapped, &triples, &cfg).unwrap();
    assert_ne!(a.u2u, b.u2u);
    for l in [a, b] {
        let rest = l.bpr + cfg.beta * l.i2i + cfg.lambda * l.reg;
        assert!((l.total - rest).abs() <= 1e-12 * l.total.abs());
    }
    // with the user-side embeddings held fixed, BPR ignores the operator
    let mut tape = Tape::new();
    let v = pretrain_objective(&mut tape, &state.params, &state.layout, &graphs, &triples, &cfg).unwrap();
    let fu = tape.value(v.fused_user).clone();
    let fi = tape.value(v.fused_item).clone();
    let mut tape2 = Tape::new();
    let v2 = pretrain_objective(&mut tape2, &state.params, &state.layout, &swapped, &triples, &cfg).unwrap();
    assert_eq!(tape.value(v.fused_item), tape2.value(v2.fused_item));
    let mut t3 = Tape::new();
    let (u, i) = (t3.constant(fu), t3.constant(fi));
    let bpr_fixed = hyperrec_core::pretrain::bpr_loss_tape(&mut t3, u, i, &triples).unwrap();
    assert_eq!(t3.scalar(bpr_fixed), a.bpr);
}

#[test]
fn training_is_deterministic() {
    let (split, graphs) = toy(10);
    let cfg = PretrainConfig {
        lr: 1e-2,
        max_epochs: 8,
        seed: 3,
        ..PretrainConfig::default()
    };
    let a = train_pretrain(&graphs, &split.valid, &cfg).unwrap();
    let b = train_pretrain(&graphs, &split.valid, &cfg).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.history, b.history);
}

#[test]
fn zero_patience_stops_at_first_non_improvement() {
    let (split, graphs) = toy(12);
    let cfg = PretrainConfig {
        lr: 1e-2,
        patience: 0,
        max_epochs: 200,
        ..PretrainConfig::default()
    };
    let out = train_pretrain(&graphs, &split.valid, &cfg).unwrap();
    let h = &out.history;
    let mut best = h[0].val_r20;
    let mut stop = h.len();
    for (e, rec) in h.iter().enumerate().skip(1) {
        if rec.val_r20 > best {
            best = rec.val_r20;
        } else {
            stop = e + 1;
            break;
        }
    }
    assert_eq!(h.len(), stop);
    assert!(h.len() < 200);
    let best_rec = h.iter().find(|r| r.epoch == out.best_epoch).unwrap();
    assert_eq!(best_rec.val_r20, best);
}

#[test]
fn missing_operator_is_rejected() {
    let (split, mut graphs) = toy(13);
    graphs.i2i = None;
    assert!(train_pretrain(&graphs, &split.valid, &PretrainConfig::default()).is_err());
    let bad = PretrainConfig {
        tau: -1.0,
        ..PretrainConfig::default()
    };
    assert!(train_pretrain(&graphs, &split.valid, &bad).is_err());
}

#[test]
fn operator_nnz_respects_knn_bound() {
    let d = synth_block_model(&BlockModel::toy(14)).unwrap();
    let g = hypergraph::knn_modal_graph(&d.text, 5).unwrap().matrix;
    assert_eq!(g.nnz(), 40 * 6);
}

fn small_config(prefix_len: usize, seed: u64) -> FineTuneConfig {
    let mut c = FineTuneConfig {
        seed,
        ..FineTuneConfig::default()
    };
    c.pool.prefix_len = prefix_len;
    c
}

fn graph_table(seed: u64) -> DenseMat {
    random_mat(40, 64, &mut rng(seed))
}

fn five_examples() -> Vec<Example> {
    (0..5)
        .map(|u| Example {
            user: u,
            history: vec![u, (u + 3) % 40, (u * 7) % 40],
            label: (u * 11 + 2) % 40,
        })
        .collect()
}

#[test]
fn uniform_logits_cost_ln_n() {
    let (model, mut params) = FineTuneModel::new(small_config(4, 0), graph_table(1), Template::default(), None).unwrap();
    params.set_value(model.head_w, DenseMat::zeros(64, 40)).unwrap();
    let loss = model.loss(&params, &five_examples()).unwrap();
    assert!((loss - 40f64.ln()).abs() < 1e-9);
    assert!((40f64.ln() - 3.688879).abs() < 1e-6);
    // all logits tie, so ranking is plain index order
    let p = model.predict_next_item(&params, &[1, 2], &[], 40).unwrap();
    assert_eq!(p.items, (0..40).collect::<Vec<_>>());
}

#[test]
fn decoder_is_untouched_by_training() {
    let (model, mut params) = FineTuneModel::new(small_config(4, 0), graph_table(2), Template::default(), None).unwrap();
    let before = model.decoder().checksum();
    let mut adam = Adam::new(AdamConfig::with_lr(3e-4), &params);
    for _ in 0..10 {
        finetune_step(&model, &mut params, &mut adam, &five_examples()).unwrap();
    }
    assert_eq!(model.decoder().checksum(), before);
    assert!(model.trainable_fraction(&params) < 0.05);
}

#[test]
fn overfit_probe_memorizes() {
    let (model, mut params) = FineTuneModel::new(small_config(4, 3), graph_table(3), Template::default(), None).unwrap();
    let batch = five_examples();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &params);
    for _ in 0..50 {
        finetune_step(&model, &mut params, &mut adam, &batch).unwrap();
    }
    let loss = model.loss(&params, &batch).unwrap();
    assert!(loss < 0.1, "loss {loss}");
    for ex in &batch {
        let p = model.predict_next_item(&params, &ex.history, &[], 1).unwrap();
        assert_eq!(p.items, [ex.label]);
        assert!(!p.cold);
    }
}

#[test]
fn ranking_ignores_a_common_logit_shift() {
    let (model, mut params) = FineTuneModel::new(small_config(4, 4), graph_table(4), Template::default(), None).unwrap();
    let a = model.predict_next_item(&params, &[3, 9], &[1, 5], 40).unwrap();
    let shifted = params.value(model.head_b).map(|v| v + 7.5);
    params.set_value(model.head_b, shifted).unwrap();
    let b = model.predict_next_item(&params, &[3, 9], &[1, 5], 40).unwrap();
    assert_eq!(a.items, b.items);
    assert_eq!(a.items.len(), 38);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn cold_users_fall_back_to_head_bias() {
    let (model, mut params) = FineTuneModel::new(small_config(4, 5), graph_table(5), Template::default(), None).unwrap();
    let bias = DenseMat::from_fn(1, 40, |_, c| if c == 17 { 2.0 } else if c == 3 { 1.0 } else { 0.0 });
    params.set_value(model.head_b, bias).unwrap();
    let p = model.predict_next_item(&params, &[], &[], 3).unwrap();
    assert!(p.cold);
    assert_eq!(p.items, [17, 3, 0]);
}

#[test]
fn injection_is_the_only_personalization_path() {
    let (model, mut params) = FineTuneModel::new(small_config(0, 6), graph_table(6), Template::default(), None).unwrap();
    for id in [model.fusion.w2, model.fusion.b2] {
        let (r, c) = params.value(id).shape();
        params.set_value(id, DenseMat::zeros(r, c)).unwrap();
    }
    let (a, _) = model.logits(&params, &[1, 2, 3]).unwrap();
    let (b, _) = model.logits(&params, &[30, 12, 7]).unwrap();
    assert_eq!(a, b);
    let (c, _) = model.logits(&params, &[30, 12]).unwrap();
    assert_ne!(a, c);
}

#[test]
fn examples_follow_training_sequences() {
    let (split, _) = toy(15);
    let ex = finetune_examples(&split, 20);
    let expected: usize = split.train_sequences().iter().map(|s| s.len().saturating_sub(1)).sum();
    assert_eq!(ex.len(), expected);
    let seqs = split.train_sequences();
    for e in &ex {
        let s = &seqs[e.user];
        let t = e.history.len();
        assert_eq!(&s[..t], e.history.as_slice());
        assert_eq!(s[t], e.label);
    }
}

#[test]
fn finetune_loop_reduces_training_loss() {
    let config = FineTuneConfig {
        epochs: 6,
        lr: 3e-3,
        ..small_config(4, 7)
    };
    let (model, mut params) = FineTuneModel::new(config, graph_table(7), Template::default(), None).unwrap();
    let examples: Vec<Example> = (0..14)
        .map(|u| Example {
            user: u,
            history: vec![u % 40, (u + 1) % 40],
            label: (u + 2) % 40,
        })
        .collect();
    let out = train_finetune(&model, &mut params, &examples).unwrap();
    assert_eq!(out.epoch_losses.len(), 6);
    assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    assert_eq!(out.adam.steps_taken(), 12);
}

#[test]
fn frozen_sequence_items_are_not_trainable() {
    let table = random_mat(40, 64, &mut rng(8));
    let (free, p_free) = FineTuneModel::new(small_config(4, 8), graph_table(8), Template::default(), None).unwrap();
    let (frozen, p_frozen) =
        FineTuneModel::new(small_config(4, 8), graph_table(8), Template::default(), Some(table)).unwrap();
    assert_eq!(p_free.scalar_count() - p_frozen.scalar_count(), 40 * 64);
    assert!(p_frozen.id("seq.items").is_none());
    assert_eq!(frozen.frozen_param_count(), free.frozen_param_count() + 40 * 64);
    let _: &ParamSet = &p_free;
}
