use dcq::config::{Method, RunConfig};
use dcq::Error;
use dcq::numerics::{Tape, Tensor};
use dcq::queue::{dcq_cosface_loss, dcq_logits_with_mask, ClassQueue, SENTINEL};
use dcq::baseline::fc_cosface_loss;
use dcq::synthdata::draw_instance;
use dcq::trainer::{lr_at_step, Checkpoint, HeadState, Trainer, CHECKPOINT_VERSION};

fn tiny(method: Method) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.method = method;
    c.train.batch_size = 8;
    c.train.queue_size = 16;
    c.train.epochs = 6;
    c.train.decay_epochs = vec![4];
    c.train.min_instances = 5;
    c.data.classes = 40;
    c.data.d_in = 8;
    c.data.zipf_exponent = 1.0;
    c.data.min_count = 2;
    c.data.max_count = 30;
    c.model.hidden = vec![16];
    c.model.embed_dim = 8;
    c.eval.interval = 2;
    c.eval.pairs = 100;
    c.eval.probes = 10;
    c.eval.distractors = 20;
    c
}

#[test]
fn identical_seeds_give_identical_metrics() {
    for m in [Method::Dcq, Method::CosfaceFull, Method::CosfaceHeadOnly] {
        let a = Trainer::from_config(&tiny(m)).unwrap().run().unwrap();
        let b = Trainer::from_config(&tiny(m)).unwrap().run().unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_eq!(a.len(), 6);
        assert!(a[1].ver_acc.is_finite() && a[0].ver_acc.is_nan());
    }
}

#[test]
fn well_separated_identities_are_learned() {
    let mut c = tiny(Method::Dcq);
    c.data.classes = 10;
    c.data.sigma = 0.01;
    c.data.zipf_exponent = 0.0;
    c.data.min_count = 20;
    c.data.max_count = 20;
    c.train.epochs = 20;
    c.train.decay_epochs = vec![15];
    c.eval.interval = 1;
    c.eval.probes = 10;
    c.eval.distractors = 10;
    let rows = Trainer::from_config(&c).unwrap().run().unwrap();
    let best = rows.iter().map(|r| r.ver_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "{rows:?}");
}

#[test]
fn queue_fills_and_positives_enter_one_step_later() {
    let c = tiny(Method::Dcq);
    let mut t = Trainer::from_config(&c).unwrap();
    let (k, b) = (c.train.queue_size, c.train.batch_size);
    let contains = |t: &Trainer, w: &Tensor| {
        let q = t.queue().unwrap();
        (0..w.rows()).all(|r| (0..k).any(|s| q.column(s) == w.row(r)))
    };
    for i in 0..k.div_ceil(b) + 3 {
        let before = t.queue().unwrap().clone();
        let rec = t.step(2e-4).unwrap();
        let w = rec.w_pos.unwrap();
        let was_present = (0..w.rows()).any(|r| (0..k).any(|s| before.column(s) == w.row(r)));
        assert!(!was_present, "step {i}");
        assert!(contains(&t, &w), "step {i}");
    }
    assert!(t.queue().unwrap().labels().iter().all(|&l| l != SENTINEL));
}

#[test]
fn optimizer_holds_state_for_the_extractor_only() {
    let t = Trainer::from_config(&tiny(Method::Dcq)).unwrap();
    let bufs = t.optimizer_buffers();
    let params = t.extractor().tensors();
    assert_eq!(bufs.len(), params.len());
    for (b, p) in bufs.iter().zip(params) {
        assert_eq!(b.shape(), p.shape());
    }
    let fc = Trainer::from_config(&tiny(Method::CosfaceFull)).unwrap();
    assert_eq!(fc.optimizer_buffers().len(), params_len(&fc) + 1);
}

fn params_len(t: &Trainer) -> usize {
    t.extractor().tensors().len()
}

#[test]
fn schedule_never_increases() {
    let c = RunConfig::default();
    let lrs: Vec<f64> = (0..c.train.epochs).map(|e| lr_at_step(&c.train, e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let mut t = c.train.clone();
    t.decay_epochs = vec![8, 16, 18];
    t.lr0 = Some(1.0);
    assert!((lr_at_step(&t, 17) - 0.01).abs() < 1e-15, "{}", lr_at_step(&t, 17));
    assert_eq!(lr_at_step(&t, 0), 1.0);
}

#[test]
fn checkpoint_roundtrip_and_resume() {
    for m in [Method::Dcq, Method::CosfaceFull, Method::CosfaceHeadOnly] {
        let c = tiny(m);
        let full = Trainer::from_config(&c).unwrap().run().unwrap();

        let mut first = Trainer::from_config(&c).unwrap();
        for _ in 0..3 {
            first.run_epoch().unwrap();
        }
        let ckpt = first.checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in back.arrays.iter().zip(&ckpt.arrays) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut resumed = Trainer::from_checkpoint(&back).unwrap();
        let rest = resumed.run().unwrap();
        assert_eq!(format!("{:?}", &full[3..]), format!("{rest:?}"));
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let mut t = Trainer::from_config(&tiny(Method::Dcq)).unwrap();
    t.run_epoch().unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Version { .. })));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.dcqc");
    t.checkpoint().save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap(), t.checkpoint());
}

/// Loss of a fixed batch (one query and one reference per identity) under the current
/// model state.
fn probe_loss(t: &Trainer) -> f64 {
    let c = t.config();
    let ids: Vec<usize> = (0..t.counts().len()).collect();
    let rows: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| draw_instance(t.universe(), t.counts(), i, 0).unwrap())
        .collect();
    let refs: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| draw_instance(t.universe(), t.counts(), i, 1).unwrap())
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&rows));
    let f = {
        let (f, _) = dcq::model::extract_features(t.extractor(), x, &mut tape).unwrap();
        f
    };
    match t.head() {
        HeadState::Queue { generator, .. } => {
            // every class present once so the probe does not depend on what
            // the training queue happens to hold
            let w = generator.generate_class_weights(&Tensor::from_rows(&refs)).unwrap();
            let mut queue = ClassQueue::new(ids.len(), w.cols()).unwrap();
            queue.enqueue(&w, &ids).unwrap();
            let lg = dcq_logits_with_mask(&mut tape, f, &w, &queue, &ids).unwrap();
            dcq_cosface_loss(&mut tape, lg.l_pos, lg.l_neg, c.train.scale(), c.train.margin())
                .unwrap()
                .1
                .loss
        }
        HeadState::Fc { head, .. } => {
            let w = tape.constant(head.weight.clone());
            fc_cosface_loss(&mut tape, f, w, &ids, c.train.scale(), c.train.margin())
                .unwrap()
                .diagnostics
                .loss
        }
    }
}

#[test]
fn separable_toy_loss_decreases() {
    for seed in 0..4u64 {
        for m in [Method::Dcq, Method::CosfaceFull] {
            let mut c = tiny(m);
            c.train.seed = seed;
            c.data.classes = 3;
            c.data.sigma = 0.0;
            c.data.zipf_exponent = 0.0;
            c.data.min_count = 20;
            c.data.max_count = 20;
            c.train.batch_size = 48;
            c.train.queue_size = 48;
            c.train.sgd_momentum = 0.0;
            c.train.weight_decay = 0.0;
            c.eval.interval = 0;
            let mut t = Trainer::from_config(&c).unwrap();
            let mut losses = Vec::new();
            for _ in 0..56 {
                t.step(2e-4).unwrap();
                losses.push(probe_loss(&t));
            }
            assert!(losses[5..].windows(2).all(|w| w[1] <= w[0]), "{m:?} seed {seed}: {losses:?}");
            assert!(losses[55] < losses[5]);
        }
    }
}
