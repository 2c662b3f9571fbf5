use alignseg::checkpoint::Checkpoint;
use alignseg::config::RunConfig;
use alignseg::data::{Dataset, SceneSpec};
use alignseg::eval::{argmax, evaluate, logits, predict_probs};
use alignseg::metrics::{boundary_counts, Confusion, BOUNDARY_TOLERANCE};
use alignseg::train::{poly_lr, MemoryLog, Observer, RunDir, TrainConfig, Trainer, LOG_HEADER};
use alignseg::Tensor4;
use proptest::prelude::*;

const TINY: &str = "
stem_channels = 8
block_channels = 8,8,8,12
pathway_width = 8
rcb_inner = 4
offset_head_width = 8
head_width = 8
batch_size = 2
max_iter = 6
crop = 32x32
lr0 = 0.05
eval_every = 3
";

fn data() -> Dataset {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    };
    Dataset::synthetic(&spec, 5, 6, 2).unwrap()
}

fn config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{TINY}\n{extra}")).unwrap()
}

fn train_to_end(cfg: RunConfig, ds: &Dataset) -> (Trainer, Vec<String>) {
    let mut t = Trainer::new(cfg, &ds.train).unwrap();
    let mut log = MemoryLog::default();
    t.run(&ds.train, &ds.val, None, &mut log).unwrap();
    (t, log.rows.iter().map(|r| r.to_csv()).collect())
}

fn ckpt_bytes(t: &Trainer) -> Vec<u8> {
    t.checkpoint().to_bytes().unwrap()
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let ds = data();
    for extra in ["aggregation = alignfa\ncontext = aligncm", "aggregation = deconv\ncontext = pool\nohem = true"] {
        let (a, la) = train_to_end(config(extra), &ds);
        let (b, lb) = train_to_end(config(extra), &ds);
        assert_eq!(la, lb);
        assert_eq!(ckpt_bytes(&a), ckpt_bytes(&b));
        let (c, _) = train_to_end(config(&format!("{extra}\nseed = 1")), &ds);
        assert_ne!(ckpt_bytes(&a), ckpt_bytes(&c));
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ds = data();
    let cfg = config("aggregation = alignfa\ncontext = aligncm\nclass_balanced = true");
    let (full, full_log) = train_to_end(cfg.clone(), &ds);
    for stop in [1, 3, 5] {
        let mut first = Trainer::new(cfg.clone(), &ds.train).unwrap();
        let mut log = MemoryLog::default();
        first.run(&ds.train, &ds.val, Some(stop), &mut log).unwrap();
        assert_eq!(first.iter, stop);
        let bytes = ckpt_bytes(&first);
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(restored.to_bytes().unwrap(), bytes);
        let mut second = Trainer::from_checkpoint(&restored, &ds.train).unwrap();
        assert_eq!(ckpt_bytes(&second), bytes);
        second.run(&ds.train, &ds.val, None, &mut log).unwrap();
        let rows: Vec<String> = log.rows.iter().map(|r| r.to_csv()).collect();
        assert_eq!(rows, full_log, "stopped at {stop}");
        assert_eq!(ckpt_bytes(&second), ckpt_bytes(&full), "stopped at {stop}");
    }
}

#[test]
fn run_directory_resume_rewrites_the_log() {
    let ds = data();
    let cfg = config("checkpoint_every = 2");
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::create(dir.path(), &cfg).unwrap();
    let mut t = Trainer::new(cfg.clone(), &ds.train).unwrap();
    t.run(&ds.train, &ds.val, Some(3), &mut run).unwrap();
    drop(run);
    // The newest checkpoint is at iteration 2; iteration 2's row is replayed.
    let ckpt = Checkpoint::load(&dir.path().join(RunDir::LAST)).unwrap();
    assert_eq!(ckpt.iteration, 2);
    let mut t = Trainer::from_checkpoint(&ckpt, &ds.train).unwrap();
    let mut run = RunDir::reopen(dir.path(), t.iter).unwrap();
    t.run(&ds.train, &ds.val, None, &mut run).unwrap();
    let log = std::fs::read_to_string(dir.path().join(RunDir::LOG)).unwrap();

    let (_, rows) = train_to_end(cfg.clone(), &ds);
    let want = std::iter::once(LOG_HEADER.to_string()).chain(rows).collect::<Vec<_>>().join("\n") + "\n";
    assert_eq!(log, want);
    let evals: Vec<&str> = log.lines().skip(1).filter(|l| !l.ends_with(',')).collect();
    assert_eq!(evals.len(), 2, "{log}");

    let resolved = RunConfig::load(&dir.path().join(RunDir::CONFIG)).unwrap();
    assert_eq!(resolved, cfg);
    assert!(dir.path().join("ckpt_000006.bin").exists());
}

#[test]
fn ohem_with_unit_threshold_trains_identically_to_plain_ce() {
    let ds = data();
    let (_, plain) = train_to_end(config(""), &ds);
    let (_, ohem) = train_to_end(config("ohem = true\nohem_thresh = 1.0"), &ds);
    assert_eq!(plain, ohem);
}

#[test]
fn single_scale_evaluation_is_the_plain_forward_pass() {
    let ds = data();
    let (t, _) = train_to_end(config("aggregation = alignfa\ncontext = aligncm"), &ds);
    let m = evaluate(&t.net, &ds.val, &[1.0], false).unwrap();
    let mut net = t.net.clone();
    let mut confusion = Confusion::new(6);
    let mut boundary = alignseg::metrics::BoundaryCounts::default();
    for s in &ds.val {
        let z = logits(&mut net, &s.image).unwrap();
        let pred = argmax(&z);
        confusion.add(&pred, &s.labels.data);
        boundary.merge(&boundary_counts(&pred, &s.labels.data, 32, 32, BOUNDARY_TOLERANCE));
        let probs = predict_probs(&mut net, &s.image, &[1.0], false).unwrap();
        assert_eq!(argmax(&probs), pred);
    }
    assert_eq!(m.confusion, confusion);
    assert_eq!(m.boundary, boundary);
    let ms = evaluate(&t.net, &ds.val, &[0.75, 1.0, 1.25], true).unwrap();
    assert_eq!(ms.confusion.total(), m.confusion.total());
}

#[test]
fn multi_scale_probabilities_are_distributions() {
    let ds = data();
    let t = Trainer::new(config(""), &ds.train).unwrap();
    let mut net = t.net.clone();
    let p = predict_probs(&mut net, &ds.val[0].image, &[0.75, 1.25, 1.75], true).unwrap();
    assert_eq!(p.dims(), [1, 6, 32, 32]);
    for px in 0..32 * 32 {
        let s: f32 = (0..6).map(|c| p.data()[c * 1024 + px]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn config_rejects_unknown_keys_and_roundtrips() {
    let err = RunConfig::parse("learning_rate = 0.1").unwrap_err().to_string();
    assert!(err.contains("learning_rate") && err.contains("lr0"), "{err}");
    let cfg = config("aggregation = deconv\ncontext = pool\nbin_size = 6\nohem = true\nscale_min = 0.5");
    assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    assert!(RunConfig::parse("crop = 0x32").and_then(|c| c.validate()).is_err());
}

#[test]
fn observer_sees_every_checkpoint() {
    struct Count(usize);
    impl Observer for Count {
        fn checkpoint(&mut self, _: &Trainer) -> alignseg::Result<()> {
            self.0 += 1;
            Ok(())
        }
    }
    let ds = data();
    let mut t = Trainer::new(config("checkpoint_every = 2"), &ds.train).unwrap();
    let mut c = Count(0);
    t.run(&ds.train, &[], None, &mut c).unwrap();
    assert_eq!(c.0, 3);
}

#[test]
fn poly_lr_by_hand() {
    let cfg = TrainConfig {
        lr0: 0.1,
        power: 2.0,
        max_iter: 10,
        ..TrainConfig::default()
    };
    assert!((poly_lr(&cfg, 5).unwrap() - 0.025).abs() < 1e-15);
    assert!((poly_lr(&cfg, 9).unwrap() - 0.001).abs() < 1e-15);
}

#[test]
fn tensor_stack_keeps_sample_order() {
    let a = Tensor4::<f32>::full([1, 1, 1, 2], 1.0);
    let b = Tensor4::<f32>::full([1, 1, 1, 2], 2.0);
    assert_eq!(Tensor4::stack(&[a, b]).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
}

proptest! {
    #[test]
    fn poly_lr_is_non_increasing(lr0 in 1e-5f64..1.0, power in 0.1f64..3.0, max_iter in 1usize..5000) {
        let cfg = TrainConfig { lr0, power, max_iter, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        let step = (max_iter / 200).max(1);
        for it in (0..=max_iter).step_by(step).chain([max_iter]) {
            let lr = poly_lr(&cfg, it).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(&cfg, 0).unwrap(), lr0);
        prop_assert_eq!(poly_lr(&cfg, max_iter).unwrap(), 0.0);
    }
}
