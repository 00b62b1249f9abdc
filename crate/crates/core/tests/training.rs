use std::path::Path;

use ctfgan::config::{CtfMode, RunConfig};
use ctfgan::nn::Registry;
use ctfgan::train::{read_records, Record, ResumePolicy, RunOptions, TrainData, Trainer};
use ctfgan::Error;

fn tiny(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let text = format!(
        "seed = 4\noutput_dir = {:?}\n[data]\ntoy_per_class = 8\nholdout_fraction = 0.25\n\
         [train]\nbatch_size = 4\nd_steps_per_g_step = 1\nmonitor_every = 0\nmax_steps_phase1 = 2\n\
         max_steps_phase2 = 2\ncheckpoint_every = 0\n[eval]\nsamples = 8\nsplits = 2\nclassifier_steps = 3\n",
        dir.display().to_string()
    );
    let mut config = RunConfig::from_toml(&text).unwrap();
    edit(&mut config);
    config.validate().unwrap();
    config
}

fn trainer(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> Trainer {
    let config = tiny(dir, edit);
    let data = TrainData::load(&config).unwrap();
    Trainer::new(config, data).unwrap()
}

fn same(_: &mut RunConfig) {}

fn snapshot(reg: &Registry) -> Vec<(String, Vec<u32>)> {
    reg.entries()
        .iter()
        .map(|e| {
            let bits = e.var.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            (e.name.clone(), bits)
        })
        .collect()
}

fn trainable_snapshot(reg: &Registry) -> Vec<(String, Vec<u32>)> {
    let names: Vec<String> = reg.trainable().into_iter().map(|(n, _)| n).collect();
    snapshot(reg).into_iter().filter(|(n, _)| names.contains(n)).collect()
}

fn changed(a: &[(String, Vec<u32>)], b: &[(String, Vec<u32>)]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x.1 != y.1).count()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), |c| {
        c.train.lr_g = 0.0;
        c.train.lr_d = 0.0;
    });
    let (d, g) = (trainable_snapshot(&t.models.disc.registry), trainable_snapshot(&t.models.glh.registry));
    t.phase1_step().unwrap();
    assert_eq!(d, trainable_snapshot(&t.models.disc.registry));
    assert_eq!(g, trainable_snapshot(&t.models.glh.registry));
}

#[test]
fn one_step_moves_the_discriminator_and_transfer_generator() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    let (d, g) = (trainable_snapshot(&t.models.disc.registry), trainable_snapshot(&t.models.glh.registry));
    let ga = snapshot(&t.models.ga.registry);
    let rec = t.phase1_step().unwrap();
    assert!(rec.is_finite());
    assert!(changed(&d, &trainable_snapshot(&t.models.disc.registry)) > 0);
    assert!(changed(&g, &trainable_snapshot(&t.models.glh.registry)) > 0);
    assert_eq!(ga, snapshot(&t.models.ga.registry), "phase 1 must not touch the synthesis generator");
}

#[test]
fn discriminator_updates_are_counted_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), |c| c.train.d_steps_per_g_step = 5);
    let rec = t.phase1_step().unwrap();
    assert_eq!(rec.d_updates, 5);
    assert_eq!(t.optimizer_steps(), [5, 1, 0]);
    t.phase1_step().unwrap();
    t.phase1_step().unwrap();
    assert_eq!(t.optimizer_steps(), [15, 3, 0]);
    t.state.phase = 2;
    t.phase2_step().unwrap();
    assert_eq!(t.optimizer_steps(), [20, 3, 1]);
}

#[test]
fn frozen_transfer_generator_is_untouched_by_phase_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    t.state.phase = 2;
    let glh = snapshot(&t.models.glh.registry);
    let ga = snapshot(&t.models.ga.registry);
    let embed = snapshot(&t.models.embedder.registry);
    for _ in 0..10 {
        t.phase2_step().unwrap();
    }
    assert_eq!(glh, snapshot(&t.models.glh.registry));
    assert!(changed(&ga, &snapshot(&t.models.ga.registry)) > 0);
    assert!(changed(&embed, &snapshot(&t.models.embedder.registry)) > 0);
}

#[test]
fn unfrozen_transfer_generator_is_fine_tuned() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), |c| c.train.freeze_glh = false);
    t.state.phase = 2;
    let glh = trainable_snapshot(&t.models.glh.registry);
    t.phase2_step().unwrap();
    assert!(changed(&glh, &trainable_snapshot(&t.models.glh.registry)) > 0);
}

#[test]
fn steps_are_rejected_outside_their_phase() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    assert!(matches!(t.phase2_step(), Err(Error::Contract(_))));
    t.state.phase = 2;
    assert!(matches!(t.phase1_step(), Err(Error::Contract(_))));
}

#[test]
fn zero_mode_features_keep_their_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(dir.path(), same);
    let idx = [0, 1, 2];
    let lq = t.data.lq.tensor(&idx).unwrap();
    let labels = t.data.lq.labels_of(&idx);
    let mut rng = ctfgan::train::rng_stream(0, 9);
    let noises = t.models.glh.sample_noises(&mut rng, 3).unwrap();
    let run = |mode| {
        t.models
            .ctfs(&lq, &labels, &[0, 1, 0], &noises, ctfgan::nn::Mode::Eval, false, mode)
            .unwrap()
    };
    let (full, zero) = (run(CtfMode::Full), run(CtfMode::Zero));
    assert_eq!(full.len(), zero.len());
    for (f, z) in full.iter().zip(&zero) {
        assert_eq!(f.tensor.dims(), z.tensor.dims());
        assert_eq!(z.tensor.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(f.tensor.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
    }
}

#[test]
fn resume_policies_check_what_they_promise() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    let summary = t.run(RunOptions { stop_after: Some(1), final_eval: false }).unwrap();
    let ckpt = summary.last_checkpoint.unwrap();
    let data = t.data.clone();

    let changed_schedule = tiny(dir.path(), |c| c.train.max_steps_phase2 = 7);
    assert!(matches!(
        Trainer::resume(changed_schedule.clone(), data.clone(), &ckpt, ResumePolicy::Exact),
        Err(Error::Config(_))
    ));
    let forked = Trainer::resume(changed_schedule, data.clone(), &ckpt, ResumePolicy::Fork).unwrap();
    assert_eq!(forked.state.global_step, 1);

    let wider = tiny(dir.path(), |c| c.model.embed_dim = 3);
    assert!(matches!(
        Trainer::resume(wider, data.clone(), &ckpt, ResumePolicy::Fork),
        Err(Error::Config(_))
    ));

    // a copied run directory still resumes exactly
    let elsewhere = tiny(&dir.path().join("copy"), same);
    let resumed = Trainer::resume(elsewhere, data, &ckpt, ResumePolicy::Exact).unwrap();
    assert_eq!(resumed.state.global_step, 1);
}

#[test]
fn non_finite_loss_aborts_with_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    // relu maps NaN to 0, so poison the score head rather than an early layer
    let (_, w) = t
        .models
        .disc
        .registry
        .trainable()
        .into_iter()
        .find(|(n, _)| n.contains("adv_head"))
        .unwrap();
    w.set(&w.ones_like().unwrap().affine(f64::NAN, 0.0).unwrap()).unwrap();
    let err = t.run(RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { phase: 1, step: 1, .. }), "{err}");
    let records = read_records(&dir.path().join("metrics.ndjson")).unwrap();
    assert!(matches!(records.last(), Some(Record::Abort { phase: 1, step: 1, .. })));
}

#[test]
fn run_writes_boundary_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), same);
    let s = t.run(RunOptions::default()).unwrap();
    assert!(s.completed);
    assert_eq!((s.global_step, s.phase1_steps), (4, 2));
    let names: Vec<String> = t.state.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["ckpt-000000-p1.safetensors", "ckpt-000002-p2.safetensors", "ckpt-000004-p2.safetensors"]);
    let report = s.report.unwrap();
    assert_eq!((report.phase, report.step, report.n_samples), (2, 4, 8));
    let switch = read_records(&dir.path().join("metrics.ndjson"))
        .unwrap()
        .into_iter()
        .find_map(|r| match r {
            Record::PhaseSwitch { step, reason } => Some((step, reason)),
            _ => None,
        });
    assert_eq!(switch, Some((2, "max_steps".to_string())));
}
