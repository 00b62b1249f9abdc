use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctfgan::config::RunConfig;
use ctfgan::ctf::extract_all_ctfs;
use ctfgan::nn::Mode;
use ctfgan::train::Models;
use ctfgan::Error;

fn models() -> (RunConfig, Models) {
    let config = RunConfig::from_toml("seed = 2\noutput_dir = \"unused\"\n").unwrap();
    let models = Models::new(&config).unwrap();
    (config, models)
}

fn lq(b: usize) -> Tensor {
    Tensor::zeros((b, 3, 8, 8), DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn initialisation_is_seeded() {
    let (config, a) = models();
    let b = Models::new(&config).unwrap();
    for ((n, x), (_, y)) in a.state_tensors().iter().zip(b.state_tensors()) {
        let (x, y) = (x.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(x, y, "{n}");
    }
    let mut other = config.clone();
    other.seed = 3;
    let c = Models::new(&other).unwrap();
    assert_ne!(
        a.state_tensors()[0].1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        c.state_tensors()[0].1.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn out_of_range_labels_are_reported() {
    let (_, m) = models();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noises = m.glh.sample_noises(&mut rng, 2).unwrap();
    let err = m.glh.forward(&lq(2), &[0, 5], &[0, 1], &noises, Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::LabelDomain { label: 5, size: 2, .. }), "{err}");
    let err = m.glh.forward(&lq(2), &[0, 1], &[0, 2], &noises, Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::LabelDomain { label: 2, .. }), "{err}");
}

#[test]
fn mismatched_inputs_are_contract_errors() {
    let (_, m) = models();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noises = m.glh.sample_noises(&mut rng, 2).unwrap();
    let small = Tensor::zeros((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(m.glh.forward(&small, &[0, 1], &[0, 1], &noises, Mode::Eval), Err(Error::Contract(_))));

    let (_, trace) = m.glh.forward(&lq(2), &[0, 1], &[0, 1], &noises, Mode::Eval).unwrap();
    let ctfs = extract_all_ctfs(&trace, &lq(2), &m.embedder.tables).unwrap();
    let z = m.ga.sample_noise(&mut rng, 2).unwrap();
    assert!(matches!(m.ga.forward(&z, &ctfs[..1], &[0, 1], Mode::Eval), Err(Error::Contract(_))));
    let mut swapped = ctfs.clone();
    swapped.swap(0, 1);
    assert!(matches!(m.ga.forward(&z, &swapped, &[0, 1], Mode::Eval), Err(Error::Contract(_))));
    assert!(matches!(extract_all_ctfs(&trace, &lq(2), &m.embedder.tables[..1]), Err(Error::Contract(_))));
}

#[test]
fn eval_mode_leaves_buffers_alone() {
    let (_, m) = models();
    let before: Vec<Vec<f32>> = m
        .glh
        .registry
        .buffers()
        .iter()
        .map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noises = m.glh.sample_noises(&mut rng, 2).unwrap();
    let x = Tensor::ones((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
    m.glh.forward(&x, &[0, 1], &[0, 1], &noises, Mode::Eval).unwrap();
    let after: Vec<Vec<f32>> = m
        .glh
        .registry
        .buffers()
        .iter()
        .map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect();
    assert_eq!(before, after);
    m.glh.forward(&x, &[0, 1], &[0, 1], &noises, Mode::Train).unwrap();
    let trained: Vec<Vec<f32>> = m
        .glh
        .registry
        .buffers()
        .iter()
        .map(|(_, v)| v.flatten_all().unwrap().to_vec1::<f32>().unwrap())
        .collect();
    assert_ne!(before, trained);
}

#[test]
fn discriminator_outputs_have_documented_shapes() {
    let (_, m) = models();
    let x = Tensor::zeros((3, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let out = m.disc.forward(&x, &[0, 1, 1], Mode::Eval).unwrap();
    assert_eq!(out.adv_score.dims(), [3]);
    assert_eq!(out.bbox_pred.dims(), [3, 4]);
    let boxes = out.bbox_pred.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(boxes.iter().all(|v| (0.0..=1.0).contains(v)));
    let sum = (&out.linear_term + &out.projection_term).unwrap();
    let diff = (sum - &out.adv_score).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff < 1e-6);
}
