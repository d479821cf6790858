//! Shared fixtures for the benchmarks.

use modaltune_core::adapter::{AdapterConfig, AdapterState};
use modaltune_core::data::block_pathway_map;
use modaltune_core::encoder::{EncoderConfig, FeatureBag, SlideEncoder};
use modaltune_core::eval::SurvivalData;
use modaltune_core::modal::{ModalConfig, ModalInputs};
use modaltune_core::numerics::rng::seeded;
use modaltune_core::Tensor2D;
use rand::Rng;

pub struct Model {
    pub encoder: SlideEncoder<f32>,
    pub adapter: AdapterState<f32>,
    pub bag: FeatureBag,
    pub inputs: ModalInputs,
}

/// Desk-sized frozen encoder, adapter and one patient with `n_patches`.
pub fn desk_model(n_patches: usize) -> Model {
    let enc_cfg = EncoderConfig::desk();
    let encoder = SlideEncoder::init_frozen(&enc_cfg, 1).expect("desk encoder");
    let map = block_pathway_map(200, 20).expect("pathway map");
    let adapter = AdapterState::new(&enc_cfg, &ModalConfig::desk(), map, &AdapterConfig::desk(), 2).expect("adapter");
    let mut rng = seeded(3, "bench");
    let t = Tensor2D::from_fn(n_patches, enc_cfg.d_img, |_, _| rng.random_range(-1.0f32..1.0));
    let bag = FeatureBag::new("bench", t).expect("bag");
    let inputs = ModalInputs {
        expression: (0..200).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        clinical: None,
    };
    Model {
        encoder,
        adapter,
        bag,
        inputs,
    }
}

/// Random covariates and censored survival for `n` patients.
pub fn survival_problem(n: usize, p: usize) -> (Vec<Vec<f64>>, SurvivalData) {
    let mut rng = seeded(4, "bench-survival");
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let durations = x
        .iter()
        .map(|r| (rng.random_range(0.0f64..1.0).ln().abs() * (-r[0]).exp() * 30.0).max(0.01))
        .collect();
    let events = (0..n).map(|_| rng.random_bool(0.6)).collect();
    (x, SurvivalData::new(durations, events).expect("survival"))
}
