//! Weight initialization families.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::batchnorm::BufferMode;
use crate::model::network::{ModelState, Network};
use crate::params::ParamVector;
use crate::rng;

/// Weight distribution, scaled per layer by its fan-in.
///
/// * `Uniform`: `U(−1/√fan_in, 1/√fan_in)`
/// * `Normal`: `N(0, 2/fan_in)`
/// * `TruncatedNormal`: the normal above, redrawn outside ±2 std
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    #[default]
    Uniform,
    Normal,
    TruncatedNormal,
}

impl InitScheme {
    fn fill<R: Rng>(self, out: &mut [f64], fan_in: usize, rng: &mut R) {
        let fan_in = fan_in.max(1) as f64;
        match self {
            InitScheme::Uniform => {
                let bound = 1.0 / fan_in.sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            InitScheme::Normal => {
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                out.iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            InitScheme::TruncatedNormal => {
                let std = (2.0 / fan_in).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                for v in out.iter_mut() {
                    *v = loop {
                        let s: f64 = dist.sample(rng);
                        if s.abs() <= 2.0 * std {
                            break s;
                        }
                    };
                }
            }
        }
    }
}

/// Fresh model state: weights drawn per `init`, biases and BN shifts zero,
/// BN scales one, buffers at mean 0 / variance 1.
pub fn build_model(net: &Network, init: InitScheme, seed: u64) -> Result<ModelState> {
    let mut params = ParamVector::zeros(net.layout().clone());
    let mut rng = rng::stream(seed, rng::Purpose::Init);
    for &(slot, fan_in) in net.weight_fan_in() {
        init.fill(params.slot_data_mut(slot), fan_in, &mut rng);
    }
    for &slot in net.gamma_slots() {
        params.slot_data_mut(slot).iter_mut().for_each(|v| *v = 1.0);
    }
    debug_assert!(net.bias_slots().iter().all(|&s| params.slot_data(s).iter().all(|v| *v == 0.0)));
    Ok(ModelState {
        params,
        norms: net.fresh_norms(),
        mode: BufferMode::WithBuffer,
    })
}
