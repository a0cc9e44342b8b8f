use std::f64::consts::PI;

use tubefield::diffnet::{init_params, NetworkConfig, NetworkParams};
use tubefield::physics::{AirProperties, DampingVariant, SourceWaveform, TubeGeometry};
use tubefield::training::{
    CollocationConfig, CollocationSets, LossContext, LossWeights, ObservationData, PhysicsSetup,
};

pub const F0: f64 = 261.6;

/// Small network on the default tube with sinusoidal observations.
pub struct Fixture {
    pub params: NetworkParams,
    pub geom: TubeGeometry,
    pub air: AirProperties,
    pub source: SourceWaveform,
    pub sets: CollocationSets,
    pub obs: ObservationData,
}

impl Fixture {
    pub fn new() -> Self {
        let period = 1.0 / F0;
        let cfg = NetworkConfig {
            n_f: 8,
            n_b: 1,
            fc_per_block: 2,
            ffe_size: 4,
            ffe_sigma: 1.0,
            xi: 0.1,
            period,
            seed: 4,
            ..Default::default()
        };
        let sets = CollocationSets::new(
            &CollocationConfig { n_pde: 64, n_bc: 16, n_pc: 8, n_obs: 32, sobol_skip: 1 },
            1.0,
            period,
        )
        .unwrap();
        let obs = ObservationData {
            times: sets.obs_times.clone(),
            pressures: sets.obs_times.iter().map(|t| 60.0 * (2.0 * PI * t / period).sin()).collect(),
            snr_db: f64::INFINITY,
            noise_seed: 0,
        };
        Self {
            params: init_params(&cfg).unwrap(),
            geom: TubeGeometry::uniform(1.0, 0.02).unwrap(),
            air: AirProperties::standard(2.0 * PI * F0),
            source: SourceWaveform::new(5e-4, period, 0.4, 0.16, period / 200.0).unwrap(),
            sets,
            obs,
        }
    }

    pub fn context(&self, radiation: bool) -> LossContext {
        let setup = PhysicsSetup {
            geometry: &self.geom,
            air: &self.air,
            source: &self.source,
            damping: DampingVariant::Consistent,
        };
        LossContext::new(&self.params, &self.sets, &setup, &self.obs, radiation).unwrap()
    }
}

/// Every term of order one for the fixture's field scales.
pub fn balanced_weights() -> LossWeights {
    LossWeights { pde: 1.0, bc: 2.5e7, obs: 2.8e-4, pc: 1.0, pc_u: 2.5e7, pc_p: 2.8e-4, pc_phi_tt: 6e-11, rad: 1e-10 }
}
