//! Named training conditions.

use aqnet::sampler::TupleMode;
use aqnet::trainer::TrainConfig;

#[derive(Debug, Clone, Copy)]
pub struct RunPreset {
    pub name: &'static str,
    pub description: &'static str,
    pub mode: TupleMode,
    pub total_epochs: usize,
    pub anomaly_start_epoch: usize,
    pub embed_dim: usize,
    pub k: usize,
    pub learning_rate: f64,
}

const fn preset(
    name: &'static str,
    description: &'static str,
    mode: TupleMode,
    total_epochs: usize,
    anomaly_start_epoch: usize,
    embed_dim: usize,
) -> RunPreset {
    RunPreset {
        name,
        description,
        mode,
        total_epochs,
        anomaly_start_epoch,
        embed_dim,
        k: 10,
        learning_rate: 1e-4,
    }
}

pub const PRESETS: &[RunPreset] = &[
    preset("triplet-cond1", "AnomalyTriplet condition 1: 100 epochs, anomaly from 50, D=128", TupleMode::Triplet, 100, 50, 128),
    preset("triplet-cond2", "AnomalyTriplet condition 2: 100 epochs, anomaly from 50, D=64", TupleMode::Triplet, 100, 50, 64),
    preset("triplet-cond3", "AnomalyTriplet condition 3: 200 epochs, anomaly from 100, D=32", TupleMode::Triplet, 200, 100, 32),
    preset("triplet-cond4", "AnomalyTriplet condition 4: 100 epochs, anomaly from 50, D=32", TupleMode::Triplet, 100, 50, 32),
    preset("triplet-cond5", "AnomalyTriplet condition 5: 200 epochs, anomaly from 50, D=32", TupleMode::Triplet, 200, 50, 32),
    preset("quadruplet-cond1", "AnomalyQuadruplet condition 1: 250 epochs, anomaly from 100, D=64", TupleMode::Quadruplet, 250, 100, 64),
    preset("desk-quadruplet", "Short desk-scale quadruplet run: 12 epochs, anomaly from 5, D=64", TupleMode::Quadruplet, 12, 5, 64),
    preset("desk-triplet", "Short desk-scale triplet run: 12 epochs, anomaly from 5, D=64", TupleMode::Triplet, 12, 5, 64),
];

pub fn find(name: &str) -> Option<&'static RunPreset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl RunPreset {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.mode = self.mode;
        cfg.total_epochs = self.total_epochs;
        cfg.anomaly_start_epoch = self.anomaly_start_epoch;
        cfg.arch.embed_dim = self.embed_dim;
        // triplet-cond1 runs at 128 dimensions, past the guard.
        cfg.arch.two_digit_guard = self.embed_dim < 100;
        cfg.k = self.k;
        cfg.learning_rate = self.learning_rate;
    }
}
