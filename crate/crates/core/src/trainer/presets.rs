//! Default desk-scale experiment settings.

use super::data::{CopyData, DataConfig, MixtureData};
use super::model::{ModelConfig, Task};

/// Seeds used for multi-seed comparisons.
pub const SEEDS: [u64; 3] = [0, 3333, 5555];

pub const MIXTURE_CLASSES: usize = 10;
pub const MIXTURE_DIM: usize = 20;

/// 10-class Gaussian mixture, 20% training label noise. Hard enough that a
/// plain CE model overfits and ends up overconfident within 30 epochs.
pub fn mixture_data() -> DataConfig {
    DataConfig::GaussianMixture(MixtureData {
        dim: MIXTURE_DIM,
        train: 1000,
        validation: 500,
        test: 2000,
        separation: 0.5,
        label_noise: 0.2,
    })
}

pub fn mixture_model(seed: u64) -> ModelConfig {
    ModelConfig {
        task: Task::Classification,
        input_dim: MIXTURE_DIM,
        hidden: vec![128],
        classes: MIXTURE_CLASSES,
        seed,
    }
}

pub const COPY_SYMBOLS: usize = 12;

pub fn copy_data() -> DataConfig {
    DataConfig::CopySubstitution(CopyData {
        train: 400,
        validation: 100,
        test: 200,
        min_len: 4,
        max_len: 10,
        substitution_rate: 0.5,
        label_noise: 0.1,
    })
}

pub fn copy_model(seed: u64) -> ModelConfig {
    ModelConfig {
        task: Task::SeqTransduction,
        input_dim: 0,
        hidden: vec![32],
        classes: COPY_SYMBOLS,
        seed,
    }
}
