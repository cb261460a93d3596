//! Synthetic desk-scale tasks.
//!
//! * Gaussian mixture: one isotropic blob per class; label noise is applied to
//!   the training split only.
//! * Copy with substitution: token sequences where the output at step `t` is
//!   the input at step `t - 1` passed through a fixed substitution table
//!   (step 0 emits the start symbol `0`). The one-step delay forces the model
//!   to carry state.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Features(Vec<f32>),
    Tokens(Vec<usize>),
}

/// One example with a target class per output position (one position for
/// classification).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Input,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.examples.iter().map(|e| e.targets.len()).sum()
    }

    /// Every target in order, flattened over positions.
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().flat_map(|e| e.targets.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureData {
    pub dim: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Standard deviation of the class centres; within-class noise is 1.
    pub separation: f64,
    pub label_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyData {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of the non-start symbols remapped by the table.
    pub substitution_rate: f64,
    pub label_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum DataConfig {
    GaussianMixture(MixtureData),
    CopySubstitution(CopyData),
}

impl DataConfig {
    /// The `task` tag as written in config files.
    pub fn task_name(&self) -> &'static str {
        match self {
            DataConfig::GaussianMixture(_) => "gaussian_mixture",
            DataConfig::CopySubstitution(_) => "copy_substitution",
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("data.{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_sizes(train: usize, validation: usize, test: usize) -> Result<()> {
    if train == 0 || validation == 0 || test == 0 {
        return Err(Error::invalid("data.train, data.validation and data.test must be positive"));
    }
    Ok(())
}

impl DataConfig {
    pub fn generate(&self, classes: usize, seed: u64) -> Result<Splits> {
        if classes < 2 {
            return Err(Error::invalid("at least 2 classes are required"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(super::DATA_STREAM);
        match *self {
            DataConfig::GaussianMixture(MixtureData {
                dim,
                train,
                validation,
                test,
                separation,
                label_noise,
            }) => {
                check_sizes(train, validation, test)?;
                check_fraction("label_noise", label_noise)?;
                if dim == 0 || !(separation > 0.0) {
                    return Err(Error::invalid("data.dim and data.separation must be positive"));
                }
                let centres: Vec<Vec<f64>> = (0..classes)
                    .map(|_| {
                        (0..dim)
                            .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                let draw = |n: usize, noise: f64, rng: &mut ChaCha8Rng| -> Dataset {
                    let examples = (0..n)
                        .map(|i| {
                            let class = i % classes;
                            let x = centres[class]
                                .iter()
                                .map(|&c| (c + rng.sample::<f64, _>(StandardNormal)) as f32)
                                .collect();
                            let label = if rng.random::<f64>() < noise {
                                rng.random_range(0..classes)
                            } else {
                                class
                            };
                            Example {
                                input: Input::Features(x),
                                targets: vec![label],
                            }
                        })
                        .collect::<Vec<_>>();
                    Dataset { examples, classes }
                };
                let mut train = draw(train, label_noise, &mut rng);
                train.examples.shuffle(&mut rng);
                let validation = draw(validation, 0.0, &mut rng);
                let test = draw(test, 0.0, &mut rng);
                Ok(Splits { train, validation, test })
            }
            DataConfig::CopySubstitution(CopyData {
                train,
                validation,
                test,
                min_len,
                max_len,
                substitution_rate,
                label_noise,
            }) => {
                check_sizes(train, validation, test)?;
                check_fraction("label_noise", label_noise)?;
                check_fraction("substitution_rate", substitution_rate)?;
                if classes < 3 {
                    return Err(Error::invalid("the copy task needs at least 3 symbols"));
                }
                if min_len == 0 || max_len < min_len {
                    return Err(Error::invalid("data.min_len must be positive and at most data.max_len"));
                }
                let mut table: Vec<usize> = (0..classes).collect();
                let mut symbols: Vec<usize> = (1..classes).collect();
                symbols.shuffle(&mut rng);
                let remapped = ((classes - 1) as f64 * substitution_rate).round() as usize;
                let chosen = &symbols[..remapped];
                for (i, &s) in chosen.iter().enumerate() {
                    table[s] = chosen[(i + 1) % chosen.len()];
                }
                let draw = |n: usize, noise: f64, rng: &mut ChaCha8Rng| -> Dataset {
                    let examples = (0..n)
                        .map(|_| {
                            let len = rng.random_range(min_len..=max_len);
                            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
                            let targets = (0..len)
                                .map(|t| {
                                    let clean = if t == 0 { 0 } else { table[tokens[t - 1]] };
                                    if rng.random::<f64>() < noise {
                                        rng.random_range(0..classes)
                                    } else {
                                        clean
                                    }
                                })
                                .collect();
                            Example {
                                input: Input::Tokens(tokens),
                                targets,
                            }
                        })
                        .collect();
                    Dataset { examples, classes }
                };
                let train = draw(train, label_noise, &mut rng);
                let validation = draw(validation, 0.0, &mut rng);
                let test = draw(test, 0.0, &mut rng);
                Ok(Splits { train, validation, test })
            }
        }
    }
}
