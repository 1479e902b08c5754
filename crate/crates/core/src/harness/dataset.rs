//! Synthetic paired data: a small clean ("curated") set, a large noisy
//! ("uncurated") set and a clean holdout.
//!
//! Every item has a concept id and a latent vector `z = center[concept] +
//! spread * noise`. Images observe `z` through a fixed projection sampled at
//! half the input resolution and upsampled by repeating each feature twice, so
//! averaging adjacent features loses little. Texts observe `z` through a
//! second projection. A misaligned pair gets a text drawn from an
//! independently chosen concept and latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trainer::PairInputs;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub latent_dim: usize,
    /// Must be even.
    pub input_dim: usize,
    pub n_concepts: usize,
    /// Fraction of misaligned pairs in the uncurated set.
    pub noise_rate: f64,
    pub curated_size: usize,
    pub uncurated_size: usize,
    pub holdout_size: usize,
    /// Within-concept standard deviation of the latent.
    pub concept_spread: f64,
    /// Observation noise added to every input feature.
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            latent_dim: 16,
            input_dim: 32,
            n_concepts: 64,
            noise_rate: 0.5,
            curated_size: 2000,
            uncurated_size: 20000,
            holdout_size: 500,
            concept_spread: 0.5,
            input_noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("input_dim", self.input_dim),
            ("n_concepts", self.n_concepts),
            ("curated_size", self.curated_size),
            ("uncurated_size", self.uncurated_size),
            ("holdout_size", self.holdout_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !self.input_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "input_dim must be even, got {}",
                self.input_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "noise_rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if !(self.concept_spread >= 0.0 && self.input_noise >= 0.0)
            || !self.concept_spread.is_finite()
            || !self.input_noise.is_finite()
        {
            return Err(Error::InvalidArgument(
                "concept_spread and input_noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A set of pairs with ground-truth concept ids per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub inputs: PairInputs,
    pub image_concepts: Vec<usize>,
    pub text_concepts: Vec<usize>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of pairs whose two sides share a concept.
    pub fn aligned_fraction(&self) -> f64 {
        let same = self
            .image_concepts
            .iter()
            .zip(&self.text_concepts)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.len().max(1) as f64
    }

    pub fn select(&self, rows: &[usize]) -> PairSet {
        PairSet {
            inputs: self.inputs.select(rows),
            image_concepts: rows.iter().map(|&r| self.image_concepts[r]).collect(),
            text_concepts: rows.iter().map(|&r| self.text_concepts[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub curated: PairSet,
    pub uncurated: PairSet,
    pub holdout: PairSet,
}

struct World {
    centers: Matrix,
    image_proj: Matrix,
    text_proj: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl World {
    fn new(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.latent_dim;
        let scale = 1.0 / (k as f64).sqrt();
        World {
            centers: Matrix::from_fn(spec.n_concepts, k, |_, _| gaussian(rng)),
            image_proj: Matrix::from_fn(k, spec.input_dim / 2, |_, _| scale * gaussian(rng)),
            text_proj: Matrix::from_fn(k, spec.input_dim, |_, _| scale * gaussian(rng)),
        }
    }

    fn latent(
        &self,
        spec: &SyntheticDatasetSpec,
        concept: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        self.centers
            .row(concept)
            .iter()
            .map(|&c| c + spec.concept_spread * gaussian(rng))
            .collect()
    }

    fn observe(proj: &Matrix, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; proj.cols()];
        for (zi, row) in z.iter().zip(0..proj.rows()) {
            for (o, &p) in out.iter_mut().zip(proj.row(row)) {
                *o += zi * p;
            }
        }
        out
    }

    fn image(&self, spec: &SyntheticDatasetSpec, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        Self::observe(&self.image_proj, z)
            .into_iter()
            .flat_map(|v| [v, v])
            .map(|v| v + spec.input_noise * gaussian(rng))
            .collect()
    }

    fn text(&self, spec: &SyntheticDatasetSpec, z: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        Self::observe(&self.text_proj, z)
            .into_iter()
            .map(|v| v + spec.input_noise * gaussian(rng))
            .collect()
    }

    fn pairs(
        &self,
        spec: &SyntheticDatasetSpec,
        n: usize,
        noise_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> PairSet {
        let mut image = Vec::with_capacity(n);
        let mut text = Vec::with_capacity(n);
        let mut image_concepts = Vec::with_capacity(n);
        let mut text_concepts = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..spec.n_concepts);
            let z = self.latent(spec, c, rng);
            image.push(self.image(spec, &z, rng));
            image_concepts.push(c);
            if rng.random::<f64>() < noise_rate {
                let c2 = rng.random_range(0..spec.n_concepts);
                let z2 = self.latent(spec, c2, rng);
                text.push(self.text(spec, &z2, rng));
                text_concepts.push(c2);
            } else {
                text.push(self.text(spec, &z, rng));
                text_concepts.push(c);
            }
        }
        PairSet {
            inputs: PairInputs {
                image: Matrix::from_rows(&image).expect("rectangular"),
                text: Matrix::from_rows(&text).expect("rectangular"),
            },
            image_concepts,
            text_concepts,
        }
    }
}

/// Generates the three splits. The same spec always yields the same data.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let curated = world.pairs(spec, spec.curated_size, 0.0, &mut rng);
    let uncurated = world.pairs(spec, spec.uncurated_size, spec.noise_rate, &mut rng);
    let holdout = world.pairs(spec, spec.holdout_size, 0.0, &mut rng);
    Ok(SyntheticDataset {
        curated,
        uncurated,
        holdout,
    })
}
