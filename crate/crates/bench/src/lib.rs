//! Shared fixtures for the benchmarks.

use advpose_core::synth::{generate_dataset, AnthropometricModel, Dataset, DomainSpec};
use ndarray::Array2;

pub fn lab_samples(n: usize) -> (AnthropometricModel, Dataset) {
    let model = AnthropometricModel::default_16();
    let data = generate_dataset(&DomainSpec::lab(), &model, n, 11).expect("default lab domain is valid");
    (model, data)
}

/// Stacks sample images row-wise into a batch.
pub fn image_batch(data: &Dataset) -> Array2<f64> {
    let width = data.samples[0].image.len();
    let flat: Vec<f64> = data.samples.iter().flat_map(|s| s.image_f64()).collect();
    Array2::from_shape_vec((data.len(), width), flat).expect("images share a size")
}
