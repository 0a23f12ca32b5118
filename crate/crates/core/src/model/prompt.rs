use nalgebra::DMatrix;

use super::ModelError;

/// Tunable prompt offsets handed to a forward pass.
///
/// The offsets are added to the model's initial prompt embeddings. `Input`
/// only touches the first layer and lets the prompt rows propagate through
/// the network; `Deep` overwrites the prompt rows before every layer.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptOffsets {
    None,
    Input(DMatrix<f64>),
    Deep(Vec<DMatrix<f64>>),
}

impl PromptOffsets {
    /// Builds offsets from flat row-major `n_p × H` slices.
    pub fn input_from_flat(values: &[f64], prompt_len: usize, hidden: usize) -> Result<Self, ModelError> {
        Ok(PromptOffsets::Input(flat_to_matrix(values, prompt_len, hidden)?))
    }

    pub fn deep_from_flat(layers: &[Vec<f64>], prompt_len: usize, hidden: usize) -> Result<Self, ModelError> {
        layers
            .iter()
            .map(|l| flat_to_matrix(l, prompt_len, hidden))
            .collect::<Result<Vec<_>, _>>()
            .map(PromptOffsets::Deep)
    }
}

pub(crate) fn flat_to_matrix(values: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>, ModelError> {
    if values.len() != rows * cols {
        return Err(ModelError::ShapeMismatch(format!(
            "prompt has {} values, expected {rows} x {cols}",
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, values))
}

/// Per-layer prompt offsets `p_j` together with the initial embeddings `p_j⁰`
/// they are added to.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepPrompt {
    pub initial: Vec<DMatrix<f64>>,
    pub offsets: Vec<DMatrix<f64>>,
    /// Vocabulary ids whose embeddings seeded the first layer.
    pub token_ids: Vec<u32>,
}

impl DeepPrompt {
    pub fn layers(&self) -> usize {
        self.initial.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.initial.first().map_or(0, |m| m.nrows())
    }

    /// `p_j + p_j⁰` for every layer.
    pub fn effective(&self) -> Vec<DMatrix<f64>> {
        self.initial.iter().zip(&self.offsets).map(|(a, b)| a + b).collect()
    }
}
