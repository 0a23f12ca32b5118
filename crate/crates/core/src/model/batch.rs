use super::{Example, ModelError, MASK_ID, PAD_ID};

/// A right-padded batch of token sequences with one mask position each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub seq_len: usize,
    /// Row-major `len() × seq_len` token ids.
    pub input_ids: Vec<u32>,
    /// Row-major `len() × seq_len`; padded positions are `false`.
    pub attention_mask: Vec<bool>,
    pub mask_positions: Vec<usize>,
    /// Number of label words whose logits are returned.
    pub num_labels: usize,
}

impl Batch {
    /// Pads the examples to a common length and locates their mask tokens.
    pub fn from_examples(examples: &[Example], num_labels: usize) -> Result<Self, ModelError> {
        let seq_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut input_ids = Vec::with_capacity(examples.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(examples.len() * seq_len);
        let mut mask_positions = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let pos = ex
                .tokens
                .iter()
                .position(|&t| t == MASK_ID)
                .ok_or(ModelError::InvalidMaskPosition {
                    example: i,
                    position: usize::MAX,
                })?;
            mask_positions.push(pos);
            input_ids.extend_from_slice(&ex.tokens);
            input_ids.extend(std::iter::repeat_n(PAD_ID, seq_len - ex.tokens.len()));
            attention_mask.extend(std::iter::repeat_n(true, ex.tokens.len()));
            attention_mask.extend(std::iter::repeat_n(false, seq_len - ex.tokens.len()));
        }
        Ok(Self {
            seq_len,
            input_ids,
            attention_mask,
            mask_positions,
            num_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.mask_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.input_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn mask_row(&self, i: usize) -> &[bool] {
        &self.attention_mask[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Checks internal consistency and that ids fit the vocabulary.
    pub fn validate(&self, vocab: usize) -> Result<(), ModelError> {
        let n = self.len();
        if self.input_ids.len() != n * self.seq_len || self.attention_mask.len() != n * self.seq_len {
            return Err(ModelError::ShapeMismatch(format!(
                "batch of {n} x {} has {} ids and {} mask entries",
                self.seq_len,
                self.input_ids.len(),
                self.attention_mask.len()
            )));
        }
        if let Some(&id) = self.input_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(ModelError::UnknownToken { id, vocab });
        }
        for (example, &position) in self.mask_positions.iter().enumerate() {
            if position >= self.seq_len || !self.attention_mask[example * self.seq_len + position] {
                return Err(ModelError::InvalidMaskPosition { example, position });
            }
        }
        Ok(())
    }
}
