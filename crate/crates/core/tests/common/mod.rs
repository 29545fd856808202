#![allow(dead_code)]

use instruct_forge::data::VOCAB_SIZE;
use instruct_forge::model::LanguageModel;
use instruct_forge::{Result, Tensor};

/// Every row is produced by `f(prefix_ids, position)`.
pub struct RowModel<F> {
    pub max_seq_len: usize,
    pub row: F,
}

impl<F: Fn(&[u32], usize) -> Vec<f32> + Sync> LanguageModel for RowModel<F> {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = (0..ids.len()).map(|t| (self.row)(&ids[..=t], t)).collect();
        Ok(Tensor::from_rows(&rows))
    }
}

pub fn uniform(max_seq_len: usize) -> impl LanguageModel {
    RowModel {
        max_seq_len,
        row: |_: &[u32], _| vec![0.0; VOCAB_SIZE],
    }
}

/// Puts `logit` on each listed token and 0 elsewhere.
pub fn favoring(tokens: Vec<(u32, f32)>, max_seq_len: usize) -> impl LanguageModel {
    RowModel {
        max_seq_len,
        row: move |_: &[u32], _| {
            let mut r = vec![0.0; VOCAB_SIZE];
            for &(t, l) in &tokens {
                r[t as usize] = l;
            }
            r
        },
    }
}
