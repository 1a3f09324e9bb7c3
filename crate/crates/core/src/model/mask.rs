use rand::Rng;

use crate::tokenizer::{Vocab, MASK, SPECIALS};

pub const MASK_RATE: f64 = 0.15;

/// Selects each non-special position with probability 15% (at least one
/// when any is eligible). Selected positions become [MASK] 80% of the time,
/// a random non-special id 10%, and stay unchanged 10%.
pub fn mask_for_mlm<R: Rng>(ids: &[u32], vocab_size: usize, rng: &mut R) -> (Vec<u32>, Vec<bool>) {
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    let mut predict = vec![false; ids.len()];
    for &i in &eligible {
        predict[i] = rng.gen_bool(MASK_RATE);
    }
    if !eligible.is_empty() && !predict.iter().any(|&p| p) {
        predict[eligible[rng.gen_range(0..eligible.len())]] = true;
    }
    let first = SPECIALS.len() as u32;
    let mut out = ids.to_vec();
    for i in 0..ids.len() {
        if !predict[i] {
            continue;
        }
        let r: f64 = rng.gen();
        if r < 0.8 {
            out[i] = MASK;
        } else if r < 0.9 && vocab_size as u32 > first {
            out[i] = rng.gen_range(first..vocab_size as u32);
        }
    }
    (out, predict)
}
