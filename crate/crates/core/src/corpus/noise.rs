//! Label-noise injection for robustness studies.
//!
//! A fraction of training pairs has the response replaced by the response of
//! another uniformly chosen pair (histories untouched), simulating mismatched
//! labels without changing the corpus size or the input distribution.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Replace `round(fraction · len)` responses, chosen without replacement,
/// with the original response of a different uniformly chosen pair.
/// `fraction = 0` returns the corpus unchanged (bitwise).
pub fn inject_noise(corpus: &Corpus, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let m = corpus.len();
    let k = (fraction * m as f64).round() as usize;
    let mut noisy = corpus.clone();
    if k == 0 {
        return Ok(noisy);
    }
    if m < 2 {
        return Err(Error::config(
            "noise injection needs at least 2 pairs to donate responses",
        ));
    }
    let targets = rand::seq::index::sample(rng, m, k);
    for i in targets.iter() {
        // Donor drawn uniformly from the other m-1 pairs of the clean corpus.
        let mut j = rng.random_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        noisy.pairs[i].response = corpus.pairs[j].response.clone();
    }
    Ok(noisy)
}
