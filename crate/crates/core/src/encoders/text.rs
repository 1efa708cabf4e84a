use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::normal;

/// Fixed-width report embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

impl TextEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Frozen text encoder: random token table, mean pooling, then a fixed
/// `tanh` two-layer map. Nothing here is ever trained; every weight is a
/// function of the frozen seed.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    vocab: usize,
    token_dim: usize,
    hidden: usize,
    out_dim: usize,
    table: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl TextEncoder {
    pub fn new(vocab: usize, cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.frozen_seed);
        let (d, h, o) = (cfg.token_dim, cfg.text_hidden, cfg.text_dim);
        let table = normal(&mut rng, &[vocab, d], 1.0).into_data();
        // tokens are averaged, so scale the first layer to keep tanh out of saturation
        let w1 = normal(&mut rng, &[d, h], (2.0 / d as f64).sqrt()).into_data();
        let w2 = normal(&mut rng, &[h, o], (1.0 / h as f64).sqrt()).into_data();
        Self {
            vocab,
            token_dim: d,
            hidden: h,
            out_dim: o,
            table,
            w1,
            w2,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.out_dim
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        let d = self.token_dim;
        let mut mean = vec![0.0; d];
        for &t in tokens {
            if t as usize >= self.vocab {
                return Err(Error::OutOfVocabulary {
                    token: t,
                    vocab: self.vocab,
                });
            }
            let row = &self.table[t as usize * d..(t as usize + 1) * d];
            mean.iter_mut().zip(row).for_each(|(m, r)| *m += r);
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let s: f64 = (0..d).map(|i| mean[i] * self.w1[i * self.hidden + j]).sum();
                s.tanh()
            })
            .collect();
        let out = (0..self.out_dim)
            .map(|k| (0..self.hidden).map(|j| hidden[j] * self.w2[j * self.out_dim + k]).sum())
            .collect();
        Ok(TextEmbedding(out))
    }

    /// SHA-256 over every frozen weight.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in [&self.table, &self.w1, &self.w2] {
            for x in w.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = EncoderConfig::default();
        let a = TextEncoder::new(50, &cfg);
        let b = TextEncoder::new(50, &cfg);
        assert_eq!(a.encode(&[1, 2, 3]).unwrap(), b.encode(&[1, 2, 3]).unwrap());
        assert_eq!(a.hash(), b.hash());
        let other = TextEncoder::new(50, &EncoderConfig { frozen_seed: 99, ..cfg });
        assert_ne!(a.hash(), other.hash());
    }

    #[test]
    fn permutation_invariant() {
        let enc = TextEncoder::new(50, &EncoderConfig::default());
        let a = enc.encode(&[4, 9, 17, 3]).unwrap();
        let b = enc.encode(&[17, 3, 9, 4]).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_oov_and_empty() {
        let enc = TextEncoder::new(10, &EncoderConfig::default());
        assert!(matches!(enc.encode(&[1, 10]), Err(Error::OutOfVocabulary { token: 10, vocab: 10 })));
        assert!(matches!(enc.encode(&[]), Err(Error::EmptyTokens)));
    }

    #[test]
    fn disjoint_token_sets_nearly_orthogonal() {
        // Monte Carlo over frozen seeds.
        let mut total = 0.0;
        let runs = 1000;
        for seed in 0..runs {
            let cfg = EncoderConfig { frozen_seed: seed, ..EncoderConfig::default() };
            let enc = TextEncoder::new(12, &cfg);
            let a = enc.encode(&[0, 1, 2, 3, 4]).unwrap();
            let b = enc.encode(&[6, 7, 8, 9, 10]).unwrap();
            total += cos(&a.0, &b.0).abs();
        }
        let mean = total / runs as f64;
        assert!(mean < 0.1, "mean |cos| = {mean}");
    }
}
