//! Hierarchical aggregation of multi-stage feature maps into one vector.
//!
//! Each stage map is pooled to a `G×G` grid and flattened so that every
//! channel becomes one token of width `G²`. A random subset of channels is
//! kept per stage, the survivors are concatenated across stages, a learned
//! [CLS] token is prepended, learned positional embeddings are added, and a
//! single transformer block runs over the sequence. The [CLS] output,
//! mapped to `d_m`, is the multi-level feature.

use imitate_autodiff::{Graph, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use crate::config::RunConfig;
use crate::encoders::STAGES;
use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, self_attention};
use crate::params::{he, normal, xavier, Bound, ParamStore};

/// Channels kept when dropping a fraction `ratio` of `channels`:
/// `max(1, floor((1 - ratio)·channels))`.
///
/// The keep fraction is resolved to nine decimal places before flooring so
/// that decimal ratios such as 0.9 floor exactly (`(1 - 0.9)·10` is
/// `0.999…` in binary floating point).
pub fn keep_count(channels: usize, ratio: f64) -> usize {
    const SCALE: u64 = 1_000_000_000;
    let keep_frac = ((1.0 - ratio) * SCALE as f64).round() as u64;
    let k = (channels as u64 * keep_frac / SCALE) as usize;
    k.max(1)
}

/// Uniformly samples `keep_count(channels, ratio)` channel indices without
/// replacement, returned in ascending order.
pub fn drop_channels(channels: usize, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = keep_count(channels, ratio);
    if k >= channels {
        return (0..channels).collect();
    }
    let mut kept = index::sample(rng, channels, k).into_vec();
    kept.sort_unstable();
    kept
}

/// Retained channel indices for every stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMasks(pub Vec<Vec<usize>>);

impl DropMasks {
    pub fn sample(widths: &[usize], ratios: &[f64], rng: &mut impl Rng) -> Self {
        Self(widths.iter().zip(ratios).map(|(&c, &r)| drop_channels(c, r, rng)).collect())
    }

    /// Masks that keep every channel.
    pub fn keep_all(widths: &[usize]) -> Self {
        Self(widths.iter().map(|&c| (0..c).collect()).collect())
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }
}

/// Adaptive-average-pools `[N, C, h, w]` to `G×G` and flattens to `[N, C, G²]`.
///
/// Maps smaller than the grid are upsampled by the same adaptive binning
/// (each output cell averages the source cells it overlaps).
pub fn pool_flatten(g: &mut Graph, map: Var, grid: usize) -> Result<Var> {
    if grid == 0 {
        return Err(Error::Config("pooling grid must be positive".into()));
    }
    let s = g.shape(map).to_vec();
    let pooled = g.adaptive_avg_pool2d(map, grid, grid)?;
    Ok(g.reshape(pooled, &[s[0], s[1], grid * grid])?)
}

/// Single-map convenience form: `[C, h, w]` to `[C, G²]`.
pub fn pool_flatten_map(map: &Tensor, grid: usize) -> Result<Tensor> {
    let s = map.shape().to_vec();
    let mut g = Graph::new();
    let x = g.constant(map.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = pool_flatten(&mut g, x, grid)?;
    Ok(g.value(y).clone().reshape(&[s[0], grid * grid])?)
}

/// Output of one aggregation pass.
#[derive(Clone, Debug)]
pub struct Aggregated {
    /// `[N, d_m]`.
    pub z_vm: Var,
    /// Attention weights `[N·heads, L+1, L+1]`.
    pub attention: Var,
    /// Token sequence before [CLS] and positions, `[N, L, G²]`.
    pub tokens: Var,
    /// Stage index of every token in `tokens`.
    pub level_of_origin: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    grid: usize,
    heads: usize,
    ffn_hidden: usize,
    output_dim: usize,
    /// Maximum sequence length L_max (excluding [CLS]).
    capacity: usize,
}

impl Aggregator {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let a = &cfg.aggregator;
        Self {
            grid: a.grid,
            heads: a.heads,
            ffn_hidden: a.ffn_hidden,
            output_dim: a.output_dim,
            capacity: cfg.token_count(),
        }
    }

    pub fn token_dim(&self) -> usize {
        self.grid * self.grid
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.token_dim();
        store.insert("agg.cls", normal(rng, &[d], 0.02));
        store.insert("agg.pos", normal(rng, &[self.capacity + 1, d], 0.02));
        for name in ["q", "k", "v", "o"] {
            store.insert(format!("agg.attn.{name}.weight"), xavier(rng, d, d));
            if name != "k" {
                store.insert(format!("agg.attn.{name}.bias"), Tensor::zeros(&[d]));
            }
        }
        store.insert("agg.ln.gamma", Tensor::full(&[d], 1.0));
        store.insert("agg.ln.beta", Tensor::zeros(&[d]));
        store.insert("agg.ffn1.weight", he(rng, &[d, self.ffn_hidden], d));
        store.insert("agg.ffn1.bias", Tensor::zeros(&[self.ffn_hidden]));
        store.insert("agg.ffn2.weight", xavier(rng, self.ffn_hidden, d));
        store.insert("agg.ffn2.bias", Tensor::zeros(&[d]));
        store.insert("agg.out.weight", xavier(rng, d, self.output_dim));
        store.insert("agg.out.bias", Tensor::zeros(&[self.output_dim]));
    }

    /// Aggregates the four `[N, C_s, h_s, w_s]` stage maps into `z_v,m`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, stages: &[Var; STAGES], masks: &DropMasks) -> Result<Aggregated> {
        let count = masks.total();
        if count > self.capacity {
            return Err(Error::TooManyTokens {
                count,
                capacity: self.capacity,
            });
        }
        let d = self.token_dim();
        let mut parts = Vec::with_capacity(STAGES);
        let mut level_of_origin = Vec::with_capacity(count);
        for (s, (&map, kept)) in stages.iter().zip(&masks.0).enumerate() {
            let tokens = pool_flatten(g, map, self.grid)?;
            parts.push(g.index_select(tokens, 1, kept)?);
            level_of_origin.extend(std::iter::repeat(s).take(kept.len()));
        }
        let tokens = g.concat(&parts, 1)?;
        let n = g.shape(tokens)[0];
        let cls = g.reshape(p.var("agg.cls"), &[1, 1, d])?;
        let cls = g.broadcast_to(cls, &[n, 1, d])?;
        let seq = g.concat(&[cls, tokens], 1)?;
        let pos = g.slice(p.var("agg.pos"), 0, 0, count + 1)?;
        let x = g.add(seq, pos)?;

        let (attn_out, attention) = self_attention(g, p, x, self.heads, "agg.attn")?;
        let r = g.add(x, attn_out)?;
        let x1 = layer_norm(g, p, r, "agg.ln")?;
        let h = linear(g, p, x1, "agg.ffn1")?;
        let h = g.relu(h);
        let h = linear(g, p, h, "agg.ffn2")?;
        let x2 = g.add(x1, h)?;

        let cls_out = g.slice(x2, 1, 0, 1)?;
        let cls_out = g.reshape(cls_out, &[n, d])?;
        let z_vm = linear(g, p, cls_out, "agg.out")?;
        Ok(Aggregated {
            z_vm,
            attention,
            tokens,
            level_of_origin,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(256, 0.85), 38);
        assert_eq!(keep_count(16, 0.85), 2);
        assert_eq!(keep_count(32, 0.9), 3);
        assert_eq!(keep_count(10, 0.9), 1);
        assert_eq!(keep_count(20, 0.9), 2);
        assert_eq!(keep_count(3, 0.9), 1);
        assert_eq!(keep_count(7, 0.0), 7);
    }

    #[test]
    fn zero_ratio_keeps_original_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_channels(9, 0.0, &mut rng), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn drop_is_deterministic_and_sorted() {
        let a = drop_channels(128, 0.9, &mut ChaCha8Rng::seed_from_u64(5));
        let b = drop_channels(128, 0.9, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 128));
    }

    #[test]
    fn pool_examples() {
        let constant = Tensor::full(&[3, 5, 5], 0.7);
        let t = pool_flatten_map(&constant, 4).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let map = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_flatten_map(&map, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut quad = Tensor::zeros(&[1, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                quad.set(&[0, y, x], (1 + 2 * (y / 2) + x / 2) as f64);
            }
        }
        assert_eq!(pool_flatten_map(&quad, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        // smaller than the grid: each source cell is replicated
        let up = pool_flatten_map(&map, 4).unwrap();
        assert_eq!(&up.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    }
}
