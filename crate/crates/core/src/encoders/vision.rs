use imitate_autodiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::params::{he, Bound, ParamStore};

pub const STAGES: usize = 4;
/// Each stage halves the spatial extent, so inputs must divide by 2⁴.
pub const MIN_MULTIPLE: usize = 1 << STAGES;

pub fn check_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % MIN_MULTIPLE != 0 || width % MIN_MULTIPLE != 0 {
        return Err(Error::ImageExtent {
            height,
            width,
            multiple: MIN_MULTIPLE,
        });
    }
    Ok(())
}

/// Per-stage maps and the pooled high-level vector of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[C_s, H_s, W_s]` maps, shallowest first.
    pub stage_maps: Vec<Tensor>,
    /// Global average of the last stage (z_v,h).
    pub high_level: Vec<f64>,
}

/// Graph handles for a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    /// `[N, C_s, H_s, W_s]` per stage.
    pub stages: [Var; STAGES],
    /// `[N, C_4]`.
    pub high_level: Var,
}

/// Four strided stages of (conv3x3/2 → relu → conv3x3 → relu).
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    widths: [usize; STAGES],
}

fn pname(stage: usize, conv: usize, what: &str) -> String {
    format!("vision.stage{stage}.conv{conv}.{what}")
}

impl VisionEncoder {
    pub fn new(widths: &[usize]) -> Self {
        let widths: [usize; STAGES] = widths.try_into().expect("four stage widths");
        Self { widths }
    }

    pub fn widths(&self) -> &[usize; STAGES] {
        &self.widths
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let mut c_in = 1;
        for (s, &c) in self.widths.iter().enumerate() {
            for (j, fan_c) in [(0, c_in), (1, c)] {
                store.insert(pname(s, j, "weight"), he(rng, &[c, fan_c, 3, 3], fan_c * 9));
                store.insert(pname(s, j, "bias"), Tensor::zeros(&[c]));
            }
            c_in = c;
        }
    }

    /// `images` is `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<PyramidVars> {
        let shape = g.shape(images).to_vec();
        check_extent(shape[2], shape[3])?;
        let mut x = images;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            for (j, stride) in [(0, 2), (1, 1)] {
                let y = g.conv2d(x, p.var(&pname(s, j, "weight")), p.var(&pname(s, j, "bias")), stride, 1)?;
                x = g.relu(y);
            }
            stages.push(x);
        }
        let last = stages[STAGES - 1];
        let n = g.shape(last)[0];
        let pooled = g.adaptive_avg_pool2d(last, 1, 1)?;
        let high_level = g.reshape(pooled, &[n, self.widths[STAGES - 1]])?;
        Ok(PyramidVars {
            stages: stages.try_into().expect("four stages"),
            high_level,
        })
    }

    /// Single-image convenience wrapper returning plain tensors.
    pub fn encode(&self, params: &ParamStore, img: &Image) -> Result<FeaturePyramid> {
        img.check_range()?;
        check_extent(img.height, img.width)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image::stack(&[img])?);
        let out = self.forward(&mut g, &p, x)?;
        let stage_maps = out
            .stages
            .iter()
            .map(|&v| {
                let s = g.shape(v)[1..].to_vec();
                g.value(v).clone().reshape(&s)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(FeaturePyramid {
            stage_maps,
            high_level: g.value(out.high_level).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VisionEncoder, ParamStore) {
        let enc = VisionEncoder::new(&[16, 32, 64, 128]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init(&mut store, &mut rng);
        // non-zero biases so the zero-image response is not trivially zero
        for t in store.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.01 * (i % 7) as f64);
            }
        }
        (enc, store)
    }

    #[test]
    fn stage_extents_halve() {
        let (enc, store) = setup();
        let img = Image::filled(32, 32, 0.3);
        let pyr = enc.encode(&store, &img).unwrap();
        let extents: Vec<usize> = pyr.stage_maps.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(extents, vec![16, 8, 4, 2]);
        let chans: Vec<usize> = pyr.stage_maps.iter().map(|t| t.shape()[0]).collect();
        assert_eq!(chans, vec![16, 32, 64, 128]);
        assert_eq!(pyr.high_level.len(), 128);
    }

    #[test]
    fn zero_image_gives_constant_channels() {
        let (enc, store) = setup();
        let pyr = enc.encode(&store, &Image::filled(32, 32, 0.0)).unwrap();
        for map in &pyr.stage_maps {
            let (c, hw) = (map.shape()[0], map.shape()[1] * map.shape()[2]);
            for ch in 0..c {
                let plane = &map.data()[ch * hw..(ch + 1) * hw];
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn identical_images_identical_pyramids() {
        let (enc, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let px: Vec<f64> = (0..1024).map(|_| rng.gen()).collect();
        let a = enc.encode(&store, &Image::new(32, 32, px.clone())).unwrap();
        let b = enc.encode(&store, &Image::new(32, 32, px)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_indivisible_extent() {
        let (enc, store) = setup();
        assert!(matches!(
            enc.encode(&store, &Image::filled(24, 24, 0.0)),
            Err(Error::ImageExtent { .. })
        ));
        assert!(enc.encode(&store, &Image::filled(16, 16, 0.0)).is_ok());
    }
}
