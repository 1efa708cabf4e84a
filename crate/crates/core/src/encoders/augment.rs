use rand::Rng;

use crate::image::Image;
use crate::rng;

pub fn hflip(img: &Image) -> Image {
    let mut out = img.pixels.clone();
    for y in 0..img.height {
        out[y * img.width..(y + 1) * img.width].reverse();
    }
    Image::new(img.height, img.width, out)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Counter-clockwise rotation about the image centre with bilinear
/// sampling. Samples falling outside the grid take the nearest edge value,
/// so constant images stay constant and values stay in range.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
        let bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: rotate the output coordinate back by -θ
            let sx = snap(c * dx - s * dy + cx);
            let sy = snap(s * dx + c * dy + cy);
            out.push(sample(sy, sx));
        }
    }
    Image::new(h, w, out)
}

/// Linearly stretches the value range onto `[0, 1]`; constant images are
/// returned unchanged.
pub fn autocontrast(img: &Image) -> Image {
    let lo = img.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return img.clone();
    }
    let px = img.pixels.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    Image::new(img.height, img.width, px)
}

fn one_view(img: &Image, rng: &mut impl Rng) -> Image {
    let flip = rng.gen_bool(0.5);
    let angle = rng.gen_range(0.0..=180.0);
    let stretch = rng.gen_bool(0.5);
    let mut v = if flip { hflip(img) } else { img.clone() };
    v = rotate(&v, angle);
    if stretch {
        v = autocontrast(&v);
    }
    v
}

/// Two independently augmented views, fully determined by `seed`.
pub fn augment(img: &Image, seed: u64) -> (Image, Image) {
    let mut r1 = rng::stream(seed, "view", &[1]);
    let mut r2 = rng::stream(seed, "view", &[2]);
    (one_view(img, &mut r1), one_view(img, &mut r2))
}
