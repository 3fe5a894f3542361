//! Random resize-and-pad defense: bilinear-shrink the image by a random
//! factor in [0.8, 1.0] and paste it at a random offset on a zero canvas of
//! the original size.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Bilinear rescale of an (h, w, c) tensor by continuous factors, rasterized
/// to (new_h, new_w, c). Sampling uses the exact factors with aligned pixel
/// centers, so a factor of exactly 1.0 reproduces the input and any two
/// distinct factors give distinct interpolation weights.
fn bilinear_rescale(
    input: &Tensor,
    new_h: usize,
    new_w: usize,
    factor_h: f64,
    factor_w: f64,
) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let data = input.data();
    let mut out = vec![0.0; new_h * new_w * c];
    for oy in 0..new_h {
        let sy = ((oy as f64 + 0.5) / factor_h - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..new_w {
            let sx = ((ox as f64 + 0.5) / factor_w - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| data[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * new_w + ox) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[new_h, new_w, c], out).expect("resize shape")
}

/// Apply the defense. Output shape always equals the input shape. Height and
/// width scales are drawn independently (the resized image is a random
/// rectangle), keeping draw collisions rare even at small image sizes.
pub fn rp_baseline(input: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let scale_h: f64 = rng.gen_range(0.8..=1.0);
    let scale_w: f64 = rng.gen_range(0.8..=1.0);
    let new_h = ((h as f64 * scale_h).round() as usize).clamp(1, h);
    let new_w = ((w as f64 * scale_w).round() as usize).clamp(1, w);
    let resized = if scale_h == 1.0 && scale_w == 1.0 {
        input.clone()
    } else {
        bilinear_rescale(input, new_h, new_w, scale_h, scale_w)
    };
    let off_y = if new_h < h { rng.gen_range(0..=(h - new_h)) } else { 0 };
    let off_x = if new_w < w { rng.gen_range(0..=(w - new_w)) } else { 0 };
    let mut out = vec![0.0; h * w * c];
    let rd = resized.data();
    for y in 0..new_h {
        for x in 0..new_w {
            for chn in 0..c {
                out[((y + off_y) * w + (x + off_x)) * c + chn] = rd[(y * new_w + x) * c + chn];
            }
        }
    }
    Tensor::new(&[h, w, c], out).expect("canvas shape")
}
