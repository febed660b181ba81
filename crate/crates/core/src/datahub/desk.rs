//! `desk10`: a built-in procedurally generated 10-class image set.
//!
//! Every image carries one oriented-grating pattern whose orientation band
//! encodes the class, drawn over a smooth random background, usually next
//! to a smaller distractor grating from a different class, under heavy
//! appearance jitter and pixel noise. Neighboring orientation classes are
//! deliberately confusable. The whole set is a pure function of the split
//! tag and image index, so loads are bit-identical everywhere.

use super::{quantize_pixel, DatasetSpec, Split};
use distillbench_nn::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const DESK_SEED: u64 = 0xd15c_0bad_cafe_0001;
const TRAIN_TAG: u64 = 1;
const TEST_TAG: u64 = 2;

pub fn generate(spec: &DatasetSpec) -> (Split, Split) {
    let train = generate_split(spec, spec.train_size, TRAIN_TAG);
    let test = generate_split(spec, spec.test_size, TEST_TAG);
    (train, test)
}

fn generate_split(spec: &DatasetSpec, n: usize, tag: u64) -> Split {
    let (c, h, w) = (spec.channels, spec.resolution, spec.resolution);
    let mut split = Split::new(n, c, h, w);
    let classes = spec.num_classes as u32;
    for i in 0..n {
        let label = (i as u32) % classes;
        split.labels[i] = label;
        let mut rng = rng::stream(DESK_SEED, &[tag, i as u64]);
        let img = render_image(label, classes, h, w, &mut rng);
        let il = split.image_len();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    split.pixels[i * il + (ci * h + y) * w + x] =
                        quantize_pixel(img[(ci * h + y) * w + x]);
                }
            }
        }
    }
    split
}

/// Renders one [3*h*w] image in [0,1] pixel space.
fn render_image(label: u32, classes: u32, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = background(h, w, rng);

    // Distractor from another class, drawn first so the class patch wins
    // where they overlap.
    if rng.gen::<f64>() < 0.7 {
        let mut other = rng.gen_range(0..classes - 1);
        if other >= label {
            other += 1;
        }
        let r = rng.gen_range(8..=14);
        draw_grating(&mut img, h, w, other, classes, r, 1.0, rng);
    }

    let r = rng.gen_range(16..=26.min(h));
    let alpha = rng.gen_range(0.75..1.0);
    draw_grating(&mut img, h, w, label, classes, r, alpha, rng);

    // Additive pixel noise.
    let sigma = rng.gen_range(0.03..0.10);
    for v in img.iter_mut() {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
        *v = (*v + sigma * g).clamp(0.0, 1.0);
    }
    img
}

/// Smooth background: a 4x4 random color field, bilinearly upsampled.
fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const G: usize = 4;
    let base: [f64; 3] = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    let contrast = rng.gen_range(0.05..0.25);
    let mut grid = [[[0.0f64; G]; G]; 3];
    for ci in 0..3 {
        for gy in 0..G {
            for gx in 0..G {
                grid[ci][gy][gx] = (base[ci] + rng.gen_range(-contrast..contrast)).clamp(0.0, 1.0);
            }
        }
    }
    let mut img = vec![0.0; 3 * h * w];
    for ci in 0..3 {
        for y in 0..h {
            let fy = y as f64 / (h - 1) as f64 * (G - 1) as f64;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(G - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / (w - 1) as f64 * (G - 1) as f64;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(G - 1);
                let tx = fx - x0 as f64;
                let top = grid[ci][y0][x0] * (1.0 - tx) + grid[ci][y0][x1] * tx;
                let bot = grid[ci][y1][x0] * (1.0 - tx) + grid[ci][y1][x1] * tx;
                img[(ci * h + y) * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    img
}

/// Draws one oriented grating patch; the orientation band encodes `class`.
fn draw_grating(
    img: &mut [f64],
    h: usize,
    w: usize,
    class: u32,
    classes: u32,
    r: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) {
    let theta = class as f64 * PI / classes as f64 + rng.gen_range(-PI / 36.0..PI / 36.0);
    let freq = rng.gen_range(1.5..3.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let cx = rng.gen_range(r / 2..=w - 1 - r / 2) as f64;
    let cy = rng.gen_range(r / 2..=h - 1 - r / 2) as f64;

    // Two contrasting colors.
    let mut ca = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let mut cb = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    while dist2(&ca, &cb) < 0.16 {
        ca = [rng.gen(), rng.gen(), rng.gen()];
        cb = [rng.gen(), rng.gen(), rng.gen()];
    }

    let (sin_t, cos_t) = theta.sin_cos();
    let half = r as f64 / 2.0;
    let y_lo = (cy - half).max(0.0) as usize;
    let y_hi = ((cy + half) as usize).min(h - 1);
    let x_lo = (cx - half).max(0.0) as usize;
    let x_hi = ((cx + half) as usize).min(w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let u = x as f64 - cx;
            let v = y as f64 - cy;
            let proj = u * cos_t + v * sin_t;
            let g = 0.5 + 0.5 * (2.0 * PI * freq * proj / r as f64 + phase).sin();
            for ci in 0..3 {
                let color = cb[ci] + (ca[ci] - cb[ci]) * g;
                let px = &mut img[(ci * h + y) * w + x];
                *px = *px * (1.0 - alpha) + color * alpha;
            }
        }
    }
}
