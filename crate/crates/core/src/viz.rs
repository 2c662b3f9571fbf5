//! Color encoding of offset fields.
//!
//! Direction becomes hue: `atan2(vertical, horizontal)` swept once around
//! the HSV wheel, starting at red for offsets pointing along +x (rightward)
//! and turning toward +y (downward). Magnitude becomes value, normalised by
//! the largest magnitude in the field; saturation is full. A field that is
//! zero everywhere encodes as black.

use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::data::{boundary_mask, write_ppm};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor4;

/// An encoded field and the magnitude that maps to full brightness.
#[derive(Clone, Debug)]
pub struct OffsetImage {
    pub image: Tensor4<f32>,
    pub max_magnitude: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Encodes sample `n` of an `N x 2 x H x W` offset field.
pub fn encode_offsets(delta: &Tensor4<f32>, n: usize) -> OffsetImage {
    let [_, _, h, w] = delta.dims();
    let plane = h * w;
    let base = n * 2 * plane;
    let dy = &delta.data()[base..base + plane];
    let dx = &delta.data()[base + plane..base + 2 * plane];
    let mags: Vec<f64> = dy.iter().zip(dx).map(|(&a, &b)| (a as f64).hypot(b as f64)).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let mut image = Tensor4::<f32>::zeros([1, 3, h, w]);
    if max > 0.0 {
        for i in 0..plane {
            let angle = (dy[i] as f64).atan2(dx[i] as f64);
            let rgb = hsv(angle / std::f64::consts::TAU, 1.0, mags[i] / max);
            for (c, v) in rgb.into_iter().enumerate() {
                image.data_mut()[c * plane + i] = v as f32;
            }
        }
    }
    OffsetImage {
        image,
        max_magnitude: max,
    }
}

/// Every offset field the network predicts for `image` (eval mode), named
/// `step<k>.delta_f`, `step<k>.delta_a` and `context.delta`.
pub fn offset_fields(net: &mut Network<f32>, image: &Tensor4<f32>) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut graph = Graph::new();
    let out = net.forward(&mut graph, image, false)?;
    let mut fields = Vec::new();
    for (step, pair) in &out.offsets.steps {
        fields.push((format!("step{step}.delta_f"), graph.value(pair.delta_f).clone()));
        if let Some(a) = pair.delta_a {
            fields.push((format!("step{step}.delta_a"), graph.value(a).clone()));
        }
    }
    if let Some(c) = out.offsets.context {
        fields.push(("context.delta".into(), graph.value(c).clone()));
    }
    Ok(fields)
}

/// Written image for one field.
#[derive(Clone, Debug)]
pub struct WrittenField {
    pub name: String,
    pub path: PathBuf,
    pub max_magnitude: f64,
}

/// Writes one PPM per offset field of the first image in `image`.
pub fn write_offset_images(net: &mut Network<f32>, image: &Tensor4<f32>, out_dir: &Path) -> Result<Vec<WrittenField>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, field) in offset_fields(net, image)? {
        let enc = encode_offsets(&field, 0);
        let path = out_dir.join(format!("{name}.ppm"));
        write_ppm(&path, &enc.image)?;
        written.push(WrittenField {
            name,
            path,
            max_magnitude: enc.max_magnitude,
        });
    }
    Ok(written)
}

/// Offset magnitude of sample `n` mapped onto an `h x w` image grid by
/// nearest-neighbour lookup. The field covers the padded input, so the
/// scale is `padded / field`.
pub fn magnitude_on_image(delta: &Tensor4<f32>, n: usize, padded: (usize, usize), h: usize, w: usize) -> Vec<f64> {
    let [_, _, fh, fw] = delta.dims();
    let (sy, sx) = (padded.0 as f64 / fh as f64, padded.1 as f64 / fw as f64);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (((y as f64 + 0.5) / sy) as usize).min(fh - 1);
        for x in 0..w {
            let fx = (((x as f64 + 0.5) / sx) as usize).min(fw - 1);
            let a = delta.at(n, 0, fy, fx) as f64;
            let b = delta.at(n, 1, fy, fx) as f64;
            out[y * w + x] = a.hypot(b);
        }
    }
    out
}

/// Mean of `values` within Chebyshev distance `radius` of a label boundary,
/// and elsewhere. `None` when either region is empty.
pub fn boundary_contrast(values: &[f64], labels: &[u8], h: usize, w: usize, radius: usize) -> Option<(f64, f64)> {
    let b = boundary_mask(labels, h, w);
    let mut near = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if b[y * w + x] {
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        near[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    let (mut sn, mut cn, mut sf, mut cf) = (0.0, 0usize, 0.0, 0usize);
    for (v, is_near) in values.iter().zip(&near) {
        if *is_near {
            sn += v;
            cn += 1;
        } else {
            sf += v;
            cf += 1;
        }
    }
    (cn > 0 && cf > 0).then(|| (sn / cn as f64, sf / cf as f64))
}
