//! SLIC superpixels in CIELAB plus position space.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::RegionPartition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    /// Target number of superpixels.
    pub k: usize,
    pub compactness: f64,
    pub iterations: usize,
    /// Components smaller than this fraction of the nominal superpixel area
    /// are merged into a neighbor.
    pub min_size_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            k: 64,
            compactness: 10.0,
            iterations: 10,
            min_size_fraction: 0.25,
        }
    }
}

impl SlicParams {
    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.k == 0 || self.iterations == 0 {
            return Err(Error::InvalidParam(
                "SLIC needs k >= 1 and at least one iteration".into(),
            ));
        }
        if self.k > pixels {
            return Err(Error::InvalidParam(format!(
                "k = {} exceeds {pixels} pixels",
                self.k
            )));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::InvalidParam(format!(
                "compactness {}",
                self.compactness
            )));
        }
        if !(self.min_size_fraction > 0.0 && self.min_size_fraction < 1.0) {
            return Err(Error::InvalidParam(format!(
                "min size fraction {}",
                self.min_size_fraction
            )));
        }
        Ok(())
    }
}

/// Per-pixel labels `0..L` in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn num_labels(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Checks that labels are contiguous from 0 and each label is one
    /// 4-connected component.
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Dimension(format!(
                "{} labels for {}x{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        let (_, count) = components(&self.labels, self.height, self.width);
        let labels = self.num_labels();
        let mut seen = vec![false; labels];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("labels are not contiguous".into()));
        }
        if count != labels {
            return Err(Error::Format(format!(
                "{count} connected components for {labels} labels"
            )));
        }
        Ok(())
    }
}

/// sRGB in `[0, 1]` to CIELAB under D65.
pub fn rgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = |c: f32| {
        let c = c as f64;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let [r, g, b] = rgb.map(lin);
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

fn lab_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

pub fn slic(image: &Image, params: &SlicParams) -> Result<LabelMap> {
    let (h, w) = (image.height(), image.width());
    params.validate(h * w)?;
    let lab: Vec<[f64; 3]> = (0..h * w).map(|p| rgb_to_lab(image.rgb(p))).collect();
    let step = ((h * w) as f64 / params.k as f64).sqrt();

    // Seed grid; rows first so that two seeds on a square image sit side by side.
    let ny = ((params.k as f64 * h as f64 / w as f64).sqrt().round() as usize).max(1);
    let nx = ((params.k as f64 / ny as f64).round() as usize).max(1);
    let gradient = |y: usize, x: usize| {
        let at = |yy: usize, xx: usize| &lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        lab_dist2(at(y, xr), at(y, xl)) + lab_dist2(at(yd, x), at(yu, x))
    };
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // Continuous cell center in pixel coordinates; it only snaps to a
            // pixel when a neighbor has a strictly lower gradient.
            let fy = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let fx = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let (cy, cx) = (
                (fy.round() as usize).min(h - 1),
                (fx.round() as usize).min(w - 1),
            );
            let (mut sy, mut sx, mut best) = (fy, fx, gradient(cy, cx));
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(yy, xx);
                    if g < best {
                        (sy, sx, best) = (yy as f64, xx as f64, g);
                    }
                }
            }
            let (by, bx) = (
                (sy.round() as usize).min(h - 1),
                (sx.round() as usize).min(w - 1),
            );
            centers.push(Center {
                lab: lab[by * w + bx],
                y: sy,
                x: sx,
            });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let dist = |c: &Center, p: usize| {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        lab_dist2(&c.lab, &lab[p]) + spatial * ((y - c.y).powi(2) + (x - c.x).powi(2))
    };
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; h * w];
    for _ in 0..params.iterations {
        let mut best = vec![f64::INFINITY; h * w];
        labels.fill(u32::MAX);
        for (ci, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let d = dist(c, p);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        for p in 0..h * w {
            if labels[p] == u32::MAX {
                let nearest = (0..centers.len())
                    .min_by(|&a, &b| {
                        dist(&centers[a], p)
                            .total_cmp(&dist(&centers[b], p))
                            .then(a.cmp(&b))
                    })
                    .expect("at least one center");
                labels[p] = nearest as u32;
            }
        }
        let mut sums = vec![[0f64; 6]; centers.len()];
        for p in 0..h * w {
            let s = &mut sums[labels[p] as usize];
            for i in 0..3 {
                s[i] += lab[p][i];
            }
            s[3] += (p / w) as f64;
            s[4] += (p % w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                c.y = s[3] / s[5];
                c.x = s[4] / s[5];
            }
        }
    }

    let min_size = params.min_size_fraction * (h * w) as f64 / params.k as f64;
    Ok(enforce_connectivity(&labels, h, w, min_size))
}

/// 4-connected components, numbered by raster order of their first pixel.
fn components(labels: &[u32], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = count;
                    queue.push_back(q);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

fn neighbors(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// Splits labels into connected components, folds every component smaller
/// than `min_size` into its largest neighbor (raster order), and relabels
/// contiguously by first appearance.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: f64) -> LabelMap {
    let (mut comp, count) = components(labels, h, w);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (p, &c) in comp.iter().enumerate() {
        members[c].push(p);
    }
    let mut alive = count;
    for c in 0..count {
        if members[c].is_empty() || members[c].len() as f64 >= min_size || alive == 1 {
            continue;
        }
        let mut target: Option<usize> = None;
        for &p in &members[c] {
            for q in neighbors(p, h, w) {
                let n = comp[q];
                if n == c {
                    continue;
                }
                let better = match target {
                    None => true,
                    Some(t) => {
                        members[n].len() > members[t].len()
                            || (members[n].len() == members[t].len() && n < t)
                    }
                };
                if better {
                    target = Some(n);
                }
            }
        }
        let Some(t) = target else { continue };
        let moved = std::mem::take(&mut members[c]);
        for &p in &moved {
            comp[p] = t;
        }
        members[t].extend(moved);
        alive -= 1;
    }
    let mut relabel = vec![u32::MAX; count];
    let mut next = 0u32;
    let out = comp
        .iter()
        .map(|&c| {
            if relabel[c] == u32::MAX {
                relabel[c] = next;
                next += 1;
            }
            relabel[c]
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        labels: out,
    }
}

pub fn labelmap_to_partition(labels: &LabelMap) -> Result<RegionPartition> {
    RegionPartition::from_labels(labels.height, labels.width, &labels.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_reference_colors() {
        let white = rgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        assert_eq!(rgb_to_lab([0.0; 3]), [0.0, 0.0, 0.0]);
        let red = rgb_to_lab([1.0, 0.0, 0.0]);
        assert!(
            (red[0] - 53.24).abs() < 0.05
                && (red[1] - 80.09).abs() < 0.1
                && (red[2] - 67.20).abs() < 0.1
        );
    }

    #[test]
    fn single_superpixel() {
        let img = Image::filled(16, 16, [0.3, 0.6, 0.1]);
        let map = slic(
            &img,
            &SlicParams {
                k: 1,
                ..SlicParams::default()
            },
        )
        .unwrap();
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn rejects_too_many_segments() {
        let img = Image::filled(4, 4, [0.0; 3]);
        assert!(slic(
            &img,
            &SlicParams {
                k: 17,
                ..SlicParams::default()
            }
        )
        .is_err());
    }

    #[test]
    fn small_fragments_merge_into_largest_neighbor() {
        // A lone pixel of label 2 inside label 1 on a 4x4 map.
        let labels = vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 2, 0, 0, 1, 1];
        let map = enforce_connectivity(&labels, 4, 4, 2.0);
        assert_eq!(
            map.labels,
            vec![0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1]
        );
        map.validate().unwrap();
    }

    #[test]
    fn disconnected_label_is_split() {
        let labels = vec![0, 1, 0, 0, 1, 0];
        let map = enforce_connectivity(&labels, 2, 3, 1.0);
        assert_eq!(map.labels, vec![0, 1, 2, 0, 1, 2]);
    }
}
