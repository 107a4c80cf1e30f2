//! Distance/foreground targets, seeded watershed decoding and the
//! segmentation metrics.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Tensor};

/// Integer instance labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    h: usize,
    w: usize,
    labels: Vec<u32>,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != h * w || h == 0 || w == 0 {
            return Err(Error::shape("instance_map", format!("{} labels for {h}x{w}", labels.len())));
        }
        Ok(Self { h, w, labels })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w] => Self::new(h, w, t.as_u32()?.to_vec()),
            s => Err(Error::shape("instance_map", format!("expected 2-d labels, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u32(vec![self.h, self.w], self.labels.clone()).expect("shape consistent")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.w + c]
    }

    /// Distinct non-zero labels in ascending order.
    pub fn ids(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn mask(&self, id: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id && id != 0).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Single-object map holding label 1 wherever `mask` is set.
    pub fn from_mask(h: usize, w: usize, mask: &[bool]) -> Result<Self> {
        Self::new(h, w, mask.iter().map(|&m| m as u32).collect())
    }
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// 4-connected components of `mask`, labelled 1.. in row-major order of
/// their first pixel. Returns the labels and the component count.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut out = vec![0u32; h * w];
    let mut n = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || out[start] != 0 {
            continue;
        }
        n += 1;
        out[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in neighbors4(p, h, w) {
                if mask[q] && out[q] == 0 {
                    out[q] = n;
                    stack.push(q);
                }
            }
        }
    }
    (out, n as usize)
}

#[inline]
pub fn neighbors4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / w, p % w);
    let up = (r > 0).then(|| p - w);
    let left = (c > 0).then(|| p - 1);
    let right = (c + 1 < w).then(|| p + 1);
    let down = (r + 1 < h).then(|| p + w);
    [up, left, right, down].into_iter().flatten()
}

/// Squared 1-d distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let Some(q0) = f.iter().position(|v| v.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `sites`; infinite when there is none.
pub fn distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![0f64; h * w];
    let mut col = vec![0f64; h];
    let mut tmp = vec![0f64; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = if sites[r * w + c] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&col, &mut tmp);
        for r in 0..h {
            g[r * w + c] = tmp[r];
        }
    }
    let mut out = vec![0f64; h * w];
    for r in 0..h {
        edt_1d(&g[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Instance pixels touching a different label (or the image border) in
/// 4-connectivity.
pub fn boundary_pixels(map: &InstanceMap, id: u32) -> Vec<bool> {
    let (h, w) = map.shape();
    let l = map.labels();
    (0..h * w)
        .map(|p| {
            if l[p] != id {
                return false;
            }
            let (r, c) = (p / w, p % w);
            r == 0 || c == 0 || r + 1 == h || c + 1 == w || neighbors4(p, h, w).any(|q| l[q] != id)
        })
        .collect()
}

/// Per-pixel targets for the instance head, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTargets {
    pub h: usize,
    pub w: usize,
    pub center: Vec<f32>,
    pub boundary: Vec<f32>,
    pub foreground: Vec<f32>,
}

impl DistanceTargets {
    /// `[3, H, W]` in head channel order.
    pub fn to_array(&self) -> NdArray<f32> {
        let mut d = Vec::with_capacity(3 * self.h * self.w);
        d.extend_from_slice(&self.center);
        d.extend_from_slice(&self.boundary);
        d.extend_from_slice(&self.foreground);
        NdArray::new(vec![3, self.h, self.w], d).expect("sized from the map")
    }
}

pub fn derive_targets(map: &InstanceMap) -> DistanceTargets {
    let (h, w) = map.shape();
    let mut t = DistanceTargets {
        h,
        w,
        center: vec![0.0; h * w],
        boundary: vec![0.0; h * w],
        foreground: map.labels().iter().map(|&l| (l != 0) as u8 as f32).collect(),
    };
    for id in map.ids() {
        let pix: Vec<usize> = (0..h * w).filter(|&p| map.labels()[p] == id).collect();
        let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0, 0);
        for &p in &pix {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        // boundary sites all lie inside the bounding box, so the crop is exact
        let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
        let bnd = boundary_pixels(map, id);
        let crop: Vec<bool> = (0..bh * bw).map(|i| bnd[(r0 + i / bw) * w + c0 + i % bw]).collect();
        let dist = distance_transform(&crop, bh, bw);
        let at = |p: usize| dist[(p / w - r0) * bw + p % w - c0];
        let max = pix.iter().map(|&p| at(p)).fold(0.0, f64::max);
        for &p in &pix {
            t.boundary[p] = if max > 0.0 { (at(p) / max) as f32 } else { 1.0 };
        }

        let n = pix.len() as f64;
        let cy = pix.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
        let cx = pix.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
        let cd: Vec<f64> = pix
            .iter()
            .map(|&p| (((p / w) as f64 - cy).powi(2) + ((p % w) as f64 - cx).powi(2)).sqrt())
            .collect();
        let dmin = cd.iter().copied().fold(f64::INFINITY, f64::min);
        let dmax = cd.iter().copied().fold(0.0, f64::max);
        for (&p, &d) in pix.iter().zip(&cd) {
            t.center[p] = if dmax > dmin { (1.0 - (d - dmin) / (dmax - dmin)) as f32 } else { 1.0 };
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FloodKey {
    elevation: f32,
    order: u64,
}

impl Eq for FloodKey {}

impl Ord for FloodKey {
    fn cmp(&self, o: &Self) -> Ordering {
        self.elevation.total_cmp(&o.elevation).then(self.order.cmp(&o.order))
    }
}

impl PartialOrd for FloodKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

pub const DEFAULT_TAU_CENTER: f32 = 0.5;
pub const DEFAULT_TAU_FG: f32 = 0.5;

/// Seeded watershed over `1 - boundary` inside the foreground mask.
///
/// `pred` is `[3, H, W]` (center, boundary, foreground). Seeds are the
/// 4-connected components of `center > tau_center` within the mask, and
/// ties in the flood resolve by elevation, then insertion order.
pub fn watershed_decode(pred: &NdArray<f32>, tau_center: f32, tau_fg: f32) -> Result<InstanceMap> {
    let s = pred.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("watershed_decode", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = pred.data();
    let (center, boundary, fg) = (&d[..n], &d[n..2 * n], &d[2 * n..]);
    let mask: Vec<bool> = fg.iter().map(|&v| v > tau_fg).collect();
    let seed_mask: Vec<bool> = (0..n).map(|p| mask[p] && center[p] > tau_center).collect();
    let (mut labels, _) = connected_components(&seed_mask, h, w);
    let elevation = |p: usize| 1.0 - boundary[p];

    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (p, &l) in labels.iter().enumerate() {
        if l != 0 {
            heap.push(Reverse((FloodKey { elevation: elevation(p), order }, p)));
            order += 1;
        }
    }
    while let Some(Reverse((_, p))) = heap.pop() {
        for q in neighbors4(p, h, w) {
            if mask[q] && labels[q] == 0 {
                labels[q] = labels[p];
                heap.push(Reverse((FloodKey { elevation: elevation(q), order }, q)));
                order += 1;
            }
        }
    }
    InstanceMap::new(h, w, labels)
}

/// IoU thresholds as integer percents, 0.50 to 0.95.
pub const MSA_THRESHOLDS: [u64; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Mean over IoU thresholds of `TP / (TP + FP + FN)`, matching pairs with
/// IoU strictly above each threshold.
pub fn mean_segmentation_accuracy(pred: &InstanceMap, truth: &InstanceMap) -> Result<f64> {
    check_same("mean_segmentation_accuracy", pred.shape(), truth.shape())?;
    let (pids, tids) = (pred.ids(), truth.ids());
    match (pids.is_empty(), tids.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut area_p: HashMap<u32, u64> = HashMap::new();
    let mut area_t: HashMap<u32, u64> = HashMap::new();
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if p != 0 {
            *area_p.entry(p).or_default() += 1;
        }
        if t != 0 {
            *area_t.entry(t).or_default() += 1;
        }
        if p != 0 && t != 0 {
            *inter.entry((p, t)).or_default() += 1;
        }
    }
    let (np, nt) = (pids.len() as u64, tids.len() as u64);
    let mut total = 0.0;
    for t in MSA_THRESHOLDS {
        let tp = inter
            .iter()
            .filter(|(&(p, q), &i)| {
                let union = area_p[&p] + area_t[&q] - i;
                i * 100 > t * union
            })
            .count() as u64;
        total += tp as f64 / (np + nt - tp) as f64;
    }
    Ok(total / MSA_THRESHOLDS.len() as f64)
}

/// `2 sum(p t) / (sum p + sum t)`; 1 when both sums vanish.
pub fn dice(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("dice", format!("{} vs {} elements", pred.len(), truth.len())));
    }
    let inter: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let denom: f64 = pred.iter().sum::<f64>() + truth.iter().sum::<f64>();
    Ok(if denom == 0.0 { 1.0 } else { 2.0 * inter / denom })
}

pub fn dice_masks(pred: &[bool], truth: &[bool]) -> Result<f64> {
    let f = |m: &[bool]| m.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
    dice(&f(pred), &f(truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|p| {
                (0..h * w)
                    .filter(|&q| sites[q])
                    .map(|q| {
                        let dr = (p / w) as f64 - (q / w) as f64;
                        let dc = (p % w) as f64 - (q % w) as f64;
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut s = 7u64;
        for case in 0..40 {
            let (h, w) = (3 + case % 7, 2 + case % 11);
            let sites: Vec<bool> = (0..h * w)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 33).is_multiple_of(9)
                })
                .collect();
            let got = distance_transform(&sites, h, w);
            let want = brute_edt(&sites, h, w);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9 || (a.is_infinite() && b.is_infinite()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn components_are_row_major() {
        let m = [true, false, true, true, false, false, false, false, true];
        let (l, n) = connected_components(&m, 3, 3);
        assert_eq!(n, 3);
        assert_eq!(l, vec![1, 0, 2, 1, 0, 0, 0, 0, 3]);
    }

    #[test]
    fn empty_map_gives_zero_targets() {
        let t = derive_targets(&InstanceMap::empty(4, 5));
        assert!(t.to_array().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_instance_is_all_ones() {
        let mut l = vec![0; 9];
        l[4] = 3;
        let t = derive_targets(&InstanceMap::new(3, 3, l).unwrap());
        assert_eq!((t.center[4], t.boundary[4], t.foreground[4]), (1.0, 1.0, 1.0));
        assert_eq!(t.to_array().data().iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(dice(&[0.0; 3], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(dice(&[0.0; 3], &[0.0; 3]).unwrap(), 1.0);
    }
}
