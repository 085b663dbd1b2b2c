//! Seeded generators for lizard-like patches and metric test fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledPatchSet;
use crate::labels::PatchLabels;
use crate::npy::{NpyArray, NpyData};

/// Mean RGB colour per class; index 0 is background tissue.
const PALETTE: [[f64; 3]; 7] = [
    [225.0, 200.0, 215.0],
    [70.0, 40.0, 140.0],
    [150.0, 60.0, 90.0],
    [40.0, 110.0, 160.0],
    [120.0, 150.0, 60.0],
    [200.0, 120.0, 40.0],
    [90.0, 90.0, 90.0],
];

/// Paints up to `max_nuclei` disks of radius 2..=`max_radius` onto an empty
/// patch. Disks only claim background pixels, so later disks may be clipped
/// by earlier ones; a disk clipped to nothing is skipped.
pub fn random_nuclei<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    num_classes: usize,
    max_nuclei: usize,
    max_radius: usize,
    rng: &mut R,
) -> PatchLabels {
    let mut ids = vec![0u32; height * width];
    let mut classes = vec![0u16; height * width];
    let count = rng.random_range(0..=max_nuclei);
    let mut next = 1u32;
    for _ in 0..count {
        let r = rng.random_range(2..=max_radius.max(2)) as i64;
        let cy = rng.random_range(0..height) as i64;
        let cx = rng.random_range(0..width) as i64;
        let class = rng.random_range(1..=num_classes) as u16;
        let mut painted = false;
        for y in (cy - r).max(0)..(cy + r + 1).min(height as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(width as i64) {
                let i = y as usize * width + x as usize;
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r && ids[i] == 0 {
                    ids[i] = next;
                    classes[i] = class;
                    painted = true;
                }
            }
        }
        if painted {
            next += 1;
        }
    }
    PatchLabels::new(height, width, ids, classes)
}

/// Renders an RGB patch for `labels`: class colour plus uniform noise of ±`noise`.
pub fn render_image<R: Rng + ?Sized>(labels: &PatchLabels, noise: f64, rng: &mut R) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.classes.classes.len() * 3);
    for &c in &labels.classes.classes {
        let base = PALETTE[(c as usize).min(PALETTE.len() - 1)];
        for v in base {
            let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            out.push((v + jitter).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// A lizard-format dataset of `n` patches with rendered images.
pub fn synthetic_patch_set(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> LabeledPatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * height * width * 3);
    let mut labels = Vec::with_capacity(n * height * width * 2);
    let max_radius = (height.min(width) / 6).max(2);
    for _ in 0..n {
        let patch = random_nuclei(height, width, num_classes, 6, max_radius, &mut rng);
        pixels.extend(render_image(&patch, 20.0, &mut rng));
        for (&id, &c) in patch.instances.ids.iter().zip(&patch.classes.classes) {
            labels.push(id as u16);
            labels.push(c);
        }
    }
    let images = NpyArray::new(vec![n, height, width, 3], NpyData::U8(pixels)).expect("length matches");
    let labels = NpyArray::new(vec![n, height, width, 2], NpyData::U16(labels)).expect("length matches");
    LabeledPatchSet::new(images, labels, num_classes).expect("generator emits valid labels")
}

/// A prediction derived from `gt`: each instance is kept (possibly shifted by
/// one pixel, eroded or relabelled), or dropped, and a few spurious blobs are
/// added. Instance ids are shuffled.
pub fn perturb<R: Rng + ?Sized>(gt: &PatchLabels, num_classes: usize, rng: &mut R) -> PatchLabels {
    let (h, w) = gt.extents();
    let mut ids = vec![0u32; h * w];
    let mut classes = vec![0u16; h * w];
    let table = gt.instance_classes();
    let mut next = 1u32;
    for (&id, &class) in &table {
        let roll: f64 = rng.random();
        if roll < 0.15 {
            continue;
        }
        let (dy, dx) = if rng.random_bool(0.5) {
            (rng.random_range(-1..=1i64), rng.random_range(-1..=1i64))
        } else {
            (0, 0)
        };
        let class = if rng.random_bool(0.15) {
            rng.random_range(1..=num_classes) as u16
        } else {
            class
        };
        let erode = rng.random_bool(0.3);
        let mut painted = false;
        for y in 0..h {
            for x in 0..w {
                if gt.instances.ids[y * w + x] != id || (erode && rng.random_bool(0.3)) {
                    continue;
                }
                let (ty, tx) = (y as i64 + dy, x as i64 + dx);
                if ty < 0 || tx < 0 || ty >= h as i64 || tx >= w as i64 {
                    continue;
                }
                let t = ty as usize * w + tx as usize;
                if ids[t] == 0 {
                    ids[t] = next;
                    classes[t] = class;
                    painted = true;
                }
            }
        }
        if painted {
            next += 1;
        }
    }
    let extra = random_nuclei(h, w, num_classes, 2, 3, rng);
    for (i, (&id, &c)) in extra.instances.ids.iter().zip(&extra.classes.classes).enumerate() {
        if id != 0 && ids[i] == 0 {
            ids[i] = next + id;
            classes[i] = c;
        }
    }
    relabel_shuffled(&PatchLabels::new(h, w, ids, classes), rng)
}

/// Applies a random bijection to the instance ids, keeping 0 fixed.
pub fn relabel_shuffled<R: Rng + ?Sized>(labels: &PatchLabels, rng: &mut R) -> PatchLabels {
    let max = labels.instances.ids.iter().copied().max().unwrap_or(0);
    let mut perm: Vec<u32> = (1..=max).collect();
    perm.shuffle(rng);
    let ids = labels
        .instances
        .ids
        .iter()
        .map(|&id| if id == 0 { 0 } else { perm[id as usize - 1] })
        .collect();
    PatchLabels::new(labels.height(), labels.width(), ids, labels.classes.classes.clone())
}

/// A seeded gt/pred pair of `n` patches.
pub fn fixture_pair(n: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> (Vec<PatchLabels>, Vec<PatchLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_radius = (height.min(width) / 6).max(2);
    let gt: Vec<PatchLabels> = (0..n)
        .map(|_| random_nuclei(height, width, num_classes, 8, max_radius, &mut rng))
        .collect();
    let pred = gt.iter().map(|p| perturb(p, num_classes, &mut rng)).collect();
    (gt, pred)
}
