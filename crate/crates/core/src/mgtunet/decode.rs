//! Conversion between label maps and the network's per-class channels.

use super::MgtError;
use crate::dataset::PatchImage;
use crate::labels::{ClassMap, PatchLabels};
use crate::nn::Tensor4;

/// Components smaller than this many pixels are dropped by default.
pub const DEFAULT_MIN_SIZE: usize = 3;

/// Stacks `[H, W, C]` u8 images into an `(n, C, H, W)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[PatchImage]) -> Result<Tensor4, MgtError> {
    let Some(first) = images.first() else {
        return Err(MgtError::Config("no images to stack".into()));
    };
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut out = Tensor4::zeros([images.len(), c, h, w]);
    for (n, img) in images.iter().enumerate() {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(MgtError::Config(format!(
                "image {n} is {}x{}x{}, expected {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
        for (i, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                let idx = out.index(n, ch, i / w, i % w);
                out.data_mut()[idx] = v as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// One-hot `(n, C + 1, H, W)` targets; channel 0 marks background.
pub fn targets_from_labels(labels: &[PatchLabels], num_classes: usize) -> Result<Tensor4, MgtError> {
    let Some(first) = labels.first() else {
        return Err(MgtError::Config("no patches to build targets from".into()));
    };
    let (h, w) = first.extents();
    let mut out = Tensor4::zeros([labels.len(), num_classes + 1, h, w]);
    for (n, patch) in labels.iter().enumerate() {
        if patch.extents() != (h, w) {
            return Err(MgtError::Config(format!(
                "patch {n} is {:?}, expected {:?}",
                patch.extents(),
                (h, w)
            )));
        }
        patch.validate(num_classes)?;
        for (i, &c) in patch.classes.classes.iter().enumerate() {
            let idx = out.index(n, c as usize, i / w, i % w);
            out.data_mut()[idx] = 1.0;
        }
    }
    Ok(out)
}

/// Per-pixel argmax over channels of sample `n`; ties go to the lower index.
pub fn argmax_classes(logits: &Tensor4, n: usize) -> ClassMap {
    let [_, c, h, w] = logits.shape();
    let plane = h * w;
    let sample = logits.sample(n);
    let classes = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if sample[k * plane + p] > sample[best * plane + p] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    ClassMap {
        height: h,
        width: w,
        classes,
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of equal non-zero class. Returns per-pixel ids
/// (0 = background) numbered 1.. in raster order of each component's first pixel,
/// and the size of each component (index `id - 1`).
pub fn connected_components(classes: &ClassMap) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (classes.height, classes.width);
    let cls = &classes.classes;
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if cls[i] == 0 {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut neighbours = [None; 4];
            if x > 0 {
                neighbours[0] = Some(i - 1);
            }
            if y > 0 {
                if x > 0 {
                    neighbours[1] = Some(i - w - 1);
                }
                neighbours[2] = Some(i - w);
                if x + 1 < w {
                    neighbours[3] = Some(i - w + 1);
                }
            }
            for j in neighbours.into_iter().flatten() {
                if cls[j] == cls[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        // Keep the earlier root so roots stay at first pixels.
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut ids = vec![0u32; h * w];
    let mut root_id = vec![0u32; h * w];
    let mut sizes = Vec::new();
    for i in 0..h * w {
        if cls[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i);
        if root_id[r] == 0 {
            sizes.push(0);
            root_id[r] = sizes.len() as u32;
        }
        ids[i] = root_id[r];
        sizes[root_id[r] as usize - 1] += 1;
    }
    (ids, sizes)
}

/// Decodes each sample into instance and class maps: argmax classes, then
/// per-class 8-connected components. Components under `min_size` pixels become
/// background in both maps; surviving ids are renumbered 1.. in raster order.
pub fn decode_instances(logits: &Tensor4, min_size: usize) -> Vec<PatchLabels> {
    (0..logits.batch())
        .map(|n| {
            let mut classes = argmax_classes(logits, n);
            let (ids, sizes) = connected_components(&classes);
            let mut remap = vec![0u32; sizes.len() + 1];
            let mut next = 0;
            for (k, &s) in sizes.iter().enumerate() {
                if s >= min_size {
                    next += 1;
                    remap[k + 1] = next;
                }
            }
            let ids: Vec<u32> = ids.iter().map(|&id| remap[id as usize]).collect();
            for (c, &id) in classes.classes.iter_mut().zip(&ids) {
                if id == 0 {
                    *c = 0;
                }
            }
            PatchLabels::new(classes.height, classes.width, ids, classes.classes)
        })
        .collect()
}
