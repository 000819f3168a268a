//! Thresholding and the single-connected-component step.

use std::collections::VecDeque;

pub const THRESHOLD: f64 = 0.5;

pub fn threshold(prob: &[f64]) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= THRESHOLD)).collect()
}

/// Labels 8-connected foreground components in raster order of their first
/// pixel. Background is 0; components are numbered from 1. Returns the label
/// image and the pixel count of each component.
pub fn label_components(mask: &[u8], height: usize, width: usize) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let j = nr as usize * width + nc as usize;
                    if mask[j] != 0 && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(count);
    }
    (labels, sizes)
}

/// Keeps only the largest 8-connected component. Ties go to the component
/// reached first in raster order.
pub fn largest_component(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let (labels, sizes) = label_components(mask, height, width);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return vec![0; mask.len()];
    };
    labels.iter().map(|&l| u8::from(l == best)).collect()
}
