//! Graph-based greedy region merging on colour similarity.
//!
//! Pixels are nodes of a 4-connected grid graph weighted by the Euclidean
//! colour distance. Edges are visited in ascending weight (ties by edge
//! index) and two components merge when the edge weight does not exceed
//! either component's internal difference plus `scale / size`.

use serde::{Deserialize, Serialize};

use crate::saliency::{RegionProposal, RegionProposalSet};
use crate::tensor::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentParams {
    /// Larger values favour larger components.
    pub scale: f64,
    /// Components smaller than this are dropped.
    pub min_area: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            min_area: 1,
        }
    }
}

/// `ceil(0.006 · H · W)`.
pub fn default_min_area(height: usize, width: usize) -> usize {
    ((0.006 * (height * width) as f64).ceil() as usize).max(1)
}

struct Forest {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Joins two roots; the smaller index stays the root for determinism.
    fn join(&mut self, a: usize, b: usize, weight: f64) {
        let (root, child) = if a < b { (a, b) } else { (b, a) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        self.internal[root] = weight;
    }
}

pub fn propose_regions(x: &Image, min_area: usize) -> RegionProposalSet {
    propose_regions_with(
        x,
        &SegmentParams {
            min_area,
            ..SegmentParams::default()
        },
    )
}

pub fn propose_regions_with(x: &Image, params: &SegmentParams) -> RegionProposalSet {
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let dist = |a: usize, b: usize| {
        let (pa, pb) = (x.pixel(a / w, a % w), x.pixel(b / w, b % w));
        pa.iter().zip(pb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
    };
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            if xx + 1 < w {
                edges.push((dist(i, i + 1), i, i + 1));
            }
            if y + 1 < h {
                edges.push((dist(i, i + w), i, i + w));
            }
        }
    }
    // stable sort keeps raster order among equal weights
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut forest = Forest::new(n);
    for (weight, a, b) in edges {
        let (ra, rb) = (forest.find(a), forest.find(b));
        if ra == rb {
            continue;
        }
        let ta = forest.internal[ra] + params.scale / forest.size[ra] as f64;
        let tb = forest.internal[rb] + params.scale / forest.size[rb] as f64;
        if weight <= ta.min(tb) {
            forest.join(ra, rb, weight);
        }
    }

    // components in order of their first pixel
    let mut index_of_root = vec![usize::MAX; n];
    let mut masks: Vec<Mask> = Vec::new();
    for i in 0..n {
        let r = forest.find(i);
        if index_of_root[r] == usize::MAX {
            index_of_root[r] = masks.len();
            masks.push(Mask::zeros(h, w));
        }
        masks[index_of_root[r]].set(i / w, i % w, true);
    }
    let proposals = masks
        .into_iter()
        .filter_map(|m| RegionProposal::new(m).ok())
        .filter(|p| p.area() >= params.min_area.max(1))
        .collect();
    RegionProposalSet::new(h, w, proposals).expect("proposals built at image shape")
}
