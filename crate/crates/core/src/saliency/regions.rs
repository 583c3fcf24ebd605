use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Phase, StreamId};
use crate::saliency::SaliencyMap;
use crate::tensor::Mask;

/// A non-empty binary region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProposal {
    mask: Mask,
    area: usize,
}

impl RegionProposal {
    pub fn new(mask: Mask) -> Result<Self> {
        let area = mask.area();
        if area == 0 {
            return Err(Error::Empty("region proposal has no pixels".into()));
        }
        Ok(Self { mask, area })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProposalSet {
    height: usize,
    width: usize,
    proposals: Vec<RegionProposal>,
}

impl RegionProposalSet {
    pub fn new(height: usize, width: usize, proposals: Vec<RegionProposal>) -> Result<Self> {
        for (i, p) in proposals.iter().enumerate() {
            if (p.mask.height(), p.mask.width()) != (height, width) {
                return Err(Error::shape(
                    format!("{height}x{width}"),
                    format!("{}x{} (region {i})", p.mask.height(), p.mask.width()),
                ));
            }
        }
        Ok(Self {
            height,
            width,
            proposals,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn proposals(&self) -> &[RegionProposal] {
        &self.proposals
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn union(&self) -> Mask {
        let mut m = Mask::zeros(self.height, self.width);
        for p in &self.proposals {
            m.union_assign(&p.mask);
        }
        m
    }
}

/// Complement of the union of all proposals (possibly empty).
pub fn unmask_candidate(props: &RegionProposalSet) -> Mask {
    props.union().complement()
}

/// `Σ M·S / (Σ M + Σ S)`, defined as 0 when both sums vanish.
pub fn overlap_score(m: &Mask, s: &SaliencyMap) -> Result<f64> {
    if (m.height(), m.width()) != (s.height(), s.width()) {
        return Err(Error::shape(
            format!("{}x{}", s.height(), s.width()),
            format!("{}x{}", m.height(), m.width()),
        ));
    }
    let inter: f64 = s
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| m.get_flat(*i))
        .map(|(_, v)| v)
        .sum();
    let denom = m.area() as f64 + s.sum();
    Ok(if denom == 0.0 { 0.0 } else { inter / denom })
}

/// A top-k candidate: a proposal index or the unmask candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    Proposal(usize),
    Unmasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientRegionMask {
    pub mask: Mask,
    pub selected: Vec<Candidate>,
    pub k: usize,
}

impl SalientRegionMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            mask: Mask::ones(height, width),
            selected: Vec::new(),
            k: 0,
        }
    }
}

/// Scores every proposal and the unmask candidate against `s` and returns
/// the binarised union of the `k` best. Ties prefer larger area, then the
/// lower proposal index (the unmask candidate counts as index `len`).
pub fn select_salient_region_mask(props: &RegionProposalSet, s: &SaliencyMap, k: usize) -> Result<SalientRegionMask> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let u = unmask_candidate(props);
    let mut scored: Vec<(f64, usize, usize, Candidate, &Mask)> = Vec::with_capacity(props.len() + 1);
    for (i, p) in props.proposals.iter().enumerate() {
        scored.push((overlap_score(&p.mask, s)?, p.area, i, Candidate::Proposal(i), &p.mask));
    }
    scored.push((overlap_score(&u, s)?, u.area(), props.len(), Candidate::Unmasked, &u));
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));

    let mut mask = Mask::zeros(props.height, props.width);
    let mut selected = Vec::new();
    for (_, _, _, cand, m) in scored.into_iter().take(k) {
        mask.union_assign(m);
        selected.push(cand);
    }
    Ok(SalientRegionMask { mask, selected, k })
}

/// Each pixel independently on with probability `p`.
pub fn random_pixel_mask(height: usize, width: usize, p: f64, seed: u64) -> Result<SalientRegionMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("pixel probability must lie in [0, 1], got {p}")));
    }
    let mut rng = stream_rng(seed, StreamId::new(Phase::Mask, 0, 0));
    let mask = Mask::from_fn(height, width, |_, _| rng.random_bool(p));
    Ok(SalientRegionMask {
        mask,
        selected: Vec::new(),
        k: 0,
    })
}

/// Union of `k` distinct proposals drawn uniformly without replacement.
pub fn random_region_mask(props: &RegionProposalSet, k: usize, seed: u64) -> Result<SalientRegionMask> {
    if props.is_empty() {
        return Err(Error::Empty("no region proposals to sample from".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, StreamId::new(Phase::Mask, 1, 0));
    let mut picked: Vec<usize> = sample(&mut rng, props.len(), k.min(props.len())).into_vec();
    picked.sort_unstable();
    let mut mask = Mask::zeros(props.height, props.width);
    for &i in &picked {
        mask.union_assign(&props.proposals[i].mask);
    }
    Ok(SalientRegionMask {
        mask,
        selected: picked.into_iter().map(Candidate::Proposal).collect(),
        k,
    })
}

fn runs(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    let n = mask.len();
    while i < n {
        if mask.get_flat(i) {
            let start = i;
            while i < n && mask.get_flat(i) {
                i += 1;
            }
            out.push((start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

/// Writes proposals as text: a `regions v1` line, `shape H W`, `count n`,
/// then one `region i area a runs s l s l …` line per proposal, where runs
/// are raster-order `(start, length)` pairs of ones.
pub fn save_region_proposals(path: &Path, props: &RegionProposalSet) -> Result<()> {
    let mut text = format!("regions v1\nshape {} {}\ncount {}\n", props.height, props.width, props.len());
    for (i, p) in props.proposals.iter().enumerate() {
        write!(text, "region {i} area {} runs", p.area).expect("write to string");
        for (s, l) in runs(&p.mask) {
            write!(text, " {s} {l}").expect("write to string");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a proposal file, checking it against the expected frame size.
/// Regions smaller than `min_area` are dropped; overlapping regions are
/// allowed.
pub fn load_region_proposals(path: &Path, height: usize, width: usize, min_area: usize) -> Result<RegionProposalSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let at = offset;
        offset += l.len() as u64;
        (at, l.trim_end())
    });
    let mut next = |expect: &str| {
        lines
            .next()
            .ok_or_else(|| Error::format(&what, text.len() as u64, format!("missing {expect} line")))
    };
    let bad = |at: u64, msg: String| Error::format(&what, at, msg);
    let num = |at: u64, tok: Option<&str>, name: &str| -> Result<usize> {
        tok.and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(at, format!("expected integer {name}")))
    };

    let (at, l) = next("header")?;
    if l != "regions v1" {
        return Err(bad(at, format!("expected `regions v1`, found `{l}`")));
    }
    let (at, l) = next("shape")?;
    let mut t = l.split_whitespace();
    if t.next() != Some("shape") {
        return Err(bad(at, "expected `shape H W`".into()));
    }
    let (h, w) = (num(at, t.next(), "height")?, num(at, t.next(), "width")?);
    if (h, w) != (height, width) {
        return Err(Error::shape(format!("{height}x{width}"), format!("{h}x{w} in {what}")));
    }
    let (at, l) = next("count")?;
    let mut t = l.split_whitespace();
    if t.next() != Some("count") {
        return Err(bad(at, "expected `count n`".into()));
    }
    let count = num(at, t.next(), "count")?;

    let mut proposals = Vec::with_capacity(count);
    for i in 0..count {
        let (at, l) = next("region")?;
        let mut t = l.split_whitespace();
        if t.next() != Some("region") || num(at, t.next(), "index")? != i || t.next() != Some("area") {
            return Err(bad(at, format!("expected `region {i} area a runs …`")));
        }
        let area = num(at, t.next(), "area")?;
        if t.next() != Some("runs") {
            return Err(bad(at, "expected `runs`".into()));
        }
        let mut bits = vec![0u8; h * w];
        let mut end = 0;
        loop {
            let Some(s) = t.next() else { break };
            let start = num(at, Some(s), "run start")?;
            let len = num(at, t.next(), "run length")?;
            if start < end || len == 0 || start + len > h * w {
                return Err(bad(at, format!("run ({start}, {len}) out of order or out of bounds")));
            }
            bits[start..start + len].iter_mut().for_each(|b| *b = 1);
            end = start + len;
        }
        let mask = Mask::from_bytes(h, w, &bits)?;
        if mask.area() != area {
            return Err(bad(at, format!("declared area {area} but runs cover {}", mask.area())));
        }
        if area == 0 || area < min_area {
            log::warn!("{what}: dropping region {i} with area {area} below {min_area}");
            continue;
        }
        proposals.push(RegionProposal::new(mask)?);
    }
    if let Some((at, l)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(bad(at, format!("unexpected trailing content `{l}`")));
    }
    RegionProposalSet::new(h, w, proposals)
}
