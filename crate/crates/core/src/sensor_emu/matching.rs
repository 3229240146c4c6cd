use std::collections::HashMap;

use super::{Descriptor, FlowVector, Keypoint, SensorConfig};

/// Matches current keypoints against the previous frame.
///
/// Every current keypoint proposes its best previous keypoint within the
/// Chebyshev `search_radius`, ranked by (Hamming, squared displacement,
/// previous index). Proposals above `max_hamming` are discarded. The rest
/// are granted greedily in ascending (Hamming, squared displacement,
/// previous index, current index) order so no previous keypoint is used
/// twice. Output follows current-keypoint order.
pub fn match_frames(
    prev: &[(Keypoint, Descriptor)],
    curr: &[(Keypoint, Descriptor)],
    config: &SensorConfig,
) -> Vec<FlowVector> {
    match_with(prev, curr, config.search_radius, config.max_hamming)
}

pub(crate) fn match_with(
    prev: &[(Keypoint, Descriptor)],
    curr: &[(Keypoint, Descriptor)],
    search_radius: i32,
    max_hamming: u32,
) -> Vec<FlowVector> {
    if prev.is_empty() || curr.is_empty() {
        return Vec::new();
    }
    let cell = search_radius.max(8);
    let mut grid: HashMap<(i32, i32), Vec<usize>> = HashMap::new();
    for (i, (k, _)) in prev.iter().enumerate() {
        grid.entry((k.x.div_euclid(cell), k.y.div_euclid(cell)))
            .or_default()
            .push(i);
    }

    // (hamming, dist2, prev_idx, curr_idx)
    let mut proposals: Vec<(u32, i64, usize, usize)> = Vec::new();
    for (ci, (ck, cd)) in curr.iter().enumerate() {
        let c = ck.pixel();
        let mut best: Option<(u32, i64, usize)> = None;
        let (gx0, gx1) = ((c.x - search_radius).div_euclid(cell), (c.x + search_radius).div_euclid(cell));
        let (gy0, gy1) = ((c.y - search_radius).div_euclid(cell), (c.y + search_radius).div_euclid(cell));
        for gy in gy0..=gy1 {
            for gx in gx0..=gx1 {
                let Some(bucket) = grid.get(&(gx, gy)) else {
                    continue;
                };
                for &pi in bucket {
                    let (pk, pd) = &prev[pi];
                    let p = pk.pixel();
                    if p.chebyshev(&c) > search_radius {
                        continue;
                    }
                    let key = (pd.hamming(cd), p.dist2(&c), pi);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
        }
        if let Some((h, d2, pi)) = best {
            if h <= max_hamming {
                proposals.push((h, d2, pi, ci));
            }
        }
    }

    proposals.sort_unstable();
    let mut prev_used = vec![false; prev.len()];
    let mut accepted: Vec<(usize, usize, u32)> = Vec::new();
    for (h, _, pi, ci) in proposals {
        if !prev_used[pi] {
            prev_used[pi] = true;
            accepted.push((ci, pi, h));
        }
    }
    accepted.sort_unstable();
    accepted
        .into_iter()
        .map(|(ci, pi, h)| FlowVector {
            prev: prev[pi].0.pixel(),
            curr: curr[ci].0.pixel(),
            hamming: h,
            cornerness: curr[ci].0.cornerness,
        })
        .collect()
}
