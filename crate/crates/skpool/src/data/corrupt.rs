//! Synthetic detection-error injectors: false positives (coordinate noise),
//! false negatives (zeroing), and tracking-index switches.
//!
//! All injectors are pure functions of their seed, preserve the row count and
//! group structure, and select exactly `round(ratio * N)` keypoints without
//! replacement so sweep curves stay smooth at small N.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cloud::KeypointCloud;
use super::records::ClipRecord;

/// Indices of the selected rows, sorted, for an exact-count draw.
fn select_rows(n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&ratio), "ratio must be in [0, 1]");
    let k = (ratio * n as f64).round() as usize;
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let mut chosen: Vec<usize> = all.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Perturb the image coordinates of a seed-chosen fraction of keypoints with
/// Gaussian noise of scale `sigma`, then clamp back into `[0, 1]`. Confidence
/// and category channels are untouched.
pub fn inject_false_positives(
    cloud: &KeypointCloud,
    sigma: f64,
    ratio: f64,
    seed: u64,
) -> KeypointCloud {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let mut out = cloud.clone();
    if sigma == 0.0 || ratio == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = select_rows(cloud.num_rows(), ratio, &mut rng);
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    for row in rows {
        out.features[row * 4] = (out.features[row * 4] + normal.sample(&mut rng)).clamp(0.0, 1.0);
        out.features[row * 4 + 1] =
            (out.features[row * 4 + 1] + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

/// Zero the coordinates and confidence of a seed-chosen fraction of
/// keypoints. The category channel and all group arrays are unchanged.
pub fn inject_false_negatives(cloud: &KeypointCloud, ratio: f64, seed: u64) -> KeypointCloud {
    let mut out = cloud.clone();
    if ratio == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for row in select_rows(cloud.num_rows(), ratio, &mut rng) {
        out.features[row * 4] = 0.0;
        out.features[row * 4 + 1] = 0.0;
        out.features[row * 4 + 2] = 0.0;
    }
    out
}

/// The false-positive injector applied at the clip level, selecting over the
/// flattened keypoint sequence in cloud order.
pub fn corrupt_clip_fp(clip: &ClipRecord, sigma: f64, ratio: f64, seed: u64) -> ClipRecord {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let mut out = clip.clone();
    if sigma == 0.0 || ratio == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = select_rows(clip.num_keypoints(), ratio, &mut rng);
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let mut selected = selected.into_iter().peekable();
    let mut flat = 0;
    for frame in &mut out.frames {
        for inst in &mut frame.instances {
            for kp in &mut inst.keypoints {
                if selected.peek() == Some(&flat) {
                    selected.next();
                    kp.x = (kp.x + normal.sample(&mut rng)).clamp(0.0, 1.0);
                    kp.y = (kp.y + normal.sample(&mut rng)).clamp(0.0, 1.0);
                    // A perturbed missing detection is now a spurious one.
                    kp.present = !(kp.x == 0.0 && kp.y == 0.0 && kp.confidence == 0.0);
                }
                flat += 1;
            }
        }
    }
    out
}

/// The false-negative injector applied at the clip level.
pub fn corrupt_clip_fn(clip: &ClipRecord, ratio: f64, seed: u64) -> ClipRecord {
    let mut out = clip.clone();
    if ratio == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = select_rows(clip.num_keypoints(), ratio, &mut rng);
    let mut selected = selected.into_iter().peekable();
    let mut flat = 0;
    for frame in &mut out.frames {
        for inst in &mut frame.instances {
            for kp in &mut inst.keypoints {
                if selected.peek() == Some(&flat) {
                    selected.next();
                    *kp = super::records::Keypoint::absent();
                }
                flat += 1;
            }
        }
    }
    out
}

/// Switch tracking indices every `interval` frames: the first frame block
/// keeps its identity assignment, and each later block draws a fresh
/// permutation of instance positions to use as track ids. Keypoint content is
/// untouched. With `interval >= F` only the identity block exists.
pub fn shuffle_tracking(clip: &ClipRecord, interval: usize, seed: u64) -> ClipRecord {
    assert!(interval >= 1, "interval must be at least 1");
    let mut out = clip.clone();
    let max_instances = clip
        .frames
        .iter()
        .map(|f| f.instances.len())
        .max()
        .unwrap_or(0);
    if max_instances == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..max_instances).collect();
    for (f, frame) in out.frames.iter_mut().enumerate() {
        if f > 0 && f % interval == 0 {
            perm = (0..max_instances).collect();
            perm.shuffle(&mut rng);
        }
        for (pos, inst) in frame.instances.iter_mut().enumerate() {
            inst.track_id = Some(perm[pos] as i64);
        }
    }
    out
}
