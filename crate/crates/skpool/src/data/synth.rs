//! Synthetic action clips built from closed-form motion programs.
//!
//! Each class is a deterministic trajectory over a stick-figure skeleton.
//! Classes differ only in how they move: every program samples its starting
//! position from the same box, so nothing separates classes at frame 0.
//! Generation is a pure function of `(config, seed)`; per-clip randomness is
//! derived as `seed XOR clip_index`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::records::{ClipRecord, FrameRecord, InstanceRecord, Keypoint};
use super::OBJECT_KEYPOINTS;

/// Keypoints per person in the full skeleton schema.
pub const PERSON_KEYPOINTS: usize = 18;

/// Skeleton template: per-keypoint offsets from the body center, in body
/// units, y growing downward. Order: nose, neck, shoulders, elbows, wrists,
/// hips, knees, ankles, eyes, ears.
const SKELETON: [(f64, f64); PERSON_KEYPOINTS] = [
    (0.00, -0.42),
    (0.00, -0.30),
    (-0.12, -0.30),
    (-0.16, -0.14),
    (-0.18, 0.02),
    (0.12, -0.30),
    (0.16, -0.14),
    (0.18, 0.02),
    (-0.08, 0.02),
    (-0.09, 0.22),
    (-0.09, 0.42),
    (0.08, 0.02),
    (0.09, 0.22),
    (0.09, 0.42),
    (-0.04, -0.45),
    (0.04, -0.45),
    (-0.07, -0.43),
    (0.07, -0.43),
];

/// Arm and leg keypoints moved by the spread and wave programs.
const LIMBS: [usize; 8] = [3, 4, 6, 7, 9, 10, 12, 13];
const ARMS: [usize; 4] = [3, 4, 6, 7];

const BODY_SCALE: f64 = 0.3;

/// All programs draw the body center from this box at frame 0.
const BASE_X: (f64, f64) = (0.32, 0.55);
const BASE_Y: (f64, f64) = (0.35, 0.65);

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub instances: usize,
    pub keypoints: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            clips_per_class: 200,
            frames: 16,
            instances: 2,
            keypoints: PERSON_KEYPOINTS,
            noise_sigma: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in [2, 8], got {}",
                self.num_classes
            )));
        }
        if self.frames < 4 {
            return Err(Error::Config(format!(
                "frames must be at least 4, got {}",
                self.frames
            )));
        }
        if self.instances == 0 || self.keypoints == 0 || self.clips_per_class == 0 {
            return Err(Error::Config(
                "instances, keypoints and clips_per_class must be positive".into(),
            ));
        }
        if self.keypoints > PERSON_KEYPOINTS {
            return Err(Error::Config(format!(
                "keypoints must be at most {PERSON_KEYPOINTS}, got {}",
                self.keypoints
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// The eight motion programs. Class indices map onto this order, so small
/// class counts stay person-only and the object program comes last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Program {
    TranslateRight,
    OscillateVertical,
    LimbsSpread,
    ConvergePair,
    ScatterPair,
    WaveArms,
    CrouchStand,
    InteractObjectBox,
}

const PROGRAMS: [Program; 8] = [
    Program::TranslateRight,
    Program::OscillateVertical,
    Program::LimbsSpread,
    Program::ConvergePair,
    Program::ScatterPair,
    Program::WaveArms,
    Program::CrouchStand,
    Program::InteractObjectBox,
];

/// The body-center offset of a program at normalized time `t` in `[0, 1]`,
/// given the instance base and the clip's gather point.
fn center_at(program: Program, t: f64, base: (f64, f64), target: (f64, f64), phase: f64) -> (f64, f64) {
    match program {
        Program::TranslateRight => (base.0 + 0.28 * t, base.1),
        Program::OscillateVertical => {
            (base.0, base.1 + 0.12 * (4.0 * std::f64::consts::PI * t + phase).sin())
        }
        Program::ConvergePair => (
            base.0 + (target.0 - base.0) * 0.7 * t,
            base.1 + (target.1 - base.1) * 0.7 * t,
        ),
        Program::ScatterPair => (
            base.0 + (base.0 - target.0) * 0.6 * t,
            base.1 + (base.1 - target.1) * 0.6 * t,
        ),
        Program::InteractObjectBox => (base.0 + 0.15 * (2.0 * t).min(1.0), base.1),
        _ => base,
    }
}

/// The keypoint offset of a program at time `t`, scaled to image units.
fn offset_at(program: Program, t: f64, keypoint: usize, phase: f64) -> (f64, f64) {
    let (mut dx, mut dy) = SKELETON[keypoint];
    match program {
        Program::LimbsSpread => {
            if LIMBS.contains(&keypoint) {
                let s = 1.0 + 0.8 * t;
                dx *= s;
                dy *= s;
            }
        }
        Program::WaveArms => {
            if ARMS.contains(&keypoint) {
                let a = 4.0 * std::f64::consts::PI * t + phase + keypoint as f64;
                dx += 0.27 * a.sin();
                dy += 0.27 * a.cos();
            }
        }
        Program::CrouchStand => {
            let squash = 0.5 - 0.5 * (4.0 * std::f64::consts::PI * t).cos();
            dy *= 1.0 - 0.45 * squash;
        }
        _ => {}
    }
    (dx * BODY_SCALE, dy * BODY_SCALE)
}

/// Contour points of the interaction box: corners and edge midpoints.
fn object_contour() -> [(f64, f64); OBJECT_KEYPOINTS] {
    let h = 0.05;
    [
        (-h, -h),
        (0.0, -h),
        (h, -h),
        (h, 0.0),
        (h, h),
        (0.0, h),
        (-h, h),
        (-h, 0.0),
    ]
}

struct ClipPlan {
    classes: Vec<usize>,
    bases: Vec<(f64, f64)>,
    target: (f64, f64),
    phase: f64,
}

fn plan_clip(rng: &mut ChaCha8Rng, classes: Vec<usize>) -> ClipPlan {
    let bases: Vec<(f64, f64)> = (0..classes.len())
        .map(|_| {
            (
                rng.gen_range(BASE_X.0..BASE_X.1),
                rng.gen_range(BASE_Y.0..BASE_Y.1),
            )
        })
        .collect();
    let target = if bases.len() > 1 {
        let n = bases.len() as f64;
        (
            bases.iter().map(|b| b.0).sum::<f64>() / n,
            bases.iter().map(|b| b.1).sum::<f64>() / n,
        )
    } else {
        (0.45, 0.5)
    };
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    ClipPlan {
        classes,
        bases,
        target,
        phase,
    }
}

fn render_clip(cfg: &SynthConfig, plan: &ClipPlan, rng: &mut ChaCha8Rng, clip_id: String, label: usize, per_instance: bool) -> ClipRecord {
    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"));
    let mut jitter = |rng: &mut ChaCha8Rng| noise.map(|n| n.sample(rng)).unwrap_or(0.0);

    let mut frames = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let t = f as f64 / (cfg.frames - 1) as f64;
        let mut instances = Vec::new();
        for (i, (&class, &base)) in plan.classes.iter().zip(&plan.bases).enumerate() {
            let program = PROGRAMS[class];
            let center = center_at(program, t, base, plan.target, plan.phase);
            let keypoints = (0..cfg.keypoints)
                .map(|k| {
                    let (dx, dy) = offset_at(program, t, k, plan.phase);
                    let x = (center.0 + dx + jitter(rng)).clamp(0.0, 1.0);
                    let y = (center.1 + dy + jitter(rng)).clamp(0.0, 1.0);
                    Keypoint::new(x, y, 1.0)
                })
                .collect();
            instances.push(InstanceRecord {
                category: 0,
                track_id: Some(i as i64),
                instance_label: per_instance.then_some(class),
                keypoints,
            });
            if program == Program::InteractObjectBox {
                // The box starts ahead of the person and rises once reached.
                let rise = 0.15 * (2.0 * t - 1.0).max(0.0);
                let box_center = (base.0 + 0.24, base.1 + 0.05 - rise);
                let keypoints = object_contour()
                    .iter()
                    .map(|(dx, dy)| {
                        let x = (box_center.0 + dx + jitter(rng)).clamp(0.0, 1.0);
                        let y = (box_center.1 + dy + jitter(rng)).clamp(0.0, 1.0);
                        Keypoint::new(x, y, 1.0)
                    })
                    .collect();
                instances.push(InstanceRecord {
                    category: 1,
                    track_id: Some((plan.classes.len() + i) as i64),
                    instance_label: None,
                    keypoints,
                });
            }
        }
        frames.push(FrameRecord {
            frame_idx: f,
            instances,
        });
    }
    ClipRecord {
        clip_id,
        label,
        frames,
    }
}

/// Generate `num_classes * clips_per_class` single-action clips: every
/// instance in a clip performs the clip's class.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let mut clips = Vec::with_capacity(cfg.num_classes * cfg.clips_per_class);
    for class in 0..cfg.num_classes {
        for rep in 0..cfg.clips_per_class {
            let clip_index = (class * cfg.clips_per_class + rep) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ clip_index);
            let plan = plan_clip(&mut rng, vec![class; cfg.instances]);
            clips.push(render_clip(
                cfg,
                &plan,
                &mut rng,
                format!("synth-c{class}-r{rep}"),
                class,
                false,
            ));
        }
    }
    Ok(clips)
}

/// Generate multi-action clips: each instance performs a distinct class,
/// sampled without replacement. Per-instance labels are recorded as ground
/// truth; the clip-level label is the first instance's class.
///
/// Requires `instances <= num_classes` so the classes can be distinct.
/// Produces `num_classes * clips_per_class` clips in total.
pub fn gen_synthetic_multi(cfg: &SynthConfig, seed: u64) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    if cfg.instances > cfg.num_classes {
        return Err(Error::Config(format!(
            "distinct per-instance classes need instances <= num_classes ({} > {})",
            cfg.instances, cfg.num_classes
        )));
    }
    let total = cfg.num_classes * cfg.clips_per_class;
    let mut clips = Vec::with_capacity(total);
    for clip_index in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ clip_index as u64);
        let mut all: Vec<usize> = (0..cfg.num_classes).collect();
        all.shuffle(&mut rng);
        let classes: Vec<usize> = all.into_iter().take(cfg.instances).collect();
        let label = classes[0];
        let plan = plan_clip(&mut rng, classes);
        clips.push(render_clip(
            cfg,
            &plan,
            &mut rng,
            format!("multi-{clip_index}"),
            label,
            true,
        ));
    }
    Ok(clips)
}
