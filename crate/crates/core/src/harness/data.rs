//! Synthetic probes.
//!
//! *Recall probe.* A colored cue square sits in the top-left corner during the
//! first segment, vanishes for the middle segments and returns, in the same
//! color, in the last one. A grey distractor bounces along the bottom half the
//! whole time. The cue color is the only long-range dependency.
//!
//! *Drift probe.* A colored square bounces off the walls with constant
//! integer velocity, so every future frame follows exactly from the initial
//! state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Saturated, mutually distant colors.
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 1.0],
];

const DISTRACTOR_GREY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallProbeSpec {
    pub height: usize,
    pub width: usize,
    pub segment_frames: usize,
    /// `N`
    pub segments: usize,
    /// `K`
    pub colors: usize,
    pub cue_size: usize,
    pub distractor_size: usize,
}

impl Default for RecallProbeSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            segment_frames: 4,
            segments: 4,
            colors: 4,
            cue_size: 4,
            distractor_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftProbeSpec {
    pub height: usize,
    pub width: usize,
    pub segment_frames: usize,
    pub segments: usize,
    pub sprite: usize,
    pub colors: usize,
}

impl Default for DriftProbeSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            segment_frames: 4,
            segments: 4,
            sprite: 4,
            colors: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeKind {
    Recall(RecallProbeSpec),
    Drift(DriftProbeSpec),
}

/// Which probe, how many clips, and the seed that fixes both the clips and
/// the codec trained on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub probe: ProbeKind,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        match &self.probe {
            ProbeKind::Recall(s) => (s.height, s.width, s.segment_frames),
            ProbeKind::Drift(s) => (s.height, s.width, s.segment_frames),
        }
    }

    pub fn segments(&self) -> usize {
        match &self.probe {
            ProbeKind::Recall(s) => s.segments,
            ProbeKind::Drift(s) => s.segments,
        }
    }
}

fn blank(frames: usize, h: usize, w: usize) -> Result<Tensor> {
    Tensor::zeros(&[frames, h, w, 3])
}

fn paint(video: &mut Tensor, frame: usize, y: usize, x: usize, size: usize, rgb: [f64; 3]) {
    let (h, w) = (video.shape()[1], video.shape()[2]);
    let data = video.data_mut();
    for r in y..(y + size).min(h) {
        for c in x..(x + size).min(w) {
            let o = ((frame * h + r) * w + c) * 3;
            data[o..o + 3].copy_from_slice(&rgb);
        }
    }
}

/// Position after `k` unit-time steps of a point bouncing in `[0, range]`.
pub fn reflect(p0: i64, v: i64, k: i64, range: i64) -> i64 {
    if range == 0 {
        return 0;
    }
    let period = 2 * range;
    let m = (p0 + v * k).rem_euclid(period);
    if m > range {
        period - m
    } else {
        m
    }
}

/// One recall-probe clip: its cue color and the distractor's motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecallClip {
    pub color: usize,
    pub distractor_x: i64,
    pub distractor_y: usize,
    pub velocity: i64,
}

impl RecallProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || self.segments < 3 {
            return Err(Error::Config("recall probe needs frames >= 16x16 and N >= 3".into()));
        }
        if self.colors == 0 || self.colors > PALETTE.len() {
            return Err(Error::Config(format!("colors must be in 1..={}", PALETTE.len())));
        }
        // cue in the top half, distractor confined to the bottom half
        if self.cue_size == 0
            || self.distractor_size == 0
            || self.cue_size > self.height / 2
            || self.distractor_size > self.height - self.height / 2
            || self.cue_size > self.width
            || self.distractor_size > self.width
        {
            return Err(Error::Config(format!(
                "cannot place a {0}px cue and a {1}px distractor disjointly in {2}x{3} frames",
                self.cue_size, self.distractor_size, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.segments * self.segment_frames
    }

    /// Rows and columns of the cue square.
    pub fn cue_region(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (0..self.cue_size, 0..self.cue_size)
    }

    fn draw_clip(&self, rng: &mut SeededRng, color: usize) -> RecallClip {
        let lo = self.height / 2;
        let rows = self.height - self.distractor_size - lo + 1;
        let range = (self.width - self.distractor_size) as i64;
        let speeds = [-2, -1, 1, 2];
        RecallClip {
            color,
            distractor_x: rng.below(range as usize + 1) as i64,
            distractor_y: lo + rng.below(rows),
            velocity: speeds[rng.below(4)],
        }
    }

    pub fn render(&self, clip: &RecallClip) -> Result<Tensor> {
        let mut video = blank(self.frames(), self.height, self.width)?;
        let range = (self.width - self.distractor_size) as i64;
        let l = self.segment_frames;
        for f in 0..self.frames() {
            let x = reflect(clip.distractor_x, clip.velocity, f as i64, range) as usize;
            paint(&mut video, f, clip.distractor_y, x, self.distractor_size, [DISTRACTOR_GREY; 3]);
            let seg = f / l;
            if seg == 0 || seg + 1 == self.segments {
                paint(&mut video, f, 0, 0, self.cue_size, PALETTE[clip.color]);
            }
        }
        Ok(video)
    }

    /// `count` clips whose cue colors are balanced across the palette and
    /// shuffled by `rng`.
    pub fn generate(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<(RecallClip, Tensor)>> {
        self.validate()?;
        let mut colors: Vec<usize> = (0..count).map(|i| i % self.colors).collect();
        rng.shuffle(&mut colors);
        colors
            .into_iter()
            .map(|c| {
                let clip = self.draw_clip(rng, c);
                Ok((clip, self.render(&clip)?))
            })
            .collect()
    }

    /// Mean color of the cue region over the frames of one segment.
    pub fn cue_color(&self, segment: &Tensor) -> [f64; 3] {
        let (f, h, w) = (segment.shape()[0], segment.shape()[1], segment.shape()[2]);
        let (rows, cols) = self.cue_region();
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for fr in 0..f {
            for r in rows.clone() {
                for c in cols.clone() {
                    let o = ((fr * h + r) * w + c) * 3;
                    for k in 0..3 {
                        acc[k] += segment.data()[o + k];
                    }
                    n += 1.0;
                }
            }
        }
        acc.map(|v| v / n)
    }

    /// Nearest of the `K` cue colors or black (`None`) to a measured color.
    pub fn classify(&self, rgb: [f64; 3]) -> Option<usize> {
        let dist = |p: [f64; 3]| (0..3).map(|k| (p[k] - rgb[k]).powi(2)).sum::<f64>();
        let mut best = (None, dist([0.0; 3]));
        for (i, p) in PALETTE.iter().take(self.colors).enumerate() {
            let d = dist(*p);
            if d < best.1 {
                best = (Some(i), d);
            }
        }
        best.0
    }
}

/// Initial state of a drift-probe clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Sprite {
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub color: usize,
}

impl DriftProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sprite == 0 || self.sprite > self.height || self.sprite > self.width {
            return Err(Error::Config("sprite must fit in the frame".into()));
        }
        if self.colors == 0 || self.colors > PALETTE.len() {
            return Err(Error::Config(format!("colors must be in 1..={}", PALETTE.len())));
        }
        Ok(())
    }

    /// Number of distinct initial states.
    pub fn configurations(&self) -> usize {
        (self.width - self.sprite + 1) * (self.height - self.sprite + 1) * 16 * self.colors
    }

    pub fn draw(&self, rng: &mut SeededRng) -> Sprite {
        let speeds = [-2, -1, 1, 2];
        Sprite {
            x: rng.below(self.width - self.sprite + 1) as i64,
            y: rng.below(self.height - self.sprite + 1) as i64,
            vx: speeds[rng.below(4)],
            vy: speeds[rng.below(4)],
            color: rng.below(self.colors),
        }
    }

    /// Top-left corner at frame `k`.
    pub fn position(&self, s: &Sprite, k: usize) -> (usize, usize) {
        let k = k as i64;
        let x = reflect(s.x, s.vx, k, (self.width - self.sprite) as i64);
        let y = reflect(s.y, s.vy, k, (self.height - self.sprite) as i64);
        (y as usize, x as usize)
    }

    /// Frames `start .. start + count` of the clip.
    pub fn render(&self, s: &Sprite, start: usize, count: usize) -> Result<Tensor> {
        let mut video = blank(count, self.height, self.width)?;
        for f in 0..count {
            let (y, x) = self.position(s, start + f);
            paint(&mut video, f, y, x, self.sprite, PALETTE[s.color]);
        }
        Ok(video)
    }

    pub fn generate(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<(Sprite, Tensor)>> {
        self.validate()?;
        (0..count)
            .map(|_| {
                let s = self.draw(rng);
                Ok((s, self.render(&s, 0, self.segments * self.segment_frames)?))
            })
            .collect()
    }
}

/// Latent-space toy task with no codec: every example is a unit-variance
/// sinusoid sampled along frames, positions and channels and continued across
/// segments, so segment `n + 1` follows from the phase seen in segment `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy1dSpec {
    pub frames: usize,
    pub width: usize,
    pub channels: usize,
    pub segments: usize,
}

impl Default for Toy1dSpec {
    fn default() -> Self {
        Self {
            frames: 2,
            width: 4,
            channels: 2,
            segments: 4,
        }
    }
}

impl Toy1dSpec {
    /// Latent shape `(l, 1, w, c)` of one segment.
    pub fn latent(&self) -> [usize; 4] {
        [self.frames, 1, self.width, self.channels]
    }

    /// `count` examples of `segments` latents each.
    pub fn generate(&self, count: usize, rng: &mut SeededRng) -> Result<Vec<Vec<Tensor>>> {
        const FREQS: [f64; 3] = [0.3, 0.5, 0.7];
        (0..count)
            .map(|_| {
                let omega = FREQS[rng.below(FREQS.len())];
                let phase = rng.uniform() * std::f64::consts::TAU;
                (0..self.segments)
                    .map(|n| {
                        let mut data = Vec::with_capacity(self.frames * self.width * self.channels);
                        for f in 0..self.frames {
                            let k = (n * self.frames + f) as f64;
                            for x in 0..self.width {
                                for ch in 0..self.channels {
                                    let arg = omega * k + phase + 0.7 * x as f64 + 1.3 * ch as f64;
                                    data.push(std::f64::consts::SQRT_2 * arg.sin());
                                }
                            }
                        }
                        Tensor::new(&self.latent(), data)
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stays_in_bounds() {
        for p0 in 0..=12 {
            for v in [-2, -1, 1, 2] {
                let mut prev = p0;
                for k in 0..200 {
                    let p = reflect(p0, v, k, 12);
                    assert!((0..=12).contains(&p));
                    assert!((p - prev).abs() <= v.abs());
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn recall_cue_absent_from_middle_segments() {
        let spec = RecallProbeSpec::default();
        let clips = spec.generate(8, &mut SeededRng::new(1)).unwrap();
        let (rows, cols) = spec.cue_region();
        for (clip, video) in &clips {
            let per_seg = spec.segment_frames;
            for f in 0..spec.frames() {
                let seg = f / per_seg;
                let frame = video.narrow(0, f, 1).unwrap();
                let lit = rows.clone().any(|r| {
                    cols.clone().any(|c| {
                        let o = (r * spec.width + c) * 3;
                        frame.data()[o..o + 3].iter().any(|&v| v > 0.0)
                    })
                });
                assert_eq!(lit, seg == 0 || seg == 3, "frame {f}");
            }
            let last = video.narrow(0, 3 * per_seg, per_seg).unwrap();
            assert_eq!(spec.classify(spec.cue_color(&last)), Some(clip.color));
        }
    }

    #[test]
    fn recall_colors_balanced_and_deterministic() {
        let spec = RecallProbeSpec::default();
        let a = spec.generate(12, &mut SeededRng::new(3)).unwrap();
        let b = spec.generate(12, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        for k in 0..4 {
            assert_eq!(a.iter().filter(|(c, _)| c.color == k).count(), 3);
        }
    }

    #[test]
    fn recall_rejects_cramped_frames() {
        let spec = RecallProbeSpec {
            cue_size: 9,
            ..RecallProbeSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let small = RecallProbeSpec {
            height: 8,
            ..RecallProbeSpec::default()
        };
        assert!(small.validate().is_err());
    }

    #[test]
    fn drift_frames_recomputable_from_initial_state() {
        let spec = DriftProbeSpec::default();
        let clips = spec.generate(4, &mut SeededRng::new(2)).unwrap();
        for (s, video) in &clips {
            let tail = spec.render(s, 9, 7).unwrap();
            assert_eq!(tail, video.narrow(0, 9, 7).unwrap());
        }
        assert!(spec.configurations() >= 10_000);
    }

    #[test]
    fn black_classifies_as_miss() {
        let spec = RecallProbeSpec::default();
        assert_eq!(spec.classify([0.05, 0.0, 0.1]), None);
        assert_eq!(spec.classify([0.9, 0.1, 0.0]), Some(0));
    }
}
