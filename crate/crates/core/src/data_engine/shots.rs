//! Shot-boundary detection by colour-histogram difference.
//!
//! Each frame is summarised by a 32-bin histogram per channel, normalised by
//! pixel count. The distance between consecutive frames is the per-channel
//! L1 difference averaged over channels, so it lies in `[0, 2]`. A new shot
//! opens when the distance exceeds the threshold and the current shot has
//! at least `min_shot_len` frames. The keyframe is the first frame of a shot.

use serde::{Deserialize, Serialize};

use super::{DataError, FrameStream};

pub const BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub start_frame: u32,
    /// Inclusive.
    pub end_frame: u32,
    pub keyframe: u32,
}

impl Shot {
    pub fn len(&self) -> u32 {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: u32) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }
}

/// Pixel counts per `channel * 32 + bin`.
pub fn frame_histogram(frame: &[u8], channels: usize) -> Vec<u32> {
    let mut counts = vec![0u32; channels * BINS];
    match channels {
        1 => {
            for &v in frame {
                counts[(v >> 3) as usize] += 1;
            }
        }
        3 => {
            let (r, rest) = counts.split_at_mut(BINS);
            let (g, b) = rest.split_at_mut(BINS);
            for px in frame.chunks_exact(3) {
                r[(px[0] >> 3) as usize] += 1;
                g[(px[1] >> 3) as usize] += 1;
                b[(px[2] >> 3) as usize] += 1;
            }
        }
        _ => {
            for px in frame.chunks_exact(channels) {
                for (c, &v) in px.iter().enumerate() {
                    counts[c * BINS + (v >> 3) as usize] += 1;
                }
            }
        }
    }
    counts
}

/// Mean over channels of the L1 distance between normalised histograms.
pub fn histogram_distance(a: &[u32], b: &[u32], channels: usize, pixels: usize) -> f32 {
    let n = pixels as f32;
    let mut total = 0f32;
    for (x, y) in a.iter().zip(b) {
        total += (*x as f32 / n - *y as f32 / n).abs();
    }
    total / channels as f32
}

/// Incremental detector: feed frames in order, collect shots at the end.
#[derive(Debug, Clone)]
pub struct ShotDetector {
    threshold: f32,
    min_shot_len: usize,
    channels: usize,
    pixels: usize,
    prev: Option<Vec<u32>>,
    shot_start: u32,
    next_frame: u32,
    shots: Vec<Shot>,
}

impl ShotDetector {
    pub fn new(
        threshold: f32,
        min_shot_len: usize,
        channels: usize,
        pixels: usize,
    ) -> Result<Self, DataError> {
        if !(threshold > 0.0 && threshold <= 2.0) {
            return Err(DataError::InvalidParameter(format!(
                "threshold must be in (0, 2], got {threshold}"
            )));
        }
        if min_shot_len == 0 {
            return Err(DataError::InvalidParameter(
                "min_shot_len must be >= 1".into(),
            ));
        }
        Ok(Self {
            threshold,
            min_shot_len,
            channels,
            pixels,
            prev: None,
            shot_start: 0,
            next_frame: 0,
            shots: Vec::new(),
        })
    }

    /// Feeds the next frame; returns the distance to the previous frame
    /// (0 for the first one).
    pub fn push(&mut self, frame: &[u8]) -> f32 {
        let hist = frame_histogram(frame, self.channels);
        let t = self.next_frame;
        let mut d = 0.0;
        if let Some(prev) = &self.prev {
            d = histogram_distance(prev, &hist, self.channels, self.pixels);
            let current_len = (t - self.shot_start) as usize;
            if d > self.threshold && current_len >= self.min_shot_len {
                self.shots.push(Shot {
                    start_frame: self.shot_start,
                    end_frame: t - 1,
                    keyframe: self.shot_start,
                });
                self.shot_start = t;
            }
        }
        self.prev = Some(hist);
        self.next_frame += 1;
        d
    }

    pub fn finish(mut self) -> Result<Vec<Shot>, DataError> {
        if self.next_frame == 0 {
            return Err(DataError::EmptyStream);
        }
        self.shots.push(Shot {
            start_frame: self.shot_start,
            end_frame: self.next_frame - 1,
            keyframe: self.shot_start,
        });
        Ok(self.shots)
    }
}

pub fn detect_shots(
    stream: &FrameStream,
    threshold: f32,
    min_shot_len: usize,
) -> Result<Vec<Shot>, DataError> {
    let h = stream.header();
    let mut det = ShotDetector::new(
        threshold,
        min_shot_len,
        h.channels as usize,
        h.width as usize * h.height as usize,
    )?;
    if stream.frame_count() == 0 {
        return Err(DataError::EmptyStream);
    }
    stream.for_each_frame(|_, frame| {
        det.push(frame);
        Ok(())
    })?;
    det.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_engine::{PixFmt, StreamHeader};

    fn gray_stream(values: &[u8]) -> FrameStream {
        let header = StreamHeader::new(4, 4, PixFmt::Gray8, values.len() as u32);
        let payload = values.iter().flat_map(|&v| vec![v; 16]).collect();
        FrameStream::from_memory(header, payload).unwrap()
    }

    #[test]
    fn identical_frames_form_one_shot() {
        let s = gray_stream(&[77; 100]);
        let shots = detect_shots(&s, 0.35, 2).unwrap();
        assert_eq!(
            shots,
            vec![Shot {
                start_frame: 0,
                end_frame: 99,
                keyframe: 0
            }]
        );
    }

    #[test]
    fn black_white_black() {
        let mut v = vec![0u8; 30];
        v.extend([255u8; 30]);
        v.extend([0u8; 30]);
        let shots = detect_shots(&gray_stream(&v), 0.35, 2).unwrap();
        let keys: Vec<u32> = shots.iter().map(|s| s.keyframe).collect();
        assert_eq!(keys, vec![0, 30, 60]);
        assert_eq!(shots[1].end_frame, 59);
        assert_eq!(shots[2].end_frame, 89);
    }

    #[test]
    fn full_cut_distance_is_two() {
        let a = frame_histogram(&[0u8; 12], 3);
        let b = frame_histogram(&[255u8; 12], 3);
        assert_eq!(histogram_distance(&a, &b, 3, 4), 2.0);
    }

    #[test]
    fn short_shots_are_suppressed() {
        let shots = detect_shots(&gray_stream(&[0, 255]), 0.35, 5).unwrap();
        assert_eq!(shots.len(), 1);
        assert_eq!(shots[0].end_frame, 1);
    }

    #[test]
    fn empty_stream_and_bad_parameters() {
        let s = gray_stream(&[]);
        assert!(matches!(
            detect_shots(&s, 0.35, 2),
            Err(DataError::EmptyStream)
        ));
        let s = gray_stream(&[1]);
        assert!(detect_shots(&s, 0.0, 2).is_err());
        assert!(detect_shots(&s, 2.5, 2).is_err());
        assert!(detect_shots(&s, 0.35, 0).is_err());
    }
}
