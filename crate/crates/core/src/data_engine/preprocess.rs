//! Image and subtitle preprocessing.

use crate::tensor::Tensor;

use super::DataError;

fn source_index(i: u32, src: u32, dst: u32) -> usize {
    let idx = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    idx.min(src as usize - 1)
}

/// Nearest-neighbour resize of an interleaved `src_h×src_w×channels` frame
/// to `target_h×target_w`, scaled to `[0, 1]`. Output dims are
/// `[target_h, target_w, channels]`.
pub fn preprocess_image(
    frame: &[u8],
    src_h: u32,
    src_w: u32,
    channels: u32,
    target_h: u32,
    target_w: u32,
) -> Result<Tensor, DataError> {
    if target_h == 0 || target_w == 0 {
        return Err(DataError::BadDimensions(format!(
            "target {target_h}x{target_w} must be at least 1x1"
        )));
    }
    if src_h == 0 || src_w == 0 || channels == 0 {
        return Err(DataError::BadDimensions(format!(
            "source {src_h}x{src_w}x{channels} must be non-empty"
        )));
    }
    let c = channels as usize;
    if frame.len() != src_h as usize * src_w as usize * c {
        return Err(DataError::BadDimensions(format!(
            "{src_h}x{src_w}x{channels} frame needs {} bytes, got {}",
            src_h as usize * src_w as usize * c,
            frame.len()
        )));
    }
    let cols: Vec<usize> = (0..target_w)
        .map(|x| source_index(x, src_w, target_w))
        .collect();
    let mut out = Vec::with_capacity(target_h as usize * target_w as usize * c);
    for y in 0..target_h {
        let sy = source_index(y, src_h, target_h);
        let row = &frame[sy * src_w as usize * c..(sy + 1) * src_w as usize * c];
        for &sx in &cols {
            for &v in &row[sx * c..(sx + 1) * c] {
                out.push(v as f32 / 255.0);
            }
        }
    }
    Tensor::f32(vec![target_h, target_w, channels], out).map_err(DataError::BadDimensions)
}

/// Replicates a gray frame into three channels.
pub fn gray_to_rgb(frame: &[u8]) -> Vec<u8> {
    frame.iter().flat_map(|&v| [v, v, v]).collect()
}

fn is_counter(line: &str) -> bool {
    !line.is_empty() && line.bytes().all(|b| b.is_ascii_digit())
}

fn is_timestamp(s: &str) -> bool {
    // HH:MM:SS,mmm (a '.' separator is accepted too)
    let b = s.as_bytes();
    b.len() == 12
        && [0, 1, 3, 4, 6, 7, 9, 10, 11]
            .iter()
            .all(|&i| b[i].is_ascii_digit())
        && b[2] == b':'
        && b[5] == b':'
        && (b[8] == b',' || b[8] == b'.')
}

fn is_timing(line: &str) -> bool {
    let Some((from, to)) = line.split_once("-->") else {
        return false;
    };
    let to = to.trim_start();
    is_timestamp(from.trim())
        && to.len() >= 12
        && to.is_char_boundary(12)
        && is_timestamp(&to[..12])
}

/// Turns subtitle text (SRT or plain) into lowercase word tokens: cue
/// counters and timing lines are dropped, tokens are split on whitespace and
/// stripped of surrounding ASCII punctuation.
pub fn preprocess_text(subtitle_text: &str) -> Vec<String> {
    subtitle_text
        .lines()
        .map(str::trim)
        .filter(|line| !is_counter(line) && !is_timing(line))
        .flat_map(str::split_whitespace)
        .map(|tok| {
            tok.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|tok| !tok.is_empty())
        .collect()
}
