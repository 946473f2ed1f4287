//! Binary PPM (P6) frame grids.
//!
//! Layout: `P6\n<width> <height>\n255\n` followed by `width·height` RGB byte
//! triples, row-major. A grid has one row per segment and one column per
//! frame, separated by 1-pixel dark-grey lines.

use std::path::Path;

use crate::error::{invalid_shape, Result};
use crate::numerics::Tensor;

const GAP: usize = 1;
const GAP_SHADE: u8 = 40;

/// Renders `(S, H, W, 3)` frames in `[0, 1]` as a grid with `cols` frames per row.
pub fn frame_grid(video: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 || cols == 0 {
        return Err(invalid_shape(format!("frame grid needs (S, H, W, 3), got {s:?}")));
    }
    let (frames, h, w) = (s[0], s[1], s[2]);
    let rows = frames.div_ceil(cols);
    let gw = cols * w + (cols - 1) * GAP;
    let gh = rows * h + (rows - 1) * GAP;
    let mut px = vec![GAP_SHADE; gw * gh * 3];
    let data = video.data();
    for f in 0..frames {
        let (oy, ox) = ((f / cols) * (h + GAP), (f % cols) * (w + GAP));
        for y in 0..h {
            for x in 0..w {
                let src = ((f * h + y) * w + x) * 3;
                let dst = ((oy + y) * gw + ox + x) * 3;
                for k in 0..3 {
                    px[dst + k] = (data[src + k].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_frame_grid(path: &Path, video: &Tensor, cols: usize) -> Result<()> {
    std::fs::write(path, frame_grid(video, cols)?)?;
    Ok(())
}
