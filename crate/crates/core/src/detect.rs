//! Color-component face detector.
//!
//! Pixels within a Euclidean RGB distance of the face hue are foreground;
//! the largest 4-connected component wins. The detection box is the
//! component's bounding extents (the mask band is carved out of the
//! component interior but the surrounding face ring keeps it connected, so
//! the box still spans the whole face).

use crate::scene::{Frame, FACE_COLOR, FRAME_DIM};

/// Foreground threshold on squared RGB distance to the face hue.
const COLOR_DIST_SQ_MAX: i32 = 60 * 60;
/// Components smaller than this are noise, not faces.
pub const MIN_DETECTION_AREA: usize = 16;

/// A detected face: bounding box center/extents in pixels plus a fill
/// confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

fn is_face_pixel(px: [u8; 3]) -> bool {
    let dr = i32::from(px[0]) - i32::from(FACE_COLOR[0]);
    let dg = i32::from(px[1]) - i32::from(FACE_COLOR[1]);
    let db = i32::from(px[2]) - i32::from(FACE_COLOR[2]);
    dr * dr + dg * dg + db * db <= COLOR_DIST_SQ_MAX
}

/// Largest-component face detection; `None` when no component reaches the
/// minimum area.
pub fn detect_face(frame: &Frame) -> Option<Detection> {
    const N: usize = FRAME_DIM;
    let mut mask = [false; FRAME_DIM * FRAME_DIM];
    for y in 0..N {
        for x in 0..N {
            mask[y * N + x] = is_face_pixel(frame.pixel(x, y));
        }
    }

    let mut visited = [false; FRAME_DIM * FRAME_DIM];
    let mut stack: Vec<usize> = Vec::new();
    let mut best: Option<(usize, usize, usize, usize, usize)> = None; // area, minx, maxx, miny, maxy

    for start in 0..N * N {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut area = 0usize;
        let (mut minx, mut maxx, mut miny, mut maxy) = (N, 0usize, N, 0usize);
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (x, y) = (idx % N, idx / N);
            minx = minx.min(x);
            maxx = maxx.max(x);
            miny = miny.min(y);
            maxy = maxy.max(y);
            let mut push = |nidx: usize| {
                if mask[nidx] && !visited[nidx] {
                    visited[nidx] = true;
                    stack.push(nidx);
                }
            };
            if x > 0 {
                push(idx - 1);
            }
            if x + 1 < N {
                push(idx + 1);
            }
            if y > 0 {
                push(idx - N);
            }
            if y + 1 < N {
                push(idx + N);
            }
        }
        if best.map(|(a, ..)| area > a).unwrap_or(true) {
            best = Some((area, minx, maxx, miny, maxy));
        }
    }

    let (area, minx, maxx, miny, maxy) = best?;
    if area < MIN_DETECTION_AREA {
        return None;
    }
    let w = (maxx - minx + 1) as f64;
    let h = (maxy - miny + 1) as f64;
    let expected = std::f64::consts::FRAC_PI_4 * w * h;
    Some(Detection {
        cx: (minx + maxx) as f64 / 2.0,
        cy: (miny + maxy) as f64 / 2.0,
        w,
        h,
        confidence: (area as f64 / expected).clamp(0.0, 1.0),
    })
}
