//! Index maps for channels-last spatial layouts (`[h, w, c]` per item).

use crate::nn::graph::GatherMap;

fn idx(y: usize, x: usize, ch: usize, w: usize, c: usize) -> u32 {
    ((y * w + x) * c + ch) as u32
}

/// Same-padded `k×k` patch extraction: `[h, w, c] -> [h*w, k*k*c]`, patch
/// entries ordered `(dy, dx, channel)`.
pub fn im2col(h: usize, w: usize, c: usize, k: usize) -> GatherMap {
    assert!(k % 2 == 1, "kernel size must be odd");
    let r = (k / 2) as isize;
    let mut index = Vec::with_capacity(h * w * k * k * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
                    for ch in 0..c {
                        index.push(if inside {
                            idx(yy as usize, xx as usize, ch, w, c)
                        } else {
                            GatherMap::ZERO
                        });
                    }
                }
            }
        }
    }
    GatherMap::new(h * w * c, vec![h * w, k * k * c], index)
}

/// `[h, w, c] -> [h/f, w/f, f*f*c]`, block entries ordered `(dy, dx, channel)`.
pub fn space_to_depth(h: usize, w: usize, c: usize, f: usize) -> GatherMap {
    assert!(h % f == 0 && w % f == 0);
    let (ho, wo) = (h / f, w / f);
    let mut index = Vec::with_capacity(h * w * c);
    for by in 0..ho {
        for bx in 0..wo {
            for dy in 0..f {
                for dx in 0..f {
                    for ch in 0..c {
                        index.push(idx(by * f + dy, bx * f + dx, ch, w, c));
                    }
                }
            }
        }
    }
    GatherMap::new(h * w * c, vec![ho, wo, f * f * c], index)
}

/// Inverse of [`space_to_depth`]: `[h, w, f*f*c] -> [h*f, w*f, c]`.
pub fn depth_to_space(h: usize, w: usize, c: usize, f: usize) -> GatherMap {
    let (ho, wo) = (h * f, w * f);
    let mut index = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for x in 0..wo {
            let (by, dy, bx, dx) = (y / f, y % f, x / f, x % f);
            for ch in 0..c {
                let inner = (dy * f + dx) * c + ch;
                index.push(((by * w + bx) * f * f * c + inner) as u32);
            }
        }
    }
    GatherMap::new(h * w * f * f * c, vec![ho, wo, c], index)
}

/// `[h, w, c] -> [h/2, w/2, c, 4]`; follow with a sum over the last axis to pool.
pub fn pool2(h: usize, w: usize, c: usize) -> GatherMap {
    assert!(h % 2 == 0 && w % 2 == 0);
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    index.push(idx(2 * y + dy, 2 * x + dx, ch, w, c));
                }
            }
        }
    }
    GatherMap::new(h * w * c, vec![h / 2, w / 2, c, 4], index)
}

/// Nearest-neighbour `[h, w, c] -> [2h, 2w, c]`.
pub fn upsample2(h: usize, w: usize, c: usize) -> GatherMap {
    let mut index = Vec::with_capacity(4 * h * w * c);
    for y in 0..2 * h {
        for x in 0..2 * w {
            for ch in 0..c {
                index.push(idx(y / 2, x / 2, ch, w, c));
            }
        }
    }
    GatherMap::new(h * w * c, vec![2 * h, 2 * w, c], index)
}

/// Selects one of q/k/v from a fused `[n, 3*heads*dh]` projection as `[heads, n, dh]`.
pub fn split_heads(n: usize, heads: usize, dh: usize, which: usize) -> GatherMap {
    let width = 3 * heads * dh;
    let mut index = Vec::with_capacity(heads * n * dh);
    for hd in 0..heads {
        for t in 0..n {
            for j in 0..dh {
                index.push((t * width + which * heads * dh + hd * dh + j) as u32);
            }
        }
    }
    GatherMap::new(n * width, vec![heads, n, dh], index)
}

/// `[heads, n, dh] -> [n, heads*dh]`.
pub fn merge_heads(n: usize, heads: usize, dh: usize) -> GatherMap {
    let mut index = Vec::with_capacity(heads * n * dh);
    for t in 0..n {
        for hd in 0..heads {
            for j in 0..dh {
                index.push(((hd * n + t) * dh + j) as u32);
            }
        }
    }
    GatherMap::new(n * heads * dh, vec![n, heads * dh], index)
}
