//! COCO-style run-length encoding for binary masks.
//!
//! Runs are taken in column-major order and alternate background /
//! foreground, starting with background. `size` is `[height, width]`.
//! `counts` is either a plain list of run lengths or the compact string form.

use serde::{Deserialize, Serialize};

use super::ProviderError;
use crate::postprocess::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Runs(Vec<u64>),
    Compact(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: RleCounts,
    pub size: [usize; 2],
}

pub fn encode(mask: &BinaryMask) -> Rle {
    let (w, h) = (mask.width(), mask.height());
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x as i64, y as i64);
            if v != current {
                runs.push(len);
                len = 0;
                current = v;
            }
            len += 1;
        }
    }
    runs.push(len);
    Rle { counts: RleCounts::Runs(runs), size: [h, w] }
}

pub fn decode(rle: &Rle) -> Result<BinaryMask, ProviderError> {
    let [h, w] = rle.size;
    let runs = match &rle.counts {
        RleCounts::Runs(r) => r.clone(),
        RleCounts::Compact(s) => decompress(s)?,
    };
    let total: u64 = runs.iter().sum();
    if total != (w * h) as u64 {
        return Err(ProviderError::Protocol(format!("RLE covers {total} pixels, mask has {}", w * h)));
    }
    let mut mask = BinaryMask::empty(w, h).map_err(|e| ProviderError::Protocol(e.to_string()))?;
    let mut pos = 0usize;
    for (i, &run) in runs.iter().enumerate() {
        let fg = i % 2 == 1;
        for k in pos..pos + run as usize {
            if fg {
                mask.set(k / h, k % h, true);
            }
        }
        pos += run as usize;
    }
    Ok(mask)
}

/// Compact string form used by pycocotools.
pub fn compress(runs: &[u64]) -> String {
    let mut out = String::new();
    for i in 0..runs.len() {
        let mut x = runs[i] as i64;
        if i > 2 {
            x -= runs[i - 2] as i64;
        }
        loop {
            let mut c = x & 0x1f;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            out.push((c as u8 + 48) as char);
            if !more {
                break;
            }
        }
    }
    out
}

pub fn decompress(s: &str) -> Result<Vec<u64>, ProviderError> {
    let bytes = s.as_bytes();
    let mut runs: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            let c = (bytes[p] as i64) - 48;
            if !(0..64).contains(&c) || k > 12 {
                return Err(ProviderError::Protocol("invalid compact RLE string".into()));
            }
            x |= (c & 0x1f) << (5 * k);
            p += 1;
            k += 1;
            if c & 0x20 == 0 {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
            if p >= bytes.len() {
                return Err(ProviderError::Protocol("truncated compact RLE string".into()));
            }
        }
        let m = runs.len();
        if m > 2 {
            x += runs[m - 2];
        }
        runs.push(x);
    }
    runs.into_iter()
        .map(|r| u64::try_from(r).map_err(|_| ProviderError::Protocol("negative run length".into())))
        .collect()
}
