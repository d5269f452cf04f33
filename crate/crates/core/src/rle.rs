//! Row-major run-length encoding of binary masks.
//!
//! Counts alternate background/foreground runs and always start with a
//! background run, which may be zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_io::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in mask.data() {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            size: [mask.height(), mask.width()],
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (w * h) as u64 {
            return Err(Error::InvalidParam(format!(
                "RLE covers {total} pixels, mask is {w}x{h}"
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        BinaryMask::from_vec(w, h, data)
    }

    /// Foreground pixel count, without decoding.
    pub fn area(&self) -> usize {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| c as usize)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn starts_with_background_run() {
        let m = BinaryMask::from_vec(3, 1, vec![1, 1, 0]).unwrap();
        let r = Rle::encode(&m);
        assert_eq!(r.counts, vec![0, 2, 1]);
        assert_eq!(r.area(), 2);
    }

    #[test]
    fn bad_total_rejected() {
        let r = Rle {
            size: [2, 2],
            counts: vec![1, 1],
        };
        assert!(r.decode().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..12, h in 1usize..12, bits in proptest::collection::vec(0u8..2, 144)) {
            let m = BinaryMask::from_vec(w, h, bits[..w * h].to_vec()).unwrap();
            let r = Rle::encode(&m);
            prop_assert_eq!(r.area(), m.count());
            prop_assert_eq!(r.decode().unwrap(), m);
        }
    }
}
