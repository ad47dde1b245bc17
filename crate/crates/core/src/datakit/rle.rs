//! Row-major run-length encoding of binary masks. The first run counts
//! zeros and may be empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn encode(mask: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.as_slice() {
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

pub fn decode(rle: &Rle) -> Result<Mask> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Structural(format!(
            "run lengths sum to {total}, expected {h}x{w} = {}",
            h * w
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    let mut value = false;
    for &c in &rle.counts {
        data.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Mask::from_vec(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_decode() {
        let rle = Rle {
            size: [2, 4],
            counts: vec![3, 2, 3],
        };
        let m = decode(&rle).unwrap();
        assert_eq!(m.pixels(), vec![(0, 3), (1, 0)]);
        assert_eq!(encode(&m), rle);
    }

    #[test]
    fn leading_one_has_empty_zero_run() {
        let m = Mask::from_vec(1, 3, vec![true, true, false]).unwrap();
        assert_eq!(encode(&m).counts, vec![0, 2, 1]);
        let m = Mask::empty(2, 2);
        assert_eq!(encode(&m).counts, vec![4]);
    }

    #[test]
    fn wrong_total_rejected() {
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(matches!(decode(&rle), Err(Error::Structural(_))));
    }
}
