//! Deterministic 2-D sinusoidal position encoding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BASE: f64 = 10000.0;

/// Sinusoidal encoding of an `h x w` grid into `c` channels: the first `c/2`
/// channels encode the row index, the rest the column index, each half as
/// interleaved (sin, cos) pairs on a geometric frequency ladder.
///
/// Output shape is `[h, w, c]`; flattening the spatial axes gives one token
/// per grid position in row-major order. Tables are memoized per thread;
/// the encoding is deterministic in (h, w, c).
pub fn pos_enc_2d(h: usize, w: usize, c: usize) -> Result<Tensor> {
    thread_local! {
        static CACHE: std::cell::RefCell<std::collections::HashMap<(usize, usize, usize), Tensor>> =
            std::cell::RefCell::new(std::collections::HashMap::new());
    }
    CACHE.with(|cache| {
        if let Some(t) = cache.borrow().get(&(h, w, c)) {
            return Ok(t.clone());
        }
        let t = pos_enc_2d_uncached(h, w, c)?;
        cache.borrow_mut().insert((h, w, c), t.clone());
        Ok(t)
    })
}

fn pos_enc_2d_uncached(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c % 2 != 0 || c == 0 {
        return Err(Error::Config(format!(
            "pos_enc_2d channel count must be even and positive, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("pos_enc_2d grid {h}x{w} is empty")));
    }
    let half = c / 2;
    let mut data = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let token = &mut data[(i * w + j) * c..(i * w + j + 1) * c];
            fill_axis(&mut token[..half], i as f64, half);
            fill_axis(&mut token[half..], j as f64, half);
        }
    }
    Tensor::new(vec![h, w, c], data)
}

fn fill_axis(out: &mut [f64], pos: f64, half: usize) {
    let mut t = 0;
    let mut ch = 0;
    while ch < half {
        let freq = BASE.powf(-2.0 * t as f64 / half as f64);
        out[ch] = (pos * freq).sin();
        if ch + 1 < half {
            out[ch + 1] = (pos * freq).cos();
        }
        ch += 2;
        t += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = pos_enc_2d(3, 3, 8).unwrap();
        let token = &pe.data()[..8];
        // within each half: even offsets are sines, odd are cosines
        for half in [&token[..4], &token[4..]] {
            assert_eq!(half[0], 0.0);
            assert_eq!(half[1], 1.0);
            assert_eq!(half[2], 0.0);
            assert_eq!(half[3], 1.0);
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let a = pos_enc_2d(5, 7, 12).unwrap();
        let b = pos_enc_2d(5, 7, 12).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn distinct_positions_on_8x8() {
        let pe = pos_enc_2d(8, 8, 8).unwrap();
        let c = 8;
        for a in 0..64 {
            for b in (a + 1)..64 {
                let ta = &pe.data()[a * c..(a + 1) * c];
                let tb = &pe.data()[b * c..(b + 1) * c];
                let diff: f64 = ta.iter().zip(tb).map(|(x, y)| (x - y).abs()).sum();
                assert!(
                    diff > 1e-9,
                    "positions {a} and {b} share an encoding ({ta:?})"
                );
            }
        }
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(pos_enc_2d(4, 4, 7).is_err());
        assert!(pos_enc_2d(4, 4, 0).is_err());
    }
}
