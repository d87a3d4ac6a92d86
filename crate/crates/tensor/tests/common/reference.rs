//! Direct nested-loop references, written independently of the optimized
//! kernels. Shared by several test targets via `#[path]`.
#![allow(dead_code)]

/// Seven nested loops over `[co, t, h, w]` and the `[ci, kt, kh, kw]`
/// receptive field. Out-of-range temporal taps read zero.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_reference(
    input: &[f64],
    [c, t, h, w]: [usize; 4],
    kernel: &[f64],
    [co, ci, kt, kh, kw]: [usize; 5],
    bias: &[f64],
    pad: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(c, ci);
    let to = t + 2 * pad - kt + 1;
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let mut out = vec![0.0; co * to * ho * wo];
    for o in 0..co {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[o];
                    for i in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let st = ot as isize + dt as isize - pad as isize;
                                    if st < 0 || st >= t as isize {
                                        continue;
                                    }
                                    let sh = oh * stride + dh;
                                    let sw = ow * stride + dw;
                                    let x = input[((i * t + st as usize) * h + sh) * w + sw];
                                    let k = kernel[(((o * ci + i) * kt + dt) * kh + dh) * kw + dw];
                                    acc += x * k;
                                }
                            }
                        }
                    }
                    out[((o * to + ot) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (out, [co, to, ho, wo])
}

/// 2x2x2 stride-2 max pooling; `ceil[axis]` keeps a trailing partial window
/// whose missing cells count as zero.
pub fn maxpool3d_reference(input: &[f64], [c, t, h, w]: [usize; 4], ceil: [bool; 3]) -> (Vec<f64>, [usize; 4]) {
    let half = |n: usize, up: bool| if up { (n + 1) / 2 } else { n / 2 };
    let (to, ho, wo) = (half(t, ceil[0]), half(h, ceil[1]), half(w, ceil[2]));
    let mut out = Vec::new();
    for ch in 0..c {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut cells = Vec::new();
                    for dt in 0..2 {
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let (a, b, d) = (2 * ot + dt, 2 * oh + dh, 2 * ow + dw);
                                cells.push(if a < t && b < h && d < w {
                                    input[((ch * t + a) * h + b) * w + d]
                                } else {
                                    0.0
                                });
                            }
                        }
                    }
                    out.push(cells.into_iter().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
    }
    (out, [c, to, ho, wo])
}

/// `weight · x + bias` by explicit dot products.
pub fn linear_reference(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..bias.len())
        .map(|i| bias[i] + (0..n).map(|j| weight[i * n + j] * x[j]).sum::<f64>())
        .collect()
}

/// Small deterministic generator so the references need no RNG crate.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn symmetric(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.symmetric()).collect()
    }
}
