//! "Same"-padded 2-D convolution kernels on `(channel, row, col)` buffers.

use super::ConvParams;

/// Row and column ranges of output pixels whose tap `(dy, dx)` lands inside
/// the input.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// Dot product with four independent accumulators so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(super) fn forward(p: &ConvParams, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let k = p.kernel;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; p.out_channels * hw];
    for oc in 0..p.out_channels {
        let out_c = &mut out[oc * hw..(oc + 1) * hw];
        out_c.fill(p.bias[oc]);
        for ic in 0..p.in_channels {
            let in_c = &input[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = p.weight[((oc * p.in_channels + ic) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let o = &mut out_c[y * w + x0..y * w + x1];
                        let src_lo = (sy * w) as isize + x0 as isize + dx;
                        let i = &in_c[src_lo as usize..src_lo as usize + (x1 - x0)];
                        for (a, b) in o.iter_mut().zip(i) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grads` and returns the gradient
/// with respect to `input` (empty when `need_input_grad` is false).
pub(super) fn backward(
    p: &ConvParams,
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    grads: &mut ConvParams,
    need_input_grad: bool,
) -> Vec<f64> {
    let hw = h * w;
    let k = p.kernel;
    let pad = (k / 2) as isize;
    let mut grad_in = if need_input_grad {
        vec![0.0; p.in_channels * hw]
    } else {
        Vec::new()
    };
    for oc in 0..p.out_channels {
        let g_c = &grad_out[oc * hw..(oc + 1) * hw];
        grads.bias[oc] += g_c.iter().sum::<f64>();
        for ic in 0..p.in_channels {
            let in_c = &input[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    let widx = ((oc * p.in_channels + ic) * k + ky) * k + kx;
                    let wv = p.weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let g = &g_c[y * w + x0..y * w + x1];
                        let src_lo = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let i = &in_c[src_lo..src_lo + (x1 - x0)];
                        acc += dot(g, i);
                        if need_input_grad {
                            let gi = &mut grad_in[ic * hw + src_lo..ic * hw + src_lo + (x1 - x0)];
                            for (d, a) in gi.iter_mut().zip(g) {
                                *d += wv * a;
                            }
                        }
                    }
                    grads.weight[widx] += acc;
                }
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(p: &ConvParams, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = p.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0; p.out_channels * h * w];
        for oc in 0..p.out_channels {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = p.bias[oc];
                    for ic in 0..p.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = p.weight[((oc * p.in_channels + ic) * p.kernel
                                    + ky as usize)
                                    * p.kernel
                                    + kx as usize];
                                s += wv * input[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(oc * h + y as usize) * w + x as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let (h, w) = (5, 7);
        let p = ConvParams {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            weight: (0..54).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(),
            bias: vec![0.1, -0.2, 0.3],
        };
        let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 13 % 17) as f64) / 17.0).collect();
        let fast = forward(&p, &input, h, w);
        let slow = naive(&p, &input, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_pixel_image_uses_centre_tap_only() {
        let p = ConvParams {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            weight: (1..=9).map(f64::from).collect(),
            bias: vec![0.0],
        };
        assert_eq!(forward(&p, &[2.0], 1, 1), vec![10.0]);
    }
}
