//! Dense numeric kernels behind the autodiff primitives.
//!
//! Every kernel reduces in a fixed serial order per output element, so
//! results are bitwise reproducible. Parallelism (opt-in via the
//! `FPBETTER_THREADS` environment variable) only splits work across
//! *disjoint* output slices and never reorders an accumulation, so the
//! parallel path is bitwise identical to the serial one.

use std::sync::OnceLock;

/// Thread pool built from `FPBETTER_THREADS`; `None` means run serially.
fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n: usize = std::env::var("FPBETTER_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1);
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .ok()
        }
    })
    .as_ref()
}

/// Run `f` over each (index, chunk) of `out` split into `chunk` rows,
/// in parallel when a pool is configured.
fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }),
        None => {
            for (i, c) in out.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_chunk(&mut c, n, |i, row| {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            row[j] = acc;
        }
    });
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_chunk(&mut c, n, |i, row| {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            row[j] = acc;
        }
    });
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_chunk(&mut c, n, |i, row| {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[p * m + i] * b[p * n + j];
            }
            row[j] = acc;
        }
    });
    c
}

/// Output spatial extent for one axis: `(extent + 2*padding - kernel) / stride + 1`.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

/// Direct convolution. x: [b, ci, h, w], weight: [co, ci, k, k],
/// bias: [co] -> y: [b, co, ho, wo]. Zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    dims: ConvDims,
) -> Vec<f64> {
    let ConvDims {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        k,
        stride,
        padding,
        ho,
        wo,
    } = dims;
    let mut y = vec![0.0; batch * out_ch * ho * wo];
    // One chunk per (batch, out channel) pair.
    for_each_chunk(&mut y, ho * wo, |chunk, plane| {
        let b = chunk / out_ch;
        let co = chunk % out_ch;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = bias[co];
                for ci in 0..in_ch {
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += x[((b * in_ch + ci) * h + ih as usize) * w + iw as usize]
                                * weight[((co * in_ch + ci) * k + kh) * k + kw];
                        }
                    }
                }
                plane[oh * wo + ow] = acc;
            }
        }
    });
    y
}

/// Gradient w.r.t. the convolution input. Parallel over batch items.
pub fn conv2d_backward_input(dy: &[f64], weight: &[f64], dims: ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        k,
        stride,
        padding,
        ho,
        wo,
    } = dims;
    let mut dx = vec![0.0; batch * in_ch * h * w];
    for_each_chunk(&mut dx, in_ch * h * w, |b, slab| {
        for co in 0..out_ch {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy[((b * out_ch + co) * ho + oh) * wo + ow];
                    for ci in 0..in_ch {
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                slab[(ci * h + ih as usize) * w + iw as usize] +=
                                    g * weight[((co * in_ch + ci) * k + kh) * k + kw];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradients w.r.t. the convolution weight and bias. Parallel over output
/// channels.
pub fn conv2d_backward_params(
    dy: &[f64],
    x: &[f64],
    dims: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let ConvDims {
        batch,
        in_ch,
        h,
        w,
        out_ch,
        k,
        stride,
        padding,
        ho,
        wo,
    } = dims;
    let mut dweight = vec![0.0; out_ch * in_ch * k * k];
    for_each_chunk(&mut dweight, in_ch * k * k, |co, slab| {
        for b in 0..batch {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dy[((b * out_ch + co) * ho + oh) * wo + ow];
                    for ci in 0..in_ch {
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                slab[(ci * k + kh) * k + kw] +=
                                    g * x[((b * in_ch + ci) * h + ih as usize) * w
                                        + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    let mut dbias = vec![0.0; out_ch];
    for co in 0..out_ch {
        let mut acc = 0.0;
        for b in 0..batch {
            for i in 0..ho * wo {
                acc += dy[(b * out_ch + co) * ho * wo + i];
            }
        }
        dbias[co] = acc;
    }
    (dweight, dbias)
}

/// Shape bundle for the conv kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2
        let direct = matmul(&a, &b, 2, 3, 2);
        // b_t is b transposed (2x3), so matmul_bt(a, b_t) == a * b.
        let b_t = [2.0, 0.0, 1.5, 1.0, -1.0, 2.5];
        assert_eq!(matmul_bt(&a, &b_t, 2, 3, 2), direct);
        // a_t is a transposed (3x2), so matmul_at(a_t ...) == a * b.
        let a_t = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        assert_eq!(matmul_at(&a_t, &b, 2, 3, 2), direct);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 and zero bias copies the input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let dims = ConvDims {
            batch: 1,
            in_ch: 1,
            h: 3,
            w: 3,
            out_ch: 1,
            k: 1,
            stride: 1,
            padding: 0,
            ho: 3,
            wo: 3,
        };
        let y = conv2d_forward(&x, &[1.0], &[0.0], dims);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_same_padding_hand_case() {
        // 2x2 input, 3x3 averaging-like kernel of ones, padding 1 keeps size.
        let x = [1.0, 2.0, 3.0, 4.0];
        let dims = ConvDims {
            batch: 1,
            in_ch: 1,
            h: 2,
            w: 2,
            out_ch: 1,
            k: 3,
            stride: 1,
            padding: 1,
            ho: 2,
            wo: 2,
        };
        let y = conv2d_forward(&x, &[1.0; 9], &[0.0], dims);
        // Every output sees the full 2x2 input (rest is zero padding).
        assert_eq!(y, vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_stride_two_extent() {
        assert_eq!(conv_out_extent(32, 3, 2, 1), 16);
        assert_eq!(conv_out_extent(32, 1, 2, 0), 16);
        assert_eq!(conv_out_extent(7, 3, 2, 1), 4);
        assert_eq!(conv_out_extent(7, 1, 2, 0), 4);
        assert_eq!(conv_out_extent(8, 3, 1, 1), 8);
    }
}
