//! Cross-correlation kernels for 1-D, 2-D and 3-D convolution.
//!
//! Every rank is lowered to a canonical 3-D layout: input `[C, A, B, W]`,
//! weight `[O, C, KA, KB, KW]`, output `[O, OA, OB, OW]`. A 1-D input
//! `[C, T]` becomes `[C, 1, 1, T]`, a 2-D input `[C, H, W]` becomes
//! `[C, 1, H, W]`.

use crate::error::{Error, Result};
use crate::real::Real;

/// Kernel geometry of a convolution. Extents are listed in the layer's own
/// rank; `out_channels` is carried by the weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    pub fn new(kernel: &[usize], stride: &[usize], padding: &[usize]) -> Result<Self> {
        let rank = kernel.len();
        if !(1..=3).contains(&rank) || stride.len() != rank || padding.len() != rank {
            return Err(Error::dim(
                "conv_spec",
                format!("rank {rank} with stride {stride:?} padding {padding:?}"),
            ));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::dim("conv_spec", "zero kernel extent or stride"));
        }
        Ok(ConvSpec {
            rank,
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        })
    }

    /// 1-D, stride 1: the `k/p` cell of a layer table.
    pub fn conv1d(kernel: usize, padding: usize) -> Self {
        ConvSpec::new(&[kernel], &[1], &[padding]).expect("valid 1-d spec")
    }

    pub fn conv2d(kernel: [usize; 2], padding: [usize; 2]) -> Self {
        ConvSpec::new(&kernel, &[1, 1], &padding).expect("valid 2-d spec")
    }

    pub fn conv3d(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvSpec::new(&kernel, &stride, &padding).expect("valid 3-d spec")
    }

    fn canon(v: &[usize], fill: usize) -> [usize; 3] {
        let mut out = [fill; 3];
        out[3 - v.len()..].copy_from_slice(v);
        out
    }

    pub(crate) fn kernel3(&self) -> [usize; 3] {
        Self::canon(&self.kernel, 1)
    }

    pub(crate) fn stride3(&self) -> [usize; 3] {
        Self::canon(&self.stride, 1)
    }

    pub(crate) fn padding3(&self) -> [usize; 3] {
        Self::canon(&self.padding, 0)
    }

    /// Output shape for an input of shape `[C, spatial...]` and `out_channels` filters.
    pub fn output_shape(&self, input: &[usize], out_channels: usize) -> Result<Vec<usize>> {
        if input.len() != self.rank + 1 {
            return Err(Error::dim(
                "conv",
                format!("rank-{} conv on input {input:?}", self.rank),
            ));
        }
        let mut out = vec![out_channels];
        for i in 0..self.rank {
            let span = input[i + 1] + 2 * self.padding[i];
            if span < self.kernel[i] {
                return Err(Error::dim(
                    "conv",
                    format!(
                        "non-positive output extent on axis {i}: input {} kernel {} padding {}",
                        input[i + 1],
                        self.kernel[i],
                        self.padding[i]
                    ),
                ));
            }
            out.push((span - self.kernel[i]) / self.stride[i] + 1);
        }
        Ok(out)
    }
}

pub(crate) struct Geometry {
    pub c: usize,
    pub o: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub p: [usize; 3],
}

impl Geometry {
    pub fn new(spec: &ConvSpec, input: &[usize], weight: &[usize]) -> Result<Self> {
        let out_shape = spec.output_shape(input, weight[0])?;
        if weight.len() != spec.rank + 2 || weight[1] != input[0] || weight[2..] != spec.kernel[..] {
            return Err(Error::dim(
                "conv",
                format!("weight {weight:?} incompatible with input {input:?} and {spec:?}"),
            ));
        }
        Ok(Geometry {
            c: input[0],
            o: weight[0],
            inp: ConvSpec::canon(&input[1..], 1),
            out: ConvSpec::canon(&out_shape[1..], 1),
            k: spec.kernel3(),
            s: spec.stride3(),
            p: spec.padding3(),
        })
    }

    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    fn k_len(&self) -> usize {
        self.k.iter().product()
    }

    /// Range of output positions `o` on `axis` for which `o*s + k - p` is inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, on) = (self.s[axis], self.p[axis], self.inp[axis], self.out[axis]);
        // need o*s + k >= p  and  o*s + k - p < n
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(on) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset, run_len, in_step)` for every contiguous
    /// run of the innermost axis touched by kernel tap `(ka, kb, kw)`.
    fn for_each_run(&self, ka: usize, kb: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (a_lo, a_hi) = self.valid(0, ka);
        let (b_lo, b_hi) = self.valid(1, kb);
        let (w_lo, w_hi) = self.valid(2, kw);
        if w_lo >= w_hi {
            return;
        }
        for oa in a_lo..a_hi {
            let ia = oa * self.s[0] + ka - self.p[0];
            for ob in b_lo..b_hi {
                let ib = ob * self.s[1] + kb - self.p[1];
                let out_row = (oa * self.out[1] + ob) * self.out[2];
                let in_row = (ia * self.inp[1] + ib) * self.inp[2];
                let iw0 = w_lo * self.s[2] + kw - self.p[2];
                f(out_row + w_lo, in_row + iw0, w_hi - w_lo);
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &Geometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (ol, il, kl) = (g.out_len(), g.in_len(), g.k_len());
    let sw = g.s[2];
    let mut out = vec![T::zero(); g.o * ol];
    for o in 0..g.o {
        let out_o = &mut out[o * ol..(o + 1) * ol];
        out_o.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.c {
            let x_c = &x[c * il..(c + 1) * il];
            let w_oc = &w[(o * g.c + c) * kl..(o * g.c + c + 1) * kl];
            for ka in 0..g.k[0] {
                for kb in 0..g.k[1] {
                    for kw in 0..g.k[2] {
                        let wv = w_oc[(ka * g.k[1] + kb) * g.k[2] + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        g.for_each_run(ka, kb, kw, |oo, io, n| {
                            let dst = &mut out_o[oo..oo + n];
                            if sw == 1 {
                                for (d, &s) in dst.iter_mut().zip(&x_c[io..io + n]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * x_c[io + j * sw];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn backward<T: Real>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ol, il, kl) = (g.out_len(), g.in_len(), g.k_len());
    let sw = g.s[2];
    let mut dx = vec![T::zero(); g.c * il];
    let mut dw = vec![T::zero(); g.o * g.c * kl];
    let db: Vec<T> = (0..g.o)
        .map(|o| dout[o * ol..(o + 1) * ol].iter().copied().sum())
        .collect();
    for o in 0..g.o {
        let d_o = &dout[o * ol..(o + 1) * ol];
        for c in 0..g.c {
            let x_c = &x[c * il..(c + 1) * il];
            let dx_c = &mut dx[c * il..(c + 1) * il];
            let base = (o * g.c + c) * kl;
            for ka in 0..g.k[0] {
                for kb in 0..g.k[1] {
                    for kw in 0..g.k[2] {
                        let ki = (ka * g.k[1] + kb) * g.k[2] + kw;
                        let wv = w[base + ki];
                        let mut acc = T::zero();
                        g.for_each_run(ka, kb, kw, |oo, io, n| {
                            let src = &d_o[oo..oo + n];
                            for (j, &dv) in src.iter().enumerate() {
                                let xi = io + j * sw;
                                acc += dv * x_c[xi];
                                dx_c[xi] += wv * dv;
                            }
                        });
                        dw[base + ki] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
