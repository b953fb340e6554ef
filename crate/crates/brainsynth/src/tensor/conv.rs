//! Direct 3D convolution kernels (forward and both backward passes).
//!
//! Arrays are `[B, C, D, H, W]` for activations and `[Co, Ci/groups, kd, kh, kw]`
//! for weights, always in standard (row-major) layout so the innermost loop
//! runs over contiguous `W` ranges.

use super::{Arr, Scalar};
use ndarray::IxDyn;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], pad: [usize; 3], groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }

    pub fn out_spatial(&self, input: [usize; 3], kernel: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            assert!(
                padded >= kernel[a],
                "conv input {:?} smaller than kernel {:?}",
                input,
                kernel
            );
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        out
    }
}

struct Dims {
    b: usize,
    ci: usize,
    co: usize,
    ci_g: usize,
    co_g: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
}

fn dims<F: Scalar>(x: &Arr<F>, w: &Arr<F>, spec: &ConvSpec) -> Dims {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv input must be [B,C,D,H,W]");
    assert_eq!(ws.len(), 5, "conv weight must be [Co,Ci/g,kd,kh,kw]");
    let (b, ci) = (xs[0], xs[1]);
    let co = ws[0];
    assert_eq!(ci % spec.groups, 0);
    assert_eq!(co % spec.groups, 0);
    assert_eq!(ws[1], ci / spec.groups, "weight input channels mismatch");
    let inp = [xs[2], xs[3], xs[4]];
    let k = [ws[2], ws[3], ws[4]];
    Dims {
        b,
        ci,
        co,
        ci_g: ci / spec.groups,
        co_g: co / spec.groups,
        inp,
        k,
        out: spec.out_spatial(inp, k),
    }
}

// Valid output range along one axis for a fixed kernel offset:
// i = o*s + k - p must land in [0, n).
#[inline]
fn out_range(n_in: usize, n_out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi_num = n_in as isize - 1 + p as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

pub fn conv3d_fwd<F: Scalar>(
    x: &Arr<F>,
    w: &Arr<F>,
    bias: Option<&Arr<F>>,
    spec: &ConvSpec,
) -> Arr<F> {
    let d = dims(x, w, spec);
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let [od_n, oh_n, ow_n] = d.out;
    let [id_n, ih_n, iw_n] = d.inp;
    let [kd_n, kh_n, kw_n] = d.k;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let o_spatial = od_n * oh_n * ow_n;
    let mut out = vec![F::zero(); d.b * d.co * o_spatial];

    for b in 0..d.b {
        for co in 0..d.co {
            let g = co / d.co_g;
            let obase = (b * d.co + co) * o_spatial;
            let bias_v = bias.map(|bv| bv.as_slice().unwrap()[co]);
            if let Some(bv) = bias_v {
                out[obase..obase + o_spatial].iter_mut().for_each(|v| *v = bv);
            }
            for ci_l in 0..d.ci_g {
                let ci = g * d.ci_g + ci_l;
                let xch = (b * d.ci + ci) * id_n * ih_n * iw_n;
                let wch = (co * d.ci_g + ci_l) * kd_n * kh_n * kw_n;
                for kd in 0..kd_n {
                    let (od_lo, od_hi) = out_range(id_n, od_n, sd, pd, kd);
                    for kh in 0..kh_n {
                        let (oh_lo, oh_hi) = out_range(ih_n, oh_n, sh, ph, kh);
                        for kw in 0..kw_n {
                            let (ow_lo, ow_hi) = out_range(iw_n, ow_n, sw, pw, kw);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = ws[wch + (kd * kh_n + kh) * kw_n + kw];
                            let len = ow_hi - ow_lo;
                            for od in od_lo..od_hi {
                                let id = od * sd + kd - pd;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + kh - ph;
                                    let orow = obase + (od * oh_n + oh) * ow_n;
                                    let x0 = ((xch + (id * ih_n + ih) * iw_n + kw) as isize
                                        - pw as isize
                                        + (ow_lo * sw) as isize)
                                        as usize;
                                    let orow_s = &mut out[orow + ow_lo..orow + ow_hi];
                                    if sw == 1 {
                                        let x_s = &xs[x0..x0 + len];
                                        for (o, x) in orow_s.iter_mut().zip(x_s) {
                                            *o = *o + wv * *x;
                                        }
                                    } else {
                                        let x_s = &xs[x0..x0 + (len - 1) * sw + 1];
                                        for (o, x) in
                                            orow_s.iter_mut().zip(x_s.iter().step_by(sw))
                                        {
                                            *o = *o + wv * *x;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[d.b, d.co, od_n, oh_n, ow_n]), out).unwrap()
}

pub fn conv3d_bwd_x<F: Scalar>(go: &Arr<F>, x: &Arr<F>, w: &Arr<F>, spec: &ConvSpec) -> Arr<F> {
    let d = dims(x, w, spec);
    let gos = go.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let [od_n, oh_n, ow_n] = d.out;
    let [id_n, ih_n, iw_n] = d.inp;
    let [kd_n, kh_n, kw_n] = d.k;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let o_spatial = od_n * oh_n * ow_n;
    let mut gx = vec![F::zero(); d.b * d.ci * id_n * ih_n * iw_n];

    for b in 0..d.b {
        for co in 0..d.co {
            let g = co / d.co_g;
            let obase = (b * d.co + co) * o_spatial;
            for ci_l in 0..d.ci_g {
                let ci = g * d.ci_g + ci_l;
                let xch = (b * d.ci + ci) * id_n * ih_n * iw_n;
                let wch = (co * d.ci_g + ci_l) * kd_n * kh_n * kw_n;
                for kd in 0..kd_n {
                    let (od_lo, od_hi) = out_range(id_n, od_n, sd, pd, kd);
                    for kh in 0..kh_n {
                        let (oh_lo, oh_hi) = out_range(ih_n, oh_n, sh, ph, kh);
                        for kw in 0..kw_n {
                            let (ow_lo, ow_hi) = out_range(iw_n, ow_n, sw, pw, kw);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = ws[wch + (kd * kh_n + kh) * kw_n + kw];
                            let len = ow_hi - ow_lo;
                            for od in od_lo..od_hi {
                                let id = od * sd + kd - pd;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + kh - ph;
                                    let orow = obase + (od * oh_n + oh) * ow_n;
                                    let x0 = ((xch + (id * ih_n + ih) * iw_n + kw) as isize
                                        - pw as isize
                                        + (ow_lo * sw) as isize)
                                        as usize;
                                    let go_s = &gos[orow + ow_lo..orow + ow_hi];
                                    if sw == 1 {
                                        let gx_s = &mut gx[x0..x0 + len];
                                        for (x, g) in gx_s.iter_mut().zip(go_s) {
                                            *x = *x + wv * *g;
                                        }
                                    } else {
                                        let gx_s = &mut gx[x0..x0 + (len - 1) * sw + 1];
                                        for (x, g) in
                                            gx_s.iter_mut().step_by(sw).zip(go_s)
                                        {
                                            *x = *x + wv * *g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[d.b, d.ci, id_n, ih_n, iw_n]), gx).unwrap()
}

pub fn conv3d_bwd_w<F: Scalar>(go: &Arr<F>, x: &Arr<F>, w: &Arr<F>, spec: &ConvSpec) -> Arr<F> {
    let d = dims(x, w, spec);
    let gos = go.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("standard layout");
    let [od_n, oh_n, ow_n] = d.out;
    let [id_n, ih_n, iw_n] = d.inp;
    let [kd_n, kh_n, kw_n] = d.k;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.pad;
    let o_spatial = od_n * oh_n * ow_n;
    let mut gw = vec![F::zero(); d.co * d.ci_g * kd_n * kh_n * kw_n];

    for b in 0..d.b {
        for co in 0..d.co {
            let g = co / d.co_g;
            let obase = (b * d.co + co) * o_spatial;
            for ci_l in 0..d.ci_g {
                let ci = g * d.ci_g + ci_l;
                let xch = (b * d.ci + ci) * id_n * ih_n * iw_n;
                let wch = (co * d.ci_g + ci_l) * kd_n * kh_n * kw_n;
                for kd in 0..kd_n {
                    let (od_lo, od_hi) = out_range(id_n, od_n, sd, pd, kd);
                    for kh in 0..kh_n {
                        let (oh_lo, oh_hi) = out_range(ih_n, oh_n, sh, ph, kh);
                        for kw in 0..kw_n {
                            let (ow_lo, ow_hi) = out_range(iw_n, ow_n, sw, pw, kw);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            let mut acc = F::zero();
                            for od in od_lo..od_hi {
                                let id = od * sd + kd - pd;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + kh - ph;
                                    let orow = obase + (od * oh_n + oh) * ow_n;
                                    let x0 = ((xch + (id * ih_n + ih) * iw_n + kw) as isize
                                        - pw as isize
                                        + (ow_lo * sw) as isize)
                                        as usize;
                                    let go_s = &gos[orow + ow_lo..orow + ow_hi];
                                    if sw == 1 {
                                        let x_s = &xs[x0..x0 + len];
                                        for (g, x) in go_s.iter().zip(x_s) {
                                            acc = acc + *g * *x;
                                        }
                                    } else {
                                        let x_s = &xs[x0..x0 + (len - 1) * sw + 1];
                                        for (g, x) in go_s.iter().zip(x_s.iter().step_by(sw)) {
                                            acc = acc + *g * *x;
                                        }
                                    }
                                }
                            }
                            let wi = wch + (kd * kh_n + kh) * kw_n + kw;
                            gw[wi] = gw[wi] + acc;
                        }
                    }
                }
            }
        }
    }
    Arr::from_shape_vec(IxDyn(&[d.co, d.ci_g, kd_n, kh_n, kw_n]), gw).unwrap()
}

/// Bias gradient: sum of the output gradient over batch and spatial axes.
pub fn conv3d_bwd_b<F: Scalar>(go: &Arr<F>) -> Arr<F> {
    let s = go.shape();
    let (b_n, co_n) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let gos = go.as_slice().expect("standard layout");
    let mut gb = vec![F::zero(); co_n];
    for b in 0..b_n {
        for co in 0..co_n {
            let base = (b * co_n + co) * spatial;
            let mut acc = F::zero();
            for v in &gos[base..base + spatial] {
                acc = acc + *v;
            }
            gb[co] = gb[co] + acc;
        }
    }
    Arr::from_shape_vec(IxDyn(&[co_n]), gb).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    // Plain quintuple-loop oracle, no index tricks.
    fn conv_naive(x: &Arr<f64>, w: &Arr<f64>, spec: &ConvSpec) -> Arr<f64> {
        let (b_n, ci_n) = (x.shape()[0], x.shape()[1]);
        let co_n = w.shape()[0];
        let inp = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
        let out = spec.out_spatial(inp, k);
        let ci_g = ci_n / spec.groups;
        let co_g = co_n / spec.groups;
        let mut o = Arr::zeros(IxDyn(&[b_n, co_n, out[0], out[1], out[2]]));
        for b in 0..b_n {
            for co in 0..co_n {
                let g = co / co_g;
                for od in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let mut acc = 0.0;
                            for ci_l in 0..ci_g {
                                let ci = g * ci_g + ci_l;
                                for kd in 0..k[0] {
                                    for kh in 0..k[1] {
                                        for kw in 0..k[2] {
                                            let id = od * spec.stride[0] + kd;
                                            let ih = oh * spec.stride[1] + kh;
                                            let iw = ow * spec.stride[2] + kw;
                                            let (id, ih, iw) = (
                                                id as isize - spec.pad[0] as isize,
                                                ih as isize - spec.pad[1] as isize,
                                                iw as isize - spec.pad[2] as isize,
                                            );
                                            if id < 0
                                                || ih < 0
                                                || iw < 0
                                                || id >= inp[0] as isize
                                                || ih >= inp[1] as isize
                                                || iw >= inp[2] as isize
                                            {
                                                continue;
                                            }
                                            acc += x[[
                                                b,
                                                ci,
                                                id as usize,
                                                ih as usize,
                                                iw as usize,
                                            ]] * w
                                                [[co, ci_l, kd, kh, kw]];
                                        }
                                    }
                                }
                            }
                            o[[b, co, od, oh, ow]] = acc;
                        }
                    }
                }
            }
        }
        o
    }

    fn randu(shape: &[usize], seed: u64) -> Arr<f64> {
        use rand::Rng;
        let mut rng = crate::util::rng_for(seed, "convtest", 0);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_reference() {
        for (stride, pad, groups) in [
            ([1, 1, 1], [1, 1, 1], 1),
            ([2, 2, 2], [1, 1, 1], 1),
            ([2, 1, 2], [0, 1, 2], 1),
            ([1, 1, 1], [1, 1, 1], 2),
        ] {
            let x = randu(&[2, 4, 5, 6, 7], 1);
            let w = randu(&[6, 4 / groups, 3, 3, 3], 2);
            let spec = ConvSpec::new(stride, pad, groups);
            let got = conv3d_fwd(&x, &w, None, &spec);
            let want = conv_naive(&x, &w, &spec);
            let diff = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12, "stride {stride:?} pad {pad:?} g {groups}: {diff}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = ConvSpec::new([2, 1, 2], [1, 1, 0], 1);
        let x = randu(&[1, 2, 4, 4, 5], 3);
        let w = randu(&[3, 2, 3, 3, 3], 4);
        let go = randu(
            conv3d_fwd(&x, &w, None, &spec).shape(),
            5,
        );
        // loss = sum(go * conv(x, w))
        let gx = conv3d_bwd_x(&go, &x, &w, &spec);
        let gw = conv3d_bwd_w(&go, &x, &w, &spec);
        let h = 1e-6;
        let loss = |x: &Arr<f64>, w: &Arr<f64>| (&conv3d_fwd(x, w, None, &spec) * &go).sum();
        for (idx, g) in [(7usize, &gx), (11usize, &gx)] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
        for idx in [0usize, 13, 40] {
            let mut wp = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            let mut wm = w.clone();
            wm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - gw.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }
}
