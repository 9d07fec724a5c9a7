use crate::error::{ensure_arg, Result};
use crate::exec;
use crate::numerics::real::{matmul_into, MatView};
use crate::numerics::tape::{ConvGeom, Node, Op, Sink, Tape, Var};
use crate::numerics::Real;

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.in_ch / self.groups
    }

    fn cout_g(&self) -> usize {
        self.out_ch / self.groups
    }

    fn k_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_area(&self) -> usize {
        self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.groups == self.out_ch && self.groups > 1
    }

    /// Input row/col for output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

/// Output length of a sliding window, or `None` if it never fits.
pub(crate) fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

fn im2col<T: Real>(geom: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let area = oh * ow;
    for c in 0..geom.cin_g() {
        let plane = &x[c * geom.in_area()..(c + 1) * geom.in_area()];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = &mut col[((c * geom.kh + ki) * geom.kw + kj) * area..][..area];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    match geom.src(oy, ki, geom.height) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match geom.src(ox, kj, geom.width) {
                                    Some(ix) => plane[iy * geom.width + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(geom: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let area = oh * ow;
    for c in 0..geom.cin_g() {
        let plane = &mut dx[c * geom.in_area()..(c + 1) * geom.in_area()];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = &col[((c * geom.kh + ki) * geom.kw + kj) * area..][..area];
                for oy in 0..oh {
                    let Some(iy) = geom.src(oy, ki, geom.height) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = geom.src(ox, kj, geom.width) {
                            plane[iy * geom.width + ix] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(geom: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    for c in 0..geom.in_ch {
        let plane = &x[c * geom.in_area()..(c + 1) * geom.in_area()];
        let kern = &w[c * geom.kh * geom.kw..(c + 1) * geom.kh * geom.kw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ki in 0..geom.kh {
                    let Some(iy) = geom.src(oy, ki, geom.height) else { continue };
                    for kj in 0..geom.kw {
                        if let Some(ix) = geom.src(ox, kj, geom.width) {
                            acc += kern[ki * geom.kw + kj] * plane[iy * geom.width + ix];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Grouped 2-d cross-correlation. `x: [B, C, H, W]`, `w: [O, C/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure_arg!(sx.len() == 4, "conv2d input must be [B, C, H, W], got {sx:?}");
        ensure_arg!(sw.len() == 4, "conv2d weight must be [O, C/g, kh, kw], got {sw:?}");
        ensure_arg!(groups > 0 && stride > 0, "conv2d groups and stride must be positive");
        ensure_arg!(
            sx[1].is_multiple_of(groups) && sw[0].is_multiple_of(groups),
            "conv2d channels {} -> {} not divisible by {groups} groups",
            sx[1],
            sw[0]
        );
        ensure_arg!(
            sw[1] * groups == sx[1],
            "conv2d weight expects {} input channels, input has {}",
            sw[1] * groups,
            sx[1]
        );
        if let Some(b) = b {
            ensure_arg!(self.shape(b) == [sw[0]], "conv2d bias shape {:?}", self.shape(b));
        }
        let (Some(out_h), Some(out_w)) =
            (window_out(sx[2], sw[2], stride, pad), window_out(sx[3], sw[3], stride, pad))
        else {
            return Err(crate::error::Error::arg(format!(
                "conv2d kernel {}x{} does not fit input {}x{} with padding {pad}",
                sw[2], sw[3], sx[2], sx[3]
            )));
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            groups,
            out_h,
            out_w,
        };
        let out = conv_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        Ok(self.push(vec![geom.batch, geom.out_ch, out_h, out_w], out, Op::Conv2d { x, w, b, geom }))
    }

    /// Max pooling with implicit `-inf` padding; ties resolve to the lowest index.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() == 4, "maxpool2d input must be [B, C, H, W], got {s:?}");
        ensure_arg!(k > 0 && pad < k, "maxpool2d padding {pad} must be below kernel {k}");
        let (Some(oh), Some(ow)) = (window_out(s[2], k, stride, pad), window_out(s[3], k, stride, pad)) else {
            return Err(crate::error::Error::arg(format!(
                "maxpool2d window {k} larger than padded input {}x{}",
                s[2], s[3]
            )));
        };
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<usize> = None;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best.is_none_or(|b| xv[idx] > xv[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    let best = best.expect("every window overlaps the input when pad < k");
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { x, argmax }))
    }

    /// Non-overlapping `k x k` average pooling; spatial dims must divide by `k`.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() == 4, "avgpool2d input must be [B, C, H, W], got {s:?}");
        ensure_arg!(
            k > 0 && s[2].is_multiple_of(k) && s[3].is_multiple_of(k),
            "avgpool2d: {}x{} not divisible by {k}",
            s[2],
            s[3]
        );
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let scale = T::one() / T::from_usize(k * k).expect("small");
        let xv = self.value(x);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / k) * ow + xx / k] += xv[plane * h * w + y * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::AvgPool2d { x, k }))
    }

    /// Spatial mean: `[B, C, H, W] -> [B, C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(s.len() == 4, "global_avgpool input must be [B, C, H, W], got {s:?}");
        let area = s[2] * s[3];
        let inv = T::one() / T::from_usize(area).expect("small");
        let out = self.value(x).chunks(area).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x)))
    }
}

fn conv_forward<T: Real>(geom: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_len = geom.in_ch * geom.in_area();
    let out_len = geom.out_ch * geom.out_area();
    let mut out = vec![T::zero(); geom.batch * out_len];
    exec::for_each_chunk(&mut out, out_len, |bi, dst| {
        let xb = &x[bi * in_len..(bi + 1) * in_len];
        if geom.is_depthwise() {
            depthwise_forward(geom, xb, w, dst);
        } else {
            let (k, area) = (geom.k_len(), geom.out_area());
            let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * area] };
            for g in 0..geom.groups {
                let xg = &xb[g * geom.cin_g() * geom.in_area()..(g + 1) * geom.cin_g() * geom.in_area()];
                let cols: &[T] = if geom.is_pointwise() {
                    xg
                } else {
                    im2col(geom, xg, &mut col);
                    &col
                };
                let wg = &w[g * geom.cout_g() * k..(g + 1) * geom.cout_g() * k];
                matmul_into(
                    MatView::new(wg, geom.cout_g(), k, false),
                    MatView::new(cols, k, area, false),
                    T::zero(),
                    &mut dst[g * geom.cout_g() * area..(g + 1) * geom.cout_g() * area],
                );
            }
        }
        if let Some(bias) = bias {
            for (c, plane) in dst.chunks_mut(geom.out_area()).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    });
    out
}

fn conv_backward<T: Real>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    g: &[T],
    dx: Option<&mut [T]>,
    want_w: bool,
) -> Option<Vec<T>> {
    let in_len = geom.in_ch * geom.in_area();
    let out_len = geom.out_ch * geom.out_area();
    let (k, area) = (geom.k_len(), geom.out_area());
    let (oh, ow) = (geom.out_h, geom.out_w);

    if let Some(dx) = dx {
        exec::for_each_chunk(dx, in_len, |bi, dxb| {
            let gb = &g[bi * out_len..(bi + 1) * out_len];
            if geom.is_depthwise() {
                for c in 0..geom.in_ch {
                    let kern = &w[c * geom.kh * geom.kw..(c + 1) * geom.kh * geom.kw];
                    let gp = &gb[c * area..(c + 1) * area];
                    let plane = &mut dxb[c * geom.in_area()..(c + 1) * geom.in_area()];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = gp[oy * ow + ox];
                            for ki in 0..geom.kh {
                                let Some(iy) = geom.src(oy, ki, geom.height) else { continue };
                                for kj in 0..geom.kw {
                                    if let Some(ix) = geom.src(ox, kj, geom.width) {
                                        plane[iy * geom.width + ix] += d * kern[ki * geom.kw + kj];
                                    }
                                }
                            }
                        }
                    }
                }
                return;
            }
            let mut col = vec![T::zero(); k * area];
            for grp in 0..geom.groups {
                let wg = &w[grp * geom.cout_g() * k..(grp + 1) * geom.cout_g() * k];
                let gg = &gb[grp * geom.cout_g() * area..(grp + 1) * geom.cout_g() * area];
                let dxg = &mut dxb[grp * geom.cin_g() * geom.in_area()..(grp + 1) * geom.cin_g() * geom.in_area()];
                let wt = MatView::new(wg, geom.cout_g(), k, false).t();
                let gm = MatView::new(gg, geom.cout_g(), area, false);
                if geom.is_pointwise() {
                    matmul_into(wt, gm, T::one(), dxg);
                } else {
                    matmul_into(wt, gm, T::zero(), &mut col);
                    col2im(geom, &col, dxg);
                }
            }
        });
    }

    if !want_w {
        return None;
    }
    let w_len = w.len();
    let partials = exec::map_indexed(geom.batch, |bi| {
        let xb = &x[bi * in_len..(bi + 1) * in_len];
        let gb = &g[bi * out_len..(bi + 1) * out_len];
        let mut dw = vec![T::zero(); w_len];
        if geom.is_depthwise() {
            for c in 0..geom.in_ch {
                let plane = &xb[c * geom.in_area()..(c + 1) * geom.in_area()];
                let gp = &gb[c * area..(c + 1) * area];
                let dk = &mut dw[c * geom.kh * geom.kw..(c + 1) * geom.kh * geom.kw];
                for ki in 0..geom.kh {
                    for kj in 0..geom.kw {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let Some(iy) = geom.src(oy, ki, geom.height) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = geom.src(ox, kj, geom.width) {
                                    acc += gp[oy * ow + ox] * plane[iy * geom.width + ix];
                                }
                            }
                        }
                        dk[ki * geom.kw + kj] += acc;
                    }
                }
            }
            return dw;
        }
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * area] };
        for grp in 0..geom.groups {
            let xg = &xb[grp * geom.cin_g() * geom.in_area()..(grp + 1) * geom.cin_g() * geom.in_area()];
            let cols: &[T] = if geom.is_pointwise() {
                xg
            } else {
                im2col(geom, xg, &mut col);
                &col
            };
            let gg = &gb[grp * geom.cout_g() * area..(grp + 1) * geom.cout_g() * area];
            matmul_into(
                MatView::new(gg, geom.cout_g(), area, false),
                MatView::new(cols, k, area, false).t(),
                T::one(),
                &mut dw[grp * geom.cout_g() * k..(grp + 1) * geom.cout_g() * k],
            );
        }
        dw
    });
    let mut total = vec![T::zero(); w_len];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, &v)| *t += v);
    }
    Some(total)
}

pub(super) fn backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], sink: &mut Sink<'_, T>) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Conv2d { x, w, b, geom } => {
            let want_x = sink.wants(*x);
            let want_w = sink.wants(*w);
            let dw = if want_x {
                conv_backward(geom, val(*x), val(*w), g, Some(sink.buf(*x)), want_w)
            } else {
                conv_backward(geom, val(*x), val(*w), g, None, want_w)
            };
            if let Some(dw) = dw {
                sink.add(*w, dw);
            }
            if let Some(b) = b {
                if sink.wants(*b) {
                    let area = geom.out_area();
                    let mut db = vec![T::zero(); geom.out_ch];
                    for (i, plane) in g.chunks(area).enumerate() {
                        db[i % geom.out_ch] += plane.iter().copied().sum::<T>();
                    }
                    sink.add(*b, db);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let buf = sink.buf(*x);
            for (&i, &d) in argmax.iter().zip(g) {
                buf[i] += d;
            }
        }
        Op::AvgPool2d { x, k } => {
            let s = &nodes[x.0].shape;
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let scale = T::one() / T::from_usize(k * k).expect("small");
            let buf = sink.buf(*x);
            for plane in 0..s[0] * s[1] {
                for y in 0..h {
                    for xx in 0..w {
                        buf[plane * h * w + y * w + xx] += g[plane * oh * ow + (y / k) * ow + xx / k] * scale;
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = &nodes[x.0].shape;
            let area = s[2] * s[3];
            let inv = T::one() / T::from_usize(area).expect("small");
            let buf = sink.buf(*x);
            for (i, v) in buf.iter_mut().enumerate() {
                *v += g[i / area] * inv;
            }
        }
        _ => unreachable!("not a convolution/pooling op"),
    }
}
