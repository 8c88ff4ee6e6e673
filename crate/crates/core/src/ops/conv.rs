use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Convolution weights plus geometry.
///
/// `weight` is `(out_ch, in_ch / groups, kh, kw)` and `bias`, when present,
/// is a `(1, out_ch, 1, 1)` vector.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(weight: Var, bias: Option<Var>) -> Self {
        Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }
}

/// Output extent of one spatial axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

fn geometry(xs: Shape, ws: Shape, bias: Option<Shape>, p: &ConvParams) -> Result<Geom> {
    let err = |d: String| Error::shape("conv2d", d);
    if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(Error::InvalidArgument("conv2d: stride, dilation and groups must be positive".into()));
    }
    let (cout, cin_g, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    if xs.c % p.groups != 0 || cout % p.groups != 0 {
        return Err(err(format!("groups {} must divide in {} and out {}", p.groups, xs.c, cout)));
    }
    if xs.c / p.groups != cin_g {
        return Err(err(format!("input {} vs weight {} with {} groups", xs, ws, p.groups)));
    }
    if let Some(bs) = bias {
        if bs != Shape::vector(cout) {
            return Err(err(format!("bias {bs} for {cout} output channels")));
        }
    }
    let oh = conv_out_size(xs.h, kh, p.stride, p.padding, p.dilation)
        .ok_or_else(|| err(format!("kernel {kh}x{kw} does not fit padded input {xs}")))?;
    let ow = conv_out_size(xs.w, kw, p.stride, p.padding, p.dilation)
        .ok_or_else(|| err(format!("kernel {kh}x{kw} does not fit padded input {xs}")))?;
    Ok(Geom {
        n: xs.n,
        cin: xs.c,
        h: xs.h,
        w: xs.w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride: p.stride,
        pad: p.padding,
        dil: p.dilation,
        groups: p.groups,
    })
}

/// Range of output columns `o` for which `o * stride + k * dil - pad` lands
/// inside `[0, len)`, together with the input offset at `o = lo`.
#[inline]
fn valid_range(len: usize, out: usize, k: usize, g: &Geom) -> (usize, usize) {
    let shift = (k * g.dil) as isize - g.pad as isize;
    let s = g.stride as isize;
    // o * s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // o * s + shift <= len - 1
    let hi_num = len as isize - 1 - shift;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let hi = hi.min(out as isize - 1);
    if hi < lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize + 1)
    }
}

/// 2-D convolution (cross-correlation) with grouping, dilation, stride and
/// zero padding. Gradients flow to `x`, the weight and the bias.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, p: &ConvParams) -> Result<Var> {
    let bias_shape = p.bias.map(|b| tape.shape(b));
    let g = geometry(tape.shape(x), tape.shape(p.weight), bias_shape, p)?;
    let xv = tape.rc(x);
    let wv = tape.rc(p.weight);
    let bv = p.bias.map(|b| tape.rc(b));
    let out_shape = Shape::new(g.n, g.cout, g.oh, g.ow);
    let mut y = Tensor::zeros(out_shape);
    if g.is_pointwise() {
        pointwise_forward(&g, xv.data(), wv.data(), y.data_mut());
    } else if g.is_depthwise() {
        depthwise_forward(&g, xv.data(), wv.data(), y.data_mut());
    } else {
        im2col_forward(&g, xv.data(), wv.data(), y.data_mut());
    }
    if let Some(b) = &bv {
        let plane = g.oh * g.ow;
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let bias = b.data()[i % g.cout];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    let (weight, bias) = (p.weight, p.bias);
    let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(weight)).chain(bias).collect();
    tape.record("conv2d", y, &parents, move |gy, sink| {
        let gy = gy.data();
        if let Some(b) = bias {
            if let Some(gb) = sink.buf(b) {
                let plane = g.oh * g.ow;
                for (i, chunk) in gy.chunks(plane).enumerate() {
                    let s: T = chunk.iter().fold(T::zero(), |a, &v| a + v);
                    gb[i % g.cout] += s;
                }
            }
        }
        if sink.wants(weight) {
            let gw = sink.buf(weight).expect("weight wants grad");
            if g.is_pointwise() {
                pointwise_grad_weight(&g, xv.data(), gy, gw);
            } else if g.is_depthwise() {
                depthwise_grad_weight(&g, xv.data(), gy, gw);
            } else {
                im2col_grad_weight(&g, xv.data(), gy, gw);
            }
        }
        if let Some(gx) = sink.buf(x) {
            if g.is_pointwise() {
                pointwise_grad_input(&g, wv.data(), gy, gx);
            } else if g.is_depthwise() {
                depthwise_grad_input(&g, wv.data(), gy, gx);
            } else {
                im2col_grad_input(&g, wv.data(), gy, gx);
            }
        }
    })
}

// ---- pointwise: one GEMM per sample ----

fn pointwise_forward<T: Real>(g: &Geom, x: &[T], w: &[T], y: &mut [T]) {
    let hw = g.h * g.w;
    for n in 0..g.n {
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let ys = &mut y[n * g.cout * hw..(n + 1) * g.cout * hw];
        T::gemm(g.cout, g.cin, hw, T::one(), w, g.cin as isize, 1, xs, hw as isize, 1, T::zero(), ys, hw as isize, 1);
    }
}

fn pointwise_grad_input<T: Real>(g: &Geom, w: &[T], gy: &[T], gx: &mut [T]) {
    let hw = g.h * g.w;
    for n in 0..g.n {
        let gys = &gy[n * g.cout * hw..(n + 1) * g.cout * hw];
        let gxs = &mut gx[n * g.cin * hw..(n + 1) * g.cin * hw];
        // W^T (cin x cout) * gY (cout x hw)
        T::gemm(g.cin, g.cout, hw, T::one(), w, 1, g.cin as isize, gys, hw as isize, 1, T::one(), gxs, hw as isize, 1);
    }
}

fn pointwise_grad_weight<T: Real>(g: &Geom, x: &[T], gy: &[T], gw: &mut [T]) {
    let hw = g.h * g.w;
    for n in 0..g.n {
        let gys = &gy[n * g.cout * hw..(n + 1) * g.cout * hw];
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        // gY (cout x hw) * X^T (hw x cin)
        T::gemm(g.cout, hw, g.cin, T::one(), gys, hw as isize, 1, xs, 1, hw as isize, T::one(), gw, g.cin as isize, 1);
    }
}

// ---- depthwise: direct loops over contiguous output rows ----

fn depthwise_forward<T: Real>(g: &Geom, x: &[T], w: &[T], y: &mut [T]) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xs = &x[(n * g.cin + c) * ip..][..ip];
            let ys = &mut y[(n * g.cout + c) * op..][..op];
            let wk = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (oh0, oh1) = valid_range(g.h, g.oh, ki, g);
                for kj in 0..g.kw {
                    let (ow0, ow1) = valid_range(g.w, g.ow, kj, g);
                    if ow1 <= ow0 {
                        continue;
                    }
                    let wv = wk[ki * g.kw + kj];
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + ki * g.dil - g.pad;
                        let iw0 = ow0 * g.stride + kj * g.dil - g.pad;
                        let yrow = &mut ys[oh * g.ow + ow0..oh * g.ow + ow1];
                        if g.stride == 1 {
                            let xrow = &xs[ih * g.w + iw0..][..yrow.len()];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wv * xv;
                            }
                        } else {
                            for (i, yv) in yrow.iter_mut().enumerate() {
                                *yv += wv * xs[ih * g.w + iw0 + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_grad_input<T: Real>(g: &Geom, w: &[T], gy: &[T], gx: &mut [T]) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for c in 0..g.cin {
            let gxs = &mut gx[(n * g.cin + c) * ip..][..ip];
            let gys = &gy[(n * g.cout + c) * op..][..op];
            let wk = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (oh0, oh1) = valid_range(g.h, g.oh, ki, g);
                for kj in 0..g.kw {
                    let (ow0, ow1) = valid_range(g.w, g.ow, kj, g);
                    if ow1 <= ow0 {
                        continue;
                    }
                    let wv = wk[ki * g.kw + kj];
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + ki * g.dil - g.pad;
                        let iw0 = ow0 * g.stride + kj * g.dil - g.pad;
                        let grow = &gys[oh * g.ow + ow0..oh * g.ow + ow1];
                        if g.stride == 1 {
                            let xrow = &mut gxs[ih * g.w + iw0..][..grow.len()];
                            for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                *xv += wv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                gxs[ih * g.w + iw0 + i * g.stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_grad_weight<T: Real>(g: &Geom, x: &[T], gy: &[T], gw: &mut [T]) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xs = &x[(n * g.cin + c) * ip..][..ip];
            let gys = &gy[(n * g.cout + c) * op..][..op];
            for ki in 0..g.kh {
                let (oh0, oh1) = valid_range(g.h, g.oh, ki, g);
                for kj in 0..g.kw {
                    let (ow0, ow1) = valid_range(g.w, g.ow, kj, g);
                    if ow1 <= ow0 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + ki * g.dil - g.pad;
                        let iw0 = ow0 * g.stride + kj * g.dil - g.pad;
                        let grow = &gys[oh * g.ow + ow0..oh * g.ow + ow1];
                        if g.stride == 1 {
                            let xrow = &xs[ih * g.w + iw0..][..grow.len()];
                            acc += dot(grow, xrow);
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                acc += gv * xs[ih * g.w + iw0 + i * g.stride];
                            }
                        }
                    }
                    gw[(c * g.kh + ki) * g.kw + kj] += acc;
                }
            }
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Independent accumulators let the loop vectorize.
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |x, &y| x + y);
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

// ---- general grouped convolution through im2col ----

/// Unfolds one sample/group into a `(cin_g * kh * kw) x (oh * ow)` matrix.
fn im2col<T: Real>(g: &Geom, x: &[T], n: usize, grp: usize, cols: &mut [T]) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for ci in 0..g.cin_g() {
        let xs = &x[(n * g.cin + grp * g.cin_g() + ci) * ip..][..ip];
        for ki in 0..g.kh {
            let (oh0, oh1) = valid_range(g.h, g.oh, ki, g);
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * op..][..op];
                row.iter_mut().for_each(|v| *v = T::zero());
                let (ow0, ow1) = valid_range(g.w, g.ow, kj, g);
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + ki * g.dil - g.pad;
                    for ow in ow0..ow1 {
                        let iw = ow * g.stride + kj * g.dil - g.pad;
                        row[oh * g.ow + ow] = xs[ih * g.w + iw];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geom, cols: &[T], n: usize, grp: usize, gx: &mut [T]) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    for ci in 0..g.cin_g() {
        let xs = &mut gx[(n * g.cin + grp * g.cin_g() + ci) * ip..][..ip];
        for ki in 0..g.kh {
            let (oh0, oh1) = valid_range(g.h, g.oh, ki, g);
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * op..][..op];
                let (ow0, ow1) = valid_range(g.w, g.ow, kj, g);
                for oh in oh0..oh1 {
                    let ih = oh * g.stride + ki * g.dil - g.pad;
                    for ow in ow0..ow1 {
                        let iw = ow * g.stride + kj * g.dil - g.pad;
                        xs[ih * g.w + iw] += row[oh * g.ow + ow];
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Real>(g: &Geom, x: &[T], w: &[T], y: &mut [T]) {
    let op = g.oh * g.ow;
    let k = g.cin_g() * g.kh * g.kw;
    let mut cols = vec![T::zero(); k * op];
    for n in 0..g.n {
        for grp in 0..g.groups {
            im2col(g, x, n, grp, &mut cols);
            let wg = &w[grp * g.cout_g() * k..][..g.cout_g() * k];
            let ys = &mut y[(n * g.cout + grp * g.cout_g()) * op..][..g.cout_g() * op];
            T::gemm(g.cout_g(), k, op, T::one(), wg, k as isize, 1, &cols, op as isize, 1, T::zero(), ys, op as isize, 1);
        }
    }
}

fn im2col_grad_weight<T: Real>(g: &Geom, x: &[T], gy: &[T], gw: &mut [T]) {
    let op = g.oh * g.ow;
    let k = g.cin_g() * g.kh * g.kw;
    let mut cols = vec![T::zero(); k * op];
    for n in 0..g.n {
        for grp in 0..g.groups {
            im2col(g, x, n, grp, &mut cols);
            let gys = &gy[(n * g.cout + grp * g.cout_g()) * op..][..g.cout_g() * op];
            let gwg = &mut gw[grp * g.cout_g() * k..][..g.cout_g() * k];
            // gY (cout_g x op) * cols^T (op x k)
            T::gemm(g.cout_g(), op, k, T::one(), gys, op as isize, 1, &cols, 1, op as isize, T::one(), gwg, k as isize, 1);
        }
    }
}

fn im2col_grad_input<T: Real>(g: &Geom, w: &[T], gy: &[T], gx: &mut [T]) {
    let op = g.oh * g.ow;
    let k = g.cin_g() * g.kh * g.kw;
    let mut cols = vec![T::zero(); k * op];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let gys = &gy[(n * g.cout + grp * g.cout_g()) * op..][..g.cout_g() * op];
            let wg = &w[grp * g.cout_g() * k..][..g.cout_g() * k];
            // W^T (k x cout_g) * gY (cout_g x op)
            T::gemm(k, g.cout_g(), op, T::one(), wg, 1, k as isize, gys, op as isize, 1, T::zero(), &mut cols, op as isize, 1);
            col2im(g, &cols, n, grp, gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{rand_tensor, seeded};

    /// Six-nested-loop reference convolution.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, d: usize, groups: usize) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let oh = conv_out_size(xs.h, ws.h, s, p, d).unwrap();
        let ow = conv_out_size(xs.w, ws.w, s, p, d).unwrap();
        let cout_g = ws.n / groups;
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |[n, co, i, j]| {
            let grp = co / cout_g;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..ws.c {
                for ki in 0..ws.h {
                    for kj in 0..ws.w {
                        let ih = (i * s + ki * d) as isize - p as isize;
                        let iw = (j * s + kj * d) as isize - p as isize;
                        if ih < 0 || iw < 0 || ih >= xs.h as isize || iw >= xs.w as isize {
                            continue;
                        }
                        acc += w.at(co, ci, ki, kj) * x.at(n, grp * ws.c + ci, ih as usize, iw as usize);
                    }
                }
            }
            acc
        })
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, d: usize, groups: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = b.map(|b| tape.leaf(b.clone(), false));
        let params = ConvParams::new(wv, bv).stride(s).padding(p).dilation(d).groups(groups);
        let y = conv2d(&mut tape, xv, &params).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = seeded(1);
        let x = rand_tensor(&mut rng, Shape::new(2, 1, 4, 5));
        let w = Tensor::ones(Shape::new(1, 1, 1, 1));
        let b = Tensor::zeros(Shape::vector(1));
        assert_eq!(run(&x, &w, Some(&b), 1, 0, 1, 1), x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::ones(Shape::new(1, 1, 3, 3));
        let y = run(&x, &w, None, 1, 1, 1, 1);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = seeded(2);
        let x = rand_tensor(&mut rng, Shape::new(1, 3, 5, 5));
        let w = Tensor::zeros(Shape::new(2, 3, 3, 3));
        let b = Tensor::from_vec(Shape::vector(2), vec![0.25, -1.5]).unwrap();
        let y = run(&x, &w, Some(&b), 1, 1, 1, 1);
        for c in 0..2 {
            for i in 0..25 {
                assert_eq!(y.data()[c * 25 + i], b.data()[c]);
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)), false);
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 2, 1, 1)), false);
        assert!(matches!(conv2d(&mut tape, x, &ConvParams::new(w, None)), Err(Error::Shape { .. })));
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 3, 7, 7)), false);
        assert!(conv2d(&mut tape, x, &ConvParams::new(w, None)).is_err());
    }

    #[test]
    fn depthwise_dilated_matches_reference() {
        let mut rng = seeded(3);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 9, 8));
        let w = rand_tensor(&mut rng, Shape::new(3, 1, 3, 3));
        let b = rand_tensor(&mut rng, Shape::vector(3));
        for (s, p, d) in [(1, 3, 3), (1, 1, 1), (2, 1, 1), (1, 0, 2)] {
            let want = reference(&x, &w, Some(&b), s, p, d, 3);
            let got = run(&x, &w, Some(&b), s, p, d, 3);
            assert!(want.max_abs_diff(&got) < 1e-12, "s={s} p={p} d={d}");
        }
    }

    #[test]
    fn grouped_matches_reference() {
        let mut rng = seeded(4);
        let x = rand_tensor(&mut rng, Shape::new(1, 4, 6, 5));
        let w = rand_tensor(&mut rng, Shape::new(6, 2, 3, 3));
        let want = reference(&x, &w, None, 2, 1, 1, 2);
        let got = run(&x, &w, None, 2, 1, 1, 2);
        assert!(want.max_abs_diff(&got) < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn dense_conv_matches_six_loop_reference(
            n in 1usize..=2, cin in 1usize..=3, cout in 1usize..=3,
            h in 1usize..=6, w in 1usize..=6, k in 1usize..=3, pad in 0usize..=1,
            stride in 1usize..=2, seed in 0u64..1000,
        ) {
            proptest::prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let mut rng = seeded(seed);
            let x = rand_tensor(&mut rng, Shape::new(n, cin, h, w));
            let wt = rand_tensor(&mut rng, Shape::new(cout, cin, k, k));
            let b = rand_tensor(&mut rng, Shape::vector(cout));
            let want = reference(&x, &wt, Some(&b), stride, pad, 1, 1);
            let got = run(&x, &wt, Some(&b), stride, pad, 1, 1);
            proptest::prop_assert!(want.max_abs_diff(&got) < 1e-12);
        }
    }
}
