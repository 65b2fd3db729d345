//! Per-sample forward and backward kernels for each layer kind.

use crate::scalar::{dot, Scalar};

use super::{ActShape, LayerParams, LayerSpec, NetworkParams, ParamGrads};

/// Activations recorded during a forward pass: the input to every layer plus
/// the max-pool argmax maps.
struct Trace<T> {
    inputs: Vec<Vec<T>>,
    argmax: Vec<Vec<usize>>,
    output: Vec<T>,
}

fn in_shapes<T: Scalar>(params: &NetworkParams<T>) -> Vec<ActShape> {
    let shapes = params.architecture.shapes().expect("parameters carry a validated architecture");
    let mut ins = Vec::with_capacity(shapes.len());
    ins.push(ActShape::from(params.architecture.input));
    ins.extend_from_slice(&shapes[..shapes.len().saturating_sub(1)]);
    ins
}

pub(super) fn forward_sample<T: Scalar>(params: &NetworkParams<T>, input: &[T]) -> Vec<T> {
    run(params, input, false).output
}

fn run<T: Scalar>(params: &NetworkParams<T>, input: &[T], record: bool) -> Trace<T> {
    let shapes = in_shapes(params);
    let mut trace = Trace { inputs: Vec::new(), argmax: Vec::new(), output: Vec::new() };
    let mut x = input.to_vec();
    for ((layer, p), shape) in params.architecture.layers.iter().zip(&params.layers).zip(&shapes) {
        let (y, arg) = match *layer {
            LayerSpec::Conv2d { out_channels, .. } => (conv_forward(&x, *shape, out_channels, p), Vec::new()),
            LayerSpec::Relu => (x.iter().map(|&v| v.max(T::zero())).collect(), Vec::new()),
            LayerSpec::MaxPool => pool_forward(&x, *shape),
            LayerSpec::Flatten => (x.clone(), Vec::new()),
            LayerSpec::Dense { in_dim, out_dim } => (dense_forward(&x, in_dim, out_dim, p), Vec::new()),
            LayerSpec::L2Norm => (l2_forward(&x), Vec::new()),
        };
        if record {
            trace.inputs.push(std::mem::replace(&mut x, y));
            trace.argmax.push(arg);
        } else {
            x = y;
        }
    }
    trace.output = x;
    trace
}

/// Recomputes the activations for `input` and accumulates parameter gradients
/// for `grad_out` into `acc`.
pub(super) fn backward_sample<T: Scalar>(
    params: &NetworkParams<T>,
    input: &[T],
    grad_out: &[T],
    acc: &mut ParamGrads<T>,
) {
    let trace = run(params, input, true);
    let shapes = in_shapes(params);
    let mut g = grad_out.to_vec();
    let layers = &params.architecture.layers;
    for i in (0..layers.len()).rev() {
        let x = &trace.inputs[i];
        let need_input_grad = i > 0;
        g = match layers[i] {
            LayerSpec::Conv2d { out_channels, .. } => {
                conv_backward(x, shapes[i], out_channels, &params.layers[i], &g, &mut acc.layers[i], need_input_grad)
            }
            LayerSpec::Relu => x.iter().zip(&g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect(),
            LayerSpec::MaxPool => {
                let mut gx = vec![T::zero(); x.len()];
                for (&src, &gv) in trace.argmax[i].iter().zip(&g) {
                    gx[src] = gx[src] + gv;
                }
                gx
            }
            LayerSpec::Flatten => g,
            LayerSpec::Dense { in_dim, out_dim } => {
                dense_backward(x, in_dim, out_dim, &params.layers[i], &g, &mut acc.layers[i], need_input_grad)
            }
            LayerSpec::L2Norm => l2_backward(x, &g),
        };
    }
}

fn dense_forward<T: Scalar>(x: &[T], in_dim: usize, out_dim: usize, p: &LayerParams<T>) -> Vec<T> {
    (0..out_dim).map(|o| p.bias[o] + dot(&p.weights[o * in_dim..(o + 1) * in_dim], x)).collect()
}

fn dense_backward<T: Scalar>(
    x: &[T],
    in_dim: usize,
    out_dim: usize,
    p: &LayerParams<T>,
    g: &[T],
    acc: &mut LayerParams<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let mut gx = if need_input_grad { vec![T::zero(); in_dim] } else { Vec::new() };
    for (o, &go) in g.iter().enumerate().take(out_dim) {
        if go == T::zero() {
            continue;
        }
        acc.bias[o] = acc.bias[o] + go;
        let row = o * in_dim..(o + 1) * in_dim;
        for (w, &xi) in acc.weights[row.clone()].iter_mut().zip(x) {
            *w = *w + go * xi;
        }
        if need_input_grad {
            for (gxi, &w) in gx.iter_mut().zip(&p.weights[row]) {
                *gxi = *gxi + go * w;
            }
        }
    }
    gx
}

fn conv_forward<T: Scalar>(x: &[T], shape: ActShape, out_c: usize, p: &LayerParams<T>) -> Vec<T> {
    let ActShape::Volume { c: in_c, h, w } = shape else { unreachable!("conv input is a volume") };
    let mut y = vec![T::zero(); out_c * h * w];
    for o in 0..out_c {
        let plane = &mut y[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = p.bias[o]);
        for i in 0..in_c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let k = &p.weights[(o * in_c + i) * 9..(o * in_c + i + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wk = k[ky * 3 + kx];
                    if wk == T::zero() {
                        continue;
                    }
                    // output (yy, xx) reads input (yy + ky - 1, xx + kx - 1)
                    let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for yy in y_lo..y_hi {
                        let sy = yy + ky - 1;
                        let out_row = &mut plane[yy * w..(yy + 1) * w];
                        let in_row = &src[sy * w..(sy + 1) * w];
                        for xx in x_lo..x_hi {
                            out_row[xx] = out_row[xx] + wk * in_row[xx + kx - 1];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward<T: Scalar>(
    x: &[T],
    shape: ActShape,
    out_c: usize,
    p: &LayerParams<T>,
    g: &[T],
    acc: &mut LayerParams<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let ActShape::Volume { c: in_c, h, w } = shape else { unreachable!("conv input is a volume") };
    let mut gx = if need_input_grad { vec![T::zero(); in_c * h * w] } else { Vec::new() };
    for o in 0..out_c {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        acc.bias[o] = acc.bias[o] + gplane.iter().copied().sum::<T>();
        for i in 0..in_c {
            let src = &x[i * h * w..(i + 1) * h * w];
            let kidx = (o * in_c + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let wk = p.weights[kidx + ky * 3 + kx];
                    let mut dw = T::zero();
                    for yy in y_lo..y_hi {
                        let sy = yy + ky - 1;
                        let g_row = &gplane[yy * w..(yy + 1) * w];
                        let in_row = &src[sy * w..(sy + 1) * w];
                        for xx in x_lo..x_hi {
                            dw = dw + g_row[xx] * in_row[xx + kx - 1];
                        }
                        if need_input_grad {
                            let gx_row = &mut gx[i * h * w + sy * w..i * h * w + (sy + 1) * w];
                            for xx in x_lo..x_hi {
                                gx_row[xx + kx - 1] = gx_row[xx + kx - 1] + wk * g_row[xx];
                            }
                        }
                    }
                    acc.weights[kidx + ky * 3 + kx] = acc.weights[kidx + ky * 3 + kx] + dw;
                }
            }
        }
    }
    gx
}

/// 2×2 stride-2 max pooling. Ties resolve to the first position in row-major
/// window order.
fn pool_forward<T: Scalar>(x: &[T], shape: ActShape) -> (Vec<T>, Vec<usize>) {
    let ActShape::Volume { c, h, w } = shape else { unreachable!("pool input is a volume") };
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

fn l2_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = dot(x, x).sqrt();
    if norm == T::zero() {
        log::warn!("degenerate embedding: L2 normalization of a zero vector, returning zeros");
        return vec![T::zero(); x.len()];
    }
    x.iter().map(|&v| v / norm).collect()
}

/// d(x/|x|) applied to `g`: (g - y (y·g)) / |x|. Zero at the singular point.
fn l2_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    let norm = dot(x, x).sqrt();
    if norm == T::zero() {
        return vec![T::zero(); x.len()];
    }
    let y: Vec<T> = x.iter().map(|&v| v / norm).collect();
    let yg = dot(&y, g);
    y.iter().zip(g).map(|(&yi, &gi)| (gi - yi * yg) / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let shape = ActShape::Volume { c: 1, h: 2, w: 4 };
        let x = [1.0, 5.0, 2.0, 2.0, 3.0, 0.0, 7.0, 2.0];
        let (y, arg) = pool_forward(&x, shape);
        assert_eq!(y, vec![5.0, 7.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let shape = ActShape::Volume { c: 1, h: 3, w: 3 };
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let p = LayerParams { weights: k, bias: vec![0.5] };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let y = conv_forward(&x, shape, 1, &p);
        assert_eq!(y, x.iter().map(|v| v + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn conv_shift_kernel_zero_pads() {
        // kernel tap (ky=1, kx=0) reads the left neighbour
        let shape = ActShape::Volume { c: 1, h: 2, w: 3 };
        let mut k = vec![0.0; 9];
        k[3] = 1.0;
        let p = LayerParams { weights: k, bias: vec![0.0] };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(conv_forward(&x, shape, 1, &p), vec![0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn l2_backward_is_orthogonal_to_output() {
        let x = [3.0f64, 4.0, 0.0];
        let g = [1.0, 2.0, 3.0];
        let gx = l2_backward(&x, &g);
        let y = l2_forward(&x);
        assert!(dot(&gx, &y).abs() < 1e-15);
    }
}
