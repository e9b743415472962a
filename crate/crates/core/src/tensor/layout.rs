use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Concatenates along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat needs matching N,H,W: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        out.extend_from_slice(a.sample(s));
        out.extend_from_slice(b.sample(s));
    }
    Ok(Tensor::from_parts([na, ca + cb, ha, wa], out))
}

/// Inverse of [`concat_channels`]; also its backward pass.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = x.dims();
    if c_first > c {
        return Err(Error::shape(format!("split at {c_first} beyond {c} channels")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * c_first * plane);
    let mut b = Vec::with_capacity(n * (c - c_first) * plane);
    for s in 0..n {
        let src = x.sample(s);
        a.extend_from_slice(&src[..c_first * plane]);
        b.extend_from_slice(&src[c_first * plane..]);
    }
    Ok((
        Tensor::from_parts([n, c_first, h, w], a),
        Tensor::from_parts([n, c - c_first, h, w], b),
    ))
}

/// Where the original plane sits inside a padded one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub top: usize,
    pub left: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl PadInfo {
    pub fn is_identity(&self) -> bool {
        self.orig_h == self.padded_h && self.orig_w == self.padded_w
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`), folded for any offset.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads each plane to `target_h × target_w`; odd remainders go to the bottom/right.
pub fn pad_reflect_to<T: Scalar>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Result<(Tensor<T>, PadInfo)> {
    let [n, c, h, w] = x.dims();
    if target_h < h || target_w < w {
        return Err(Error::shape(format!(
            "pad target {target_h}x{target_w} smaller than input {h}x{w}"
        )));
    }
    if (h == 0 || w == 0) && (target_h > h || target_w > w) {
        return Err(Error::shape("cannot reflect-pad an empty plane"));
    }
    let info = PadInfo {
        top: (target_h - h) / 2,
        left: (target_w - w) / 2,
        orig_h: h,
        orig_w: w,
        padded_h: target_h,
        padded_w: target_w,
    };
    let rows: Vec<usize> = (0..target_h)
        .map(|y| reflect(y as isize - info.top as isize, h))
        .collect();
    let cols: Vec<usize> = (0..target_w)
        .map(|x| reflect(x as isize - info.left as isize, w))
        .collect();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane(s, ch);
            for &r in &rows {
                let row = &plane[r * w..(r + 1) * w];
                out.extend(cols.iter().map(|&col| row[col]));
            }
        }
    }
    Ok((Tensor::from_parts([n, c, target_h, target_w], out), info))
}

/// Removes exactly what [`pad_reflect_to`] added.
pub fn crop_back<T: Scalar>(x: &Tensor<T>, info: &PadInfo) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if (h, w) != (info.padded_h, info.padded_w) {
        return Err(Error::shape(format!(
            "crop_back expects {}x{}, got {h}x{w}",
            info.padded_h, info.padded_w
        )));
    }
    let mut out = Vec::with_capacity(n * c * info.orig_h * info.orig_w);
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane(s, ch);
            for y in info.top..info.top + info.orig_h {
                out.extend_from_slice(&plane[y * w + info.left..y * w + info.left + info.orig_w]);
            }
        }
    }
    Ok(Tensor::from_parts([n, c, info.orig_h, info.orig_w], out))
}

/// Gradient of [`pad_reflect_to`]: folds padded-plane gradients back onto their sources.
pub fn pad_reflect_backward<T: Scalar>(grad: &Tensor<T>, info: &PadInfo) -> Result<Tensor<T>> {
    let [n, c, h, w] = grad.dims();
    if (h, w) != (info.padded_h, info.padded_w) {
        return Err(Error::shape("pad backward dims mismatch"));
    }
    let (oh, ow) = (info.orig_h, info.orig_w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            let g = grad.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for y in 0..h {
                let r = reflect(y as isize - info.top as isize, oh);
                for x in 0..w {
                    let col = reflect(x as isize - info.left as isize, ow);
                    dst[r * ow + col] += g[y * w + x];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn concat_shape_and_inverse() {
        let a = Tensor::<f32>::new([1, 2, 4, 4], Fill::Normal(1.0), 1).unwrap();
        let b = Tensor::<f32>::new([1, 3, 4, 4], Fill::Normal(1.0), 2).unwrap();
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.dims(), [1, 5, 4, 4]);
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 2, 4, 5]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn pad_126_to_128_adds_one_each_side() {
        let x = Tensor::<f32>::new([1, 1, 126, 126], Fill::Normal(1.0), 3).unwrap();
        let (p, info) = pad_reflect_to(&x, 128, 128).unwrap();
        assert_eq!((info.top, info.left), (1, 1));
        assert_eq!(p.dims(), [1, 1, 128, 128]);
        assert_eq!(p.get(0, 0, 0, 5), x.get(0, 0, 1, 4));
        assert_eq!(p.get(0, 0, 127, 127), x.get(0, 0, 124, 124));
        assert_eq!(crop_back(&p, &info).unwrap(), x);
    }

    #[test]
    fn odd_remainder_goes_bottom_right() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 5]);
        let (_, info) = pad_reflect_to(&x, 8, 8).unwrap();
        assert_eq!((info.top, info.left), (1, 1));
    }

    #[test]
    fn constant_pads_to_constant() {
        let x = Tensor::<f32>::full([1, 2, 3, 3], 2.5);
        let (p, _) = pad_reflect_to(&x, 16, 16).unwrap();
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn smaller_target_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 5, 5]);
        assert!(pad_reflect_to(&x, 4, 8).is_err());
    }

    #[test]
    fn pad_backward_is_adjoint() {
        let x = Tensor::<f64>::new([1, 2, 5, 3], Fill::Normal(1.0), 1).unwrap();
        let (p, info) = pad_reflect_to(&x, 16, 8).unwrap();
        let g = Tensor::<f64>::new(p.dims(), Fill::Normal(1.0), 2).unwrap();
        let gx = pad_reflect_backward(&g, &info).unwrap();
        let lhs: f64 = p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
