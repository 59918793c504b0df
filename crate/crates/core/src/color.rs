//! sRGB <-> CIELAB conversion (D65 white point) with analytic Jacobians.
//!
//! Color statistics transfer runs in Lab space; the Jacobians let loss
//! gradients propagate through the transfer back to RGB pixels.

use crate::image::Image;
use crate::num::{c, Scalar};

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
// sRGB (linear) -> XYZ, rows sum to the D65 white point.
const RGB2XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ2RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
const DELTA: f64 = 6.0 / 29.0;

#[inline]
fn srgb_to_linear<T: Scalar>(v: T) -> T {
    if v <= c(0.04045) {
        v / c(12.92)
    } else {
        ((v + c(0.055)) / c(1.055)).powf(c(2.4))
    }
}

#[inline]
fn srgb_to_linear_d<T: Scalar>(v: T) -> T {
    if v <= c(0.04045) {
        c(1.0 / 12.92)
    } else {
        c::<T>(2.4 / 1.055) * ((v + c(0.055)) / c(1.055)).powf(c(1.4))
    }
}

#[inline]
fn linear_to_srgb<T: Scalar>(v: T) -> T {
    if v <= c(0.0031308) {
        v * c(12.92)
    } else {
        c::<T>(1.055) * v.powf(c(1.0 / 2.4)) - c(0.055)
    }
}

#[inline]
fn linear_to_srgb_d<T: Scalar>(v: T) -> T {
    if v <= c(0.0031308) {
        c(12.92)
    } else {
        c::<T>(1.055 / 2.4) * v.powf(c(1.0 / 2.4 - 1.0))
    }
}

#[inline]
fn lab_f<T: Scalar>(t: T) -> T {
    if t > c(DELTA * DELTA * DELTA) {
        t.cbrt()
    } else {
        t / c(3.0 * DELTA * DELTA) + c(4.0 / 29.0)
    }
}

#[inline]
fn lab_f_d<T: Scalar>(t: T) -> T {
    if t > c(DELTA * DELTA * DELTA) {
        c::<T>(1.0 / 3.0) * t.cbrt().powi(-2)
    } else {
        c(1.0 / (3.0 * DELTA * DELTA))
    }
}

#[inline]
fn lab_f_inv<T: Scalar>(t: T) -> T {
    if t > c(DELTA) {
        t * t * t
    } else {
        c::<T>(3.0 * DELTA * DELTA) * (t - c(4.0 / 29.0))
    }
}

#[inline]
fn lab_f_inv_d<T: Scalar>(t: T) -> T {
    if t > c(DELTA) {
        c::<T>(3.0) * t * t
    } else {
        c(3.0 * DELTA * DELTA)
    }
}

/// One sRGB pixel (components in [0, 1]) to Lab.
pub fn rgb_to_lab<T: Scalar>(rgb: [T; 3]) -> [T; 3] {
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    let mut fv = [T::zero(); 3];
    for i in 0..3 {
        let mut x = T::zero();
        for (j, &l) in lin.iter().enumerate() {
            x += c::<T>(RGB2XYZ[i][j]) * l;
        }
        fv[i] = lab_f(x / c(WHITE[i]));
    }
    [
        c::<T>(116.0) * fv[1] - c(16.0),
        c::<T>(500.0) * (fv[0] - fv[1]),
        c::<T>(200.0) * (fv[1] - fv[2]),
    ]
}

/// One Lab pixel back to sRGB, clamped to [0, 1].
pub fn lab_to_rgb<T: Scalar>(lab: [T; 3]) -> [T; 3] {
    let fy = (lab[0] + c(16.0)) / c(116.0);
    let fx = fy + lab[1] / c(500.0);
    let fz = fy - lab[2] / c(200.0);
    let xyz = [
        lab_f_inv(fx) * c(WHITE[0]),
        lab_f_inv(fy) * c(WHITE[1]),
        lab_f_inv(fz) * c(WHITE[2]),
    ];
    let mut rgb = [T::zero(); 3];
    for (i, out) in rgb.iter_mut().enumerate() {
        let mut x = T::zero();
        for (j, &v) in xyz.iter().enumerate() {
            x += c::<T>(XYZ2RGB[i][j]) * v;
        }
        *out = linear_to_srgb(x).max(T::zero()).min(T::one());
    }
    rgb
}

/// Jacobian d(lab)/d(rgb) at an sRGB pixel; row `i` differentiates Lab
/// component `i` by the three RGB components.
pub fn rgb_to_lab_jacobian<T: Scalar>(rgb: [T; 3]) -> [[T; 3]; 3] {
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    let lin_d = [srgb_to_linear_d(rgb[0]), srgb_to_linear_d(rgb[1]), srgb_to_linear_d(rgb[2])];
    // d f_i / d rgb_j through xyz_i = sum_k M[i][k] lin_k / WHITE[i]
    let mut df = [[T::zero(); 3]; 3];
    for i in 0..3 {
        let mut x = T::zero();
        for (k, &l) in lin.iter().enumerate() {
            x += c::<T>(RGB2XYZ[i][k]) * l;
        }
        let fd = lab_f_d(x / c(WHITE[i]));
        for j in 0..3 {
            df[i][j] = fd * c::<T>(RGB2XYZ[i][j] / WHITE[i]) * lin_d[j];
        }
    }
    let mut jac = [[T::zero(); 3]; 3];
    for j in 0..3 {
        jac[0][j] = c::<T>(116.0) * df[1][j];
        jac[1][j] = c::<T>(500.0) * (df[0][j] - df[1][j]);
        jac[2][j] = c::<T>(200.0) * (df[1][j] - df[2][j]);
    }
    jac
}

/// Jacobian d(rgb)/d(lab) at a Lab pixel. Where the final clamp to [0, 1] is
/// active the corresponding row is zero.
pub fn lab_to_rgb_jacobian<T: Scalar>(lab: [T; 3]) -> [[T; 3]; 3] {
    let fy = (lab[0] + c(16.0)) / c(116.0);
    let fx = fy + lab[1] / c(500.0);
    let fz = fy - lab[2] / c(200.0);
    // d(fx,fy,fz)/d(lab)
    let dfx = [c::<T>(1.0 / 116.0), c(1.0 / 500.0), T::zero()];
    let dfy = [c::<T>(1.0 / 116.0), T::zero(), T::zero()];
    let dfz = [c::<T>(1.0 / 116.0), T::zero(), c(-1.0 / 200.0)];
    let dxyz_df = [lab_f_inv_d(fx) * c(WHITE[0]), lab_f_inv_d(fy) * c(WHITE[1]), lab_f_inv_d(fz) * c(WHITE[2])];
    let xyz = [
        lab_f_inv(fx) * c(WHITE[0]),
        lab_f_inv(fy) * c(WHITE[1]),
        lab_f_inv(fz) * c(WHITE[2]),
    ];
    let df_dlab = [dfx, dfy, dfz];
    let mut jac = [[T::zero(); 3]; 3];
    for i in 0..3 {
        let mut linear = T::zero();
        for (k, &v) in xyz.iter().enumerate() {
            linear += c::<T>(XYZ2RGB[i][k]) * v;
        }
        let srgb = linear_to_srgb(linear);
        if srgb < T::zero() || srgb > T::one() {
            continue; // clamped channel: zero gradient
        }
        let gd = linear_to_srgb_d(linear);
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += c::<T>(XYZ2RGB[i][k]) * dxyz_df[k] * df_dlab[k][j];
            }
            jac[i][j] = gd * acc;
        }
    }
    jac
}

/// Converts an RGB image to a Lab-valued buffer of the same layout.
pub fn image_to_lab<T: Scalar>(image: &Image<T>) -> Image<T> {
    let mut out = Image::zeros(image.height, image.width, 3);
    for y in 0..image.height {
        for x in 0..image.width {
            let lab = rgb_to_lab(image.rgb(y, x));
            for (ch, &v) in lab.iter().enumerate() {
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn white_maps_to_l100() {
        let lab = rgb_to_lab([1.0f64, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-3, "L = {}", lab[0]);
        assert!(lab[1].abs() < 0.5 && lab[2].abs() < 0.5, "a,b = {},{}", lab[1], lab[2]);
    }

    #[test]
    fn black_maps_to_l0() {
        let lab = rgb_to_lab([0.0f64, 0.0, 0.0]);
        assert_eq!(lab[0], 0.0);
    }

    #[test]
    fn round_trip_within_1e3() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let rgb = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            let back = lab_to_rgb(rgb_to_lab(rgb));
            for ch in 0..3 {
                assert!(
                    (back[ch] - rgb[ch]).abs() < 1e-3,
                    "round trip off: {:?} -> {:?}",
                    rgb,
                    back
                );
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..50 {
            // Stay away from the piecewise breakpoints and the gamut boundary.
            let rgb: [f64; 3] = [
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ];
            let jac = rgb_to_lab_jacobian(rgb);
            for j in 0..3 {
                let mut up = rgb;
                let mut dn = rgb;
                up[j] += h;
                dn[j] -= h;
                let lu = rgb_to_lab(up);
                let ld = rgb_to_lab(dn);
                for i in 0..3 {
                    let fd = (lu[i] - ld[i]) / (2.0 * h);
                    assert!((fd - jac[i][j]).abs() < 1e-4 * (1.0 + fd.abs()), "{} vs {}", fd, jac[i][j]);
                }
            }

            let lab = rgb_to_lab(rgb);
            let jac = lab_to_rgb_jacobian(lab);
            for j in 0..3 {
                let mut up = lab;
                let mut dn = lab;
                up[j] += h;
                dn[j] -= h;
                let ru = lab_to_rgb(up);
                let rd = lab_to_rgb(dn);
                for i in 0..3 {
                    let fd = (ru[i] - rd[i]) / (2.0 * h);
                    assert!((fd - jac[i][j]).abs() < 1e-4 * (1.0 + fd.abs()), "{} vs {}", fd, jac[i][j]);
                }
            }
        }
    }
}
