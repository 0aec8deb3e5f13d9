//! TV-L1 optical flow (duality-based primal-dual scheme over a coarse-to-fine
//! pyramid) and the 8-bit flow-image quantization.
//!
//! Convention: the returned `(u, v)` satisfies `next(x + u, y + v) ~ prev(x, y)`,
//! so content moving right yields positive `u`.

use serde::{Deserialize, Serialize};

use super::media::Image;
use crate::error::{MovError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvL1Config {
    /// Data-term weight.
    pub lambda: f64,
    /// Coupling between the primal variable and its auxiliary copy.
    pub theta: f64,
    /// Dual step size.
    pub tau: f64,
    pub pyramid_levels: usize,
    pub warps: usize,
    /// Inner iterations per warp.
    pub iterations: usize,
}

impl Default for TvL1Config {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            pyramid_levels: 3,
            warps: 2,
            iterations: 30,
        }
    }
}

/// Dense per-pixel motion, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn max_norm_inf(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn median_u(&self) -> f64 {
        median(&self.u)
    }

    pub fn median_v(&self) -> f64 {
        median(&self.v)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            d: vec![0.0; h * w],
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.d[y * self.w + x]
    }

    /// Bilinear sample with edge replication.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples to `h x w` with pixel-center alignment.
    fn resize(&self, h: usize, w: usize) -> Plane {
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.d[y * w + x] =
                    self.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5);
            }
        }
        out
    }

    /// 3x3 binomial blur then halve (rounding up).
    fn downsample(&self) -> Plane {
        let mut b = Plane::zeros(self.h, self.w);
        let k = [0.25, 0.5, 0.25];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (dy, ky) in k.iter().enumerate() {
                    for (dx, kx) in k.iter().enumerate() {
                        let yy = (y + dy).saturating_sub(1).min(self.h - 1);
                        let xx = (x + dx).saturating_sub(1).min(self.w - 1);
                        s += ky * kx * self.at(yy, xx);
                    }
                }
                b.d[y * self.w + x] = s;
            }
        }
        b.resize(self.h.div_ceil(2), self.w.div_ceil(2))
    }

    /// Central differences with one-sided edges.
    fn gradient(&self) -> (Plane, Plane) {
        let mut gx = Plane::zeros(self.h, self.w);
        let mut gy = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(self.w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(self.h - 1);
                let dxn = (xr - xl).max(1) as f64;
                let dyn_ = (yd - yu).max(1) as f64;
                gx.d[y * self.w + x] = (self.at(y, xr) - self.at(y, xl)) / dxn;
                gy.d[y * self.w + x] = (self.at(yd, x) - self.at(yu, x)) / dyn_;
            }
        }
        (gx, gy)
    }
}

/// Forward differences, zero at the far edge.
fn forward_gradient(p: &Plane, gx: &mut [f64], gy: &mut [f64]) {
    let (h, w) = (p.h, p.w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { p.d[i + 1] - p.d[i] } else { 0.0 };
            gy[i] = if y + 1 < h { p.d[i + w] - p.d[i] } else { 0.0 };
        }
    }
}

/// Backward-difference divergence, the negative adjoint of [`forward_gradient`].
fn divergence(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x == 0 {
                px[i]
            } else if x + 1 == w {
                -px[i - 1]
            } else {
                px[i] - px[i - 1]
            };
            let dy = if y == 0 {
                py[i]
            } else if y + 1 == h {
                -py[i - w]
            } else {
                py[i] - py[i - w]
            };
            out[i] = dx + dy;
        }
    }
}

fn solve_level(i0: &Plane, i1: &Plane, u1: &mut Plane, u2: &mut Plane, cfg: &TvL1Config) {
    let (h, w) = (i0.h, i0.w);
    let n = h * w;
    let l_t = cfg.lambda * cfg.theta;
    let taut = cfg.tau / cfg.theta;
    let (i1x, i1y) = i1.gradient();
    let mut p11 = vec![0.0; n];
    let mut p12 = vec![0.0; n];
    let mut p21 = vec![0.0; n];
    let mut p22 = vec![0.0; n];
    let mut div1 = vec![0.0; n];
    let mut div2 = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut wx = vec![0.0; n];
    let mut wy = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut rho_c = vec![0.0; n];
    for _ in 0..cfg.warps {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sy, sx) = (y as f64 + u2.d[i], x as f64 + u1.d[i]);
                let warped = i1.sample(sy, sx);
                wx[i] = i1x.sample(sy, sx);
                wy[i] = i1y.sample(sy, sx);
                grad[i] = wx[i] * wx[i] + wy[i] * wy[i];
                rho_c[i] = warped - wx[i] * u1.d[i] - wy[i] * u2.d[i] - i0.d[i];
            }
        }
        for _ in 0..cfg.iterations {
            for i in 0..n {
                let rho = rho_c[i] + wx[i] * u1.d[i] + wy[i] * u2.d[i];
                let (d1, d2) = if rho < -l_t * grad[i] {
                    (l_t * wx[i], l_t * wy[i])
                } else if rho > l_t * grad[i] {
                    (-l_t * wx[i], -l_t * wy[i])
                } else if grad[i] > 1e-12 {
                    (-rho / grad[i] * wx[i], -rho / grad[i] * wy[i])
                } else {
                    (0.0, 0.0)
                };
                // v = u + d, then u = v + theta * div(p)
                u1.d[i] += d1;
                u2.d[i] += d2;
            }
            divergence(&p11, &p12, h, w, &mut div1);
            divergence(&p21, &p22, h, w, &mut div2);
            for i in 0..n {
                u1.d[i] += cfg.theta * div1[i];
                u2.d[i] += cfg.theta * div2[i];
            }
            forward_gradient(u1, &mut gx, &mut gy);
            for i in 0..n {
                let g = 1.0 + taut * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                p11[i] = (p11[i] + taut * gx[i]) / g;
                p12[i] = (p12[i] + taut * gy[i]) / g;
            }
            forward_gradient(u2, &mut gx, &mut gy);
            for i in 0..n {
                let g = 1.0 + taut * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                p21[i] = (p21[i] + taut * gx[i]) / g;
                p22[i] = (p22[i] + taut * gy[i]) / g;
            }
        }
    }
}

/// Estimates the flow from `prev` to `next` (both converted to luma).
pub fn estimate_flow(prev: &Image, next: &Image, cfg: &TvL1Config) -> Result<FlowField> {
    if prev.height != next.height || prev.width != next.width {
        return Err(MovError::invalid(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            prev.height, prev.width, next.height, next.width
        )));
    }
    if cfg.pyramid_levels == 0 || !(cfg.theta > 0.0 && cfg.tau > 0.0 && cfg.lambda > 0.0) {
        return Err(MovError::config("TV-L1 needs positive lambda/theta/tau and >= 1 level"));
    }
    let (h, w) = (prev.height, prev.width);
    let mut p0 = vec![Plane {
        h,
        w,
        d: prev.to_gray(),
    }];
    let mut p1 = vec![Plane {
        h,
        w,
        d: next.to_gray(),
    }];
    for _ in 1..cfg.pyramid_levels {
        let (a, b) = (p0.last().unwrap(), p1.last().unwrap());
        if a.h < 8 || a.w < 8 {
            break;
        }
        let (da, db) = (a.downsample(), b.downsample());
        p0.push(da);
        p1.push(db);
    }
    let coarsest = p0.last().unwrap();
    let mut u1 = Plane::zeros(coarsest.h, coarsest.w);
    let mut u2 = Plane::zeros(coarsest.h, coarsest.w);
    for lvl in (0..p0.len()).rev() {
        let (i0, i1) = (&p0[lvl], &p1[lvl]);
        if u1.h != i0.h || u1.w != i0.w {
            let (sy, sx) = (i0.h as f64 / u1.h as f64, i0.w as f64 / u1.w as f64);
            u1 = u1.resize(i0.h, i0.w);
            u2 = u2.resize(i0.h, i0.w);
            u1.d.iter_mut().for_each(|x| *x *= sx);
            u2.d.iter_mut().for_each(|x| *x *= sy);
        }
        solve_level(i0, i1, &mut u1, &mut u2, cfg);
    }
    let out = FlowField {
        height: h,
        width: w,
        u: u1.d,
        v: u2.d,
    };
    if out.u.iter().chain(&out.v).any(|x| !x.is_finite()) {
        return Err(MovError::validation("optical flow diverged"));
    }
    Ok(out)
}

/// Truncation bound of the flow quantizer, pixels per frame.
pub const FLOW_BOUND: f64 = 20.0;

/// `round((clamp(x, -20, 20) + 20) * 255 / 40)`, half away from zero.
pub fn quantize_flow_value(x: f64) -> u8 {
    let c = x.clamp(-FLOW_BOUND, FLOW_BOUND);
    // f64::round rounds half away from zero
    ((c + FLOW_BOUND) * 255.0 / (2.0 * FLOW_BOUND)).round() as u8
}

/// Three-channel image `(q(u), q(v), 0)`.
pub fn flow_to_image(flow: &FlowField) -> Image {
    let mut data = Vec::with_capacity(flow.u.len() * 3);
    for (u, v) in flow.u.iter().zip(&flow.v) {
        data.extend_from_slice(&[quantize_flow_value(*u), quantize_flow_value(*v), 0]);
    }
    Image {
        height: flow.height,
        width: flow.width,
        channels: 3,
        data,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Smooth periodic texture (multi-scale sinusoids), wraps cleanly on 48 px.
    pub(crate) fn texture(h: usize, w: usize, dx: isize, dy: isize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let xs = (x as isize - dx).rem_euclid(w as isize) as f64;
                let ys = (y as isize - dy).rem_euclid(h as isize) as f64;
                let t = std::f64::consts::TAU;
                let val = 128.0
                    + 50.0 * (t * xs / w as f64 * 2.0).sin() * (t * ys / h as f64 * 3.0).cos()
                    + 35.0 * (t * (xs + 2.0 * ys) / w as f64 * 5.0).sin()
                    + 25.0 * (t * (3.0 * xs - ys) / h as f64 * 4.0).cos();
                let g = val.round().clamp(0.0, 255.0) as u8;
                data.extend_from_slice(&[g, g, g]);
            }
        }
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn identical_frames_zero_flow() {
        let a = texture(48, 48, 0, 0);
        let f = estimate_flow(&a, &a, &TvL1Config::default()).unwrap();
        assert!(f.max_norm_inf() <= 0.1, "{}", f.max_norm_inf());
    }

    #[test]
    fn recovers_integer_translation_and_antisymmetry() {
        let a = texture(48, 48, 0, 0);
        let b = texture(48, 48, 3, 0);
        let cfg = TvL1Config::default();
        let f = estimate_flow(&a, &b, &cfg).unwrap();
        let (mu, mv) = (f.median_u(), f.median_v());
        assert!((2.5..=3.5).contains(&mu), "median u {mu}");
        assert!((-0.5..=0.5).contains(&mv), "median v {mv}");
        let r = estimate_flow(&b, &a, &cfg).unwrap();
        assert!((-3.5..=-2.5).contains(&r.median_u()), "reverse u {}", r.median_u());
        assert!((-0.5..=0.5).contains(&r.median_v()));
    }

    #[test]
    fn vertical_translation() {
        let a = texture(48, 48, 0, 0);
        let b = texture(48, 48, 0, -2);
        let f = estimate_flow(&a, &b, &TvL1Config::default()).unwrap();
        assert!((-2.5..=-1.5).contains(&f.median_v()), "{}", f.median_v());
        assert!(f.median_u().abs() <= 0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Image::filled(8, 8, 3, 0);
        let b = Image::filled(8, 9, 3, 0);
        assert!(matches!(
            estimate_flow(&a, &b, &TvL1Config::default()),
            Err(MovError::InvalidArgument(_))
        ));
    }

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize_flow_value(-20.0), 0);
        assert_eq!(quantize_flow_value(20.0), 255);
        assert_eq!(quantize_flow_value(25.0), 255);
        assert_eq!(quantize_flow_value(-1e9), 0);
        assert_eq!(quantize_flow_value(0.0), 128);
    }

    proptest! {
        #[test]
        fn quantization_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_flow_value(lo) <= quantize_flow_value(hi));
        }

        #[test]
        fn flow_image_third_channel_zero(us in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let f = FlowField { height: 2, width: 3, u: us.clone(), v: us.iter().map(|x| -x).collect() };
            let img = flow_to_image(&f);
            prop_assert!(img.data.chunks(3).all(|p| p[2] == 0));
        }
    }
}
