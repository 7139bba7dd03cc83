//! Procedural face renderer: parameters in, anti-aliased raster, class masks
//! and five landmarks out.
//!
//! Coordinates are normalized so the image spans [-1, 1] on both axes, `u`
//! to the right and `v` downwards. Every primitive carries a depth used by
//! the pose model: a point `(u, v, z)` lands at
//! `(u cos(yaw) + z sin(yaw), v cos(pitch) + z sin(pitch))`, with yaw and
//! pitch spanning [-30°, 30°] over the pose channels' [0, 1].
//!
//! | AU channel | effect | monotone statistic |
//! |---|---|---|
//! | smile | mouth corners rise, mouth widens | mouth mask centroid rises |
//! | jaw-drop | lips part | mouth mask pixel count grows |
//! | brow-raise | brows move up | brow mask centroid rises |
//! | eye-close | eyes narrow vertically | eye mask pixel count shrinks |
//! | jaw-left | mouth shifts to image-left | mouth centroid moves left |
//! | jaw-right | mouth shifts to image-right | mouth centroid moves right |

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{au, idc, FacialParams, ParamSpaceConfig, BASE_AU, BASE_IDENTITY};
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 6;

pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const FACE: u8 = 1;
    pub const BROWS: u8 = 2;
    pub const EYES: u8 = 3;
    pub const NOSE: u8 = 4;
    pub const MOUTH: u8 = 5;
}

pub const LANDMARK_COUNT: usize = 5;
const MAX_ANGLE: f64 = core::f64::consts::PI / 6.0;

type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub background: Rgb,
    pub skin: Rgb,
    pub brow: Rgb,
    pub eye: Rgb,
    pub pupil: Rgb,
    pub nose: Rgb,
    pub lips: Rgb,
    pub inner_mouth: Rgb,
}

/// A character style: colours plus the identity it wears when retargeted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub palette: Palette,
    canonical_identity: &'static [f64],
    brow: usize,
}

const REFERENCE_PALETTE: Palette = Palette {
    background: [0.22, 0.26, 0.32],
    skin: [0.92, 0.74, 0.60],
    brow: [0.25, 0.16, 0.10],
    eye: [0.97, 0.97, 0.97],
    pupil: [0.10, 0.10, 0.14],
    nose: [0.80, 0.58, 0.46],
    lips: [0.78, 0.30, 0.32],
    inner_mouth: [0.35, 0.06, 0.10],
};

const STYLES: [Style; 3] = [
    Style {
        palette: REFERENCE_PALETTE,
        canonical_identity: &[],
        brow: 0,
    },
    Style {
        palette: Palette {
            background: [0.30, 0.22, 0.20],
            skin: [0.62, 0.76, 0.50],
            brow: [0.12, 0.20, 0.08],
            eye: [0.95, 0.92, 0.60],
            pupil: [0.45, 0.05, 0.05],
            nose: [0.50, 0.64, 0.40],
            lips: [0.35, 0.40, 0.25],
            inner_mouth: [0.15, 0.10, 0.08],
        },
        canonical_identity: &[0.85, 0.35, 0.70, 0.35, 0.40, 0.30, 0.80, 0.30, 0.80, 0.70, 0.50, 0.70],
        brow: 1,
    },
    Style {
        palette: Palette {
            background: [0.12, 0.14, 0.20],
            skin: [0.86, 0.86, 0.96],
            brow: [0.50, 0.50, 0.62],
            eye: [0.80, 0.95, 1.00],
            pupil: [0.10, 0.25, 0.60],
            nose: [0.76, 0.76, 0.90],
            lips: [0.60, 0.45, 0.75],
            inner_mouth: [0.20, 0.12, 0.30],
        },
        canonical_identity: &[0.30, 0.75, 0.35, 0.75, 0.60, 0.70, 0.25, 0.75, 0.30, 0.35, 0.50, 0.30],
        brow: 2,
    },
];

pub fn style_count() -> usize {
    STYLES.len()
}

pub fn style(id: usize) -> Result<&'static Style> {
    STYLES.get(id).ok_or(Error::UnknownStyle(id))
}

impl Style {
    /// The identity this character wears, sized for `cfg`.
    pub fn identity(&self, cfg: &ParamSpaceConfig) -> (Vec<f64>, usize) {
        let id = (0..cfg.id_cont_dim)
            .map(|c| self.canonical_identity.get(c).copied().unwrap_or(BASE_IDENTITY))
            .collect();
        (id, self.brow % cfg.brow_styles)
    }
}

/// Brow shape of one style: thickness multiplier, arch height, outer-end lift.
pub fn brow_shape(style: usize) -> (f64, f64, f64) {
    const THICK: [f64; 2] = [1.0, 1.8];
    const ARCH: [f64; 2] = [0.0, 0.08];
    const TILT: [f64; 9] = [0.0, 0.12, -0.12, 0.24, -0.24, 0.06, -0.06, 0.18, -0.18];
    (THICK[style % 2], ARCH[(style / 2) % 2], TILT[(style / 4) % TILT.len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Channel-major `[3, size, size]` image in [0, 1].
    pub image: Tensor,
    /// Class index per pixel, row-major.
    pub classes: Vec<u8>,
    /// Pixel coordinates `(x, y)`: image-left eye, image-right eye, nose tip,
    /// image-left mouth corner, image-right mouth corner.
    pub landmarks: [[f64; 2]; LANDMARK_COUNT],
    pub size: usize,
}

impl RenderOutput {
    /// One-hot class probabilities, `[6, size, size]`.
    pub fn mask_probs(&self) -> Tensor {
        let plane = self.size * self.size;
        let mut data = vec![0.0; CLASS_COUNT * plane];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * plane + i] = 1.0;
        }
        Tensor::new(&[CLASS_COUNT, self.size, self.size], data).expect("mask shape")
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Mean pixel position `(x, y)` of a class, if present.
    pub fn centroid(&self, class: u8) -> Option<(f64, f64)> {
        class_centroid(&self.classes, self.size, class)
    }
}

pub fn class_centroid(classes: &[u8], size: usize, class: u8) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &c) in classes.iter().enumerate() {
        if c == class {
            sx += (i % size) as f64;
            sy += (i / size) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// First-order signed distance estimate.
    fn distance(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = ((u - self.cx) / self.rx, (v - self.cy) / self.ry);
        let k = libm::sqrt(du * du + dv * dv);
        if k < 1e-12 {
            return -self.rx.min(self.ry);
        }
        let gu = du / self.rx;
        let gv = dv / self.ry;
        let grad = libm::sqrt(gu * gu + gv * gv) / k;
        (k - 1.0) / grad
    }
}

struct Brow {
    cx: f64,
    cy: f64,
    half_width: f64,
    thickness: f64,
    arch: f64,
    /// Lift applied at the outer end (towards the face edge).
    lift: f64,
    outward: f64,
}

impl Brow {
    fn distance(&self, u: f64, v: f64) -> f64 {
        let s = ((u - self.cx) / self.half_width).clamp(-1.0, 1.0);
        let centre = self.cy - self.arch * (1.0 - s * s) - self.lift * (s * self.outward).max(0.0);
        let across = libm::fabs(v - centre) - 0.5 * self.thickness;
        across.max(libm::fabs(u - self.cx) - self.half_width)
    }
}

struct Mouth {
    cx: f64,
    cy: f64,
    half_width: f64,
    upper: f64,
    lower: f64,
    open: f64,
    corner_lift: f64,
}

impl Mouth {
    fn line(&self, s: f64) -> f64 {
        self.cy - self.corner_lift * s * s
    }

    /// Distance to the band `top(s) <= v <= bottom(s)` over the mouth width.
    fn band(&self, u: f64, v: f64, above: f64, below: f64) -> f64 {
        let s = ((u - self.cx) / self.half_width).clamp(-1.0, 1.0);
        let bulge = 1.0 - s * s;
        let line = self.line(s);
        let top = line - above * bulge;
        let bottom = line + below * bulge;
        (top - v).max(v - bottom).max(libm::fabs(u - self.cx) - self.half_width)
    }

    fn lips(&self, u: f64, v: f64) -> f64 {
        self.band(u, v, self.upper, self.open + self.lower)
    }

    fn inner(&self, u: f64, v: f64) -> f64 {
        self.band(u, v, 0.0, self.open)
    }

    fn corner(&self, side: f64) -> (f64, f64) {
        (self.cx + side * self.half_width, self.line(side))
    }
}

struct Face {
    head: Ellipse,
    eyes: [Ellipse; 2],
    pupils: [Ellipse; 2],
    brows: [Brow; 2],
    nose: Ellipse,
    mouth: Mouth,
}

const DEPTH_FACE: f64 = 0.0;
const DEPTH_EYES: f64 = 0.12;
const DEPTH_BROWS: f64 = 0.14;
const DEPTH_NOSE: f64 = 0.35;
const DEPTH_MOUTH: f64 = 0.20;

fn build(params: &FacialParams) -> Face {
    let dev = |c: usize| params.id.get(c).copied().unwrap_or(BASE_IDENTITY) - 0.5;
    let act = |c: usize| params.au.get(c).copied().unwrap_or(BASE_AU);
    let (thick, arch, lift) = brow_shape(params.brow);

    let head = Ellipse {
        cx: 0.0,
        cy: 0.04,
        rx: 0.60 * (1.0 + 0.30 * dev(idc::FACE_WIDTH)),
        ry: 0.78 * (1.0 + 0.22 * dev(idc::FACE_HEIGHT)),
    };
    let spacing = 0.25 * (1.0 + 0.36 * dev(idc::EYE_SPACING));
    let eye_scale = 1.0 + 0.5 * dev(idc::EYE_SIZE);
    let eye_y = -0.10 + 0.12 * dev(idc::EYE_HEIGHT);
    let openness = 1.0 - 0.92 * act(au::EYE_CLOSE);
    let eye = |side: f64| Ellipse {
        cx: side * spacing,
        cy: eye_y,
        rx: 0.11 * eye_scale,
        ry: 0.065 * eye_scale * openness,
    };
    let pupil = |side: f64| Ellipse {
        cx: side * spacing,
        cy: eye_y,
        rx: 0.045 * eye_scale,
        ry: 0.045 * eye_scale,
    };
    let brow_y = eye_y - 0.17 - 0.10 * act(au::BROW_RAISE) - 0.06 * dev(idc::BROW_HEIGHT);
    let brow = |side: f64| Brow {
        cx: side * spacing,
        cy: brow_y,
        half_width: 0.13,
        thickness: 0.045 * (1.0 + 0.5 * dev(idc::BROW_THICKNESS)) * thick,
        arch,
        lift,
        outward: side,
    };
    let nose_len = 0.13 * (1.0 + 0.45 * dev(idc::NOSE_LENGTH));
    let nose = Ellipse {
        cx: 0.0,
        cy: 0.10 + 0.05 * dev(idc::NOSE_LENGTH),
        rx: 0.065 * (1.0 + 0.6 * dev(idc::NOSE_WIDTH)),
        ry: nose_len,
    };
    let lip = 1.0 + 0.6 * dev(idc::LIP_THICKNESS);
    let height = 1.0 + 0.4 * dev(idc::MOUTH_HEIGHT);
    let smile = act(au::SMILE);
    let mouth = Mouth {
        cx: 0.22 * (act(au::JAW_RIGHT) - act(au::JAW_LEFT)),
        cy: 0.42 - 0.03 * smile,
        half_width: 0.19 * (1.0 + 0.45 * dev(idc::MOUTH_WIDTH)) * (1.0 + 0.2 * smile),
        upper: 0.05 * lip * height,
        lower: 0.06 * lip * height,
        open: 0.14 * act(au::JAW_DROP),
        corner_lift: 0.16 * smile,
    };
    Face {
        head,
        eyes: [eye(-1.0), eye(1.0)],
        pupils: [pupil(-1.0), pupil(1.0)],
        brows: [brow(-1.0), brow(1.0)],
        nose,
        mouth,
    }
}

struct View {
    size: usize,
    sin_yaw: f64,
    cos_yaw: f64,
    sin_pitch: f64,
    cos_pitch: f64,
}

impl View {
    fn new(size: usize, pose: [f64; 2]) -> Self {
        let yaw = (2.0 * pose[0] - 1.0) * MAX_ANGLE;
        let pitch = (2.0 * pose[1] - 1.0) * MAX_ANGLE;
        Self {
            size,
            sin_yaw: libm::sin(yaw),
            cos_yaw: libm::cos(yaw),
            sin_pitch: libm::sin(pitch),
            cos_pitch: libm::cos(pitch),
        }
    }

    /// Pixel index to image-plane coordinate; exactly antisymmetric about the centre.
    fn coord(&self, i: usize) -> f64 {
        (2.0 * i as f64 + 1.0 - self.size as f64) / self.size as f64
    }

    fn to_face(&self, u: f64, v: f64, z: f64) -> (f64, f64) {
        (
            (u - z * self.sin_yaw) / self.cos_yaw,
            (v - z * self.sin_pitch) / self.cos_pitch,
        )
    }

    fn to_pixel(&self, u: f64, v: f64, z: f64) -> [f64; 2] {
        let iu = u * self.cos_yaw + z * self.sin_yaw;
        let iv = v * self.cos_pitch + z * self.sin_pitch;
        let s = self.size as f64;
        [(iu * s + s - 1.0) / 2.0, (iv * s + s - 1.0) / 2.0]
    }

    fn coverage(&self, distance: f64) -> f64 {
        let pixel = 2.0 / self.size as f64;
        let shrink = self.cos_yaw.min(self.cos_pitch);
        (0.5 - distance * shrink / pixel).clamp(0.0, 1.0)
    }
}

/// Renders `params` in character `style` (0 is the reference face).
pub fn render(cfg: &ParamSpaceConfig, params: &FacialParams, style_id: usize) -> Result<RenderOutput> {
    render_with_background(cfg, params, style_id, None)
}

/// [`render`] with an optional flat background colour override.
pub fn render_with_background(
    cfg: &ParamSpaceConfig,
    params: &FacialParams,
    style_id: usize,
    background: Option<[f64; 3]>,
) -> Result<RenderOutput> {
    params.validate(cfg)?;
    let palette = style(style_id)?.palette;
    let face = build(params);
    let size = cfg.image_size;
    let view = View::new(size, params.pose);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let mut classes = vec![class::BACKGROUND; plane];
    let bg = background.unwrap_or(palette.background);

    for y in 0..size {
        let iv = view.coord(y);
        for x in 0..size {
            let iu = view.coord(x);
            let mut rgb = bg;
            let mut label = class::BACKGROUND;
            let mut paint = |cov: f64, colour: Rgb, cls: u8| {
                if cov <= 0.0 {
                    return;
                }
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cov) + colour[c] * cov;
                }
                if cov >= 0.5 {
                    label = cls;
                }
            };

            let (u, v) = view.to_face(iu, iv, DEPTH_FACE);
            paint(view.coverage(face.head.distance(u, v)), palette.skin, class::FACE);

            let (u, v) = view.to_face(iu, iv, DEPTH_NOSE);
            paint(view.coverage(face.nose.distance(u, v)), palette.nose, class::NOSE);

            let (u, v) = view.to_face(iu, iv, DEPTH_EYES);
            for (eye, pupil) in face.eyes.iter().zip(&face.pupils) {
                let white = eye.distance(u, v);
                paint(view.coverage(white), palette.eye, class::EYES);
                paint(
                    view.coverage(pupil.distance(u, v).max(white)),
                    palette.pupil,
                    class::EYES,
                );
            }

            let (u, v) = view.to_face(iu, iv, DEPTH_BROWS);
            for brow in &face.brows {
                paint(view.coverage(brow.distance(u, v)), palette.brow, class::BROWS);
            }

            let (u, v) = view.to_face(iu, iv, DEPTH_MOUTH);
            paint(view.coverage(face.mouth.lips(u, v)), palette.lips, class::MOUTH);
            paint(view.coverage(face.mouth.inner(u, v)), palette.inner_mouth, class::MOUTH);

            let i = y * size + x;
            for c in 0..3 {
                data[c * plane + i] = rgb[c];
            }
            classes[i] = label;
        }
    }

    let nose_tip = view.to_pixel(face.nose.cx, face.nose.cy + 0.8 * face.nose.ry, DEPTH_NOSE);
    let (lx, ly) = face.mouth.corner(-1.0);
    let (rx, ry) = face.mouth.corner(1.0);
    let landmarks = [
        view.to_pixel(face.eyes[0].cx, face.eyes[0].cy, DEPTH_EYES),
        view.to_pixel(face.eyes[1].cx, face.eyes[1].cy, DEPTH_EYES),
        nose_tip,
        view.to_pixel(lx, ly, DEPTH_MOUTH),
        view.to_pixel(rx, ry, DEPTH_MOUTH),
    ];
    Ok(RenderOutput {
        image: Tensor::new(&[3, size, size], data)?,
        classes,
        landmarks,
        size,
    })
}

/// The frontal, emotionless reference face.
pub fn base_face(cfg: &ParamSpaceConfig) -> Result<RenderOutput> {
    render(cfg, &FacialParams::base(cfg), 0)
}

/// Renders `target_style`'s own identity with the pose and AU of `params`.
pub fn retarget(cfg: &ParamSpaceConfig, params: &FacialParams, target_style: usize) -> Result<RenderOutput> {
    let (id, brow) = style(target_style)?.identity(cfg);
    let carried = FacialParams {
        pose: params.pose,
        au: params.au.clone(),
        id,
        brow,
    };
    render(cfg, &carried, target_style)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk() -> ParamSpaceConfig {
        ParamSpaceConfig::desk()
    }

    fn with_au(channel: usize, value: f64) -> FacialParams {
        let mut p = FacialParams::base(&desk());
        p.au[channel] = value;
        p
    }

    fn stat(channel: usize, value: f64) -> f64 {
        let out = render(&desk(), &with_au(channel, value), 0).unwrap();
        match channel {
            au::SMILE => -out.centroid(class::MOUTH).unwrap().1,
            au::JAW_DROP => out.count(class::MOUTH) as f64,
            au::BROW_RAISE => -out.centroid(class::BROWS).unwrap().1,
            au::EYE_CLOSE => -(out.count(class::EYES) as f64),
            au::JAW_LEFT => -out.centroid(class::MOUTH).unwrap().0,
            au::JAW_RIGHT => out.centroid(class::MOUTH).unwrap().0,
            _ => unreachable!(),
        }
    }

    #[test]
    fn base_face_is_deterministic_and_symmetric() {
        let a = base_face(&desk()).unwrap();
        let b = render(&desk(), &FacialParams::base(&desk()), 0).unwrap();
        assert_eq!(a, b);
        assert!(a.count(class::MOUTH) > 0);
        let s = a.size;
        let (mut x0, mut x1, mut y0, mut y1) = (s, 0, s, 0);
        for (i, &c) in a.classes.iter().enumerate() {
            if c != class::BACKGROUND {
                x0 = x0.min(i % s);
                x1 = x1.max(i % s);
                y0 = y0.min(i / s);
                y1 = y1.max(i / s);
            }
        }
        let img = a.image.data();
        for c in 0..3 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let m = s - 1 - x;
                    let d = img[c * s * s + y * s + x] - img[c * s * s + y * s + m];
                    assert!(d.abs() < 1e-12, "asymmetry at ({x},{y})");
                }
            }
        }
        for y in 0..s {
            for x in 0..s {
                assert_eq!(a.classes[y * s + x], a.classes[y * s + s - 1 - x]);
            }
        }
    }

    #[test]
    fn jaw_left_moves_mouth_left_monotonically() {
        let base = base_face(&desk()).unwrap().centroid(class::MOUTH).unwrap().0;
        let xs: Vec<f64> = [0.02, 0.5, 0.9]
            .iter()
            .map(|&v| {
                render(&desk(), &with_au(au::JAW_LEFT, v), 0)
                    .unwrap()
                    .centroid(class::MOUTH)
                    .unwrap()
                    .0
            })
            .collect();
        assert!(xs[2] < base);
        assert!(xs[0] > xs[1] && xs[1] > xs[2]);
        let right = render(&desk(), &with_au(au::JAW_RIGHT, 0.9), 0)
            .unwrap()
            .centroid(class::MOUTH)
            .unwrap()
            .0;
        assert!(right > base);
    }

    #[test]
    fn closed_eyes_lose_most_eye_pixels() {
        let open = base_face(&desk()).unwrap().count(class::EYES);
        let closed = render(&desk(), &with_au(au::EYE_CLOSE, 1.0), 0)
            .unwrap()
            .count(class::EYES);
        assert!((closed as f64) < 0.25 * open as f64, "{closed} vs {open}");
    }

    #[test]
    fn every_au_statistic_is_monotone() {
        for channel in 0..6 {
            let s: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&v| stat(channel, v)).collect();
            for w in s.windows(2) {
                assert!(w[1] > w[0], "channel {channel}: {s:?}");
            }
        }
    }

    #[test]
    fn landmarks_stay_inside_and_follow_yaw() {
        let mut p = FacialParams::base(&desk());
        for pose in [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]] {
            p.pose = pose;
            let out = render(&desk(), &p, 0).unwrap();
            for [x, y] in out.landmarks {
                assert!((0.0..64.0).contains(&x) && (0.0..64.0).contains(&y));
            }
        }
        p.pose = [0.5, 0.5];
        let frontal = render(&desk(), &p, 0).unwrap().landmarks[2][0];
        p.pose = [1.0, 0.5];
        let turned = render(&desk(), &p, 0).unwrap().landmarks[2][0];
        assert!(turned > frontal + 2.0);
        let lm = base_face(&desk()).unwrap().landmarks;
        assert!(lm[0][0] < lm[1][0] && lm[3][0] < lm[4][0]);
    }

    #[test]
    fn range_and_style_errors() {
        let mut p = FacialParams::base(&desk());
        p.pose[1] = -0.1;
        assert_eq!(
            render(&desk(), &p, 0).unwrap_err(),
            Error::ParamRange {
                channel: 1,
                value: -0.1
            }
        );
        assert_eq!(
            retarget(&desk(), &FacialParams::base(&desk()), 9).unwrap_err(),
            Error::UnknownStyle(9)
        );
    }

    #[test]
    fn retarget_ignores_source_identity() {
        let cfg = desk();
        let mut a = with_au(au::JAW_LEFT, 0.9);
        let mut b = a.clone();
        a.id.iter_mut().for_each(|v| *v = 0.1);
        b.id.iter_mut().for_each(|v| *v = 0.8);
        b.brow = 3;
        assert_eq!(retarget(&cfg, &a, 1).unwrap(), retarget(&cfg, &b, 1).unwrap());
        let neutral = retarget(&cfg, &FacialParams::base(&cfg), 1).unwrap();
        let (id, brow) = style(1).unwrap().identity(&cfg);
        let own = FacialParams {
            id,
            brow,
            ..FacialParams::base(&cfg)
        };
        assert_eq!(neutral, render(&cfg, &own, 1).unwrap());
        let shifted = retarget(&cfg, &a, 1).unwrap();
        assert!(shifted.centroid(class::MOUTH).unwrap().0 < neutral.centroid(class::MOUTH).unwrap().0);
    }

    #[test]
    fn brow_styles_are_distinguishable() {
        let cfg = desk();
        let renders: Vec<RenderOutput> = (0..cfg.brow_styles)
            .map(|s| {
                let p = FacialParams {
                    brow: s,
                    ..FacialParams::base(&cfg)
                };
                render(&cfg, &p, 0).unwrap()
            })
            .collect();
        for i in 0..renders.len() {
            for j in i + 1..renders.len() {
                let d = renders[i].image.mean_abs_diff(&renders[j].image);
                assert!(d > 2e-3, "styles {i} and {j}: {d}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn render_is_pure_and_masks_partition(seed in any::<u64>()) {
            let cfg = desk();
            let p = FacialParams::sample(seed, &cfg);
            let a = render(&cfg, &p, 0).unwrap();
            let b = render(&cfg, &p, 0).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let probs = a.mask_probs();
            let plane = 64 * 64;
            for i in 0..plane {
                let total: f64 = (0..CLASS_COUNT).map(|c| probs.data()[c * plane + i]).sum();
                prop_assert_eq!(total, 1.0);
            }
        }
    }
}
