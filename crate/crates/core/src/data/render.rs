//! Scanline rasterization of scenes, the binary P6 PPM codec and bilinear
//! crop-resize. The codec is bit-exact: encode(decode(x)) == x for anything
//! this module wrote.

use std::path::Path;

use crate::data::scene::{Scene, SceneObject, ShapeKind};
use crate::error::{EssenError, Result};
use crate::vision::ImageTensor;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;
const TRI_HALF_WIDTH: f64 = 0.866_025_403_784_438_6; // sqrt(3)/2

fn inside(obj: &SceneObject, px: f64, py: f64) -> bool {
    let dx = px - obj.cx;
    let dy = py - obj.cy;
    match obj.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= obj.radius * obj.radius,
        ShapeKind::Square => {
            let half = obj.radius * SQRT_HALF;
            dx.abs() <= half && dy.abs() <= half
        }
        ShapeKind::Triangle => {
            // upright isoceles (equilateral) triangle inscribed in the
            // radius circle: apex on top, base below center
            let v0 = (obj.cx, obj.cy - obj.radius);
            let v1 = (obj.cx - TRI_HALF_WIDTH * obj.radius, obj.cy + 0.5 * obj.radius);
            let v2 = (obj.cx + TRI_HALF_WIDTH * obj.radius, obj.cy + 0.5 * obj.radius);
            let cross = |a: (f64, f64), b: (f64, f64)| {
                (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
            };
            let c0 = cross(v0, v1);
            let c1 = cross(v1, v2);
            let c2 = cross(v2, v0);
            (c0 >= 0.0 && c1 >= 0.0 && c2 >= 0.0) || (c0 <= 0.0 && c1 <= 0.0 && c2 <= 0.0)
        }
    }
}

/// Row-major RGB bytes, white background, filled shapes.
pub fn render_rgb(scene: &Scene) -> Vec<u8> {
    let s = scene.canvas;
    let mut rgb = vec![255u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // objects never overlap, so first hit wins
            if let Some(obj) = scene.objects.iter().find(|o| inside(o, px, py)) {
                let (r, g, b) = obj.color.rgb();
                let at = 3 * (y * s + x);
                rgb[at] = r;
                rgb[at + 1] = g;
                rgb[at + 2] = b;
            }
        }
    }
    rgb
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb byte count");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| EssenError::DataGen(format!("ppm decode: {msg}"));
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let need = 3 * w * h;
    if bytes.len() - pos != need {
        return Err(bad(&format!(
            "expected {need} data bytes, found {}",
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

pub fn rgb_to_image(size: usize, rgb: &[u8]) -> Result<ImageTensor> {
    let mut img = ImageTensor::zeros(size);
    for y in 0..size {
        for x in 0..size {
            let at = 3 * (y * size + x);
            for c in 0..3 {
                img.set(c, y, x, rgb[at + c] as f32 / 255.0);
            }
        }
    }
    img.validate()?;
    Ok(img)
}

pub fn image_to_rgb(img: &ImageTensor) -> Vec<u8> {
    let s = img.size();
    let mut rgb = vec![0u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let at = 3 * (y * s + x);
            for c in 0..3 {
                rgb[at + c] = (img.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    rgb
}

/// Renders a scene to both the float tensor and its exact PPM bytes.
pub fn render_ppm(scene: &Scene) -> Result<(ImageTensor, Vec<u8>)> {
    let rgb = render_rgb(scene);
    let img = rgb_to_image(scene.canvas, &rgb)?;
    Ok((img, encode_ppm(scene.canvas, scene.canvas, &rgb)))
}

pub fn write_ppm(path: &Path, scene: &Scene) -> Result<ImageTensor> {
    let (img, bytes) = render_ppm(scene)?;
    std::fs::write(path, bytes)?;
    Ok(img)
}

pub fn load_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, rgb) = decode_ppm(&bytes)?;
    if w != h {
        return Err(EssenError::DataGen(format!(
            "expected square image, got {w}x{h}"
        )));
    }
    rgb_to_image(w, &rgb)
}

/// Axis-aligned pixel box (x0, y0, x1, y1), exclusive upper bounds.
pub type PixelBox = (usize, usize, usize, usize);

/// Tight bounding box of an object, clamped to the canvas.
pub fn object_bbox(obj: &SceneObject, canvas: usize) -> PixelBox {
    let (hw, top, bottom) = match obj.shape {
        ShapeKind::Circle => (obj.radius, obj.radius, obj.radius),
        ShapeKind::Square => {
            let half = obj.radius * SQRT_HALF;
            (half, half, half)
        }
        ShapeKind::Triangle => (
            TRI_HALF_WIDTH * obj.radius,
            obj.radius,
            0.5 * obj.radius,
        ),
    };
    let x0 = (obj.cx - hw).floor().max(0.0) as usize;
    let y0 = (obj.cy - top).floor().max(0.0) as usize;
    let x1 = (obj.cx + hw).ceil().min(canvas as f64) as usize;
    let y1 = (obj.cy + bottom).ceil().min(canvas as f64) as usize;
    (x0, y0, x1.max(x0 + 1), y1.max(y0 + 1))
}

/// Bilinear crop-resize of a pixel box to a square output. A box covering
/// the whole image at the same output size reproduces the input bit-exactly
/// (the sample points land on the source pixel centers).
pub fn crop_resize(img: &ImageTensor, bbox: PixelBox, out_size: usize) -> Result<ImageTensor> {
    let (x0, y0, x1, y1) = bbox;
    let s = img.size();
    if x1 <= x0 || y1 <= y0 || x1 > s || y1 > s {
        return Err(EssenError::DataGen(format!(
            "degenerate or out-of-bounds box ({x0},{y0},{x1},{y1}) for image size {s}"
        )));
    }
    let bw = (x1 - x0) as f32;
    let bh = (y1 - y0) as f32;
    let mut out = ImageTensor::zeros(out_size);
    for oy in 0..out_size {
        let sy = y0 as f32 + (oy as f32 + 0.5) * bh / out_size as f32 - 0.5;
        let sy = sy.clamp(0.0, (s - 1) as f32);
        let y_lo = sy.floor() as usize;
        let y_hi = (y_lo + 1).min(s - 1);
        let fy = sy - y_lo as f32;
        for ox in 0..out_size {
            let sx = x0 as f32 + (ox as f32 + 0.5) * bw / out_size as f32 - 0.5;
            let sx = sx.clamp(0.0, (s - 1) as f32);
            let x_lo = sx.floor() as usize;
            let x_hi = (x_lo + 1).min(s - 1);
            let fx = sx - x_lo as f32;
            for c in 0..3 {
                let tl = img.get(c, y_lo, x_lo);
                let tr = img.get(c, y_lo, x_hi);
                let bl = img.get(c, y_hi, x_lo);
                let br = img.get(c, y_hi, x_hi);
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out.set(c, oy, ox, top + (bot - top) * fy);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{gen_scene, ColorKind, SizeKind};

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let scene = gen_scene(5, 32, (3, 5)).unwrap();
        let (_, bytes) = render_ppm(&scene).unwrap();
        let (w, h, rgb) = decode_ppm(&bytes).unwrap();
        assert_eq!((w, h), (32, 32));
        assert_eq!(encode_ppm(w, h, &rgb), bytes);
        // byte length law: header + 3*W*H
        let header_len = format!("P6\n{w} {h}\n255\n").len();
        assert_eq!(bytes.len(), header_len + 3 * w * h);
    }

    #[test]
    fn background_white_and_center_colored() {
        let scene = gen_scene(11, 48, (2, 2)).unwrap();
        let rgb = render_rgb(&scene);
        // pixel at each object's center carries that object's table color
        for obj in &scene.objects {
            let (x, y) = (obj.cx as usize, obj.cy as usize);
            let at = 3 * (y * 48 + x);
            assert_eq!((rgb[at], rgb[at + 1], rgb[at + 2]), obj.color.rgb());
        }
        // a corner pixel is background (objects keep a margin)
        assert_eq!((rgb[0], rgb[1], rgb[2]), (255, 255, 255));
    }

    #[test]
    fn pixel_area_scales_with_radius_squared() {
        let base = gen_scene(3, 64, (2, 2)).unwrap();
        let mut small = base.clone();
        small.objects.truncate(1);
        small.objects[0].shape = ShapeKind::Circle;
        small.objects[0].color = ColorKind::Red;
        small.objects[0].size = SizeKind::Small;
        small.objects[0].cx = 32.0;
        small.objects[0].cy = 32.0;
        small.objects[0].radius = 6.0;
        let mut large = small.clone();
        large.objects[0].radius = 12.0;
        let count = |s: &Scene| {
            render_rgb(s)
                .chunks(3)
                .filter(|px| px != &[255, 255, 255])
                .count() as f64
        };
        let ratio = count(&large) / count(&small);
        assert!((ratio - 4.0).abs() < 0.25, "area ratio {ratio}");
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(decode_ppm(b"P5\n2 2\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\nxxx").is_err()); // short data
        assert!(decode_ppm(b"P6\n2 2\n128\n").is_err());
    }

    #[test]
    fn full_image_crop_at_same_size_is_identity() {
        let scene = gen_scene(8, 32, (3, 4)).unwrap();
        let (img, _) = render_ppm(&scene).unwrap();
        let crop = crop_resize(&img, (0, 0, 32, 32), 32).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn crop_rejects_degenerate_box() {
        let img = ImageTensor::white(32);
        assert!(crop_resize(&img, (4, 4, 4, 9), 8).is_err());
        assert!(crop_resize(&img, (4, 4, 40, 9), 8).is_err());
    }

    #[test]
    fn bbox_within_canvas_and_nonempty() {
        let scene = gen_scene(21, 48, (4, 8)).unwrap();
        for obj in &scene.objects {
            let (x0, y0, x1, y1) = object_bbox(obj, 48);
            assert!(x1 > x0 && y1 > y0);
            assert!(x1 <= 48 && y1 <= 48);
        }
    }
}
