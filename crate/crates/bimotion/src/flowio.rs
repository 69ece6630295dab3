//! Flow-field file format and visualization.
//!
//! Files use the Middlebury layout: 4-byte magic `PIEH`, i32 width, i32
//! height, then row-major interleaved little-endian f32 `(dx, dy)` pairs.
//! The format carries no endpoint or scale metadata; readers tag fields as
//! toward-frame-1 at full resolution.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{Endpoint, MotionField};

const MAGIC: &[u8; 4] = b"PIEH";

pub fn write_flo_to<S: Scalar>(field: &MotionField<S>, mut w: impl Write) -> Result<()> {
    let (h, wd) = (field.height(), field.width());
    w.write_all(MAGIC)?;
    w.write_i32::<LittleEndian>(wd as i32)?;
    w.write_i32::<LittleEndian>(h as i32)?;
    let d = field.data.data();
    let hw = h * wd;
    for p in 0..hw {
        w.write_f32::<LittleEndian>(d[p].to_f64() as f32)?;
        w.write_f32::<LittleEndian>(d[hw + p].to_f64() as f32)?;
    }
    Ok(())
}

pub fn read_flo_from<S: Scalar>(mut r: impl Read) -> Result<MotionField<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("flow file truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad flow magic {:?}, expected PIEH", magic)));
    }
    let w = r.read_i32::<LittleEndian>().map_err(|_| Error::Format("flow file truncated".into()))?;
    let h = r.read_i32::<LittleEndian>().map_err(|_| Error::Format("flow file truncated".into()))?;
    if w <= 0 || h <= 0 || (w as i64) * (h as i64) > (1 << 28) {
        return Err(Error::Format(format!("implausible flow dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let hw = h * w;
    let mut data = vec![S::ZERO; 2 * hw];
    for p in 0..hw {
        let dx = r.read_f32::<LittleEndian>().map_err(|_| Error::Format("flow payload truncated".into()))?;
        let dy = r.read_f32::<LittleEndian>().map_err(|_| Error::Format("flow payload truncated".into()))?;
        data[p] = S::from_f64(dx as f64);
        data[hw + p] = S::from_f64(dy as f64);
    }
    MotionField::new(Tensor::from_vec(&[2, h, w], data)?, 0, Endpoint::TToOne)
}

pub fn write_flo<S: Scalar>(field: &MotionField<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_flo_to(field, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_flo<S: Scalar>(path: impl AsRef<Path>) -> Result<MotionField<S>> {
    let bytes = std::fs::read(path)?;
    read_flo_from(bytes.as_slice())
}

// Middlebury color wheel: six hue transitions with these segment lengths.
const WHEEL_SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), // red -> yellow
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),  // yellow -> green
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),  // green -> cyan
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]), // cyan -> blue
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]), // blue -> magenta
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),  // magenta -> red
];

fn wheel() -> Vec<[f64; 3]> {
    let mut colors = Vec::with_capacity(55);
    for (len, from, to) in WHEEL_SEGMENTS {
        for i in 0..len {
            let f = i as f64 / len as f64;
            colors.push([
                from[0] + f * (to[0] - from[0]),
                from[1] + f * (to[1] - from[1]),
                from[2] + f * (to[2] - from[2]),
            ]);
        }
    }
    colors
}

/// Color of a unit displacement direction at a given saturation in [0, 1].
pub fn wheel_color(dx: f64, dy: f64, saturation: f64) -> [f64; 3] {
    let colors = wheel();
    let n = colors.len();
    let angle = dy.atan2(dx) / std::f64::consts::PI; // [-1, 1]
    let fk = (angle + 1.0) / 2.0 * (n as f64 - 1.0);
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let col = (1.0 - f) * colors[k0][ch] + f * colors[k1][ch];
        // Desaturate toward white near the wheel center.
        out[ch] = 1.0 - saturation * (1.0 - col);
    }
    out
}

/// Standard flow visualization: hue encodes direction, saturation encodes
/// magnitude normalized by the field's maximum. A zero field renders white.
pub fn flow_colorize<S: Scalar>(field: &MotionField<S>) -> Result<Tensor<S>> {
    let (h, w) = (field.height(), field.width());
    let hw = h * w;
    let d = field.data.data();
    let mut max_rad = 0.0f64;
    for p in 0..hw {
        let (dx, dy) = (d[p].to_f64(), d[hw + p].to_f64());
        if !dx.is_finite() || !dy.is_finite() {
            return Err(Error::NonFinite { op: "flow_colorize" });
        }
        max_rad = max_rad.max((dx * dx + dy * dy).sqrt());
    }
    let norm = if max_rad > 1e-12 { max_rad } else { 1.0 };
    let mut img = vec![S::ZERO; 3 * hw];
    for p in 0..hw {
        let (dx, dy) = (d[p].to_f64(), d[hw + p].to_f64());
        let rad = (dx * dx + dy * dy).sqrt() / norm;
        let rgb = wheel_color(dx, dy, rad.min(1.0));
        for ch in 0..3 {
            img[ch * hw + p] = S::from_f64(rgb[ch]);
        }
    }
    Tensor::from_vec(&[3, h, w], img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::constant_flow;

    #[test]
    fn magic_matches_middlebury_tag() {
        // The ASCII magic and the classic float tag are the same bytes.
        assert_eq!(202021.25f32.to_le_bytes(), *MAGIC);
    }

    #[test]
    fn roundtrip_bit_exact() {
        let field = constant_flow::<f32>(3, 5, 1.25, -2.5, 0, Endpoint::TToOne).unwrap();
        let mut buf = Vec::new();
        write_flo_to(&field, &mut buf).unwrap();
        let back = read_flo_from::<f32>(buf.as_slice()).unwrap();
        let (a, b) = (field.data.data(), back.data.data());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn file_size_arithmetic() {
        let field = crate::warp::MotionField::<f32>::zeros(2, 2, 0, Endpoint::TToOne);
        let mut buf = Vec::new();
        write_flo_to(&field, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 2 * 2 * 2 * 4);
    }

    #[test]
    fn rejects_foreign_magic_and_truncation() {
        let field = constant_flow::<f32>(2, 2, 1.0, 0.0, 0, Endpoint::TToOne).unwrap();
        let mut buf = Vec::new();
        write_flo_to(&field, &mut buf).unwrap();
        // Byte-swapped magic.
        let mut foreign = buf.clone();
        foreign[..4].reverse();
        assert!(read_flo_from::<f32>(foreign.as_slice()).is_err());
        // Truncated payload.
        let truncated = &buf[..buf.len() - 3];
        assert!(read_flo_from::<f32>(truncated).is_err());
    }

    #[test]
    fn zero_field_renders_white() {
        let field = crate::warp::MotionField::<f64>::zeros(4, 4, 0, Endpoint::TToOne);
        let img = flow_colorize(&field).unwrap();
        assert!(img.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_field_renders_single_wheel_color() {
        let field = constant_flow::<f64>(3, 3, 2.0, 0.0, 0, Endpoint::TToOne).unwrap();
        let img = flow_colorize(&field).unwrap();
        let want = wheel_color(1.0, 0.0, 1.0);
        let d = img.data();
        for p in 0..9 {
            for ch in 0..3 {
                assert!((d[ch * 9 + p] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negated_field_rotates_hue_half_turn() {
        let field = constant_flow::<f64>(2, 2, 1.0, 1.0, 0, Endpoint::TToOne).unwrap();
        let neg = constant_flow::<f64>(2, 2, -1.0, -1.0, 0, Endpoint::TToOne).unwrap();
        let img_neg = flow_colorize(&neg).unwrap();
        let want = wheel_color(-1.0, -1.0, 1.0);
        let d = img_neg.data();
        for ch in 0..3 {
            assert!((d[ch * 4] - want[ch]).abs() < 1e-12);
        }
        // And the two renders differ (opposite hues).
        let img = flow_colorize(&field).unwrap();
        let diff: f64 = img
            .data()
            .iter()
            .zip(img_neg.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.5);
    }
}
