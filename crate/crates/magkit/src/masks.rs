//! Planar 8-bit mask container.
//!
//! Layout, all integers little-endian:
//! `b"MGKMASK1"`, `u16` part count, `u32` height, `u32` width, then per part a
//! `u16` name length and UTF-8 name, then one `height * width` byte plane per
//! part in name order. A byte `q` stands for probability `q / 255`; readers
//! renormalize each pixel after dequantizing.

use std::path::Path;
use std::sync::Arc;

use magkit_core::mask::PartMaskStack;

use crate::error::{io, parse, Result};

const MAGIC: &[u8; 8] = b"MGKMASK1";

pub fn encode_masks(stack: &PartMaskStack) -> Vec<u8> {
    let names = stack.part_names();
    let plane = stack.height() * stack.width();
    let mut out = Vec::with_capacity(24 + names.len() * (plane + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(names.len() as u16).to_le_bytes());
    out.extend_from_slice(&(stack.height() as u32).to_le_bytes());
    out.extend_from_slice(&(stack.width() as u32).to_le_bytes());
    for n in names.iter() {
        out.extend_from_slice(&(n.len() as u16).to_le_bytes());
        out.extend_from_slice(n.as_bytes());
    }
    out.extend(stack.probs().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<usize> {
        Some(u16::from_le_bytes(self.take(2)?.try_into().ok()?) as usize)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode_masks(bytes: &[u8], origin: &Path) -> Result<PartMaskStack> {
    let bad = |d: &str| parse(origin, None, d.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a mask container"));
    }
    let (parts, h, w) = match (r.u16(), r.u32(), r.u32()) {
        (Some(p), Some(h), Some(w)) => (p, h, w),
        _ => return Err(bad("truncated header")),
    };
    let mut names = Vec::with_capacity(parts);
    for _ in 0..parts {
        let len = r.u16().ok_or_else(|| bad("truncated part name"))?;
        let raw = r.take(len).ok_or_else(|| bad("truncated part name"))?;
        names.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("part name is not UTF-8"))?);
    }
    let len = parts.checked_mul(h).and_then(|n| n.checked_mul(w)).ok_or_else(|| bad("plane size overflows"))?;
    let data = r.take(len).ok_or_else(|| bad("truncated planes"))?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let probs = data.iter().map(|q| *q as f64 / 255.0).collect();
    let names: Arc<[String]> = names.into();
    Ok(PartMaskStack::normalized(probs, names, h, w)?)
}

pub fn read_masks(path: &Path) -> Result<PartMaskStack> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    decode_masks(&bytes, path)
}

pub fn write_masks(path: &Path, stack: &PartMaskStack) -> Result<()> {
    std::fs::write(path, encode_masks(stack)).map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use magkit_core::data::{synth_sample, SynthSpec};

    #[test]
    fn round_trip_is_within_quantization() {
        let s = synth_sample(&SynthSpec::new(16, 4), 0).unwrap();
        let bytes = encode_masks(&s.parts);
        let back = decode_masks(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.part_names(), s.parts.part_names());
        for (a, b) in back.probs().iter().zip(s.parts.probs()) {
            assert!((a - b).abs() < 5.0 / 255.0);
        }
        assert_eq!(encode_masks(&back), bytes, "re-encoding is stable");
    }

    #[test]
    fn rejects_damaged_files() {
        let s = synth_sample(&SynthSpec::new(8, 4), 0).unwrap();
        let bytes = encode_masks(&s.parts);
        assert!(decode_masks(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        assert!(decode_masks(&[bytes.as_slice(), &[0]].concat(), Path::new("m")).is_err());
        assert!(decode_masks(b"MGKMASK2", Path::new("m")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_stacks_round_trip(parts in 1usize..5, h in 1usize..6, w in 1usize..6, seed in proptest::collection::vec(0.0f64..1.0, 125)) {
            let probs: Vec<f64> = (0..parts * h * w).map(|i| seed[i % seed.len()] + 0.01).collect();
            let names: Arc<[String]> = (0..parts).map(|p| format!("part{p}")).collect::<Vec<_>>().into();
            let stack = PartMaskStack::normalized(probs, names, h, w).unwrap();
            let bytes = encode_masks(&stack);
            let back = decode_masks(&bytes, Path::new("m")).unwrap();
            proptest::prop_assert_eq!((back.parts(), back.height(), back.width()), (parts, h, w));
            for px in 0..h * w {
                let sum: f64 = (0..parts).map(|p| back.channel(p)[px]).sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..64)) {
            let mut with_magic = MAGIC.to_vec();
            with_magic.extend_from_slice(&bytes);
            let _ = decode_masks(&bytes, Path::new("m"));
            let _ = decode_masks(&with_magic, Path::new("m"));
        }
    }
}
