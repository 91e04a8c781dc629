//! Binary event and depth files.
//!
//! Events: 16-byte header (`EVST`, u16 version, u16 width, u16 height, u32
//! count, 2 pad bytes) then 14-byte little-endian records (u16 x, u16 y, f64
//! t, i8 p, i8 pad).
//!
//! Depth: `DPTH`, u32 width, u32 height, then row-major f32 values; 0 marks
//! an invalid pixel.

use crate::events::{Event, EventStream};
use crate::{Error, GrayImage, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVST";
pub const EVENT_VERSION: u16 = 1;
pub const EVENT_HEADER_LEN: usize = 16;
pub const EVENT_RECORD_LEN: usize = 14;
pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
pub const DEPTH_HEADER_LEN: usize = 12;

pub fn encode_events(stream: &EventStream) -> Result<Vec<u8>> {
    let (w, h) = (stream.width, stream.height);
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::Range(format!("event sensor {w}x{h} exceeds 16-bit size")));
    }
    let count = u32::try_from(stream.len()).map_err(|_| Error::Range("too many events".into()))?;
    let mut out = Vec::with_capacity(EVENT_HEADER_LEN + EVENT_RECORD_LEN * stream.len());
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&EVENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
        out.push(0);
    }
    Ok(out)
}

/// Decodes an event file, collecting every problem. Record problems carry
/// the byte offset of the offending record.
pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVENT_HEADER_LEN {
        return Err(Error::Validation(vec![format!(
            "event file is {} bytes, shorter than its {EVENT_HEADER_LEN}-byte header",
            bytes.len()
        )]));
    }
    if &bytes[..4] != EVENT_MAGIC {
        return Err(Error::Validation(vec!["event file has bad magic (expected EVST)".into()]));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != EVENT_VERSION {
        return Err(Error::Version {
            what: "event file",
            found: version as u32,
            expected: EVENT_VERSION as u32,
        });
    }
    let (w, h) = (u16_at(6) as usize, u16_at(8) as usize);
    let count = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = EVENT_HEADER_LEN + count * EVENT_RECORD_LEN;
    if bytes.len() != expected {
        return Err(Error::Validation(vec![format!(
            "event file holds {} bytes but its header declares {count} records ({expected} bytes)",
            bytes.len()
        )]));
    }
    let mut problems = Vec::new();
    let mut events = Vec::with_capacity(count);
    let mut prev = f64::NEG_INFINITY;
    for i in 0..count {
        let o = EVENT_HEADER_LEN + i * EVENT_RECORD_LEN;
        let e = Event {
            x: u16_at(o),
            y: u16_at(o + 2),
            t: f64::from_le_bytes(bytes[o + 4..o + 12].try_into().expect("8 bytes")),
            p: bytes[o + 12] as i8,
        };
        if e.x as usize >= w || e.y as usize >= h {
            problems.push(format!(
                "event {i} at byte offset {o}: coordinate ({}, {}) outside sensor {w}x{h}",
                e.x, e.y
            ));
        }
        if e.p != 1 && e.p != -1 {
            problems.push(format!("event {i} at byte offset {o}: polarity {} is not +1 or -1", e.p));
        }
        if !e.t.is_finite() {
            problems.push(format!("event {i} at byte offset {o}: non-finite timestamp"));
        } else {
            if e.t < prev {
                problems.push(format!("event {i} at byte offset {o}: timestamp {} precedes {prev} (unsorted)", e.t));
            }
            prev = prev.max(e.t);
        }
        events.push(e);
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Ok(EventStream {
        width: w,
        height: h,
        events,
    })
}

pub fn encode_depth(depth: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for &d in depth.pixels() {
        let v = if d.is_finite() && d > 0.0 { d as f32 } else { 0.0 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < DEPTH_HEADER_LEN || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::Validation(vec!["depth file has bad magic or truncated header".into()]));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(DEPTH_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Validation(vec![format!(
            "depth file of {} bytes does not match its {w}x{h} header",
            bytes.len()
        )]));
    }
    let data: Vec<f64> = bytes[DEPTH_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(vec![format!(
            "depth value {} at pixel {i} is negative or non-finite",
            data[i]
        )]));
    }
    GrayImage::from_vec(w, h, data)
}
