//! File formats: event text streams and the binary tensor container.
//!
//! Tensor container layout, all integers little-endian:
//!
//! ```text
//! "EVTK" | u32 version = 1 | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```
//!
//! Named archives (weights, score-map bundles) use version 2:
//!
//! ```text
//! "EVTK" | u32 version = 2 | u32 count |
//!     count x ( u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f32 data )
//! ```

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::event::Event;

pub const MAGIC: &[u8; 4] = b"EVTK";
pub const VERSION_TENSOR: u32 = 1;
pub const VERSION_ARCHIVE: u32 = 2;

/// Row-major f32 tensor as stored in the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|v| *v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| f64::from(*v)).collect()
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_body<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_u32(w, t.dims.len() as u32)?;
    for d in &t.dims {
        write_u32(w, *d as u32)?;
    }
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_body<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Validation(format!("implausible tensor rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

fn read_header<R: Read>(r: &mut R) -> Result<u32> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation("missing EVTK magic".into()));
    }
    read_u32(r)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION_TENSOR)?;
    write_body(w, t)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    match read_header(r)? {
        VERSION_TENSOR => read_body(r),
        v => Err(Error::Validation(format!(
            "expected single-tensor container, found version {v}"
        ))),
    }
}

pub fn write_archive<W: Write>(w: &mut W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION_ARCHIVE)?;
    write_u32(w, records.len() as u32)?;
    for (name, t) in records {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_body(w, t)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    match read_header(r)? {
        VERSION_ARCHIVE => {}
        v => {
            return Err(Error::Validation(format!(
                "expected named archive, found version {v}"
            )))
        }
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Validation("record name is not utf-8".into()))?;
        out.push((name, read_body(r)?));
    }
    Ok(out)
}

/// Writes events as `t_us x y p` lines.
pub fn write_events<W: Write>(w: &mut W, events: &[Event]) -> Result<()> {
    for e in events {
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(r: R) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_ascii_whitespace();
        let mut next = |name: &str| it.next().ok_or_else(|| err(&format!("missing {name}")));
        let t: i64 = next("t")?.parse().map_err(|_| err("bad timestamp"))?;
        let x: u16 = next("x")?.parse().map_err(|_| err("bad x"))?;
        let y: u16 = next("y")?.parse().map_err(|_| err("bad y"))?;
        let p: i8 = next("p")?.parse().map_err(|_| err("bad polarity"))?;
        if p != 1 && p != -1 {
            return Err(err("polarity must be 1 or -1"));
        }
        out.push(Event::new(t, x, y, p));
    }
    Ok(out)
}

/// FNV-1a over the canonical text encoding of a stream.
pub fn event_checksum(events: &[Event]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for e in events {
        for b in format!("{} {} {} {}\n", e.t, e.x, e.y, e.p).bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Formats a value with `digits` significant digits, like C's `%.*g`.
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let exp: i32 = sci
        .rsplit('e')
        .next()
        .and_then(|e| e.parse().ok())
        .unwrap_or(0);
    if exp < -5 || exp >= digits as i32 {
        let (mantissa, _) = sci.split_once('e').unwrap_or((&sci, ""));
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
