//! GPS metadata in JPEG Exif: reading, stripping and forging.
//!
//! Edits are surgical. Every JPEG segment other than the Exif APP1 is
//! copied byte for byte, the entropy-coded scan is never touched, and
//! inside the TIFF structure only the GPS directory, its pointer entry and
//! (when a pointer has to be added) the position of IFD0 change. Existing
//! offsets stay valid because nothing is moved; removed GPS data is zeroed
//! in place and new data is appended.

use serde::{Deserialize, Serialize};

use crate::DefenseError;

const SOI: u8 = 0xD8;
const EOI: u8 = 0xD9;
const SOS: u8 = 0xDA;
const APP0: u8 = 0xE0;
const APP1: u8 = 0xE1;
const EXIF_HEADER: &[u8] = b"Exif\0\0";
const GPS_POINTER: u16 = 0x8825;
const MAX_SEGMENT_PAYLOAD: usize = 0xFFFF - 2;

const TYPE_BYTE: u16 = 1;
const TYPE_ASCII: u16 = 2;
const TYPE_LONG: u16 = 4;
const TYPE_RATIONAL: u16 = 5;

/// Arcsecond denominator for forged coordinates.
pub const SECONDS_DENOMINATOR: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub const fn new(num: u32, den: u32) -> Self {
        Rational { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// GPS position as stored in Exif: hemisphere references plus unsigned
/// degree, minute and second rationals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsExif {
    pub lat_ref: char,
    pub lat: [Rational; 3],
    pub lon_ref: char,
    pub lon: [Rational; 3],
    pub altitude: Option<Rational>,
}

fn to_dms(value: f64) -> [Rational; 3] {
    let total = (value.abs() * 3600.0 * SECONDS_DENOMINATOR as f64).round() as u64;
    let per_degree = 3600 * SECONDS_DENOMINATOR as u64;
    let per_minute = 60 * SECONDS_DENOMINATOR as u64;
    let deg = total / per_degree;
    let rest = total % per_degree;
    [
        Rational::new(deg as u32, 1),
        Rational::new((rest / per_minute) as u32, 1),
        Rational::new((rest % per_minute) as u32, SECONDS_DENOMINATOR),
    ]
}

fn from_dms(dms: &[Rational; 3]) -> f64 {
    dms[0].value() + dms[1].value() / 60.0 + dms[2].value() / 3600.0
}

impl GpsExif {
    /// Encodes decimal degrees with denominators `(1, 1, 10000)`.
    pub fn from_decimal(lat: f64, lon: f64) -> Result<Self, DefenseError> {
        crate::check_coords(lat, lon)?;
        Ok(GpsExif {
            lat_ref: if lat < 0.0 { 'S' } else { 'N' },
            lat: to_dms(lat),
            lon_ref: if lon < 0.0 { 'W' } else { 'E' },
            lon: to_dms(lon),
            altitude: None,
        })
    }

    /// Signed decimal degrees `(lat, lon)`.
    pub fn to_decimal(&self) -> (f64, f64) {
        let sign = |r: char, neg: char| if r == neg { -1.0 } else { 1.0 };
        (
            sign(self.lat_ref, 'S') * from_dms(&self.lat),
            sign(self.lon_ref, 'W') * from_dms(&self.lon),
        )
    }
}

fn malformed(msg: impl Into<String>) -> DefenseError {
    DefenseError::MalformedExif(msg.into())
}

/// A marker segment as a byte range of the file, marker included.
#[derive(Clone, Copy, Debug)]
struct Segment {
    marker: u8,
    start: usize,
    end: usize,
}

impl Segment {
    fn payload<'a>(&self, bytes: &'a [u8]) -> &'a [u8] {
        &bytes[self.start + 4..self.end]
    }

    fn is_exif(&self, bytes: &[u8]) -> bool {
        self.marker == APP1 && self.end - self.start >= 4 && self.payload(bytes).starts_with(EXIF_HEADER)
    }
}

/// Header segments up to the start of scan, and the offset of the first
/// byte that is copied through unparsed.
fn split_segments(bytes: &[u8]) -> Result<(Vec<Segment>, usize), DefenseError> {
    if bytes.len() < 4 || bytes[0] != 0xFF || bytes[1] != SOI {
        return Err(DefenseError::NotJpeg("missing start-of-image marker".into()));
    }
    let mut segments = Vec::new();
    let mut pos = 2;
    loop {
        if pos >= bytes.len() {
            return Ok((segments, pos));
        }
        if bytes[pos] != 0xFF {
            return Err(DefenseError::NotJpeg(format!("expected a marker at byte {pos}")));
        }
        let mut m = pos + 1;
        while m < bytes.len() && bytes[m] == 0xFF {
            m += 1;
        }
        let Some(&marker) = bytes.get(m) else {
            return Err(DefenseError::NotJpeg("file ends inside a marker".into()));
        };
        let start = m - 1;
        if marker == SOS || marker == EOI {
            return Ok((segments, start));
        }
        if (0xD0..=0xD7).contains(&marker) || marker == 0x01 {
            segments.push(Segment {
                marker,
                start,
                end: m + 1,
            });
            pos = m + 1;
            continue;
        }
        let truncated = |what: &str| {
            let msg = format!("segment 0xFF{marker:02X} at byte {start} {what}");
            if marker == APP1 {
                malformed(msg)
            } else {
                DefenseError::NotJpeg(msg)
            }
        };
        let len = match bytes.get(m + 1..m + 3) {
            Some(b) => u16::from_be_bytes([b[0], b[1]]) as usize,
            None => return Err(truncated("has no length")),
        };
        let end = m + 1 + len;
        if len < 2 || end > bytes.len() {
            return Err(truncated("runs past the end of the file"));
        }
        segments.push(Segment { marker, start, end });
        pos = end;
    }
}

fn type_size(ty: u16) -> usize {
    match ty {
        1 | 2 | 6 | 7 => 1,
        3 | 8 => 2,
        4 | 9 | 11 | 13 => 4,
        5 | 10 | 12 => 8,
        _ => 1,
    }
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    tag: u16,
    ty: u16,
    count: u32,
    /// Offset of the 4-byte value field within the TIFF data.
    field: usize,
}

impl Entry {
    fn data_len(&self) -> usize {
        type_size(self.ty).saturating_mul(self.count as usize)
    }
}

/// TIFF data of an Exif segment with byte-order aware accessors.
struct Tiff {
    data: Vec<u8>,
    le: bool,
}

impl Tiff {
    fn parse(data: Vec<u8>) -> Result<Self, DefenseError> {
        let le = match data.get(0..2) {
            Some(b"II") => true,
            Some(b"MM") => false,
            _ => return Err(malformed("TIFF header has no byte-order mark")),
        };
        let tiff = Tiff { data, le };
        if tiff.u16_at(2)? != 42 {
            return Err(malformed("TIFF header lacks the 42 marker"));
        }
        Ok(tiff)
    }

    fn new_empty(le: bool) -> Self {
        let mut data = if le { b"II".to_vec() } else { b"MM".to_vec() };
        let mut t = Tiff { data: Vec::new(), le };
        data.extend(t.enc16(42));
        data.extend(t.enc32(0));
        t.data = data;
        t
    }

    fn bytes(&self, off: usize, len: usize) -> Result<&[u8], DefenseError> {
        off.checked_add(len)
            .and_then(|end| self.data.get(off..end))
            .ok_or_else(|| malformed(format!("{len} byte(s) at offset {off} lie outside the Exif data")))
    }

    fn u16_at(&self, off: usize) -> Result<u16, DefenseError> {
        let b = self.bytes(off, 2)?;
        Ok(if self.le {
            u16::from_le_bytes([b[0], b[1]])
        } else {
            u16::from_be_bytes([b[0], b[1]])
        })
    }

    fn u32_at(&self, off: usize) -> Result<u32, DefenseError> {
        let b = self.bytes(off, 4)?;
        let a = [b[0], b[1], b[2], b[3]];
        Ok(if self.le {
            u32::from_le_bytes(a)
        } else {
            u32::from_be_bytes(a)
        })
    }

    fn enc16(&self, v: u16) -> [u8; 2] {
        if self.le {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        }
    }

    fn enc32(&self, v: u32) -> [u8; 4] {
        if self.le {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        }
    }

    fn put32(&mut self, off: usize, v: u32) {
        let b = self.enc32(v);
        self.data[off..off + 4].copy_from_slice(&b);
    }

    fn ifd0(&self) -> Result<usize, DefenseError> {
        Ok(self.u32_at(4)? as usize)
    }

    fn entries(&self, ifd: usize) -> Result<Vec<Entry>, DefenseError> {
        let n = self.u16_at(ifd)? as usize;
        self.bytes(ifd, 2 + 12 * n + 4)?;
        (0..n)
            .map(|i| {
                let at = ifd + 2 + 12 * i;
                Ok(Entry {
                    tag: self.u16_at(at)?,
                    ty: self.u16_at(at + 2)?,
                    count: self.u32_at(at + 4)?,
                    field: at + 8,
                })
            })
            .collect()
    }

    /// Where an entry's value lives: inline in the field or at an offset.
    fn value_range(&self, e: &Entry) -> Result<(usize, usize), DefenseError> {
        let len = e.data_len();
        let off = if len <= 4 {
            e.field
        } else {
            self.u32_at(e.field)? as usize
        };
        self.bytes(off, len)?;
        Ok((off, len))
    }

    fn gps_pointer(&self) -> Result<Option<(usize, Entry)>, DefenseError> {
        let ifd0 = self.ifd0()?;
        if ifd0 == 0 {
            return Ok(None);
        }
        Ok(self
            .entries(ifd0)?
            .into_iter()
            .enumerate()
            .find(|(_, e)| e.tag == GPS_POINTER))
    }

    fn rationals(&self, e: &Entry, n: usize) -> Result<Vec<Rational>, DefenseError> {
        if e.ty != TYPE_RATIONAL || (e.count as usize) < n {
            return Err(malformed(format!("GPS tag {:#06x} is not {n} rationals", e.tag)));
        }
        let (off, _) = self.value_range(e)?;
        (0..n)
            .map(|i| {
                let r = Rational::new(self.u32_at(off + 8 * i)?, self.u32_at(off + 8 * i + 4)?);
                if r.den == 0 {
                    return Err(malformed(format!("GPS tag {:#06x} has a zero denominator", e.tag)));
                }
                Ok(r)
            })
            .collect()
    }

    fn reference(&self, e: &Entry) -> Result<char, DefenseError> {
        let (off, len) = self.value_range(e)?;
        match self.bytes(off, len.min(1))?.first() {
            Some(&b) => Ok(b as char),
            None => Err(malformed(format!("GPS tag {:#06x} is empty", e.tag))),
        }
    }

    fn read_gps(&self) -> Result<Option<GpsExif>, DefenseError> {
        let Some((_, pointer)) = self.gps_pointer()? else {
            return Ok(None);
        };
        let gps = self.u32_at(pointer.field)? as usize;
        let entries = self.entries(gps)?;
        let find = |tag: u16| entries.iter().find(|e| e.tag == tag);
        let (Some(lat_ref), Some(lat), Some(lon_ref), Some(lon)) = (find(1), find(2), find(3), find(4)) else {
            return Ok(None);
        };
        let triple = |e: &Entry| -> Result<[Rational; 3], DefenseError> {
            let v = self.rationals(e, 3)?;
            Ok([v[0], v[1], v[2]])
        };
        let fix = GpsExif {
            lat_ref: self.reference(lat_ref)?,
            lat: triple(lat)?,
            lon_ref: self.reference(lon_ref)?,
            lon: triple(lon)?,
            altitude: find(6).map(|e| self.rationals(e, 1).map(|v| v[0])).transpose()?,
        };
        if !matches!(fix.lat_ref, 'N' | 'S') || !matches!(fix.lon_ref, 'E' | 'W') {
            return Err(malformed(format!(
                "bad hemisphere references {}/{}",
                fix.lat_ref, fix.lon_ref
            )));
        }
        Ok(Some(fix))
    }

    /// Zeroes the GPS directory that `pointer` refers to, together with
    /// its out-of-line values.
    fn wipe_gps(&mut self, pointer: &Entry) -> Result<(), DefenseError> {
        let gps = self.u32_at(pointer.field)? as usize;
        let entries = self.entries(gps)?;
        let mut wipe = vec![(gps, 2 + 12 * entries.len() + 4)];
        for e in &entries {
            let (off, len) = self.value_range(e)?;
            if len > 4 {
                wipe.push((off, len));
            }
        }
        for (off, len) in wipe {
            self.data[off..off + len].fill(0);
        }
        Ok(())
    }

    /// Wipes the GPS directory and removes its pointer from IFD0. Returns
    /// whether there was anything to remove.
    fn strip_gps(&mut self) -> Result<bool, DefenseError> {
        let Some((index, pointer)) = self.gps_pointer()? else {
            return Ok(false);
        };
        self.wipe_gps(&pointer)?;
        self.remove_entry(self.ifd0()?, index)?;
        Ok(true)
    }

    fn remove_entry(&mut self, ifd: usize, index: usize) -> Result<(), DefenseError> {
        let n = self.u16_at(ifd)? as usize;
        let at = ifd + 2 + 12 * index;
        let tail_end = ifd + 2 + 12 * n + 4;
        self.data.copy_within(at + 12..tail_end, at);
        self.data[tail_end - 12..tail_end].fill(0);
        let count = self.enc16((n - 1) as u16);
        self.data[ifd..ifd + 2].copy_from_slice(&count);
        Ok(())
    }

    fn align(&mut self) {
        if self.data.len() % 2 == 1 {
            self.data.push(0);
        }
    }

    /// Appends a GPS directory for `fix` and returns its offset.
    fn append_gps(&mut self, fix: &GpsExif) -> usize {
        self.align();
        let start = self.data.len();
        let mut entries: Vec<(u16, u16, u32, Vec<u8>)> = vec![
            (0, TYPE_BYTE, 4, vec![2, 3, 0, 0]),
            (1, TYPE_ASCII, 2, vec![fix.lat_ref as u8, 0]),
            (2, TYPE_RATIONAL, 3, self.encode_rationals(&fix.lat)),
            (3, TYPE_ASCII, 2, vec![fix.lon_ref as u8, 0]),
            (4, TYPE_RATIONAL, 3, self.encode_rationals(&fix.lon)),
        ];
        if let Some(alt) = fix.altitude {
            entries.push((5, TYPE_BYTE, 1, vec![0]));
            entries.push((6, TYPE_RATIONAL, 1, self.encode_rationals(&[alt])));
        }
        let dir_len = 2 + 12 * entries.len() + 4;
        let mut data_off = start + dir_len;
        let mut dir = self.enc16(entries.len() as u16).to_vec();
        let mut values: Vec<u8> = Vec::new();
        for (tag, ty, count, bytes) in &entries {
            dir.extend(self.enc16(*tag));
            dir.extend(self.enc16(*ty));
            dir.extend(self.enc32(*count));
            if bytes.len() <= 4 {
                let mut field = bytes.clone();
                field.resize(4, 0);
                dir.extend(field);
            } else {
                dir.extend(self.enc32(data_off as u32));
                values.extend(bytes);
                data_off += bytes.len();
            }
        }
        dir.extend(self.enc32(0));
        self.data.extend(dir);
        self.data.extend(values);
        start
    }

    fn encode_rationals(&self, rs: &[Rational]) -> Vec<u8> {
        rs.iter()
            .flat_map(|r| self.enc32(r.num).into_iter().chain(self.enc32(r.den)))
            .collect()
    }

    /// Points IFD0 at a GPS directory at `gps`. An existing pointer entry
    /// is updated in place; otherwise IFD0 is rewritten at the end of the
    /// data with the pointer added and its old location zeroed.
    fn set_gps_pointer(&mut self, gps: usize) -> Result<(), DefenseError> {
        if let Some((_, e)) = self.gps_pointer()? {
            self.put32(e.field, gps as u32);
            return Ok(());
        }
        let ifd0 = self.ifd0()?;
        let (old_len, mut raw, next) = if ifd0 == 0 {
            (0, Vec::new(), 0)
        } else {
            let n = self.u16_at(ifd0)? as usize;
            let raw: Vec<[u8; 12]> = (0..n)
                .map(|i| {
                    let b = self.bytes(ifd0 + 2 + 12 * i, 12)?;
                    Ok(b.try_into().expect("12 bytes"))
                })
                .collect::<Result<_, DefenseError>>()?;
            (2 + 12 * n + 4, raw, self.u32_at(ifd0 + 2 + 12 * n)?)
        };
        let mut pointer = [0u8; 12];
        pointer[0..2].copy_from_slice(&self.enc16(GPS_POINTER));
        pointer[2..4].copy_from_slice(&self.enc16(TYPE_LONG));
        pointer[4..8].copy_from_slice(&self.enc32(1));
        pointer[8..12].copy_from_slice(&self.enc32(gps as u32));
        raw.push(pointer);
        let le = self.le;
        let tag_of = |e: &[u8; 12]| {
            if le {
                u16::from_le_bytes([e[0], e[1]])
            } else {
                u16::from_be_bytes([e[0], e[1]])
            }
        };
        raw.sort_by_key(tag_of);

        self.align();
        let new_ifd0 = self.data.len();
        let count = self.enc16(raw.len() as u16);
        self.data.extend(count);
        for e in &raw {
            self.data.extend(e);
        }
        let next = self.enc32(next);
        self.data.extend(next);
        if old_len > 0 {
            self.data[ifd0..ifd0 + old_len].fill(0);
        }
        self.put32(4, new_ifd0 as u32);
        Ok(())
    }
}

fn exif_segment(bytes: &[u8]) -> Result<(Vec<Segment>, usize, Option<usize>), DefenseError> {
    let (segments, scan) = split_segments(bytes)?;
    let exif = segments.iter().position(|s| s.is_exif(bytes));
    Ok((segments, scan, exif))
}

fn tiff_of(bytes: &[u8], seg: &Segment) -> Result<Tiff, DefenseError> {
    Tiff::parse(seg.payload(bytes)[EXIF_HEADER.len()..].to_vec())
}

fn app1(tiff: &Tiff) -> Result<Vec<u8>, DefenseError> {
    let payload_len = EXIF_HEADER.len() + tiff.data.len();
    if payload_len > MAX_SEGMENT_PAYLOAD {
        return Err(DefenseError::ExifTooLarge(payload_len));
    }
    let mut seg = vec![0xFF, APP1];
    seg.extend(((payload_len + 2) as u16).to_be_bytes());
    seg.extend(EXIF_HEADER);
    seg.extend(&tiff.data);
    Ok(seg)
}

/// Reassembles the file with segment `replace` swapped for `with`, or
/// `with` inserted at `insert_at` (a segment index) when nothing is replaced.
fn splice(
    bytes: &[u8],
    segments: &[Segment],
    scan: usize,
    replace: Option<usize>,
    insert_at: usize,
    with: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() + with.len());
    out.extend(&bytes[..2]);
    for (i, s) in segments.iter().enumerate() {
        if replace.is_none() && i == insert_at {
            out.extend(with);
        }
        if replace == Some(i) {
            out.extend(with);
        } else {
            out.extend(&bytes[s.start..s.end]);
        }
    }
    if replace.is_none() && insert_at >= segments.len() {
        out.extend(with);
    }
    out.extend(&bytes[scan..]);
    out
}

/// GPS position recorded in a JPEG, if any.
pub fn read_gps_exif(bytes: &[u8]) -> Result<Option<GpsExif>, DefenseError> {
    let (segments, _, exif) = exif_segment(bytes)?;
    match exif {
        Some(i) => tiff_of(bytes, &segments[i])?.read_gps(),
        None => Ok(None),
    }
}

/// Removes GPS data from the Exif segment. Files without GPS data come
/// back unchanged. With `force`, an unparseable Exif segment is dropped
/// whole instead of failing.
pub fn strip_gps(bytes: &[u8], force: bool) -> Result<Vec<u8>, DefenseError> {
    let (segments, scan, exif) = exif_segment(bytes)?;
    let Some(i) = exif else {
        return Ok(bytes.to_vec());
    };
    let edited = tiff_of(bytes, &segments[i]).and_then(|mut t| Ok((t.strip_gps()?, t)));
    match edited {
        Ok((false, _)) => Ok(bytes.to_vec()),
        Ok((true, tiff)) => Ok(splice(bytes, &segments, scan, Some(i), 0, &app1(&tiff)?)),
        Err(DefenseError::MalformedExif(_)) if force => Ok(splice(bytes, &segments, scan, Some(i), 0, &[])),
        Err(e) => Err(e),
    }
}

/// Replaces any GPS data with `fix`, creating an Exif segment when the
/// file has none.
pub fn forge_gps(bytes: &[u8], fix: &GpsExif) -> Result<Vec<u8>, DefenseError> {
    let (segments, scan, exif) = exif_segment(bytes)?;
    match exif {
        Some(i) => {
            let mut tiff = tiff_of(bytes, &segments[i])?;
            if let Some((_, pointer)) = tiff.gps_pointer()? {
                tiff.wipe_gps(&pointer)?;
            }
            let gps = tiff.append_gps(fix);
            tiff.set_gps_pointer(gps)?;
            Ok(splice(bytes, &segments, scan, Some(i), 0, &app1(&tiff)?))
        }
        None => {
            let mut tiff = Tiff::new_empty(true);
            let gps = tiff.append_gps(fix);
            tiff.set_gps_pointer(gps)?;
            let insert_at = segments.iter().take_while(|s| s.marker == APP0).count();
            Ok(splice(bytes, &segments, scan, None, insert_at, &app1(&tiff)?))
        }
    }
}
