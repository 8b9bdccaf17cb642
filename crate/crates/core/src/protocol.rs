//! Streaming frame format for five-chip magnetometer readouts.
//!
//! Frame layout (92 bytes, all multi-byte fields little-endian):
//!
//! ```text
//! offset  size  field
//!      0     2  sync 0xAA 0x55
//!      2     8  timestamp_us (u64)
//!     10    80  5 × (temp, bx, by, bz) as IEEE-754 f32
//!     90     2  CRC-16/CCITT (poly 0x1021, init 0xFFFF) over bytes 2..90
//! ```
//!
//! The decoder is an incremental state machine: feed it chunks of any size and
//! it yields every CRC-valid frame, resynchronizing on the next sync pair after
//! corruption.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Duration;

use crc::{Crc, CRC_16_IBM_3740};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_sim::{FluxVector, Reading, FLUX_DIM, N_MAGNETOMETERS};

pub const SYNC: [u8; 2] = [0xAA, 0x55];
pub const PAYLOAD_LEN: usize = 8 + N_MAGNETOMETERS * 4 * 4;
pub const FRAME_LEN: usize = SYNC.len() + PAYLOAD_LEN + 2;
/// Nominal chip sampling rate.
pub const STREAM_RATE_HZ: f64 = 400.0;

/// CRC-16/CCITT-FALSE, catalogued as CRC-16/IBM-3740.
const CCITT: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

pub fn crc16(bytes: &[u8]) -> u16 {
    CCITT.checksum(bytes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChipSample {
    pub temp: f32,
    pub bx: f32,
    pub by: f32,
    pub bz: f32,
}

impl ChipSample {
    /// `[temp, bx, by, bz]` in wire order.
    pub fn fields(&self) -> [f32; 4] {
        [self.temp, self.bx, self.by, self.bz]
    }
}

/// One timestamped readout of all five chips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FluxFrame {
    pub timestamp_us: u64,
    pub chips: [ChipSample; N_MAGNETOMETERS],
}

impl FluxFrame {
    pub fn from_reading(timestamp_us: u64, reading: &Reading) -> Self {
        let chips = std::array::from_fn(|i| ChipSample {
            temp: reading.temperature[i] as f32,
            bx: reading.flux[3 * i] as f32,
            by: reading.flux[3 * i + 1] as f32,
            bz: reading.flux[3 * i + 2] as f32,
        });
        Self { timestamp_us, chips }
    }

    pub fn flux(&self) -> FluxVector {
        std::array::from_fn(|i| {
            let c = &self.chips[i / 3];
            [c.bx, c.by, c.bz][i % 3] as f64
        })
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &FluxFrame) -> bool {
        self.timestamp_us == other.timestamp_us
            && self
                .chips
                .iter()
                .zip(&other.chips)
                .all(|(a, b)| a.fields().map(f32::to_bits) == b.fields().map(f32::to_bits))
    }
}

pub fn encode_frame(frame: &FluxFrame) -> [u8; FRAME_LEN] {
    let mut out = [0u8; FRAME_LEN];
    out[..2].copy_from_slice(&SYNC);
    out[2..10].copy_from_slice(&frame.timestamp_us.to_le_bytes());
    let mut at = 10;
    for chip in &frame.chips {
        for v in chip.fields() {
            out[at..at + 4].copy_from_slice(&v.to_le_bytes());
            at += 4;
        }
    }
    let crc = crc16(&out[2..2 + PAYLOAD_LEN]);
    out[2 + PAYLOAD_LEN..].copy_from_slice(&crc.to_le_bytes());
    out
}

/// Decode exactly one frame; checks sync, length, and CRC.
pub fn decode_frame(bytes: &[u8]) -> Result<FluxFrame> {
    if bytes.len() != FRAME_LEN {
        return Err(Error::format("frame", format!("length {} != {FRAME_LEN}", bytes.len())));
    }
    if bytes[..2] != SYNC {
        return Err(Error::format("frame", "missing sync"));
    }
    if !crc_ok(bytes) {
        return Err(Error::format("frame", "CRC mismatch"));
    }
    Ok(parse_payload(&bytes[2..2 + PAYLOAD_LEN]))
}

fn crc_ok(frame: &[u8]) -> bool {
    let stored = u16::from_le_bytes([frame[FRAME_LEN - 2], frame[FRAME_LEN - 1]]);
    crc16(&frame[2..2 + PAYLOAD_LEN]) == stored
}

fn parse_payload(p: &[u8]) -> FluxFrame {
    let f = |at: usize| f32::from_le_bytes(p[at..at + 4].try_into().unwrap());
    let timestamp_us = u64::from_le_bytes(p[..8].try_into().unwrap());
    let chips = std::array::from_fn(|i| {
        let base = 8 + 16 * i;
        ChipSample {
            temp: f(base),
            bx: f(base + 4),
            by: f(base + 8),
            bz: f(base + 12),
        }
    });
    FluxFrame { timestamp_us, chips }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeDiagnostics {
    pub frames: u64,
    /// Bytes discarded while hunting for sync, including failed frame starts.
    pub skipped_bytes: u64,
    pub crc_failures: u64,
    /// Frames whose timestamp went backwards relative to the previous frame.
    pub timestamp_regressions: u64,
}

/// Incremental single-consumer frame decoder.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    last_timestamp: Option<u64>,
    diag: DecodeDiagnostics,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn diagnostics(&self) -> DecodeDiagnostics {
        self.diag
    }

    /// Push a chunk, appending every completed valid frame to `out`.
    pub fn feed(&mut self, chunk: &[u8], out: &mut Vec<FluxFrame>) {
        self.buf.extend_from_slice(chunk);
        let mut pos = 0;
        loop {
            match find_sync(&self.buf[pos..]) {
                Some(off) => {
                    self.diag.skipped_bytes += off as u64;
                    pos += off;
                }
                None => {
                    // a trailing 0xAA may be the first half of the next sync
                    let rest = &self.buf[pos..];
                    let keep = usize::from(rest.last() == Some(&SYNC[0]));
                    self.diag.skipped_bytes += (rest.len() - keep) as u64;
                    pos = self.buf.len() - keep;
                    break;
                }
            }
            if self.buf.len() - pos < FRAME_LEN {
                break;
            }
            let candidate = &self.buf[pos..pos + FRAME_LEN];
            if crc_ok(candidate) {
                let frame = parse_payload(&candidate[2..2 + PAYLOAD_LEN]);
                if self.last_timestamp.is_some_and(|t| frame.timestamp_us < t) {
                    self.diag.timestamp_regressions += 1;
                }
                self.last_timestamp = Some(frame.timestamp_us);
                self.diag.frames += 1;
                out.push(frame);
                pos += FRAME_LEN;
            } else {
                self.diag.crc_failures += 1;
                self.diag.skipped_bytes += 1;
                pos += 1;
            }
        }
        self.buf.drain(..pos);
    }

    /// End of stream: leftover bytes count as skipped.
    pub fn finish(mut self) -> DecodeDiagnostics {
        self.diag.skipped_bytes += self.buf.len() as u64;
        self.diag
    }
}

fn find_sync(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == SYNC)
}

/// Decode a complete byte stream.
pub fn decode_stream(bytes: &[u8]) -> (Vec<FluxFrame>, DecodeDiagnostics) {
    let mut dec = StreamDecoder::new();
    let mut frames = Vec::new();
    dec.feed(bytes, &mut frames);
    (frames, dec.finish())
}

pub fn encode_stream(frames: &[FluxFrame]) -> Vec<u8> {
    frames.iter().flat_map(encode_frame).collect()
}

/// When the no-load reference is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaselineMode {
    /// Single no-load measurement at the start of the stream.
    Once,
    /// Refresh before every `k`-th contact.
    EveryK(usize),
    /// Refresh immediately before each contact.
    BeforeEach,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMode::Once => f.write_str("once"),
            BaselineMode::EveryK(k) => write!(f, "every_k:{k}"),
            BaselineMode::BeforeEach => f.write_str("before_each"),
        }
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "once" => Ok(BaselineMode::Once),
            "before_each" => Ok(BaselineMode::BeforeEach),
            other => {
                let k = other
                    .strip_prefix("every_k:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "baseline mode `{other}`: expected once, before_each or every_k:<k>"
                        ))
                    })?;
                if k < 1 {
                    return Err(Error::Config("baseline mode every_k needs k >= 1".into()));
                }
                Ok(BaselineMode::EveryK(k))
            }
        }
    }
}

impl TryFrom<String> for BaselineMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineMode> for String {
    fn from(m: BaselineMode) -> String {
        m.to_string()
    }
}

/// Tracks the current no-load reference and turns contact readings into deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTracker {
    mode: BaselineMode,
    current: Option<FluxVector>,
    contacts_since_update: usize,
}

impl BaselineTracker {
    pub fn new(mode: BaselineMode) -> Result<Self> {
        if let BaselineMode::EveryK(k) = mode {
            if k < 1 {
                return Err(Error::InvalidParameter("every_k baseline needs k >= 1".into()));
            }
        }
        Ok(Self {
            mode,
            current: None,
            contacts_since_update: 0,
        })
    }

    pub fn mode(&self) -> BaselineMode {
        self.mode
    }

    pub fn current_baseline(&self) -> Option<&FluxVector> {
        self.current.as_ref()
    }

    /// Offer a no-load reading; the tracker keeps it if its mode calls for a refresh.
    pub fn observe_no_load(&mut self, flux: &FluxVector) {
        let refresh = match (self.mode, self.current) {
            (_, None) => true,
            (BaselineMode::Once, Some(_)) => false,
            (BaselineMode::EveryK(k), Some(_)) => self.contacts_since_update >= k,
            (BaselineMode::BeforeEach, Some(_)) => true,
        };
        if refresh {
            self.current = Some(*flux);
            self.contacts_since_update = 0;
        }
    }

    pub fn contact_delta(&mut self, flux: &FluxVector) -> Result<FluxVector> {
        let base = self.current.ok_or(Error::MissingBaseline)?;
        self.contacts_since_update += 1;
        Ok(std::array::from_fn(|i| flux[i] - base[i]))
    }
}

/// Flux deltas for every contact frame; `contact_markers[i]` flags frame `i` as a contact.
pub fn apply_baseline(
    tracker: &mut BaselineTracker,
    frames: &[FluxFrame],
    contact_markers: &[bool],
) -> Result<Vec<FluxVector>> {
    if frames.len() != contact_markers.len() {
        return Err(Error::DimensionMismatch {
            expected: frames.len(),
            got: contact_markers.len(),
        });
    }
    let mut out = Vec::new();
    for (frame, &contact) in frames.iter().zip(contact_markers) {
        let flux = frame.flux();
        if contact {
            out.push(tracker.contact_delta(&flux)?);
        } else {
            tracker.observe_no_load(&flux);
        }
    }
    Ok(out)
}

/// Column names of the CSV log: `t_us`, then `chip{i}_{temp,bx,by,bz}`.
pub fn csv_header() -> Vec<String> {
    let mut h = vec!["t_us".to_string()];
    for i in 0..N_MAGNETOMETERS {
        for f in ["temp", "bx", "by", "bz"] {
            h.push(format!("chip{i}_{f}"));
        }
    }
    h
}

pub fn write_csv<W: Write>(frames: &[FluxFrame], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header())?;
    for frame in frames {
        let mut row = Vec::with_capacity(1 + FLUX_DIM + N_MAGNETOMETERS);
        row.push(frame.timestamp_us.to_string());
        for chip in &frame.chips {
            row.extend(chip.fields().iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<FluxFrame>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != csv_header() {
        return Err(Error::format("frame CSV", "unexpected header"));
    }
    let mut frames = Vec::new();
    for record in r.records() {
        let record = record?;
        let bad = |e: &dyn fmt::Display| Error::format("frame CSV", e.to_string());
        let timestamp_us = record[0].parse::<u64>().map_err(|e| bad(&e))?;
        let mut vals = [0f32; 4 * N_MAGNETOMETERS];
        for (v, s) in vals.iter_mut().zip(record.iter().skip(1)) {
            *v = s.parse::<f32>().map_err(|e| bad(&e))?;
        }
        let chips = std::array::from_fn(|i| ChipSample {
            temp: vals[4 * i],
            bx: vals[4 * i + 1],
            by: vals[4 * i + 2],
            bz: vals[4 * i + 3],
        });
        frames.push(FluxFrame { timestamp_us, chips });
    }
    Ok(frames)
}

/// Wall-clock offsets at which to emit each frame during replay.
///
/// Frames follow their recorded timestamps; with `max_rate_hz` set, consecutive
/// frames are additionally kept at least `1 / max_rate_hz` apart.
pub fn replay_schedule(frames: &[FluxFrame], max_rate_hz: Option<f64>) -> Vec<Duration> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let min_gap = max_rate_hz.filter(|r| *r > 0.0).map(|r| 1e6 / r).unwrap_or(0.0);
    let mut out = Vec::with_capacity(frames.len());
    let mut prev: Option<f64> = None;
    for f in frames {
        let recorded = f.timestamp_us.saturating_sub(first.timestamp_us) as f64;
        let t = match prev {
            Some(p) => recorded.max(p + min_gap),
            None => 0.0,
        };
        out.push(Duration::from_nanos((t * 1e3).round() as u64));
        prev = Some(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(ts: u64, seed: f32) -> FluxFrame {
        FluxFrame {
            timestamp_us: ts,
            chips: std::array::from_fn(|i| ChipSample {
                temp: 25.0 + i as f32 * 0.25,
                bx: seed + i as f32,
                by: -seed * 0.5 + i as f32,
                bz: seed * 0.125 - 3.0,
            }),
        }
    }

    #[test]
    fn crc_check_value() {
        // standard check string for CRC-16/CCITT-FALSE
        assert_eq!(crc16(b"123456789"), 0x29B1);
    }

    #[test]
    fn zero_frame_layout() {
        let bytes = encode_frame(&FluxFrame::default());
        assert_eq!(bytes.len(), 92);
        assert_eq!(bytes[..2], [0xAA, 0x55]);
        assert!(bytes[2..90].iter().all(|b| *b == 0));
        assert_eq!(u16::from_le_bytes([bytes[90], bytes[91]]), crc16(&[0u8; 88]));
    }

    #[test]
    fn bx_of_chip_zero_is_little_endian() {
        let mut f = FluxFrame::default();
        f.chips[0].bx = 1.0;
        let bytes = encode_frame(&f);
        // payload: 8-byte timestamp then chip0 temp, so bx0 sits at payload offset 12
        assert_eq!(bytes[2 + 12..2 + 16], [0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn decode_frame_rejects_damage() {
        let mut bytes = encode_frame(&frame(5, 1.5));
        assert!(decode_frame(&bytes).unwrap().bit_eq(&frame(5, 1.5)));
        bytes[40] ^= 0x04;
        assert!(decode_frame(&bytes).is_err());
        assert!(decode_frame(&bytes[..91]).is_err());
    }

    #[test]
    fn ten_clean_frames() {
        let frames: Vec<_> = (0..10).map(|i| frame(i * 2500, i as f32)).collect();
        let (out, diag) = decode_stream(&encode_stream(&frames));
        assert_eq!(out.len(), 10);
        assert_eq!(diag.skipped_bytes, 0);
        assert_eq!(diag.crc_failures, 0);
        assert!(out.iter().zip(&frames).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn flipped_payload_bit_loses_only_that_frame() {
        let frames: Vec<_> = (0..3).map(|i| frame(i * 2500, 1.0 + i as f32)).collect();
        let mut bytes = encode_stream(&frames);
        bytes[FRAME_LEN + 30] ^= 0x10;
        let (out, diag) = decode_stream(&bytes);
        assert_eq!(out.len(), 2);
        assert_eq!(diag.crc_failures, 1);
        assert!(out[1].bit_eq(&frames[2]));
        assert_eq!(diag.skipped_bytes, FRAME_LEN as u64);
    }

    #[test]
    fn stream_starting_mid_frame() {
        let frames: Vec<_> = (0..4).map(|i| frame(i * 2500, 2.0 + i as f32)).collect();
        let bytes = encode_stream(&frames);
        let (out, diag) = decode_stream(&bytes[37..]);
        assert_eq!(out.len(), 3);
        assert!(out[0].bit_eq(&frames[1]));
        assert_eq!(diag.skipped_bytes, (FRAME_LEN - 37) as u64);
    }

    #[test]
    fn byte_at_a_time_matches_bulk() {
        let frames: Vec<_> = (0..5).map(|i| frame(i * 2500, i as f32 * 0.3)).collect();
        let mut bytes = encode_stream(&frames);
        bytes[3 * FRAME_LEN + 5] ^= 0xFF;
        let (bulk, bulk_diag) = decode_stream(&bytes);
        let mut dec = StreamDecoder::new();
        let mut out = Vec::new();
        for b in &bytes {
            dec.feed(std::slice::from_ref(b), &mut out);
        }
        assert_eq!(out, bulk);
        assert_eq!(dec.finish(), bulk_diag);
    }

    #[test]
    fn timestamp_regressions_are_counted() {
        let frames = [frame(10, 0.0), frame(5, 0.0), frame(20, 0.0)];
        let (_, diag) = decode_stream(&encode_stream(&frames));
        assert_eq!(diag.timestamp_regressions, 1);
    }

    #[test]
    fn baseline_mode_parsing() {
        assert_eq!("once".parse::<BaselineMode>().unwrap(), BaselineMode::Once);
        assert_eq!("every_k:7".parse::<BaselineMode>().unwrap(), BaselineMode::EveryK(7));
        assert!("every_k:0".parse::<BaselineMode>().is_err());
        assert!("sometimes".parse::<BaselineMode>().is_err());
        assert!(BaselineTracker::new(BaselineMode::EveryK(0)).is_err());
        for m in [BaselineMode::Once, BaselineMode::EveryK(3), BaselineMode::BeforeEach] {
            assert_eq!(m.to_string().parse::<BaselineMode>().unwrap(), m);
        }
    }

    fn flux_frame(v: f32) -> FluxFrame {
        FluxFrame {
            timestamp_us: 0,
            chips: [ChipSample {
                temp: 25.0,
                bx: v,
                by: v,
                bz: v,
            }; 5],
        }
    }

    #[test]
    fn before_each_subtracts_preceding_no_load() {
        let frames = [flux_frame(1.0), flux_frame(4.0), flux_frame(2.0), flux_frame(7.0)];
        let mut t = BaselineTracker::new(BaselineMode::BeforeEach).unwrap();
        let d = apply_baseline(&mut t, &frames, &[false, true, false, true]).unwrap();
        assert_eq!(d, vec![[3.0; 15], [5.0; 15]]);
    }

    #[test]
    fn every_k_refreshes_on_schedule() {
        // no-load drifts by +1 each interaction, contact adds 10
        let mut frames = Vec::new();
        let mut markers = Vec::new();
        for i in 0..6 {
            frames.push(flux_frame(i as f32));
            markers.push(false);
            frames.push(flux_frame(i as f32 + 10.0));
            markers.push(true);
        }
        let mut t = BaselineTracker::new(BaselineMode::EveryK(2)).unwrap();
        let d = apply_baseline(&mut t, &frames, &markers).unwrap();
        let firsts: Vec<f64> = d.iter().map(|v| v[0]).collect();
        assert_eq!(firsts, vec![10.0, 11.0, 10.0, 11.0, 10.0, 11.0]);

        let mut once = BaselineTracker::new(BaselineMode::Once).unwrap();
        let d = apply_baseline(&mut once, &frames, &markers).unwrap();
        let firsts: Vec<f64> = d.iter().map(|v| v[0]).collect();
        assert_eq!(firsts, vec![10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn contact_without_baseline_is_an_error() {
        let mut t = BaselineTracker::new(BaselineMode::Once).unwrap();
        assert!(matches!(
            apply_baseline(&mut t, &[flux_frame(1.0)], &[true]),
            Err(Error::MissingBaseline)
        ));
        assert!(apply_baseline(&mut t, &[flux_frame(1.0)], &[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let frames: Vec<_> = (0..4).map(|i| frame(i * 2500, 0.1 + i as f32 / 3.0)).collect();
        let mut buf = Vec::new();
        write_csv(&frames, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_us,chip0_temp,chip0_bx,chip0_by,chip0_bz,chip1_temp"));
        let back = read_csv(&buf[..]).unwrap();
        assert!(back.iter().zip(&frames).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn replay_schedule_at_stream_rate() {
        let frames: Vec<_> = (0..4000).map(|i| frame(i * 2500, 0.0)).collect();
        let s = replay_schedule(&frames, Some(STREAM_RATE_HZ));
        assert_eq!(s[0], Duration::ZERO);
        assert_eq!(*s.last().unwrap(), Duration::from_micros(3999 * 2500));
        // timestamps packed tighter than the rate limit get spread out
        let burst: Vec<_> = (0..5).map(|i| frame(i * 100, 0.0)).collect();
        let s = replay_schedule(&burst, Some(400.0));
        assert_eq!(s[4], Duration::from_micros(4 * 2500));
        let s = replay_schedule(&burst, None);
        assert_eq!(s[4], Duration::from_micros(400));
    }
}
