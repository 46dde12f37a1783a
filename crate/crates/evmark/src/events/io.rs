//! Event stream file formats.
//!
//! - `.csv`: header `t_us,x,y,p`, one event per line, `p` stored as 0/1.
//! - `.evb`: headerless little-endian binary, 13 bytes per record
//!   (u64 t, u16 x, u16 y, i8 p with p = ±1).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventStreamError, Polarity};

pub const EVB_RECORD_LEN: usize = 13;
const CSV_HEADER: &str = "t_us,x,y,p";

/// On-disk event stream format, selected by extension in [`read_events`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Evb,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> EventFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("evb") => EventFormat::Evb,
            _ => EventFormat::Csv,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> EventStreamError {
    EventStreamError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, offset: u64, message: impl Into<String>) -> EventStreamError {
    EventStreamError::Parse {
        path: path.display().to_string(),
        line,
        offset,
        message: message.into(),
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, EventStreamError> {
    match EventFormat::from_path(path) {
        EventFormat::Csv => read_events_csv(path),
        EventFormat::Evb => read_events_evb(path),
    }
}

pub fn write_events(events: &[Event], path: &Path) -> Result<(), EventStreamError> {
    match EventFormat::from_path(path) {
        EventFormat::Csv => write_events_csv(events, path),
        EventFormat::Evb => write_events_evb(events, path),
    }
}

pub fn read_events_csv(path: &Path) -> Result<Vec<Event>, EventStreamError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut line_buf = String::new();
    let mut lineno: u64 = 0;
    let mut offset: u64 = 0;
    let mut prev_t: u64 = 0;

    loop {
        line_buf.clear();
        let n = reader
            .read_line(&mut line_buf)
            .map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let line_start = offset;
        offset += n as u64;
        let line = line_buf.trim_end_matches(['\n', '\r']);
        if lineno == 1 {
            if line.trim() != CSV_HEADER {
                return Err(parse_err(
                    path,
                    1,
                    0,
                    format!("expected header `{CSV_HEADER}`, got `{line}`"),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next_field = |name: &str| {
            fields
                .next()
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(path, lineno, line_start, format!("missing field `{name}`")))
        };
        let t: u64 = next_field("t_us")?
            .parse()
            .map_err(|e| parse_err(path, lineno, line_start, format!("t_us: {e}")))?;
        let x: u16 = next_field("x")?
            .parse()
            .map_err(|e| parse_err(path, lineno, line_start, format!("x: {e}")))?;
        let y: u16 = next_field("y")?
            .parse()
            .map_err(|e| parse_err(path, lineno, line_start, format!("y: {e}")))?;
        let p: u8 = next_field("p")?
            .parse()
            .map_err(|e| parse_err(path, lineno, line_start, format!("p: {e}")))?;
        let polarity = match p {
            1 => Polarity::Up,
            0 => Polarity::Down,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    line_start,
                    format!("p must be 0 or 1, got {other}"),
                ))
            }
        };
        if fields.next().is_some() {
            return Err(parse_err(path, lineno, line_start, "trailing fields"));
        }
        if t < prev_t {
            return Err(EventStreamError::StreamOrder { prev: prev_t, t });
        }
        prev_t = t;
        events.push(Event::new(t, x, y, polarity));
    }
    Ok(events)
}

pub fn write_events_csv(events: &[Event], path: &Path) -> Result<(), EventStreamError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}").map_err(|e| io_err(path, e))?;
    for e in events {
        let p = match e.polarity {
            Polarity::Up => 1,
            Polarity::Down => 0,
        };
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, p).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_events_evb(path: &Path) -> Result<Vec<Event>, EventStreamError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut record = [0u8; EVB_RECORD_LEN];
    let mut offset: u64 = 0;
    let mut prev_t: u64 = 0;

    loop {
        let mut filled = 0;
        while filled < EVB_RECORD_LEN {
            let n = reader
                .read(&mut record[filled..])
                .map_err(|e| io_err(path, e))?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            break;
        }
        if filled < EVB_RECORD_LEN {
            return Err(parse_err(
                path,
                0,
                offset,
                format!("truncated record: {filled} of {EVB_RECORD_LEN} bytes at byte {offset}"),
            ));
        }
        let t = u64::from_le_bytes(record[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(record[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(record[10..12].try_into().unwrap());
        let p = record[12] as i8;
        let polarity = Polarity::from_sign(p)
            .ok_or_else(|| parse_err(path, 0, offset, format!("p must be ±1, got {p}")))?;
        if t < prev_t {
            return Err(EventStreamError::StreamOrder { prev: prev_t, t });
        }
        prev_t = t;
        events.push(Event::new(t, x, y, polarity));
        offset += EVB_RECORD_LEN as u64;
    }
    Ok(events)
}

pub fn write_events_evb(events: &[Event], path: &Path) -> Result<(), EventStreamError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut record = [0u8; EVB_RECORD_LEN];
    for e in events {
        record[0..8].copy_from_slice(&e.t.to_le_bytes());
        record[8..10].copy_from_slice(&e.x.to_le_bytes());
        record[10..12].copy_from_slice(&e.y.to_le_bytes());
        record[12] = e.polarity.sign() as u8;
        w.write_all(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
