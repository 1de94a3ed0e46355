//! MRtrix TCK reader/writer (float32 triplets, NaN separators, Inf terminator).

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Point, Streamline, StreamlineSet};
use crate::error::{Error, Result};

const MAGIC: &str = "mrtrix tracks";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

pub fn load_tck(path: impl AsRef<Path>) -> Result<StreamlineSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let subject_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let streamlines = parse_tck(&bytes)?;
    Ok(StreamlineSet::new(subject_id, streamlines))
}

pub(crate) fn parse_tck(bytes: &[u8]) -> Result<Vec<Streamline>> {
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(Error::Format("missing 'mrtrix tracks' magic".into()));
    }
    let mut endian = None;
    let mut offset = None;
    let mut pos = 0usize;
    let mut saw_end = false;
    while pos < bytes.len() {
        let line_end = bytes[pos..].iter().position(|&b| b == b'\n').map(|p| pos + p);
        let Some(line_end) = line_end else { break };
        let line = String::from_utf8_lossy(&bytes[pos..line_end]);
        let line = line.trim();
        pos = line_end + 1;
        if line == "END" {
            saw_end = true;
            break;
        }
        let Some((key, value)) = line.split_once(':') else { continue };
        match key.trim() {
            "datatype" => {
                endian = Some(match value.trim() {
                    "Float32LE" => Endian::Little,
                    "Float32BE" => Endian::Big,
                    other => return Err(Error::UnsupportedDatatype(format!("TCK datatype {other}"))),
                })
            }
            "file" => {
                let mut parts = value.split_whitespace();
                let (Some("."), Some(off)) = (parts.next(), parts.next()) else {
                    return Err(Error::Parse(format!("unsupported file field '{}'", value.trim())));
                };
                offset = Some(off.parse::<usize>().map_err(|_| Error::Parse(format!("bad file offset '{off}'")))?);
            }
            _ => {}
        }
    }
    if !saw_end {
        return Err(Error::Parse("header has no END line".into()));
    }
    let endian = endian.ok_or_else(|| Error::Parse("header has no datatype".into()))?;
    let offset = offset.ok_or_else(|| Error::Parse("header has no file offset".into()))?;
    if offset > bytes.len() {
        return Err(Error::Parse("file offset beyond end of file".into()));
    }

    let body = &bytes[offset..];
    let mut streamlines = Vec::new();
    let mut current: Vec<Point> = Vec::new();
    let mut skipped = 0usize;
    let mut terminated = false;
    for chunk in body.chunks_exact(12) {
        let mut xyz = [0f32; 3];
        match endian {
            Endian::Little => LittleEndian::read_f32_into(chunk, &mut xyz),
            Endian::Big => BigEndian::read_f32_into(chunk, &mut xyz),
        }
        if xyz.iter().all(|v| v.is_infinite()) {
            terminated = true;
            break;
        }
        if xyz.iter().all(|v| v.is_nan()) {
            finish_track(&mut current, &mut streamlines, &mut skipped);
            continue;
        }
        current.push([xyz[0] as f64, xyz[1] as f64, xyz[2] as f64]);
    }
    if !terminated {
        return Err(Error::Parse("track data ends without the Inf terminator".into()));
    }
    finish_track(&mut current, &mut streamlines, &mut skipped);
    if skipped > 0 {
        log::warn!("skipped {skipped} degenerate tracks with fewer than two distinct points");
    }
    Ok(streamlines)
}

fn finish_track(current: &mut Vec<Point>, out: &mut Vec<Streamline>, skipped: &mut usize) {
    if current.is_empty() {
        return;
    }
    let mut pts = std::mem::take(current);
    pts.dedup();
    match Streamline::new(pts) {
        Ok(s) => out.push(s),
        Err(_) => *skipped += 1,
    }
}

/// Writes little-endian float32 TCK.
pub fn save_tck(set: &StreamlineSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tck(set)).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_tck(set: &StreamlineSet) -> Vec<u8> {
    let head = |offset: usize| {
        format!(
            "{MAGIC}\ndatatype: Float32LE\ncount: {}\nsubject: {}\nfile: . {offset}\nEND\n",
            set.len(),
            set.subject_id
        )
    };
    let mut offset = head(0).len();
    while head(offset).len() != offset {
        offset = head(offset).len();
    }
    let mut out = head(offset).into_bytes();

    let total_points: usize = set.streamlines.iter().map(|s| s.len() + 1).sum::<usize>() + 1;
    let mut vals = Vec::with_capacity(total_points * 3);
    for s in &set.streamlines {
        for p in s.points() {
            vals.extend(p.iter().map(|&v| v as f32));
        }
        vals.extend([f32::NAN; 3]);
    }
    vals.extend([f32::INFINITY; 3]);
    let start = out.len();
    out.resize(start + vals.len() * 4, 0);
    LittleEndian::write_f32_into(&vals, &mut out[start..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(tracks: Vec<Vec<Point>>) -> StreamlineSet {
        StreamlineSet::new("t", tracks.into_iter().map(|p| Streamline::new(p).unwrap()).collect())
    }

    #[test]
    fn two_tracks_of_three_points() {
        let s = set(vec![
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [0.0, 3.0, 0.5]],
        ]);
        let parsed = parse_tck(&encode_tck(&s)).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(parsed.iter().all(|t| t.len() == 3));
        assert_eq!(parsed[1].points()[2], [0.0, 3.0, 0.5]);
    }

    #[test]
    fn header_offset_is_consistent() {
        let s = set(vec![vec![[0.0; 3], [1.0, 1.0, 1.0]]]);
        let bytes = encode_tck(&s);
        let text = String::from_utf8_lossy(&bytes[..bytes.len().min(120)]);
        let off: usize = text
            .lines()
            .find_map(|l| l.strip_prefix("file: . "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(bytes[..off].ends_with(b"END\n"));
    }

    #[test]
    fn missing_terminator_is_parse_error() {
        let s = set(vec![vec![[0.0; 3], [1.0, 1.0, 1.0]]]);
        let mut bytes = encode_tck(&s);
        bytes.truncate(bytes.len() - 12);
        assert!(matches!(parse_tck(&bytes), Err(Error::Parse(_))));
        // partial trailing triplet
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(parse_tck(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_bad_magic_and_datatype() {
        assert!(matches!(parse_tck(b"not tracks\nEND\n"), Err(Error::Format(_))));
        let hdr = b"mrtrix tracks\ndatatype: Float64LE\nfile: . 60\nEND\n";
        assert!(matches!(parse_tck(hdr), Err(Error::UnsupportedDatatype(_))));
    }

    #[test]
    fn big_endian_body() {
        let header = "mrtrix tracks\ndatatype: Float32BE\nfile: . 64\nEND\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.resize(64, b' ');
        let vals = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, f32::NAN, f32::NAN, f32::NAN, f32::INFINITY, f32::INFINITY, f32::INFINITY];
        let mut body = [0u8; 48];
        BigEndian::write_f32_into(&vals, &mut body);
        bytes.extend_from_slice(&body);
        let parsed = parse_tck(&bytes).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn degenerate_tracks_are_skipped() {
        let header = "mrtrix tracks\ndatatype: Float32LE\nfile: . 64\nEND\n";
        let mut bytes = header.as_bytes().to_vec();
        bytes.resize(64, b' ');
        let vals = [1.0f32, 1.0, 1.0, 1.0, 1.0, 1.0, f32::NAN, f32::NAN, f32::NAN, f32::INFINITY, f32::INFINITY, f32::INFINITY];
        let mut body = [0u8; 48];
        LittleEndian::write_f32_into(&vals, &mut body);
        bytes.extend_from_slice(&body);
        assert!(parse_tck(&bytes).unwrap().is_empty());
    }
}
