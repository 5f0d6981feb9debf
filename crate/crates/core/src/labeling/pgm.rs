use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scenario::Mask;

/// Binary PGM (P5), tool pixels 255.
pub fn write_pgm<W: Write>(m: &Mask, mut w: W) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", m.width, m.height)?;
    let bytes: Vec<u8> = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a P5 PGM; any non-zero sample is tool.
pub fn read_pgm<R: Read>(mut r: R) -> Result<Mask> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Parse("not a P5 PGM".into()));
    }
    let num = |s: String| s.parse::<usize>().map_err(|e| Error::Parse(format!("PGM header: {e}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let start = pos + 1;
    if buf.len() < start + w * h {
        return Err(Error::Parse("PGM pixel data truncated".into()));
    }
    let data = buf[start..start + w * h].iter().map(|&v| v != 0).collect();
    Ok(Mask { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = Mask::new(7, 4);
        m.set(3, 1, true);
        m.set(6, 3, true);
        let mut out = Vec::new();
        write_pgm(&m, &mut out).unwrap();
        assert_eq!(read_pgm(&out[..]).unwrap(), m);
    }
}
