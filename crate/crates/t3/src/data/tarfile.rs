//! Minimal POSIX ustar writer/reader.
//!
//! Headers are fully pinned (mtime 0, uid/gid 0, mode 0644), so archives are
//! byte-identical for identical content. Member names must fit the 100-byte
//! name field, which shard keys always do.

use std::io::{self, Read, Write};

const BLOCK: usize = 512;

pub struct TarWriter<W: Write> {
    w: W,
    finished: bool,
}

impl<W: Write> TarWriter<W> {
    pub fn new(w: W) -> Self {
        TarWriter { w, finished: false }
    }

    pub fn append(&mut self, name: &str, data: &[u8]) -> io::Result<()> {
        assert!(!self.finished, "append after finish");
        if name.len() >= 100 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("tar member name '{name}' exceeds 99 bytes"),
            ));
        }
        let mut header = [0u8; BLOCK];
        header[..name.len()].copy_from_slice(name.as_bytes());
        header[100..108].copy_from_slice(b"0000644\0");
        header[108..116].copy_from_slice(b"0000000\0");
        header[116..124].copy_from_slice(b"0000000\0");
        let size = format!("{:011o}\0", data.len());
        header[124..136].copy_from_slice(size.as_bytes());
        header[136..148].copy_from_slice(b"00000000000\0");
        header[148..156].copy_from_slice(b"        "); // checksum placeholder
        header[156] = b'0'; // regular file
        header[257..263].copy_from_slice(b"ustar\0");
        header[263..265].copy_from_slice(b"00");
        let checksum: u32 = header.iter().map(|&b| b as u32).sum();
        let chk = format!("{checksum:06o}\0 ");
        header[148..156].copy_from_slice(chk.as_bytes());

        self.w.write_all(&header)?;
        self.w.write_all(data)?;
        let rem = data.len() % BLOCK;
        if rem != 0 {
            self.w.write_all(&vec![0u8; BLOCK - rem])?;
        }
        Ok(())
    }

    /// Write the terminating zero blocks and flush.
    pub fn finish(&mut self) -> io::Result<()> {
        if !self.finished {
            self.w.write_all(&[0u8; BLOCK * 2])?;
            self.w.flush()?;
            self.finished = true;
        }
        Ok(())
    }
}

pub struct TarReader<R: Read> {
    r: R,
    done: bool,
}

impl<R: Read> TarReader<R> {
    pub fn new(r: R) -> Self {
        TarReader { r, done: false }
    }
}

fn parse_octal(field: &[u8]) -> Option<u64> {
    let s: Vec<u8> = field
        .iter()
        .copied()
        .take_while(|&b| b != 0 && b != b' ')
        .collect();
    let s = std::str::from_utf8(&s).ok()?;
    u64::from_str_radix(s.trim(), 8).ok()
}

impl<R: Read> Iterator for TarReader<R> {
    type Item = io::Result<(String, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut header = [0u8; BLOCK];
        if let Err(e) = self.r.read_exact(&mut header) {
            self.done = true;
            if e.kind() == io::ErrorKind::UnexpectedEof {
                return None;
            }
            return Some(Err(e));
        }
        if header.iter().all(|&b| b == 0) {
            self.done = true;
            return None;
        }
        // checksum over the header with the checksum field blanked
        let stored = match parse_octal(&header[148..156]) {
            Some(v) => v as u32,
            None => {
                self.done = true;
                return Some(Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "unreadable tar checksum field",
                )));
            }
        };
        let mut sum: u32 = 0;
        for (i, &b) in header.iter().enumerate() {
            sum += if (148..156).contains(&i) { b' ' as u32 } else { b as u32 };
        }
        if sum != stored {
            self.done = true;
            return Some(Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("tar header checksum mismatch ({sum} != {stored})"),
            )));
        }
        let name_end = header[..100].iter().position(|&b| b == 0).unwrap_or(100);
        let name = String::from_utf8_lossy(&header[..name_end]).into_owned();
        let size = match parse_octal(&header[124..136]) {
            Some(v) => v as usize,
            None => {
                self.done = true;
                return Some(Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "unreadable tar size field",
                )));
            }
        };
        let mut data = vec![0u8; size];
        if let Err(e) = self.r.read_exact(&mut data) {
            self.done = true;
            return Some(Err(e));
        }
        let rem = size % BLOCK;
        if rem != 0 {
            let mut pad = vec![0u8; BLOCK - rem];
            if let Err(e) = self.r.read_exact(&mut pad) {
                self.done = true;
                return Some(Err(e));
            }
        }
        Some(Ok((name, data)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_members() {
        let mut buf = Vec::new();
        {
            let mut w = TarWriter::new(&mut buf);
            w.append("a.jpg", b"hello").unwrap();
            w.append("a.json", br#"{"x":1}"#).unwrap();
            w.finish().unwrap();
        }
        assert_eq!(buf.len() % 512, 0);
        let entries: Vec<_> = TarReader::new(buf.as_slice()).map(|e| e.unwrap()).collect();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "a.jpg");
        assert_eq!(entries[0].1, b"hello");
        assert_eq!(entries[1].0, "a.json");
    }

    #[test]
    fn identical_content_identical_bytes() {
        let write = || {
            let mut buf = Vec::new();
            let mut w = TarWriter::new(&mut buf);
            w.append("k.jpg", &[1, 2, 3]).unwrap();
            w.finish().unwrap();
            buf
        };
        assert_eq!(write(), write());
    }

    #[test]
    fn corrupt_header_reports_error() {
        let mut buf = Vec::new();
        {
            let mut w = TarWriter::new(&mut buf);
            w.append("k.jpg", &[9; 100]).unwrap();
            w.finish().unwrap();
        }
        buf[130] ^= 0x55; // trash the size field
        let mut r = TarReader::new(buf.as_slice());
        assert!(r.next().unwrap().is_err());
        assert!(r.next().is_none(), "reader stops after a corrupt header");
    }

    #[test]
    fn system_tar_can_list_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tar");
        {
            let f = std::fs::File::create(&path).unwrap();
            let mut w = TarWriter::new(std::io::BufWriter::new(f));
            w.append("x.json", b"{}").unwrap();
            w.finish().unwrap();
        }
        let out = std::process::Command::new("tar")
            .args(["-tf", path.to_str().unwrap()])
            .output();
        if let Ok(out) = out {
            // only assert when a system tar exists
            if out.status.success() {
                assert!(String::from_utf8_lossy(&out.stdout).contains("x.json"));
            }
        }
    }
}
