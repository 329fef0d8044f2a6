//! Binary PGM (P5, maxval 255) reading and writing for debug frames.

use std::io::{self, BufRead, Write};

use super::GrayImage;

pub fn write_pgm<W: Write>(img: &GrayImage, mut out: W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height())?;
    out.write_all(img.as_raw())
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

fn next_token<R: BufRead>(r: &mut R) -> io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return if tok.is_empty() {
                Err(invalid("unexpected end of PGM header"))
            } else {
                Ok(tok)
            };
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut comment = Vec::new();
            r.read_until(b'\n', &mut comment)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

pub fn read_pgm<R: BufRead>(mut r: R) -> io::Result<GrayImage> {
    if next_token(&mut r)? != "P5" {
        return Err(invalid("not a binary PGM (P5)"));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| invalid("bad PGM header number"));
    let width = parse(next_token(&mut r)?)?;
    let height = parse(next_token(&mut r)?)?;
    let maxval = parse(next_token(&mut r)?)?;
    if maxval != 255 {
        return Err(invalid("only maxval 255 is supported"));
    }
    let mut data = vec![0u8; width * height];
    r.read_exact(&mut data)?;
    GrayImage::from_raw(width, height, data).map_err(|e| invalid(&e.to_string()))
}
