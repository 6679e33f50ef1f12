//! Length-prefixed framing for the stream transports.
//!
//! ```text
//! frame  = "Content-Length: " length "\r\n\r\n" body
//! length = "0" / %x31-39 *DIGIT        ; canonical decimal, at most MAX_FRAME_LEN
//! body   = <length> octets of UTF-8
//! ```
//!
//! Nothing else is accepted: no other headers, no whitespace variants, no
//! leading zeros. That makes encoding the exact inverse of decoding.

use thiserror::Error;

pub const HEADER: &[u8] = b"Content-Length: ";
pub const SEPARATOR: &[u8] = b"\r\n\r\n";
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("expected 'Content-Length: ' header, skipped {skipped} byte(s)")]
    BadHeader { skipped: usize },
    #[error("invalid content length: {0}")]
    BadLength(String),
    #[error("frame body is not valid UTF-8")]
    InvalidUtf8,
}

/// Outcome of decoding at the start of a buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// More bytes are needed.
    Incomplete,
    /// A full frame; `consumed` bytes belong to it.
    Frame { body: String, consumed: usize },
    /// The leading `consumed` bytes do not form a frame and must be dropped.
    Invalid { error: FrameError, consumed: usize },
}

pub fn encode_frame(body: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 32);
    out.extend_from_slice(HEADER);
    out.extend_from_slice(body.len().to_string().as_bytes());
    out.extend_from_slice(SEPARATOR);
    out.extend_from_slice(body.as_bytes());
    out
}

/// Could a header begin at `buf[i..]`?
fn header_candidate(buf: &[u8], i: usize) -> bool {
    let rest = &buf[i..];
    if rest.len() >= HEADER.len() {
        rest.starts_with(HEADER)
    } else {
        HEADER.starts_with(rest)
    }
}

/// Index of the next possible frame start after position 0.
fn resync(buf: &[u8]) -> usize {
    (1..buf.len()).find(|&i| header_candidate(buf, i)).unwrap_or(buf.len())
}

fn invalid(buf: &[u8], error: FrameError) -> Decoded {
    Decoded::Invalid { error, consumed: resync(buf) }
}

pub fn decode_frame(buf: &[u8]) -> Decoded {
    if buf.is_empty() {
        return Decoded::Incomplete;
    }
    if !header_candidate(buf, 0) {
        let skipped = resync(buf);
        return Decoded::Invalid { error: FrameError::BadHeader { skipped }, consumed: skipped };
    }
    if buf.len() < HEADER.len() {
        return Decoded::Incomplete;
    }

    let digits_start = HEADER.len();
    let max_digits = MAX_FRAME_LEN.to_string().len();
    let mut end = digits_start;
    while end < buf.len() && buf[end].is_ascii_digit() {
        end += 1;
        if end - digits_start > max_digits {
            return invalid(buf, FrameError::BadLength("too many digits".into()));
        }
    }
    if end == buf.len() {
        return Decoded::Incomplete;
    }
    let digits = &buf[digits_start..end];
    if digits.is_empty() {
        return invalid(buf, FrameError::BadLength("no digits".into()));
    }
    if digits.len() > 1 && digits[0] == b'0' {
        return invalid(buf, FrameError::BadLength("leading zero".into()));
    }
    let length: usize = std::str::from_utf8(digits).expect("ascii digits").parse().expect("bounded digits");
    if length > MAX_FRAME_LEN {
        return invalid(buf, FrameError::BadLength(format!("{length} exceeds {MAX_FRAME_LEN}")));
    }

    let sep_end = end + SEPARATOR.len();
    let available = &buf[end..buf.len().min(sep_end)];
    if !SEPARATOR.starts_with(available) {
        return invalid(buf, FrameError::BadLength("length must be followed by CRLF CRLF".into()));
    }
    if buf.len() < sep_end + length {
        return Decoded::Incomplete;
    }
    let consumed = sep_end + length;
    match std::str::from_utf8(&buf[sep_end..consumed]) {
        Ok(body) => Decoded::Frame { body: body.to_string(), consumed },
        Err(_) => Decoded::Invalid { error: FrameError::InvalidUtf8, consumed },
    }
}

/// Incremental decoder over a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next frame or framing error; `None` until more bytes arrive.
    pub fn next_frame(&mut self) -> Option<Result<String, FrameError>> {
        match decode_frame(&self.buf) {
            Decoded::Incomplete => None,
            Decoded::Frame { body, consumed } => {
                self.buf.drain(..consumed);
                Some(Ok(body))
            }
            Decoded::Invalid { error, consumed } => {
                self.buf.drain(..consumed);
                Some(Err(error))
            }
        }
    }
}
