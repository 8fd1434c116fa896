//! Length-prefixed request/response protocol for the registry.
//!
//! A frame is `u32 len (LE) | u8 type | payload`, where `len` counts the type
//! byte and payload.
//!
//! | type | message | payload |
//! |------|---------|---------|
//! | 0x01 | UPLOAD   | id_len u8, id, creator_len u8, creator, model bytes |
//! | 0x02 | FETCH    | id_len u8, id, selector u8 (0 latest, 1 explicit), version u32 |
//! | 0x03 | LIST     | empty |
//! | 0x81 | OK       | version u32 |
//! | 0x82 | ENVELOPE | version u32, model bytes |
//! | 0x83 | LISTING  | count u32, then per entry id_len u8, id, max_version u32 |
//! | 0xFF | ERR      | code u8, UTF-8 message |

use std::io::{self, Read, Write};

use super::registry::{RegistryError, Selector};

pub const MAX_FRAME: usize = 64 * 1024 * 1024;

pub const MSG_UPLOAD: u8 = 0x01;
pub const MSG_FETCH: u8 = 0x02;
pub const MSG_LIST: u8 = 0x03;
pub const MSG_OK: u8 = 0x81;
pub const MSG_ENVELOPE: u8 = 0x82;
pub const MSG_LISTING: u8 = 0x83;
pub const MSG_ERR: u8 = 0xFF;

/// Error codes carried by `ERR` frames.
pub mod codes {
    pub const NOT_FOUND: u8 = 0x01;
    pub const UNKNOWN_VERSION: u8 = 0x02;
    pub const INVALID_PAYLOAD: u8 = 0x03;
    pub const INVALID_ID: u8 = 0x04;
    pub const MALFORMED: u8 = 0x05;
    pub const OVERSIZE: u8 = 0x06;
    pub const STORAGE: u8 = 0x07;
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds the 64 MiB cap")]
    Oversize(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl WireError {
    pub fn code(&self) -> u8 {
        match self {
            WireError::Oversize(_) => codes::OVERSIZE,
            _ => codes::MALFORMED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

pub fn write_frame(w: &mut impl Write, msg_type: u8, payload: &[u8]) -> Result<(), WireError> {
    let len = payload.len() + 1;
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    let mut buf = Vec::with_capacity(4 + len);
    buf.extend_from_slice(&(len as u32).to_le_bytes());
    buf.push(msg_type);
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean EOF before the length prefix is [`WireError::Closed`].
pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    if len == 0 {
        return Err(WireError::Malformed("zero-length frame".into()));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let msg_type = body[0];
    body.remove(0);
    Ok(Frame {
        msg_type,
        payload: body,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Upload {
        model_id: String,
        creator: String,
        payload: Vec<u8>,
    },
    Fetch {
        model_id: String,
        selector: Selector,
    },
    List,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Ok { version: u32 },
    Envelope { version: u32, payload: Vec<u8> },
    Listing(Vec<(String, u32)>),
    Err { code: u8, message: String },
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u8::try_from(s.len()).map_err(|_| WireError::Malformed(format!("string of {} bytes", s.len())))?;
    out.push(len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| WireError::Malformed("short payload".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u8()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Malformed("non-UTF-8 string".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Malformed("trailing bytes".into()))
        }
    }
}

impl Request {
    pub fn encode(&self) -> Result<(u8, Vec<u8>), WireError> {
        let mut out = Vec::new();
        let t = match self {
            Request::Upload {
                model_id,
                creator,
                payload,
            } => {
                put_str(&mut out, model_id)?;
                put_str(&mut out, creator)?;
                out.extend_from_slice(payload);
                MSG_UPLOAD
            }
            Request::Fetch { model_id, selector } => {
                put_str(&mut out, model_id)?;
                let (sel, v) = match selector {
                    Selector::Latest => (0u8, 0u32),
                    Selector::Version(v) => (1, *v),
                };
                out.push(sel);
                out.extend_from_slice(&v.to_le_bytes());
                MSG_FETCH
            }
            Request::List => MSG_LIST,
        };
        Ok((t, out))
    }

    pub fn decode(frame: &Frame) -> Result<Self, WireError> {
        let mut c = Cursor {
            buf: &frame.payload,
            pos: 0,
        };
        let req = match frame.msg_type {
            MSG_UPLOAD => Request::Upload {
                model_id: c.string()?,
                creator: c.string()?,
                payload: c.rest().to_vec(),
            },
            MSG_FETCH => {
                let model_id = c.string()?;
                let sel = c.u8()?;
                let v = c.u32()?;
                let selector = match sel {
                    0 => Selector::Latest,
                    1 => Selector::Version(v),
                    s => return Err(WireError::Malformed(format!("selector {s}"))),
                };
                Request::Fetch { model_id, selector }
            }
            MSG_LIST => Request::List,
            t => return Err(WireError::Malformed(format!("unknown request type {t:#04x}"))),
        };
        c.finish()?;
        Ok(req)
    }
}

impl Response {
    pub fn encode(&self) -> Result<(u8, Vec<u8>), WireError> {
        let mut out = Vec::new();
        let t = match self {
            Response::Ok { version } => {
                out.extend_from_slice(&version.to_le_bytes());
                MSG_OK
            }
            Response::Envelope { version, payload } => {
                out.extend_from_slice(&version.to_le_bytes());
                out.extend_from_slice(payload);
                MSG_ENVELOPE
            }
            Response::Listing(entries) => {
                out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                for (id, v) in entries {
                    put_str(&mut out, id)?;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                MSG_LISTING
            }
            Response::Err { code, message } => {
                out.push(*code);
                out.extend_from_slice(message.as_bytes());
                MSG_ERR
            }
        };
        Ok((t, out))
    }

    pub fn decode(frame: &Frame) -> Result<Self, WireError> {
        let mut c = Cursor {
            buf: &frame.payload,
            pos: 0,
        };
        let resp = match frame.msg_type {
            MSG_OK => Response::Ok { version: c.u32()? },
            MSG_ENVELOPE => Response::Envelope {
                version: c.u32()?,
                payload: c.rest().to_vec(),
            },
            MSG_LISTING => {
                let n = c.u32()?;
                let mut entries = Vec::new();
                for _ in 0..n {
                    entries.push((c.string()?, c.u32()?));
                }
                Response::Listing(entries)
            }
            MSG_ERR => Response::Err {
                code: c.u8()?,
                message: String::from_utf8_lossy(c.rest()).into_owned(),
            },
            t => return Err(WireError::Malformed(format!("unknown response type {t:#04x}"))),
        };
        c.finish()?;
        Ok(resp)
    }

    pub fn from_error(e: &RegistryError) -> Self {
        let code = match e {
            RegistryError::NotFound(_) => codes::NOT_FOUND,
            RegistryError::UnknownVersion { .. } => codes::UNKNOWN_VERSION,
            RegistryError::InvalidPayload(_) => codes::INVALID_PAYLOAD,
            RegistryError::InvalidId(_) => codes::INVALID_ID,
            RegistryError::Remote { code, .. } => *code,
            RegistryError::Storage(_) | RegistryError::Connection(_) => codes::STORAGE,
        };
        Response::Err {
            code,
            message: e.to_string(),
        }
    }
}
