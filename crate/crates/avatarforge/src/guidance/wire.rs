//! Byte-level adapter boundary for out-of-process guidance backends: a
//! fixed, versioned little-endian framing of noise-prediction requests
//! and responses, a TCP client backend, and a serving loop that exposes
//! any in-process backend over the same frames.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use rand::RngCore;

use crate::image::ImageBuf;

use super::{GuidanceBackend, GuidanceError, Latent};

/// Version stamped into every frame; bumped on any schema change.
pub const WIRE_VERSION: u16 = 1;

const REQUEST_MAGIC: &[u8; 4] = b"AVGR";
const RESPONSE_MAGIC: &[u8; 4] = b"AVGE";

const MAX_PROMPT_BYTES: usize = 1 << 20;
const MAX_CONDITION_BYTES: usize = 1 << 26;
const MAX_SIDE: u32 = 65_536;
const MAX_LATENT_LEN: usize = 1 << 28;

const STATUS_OK: u8 = 0;
const STATUS_RETRIABLE: u8 = 1;
const STATUS_CONTRACT: u8 = 2;

/// One noise-prediction request as it travels over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRequest {
    pub latent: Latent,
    pub t: u32,
    pub prompt: String,
    /// PNG-encoded pose-conditioning image, if any.
    pub condition_png: Option<Vec<u8>>,
    pub guidance_scale: f32,
}

/// One noise-prediction response: the predicted noise, or a failure the
/// client should map back onto its own error kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseResponse {
    Epsilon(Vec<f32>),
    Retriable(String),
    Contract(String),
}

fn io_err(e: std::io::Error) -> GuidanceError {
    GuidanceError::Backend(format!("transport failure: {e}"))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), GuidanceError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<(), GuidanceError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), GuidanceError> {
    r.read_exact(buf).map_err(io_err)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GuidanceError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, GuidanceError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, GuidanceError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn write_f32_slice<W: Write>(w: &mut W, data: &[f32]) -> Result<(), GuidanceError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io_err)
}

fn read_f32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f32>, GuidanceError> {
    let mut bytes = vec![0u8; len * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(), GuidanceError> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(GuidanceError::Contract(format!(
            "bad frame magic {got:?}, expected {magic:?}"
        )));
    }
    let version = read_u16(r)?;
    if version != WIRE_VERSION {
        return Err(GuidanceError::Contract(format!(
            "wire version {version} is not the supported version {WIRE_VERSION}"
        )));
    }
    Ok(())
}

/// Serializes one request frame.
pub fn write_request<W: Write>(w: &mut W, req: &NoiseRequest) -> Result<(), GuidanceError> {
    if req.prompt.len() > MAX_PROMPT_BYTES {
        return Err(GuidanceError::Contract(format!(
            "prompt of {} bytes exceeds the {MAX_PROMPT_BYTES}-byte cap",
            req.prompt.len()
        )));
    }
    if let Some(png) = &req.condition_png {
        if png.len() > MAX_CONDITION_BYTES {
            return Err(GuidanceError::Contract(format!(
                "condition image of {} bytes exceeds the {MAX_CONDITION_BYTES}-byte cap",
                png.len()
            )));
        }
    }
    let (h, w_, c) = req.latent.shape();
    w.write_all(REQUEST_MAGIC).map_err(io_err)?;
    w.write_all(&WIRE_VERSION.to_le_bytes()).map_err(io_err)?;
    write_u32(w, req.t)?;
    write_f32(w, req.guidance_scale)?;
    write_u32(w, h as u32)?;
    write_u32(w, w_ as u32)?;
    write_u32(w, c as u32)?;
    write_f32_slice(w, &req.latent.data)?;
    write_u32(w, req.prompt.len() as u32)?;
    w.write_all(req.prompt.as_bytes()).map_err(io_err)?;
    match &req.condition_png {
        None => w.write_all(&[0u8]).map_err(io_err)?,
        Some(png) => {
            w.write_all(&[1u8]).map_err(io_err)?;
            write_u32(w, png.len() as u32)?;
            w.write_all(png).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Parses one request frame.
pub fn read_request<R: Read>(r: &mut R) -> Result<NoiseRequest, GuidanceError> {
    check_header(r, REQUEST_MAGIC)?;
    let t = read_u32(r)?;
    let guidance_scale = read_f32(r)?;
    let h = read_u32(r)?;
    let w = read_u32(r)?;
    let c = read_u32(r)?;
    if h == 0 || w == 0 || c == 0 || h > MAX_SIDE || w > MAX_SIDE || c > MAX_SIDE {
        return Err(GuidanceError::Contract(format!(
            "latent shape {h}x{w}x{c} is outside the wire limits"
        )));
    }
    let len = h as usize * w as usize * c as usize;
    if len > MAX_LATENT_LEN {
        return Err(GuidanceError::Contract(format!(
            "latent of {len} values exceeds the wire cap {MAX_LATENT_LEN}"
        )));
    }
    let data = read_f32_vec(r, len)?;
    let latent = Latent::new(h as usize, w as usize, c as usize, data)?;
    let prompt_len = read_u32(r)? as usize;
    if prompt_len > MAX_PROMPT_BYTES {
        return Err(GuidanceError::Contract(format!(
            "prompt of {prompt_len} bytes exceeds the {MAX_PROMPT_BYTES}-byte cap"
        )));
    }
    let mut prompt_bytes = vec![0u8; prompt_len];
    read_exact(r, &mut prompt_bytes)?;
    let prompt = String::from_utf8(prompt_bytes)
        .map_err(|e| GuidanceError::Contract(format!("prompt is not valid UTF-8: {e}")))?;
    let mut flag = [0u8; 1];
    read_exact(r, &mut flag)?;
    let condition_png = match flag[0] {
        0 => None,
        1 => {
            let len = read_u32(r)? as usize;
            if len > MAX_CONDITION_BYTES {
                return Err(GuidanceError::Contract(format!(
                    "condition image of {len} bytes exceeds the {MAX_CONDITION_BYTES}-byte cap"
                )));
            }
            let mut png = vec![0u8; len];
            read_exact(r, &mut png)?;
            Some(png)
        }
        other => {
            return Err(GuidanceError::Contract(format!(
                "condition flag {other} is not 0 or 1"
            )))
        }
    };
    Ok(NoiseRequest {
        latent,
        t,
        prompt,
        condition_png,
        guidance_scale,
    })
}

/// Serializes one response frame.
pub fn write_response<W: Write>(
    w: &mut W,
    response: &NoiseResponse,
) -> Result<(), GuidanceError> {
    w.write_all(RESPONSE_MAGIC).map_err(io_err)?;
    w.write_all(&WIRE_VERSION.to_le_bytes()).map_err(io_err)?;
    match response {
        NoiseResponse::Epsilon(data) => {
            if data.len() > MAX_LATENT_LEN {
                return Err(GuidanceError::Contract(format!(
                    "epsilon of {} values exceeds the wire cap {MAX_LATENT_LEN}",
                    data.len()
                )));
            }
            w.write_all(&[STATUS_OK]).map_err(io_err)?;
            write_u32(w, data.len() as u32)?;
            write_f32_slice(w, data)?;
        }
        NoiseResponse::Retriable(msg) | NoiseResponse::Contract(msg) => {
            let status = if matches!(response, NoiseResponse::Retriable(_)) {
                STATUS_RETRIABLE
            } else {
                STATUS_CONTRACT
            };
            w.write_all(&[status]).map_err(io_err)?;
            let bytes = msg.as_bytes();
            let take = bytes.len().min(MAX_PROMPT_BYTES);
            write_u32(w, take as u32)?;
            w.write_all(&bytes[..take]).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Parses one response frame.
pub fn read_response<R: Read>(r: &mut R) -> Result<NoiseResponse, GuidanceError> {
    check_header(r, RESPONSE_MAGIC)?;
    let mut status = [0u8; 1];
    read_exact(r, &mut status)?;
    match status[0] {
        STATUS_OK => {
            let len = read_u32(r)? as usize;
            if len > MAX_LATENT_LEN {
                return Err(GuidanceError::Contract(format!(
                    "epsilon of {len} values exceeds the wire cap {MAX_LATENT_LEN}"
                )));
            }
            Ok(NoiseResponse::Epsilon(read_f32_vec(r, len)?))
        }
        STATUS_RETRIABLE | STATUS_CONTRACT => {
            let len = read_u32(r)? as usize;
            if len > MAX_PROMPT_BYTES {
                return Err(GuidanceError::Contract(format!(
                    "failure message of {len} bytes exceeds the cap"
                )));
            }
            let mut bytes = vec![0u8; len];
            read_exact(r, &mut bytes)?;
            let msg = String::from_utf8_lossy(&bytes).into_owned();
            Ok(if status[0] == STATUS_RETRIABLE {
                NoiseResponse::Retriable(msg)
            } else {
                NoiseResponse::Contract(msg)
            })
        }
        other => Err(GuidanceError::Contract(format!(
            "response status {other} is not recognized"
        ))),
    }
}

/// Client for a noise-prediction service reachable over TCP. Each call
/// opens one connection, sends one request frame, and reads one response
/// frame. Transport failures are retriable; only noise prediction
/// travels over the wire in this protocol version.
pub struct RemoteBackend {
    endpoint: String,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>) -> RemoteBackend {
        RemoteBackend {
            endpoint: endpoint.into(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl GuidanceBackend for RemoteBackend {
    fn predict_noise(
        &self,
        z_t: &Latent,
        t: u32,
        prompt: &str,
        condition: Option<&ImageBuf>,
        guidance_scale: f32,
    ) -> Result<Latent, GuidanceError> {
        let condition_png = match condition {
            None => None,
            Some(image) => Some(image.encode_png()?),
        };
        let request = NoiseRequest {
            latent: z_t.clone(),
            t,
            prompt: prompt.to_string(),
            condition_png,
            guidance_scale,
        };
        let stream = TcpStream::connect(&self.endpoint).map_err(io_err)?;
        let mut writer = BufWriter::new(stream.try_clone().map_err(io_err)?);
        write_request(&mut writer, &request)?;
        drop(writer);
        let mut reader = BufReader::new(stream);
        match read_response(&mut reader)? {
            NoiseResponse::Epsilon(data) => {
                if data.len() != z_t.data.len() {
                    return Err(GuidanceError::Contract(format!(
                        "service returned {} values for a latent of {}",
                        data.len(),
                        z_t.data.len()
                    )));
                }
                Latent::new(z_t.height, z_t.width, z_t.channels, data)
            }
            NoiseResponse::Retriable(msg) => Err(GuidanceError::Backend(msg)),
            NoiseResponse::Contract(msg) => Err(GuidanceError::Contract(msg)),
        }
    }

    fn finetune(
        &self,
        _dataset: &[(ImageBuf, String)],
        _steps: u32,
    ) -> Result<Box<dyn GuidanceBackend>, GuidanceError> {
        Err(GuidanceError::Unsupported(
            "wire protocol version 1 carries noise prediction only; specialize \
             the backend on the serving side"
                .into(),
        ))
    }

    fn generate(
        &self,
        _prompt: &str,
        _condition: Option<&ImageBuf>,
        _rng: &mut dyn RngCore,
    ) -> Result<ImageBuf, GuidanceError> {
        Err(GuidanceError::Unsupported(
            "wire protocol version 1 carries noise prediction only; sample on \
             the serving side"
                .into(),
        ))
    }
}

/// Serves `backend` over `listener` for exactly `connections` accepted
/// connections (one request/response per connection), then returns.
/// Backend and framing failures are reported to the client on the open
/// connection; they do not stop the serving loop.
pub fn serve_noise_prediction(
    listener: &TcpListener,
    backend: Arc<dyn GuidanceBackend>,
    connections: usize,
) -> Result<(), GuidanceError> {
    for _ in 0..connections {
        let (stream, _addr) = listener.accept().map_err(io_err)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(io_err)?);
        let mut writer = BufWriter::new(stream);
        let response = match read_request(&mut reader) {
            Err(e) => failure_response(&e),
            Ok(request) => {
                let condition = match &request.condition_png {
                    None => None,
                    Some(png) => match ImageBuf::decode_png(png) {
                        Ok(img) => Some(img),
                        Err(e) => {
                            let msg = format!("condition image did not decode: {e}");
                            write_response(&mut writer, &NoiseResponse::Contract(msg))?;
                            continue;
                        }
                    },
                };
                match backend.predict_noise(
                    &request.latent,
                    request.t,
                    &request.prompt,
                    condition.as_ref(),
                    request.guidance_scale,
                ) {
                    Ok(epsilon) => NoiseResponse::Epsilon(epsilon.data),
                    Err(e) => failure_response(&e),
                }
            }
        };
        write_response(&mut writer, &response)?;
    }
    Ok(())
}

fn failure_response(e: &GuidanceError) -> NoiseResponse {
    if e.is_retriable() {
        NoiseResponse::Retriable(e.to_string())
    } else {
        NoiseResponse::Contract(e.to_string())
    }
}
