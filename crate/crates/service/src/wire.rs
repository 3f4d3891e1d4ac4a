//! Request payloads and JSON response schemas.

use nmsleak_core::detector::DecisionBox;
use nmsleak_core::raster::{self, RAW_MAGIC};
use nmsleak_core::Raster;
use serde::{Deserialize, Serialize};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Header carrying the client's request id; echoed in the response body.
pub const REQUEST_ID_HEADER: &str = "X-Request-Id";
/// Optional declared dimensions, checked against the decoded payload.
pub const HEIGHT_HEADER: &str = "X-Image-Height";
pub const WIDTH_HEADER: &str = "X-Image-Width";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadFormat {
    /// Lossless float32 tensor. Multi-megabyte bodies add upload time that
    /// grows with image size.
    #[default]
    Raw,
    /// 8-bit PNG; values are quantized to 256 levels.
    Png,
}

impl PayloadFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            PayloadFormat::Raw => "application/octet-stream",
            PayloadFormat::Png => "image/png",
        }
    }

    pub fn encode(self, img: &Raster) -> nmsleak_core::Result<Vec<u8>> {
        match self {
            PayloadFormat::Raw => Ok(img.encode_raw()),
            PayloadFormat::Png => img.encode_png(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<DecisionBox>,
    pub id: String,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Machine-readable reason, e.g. `bad_dimensions`.
    pub error: String,
    pub message: String,
}

/// A rejected request: HTTP status plus body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub status: u16,
    pub body: ErrorBody,
}

impl Rejection {
    pub fn new(status: u16, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
            },
        }
    }
}

/// `(height, width)` as stated in a PNG IHDR chunk or a raw tensor header.
fn header_dims(bytes: &[u8], png: bool) -> Option<(usize, usize)> {
    let word = |i: usize, be: bool| {
        let w: [u8; 4] = bytes.get(i..i + 4)?.try_into().ok()?;
        Some(if be {
            u32::from_be_bytes(w)
        } else {
            u32::from_le_bytes(w)
        } as usize)
    };
    if png {
        Some((word(20, true)?, word(16, true)?))
    } else {
        Some((word(4, false)?, word(8, false)?))
    }
}

/// Decodes a request body by sniffing its magic bytes and checks it against
/// the declared dimensions, if any.
pub fn decode_payload(bytes: &[u8], declared: Option<(usize, usize)>) -> Result<Raster, Rejection> {
    let png = bytes.starts_with(&PNG_SIGNATURE);
    if !png && !bytes.starts_with(&RAW_MAGIC) {
        return Err(Rejection::new(
            400,
            "unknown_format",
            "body is neither PNG nor a raw NMSR tensor",
        ));
    }
    if let Some((h, w)) = header_dims(bytes, png) {
        raster::check_dims(h, w).map_err(|e| Rejection::new(400, "bad_dimensions", e.to_string()))?;
    }
    let decoded = if png {
        Raster::decode_png(bytes)
    } else {
        Raster::decode_raw(bytes)
    };
    let img = decoded.map_err(|e| Rejection::new(400, "malformed_payload", e.to_string()))?;
    if let Some((h, w)) = declared {
        if (h, w) != (img.height(), img.width()) {
            return Err(Rejection::new(
                400,
                "shape_mismatch",
                format!("declared {h}x{w}, payload is {}x{}", img.height(), img.width()),
            ));
        }
    }
    Ok(img)
}
