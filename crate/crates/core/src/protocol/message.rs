//! Messages exchanged between devices and the coordinator, and their
//! byte-exact wire encoding.
//!
//! Frame layout, all integers and floats little-endian:
//!
//! ```text
//! u32  body length (bytes after this field)
//! u8   tag
//! u32  round
//! u16  device id (sender for uploads, recipient for downloads)
//! u32  rows
//! u32  cols
//! f64  rows·cols payload values, row-major
//! ```
//!
//! | tag | message      | payload shape |
//! |-----|--------------|---------------|
//! | 1   | FeatureBatch | b × m         |
//! | 2   | ScoreBatch   | b × 1         |
//! | 3   | LossReport   | 1 × 2 (`[loss, n_k]`) |
//! | 4   | GlobalLoss   | 1 × 1         |
//! | 5   | FeatureGrad  | b × m         |
//! | 6   | ScoreGrad    | b × 1         |

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Bytes before the payload: length prefix plus the fixed header.
pub const FRAME_HEADER_BYTES: usize = 4 + 1 + 4 + 2 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolMessage {
    /// Encoder output after optional clipping and noise. Carries no labels.
    FeatureBatch {
        device: u16,
        round: u32,
        features: Matrix,
    },
    ScoreBatch {
        device: u16,
        round: u32,
        scores: Vec<f64>,
    },
    LossReport {
        device: u16,
        round: u32,
        loss: f64,
        samples: u64,
    },
    GlobalLoss {
        device: u16,
        round: u32,
        loss: f64,
    },
    /// `dL/dfeatures`, same shape as the matching `FeatureBatch`.
    FeatureGrad {
        device: u16,
        round: u32,
        grad: Matrix,
    },
    /// `dL_k/dscores`, computed on the device so labels stay local.
    ScoreGrad {
        device: u16,
        round: u32,
        grad: Vec<f64>,
    },
}

impl ProtocolMessage {
    pub fn tag(&self) -> u8 {
        match self {
            ProtocolMessage::FeatureBatch { .. } => 1,
            ProtocolMessage::ScoreBatch { .. } => 2,
            ProtocolMessage::LossReport { .. } => 3,
            ProtocolMessage::GlobalLoss { .. } => 4,
            ProtocolMessage::FeatureGrad { .. } => 5,
            ProtocolMessage::ScoreGrad { .. } => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::FeatureBatch { .. } => "FeatureBatch",
            ProtocolMessage::ScoreBatch { .. } => "ScoreBatch",
            ProtocolMessage::LossReport { .. } => "LossReport",
            ProtocolMessage::GlobalLoss { .. } => "GlobalLoss",
            ProtocolMessage::FeatureGrad { .. } => "FeatureGrad",
            ProtocolMessage::ScoreGrad { .. } => "ScoreGrad",
        }
    }

    pub fn device(&self) -> u16 {
        match *self {
            ProtocolMessage::FeatureBatch { device, .. }
            | ProtocolMessage::ScoreBatch { device, .. }
            | ProtocolMessage::LossReport { device, .. }
            | ProtocolMessage::GlobalLoss { device, .. }
            | ProtocolMessage::FeatureGrad { device, .. }
            | ProtocolMessage::ScoreGrad { device, .. } => device,
        }
    }

    pub fn round(&self) -> u32 {
        match *self {
            ProtocolMessage::FeatureBatch { round, .. }
            | ProtocolMessage::ScoreBatch { round, .. }
            | ProtocolMessage::LossReport { round, .. }
            | ProtocolMessage::GlobalLoss { round, .. }
            | ProtocolMessage::FeatureGrad { round, .. }
            | ProtocolMessage::ScoreGrad { round, .. } => round,
        }
    }

    fn payload(&self) -> (usize, usize, Vec<f64>) {
        match self {
            ProtocolMessage::FeatureBatch { features: m, .. } | ProtocolMessage::FeatureGrad { grad: m, .. } => {
                (m.rows(), m.cols(), m.data().to_vec())
            }
            ProtocolMessage::ScoreBatch { scores: v, .. } | ProtocolMessage::ScoreGrad { grad: v, .. } => {
                (v.len(), 1, v.clone())
            }
            ProtocolMessage::LossReport { loss, samples, .. } => (1, 2, vec![*loss, *samples as f64]),
            ProtocolMessage::GlobalLoss { loss, .. } => (1, 1, vec![*loss]),
        }
    }

    /// Number of f64 values in the payload.
    pub fn payload_len(&self) -> usize {
        let (r, c, _) = self.payload();
        r * c
    }

    /// Exact encoded size in bytes.
    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_BYTES + 8 * self.payload_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let (rows, cols, values) = self.payload();
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + 8 * values.len());
        let body = (FRAME_HEADER_BYTES - 4 + 8 * values.len()) as u32;
        out.extend_from_slice(&body.to_le_bytes());
        out.push(self.tag());
        out.extend_from_slice(&self.round().to_le_bytes());
        out.extend_from_slice(&self.device().to_le_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one frame from the front of `bytes`, returning the message
    /// and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(ProtocolMessage, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let body = r.u32()? as usize;
        if bytes.len() < 4 + body {
            return Err(Error::Protocol(format!(
                "frame declares {body} body bytes but only {} are available",
                bytes.len() - 4
            )));
        }
        let tag = r.u8()?;
        let round = r.u32()?;
        let device = r.u16()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| FRAME_HEADER_BYTES - 4 + 8 * n == body)
            .ok_or_else(|| Error::Protocol(format!("{rows}x{cols} payload does not fit a {body}-byte body")))?;
        let values: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        let expect = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Protocol(format!(
                    "tag {tag} payload is {rows}x{cols}, expected {what}"
                )))
            }
        };
        let msg = match tag {
            1 | 5 => {
                let m = Matrix::from_vec(rows, cols, values)?;
                if tag == 1 {
                    ProtocolMessage::FeatureBatch {
                        device,
                        round,
                        features: m,
                    }
                } else {
                    ProtocolMessage::FeatureGrad { device, round, grad: m }
                }
            }
            2 | 6 => {
                expect(cols == 1, "b x 1")?;
                if tag == 2 {
                    ProtocolMessage::ScoreBatch {
                        device,
                        round,
                        scores: values,
                    }
                } else {
                    ProtocolMessage::ScoreGrad {
                        device,
                        round,
                        grad: values,
                    }
                }
            }
            3 => {
                expect(rows == 1 && cols == 2, "1 x 2")?;
                let samples = values[1];
                if !(samples >= 0.0 && samples.fract() == 0.0 && samples < 2f64.powi(53)) {
                    return Err(Error::Protocol(format!("invalid sample count {samples}")));
                }
                ProtocolMessage::LossReport {
                    device,
                    round,
                    loss: values[0],
                    samples: samples as u64,
                }
            }
            4 => {
                expect(rows == 1 && cols == 1, "1 x 1")?;
                ProtocolMessage::GlobalLoss {
                    device,
                    round,
                    loss: values[0],
                }
            }
            other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
        };
        Ok((msg, 4 + body))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Protocol("truncated frame".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Sends `msg` through the wire format: encodes, decodes, and returns the
/// received copy together with the frame size.
pub fn transmit(msg: &ProtocolMessage) -> Result<(ProtocolMessage, usize)> {
    let bytes = msg.encode();
    let (received, used) = ProtocolMessage::decode(&bytes)?;
    debug_assert_eq!(used, bytes.len());
    Ok((received, bytes.len()))
}
