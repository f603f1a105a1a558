//! Client for an out-of-process denoiser speaking JSON over HTTP.
//!
//! Every request body carries `"version": "v1"` and its `"op"` name and is
//! POSTed to `/<op>`. Tensors travel as `{"shape": [..], "data": <base64>}`
//! where the payload is raw little-endian `f32`.
//!
//! | endpoint       | request fields                                    | response            |
//! |----------------|---------------------------------------------------|---------------------|
//! | `/handshake`   | `image_shape`                                     | `latent_shape`, `capabilities`, `schedule_profile` |
//! | `/encode`      | `tensor`                                          | `tensor`            |
//! | `/decode`      | `tensor`                                          | `tensor`            |
//! | `/predict_eps` | `tensor`, `t`, `conditioning`, `guidance_scale`   | `tensor`            |
//! | `/adapt`       | `batch` of `{x_t, t, eps, weight, conditioning}`  | `loss`              |
//!
//! `conditioning` is `{"prompt": str | null, "camera": [ρ, ϑ, φ] | null}` with
//! the camera relative to the reference view.

use std::collections::HashMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AdaptSample, Capabilities, Conditioning, GuidanceOracle, OracleError, ScheduleProfile, Tensor};

pub const PROTOCOL_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

/// Packs values as little-endian `f32`. Values are rounded to `f32` once.
pub fn encode_tensor(t: &Tensor) -> WireTensor {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    WireTensor {
        shape: t.shape().to_vec(),
        data: BASE64.encode(bytes),
    }
}

pub fn decode_tensor(w: &WireTensor) -> Result<Tensor, OracleError> {
    let bytes = BASE64
        .decode(&w.data)
        .map_err(|e| OracleError::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(OracleError::Protocol("payload is not a whole number of f32".into()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(w.shape.clone(), data)
        .map_err(|e| OracleError::Protocol(format!("payload disagrees with shape: {e}")))
}

pub fn wire_conditioning(c: &Conditioning) -> Value {
    json!({
        "prompt": c.prompt,
        "camera": c.relative_pose.map(|p| [p.radius, p.polar, p.azimuth]),
    })
}

#[derive(Debug, Deserialize)]
struct HandshakeReply {
    latent_shape: Vec<usize>,
    capabilities: Vec<String>,
    #[serde(default)]
    schedule_profile: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TensorReply {
    tensor: WireTensor,
}

#[derive(Debug, Deserialize)]
struct AdaptReply {
    loss: f64,
}

/// Blocking HTTP oracle. Holds no adapter state locally.
#[derive(Debug)]
pub struct RemoteOracle {
    base_url: String,
    agent: ureq::Agent,
    capabilities: Capabilities,
    schedule_profile: Option<ScheduleProfile>,
    latent_shapes: HashMap<Vec<usize>, Vec<usize>>,
}

impl RemoteOracle {
    /// Connects and performs the handshake for `image_shape`.
    pub fn connect(base_url: &str, image_shape: &[usize], timeout: Duration) -> Result<Self, OracleError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let mut oracle = Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            capabilities: Capabilities::NONE,
            schedule_profile: None,
            latent_shapes: HashMap::new(),
        };
        let reply = oracle.handshake(image_shape)?;
        oracle.capabilities = Capabilities::from_names(reply.capabilities.iter().map(String::as_str))
            .map_err(OracleError::Protocol)?;
        oracle.schedule_profile = match reply.schedule_profile {
            Some(name) => Some(name.parse().map_err(|_| OracleError::Protocol(format!("unknown schedule profile {name:?}")))?),
            None => None,
        };
        oracle.latent_shapes.insert(image_shape.to_vec(), reply.latent_shape);
        Ok(oracle)
    }

    /// Schedule the remote model was trained with, if it declared one.
    pub fn schedule_profile(&self) -> Option<ScheduleProfile> {
        self.schedule_profile
    }

    fn handshake(&self, image_shape: &[usize]) -> Result<HandshakeReply, OracleError> {
        let body = json!({ "version": PROTOCOL_VERSION, "op": "handshake", "image_shape": image_shape });
        self.call("handshake", body)
    }

    fn call<T: for<'de> Deserialize<'de>>(&self, op: &str, body: Value) -> Result<T, OracleError> {
        let url = format!("{}/{}", self.base_url, op);
        match self.agent.post(&url).send_json(body) {
            Ok(resp) => resp
                .into_json::<T>()
                .map_err(|e| OracleError::Protocol(format!("{op}: unreadable reply: {e}"))),
            Err(ureq::Error::Status(status, resp)) => Err(OracleError::Remote {
                status,
                message: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(OracleError::Connection(format!("{op}: {t}"))),
        }
    }

    fn tensor_call(&self, op: &str, mut body: Value, input: &Tensor) -> Result<Tensor, OracleError> {
        body["version"] = json!(PROTOCOL_VERSION);
        body["op"] = json!(op);
        body["tensor"] = serde_json::to_value(encode_tensor(input)).expect("plain struct");
        let reply: TensorReply = self.call(op, body)?;
        // non-finite values pass through to the engine's numerical guard
        decode_tensor(&reply.tensor)
    }
}

impl GuidanceOracle for RemoteOracle {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn latent_shape(&mut self, image_shape: &[usize]) -> Result<Vec<usize>, OracleError> {
        if let Some(s) = self.latent_shapes.get(image_shape) {
            return Ok(s.clone());
        }
        let reply = self.handshake(image_shape)?;
        self.latent_shapes.insert(image_shape.to_vec(), reply.latent_shape.clone());
        Ok(reply.latent_shape)
    }

    fn encode(&mut self, image: &Tensor) -> Result<Tensor, OracleError> {
        self.tensor_call("encode", json!({}), image)
    }

    fn decode(&mut self, latent: &Tensor) -> Result<Tensor, OracleError> {
        self.tensor_call("decode", json!({}), latent)
    }

    fn predict_eps(&mut self, x_t: &Tensor, t: usize, c: &Conditioning) -> Result<Tensor, OracleError> {
        let body = json!({
            "t": t,
            "conditioning": wire_conditioning(c),
            "guidance_scale": c.guidance_scale,
        });
        let out = self.tensor_call("predict_eps", body, x_t)?;
        if out.shape() != x_t.shape() {
            return Err(OracleError::ShapeMismatch {
                expected: x_t.shape().to_vec(),
                got: out.shape().to_vec(),
            });
        }
        Ok(out)
    }

    fn adapt(&mut self, batch: &[AdaptSample]) -> Result<f64, OracleError> {
        if !self.capabilities.adaptable {
            return Err(OracleError::MissingCapability("adaptable"));
        }
        if batch.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let items: Vec<Value> = batch
            .iter()
            .map(|s| {
                json!({
                    "x_t": encode_tensor(&s.x_t),
                    "t": s.t,
                    "eps": encode_tensor(&s.eps),
                    "weight": s.weight,
                    "conditioning": wire_conditioning(&s.conditioning),
                })
            })
            .collect();
        let body = json!({ "version": PROTOCOL_VERSION, "op": "adapt", "batch": items });
        let reply: AdaptReply = self.call("adapt", body)?;
        Ok(reply.loss)
    }
}
