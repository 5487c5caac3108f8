//! Content fingerprint of a chat request, used as the cache key and as the
//! provenance digest on forge artifacts.
//!
//! The hash runs over a tagged, length-prefixed byte encoding rather than a
//! JSON rendering, so it does not depend on serializer whitespace or map
//! ordering. Images contribute the SHA-256 of their bytes, not their path:
//! the same frame moved to another directory keeps its fingerprint.

use std::fs;

use m3cot_core::chat::{BackendError, ChatRequest, ContentPart, ImageRef, ImageSource, Role};
use sha2::{Digest, Sha256};

const VERSION: &[u8] = b"m3cot-request-v1";

/// SHA-256 of an image's bytes. URIs are not fetched; the URI string itself
/// is digested.
pub fn image_digest(image: &ImageRef) -> Result<[u8; 32], BackendError> {
    let bytes = match image.source {
        ImageSource::LocalPath => {
            fs::read(&image.value).map_err(|e| BackendError::ImageUnreadable(format!("{}: {e}", image.value)))?
        }
        ImageSource::InlineBase64 => image
            .inline_bytes()
            .ok_or_else(|| BackendError::ImageUnreadable("inline image is not valid base64".into()))?,
        ImageSource::Uri => image.value.as_bytes().to_vec(),
    };
    Ok(Sha256::digest(&bytes).into())
}

struct Encoder(Sha256);

impl Encoder {
    fn tag(&mut self, t: u8) {
        self.0.update([t]);
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
    }

    fn u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }
}

pub fn fingerprint(request: &ChatRequest) -> Result<String, BackendError> {
    fingerprint_with(request, image_digest)
}

/// As [`fingerprint`], with a caller-supplied image digester (the gateway
/// memoizes file digests).
pub fn fingerprint_with(
    request: &ChatRequest,
    mut digest: impl FnMut(&ImageRef) -> Result<[u8; 32], BackendError>,
) -> Result<String, BackendError> {
    let mut e = Encoder(Sha256::new());
    e.bytes(VERSION);
    e.bytes(request.model_id.as_bytes());
    e.bytes(request.system.as_bytes());
    e.u64(request.turns.len() as u64);
    for turn in &request.turns {
        e.tag(match turn.role {
            Role::User => b'u',
            Role::Assistant => b'a',
        });
        e.u64(turn.parts.len() as u64);
        for part in &turn.parts {
            match part {
                ContentPart::Text { text } => {
                    e.tag(b't');
                    e.bytes(text.as_bytes());
                }
                ContentPart::Image { image } => {
                    e.tag(b'i');
                    e.bytes(image.media_type.as_bytes());
                    e.bytes(&digest(image)?);
                }
            }
        }
    }
    // -0.0 and 0.0 are the same sampling setting.
    let t = if request.temperature == 0.0 { 0.0f64 } else { request.temperature };
    e.u64(t.to_bits());
    e.u64(request.max_tokens as u64);
    match request.seed {
        Some(s) => {
            e.tag(1);
            e.u64(s);
        }
        None => e.tag(0),
    }
    Ok(hex::encode(e.0.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use m3cot_core::chat::{GenerationConfig, Turn};

    fn req(parts: Vec<ContentPart>) -> ChatRequest {
        ChatRequest::single(&GenerationConfig::default(), "sys", parts)
    }

    #[test]
    fn stable_and_order_sensitive() {
        let a = req(vec![ContentPart::text("one"), ContentPart::text("two")]);
        let b = req(vec![ContentPart::text("two"), ContentPart::text("one")]);
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&a.clone()).unwrap());
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }

    #[test]
    fn text_boundaries_matter() {
        let a = req(vec![ContentPart::text("ab"), ContentPart::text("c")]);
        let b = req(vec![ContentPart::text("a"), ContentPart::text("bc")]);
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }

    #[test]
    fn negative_zero_temperature() {
        let mut a = req(vec![ContentPart::text("q")]);
        let fp = fingerprint(&a).unwrap();
        a.temperature = -0.0;
        assert_eq!(fingerprint(&a).unwrap(), fp);
        a.temperature = 0.7;
        assert_ne!(fingerprint(&a).unwrap(), fp);
    }

    #[test]
    fn image_bytes_not_paths() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jpg"), dir.path().join("b.jpg"));
        fs::write(&p1, [1u8, 2, 3]).unwrap();
        fs::write(&p2, [1u8, 2, 3]).unwrap();
        let with = |p: &std::path::Path| req(vec![ContentPart::image(ImageRef::local(p.to_string_lossy()))]);
        assert_eq!(fingerprint(&with(&p1)).unwrap(), fingerprint(&with(&p2)).unwrap());
        fs::write(&p2, [1u8, 2, 4]).unwrap();
        assert_ne!(fingerprint(&with(&p1)).unwrap(), fingerprint(&with(&p2)).unwrap());
        let missing = with(&dir.path().join("nope.jpg"));
        assert!(matches!(fingerprint(&missing), Err(BackendError::ImageUnreadable(_))));
    }

    #[test]
    fn roles_matter() {
        let mut a = req(vec![ContentPart::text("x")]);
        a.turns.push(Turn::assistant("y"));
        a.turns.push(Turn::user(vec![ContentPart::text("z")]));
        let mut b = a.clone();
        b.turns[1] = Turn::user(vec![ContentPart::text("y")]);
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
    }
}
