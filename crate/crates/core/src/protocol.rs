//! Named evaluation protocols and their registry.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("unknown protocol {id:?}; available: {}", available.join(", "))]
    Unknown { id: String, available: Vec<String> },
    #[error("protocol {0:?} is already registered")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpipsBackbone {
    Alex,
    Vgg,
}

impl LpipsBackbone {
    pub fn name(self) -> &'static str {
        match self {
            LpipsBackbone::Alex => "alex",
            LpipsBackbone::Vgg => "vgg",
        }
    }
}

impl std::fmt::Display for LpipsBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where ground-truth pixels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    /// Released images from `images_<factor>/` (`images/` when factor is 1),
    /// used verbatim.
    PreDownscaled { factor: u32 },
    /// Full-resolution `images/` area-downscaled by `factor` at load time.
    ManualDownscale { factor: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceProtocol {
    #[default]
    None,
    /// Fit the appearance embedding on the left half, score the right half.
    NerfwHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub id: String,
    #[serde(default = "default_backbone")]
    pub lpips_backbone: LpipsBackbone,
    #[serde(default)]
    pub background: Option<[f64; 3]>,
    pub image_source: ImageSource,
    #[serde(default)]
    pub appearance_protocol: AppearanceProtocol,
    #[serde(default = "default_true")]
    pub quantize_before_metrics: bool,
}

fn default_backbone() -> LpipsBackbone {
    LpipsBackbone::Alex
}

fn default_true() -> bool {
    true
}

fn builtins() -> Vec<EvalProtocol> {
    let base = |id: &str, backbone, source| EvalProtocol {
        id: id.to_string(),
        lpips_backbone: backbone,
        background: None,
        image_source: source,
        appearance_protocol: AppearanceProtocol::None,
        quantize_before_metrics: true,
    };
    vec![
        EvalProtocol {
            background: Some([1.0, 1.0, 1.0]),
            ..base("blender", LpipsBackbone::Vgg, ImageSource::PreDownscaled { factor: 1 })
        },
        base("mipnerf360", LpipsBackbone::Vgg, ImageSource::PreDownscaled { factor: 4 }),
        base("llff", LpipsBackbone::Vgg, ImageSource::PreDownscaled { factor: 4 }),
        EvalProtocol {
            appearance_protocol: AppearanceProtocol::NerfwHalf,
            ..base("phototourism", LpipsBackbone::Alex, ImageSource::PreDownscaled { factor: 1 })
        },
        base("tanksandtemples", LpipsBackbone::Alex, ImageSource::PreDownscaled { factor: 2 }),
    ]
}

/// Write-once protocol table. Entries can be added but never replaced.
#[derive(Debug, Clone, Default)]
pub struct ProtocolRegistry {
    protocols: BTreeMap<String, EvalProtocol>,
}

impl ProtocolRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for p in builtins() {
            r.register(p).expect("builtin ids are unique");
        }
        r
    }

    pub fn register(&mut self, protocol: EvalProtocol) -> Result<(), ProtocolError> {
        if self.protocols.contains_key(&protocol.id) {
            return Err(ProtocolError::Duplicate(protocol.id));
        }
        self.protocols.insert(protocol.id.clone(), protocol);
        Ok(())
    }

    pub fn lookup(&self, id: &str) -> Result<&EvalProtocol, ProtocolError> {
        self.protocols.get(id).ok_or_else(|| ProtocolError::Unknown {
            id: id.to_string(),
            available: self.ids(),
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.protocols.keys().cloned().collect()
    }
}

fn global() -> &'static ProtocolRegistry {
    static REGISTRY: OnceLock<ProtocolRegistry> = OnceLock::new();
    REGISTRY.get_or_init(ProtocolRegistry::with_builtins)
}

/// Looks up a built-in protocol.
pub fn protocol_lookup(id: &str) -> Result<&'static EvalProtocol, ProtocolError> {
    global().lookup(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blender_uses_vgg_and_white() {
        let p = protocol_lookup("blender").unwrap();
        assert_eq!(p.background, Some([1.0, 1.0, 1.0]));
        assert_eq!(p.lpips_backbone, LpipsBackbone::Vgg);
    }

    #[test]
    fn builtin_table() {
        let m = protocol_lookup("mipnerf360").unwrap();
        assert_eq!(m.lpips_backbone, LpipsBackbone::Vgg);
        assert!(matches!(m.image_source, ImageSource::PreDownscaled { .. }));
        let pt = protocol_lookup("phototourism").unwrap();
        assert_eq!(pt.lpips_backbone, LpipsBackbone::Alex);
        assert_eq!(pt.appearance_protocol, AppearanceProtocol::NerfwHalf);
        assert_eq!(protocol_lookup("llff").unwrap().lpips_backbone, LpipsBackbone::Vgg);
        assert!(protocol_lookup("tanksandtemples").is_ok());
    }

    #[test]
    fn unknown_lists_available() {
        let err = protocol_lookup("no-such").unwrap_err();
        let ProtocolError::Unknown { available, .. } = &err else {
            panic!("wrong error")
        };
        assert_eq!(available.len(), 5);
        assert!(err.to_string().contains("blender"));
    }

    #[test]
    fn lookups_are_stable() {
        let a = protocol_lookup("llff").unwrap();
        let b = protocol_lookup("llff").unwrap();
        assert!(std::ptr::eq(a, b));
        assert_eq!(a, b);
    }

    #[test]
    fn registry_is_write_once() {
        let mut r = ProtocolRegistry::with_builtins();
        let dup = r.lookup("blender").unwrap().clone();
        assert_eq!(r.register(dup), Err(ProtocolError::Duplicate("blender".into())));
    }

    #[test]
    fn omitted_backbone_defaults_to_alex() {
        let p: EvalProtocol = serde_json::from_str(
            r#"{"id": "x", "image_source": {"kind": "manual_downscale", "factor": 4}}"#,
        )
        .unwrap();
        assert_eq!(p.lpips_backbone, LpipsBackbone::Alex);
        assert_eq!(p.image_source, ImageSource::ManualDownscale { factor: 4 });
        assert!(p.quantize_before_metrics);
    }
}
