//! Per-image metric records and the results document exchanged between
//! evaluation runs and leaderboards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, to_canonical_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    /// dB; `+inf` for identical images.
    #[serde(with = "canonical::float")]
    pub psnr: f64,
    #[serde(with = "canonical::float")]
    pub ssim: f64,
    #[serde(with = "canonical::float")]
    pub lpips: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(with = "canonical::float")]
    pub psnr: f64,
    #[serde(with = "canonical::float")]
    pub ssim: f64,
    #[serde(with = "canonical::float")]
    pub lpips: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub method_id: String,
    pub dataset_id: String,
    pub scene_id: String,
    pub protocol_id: String,
    pub per_image: Vec<MetricRecord>,
    pub aggregates: Aggregates,
    /// SHA-256 (hex) of each predicted image's bytes, keyed by image id.
    pub checksums: BTreeMap<String, String>,
    pub tool_version: String,
}

impl ResultsDocument {
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("results document always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Version string stamped into every results document.
pub fn tool_version(extra: &str) -> String {
    let base = format!(
        "viewbench-core {}; decoder {}",
        env!("CARGO_PKG_VERSION"),
        crate::image::DECODER_VERSION
    );
    if extra.is_empty() {
        base
    } else {
        format!("{base}; {extra}")
    }
}

/// One results document reduced to its aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub method_id: String,
    pub dataset_id: String,
    pub scene_id: String,
    pub protocol_id: String,
    pub num_images: usize,
    pub aggregates: Aggregates,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
}

impl Leaderboard {
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("leaderboard always serializes")
    }
}

/// Merges results documents, best aggregate PSNR first.
///
/// Ties (and NaN, which sorts last) are broken by method, dataset, scene and
/// protocol id so the order never depends on input order.
pub fn leaderboard(docs: &[ResultsDocument]) -> Leaderboard {
    let mut entries: Vec<LeaderboardEntry> = docs
        .iter()
        .map(|d| LeaderboardEntry {
            method_id: d.method_id.clone(),
            dataset_id: d.dataset_id.clone(),
            scene_id: d.scene_id.clone(),
            protocol_id: d.protocol_id.clone(),
            num_images: d.per_image.len(),
            aggregates: d.aggregates,
            tool_version: d.tool_version.clone(),
        })
        .collect();
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    entries.sort_by(|a, b| {
        key(b.aggregates.psnr)
            .total_cmp(&key(a.aggregates.psnr))
            .then_with(|| a.aggregates.psnr.is_nan().cmp(&b.aggregates.psnr.is_nan()))
            .then_with(|| a.method_id.cmp(&b.method_id))
            .then_with(|| a.dataset_id.cmp(&b.dataset_id))
            .then_with(|| a.scene_id.cmp(&b.scene_id))
            .then_with(|| a.protocol_id.cmp(&b.protocol_id))
    });
    Leaderboard { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: String, psnr: f64, ssim: f64, lpips: f64) -> MetricRecord {
        MetricRecord {
            image_id: id,
            psnr,
            ssim,
            lpips,
        }
    }

    #[test]
    fn infinity_survives_serialization() {
        let doc = ResultsDocument {
            method_id: "m".into(),
            dataset_id: "d".into(),
            scene_id: "s".into(),
            protocol_id: "blender".into(),
            per_image: vec![record("a".into(), f64::INFINITY, 1.0, 0.0)],
            aggregates: Aggregates {
                psnr: f64::INFINITY,
                ssim: 1.0,
                lpips: 0.0,
            },
            checksums: BTreeMap::from([("a".into(), "00".into())]),
            tool_version: tool_version(""),
        };
        let text = doc.to_canonical_json();
        assert!(text.contains("\"psnr\": \"Infinity\""));
        assert!(text.ends_with("}\n"));
        assert_eq!(ResultsDocument::from_json(&text).unwrap(), doc);
    }

    fn doc(method: &str, psnr: f64) -> ResultsDocument {
        ResultsDocument {
            method_id: method.into(),
            dataset_id: "d".into(),
            scene_id: "s".into(),
            protocol_id: "p".into(),
            per_image: vec![record("a".into(), psnr, 0.5, 0.5)],
            aggregates: Aggregates {
                psnr,
                ssim: 0.5,
                lpips: 0.5,
            },
            checksums: BTreeMap::new(),
            tool_version: "t".into(),
        }
    }

    #[test]
    fn leaderboard_sorts_by_psnr_then_id() {
        let docs = [doc("b", 20.0), doc("nan", f64::NAN), doc("a", 20.0), doc("top", f64::INFINITY), doc("c", 30.0)];
        let ids: Vec<String> = leaderboard(&docs).entries.into_iter().map(|e| e.method_id).collect();
        assert_eq!(ids, ["top", "c", "a", "b", "nan"]);
        let mut reversed = docs.to_vec();
        reversed.reverse();
        assert_eq!(
            leaderboard(&reversed).to_canonical_json(),
            leaderboard(&docs).to_canonical_json()
        );
    }

    proptest! {
        #[test]
        fn serialization_roundtrips(
            recs in proptest::collection::vec(
                ("[a-z0-9_]{1,8}", 0.0f64..80.0, -1.0f64..=1.0, 0.0f64..2.0),
                1..6,
            ),
            method in "[a-zA-Z0-9 -]{0,12}",
        ) {
            let per_image: Vec<MetricRecord> =
                recs.into_iter().map(|(id, p, s, l)| record(id, p, s, l)).collect();
            let n = per_image.len() as f64;
            let doc = ResultsDocument {
                method_id: method,
                dataset_id: "ds".into(),
                scene_id: "scene".into(),
                protocol_id: "mipnerf360".into(),
                aggregates: Aggregates {
                    psnr: per_image.iter().map(|r| r.psnr).sum::<f64>() / n,
                    ssim: per_image.iter().map(|r| r.ssim).sum::<f64>() / n,
                    lpips: per_image.iter().map(|r| r.lpips).sum::<f64>() / n,
                },
                checksums: per_image.iter().map(|r| (r.image_id.clone(), "ab".repeat(32))).collect(),
                per_image,
                tool_version: "t".into(),
            };
            let text = doc.to_canonical_json();
            let back = ResultsDocument::from_json(&text).unwrap();
            prop_assert_eq!(&back, &doc);
            prop_assert_eq!(back.to_canonical_json(), text);
        }
    }
}
