//! On-disk formats. Every document is JSON with a leading `format_version`;
//! floats are written in shortest round-trip form, so save → load → save is
//! byte-identical.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::credibility::{Gmm1D, TransferredLabels};
use crate::numnet::{Dense, Matrix, MlpParams};
use crate::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

/// Model weights. Any group may be empty, e.g. an encoder-only Stage-1
/// checkpoint or a classifier-only Stage-2 checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    /// Contrastive projection head, kept alongside Stage-1 encoders.
    pub head: Option<Vec<Dense>>,
    pub ema: Option<MlpParams>,
}

impl Checkpoint {
    pub fn new(params: MlpParams) -> Self {
        Self {
            params,
            head: None,
            ema: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapesDoc {
    encoder: Vec<[usize; 2]>,
    classifier: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<Vec<[usize; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmaDoc {
    encoder: Vec<LayerDoc>,
    classifier: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u64,
    shapes: ShapesDoc,
    encoder: Vec<LayerDoc>,
    classifier: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<Vec<LayerDoc>>,
    ema: Option<EmaDoc>,
}

fn shapes(layers: &[Dense]) -> Vec<[usize; 2]> {
    layers.iter().map(|l| [l.inputs(), l.outputs()]).collect()
}

fn layer_docs(layers: &[Dense]) -> Vec<LayerDoc> {
    layers
        .iter()
        .map(|l| LayerDoc {
            weight: l.weight.data().to_vec(),
            bias: l.bias.clone(),
        })
        .collect()
}

fn layers_from_docs(docs: Vec<LayerDoc>, shapes: &[[usize; 2]], group: &str) -> Result<Vec<Dense>> {
    if docs.len() != shapes.len() {
        return Err(Error::format(
            group,
            format!("{} layers but shapes lists {}", docs.len(), shapes.len()),
        ));
    }
    let mut out = Vec::with_capacity(docs.len());
    for (i, (doc, &[inputs, outputs])) in docs.into_iter().zip(shapes).enumerate() {
        if doc.weight.len() != inputs * outputs {
            return Err(Error::format(
                format!("{group}[{i}].weight"),
                format!("{} values for shape {inputs}×{outputs}", doc.weight.len()),
            ));
        }
        if doc.bias.len() != outputs {
            return Err(Error::format(
                format!("{group}[{i}].bias"),
                format!("{} values for {outputs} outputs", doc.bias.len()),
            ));
        }
        if let Some(prev) = out.last().map(Dense::outputs) {
            if prev != inputs {
                return Err(Error::format(
                    format!("shapes.{group}[{i}]"),
                    format!("expects {inputs} inputs after a layer with {prev} outputs"),
                ));
            }
        }
        let weight = Matrix::new(inputs, outputs, doc.weight)
            .map_err(|e| Error::format(format!("{group}[{i}].weight"), e.to_string()))?;
        out.push(Dense {
            weight,
            bias: doc.bias,
        });
    }
    Ok(out)
}

fn to_pretty<T: Serialize>(doc: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)?;
    s.push('\n');
    Ok(s)
}

/// Parses `text`, checks `format_version`, then decodes with errors that
/// name the offending field path.
fn decode_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: Value = serde_json::from_str(text)?;
    let version = value
        .get("format_version")
        .ok_or_else(|| Error::format("format_version", "missing"))?;
    let version = version.as_u64().ok_or_else(|| {
        Error::format(
            "format_version",
            format!("expected an integer, found {version}"),
        )
    })?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    decode_value(value)
}

fn decode_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = match e.path().to_string() {
            p if p == "." => "(document)".to_owned(),
            p => p,
        };
        Error::format(path, e.into_inner().to_string())
    })
}

pub fn checkpoint_to_string(ckpt: &Checkpoint) -> Result<String> {
    let p = &ckpt.params;
    let doc = CheckpointDoc {
        format_version: FORMAT_VERSION,
        shapes: ShapesDoc {
            encoder: shapes(&p.encoder),
            classifier: shapes(&p.classifier),
            head: ckpt.head.as_deref().map(shapes),
        },
        encoder: layer_docs(&p.encoder),
        classifier: layer_docs(&p.classifier),
        head: ckpt.head.as_deref().map(layer_docs),
        ema: ckpt.ema.as_ref().map(|e| EmaDoc {
            encoder: layer_docs(&e.encoder),
            classifier: layer_docs(&e.classifier),
        }),
    };
    to_pretty(&doc)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let doc: CheckpointDoc = decode_versioned(text)?;
    let s = &doc.shapes;
    let params = MlpParams {
        encoder: layers_from_docs(doc.encoder, &s.encoder, "encoder")?,
        classifier: layers_from_docs(doc.classifier, &s.classifier, "classifier")?,
    };
    check_join(&params, "")?;
    let head = match (doc.head, &s.head) {
        (Some(h), Some(shape)) => Some(layers_from_docs(h, shape, "head")?),
        (None, None) => None,
        _ => {
            return Err(Error::format(
                "head",
                "weights and shapes.head must appear together",
            ))
        }
    };
    let ema = match doc.ema {
        Some(e) => {
            let ema = MlpParams {
                encoder: layers_from_docs(e.encoder, &s.encoder, "ema.encoder")?,
                classifier: layers_from_docs(e.classifier, &s.classifier, "ema.classifier")?,
            };
            check_join(&ema, "ema.")?;
            Some(ema)
        }
        None => None,
    };
    Ok(Checkpoint { params, head, ema })
}

fn check_join(p: &MlpParams, prefix: &str) -> Result<()> {
    if let (Some(e), Some(c)) = (p.encoder.last(), p.classifier.first()) {
        if e.outputs() != c.inputs() {
            return Err(Error::format(
                format!("{prefix}classifier[0]"),
                format!(
                    "expects {} inputs but the encoder emits {}",
                    c.inputs(),
                    e.outputs()
                ),
            ));
        }
    }
    Ok(())
}

/// Transfer file contents: the L/U partition plus the fitted mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferBody {
    pub transfer: TransferredLabels,
    pub loss_gmm: Option<Gmm1D>,
    pub confidence_gmm: Option<Gmm1D>,
}

pub fn transfer_to_string(body: &TransferBody) -> Result<String> {
    to_pretty(&serde_json::json!({
        "format_version": FORMAT_VERSION,
        "transfer": body.transfer,
        "loss_gmm": body.loss_gmm,
        "confidence_gmm": body.confidence_gmm,
    }))
}

pub fn transfer_from_str(text: &str) -> Result<TransferBody> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        #[allow(dead_code)]
        format_version: u64,
        transfer: TransferredLabels,
        loss_gmm: Option<Gmm1D>,
        confidence_gmm: Option<Gmm1D>,
    }
    let doc: Doc = decode_versioned(text)?;
    for (name, g) in [
        ("loss_gmm", &doc.loss_gmm),
        ("confidence_gmm", &doc.confidence_gmm),
    ] {
        if let Some(g) = g {
            g.validate()
                .map_err(|e| Error::format(name, e.to_string()))?;
        }
    }
    let t = &doc.transfer;
    if t.classes == 0 {
        return Err(Error::format("transfer.classes", "must be ≥ 1"));
    }
    t.validate(t.len()).map_err(|e| match e {
        Error::Format { field, message } => Error::format(format!("transfer.{field}"), message),
        other => other,
    })?;
    Ok(TransferBody {
        transfer: doc.transfer,
        loss_gmm: doc.loss_gmm,
        confidence_gmm: doc.confidence_gmm,
    })
}

/// Serializes any config-like value with a `format_version` header.
pub fn versioned_to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        Value::Object(map) => {
            let mut out = serde_json::Map::new();
            out.insert("format_version".into(), FORMAT_VERSION.into());
            out.append(map);
            to_pretty(&Value::Object(out))
        }
        _ => Err(Error::InvalidConfig(
            "only objects carry a format_version".into(),
        )),
    }
}

/// Inverse of [`versioned_to_string`]; a missing `format_version` is read
/// as the current one so hand-written configs need not repeat it.
pub fn versioned_from_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut value: Value = serde_json::from_str(text)?;
    let Value::Object(map) = &mut value else {
        return Err(Error::format("", "expected a JSON object"));
    };
    if let Some(v) = map.remove("format_version") {
        match v.as_u64() {
            Some(FORMAT_VERSION) => {}
            Some(found) => {
                return Err(Error::UnsupportedVersion {
                    found,
                    expected: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::format(
                    "format_version",
                    format!("expected an integer, found {v}"),
                ))
            }
        }
    }
    decode_value(value)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_text(path, &checkpoint_to_string(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

pub fn save_transfer(path: &Path, body: &TransferBody) -> Result<()> {
    write_text(path, &transfer_to_string(body)?)
}

pub fn load_transfer(path: &Path) -> Result<TransferBody> {
    transfer_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credibility::{LabeledEntry, Origin};
    use crate::seeded_rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = seeded_rng(1);
        let params = MlpParams::init(&[4, 6, 5], &[5, 3], &mut rng).unwrap();
        let mut ema = params.clone();
        ema.classifier[0].bias[1] = 1.0 / 3.0;
        Checkpoint {
            head: Some(crate::numnet::init_stack(&[5, 2], &mut rng).unwrap()),
            ema: Some(ema),
            params,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let a = checkpoint_to_string(&ckpt).unwrap();
        let back = checkpoint_from_str(&a).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(checkpoint_to_string(&back).unwrap(), a);
        assert!(a.starts_with("{\n  \"format_version\": 1,"), "{}", &a[..40]);
    }

    #[test]
    fn checkpoint_errors_name_the_field() {
        let text = checkpoint_to_string(&sample_checkpoint()).unwrap();
        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = 7.into();
        let err = checkpoint_from_str(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 7, .. }));

        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["shapes"]["encoder"][1] = serde_json::json!([6, 4]);
        match checkpoint_from_str(&v.to_string()).unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "encoder[1].weight"),
            e => panic!("{e}"),
        }

        let mut v: Value = serde_json::from_str(&text).unwrap();
        v["classifier"][0]["bias"][2] = "x".into();
        match checkpoint_from_str(&v.to_string()).unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "classifier[0].bias[2]"),
            e => panic!("{e}"),
        }

        let mut v: Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("format_version");
        assert!(matches!(
            checkpoint_from_str(&v.to_string()),
            Err(Error::Format { field, .. }) if field == "format_version"
        ));
    }

    #[test]
    fn transfer_round_trip() {
        let body = TransferBody {
            transfer: TransferredLabels {
                classes: 3,
                labeled: vec![
                    LabeledEntry {
                        index: 2,
                        label: 1,
                        origin: Origin::Kept,
                    },
                    LabeledEntry {
                        index: 0,
                        label: 2,
                        origin: Origin::Corrected,
                    },
                ],
                unlabeled: vec![1, 3],
                tau_clean: 0.5,
                tau_right: 0.5,
            },
            loss_gmm: Some(Gmm1D {
                means: [0.1, 0.7],
                variances: [0.01, 0.02],
                weights: [0.4, 0.6],
            }),
            confidence_gmm: None,
        };
        let s = transfer_to_string(&body).unwrap();
        let back = transfer_from_str(&s).unwrap();
        assert_eq!(back, body);
        assert_eq!(transfer_to_string(&back).unwrap(), s);

        let mut v: Value = serde_json::from_str(&s).unwrap();
        v["transfer"]["unlabeled"][1] = 2.into();
        assert!(transfer_from_str(&v.to_string()).is_err());
    }

    #[test]
    fn versioned_values() {
        let cfg = crate::data::BlobSpec::default();
        let s = versioned_to_string(&cfg).unwrap();
        assert_eq!(
            versioned_from_str::<crate::data::BlobSpec>(&s).unwrap(),
            cfg
        );
        assert!(versioned_from_str::<crate::data::BlobSpec>("{\"classes\": 3}").is_ok());
        assert!(matches!(
            versioned_from_str::<crate::data::BlobSpec>("{\"format_version\": 2}"),
            Err(Error::UnsupportedVersion { .. })
        ));
        match versioned_from_str::<crate::data::BlobSpec>("{\"sigma\": \"big\"}").unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "sigma"),
            e => panic!("{e}"),
        }
    }
}
