//! File formats.
//!
//! * `SMF1` saliency maps: ASCII header `"SMF1 <width> <height>\n"` followed
//!   by `width*height` little-endian `f32`, row-major. Binary 8-bit PGM
//!   (`P5`) maps are also accepted on load and scaled to `[0, 1]`.
//! * `FTN1` feature tensors: header `"FTN1 <c> <h> <w>\n"` then `c*h*w`
//!   little-endian `f32`.
//! * `GZH1` checkpoints: magic, then `c, h, w, rows, cols` as little-endian
//!   `u32`, then every parameter as little-endian `f64` in declaration order.
//! * Detections: newline-delimited JSON, one box per line.
//! * Dataset manifest: a JSON document listing per-frame file paths,
//!   relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{BoundingBox, DetectionSet};
use crate::error::{Error, Result};
use crate::head::{FeatureDims, FeatureTensor, ModelParams};
use crate::saliency::{GridSpec, SaliencyMap};

const MAP_MAGIC: &str = "SMF1";
const TENSOR_MAGIC: &str = "FTN1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"GZH1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating missing parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Splits `"<magic> <n1> <n2> ...\n<payload>"` into its numbers and payload.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &str, fields: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| malformed(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| malformed(path, "header is not ASCII"))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(magic) {
        return Err(malformed(path, format!("expected magic {magic}")));
    }
    let nums = parts
        .map(|p| p.parse::<usize>().map_err(|_| malformed(path, format!("bad dimension {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if nums.len() != fields {
        return Err(malformed(path, format!("expected {fields} dimensions, got {}", nums.len())));
    }
    if nums.contains(&0) {
        return Err(malformed(path, "dimensions must be positive"));
    }
    Ok((nums, &bytes[nl + 1..]))
}

fn decode_f32s(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f64>> {
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn encode_f32s(header: String, values: &[f64]) -> Vec<u8> {
    let mut out = header.into_bytes();
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn map_to_bytes(map: &SaliencyMap) -> Vec<u8> {
    encode_f32s(format!("{MAP_MAGIC} {} {}\n", map.width(), map.height()), map.values())
}

pub fn save_map(path: &Path, map: &SaliencyMap) -> Result<()> {
    write_file(path, &map_to_bytes(map))
}

pub fn map_from_bytes(path: &Path, bytes: &[u8]) -> Result<SaliencyMap> {
    if bytes.starts_with(b"P5") {
        return pgm_from_bytes(path, bytes);
    }
    let (dims, payload) = parse_header(path, bytes, MAP_MAGIC, 2)?;
    let (w, h) = (dims[0], dims[1]);
    let values = decode_f32s(path, payload, w * h)?;
    if let Some(index) = values.iter().position(|v| *v < 0.0) {
        return Err(Error::NegativeValue {
            path: path.to_path_buf(),
            index,
        });
    }
    SaliencyMap::new(w, h, values)
}

pub fn load_map(path: &Path) -> Result<SaliencyMap> {
    map_from_bytes(path, &read_bytes(path)?)
}

/// Binary 8-bit PGM, values divided by maxval.
fn pgm_from_bytes(path: &Path, bytes: &[u8]) -> Result<SaliencyMap> {
    // header: "P5" <ws> width <ws> height <ws> maxval <single ws> payload; '#' comments
    let mut fields = Vec::with_capacity(3);
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(malformed(path, "truncated PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
        fields.push(text.parse::<usize>().map_err(|_| malformed(path, "bad PGM number"))?);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(malformed(path, "only 8-bit PGM with positive dims is supported"));
    }
    let payload = bytes.get(i + 1..).unwrap_or(&[]);
    if payload.len() != w * h {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: w * h,
            found: payload.len(),
        });
    }
    let scale = 1.0 / maxval as f64;
    SaliencyMap::new(w, h, payload.iter().map(|b| (*b as f64 * scale).min(1.0)).collect())
}

pub fn tensor_to_bytes(t: &FeatureTensor) -> Vec<u8> {
    let d = t.dims();
    encode_f32s(
        format!("{TENSOR_MAGIC} {} {} {}\n", d.channels, d.height, d.width),
        t.values(),
    )
}

pub fn save_tensor(path: &Path, t: &FeatureTensor) -> Result<()> {
    write_file(path, &tensor_to_bytes(t))
}

pub fn tensor_from_bytes(path: &Path, bytes: &[u8]) -> Result<FeatureTensor> {
    let (dims, payload) = parse_header(path, bytes, TENSOR_MAGIC, 3)?;
    let values = decode_f32s(path, payload, dims[0] * dims[1] * dims[2])?;
    FeatureTensor::new(dims[0], dims[1], dims[2], values)
}

pub fn load_tensor(path: &Path) -> Result<FeatureTensor> {
    tensor_from_bytes(path, &read_bytes(path)?)
}

pub fn checkpoint_to_bytes(params: &ModelParams) -> Vec<u8> {
    let d = params.input_dims;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for v in [d.channels, d.height, d.width, params.grid.rows(), params.grid.cols()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_file(path, &checkpoint_to_bytes(params))
}

pub fn checkpoint_from_bytes(path: &Path, bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 24 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(malformed(path, "missing GZH1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = FeatureDims::new(dim(0), dim(1), dim(2)).map_err(|e| malformed(path, e.to_string()))?;
    let grid = GridSpec::new(dim(3), dim(4)).map_err(|e| malformed(path, e.to_string()))?;
    let mut params = ModelParams::zeros(dims, grid);
    let payload = &bytes[24..];
    let expected = params.tensors().iter().map(|t| t.len()).sum::<usize>() * 8;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let mut words = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = words.next().expect("length checked");
        }
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(path, &read_bytes(path)?)
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub frame_id: String,
    pub class_id: u32,
    pub confidence: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl DetectionLine {
    pub fn new(frame_id: &str, b: &BoundingBox) -> Self {
        DetectionLine {
            frame_id: frame_id.to_string(),
            class_id: b.class_id,
            confidence: b.detector_confidence,
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }

    fn into_box(self) -> (String, BoundingBox) {
        (
            self.frame_id,
            BoundingBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
                class_id: self.class_id,
                detector_confidence: self.confidence,
            },
        )
    }
}

/// Parses detections grouped by frame in order of first appearance; boxes
/// keep their input order. Blank lines are ignored.
pub fn parse_detections(path: &Path, reader: impl BufRead) -> Result<Vec<DetectionSet>> {
    let mut frames: Vec<DetectionSet> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionLine = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let (frame_id, b) = rec.into_box();
        if frame_id.is_empty() {
            return Err(Error::InvalidBox {
                path: path.to_path_buf(),
                line: line_no,
                msg: "empty frame_id".into(),
            });
        }
        b.validate().map_err(|msg| Error::InvalidBox {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        })?;
        let idx = *slot.entry(frame_id.clone()).or_insert_with(|| {
            frames.push(DetectionSet {
                frame_id,
                boxes: Vec::new(),
            });
            frames.len() - 1
        });
        frames[idx].boxes.push(b);
    }
    Ok(frames)
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_detections(path, BufReader::new(f))
}

pub fn write_detections(path: &Path, sets: &[DetectionSet]) -> Result<()> {
    let mut out = Vec::new();
    for set in sets {
        for b in &set.boxes {
            serde_json::to_writer(&mut out, &DetectionLine::new(&set.frame_id, b)).expect("serializable");
            out.push(b'\n');
        }
    }
    write_file(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub frame_id: String,
    pub feature_path: PathBuf,
    pub gt_map_path: PathBuf,
    pub detections_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frame_width: usize,
    pub frame_height: usize,
    /// `[channels, height, width]`
    pub feature_dims: [usize; 3],
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.frame_id.is_empty() {
                return Err(Error::InvalidArgument("manifest record with empty frame_id".into()));
            }
            for p in [&r.feature_path, &r.gt_map_path, &r.detections_path] {
                if p.as_os_str().is_empty() {
                    return Err(Error::InvalidArgument(format!("record {} has an empty path", r.frame_id)));
                }
            }
            if !seen.insert(r.frame_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate frame_id {}", r.frame_id)));
            }
        }
        Ok(())
    }

    pub fn feature_dims(&self) -> Result<FeatureDims> {
        let [c, h, w] = self.feature_dims;
        FeatureDims::new(c, h, w)
    }

    pub fn split(&self, split: Option<Split>) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| split.is_none_or(|s| r.split == s))
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("serializable");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_bytes(path)?;
    let m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::ParseError {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

/// Grid vectors and activations exchanged with the `encode`/`decode` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::ParseError {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn map_golden_bytes() {
        let m = SaliencyMap::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let mut want = b"SMF1 2 2\n".to_vec();
        for w in [[0x00, 0x00, 0x00, 0x00], [0x00, 0x00, 0x00, 0x3f], [0x00, 0x00, 0x80, 0x3f], [0x00, 0x00, 0x80, 0x3e]] {
            want.extend_from_slice(&w);
        }
        assert_eq!(map_to_bytes(&m), want);
        assert_eq!(map_from_bytes(p(), &want).unwrap(), m);
    }

    #[test]
    fn map_errors() {
        let mut short = b"SMF1 2 2\n".to_vec();
        short.extend_from_slice(&[0u8; 12]);
        assert!(matches!(map_from_bytes(p(), &short), Err(Error::TruncatedPayload { expected: 16, found: 12, .. })));
        assert!(matches!(map_from_bytes(p(), b"SMF2 2 2\n"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(map_from_bytes(p(), b"SMF1 2\n"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(map_from_bytes(p(), b"SMF1 2 x\n"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(map_from_bytes(p(), b"SMF1 1 1"), Err(Error::MalformedHeader { .. })));
        let mut neg = b"SMF1 1 1\n".to_vec();
        neg.extend_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(map_from_bytes(p(), &neg), Err(Error::NegativeValue { index: 0, .. })));
    }

    #[test]
    fn pgm_is_scaled_to_unit_range() {
        let mut bytes = b"P5\n# gaze\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        let m = map_from_bytes(p(), &bytes).unwrap();
        assert_eq!(m.values(), &[0.0, 0.2, 1.0]);
        assert!(map_from_bytes(p(), b"P5 3 1 255\n\x00").is_err());
    }

    #[test]
    fn tensor_golden_and_errors() {
        let t = FeatureTensor::new(1, 2, 2, vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let mut want = b"FTN1 1 2 2\n".to_vec();
        for w in [[0x00, 0x00, 0x80, 0x3f], [0x00, 0x00, 0x00, 0xc0], [0x00, 0x00, 0x00, 0x3f], [0x00, 0x00, 0x00, 0x00]] {
            want.extend_from_slice(&w);
        }
        assert_eq!(tensor_to_bytes(&t), want);
        assert_eq!(tensor_from_bytes(p(), &want).unwrap(), t);
        let mut bad = b"FTN1 2 2 2\n".to_vec();
        bad.extend_from_slice(&want[11..]);
        assert!(matches!(tensor_from_bytes(p(), &bad), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn checkpoint_layout() {
        let dims = FeatureDims::new(1, 2, 2).unwrap();
        let mut params = ModelParams::zeros(dims, GridSpec::new(1, 1).unwrap());
        params.conv_weights[0] = 1.5;
        params.dense_bias[0] = -2.0;
        let bytes = checkpoint_to_bytes(&params);
        assert_eq!(&bytes[..4], b"GZH1");
        assert_eq!(&bytes[4..24], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes.len(), 24 + 49 * 8);
        assert_eq!(&bytes[24..32], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..], &(-2.0f64).to_le_bytes());
        assert_eq!(checkpoint_from_bytes(p(), &bytes).unwrap(), params);
        assert!(matches!(
            checkpoint_from_bytes(p(), &bytes[..bytes.len() - 1]),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(checkpoint_from_bytes(p(), b"NOPE").is_err());
    }

    #[test]
    fn detections_parsing() {
        assert!(parse_detections(p(), &b""[..]).unwrap().is_empty());
        let one = br#"{"frame_id":"a","class_id":2,"confidence":0.8,"x_min":1.0,"y_min":2.0,"x_max":3.5,"y_max":4.0}"#;
        let sets = parse_detections(p(), &one[..]).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].frame_id, "a");
        assert_eq!(
            sets[0].boxes[0],
            BoundingBox { x_min: 1.0, y_min: 2.0, x_max: 3.5, y_max: 4.0, class_id: 2, detector_confidence: 0.8 }
        );
        let text = "\
{\"frame_id\":\"b\",\"class_id\":0,\"confidence\":0.5,\"x_min\":0,\"y_min\":0,\"x_max\":1,\"y_max\":1}
{\"frame_id\":\"a\",\"class_id\":1,\"confidence\":0.5,\"x_min\":0,\"y_min\":0,\"x_max\":1,\"y_max\":1}

{\"frame_id\":\"b\",\"class_id\":2,\"confidence\":0.5,\"x_min\":0,\"y_min\":0,\"x_max\":1,\"y_max\":1}
";
        let sets = parse_detections(p(), text.as_bytes()).unwrap();
        assert_eq!(sets.iter().map(|s| s.frame_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(sets[0].boxes.iter().map(|b| b.class_id).collect::<Vec<_>>(), [0, 2]);

        let bad = "{\"frame_id\":\"a\",\"class_id\":0,\"confidence\":0.5,\"x_min\":0,\"y_min\":0,\"x_max\":1,\"y_max\":1}\n\
{\"frame_id\":\"a\",\"class_id\":0,\"confidence\":0.5,\"x_min\":5,\"y_min\":0,\"x_max\":1,\"y_max\":1}\n";
        assert!(matches!(parse_detections(p(), bad.as_bytes()), Err(Error::InvalidBox { line: 2, .. })));
        assert!(matches!(parse_detections(p(), &b"{oops\n"[..]), Err(Error::ParseError { line: 1, .. })));
    }

    #[test]
    fn manifest_validation() {
        let rec = |id: &str| SampleRecord {
            frame_id: id.into(),
            feature_path: "f".into(),
            gt_map_path: "g".into(),
            detections_path: "d".into(),
            split: Split::Train,
        };
        let mut m = DatasetManifest {
            frame_width: 4,
            frame_height: 4,
            feature_dims: [1, 2, 2],
            records: vec![rec("a"), rec("b")],
        };
        assert!(m.validate().is_ok());
        m.records.push(rec("a"));
        assert!(m.validate().is_err());
        let json = serde_json::to_string(&rec("z")).unwrap();
        assert!(json.contains("\"split\":\"train\""));
    }

    proptest! {
        #[test]
        fn map_round_trip_at_f32(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = SaliencyMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap();
            let back = map_from_bytes(p(), &map_to_bytes(&m)).unwrap();
            for (a, b) in m.values().iter().zip(back.values()) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
            // a second trip is exact
            prop_assert_eq!(map_from_bytes(p(), &map_to_bytes(&back)).unwrap(), back);
        }
    }
}
