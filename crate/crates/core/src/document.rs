//! In-memory documents, FUNSD ingestion, box normalization and reading order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the discretized coordinate range.
pub const COORD_MAX: u16 = 1000;

/// Version tag written into serialized documents.
pub const DOCUMENT_SCHEMA_VERSION: u32 = 1;

/// Box in page pixel space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawBBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RawBBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

/// Box discretized to `[0, 1000]` in the
/// `(xmin, xmax, ymin, ymax, width, height)` layout the model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedBBox {
    pub xmin: u16,
    pub xmax: u16,
    pub ymin: u16,
    pub ymax: u16,
    pub width: u16,
    pub height: u16,
}

impl NormalizedBBox {
    pub const CLS: Self = Self::raw_fields(0, 0, 0, 0, 0, 0);
    pub const SEP: Self = Self::raw_fields(1000, 1000, 1000, 1000, 0, 0);
    pub const PAD: Self = Self::raw_fields(0, 0, 0, 0, 0, 0);
    /// Replacement used when a box is masked out.
    pub const ZERO: Self = Self::raw_fields(0, 0, 0, 0, 0, 0);

    const fn raw_fields(xmin: u16, xmax: u16, ymin: u16, ymax: u16, width: u16, height: u16) -> Self {
        Self {
            xmin,
            xmax,
            ymin,
            ymax,
            width,
            height,
        }
    }

    /// Builds a box from corners, deriving width and height.
    pub fn from_corners(xmin: u16, ymin: u16, xmax: u16, ymax: u16) -> Result<Self> {
        if xmax > COORD_MAX || ymax > COORD_MAX || xmin > xmax || ymin > ymax {
            return Err(Error::Input(format!(
                "invalid normalized box ({xmin},{ymin},{xmax},{ymax})"
            )));
        }
        Ok(Self::raw_fields(xmin, xmax, ymin, ymax, xmax - xmin, ymax - ymin))
    }

    /// The six coordinates in embedding order.
    pub fn fields(&self) -> [u16; 6] {
        [self.xmin, self.xmax, self.ymin, self.ymax, self.width, self.height]
    }

    /// All six fields in range and width/height consistent with the corners.
    /// The `[SEP]` box is the one sanctioned exception to consistency.
    pub fn is_valid(&self) -> bool {
        self.fields().iter().all(|&v| v <= COORD_MAX)
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
            && ((self.width == self.xmax - self.xmin && self.height == self.ymax - self.ymin)
                || *self == Self::SEP)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityLabel {
    Question,
    Answer,
    Header,
    Other,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [
        EntityLabel::Question,
        EntityLabel::Answer,
        EntityLabel::Header,
        EntityLabel::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Question => "question",
            EntityLabel::Answer => "answer",
            EntityLabel::Header => "header",
            EntityLabel::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "question" => Ok(EntityLabel::Question),
            "answer" => Ok(EntityLabel::Answer),
            "header" => Ok(EntityLabel::Header),
            "other" => Ok(EntityLabel::Other),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

impl fmt::Display for EntityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub bbox: RawBBox,
    pub id: i64,
}

/// A labeled entity made of one or more segments (indices into
/// [`Document::segments`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub label: EntityLabel,
    pub segment_ids: Vec<usize>,
}

/// Directed link between two entities (indices into [`Document::entities`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub head: usize,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub name: String,
    pub page_width: f64,
    pub page_height: f64,
    pub segments: Vec<Segment>,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct DocumentFile {
    version: u32,
    document: Document,
}

impl Document {
    /// Checks page size, segment text, entity and relation references.
    pub fn validate(&self) -> Result<()> {
        if !(self.page_width > 0.0 && self.page_height > 0.0) {
            return Err(Error::Input(format!(
                "{}: page dimensions must be positive ({}x{})",
                self.name, self.page_width, self.page_height
            )));
        }
        for s in &self.segments {
            if s.text.trim().is_empty() {
                return Err(Error::Input(format!("{}: segment {} has no text", self.name, s.id)));
            }
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.segment_ids.is_empty() || e.segment_ids.iter().any(|&s| s >= self.segments.len()) {
                return Err(Error::Input(format!(
                    "{}: entity {i} references a missing segment",
                    self.name
                )));
            }
        }
        for r in &self.relations {
            if r.head >= self.entities.len() || r.tail >= self.entities.len() || r.head == r.tail {
                return Err(Error::Input(format!(
                    "{}: invalid relation {} -> {}",
                    self.name, r.head, r.tail
                )));
            }
        }
        Ok(())
    }

    /// Links oriented question → answer. Links between other label pairs are
    /// dropped; answer → question links are flipped.
    pub fn key_value_relations(&self) -> Vec<Relation> {
        let mut out = BTreeSet::new();
        for r in &self.relations {
            let (h, t) = (self.entities[r.head].label, self.entities[r.tail].label);
            match (h, t) {
                (EntityLabel::Question, EntityLabel::Answer) => {
                    out.insert(*r);
                }
                (EntityLabel::Answer, EntityLabel::Question) => {
                    out.insert(Relation {
                        head: r.tail,
                        tail: r.head,
                    });
                }
                _ => {}
            }
        }
        out.into_iter().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&DocumentFile {
            version: DOCUMENT_SCHEMA_VERSION,
            document: self.clone(),
        })
        .map_err(|e| Error::Input(format!("serializing {}: {e}", self.name)))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: DocumentFile = serde_json::from_str(text).map_err(|e| parse_error(path, &e))?;
        if file.version != DOCUMENT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "{}: document schema version {} (expected {DOCUMENT_SCHEMA_VERSION})",
                path.display(),
                file.version
            )));
        }
        file.document.validate()?;
        Ok(file.document)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Serializes back to FUNSD annotation JSON. One FUNSD item is written
    /// per segment; items inherit the label of the entity they belong to.
    pub fn to_funsd_json(&self) -> String {
        let mut seg_label = vec![EntityLabel::Other; self.segments.len()];
        for e in &self.entities {
            for &s in &e.segment_ids {
                seg_label[s] = e.label;
            }
        }
        let first_segment: Vec<usize> = self.entities.iter().map(|e| e.segment_ids[0]).collect();
        let mut links: Vec<Vec<[i64; 2]>> = vec![Vec::new(); self.segments.len()];
        for r in &self.relations {
            let h = first_segment[r.head];
            let t = first_segment[r.tail];
            let pair = [self.segments[h].id, self.segments[t].id];
            links[h].push(pair);
            links[t].push(pair);
        }
        let form: Vec<serde_json::Value> = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| {
                serde_json::json!({
                    "box": [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1],
                    "text": s.text,
                    "label": seg_label[i].as_str(),
                    "words": [],
                    "linking": links[i],
                    "id": s.id,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "form": form })).unwrap()
    }
}

fn parse_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Maps a pixel box onto the `[0, 1000]` grid with round-half-up and clamping.
pub fn normalize_bbox(raw: &RawBBox, page_w: f64, page_h: f64) -> Result<NormalizedBBox> {
    if !(page_w > 0.0 && page_h > 0.0) || !page_w.is_finite() || !page_h.is_finite() {
        return Err(Error::Input(format!("page dimensions must be positive, got {page_w}x{page_h}")));
    }
    if !(raw.x0 <= raw.x1 && raw.y0 <= raw.y1) {
        return Err(Error::Input(format!(
            "inverted box ({}, {}, {}, {})",
            raw.x0, raw.y0, raw.x1, raw.y1
        )));
    }
    let q = |v: f64, dim: f64| -> u16 {
        let scaled = (v * 1000.0 / dim + 0.5).floor();
        scaled.clamp(0.0, 1000.0) as u16
    };
    let (xmin, xmax) = (q(raw.x0, page_w), q(raw.x1, page_w));
    let (ymin, ymax) = (q(raw.y0, page_h), q(raw.y1, page_h));
    NormalizedBBox::from_corners(xmin, ymin, xmax, ymax)
}

/// Stable top-left to bottom-right order: sorts by `(y0, x0, index)`.
/// Returns the permutation, i.e. `perm[k]` is the index of the k-th segment.
pub fn sort_reading_order(segments: &[Segment]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..segments.len()).collect();
    perm.sort_by(|&a, &b| {
        let (sa, sb) = (&segments[a].bbox, &segments[b].bbox);
        sa.y0
            .total_cmp(&sb.y0)
            .then(sa.x0.total_cmp(&sb.x0))
            .then(a.cmp(&b))
    });
    perm
}

#[derive(Deserialize)]
struct FunsdFile {
    form: Vec<FunsdItem>,
    #[serde(default)]
    img: Option<FunsdImage>,
}

#[derive(Deserialize)]
struct FunsdImage {
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct FunsdItem {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    text: String,
    label: String,
    #[serde(default)]
    linking: Vec<[i64; 2]>,
    id: i64,
}

/// Reads width and height from a PNG header, if the file is a PNG.
fn png_dimensions(path: &Path) -> Option<(f64, f64)> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() < 24 || &bytes[..8] != b"\x89PNG\r\n\x1a\n" || &bytes[12..16] != b"IHDR" {
        return None;
    }
    let w = u32::from_be_bytes(bytes[16..20].try_into().ok()?);
    let h = u32::from_be_bytes(bytes[20..24].try_into().ok()?);
    Some((w as f64, h as f64))
}

fn sibling_image(path: &Path) -> Option<PathBuf> {
    let stem = path.file_stem()?;
    let dir = path.parent()?.parent()?.join("images");
    let png = dir.join(stem).with_extension("png");
    png.exists().then_some(png)
}

fn infer_split(path: &Path) -> Split {
    let test = path
        .components()
        .any(|c| c.as_os_str().to_string_lossy().to_lowercase().contains("test"));
    if test {
        Split::Test
    } else {
        Split::Train
    }
}

/// Parses one FUNSD annotation string. `path` is used for messages, page size
/// lookup and the split tag.
pub fn parse_funsd_str(text: &str, path: &Path) -> Result<Document> {
    let file: FunsdFile = serde_json::from_str(text).map_err(|e| parse_error(path, &e))?;

    let (page_width, page_height) = match &file.img {
        Some(img) => (img.width, img.height),
        None => sibling_image(path)
            .and_then(|p| png_dimensions(&p))
            .unwrap_or_else(|| {
                // Without an image the page is taken to be the box extent.
                let w = file.form.iter().map(|i| i.bbox[2]).fold(1.0, f64::max);
                let h = file.form.iter().map(|i| i.bbox[3]).fold(1.0, f64::max);
                (w, h)
            }),
    };

    let mut segments = Vec::new();
    let mut entities = Vec::new();
    let mut entity_of_id = HashMap::new();
    for item in &file.form {
        let label = EntityLabel::parse(&item.label)?;
        if item.text.trim().is_empty() {
            continue;
        }
        let [x0, y0, x1, y1] = item.bbox;
        let bbox = RawBBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1));
        segments.push(Segment {
            text: item.text.clone(),
            bbox,
            id: item.id,
        });
        entity_of_id.insert(item.id, entities.len());
        entities.push(Entity {
            label,
            segment_ids: vec![segments.len() - 1],
        });
    }

    let mut relations = BTreeSet::new();
    for item in &file.form {
        for &[a, b] in &item.linking {
            if let (Some(&h), Some(&t)) = (entity_of_id.get(&a), entity_of_id.get(&b)) {
                if h != t {
                    relations.insert(Relation { head: h, tail: t });
                }
            }
        }
    }

    let doc = Document {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        page_width,
        page_height,
        segments,
        entities,
        relations: relations.into_iter().collect(),
        split: infer_split(path),
    };
    doc.validate()?;
    Ok(doc)
}

pub fn parse_funsd(path: &Path) -> Result<Document> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_funsd_str(&text, path)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Parses every `*.json` file of a FUNSD `annotations/` directory in file
/// name order.
pub fn load_funsd_dir(dir: &Path) -> Result<Vec<Document>> {
    json_files(dir)?.par_iter().map(|p| parse_funsd(p)).collect()
}

/// Loads a corpus directory: either a manifest-backed directory of
/// serialized documents, or a directory of FUNSD annotation files.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Document>> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| parse_error(&manifest, &e))?;
        return m
            .documents
            .par_iter()
            .map(|f| Document::load(&dir.join(f)))
            .collect();
    }
    let annotations = dir.join("annotations");
    if annotations.is_dir() {
        return load_funsd_dir(&annotations);
    }
    load_funsd_dir(dir)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub documents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// Writes one file per document plus `manifest.json`.
pub fn save_corpus_dir(
    dir: &Path,
    docs: &[Document],
    generator: Option<serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(docs.len());
    for doc in docs {
        let name = format!("{}.json", doc.name);
        doc.save(&dir.join(&name))?;
        names.push(name);
    }
    let manifest = CorpusManifest {
        version: DOCUMENT_SCHEMA_VERSION,
        documents: names,
        generator,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(x0: f64, y0: f64, id: i64) -> Segment {
        Segment {
            text: "t".into(),
            bbox: RawBBox::new(x0, y0, x0 + 5.0, y0 + 5.0),
            id,
        }
    }

    #[test]
    fn full_page_box_maps_to_full_range() {
        let b = normalize_bbox(&RawBBox::new(0.0, 0.0, 762.0, 1000.0), 762.0, 1000.0).unwrap();
        assert_eq!(b.fields(), [0, 1000, 0, 1000, 1000, 1000]);
    }

    #[test]
    fn point_box_has_zero_extent() {
        let b = normalize_bbox(&RawBBox::new(40.0, 70.0, 40.0, 70.0), 500.0, 300.0).unwrap();
        assert_eq!(b.xmin, b.xmax);
        assert_eq!((b.width, b.height), (0, 0));
    }

    #[test]
    fn unit_page_box_is_identity() {
        let b = normalize_bbox(&RawBBox::new(100.0, 200.0, 300.0, 400.0), 1000.0, 1000.0).unwrap();
        assert_eq!(b.fields(), [100, 300, 200, 400, 200, 200]);
    }

    #[test]
    fn rounding_is_half_up() {
        // 1 * 1000 / 2000 = 0.5 -> 1
        let b = normalize_bbox(&RawBBox::new(1.0, 0.0, 3.0, 0.0), 2000.0, 10.0).unwrap();
        assert_eq!((b.xmin, b.xmax), (1, 2));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let r = RawBBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(normalize_bbox(&r, 0.0, 10.0), Err(Error::Input(_))));
        assert!(matches!(normalize_bbox(&r, 10.0, -3.0), Err(Error::Input(_))));
        let inv = RawBBox::new(5.0, 0.0, 1.0, 1.0);
        assert!(matches!(normalize_bbox(&inv, 10.0, 10.0), Err(Error::Input(_))));
    }

    #[test]
    fn special_boxes_are_valid() {
        for b in [NormalizedBBox::CLS, NormalizedBBox::SEP, NormalizedBBox::PAD] {
            assert!(b.is_valid());
        }
    }

    #[test]
    fn reading_order_same_row() {
        let segs = vec![seg(50.0, 10.0, 0), seg(10.0, 10.0, 1)];
        assert_eq!(sort_reading_order(&segs), vec![1, 0]);
    }

    #[test]
    fn reading_order_is_stable_for_identical_boxes() {
        let segs = vec![seg(3.0, 3.0, 0), seg(3.0, 3.0, 1), seg(3.0, 3.0, 2)];
        assert_eq!(sort_reading_order(&segs), vec![0, 1, 2]);
    }

    const TWO_ITEMS: &str = r#"{"form": [
        {"box": [10, 10, 60, 20], "text": "Name:", "label": "question",
         "words": [{"box": [10, 10, 60, 20], "text": "Name:"}], "linking": [[0, 1]], "id": 0},
        {"box": [70, 10, 120, 20], "text": "Ada", "label": "answer",
         "words": [], "linking": [[0, 1]], "id": 1}
    ]}"#;

    #[test]
    fn question_answer_pair() {
        let doc = parse_funsd_str(TWO_ITEMS, Path::new("x/training_data/annotations/a.json")).unwrap();
        assert_eq!(doc.entities.len(), 2);
        assert_eq!(doc.relations, vec![Relation { head: 0, tail: 1 }]);
        assert_eq!(doc.split, Split::Train);
        assert_eq!(doc.key_value_relations().len(), 1);
    }

    #[test]
    fn empty_form() {
        let doc = parse_funsd_str(r#"{"form": []}"#, Path::new("testing_data/e.json")).unwrap();
        assert!(doc.segments.is_empty() && doc.entities.is_empty());
        assert_eq!(doc.split, Split::Test);
    }

    #[test]
    fn unknown_label_is_named() {
        let bad = TWO_ITEMS.replace("\"answer\"", "\"signature\"");
        match parse_funsd_str(&bad, Path::new("a.json")) {
            Err(Error::UnknownLabel(l)) => assert_eq!(l, "signature"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let bad = "{\"form\": [\n  {\"box\": [1,2,3]\n";
        match parse_funsd_str(bad, Path::new("a.json")) {
            Err(Error::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn funsd_round_trip_preserves_counts() {
        let doc = parse_funsd_str(TWO_ITEMS, Path::new("a.json")).unwrap();
        let again = parse_funsd_str(&doc.to_funsd_json(), Path::new("a.json")).unwrap();
        assert_eq!(again.entities.len(), doc.entities.len());
        assert_eq!(again.relations, doc.relations);
    }

    #[test]
    fn document_json_round_trip() {
        let doc = parse_funsd_str(TWO_ITEMS, Path::new("a.json")).unwrap();
        let back = Document::from_json(&doc.to_json().unwrap(), Path::new("a.json")).unwrap();
        assert_eq!(back, doc);
    }

    fn raw_box_strategy() -> impl Strategy<Value = (RawBBox, f64, f64)> {
        (1.0f64..5000.0, 1.0f64..5000.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
            .prop_map(|(w, h, a, b, c, d)| {
                let (x0, x1) = if a <= b { (a * w, b * w) } else { (b * w, a * w) };
                let (y0, y1) = if c <= d { (c * h, d * h) } else { (d * h, c * h) };
                (RawBBox::new(x0, y0, x1, y1), w, h)
            })
    }

    proptest! {
        #[test]
        fn normalized_boxes_are_valid((raw, w, h) in raw_box_strategy()) {
            let b = normalize_bbox(&raw, w, h).unwrap();
            prop_assert!(b.is_valid());
        }

        #[test]
        fn normalization_is_idempotent_on_unit_pages(a in 0u16..=1000, b in 0u16..=1000, c in 0u16..=1000, d in 0u16..=1000) {
            let raw = RawBBox::new(a.min(b) as f64, c.min(d) as f64, a.max(b) as f64, c.max(d) as f64);
            let once = normalize_bbox(&raw, 1000.0, 1000.0).unwrap();
            let again = normalize_bbox(
                &RawBBox::new(once.xmin as f64, once.ymin as f64, once.xmax as f64, once.ymax as f64),
                1000.0,
                1000.0,
            ).unwrap();
            prop_assert_eq!(once, again);
        }

        #[test]
        fn reading_order_is_a_permutation_matching_brute_force(
            pts in proptest::collection::vec((0u8..6, 0u8..6), 0..12)
        ) {
            let segs: Vec<Segment> = pts.iter().enumerate()
                .map(|(i, &(x, y))| seg(x as f64, y as f64, i as i64)).collect();
            let perm = sort_reading_order(&segs);
            let mut seen = perm.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..segs.len()).collect::<Vec<_>>());
            // Brute force: repeatedly extract the minimum key.
            let mut left: Vec<usize> = (0..segs.len()).collect();
            let mut expect = Vec::new();
            while !left.is_empty() {
                let mut best = 0;
                for k in 1..left.len() {
                    let (a, b) = (left[k], left[best]);
                    let ka = (pts[a].1, pts[a].0, a);
                    let kb = (pts[b].1, pts[b].0, b);
                    if ka < kb { best = k; }
                }
                expect.push(left.remove(best));
            }
            prop_assert_eq!(perm, expect);
        }
    }
}
