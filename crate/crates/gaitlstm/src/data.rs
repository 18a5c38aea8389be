//! VGRF recording ingestion: parsing, cohort labeling, segmentation into
//! fixed 500×18 windows, z-score normalization, and reproducible
//! train/validation splits, plus the line-oriented manifest that makes a
//! split re-loadable byte-for-byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeds;

/// Frames per segment.
pub const WINDOW: usize = 500;
/// Columns in a raw recording line: time plus 18 force channels.
pub const RAW_COLUMNS: usize = 19;
/// Feature columns after the time column is dropped.
pub const FEATURES: usize = 18;
/// Longest recording accepted, in frames.
pub const MAX_FRAMES: usize = 1_000_000;

pub const SAMPLE_RATE_HZ: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CohortLabel {
    Control,
    Pd,
}

impl CohortLabel {
    /// Class index used by the model head: Control = 0, PD = 1.
    /// PD is the positive class everywhere.
    pub fn class_index(self) -> usize {
        match self {
            CohortLabel::Control => 0,
            CohortLabel::Pd => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> CohortLabel {
        match idx {
            0 => CohortLabel::Control,
            1 => CohortLabel::Pd,
            _ => panic!("class index {idx} out of range for a two-class label"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CohortLabel::Control => "Control",
            CohortLabel::Pd => "PD",
        }
    }

    pub fn parse(s: &str) -> Option<CohortLabel> {
        match s {
            "Control" => Some(CohortLabel::Control),
            "PD" => Some(CohortLabel::Pd),
            _ => None,
        }
    }
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parsed recording file: `frames` is T×19 with column 0 the time in
/// seconds and columns 1..19 the force channels.
#[derive(Clone, Debug)]
pub struct GaitRecording {
    pub subject_id: String,
    pub file_name: String,
    pub cohort_label: CohortLabel,
    pub frames: Matrix,
    pub sample_rate_hz: f64,
}

/// Per-recording data oddities. Neither condition is fatal; both are counted
/// and surfaced in the ingest quality report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecordingQuality {
    /// Force readings below zero (sensor noise; kept as-is).
    pub negative_force_values: usize,
    /// Adjacent frame pairs whose time stamps fail to strictly increase.
    pub time_anomalies: usize,
}

#[derive(Clone, Debug)]
pub struct Segment {
    /// window×18 feature block, time column already removed.
    pub features: Matrix,
    pub label: CohortLabel,
    pub source_subject: String,
    pub source_file: String,
    pub segment_index: usize,
}

impl Segment {
    /// Manifest identifier; unique because (file, index) is.
    pub fn id(&self) -> String {
        format!("{}#{}", self.source_file, self.segment_index)
    }

    /// The segment as the per-timestep input sequence the model consumes.
    pub fn to_sequence(&self) -> Vec<crate::numerics::Vector> {
        (0..self.features.rows())
            .map(|i| crate::numerics::Vector::from_vec(self.features.row(i).to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationOutcome {
    pub segments: Vec<Segment>,
    /// Trailing frames that did not fill a whole window.
    pub dropped_frames: usize,
    pub source_file: String,
    pub total_frames: usize,
    pub window: usize,
}

impl SegmentationOutcome {
    /// A recording shorter than the window yields no segments; that is
    /// reported as a warning, not an error.
    pub fn warning(&self) -> Option<String> {
        if self.segments.is_empty() {
            Some(format!(
                "{}: {} frames is shorter than the {}-frame window; no segments produced",
                self.source_file, self.total_frames, self.window
            ))
        } else {
            None
        }
    }
}

/// Per-feature z-score statistics, fit on training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Stats that leave data unchanged (mean 0, std 1); used when
    /// normalization is disabled so downstream code stays uniform.
    pub fn identity(features: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    SegmentLevel,
    SubjectLevel,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::SegmentLevel => "segment",
            SplitMode::SubjectLevel => "subject",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub mode: SplitMode,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.70,
            mode: SplitMode::SegmentLevel,
            seed: 0,
            stratified: true,
        }
    }
}

/// Subject identifier from a file stem: the prefix before the first '_'
/// (walk number). "GaCo01_02" and "GaCo01_01" belong to subject "GaCo01".
pub fn subject_of(stem: &str) -> String {
    match stem.split_once('_') {
        Some((subject, _)) => subject.to_string(),
        None => stem.to_string(),
    }
}

/// Cohort from the file name: "Co" marks a control, "Pt" a patient.
pub fn label_from_name(name: &str) -> std::result::Result<CohortLabel, String> {
    let co = name.contains("Co");
    let pt = name.contains("Pt");
    match (co, pt) {
        (true, false) => Ok(CohortLabel::Control),
        (false, true) => Ok(CohortLabel::Pd),
        (true, true) => Err(
            "name matches both the control marker \"Co\" and the patient marker \"Pt\"; \
             supply an explicit label"
                .to_string(),
        ),
        (false, false) => Err(
            "name contains neither the control marker \"Co\" nor the patient marker \"Pt\"; \
             supply an explicit label"
                .to_string(),
        ),
    }
}

/// Parse whitespace-separated numeric text, 19 columns per line, into a T×19
/// matrix. Blank lines are skipped; anything else malformed is an error
/// naming the 1-based line number.
pub fn read_frames(reader: impl BufRead, path: &Path) -> Result<Matrix> {
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let start = data.len();
        for tok in line.split_whitespace() {
            match tok.parse::<f64>() {
                Ok(v) => data.push(v),
                Err(_) => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: format!(
                            "column {}: invalid number {:?}",
                            data.len() - start + 1,
                            tok
                        ),
                    })
                }
            }
        }
        let cols = data.len() - start;
        if cols != RAW_COLUMNS {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected {RAW_COLUMNS} columns, found {cols}"),
            });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "recording contains no samples".to_string(),
        });
    }
    if rows > MAX_FRAMES {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("recording has {rows} frames, more than the {MAX_FRAMES} supported"),
        });
    }
    let mut m = Matrix::zeros(rows, RAW_COLUMNS);
    m.as_mut_slice().copy_from_slice(&data);
    Ok(m)
}

pub fn parse_recording(path: &Path) -> Result<GaitRecording> {
    parse_recording_with_label(path, None)
}

/// `label_override` (from a sidecar file) wins over the file-name convention,
/// which is the only way to ingest files whose names encode no cohort.
pub fn parse_recording_with_label(
    path: &Path,
    label_override: Option<CohortLabel>,
) -> Result<GaitRecording> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let cohort_label = match label_override {
        Some(l) => l,
        None => label_from_name(&file_name).map_err(|message| Error::Labeling {
            path: path.to_path_buf(),
            message,
        })?,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let frames = read_frames(std::io::BufReader::new(file), path)?;
    Ok(GaitRecording {
        subject_id: subject_of(&stem),
        file_name,
        cohort_label,
        frames,
        sample_rate_hz: SAMPLE_RATE_HZ,
    })
}

/// Count (without fixing) negative force readings and non-increasing time
/// stamps. Raw sensor exports contain both on occasion; training data is
/// used as recorded.
pub fn assess_quality(r: &GaitRecording) -> RecordingQuality {
    let mut q = RecordingQuality::default();
    for i in 0..r.frames.rows() {
        let row = r.frames.row(i);
        q.negative_force_values += row[1..].iter().filter(|&&v| v < 0.0).count();
        if i > 0 && row[0] <= r.frames.get(i - 1, 0) {
            q.time_anomalies += 1;
        }
    }
    q
}

/// Cut a recording into floor(T/window) consecutive non-overlapping windows,
/// dropping the time column and the trailing remainder. Segments inherit the
/// recording's label.
pub fn segment_recording(r: &GaitRecording, window: usize) -> SegmentationOutcome {
    assert!(window >= 1, "window must be at least 1, got {window}");
    let total = r.frames.rows();
    let count = total / window;
    let mut segments = Vec::with_capacity(count);
    for s in 0..count {
        let mut features = Matrix::zeros(window, FEATURES);
        for i in 0..window {
            let src = r.frames.row(s * window + i);
            features.row_mut(i).copy_from_slice(&src[1..]);
        }
        segments.push(Segment {
            features,
            label: r.cohort_label,
            source_subject: r.subject_id.clone(),
            source_file: r.file_name.clone(),
            segment_index: s,
        });
    }
    SegmentationOutcome {
        segments,
        dropped_frames: total - count * window,
        source_file: r.file_name.clone(),
        total_frames: total,
        window,
    }
}

/// Two-pass per-column mean and population standard deviation over every row
/// of every training segment. Zero-variance columns get std 1 so applying
/// the stats never divides by zero.
pub fn fit_normalization(train_segments: &[Segment]) -> NormStats {
    assert!(
        !train_segments.is_empty(),
        "normalization requires at least one training segment"
    );
    let features = train_segments[0].features.cols();
    let mut mean = vec![0.0; features];
    let mut n = 0usize;
    for seg in train_segments {
        for i in 0..seg.features.rows() {
            for (c, v) in seg.features.row(i).iter().enumerate() {
                mean[c] += v;
            }
        }
        n += seg.features.rows();
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; features];
    for seg in train_segments {
        for i in 0..seg.features.rows() {
            for (c, v) in seg.features.row(i).iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| {
            let s = (v / n as f64).sqrt();
            if s == 0.0 {
                1.0
            } else {
                s
            }
        })
        .collect();
    NormStats { mean, std }
}

pub fn apply_normalization(stats: &NormStats, segment: &Segment) -> Segment {
    assert_eq!(
        stats.mean.len(),
        segment.features.cols(),
        "normalization stats cover {} features but the segment has {} columns",
        stats.mean.len(),
        segment.features.cols()
    );
    let mut out = segment.clone();
    for i in 0..out.features.rows() {
        for (c, v) in out.features.row_mut(i).iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    out
}

/// Deterministic train/validation partition. Membership depends only on the
/// seed, the `SplitSpec`, and the input order; output sets preserve input
/// order.
pub fn split(segments: Vec<Segment>, spec: &SplitSpec) -> Result<(Vec<Segment>, Vec<Segment>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie strictly between 0 and 1, got {}",
            spec.train_fraction
        )));
    }
    if segments.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "cannot split {} segment(s) into two nonempty sides",
            segments.len()
        )));
    }
    let mut rng = seeds::rng_for(spec.seed, "split");
    let mut in_train = vec![false; segments.len()];

    match spec.mode {
        SplitMode::SegmentLevel => {
            if spec.stratified {
                let classes = [CohortLabel::Control, CohortLabel::Pd];
                let by_class: Vec<Vec<usize>> = classes
                    .iter()
                    .map(|&c| {
                        (0..segments.len())
                            .filter(|&i| segments[i].label == c)
                            .collect()
                    })
                    .collect();
                if by_class.iter().any(|v| v.is_empty()) {
                    return Err(Error::InvalidInput(
                        "stratified split requires segments from both classes".to_string(),
                    ));
                }
                for mut idxs in by_class {
                    idxs.shuffle(&mut rng);
                    let take = train_count(idxs.len(), spec.train_fraction);
                    for &i in &idxs[..take] {
                        in_train[i] = true;
                    }
                }
            } else {
                let mut idxs: Vec<usize> = (0..segments.len()).collect();
                idxs.shuffle(&mut rng);
                let take = train_count(idxs.len(), spec.train_fraction);
                for &i in &idxs[..take] {
                    in_train[i] = true;
                }
            }
        }
        SplitMode::SubjectLevel => {
            // All segments of a subject land on the same side; the unit being
            // shuffled and counted is the subject, not the segment.
            let mut by_subject: BTreeMap<&str, (CohortLabel, Vec<usize>)> = BTreeMap::new();
            for (i, seg) in segments.iter().enumerate() {
                by_subject
                    .entry(seg.source_subject.as_str())
                    .or_insert_with(|| (seg.label, Vec::new()))
                    .1
                    .push(i);
            }
            if by_subject.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "subject-level split requires at least 2 subjects, found {}",
                    by_subject.len()
                )));
            }
            let subjects: Vec<(&str, CohortLabel, &Vec<usize>)> = by_subject
                .iter()
                .map(|(s, (l, v))| (*s, *l, v))
                .collect();
            let groups: Vec<Vec<usize>> = if spec.stratified {
                let classes = [CohortLabel::Control, CohortLabel::Pd];
                let split_groups: Vec<Vec<usize>> = classes
                    .iter()
                    .map(|&c| {
                        (0..subjects.len())
                            .filter(|&k| subjects[k].1 == c)
                            .collect()
                    })
                    .collect();
                if split_groups.iter().any(|v| v.is_empty()) {
                    return Err(Error::InvalidInput(
                        "stratified split requires subjects from both classes".to_string(),
                    ));
                }
                split_groups
            } else {
                vec![(0..subjects.len()).collect()]
            };
            for mut group in groups {
                group.shuffle(&mut rng);
                let take = train_count(group.len(), spec.train_fraction);
                for &k in &group[..take] {
                    for &i in subjects[k].2 {
                        in_train[i] = true;
                    }
                }
            }
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (seg, is_train) in segments.into_iter().zip(in_train) {
        if is_train {
            train.push(seg);
        } else {
            val.push(seg);
        }
    }
    Ok((train, val))
}

/// round(fraction·n), clamped so both sides stay nonempty whenever n allows.
fn train_count(n: usize, fraction: f64) -> usize {
    if n == 1 {
        return 1;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Val,
}

impl SplitSide {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitSide::Train => "train",
            SplitSide::Val => "val",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub source_file: String,
    pub segment_index: usize,
    pub label: CohortLabel,
    pub split: SplitSide,
}

/// The ingest artifact: which window of which file sits on which side of the
/// split, plus the normalization statistics, at full decimal precision.
/// Together with the original data directory this reproduces training
/// exactly.
#[derive(Clone, Debug)]
pub struct Manifest {
    /// Directory the source files live in, as given at ingest time; lets
    /// `train --manifest` locate recordings without extra flags.
    pub data_dir: String,
    pub normalize: bool,
    pub stats: NormStats,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "gaitlstm-manifest v1";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        out.push_str(&format!("data-dir {}\n", self.data_dir));
        out.push_str(&format!("normalize {}\n", self.normalize));
        for (i, (m, s)) in self.stats.mean.iter().zip(&self.stats.std).enumerate() {
            out.push_str(&format!("stat {i} {m} {s}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "segment {} {} {} {} {}\n",
                e.id,
                e.source_file,
                e.segment_index,
                e.label,
                e.split.as_str()
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            Some((_, other)) => {
                return Err(err(
                    1,
                    format!("unsupported manifest header {other:?} (expected {MANIFEST_HEADER:?})"),
                ))
            }
            None => return Err(err(1, "empty manifest".to_string())),
        }
        let mut data_dir = None;
        let mut normalize = None;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            // The directory path may contain spaces; take the rest of the
            // line verbatim.
            if let Some(rest) = line.strip_prefix("data-dir ") {
                data_dir = Some(rest.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "normalize" => {
                    let v = fields
                        .get(1)
                        .and_then(|s| s.parse::<bool>().ok())
                        .ok_or_else(|| {
                            err(lineno, "normalize line must read true or false".to_string())
                        })?;
                    normalize = Some(v);
                }
                "stat" => {
                    if fields.len() != 4 {
                        return Err(err(
                            lineno,
                            "stat line must read: stat <index> <mean> <std>".to_string(),
                        ));
                    }
                    let i: usize = fields[1]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad stat index {:?}", fields[1])))?;
                    if i != mean.len() {
                        return Err(err(
                            lineno,
                            format!("stat index {i} out of order (expected {})", mean.len()),
                        ));
                    }
                    let m: f64 = fields[2]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad mean {:?}", fields[2])))?;
                    let s: f64 = fields[3]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad std {:?}", fields[3])))?;
                    mean.push(m);
                    std.push(s);
                }
                "segment" => {
                    if fields.len() != 6 {
                        return Err(err(
                            lineno,
                            "segment line must read: segment <id> <file> <index> <label> <split>"
                                .to_string(),
                        ));
                    }
                    let segment_index: usize = fields[3]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad segment index {:?}", fields[3])))?;
                    let label = CohortLabel::parse(fields[4])
                        .ok_or_else(|| err(lineno, format!("bad label {:?}", fields[4])))?;
                    let split = match fields[5] {
                        "train" => SplitSide::Train,
                        "val" => SplitSide::Val,
                        other => {
                            return Err(err(lineno, format!("bad split side {other:?}")));
                        }
                    };
                    entries.push(ManifestEntry {
                        id: fields[1].to_string(),
                        source_file: fields[2].to_string(),
                        segment_index,
                        label,
                        split,
                    });
                }
                other => {
                    return Err(err(lineno, format!("unknown manifest record {other:?}")));
                }
            }
        }
        let data_dir =
            data_dir.ok_or_else(|| err(0, "manifest is missing its data-dir line".to_string()))?;
        let normalize =
            normalize.ok_or_else(|| err(0, "manifest is missing its normalize line".to_string()))?;
        if mean.len() != FEATURES {
            return Err(err(
                0,
                format!("manifest holds {} stat lines, expected {FEATURES}", mean.len()),
            ));
        }
        if entries.is_empty() {
            return Err(err(0, "manifest lists no segments".to_string()));
        }
        Ok(Manifest {
            data_dir,
            normalize,
            stats: NormStats { mean, std },
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }
}

/// Corpus-wide tallies printed after ingest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DataQualityReport {
    pub files: usize,
    pub skipped_files: usize,
    pub total_frames: usize,
    pub dropped_frames: usize,
    pub control_segments: usize,
    pub pd_segments: usize,
    pub negative_force_values: usize,
    pub time_anomalies: usize,
}

impl fmt::Display for DataQualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "files parsed: {}", self.files)?;
        writeln!(f, "files skipped: {}", self.skipped_files)?;
        writeln!(f, "total frames: {}", self.total_frames)?;
        writeln!(f, "frames dropped at segment boundaries: {}", self.dropped_frames)?;
        writeln!(f, "segments (Control): {}", self.control_segments)?;
        writeln!(f, "segments (PD): {}", self.pd_segments)?;
        writeln!(f, "negative force readings: {}", self.negative_force_values)?;
        write!(f, "non-increasing time stamps: {}", self.time_anomalies)
    }
}

/// Sidecar label file: one `<filename> <PD|Control>` pair per line.
pub fn load_label_sidecar(path: &Path) -> Result<BTreeMap<String, CohortLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = if fields.len() == 2 {
            CohortLabel::parse(fields[1])
        } else {
            None
        };
        match parsed {
            Some(label) => {
                map.insert(fields[0].to_string(), label);
            }
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: "expected: <filename> <PD|Control>".to_string(),
                });
            }
        }
    }
    Ok(map)
}

#[derive(Clone, Debug)]
pub struct IngestConfig {
    pub data_dir: PathBuf,
    pub split: SplitSpec,
    pub normalize: bool,
    pub labels_sidecar: Option<PathBuf>,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub manifest: Manifest,
    pub quality: DataQualityReport,
    /// Skipped files and recordings too short to segment.
    pub warnings: Vec<String>,
}

/// Whole ingest pipeline: scan the directory (sorted by name), parse and
/// label every file, segment, split, fit normalization on the training side
/// only, and assemble the manifest. Unparseable files are skipped with a
/// warning; only a corpus with zero parseable recordings is an error.
pub fn ingest(cfg: &IngestConfig) -> Result<IngestOutput> {
    let overrides = match &cfg.labels_sidecar {
        Some(p) => load_label_sidecar(p)?,
        None => BTreeMap::new(),
    };
    let mut file_names: Vec<PathBuf> = fs::read_dir(&cfg.data_dir)
        .map_err(|e| Error::io(&cfg.data_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    file_names.sort();

    let mut quality = DataQualityReport::default();
    let mut warnings = Vec::new();
    let mut segments = Vec::new();
    for path in &file_names {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let recording = match parse_recording_with_label(path, overrides.get(&name).copied()) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("skipping {name}: {e}"));
                quality.skipped_files += 1;
                continue;
            }
        };
        let rq = assess_quality(&recording);
        quality.files += 1;
        quality.total_frames += recording.frames.rows();
        quality.negative_force_values += rq.negative_force_values;
        quality.time_anomalies += rq.time_anomalies;
        let outcome = segment_recording(&recording, cfg.window);
        quality.dropped_frames += outcome.dropped_frames;
        if let Some(w) = outcome.warning() {
            warnings.push(w);
        }
        segments.extend(outcome.segments);
    }
    if quality.files == 0 {
        return Err(Error::InvalidInput(format!(
            "no parseable recordings in {}",
            cfg.data_dir.display()
        )));
    }
    for seg in &segments {
        match seg.label {
            CohortLabel::Control => quality.control_segments += 1,
            CohortLabel::Pd => quality.pd_segments += 1,
        }
    }

    let (train, val) = split(segments, &cfg.split)?;
    let stats = if cfg.normalize {
        fit_normalization(&train)
    } else {
        NormStats::identity(FEATURES)
    };

    let mut entries: Vec<ManifestEntry> = train
        .iter()
        .map(|s| (s, SplitSide::Train))
        .chain(val.iter().map(|s| (s, SplitSide::Val)))
        .map(|(s, side)| ManifestEntry {
            id: s.id(),
            source_file: s.source_file.clone(),
            segment_index: s.segment_index,
            label: s.label,
            split: side,
        })
        .collect();
    entries.sort_by(|a, b| {
        (&a.source_file, a.segment_index).cmp(&(&b.source_file, b.segment_index))
    });

    Ok(IngestOutput {
        manifest: Manifest {
            data_dir: cfg.data_dir.display().to_string(),
            normalize: cfg.normalize,
            stats,
            entries,
        },
        quality,
        warnings,
    })
}

/// Rebuild the exact train/validation segment sets a manifest describes by
/// re-reading the referenced files from `data_dir` and applying the stored
/// normalization statistics.
pub fn load_from_manifest(
    manifest: &Manifest,
    window: usize,
) -> Result<(Vec<Segment>, Vec<Segment>)> {
    let data_dir = Path::new(&manifest.data_dir);
    let mut by_file: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_file.entry(e.source_file.as_str()).or_default().push(e);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (file, entries) in by_file {
        let label = entries[0].label;
        let recording = parse_recording_with_label(&data_dir.join(file), Some(label))?;
        let outcome = segment_recording(&recording, window);
        for e in entries {
            let seg = outcome.segments.get(e.segment_index).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "manifest references segment {} of {}, which has only {} segment(s)",
                    e.segment_index,
                    file,
                    outcome.segments.len()
                ))
            })?;
            let seg = if manifest.normalize {
                apply_normalization(&manifest.stats, seg)
            } else {
                seg.clone()
            };
            match e.split {
                SplitSide::Train => train.push(seg),
                SplitSide::Val => val.push(seg),
            }
        }
    }
    Ok((train, val))
}
