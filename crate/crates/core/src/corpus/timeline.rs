//! Time-sliced document collections.

use super::vocab::Bow;
use crate::error::{DtamError, Result};
use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// Language-model token ids, truncated to the configured maximum length.
    pub token_ids: Vec<usize>,
    /// Topic-model ids of the in-vocabulary tokens, in document order.
    pub tm_ids: Vec<usize>,
    pub bow: Bow,
    /// Absolute 0-based slice index.
    pub time_index: usize,
    /// Scaled rating in `[0, 1]`.
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Weekly,
    Monthly,
    Seconds(i64),
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Granularity::Weekly => f.write_str("weekly"),
            Granularity::Monthly => f.write_str("monthly"),
            Granularity::Seconds(w) => write!(f, "{w}"),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = DtamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weekly" => Ok(Granularity::Weekly),
            "monthly" => Ok(Granularity::Monthly),
            other => match other.parse::<i64>() {
                Ok(w) if w > 0 => Ok(Granularity::Seconds(w)),
                _ => Err(DtamError::Config(format!(
                    "granularity must be weekly, monthly or a positive number of seconds, got {other:?}"
                ))),
            },
        }
    }
}

const WEEK: i64 = 7 * 86_400;

fn utc(ts: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(ts, 0).single().expect("timestamp in chrono range")
}

fn month_start(year: i32, month0: i64) -> i64 {
    let y = year as i64 + month0.div_euclid(12);
    let m = month0.rem_euclid(12) as u32 + 1;
    NaiveDate::from_ymd_opt(y as i32, m, 1)
        .expect("valid month")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
}

/// Maps timestamps to slice indices relative to an origin on a UTC calendar boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceClock {
    pub granularity: Granularity,
    /// Start of slice 0.
    pub origin: i64,
}

impl SliceClock {
    /// Origin is `earliest` truncated to the granularity boundary.
    pub fn anchored(granularity: Granularity, earliest: i64) -> Self {
        let origin = match granularity {
            Granularity::Weekly => {
                let d = utc(earliest);
                let midnight = d.date_naive().and_hms_opt(0, 0, 0).expect("midnight").and_utc();
                midnight.timestamp() - d.weekday().num_days_from_monday() as i64 * 86_400
            }
            Granularity::Monthly => {
                let d = utc(earliest);
                month_start(d.year(), d.month0() as i64)
            }
            Granularity::Seconds(w) => earliest.div_euclid(w) * w,
        };
        Self { granularity, origin }
    }

    pub fn index(&self, ts: i64) -> usize {
        let i = match self.granularity {
            Granularity::Weekly => (ts - self.origin).div_euclid(WEEK),
            Granularity::Seconds(w) => (ts - self.origin).div_euclid(w),
            Granularity::Monthly => {
                let o = utc(self.origin);
                let d = utc(ts);
                (d.year() - o.year()) as i64 * 12 + d.month0() as i64 - o.month0() as i64
            }
        };
        assert!(i >= 0, "timestamp {ts} precedes origin {}", self.origin);
        i as usize
    }

    /// Timestamp at which slice `i` starts.
    pub fn boundary(&self, i: usize) -> i64 {
        match self.granularity {
            Granularity::Weekly => self.origin + i as i64 * WEEK,
            Granularity::Seconds(w) => self.origin + i as i64 * w,
            Granularity::Monthly => {
                let o = utc(self.origin);
                month_start(o.year(), o.month0() as i64 + i as i64)
            }
        }
    }
}

/// Ordered slices with their aggregated counts.
///
/// `boundaries[k]` is the start of local slice `k` and `boundaries[T]` the end
/// of the last one. Documents carry absolute slice indices; local slice `k`
/// holds documents with `time_index == start_index + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusTimeline {
    slices: Vec<Vec<Document>>,
    slice_bows: Vec<Vec<f64>>,
    boundaries: Vec<i64>,
    vocab_size: usize,
    start_index: usize,
}

fn slice_bow(docs: &[Document], vocab_size: usize) -> Vec<f64> {
    let mut w = vec![0.0; vocab_size];
    for d in docs {
        for &(i, c) in d.bow.entries() {
            w[i] += c as f64;
        }
    }
    w
}

impl CorpusTimeline {
    pub fn new(
        slices: Vec<Vec<Document>>,
        boundaries: Vec<i64>,
        vocab_size: usize,
        start_index: usize,
    ) -> Result<Self> {
        let slice_bows = slices.iter().map(|s| slice_bow(s, vocab_size)).collect();
        let tl = Self {
            slices,
            slice_bows,
            boundaries,
            vocab_size,
            start_index,
        };
        tl.check_invariants()?;
        Ok(tl)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let t = self.slices.len();
        if t == 0 {
            return Err(DtamError::Data("timeline has no slices".into()));
        }
        if self.boundaries.len() != t + 1 || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DtamError::Data("slice boundaries must be T+1 increasing timestamps".into()));
        }
        for (k, docs) in self.slices.iter().enumerate() {
            for d in docs {
                if d.time_index != self.start_index + k {
                    return Err(DtamError::Data(format!(
                        "document {} has slice {} but sits in slice {}",
                        d.id,
                        d.time_index,
                        self.start_index + k
                    )));
                }
                if d.bow.max_id().is_some_and(|i| i >= self.vocab_size) {
                    return Err(DtamError::Data(format!("document {} has out-of-range word ids", d.id)));
                }
                if !(0.0..=1.0).contains(&d.rating) {
                    return Err(DtamError::Data(format!("document {} rating outside [0, 1]", d.id)));
                }
            }
            if self.slice_bows[k] != slice_bow(docs, self.vocab_size) {
                return Err(DtamError::Data(format!("slice {k} counts disagree with its documents")));
            }
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn slice(&self, k: usize) -> &[Document] {
        &self.slices[k]
    }

    pub fn slices(&self) -> &[Vec<Document>] {
        &self.slices
    }

    pub fn slice_bow(&self, k: usize) -> &[f64] {
        &self.slice_bows[k]
    }

    pub fn slice_bows(&self) -> &[Vec<f64>] {
        &self.slice_bows
    }

    pub fn boundaries(&self) -> &[i64] {
        &self.boundaries
    }

    pub fn num_docs(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.slices.iter().flatten()
    }

    /// Local slice index of a document's absolute index, if it falls inside.
    pub fn local_index(&self, time_index: usize) -> Option<usize> {
        time_index
            .checked_sub(self.start_index)
            .filter(|&k| k < self.slices.len())
    }

    /// Every document in one slice spanning the whole time range.
    pub fn collapse(&self) -> CorpusTimeline {
        let docs: Vec<Document> = self
            .documents()
            .cloned()
            .map(|mut d| {
                d.time_index = 0;
                d
            })
            .collect();
        let bounds = vec![self.boundaries[0], *self.boundaries.last().expect("nonempty")];
        CorpusTimeline::new(vec![docs], bounds, self.vocab_size, 0).expect("collapse keeps invariants")
    }

    /// Slices `range` as a new timeline with absolute indices preserved.
    pub fn sub_range(&self, range: std::ops::Range<usize>) -> CorpusTimeline {
        CorpusTimeline {
            slices: self.slices[range.clone()].to_vec(),
            slice_bows: self.slice_bows[range.clone()].to_vec(),
            boundaries: self.boundaries[range.start..=range.end].to_vec(),
            vocab_size: self.vocab_size,
            start_index: self.start_index + range.start,
        }
    }

    /// Same slices and boundaries, keeping only documents selected by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Document) -> bool) -> CorpusTimeline {
        let slices: Vec<Vec<Document>> = self
            .slices
            .iter()
            .map(|s| s.iter().filter(|d| keep(d)).cloned().collect())
            .collect();
        CorpusTimeline::new(slices, self.boundaries.clone(), self.vocab_size, self.start_index)
            .expect("filter keeps invariants")
    }

    /// Copy with every document passed through `f`; ids and counts must stay put.
    pub fn map_documents(&self, mut f: impl FnMut(&mut Document)) -> CorpusTimeline {
        let slices: Vec<Vec<Document>> = self
            .slices
            .iter()
            .map(|s| {
                s.iter()
                    .map(|d| {
                        let mut d = d.clone();
                        f(&mut d);
                        d
                    })
                    .collect()
            })
            .collect();
        CorpusTimeline::new(slices, self.boundaries.clone(), self.vocab_size, self.start_index)
            .expect("mapping keeps invariants")
    }

    /// Writes `timeline.manifest` and `documents.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut m = String::new();
        writeln!(m, "T {}", self.num_slices()).unwrap();
        writeln!(m, "V {}", self.vocab_size).unwrap();
        writeln!(m, "start_index {}", self.start_index).unwrap();
        let b: Vec<String> = self.boundaries.iter().map(i64::to_string).collect();
        writeln!(m, "boundaries {}", b.join(" ")).unwrap();
        for (k, s) in self.slices.iter().enumerate() {
            let ids: Vec<&str> = s.iter().map(|d| d.id.as_str()).collect();
            writeln!(m, "slice {k} {} {}", s.len(), ids.join(" ")).unwrap();
        }
        std::fs::write(dir.join("timeline.manifest"), m)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("documents.jsonl"))?);
        for d in self.documents() {
            serde_json::to_writer(&mut f, d).map_err(|e| DtamError::Data(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("timeline.manifest"))?;
        let mut t = None;
        let mut v = None;
        let mut start = 0;
        let mut boundaries = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |m: &str| DtamError::Parse {
                line: n + 1,
                message: m.to_string(),
            };
            let mut parts = line.split_whitespace();
            let num = |s: Option<&str>| -> Result<usize> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| err("expected a number"))
            };
            match parts.next() {
                Some("T") => t = Some(num(parts.next())?),
                Some("V") => v = Some(num(parts.next())?),
                Some("start_index") => start = num(parts.next())?,
                Some("boundaries") => {
                    boundaries = parts
                        .map(|p| p.parse::<i64>().map_err(|_| err("bad boundary")))
                        .collect::<Result<_>>()?
                }
                Some("slice") => {
                    let _k = num(parts.next())?;
                    counts.push(num(parts.next())?);
                }
                None => {}
                Some(other) => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        let (t, v) = t.zip(v).ok_or_else(|| DtamError::Data("manifest lacks T or V".into()))?;
        if counts.len() != t {
            return Err(DtamError::Data("manifest slice count disagrees with T".into()));
        }
        let mut slices: Vec<Vec<Document>> = vec![Vec::new(); t];
        let f = BufReader::new(std::fs::File::open(dir.join("documents.jsonl"))?);
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Document = serde_json::from_str(&line).map_err(|e| DtamError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            let k = d
                .time_index
                .checked_sub(start)
                .filter(|&k| k < t)
                .ok_or_else(|| DtamError::Data(format!("document {} outside the timeline", d.id)))?;
            slices[k].push(d);
        }
        if slices.iter().map(Vec::len).ne(counts.iter().copied()) {
            return Err(DtamError::Data("documents disagree with manifest slice sizes".into()));
        }
        Self::new(slices, boundaries, v, start)
    }
}

/// Assigns each document its slice on the given clock and assembles `T`
/// slices (trailing empty slices included), optionally subsampling each slice
/// to at most `subsample` documents while preserving order.
pub fn bucketize_with_clock(
    docs: Vec<Document>,
    clock: SliceClock,
    num_slices: usize,
    subsample: Option<usize>,
    seed: u64,
    vocab_size: usize,
) -> Result<CorpusTimeline> {
    let mut slices: Vec<Vec<Document>> = vec![Vec::new(); num_slices];
    for mut d in docs {
        let k = clock.index(d.timestamp);
        if k >= num_slices {
            return Err(DtamError::Data(format!("document {} falls after the last slice", d.id)));
        }
        d.time_index = k;
        slices[k].push(d);
    }
    for s in &mut slices {
        s.sort_by_key(|d| d.timestamp);
    }
    if let Some(cap) = subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut slices {
            if s.len() > cap {
                let mut keep = rand::seq::index::sample(&mut rng, s.len(), cap).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(s);
                let mut keep = keep.into_iter().peekable();
                for (i, d) in old.into_iter().enumerate() {
                    if keep.peek() == Some(&i) {
                        keep.next();
                        s.push(d);
                    }
                }
            }
        }
    }
    let boundaries = (0..=num_slices).map(|i| clock.boundary(i)).collect();
    CorpusTimeline::new(slices, boundaries, vocab_size, 0)
}

/// Buckets documents into slices anchored at the earliest timestamp.
pub fn time_bucketize(
    docs: Vec<Document>,
    granularity: Granularity,
    subsample: Option<usize>,
    seed: u64,
    vocab_size: usize,
) -> Result<CorpusTimeline> {
    let earliest = docs
        .iter()
        .map(|d| d.timestamp)
        .min()
        .ok_or_else(|| DtamError::Data("no documents to bucket".into()))?;
    let latest = docs.iter().map(|d| d.timestamp).max().expect("nonempty");
    let clock = SliceClock::anchored(granularity, earliest);
    let t = clock.index(latest) + 1;
    bucketize_with_clock(docs, clock, t, subsample, seed, vocab_size)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn doc(id: &str, ts: i64, ids: &[usize]) -> Document {
        Document {
            id: id.to_string(),
            token_ids: ids.iter().map(|i| i + 1).collect(),
            tm_ids: ids.to_vec(),
            bow: Bow::from_ids(ids),
            time_index: 0,
            rating: 0.5,
            timestamp: ts,
        }
    }

    // 2024-01-03 is a Wednesday.
    const WED: i64 = 1_704_240_000;

    #[test]
    fn weekly_origin_is_monday_midnight() {
        let c = SliceClock::anchored(Granularity::Weekly, WED + 3600);
        assert_eq!(c.origin, WED - 2 * 86_400);
        assert_eq!(utc(c.origin).weekday(), chrono::Weekday::Mon);
    }

    #[test]
    fn same_week_is_one_slice() {
        let docs = vec![doc("a", WED, &[0]), doc("b", WED + 86_400, &[1])];
        let tl = time_bucketize(docs, Granularity::Weekly, None, 0, 2).unwrap();
        assert_eq!(tl.num_slices(), 1);
        assert_eq!(tl.slice_bow(0), &[1.0, 1.0]);
    }

    #[test]
    fn days_zero_and_eight_are_two_slices() {
        let monday = WED - 2 * 86_400;
        let docs = vec![doc("a", monday, &[0]), doc("b", monday + 8 * 86_400, &[1])];
        let tl = time_bucketize(docs, Granularity::Weekly, None, 0, 2).unwrap();
        assert_eq!(tl.num_slices(), 2);
        assert_eq!(tl.slice(0).len(), 1);
        assert_eq!(tl.slice(1).len(), 1);
    }

    #[test]
    fn monthly_slices_follow_calendar() {
        let jan31 = 1_706_659_200; // 2024-01-31
        let feb1 = 1_706_745_600;
        let apr15 = 1_713_139_200;
        let docs = vec![doc("a", jan31, &[0]), doc("b", feb1, &[0]), doc("c", apr15, &[0])];
        let tl = time_bucketize(docs, Granularity::Monthly, None, 0, 1).unwrap();
        assert_eq!(tl.num_slices(), 4);
        assert_eq!(tl.slice(2).len(), 0);
        assert_eq!(tl.slice_bow(2), &[0.0]);
        assert_eq!(tl.boundaries()[1], feb1);
    }

    #[test]
    fn subsample_is_reproducible_and_bounded() {
        let docs: Vec<Document> = (0..1000)
            .map(|i| doc(&i.to_string(), 1000 + (i % 2) * 3600 + i, &[i as usize % 3]))
            .collect();
        let g = Granularity::Seconds(3600);
        let a = time_bucketize(docs.clone(), g, Some(300), 7, 3).unwrap();
        let b = time_bucketize(docs.clone(), g, Some(300), 7, 3).unwrap();
        assert_eq!(a, b);
        for k in 0..a.num_slices() {
            let n = docs.iter().filter(|d| (d.timestamp - a.boundaries()[0]) / 3600 == k as i64).count();
            assert_eq!(a.slice(k).len(), n.min(300));
            assert!(a.slice(k).windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
        let c = time_bucketize(docs, g, Some(300), 8, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn collapse_sums_everything() {
        let docs = vec![doc("a", 5, &[0, 1]), doc("b", 20, &[1])];
        let tl = time_bucketize(docs, Granularity::Seconds(10), None, 0, 2).unwrap();
        assert_eq!(tl.num_slices(), 3);
        let c = tl.collapse();
        assert_eq!(c.num_slices(), 1);
        assert_eq!(c.slice_bow(0), &[1.0, 2.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let docs = vec![doc("a", 5, &[0, 1]), doc("b", 25, &[1])];
        let tl = time_bucketize(docs, Granularity::Seconds(10), None, 0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sub = tl.sub_range(1..3);
        sub.save(dir.path()).unwrap();
        assert_eq!(CorpusTimeline::load(dir.path()).unwrap(), sub);
    }

    #[test]
    fn inconsistent_counts_are_rejected() {
        let docs = vec![doc("a", 5, &[0, 1])];
        let tl = time_bucketize(docs, Granularity::Seconds(10), None, 0, 2).unwrap();
        let mut broken = tl.clone();
        broken.slice_bows[0][0] = 3.0;
        assert!(broken.check_invariants().is_err());
    }
}
