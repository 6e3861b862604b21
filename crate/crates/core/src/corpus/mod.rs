//! Ingestion, vocabularies, time slicing and evaluation splits.

pub mod ingest;
pub mod labels;
pub mod pipeline;
pub mod split;
pub mod timeline;
pub mod tokenize;
pub mod vocab;

pub use ingest::{ingest_jsonl, read_jsonl, write_jsonl, IngestFilters, RawDocument};
pub use labels::{normalize_labels, LabelScaler};
pub use pipeline::{prepare_corpus, PrepareConfig, PreparedCorpus};
pub use split::{completion_split, random_split, temporal_split, RandomSplit, SplitRatios};
pub use timeline::{time_bucketize, CorpusTimeline, Document, Granularity, SliceClock};
pub use tokenize::{tokenize, Lemmatizer};
pub use vocab::{bow_encode, build_lm_vocabulary, build_vocabulary, Bow, FrequencyRank, VocabConfig, Vocabulary};
