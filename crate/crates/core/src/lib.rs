//! Extraction of API codeprints from annotated x86 disassembly listings.
//!
//! A codeprint is the ordered set of instructions that prepare the arguments
//! of one Windows API call. The pipeline parses a listing, finds each call to a
//! catalogued API, backtracks the data flow behind every pushed argument,
//! normalizes the result into a token stream, and packages streams as masked
//! language-model examples. Supporting modules build a reference database of
//! parameter signatures, score model predictions, and apply
//! semantics-preserving rewrites for robustness testing.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod extract;
pub mod listing;
pub mod normalize;
pub mod refdb;
mod seed;
pub mod transform;

pub use corpus::{build_example, emit_corpus, read_corpus, CorpusExample, MaskMode, MaskingConfig, Source};
pub use error::{Error, Result};
pub use extract::{
    backtrack_parameter, detect_obfuscated_callsites, extract_codeprints, ApiCodeprint, CodeprintRecord,
    ObfuscatedCallsite, ParamContext,
};
pub use listing::{parse_listing, ApiCatalog, Function, Instruction, Listing, Operand, Register};
pub use normalize::{normalize_codeprint, NormalizedCodeprint, Variant};
pub use refdb::{build_refdb, validate_refdb, RefDb, RefDbEntry};
pub use transform::{displace_code, ipr_transform, transform_listing, TransformKind, TransformPlan};
