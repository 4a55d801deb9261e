//! Test harness: synthetic corpus, reference evaluator, query suites, byte
//! scans and the in-process VO simulation.

pub mod corpus;
pub mod oracle;
pub mod querygen;
pub mod scan;
pub mod sim;

pub use corpus::{gen_corpus, Corpus, CorpusManifest, CorpusParams, ManifestEntry};
pub use oracle::{oracle_eval, result_rows, RefRow};
pub use querygen::{gen_suite, table2_queries, SuiteInputs};
pub use scan::{identity_needles, pixel_prefixes, Scanner};
pub use sim::{Sim, SimError, SimOptions, SiteSpec, Topology};
