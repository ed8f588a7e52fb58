pub mod bench;
pub mod diagnose;
pub mod gen;
pub mod gradcheck;
pub mod run;

pub use bench::{cmd_bench, BenchReport};
pub use diagnose::{cmd_diagnose, DiagnoseSummary, Which};
pub use gen::{cmd_gen, GenSummary};
pub use gradcheck::{cmd_gradcheck, GradcheckReport};
pub use run::{cmd_run, Mode, RunOptions};
