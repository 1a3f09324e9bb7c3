//! Corpora, batch construction, the synthetic language-pair generator,
//! checkpoints and run configuration.

pub mod batches;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use batches::{make_cdlm_batch, make_mlm_batch, make_nsp_batch, make_tlm_batch, BatchItem};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{load_mono, load_parallel, Corpus, ParallelCorpus, RESERVED};
pub use synth::{synth_langpair, SynthConfig, SynthLangPair};

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a file as UTF-8, reporting the byte offset of the first bad byte.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| Error::Utf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}
