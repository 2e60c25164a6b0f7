use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Write through a temporary file in the target directory, then rename it
/// into place so readers never see a partial file.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("moving output into {}", path.display()))?;
    Ok(())
}

/// Collects the files a command wrote, for the closing summary.
#[derive(Default)]
pub struct Written(pub Vec<PathBuf>);

impl Written {
    pub fn write(&mut self, path: PathBuf, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        write_atomic(&path, body)?;
        self.0.push(path);
        Ok(())
    }
}
