use anyhow::Context;
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const DEFAULT_OUT: &str = "movepred-out";

/// Output directory of one command run.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: PathBuf) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Opens `name` for writing, hands a buffered writer to `f` and flushes.
    pub fn write_with<F>(&self, name: &str, f: F) -> anyhow::Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
    {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

/// `run.json`: what ran, with which resolved settings and seed. Contains no
/// timestamps so identical runs produce identical files.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, S: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub settings: &'a S,
}

pub fn write_run<S: Serialize>(out: &OutDir, command: &str, seed: u64, settings: &S) -> anyhow::Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        settings,
    };
    out.write_json("run.json", &record)?;
    Ok(())
}
