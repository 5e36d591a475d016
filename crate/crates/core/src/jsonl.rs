use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Append-only JSON-lines log. A missing path makes every call a no-op.
pub struct JsonlLog {
    out: Option<BufWriter<File>>,
}

impl JsonlLog {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(Self { out })
    }

    pub fn disabled() -> Self {
        Self { out: None }
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

impl Drop for JsonlLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
