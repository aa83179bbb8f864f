use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FTOK_MAGIC: &[u8; 4] = b"FTOK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// Sampled from the subject model itself.
    Faithful,
    /// Produced by some other process than the subject model.
    External,
    /// I.i.d. uniform token ids.
    Random,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Faithful => "faithful",
            SourceTag::External => "external",
            SourceTag::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub sequences: Vec<Vec<u32>>,
    pub source_tag: SourceTag,
    pub generator_model_id: Option<String>,
}

impl Corpus {
    /// Builds and validates a corpus.
    pub fn new(vocab_size: usize, sequences: Vec<Vec<u32>>, source_tag: SourceTag) -> Result<Self> {
        let c = Self {
            vocab_size,
            sequences,
            source_tag,
            generator_model_id: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_tokens() == 0 {
            return Err(Error::Input("corpus has no tokens".into()));
        }
        if let Some(t) = self.sequences.iter().flatten().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!("token {t} outside vocab {}", self.vocab_size)));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn write_ftok<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(FTOK_MAGIC)?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&(self.sequences.len() as u32).to_le_bytes())?;
        for seq in &self.sequences {
            w.write_all(&(seq.len() as u32).to_le_bytes())?;
            for t in seq {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an FTOK stream. The format carries no provenance, so the caller
    /// supplies the tag.
    pub fn read_ftok<R: Read>(r: &mut R, source_tag: SourceTag) -> std::io::Result<Corpus> {
        let mut word = || -> std::io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        if word()?.to_le_bytes() != *FTOK_MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad FTOK magic"));
        }
        let vocab_size = word()? as usize;
        let n = word()? as usize;
        let mut sequences = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = word()? as usize;
            let seq = (0..len).map(|_| word()).collect::<std::io::Result<Vec<u32>>>()?;
            sequences.push(seq);
        }
        Ok(Corpus {
            vocab_size,
            sequences,
            source_tag,
            generator_model_id: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_ftok(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, source_tag: SourceTag) -> Result<Corpus> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let c = Corpus::read_ftok(&mut BufReader::new(f), source_tag).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        c.validate().map_err(|e| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })?;
        Ok(c)
    }
}
