//! Line-delimited JSON corpus files: one header record, then one example per line.

use super::{Corpus, CorpusError, CorpusHeader, GroundedExample};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    read_corpus(File::open(path)?)
}

/// Parses and validates a corpus; errors carry the 1-based line number.
///
/// A zero-byte input is an empty corpus with empty metadata.
pub fn read_corpus(reader: impl Read) -> Result<Corpus, CorpusError> {
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header: CorpusHeader = loop {
        match lines.next() {
            None => return Ok(Corpus::empty(CorpusHeader::empty())),
            Some((_, l)) if l.as_ref().is_ok_and(|s| s.trim().is_empty()) => continue,
            Some((i, l)) => {
                let l = l?;
                let h: CorpusHeader = serde_json::from_str(&l).map_err(|e| CorpusError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                h.validate().map_err(|msg| CorpusError::Invalid { line: i + 1, msg })?;
                break h;
            }
        }
    };
    let mut examples = Vec::new();
    for (i, l) in lines {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let ex: GroundedExample = serde_json::from_str(&l).map_err(|e| CorpusError::Parse {
            line,
            msg: e.to_string(),
        })?;
        header
            .validate_example(&ex)
            .map_err(|msg| CorpusError::Invalid { line, msg })?;
        examples.push(ex);
    }
    // every example already passed validation against the header
    let mut c = Corpus::empty(header);
    c.examples = examples;
    Ok(c)
}

pub fn save_corpus(c: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(c, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus(c: &Corpus, mut w: impl Write) -> Result<(), CorpusError> {
    let enc = |e: serde_json::Error| std::io::Error::other(e);
    serde_json::to_writer(&mut w, c.header()).map_err(enc)?;
    w.write_all(b"\n")?;
    for ex in c.examples() {
        serde_json::to_writer(&mut w, ex).map_err(enc)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
