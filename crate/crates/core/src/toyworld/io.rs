use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Caption, DatasetRecord, MotionTokenSequence, Split, SynonymLexicon};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "t2m-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    codebook_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    caption: String,
    perturbed_caption: Option<String>,
    motion_tokens: Vec<usize>,
    split: Split,
}

/// Writes a header line followed by one JSON object per record. An empty
/// corpus is written with codebook size 0 in the header.
pub fn write_corpus<W: Write>(records: &[DatasetRecord], mut out: W) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        codebook_size: records.first().map_or(0, |r| r.motion.codebook_size()),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).map_err(std::io::Error::from)?
    )?;
    for r in records {
        let line = Line {
            id: r.id.clone(),
            caption: r.caption.text(),
            perturbed_caption: r.perturbed_caption.as_ref().map(Caption::text),
            motion_tokens: r.motion.tokens().to_vec(),
            split: r.split,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&line).map_err(std::io::Error::from)?
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus, re-deriving class tags from `lexicon`.
pub fn read_corpus<R: BufRead>(input: R, lexicon: &SynonymLexicon) -> Result<Vec<DatasetRecord>> {
    let mut lines = input.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            serde_json::from_str(&line?).map_err(|e| Error::parse(1, format!("bad header: {e}")))?
        }
        None => return Err(Error::parse(1, "missing corpus header")),
    };
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::parse(
            1,
            format!(
                "unsupported corpus format {} v{}",
                header.format, header.version
            ),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        let motion = MotionTokenSequence::new(parsed.motion_tokens, header.codebook_size)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        let record = DatasetRecord {
            id: parsed.id,
            caption: Caption::parse(&parsed.caption, lexicon),
            perturbed_caption: parsed
                .perturbed_caption
                .map(|p| Caption::parse(&p, lexicon)),
            motion,
            split: parsed.split,
        };
        record
            .validate()
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus_file(records: &[DatasetRecord], path: &Path) -> Result<()> {
    write_corpus(records, BufWriter::new(File::create(path)?))
}

pub fn read_corpus_file(path: &Path, lexicon: &SynonymLexicon) -> Result<Vec<DatasetRecord>> {
    read_corpus(BufReader::new(File::open(path)?), lexicon)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_corpus, GrammarConfig};
    use super::*;

    #[test]
    fn empty_corpus_is_just_a_header() {
        let mut buf = Vec::new();
        write_corpus(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains(CORPUS_FORMAT));
        assert!(read_corpus(buf.as_slice(), &SynonymLexicon::toy())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn hundred_records_round_trip() {
        let lex = SynonymLexicon::toy();
        let corpus = generate_corpus(9, 100, &GrammarConfig::default(), &lex).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        assert_eq!(read_corpus(buf.as_slice(), &lex).unwrap(), corpus);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let lex = SynonymLexicon::toy();
        let corpus = generate_corpus(9, 3, &GrammarConfig::default(), &lex).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{not json}\n");
        match read_corpus(text.as_bytes(), &lex) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_motion_token_is_rejected() {
        let text = format!(
            "{{\"format\":\"{CORPUS_FORMAT}\",\"version\":1,\"codebook_size\":4}}\n\
             {{\"id\":\"x\",\"caption\":\"a man walks forward\",\"perturbed_caption\":null,\"motion_tokens\":[1,9],\"split\":\"train\"}}\n"
        );
        assert!(matches!(
            read_corpus(text.as_bytes(), &SynonymLexicon::toy()),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
