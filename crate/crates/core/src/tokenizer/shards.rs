//! Length-prefixed binary shard files for tokenized cells.
//!
//! Record payload layout (little-endian): u32 version; u16 prompt count; per
//! prompt (u32 special token id, u32 target label token id or 0xFFFFFFFF);
//! u32 J; J x u32 gene token ids; u8 has_values; if set, J x f32 scaled ranks.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::Category;
use crate::tokenizer::{vocab, TokenizedCell, Vocabulary};
use crate::{Error, Result};

pub const SHARD_VERSION: u32 = 1;
const NO_TARGET: u32 = 0xFFFF_FFFF;
/// Records per shard file.
const SHARD_CAPACITY: usize = 65_536;

fn shard_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("shard-{index:05}.bin"))
}

fn encode_record(tc: &TokenizedCell, buf: &mut Vec<u8>) {
    buf.clear();
    buf.write_u32::<LittleEndian>(SHARD_VERSION).unwrap();
    // prompts recorded here are the categories with known targets; the
    // attached subset is re-sampled per training step
    let cats: Vec<Category> = tc.targets.keys().copied().collect();
    buf.write_u16::<LittleEndian>(cats.len() as u16).unwrap();
    for cat in cats {
        buf.write_u32::<LittleEndian>(vocab::prompt_token(cat)).unwrap();
        buf.write_u32::<LittleEndian>(*tc.targets.get(&cat).unwrap_or(&NO_TARGET)).unwrap();
    }
    buf.write_u32::<LittleEndian>(tc.gene_tokens.len() as u32).unwrap();
    for &t in &tc.gene_tokens {
        buf.write_u32::<LittleEndian>(t).unwrap();
    }
    if tc.values.is_empty() {
        buf.write_u8(0).unwrap();
    } else {
        buf.write_u8(1).unwrap();
        for &v in &tc.values {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
}

fn decode_record(payload: &[u8], ordinal: usize, vocab: &Vocabulary) -> Result<TokenizedCell> {
    let corrupt = |msg: &str| Error::ShardCorrupt { ordinal, msg: msg.to_string() };
    let mut r = payload;
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("missing version"))?;
    if version != SHARD_VERSION {
        return Err(Error::ShardVersion { expected: SHARD_VERSION, found: version });
    }
    let n_prompts = r.read_u16::<LittleEndian>().map_err(|_| corrupt("missing prompt count"))?;
    let mut tc = TokenizedCell {
        prompts: Vec::new(),
        targets: Default::default(),
        gene_tokens: Vec::new(),
        values: Vec::new(),
    };
    for _ in 0..n_prompts {
        let special = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated prompt"))?;
        let target = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated prompt"))?;
        let cat = vocab
            .category_of_prompt_token(special)
            .ok_or_else(|| corrupt(&format!("token {special} is not a prompt token")))?;
        if target != NO_TARGET {
            tc.targets.insert(cat, target);
        }
    }
    let j = r.read_u32::<LittleEndian>().map_err(|_| corrupt("missing gene count"))? as usize;
    tc.gene_tokens.reserve(j);
    for _ in 0..j {
        tc.gene_tokens
            .push(r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated gene tokens"))?);
    }
    let has_values = r.read_u8().map_err(|_| corrupt("missing has_values"))?;
    if has_values == 1 {
        tc.values.reserve(j);
        for _ in 0..j {
            tc.values
                .push(r.read_f32::<LittleEndian>().map_err(|_| corrupt("truncated values"))?);
        }
    } else if has_values != 0 {
        return Err(corrupt("bad has_values flag"));
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes in record"));
    }
    Ok(tc)
}

/// Write tokenized cells into shard files under `dir`.
pub fn write_shards<I>(cells: I, dir: &Path) -> Result<usize>
where
    I: IntoIterator<Item = TokenizedCell>,
{
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shard_idx = 0usize;
    let mut in_shard = 0usize;
    let mut total = 0usize;
    let mut payload = Vec::new();
    let first = shard_path(dir, 0);
    let mut writer =
        BufWriter::new(File::create(&first).map_err(|e| Error::io(&first, e))?);
    for tc in cells {
        if in_shard == SHARD_CAPACITY {
            writer.flush().map_err(|e| Error::io(shard_path(dir, shard_idx), e))?;
            shard_idx += 1;
            in_shard = 0;
            let path = shard_path(dir, shard_idx);
            writer = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        }
        encode_record(&tc, &mut payload);
        writer
            .write_u32::<LittleEndian>(payload.len() as u32)
            .and_then(|_| writer.write_all(&payload))
            .map_err(|e| Error::io(shard_path(dir, shard_idx), e))?;
        in_shard += 1;
        total += 1;
    }
    writer.flush().map_err(|e| Error::io(shard_path(dir, shard_idx), e))?;
    Ok(total)
}

/// Read every record back from `dir`, in shard then record order.
pub fn read_shards(dir: &Path, vocab: &Vocabulary) -> Result<Vec<TokenizedCell>> {
    let mut cells = Vec::new();
    let mut ordinal = 0usize;
    let mut shard_idx = 0usize;
    loop {
        let path = shard_path(dir, shard_idx);
        if !path.exists() {
            if shard_idx == 0 {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(ErrorKind::NotFound, "no shard files"),
                ));
            }
            break;
        }
        let mut reader =
            BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        loop {
            let len = match reader.read_u32::<LittleEndian>() {
                Ok(len) => len as usize,
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(_) => {
                    return Err(Error::ShardCorrupt {
                        ordinal,
                        msg: "unreadable length prefix".into(),
                    })
                }
            };
            let mut payload = vec![0u8; len];
            reader.read_exact(&mut payload).map_err(|_| Error::ShardCorrupt {
                ordinal,
                msg: format!("truncated record: expected {len} payload bytes"),
            })?;
            cells.push(decode_record(&payload, ordinal, vocab)?);
            ordinal += 1;
        }
        shard_idx += 1;
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic_corpus, AnnotationSchema, SyntheticSpec};
    use crate::normalize::build_median_dictionary;
    use crate::tokenizer::{build_vocabulary, tokenize_corpus, Variant};
    use tempfile::TempDir;

    fn sample_cells(variant: Variant) -> (Vec<TokenizedCell>, Vocabulary) {
        let schema = AnnotationSchema::default();
        let corpus = gen_synthetic_corpus(&SyntheticSpec::new(100, 40, 5), &schema, 13);
        let dict = build_median_dictionary(&corpus).unwrap();
        let vocab = build_vocabulary(&corpus.gene_ids, &schema).unwrap();
        let cells = tokenize_corpus(&corpus, &dict, &vocab, variant, 2048).unwrap();
        (cells, vocab)
    }

    #[test]
    fn roundtrip_both_variants() {
        for variant in [Variant::G, Variant::X] {
            let (cells, vocab) = sample_cells(variant);
            let dir = TempDir::new().unwrap();
            let n = write_shards(cells.clone(), dir.path()).unwrap();
            assert_eq!(n, cells.len());
            let back = read_shards(dir.path(), &vocab).unwrap();
            assert_eq!(cells, back);
        }
    }

    #[test]
    fn empty_stream_is_valid() {
        let (_, vocab) = sample_cells(Variant::G);
        let dir = TempDir::new().unwrap();
        write_shards(Vec::new(), dir.path()).unwrap();
        assert!(read_shards(dir.path(), &vocab).unwrap().is_empty());
    }

    #[test]
    fn corrupted_length_prefix_reports_ordinal() {
        let (cells, vocab) = sample_cells(Variant::G);
        let dir = TempDir::new().unwrap();
        write_shards(cells.into_iter().take(3), dir.path()).unwrap();
        // truncate the file mid-record
        let path = shard_path(dir.path(), 0);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_shards(dir.path(), &vocab).unwrap_err();
        assert!(matches!(err, Error::ShardCorrupt { ordinal: 2, .. }), "{err}");
    }

    #[test]
    fn version_mismatch_detected() {
        let (cells, vocab) = sample_cells(Variant::G);
        let dir = TempDir::new().unwrap();
        write_shards(cells.into_iter().take(1), dir.path()).unwrap();
        let path = shard_path(dir.path(), 0);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version field sits right after the length prefix
        std::fs::write(&path, &bytes).unwrap();
        let err = read_shards(dir.path(), &vocab).unwrap_err();
        assert!(matches!(err, Error::ShardVersion { found: 99, .. }), "{err}");
    }
}
