//! Parameter checkpoints: one JSON header line, then the flat values as
//! little-endian f64.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderParams, LayerShape};

const FORMAT: &str = "fedmoco-params";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    shapes: Vec<LayerShape>,
    feature_dim: usize,
    count: usize,
}

pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        shapes: params.shapes().to_vec(),
        feature_dim: params.feature_dim(),
        count: params.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&params.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<EncoderParams> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT || header.version != 1 {
        return Err(Error::Argument(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != header.count * 8 {
        return Err(Error::Shape(format!("{} payload bytes for {} values", bytes.len(), header.count)));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let params = EncoderParams::new(header.shapes, values)?;
    if params.feature_dim() != header.feature_dim {
        return Err(Error::Shape("feature_dim disagrees with layer shapes".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    write_checkpoint(params, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, mlp_shapes};

    #[test]
    fn checkpoint_layout() {
        let p = init_params(&mlp_shapes(4, &[3], 2), 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let newline = buf.iter().position(|b| *b == b'\n').unwrap();
        assert_eq!(buf.len() - newline - 1, p.len() * 8);
        assert_eq!(&buf[newline + 1..newline + 9], &p.values()[0].to_le_bytes());
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), p);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
