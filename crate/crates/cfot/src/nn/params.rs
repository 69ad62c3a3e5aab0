//! Flat parameter storage, initialisation and checkpoint IO.

use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use crate::error::{Error, Result};

/// Shape of the residual MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub output_dim: usize,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, n_blocks: usize, output_dim: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dim,
            n_blocks,
            output_dim,
        };
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Config("network dims must be >= 1".into()));
        }
        Ok(spec)
    }

    /// Default ellipse architecture: hidden 256, 3 blocks.
    pub fn ellipse(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 256,
            n_blocks: 3,
            output_dim,
        }
    }

    /// Parameters per block: LN gain/bias + two square linears with biases.
    fn block_len(&self) -> usize {
        let h = self.hidden_dim;
        2 * h + 2 * (h * h + h)
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_dim;
        let proj = self.input_dim * h + h;
        let head = 2 * h + h * self.output_dim + self.output_dim;
        proj + self.n_blocks * self.block_len() + head
    }

    // Segment offsets, in declaration order. This order is the checkpoint
    // serialisation order and must not change.
    pub(crate) fn proj_w(&self) -> Range<usize> {
        0..self.input_dim * self.hidden_dim
    }
    pub(crate) fn proj_b(&self) -> Range<usize> {
        let s = self.proj_w().end;
        s..s + self.hidden_dim
    }
    fn block_start(&self, k: usize) -> usize {
        self.proj_b().end + k * self.block_len()
    }
    pub(crate) fn ln_g(&self, k: usize) -> Range<usize> {
        let s = self.block_start(k);
        s..s + self.hidden_dim
    }
    pub(crate) fn ln_b(&self, k: usize) -> Range<usize> {
        let s = self.ln_g(k).end;
        s..s + self.hidden_dim
    }
    pub(crate) fn w1(&self, k: usize) -> Range<usize> {
        let s = self.ln_b(k).end;
        s..s + self.hidden_dim * self.hidden_dim
    }
    pub(crate) fn b1(&self, k: usize) -> Range<usize> {
        let s = self.w1(k).end;
        s..s + self.hidden_dim
    }
    pub(crate) fn w2(&self, k: usize) -> Range<usize> {
        let s = self.b1(k).end;
        s..s + self.hidden_dim * self.hidden_dim
    }
    pub(crate) fn b2(&self, k: usize) -> Range<usize> {
        let s = self.w2(k).end;
        s..s + self.hidden_dim
    }
    pub(crate) fn head_ln_g(&self) -> Range<usize> {
        let s = self.block_start(self.n_blocks);
        s..s + self.hidden_dim
    }
    pub(crate) fn head_ln_b(&self) -> Range<usize> {
        let s = self.head_ln_g().end;
        s..s + self.hidden_dim
    }
    pub(crate) fn head_w(&self) -> Range<usize> {
        let s = self.head_ln_b().end;
        s..s + self.hidden_dim * self.output_dim
    }
    pub(crate) fn head_b(&self) -> Range<usize> {
        let s = self.head_w().end;
        s..s + self.output_dim
    }
}

/// All parameters of one network, stored flat in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub spec: NetworkSpec,
    pub data: Vec<f64>,
}

impl Params {
    pub fn zeros(spec: NetworkSpec) -> Self {
        Self {
            spec,
            data: vec![0.0; spec.n_params()],
        }
    }

    /// Fan-in uniform init: weights `U(-a, a)` with `a = sqrt(1/fan_in)`,
    /// biases zero, LayerNorm gains one.
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        let h = spec.hidden_dim;
        let mut fill = |range: Range<usize>, fan_in: usize, data: &mut Vec<f64>, rng: &mut R| {
            let a = (1.0 / fan_in as f64).sqrt();
            for v in &mut data[range] {
                *v = (2.0 * rng.random::<f64>() - 1.0) * a;
            }
        };
        fill(spec.proj_w(), spec.input_dim, &mut p.data, rng);
        for k in 0..spec.n_blocks {
            p.data[spec.ln_g(k)].fill(1.0);
            fill(spec.w1(k), h, &mut p.data, rng);
            fill(spec.w2(k), h, &mut p.data, rng);
        }
        p.data[spec.head_ln_g()].fill(1.0);
        fill(spec.head_w(), h, &mut p.data, rng);
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(super) fn mat(&self, range: Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.data[range]).expect("layout ranges are consistent")
    }

    pub(super) fn mat_mut(
        &mut self,
        range: Range<usize>,
        rows: usize,
        cols: usize,
    ) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((rows, cols), &mut self.data[range])
            .expect("layout ranges are consistent")
    }
}

const CKPT_MAGIC: &str = "cfot-ckpt v1";

/// Writes the checkpoint: magic line, the spec as `key=value` lines, then
/// the raw parameters as little-endian 64-bit floats in declaration order.
pub fn write_checkpoint<W: Write>(params: &Params, out: &mut W) -> Result<()> {
    let s = params.spec;
    writeln!(out, "{CKPT_MAGIC}")?;
    writeln!(out, "input_dim={}", s.input_dim)?;
    writeln!(out, "hidden_dim={}", s.hidden_dim)?;
    writeln!(out, "n_blocks={}", s.n_blocks)?;
    writeln!(out, "output_dim={}", s.output_dim)?;
    for v in &params.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint_file(params: &Params, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(params, &mut file)
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Params> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: {:?}",
            line.trim_end()
        )));
    }
    let mut fields = [0usize; 4];
    let names = ["input_dim", "hidden_dim", "n_blocks", "output_dim"];
    for (slot, name) in fields.iter_mut().zip(names) {
        line.clear();
        reader.read_line(&mut line)?;
        let (key, value) = line
            .trim_end()
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("expected {name}=..., got {line:?}")))?;
        if key != name {
            return Err(Error::Checkpoint(format!("expected key {name}, got {key}")));
        }
        *slot = value
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad {name}: {e}")))?;
    }
    let spec = NetworkSpec::new(fields[0], fields[1], fields[2], fields[3])?;
    let mut data = vec![0.0f64; spec.n_params()];
    let mut buf = [0u8; 8];
    for v in &mut data {
        reader.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!("truncated parameter payload: {e}"))
        })?;
        *v = f64::from_le_bytes(buf);
    }
    let mut trailing = [0u8; 1];
    match reader.read(&mut trailing)? {
        0 => Ok(Params { spec, data }),
        _ => Err(Error::Checkpoint("trailing bytes after parameters".into())),
    }
}

pub fn read_checkpoint_file(path: &Path) -> Result<Params> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};

    #[test]
    fn layout_is_contiguous_and_complete() {
        let spec = NetworkSpec::new(4, 8, 3, 2).unwrap();
        let mut cursor = 0usize;
        let mut advance = |r: Range<usize>| {
            assert_eq!(r.start, cursor, "segment starts where previous ended");
            cursor = r.end;
        };
        advance(spec.proj_w());
        advance(spec.proj_b());
        for k in 0..spec.n_blocks {
            advance(spec.ln_g(k));
            advance(spec.ln_b(k));
            advance(spec.w1(k));
            advance(spec.b1(k));
            advance(spec.w2(k));
            advance(spec.b2(k));
        }
        advance(spec.head_ln_g());
        advance(spec.head_ln_b());
        advance(spec.head_w());
        advance(spec.head_b());
        assert_eq!(cursor, spec.n_params());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = NetworkSpec::new(4, 16, 2, 2).unwrap();
        let mut rng = substream(1, Domain::Init, 0);
        let params = Params::init(spec, &mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(params.spec, back.spec);
        assert!(params
            .data
            .iter()
            .zip(&back.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let spec = NetworkSpec::new(2, 4, 1, 2).unwrap();
        let params = Params::zeros(spec);
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extended = buf.clone();
        extended.extend_from_slice(&[0u8; 8]);
        assert!(read_checkpoint(&extended[..]).is_err());
        let mut bad_magic = buf;
        bad_magic[0] = b'x';
        assert!(read_checkpoint(&bad_magic[..]).is_err());
    }
}
