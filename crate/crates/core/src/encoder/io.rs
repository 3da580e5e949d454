//! Weight file format.
//!
//! ```text
//! TCTWEIGHTS 1
//! profile seeded-random
//! channels 3
//! patch_size 8
//! hidden_dim 192
//! heads 4
//! layers 12
//! mlp_dim 384
//! use_position_embeddings true
//! norm layernorm 1e-6            | norm identity
//! embedding linear               | embedding normalized-pixels <center> <bias_channel>
//! position_grid 10 16            | position_grid none
//! tensors <count>
//! tensor <name> <rows> <cols> <offset>
//! ...
//! end
//! <raw little-endian f64 data>
//! ```
//!
//! Offsets are byte offsets from the first byte after the `end` line. Tensors
//! are row-major. Vectors are stored as `1 × n` tensors. Names:
//! `patch.projection`, `patch.bias` (linear embedding only), `class_token`,
//! `position` (when a grid is declared) and, for each layer `l` counted from 1,
//! `blocks.l.{norm1.gain, norm1.bias, qkv.weight, qkv.bias, proj.weight,
//! proj.bias, norm2.gain, norm2.bias, mlp.fc1.weight, mlp.fc1.bias,
//! mlp.fc2.weight, mlp.fc2.bias}`.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{EncoderConfig, NormKind, WeightProfile};
use super::weights::{EncoderParts, EncoderWeights, LayerWeights, PatchEmbedding, PositionTable};
use crate::error::{Result, TctError};
use crate::numerics::Matrix;

const MAGIC: &str = "TCTWEIGHTS 1";

/// Header contents of a weight file, for inspection without loading tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightHeader {
    pub source_profile: WeightProfile,
    pub config: EncoderConfig,
    pub embedding_kind: EmbeddingKind,
    pub position_grid: Option<(usize, usize)>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbeddingKind {
    Linear,
    NormalizedPixels { center: f64, bias_channel: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

fn vector(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("finite weights")
}

/// Every stored tensor with its file name, in file order.
pub fn named_tensors(w: &EncoderWeights) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    if let PatchEmbedding::Linear { projection, bias } = w.embedding() {
        out.push(("patch.projection".to_string(), projection.clone()));
        out.push(("patch.bias".to_string(), vector(bias)));
    }
    out.push(("class_token".to_string(), vector(w.class_token())));
    if let Some(pos) = w.position() {
        out.push(("position".to_string(), pos.table.clone()));
    }
    for (i, l) in w.layers().iter().enumerate() {
        let n = |s: &str| format!("blocks.{}.{s}", i + 1);
        out.push((n("norm1.gain"), vector(&l.norm1_gain)));
        out.push((n("norm1.bias"), vector(&l.norm1_bias)));
        out.push((n("qkv.weight"), l.qkv.clone()));
        out.push((n("qkv.bias"), vector(&l.qkv_bias)));
        out.push((n("proj.weight"), l.out.clone()));
        out.push((n("proj.bias"), vector(&l.out_bias)));
        out.push((n("norm2.gain"), vector(&l.norm2_gain)));
        out.push((n("norm2.bias"), vector(&l.norm2_bias)));
        out.push((n("mlp.fc1.weight"), l.mlp_in.clone()));
        out.push((n("mlp.fc1.bias"), vector(&l.mlp_in_bias)));
        out.push((n("mlp.fc2.weight"), l.mlp_out.clone()));
        out.push((n("mlp.fc2.bias"), vector(&l.mlp_out_bias)));
    }
    out
}

/// Serializes weights to the binary format.
pub fn encode_weights(w: &EncoderWeights) -> Vec<u8> {
    let c = w.config();
    let mut header = format!("{MAGIC}\nprofile {}\n", c.profile.name());
    header += &format!(
        "channels {}\npatch_size {}\nhidden_dim {}\nheads {}\nlayers {}\nmlp_dim {}\nuse_position_embeddings {}\n",
        c.channels, c.patch_size, c.hidden_dim, c.heads, c.layers, c.mlp_dim, c.use_position_embeddings
    );
    header += &match c.norm {
        NormKind::LayerNorm { eps } => format!("norm layernorm {eps:?}\n"),
        NormKind::Identity => "norm identity\n".to_string(),
    };
    header += &match w.embedding() {
        PatchEmbedding::Linear { .. } => "embedding linear\n".to_string(),
        PatchEmbedding::NormalizedPixels {
            center,
            bias_channel,
        } => format!("embedding normalized-pixels {center:?} {bias_channel:?}\n"),
    };
    header += &match w.position() {
        Some(p) => format!("position_grid {} {}\n", p.grid.0, p.grid.1),
        None => "position_grid none\n".to_string(),
    };
    let tensors = named_tensors(w);
    header += &format!("tensors {}\n", tensors.len());
    let mut offset = 0;
    for (name, m) in &tensors {
        header += &format!("tensor {name} {} {} {offset}\n", m.rows(), m.cols());
        offset += m.data().len() * 8;
    }
    header += "end\n";
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_weights(w: &EncoderWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<EncoderWeights> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes, &path.display().to_string())
}

/// Reads the header only.
pub fn read_header(bytes: &[u8], source: &str) -> Result<WeightHeader> {
    parse_header(bytes, source).map(|(h, _)| h)
}

struct Lines<'a> {
    source: &'a str,
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not valid UTF-8"))
    }

    fn err(&self, msg: impl Into<String>) -> TctError {
        TctError::parse(self.source, self.line, msg)
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok(parts.collect()),
            _ => Err(self.err(format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn value<T: std::str::FromStr>(&self, what: &str, s: Option<&&str>) -> Result<T> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("missing or invalid {what}")))
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let args = self.keyed(key)?;
        if args.len() != 1 {
            return Err(self.err(format!("`{key}` takes exactly one value")));
        }
        self.value(key, args.first())
    }
}

fn parse_header(bytes: &[u8], source: &str) -> Result<(WeightHeader, usize)> {
    let mut lines = Lines {
        source,
        bytes,
        pos: 0,
        line: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err(format!("not a weight file: expected `{MAGIC}`")));
    }
    let profile_name: String = lines.single("profile")?;
    let source_profile = WeightProfile::parse(&profile_name)
        .ok_or_else(|| lines.err(format!("unknown profile `{profile_name}`")))?;
    let channels = lines.single("channels")?;
    let patch_size = lines.single("patch_size")?;
    let hidden_dim = lines.single("hidden_dim")?;
    let heads = lines.single("heads")?;
    let layers = lines.single("layers")?;
    let mlp_dim = lines.single("mlp_dim")?;
    let use_position_embeddings = lines.single("use_position_embeddings")?;
    let args = lines.keyed("norm")?;
    let norm = match args.as_slice() {
        ["identity"] => NormKind::Identity,
        ["layernorm", eps] => NormKind::LayerNorm {
            eps: lines.value("layernorm eps", Some(eps))?,
        },
        _ => return Err(lines.err("expected `norm identity` or `norm layernorm <eps>`")),
    };
    let args = lines.keyed("embedding")?;
    let embedding_kind = match args.as_slice() {
        ["linear"] => EmbeddingKind::Linear,
        ["normalized-pixels", c, b] => EmbeddingKind::NormalizedPixels {
            center: lines.value("center", Some(c))?,
            bias_channel: lines.value("bias channel", Some(b))?,
        },
        _ => {
            return Err(lines.err(
                "expected `embedding linear` or `embedding normalized-pixels <center> <bias>`",
            ))
        }
    };
    let args = lines.keyed("position_grid")?;
    let position_grid = match args.as_slice() {
        ["none"] => None,
        [r, c] => Some((
            lines.value("grid rows", Some(r))?,
            lines.value("grid cols", Some(c))?,
        )),
        _ => return Err(lines.err("expected `position_grid none` or `position_grid <rows> <cols>`")),
    };
    let count: usize = lines.single("tensors")?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let args = lines.keyed("tensor")?;
        if args.len() != 4 {
            return Err(lines.err("expected `tensor <name> <rows> <cols> <offset>`"));
        }
        tensors.push(TensorEntry {
            name: args[0].to_string(),
            rows: lines.value("rows", args.get(1))?,
            cols: lines.value("cols", args.get(2))?,
            offset: lines.value("offset", args.get(3))?,
        });
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected `end`"));
    }
    let config = EncoderConfig {
        channels,
        patch_size,
        hidden_dim,
        heads,
        layers,
        mlp_dim,
        use_position_embeddings,
        profile: WeightProfile::FileLoaded,
        norm,
    };
    Ok((
        WeightHeader {
            source_profile,
            config,
            embedding_kind,
            position_grid,
            tensors,
        },
        lines.pos,
    ))
}

/// Parses a weight file. The resulting config reports the `file-loaded` profile.
pub fn decode_weights(bytes: &[u8], source: &str) -> Result<EncoderWeights> {
    let (header, data_start) = parse_header(bytes, source)?;
    let data = &bytes[data_start..];
    let mut table: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &header.tensors {
        if table.insert(&t.name, t).is_some() {
            return Err(TctError::input(format!("{source}: duplicate tensor `{}`", t.name)));
        }
    }
    let mut take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        let t = table
            .remove(name)
            .ok_or_else(|| TctError::input(format!("{source}: missing tensor `{name}`")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(TctError::shape(format!(
                "{source}: tensor `{name}` is {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        let len = rows * cols * 8;
        let raw = t
            .offset
            .checked_add(len)
            .and_then(|end| data.get(t.offset..end))
            .ok_or_else(|| TctError::input(format!("{source}: tensor `{name}` runs past end of file")))?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(rows, cols, values)
            .map_err(|e| TctError::input(format!("{source}: tensor `{name}`: {e}")))
    };
    let c = &header.config;
    c.validate()?;
    let (d, m) = (c.hidden_dim, c.mlp_dim);
    let embedding = match header.embedding_kind {
        EmbeddingKind::Linear => PatchEmbedding::Linear {
            projection: take("patch.projection", c.patch_len(), d)?,
            bias: take("patch.bias", 1, d)?.into_data(),
        },
        EmbeddingKind::NormalizedPixels {
            center,
            bias_channel,
        } => PatchEmbedding::NormalizedPixels {
            center,
            bias_channel,
        },
    };
    let class_token = take("class_token", 1, d)?.into_data();
    let position = match header.position_grid {
        Some((gh, gw)) => Some(PositionTable {
            grid: (gh, gw),
            table: take("position", gh * gw + 1, d)?,
        }),
        None => None,
    };
    let mut layers = Vec::with_capacity(c.layers);
    for l in 1..=c.layers {
        let n = |s: &str| format!("blocks.{l}.{s}");
        let mut vec = |s: &str, len: usize| take(&n(s), 1, len).map(Matrix::into_data);
        let norm1_gain = vec("norm1.gain", d)?;
        let norm1_bias = vec("norm1.bias", d)?;
        let qkv_bias = vec("qkv.bias", 3 * d)?;
        let out_bias = vec("proj.bias", d)?;
        let norm2_gain = vec("norm2.gain", d)?;
        let norm2_bias = vec("norm2.bias", d)?;
        let mlp_in_bias = vec("mlp.fc1.bias", m)?;
        let mlp_out_bias = vec("mlp.fc2.bias", d)?;
        layers.push(LayerWeights {
            norm1_gain,
            norm1_bias,
            qkv: take(&n("qkv.weight"), d, 3 * d)?,
            qkv_bias,
            out: take(&n("proj.weight"), d, d)?,
            out_bias,
            norm2_gain,
            norm2_bias,
            mlp_in: take(&n("mlp.fc1.weight"), d, m)?,
            mlp_in_bias,
            mlp_out: take(&n("mlp.fc2.weight"), m, d)?,
            mlp_out_bias,
        });
    }
    if let Some(extra) = table.keys().next() {
        return Err(TctError::input(format!("{source}: unexpected tensor `{extra}`")));
    }
    EncoderWeights::new(EncoderParts {
        config: header.config,
        embedding,
        class_token,
        position,
        layers,
    })
}
