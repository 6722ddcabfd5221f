//! Binary store file.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! magic "PCST" | version u32 | config hash u64
//! schema count u32 | (name str, source str)*
//! entry count u32  | entry*
//!
//! entry: kind u8 (0 module, 1 scaffold) | schema str | member count u32 | member str*
//!        tier u8 | rows u32 | tokens u32[rows] | positions u32[rows]
//!        slot count u32 | (name str, start u32, len u32)*
//!        logits count u32 | f32[count]
//!        per layer: keys f32[rows * width], values f32[rows * width]
//! str:   byte length u32 | UTF-8
//! ```

use std::io::{self, Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{CacheEntry, CacheError, CacheKey, ModuleStore, Tier, TierCapacities};
use crate::layout::ParamSlot;
use crate::model::{KvState, LayerKv, ModelConfig};

pub const MAGIC: &[u8; 4] = b"PCST";
pub const VERSION: u32 = 1;

pub(super) fn encode(store: &ModuleStore) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, store).expect("writing to a Vec cannot fail");
    out
}

fn write(out: &mut Vec<u8>, store: &ModuleStore) -> io::Result<()> {
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION)?;
    out.write_u64::<LE>(store.config().hash())?;
    let schemas = store.schema_sources();
    out.write_u32::<LE>(schemas.len() as u32)?;
    for (name, src) in &schemas {
        write_str(out, name)?;
        write_str(out, src)?;
    }
    let entries = store.entries();
    out.write_u32::<LE>(entries.len() as u32)?;
    for e in &entries {
        match &e.key {
            CacheKey::Module { schema, module } => {
                out.write_u8(0)?;
                write_str(out, schema)?;
                out.write_u32::<LE>(1)?;
                write_str(out, module)?;
            }
            CacheKey::Scaffold { schema, modules } => {
                out.write_u8(1)?;
                write_str(out, schema)?;
                out.write_u32::<LE>(modules.len() as u32)?;
                for m in modules {
                    write_str(out, m)?;
                }
            }
        }
        out.write_u8(e.tier.index() as u8)?;
        out.write_u32::<LE>(e.token_len() as u32)?;
        for &t in &e.tokens {
            out.write_u32::<LE>(t)?;
        }
        for &p in e.positions() {
            out.write_u32::<LE>(p)?;
        }
        out.write_u32::<LE>(e.param_slots.len() as u32)?;
        for s in &e.param_slots {
            write_str(out, &s.param_name)?;
            out.write_u32::<LE>(s.slot_start)?;
            out.write_u32::<LE>(s.slot_len as u32)?;
        }
        write_f32s(out, &e.last_logits, true)?;
        for l in &e.kv.layers {
            write_f32s(out, &l.keys, false)?;
            write_f32s(out, &l.values, false)?;
        }
    }
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) -> io::Result<()> {
    out.write_u32::<LE>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn write_f32s(out: &mut Vec<u8>, xs: &[f32], with_len: bool) -> io::Result<()> {
    if with_len {
        out.write_u32::<LE>(xs.len() as u32)?;
    }
    for &x in xs {
        out.write_f32::<LE>(x)?;
    }
    Ok(())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn remaining(&self) -> u64 {
        self.cur.get_ref().len() as u64 - self.cur.position().min(self.cur.get_ref().len() as u64)
    }

    fn eof(&self) -> CacheError {
        CacheError::Truncated {
            offset: self.cur.get_ref().len() as u64,
        }
    }

    fn corrupt(&self, message: impl Into<String>) -> CacheError {
        CacheError::Corrupt {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn u8(&mut self) -> Result<u8, CacheError> {
        self.cur.read_u8().map_err(|_| self.eof())
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        self.cur.read_u32::<LE>().map_err(|_| self.eof())
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        self.cur.read_u64::<LE>().map_err(|_| self.eof())
    }

    /// Fails early when `count` items of `size` bytes cannot possibly fit.
    fn ensure(&self, count: u64, size: u64) -> Result<(), CacheError> {
        if count.saturating_mul(size) > self.remaining() {
            Err(self.eof())
        } else {
            Ok(())
        }
    }

    fn string(&mut self) -> Result<String, CacheError> {
        let n = self.u32()? as u64;
        self.ensure(n, 1)?;
        let mut buf = vec![0; n as usize];
        self.cur.read_exact(&mut buf).map_err(|_| self.eof())?;
        String::from_utf8(buf).map_err(|_| self.corrupt("string is not valid UTF-8"))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, CacheError> {
        self.ensure(n as u64, 4)?;
        let mut v = vec![0; n];
        self.cur
            .read_u32_into::<LE>(&mut v)
            .map_err(|_| self.eof())?;
        Ok(v)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CacheError> {
        self.ensure(n as u64, 4)?;
        let mut v = vec![0.0; n];
        self.cur
            .read_f32_into::<LE>(&mut v)
            .map_err(|_| self.eof())?;
        Ok(v)
    }
}

pub(super) fn decode(
    bytes: &[u8],
    config: &ModelConfig,
    capacities: TierCapacities,
) -> Result<ModuleStore, CacheError> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    let mut magic = [0u8; 4];
    r.cur.read_exact(&mut magic).map_err(|_| r.eof())?;
    if &magic != MAGIC {
        return Err(CacheError::Corrupt {
            offset: 0,
            message: "not a prompt cache store file".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CacheError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let file_hash = r.u64()?;
    if file_hash != config.hash() {
        return Err(CacheError::ConfigHashMismatch {
            file: file_hash,
            model: config.hash(),
        });
    }

    let store = ModuleStore::new(config, capacities);
    let n_schemas = r.u32()?;
    for _ in 0..n_schemas {
        let name = r.string()?;
        let src = r.string()?;
        store.register_schema_source(name, src);
    }

    let n_entries = r.u32()?;
    for _ in 0..n_entries {
        let entry = read_entry(&mut r, config)?;
        store.insert(entry)?;
    }
    if r.remaining() != 0 {
        return Err(r.corrupt("trailing bytes after the last entry"));
    }
    Ok(store)
}

fn read_entry(r: &mut Reader<'_>, config: &ModelConfig) -> Result<CacheEntry, CacheError> {
    let kind = r.u8()?;
    let schema = r.string()?;
    let n_members = r.u32()?;
    r.ensure(n_members as u64, 4)?;
    let mut members = Vec::with_capacity(n_members as usize);
    for _ in 0..n_members {
        members.push(r.string()?);
    }
    let key = match kind {
        0 if members.len() == 1 => CacheKey::Module {
            schema,
            module: members.pop().expect("one member"),
        },
        0 => return Err(r.corrupt("module entry must name exactly one module")),
        1 => CacheKey::Scaffold {
            schema,
            modules: members,
        },
        k => return Err(r.corrupt(format!("unknown entry kind {k}"))),
    };
    let tier = match r.u8()? {
        0 => Tier::Fast,
        1 => Tier::Slow,
        t => return Err(r.corrupt(format!("unknown tier {t}"))),
    };
    let rows = r.u32()? as usize;
    let tokens = r.u32s(rows)?;
    if tokens.iter().any(|&t| t as usize >= config.vocab_size) {
        return Err(r.corrupt("token outside the vocabulary"));
    }
    let positions = r.u32s(rows)?;
    if positions.iter().any(|&p| p as usize >= config.max_position) {
        return Err(r.corrupt("position id beyond max_position"));
    }
    let n_slots = r.u32()?;
    r.ensure(n_slots as u64, 12)?;
    let mut param_slots = Vec::with_capacity(n_slots as usize);
    for _ in 0..n_slots {
        let param_name = r.string()?;
        let slot_start = r.u32()?;
        let slot_len = r.u32()? as usize;
        param_slots.push(ParamSlot {
            param_name,
            slot_start,
            slot_len,
        });
    }
    let n_logits = r.u32()? as usize;
    if n_logits != 0 && n_logits != config.vocab_size {
        return Err(r.corrupt("logit row does not match the vocabulary size"));
    }
    let last_logits = r.f32s(n_logits)?;
    let width = config.n_heads * config.head_dim;
    let per_layer = rows
        .checked_mul(width)
        .ok_or_else(|| r.corrupt("row count overflows"))?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let keys = r.f32s(per_layer)?;
        let values = r.f32s(per_layer)?;
        layers.push(LayerKv { keys, values });
    }
    let kv = KvState::from_parts(config.n_heads, config.head_dim, layers, positions)
        .map_err(|e| r.corrupt(e.to_string()))?;
    Ok(CacheEntry {
        key,
        kv,
        tokens,
        param_slots,
        last_logits,
        tier,
    })
}
