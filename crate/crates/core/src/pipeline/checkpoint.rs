//! `GCRFMDL1` model checkpoints.
//!
//! Layout (little-endian): magic, format version (u32), section count (u32),
//! then sections of `tag[4] | version u32 | length u64 | payload`. Unknown
//! tags are skipped. Sections: `CONF` (model config as JSON), `VAE `,
//! `GMM `, `EMB `, all floats 64-bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::gmm::GmmParams;
use super::vae::{StructureMap, ToyVae, DECODER_FEATURES};
use super::{ModelConfig, ToyModel};
use crate::error::{GcrfError, Result};
use crate::formats::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCRFMDL1";
const FORMAT_VERSION: u32 = 1;
const SECTION_VERSION: u32 = 1;

fn put_matrix(w: &mut ByteWriter, m: &DMatrix<f64>) {
    w.u32(m.nrows() as u32);
    w.u32(m.ncols() as u32);
    w.f64s(m.as_slice());
}

fn get_matrix(r: &mut ByteReader) -> Result<DMatrix<f64>> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| GcrfError::Format("matrix size overflow".into()))?;
    Ok(DMatrix::from_vec(rows, cols, r.f64s(n)?))
}

fn put_vector(w: &mut ByteWriter, v: &DVector<f64>) {
    w.u32(v.len() as u32);
    w.f64s(v.as_slice());
}

fn get_vector(r: &mut ByteReader) -> Result<DVector<f64>> {
    let n = r.u32()? as usize;
    Ok(DVector::from_vec(r.f64s(n)?))
}

pub fn write_checkpoint(model: &ToyModel) -> Vec<u8> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
    sections.push((b"CONF", serde_json::to_vec(&model.config).expect("config serializes")));

    let mut w = ByteWriter::default();
    let v = &model.vae;
    for m in [&v.enc_mean_w, &v.enc_logvar_w, &v.dec_w[0], &v.dec_w[1]] {
        put_matrix(&mut w, m);
    }
    for b in [&v.enc_mean_b, &v.enc_logvar_b, &v.dec_b[0], &v.dec_b[1]] {
        put_vector(&mut w, b);
    }
    sections.push((b"VAE ", w.buf));

    let mut w = ByteWriter::default();
    w.f64(model.gmm.sigma);
    put_matrix(&mut w, &model.gmm.means);
    put_vector(&mut w, &model.gmm.logits);
    sections.push((b"GMM ", w.buf));

    let mut w = ByteWriter::default();
    put_matrix(&mut w, &model.structure.weights);
    sections.push((b"EMB ", w.buf));

    let mut out = ByteWriter::default();
    out.magic(CHECKPOINT_MAGIC);
    out.u32(FORMAT_VERSION);
    out.u32(sections.len() as u32);
    for (tag, payload) in sections {
        out.bytes(tag);
        out.u32(SECTION_VERSION);
        out.u64(payload.len() as u64);
        out.bytes(&payload);
    }
    out.buf
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ToyModel> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(GcrfError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let (mut config, mut vae, mut gmm, mut structure) = (None, None, None, None);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let section_version = r.u32()?;
        let len = usize::try_from(r.u64()?).map_err(|_| GcrfError::Format("section too large".into()))?;
        let payload = r.take(len)?;
        if section_version != SECTION_VERSION {
            return Err(GcrfError::Format(format!(
                "section {} has unsupported version {section_version}",
                String::from_utf8_lossy(&tag)
            )));
        }
        let mut s = ByteReader::new(payload);
        match &tag {
            b"CONF" => config = Some(serde_json::from_slice::<ModelConfig>(payload)?),
            b"VAE " => {
                let mats: Vec<DMatrix<f64>> = (0..4).map(|_| get_matrix(&mut s)).collect::<Result<_>>()?;
                let vecs: Vec<DVector<f64>> = (0..4).map(|_| get_vector(&mut s)).collect::<Result<_>>()?;
                s.finish()?;
                let [mw, lw, dw0, dw1]: [DMatrix<f64>; 4] = mats.try_into().unwrap();
                let [mb, lb, db0, db1]: [DVector<f64>; 4] = vecs.try_into().unwrap();
                vae = Some(ToyVae {
                    enc_mean_w: mw,
                    enc_mean_b: mb,
                    enc_logvar_w: lw,
                    enc_logvar_b: lb,
                    dec_w: [dw0, dw1],
                    dec_b: [db0, db1],
                });
            }
            b"GMM " => {
                let sigma = s.f64()?;
                let means = get_matrix(&mut s)?;
                let logits = get_vector(&mut s)?;
                s.finish()?;
                gmm = Some(GmmParams::new(means, logits, sigma)?);
            }
            b"EMB " => {
                let weights = get_matrix(&mut s)?;
                s.finish()?;
                structure = Some(StructureMap { weights });
            }
            _ => {}
        }
    }
    r.finish()?;
    let missing = |name: &str| GcrfError::Format(format!("checkpoint has no {name} section"));
    let model = ToyModel {
        config: config.ok_or_else(|| missing("CONF"))?,
        vae: vae.ok_or_else(|| missing("VAE"))?,
        gmm: gmm.ok_or_else(|| missing("GMM"))?,
        structure: structure.ok_or_else(|| missing("EMB"))?,
    };
    check_shapes(&model)?;
    Ok(model)
}

fn check_shapes(m: &ToyModel) -> Result<()> {
    m.config.validate()?;
    let (d, p) = (m.config.latent_dim, m.config.pixel_count());
    let v = &m.vae;
    let ok = v.enc_mean_w.shape() == (d, 3 * p)
        && v.enc_logvar_w.shape() == (d, 3 * p)
        && v.enc_mean_b.len() == d
        && v.enc_logvar_b.len() == d
        && v.dec_w.iter().all(|w| w.shape() == (DECODER_FEATURES, d))
        && v.dec_b.iter().all(|b| b.len() == DECODER_FEATURES)
        && m.gmm.means.shape() == (m.config.components, d)
        && m.structure.weights.shape() == (m.config.embedding_dim, super::vae::STRUCTURE_FEATURES);
    if !ok {
        return Err(GcrfError::Format("checkpoint sections disagree with its config".into()));
    }
    let all = v
        .enc_mean_w
        .iter()
        .chain(v.enc_logvar_w.iter())
        .chain(v.dec_w[0].iter())
        .chain(v.dec_w[1].iter())
        .chain(m.structure.weights.iter());
    if all.into_iter().any(|x| !x.is_finite()) {
        return Err(GcrfError::NonFinite("checkpoint parameters"));
    }
    Ok(())
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    read_checkpoint(&std::fs::read(path)?)
}
