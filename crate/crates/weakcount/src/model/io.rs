//! Versioned binary model container: architecture, float parameters, and
//! (optionally) the frozen 8-bit model. The quantized block round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::fq::QParams;
use super::{ConvSpec, ModelError, ModelParameters, NetworkConfig};
use crate::quant::{QuantLayer, QuantizedModel, Requant};

const MAGIC: &[u8; 8] = b"WKCMODL\0";
const VERSION: u16 = 1;

/// What a model file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParameters,
    pub quant: Option<QuantizedModel>,
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<(), ModelError> {
    if let Some(q) = &file.quant {
        assert_eq!(
            q.config, file.params.config,
            "quantized block must describe the same architecture"
        );
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        write_config(&mut w, &file.params.config)?;
        w.write_u64::<LittleEndian>(file.params.data.len() as u64)?;
        for &v in &file.params.data {
            w.write_f64::<LittleEndian>(v)?;
        }
        match &file.quant {
            None => w.write_u8(0)?,
            Some(q) => {
                w.write_u8(1)?;
                write_qparams(&mut w, &q.input_q)?;
                w.write_f64::<LittleEndian>(q.logit_scale)?;
                w.write_u16::<LittleEndian>(q.layers.len() as u16)?;
                for layer in &q.layers {
                    w.write_u64::<LittleEndian>(layer.weights.len() as u64)?;
                    let bytes: Vec<u8> = layer.weights.iter().map(|&v| v as u8).collect();
                    w.write_all(&bytes)?;
                    w.write_f64::<LittleEndian>(layer.weight_scale)?;
                    w.write_u32::<LittleEndian>(layer.bias.len() as u32)?;
                    for &b in &layer.bias {
                        w.write_i32::<LittleEndian>(b)?;
                    }
                    w.write_i32::<LittleEndian>(layer.in_zp)?;
                    match (&layer.out_q, &layer.requant) {
                        (Some(oq), Some(rq)) => {
                            w.write_u8(1)?;
                            write_qparams(&mut w, oq)?;
                            w.write_i32::<LittleEndian>(rq.multiplier)?;
                            w.write_i32::<LittleEndian>(rq.shift)?;
                        }
                        (None, None) => w.write_u8(0)?,
                        _ => unreachable!("out_q and requant always travel together"),
                    }
                    w.write_u32::<LittleEndian>(layer.row_sums.len() as u32)?;
                    for &s in &layer.row_sums {
                        w.write_i32::<LittleEndian>(s)?;
                    }
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let config = read_config(&mut r)?;
    let expected = super::param_count(&config)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != expected {
        return Err(ModelError::Malformed(format!(
            "parameter count {n} does not match the architecture ({expected})"
        )));
    }
    let mut data = vec![0.0f64; n];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    let params = ModelParameters {
        config: config.clone(),
        data,
    };
    let quant = match r.read_u8()? {
        0 => None,
        1 => {
            let input_q = read_qparams(&mut r)?;
            let logit_scale = r.read_f64::<LittleEndian>()?;
            let n_layers = r.read_u16::<LittleEndian>()? as usize;
            if n_layers != config.conv.len() + 2 {
                return Err(ModelError::Malformed(format!(
                    "quantized block has {n_layers} layers, architecture needs {}",
                    config.conv.len() + 2
                )));
            }
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let wn = r.read_u64::<LittleEndian>()? as usize;
                let mut bytes = vec![0u8; wn];
                r.read_exact(&mut bytes)?;
                let weights: Vec<i8> = bytes.into_iter().map(|b| b as i8).collect();
                let weight_scale = r.read_f64::<LittleEndian>()?;
                let bn = r.read_u32::<LittleEndian>()? as usize;
                let mut bias = vec![0i32; bn];
                r.read_i32_into::<LittleEndian>(&mut bias)?;
                let in_zp = r.read_i32::<LittleEndian>()?;
                let (out_q, requant) = match r.read_u8()? {
                    1 => {
                        let oq = read_qparams(&mut r)?;
                        let m = r.read_i32::<LittleEndian>()?;
                        let s = r.read_i32::<LittleEndian>()?;
                        (Some(oq), Some(Requant { multiplier: m, shift: s }))
                    }
                    0 => (None, None),
                    other => {
                        return Err(ModelError::Malformed(format!(
                            "invalid requant flag {other}"
                        )))
                    }
                };
                let sn = r.read_u32::<LittleEndian>()? as usize;
                let mut row_sums = vec![0i32; sn];
                r.read_i32_into::<LittleEndian>(&mut row_sums)?;
                layers.push(QuantLayer {
                    weights,
                    weight_scale,
                    bias,
                    in_zp,
                    out_q,
                    requant,
                    row_sums,
                });
            }
            Some(QuantizedModel {
                config: config.clone(),
                input_q,
                layers,
                logit_scale,
            })
        }
        other => {
            return Err(ModelError::Malformed(format!(
                "invalid quantization flag {other}"
            )))
        }
    };

    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ModelError::Malformed("trailing bytes after model".into()));
    }
    Ok(ModelFile { params, quant })
}

fn write_config<W: Write>(w: &mut W, cfg: &NetworkConfig) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(cfg.input_len as u32)?;
    w.write_u16::<LittleEndian>(cfg.conv.len() as u16)?;
    for c in &cfg.conv {
        w.write_u32::<LittleEndian>(c.kernel as u32)?;
        w.write_u32::<LittleEndian>(c.channels as u32)?;
        w.write_u32::<LittleEndian>(c.pool as u32)?;
    }
    w.write_u32::<LittleEndian>(cfg.hidden_units as u32)?;
    w.write_u16::<LittleEndian>(cfg.n_categories as u16)?;
    match cfg.activation_clip {
        Some(v) => {
            w.write_u8(1)?;
            w.write_f64::<LittleEndian>(v)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<NetworkConfig, ModelError> {
    let input_len = r.read_u32::<LittleEndian>()? as usize;
    let n_conv = r.read_u16::<LittleEndian>()? as usize;
    let mut conv = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv.push(ConvSpec {
            kernel: r.read_u32::<LittleEndian>()? as usize,
            channels: r.read_u32::<LittleEndian>()? as usize,
            pool: r.read_u32::<LittleEndian>()? as usize,
        });
    }
    let hidden_units = r.read_u32::<LittleEndian>()? as usize;
    let n_categories = r.read_u16::<LittleEndian>()? as usize;
    let activation_clip = match r.read_u8()? {
        0 => None,
        1 => Some(r.read_f64::<LittleEndian>()?),
        other => {
            return Err(ModelError::Malformed(format!(
                "invalid activation clip flag {other}"
            )))
        }
    };
    Ok(NetworkConfig {
        input_len,
        conv,
        hidden_units,
        n_categories,
        activation_clip,
    })
}

fn write_qparams<W: Write>(w: &mut W, q: &QParams) -> std::io::Result<()> {
    w.write_f64::<LittleEndian>(q.scale)?;
    w.write_i32::<LittleEndian>(q.zero_point)?;
    w.write_i32::<LittleEndian>(q.qmin)?;
    w.write_i32::<LittleEndian>(q.qmax)
}

fn read_qparams<R: Read>(r: &mut R) -> Result<QParams, ModelError> {
    Ok(QParams {
        scale: r.read_f64::<LittleEndian>()?,
        zero_point: r.read_i32::<LittleEndian>()?,
        qmin: r.read_i32::<LittleEndian>()?,
        qmax: r.read_i32::<LittleEndian>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ConvSpec};
    use crate::quant::{calibrate_and_quantize, QuantConfig};
    use rand::{Rng, SeedableRng};

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_len: 40,
            conv: vec![ConvSpec { kernel: 5, channels: 3, pool: 2 }],
            hidden_units: 7,
            n_categories: 2,
            activation_clip: Some(6.0),
        }
    }

    #[test]
    fn float_model_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wkm");
        let params = init_params(&cfg(), 5).unwrap();
        let file = ModelFile { params, quant: None };
        save_model(&file, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), file);
    }

    #[test]
    fn quantized_model_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wkm");
        let cfg = cfg();
        let params = init_params(&cfg, 6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let calib: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..cfg.input_len).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let quant = calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap();
        let file = ModelFile {
            params,
            quant: Some(quant),
        };
        save_model(&file, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, file);
    }

    #[test]
    fn corrupt_models_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wkm");
        let params = init_params(&cfg(), 5).unwrap();
        save_model(&ModelFile { params, quant: None }, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[9] = 9; // version
        let vpath = dir.path().join("v.wkm");
        std::fs::write(&vpath, &bytes).unwrap();
        assert!(matches!(
            load_model(&vpath),
            Err(ModelError::VersionMismatch { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        let tpath = dir.path().join("t.wkm");
        std::fs::write(&tpath, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_model(&tpath).is_err());
    }
}
