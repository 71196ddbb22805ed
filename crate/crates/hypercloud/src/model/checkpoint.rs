//! Versioned JSON checkpoints. Weights serialize through serde_json's
//! shortest-round-trip float encoding, so save -> load reproduces every
//! parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HyperModel, LinearLayer, TargetArch};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    latent_dim: usize,
    target_arch: Vec<usize>,
    encoder_widths: Vec<usize>,
    encoder_head_width: usize,
    decoder_hidden: Vec<usize>,
    layers: Vec<LayerRecord>,
}

pub fn save_checkpoint(model: &HyperModel, path: &Path) -> Result<()> {
    if !model.all_finite() {
        return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
    }
    let mut encoder_widths = vec![3];
    encoder_widths.extend(model.encoder_point.iter().map(|l| l.out_dim));
    let decoder_hidden: Vec<usize> = model
        .decoder
        .iter()
        .take(model.decoder.len().saturating_sub(1))
        .map(|l| l.out_dim)
        .collect();
    let layers = model
        .layers()
        .into_iter()
        .zip(model.layer_names())
        .map(|(l, name)| LayerRecord {
            name,
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            w: l.w.clone(),
            b: l.b.clone(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        latent_dim: model.latent_dim,
        target_arch: model.target_arch.widths().to_vec(),
        encoder_widths,
        encoder_head_width: model.encoder_head.out_dim,
        decoder_hidden,
        layers,
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("encode failed: {}", e)))?;
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn take_layer(
    records: &mut std::vec::IntoIter<LayerRecord>,
    expect_in: usize,
    expect_out: usize,
    what: &str,
) -> Result<LinearLayer> {
    let rec = records
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("missing layer record for {}", what)))?;
    if rec.in_dim != expect_in || rec.out_dim != expect_out {
        return Err(Error::Checkpoint(format!(
            "{} declares {}x{}, widths imply {}x{}",
            rec.name, rec.in_dim, rec.out_dim, expect_in, expect_out
        )));
    }
    if rec.w.len() != expect_in * expect_out {
        return Err(Error::Checkpoint(format!(
            "{}: weight array has {} entries, declared widths need {}",
            rec.name,
            rec.w.len(),
            expect_in * expect_out
        )));
    }
    if rec.b.len() != expect_out {
        return Err(Error::Checkpoint(format!(
            "{}: bias array has {} entries, declared width needs {}",
            rec.name,
            rec.b.len(),
            expect_out
        )));
    }
    Ok(LinearLayer { in_dim: expect_in, out_dim: expect_out, w: rec.w, b: rec.b })
}

pub fn load_checkpoint(path: &Path) -> Result<HyperModel> {
    let text =
        fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (expected {})",
            file.format_version, CHECKPOINT_VERSION
        )));
    }
    let target_arch = TargetArch::new(file.target_arch.clone())?;
    if file.encoder_widths.len() < 2 || file.encoder_widths[0] != 3 {
        return Err(Error::Checkpoint(format!(
            "encoder widths must start at 3, got {:?}",
            file.encoder_widths
        )));
    }
    if file.latent_dim == 0 {
        return Err(Error::Checkpoint("latent_dim must be >= 1".into()));
    }

    let expected_layers =
        (file.encoder_widths.len() - 1) + 3 + file.decoder_hidden.len() + 1;
    if file.layers.len() != expected_layers {
        return Err(Error::Checkpoint(format!(
            "expected {} layer records for the declared widths, found {}",
            expected_layers,
            file.layers.len()
        )));
    }

    let mut records = file.layers.into_iter();
    let mut encoder_point = Vec::new();
    for pair in file.encoder_widths.windows(2) {
        encoder_point.push(take_layer(&mut records, pair[0], pair[1], "encoder_point")?);
    }
    let feat = *file.encoder_widths.last().expect("len checked");
    let encoder_head = take_layer(&mut records, feat, file.encoder_head_width, "encoder_head")?;
    let head_mu = take_layer(&mut records, file.encoder_head_width, file.latent_dim, "head_mu")?;
    let head_logvar =
        take_layer(&mut records, file.encoder_head_width, file.latent_dim, "head_logvar")?;

    let mut decoder_widths = vec![file.latent_dim];
    decoder_widths.extend_from_slice(&file.decoder_hidden);
    decoder_widths.push(target_arch.param_count());
    let mut decoder = Vec::new();
    for pair in decoder_widths.windows(2) {
        decoder.push(take_layer(&mut records, pair[0], pair[1], "decoder")?);
    }

    let model = HyperModel {
        latent_dim: file.latent_dim,
        target_arch,
        encoder_point,
        encoder_head,
        head_mu,
        head_logvar,
        decoder,
    };
    if !model.all_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite parameters".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rng_from_seed, sample_ball};
    use crate::model::{loss_forward, LossKind, TrainConfig};

    fn model() -> HyperModel {
        let mut c = TrainConfig::new(LossKind::Chamfer, 0.01, 1, 0);
        c.latent_dim = 6;
        c.encoder_widths = vec![3, 8, 12];
        c.encoder_head = 8;
        c.decoder_hidden = vec![16, 24];
        c.target_widths = vec![3, 6, 3];
        let mut rng = rng_from_seed(21);
        HyperModel::init(&c, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_identity_and_loss_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let m2 = load_checkpoint(&path).unwrap();
        assert_eq!(m, m2);

        // save -> load -> save is a fixed point.
        let path2 = dir.path().join("model2.json");
        save_checkpoint(&m2, &path2).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), std::fs::read_to_string(&path2).unwrap());

        let mut rng = rng_from_seed(33);
        let pc = sample_ball(14, &mut rng).unwrap();
        let prior = sample_ball(14, &mut rng).unwrap();
        let eps = vec![0.1; m.latent_dim];
        let a = loss_forward(&m, &pc, &prior, Some(&eps), LossKind::Chamfer, 0.01).unwrap();
        let b = loss_forward(&m2, &pc, &prior, Some(&eps), LossKind::Chamfer, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_names_missing_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated = text.replace("\"layers\"", "\"dropped\"");
        std::fs::write(&path, truncated).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("layers"), "{}", err);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":9", 1))
            .unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{}", err);
    }

    #[test]
    fn length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut m = model();
        save_checkpoint(&m, &path).unwrap();

        // Declared widths no longer match the stored arrays.
        m.encoder_head.w.pop();
        let r = save_checkpoint(&m, &path);
        assert!(r.is_ok(), "save does not re-derive widths");
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("weight array"), "{}", err);
    }
}
