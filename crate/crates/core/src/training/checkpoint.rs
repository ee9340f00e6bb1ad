//! Trainer state in a `DAWT` container: parameters, batch-norm buffers, EMA
//! shadows, AdamW moments, counters, and the codebook the run was keyed by.

use std::path::Path;

use crate::codebook::{Codebook, CodebookSpec, DropoutPattern, LayerSpec};
use crate::config::{model_entries, parse_layers, set_model_key, set_train_key, train_entries, format_layers};
use crate::container::{Container, TensorRecord};
use crate::error::{Error, Result};
use crate::model::{Generator, ModelConfig};
use crate::nn::Module;

use super::{AdamW, Distance, Ema, TrainConfig, Trainer};

const KIND: &str = "checkpoint";

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    /// Training config the checkpoint was written under.
    pub train_cfg: TrainConfig,
    pub codebook: Codebook,
    pub n_items: usize,
    pub epoch: u64,
    pub step: u64,
    container: Container,
}

fn fmt_err(m: impl Into<String>) -> Error {
    Error::CheckpointFormat(m.into())
}

fn tensor_of(name: &str, shape: &[usize], values: &[f32]) -> TensorRecord {
    TensorRecord::new(name, shape, values.to_vec())
}

pub(crate) fn encode_trainer(t: &Trainer, codebook: &Codebook, n_items: usize) -> Container {
    let mut c = Container::default();
    c.set("kind", KIND);
    for (k, v) in model_entries(t.model.config()) {
        c.set(&format!("model.{k}"), v);
    }
    for (k, v) in train_entries(&t.cfg) {
        c.set(&format!("train.{k}"), v);
    }
    c.set("codebook.layers", format_layers(&codebook.spec.layers));
    c.set("codebook.n_clusters", codebook.spec.n_clusters);
    c.set("codebook.seed", codebook.spec.seed);
    c.set("codebook.hash", codebook.hash());
    c.set("data.n", n_items);
    c.set("state.epoch", t.epoch);
    c.set("state.step", t.opt.step);

    let params = t.model.params();
    for p in &params {
        c.push(tensor_of(&format!("param/{}", p.name), &p.shape, &p.value));
    }
    for b in t.model.buffers() {
        c.push(tensor_of(&format!("buffer/{}", b.name), &b.shape, &b.value));
    }
    for (p, s) in params.iter().zip(&t.ema.shadow) {
        c.push(tensor_of(&format!("ema/{}", p.name), &p.shape, s));
    }
    for ((p, m), v) in params.iter().zip(&t.opt.m).zip(&t.opt.v) {
        c.push(tensor_of(&format!("adam_m/{}", p.name), &p.shape, m));
        c.push(tensor_of(&format!("adam_v/{}", p.name), &p.shape, v));
    }
    let width = codebook.spec.total_active();
    let indices: Vec<f32> = codebook
        .patterns
        .iter()
        .flat_map(|p| p.per_layer.iter().flatten().map(|&i| i as f32))
        .collect();
    c.push(TensorRecord::new("codebook/indices", &[codebook.len(), width], indices));
    if let Some(cl) = &codebook.cluster_of {
        c.push(TensorRecord::new(
            "codebook/clusters",
            &[cl.len()],
            cl.iter().map(|&v| v as f32).collect(),
        ));
    }
    c
}

/// Writes the full trainer state, keyed by `codebook`.
pub fn save_checkpoint(t: &Trainer, codebook: &Codebook, n_items: usize, path: &Path) -> Result<()> {
    encode_trainer(t, codebook, n_items).save(path)?;
    Ok(())
}

fn get<'a>(c: &'a Container, key: &str) -> Result<&'a str> {
    c.get(key).ok_or_else(|| fmt_err(format!("missing config key {key}")))
}

fn get_num<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    get(c, key)?
        .parse()
        .map_err(|_| fmt_err(format!("config key {key} is not a number")))
}

fn small_int(v: f32, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || !(0.0..16_777_216.0).contains(&v) {
        return Err(fmt_err(format!("{what}: {v} is not an index")));
    }
    Ok(v as usize)
}

fn decode_codebook_tensors(c: &Container, layers: Vec<LayerSpec>, n_clusters: usize, seed: u64) -> Result<Codebook> {
    let spec = CodebookSpec {
        layers,
        n_clusters,
        seed,
    };
    spec.validate().map_err(|e| fmt_err(format!("embedded codebook spec: {e}")))?;
    let width = spec.total_active();
    let t = c
        .tensor("codebook/indices")
        .ok_or_else(|| fmt_err("missing codebook/indices"))?;
    if t.shape.len() != 2 || t.shape[1] != width {
        return Err(fmt_err(format!("codebook/indices shape {:?}", t.shape)));
    }
    let mut patterns = Vec::with_capacity(t.shape[0]);
    for row in t.data.chunks_exact(width.max(1)).take(t.shape[0]) {
        let mut it = row.iter();
        let mut per_layer = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            per_layer.push(
                it.by_ref()
                    .take(l.k_active)
                    .map(|&v| small_int(v, "codebook index"))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let p = DropoutPattern { per_layer };
        p.check(&spec).map_err(|e| fmt_err(format!("embedded codebook: {e}")))?;
        patterns.push(p);
    }
    let cluster_of = match c.tensor("codebook/clusters") {
        Some(t) => Some(
            t.data
                .iter()
                .map(|&v| small_int(v, "cluster id").map(|x| x as u16))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(Codebook {
        spec,
        patterns,
        cluster_of,
        retries: 0,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path)?.map_err(|e| fmt_err(format!("{}: {e}", path.display())))?;
    Checkpoint::from_container(c)
}

impl Checkpoint {
    pub fn from_container(c: Container) -> Result<Self> {
        if c.get("kind") != Some(KIND) {
            return Err(fmt_err("container is not a training checkpoint"));
        }
        let mut model_cfg = ModelConfig::default();
        let mut train_cfg = TrainConfig::default();
        for (k, v) in &c.config {
            let applied = if let Some(key) = k.strip_prefix("model.") {
                set_model_key(&mut model_cfg, key, v).map_err(|e| fmt_err(e.to_string()))?
            } else if let Some(key) = k.strip_prefix("train.") {
                set_train_key(&mut train_cfg, key, v).map_err(|e| fmt_err(e.to_string()))?
            } else {
                true
            };
            if !applied {
                return Err(fmt_err(format!("unknown config key {k}")));
            }
        }
        model_cfg.validate().map_err(|e| fmt_err(e.to_string()))?;
        let layers = parse_layers(get(&c, "codebook.layers")?).map_err(|e| fmt_err(e.to_string()))?;
        let codebook = decode_codebook_tensors(&c, layers, get_num(&c, "codebook.n_clusters")?, get_num(&c, "codebook.seed")?)?;
        if codebook.hash() != get(&c, "codebook.hash")? {
            return Err(fmt_err("embedded codebook does not match its recorded hash"));
        }
        let ck = Self {
            model_cfg,
            train_cfg,
            codebook,
            n_items: get_num(&c, "data.n")?,
            epoch: get_num(&c, "state.epoch")?,
            step: get_num(&c, "state.step")?,
            container: c,
        };
        // fail early on missing or misshapen tensors
        ck.generator(true)?;
        Ok(ck)
    }

    fn tensor(&self, prefix: &str, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let key = format!("{prefix}/{name}");
        let t = self
            .container
            .tensor(&key)
            .ok_or_else(|| fmt_err(format!("missing tensor {key}")))?;
        if t.shape != shape {
            return Err(fmt_err(format!("tensor {key}: shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(&t.data)
    }

    /// Live or EMA weights; buffers always come from the live model.
    pub fn generator(&self, use_ema: bool) -> Result<Generator<f32>> {
        let mut g = Generator::new(self.model_cfg.clone(), 0)?;
        let prefix = if use_ema { "ema" } else { "param" };
        let loaded: Vec<(String, Vec<f32>)> = g
            .params()
            .iter()
            .map(|p| Ok((p.name.clone(), self.tensor(prefix, &p.name, &p.shape)?.to_vec())))
            .collect::<Result<_>>()?;
        for (p, (_, v)) in g.params_mut().into_iter().zip(loaded) {
            p.value = v;
        }
        let buffers: Vec<Vec<f32>> = g
            .buffers()
            .iter()
            .map(|b| Ok(self.tensor("buffer", &b.name, &b.shape)?.to_vec()))
            .collect::<Result<_>>()?;
        for (b, v) in g.buffers_mut().into_iter().zip(buffers) {
            b.value = v;
        }
        Ok(g)
    }

    /// Resuming needs the same model, the same codebook and the same item count.
    pub fn check_resumable(&self, model: &ModelConfig, codebook: &Codebook, n_items: usize) -> Result<()> {
        if self.n_items != n_items {
            return Err(Error::RunConfig(format!(
                "checkpoint was trained on {} items, dataset has {n_items}",
                self.n_items
            )));
        }
        if self.codebook.hash() != codebook.hash() {
            return Err(Error::RunConfig("checkpoint codebook differs from the configured codebook".into()));
        }
        if &self.model_cfg != model {
            return Err(Error::RunConfig("checkpoint model config differs from the run config".into()));
        }
        Ok(())
    }

    /// Rebuilds the trainer. `cfg` may differ from the stored training config
    /// (e.g. a lower learning rate for a follow-up stage).
    pub fn into_trainer(self, cfg: TrainConfig, distance: Distance<f32>) -> Result<Trainer> {
        cfg.validate()?;
        let mut model = self.generator(false)?;
        let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        let collect = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            names
                .iter()
                .map(|(n, s)| Ok(self.tensor(prefix, n, s)?.to_vec()))
                .collect()
        };
        let ema = Ema {
            decay: cfg.ema_decay,
            shadow: collect("ema")?,
        };
        let opt = AdamW {
            hyper: cfg.adam,
            step: self.step,
            m: collect("adam_m")?,
            v: collect("adam_v")?,
        };
        model.zero_grad();
        Ok(Trainer {
            model,
            opt,
            ema,
            cfg,
            distance,
            epoch: self.epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::assign_patterns;
    use crate::data::Dataset;
    use crate::training::DistanceKind;

    fn trained() -> (Trainer, Codebook) {
        let mcfg = ModelConfig::gradcheck();
        let spec = CodebookSpec::from_channels(&mcfg.hierarchy_channels, &mcfg.active_channels, 2, 1).unwrap();
        let clusters = [0u16, 1, 1, 0];
        let cb = assign_patterns(4, &spec, Some(&clusters)).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            epochs_phase1: 1,
            epochs_phase2: 1,
            wd_warmup_epochs: 1,
            distance: DistanceKind::Mse,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(mcfg, cfg, Distance::Mse).unwrap();
        let data = Dataset::synthetic(4, 32, 0).unwrap();
        t.run_epoch(&data, &cb).unwrap();
        (t, cb)
    }

    #[test]
    fn roundtrip_preserves_state() {
        let (t, cb) = trained();
        let c = encode_trainer(&t, &cb, 4);
        let bytes = c.encode();
        let ck = Checkpoint::from_container(Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(ck.codebook, Codebook { retries: 0, ..cb.clone() });
        assert_eq!(ck.epoch, 1);
        assert_eq!(ck.step, 2);
        assert_eq!(ck.model_cfg, *t.model.config());
        assert_eq!(ck.train_cfg, t.cfg);
        let back = ck.clone().into_trainer(t.cfg.clone(), Distance::Mse).unwrap();
        assert_eq!(back.model.checksum(), t.model.checksum());
        assert_eq!(back.opt, t.opt);
        assert_eq!(back.ema, t.ema);
        assert_eq!(encode_trainer(&back, &cb, 4).encode(), bytes);
        assert_eq!(ck.generator(true).unwrap().checksum(), t.ema_model().checksum());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let (t, cb) = trained();
        let bytes = encode_trainer(&t, &cb, 4).encode();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dawt");

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointFormat(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointFormat(_))));

        let mut c = encode_trainer(&t, &cb, 4);
        c.tensors.retain(|r| r.name != "adam_m/latent.weight");
        let ck = Checkpoint::from_container(c).unwrap();
        assert!(matches!(ck.into_trainer(t.cfg.clone(), Distance::Mse), Err(Error::CheckpointFormat(_))));

        let mut c = encode_trainer(&t, &cb, 4);
        c.set("codebook.hash", "00");
        assert!(matches!(Checkpoint::from_container(c), Err(Error::CheckpointFormat(_))));

        let mut c = encode_trainer(&t, &cb, 4);
        c.set("kind", "perceptual");
        assert!(matches!(Checkpoint::from_container(c), Err(Error::CheckpointFormat(_))));
    }
}
